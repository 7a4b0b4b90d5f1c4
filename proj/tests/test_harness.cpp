#include <gtest/gtest.h>

#include <fstream>

#include "rarl/harness.hpp"

using namespace rarl;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("rarl_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Small two-task stream; `extra` is spliced into the top level.
std::string manifest_text(const fs::path& out, std::size_t steps = 2, std::size_t classes = 4,
                          std::size_t reserve = 0, const std::string& extra = "") {
  return R"({
  "name": "unit",
  "output_dir": ")" + out.string() + R"(",
  "dataset": {"kind": "gaussian_sphere", "classes": )" + std::to_string(classes) + R"(, "per_class": 20,
              "dim": 8, "spread": 0.3, "seed": 1},
  "stream": {"base_classes": 2, "steps": )" + std::to_string(steps) + R"(, "seed": 2, "reserve_unknowns": )" +
         std::to_string(reserve) + R"(},
  "backbone": {"hidden": [12], "activation": "relu", "feature_dim": 6, "seed": 3},
  "optimizer": {"learning_rate": 0.1, "momentum": 0.9, "weight_decay": 0.0005, "epochs": 2, "milestones": [1]},
  "train": {"batch_size": 16, "seed": 4},
  "memory": {"cap": 5, "seed": 5},
  "bank": {"seed": 6})" + extra + R"(
})";
}

}  // namespace

TEST(Manifest, ParsesAndFillsDefaults) {
  const RunManifest m = parse_manifest(manifest_text("o"));
  EXPECT_EQ(m.name, "unit");
  EXPECT_EQ(m.dataset.sphere.classes, 4u);
  EXPECT_EQ(m.stream.steps, 2u);
  EXPECT_EQ(m.backbone.hidden, (std::vector<std::size_t>{12}));
  EXPECT_EQ(m.optimizer.milestones, (std::vector<std::size_t>{1}));
  EXPECT_EQ(m.memory_cap, 5u);
  EXPECT_EQ(m.loss.lambda_vii, 0.01);
  EXPECT_EQ(m.loss.mix, 0.5);
  EXPECT_TRUE(m.loss.toggles.use_ONBR);
  EXPECT_EQ(m.score, ScoreMode::max_cosine);
  // canonical form parses back to the same hash
  const RunManifest again = parse_manifest(manifest_to_json(m).dump(2));
  EXPECT_EQ(manifest_hash(again), manifest_hash(m));
}

TEST(Manifest, UnknownKeyNamesLineAndField) {
  const std::string text = manifest_text("o", 2, 4, 0, R"(,
  "loss": {"A": 0.2, "lamda_vii": 0.5})");
  try {
    parse_manifest(text);
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.field(), "loss.lamda_vii");
    EXPECT_EQ(e.line(), 12u);
    EXPECT_NE(std::string(e.what()).find("manifest:12"), std::string::npos);
  }
}

TEST(Manifest, TypeAndRangeErrors) {
  EXPECT_THROW(parse_manifest(manifest_text("o", 2, 4, 0, R"(, "train": {"batch_size": "big"})")), ManifestError);
  try {
    parse_manifest(manifest_text("o", 2, 4, 0, R"(, "eval": {"score": "entropy"})"));
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.field(), "eval.score");
  }
  try {
    parse_manifest("{\"name\": \"x\",\n  \"stream\": {\"steps\": 2,}\n}");
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  EXPECT_THROW(parse_manifest(manifest_text("o", 2, 4, 0, R"(, "loss": {"A": 0.7})")), Error);
  EXPECT_THROW(load_manifest("/nonexistent/manifest.json"), Error);
}

TEST(Manifest, HashIgnoresOutputDir) {
  EXPECT_EQ(manifest_hash(parse_manifest(manifest_text("a"))), manifest_hash(parse_manifest(manifest_text("b"))));
  EXPECT_NE(manifest_hash(parse_manifest(manifest_text("a"))), manifest_hash(parse_manifest(manifest_text("a", 2, 5))));
}

TEST(Run, MinimalTwoTaskRun) {
  const auto out = scratch("minimal");
  const RunOutcome r = run(parse_manifest(manifest_text(out)));
  ASSERT_EQ(r.history.size(), 2u);
  EXPECT_TRUE(r.history[0].auroc && r.history[0].oscr);
  EXPECT_FALSE(r.history[1].auroc || r.history[1].oscr);
  for (const auto& ir : r.integrity) EXPECT_TRUE(ir.ok());
  EXPECT_LE(r.max_exemplars_per_class, 5u);
  for (const char* f : {"manifest.json", "metrics.jsonl", "losses.jsonl", "summary.csv", "checkpoint.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  EXPECT_FALSE(fs::exists(out / kFailureMarker));
  const std::string summary = slurp(out / "summary.csv");
  EXPECT_EQ(summary, r.summary);
  EXPECT_EQ(summary.rfind("# manifest_hash=" + r.manifest_hash + "\n", 0), 0u);
  EXPECT_NE(summary.find("metric,task_1,task_2,avg,last\n"), std::string::npos);
  // acc row has both tasks, auroc only the first
  std::istringstream is(summary);
  std::string line;
  std::getline(is, line);
  std::getline(is, line);
  std::getline(is, line);
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), 4);
  EXPECT_EQ(line.rfind("acc,", 0), 0u);
  std::getline(is, line);
  EXPECT_EQ(line.rfind("auroc,", 0), 0u);
  EXPECT_NE(line.find(",,"), std::string::npos);
  for (const auto& rec : read_records(out / "losses.jsonl")) EXPECT_EQ(rec.at("manifest_hash"), r.manifest_hash);
  fs::remove_all(out);
}

TEST(Run, AvgAndLastDefinitions) {
  const auto out = scratch("avg");
  const RunOutcome r = run(parse_manifest(manifest_text(out, 3, 6, 1)));
  ASSERT_EQ(r.history.size(), 3u);
  double acc = 0.0;
  for (const auto& h : r.history) acc += h.acc;
  EXPECT_NE(r.summary.find("acc," + format_value(r.history[0].acc) + "," + format_value(r.history[1].acc) + "," +
                           format_value(r.history[2].acc) + "," + format_value(acc / 3.0) + "," +
                           format_value(r.history[2].acc) + "\n"),
            std::string::npos)
      << r.summary;
  EXPECT_TRUE(r.history[2].oscr);  // reserved classes serve the last task
  fs::remove_all(out);
}

TEST(Run, RerunIsByteIdenticalAndSummaryRegenerates) {
  const auto a = scratch("rerun_a"), b = scratch("rerun_b");
  const RunOutcome ra = run(parse_manifest(manifest_text(a)));
  const RunOutcome rb = run(parse_manifest(manifest_text(b)));
  EXPECT_EQ(slurp(a / "summary.csv"), slurp(b / "summary.csv"));
  EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
  EXPECT_EQ(slurp(a / "losses.jsonl"), slurp(b / "losses.jsonl"));
  EXPECT_EQ(summary_from_records(read_records(a / "metrics.jsonl")), slurp(a / "summary.csv"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Run, ResumeMatchesUninterruptedRun) {
  const auto whole = scratch("whole"), staged = scratch("staged");
  run(parse_manifest(manifest_text(whole, 3, 6)));
  const RunManifest m = parse_manifest(manifest_text(staged, 3, 6));
  RunOptions first;
  first.stop_after = 1;
  EXPECT_EQ(run(m, first).history.size(), 1u);
  RunOptions second;
  second.resume = true;
  second.stop_after = 2;
  EXPECT_EQ(run(m, second).history.size(), 2u);
  RunOptions rest;
  rest.resume = true;
  run(m, rest);
  for (const char* f : {"summary.csv", "metrics.jsonl", "losses.jsonl", "checkpoint.json"})
    EXPECT_EQ(slurp(whole / f), slurp(staged / f)) << f;

  const RunManifest other = parse_manifest(manifest_text(staged, 3, 6, 1));
  RunOptions r;
  r.resume = true;
  EXPECT_THROW(run(other, r), Error);
  fs::remove_all(whole);
  fs::remove_all(staged);
}

TEST(Run, FailureLeavesMarker) {
  const auto out = scratch("fail");
  // three prototypes cannot hold the second task's classes
  const RunManifest m = parse_manifest(manifest_text(out, 2, 4, 0, R"(, "bank": {"prototypes": 3, "seed": 6})"));
  EXPECT_THROW(run(m), CapacityError);
  ASSERT_TRUE(fs::exists(out / kFailureMarker));
  EXPECT_NE(slurp(out / kFailureMarker).find("task 2"), std::string::npos);
  EXPECT_EQ(read_records(out / "metrics.jsonl").size(), 1u);
  fs::remove_all(out);
}

TEST(Ablation, DefaultMatrixProducesComparableRows) {
  const auto out = scratch("ablate");
  const auto matrix = default_ablation_matrix();
  ASSERT_EQ(matrix.size(), 7u);
  const AblationOutcome a = ablate(parse_manifest(manifest_text(out, 2, 5, 1)), matrix);
  ASSERT_EQ(a.runs.size(), 7u);
  for (const auto& row : matrix) EXPECT_TRUE(fs::exists(out / row.name / "summary.csv")) << row.name;
  EXPECT_EQ(slurp(out / "comparison.csv"), a.comparison);
  // identical splits: same evaluation pools in every row
  for (const auto& r : a.runs)
    for (std::size_t t = 0; t < 2; ++t) {
      EXPECT_EQ(r.history[t].n_known, a.runs[0].history[t].n_known);
      EXPECT_EQ(r.history[t].n_unknown, a.runs[0].history[t].n_unknown);
    }
  const RunOutcome& full = a.runs.back();
  const double avg = (*full.history[0].oscr + *full.history[1].oscr) / 2.0;
  EXPECT_NE(a.comparison.find("oscr,full," + format_value(*full.history[0].oscr) + "," +
                              format_value(*full.history[1].oscr) + "," + format_value(avg) + "\n"),
            std::string::npos)
      << a.comparison;
  EXPECT_EQ(a.comparison.rfind("metric,row,task_1,task_2,average\n", 0), 0u);
  fs::remove_all(out);
}

TEST(Ablation, MatrixParsing) {
  const auto rows = parse_ablation_matrix(R"([{"name": "a", "use_L_dis": true}, {"name": "b", "use_ONBR": true}])");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_TRUE(rows[0].toggles.use_L_dis);
  EXPECT_FALSE(rows[0].toggles.use_ONBR);
  EXPECT_TRUE(rows[1].toggles.use_ONBR);
  EXPECT_THROW(parse_ablation_matrix(R"([{"name": "a"}, {"name": "a"}])"), ManifestError);
  EXPECT_THROW(parse_ablation_matrix(R"([{"name": "a", "use_VII": true}])"), ManifestError);
  EXPECT_THROW(parse_ablation_matrix("[]"), ManifestError);
  EXPECT_THROW(parse_ablation_matrix(R"([{"use_L_dis": true}])"), ManifestError);
}

TEST(DumpEtf, CsvShapeAndValues) {
  const std::string csv = etf_csv(4, 3, 9);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  std::istringstream is(csv);
  std::string first;
  std::getline(is, first);
  EXPECT_EQ(std::count(first.begin(), first.end(), ','), 2);
  EXPECT_EQ(std::stod(first.substr(0, first.find(','))), build_etf(4, 3, 9).prototypes()(0, 0));
}

TEST(Features, DumpedWhenRequested) {
  const auto out = scratch("features");
  run(parse_manifest(manifest_text(out, 2, 4, 0, R"(, "eval": {"dump_features": true})")));
  const std::string csv = slurp(out / "features_task1.csv");
  EXPECT_EQ(csv.rfind("instance_id,label,known,f0,f1,f2,f3,f4,f5\n", 0), 0u);
  EXPECT_TRUE(fs::exists(out / "features_task2.csv"));
  fs::remove_all(out);
}
