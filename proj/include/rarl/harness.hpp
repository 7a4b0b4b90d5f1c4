#pragma once

// Run manifests, the experiment driver, ablation matrices and result files.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rarl/backbone.hpp"
#include "rarl/data_io.hpp"
#include "rarl/etf_space.hpp"
#include "rarl/losses.hpp"
#include "rarl/metrics.hpp"
#include "rarl/protocol.hpp"

namespace rarl {

namespace fs = std::filesystem;
using nlohmann::json;

class ManifestError : public Error {
 public:
  ManifestError(const std::string& what, std::string field, std::size_t line)
      : Error(what), field_(std::move(field)), line_(line) {}
  const std::string& field() const noexcept { return field_; }
  std::size_t line() const noexcept { return line_; }  // 0 when unknown

 private:
  std::string field_;
  std::size_t line_;
};

struct DatasetSpec {
  std::string kind = "gaussian_sphere";  // or "idx"
  SphereConfig sphere;
  std::string images, labels;
  std::size_t limit = 0;  // idx: keep the first n instances, 0 = all
};

struct RunManifest {
  std::string name = "run";
  DatasetSpec dataset;
  StreamConfig stream;
  BackboneConfig backbone;  // input_dim comes from the dataset
  OptimizerConfig optimizer;
  LossWeights loss;
  double eta_init = 10.0;
  double a_init = 0.1;
  bool shared_eta = true;
  std::size_t batch_size = 32;
  std::uint64_t train_seed = 0;
  std::size_t memory_cap = 20;
  std::uint64_t memory_seed = 0;
  std::size_t prototypes = 0;  // 0: one per dataset class
  std::uint64_t bank_seed = 0;
  ScoreMode score = ScoreMode::max_cosine;
  bool dump_features = false;
  std::string output_dir = "out";
};

// ---------------------------------------------------------------------------
// Manifest parsing

namespace detail {

inline std::size_t line_of_offset(const std::string& text, std::size_t off) {
  off = std::min(off, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(off), '\n'));
}

// Best-effort source line of a dotted field path: each component's quoted key
// is searched after the previous one.
inline std::size_t line_of_field(const std::string& text, const std::string& path) {
  if (text.empty()) return 0;
  std::size_t pos = 0;
  std::stringstream ss(path);
  std::string part;
  bool found = false;
  while (std::getline(ss, part, '.')) {
    if (part.empty() || part.front() == '[') continue;
    const auto p = text.find("\"" + part + "\"", pos);
    if (p == std::string::npos) break;
    pos = p;
    found = true;
  }
  return found ? line_of_offset(text, pos) : 0;
}

// Reads fields from one JSON object and rejects keys nobody asked for.
class Fields {
 public:
  Fields(const json& j, std::string path, const std::string& text) : j_(j), path_(std::move(path)), text_(text) {
    if (!j_.is_object()) fail(path_, "expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      fail(child(key), std::string("wrong type: ") + e.what());
    }
  }
  template <class T, class Parse>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string s;
    seen_.insert(key);
    if (!j_.contains(key)) return;
    get(key, s);
    try {
      out = parse(s);
    } catch (const Error& e) {
      fail(child(key), e.what());
    }
  }
  std::optional<Fields> object(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return Fields(j_.at(key), child(key), text_);
  }
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) fail(child(k), "unknown key");
  }
  [[noreturn]] void fail(const std::string& field, const std::string& msg) const {
    const std::size_t line = line_of_field(text_, field);
    throw ManifestError("manifest" + (line ? ":" + std::to_string(line) : std::string{}) + ": " + field + ": " + msg,
                        field, line);
  }
  std::string child(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

 private:
  const json& j_;
  std::string path_;
  const std::string& text_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunManifest parse_manifest(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t line = detail::line_of_offset(text, e.byte ? e.byte - 1 : 0);
    throw ManifestError("manifest:" + std::to_string(line) + ": " + e.what(), "", line);
  }
  RunManifest m;
  detail::Fields root(j, "", text);
  root.get("name", m.name);
  root.get("output_dir", m.output_dir);
  if (auto d = root.object("dataset")) {
    d->get("kind", m.dataset.kind);
    d->get("classes", m.dataset.sphere.classes);
    d->get("per_class", m.dataset.sphere.per_class);
    d->get("dim", m.dataset.sphere.dim);
    d->get("spread", m.dataset.sphere.spread);
    d->get("seed", m.dataset.sphere.seed);
    d->get("min_angle_deg", m.dataset.sphere.min_angle_deg);
    d->get("images", m.dataset.images);
    d->get("labels", m.dataset.labels);
    d->get("limit", m.dataset.limit);
    d->finish();
    if (m.dataset.kind != "gaussian_sphere" && m.dataset.kind != "idx") d->fail("dataset.kind", "expected gaussian_sphere or idx");
    if (m.dataset.kind == "idx" && (m.dataset.images.empty() || m.dataset.labels.empty()))
      d->fail("dataset.images", "idx datasets need images and labels paths");
  }
  if (auto s = root.object("stream")) {
    s->get("base_classes", m.stream.base_classes);
    s->get("steps", m.stream.steps);
    s->get("seed", m.stream.seed);
    s->get("reserve_unknowns", m.stream.reserve_unknowns);
    s->get("test_fraction", m.stream.test_fraction);
    s->get_enum("policy", m.stream.policy, parse_split_policy);
    s->get("task_sizes", m.stream.explicit_sizes);
    s->finish();
    if (!(m.stream.test_fraction > 0.0 && m.stream.test_fraction < 1.0)) s->fail("stream.test_fraction", "must lie in (0,1)");
  }
  if (auto b = root.object("backbone")) {
    b->get("hidden", m.backbone.hidden);
    b->get_enum("activation", m.backbone.activation, parse_activation);
    b->get("feature_dim", m.backbone.feature_dim);
    b->get("seed", m.backbone.seed);
    b->finish();
  }
  if (auto o = root.object("optimizer")) {
    o->get("learning_rate", m.optimizer.learning_rate);
    o->get("momentum", m.optimizer.momentum);
    o->get("weight_decay", m.optimizer.weight_decay);
    o->get("epochs", m.optimizer.epochs);
    o->get("milestones", m.optimizer.milestones);
    o->get("decay_factor", m.optimizer.decay_factor);
    o->finish();
    try {
      m.optimizer.validate();
    } catch (const Error& e) {
      o->fail("optimizer", e.what());
    }
  }
  if (auto l = root.object("loss")) {
    l->get("lambda_vii", m.loss.lambda_vii);
    l->get("lambda_dis_base", m.loss.lambda_dis_base);
    l->get("A", m.loss.A);
    l->get("mix", m.loss.mix);
    l->get_enum("onbr_variant", m.loss.onbr_variant, parse_onbr_variant);
    l->get("eta_init", m.eta_init);
    l->get("a_init", m.a_init);
    l->get("shared_eta", m.shared_eta);
    if (auto t = l->object("toggles")) {
      auto& tg = m.loss.toggles;
      t->get("use_softmax_all", tg.use_softmax_all);
      t->get("use_L_V", tg.use_L_V);
      t->get("use_L_VII", tg.use_L_VII);
      t->get("use_PNBR", tg.use_PNBR);
      t->get("use_ONBR", tg.use_ONBR);
      t->get("use_L_dis", tg.use_L_dis);
      t->finish();
    }
    l->finish();
    try {
      m.loss.validate();
    } catch (const Error& e) {
      l->fail(m.loss.A < 0.0 || m.loss.A >= 2.0 / std::numbers::pi ? "loss.A" : "loss", e.what());
    }
    if (!(m.a_init > 0.0 && m.a_init < 1.0)) l->fail("loss.a_init", "must lie in (0,1)");
    if (!(m.eta_init > 0.0)) l->fail("loss.eta_init", "must be positive");
  }
  if (auto t = root.object("train")) {
    t->get("batch_size", m.batch_size);
    t->get("seed", m.train_seed);
    t->finish();
    if (m.batch_size == 0) t->fail("train.batch_size", "must be positive");
  }
  if (auto mem = root.object("memory")) {
    mem->get("cap", m.memory_cap);
    mem->get("seed", m.memory_seed);
    mem->finish();
  }
  if (auto b = root.object("bank")) {
    b->get("prototypes", m.prototypes);
    b->get("seed", m.bank_seed);
    b->finish();
  }
  if (auto e = root.object("eval")) {
    e->get_enum("score", m.score, parse_score_mode);
    e->get("dump_features", m.dump_features);
    e->finish();
  }
  root.finish();
  return m;
}

inline RunManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str());
}

// Canonical form with every field spelled out; hashing and re-parsing use it.
inline json manifest_to_json(const RunManifest& m) {
  const auto& tg = m.loss.toggles;
  json d{{"kind", m.dataset.kind}};
  if (m.dataset.kind == "idx") {
    d["images"] = m.dataset.images;
    d["labels"] = m.dataset.labels;
    d["limit"] = m.dataset.limit;
  } else {
    d["classes"] = m.dataset.sphere.classes;
    d["per_class"] = m.dataset.sphere.per_class;
    d["dim"] = m.dataset.sphere.dim;
    d["spread"] = m.dataset.sphere.spread;
    d["seed"] = m.dataset.sphere.seed;
    d["min_angle_deg"] = m.dataset.sphere.min_angle_deg;
  }
  return json{
      {"name", m.name},
      {"output_dir", m.output_dir},
      {"dataset", d},
      {"stream",
       {{"base_classes", m.stream.base_classes},
        {"steps", m.stream.steps},
        {"seed", m.stream.seed},
        {"reserve_unknowns", m.stream.reserve_unknowns},
        {"test_fraction", m.stream.test_fraction},
        {"policy", to_string(m.stream.policy)},
        {"task_sizes", m.stream.explicit_sizes}}},
      {"backbone",
       {{"hidden", m.backbone.hidden},
        {"activation", to_string(m.backbone.activation)},
        {"feature_dim", m.backbone.feature_dim},
        {"seed", m.backbone.seed}}},
      {"optimizer",
       {{"learning_rate", m.optimizer.learning_rate},
        {"momentum", m.optimizer.momentum},
        {"weight_decay", m.optimizer.weight_decay},
        {"epochs", m.optimizer.epochs},
        {"milestones", m.optimizer.milestones},
        {"decay_factor", m.optimizer.decay_factor}}},
      {"loss",
       {{"lambda_vii", m.loss.lambda_vii},
        {"lambda_dis_base", m.loss.lambda_dis_base},
        {"A", m.loss.A},
        {"mix", m.loss.mix},
        {"onbr_variant", to_string(m.loss.onbr_variant)},
        {"eta_init", m.eta_init},
        {"a_init", m.a_init},
        {"shared_eta", m.shared_eta},
        {"toggles",
         {{"use_softmax_all", tg.use_softmax_all},
          {"use_L_V", tg.use_L_V},
          {"use_L_VII", tg.use_L_VII},
          {"use_PNBR", tg.use_PNBR},
          {"use_ONBR", tg.use_ONBR},
          {"use_L_dis", tg.use_L_dis}}}}},
      {"train", {{"batch_size", m.batch_size}, {"seed", m.train_seed}}},
      {"memory", {{"cap", m.memory_cap}, {"seed", m.memory_seed}}},
      {"bank", {{"prototypes", m.prototypes}, {"seed", m.bank_seed}}},
      {"eval", {{"score", to_string(m.score)}, {"dump_features", m.dump_features}}}};
}

// Hash of everything that determines results; the output directory is excluded.
inline std::string manifest_hash(const RunManifest& m) {
  json j = manifest_to_json(m);
  j.erase("output_dir");
  const std::string s = j.dump();
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(s.data(), s.size());
  return os.str();
}

// ---------------------------------------------------------------------------
// Run

inline std::shared_ptr<const Dataset> materialize_dataset(const DatasetSpec& spec) {
  if (spec.kind == "idx") {
    Dataset ds = load_idx(spec.images, spec.labels);
    if (spec.limit && spec.limit < ds.size()) {
      std::vector<std::size_t> keep(spec.limit);
      std::iota(keep.begin(), keep.end(), std::size_t{0});
      Dataset cut{ds.name, ds.rows(keep), {ds.labels.begin(), ds.labels.begin() + static_cast<std::ptrdiff_t>(spec.limit)},
                  ds.num_classes, ds.seed};
      cut.validate();
      return std::make_shared<const Dataset>(std::move(cut));
    }
    return std::make_shared<const Dataset>(std::move(ds));
  }
  return std::make_shared<const Dataset>(gen_gaussian_sphere(spec.sphere));
}

struct RunOutcome {
  std::vector<TaskMetrics> history;
  std::vector<IntegrityReport> integrity;  // one per task trained in this process
  std::size_t max_exemplars_per_class = 0;
  std::size_t saturation_events = 0;
  std::string manifest_hash;
  std::string summary;  // summary.csv contents
  fs::path dir;
};

inline json metrics_record(const TaskMetrics& m, const std::string& hash) {
  json r{{"manifest_hash", hash}, {"task", m.task}, {"acc", m.acc}, {"known_score", m.known_mean_score},
         {"n_known", m.n_known}, {"n_unknown", m.n_unknown}};
  r["auroc"] = m.auroc ? json(*m.auroc) : json(nullptr);
  r["oscr"] = m.oscr ? json(*m.oscr) : json(nullptr);
  r["unknown_score"] = m.unknown_mean_score ? json(*m.unknown_mean_score) : json(nullptr);
  return r;
}

inline json loss_record(const StepRecord& s, const std::string& hash) {
  const auto& b = s.loss;
  return json{{"manifest_hash", hash}, {"task", s.task},  {"epoch", s.epoch}, {"step", s.step},
              {"L_ce", b.ce},          {"L_V", b.v},      {"L_VII", b.vii},   {"L_dis", b.dis},
              {"L_Total", b.total},    {"eta", b.eta},    {"a", b.a},         {"lambda_dis", b.lambda_dis},
              {"saturation", b.saturation}, {"vii_active", s.vii_active}};
}

inline std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Summary table rebuilt from metric records: per-task values, then Avg and Last.
inline std::string summary_from_records(const std::vector<json>& records) {
  if (records.empty()) throw Error("no metric records to summarize");
  const std::string hash = records.front().at("manifest_hash").get<std::string>();
  std::ostringstream os;
  os << "# manifest_hash=" << hash << "\n";
  os << "metric";
  for (const auto& r : records) os << ",task_" << r.at("task").get<std::size_t>();
  os << ",avg,last\n";
  for (const char* key : {"acc", "auroc", "oscr", "known_score", "unknown_score"}) {
    os << key;
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : records) {
      os << ",";
      if (r.contains(key) && !r.at(key).is_null()) {
        const double v = r.at(key).get<double>();
        os << format_value(v);
        sum += v;
        ++n;
      }
    }
    os << "," << (n ? format_value(sum / static_cast<double>(n)) : "");
    const auto& last = records.back();
    os << "," << (last.contains(key) && !last.at(key).is_null() ? format_value(last.at(key).get<double>()) : "");
    os << "\n";
  }
  return os.str();
}

inline std::vector<json> read_records(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<json> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out << s;
}

inline void dump_features_csv(const fs::path& p, const RunState& st, const TaskStream& stream, std::size_t t) {
  const Dataset& ds = *stream.data;
  std::ofstream out(p, std::ios::trunc);
  out << "instance_id,label,known";
  for (std::size_t k = 0; k < st.model.backbone().config().feature_dim; ++k) out << ",f" << k;
  out << "\n";
  out << std::setprecision(9);
  auto emit = [&](const std::vector<std::size_t>& idx, int known) {
    if (idx.empty()) return;
    const Tensor f = st.model.backbone().features(ds.rows(idx));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out << idx[i] << "," << ds.labels[idx[i]] << "," << known;
      for (double v : f.row(i)) out << "," << v;
      out << "\n";
    }
  };
  emit(stream.known_test[t], 1);
  emit(stream.unknown_test[t], 0);
}

struct RunOptions {
  bool resume = false;
  bool quiet = true;
  bool write_losses = true;
  std::size_t stop_after = 0;  // stop once this many tasks are complete; 0 runs them all
};

inline constexpr const char* kFailureMarker = "FAILED";

inline RunOutcome run(const RunManifest& m, const RunOptions& opt = {}) {
  RunOutcome res;
  res.dir = m.output_dir;
  res.manifest_hash = manifest_hash(m);
  fs::create_directories(res.dir);
  fs::remove(res.dir / kFailureMarker);
  write_text(res.dir / "manifest.json", manifest_to_json(m).dump(2) + "\n");

  const auto data = materialize_dataset(m.dataset);
  const TaskStream stream = build_task_stream(data, m.stream);
  BackboneConfig bc = m.backbone;
  bc.input_dim = data->dim();
  const std::size_t K = m.prototypes ? m.prototypes : data->num_classes;

  const fs::path ckpt = res.dir / "checkpoint.json";
  std::optional<RunState> loaded;
  if (opt.resume && fs::exists(ckpt)) {
    std::ifstream in(ckpt);
    json j = json::parse(in);
    if (j.value("manifest_hash", std::string{}) != res.manifest_hash)
      throw Error("checkpoint in " + res.dir.string() + " was written by a different manifest");
    loaded = run_state_from_json(j.at("state"));
  }
  RunState st = loaded ? std::move(*loaded)
                       : RunState{0,
                                  Model(bc, m.eta_init, m.a_init, m.shared_eta),
                                  std::nullopt,
                                  PrototypeBank::build(bc.feature_dim, K, m.bank_seed),
                                  ExemplarMemory{m.memory_cap, m.memory_seed, {}, {}},
                                  {},
                                  {}};

  // Record streams restart from the checkpointed history.
  {
    std::ostringstream ms;
    for (const auto& h : st.history) ms << metrics_record(h, res.manifest_hash).dump() << "\n";
    write_text(res.dir / "metrics.jsonl", ms.str());
    std::string kept;
    if (st.completed > 0 && fs::exists(res.dir / "losses.jsonl")) {
      std::ifstream in(res.dir / "losses.jsonl");
      for (std::string line; std::getline(in, line);)
        if (!line.empty() && json::parse(line).at("task").get<std::size_t>() <= st.completed) kept += line + "\n";
    }
    write_text(res.dir / "losses.jsonl", opt.write_losses ? kept : "");
  }
  std::ofstream metrics_out(res.dir / "metrics.jsonl", std::ios::app);
  std::ofstream losses_out(res.dir / "losses.jsonl", std::ios::app);

  TrainSettings ts{m.loss, m.optimizer, m.batch_size, m.train_seed};
  try {
    for (std::size_t t = st.completed; t < stream.tasks() && !(opt.stop_after && t >= opt.stop_after); ++t) {
      train_task(st, stream, t, ts, [&](const StepRecord& s) {
        res.saturation_events += s.loss.saturation;
        if (opt.write_losses) losses_out << loss_record(s, res.manifest_hash).dump() << "\n";
      });
      losses_out.flush();
      TaskMetrics tm = evaluate_task(st, stream, t, m.score);
      st.history.push_back(tm);
      metrics_out << metrics_record(tm, res.manifest_hash).dump() << "\n";
      metrics_out.flush();
      IntegrityReport ir = check_integrity(stream, st.memory, t);
      if (st.memory.max_per_class() > m.memory_cap) {
        ir.memory_bound = false;
        ir.problems.push_back("exemplar cap exceeded");
      }
      res.integrity.push_back(ir);
      if (!ir.ok()) {
        std::string msg = "protocol integrity violated at task " + std::to_string(t + 1) + ":";
        for (const auto& p : ir.problems) msg += " " + p + ";";
        throw Error(msg);
      }
      if (m.dump_features) dump_features_csv(res.dir / ("features_task" + std::to_string(t + 1) + ".csv"), st, stream, t);
      write_text(ckpt, json{{"manifest_hash", res.manifest_hash}, {"state", run_state_to_json(st)}}.dump() + "\n");
      if (!opt.quiet) {
        std::printf("[%s] task %zu/%zu acc=%.4f auroc=%s oscr=%s\n", m.name.c_str(), t + 1, stream.tasks(), tm.acc,
                    tm.auroc ? format_value(*tm.auroc).c_str() : "-", tm.oscr ? format_value(*tm.oscr).c_str() : "-");
        std::fflush(stdout);
      }
    }
  } catch (const std::exception& e) {
    metrics_out.flush();
    losses_out.flush();
    write_text(res.dir / kFailureMarker, std::string(e.what()) + "\n");
    throw;
  }
  metrics_out.close();
  res.history = st.history;
  res.max_exemplars_per_class = st.memory.max_per_class();
  res.summary = summary_from_records(read_records(res.dir / "metrics.jsonl"));
  write_text(res.dir / "summary.csv", res.summary);
  return res;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  std::string name;
  LossToggles toggles;
};

inline LossToggles toggles_of(bool all, bool dis, bool v, bool vii, bool pnbr, bool onbr) {
  LossToggles t;
  t.use_softmax_all = all;
  t.use_L_dis = dis;
  t.use_L_V = v;
  t.use_L_VII = vii;
  t.use_PNBR = pnbr;
  t.use_ONBR = onbr;
  return t;
}

inline std::vector<AblationRow> default_ablation_matrix() {
  return {{"softmax_all", toggles_of(true, false, false, false, false, false)},
          {"w_L_dis", toggles_of(false, true, false, false, false, false)},
          {"w_L_V", toggles_of(false, true, true, false, false, false)},
          {"wo_PNBR", toggles_of(false, true, true, true, false, false)},
          {"w_PNBR", toggles_of(false, true, true, true, true, false)},
          {"w_ONBR", toggles_of(false, true, false, false, false, true)},
          {"full", toggles_of(false, true, true, true, true, true)}};
}

inline std::vector<AblationRow> parse_ablation_matrix(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ManifestError(std::string("ablation matrix: ") + e.what(), "", detail::line_of_offset(text, e.byte));
  }
  if (!j.is_array() || j.empty()) throw ManifestError("ablation matrix must be a non-empty array", "", 0);
  std::vector<AblationRow> rows;
  std::set<std::string> names;
  for (std::size_t i = 0; i < j.size(); ++i) {
    detail::Fields f(j[i], "[" + std::to_string(i) + "]", text);
    AblationRow r;
    r.toggles = toggles_of(false, false, false, false, false, false);
    f.get("name", r.name);
    f.get("use_softmax_all", r.toggles.use_softmax_all);
    f.get("use_L_V", r.toggles.use_L_V);
    f.get("use_L_VII", r.toggles.use_L_VII);
    f.get("use_PNBR", r.toggles.use_PNBR);
    f.get("use_ONBR", r.toggles.use_ONBR);
    f.get("use_L_dis", r.toggles.use_L_dis);
    f.finish();
    if (r.name.empty()) f.fail(f.child("name"), "row needs a name");
    if (!names.insert(r.name).second) f.fail(f.child("name"), "duplicate row name '" + r.name + "'");
    rows.push_back(r);
  }
  return rows;
}

struct AblationOutcome {
  std::vector<std::string> rows;
  std::vector<RunOutcome> runs;
  std::string comparison;  // comparison.csv contents
};

inline double mean_of(const std::vector<TaskMetrics>& h, std::optional<double> TaskMetrics::*f) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& m : h)
    if (m.*f) {
      s += *(m.*f);
      ++n;
    }
  return n ? s / static_cast<double>(n) : std::nan("");
}

// One run per row under <output_dir>/<row>; only the toggles differ between rows.
inline AblationOutcome ablate(const RunManifest& base, const std::vector<AblationRow>& matrix,
                              const RunOptions& opt = {}) {
  AblationOutcome out;
  for (const auto& row : matrix) {
    RunManifest m = base;
    m.loss.toggles = row.toggles;
    m.name = base.name + "/" + row.name;
    m.output_dir = (fs::path(base.output_dir) / row.name).string();
    out.rows.push_back(row.name);
    out.runs.push_back(run(m, opt));
  }
  std::ostringstream os;
  os << "metric,row";
  const std::size_t T = out.runs.front().history.size();
  for (std::size_t t = 0; t < T; ++t) os << ",task_" << t + 1;
  os << ",average\n";
  for (const char* metric : {"oscr", "auroc", "acc"}) {
    for (std::size_t r = 0; r < out.runs.size(); ++r) {
      os << metric << "," << out.rows[r];
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& h : out.runs[r].history) {
        std::optional<double> v = std::string(metric) == "acc" ? std::optional<double>(h.acc)
                                  : std::string(metric) == "oscr" ? h.oscr
                                                                  : h.auroc;
        os << ",";
        if (v) {
          os << format_value(*v);
          sum += *v;
          ++n;
        }
      }
      os << "," << (n ? format_value(sum / static_cast<double>(n)) : "") << "\n";
    }
  }
  out.comparison = os.str();
  fs::create_directories(base.output_dir);
  write_text(fs::path(base.output_dir) / "comparison.csv", out.comparison);
  return out;
}

// ---------------------------------------------------------------------------
// ETF dump

inline std::string etf_csv(std::size_t d, std::size_t K, std::uint64_t seed) {
  const auto bank = build_etf(d, K, seed);
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c < K; ++c) os << (c ? "," : "") << bank.prototypes()(r, c);
    os << "\n";
  }
  return os.str();
}

}  // namespace rarl
