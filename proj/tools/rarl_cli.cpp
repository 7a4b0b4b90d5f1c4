// rarl: run manifests, ablation matrices, verification suites, ETF dumps.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "rarl/harness.hpp"
#include "rarl/verify.hpp"

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw rarl::Error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retentive angular representation learning for incremental open-set recognition"};
  app.require_subcommand(1);

  std::string manifest_path, matrix_path, suite, out_dir;
  bool resume = false, quiet = false;
  std::optional<double> onbr_a;
  std::size_t stop_after = 0;

  auto* run = app.add_subcommand("run", "Execute every task of a manifest");
  run->add_option("manifest", manifest_path, "Manifest file")->required();
  run->add_flag("--resume", resume, "Continue from the last checkpoint in the output directory");
  run->add_option("--out", out_dir, "Override the manifest's output directory");
  run->add_option("--onbr-A", onbr_a, "Override the ONBR shift A");
  run->add_option("--stop-after", stop_after, "Stop once this many tasks are complete (resume later)");
  run->add_flag("-q,--quiet", quiet);

  auto* abl = app.add_subcommand("ablate", "Run the ablation matrix");
  abl->add_option("manifest", manifest_path, "Manifest file")->required();
  abl->add_option("--matrix", matrix_path, "Matrix file (JSON array of named toggle sets)");
  abl->add_option("--out", out_dir, "Override the manifest's output directory");
  abl->add_option("--onbr-A", onbr_a, "Override the ONBR shift A");
  abl->add_flag("-q,--quiet", quiet);

  auto* ver = app.add_subcommand("verify", "Run a verification suite");
  ver->add_option("suite", suite, "etf | grad | separation | pnbr | metrics | all")
      ->required()
      ->check(CLI::IsMember({"etf", "grad", "separation", "pnbr", "metrics", "all"}));

  std::size_t d = 0, K = 0;
  std::uint64_t seed = 0;
  auto* dump = app.add_subcommand("dump-etf", "Print a d x K frame as CSV");
  dump->add_option("d", d)->required();
  dump->add_option("K", K)->required();
  dump->add_option("seed", seed)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    auto load = [&] {
      rarl::RunManifest m = rarl::load_manifest(manifest_path);
      if (!out_dir.empty()) m.output_dir = out_dir;
      if (onbr_a) {
        m.loss.A = *onbr_a;
        m.loss.validate();
      }
      return m;
    };
    if (*run) {
      const auto res = rarl::run(load(), {resume, quiet, true, stop_after});
      std::cout << res.summary;
      return 0;
    }
    if (*abl) {
      const auto matrix =
          matrix_path.empty() ? rarl::default_ablation_matrix() : rarl::parse_ablation_matrix(slurp(matrix_path));
      const auto res = rarl::ablate(load(), matrix, {false, quiet, true});
      std::cout << res.comparison;
      return 0;
    }
    if (*ver) {
      bool ok = true;
      auto report = [&](const rarl::SuiteReport& r) {
        std::cout << r.str();
        ok = ok && r.pass();
      };
      if (suite == "etf" || suite == "all") report(rarl::verify_etf());
      if (suite == "grad" || suite == "all") report(rarl::verify_grad());
      if (suite == "separation" || suite == "all") report(rarl::verify_separation());
      if (suite == "pnbr" || suite == "all") report(rarl::verify_pnbr());
      if (suite == "metrics" || suite == "all") report(rarl::verify_metrics());
      return ok ? 0 : 1;
    }
    if (*dump) {
      std::cout << rarl::etf_csv(d, K, seed);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
