#pragma once

// Closed-set accuracy, AUROC and OSCR over known-ness scores.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "rarl/diffcore.hpp"
#include "rarl/etf_space.hpp"

namespace rarl {

enum class ScoreMode { max_cosine, max_softmax };

inline ScoreMode parse_score_mode(const std::string& s) {
  if (s == "max_cosine") return ScoreMode::max_cosine;
  if (s == "max_softmax") return ScoreMode::max_softmax;
  throw Error("unknown score mode '" + s + "'");
}
inline std::string to_string(ScoreMode m) { return m == ScoreMode::max_cosine ? "max_cosine" : "max_softmax"; }

struct ScoredPrediction {
  std::size_t predicted;  // active prototype column
  double score;           // higher = more known
};

// Argmax over active prototypes plus the known-ness score, per feature row.
inline std::vector<ScoredPrediction> score_features(const Tensor& features, const PrototypeBank& bank,
                                                    ScoreMode mode = ScoreMode::max_cosine, double eta = 1.0) {
  const auto active = bank.active_columns();
  if (active.empty()) throw Error("scoring needs at least one active class");
  const std::size_t d = bank.dim();
  if (features.cols() != d) throw ShapeError("feature width does not match bank dimension");
  const Tensor& m = bank.prototypes();
  std::vector<ScoredPrediction> out(features.rows());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    const auto z = features.row(i);
    double nrm = 0.0;
    for (double v : z) nrm += v * v;
    nrm = std::sqrt(nrm);
    if (!(nrm > 0.0)) throw DomainError("zero-norm feature for instance " + std::to_string(i), i);
    double best = -std::numeric_limits<double>::infinity();
    std::size_t arg = active.front();
    std::vector<double> cos(active.size());
    for (std::size_t k = 0; k < active.size(); ++k) {
      double dot = 0.0;
      for (std::size_t r = 0; r < d; ++r) dot += m(r, active[k]) * z[r];
      cos[k] = dot / nrm;
      if (cos[k] > best) {
        best = cos[k];
        arg = active[k];
      }
    }
    double score = best;
    if (mode == ScoreMode::max_softmax) {
      double zsum = 0.0;
      for (double c : cos) zsum += std::exp(eta * (c - best));
      score = 1.0 / zsum;
    }
    out[i] = ScoredPrediction{arg, score};
  }
  return out;
}

inline std::vector<double> knownness_score(const Tensor& features, const PrototypeBank& bank,
                                           ScoreMode mode = ScoreMode::max_cosine, double eta = 1.0) {
  const auto preds = score_features(features, bank, mode, eta);
  std::vector<double> s(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) s[i] = preds[i].score;
  return s;
}

template <class T>
double accuracy(const std::vector<T>& predicted, const std::vector<T>& truth) {
  if (predicted.size() != truth.size()) throw ShapeError("accuracy: prediction/truth length mismatch");
  if (predicted.empty()) throw Error("accuracy of an empty set");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) ok += predicted[i] == truth[i];
  return static_cast<double>(ok) / static_cast<double>(predicted.size());
}

// P(known > unknown) + 0.5 P(tie), via mid-ranks of the pooled scores.
inline double auroc(const std::vector<double>& known, const std::vector<double>& unknown) {
  if (known.empty() || unknown.empty()) throw Error("AUROC needs both known and unknown scores");
  const std::size_t nk = known.size(), nu = unknown.size(), n = nk + nu;
  std::vector<std::pair<double, bool>> all;
  all.reserve(n);
  for (double s : known) all.emplace_back(s, true);
  for (double s : unknown) all.emplace_back(s, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  // Doubled ranks keep mid-ranks integral.
  long long rank2_known = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && all[j].first == all[i].first) ++j;
    const long long mid2 = static_cast<long long>(i + 1 + j);  // 2 * average 1-based rank
    for (std::size_t k = i; k < j; ++k)
      if (all[k].second) rank2_known += mid2;
    i = j;
  }
  const long long nk_ll = static_cast<long long>(nk);
  // 2U = 2R - nk(nk+1)
  const long long u2 = rank2_known - nk_ll * (nk_ll + 1);
  return static_cast<double>(u2) / (2.0 * static_cast<double>(nk) * static_cast<double>(nu));
}

// Area under CCR(FPR) over descending distinct thresholds, starting at (0,0).
inline double oscr(const std::vector<double>& known_scores, const std::vector<bool>& known_correct,
                   const std::vector<double>& unknown_scores) {
  if (known_scores.empty() || unknown_scores.empty()) throw Error("OSCR needs both known and unknown scores");
  if (known_correct.size() != known_scores.size()) throw ShapeError("OSCR: correctness flags do not match scores");
  struct Item {
    double s;
    int kind;  // 1 known-correct, 0 known-wrong, -1 unknown
  };
  std::vector<Item> items;
  for (std::size_t i = 0; i < known_scores.size(); ++i) items.push_back({known_scores[i], known_correct[i] ? 1 : 0});
  for (double s : unknown_scores) items.push_back({s, -1});
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.s > b.s; });
  const double nk = static_cast<double>(known_scores.size());
  const double nu = static_cast<double>(unknown_scores.size());
  std::size_t cc = 0, fp = 0;
  double prev_fpr = 0.0, prev_ccr = 0.0, area = 0.0;
  for (std::size_t i = 0; i < items.size();) {
    std::size_t j = i;
    while (j < items.size() && items[j].s == items[i].s) {
      cc += items[j].kind == 1;
      fp += items[j].kind == -1;
      ++j;
    }
    const double fpr = static_cast<double>(fp) / nu;
    const double ccr = static_cast<double>(cc) / nk;
    area += (fpr - prev_fpr) * (ccr + prev_ccr) / 2.0;
    prev_fpr = fpr;
    prev_ccr = ccr;
    i = j;
  }
  return area;
}

// CCR at the lowest threshold that still reaches FPR = 1.
inline double ccr_at_full_fpr(const std::vector<double>& known_scores, const std::vector<bool>& known_correct,
                              const std::vector<double>& unknown_scores) {
  const double tau = *std::min_element(unknown_scores.begin(), unknown_scores.end());
  std::size_t cc = 0;
  for (std::size_t i = 0; i < known_scores.size(); ++i) cc += known_correct[i] && known_scores[i] >= tau;
  return static_cast<double>(cc) / static_cast<double>(known_scores.size());
}

}  // namespace rarl
