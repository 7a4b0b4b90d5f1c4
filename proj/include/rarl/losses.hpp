#pragma once

// Training objectives over the retentive angular space: cosine cross-entropy
// restricted to active prototypes, virtual-class synthesis and classification,
// the virtual-intrinsic interaction loss with positive/negative boundary
// rectification, old/new boundary rectification, less-forget distillation and
// the weighted total.

#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rarl/diffcore.hpp"
#include "rarl/etf_space.hpp"

namespace rarl {

inline constexpr double kLogClampEps = 1e-12;

enum class LogitMode { active_only, all };
enum class OnbrVariant { shift, angular_margin };

inline OnbrVariant parse_onbr_variant(const std::string& s) {
  if (s == "shift") return OnbrVariant::shift;
  if (s == "angular_margin") return OnbrVariant::angular_margin;
  throw Error("unknown ONBR variant '" + s + "'");
}
inline std::string to_string(OnbrVariant v) { return v == OnbrVariant::shift ? "shift" : "angular_margin"; }

struct LossToggles {
  bool use_softmax_all = false;
  bool use_L_V = true;
  bool use_L_VII = true;
  bool use_PNBR = true;
  bool use_ONBR = true;
  bool use_L_dis = true;

  friend bool operator==(const LossToggles&, const LossToggles&) = default;
};

struct LossWeights {
  double lambda_vii = 0.01;
  double lambda_dis_base = 5.0;
  double A = 0.1;
  double mix = 0.5;
  OnbrVariant onbr_variant = OnbrVariant::shift;
  LossToggles toggles;

  void validate() const {
    if (lambda_vii < 0.0) throw Error("lambda_vii must be non-negative");
    if (lambda_dis_base < 0.0) throw Error("lambda_dis_base must be non-negative");
    if (!(A >= 0.0 && A < 2.0 / std::numbers::pi)) throw Error("ONBR A must lie in [0, 2/pi)");
    if (!(mix > 0.0 && mix < 1.0)) throw Error("mix lambda must lie in (0,1)");
  }
};

struct LossBreakdown {
  double ce = 0.0, v = 0.0, vii = 0.0, dis = 0.0, total = 0.0;
  double eta = 0.0, a = 0.0, lambda_dis = 0.0;
  std::size_t saturation = 0;

  std::string str() const {
    std::ostringstream os;
    os.precision(10);
    os << "L_ce=" << ce << " L_V=" << v << " L_VII=" << vii << " L_dis=" << dis << " L_Total=" << total
       << " eta=" << eta << " a=" << a << " lambda_dis=" << lambda_dis << " saturation=" << saturation;
    return os.str();
  }
};

class LossError : public Error {
 public:
  LossError(const std::string& what, LossBreakdown b) : Error(what + " [" + b.str() + "]"), breakdown_(b) {}
  const LossBreakdown& breakdown() const noexcept { return breakdown_; }

 private:
  LossBreakdown breakdown_;
};

// ---------------------------------------------------------------------------
// Scalar forms, used for properties and documentation-level checks.

// (cos - a) / (1 - a)
inline double pnbr(double cosine, double a) { return (cosine - a) / (1.0 - a); }

inline double onbr_shift(double A) { return A * std::numbers::pi / 2.0; }

inline double onbr(double cosine, double A, bool old_class, OnbrVariant variant = OnbrVariant::shift) {
  if (!(A >= 0.0 && A < 2.0 / std::numbers::pi)) throw Error("ONBR A must lie in [0, 2/pi)");
  if (!old_class) return cosine;
  const double s = onbr_shift(A);
  if (variant == OnbrVariant::shift) return (cosine - s) / (1.0 - s);
  const double c = std::clamp(cosine, -1.0, 1.0);
  return c * std::cos(s) - std::sqrt(1.0 - c * c) * std::sin(s);
}

// logistic(raw), kept strictly inside (0,1) where it would round to an endpoint
inline double pnbr_bound(double raw) {
  return std::clamp(detail::stable_sigmoid(raw), std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

// ---------------------------------------------------------------------------
// Fixed-prototype cosine head

// Row-normalized features against every column of the frame: rows x K.
inline Var cosine_matrix(Var features, const PrototypeBank& bank) {
  if (features.value().cols() != bank.dim())
    throw ShapeError("features of width " + std::to_string(features.value().cols()) + " for a d=" +
                     std::to_string(bank.dim()) + " bank");
  Tape& t = features.tape();
  return matmul(l2_normalize_rows(features), t.constant(bank.prototypes()));
}

inline std::vector<std::size_t> logit_columns(const PrototypeBank& bank, LogitMode mode) {
  if (mode == LogitMode::all) return all_columns(bank.count());
  auto cols = bank.active_columns();
  if (cols.empty()) throw Error("active-only logits need at least one active class");
  return cols;
}

// Old-class rows whose target cosine is rectified.
struct OnbrRows {
  std::vector<std::size_t> targets;  // prototype column per row
  std::vector<bool> old;             // row belongs to a class from an earlier task
  double A = 0.1;
  OnbrVariant variant = OnbrVariant::shift;
};

inline Var apply_onbr(Var cos, const OnbrRows& rows) {
  const std::size_t n = cos.value().rows(), K = cos.value().cols();
  if (rows.targets.size() != n || rows.old.size() != n) throw ShapeError("ONBR rows do not match the batch");
  std::vector<bool> mask(n * K, false);
  bool any = false;
  for (std::size_t i = 0; i < n; ++i)
    if (rows.old[i]) {
      mask[i * K + rows.targets[i]] = true;
      any = true;
    }
  if (!any || rows.A == 0.0) return cos;
  const double s = onbr_shift(rows.A);
  if (rows.variant == OnbrVariant::shift)
    return apply_where(
        cos, mask, [s](double c) { return (c - s) / (1.0 - s); }, [s](double) { return 1.0 / (1.0 - s); });
  const double cs = std::cos(s), sn = std::sin(s);
  constexpr double lim = 1.0 - 1e-12;
  return apply_where(
      cos, mask,
      [cs, sn, lim](double c) {
        c = std::clamp(c, -lim, lim);
        return c * cs - std::sqrt(1.0 - c * c) * sn;
      },
      [cs, sn, lim](double c) {
        c = std::clamp(c, -lim, lim);
        return cs + c * sn / std::sqrt(1.0 - c * c);
      });
}

struct Logits {
  Var values;                        // rows x K, eta * cosine
  std::vector<std::size_t> columns;  // softmax index set
};

inline Logits cosine_logits(Var features, const PrototypeBank& bank, Var eta, LogitMode mode,
                            const OnbrRows* onbr_rows = nullptr) {
  Var cos = cosine_matrix(features, bank);
  if (onbr_rows) cos = apply_onbr(cos, *onbr_rows);
  return Logits{mul(eta, cos), logit_columns(bank, mode)};
}

inline Var softmax_probs(const Logits& l) { return softmax_masked(l.values, l.columns); }

// Mean negative log-likelihood of the target prototype columns.
inline Var ce_active(const Logits& logits, const std::vector<std::size_t>& targets) {
  std::map<std::size_t, std::size_t> pos;
  for (std::size_t k = 0; k < logits.columns.size(); ++k) pos[logits.columns[k]] = k;
  std::vector<std::size_t> idx(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    auto it = pos.find(targets[i]);
    if (it == pos.end())
      throw Error("label of instance " + std::to_string(i) + " is bound to inactive prototype " + std::to_string(targets[i]));
    idx[i] = it->second;
  }
  return neg(mean(pick(log_softmax_masked(logits.values, logits.columns), idx)));
}

// ---------------------------------------------------------------------------
// Virtual classes

struct VirtualBatch {
  Tensor inputs;
  std::vector<int> labels;
  std::vector<bool> is_virtual;
};

// x^V = mix * x + (1 - mix) / (K_batch - 1) * sum of the other classes' batch-mean inputs.
// Returns nothing when the batch holds fewer than two classes.
inline std::optional<VirtualBatch> synthesize_virtual(const Tensor& inputs, const std::vector<int>& labels,
                                                      double mix) {
  if (inputs.rank() != 2 || inputs.rows() != labels.size()) throw ShapeError("synthesize_virtual: labels do not match inputs");
  const std::size_t n = inputs.rows(), D = inputs.cols();
  std::map<int, std::vector<double>> means;
  std::map<int, std::size_t> counts;
  for (std::size_t i = 0; i < n; ++i) {
    auto& m = means[labels[i]];
    m.resize(D, 0.0);
    for (std::size_t j = 0; j < D; ++j) m[j] += inputs(i, j);
    ++counts[labels[i]];
  }
  const std::size_t kb = means.size();
  if (kb < 2) return std::nullopt;
  std::vector<double> total(D, 0.0);
  for (auto& [l, m] : means)
    for (std::size_t j = 0; j < D; ++j) {
      m[j] /= static_cast<double>(counts[l]);
      total[j] += m[j];
    }
  const double w = (1.0 - mix) / static_cast<double>(kb - 1);
  VirtualBatch vb{Tensor(Shape{n, D}), labels, std::vector<bool>(n, true)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto& own = means[labels[i]];
    for (std::size_t j = 0; j < D; ++j) vb.inputs(i, j) = mix * inputs(i, j) + w * (total[j] - own[j]);
  }
  return vb;
}

// Normalized virtual prototypes of a set of columns, stacked Kv x d.
struct VirtualHead {
  Var prototypes;
  std::vector<std::size_t> columns;

  std::size_t position(std::size_t col) const {
    for (std::size_t k = 0; k < columns.size(); ++k)
      if (columns[k] == col) return k;
    throw Error("missing virtual prototype for column " + std::to_string(col));
  }
  std::vector<std::size_t> positions(const std::vector<std::size_t>& cols) const {
    std::vector<std::size_t> out;
    out.reserve(cols.size());
    for (std::size_t c : cols) out.push_back(position(c));
    return out;
  }
};

inline VirtualHead virtual_head(Tape& tape, PrototypeBank& bank, const std::vector<std::size_t>& columns) {
  if (columns.empty()) throw Error("virtual head needs at least one class");
  std::vector<Var> rows;
  for (std::size_t c : columns) {
    if (!bank.has_virtual(c)) throw Error("missing virtual prototype for column " + std::to_string(c));
    rows.push_back(tape.param(bank.virtual_prototype(c)));
  }
  return VirtualHead{l2_normalize_rows(concat_rows(rows)), columns};
}

// Cosine of each feature row with each virtual prototype: rows x Kv.
inline Var virtual_cosines(Var features, const VirtualHead& head) {
  return matmul(l2_normalize_rows(features), transpose(head.prototypes));
}

inline Var virtual_ce(Var virtual_features, const VirtualHead& head, const std::vector<std::size_t>& targets, Var eta) {
  Var logits = mul(eta, virtual_cosines(virtual_features, head));
  return neg(mean(pick(log_softmax_masked(logits, all_columns(head.columns.size())), head.positions(targets))));
}

inline Var pnbr(Var cosine, Var a) { return div(sub(cosine, a), shift(neg(a), 1.0)); }

// sigma(eta * s), s the raw cosine or its PNBR rectification when `a` is given.
inline Var sigmoid_prob(Var cosine, Var eta, std::optional<Var> a) {
  return sigmoid(mul(eta, a ? pnbr(cosine, *a) : cosine));
}

// Mean over intrinsic and virtual rows of
//   virtual:   -log p_y - sum_{c != y} log(1 - p_c)
//   intrinsic: -log(1 - p_y)
// with p from sigmoid_prob over the head's virtual prototypes. Either side may be absent.
inline Var vii_loss(std::optional<Var> intrinsic, const std::vector<std::size_t>& intrinsic_targets,
                    std::optional<Var> virtuals, const std::vector<std::size_t>& virtual_targets,
                    const VirtualHead& head, Var eta, std::optional<Var> a) {
  std::vector<Var> parts;
  std::vector<std::size_t> targets;
  std::size_t n_int = 0;
  if (intrinsic) {
    parts.push_back(*intrinsic);
    n_int = intrinsic->value().rows();
    targets.insert(targets.end(), intrinsic_targets.begin(), intrinsic_targets.end());
  }
  if (virtuals) {
    parts.push_back(*virtuals);
    targets.insert(targets.end(), virtual_targets.begin(), virtual_targets.end());
  }
  if (parts.empty()) throw Error("vii_loss needs intrinsic or virtual instances");
  Var feats = parts.size() == 1 ? parts.front() : concat_rows(parts);
  const std::size_t n = feats.value().rows();
  if (targets.size() != n) throw ShapeError("vii_loss: targets do not match instances");
  Var p = sigmoid_prob(virtual_cosines(feats, head), eta, a);
  const std::size_t kv = head.columns.size();
  const auto pos = head.positions(targets);

  Tensor w_pos(Shape{n, kv}), w_neg(Shape{n, kv});
  for (std::size_t i = 0; i < n; ++i) {
    if (i < n_int) {
      w_neg(i, pos[i]) = 1.0;
    } else {
      for (std::size_t c = 0; c < kv; ++c) (c == pos[i] ? w_pos : w_neg)(i, c) = 1.0;
    }
  }
  Tape& t = feats.tape();
  std::size_t saturated = 0;
  const Tensor& pv = p.value();
  for (std::size_t i = 0; i < pv.numel(); ++i)
    if ((w_pos[i] != 0.0 || w_neg[i] != 0.0) && (pv[i] < kLogClampEps || pv[i] > 1.0 - kLogClampEps)) ++saturated;
  t.note_saturation(saturated);

  Var log_p = log(clamp(p, kLogClampEps, 1.0 - kLogClampEps));
  Var log_q = log(clamp(shift(neg(p), 1.0), kLogClampEps, 1.0 - kLogClampEps));
  Var total = add(sum(mul(log_p, t.constant(std::move(w_pos)))), sum(mul(log_q, t.constant(std::move(w_neg)))));
  return scale(total, -1.0 / static_cast<double>(n));
}

// 1 - mean cosine between live features and detached snapshot features.
inline Var distill_loss(Var features, const Tensor& snapshot_features) {
  if (features.value().shape() != snapshot_features.shape())
    throw ShapeError("distill_loss: snapshot features of shape " + shape_str(snapshot_features.shape()));
  Tape& t = features.tape();
  Var old = t.constant(snapshot_features);
  return shift(neg(mean(row_dot(l2_normalize_rows(features), l2_normalize_rows(old)))), 1.0);
}

// ---------------------------------------------------------------------------
// Total

struct LossComponents {
  Var ce;
  std::optional<Var> v;
  std::optional<Var> vii;
  std::optional<Var> dis;
  double eta = 0.0;
  double a = 0.0;
  std::size_t saturation = 0;
};

inline double lambda_dis(const LossWeights& w, std::size_t task_index, std::size_t k_new, std::size_t k_old) {
  if (task_index < 2 || k_old == 0) return 0.0;
  return w.lambda_dis_base * std::sqrt(static_cast<double>(k_new) / static_cast<double>(k_old));
}

struct TotalLoss {
  Var value;
  LossBreakdown breakdown;
};

// L_Total = L_ce + L_V + lambda_VII * L_VII + lambda_dis * L_dis; disabled parts contribute 0.
inline TotalLoss total_loss(const LossComponents& c, const LossWeights& w, std::size_t task_index, std::size_t k_new,
                            std::size_t k_old) {
  LossBreakdown b;
  b.eta = c.eta;
  b.a = c.a;
  b.saturation = c.saturation;
  b.ce = c.ce.item();
  Var total = c.ce;
  if (c.v && w.toggles.use_L_V) {
    b.v = c.v->item();
    total = add(total, *c.v);
  }
  if (c.vii && w.toggles.use_L_VII) {
    b.vii = c.vii->item();
    total = add(total, scale(*c.vii, w.lambda_vii));
  }
  b.lambda_dis = w.toggles.use_L_dis ? lambda_dis(w, task_index, k_new, k_old) : 0.0;
  if (c.dis && b.lambda_dis > 0.0) {
    b.dis = c.dis->item();
    total = add(total, scale(*c.dis, b.lambda_dis));
  }
  b.total = total.item();
  for (double x : {b.ce, b.v, b.vii, b.dis, b.total})
    if (!std::isfinite(x)) throw LossError("non-finite loss component", b);
  return TotalLoss{total, b};
}

}  // namespace rarl
