#pragma once

// Verification suites: ETF geometry, finite-difference gradient checks over
// every loss, and brute-force metric oracles.

#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "rarl/backbone.hpp"
#include "rarl/diffcore.hpp"
#include "rarl/etf_space.hpp"
#include "rarl/losses.hpp"
#include "rarl/metrics.hpp"

namespace rarl {

// ---------------------------------------------------------------------------
// Brute-force metric oracles, deliberately independent of the fast paths.

inline double brute_auroc(const std::vector<double>& known, const std::vector<double>& unknown) {
  if (known.empty() || unknown.empty()) throw Error("AUROC needs both known and unknown scores");
  double wins = 0.0;
  for (double k : known)
    for (double u : unknown) wins += k > u ? 1.0 : (k == u ? 0.5 : 0.0);
  return wins / (static_cast<double>(known.size()) * static_cast<double>(unknown.size()));
}

inline double brute_oscr(const std::vector<double>& known_scores, const std::vector<bool>& known_correct,
                         const std::vector<double>& unknown_scores) {
  if (known_scores.empty() || unknown_scores.empty()) throw Error("OSCR needs both known and unknown scores");
  std::vector<double> taus(known_scores);
  taus.insert(taus.end(), unknown_scores.begin(), unknown_scores.end());
  std::sort(taus.begin(), taus.end(), std::greater<>());
  taus.erase(std::unique(taus.begin(), taus.end()), taus.end());
  std::vector<std::pair<double, double>> curve{{0.0, 0.0}};
  for (double tau : taus) {
    double cc = 0.0, fp = 0.0;
    for (std::size_t i = 0; i < known_scores.size(); ++i) cc += known_correct[i] && known_scores[i] >= tau;
    for (double u : unknown_scores) fp += u >= tau;
    curve.emplace_back(fp / static_cast<double>(unknown_scores.size()), cc / static_cast<double>(known_scores.size()));
  }
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i)
    area += (curve[i].first - curve[i - 1].first) * (curve[i].second + curve[i - 1].second) / 2.0;
  return area;
}

struct CaseResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<CaseResult> cases;
  bool pass() const {
    return !cases.empty() && std::all_of(cases.begin(), cases.end(), [](const auto& c) { return c.pass; });
  }
  std::string str() const {
    std::ostringstream os;
    for (const auto& c : cases) os << (c.pass ? "ok   " : "FAIL ") << suite << "/" << c.name << "  " << c.detail << "\n";
    os << suite << ": " << (pass() ? "pass" : "FAIL") << "\n";
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// ETF

inline CaseResult check_etf_matrix(const std::string& name, const Tensor& m, double tol = 1e-8) {
  const EtfDeviation dev = etf_deviation(m);
  std::ostringstream os;
  os.precision(3);
  os << "max |norm-1| " << dev.max_norm_error << " (column " << dev.worst_norm_column << "), max |cos+1/(K-1)| "
     << dev.max_cosine_error << " (columns " << dev.worst_pair_a << "," << dev.worst_pair_b << ")";
  return CaseResult{name, dev.max_norm_error <= tol && dev.max_cosine_error <= tol, os.str()};
}

inline const std::vector<std::pair<std::size_t, std::size_t>>& default_etf_grid() {
  static const std::vector<std::pair<std::size_t, std::size_t>> g{{3, 3},   {16, 16}, {64, 64},
                                                                  {512, 512}, {16, 6}, {128, 10}};
  return g;
}

inline SuiteReport verify_etf(const std::vector<std::pair<std::size_t, std::size_t>>& grid = default_etf_grid(),
                              std::uint64_t seed = 7, double tol = 1e-8) {
  SuiteReport r{"etf", {}};
  for (auto [d, K] : grid) {
    const auto bank = build_etf(d, K, seed);
    r.cases.push_back(check_etf_matrix("d=" + std::to_string(d) + ",K=" + std::to_string(K), bank.prototypes(), tol));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Gradients

// Wraps a value so its backward pass is scaled; used to inject faults.
inline Var scale_gradient(Var x, double factor) {
  return x.tape().record(x.value(), {x}, [factor](BackwardContext& c) {
    if (Tensor* g = c.in_grad(0))
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += factor * c.out_grad()[i];
  });
}

enum class GradFault { none, vii };

// A small model, bank and batch, reseeded per check point.
struct MicroInstance {
  Model model;
  PrototypeBank bank;
  Tensor x;
  std::vector<int> labels;
  std::vector<std::size_t> targets;
  std::vector<bool> old;
  Tensor snapshot_features;

  static MicroInstance make(std::uint64_t seed) {
    BackboneConfig bc;
    bc.input_dim = 5;
    bc.hidden = {6};
    bc.activation = Activation::tanh;
    bc.feature_dim = 4;
    bc.seed = seed;
    std::mt19937_64 rng(seed ^ 0xF00Dull);
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.05, 0.6);
    MicroInstance mi{Model(bc, 1.0 + 4.0 * u(rng), u(rng)), build_etf(4, 4, seed), Tensor(Shape{6, 5}), {0, 1, 2, 0, 1, 2},
                     {}, {}, Tensor{}};
    for (std::size_t i = 0; i < mi.x.numel(); ++i) mi.x[i] = g(rng);
    const auto cols = mi.bank.activate({0, 1, 2}, "micro");
    mi.bank.init_virtual_prototypes(cols, seed);
    for (int l : mi.labels) {
      mi.targets.push_back(mi.bank.assignment().column(l));
      mi.old.push_back(l == 0);
    }
    Model other(bc);
    for (Parameter* p : other.backbone().parameters())
      for (std::size_t i = 0; i < p->value.numel(); ++i) p->value[i] += 0.3 * g(rng);
    mi.snapshot_features = other.backbone().features(mi.x);
    return mi;
  }

  std::vector<Parameter*> parameters() {
    auto ps = model.parameters();
    for (std::size_t c : bank.virtual_columns()) ps.push_back(&bank.virtual_prototype(c));
    return ps;
  }
  std::vector<std::size_t> batch_columns() const {
    auto c = targets;
    std::sort(c.begin(), c.end());
    c.erase(std::unique(c.begin(), c.end()), c.end());
    return c;
  }
};

struct GradCase {
  std::string name;
  std::function<Var(Tape&, MicroInstance&)> graph;
};

namespace detail {

inline Var micro_ce(Tape& t, MicroInstance& m, bool onbr, OnbrVariant v = OnbrVariant::shift) {
  Var z = m.model.backbone().extract(t, m.x);
  OnbrRows rows{m.targets, m.old, 0.3, v};
  return ce_active(cosine_logits(z, m.bank, t.param(m.model.head().eta), LogitMode::active_only, onbr ? &rows : nullptr),
                   m.targets);
}

inline Var micro_vii(Tape& t, MicroInstance& m, bool with_pnbr, GradFault fault) {
  Var z = m.model.backbone().extract(t, m.x);
  auto vb = synthesize_virtual(m.x, m.labels, 0.5);
  Var zv = m.model.backbone().extract(t, vb->inputs);
  VirtualHead head = virtual_head(t, m.bank, m.batch_columns());
  std::optional<Var> a;
  if (with_pnbr) a = sigmoid(t.param(m.model.head().pnbr_raw));
  Var l = vii_loss(z, m.targets, zv, m.targets, head, t.param(m.model.vii_eta_param()), a);
  return fault == GradFault::vii ? scale_gradient(l, 1.5) : l;
}

}  // namespace detail

inline std::vector<GradCase> loss_grad_cases(GradFault fault = GradFault::none) {
  using namespace detail;
  std::vector<GradCase> cases;
  cases.push_back({"L_ce", [](Tape& t, MicroInstance& m) { return micro_ce(t, m, false); }});
  cases.push_back({"L_ce+ONBR", [](Tape& t, MicroInstance& m) { return micro_ce(t, m, true); }});
  cases.push_back({"L_ce+ONBR(angular)",
                   [](Tape& t, MicroInstance& m) { return micro_ce(t, m, true, OnbrVariant::angular_margin); }});
  cases.push_back({"L_ce(all)", [](Tape& t, MicroInstance& m) {
                     Var z = m.model.backbone().extract(t, m.x);
                     return ce_active(cosine_logits(z, m.bank, t.param(m.model.head().eta), LogitMode::all), m.targets);
                   }});
  cases.push_back({"L_V", [](Tape& t, MicroInstance& m) {
                     auto vb = synthesize_virtual(m.x, m.labels, 0.5);
                     Var zv = m.model.backbone().extract(t, vb->inputs);
                     VirtualHead head = virtual_head(t, m.bank, m.batch_columns());
                     return virtual_ce(zv, head, m.targets, t.param(m.model.vii_eta_param()));
                   }});
  cases.push_back({"L_VII", [fault](Tape& t, MicroInstance& m) { return micro_vii(t, m, false, fault); }});
  cases.push_back({"L_VII+PNBR", [fault](Tape& t, MicroInstance& m) { return micro_vii(t, m, true, fault); }});
  cases.push_back({"L_dis", [](Tape& t, MicroInstance& m) {
                     return distill_loss(m.model.backbone().extract(t, m.x), m.snapshot_features);
                   }});
  cases.push_back({"L_Total", [fault](Tape& t, MicroInstance& m) {
                     LossWeights w;
                     w.A = 0.3;
                     Var z = m.model.backbone().extract(t, m.x);
                     Var eta = t.param(m.model.head().eta);
                     OnbrRows rows{m.targets, m.old, w.A, w.onbr_variant};
                     LossComponents c;
                     c.ce = ce_active(cosine_logits(z, m.bank, eta, LogitMode::active_only, &rows), m.targets);
                     auto vb = synthesize_virtual(m.x, m.labels, w.mix);
                     Var zv = m.model.backbone().extract(t, vb->inputs);
                     VirtualHead head = virtual_head(t, m.bank, m.batch_columns());
                     c.v = virtual_ce(zv, head, m.targets, eta);
                     Var vii = vii_loss(z, m.targets, zv, m.targets, head, eta, sigmoid(t.param(m.model.head().pnbr_raw)));
                     c.vii = fault == GradFault::vii ? scale_gradient(vii, 1.5) : vii;
                     c.dis = distill_loss(z, m.snapshot_features);
                     return total_loss(c, w, 2, 1, 2).value;
                   }});
  return cases;
}

// Each case is checked at `points` independently seeded micro-instances.
inline SuiteReport verify_grad(const std::vector<GradCase>& cases = loss_grad_cases(), std::size_t points = 10,
                               double tol = 1e-4, std::uint64_t seed = 11) {
  SuiteReport r{"grad", {}};
  for (const auto& gc : cases) {
    CaseResult cr{gc.name, true, {}};
    double worst = 0.0;
    std::size_t checked = 0;
    std::string where;
    for (std::size_t k = 0; k < points; ++k) {
      MicroInstance mi = MicroInstance::make(seed * 1000 + k);
      const auto params = mi.parameters();
      const FdReport rep =
          finite_diff_check([&](Tape& t) { return gc.graph(t, mi); }, std::span<Parameter* const>(params));
      if (rep.excluded) {
        cr.pass = false;
        where = "point " + std::to_string(k) + " crossed a non-smooth point";
        break;
      }
      checked += rep.checked;
      if (rep.max_rel_error >= worst) {
        worst = rep.max_rel_error;
        std::ostringstream os;
        os << "point " << k << " " << rep.worst_param << "[" << rep.worst_index << "] analytic " << rep.worst_analytic
           << " numeric " << rep.worst_numeric;
        where = os.str();
      }
    }
    if (!(worst < tol)) cr.pass = false;
    std::ostringstream os;
    os.precision(3);
    os << "max rel err " << worst << " over " << checked << " coords; worst " << where;
    cr.detail = os.str();
    r.cases.push_back(cr);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Sign structure of the VII gradient

namespace detail {

// Per-row cosines to two orthonormal virtual prototypes are set directly: the
// feature row is (c0, c1, sqrt(1 - c0^2 - c1^2)) against e1 and e2.
struct SeparationPoint {
  double int_own, int_other;    // intrinsic row of class 0
  double virt_own, virt_other;  // virtual row of class 0
  double eta;
  std::optional<double> a;
};

inline double separation_loss(const SeparationPoint& p) {
  auto row = [](Tensor& f, std::size_t i, double c0, double c1) {
    f(i, 0) = c0;
    f(i, 1) = c1;
    f(i, 2) = std::sqrt(1.0 - c0 * c0 - c1 * c1);
  };
  Tape t;
  Tensor fi(Shape{1, 3}), fv(Shape{1, 3});
  row(fi, 0, p.int_own, p.int_other);
  row(fv, 0, p.virt_own, p.virt_other);
  VirtualHead head{t.constant(Tensor::matrix(2, 3, {1, 0, 0, 0, 1, 0})), {0, 1}};
  std::optional<Var> a;
  if (p.a) a = t.constant(Tensor::scalar(*p.a));
  return vii_loss(t.constant(fi), {0}, t.constant(fv), {0}, head, t.constant(Tensor::scalar(p.eta)), a).item();
}

}  // namespace detail

// Central differences of L_VII with respect to each of the three cosines.
inline SuiteReport verify_separation(std::size_t points = 40, std::uint64_t seed = 3) {
  SuiteReport r{"separation", {}};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> c(-0.65, 0.65), e(0.5, 10.0), au(0.05, 0.6);
  const double h = 1e-6;
  double worst[3] = {-1e300, 1e300, 1e300};  // max of the negative one, min of the positive ones
  for (std::size_t k = 0; k < points; ++k) {
    detail::SeparationPoint p{c(rng), c(rng), c(rng), c(rng), e(rng), std::nullopt};
    if (k % 2) p.a = au(rng);
    auto d = [&](double detail::SeparationPoint::*field) {
      auto up = p, dn = p;
      up.*field += h;
      dn.*field -= h;
      return (detail::separation_loss(up) - detail::separation_loss(dn)) / (2.0 * h);
    };
    worst[0] = std::max(worst[0], d(&detail::SeparationPoint::virt_own));
    worst[1] = std::min(worst[1], d(&detail::SeparationPoint::int_own));
    worst[2] = std::min(worst[2], d(&detail::SeparationPoint::virt_other));
  }
  auto detail_of = [&](const char* what, double v) {
    std::ostringstream os;
    os.precision(4);
    os << what << " " << v << " over " << points << " points";
    return os.str();
  };
  r.cases.push_back({"dL/dcos(virtual,own)<0", worst[0] < 0.0, detail_of("largest", worst[0])});
  r.cases.push_back({"dL/dcos(intrinsic,own virtual)>0", worst[1] > 0.0, detail_of("smallest", worst[1])});
  r.cases.push_back({"dL/dcos(virtual,other virtual)>0", worst[2] > 0.0, detail_of("smallest", worst[2])});
  return r;
}

// ---------------------------------------------------------------------------
// PNBR

namespace detail {

// |d/dcos (-log sigma(eta * f(cos)))| at the given cosine, taken from the tape.
inline double pnbr_target_grad(double cosine, double a, double eta) {
  Parameter c{"cos", Tensor::scalar(cosine), false};
  Tape t;
  Var l = neg(log(sigmoid_prob(t.param(c), t.constant(Tensor::scalar(eta)), t.constant(Tensor::scalar(a)))));
  return std::abs(find_grad(t.backward(l), c)->item());
}

inline double pnbr_value(double cosine, double a) {
  Tape t;
  return pnbr(t.constant(Tensor::scalar(cosine)), t.constant(Tensor::scalar(a))).item();
}

}  // namespace detail

inline SuiteReport verify_pnbr() {
  SuiteReport r{"pnbr", {}};
  bool sub = true, unit = true;
  std::ostringstream bad;
  for (int ia = 1; ia < 100; ++ia) {
    const double a = ia / 100.0;
    for (int ic = 0; ic < 200; ++ic) {
      const double c = -1.0 + ic / 100.0;
      if (!(detail::pnbr_value(c, a) < c)) {
        if (sub) bad << "f(" << c << "; a=" << a << ") >= cos";
        sub = false;
      }
    }
    unit = unit && detail::pnbr_value(1.0, a) == 1.0;
  }
  r.cases.push_back({"strictly-subtractive", sub, sub ? "99 a x 200 cos in [-1,1)" : bad.str()});
  r.cases.push_back({"f(1)=1", unit, unit ? "exact for 99 a" : "f(1) != 1"});
  bool mono = true;
  std::ostringstream os;
  for (double eta : {1.0, 10.0}) {
    double prev = 0.0;
    for (int ia = 1; ia < 100; ++ia) {
      const double g = detail::pnbr_target_grad(0.5, ia / 100.0, eta);
      if (!(g > prev)) {
        if (mono) os << "not increasing at a=" << ia / 100.0 << " eta=" << eta;
        mono = false;
      }
      prev = g;
    }
  }
  r.cases.push_back({"focus-increases-with-a", mono, mono ? "cos 0.5, a in 0.01..0.99, eta 1 and 10" : os.str()});
  return r;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricInstance {
  std::vector<double> known, unknown;
  std::vector<bool> correct;
};

// Mixed score sets; every other instance is quantized to force ties.
inline MetricInstance random_metric_instance(std::mt19937_64& rng, std::size_t total = 200) {
  std::uniform_int_distribution<std::size_t> split(20, total - 20);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const bool quantize = u(rng) < 0.5;
  auto draw = [&](double shift) {
    double s = std::clamp(0.3 * u(rng) + shift + 0.5 * u(rng), 0.0, 1.0);
    return quantize ? std::round(s * 20.0) / 20.0 : s;
  };
  MetricInstance mi;
  const std::size_t nk = split(rng);
  for (std::size_t i = 0; i < nk; ++i) {
    mi.known.push_back(draw(0.2));
    mi.correct.push_back(u(rng) < 0.7);
  }
  for (std::size_t i = nk; i < total; ++i) mi.unknown.push_back(draw(0.0));
  return mi;
}

inline SuiteReport verify_metrics(std::size_t instances = 50, double tol = 1e-12, std::uint64_t seed = 5) {
  SuiteReport r{"metrics", {}};
  std::mt19937_64 rng(seed);
  double worst_auroc = 0.0, worst_oscr = 0.0;
  bool invariant = true, bounded = true;
  for (std::size_t k = 0; k < instances; ++k) {
    const MetricInstance mi = random_metric_instance(rng);
    const double a = auroc(mi.known, mi.unknown), o = oscr(mi.known, mi.correct, mi.unknown);
    worst_auroc = std::max(worst_auroc, std::abs(a - brute_auroc(mi.known, mi.unknown)));
    worst_oscr = std::max(worst_oscr, std::abs(o - brute_oscr(mi.known, mi.correct, mi.unknown)));
    // Strictly increasing transform: ranks and therefore both metrics are unchanged.
    auto tf = [](std::vector<double> v) {
      for (double& s : v) s = std::exp(3.0 * s) + s;
      return v;
    };
    invariant = invariant && auroc(tf(mi.known), tf(mi.unknown)) == a &&
                oscr(tf(mi.known), mi.correct, tf(mi.unknown)) == o;
    std::vector<std::size_t> pred(mi.correct.size()), truth(mi.correct.size(), 0);
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = mi.correct[i] ? 0 : 1;
    const double ccr1 = ccr_at_full_fpr(mi.known, mi.correct, mi.unknown);
    bounded = bounded && o <= ccr1 + 1e-15 && ccr1 <= accuracy(pred, truth) + 1e-15;
  }
  std::ostringstream os;
  os.precision(3);
  os << "max |fast-brute| " << worst_auroc << " over " << instances << " instances";
  r.cases.push_back({"auroc-oracle", worst_auroc <= tol, os.str()});
  os.str("");
  os << "max |fast-brute| " << worst_oscr << " over " << instances << " instances";
  r.cases.push_back({"oscr-oracle", worst_oscr <= tol, os.str()});
  r.cases.push_back({"monotone-invariance", invariant, invariant ? "exact" : "metric changed under a monotone transform"});
  r.cases.push_back({"oscr<=ccr(fpr=1)<=acc", bounded, bounded ? "holds" : "bound violated"});
  return r;
}

}  // namespace rarl
