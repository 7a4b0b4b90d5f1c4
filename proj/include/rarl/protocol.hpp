#pragma once

// Incremental open-set protocol: disjoint-label task streams, exemplar
// rehearsal memory, per-task training and evaluation with model snapshots.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "rarl/backbone.hpp"
#include "rarl/data_io.hpp"
#include "rarl/diffcore.hpp"
#include "rarl/etf_space.hpp"
#include "rarl/losses.hpp"
#include "rarl/metrics.hpp"

namespace rarl {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  };
  return splitmix(splitmix(splitmix(a) ^ b) ^ c);
}

// ---------------------------------------------------------------------------
// Task stream

enum class SplitPolicy { largest_remainder, strict };

inline SplitPolicy parse_split_policy(const std::string& s) {
  if (s == "largest_remainder") return SplitPolicy::largest_remainder;
  if (s == "strict") return SplitPolicy::strict;
  throw Error("unknown split policy '" + s + "'");
}
inline std::string to_string(SplitPolicy p) { return p == SplitPolicy::strict ? "strict" : "largest_remainder"; }

// Class count per task: `base` for the first, the rest split over `steps - 1`
// increments. Non-integral splits use largest remainders (later tasks take the
// extra classes) or are rejected in strict mode.
inline std::vector<std::size_t> task_sizes(std::size_t total_classes, std::size_t base, std::size_t steps,
                                           SplitPolicy policy = SplitPolicy::largest_remainder,
                                           const std::vector<std::size_t>& explicit_sizes = {}) {
  if (!explicit_sizes.empty()) {
    if (explicit_sizes.size() != steps) throw Error("explicit task sizes do not match the step count");
    if (std::accumulate(explicit_sizes.begin(), explicit_sizes.end(), std::size_t{0}) != total_classes)
      throw Error("explicit task sizes do not cover all classes");
    for (std::size_t s : explicit_sizes)
      if (s == 0) throw Error("explicit task sizes must be positive");
    return explicit_sizes;
  }
  if (steps == 0) throw Error("a task stream needs at least one step");
  if (base == 0 || base > total_classes) throw Error("base class count must lie in [1, total classes]");
  const std::size_t rest = total_classes - base;
  const std::size_t inc = steps - 1;
  if (inc == 0) {
    if (rest != 0) throw Error("single-step stream must cover all classes in its base task");
    return {base};
  }
  if (rest < inc) throw Error("not enough classes for " + std::to_string(inc) + " incremental tasks");
  if (rest % inc != 0 && policy == SplitPolicy::strict)
    throw Error(std::to_string(rest) + " remaining classes do not split equally over " + std::to_string(inc) +
                " incremental tasks; give explicit task sizes");
  std::vector<std::size_t> out{base};
  const std::size_t q = rest / inc, r = rest % inc;
  for (std::size_t k = 0; k < inc; ++k) out.push_back(q + (k >= inc - r ? 1 : 0));
  return out;
}

struct StreamConfig {
  std::size_t base_classes = 2;
  std::size_t steps = 2;
  std::uint64_t seed = 0;
  std::size_t reserve_unknowns = 0;  // classes held out as last-task unknowns
  double test_fraction = 0.25;
  SplitPolicy policy = SplitPolicy::largest_remainder;
  std::vector<std::size_t> explicit_sizes;
};

struct TaskStream {
  std::shared_ptr<const Dataset> data;
  std::vector<std::vector<int>> task_classes;           // Y_train^t
  std::vector<int> reserved;                            // held-out unknown classes
  std::vector<std::vector<std::size_t>> train;          // D_train^t
  std::vector<std::vector<std::size_t>> known_test;     // D_K^t
  std::vector<std::vector<std::size_t>> unknown_test;   // D_U^t
  std::uint64_t seed = 0;

  std::size_t tasks() const noexcept { return task_classes.size(); }
  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s;
    for (const auto& c : task_classes) s.push_back(c.size());
    return s;
  }
  std::vector<int> known_labels(std::size_t t) const {
    std::vector<int> out;
    for (std::size_t j = 0; j <= t; ++j) out.insert(out.end(), task_classes[j].begin(), task_classes[j].end());
    return out;
  }
};

inline TaskStream build_task_stream(std::shared_ptr<const Dataset> data, const StreamConfig& cfg) {
  data->validate();
  if (!(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0)) throw Error("test_fraction must lie in (0,1)");
  if (cfg.reserve_unknowns >= data->num_classes) throw Error("reserve_unknowns leaves no trainable classes");
  const std::size_t trainable = data->num_classes - cfg.reserve_unknowns;
  const auto sizes = task_sizes(trainable, cfg.base_classes, cfg.steps, cfg.policy, cfg.explicit_sizes);

  std::vector<int> order(data->num_classes);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(cfg.seed, 0xC1A55));
  std::shuffle(order.begin(), order.end(), rng);

  TaskStream s;
  s.data = data;
  s.seed = cfg.seed;
  std::size_t off = 0;
  for (std::size_t sz : sizes) {
    s.task_classes.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(off),
                                order.begin() + static_cast<std::ptrdiff_t>(off + sz));
    off += sz;
  }
  s.reserved.assign(order.begin() + static_cast<std::ptrdiff_t>(off), order.end());

  const auto parts = split(*data, {1.0 - cfg.test_fraction, cfg.test_fraction}, mix_seed(cfg.seed, 0x5B117));
  std::map<int, std::vector<std::size_t>> train_of, test_of;
  for (std::size_t i : parts[0]) train_of[data->labels[i]].push_back(i);
  for (std::size_t i : parts[1]) test_of[data->labels[i]].push_back(i);
  auto gather = [](const std::map<int, std::vector<std::size_t>>& by, const std::vector<int>& classes) {
    std::vector<std::size_t> out;
    for (int c : classes) {
      auto it = by.find(c);
      if (it != by.end()) out.insert(out.end(), it->second.begin(), it->second.end());
    }
    std::sort(out.begin(), out.end());
    return out;
  };
  const std::size_t T = s.task_classes.size();
  for (std::size_t t = 0; t < T; ++t) {
    s.train.push_back(gather(train_of, s.task_classes[t]));
    s.known_test.push_back(gather(test_of, s.known_labels(t)));
    if (t + 1 < T)
      s.unknown_test.push_back(gather(test_of, s.task_classes[t + 1]));
    else
      s.unknown_test.push_back(gather(test_of, s.reserved));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Exemplar memory

struct ExemplarMemory {
  std::size_t cap = 20;
  std::uint64_t seed = 0;
  std::map<int, std::vector<std::size_t>> store;
  std::vector<std::string> shortfalls;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [c, v] : store) n += v.size();
    return n;
  }
  std::size_t max_per_class() const {
    std::size_t m = 0;
    for (const auto& [c, v] : store) m = std::max(m, v.size());
    return m;
  }
  std::vector<std::size_t> indices() const {
    std::vector<std::size_t> out;
    for (const auto& [c, v] : store) out.insert(out.end(), v.begin(), v.end());
    std::sort(out.begin(), out.end());
    return out;
  }
};

// Seeded uniform sample of up to `cap` training instances for every class of task t.
inline void update_memory(ExemplarMemory& memory, const TaskStream& stream, std::size_t t) {
  const Dataset& ds = *stream.data;
  for (int c : stream.task_classes.at(t)) {
    if (memory.store.count(c)) throw Error("exemplars for class " + std::to_string(c) + " already selected");
    std::vector<std::size_t> pool;
    for (std::size_t i : stream.train[t])
      if (ds.labels[i] == c) pool.push_back(i);
    std::mt19937_64 rng(mix_seed(memory.seed, static_cast<std::uint64_t>(c), 0xE8E));
    std::shuffle(pool.begin(), pool.end(), rng);
    if (pool.size() < memory.cap) {
      memory.shortfalls.push_back("class " + std::to_string(c) + ": " + std::to_string(pool.size()) + " of " +
                                  std::to_string(memory.cap) + " exemplars available");
    } else {
      pool.resize(memory.cap);
    }
    std::sort(pool.begin(), pool.end());
    memory.store.emplace(c, std::move(pool));
  }
}

// ---------------------------------------------------------------------------
// Run state, training and evaluation

struct TaskMetrics {
  std::size_t task = 0;  // 1-based
  double acc = 0.0;
  std::optional<double> auroc;
  std::optional<double> oscr;
  double known_mean_score = 0.0;
  std::optional<double> unknown_mean_score;
  std::size_t n_known = 0, n_unknown = 0;
};

struct RunState {
  std::size_t completed = 0;
  Model model;
  std::optional<ModelSnapshot> snapshot;
  PrototypeBank bank;
  ExemplarMemory memory;
  std::vector<TaskMetrics> history;
  SgdState optimizer;
};

struct TrainSettings {
  LossWeights weights;
  OptimizerConfig optimizer;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct StepRecord {
  std::size_t task, epoch, step;
  LossBreakdown loss;
  bool vii_active;
};
using StepLogger = std::function<void(const StepRecord&)>;

// Deterministic epoch order over the task's training pool.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::vector<std::size_t> pool, std::uint64_t seed,
                                                           std::size_t task, std::size_t epoch, std::size_t batch) {
  if (batch == 0) throw Error("batch size must be positive");
  std::mt19937_64 rng(mix_seed(seed, task, epoch));
  std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < pool.size(); i += batch)
    out.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(i),
                     pool.begin() + static_cast<std::ptrdiff_t>(std::min(pool.size(), i + batch)));
  return out;
}

inline std::vector<std::size_t> training_pool(const RunState& st, const TaskStream& stream, std::size_t t) {
  std::vector<std::size_t> pool = stream.train.at(t);
  const auto mem = st.memory.indices();
  pool.insert(pool.end(), mem.begin(), mem.end());
  std::sort(pool.begin(), pool.end());
  return pool;
}

// One optimization step on a batch of dataset rows. Returns the loss breakdown.
inline StepRecord train_step(RunState& st, const TaskStream& stream, std::size_t t, const TrainSettings& cfg,
                             const std::vector<std::size_t>& batch, std::size_t epoch) {
  const Dataset& ds = *stream.data;
  const auto& tg = cfg.weights.toggles;
  const Tensor x = ds.rows(batch);
  std::vector<int> labels(batch.size());
  std::vector<std::size_t> targets(batch.size());
  std::vector<bool> old(batch.size());
  const std::set<int> current(stream.task_classes[t].begin(), stream.task_classes[t].end());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    labels[i] = ds.labels[batch[i]];
    targets[i] = st.bank.assignment().column(labels[i]);
    old[i] = current.count(labels[i]) == 0;
  }

  Tape tape;
  Model& m = st.model;
  Var z = m.backbone().extract(tape, x);
  Var eta = tape.param(m.head().eta);

  std::optional<OnbrRows> onbr_rows;
  if (tg.use_ONBR && t > 0) onbr_rows = OnbrRows{targets, old, cfg.weights.A, cfg.weights.onbr_variant};
  const LogitMode mode = tg.use_softmax_all ? LogitMode::all : LogitMode::active_only;
  LossComponents comp;
  comp.ce = ce_active(cosine_logits(z, st.bank, eta, mode, onbr_rows ? &*onbr_rows : nullptr), targets);
  comp.eta = m.eta();

  bool vii_active = false;
  if (tg.use_L_V || tg.use_L_VII) {
    if (auto vb = synthesize_virtual(x, labels, cfg.weights.mix)) {
      vii_active = true;
      Var zv = m.backbone().extract(tape, vb->inputs);
      std::vector<std::size_t> cols(targets.begin(), targets.end());
      std::sort(cols.begin(), cols.end());
      cols.erase(std::unique(cols.begin(), cols.end()), cols.end());
      VirtualHead head = virtual_head(tape, st.bank, cols);
      Var eta_v = tape.param(m.vii_eta_param());
      if (tg.use_L_V) comp.v = virtual_ce(zv, head, targets, eta_v);
      if (tg.use_L_VII) {
        std::optional<Var> a;
        if (tg.use_PNBR) a = sigmoid(tape.param(m.head().pnbr_raw));
        comp.vii = vii_loss(z, targets, zv, targets, head, eta_v, a);
      }
    }
  }
  comp.a = tg.use_PNBR ? m.pnbr_a() : 0.0;
  std::size_t k_old = 0;
  for (std::size_t j = 0; j < t; ++j) k_old += stream.task_classes[j].size();
  if (tg.use_L_dis && st.snapshot && t > 0) comp.dis = distill_loss(z, st.snapshot->features(x));
  comp.saturation = tape.saturation_events();

  TotalLoss total = total_loss(comp, cfg.weights, t + 1, stream.task_classes[t].size(), k_old);
  const GradMap grads = tape.backward(total.value);
  sgd_step(grads, cfg.optimizer, epoch, st.optimizer);
  return StepRecord{t + 1, epoch, 0, total.breakdown, vii_active};
}

// Trains task t (0-based): activates its prototypes, runs all epochs over
// D_train^t plus exemplars, then snapshots the model and stores exemplars.
inline void train_task(RunState& st, const TaskStream& stream, std::size_t t, const TrainSettings& cfg,
                       const StepLogger& log = {}) {
  if (t != st.completed) throw Error("task " + std::to_string(t + 1) + " trained out of order");
  cfg.weights.validate();
  cfg.optimizer.validate();
  const auto cols = st.bank.activate(stream.task_classes[t], "task " + std::to_string(t + 1));
  st.bank.init_virtual_prototypes(cols, mix_seed(cfg.seed, t, 0x717));
  st.optimizer = SgdState{};
  const auto pool = training_pool(st, stream, t);
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.optimizer.epochs; ++e)
    for (const auto& batch : epoch_batches(pool, cfg.seed, t, e, cfg.batch_size)) {
      StepRecord rec = train_step(st, stream, t, cfg, batch, e);
      rec.step = step++;
      if (log) log(rec);
    }
  st.snapshot = snapshot(st.model);
  update_memory(st.memory, stream, t);
  st.completed = t + 1;
}

inline TaskMetrics evaluate_task(const RunState& st, const TaskStream& stream, std::size_t t,
                                 ScoreMode mode = ScoreMode::max_cosine) {
  if (t >= st.completed) throw Error("task " + std::to_string(t + 1) + " evaluated before training");
  const Dataset& ds = *stream.data;
  TaskMetrics m;
  m.task = t + 1;
  const auto& kidx = stream.known_test.at(t);
  if (kidx.empty()) throw Error("task " + std::to_string(t + 1) + " has no known test instances");
  const auto kp = score_features(st.model.backbone().features(ds.rows(kidx)), st.bank, mode, st.model.eta());
  std::vector<std::size_t> pred, truth;
  std::vector<double> kscore;
  std::vector<bool> correct;
  for (std::size_t i = 0; i < kidx.size(); ++i) {
    pred.push_back(kp[i].predicted);
    truth.push_back(st.bank.assignment().column(ds.labels[kidx[i]]));
    kscore.push_back(kp[i].score);
    correct.push_back(pred.back() == truth.back());
  }
  m.acc = accuracy(pred, truth);
  m.n_known = kidx.size();
  m.known_mean_score = std::accumulate(kscore.begin(), kscore.end(), 0.0) / static_cast<double>(kscore.size());
  const auto& uidx = stream.unknown_test.at(t);
  if (uidx.empty()) {
    if (t + 1 < stream.tasks()) throw Error("task " + std::to_string(t + 1) + " has an empty unknown pool");
    return m;
  }
  const auto up = score_features(st.model.backbone().features(ds.rows(uidx)), st.bank, mode, st.model.eta());
  std::vector<double> uscore;
  for (const auto& p : up) uscore.push_back(p.score);
  m.n_unknown = uidx.size();
  m.unknown_mean_score = std::accumulate(uscore.begin(), uscore.end(), 0.0) / static_cast<double>(uscore.size());
  m.auroc = auroc(kscore, uscore);
  m.oscr = oscr(kscore, correct, uscore);
  return m;
}

// ---------------------------------------------------------------------------
// Protocol invariants

struct IntegrityReport {
  bool no_leakage = true;
  bool monotone_scope = true;
  bool memory_bound = true;
  std::vector<std::string> problems;
  bool ok() const noexcept { return no_leakage && monotone_scope && memory_bound; }
};

// Checked after task t has been trained and its exemplars stored.
inline IntegrityReport check_integrity(const TaskStream& stream, const ExemplarMemory& memory, std::size_t t) {
  IntegrityReport r;
  const Dataset& ds = *stream.data;
  std::unordered_set<std::uint64_t> seen;
  for (std::size_t j = 0; j <= t; ++j)
    for (std::size_t i : stream.train[j]) seen.insert(ds.instance_hash(i));
  for (std::size_t i : memory.indices()) seen.insert(ds.instance_hash(i));
  for (std::size_t i : stream.unknown_test[t])
    if (seen.count(ds.instance_hash(i))) {
      r.no_leakage = false;
      r.problems.push_back("unknown instance " + std::to_string(i) + " of task " + std::to_string(t + 1) +
                           " appears in training data or memory");
      break;
    }
  for (std::size_t j = 0; j <= t; ++j) {
    const std::size_t now = stream.known_labels(j).size();
    const std::size_t before = j ? stream.known_labels(j - 1).size() : 0;
    if (now != before + stream.task_classes[j].size() || now <= before) {
      r.monotone_scope = false;
      r.problems.push_back("known label space does not grow by the task's classes at task " + std::to_string(j + 1));
    }
  }
  std::set<int> completed;
  for (std::size_t j = 0; j <= t; ++j) completed.insert(stream.task_classes[j].begin(), stream.task_classes[j].end());
  if (memory.total() > memory.cap * completed.size()) {
    r.memory_bound = false;
    r.problems.push_back("exemplar memory exceeds cap x classes seen");
  }
  for (const auto& [c, v] : memory.store) {
    if (v.size() > memory.cap) {
      r.memory_bound = false;
      r.problems.push_back("class " + std::to_string(c) + " stores " + std::to_string(v.size()) + " exemplars");
    }
    if (!completed.count(c)) {
      r.memory_bound = false;
      r.problems.push_back("memory holds class " + std::to_string(c) + " from an uncompleted task");
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Run-state checkpoints

inline nlohmann::json run_state_to_json(const RunState& st) {
  nlohmann::json j;
  j["format"] = "rarl-run-state/1";
  j["completed"] = st.completed;
  j["model"] = model_to_json(st.model, st.optimizer);
  j["head"] = {{"eta", st.model.head().eta.value.item()},
               {"eta_vii", st.model.head().eta_vii.value.item()},
               {"pnbr_raw", st.model.head().pnbr_raw.value.item()}};
  j["bank"] = st.bank.to_json();
  j["memory"] = {{"cap", st.memory.cap}, {"seed", st.memory.seed}, {"shortfalls", st.memory.shortfalls}};
  j["memory"]["store"] = nlohmann::json::array();
  for (const auto& [c, v] : st.memory.store) j["memory"]["store"].push_back({{"class", c}, {"indices", v}});
  j["history"] = nlohmann::json::array();
  for (const auto& h : st.history) {
    nlohmann::json r{{"task", h.task}, {"acc", h.acc}, {"known_mean_score", h.known_mean_score},
                     {"n_known", h.n_known}, {"n_unknown", h.n_unknown}};
    if (h.auroc) r["auroc"] = *h.auroc;
    if (h.oscr) r["oscr"] = *h.oscr;
    if (h.unknown_mean_score) r["unknown_mean_score"] = *h.unknown_mean_score;
    j["history"].push_back(r);
  }
  return j;
}

inline RunState run_state_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != "rarl-run-state/1") throw Error("unsupported run-state format");
  SgdState opt;
  Model model = model_from_json(j.at("model"), &opt);
  RunState st{j.at("completed").get<std::size_t>(), std::move(model), std::nullopt,
              PrototypeBank::from_json(j.at("bank")), ExemplarMemory{}, {}, std::move(opt)};
  st.memory.cap = j.at("memory").at("cap").get<std::size_t>();
  st.memory.seed = j.at("memory").at("seed").get<std::uint64_t>();
  st.memory.shortfalls = j.at("memory").at("shortfalls").get<std::vector<std::string>>();
  for (const auto& e : j.at("memory").at("store"))
    st.memory.store.emplace(e.at("class").get<int>(), e.at("indices").get<std::vector<std::size_t>>());
  for (const auto& r : j.at("history")) {
    TaskMetrics h;
    h.task = r.at("task").get<std::size_t>();
    h.acc = r.at("acc").get<double>();
    h.known_mean_score = r.at("known_mean_score").get<double>();
    h.n_known = r.at("n_known").get<std::size_t>();
    h.n_unknown = r.at("n_unknown").get<std::size_t>();
    if (r.contains("auroc")) h.auroc = r["auroc"].get<double>();
    if (r.contains("oscr")) h.oscr = r["oscr"].get<double>();
    if (r.contains("unknown_mean_score")) h.unknown_mean_score = r["unknown_mean_score"].get<double>();
    st.history.push_back(h);
  }
  // A checkpoint is taken at a task boundary, where the snapshot equals the live model.
  if (st.completed > 0) st.snapshot = snapshot(st.model);
  return st;
}

}  // namespace rarl
