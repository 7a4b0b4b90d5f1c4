#pragma once

// Multilayer-perceptron feature extractor, learnable head scalars, the SGD
// optimizer with step schedule, and frozen model snapshots.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rarl/diffcore.hpp"

namespace rarl {

enum class Activation { relu, tanh };

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw Error("unknown activation '" + s + "'");
}
inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

struct BackboneConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden{64};
  Activation activation = Activation::relu;
  std::size_t feature_dim = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (input_dim == 0) throw Error("backbone input_dim must be positive");
    if (feature_dim == 0) throw Error("backbone feature_dim must be positive");
    if (hidden.empty()) throw Error("backbone needs at least one hidden layer");
    for (std::size_t w : hidden)
      if (w == 0) throw Error("backbone hidden widths must be positive");
  }
};

struct OptimizerConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 160;
  std::vector<std::size_t> milestones{80, 120};
  double decay_factor = 0.1;

  void validate() const {
    if (!(learning_rate > 0.0)) throw Error("learning_rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw Error("momentum must lie in [0,1)");
    if (weight_decay < 0.0) throw Error("weight_decay must be non-negative");
    if (!(decay_factor > 0.0)) throw Error("decay_factor must be positive");
    if (epochs == 0) throw Error("epochs must be positive");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (milestones[i] >= epochs) throw Error("milestone " + std::to_string(milestones[i]) + " not below epoch count");
      if (i && milestones[i] <= milestones[i - 1]) throw Error("milestones must be strictly increasing");
    }
  }

  // Pure function of the epoch index.
  double lr_at(std::size_t epoch) const {
    double lr = learning_rate;
    for (std::size_t m : milestones)
      if (epoch >= m) lr *= decay_factor;
    return lr;
  }
};

class Backbone {
 public:
  explicit Backbone(BackboneConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    std::size_t fan_in = cfg_.input_dim;
    std::vector<std::size_t> widths = cfg_.hidden;
    widths.push_back(cfg_.feature_dim);
    for (std::size_t l = 0; l < widths.size(); ++l) {
      const std::size_t out = widths[l];
      // He initialization for rectifiers, Glorot-style scale otherwise.
      const double sd = cfg_.activation == Activation::relu ? std::sqrt(2.0 / fan_in) : std::sqrt(1.0 / fan_in);
      std::normal_distribution<double> gauss(0.0, sd);
      Tensor w(Shape{fan_in, out});
      for (double& v : w.data()) v = gauss(rng);
      layers_.push_back(Layer{Parameter{"backbone/w" + std::to_string(l), std::move(w), true},
                              Parameter{"backbone/b" + std::to_string(l), Tensor(Shape{out}), true}});
      fan_in = out;
    }
  }

  const BackboneConfig& config() const noexcept { return cfg_; }

  // Features for every row of `inputs`, tracked on the tape.
  Var extract(Tape& tape, const Tensor& inputs) { return forward(tape, inputs, true); }

  // Untracked evaluation.
  Tensor features(const Tensor& inputs) const {
    Tape tape;
    return const_cast<Backbone*>(this)->forward(tape, inputs, false).value();
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }
  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out;
    for (const auto& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

 private:
  struct Layer {
    Parameter weight;
    Parameter bias;
  };

  Var forward(Tape& tape, const Tensor& inputs, bool track) {
    if (inputs.rank() != 2 || inputs.cols() != cfg_.input_dim)
      throw ShapeError("backbone expects rows of " + std::to_string(cfg_.input_dim) + " inputs, got " +
                       shape_str(inputs.shape()));
    Var h = tape.constant(inputs);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Var w = track ? tape.param(layers_[l].weight) : tape.constant(layers_[l].weight.value);
      Var b = track ? tape.param(layers_[l].bias) : tape.constant(layers_[l].bias.value);
      h = add_rowvec(matmul(h, w), b);
      if (l + 1 < layers_.size()) h = cfg_.activation == Activation::relu ? relu(h) : tanh(h);
    }
    const Tensor& z = h.value();
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (double v : z.row(i))
        if (!std::isfinite(v)) throw DomainError("non-finite feature for instance " + std::to_string(i), i);
    return h;
  }

  BackboneConfig cfg_;
  std::vector<Layer> layers_;
};

// Learnable scalars of the cosine heads: temperature and the raw PNBR bound.
struct HeadParams {
  Parameter eta{"head/eta", Tensor::scalar(10.0), false};
  Parameter eta_vii{"head/eta_vii", Tensor::scalar(10.0), false};  // used only when not shared
  Parameter pnbr_raw{"head/pnbr_raw", Tensor::scalar(std::log(0.1 / 0.9)), false};
};

class Model {
 public:
  Model(BackboneConfig cfg, double eta_init = 10.0, double a_init = 0.1, bool shared_eta = true)
      : backbone_(std::move(cfg)), shared_eta_(shared_eta) {
    if (!(a_init > 0.0 && a_init < 1.0)) throw Error("PNBR initial bound must lie in (0,1)");
    head_.eta.value = Tensor::scalar(eta_init);
    head_.eta_vii.value = Tensor::scalar(eta_init);
    head_.pnbr_raw.value = Tensor::scalar(std::log(a_init / (1.0 - a_init)));
  }

  Backbone& backbone() noexcept { return backbone_; }
  const Backbone& backbone() const noexcept { return backbone_; }
  HeadParams& head() noexcept { return head_; }
  const HeadParams& head() const noexcept { return head_; }
  bool shared_eta() const noexcept { return shared_eta_; }

  double eta() const { return head_.eta.value.item(); }
  double pnbr_a() const { return detail::stable_sigmoid(head_.pnbr_raw.value.item()); }

  Parameter& vii_eta_param() { return shared_eta_ ? head_.eta : head_.eta_vii; }

  std::vector<Parameter*> parameters() {
    auto out = backbone_.parameters();
    out.push_back(&head_.eta);
    if (!shared_eta_) out.push_back(&head_.eta_vii);
    out.push_back(&head_.pnbr_raw);
    return out;
  }
  std::vector<const Parameter*> parameters() const {
    auto out = backbone_.parameters();
    out.push_back(&head_.eta);
    if (!shared_eta_) out.push_back(&head_.eta_vii);
    out.push_back(&head_.pnbr_raw);
    return out;
  }

 private:
  Backbone backbone_;
  HeadParams head_;
  bool shared_eta_;
};

// Read-only copy of a model taken at the end of a task.
class ModelSnapshot {
 public:
  explicit ModelSnapshot(const Model& m) : model_(std::make_shared<const Model>(m)) {}
  Tensor features(const Tensor& inputs) const { return model_->backbone().features(inputs); }
  const Model& model() const noexcept { return *model_; }

 private:
  std::shared_ptr<const Model> model_;
};

inline ModelSnapshot snapshot(const Model& m) { return ModelSnapshot(m); }

struct SgdState {
  std::map<std::string, Tensor> momentum;
};

// Momentum SGD with decoupled-from-head weight decay:
//   g' = g + wd * p (decaying parameters only); buf = mu * buf + g'; p -= lr * buf.
inline void sgd_step(const GradMap& grads, const OptimizerConfig& cfg, std::size_t epoch, SgdState& state) {
  for (const auto& pg : grads)
    if (pg.grad.shape() != pg.param->value.shape())
      throw ShapeError("gradient for " + pg.param->name + " has shape " + shape_str(pg.grad.shape()) +
                       ", parameter has " + shape_str(pg.param->value.shape()));
  const double lr = cfg.lr_at(epoch);
  for (const auto& pg : grads) {
    Parameter& p = *pg.param;
    Tensor g = pg.grad;
    if (p.decay && cfg.weight_decay > 0.0)
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += cfg.weight_decay * p.value[i];
    Tensor* step = &g;
    if (cfg.momentum > 0.0) {
      auto it = state.momentum.find(p.name);
      if (it == state.momentum.end()) {
        it = state.momentum.emplace(p.name, g).first;
      } else {
        for (std::size_t i = 0; i < g.numel(); ++i) it->second[i] = cfg.momentum * it->second[i] + g[i];
      }
      step = &it->second;
    }
    for (std::size_t i = 0; i < g.numel(); ++i) p.value[i] -= lr * (*step)[i];
  }
}

// --- checkpoint serialization -------------------------------------------------

inline nlohmann::json tensor_to_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}
inline Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

inline constexpr const char* kCheckpointFormat = "rarl-checkpoint/1";

inline nlohmann::json backbone_config_to_json(const BackboneConfig& c) {
  return {{"input_dim", c.input_dim}, {"hidden", c.hidden}, {"activation", to_string(c.activation)},
          {"feature_dim", c.feature_dim}, {"seed", c.seed}};
}
inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.input_dim = j.at("input_dim").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  c.activation = parse_activation(j.at("activation").get<std::string>());
  c.feature_dim = j.at("feature_dim").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline nlohmann::json model_to_json(const Model& m, const SgdState& opt) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["backbone"] = backbone_config_to_json(m.backbone().config());
  j["shared_eta"] = m.shared_eta();
  j["parameters"] = nlohmann::json::object();
  for (const Parameter* p : m.parameters()) j["parameters"][p->name] = tensor_to_json(p->value);
  j["momentum"] = nlohmann::json::object();
  for (const auto& [name, t] : opt.momentum) j["momentum"][name] = tensor_to_json(t);
  return j;
}

inline Model model_from_json(const nlohmann::json& j, SgdState* opt = nullptr) {
  if (j.value("format", std::string{}) != kCheckpointFormat)
    throw Error("unsupported checkpoint format tag '" + j.value("format", std::string{}) + "'");
  Model m(backbone_config_from_json(j.at("backbone")), 10.0, 0.1, j.at("shared_eta").get<bool>());
  const auto& params = j.at("parameters");
  for (Parameter* p : m.parameters()) {
    Tensor t = tensor_from_json(params.at(p->name));
    if (t.shape() != p->value.shape()) throw ShapeError("checkpoint shape mismatch for " + p->name);
    p->value = std::move(t);
  }
  if (opt) {
    opt->momentum.clear();
    for (const auto& [name, t] : j.at("momentum").items()) opt->momentum.emplace(name, tensor_from_json(t));
  }
  return m;
}

}  // namespace rarl
