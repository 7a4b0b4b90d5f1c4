#pragma once

// Fixed equiangular-tight-frame prototypes with an append-only activation
// mask and learnable per-class virtual prototypes.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rarl/diffcore.hpp"

namespace rarl {

class CapacityError : public Error {
 public:
  using Error::Error;
};

inline constexpr const char* kBankFormat = "rarl-bank/1";

// Dataset label -> prototype column, in first-appearance order.
class ClassAssignment {
 public:
  bool contains(int label) const { return column_.count(label) != 0; }
  std::size_t column(int label) const {
    auto it = column_.find(label);
    if (it == column_.end()) throw Error("label " + std::to_string(label) + " has no prototype");
    return it->second;
  }
  int label_of(std::size_t col) const {
    for (const auto& [l, c] : order_)
      if (c == col) return l;
    throw Error("column " + std::to_string(col) + " is not assigned");
  }
  std::size_t size() const noexcept { return order_.size(); }
  const std::vector<std::pair<int, std::size_t>>& order() const noexcept { return order_; }

  void bind(int label, std::size_t col) {
    if (contains(label)) throw Error("label " + std::to_string(label) + " already assigned");
    column_.emplace(label, col);
    order_.emplace_back(label, col);
  }

 private:
  std::map<int, std::size_t> column_;
  std::vector<std::pair<int, std::size_t>> order_;
};

namespace detail {

// Column-orthonormal d x K matrix from a seeded Gaussian draw; Gram-Schmidt
// with one re-orthogonalization pass yields the QR factor with positive R diagonal.
inline std::vector<std::vector<double>> seeded_orthonormal_columns(std::size_t d, std::size_t K,
                                                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::vector<double>> cols(K, std::vector<double>(d));
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < K; ++c) cols[c][r] = gauss(rng);
  for (std::size_t c = 0; c < K; ++c) {
    auto& v = cols[c];
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t p = 0; p < c; ++p) {
        double dot = 0.0;
        for (std::size_t r = 0; r < d; ++r) dot += cols[p][r] * v[r];
        for (std::size_t r = 0; r < d; ++r) v[r] -= dot * cols[p][r];
      }
    double nrm = 0.0;
    for (double x : v) nrm += x * x;
    nrm = std::sqrt(nrm);
    if (!(nrm > 1e-12)) throw Error("orthonormalization failed: degenerate Gaussian draw");
    for (double& x : v) x /= nrm;
  }
  return cols;
}

}  // namespace detail

class PrototypeBank {
 public:
  // M = sqrt(K/(K-1)) * U * (I - 11^T / K), stored d x K.
  static PrototypeBank build(std::size_t d, std::size_t K, std::uint64_t seed) {
    if (K <= 1) throw Error("ETF needs at least two prototypes, got K=" + std::to_string(K));
    if (K > d)
      throw Error("ETF with K=" + std::to_string(K) + " prototypes does not fit dimension d=" + std::to_string(d));
    const auto u = detail::seeded_orthonormal_columns(d, K, seed);
    const double s = std::sqrt(static_cast<double>(K) / static_cast<double>(K - 1));
    Tensor m(Shape{d, K});
    for (std::size_t r = 0; r < d; ++r) {
      double row_mean = 0.0;
      for (std::size_t c = 0; c < K; ++c) row_mean += u[c][r];
      row_mean /= static_cast<double>(K);
      for (std::size_t c = 0; c < K; ++c) m(r, c) = s * (u[c][r] - row_mean);
    }
    return PrototypeBank(d, K, seed, std::move(m));
  }

  std::size_t dim() const noexcept { return d_; }
  std::size_t count() const noexcept { return K_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const Tensor& prototypes() const noexcept { return M_; }
  std::vector<double> prototype(std::size_t col) const {
    std::vector<double> v(d_);
    for (std::size_t r = 0; r < d_; ++r) v[r] = M_(r, col);
    return v;
  }
  std::uint64_t prototype_checksum() const { return M_.checksum(); }

  const std::vector<bool>& active_mask() const noexcept { return active_; }
  bool is_active(std::size_t col) const { return active_.at(col); }
  std::vector<std::size_t> active_columns() const {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < K_; ++c)
      if (active_[c]) out.push_back(c);
    return out;
  }
  const ClassAssignment& assignment() const noexcept { return assign_; }

  // Binds each new label to the next unused column. Existing bindings are untouched.
  std::vector<std::size_t> activate(const std::vector<int>& labels, const std::string& task_name) {
    if (assign_.size() + labels.size() > K_)
      throw CapacityError("prototype capacity exhausted at " + task_name + ": " +
                          std::to_string(assign_.size()) + " active + " + std::to_string(labels.size()) +
                          " new > K=" + std::to_string(K_));
    std::vector<std::size_t> cols;
    for (int l : labels) {
      const std::size_t col = assign_.size();
      assign_.bind(l, col);
      active_[col] = true;
      cols.push_back(col);
    }
    return cols;
  }

  // One learnable unit vector per column, drawn uniformly on the sphere.
  void init_virtual_prototypes(const std::vector<std::size_t>& columns, std::uint64_t seed) {
    for (std::size_t col : columns) {
      if (col >= K_ || !active_[col])
        throw Error("virtual prototype requested for inactive column " + std::to_string(col));
      if (virtual_.count(col)) throw Error("virtual prototype for column " + std::to_string(col) + " already exists");
    }
    for (std::size_t col : columns) {
      std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ull * (col + 1)));
      std::normal_distribution<double> gauss(0.0, 1.0);
      std::vector<double> v(d_);
      double nrm = 0.0;
      do {
        nrm = 0.0;
        for (double& x : v) {
          x = gauss(rng);
          nrm += x * x;
        }
      } while (nrm < 1e-20);
      nrm = std::sqrt(nrm);
      for (double& x : v) x /= nrm;
      virtual_.emplace(col, Parameter{"virtual/" + std::to_string(col), Tensor::vector(std::move(v)), false});
    }
  }

  bool has_virtual(std::size_t col) const { return virtual_.count(col) != 0; }
  Parameter& virtual_prototype(std::size_t col) {
    auto it = virtual_.find(col);
    if (it == virtual_.end()) throw Error("no virtual prototype for column " + std::to_string(col));
    return it->second;
  }
  const Parameter& virtual_prototype(std::size_t col) const {
    return const_cast<PrototypeBank*>(this)->virtual_prototype(col);
  }
  std::vector<std::size_t> virtual_columns() const {
    std::vector<std::size_t> out;
    for (const auto& [c, p] : virtual_) out.push_back(c);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format"] = kBankFormat;
    j["d"] = d_;
    j["K"] = K_;
    j["seed"] = seed_;
    j["prototype_checksum"] = prototype_checksum();
    j["active"] = active_;
    j["assignment"] = nlohmann::json::array();
    for (const auto& [l, c] : assign_.order()) j["assignment"].push_back({l, c});
    j["virtual"] = nlohmann::json::object();
    for (const auto& [c, p] : virtual_) {
      std::vector<double> v(p.value.data().begin(), p.value.data().end());
      j["virtual"][std::to_string(c)] = v;
    }
    return j;
  }

  static PrototypeBank from_json(const nlohmann::json& j) {
    if (j.value("format", std::string{}) != kBankFormat)
      throw Error("unsupported bank format tag '" + j.value("format", std::string{}) + "'");
    PrototypeBank b = build(j.at("d").get<std::size_t>(), j.at("K").get<std::size_t>(), j.at("seed").get<std::uint64_t>());
    if (j.at("prototype_checksum").get<std::uint64_t>() != b.prototype_checksum())
      throw Error("bank prototype checksum mismatch: regenerated frame differs from the stored one");
    for (const auto& pair : j.at("assignment")) {
      const int l = pair.at(0).get<int>();
      const std::size_t c = pair.at(1).get<std::size_t>();
      if (c != b.assign_.size()) throw Error("bank assignment is not in first-appearance order");
      b.assign_.bind(l, c);
      b.active_[c] = true;
    }
    if (j.at("active").get<std::vector<bool>>() != b.active_) throw Error("bank active mask disagrees with assignment");
    for (const auto& [key, val] : j.at("virtual").items()) {
      const std::size_t c = std::stoul(key);
      auto v = val.get<std::vector<double>>();
      if (v.size() != b.d_) throw Error("virtual prototype " + key + " has wrong dimension");
      b.virtual_.emplace(c, Parameter{"virtual/" + key, Tensor::vector(std::move(v)), false});
    }
    return b;
  }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw Error("cannot write bank file " + path);
    os << to_json().dump() << '\n';
  }
  static PrototypeBank load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot read bank file " + path);
    return from_json(nlohmann::json::parse(is));
  }

 private:
  PrototypeBank(std::size_t d, std::size_t K, std::uint64_t seed, Tensor m)
      : d_(d), K_(K), seed_(seed), M_(std::move(m)), active_(K, false) {}

  std::size_t d_;
  std::size_t K_;
  std::uint64_t seed_;
  Tensor M_;
  std::vector<bool> active_;
  ClassAssignment assign_;
  std::map<std::size_t, Parameter> virtual_;
};

inline PrototypeBank build_etf(std::size_t d, std::size_t K, std::uint64_t seed) {
  return PrototypeBank::build(d, K, seed);
}

// Geometry report used by the verification suite: worst deviations of the
// column norms from 1 and of the pairwise cosines from -1/(K-1).
struct EtfDeviation {
  double max_norm_error = 0.0;
  std::size_t worst_norm_column = 0;
  double max_cosine_error = 0.0;
  std::size_t worst_pair_a = 0, worst_pair_b = 0;
};

inline EtfDeviation etf_deviation(const Tensor& m) {
  const std::size_t d = m.rows(), K = m.cols();
  EtfDeviation dev;
  std::vector<double> norms(K, 0.0);
  for (std::size_t c = 0; c < K; ++c) {
    for (std::size_t r = 0; r < d; ++r) norms[c] += m(r, c) * m(r, c);
    norms[c] = std::sqrt(norms[c]);
    const double e = std::abs(norms[c] - 1.0);
    if (e > dev.max_norm_error) {
      dev.max_norm_error = e;
      dev.worst_norm_column = c;
    }
  }
  const double target = -1.0 / static_cast<double>(K - 1);
  for (std::size_t a = 0; a < K; ++a)
    for (std::size_t b = a + 1; b < K; ++b) {
      double dot = 0.0;
      for (std::size_t r = 0; r < d; ++r) dot += m(r, a) * m(r, b);
      const double e = std::abs(dot - target);
      if (e > dev.max_cosine_error) {
        dev.max_cosine_error = e;
        dev.worst_pair_a = a;
        dev.worst_pair_b = b;
      }
    }
  return dev;
}

}  // namespace rarl
