#pragma once

// Datasets: seeded Gaussian-sphere generator, IDX image/label ingestion,
// stratified splitting, and a private binary cache format.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "rarl/diffcore.hpp"

namespace rarl {

struct Dataset {
  std::string name;
  Tensor instances;  // n x dim
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return instances.cols(); }
  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(num_classes, 0);
    for (int l : labels) ++c.at(static_cast<std::size_t>(l));
    return c;
  }
  std::uint64_t hash() const {
    auto h = instances.checksum();
    return fnv1a(labels.data(), labels.size() * sizeof(int), h);
  }
  // Labels contiguous from 0 and every class populated.
  void validate() const {
    if (instances.rank() != 2 || instances.rows() != labels.size())
      throw ShapeError("dataset instances do not match labels");
    for (int l : labels)
      if (l < 0 || static_cast<std::size_t>(l) >= num_classes) throw Error("label " + std::to_string(l) + " outside [0, classes)");
    for (std::size_t c = 0; const auto k : class_counts()) {
      if (k == 0) throw Error("class " + std::to_string(c) + " has no instances");
      ++c;
    }
  }
  Tensor rows(const std::vector<std::size_t>& idx) const {
    const std::size_t D = dim();
    Tensor out(Shape{idx.size(), D});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto r = instances.row(idx[i]);
      std::copy(r.begin(), r.end(), out.row(i).begin());
    }
    return out;
  }
  std::uint64_t instance_hash(std::size_t i) const {
    const auto r = instances.row(i);
    return fnv1a(r.data(), r.size() * sizeof(double));
  }
};

// ---------------------------------------------------------------------------
// Gaussian sphere

struct SphereConfig {
  std::size_t classes = 6;
  std::size_t per_class = 100;
  std::size_t dim = 16;
  double spread = 0.3;
  std::uint64_t seed = 0;
  double min_angle_deg = 30.0;  // rejection floor between class means
  std::size_t max_attempts = 10000;
};

struct SphereLog {
  double min_pairwise_angle_deg = 180.0;
  std::size_t rejections = 0;
};

inline Dataset gen_gaussian_sphere(const SphereConfig& cfg, SphereLog* log = nullptr) {
  if (cfg.classes < 2) throw Error("gaussian sphere needs at least two classes");
  if (!(cfg.spread > 0.0)) throw Error("gaussian sphere spread must be positive");
  if (cfg.dim < 2) throw Error("gaussian sphere needs dim >= 2");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double floor_cos = std::cos(cfg.min_angle_deg * std::numbers::pi / 180.0);
  std::vector<std::vector<double>> means;
  SphereLog lg;
  while (means.size() < cfg.classes) {
    std::size_t attempts = 0;
    for (;;) {
      if (++attempts > cfg.max_attempts)
        throw Error("cannot place " + std::to_string(cfg.classes) + " class means in dim " + std::to_string(cfg.dim) +
                    " with pairwise angle >= " + std::to_string(cfg.min_angle_deg) + " degrees");
      std::vector<double> v(cfg.dim);
      double nrm = 0.0;
      for (double& x : v) {
        x = gauss(rng);
        nrm += x * x;
      }
      nrm = std::sqrt(nrm);
      for (double& x : v) x /= nrm;
      bool ok = true;
      for (const auto& m : means) {
        double dot = 0.0;
        for (std::size_t j = 0; j < cfg.dim; ++j) dot += m[j] * v[j];
        if (dot > floor_cos) {
          ok = false;
          break;
        }
      }
      if (ok) {
        means.push_back(std::move(v));
        break;
      }
      ++lg.rejections;
    }
  }
  for (std::size_t a = 0; a < means.size(); ++a)
    for (std::size_t b = a + 1; b < means.size(); ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < cfg.dim; ++j) dot += means[a][j] * means[b][j];
      lg.min_pairwise_angle_deg =
          std::min(lg.min_pairwise_angle_deg, std::acos(std::clamp(dot, -1.0, 1.0)) * 180.0 / std::numbers::pi);
    }
  if (log) *log = lg;

  Dataset ds;
  ds.name = "gaussian_sphere";
  ds.num_classes = cfg.classes;
  ds.seed = cfg.seed;
  ds.instances = Tensor(Shape{cfg.classes * cfg.per_class, cfg.dim});
  ds.labels.reserve(cfg.classes * cfg.per_class);
  std::size_t row = 0;
  for (std::size_t c = 0; c < cfg.classes; ++c)
    for (std::size_t k = 0; k < cfg.per_class; ++k, ++row) {
      for (std::size_t j = 0; j < cfg.dim; ++j) ds.instances(row, j) = means[c][j] + cfg.spread * gauss(rng);
      ds.labels.push_back(static_cast<int>(c));
    }
  return ds;
}

// ---------------------------------------------------------------------------
// IDX

class IdxError : public Error {
 public:
  enum class Kind { io, wrong_magic, truncated, count_mismatch };
  IdxError(Kind k, const std::string& what) : Error(what), kind_(k) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IdxError(IdxError::Kind::io, "cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(is), {});
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw IdxError(IdxError::Kind::truncated, path + ": truncated header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

}  // namespace detail

// Big-endian IDX pair: images magic 0x803 (count, rows, cols, u8 pixels) and
// labels magic 0x801 (count, u8 labels). Pixels are rescaled to [0,1].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  const std::uint32_t im = detail::read_be32(img, 0, images_path);
  if (im != kIdxImagesMagic) throw IdxError(IdxError::Kind::wrong_magic, images_path + ": wrong magic for IDX images");
  const std::uint32_t lm = detail::read_be32(lab, 0, labels_path);
  if (lm != kIdxLabelsMagic) throw IdxError(IdxError::Kind::wrong_magic, labels_path + ": wrong magic for IDX labels");
  const std::size_t n = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t nl = detail::read_be32(lab, 4, labels_path);
  if (n != nl)
    throw IdxError(IdxError::Kind::count_mismatch,
                   "IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
  const std::size_t dim = rows * cols;
  if (img.size() < 16 + n * dim) throw IdxError(IdxError::Kind::truncated, images_path + ": truncated pixel payload");
  if (lab.size() < 8 + n) throw IdxError(IdxError::Kind::truncated, labels_path + ": truncated label payload");

  Dataset ds;
  ds.name = "idx";
  ds.instances = Tensor(Shape{n, dim});
  for (std::size_t i = 0; i < n * dim; ++i) ds.instances[i] = static_cast<double>(img[16 + i]) / 255.0;
  ds.labels.resize(n);
  int max_label = -1;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = static_cast<std::size_t>(max_label + 1);
  return ds;
}

// ---------------------------------------------------------------------------
// Stratified split

// Largest-remainder apportionment of `n` over `fractions`; ties go to later parts.
inline std::vector<std::size_t> apportion(std::size_t n, const std::vector<double>& fractions) {
  std::vector<std::size_t> out(fractions.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double exact = fractions[i] * static_cast<double>(n);
    // Guard against 0.8 * 10 = 7.999999...
    const double fl = std::floor(exact + 1e-9);
    out[i] = static_cast<std::size_t>(fl);
    used += out[i];
    rem.emplace_back(std::max(0.0, exact - fl), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second > b.second;
  });
  for (std::size_t k = 0; used < n; ++k, ++used) ++out[rem[k % rem.size()].second];
  return out;
}

// Per-class seeded shuffle then apportionment; returns one index list per fraction.
inline std::vector<std::vector<std::size_t>> split(const Dataset& ds, const std::vector<double>& fractions,
                                                    std::uint64_t seed) {
  if (fractions.empty()) throw Error("split needs at least one fraction");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw Error("split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error("split fractions must sum to 1");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  std::vector<std::vector<std::size_t>> parts(fractions.size());
  for (auto& [label, idx] : by_class) {
    std::mt19937_64 rng(seed ^ (0xD1B54A32D192ED03ull * static_cast<std::uint64_t>(label + 1)));
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto counts = apportion(idx.size(), fractions);
    std::size_t off = 0;
    for (std::size_t p = 0; p < counts.size(); ++p) {
      if (counts[p] == 0)
        throw Error("class " + std::to_string(label) + " with " + std::to_string(idx.size()) +
                    " instances is too small to stratify");
      parts[p].insert(parts[p].end(), idx.begin() + static_cast<std::ptrdiff_t>(off),
                      idx.begin() + static_cast<std::ptrdiff_t>(off + counts[p]));
      off += counts[p];
    }
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

// ---------------------------------------------------------------------------
// Cache format: "RARLDS01", then u64 n, dim, classes, seed, u32 name length,
// name bytes, n*dim f64 values, n i32 labels (host byte order).

inline constexpr std::array<char, 8> kDatasetCacheTag{'R', 'A', 'R', 'L', 'D', 'S', '0', '1'};

inline void save_dataset_cache(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write dataset cache " + path);
  auto put64 = [&](std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); };
  os.write(kDatasetCacheTag.data(), kDatasetCacheTag.size());
  put64(ds.size());
  put64(ds.dim());
  put64(ds.num_classes);
  put64(ds.seed);
  const auto len = static_cast<std::uint32_t>(ds.name.size());
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(ds.name.data(), len);
  os.write(reinterpret_cast<const char*>(ds.instances.data().data()),
           static_cast<std::streamsize>(ds.instances.numel() * sizeof(double)));
  os.write(reinterpret_cast<const char*>(ds.labels.data()), static_cast<std::streamsize>(ds.labels.size() * sizeof(int)));
}

inline Dataset load_dataset_cache(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read dataset cache " + path);
  std::array<char, 8> tag{};
  is.read(tag.data(), tag.size());
  if (tag != kDatasetCacheTag) throw Error(path + ": not a dataset cache of a supported version");
  auto get64 = [&] {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
  };
  Dataset ds;
  const std::size_t n = get64(), dim = get64();
  ds.num_classes = get64();
  ds.seed = get64();
  std::uint32_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  ds.name.resize(len);
  is.read(ds.name.data(), len);
  ds.instances = Tensor(Shape{n, dim});
  is.read(reinterpret_cast<char*>(ds.instances.data().data()), static_cast<std::streamsize>(n * dim * sizeof(double)));
  ds.labels.resize(n);
  is.read(reinterpret_cast<char*>(ds.labels.data()), static_cast<std::streamsize>(n * sizeof(int)));
  if (!is) throw Error(path + ": truncated dataset cache");
  return ds;
}

}  // namespace rarl
