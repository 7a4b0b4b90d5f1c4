#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "rarl/etf_space.hpp"

using namespace rarl;

namespace {

double dot_cols(const Tensor& m, std::size_t a, std::size_t b) {
  double s = 0.0;
  for (std::size_t r = 0; r < m.rows(); ++r) s += m(r, a) * m(r, b);
  return s;
}

}  // namespace

TEST(BuildEtf, ThreeByThree) {
  const auto bank = build_etf(3, 3, 1);
  const Tensor& m = bank.prototypes();
  for (std::size_t a = 0; a < 3; ++a) {
    EXPECT_NEAR(dot_cols(m, a, a), 1.0, 1e-12);
    for (std::size_t b = a + 1; b < 3; ++b) EXPECT_NEAR(dot_cols(m, a, b), -0.5, 1e-12);
  }
}

TEST(BuildEtf, GramMatchesClosedForm512) {
  const std::size_t K = 512;
  const auto bank = build_etf(K, K, 3);
  const Tensor& m = bank.prototypes();
  const double kk = static_cast<double>(K);
  double worst = 0.0;
  for (std::size_t a = 0; a < K; ++a)
    for (std::size_t b = a; b < K; ++b) {
      const double want = kk / (kk - 1.0) * ((a == b ? 1.0 : 0.0) - 1.0 / kk);
      worst = std::max(worst, std::abs(dot_cols(m, a, b) - want));
    }
  EXPECT_LT(worst, 1e-8);
  EXPECT_NEAR(dot_cols(m, 0, 1), -0.0019569, 1e-7);
}

TEST(BuildEtf, RejectsInvalidShapes) {
  EXPECT_THROW(build_etf(3, 4, 0), Error);
  EXPECT_THROW(build_etf(3, 1, 0), Error);
}

TEST(BuildEtf, SeededAndRotationInvariant) {
  const auto a = build_etf(16, 10, 5), b = build_etf(16, 10, 5), c = build_etf(16, 10, 6);
  EXPECT_EQ(a.prototypes(), b.prototypes());
  EXPECT_NE(a.prototype_checksum(), c.prototype_checksum());
  auto cosines = [](const Tensor& m) {
    std::vector<double> v;
    for (std::size_t i = 0; i < m.cols(); ++i)
      for (std::size_t j = i + 1; j < m.cols(); ++j) v.push_back(dot_cols(m, i, j));
    std::sort(v.begin(), v.end());
    return v;
  };
  const auto ca = cosines(a.prototypes()), cc = cosines(c.prototypes());
  ASSERT_EQ(ca.size(), cc.size());
  for (std::size_t i = 0; i < ca.size(); ++i) EXPECT_NEAR(ca[i], cc[i], 1e-12);
}

TEST(BuildEtf, DeviationReportNamesCorruptedColumn) {
  const auto bank = build_etf(8, 8, 2);
  Tensor m = bank.prototypes();
  for (std::size_t r = 0; r < 8; ++r) m(r, 5) *= 1.01;
  const EtfDeviation dev = etf_deviation(m);
  EXPECT_EQ(dev.worst_norm_column, 5u);
  EXPECT_GT(dev.max_norm_error, 1e-3);
}

TEST(Activate, FirstAppearanceOrderAndMonotoneMask) {
  auto bank = build_etf(6, 6, 1);
  EXPECT_EQ(bank.activate({7, 3}, "task 1"), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(bank.active_columns(), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(bank.activate({1, 9, 4}, "task 2"), (std::vector<std::size_t>{2, 3, 4}));
  EXPECT_EQ(bank.assignment().column(7), 0u);
  EXPECT_EQ(bank.assignment().column(3), 1u);
  EXPECT_EQ(bank.assignment().label_of(3), 9);
  EXPECT_EQ(bank.active_columns(), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_FALSE(bank.is_active(5));
}

TEST(Activate, CapacityErrorNamesTask) {
  auto bank = build_etf(3, 3, 1);
  bank.activate({0, 1, 2}, "task 1");
  try {
    bank.activate({3}, "task 2");
    FAIL();
  } catch (const CapacityError& e) {
    EXPECT_NE(std::string(e.what()).find("task 2"), std::string::npos);
  }
  EXPECT_EQ(bank.active_columns().size(), 3u);
}

TEST(Activate, DuplicateLabelRejected) {
  auto bank = build_etf(4, 4, 1);
  bank.activate({0}, "task 1");
  EXPECT_THROW(bank.activate({0}, "task 2"), Error);
}

TEST(VirtualPrototypes, UnitNormSeededAndActiveOnly) {
  auto bank = build_etf(8, 8, 1);
  const auto cols = bank.activate({4, 2}, "task 1");
  bank.init_virtual_prototypes(cols, 99);
  ASSERT_EQ(bank.virtual_columns().size(), 2u);
  for (std::size_t c : cols) {
    const Parameter& p = bank.virtual_prototype(c);
    double n = 0.0;
    for (double v : p.value.data()) n += v * v;
    EXPECT_NEAR(n, 1.0, 1e-12);
    EXPECT_FALSE(p.decay);
  }
  auto again = build_etf(8, 8, 1);
  again.init_virtual_prototypes(again.activate({4, 2}, "task 1"), 99);
  EXPECT_EQ(again.virtual_prototype(0).value, bank.virtual_prototype(0).value);
  EXPECT_THROW(bank.init_virtual_prototypes({5}, 99), Error);
  EXPECT_THROW(bank.init_virtual_prototypes({0}, 99), Error);  // already exists
}

TEST(Serialization, RoundTripAndTamperDetection) {
  auto bank = build_etf(6, 5, 12);
  const auto cols = bank.activate({3, 0, 4}, "task 1");
  bank.init_virtual_prototypes(cols, 5);
  bank.virtual_prototype(1).value[2] = 0.25;
  const auto path = std::filesystem::temp_directory_path() / "rarl_bank_test.json";
  bank.save(path.string());
  const auto back = PrototypeBank::load(path.string());
  EXPECT_EQ(back.prototypes(), bank.prototypes());
  EXPECT_EQ(back.active_mask(), bank.active_mask());
  EXPECT_EQ(back.assignment().order(), bank.assignment().order());
  for (std::size_t c : cols) EXPECT_EQ(back.virtual_prototype(c).value, bank.virtual_prototype(c).value);

  auto j = bank.to_json();
  j["prototype_checksum"] = j["prototype_checksum"].get<std::uint64_t>() + 1;
  EXPECT_THROW(PrototypeBank::from_json(j), Error);
  j = bank.to_json();
  j["format"] = "rarl-bank/0";
  EXPECT_THROW(PrototypeBank::from_json(j), Error);
  std::filesystem::remove(path);
}

// Property: the frame identity holds across a spread of shapes and seeds.
TEST(Properties, EtfIdentityGrid) {
  for (std::size_t d : {2u, 5u, 17u, 64u})
    for (std::size_t K = 2; K <= d; K += std::max<std::size_t>(1, d / 4))
      for (std::uint64_t s = 0; s < 3; ++s) {
        const EtfDeviation dev = etf_deviation(build_etf(d, K, s).prototypes());
        EXPECT_LT(dev.max_norm_error, 1e-10) << d << "x" << K;
        EXPECT_LT(dev.max_cosine_error, 1e-10) << d << "x" << K;
      }
}
