#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "dlab/checkpoint.hpp"
#include "dlab/error.hpp"
#include "dlab/rng.hpp"
#include "dlab/tensor.hpp"
#include "oracles.hpp"

using namespace dlab;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Matmul, IdentityTimesIdentity) {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(values(matmul(eye, eye)), (std::vector<double>{1, 0, 0, 1}));
}

TEST(Matmul, HandExample) {
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from({2, 1}, {1, 1});
  const Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(values(c), (std::vector<double>{3, 7}));
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  const Tensor a = Tensor::from({2, 3}, {0.1, -0.2, 0.3, 0.4, 0.5, -0.6}, true);
  const Tensor b = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  backward(sum(matmul(a, b)));
  // (ones[2x2] B^T)[i, p] = sum_j B[p, j]
  EXPECT_EQ(std::vector<double>(a.grad().begin(), a.grad().end()), (std::vector<double>{3, 7, 11, 3, 7, 11}));
  const oracle::GradCase c{"matmul_sum", {{2, 3}, {3, 2}}, [](const auto& in) { return matmul(in[0], in[1]); }};
  EXPECT_LT(oracle::check_gradients(c, 5).max_rel_error, 1e-4);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Gemm, RowResultsIndependentOfRowCount) {
  std::vector<double> a(7 * 5), b(5 * 6);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::sin(0.37 * static_cast<double>(i));
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = std::cos(0.11 * static_cast<double>(i));
  std::vector<double> all(7 * 6), one(6);
  gemm(a.data(), b.data(), all.data(), 7, 5, 6, false);
  for (std::size_t r = 0; r < 7; ++r) {
    gemm(a.data() + r * 5, b.data(), one.data(), 1, 5, 6, false);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(all[r * 6 + j], one[j]);
  }
}

TEST(Softmax, SymmetricRow) { EXPECT_EQ(values(softmax_rows(Tensor::from({1, 2}, {0, 0}))), (std::vector<double>{0.5, 0.5})); }

TEST(Softmax, LargeEqualLogitsDoNotOverflow) {
  EXPECT_EQ(values(softmax_rows(Tensor::from({1, 2}, {1000, 1000}))), (std::vector<double>{0.5, 0.5}));
}

TEST(Softmax, LogThreeRow) {
  const auto v = values(softmax_rows(Tensor::from({1, 2}, {0, std::log(3.0)})));
  EXPECT_NEAR(v[0], 0.25, 1e-15);
  EXPECT_NEAR(v[1], 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOneForLargeMagnitudes) {
  Rng rng(3);
  std::vector<double> x(50 * 17);
  for (auto& v : x) v = rng.uniform(-1e4, 1e4);
  const Tensor p = softmax_rows(Tensor::from({50, 17}, x));
  for (std::size_t r = 0; r < 50; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 17; ++j) {
      EXPECT_GE(p.data()[r * 17 + j], 0.0);
      s += p.data()[r * 17 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, NanInputIsNumericError) {
  EXPECT_THROW(softmax_rows(Tensor::from({1, 2}, {0.0, std::nan("")})), NumericError);
}

TEST(Elementwise, ExpOfZeroIsOne) { EXPECT_EQ(exp(Tensor::scalar(0.0)).item(), 1.0); }

TEST(Elementwise, LogOfNonPositiveIsNumericError) {
  EXPECT_THROW(log(Tensor::from({2}, {1.0, 0.0})), NumericError);
  EXPECT_THROW(log(Tensor::from({1}, {-2.0})), NumericError);
}

TEST(Elementwise, BroadcastAdd) {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::from({3}, {10, 20, 30});
  EXPECT_EQ(values(add(a, b)), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  EXPECT_THROW(add(a, Tensor::zeros({2})), DimensionError);
}

TEST(Elementwise, TransposeSliceConcat) {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(values(transpose(a)), (std::vector<double>{1, 4, 2, 5, 3, 6}));
  EXPECT_EQ(values(slice(a, 1, 1, 2)), (std::vector<double>{2, 3, 5, 6}));
  EXPECT_EQ(values(concat({a, a}, 0)), (std::vector<double>{1, 2, 3, 4, 5, 6, 1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(values(mean(a, 1)), (std::vector<double>{2, 5}));
}

TEST(RmsNorm, ConstantVectorHasUnitRms) {
  for (double c : {-3.0, 0.5, 7.0}) {
    const double eps = 1e-6;
    const Tensor out = rmsnorm(Tensor::full({1, 4}, c), Tensor::full({4}, 1.0), eps);
    const double expected = c / std::sqrt(c * c + eps);
    for (double v : out.data()) EXPECT_NEAR(v, expected, 1e-15);
  }
}

TEST(Backward, IdentityLossHasUnitGradient) {
  const Tensor x = Tensor::scalar(2.5, true);
  backward(x);
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Backward, SquareAtThree) {
  const Tensor x = Tensor::scalar(3.0, true);
  backward(square(x));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, SumGradientIsOnes) {
  const Tensor x = Tensor::from({2, 2}, {1, -2, 3, 4}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x = Tensor::scalar(3.0, true);
  const Tensor loss = square(x);
  backward(loss);
  backward(loss);
  EXPECT_EQ(x.grad()[0], 12.0);
  x.zero_grad();
  backward(loss);
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  const Tensor x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, NoGradGuardStopsRecording) {
  const Tensor x = Tensor::scalar(1.0, true);
  Tensor y;
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    y = square(x);
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
}

TEST(Tensor, RejectsZeroExtentsAndBadLengths) {
  EXPECT_THROW(Tensor::zeros({2, 0}), DimensionError);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
}

TEST(Tensor, EvaluationIsBitDeterministic) {
  const auto run = [] {
    const Tensor x = oracle::random_input(2, 5, 6, 11);
    return values(softmax_rows(matmul(x, transpose(x))));
  };
  EXPECT_EQ(run(), run());
}

// Every differentiable operation against central differences on 20 seeds.
class GradientSuite : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradientSuite, MatchesCentralDifferences) {
  const auto cases = oracle::gradient_cases();
  const auto& c = cases[GetParam()];
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto report = oracle::check_gradients(c, seed);
    ASSERT_LT(report.max_rel_error, 1e-4) << c.name << " seed " << seed << " at " << report.worst;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, GradientSuite, ::testing::Range<std::size_t>(0, oracle::gradient_cases().size()),
                         [](const auto& info) { return oracle::gradient_cases()[info.param].name; });

TEST(Checkpoint, RoundTripIsExact) {
  std::vector<NamedTensor> params{{"a", Tensor::from({2, 2}, {1.5, -0.0, 1e-300, 3.0})},
                                  {"b.c", Tensor::from({3}, {std::nextafter(1.0, 2.0), -7.25, 0.1})}};
  std::stringstream buf;
  write_checkpoint(buf, params);
  const auto back = read_checkpoint(buf);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].name, params[i].name);
    EXPECT_EQ(back[i].tensor.shape(), params[i].tensor.shape());
    EXPECT_EQ(values(back[i].tensor), values(params[i].tensor));
  }
}

TEST(Checkpoint, HeaderBytesAndBadMagic) {
  std::stringstream buf;
  write_checkpoint(buf, {{"x", Tensor::from({1}, {1.0})}});
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.substr(0, 5), "DLAB1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), kCheckpointVersion);

  std::stringstream bad("NOPE!xxxxxxxx");
  EXPECT_THROW(read_checkpoint(bad), DataError);

  std::string wrong_version = bytes;
  wrong_version[5] = 9;
  std::stringstream versioned(wrong_version);
  try {
    read_checkpoint(versioned);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("re-save"), std::string::npos) << e.what();
  }
}
