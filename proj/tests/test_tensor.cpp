#include <gtest/gtest.h>

#include "bln/tensor.hpp"

using namespace bln;

TEST(Tensor, ZerosOnes) {
  EXPECT_EQ(zeros({2, 2}).values(), (std::vector<double>{0, 0, 0, 0}));
  EXPECT_EQ(ones({3}).values(), (std::vector<double>{1, 1, 1}));
  EXPECT_THROW(zeros({}), ShapeError);
  EXPECT_THROW(zeros({2, 0}), ShapeError);
  EXPECT_THROW(zeros({1, 1, 1, 1, 1}), ShapeError);
}

TEST(Tensor, RandnIsReproducible) {
  Rng a(7), b(7);
  const Tensor x = randn({4}, a);
  const Tensor y = randn({4}, b);
  EXPECT_EQ(x, y);
  Rng c(8);
  EXPECT_NE(x, randn({4}, c));
}

TEST(Tensor, RandnLooksStandardNormal) {
  Rng rng(1);
  const Tensor x = randn({20000}, rng);
  const double mean = sum(x) / 20000.0;
  const double var = sum(mul(x, x)) / 20000.0 - mean * mean;
  EXPECT_NEAR(mean, 0.0, 0.03);
  EXPECT_NEAR(var, 1.0, 0.05);
}

TEST(Tensor, ForkedStreamsDiffer) {
  Rng base(3);
  Rng a = base.fork(1), b = base.fork(2);
  EXPECT_NE(a.next_u64(), b.next_u64());
  Rng a2 = Rng(3).fork(1);
  Rng a3 = Rng(3).fork(1);
  EXPECT_EQ(a2.next_u64(), a3.next_u64());
}

TEST(Tensor, Matmul) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  EXPECT_EQ(matmul(eye, a), a);
  EXPECT_EQ(matmul(a, Tensor::matrix({{1}, {1}})), Tensor::matrix({{3}, {7}}));
  EXPECT_THROW(matmul(zeros({2, 3}), zeros({2, 3})), ShapeError);
}

TEST(Tensor, RowMajorLayout) {
  const Tensor a = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(a[i * 3 + j], a.at(i, j));
  EXPECT_EQ(a.at(1, 0), 4.0);
}

TEST(Tensor, ReduceMean) {
  const Tensor x = Tensor::matrix({{1, 3}, {5, 7}});
  EXPECT_EQ(reduce_mean(x, 0), Tensor::vector({3, 5}));
  EXPECT_EQ(reduce_mean(x, 1), Tensor::vector({2, 6}));
  EXPECT_THROW(reduce_mean(x, 2), ShapeError);
  Rng rng(2);
  const Tensor t = randn({2, 3, 4}, rng);
  const Tensor m = reduce_mean(t, 1);
  ASSERT_EQ(m.shape(), (Shape{2, 4}));
  EXPECT_DOUBLE_EQ(m[1 * 4 + 2], (t[12 + 2] + t[12 + 6] + t[12 + 10]) / 3.0);
}

TEST(Tensor, ReshapeRoundTrip) {
  const Tensor x = Tensor::vector({1, 2, 3, 4});
  const Tensor y = reshape(x, {2, 2});
  EXPECT_EQ(y.at(1, 0), 3.0);
  EXPECT_EQ(reshape(y, {4}), x);
  EXPECT_THROW(reshape(x, {3}), ShapeError);
}

TEST(Tensor, Elementwise) {
  const Tensor a = Tensor::vector({1, 2, 3});
  const Tensor b = Tensor::vector({4, 5, 6});
  EXPECT_EQ(add(a, b), Tensor::vector({5, 7, 9}));
  EXPECT_EQ(sub(b, a), Tensor::vector({3, 3, 3}));
  EXPECT_EQ(mul(a, b), Tensor::vector({4, 10, 18}));
  EXPECT_EQ(div(b, Tensor::vector({2, 5, 3})), Tensor::vector({2, 1, 2}));
  EXPECT_THROW(div(a, Tensor::vector({1, 0, 1})), Error);
  EXPECT_THROW(add(a, zeros({2})), ShapeError);
  EXPECT_EQ(map(a, [](double v) { return v; }), a);
}

TEST(Tensor, OperationsArePure) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor copy = a;
  (void)add(a, a);
  (void)matmul(a, a);
  (void)transpose2d(a);
  (void)reduce_mean(a, 0);
  (void)reshape(a, {4});
  EXPECT_EQ(a, copy);
}

TEST(Tensor, Transpose) {
  const Tensor a = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(transpose2d(a), Tensor::matrix({{1, 4}, {2, 5}, {3, 6}}));
  EXPECT_EQ(transpose2d(transpose2d(a)), a);
}

TEST(Tensor, RowGather) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
  const std::vector<std::size_t> idx{2, 0};
  EXPECT_EQ(take_rows(a, idx), Tensor::matrix({{5, 6}, {1, 2}}));
  EXPECT_EQ(slice_rows(a, 1, 3), Tensor::matrix({{3, 4}, {5, 6}}));
}
