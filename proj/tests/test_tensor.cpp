#include <doctest.h>

#include <atomic>
#include <cmath>
#include <numeric>
#include <vector>

#include "ohf/ops.hpp"
#include "ohf/parallel.hpp"
#include "ohf/rng.hpp"
#include "ohf/tensor.hpp"
#include "test_util.hpp"

using ohf::Tensor;

TEST_CASE("shape helpers") {
  CHECK(ohf::shape_str({2, 3}) == "[2,3]");
  CHECK(ohf::shape_str({}) == "[]");
  CHECK(ohf::shape_numel({2, 3, 4}) == 24);
  CHECK(ohf::shape_numel({}) == 1);
}

TEST_CASE("factories and element access") {
  auto z = Tensor<float>::zeros({2, 2});
  CHECK(z.numel() == 4);
  for (float v : z.values()) CHECK(v == 0.0f);

  auto f = Tensor<float>::full({3}, 2.5f);
  for (float v : f.values()) CHECK(v == 2.5f);

  auto s = Tensor<float>::scalar(7.0f);
  CHECK(s.item() == 7.0f);
  CHECK(s.dim() == 0);

  CHECK_THROWS_AS(Tensor<float>::from_values({2, 2}, {1.0f}), ohf::Error);
  CHECK_THROWS_AS(Tensor<float>::zeros({0, 2}), ohf::Error);
  CHECK_THROWS_AS(f.item(), ohf::Error);
}

TEST_CASE("leaf values are mutable, op outputs are not") {
  auto x = Tensor<float>::full({2}, 1.0f, true);
  x.mutable_values()[0] = 3.0f;
  CHECK(x.values()[0] == 3.0f);

  auto y = ohf::add(x, x);
  CHECK_THROWS_AS(y.mutable_values(), ohf::Error);
}

TEST_CASE("backward: sum gives ones") {
  auto x = Tensor<float>::from_values({3}, {1.0f, -2.0f, 0.5f}, true);
  ohf::sum_all(x).backward();
  for (float g : x.grad()) CHECK(g == 1.0f);
}

TEST_CASE("backward: sum of squares gives 2x") {
  auto x = Tensor<float>::from_values({3}, {1.0f, -2.0f, 0.5f}, true);
  ohf::sum_all(ohf::mul(x, x)).backward();
  for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0f * x.values()[i]));
}

TEST_CASE("backward accumulates additively across calls") {
  auto x = Tensor<float>::from_values({2}, {1.0f, 2.0f}, true);
  auto loss = ohf::sum_all(ohf::mul(x, x));
  loss.backward();
  loss.backward();
  // Double the one-sweep gradient; interior nodes must not compound.
  CHECK(x.grad()[0] == doctest::Approx(4.0f));
  CHECK(x.grad()[1] == doctest::Approx(8.0f));
}

TEST_CASE("backward visits shared subexpressions once per path") {
  auto x = Tensor<float>::from_values({2}, {3.0f, -1.0f}, true);
  auto sq = ohf::mul(x, x);
  auto loss = ohf::sum_all(ohf::add(sq, sq));  // 2·x²
  loss.backward();
  CHECK(x.grad()[0] == doctest::Approx(4.0f * 3.0f));
  CHECK(x.grad()[1] == doctest::Approx(4.0f * -1.0f));
}

TEST_CASE("backward contract errors") {
  auto x = Tensor<float>::full({2}, 1.0f, true);
  auto y = ohf::add(x, x);
  CHECK_THROWS_AS(y.backward(), ohf::Error);  // non-scalar

  auto frozen = Tensor<float>::scalar(1.0f, false);
  CHECK_THROWS_AS(frozen.backward(), ohf::Error);  // nothing tracked
}

TEST_CASE("detach cuts the graph") {
  auto x = Tensor<float>::from_values({2}, {2.0f, 3.0f}, true);
  auto y = ohf::mul(x, x).detach();
  CHECK_FALSE(y.requires_grad());
  auto z = ohf::sum_all(ohf::mul(x, ohf::scale(y, 1.0f)));
  z.backward();
  // y treated as a constant: d/dx (x·y) = y = x².
  CHECK(x.grad()[0] == doctest::Approx(4.0f));
  CHECK(x.grad()[1] == doctest::Approx(9.0f));
}

TEST_CASE("NoGradGuard suppresses recording") {
  auto x = Tensor<float>::full({2}, 1.0f, true);
  ohf::NoGradGuard guard;
  auto y = ohf::sum_all(ohf::mul(x, x));
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("zero_grad resets accumulation") {
  auto x = Tensor<float>::full({2}, 2.0f, true);
  ohf::sum_all(x).backward();
  x.zero_grad();
  ohf::sum_all(x).backward();
  for (float g : x.grad()) CHECK(g == 1.0f);
}

// ---------------------------------------------------------------------------
// RNG
// ---------------------------------------------------------------------------

TEST_CASE("rng: identical seeds give identical streams") {
  ohf::Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  ohf::Rng c(43);
  bool differs = false;
  for (int i = 0; i < 10; ++i) differs = differs || (a.next_u64() != c.next_u64());
  CHECK(differs);
}

TEST_CASE("rng: state round trip resumes the stream") {
  ohf::Rng a(7);
  for (int i = 0; i < 13; ++i) a.next_u64();
  const auto saved = a.state();
  std::vector<std::uint64_t> expect;
  for (int i = 0; i < 20; ++i) expect.push_back(a.next_u64());

  ohf::Rng b(999);
  b.set_state(saved);
  for (int i = 0; i < 20; ++i) CHECK(b.next_u64() == expect[static_cast<std::size_t>(i)]);
  CHECK(saved.size() == 4);  // four 64-bit words, the exact checkpoint payload
}

TEST_CASE("rng: uniform stays in [0,1) and is roughly centered") {
  ohf::Rng r(1);
  double sum = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    sum += u;
  }
  CHECK(sum / 20000 == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("rng: normal moments") {
  ohf::Rng r(2);
  double sum = 0.0, sq = 0.0;
  const int n = 50000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    sum += z;
    sq += z * z;
  }
  const double mean = sum / n;
  CHECK(mean == doctest::Approx(0.0).epsilon(1.0));
  CHECK(std::abs(mean) < 0.02);
  CHECK(sq / n - mean * mean == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("rng: truncated normal respects the clip") {
  ohf::Rng r(3);
  for (int i = 0; i < 5000; ++i) {
    const double v = r.trunc_normal(0.02);
    CHECK(std::abs(v) <= 0.02 * 2.0 + 1e-12);
  }
}

TEST_CASE("rng: uniform_int bounds and bernoulli rate") {
  ohf::Rng r(4);
  int hits = 0;
  for (int i = 0; i < 10000; ++i) {
    const int k = r.uniform_int(7);
    CHECK(k >= 0);
    CHECK(k < 7);
    if (r.bernoulli(0.25)) ++hits;
  }
  CHECK(hits / 10000.0 == doctest::Approx(0.25).epsilon(0.1));
}

TEST_CASE("rng: shuffle is a permutation and is deterministic") {
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  ohf::Rng a(5);
  a.shuffle(v);
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);

  std::vector<int> w(50);
  std::iota(w.begin(), w.end(), 0);
  ohf::Rng b(5);
  b.shuffle(w);
  CHECK(v == w);
}

// ---------------------------------------------------------------------------
// Parallel execution
// ---------------------------------------------------------------------------

TEST_CASE("parallel_for covers every index exactly once") {
  for (int workers : {1, 2, 3, 8}) {
    ohf::set_thread_count(workers);
    std::vector<std::atomic<int>> hits(101);
    for (auto& h : hits) h = 0;
    ohf::parallel_for(101, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t i = lo; i < hi; ++i) hits[static_cast<std::size_t>(i)]++;
    });
    for (auto& h : hits) CHECK(h == 1);
  }
  ohf::set_thread_count(1);
}

TEST_CASE("kernels are bitwise identical for any worker count") {
  ohf::Rng rng(11);
  auto a = ohftest::random_tensor<float>({3, 17, 9}, rng);
  auto b = ohftest::random_tensor<float>({3, 9, 13}, rng);

  ohf::set_thread_count(1);
  auto c1 = ohf::matmul(a, b);
  ohf::set_thread_count(4);
  auto c4 = ohf::matmul(a, b);
  ohf::set_thread_count(1);

  CHECK(c1.values() == c4.values());  // bitwise, not approximate
}
