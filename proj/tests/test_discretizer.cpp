#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <limits>

#include "doctest.h"
#include "newt/discretizer.hpp"

using namespace newt;

namespace {

// Logits whose softmax is exactly the given distribution.
std::vector<double> logits_of(const std::vector<double>& p) {
  std::vector<double> l(p.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    l[i] = p[i] > 0 ? std::log(p[i]) : -std::numeric_limits<double>::infinity();
  return l;
}

}  // namespace

TEST_CASE("symlog and symexp are inverse") {
  for (double y = -1e4; y <= 1e4; y += 7.31) {
    CHECK(std::abs(symexp(symlog(y)) - y) <= 1e-9 * std::max(1.0, std::abs(y)));
    CHECK(std::abs(symlog(symexp(symlog(y))) - symlog(y)) <= 1e-9);
  }
  CHECK(symlog(0.0) == 0.0);
  CHECK(symlog(-3.0) == -symlog(3.0));
}

TEST_CASE("two-hot round trip stays within half a bin in transformed space") {
  const DiscretizerSpec spec;
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double y = rng.uniform(-50.0, 50.0);
    const double back = decode(logits_of(two_hot(y, spec)), spec);
    CHECK(std::abs(symlog(back) - symlog(y)) <= 0.5 * spec.bin_width());
  }
}

TEST_CASE("two-hot encodings are convex weights on at most two adjacent bins") {
  const DiscretizerSpec spec(11, -10, 10);
  for (double y : {-1e6, -20.0, -1.0, 0.0, 0.3, 7.0, 1e6}) {
    const auto w = two_hot(y, spec);
    double sum = 0.0;
    int nz = 0, first = -1, last = -1;
    for (int k = 0; k < 11; ++k) {
      CHECK(w[k] >= 0.0);
      sum += w[k];
      if (w[k] > 0) {
        ++nz;
        if (first < 0) first = k;
        last = k;
      }
    }
    CHECK(sum == doctest::Approx(1.0));
    CHECK(nz <= 2);
    CHECK(last - first <= 1);
  }
  // Values beyond the range land on the edge bins.
  CHECK(two_hot(1e6, spec)[10] == doctest::Approx(1.0));
  CHECK(two_hot(-1e6, spec)[0] == doctest::Approx(1.0));
}

TEST_CASE("uniform logits decode to zero and batch decode agrees with the scalar one") {
  const DiscretizerSpec spec;
  CHECK(std::abs(decode(std::vector<double>(101, 0.3), spec)) < 1e-9);
  Rng rng(2);
  const MatrixD logits = rng.normal_matrix<double>(5, 101) * 3.0;
  const VectorD v = decode_rows(logits, spec);
  for (Index r = 0; r < 5; ++r) {
    std::vector<double> row(logits.row(r).data(), logits.row(r).data() + 101);
    CHECK(v(r) == doctest::Approx(decode(row, spec)).epsilon(1e-12));
  }
}

TEST_CASE("cross-entropy matches the scalar reference and rejects bad targets") {
  const DiscretizerSpec spec;
  Rng rng(3);
  const MatrixD logits = rng.normal_matrix<double>(3, 101);
  VectorD ys(3);
  ys << -4.0, 0.5, 30.0;
  const MatrixD t = two_hot_rows(ys, spec);
  MatrixD g;
  const VectorD l = ce_loss_rows(logits, t, &g);
  for (Index r = 0; r < 3; ++r) {
    std::vector<double> lr(logits.row(r).data(), logits.row(r).data() + 101);
    std::vector<double> tr(t.row(r).data(), t.row(r).data() + 101);
    const CeResult ref = ce_loss(lr, tr);
    CHECK(l(r) == doctest::Approx(ref.loss).epsilon(1e-12));
    for (int k = 0; k < 101; ++k) CHECK(g(r, k) == doctest::Approx(ref.grad_logits[k]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(ce_loss(std::vector<double>(101, 0.0), std::vector<double>(101, 0.0)), ContractError);
  CHECK_THROWS(DiscretizerSpec(1, 0, 1));
}
