#include "det/kdtree.hpp"

#include <doctest.h>

#include <algorithm>
#include <random>

using namespace det;

namespace {

std::vector<Neighbor> brute_knn(const Matrix& pts, const Vector& q, Index k) {
  std::vector<Neighbor> all;
  for (Index i = 0; i < pts.cols(); ++i) all.push_back({i, (pts.col(i) - q).squaredNorm()});
  std::sort(all.begin(), all.end(), closer);
  all.resize(static_cast<std::size_t>(std::min<Index>(k, pts.cols())));
  return all;
}

}  // namespace

TEST_CASE("knn matches brute force") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal;
  for (Index dim : {1, 2, 3}) {
    Matrix pts(dim, 700);
    for (Index i = 0; i < pts.size(); ++i) pts.data()[i] = normal(rng);
    const KdTree tree(pts, 8);
    for (int rep = 0; rep < 40; ++rep) {
      Vector q(dim);
      for (Index d = 0; d < dim; ++d) q(d) = normal(rng);
      for (Index k : {1, 5, 17}) {
        const auto got = tree.knn(q.data(), k);
        const auto want = brute_knn(pts, q, k);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
          CHECK(got[i].index == want[i].index);
          CHECK(got[i].dist2 == doctest::Approx(want[i].dist2).epsilon(1e-14));
        }
      }
    }
  }
}

TEST_CASE("knn breaks ties by lower index and handles k >= size") {
  Matrix pts(2, 5);
  pts << 0, 1, 1, 0, 2, 0, 0, 0, 0, 0;  // points 0 and 3 coincide, 1 and 2 coincide
  const KdTree tree(pts, 1);
  const double q[2] = {0.0, 0.0};
  const auto nb = tree.knn(q, 3);
  REQUIRE(nb.size() == 3);
  CHECK(nb[0].index == 0);
  CHECK(nb[1].index == 3);
  CHECK(nb[2].index == 1);
  CHECK(tree.knn(q, 50).size() == 5);
}

TEST_CASE("radius search returns exactly the points inside the ball") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Matrix pts(2, 1000);
  for (Index i = 0; i < pts.size(); ++i) pts.data()[i] = unit(rng);
  const KdTree tree(pts);
  std::vector<Neighbor> out;
  for (int rep = 0; rep < 30; ++rep) {
    const Vector q = Vector::Random(2);
    const double r = 0.05 + 0.3 * (rep % 5);
    out.clear();
    tree.radius_search(q.data(), r, out);
    std::vector<Index> got;
    for (const auto& nb : out) got.push_back(nb.index);
    std::sort(got.begin(), got.end());
    std::vector<Index> want;
    for (Index i = 0; i < pts.cols(); ++i)
      if ((pts.col(i) - q).squaredNorm() <= r * r) want.push_back(i);
    CHECK(got == want);
  }
}
