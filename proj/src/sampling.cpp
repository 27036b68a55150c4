#include "det/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

namespace det {

namespace {

double unit_uniform(std::mt19937_64& rng) {
  // (0, 1), 53-bit resolution
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

}  // namespace

VoxelGrid::VoxelGrid(const Matrix& points, const Matrix* features, double cell_size)
    : cell_size_(cell_size), dim_(points.rows()) {
  if (!(cell_size > 0.0)) throw ParameterError("voxel cell size must be positive");
  if (dim_ > 3) throw ParameterError("voxel grids support at most three dimensions");
  const Index n = points.cols();
  for (Index i = 0; i < n; ++i) cells_[key_of(points.col(i))].members.push_back(i);

  for (auto& [key, cell] : cells_) {
    if (features != nullptr && cell.members.size() > 1) {
      double best = 0.0;
      const double count = static_cast<double>(cell.members.size());
      for (Index d = 0; d < features->rows(); ++d) {
        double mean = 0.0;
        for (Index i : cell.members) mean += (*features)(d, i);
        mean /= count;
        double var = 0.0;
        for (Index i : cell.members) var += ((*features)(d, i) - mean) * ((*features)(d, i) - mean);
        best = std::max(best, std::sqrt(var / count));
      }
      cell.feature_std = best;
    }
    int empty = 0;
    for (Index d = 0; d < dim_; ++d) {
      for (int step : {-1, 1}) {
        CellKey nb = key;
        nb[static_cast<std::size_t>(d)] += step;
        if (!cells_.contains(nb)) ++empty;
      }
    }
    const int faces = static_cast<int>(2 * dim_);
    cell.boundary_frac = empty == faces ? 0.0 : static_cast<double>(empty) / faces;
  }

  point_cell_.resize(static_cast<std::size_t>(n));
  for (const auto& [key, cell] : cells_)
    for (Index i : cell.members) point_cell_[static_cast<std::size_t>(i)] = &cell;
}

CellKey VoxelGrid::key_of(const Eigen::Ref<const Vector>& point) const {
  CellKey key{0, 0, 0};
  for (Index d = 0; d < dim_; ++d)
    key[static_cast<std::size_t>(d)] = static_cast<std::int64_t>(std::floor(point(d) / cell_size_));
  return key;
}

const VoxelGrid::Cell& VoxelGrid::cell_of_point(Index i) const { return *point_cell_[static_cast<std::size_t>(i)]; }

Vector vgis_probabilities(const VoxelGrid& grid, Index count, double lambda_g, double epsilon) {
  Vector w(count);
  for (Index i = 0; i < count; ++i) {
    const auto& cell = grid.cell_of_point(i);
    w(i) = std::max(cell.feature_std, lambda_g * cell.boundary_frac) + epsilon;
  }
  return w / w.sum();
}

double default_cell_size(const Matrix& points) {
  const double diameter = bounding_box_diameter(points);
  return diameter > 0.0 ? diameter / 50.0 : 1.0;
}

SampleSet vgis_sample(const Matrix& points, const Matrix* features, Index target_count, double lambda_g,
                      double epsilon, double cell_size, std::uint64_t seed) {
  if (target_count < 1) throw ParameterError("sample size must be at least 1");
  if (!(epsilon > 0.0)) throw ParameterError("VGIS epsilon must be positive");
  const Index count = points.cols();
  const VoxelGrid grid(points, features, cell_size);
  const Vector prob = vgis_probabilities(grid, count, lambda_g, epsilon);

  SampleSet out;
  if (target_count >= count) {
    if (target_count > count)
      warn("requested " + std::to_string(target_count) + " samples from " + std::to_string(count) +
           " points; using all points");
    out.indices.resize(static_cast<std::size_t>(count));
    std::iota(out.indices.begin(), out.indices.end(), Index{0});
    out.weights = prob;
    return out;
  }

  // Efraimidis-Spirakis: the largest log(u)/w keys form a weighted sample without replacement.
  std::mt19937_64 rng(seed);
  std::vector<std::pair<double, Index>> keys(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) keys[static_cast<std::size_t>(i)] = {std::log(unit_uniform(rng)) / prob(i), i};
  std::nth_element(keys.begin(), keys.begin() + target_count, keys.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  out.indices.reserve(static_cast<std::size_t>(target_count));
  for (Index i = 0; i < target_count; ++i) out.indices.push_back(keys[static_cast<std::size_t>(i)].second);
  std::sort(out.indices.begin(), out.indices.end());
  out.weights.resize(target_count);
  for (Index i = 0; i < target_count; ++i) out.weights(i) = prob(out.indices[static_cast<std::size_t>(i)]);
  return out;
}

Matrix interpolate_displacement(const Matrix& full_points, const Matrix& sampled_points,
                                const Matrix& sampled_displacement, double beta,
                                std::optional<std::span<const Index>> sampled_indices) {
  const Index ms = sampled_points.cols();
  if (sampled_displacement.cols() != ms) throw ParameterError("sampled displacement count mismatch");
  const double inv = 0.5 / (beta * beta);

  auto cross_kernel = [&](const Matrix& a, const Matrix& b) {
    Matrix k = (a.transpose() * b * 2.0).colwise() - a.colwise().squaredNorm().transpose();
    k.rowwise() -= b.colwise().squaredNorm();
    return (k.array().min(0.0) * inv).exp().matrix().eval();
  };

  Matrix gram = cross_kernel(sampled_points, sampled_points);
  gram = 0.5 * (gram + gram.transpose()).eval();
  Eigen::LLT<Matrix> llt(gram);
  double jitter = 0.0;
  while (llt.info() != Eigen::Success || llt.rcond() < 1e-13) {
    jitter = jitter == 0.0 ? 1e-8 : jitter * 10.0;
    if (jitter > 1e-2) throw NumericalError("interpolation kernel system is singular");
    Matrix ridged = gram;
    ridged.diagonal().array() += jitter;
    llt.compute(ridged);
  }
  if (jitter > 0.0) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", jitter);
    warn(std::string("interpolation kernel ill-conditioned; added ridge jitter ") + buf);
  }
  const Matrix weights = llt.solve(sampled_displacement.transpose());  // Ms x D

  const Index m = full_points.cols();
  Matrix out(sampled_displacement.rows(), m);
  constexpr Index kBlock = 2048;
  for (Index start = 0; start < m; start += kBlock) {
    const Index width = std::min(kBlock, m - start);
    out.middleCols(start, width) = (cross_kernel(full_points.middleCols(start, width), sampled_points) * weights).transpose();
  }
  if (sampled_indices) {
    const auto& idx = *sampled_indices;
    for (Index j = 0; j < static_cast<Index>(idx.size()); ++j) out.col(idx[j]) = sampled_displacement.col(j);
  }
  return out;
}

}  // namespace det
