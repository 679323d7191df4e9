#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "sclip/core_math.hpp"
#include "sclip/error.hpp"
#include "sclip/matrix.hpp"

namespace sclip {

/// Paper default for the number of Sinkhorn rounds.
inline constexpr int kDefaultSinkhornIterations = 10;

/// Transport cost between unlabeled and labeled embeddings; entries are
/// one minus cosine similarity, hence in [0, 2] for unit rows.
class CostMatrix {
 public:
  static CostMatrix from_values(Matrix m) {
    if (!all_finite(m)) {
      throw Error(Errc::non_finite, "cost matrix contains NaN/inf");
    }
    return CostMatrix(std::move(m));
  }

  std::size_t m() const noexcept { return values_.rows(); }
  std::size_t n() const noexcept { return values_.cols(); }
  const Matrix& values() const noexcept { return values_; }

 private:
  explicit CostMatrix(Matrix m) : values_(std::move(m)) {}
  Matrix values_;
};

/// Entropic OT coupling with the marginals it was solved against.
struct TransportPlan {
  Matrix values;                     // M x N, nonnegative, total mass 1
  std::vector<double> row_marginal;  // p, length M
  std::vector<double> col_marginal;  // q, length N
  int iterations_run = 0;
};

/// C_ij = 1 - u_i . x_j
inline CostMatrix cost_from_embeddings(const EmbeddingMatrix& u, const EmbeddingMatrix& x) {
  Matrix c = cosine_matrix(u, x);
  for (double& v : c.storage()) v = 1.0 - v;
  return CostMatrix::from_values(std::move(c));
}

/// Sinkhorn-Knopp on the kernel K = exp(-C/lambda). The scaling vectors start
/// uniform; each iteration applies one full round u <- p/(Kv), v <- q/(K^T u)
/// and the plan is diag(u) K diag(v). iterations = 0 returns the kernel under
/// the uniform initialization, rescaled to total mass one, which makes
/// row-normalization of the plan coincide with the soft nearest-neighbor
/// pseudo-label at temperature lambda.
inline TransportPlan solve(const CostMatrix& c, const ProbabilityVector& p,
                           const ProbabilityVector& q, double lambda, int iterations) {
  if (lambda <= 0.0) {
    throw Error(Errc::bad_lambda, "sinkhorn: lambda must be positive");
  }
  if (iterations < 0) {
    throw Error(Errc::config_invalid, "sinkhorn: iterations must be >= 0");
  }
  const std::size_t m = c.m();
  const std::size_t n = c.n();
  if (p.size() != m || q.size() != n) {
    throw Error(Errc::dim_mismatch, "sinkhorn: marginal lengths do not match cost");
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (p[i] <= 0.0) throw Error(Errc::config_invalid, "sinkhorn: p must be strictly positive");
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (q[j] <= 0.0) throw Error(Errc::config_invalid, "sinkhorn: q must be strictly positive");
  }

  Matrix kernel(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      kernel(i, j) = std::exp(-c.values()(i, j) / lambda);
    }
  }
  for (std::size_t i = 0; i < m; ++i) {
    double row_max = 0.0;
    for (std::size_t j = 0; j < n; ++j) row_max = std::max(row_max, kernel(i, j));
    if (row_max == 0.0) {
      throw Error(Errc::zero_kernel_row,
                  "sinkhorn: kernel row " + std::to_string(i) +
                      " underflowed to zero; increase lambda",
                  i);
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    double col_max = 0.0;
    for (std::size_t i = 0; i < m; ++i) col_max = std::max(col_max, kernel(i, j));
    if (col_max == 0.0) {
      throw Error(Errc::zero_kernel_row,
                  "sinkhorn: kernel column " + std::to_string(j) +
                      " underflowed to zero; increase lambda",
                  j);
    }
  }

  std::vector<double> u(m, 1.0 / static_cast<double>(m));
  std::vector<double> v(n, 1.0 / static_cast<double>(n));
  for (int t = 0; t < iterations; ++t) {
    for (std::size_t i = 0; i < m; ++i) {
      double kv = 0.0;
      for (std::size_t j = 0; j < n; ++j) kv += kernel(i, j) * v[j];
      u[i] = p[i] / kv;
    }
    for (std::size_t j = 0; j < n; ++j) {
      double ktu = 0.0;
      for (std::size_t i = 0; i < m; ++i) ktu += kernel(i, j) * u[i];
      v[j] = q[j] / ktu;
    }
  }

  TransportPlan plan;
  plan.values = Matrix(m, n);
  double mass = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      plan.values(i, j) = u[i] * kernel(i, j) * v[j];
      mass += plan.values(i, j);
    }
  }
  if (iterations == 0) {
    // The uniform initialization carries no marginal information; only the
    // global scale is fixed here.
    for (double& x : plan.values.storage()) x /= mass;
  }
  plan.row_marginal.assign(p.values().begin(), p.values().end());
  plan.col_marginal.assign(q.values().begin(), q.values().end());
  plan.iterations_run = iterations;
  return plan;
}

/// (max_i |row_sum_i - p_i|, max_j |col_sum_j - q_j|)
inline std::pair<double, double> marginal_residual(const TransportPlan& plan) {
  const std::size_t m = plan.values.rows();
  const std::size_t n = plan.values.cols();
  double row_res = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += plan.values(i, j);
    row_res = std::max(row_res, std::fabs(s - plan.row_marginal[i]));
  }
  double col_res = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += plan.values(i, j);
    col_res = std::max(col_res, std::fabs(s - plan.col_marginal[j]));
  }
  return {row_res, col_res};
}

}  // namespace sclip
