#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sclip/error.hpp"
#include "sclip/matrix.hpp"

namespace sclip {

inline constexpr double kZeroRowNorm = 1e-12;
inline constexpr double kUnitNormTol = 1e-6;
inline constexpr double kLogClamp = 1e-12;

/// Rows of unit-norm vectors in the shared joint embedding space. Holds the
/// labeled image embeddings, text embeddings, unlabeled image embeddings and
/// keyword embeddings alike; construction enforces the unit-norm invariant.
class EmbeddingMatrix {
 public:
  static EmbeddingMatrix from_unit_rows(Matrix m) {
    if (!all_finite(m)) {
      throw Error(Errc::non_finite, "embedding matrix contains NaN/inf");
    }
    for (std::size_t i = 0; i < m.rows(); ++i) {
      if (std::fabs(norm2(m.row(i)) - 1.0) > kUnitNormTol) {
        throw Error(Errc::zero_row, "row " + std::to_string(i) + " is not unit norm", i);
      }
    }
    return EmbeddingMatrix(std::move(m));
  }

  std::size_t rows() const noexcept { return values_.rows(); }
  std::size_t dim() const noexcept { return values_.cols(); }
  const Matrix& values() const noexcept { return values_; }
  std::span<const double> row(std::size_t i) const { return values_.row(i); }

 private:
  friend EmbeddingMatrix normalize_rows(const Matrix&);
  explicit EmbeddingMatrix(Matrix m) : values_(std::move(m)) {}
  Matrix values_;
};

/// Nonnegative entries summing to one within 1e-9.
class ProbabilityVector {
 public:
  static ProbabilityVector from_values(std::vector<double> v) {
    double sum = 0.0;
    for (double x : v) {
      if (!std::isfinite(x)) {
        throw Error(Errc::non_finite, "probability vector contains NaN/inf");
      }
      if (x < 0.0) {
        throw Error(Errc::spec_invalid, "probability vector has a negative entry");
      }
      sum += x;
    }
    if (std::fabs(sum - 1.0) > 1e-9) {
      throw Error(Errc::spec_invalid,
                  "probability vector sums to " + std::to_string(sum));
    }
    return ProbabilityVector(std::move(v));
  }

  static ProbabilityVector uniform(std::size_t n) {
    return ProbabilityVector(std::vector<double>(n, 1.0 / static_cast<double>(n)));
  }

  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  const std::vector<double>& values() const noexcept { return values_; }
  operator std::span<const double>() const { return values_; }

 private:
  explicit ProbabilityVector(std::vector<double> v) : values_(std::move(v)) {}
  std::vector<double> values_;
};

/// Divide each row by its Euclidean norm.
inline EmbeddingMatrix normalize_rows(const Matrix& m) {
  if (!all_finite(m)) {
    throw Error(Errc::non_finite, "normalize_rows: input contains NaN/inf");
  }
  Matrix out = m;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const double n = norm2(out.row(i));
    if (!std::isfinite(n)) {
      throw Error(Errc::non_finite, "normalize_rows: row " + std::to_string(i) + " norm overflowed", i);
    }
    if (n <= kZeroRowNorm) {
      throw Error(Errc::zero_row, "normalize_rows: row " + std::to_string(i) + " is zero", i);
    }
    for (double& x : out.row(i)) x /= n;
  }
  return EmbeddingMatrix(std::move(out));
}

/// Pairwise cosine similarities; entry (i, j) = a_i . b_j.
inline Matrix cosine_matrix(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  if (a.dim() != b.dim()) {
    throw Error(Errc::dim_mismatch, "cosine_matrix: dims " + std::to_string(a.dim()) +
                                        " vs " + std::to_string(b.dim()));
  }
  return matmul_nt(a.values(), b.values());
}

/// Temperature softmax over raw scores, computed with max-subtraction.
inline std::vector<double> softmax_scores(std::span<const double> scores, double tau) {
  double smax = scores[0];
  for (double s : scores) smax = std::max(smax, s);
  std::vector<double> out(scores.size());
  double denom = 0.0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    out[j] = std::exp((scores[j] - smax) / tau);
    denom += out[j];
  }
  for (double& x : out) x /= denom;
  return out;
}

/// sigma_tau(query, targets): softmax over the cosine similarities between a
/// unit query and each target row.
inline ProbabilityVector softmax_classifier(std::span<const double> query,
                                            const EmbeddingMatrix& targets, double tau) {
  if (tau <= 0.0) {
    throw Error(Errc::bad_temperature, "softmax_classifier: tau must be positive");
  }
  if (query.size() != targets.dim()) {
    throw Error(Errc::dim_mismatch, "softmax_classifier: query dim mismatch");
  }
  std::vector<double> scores(targets.rows());
  for (std::size_t j = 0; j < targets.rows(); ++j) scores[j] = dot(query, targets.row(j));
  return ProbabilityVector::from_values(softmax_scores(scores, tau));
}

/// -sum_j target_j * log(pred_j), predictions clamped at 1e-12 before log.
inline double cross_entropy_raw(std::span<const double> pred, std::span<const double> target) {
  double h = 0.0;
  for (std::size_t j = 0; j < pred.size(); ++j) {
    if (target[j] != 0.0) h -= target[j] * std::log(std::max(pred[j], kLogClamp));
  }
  return h;
}

inline double cross_entropy(const ProbabilityVector& pred, const ProbabilityVector& target) {
  if (pred.size() != target.size()) {
    throw Error(Errc::length_mismatch, "cross_entropy: lengths " + std::to_string(pred.size()) +
                                           " vs " + std::to_string(target.size()));
  }
  return cross_entropy_raw(pred.values(), target.values());
}

/// Row-wise temperature softmax of a raw similarity matrix (logits = sim/tau).
inline Matrix softmax_rows(const Matrix& sims, double tau) {
  Matrix out = sims;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto p = softmax_scores(out.row(i), tau);
    std::copy(p.begin(), p.end(), out.row(i).begin());
  }
  return out;
}

inline std::size_t argmax_index(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < v.size(); ++j) {
    if (v[j] > v[best]) best = j;  // ties keep the lowest index
  }
  return best;
}

}  // namespace sclip
