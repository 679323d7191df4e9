#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sclip/core_math.hpp"
#include "sclip/error.hpp"
#include "sclip/matrix.hpp"
#include "sclip/sinkhorn.hpp"

namespace sclip {

/// Row-stochastic targets over captions (M x N) or keywords (M x K).
/// In keyword mode a row may be flagged skipped (empty candidate set); a
/// skipped row is all-zero and carries an empty support list.
struct PseudoLabelMatrix {
  Matrix values;
  std::vector<std::vector<std::size_t>> support;  // keyword mode only
  std::vector<std::uint8_t> skipped;              // empty => no row skipped

  bool is_skipped(std::size_t i) const { return !skipped.empty() && skipped[i] != 0; }
  std::size_t active_rows() const {
    std::size_t n = values.rows();
    for (std::uint8_t s : skipped) n -= (s != 0);
    return n;
  }
};

/// The pre-defined keyword set: K embeddings with names, plus the indices of
/// the keywords appearing in each of the N labeled captions.
struct KeywordCatalog {
  EmbeddingMatrix embeddings;
  std::vector<std::string> names;
  std::vector<std::vector<std::size_t>> caption_keywords;

  static KeywordCatalog create(EmbeddingMatrix embeddings, std::vector<std::string> names,
                               std::vector<std::vector<std::size_t>> caption_keywords) {
    const std::size_t k = embeddings.rows();
    if (names.size() != k) {
      throw Error(Errc::dim_mismatch, "keyword catalog: name count != embedding rows");
    }
    for (std::size_t c = 0; c < caption_keywords.size(); ++c) {
      const auto& list = caption_keywords[c];
      for (std::size_t idx : list) {
        if (idx >= k) {
          throw Error(Errc::spec_invalid,
                      "caption " + std::to_string(c) + " references keyword " +
                          std::to_string(idx) + " >= " + std::to_string(k));
        }
      }
      if (!std::is_sorted(list.begin(), list.end()) ||
          std::adjacent_find(list.begin(), list.end()) != list.end()) {
        throw Error(Errc::spec_invalid,
                    "caption " + std::to_string(c) + " keyword list must be sorted and unique");
      }
    }
    return KeywordCatalog{std::move(embeddings), std::move(names), std::move(caption_keywords)};
  }

  std::size_t num_keywords() const { return embeddings.rows(); }
};

/// Normalize each plan row to sum to one.
inline PseudoLabelMatrix caption_pseudo_labels(const TransportPlan& plan) {
  PseudoLabelMatrix out;
  out.values = plan.values;
  for (std::size_t i = 0; i < out.values.rows(); ++i) {
    double s = 0.0;
    for (double x : out.values.row(i)) s += x;
    if (s <= 1e-300) {
      throw Error(Errc::degenerate_row,
                  "caption_pseudo_labels: plan row " + std::to_string(i) + " has ~zero mass", i);
    }
    for (double& x : out.values.row(i)) x /= s;
  }
  return out;
}

/// Soft nearest-neighbor pseudo-label: row i = softmax over similarities of
/// u_i to every labeled image.
inline PseudoLabelMatrix soft_pl(const EmbeddingMatrix& u, const EmbeddingMatrix& x, double tau) {
  if (tau <= 0.0) {
    throw Error(Errc::bad_temperature, "soft_pl: tau must be positive");
  }
  PseudoLabelMatrix out;
  out.values = softmax_rows(cosine_matrix(u, x), tau);
  return out;
}

/// Top-1 nearest-neighbor pseudo-label; one-hot rows, ties to the lowest index.
inline PseudoLabelMatrix hard_pl(const EmbeddingMatrix& u, const EmbeddingMatrix& x) {
  const Matrix sims = cosine_matrix(u, x);
  PseudoLabelMatrix out;
  out.values = Matrix(sims.rows(), sims.cols());
  for (std::size_t i = 0; i < sims.rows(); ++i) {
    out.values(i, argmax_index(sims.row(i))) = 1.0;
  }
  return out;
}

/// Per-row argmax of the transport plan: the labeled image each unlabeled
/// image is assigned to.
inline std::vector<std::size_t> nearest_labeled(const TransportPlan& plan) {
  std::vector<std::size_t> out(plan.values.rows());
  for (std::size_t i = 0; i < plan.values.rows(); ++i) {
    out[i] = argmax_index(plan.values.row(i));
  }
  return out;
}

/// Candidate keyword set for each unlabeled image: the keywords of the
/// caption belonging to its nearest labeled image. May be empty.
inline std::vector<std::vector<std::size_t>> keyword_candidates(
    const KeywordCatalog& catalog, const std::vector<std::size_t>& nearest) {
  std::vector<std::vector<std::size_t>> out;
  out.reserve(nearest.size());
  for (std::size_t idx : nearest) {
    if (idx >= catalog.caption_keywords.size()) {
      throw Error(Errc::dim_mismatch, "keyword_candidates: nearest index out of range");
    }
    out.push_back(catalog.caption_keywords[idx]);
  }
  return out;
}

/// Sparse partial-label targets: softmax over the candidate keywords only,
/// zero elsewhere. Rows with empty candidate sets are flagged skipped.
inline PseudoLabelMatrix keyword_pseudo_labels(
    const EmbeddingMatrix& u, const KeywordCatalog& catalog,
    const std::vector<std::vector<std::size_t>>& candidates, double tau) {
  if (tau <= 0.0) {
    throw Error(Errc::bad_temperature, "keyword_pseudo_labels: tau must be positive");
  }
  const std::size_t m = u.rows();
  const std::size_t k = catalog.num_keywords();
  PseudoLabelMatrix out;
  out.values = Matrix(m, k);
  out.support = candidates;
  out.skipped.assign(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    const auto& cand = candidates[i];
    if (cand.empty()) {
      out.skipped[i] = 1;
      continue;
    }
    std::vector<double> scores(cand.size());
    for (std::size_t a = 0; a < cand.size(); ++a) {
      if (cand[a] >= k) {
        throw Error(Errc::dim_mismatch, "keyword_pseudo_labels: candidate index out of range");
      }
      scores[a] = dot(u.row(i), catalog.embeddings.row(cand[a]));
    }
    const auto probs = softmax_scores(scores, tau);
    for (std::size_t a = 0; a < cand.size(); ++a) out.values(i, cand[a]) = probs[a];
  }
  return out;
}

/// Ablation variant: barycentric combination of text embeddings under the
/// pseudo-label weights. Output rows are generally not unit norm and may be
/// near zero when weights cancel; callers renormalize or reject.
inline Matrix pseudo_embeddings(const PseudoLabelMatrix& q, const EmbeddingMatrix& y) {
  if (q.values.cols() != y.rows()) {
    throw Error(Errc::dim_mismatch, "pseudo_embeddings: label columns != text rows");
  }
  return matmul(q.values, y.values());
}

}  // namespace sclip
