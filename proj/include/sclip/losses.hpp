#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "sclip/core_math.hpp"
#include "sclip/error.hpp"
#include "sclip/matrix.hpp"
#include "sclip/pseudo.hpp"

namespace sclip {

/// A loss value together with its gradients. A gradient is present only for
/// inputs the loss actually depends on: grad_x/grad_y for the paired batch,
/// grad_u for unlabeled images, grad_k for keyword embeddings. grad_tau is
/// the derivative with respect to the softmax temperature. Pseudo-label
/// targets are constants throughout; no gradient flows into them.
struct LossValue {
  double value = 0.0;
  std::optional<Matrix> grad_u;
  std::optional<Matrix> grad_x;
  std::optional<Matrix> grad_y;
  std::optional<Matrix> grad_k;
  std::optional<double> grad_tau;
};

namespace detail {

struct CeBlock {
  double value = 0.0;
  Matrix grad_queries;  // d(value)/d(query rows)
  Matrix grad_gallery;  // d(value)/d(gallery rows)
  double grad_tau = 0.0;
};

/// Shared core of every loss: mean over active rows of the cross-entropy
/// between softmax(queries . gallery^T / tau) and constant targets. The
/// matrices are treated as free variables; unit-norm handling lives in the
/// callers and the trainer's normalization backprop.
inline CeBlock ce_softmax_block(const Matrix& queries, const Matrix& gallery,
                                const Matrix& targets, const std::vector<std::uint8_t>* skip,
                                double tau) {
  const std::size_t rows = queries.rows();
  const std::size_t cols = gallery.rows();

  std::size_t active = rows;
  if (skip) {
    active = 0;
    for (std::size_t i = 0; i < rows; ++i) active += ((*skip)[i] == 0);
  }

  CeBlock out;
  out.grad_queries = Matrix(rows, queries.cols());
  out.grad_gallery = Matrix(cols, gallery.cols());
  if (active == 0) return out;

  const Matrix sims = matmul_nt(queries, gallery);
  Matrix grad_logits(rows, cols);
  const double w = 1.0 / static_cast<double>(active);
  double value = 0.0;
  double tau_acc = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (skip && (*skip)[i] != 0) continue;
    const auto pred = softmax_scores(sims.row(i), tau);
    value += cross_entropy_raw(pred, targets.row(i));
    for (std::size_t j = 0; j < cols; ++j) {
      const double g = w * (pred[j] - targets(i, j));
      grad_logits(i, j) = g;
      tau_acc += g * sims(i, j) / tau;
    }
  }
  out.value = value * w;
  out.grad_queries = scaled(matmul(grad_logits, gallery), 1.0 / tau);
  out.grad_gallery = scaled(matmul_tn(grad_logits, queries), 1.0 / tau);
  out.grad_tau = -tau_acc / tau;
  return out;
}

/// Symmetric two-direction contrastive core over aligned pairs.
inline LossValue clip_core(const Matrix& x, const Matrix& y, double tau) {
  const Matrix eye = Matrix::identity(x.rows());
  const CeBlock i2t = ce_softmax_block(x, y, eye, nullptr, tau);
  const CeBlock t2i = ce_softmax_block(y, x, eye, nullptr, tau);
  LossValue out;
  out.value = 0.5 * (i2t.value + t2i.value);
  out.grad_x = scaled(i2t.grad_queries, 0.5);
  add_scaled(*out.grad_x, t2i.grad_gallery, 0.5);
  out.grad_y = scaled(i2t.grad_gallery, 0.5);
  add_scaled(*out.grad_y, t2i.grad_queries, 0.5);
  out.grad_tau = 0.5 * (i2t.grad_tau + t2i.grad_tau);
  return out;
}

inline LossValue caption_core(const Matrix& u, const Matrix& y, const Matrix& targets,
                              double tau) {
  const CeBlock block = ce_softmax_block(u, y, targets, nullptr, tau);
  LossValue out;
  out.value = block.value;
  out.grad_u = block.grad_queries;
  out.grad_y = block.grad_gallery;
  out.grad_tau = block.grad_tau;
  return out;
}

inline LossValue keyword_core(const Matrix& u, const Matrix& keywords, const Matrix& targets,
                              const std::vector<std::uint8_t>& skip, double tau) {
  const CeBlock block =
      ce_softmax_block(u, keywords, targets, skip.empty() ? nullptr : &skip, tau);
  LossValue out;
  out.value = block.value;
  out.grad_u = block.grad_queries;
  out.grad_k = block.grad_gallery;
  out.grad_tau = block.grad_tau;
  return out;
}

/// Picks, per row, the candidate with the largest predicted probability
/// (equivalently the smallest one-hot cross-entropy) and uses it as the
/// target. Ties break to the lowest keyword index.
inline LossValue hardmax_core(const Matrix& u, const Matrix& keywords,
                              const std::vector<std::vector<std::size_t>>& candidates,
                              double tau) {
  const std::size_t m = u.rows();
  const std::size_t k = keywords.rows();
  const Matrix sims = matmul_nt(u, keywords);
  Matrix targets(m, k);
  std::vector<std::uint8_t> skip(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    const auto& cand = candidates[i];
    if (cand.empty()) {
      skip[i] = 1;
      continue;
    }
    std::size_t best = cand[0];
    for (std::size_t idx : cand) {
      if (idx >= k) {
        throw Error(Errc::dim_mismatch, "hardmax_keyword_loss: candidate index out of range");
      }
      if (sims(i, idx) > sims(i, best)) best = idx;
    }
    targets(i, best) = 1.0;
  }
  return keyword_core(u, keywords, targets, skip, tau);
}

/// Two-direction contrastive core against constant targets; only the query
/// side receives gradients. Rows listed in `active` participate.
inline LossValue pseudo_pair_core(const Matrix& u, const Matrix& unit_targets,
                                  const std::vector<std::size_t>& active, double tau) {
  LossValue out;
  out.grad_u = Matrix(u.rows(), u.cols());
  out.grad_tau = 0.0;
  const std::size_t a = active.size();
  if (a < 2) return out;  // no contrastive signal from fewer than two pairs

  Matrix ua(a, u.cols());
  Matrix za(a, u.cols());
  for (std::size_t r = 0; r < a; ++r) {
    for (std::size_t d = 0; d < u.cols(); ++d) {
      ua(r, d) = u(active[r], d);
      za(r, d) = unit_targets(active[r], d);
    }
  }
  const Matrix eye = Matrix::identity(a);
  const CeBlock u2z = ce_softmax_block(ua, za, eye, nullptr, tau);
  const CeBlock z2u = ce_softmax_block(za, ua, eye, nullptr, tau);
  out.value = 0.5 * (u2z.value + z2u.value);
  for (std::size_t r = 0; r < a; ++r) {
    for (std::size_t d = 0; d < u.cols(); ++d) {
      (*out.grad_u)(active[r], d) = 0.5 * (u2z.grad_queries(r, d) + z2u.grad_gallery(r, d));
    }
  }
  out.grad_tau = 0.5 * (u2z.grad_tau + z2u.grad_tau);
  return out;
}

inline void require_tau(double tau, const char* who) {
  if (tau <= 0.0) {
    throw Error(Errc::bad_temperature, std::string(who) + ": tau must be positive");
  }
}

}  // namespace detail

/// Symmetric contrastive loss over N aligned pairs (the mean of the
/// image->text and text->image cross-entropies against diagonal targets).
inline LossValue clip_loss(const EmbeddingMatrix& x, const EmbeddingMatrix& y, double tau) {
  detail::require_tau(tau, "clip_loss");
  if (x.rows() != y.rows() || x.dim() != y.dim()) {
    throw Error(Errc::dim_mismatch, "clip_loss: x and y shapes must match");
  }
  if (x.rows() < 2) {
    throw Error(Errc::batch_too_small, "clip_loss: need at least 2 pairs");
  }
  return detail::clip_core(x.values(), y.values(), tau);
}

/// Caption-level pseudo-label loss: mean cross-entropy between the text
/// predictions for unlabeled images and the constant OT-derived targets.
inline LossValue caption_loss(const EmbeddingMatrix& u, const EmbeddingMatrix& y,
                              const PseudoLabelMatrix& q, double tau) {
  detail::require_tau(tau, "caption_loss");
  if (q.values.rows() != u.rows() || q.values.cols() != y.rows() || u.dim() != y.dim()) {
    throw Error(Errc::dim_mismatch, "caption_loss: shape mismatch");
  }
  return detail::caption_core(u.values(), y.values(), q.values, tau);
}

/// Keyword-level pseudo-label loss. The prediction normalizes over the full
/// keyword set while the target lives on the candidate support. Skipped rows
/// contribute nothing and are excluded from the denominator; if every row is
/// skipped the loss is zero with zero gradients.
inline LossValue keyword_loss(const EmbeddingMatrix& u, const KeywordCatalog& catalog,
                              const PseudoLabelMatrix& qk, double tau) {
  detail::require_tau(tau, "keyword_loss");
  if (qk.values.rows() != u.rows() || qk.values.cols() != catalog.num_keywords() ||
      u.dim() != catalog.embeddings.dim()) {
    throw Error(Errc::dim_mismatch, "keyword_loss: shape mismatch");
  }
  return detail::keyword_core(u.values(), catalog.embeddings.values(), qk.values, qk.skipped,
                              tau);
}

/// Hard partial-label ablation: per row, the minimum cross-entropy over
/// one-hot candidate targets.
inline LossValue hardmax_keyword_loss(const EmbeddingMatrix& u, const KeywordCatalog& catalog,
                                      const std::vector<std::vector<std::size_t>>& candidates,
                                      double tau) {
  detail::require_tau(tau, "hardmax_keyword_loss");
  if (candidates.size() != u.rows() || u.dim() != catalog.embeddings.dim()) {
    throw Error(Errc::dim_mismatch, "hardmax_keyword_loss: shape mismatch");
  }
  return detail::hardmax_core(u.values(), catalog.embeddings.values(), candidates, tau);
}

/// Contrastive loss against synthesized pseudo-embedding targets (ablation).
/// Targets are constants; rows whose synthesized embedding collapsed to ~zero
/// norm are dropped from both directions. Only grad_u is produced.
inline LossValue pseudo_embedding_pair_loss(const EmbeddingMatrix& u, const Matrix& targets,
                                            double tau) {
  detail::require_tau(tau, "pseudo_embedding_pair_loss");
  if (targets.rows() != u.rows() || targets.cols() != u.dim()) {
    throw Error(Errc::dim_mismatch, "pseudo_embedding_pair_loss: target shape mismatch");
  }
  Matrix unit = targets;
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < unit.rows(); ++i) {
    const double n = norm2(unit.row(i));
    if (n > kZeroRowNorm) {
      for (double& v : unit.row(i)) v /= n;
      active.push_back(i);
    }
  }
  return detail::pseudo_pair_core(u.values(), unit, active, tau);
}

namespace detail {

inline void accumulate(std::optional<Matrix>& dst, const std::optional<Matrix>& src,
                       double alpha) {
  if (!src) return;
  if (!dst) {
    dst = scaled(*src, alpha);
  } else {
    add_scaled(*dst, *src, alpha);
  }
}

}  // namespace detail

/// Combined objective: clip + (caption + keyword)/2. Pass nullptr for a
/// pseudo-label term the method does not use; its gradients stay absent.
inline LossValue total_loss(const LossValue& clip, const LossValue* caption = nullptr,
                            const LossValue* keyword = nullptr) {
  LossValue out;
  out.value = clip.value;
  detail::accumulate(out.grad_x, clip.grad_x, 1.0);
  detail::accumulate(out.grad_y, clip.grad_y, 1.0);
  detail::accumulate(out.grad_u, clip.grad_u, 1.0);
  detail::accumulate(out.grad_k, clip.grad_k, 1.0);
  double gtau = clip.grad_tau.value_or(0.0);
  for (const LossValue* term : {caption, keyword}) {
    if (!term) continue;
    out.value += 0.5 * term->value;
    detail::accumulate(out.grad_x, term->grad_x, 0.5);
    detail::accumulate(out.grad_y, term->grad_y, 0.5);
    detail::accumulate(out.grad_u, term->grad_u, 0.5);
    detail::accumulate(out.grad_k, term->grad_k, 0.5);
    gtau += 0.5 * term->grad_tau.value_or(0.0);
  }
  out.grad_tau = gtau;
  return out;
}

inline bool loss_is_finite(const LossValue& loss) {
  if (!std::isfinite(loss.value)) return false;
  for (const auto* g : {&loss.grad_u, &loss.grad_x, &loss.grad_y, &loss.grad_k}) {
    if (*g && !all_finite(**g)) return false;
  }
  if (loss.grad_tau && !std::isfinite(*loss.grad_tau)) return false;
  return true;
}

}  // namespace sclip
