#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sclip/core_math.hpp"
#include "sclip/error.hpp"
#include "sclip/io.hpp"
#include "sclip/losses.hpp"
#include "sclip/matrix.hpp"
#include "sclip/pseudo.hpp"
#include "sclip/rng.hpp"
#include "sclip/sinkhorn.hpp"

namespace sclip {

enum class Method { supervised, hard_pl, soft_pl, sclip, sclip_pseudo_embed };
enum class Schedule { constant, cosine };
enum class Freeze { none, image, text };
enum class KeywordSource { per_step_text_encoder, fixed };
enum class PseudoSource { image, text };
enum class KeywordLossMode { softmax, hardmax };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::supervised: return "supervised";
    case Method::hard_pl: return "hard_pl";
    case Method::soft_pl: return "soft_pl";
    case Method::sclip: return "sclip";
    case Method::sclip_pseudo_embed: return "sclip_pseudo_embed";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  if (s == "supervised") return Method::supervised;
  if (s == "hard_pl") return Method::hard_pl;
  if (s == "soft_pl") return Method::soft_pl;
  if (s == "sclip") return Method::sclip;
  if (s == "sclip_pseudo_embed") return Method::sclip_pseudo_embed;
  throw Error(Errc::config_invalid, "unknown method '" + std::string(s) + "'");
}

inline std::string to_string(Schedule s) {
  return s == Schedule::constant ? "constant" : "cosine";
}

inline Schedule parse_schedule(std::string_view s) {
  if (s == "constant") return Schedule::constant;
  if (s == "cosine") return Schedule::cosine;
  throw Error(Errc::config_invalid, "unknown schedule '" + std::string(s) + "'");
}

inline std::string to_string(Freeze f) {
  switch (f) {
    case Freeze::none: return "none";
    case Freeze::image: return "image";
    case Freeze::text: return "text";
  }
  return "?";
}

inline Freeze parse_freeze(std::string_view s) {
  if (s == "none") return Freeze::none;
  if (s == "image") return Freeze::image;
  if (s == "text") return Freeze::text;
  throw Error(Errc::config_invalid, "unknown freeze '" + std::string(s) + "'");
}

inline std::string to_string(KeywordSource k) {
  return k == KeywordSource::per_step_text_encoder ? "per_step_text_encoder" : "fixed";
}

inline KeywordSource parse_keyword_source(std::string_view s) {
  if (s == "per_step_text_encoder") return KeywordSource::per_step_text_encoder;
  if (s == "fixed") return KeywordSource::fixed;
  throw Error(Errc::config_invalid, "unknown keyword_source '" + std::string(s) + "'");
}

inline std::string to_string(PseudoSource p) {
  return p == PseudoSource::image ? "image" : "text";
}

inline PseudoSource parse_pseudo_source(std::string_view s) {
  if (s == "image") return PseudoSource::image;
  if (s == "text") return PseudoSource::text;
  throw Error(Errc::config_invalid, "unknown pseudo_source '" + std::string(s) + "'");
}

inline std::string to_string(KeywordLossMode k) {
  return k == KeywordLossMode::softmax ? "softmax" : "hardmax";
}

inline KeywordLossMode parse_keyword_loss_mode(std::string_view s) {
  if (s == "softmax") return KeywordLossMode::softmax;
  if (s == "hardmax") return KeywordLossMode::hardmax;
  throw Error(Errc::config_invalid, "unknown keyword_loss_mode '" + std::string(s) + "'");
}

struct TrainConfig {
  Method method = Method::sclip;
  int n_paired_per_batch = 32;
  int m_unpaired_per_batch = 32;
  double tau = 0.07;
  double lambda = 0.07;  // entropic scale; kept equal to tau by default
  int sinkhorn_iterations = kDefaultSinkhornIterations;
  int epochs = 400;
  double learning_rate = 5e-2;
  int warmup_steps = 10;
  Schedule schedule = Schedule::cosine;
  Freeze freeze = Freeze::none;
  KeywordSource keyword_source = KeywordSource::per_step_text_encoder;
  std::uint64_t seed = 0;
  double momentum = 0.9;
  int embed_dim = 16;
  int hidden_dim = 0;  // 0 = linear towers
  bool learnable_tau = false;
  bool use_caption_loss = true;  // sclip ablation switches
  bool use_keyword_loss = true;
  PseudoSource pseudo_source = PseudoSource::image;
  KeywordLossMode keyword_loss_mode = KeywordLossMode::softmax;
  std::int64_t total_steps = 0;  // filled in by the runner; used by the cosine schedule

  void validate() const {
    if (tau <= 0.0) throw Error(Errc::config_invalid, "train.tau must be > 0");
    if (lambda <= 0.0) throw Error(Errc::config_invalid, "train.lambda must be > 0");
    if (n_paired_per_batch < 2) {
      throw Error(Errc::config_invalid, "train.n_paired_per_batch must be >= 2");
    }
    if (m_unpaired_per_batch < 0 ||
        (method != Method::supervised && m_unpaired_per_batch < 2)) {
      throw Error(Errc::config_invalid,
                  "train.m_unpaired_per_batch must be >= 2 for semi-supervised methods");
    }
    if (sinkhorn_iterations < 0) {
      throw Error(Errc::config_invalid, "train.sinkhorn_iterations must be >= 0");
    }
    if (epochs < 1) throw Error(Errc::config_invalid, "train.epochs must be >= 1");
    if (learning_rate < 0.0) {
      throw Error(Errc::config_invalid, "train.learning_rate must be >= 0");
    }
    if (warmup_steps < 0) throw Error(Errc::config_invalid, "train.warmup_steps must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) {
      throw Error(Errc::config_invalid, "train.momentum must be in [0, 1)");
    }
    if (embed_dim < 2) throw Error(Errc::config_invalid, "train.embed_dim must be >= 2");
    if (hidden_dim < 0) throw Error(Errc::config_invalid, "train.hidden_dim must be >= 0");
  }
};

/// Linear map (or one-hidden-layer tanh MLP) from raw features to the joint
/// space; the row normalization happens in encode().
struct Tower {
  Matrix w1;
  std::optional<Matrix> w2;

  std::size_t input_dim() const { return w1.rows(); }
  std::size_t output_dim() const { return w2 ? w2->cols() : w1.cols(); }
};

struct TowerGrads {
  Matrix w1;
  std::optional<Matrix> w2;
};

struct EncoderParams {
  Tower image;
  Tower text;
  std::optional<double> tau;  // present when the temperature is learnable

  static EncoderParams init(std::size_t d_img_raw, std::size_t d_txt_raw,
                            const TrainConfig& cfg, Rng& rng) {
    auto make_tower = [&](std::size_t in) {
      Tower t;
      if (cfg.hidden_dim > 0) {
        t.w1 = rng.normal_matrix(in, cfg.hidden_dim, 1.0 / std::sqrt(double(in)));
        t.w2 = rng.normal_matrix(cfg.hidden_dim, cfg.embed_dim,
                                 1.0 / std::sqrt(double(cfg.hidden_dim)));
      } else {
        t.w1 = rng.normal_matrix(in, cfg.embed_dim, 1.0 / std::sqrt(double(in)));
      }
      return t;
    };
    EncoderParams p;
    p.image = make_tower(d_img_raw);
    p.text = make_tower(d_txt_raw);
    if (cfg.learnable_tau) p.tau = cfg.tau;
    return p;
  }

  double temperature(const TrainConfig& cfg) const { return tau ? *tau : cfg.tau; }

  bool finite() const {
    for (const Tower* t : {&image, &text}) {
      if (!all_finite(t->w1)) return false;
      if (t->w2 && !all_finite(*t->w2)) return false;
    }
    return !tau || std::isfinite(*tau);
  }
};

struct OptimizerState {
  TowerGrads image;
  TowerGrads text;
  double tau_buf = 0.0;
  std::int64_t step = 0;

  static OptimizerState init(const EncoderParams& params) {
    auto zeros_like = [](const Tower& t) {
      TowerGrads g;
      g.w1 = Matrix(t.w1.rows(), t.w1.cols());
      if (t.w2) g.w2 = Matrix(t.w2->rows(), t.w2->cols());
      return g;
    };
    OptimizerState opt;
    opt.image = zeros_like(params.image);
    opt.text = zeros_like(params.text);
    return opt;
  }
};

enum class TowerKind { image, text };

namespace detail {

struct TowerCache {
  Matrix hidden;    // tanh activations (MLP only)
  Matrix pre_norm;  // joint-space rows before normalization
};

inline std::pair<EmbeddingMatrix, TowerCache> encode_forward(const Tower& tower,
                                                             const Matrix& raw) {
  if (raw.cols() != tower.input_dim()) {
    throw Error(Errc::dim_mismatch, "encode: raw width " + std::to_string(raw.cols()) +
                                        " != tower input " + std::to_string(tower.input_dim()));
  }
  TowerCache cache;
  if (tower.w2) {
    cache.hidden = matmul(raw, tower.w1);
    for (double& v : cache.hidden.storage()) v = std::tanh(v);
    cache.pre_norm = matmul(cache.hidden, *tower.w2);
  } else {
    cache.pre_norm = matmul(raw, tower.w1);
  }
  return {normalize_rows(cache.pre_norm), std::move(cache)};
}

/// Pull a gradient on the unit-norm embeddings back to the tower weights.
/// Per row the normalization Jacobian is (I - e e^T)/||z||, i.e. the tangent
/// projection scaled by the inverse pre-normalization norm.
inline TowerGrads backprop_tower(const Tower& tower, const Matrix& raw, const TowerCache& cache,
                                 const Matrix& grad_embedding) {
  const std::size_t rows = cache.pre_norm.rows();
  const std::size_t dim = cache.pre_norm.cols();
  Matrix grad_pre(rows, dim);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto z = cache.pre_norm.row(i);
    const auto g = grad_embedding.row(i);
    const double n = norm2(z);
    const double ge = dot(g, z) / (n * n);
    for (std::size_t d = 0; d < dim; ++d) {
      grad_pre(i, d) = (g[d] - ge * z[d]) / n;
    }
  }
  TowerGrads grads;
  if (tower.w2) {
    grads.w2 = matmul_tn(cache.hidden, grad_pre);
    Matrix grad_hidden = matmul_nt(grad_pre, *tower.w2);
    for (std::size_t i = 0; i < grad_hidden.size(); ++i) {
      const double h = cache.hidden.storage()[i];
      grad_hidden.storage()[i] *= 1.0 - h * h;
    }
    grads.w1 = matmul_tn(raw, grad_hidden);
  } else {
    grads.w1 = matmul_tn(raw, grad_pre);
  }
  return grads;
}

inline void add_grads(TowerGrads& dst, const TowerGrads& src) {
  add_scaled(dst.w1, src.w1, 1.0);
  if (dst.w2 && src.w2) add_scaled(*dst.w2, *src.w2, 1.0);
}

}  // namespace detail

/// Map raw features through one tower and normalize.
inline EmbeddingMatrix encode(const EncoderParams& params, const Matrix& raw, TowerKind kind) {
  const Tower& tower = kind == TowerKind::image ? params.image : params.text;
  return detail::encode_forward(tower, raw).first;
}

/// One training batch: N paired examples plus M unpaired images (M may be 0).
struct Batch {
  Matrix paired_images;
  Matrix paired_texts;
  std::vector<std::vector<std::size_t>> caption_keywords;
  Matrix unpaired_images;
};

/// Keyword inputs for a run: raw text-side features per keyword, plus an
/// optional pre-encoded constant table for KeywordSource::fixed.
struct KeywordContext {
  Matrix raw;  // K x d_txt_raw
  std::vector<std::string> names;
  std::optional<EmbeddingMatrix> fixed;
};

/// Pseudo-label state for one batch. Everything here is a constant during
/// differentiation (stop-gradient); grad_check reuses a frozen instance while
/// probing parameters.
struct PseudoTargets {
  std::optional<PseudoLabelMatrix> caption_q;
  std::optional<PseudoLabelMatrix> keyword_q;
  std::optional<std::vector<std::vector<std::size_t>>> candidates;
  std::optional<Matrix> pseudo_embed;
};

struct StepMetrics {
  double loss_total = 0.0;
  double loss_clip = 0.0;
  double loss_caption = 0.0;
  double loss_keyword = 0.0;
  double learning_rate = 0.0;
};

/// Linear warmup from zero over warmup_steps, then either a constant rate or
/// cosine decay reaching zero at total_steps.
inline double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.schedule == Schedule::constant || cfg.total_steps <= cfg.warmup_steps) {
    return cfg.learning_rate;
  }
  const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  double progress = static_cast<double>(step - cfg.warmup_steps) / span;
  progress = std::clamp(progress, 0.0, 1.0);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace detail {

struct ForwardState {
  EmbeddingMatrix x;
  EmbeddingMatrix y;
  std::optional<EmbeddingMatrix> u;
  std::optional<EmbeddingMatrix> k;
  TowerCache cache_x;
  TowerCache cache_y;
  TowerCache cache_u;
  TowerCache cache_k;
  bool keywords_through_encoder = false;
};

inline bool uses_unlabeled(const TrainConfig& cfg, const Batch& batch) {
  return cfg.method != Method::supervised && batch.unpaired_images.rows() > 0;
}

inline bool wants_keyword_term(const TrainConfig& cfg) {
  return (cfg.method == Method::sclip || cfg.method == Method::sclip_pseudo_embed) &&
         cfg.use_keyword_loss;
}

inline bool wants_caption_term(const TrainConfig& cfg) {
  if (cfg.method == Method::hard_pl || cfg.method == Method::soft_pl) return true;
  if (cfg.method == Method::sclip) return cfg.use_caption_loss;
  if (cfg.method == Method::sclip_pseudo_embed) return cfg.use_caption_loss;
  return false;
}

inline ForwardState forward(const EncoderParams& params, const Batch& batch,
                            const KeywordContext& keywords, const TrainConfig& cfg) {
  auto [x, cx] = encode_forward(params.image, batch.paired_images);
  auto [y, cy] = encode_forward(params.text, batch.paired_texts);
  ForwardState state{std::move(x), std::move(y), std::nullopt, std::nullopt,
                     std::move(cx), std::move(cy), {}, {}, false};
  if (uses_unlabeled(cfg, batch)) {
    auto [u, cu] = encode_forward(params.image, batch.unpaired_images);
    state.u = std::move(u);
    state.cache_u = std::move(cu);
  }
  if (wants_keyword_term(cfg) && state.u) {
    if (cfg.keyword_source == KeywordSource::per_step_text_encoder) {
      auto [k, ck] = encode_forward(params.text, keywords.raw);
      state.k = std::move(k);
      state.cache_k = std::move(ck);
      state.keywords_through_encoder = true;
    } else {
      if (!keywords.fixed) {
        throw Error(Errc::config_invalid,
                    "keyword_source=fixed requires pre-encoded keyword embeddings");
      }
      state.k = *keywords.fixed;
    }
  }
  return state;
}

inline PseudoTargets compute_targets(const ForwardState& state, const Batch& batch,
                                     const KeywordContext& keywords, const TrainConfig& cfg) {
  PseudoTargets targets;
  if (!state.u) return targets;
  const EmbeddingMatrix& u = *state.u;
  const EmbeddingMatrix& anchor =
      cfg.pseudo_source == PseudoSource::image ? state.x : state.y;
  const double tau = cfg.tau;  // pseudo-labels use the configured temperature

  switch (cfg.method) {
    case Method::supervised:
      return targets;
    case Method::hard_pl:
      targets.caption_q = hard_pl(u, anchor);
      return targets;
    case Method::soft_pl:
      targets.caption_q = soft_pl(u, anchor, tau);
      return targets;
    case Method::sclip:
    case Method::sclip_pseudo_embed:
      break;
  }

  const auto plan =
      solve(cost_from_embeddings(u, anchor), ProbabilityVector::uniform(u.rows()),
            ProbabilityVector::uniform(anchor.rows()), cfg.lambda, cfg.sinkhorn_iterations);
  auto caption_q = caption_pseudo_labels(plan);
  if (wants_keyword_term(cfg) && state.k) {
    auto catalog = KeywordCatalog::create(*state.k, keywords.names, batch.caption_keywords);
    auto candidates = keyword_candidates(catalog, nearest_labeled(plan));
    if (cfg.keyword_loss_mode == KeywordLossMode::softmax) {
      targets.keyword_q = keyword_pseudo_labels(u, catalog, candidates, tau);
    }
    targets.candidates = std::move(candidates);
  }
  if (cfg.method == Method::sclip_pseudo_embed) {
    targets.pseudo_embed = pseudo_embeddings(caption_q, state.y);
  }
  targets.caption_q = std::move(caption_q);
  return targets;
}

struct StepEval {
  StepMetrics metrics;
  TowerGrads image_grads;
  TowerGrads text_grads;
  double tau_grad = 0.0;
};

inline StepEval eval_step(const EncoderParams& params, const Batch& batch,
                          const KeywordContext& keywords, const TrainConfig& cfg,
                          const PseudoTargets& targets, const ForwardState& state) {
  const double tau = params.temperature(cfg);

  const LossValue clip = clip_loss(state.x, state.y, tau);
  std::optional<LossValue> caption;
  std::optional<LossValue> keyword;

  std::optional<KeywordCatalog> catalog;
  if (state.u && state.k && wants_keyword_term(cfg)) {
    catalog = KeywordCatalog::create(*state.k, keywords.names, batch.caption_keywords);
  }

  if (state.u && wants_caption_term(cfg)) {
    if (cfg.method == Method::sclip_pseudo_embed) {
      caption = pseudo_embedding_pair_loss(*state.u, *targets.pseudo_embed, tau);
    } else {
      caption = caption_loss(*state.u, state.y, *targets.caption_q, tau);
    }
  }
  if (state.u && catalog) {
    if (cfg.keyword_loss_mode == KeywordLossMode::softmax) {
      keyword = keyword_loss(*state.u, *catalog, *targets.keyword_q, tau);
    } else {
      keyword = hardmax_keyword_loss(*state.u, *catalog, *targets.candidates, tau);
    }
  }

  const LossValue total =
      total_loss(clip, caption ? &*caption : nullptr, keyword ? &*keyword : nullptr);

  StepEval eval;
  eval.metrics.loss_total = total.value;
  eval.metrics.loss_clip = clip.value;
  eval.metrics.loss_caption = caption ? caption->value : 0.0;
  eval.metrics.loss_keyword = keyword ? keyword->value : 0.0;

  eval.image_grads = backprop_tower(params.image, batch.paired_images, state.cache_x,
                                    *total.grad_x);
  if (state.u && total.grad_u) {
    add_grads(eval.image_grads, backprop_tower(params.image, batch.unpaired_images,
                                               state.cache_u, *total.grad_u));
  }
  eval.text_grads = backprop_tower(params.text, batch.paired_texts, state.cache_y,
                                   *total.grad_y);
  if (state.keywords_through_encoder && total.grad_k) {
    add_grads(eval.text_grads,
              backprop_tower(params.text, keywords.raw, state.cache_k, *total.grad_k));
  }
  eval.tau_grad = total.grad_tau.value_or(0.0);
  return eval;
}

inline double forward_loss_only(const EncoderParams& params, const Batch& batch,
                                const KeywordContext& keywords, const TrainConfig& cfg,
                                const PseudoTargets& targets) {
  const ForwardState state = forward(params, batch, keywords, cfg);
  return eval_step(params, batch, keywords, cfg, targets, state).metrics.loss_total;
}

inline bool grads_finite(const TowerGrads& g) {
  if (!all_finite(g.w1)) return false;
  return !g.w2 || all_finite(*g.w2);
}

}  // namespace detail

/// Loss components at the current parameters, without updating anything.
inline StepMetrics evaluate_loss(const EncoderParams& params, const Batch& batch,
                                 const KeywordContext& keywords, const TrainConfig& cfg) {
  const detail::ForwardState state = detail::forward(params, batch, keywords, cfg);
  const PseudoTargets targets = detail::compute_targets(state, batch, keywords, cfg);
  return detail::eval_step(params, batch, keywords, cfg, targets, state).metrics;
}

/// One optimizer step: forward, pseudo-labels, losses, backprop through the
/// normalization and towers, momentum update. Frozen towers receive no
/// update; pseudo-label targets are recomputed from the current parameters
/// and then treated as constants.
inline StepMetrics train_step(EncoderParams& params, OptimizerState& opt, const Batch& batch,
                              const KeywordContext& keywords, const TrainConfig& cfg) {
  detail::StepEval eval;
  try {
    const detail::ForwardState state = detail::forward(params, batch, keywords, cfg);
    const PseudoTargets targets = detail::compute_targets(state, batch, keywords, cfg);
    eval = detail::eval_step(params, batch, keywords, cfg, targets, state);
  } catch (const Error& e) {
    if (e.code() == Errc::non_finite || e.code() == Errc::zero_row) {
      throw Error(Errc::non_finite_loss,
                  "numerical failure at step " + std::to_string(opt.step) + " (method " +
                      to_string(cfg.method) + "): " + e.what());
    }
    throw;
  }

  if (!std::isfinite(eval.metrics.loss_total) || !detail::grads_finite(eval.image_grads) ||
      !detail::grads_finite(eval.text_grads) || !std::isfinite(eval.tau_grad)) {
    throw Error(Errc::non_finite_loss,
                "non-finite loss or gradient at step " + std::to_string(opt.step) +
                    " (method " + to_string(cfg.method) + ")");
  }

  const double lr = lr_at(opt.step, cfg);
  eval.metrics.learning_rate = lr;

  auto update_tower = [&](Tower& tower, TowerGrads& buf, const TowerGrads& grads) {
    for (std::size_t i = 0; i < buf.w1.size(); ++i) {
      buf.w1.storage()[i] = cfg.momentum * buf.w1.storage()[i] + grads.w1.storage()[i];
      tower.w1.storage()[i] -= lr * buf.w1.storage()[i];
    }
    if (buf.w2) {
      for (std::size_t i = 0; i < buf.w2->size(); ++i) {
        buf.w2->storage()[i] = cfg.momentum * buf.w2->storage()[i] + grads.w2->storage()[i];
        tower.w2->storage()[i] -= lr * buf.w2->storage()[i];
      }
    }
  };
  if (cfg.freeze != Freeze::image) update_tower(params.image, opt.image, eval.image_grads);
  if (cfg.freeze != Freeze::text) update_tower(params.text, opt.text, eval.text_grads);
  if (params.tau) {
    opt.tau_buf = cfg.momentum * opt.tau_buf + eval.tau_grad;
    *params.tau = std::clamp(*params.tau - lr * opt.tau_buf, 0.01, 1.0);
  }

  if (!params.finite()) {
    throw Error(Errc::non_finite_loss,
                "parameters became non-finite at step " + std::to_string(opt.step));
  }
  opt.step += 1;
  return eval.metrics;
}

/// Central finite differences over the encoder parameters against the
/// analytic gradients, with pseudo-label targets frozen at the base point
/// (they are constants of the objective). Matrices larger than 256 entries
/// are probed on a fixed 200-entry random subsample. Returns the worst
/// relative error; frozen towers are excluded.
inline double grad_check(const EncoderParams& params, const Batch& batch,
                         const KeywordContext& keywords, const TrainConfig& cfg,
                         double epsilon) {
  if (epsilon < 1e-7 || epsilon > 1e-3) {
    throw Error(Errc::config_invalid, "grad_check: epsilon out of [1e-7, 1e-3]");
  }
  EncoderParams probe = params;
  const detail::ForwardState state = detail::forward(probe, batch, keywords, cfg);
  const PseudoTargets targets = detail::compute_targets(state, batch, keywords, cfg);
  const detail::StepEval eval = detail::eval_step(probe, batch, keywords, cfg, targets, state);

  double worst = 0.0;
  auto probe_matrix = [&](Matrix& m, const Matrix& analytic) {
    std::vector<std::size_t> entries;
    if (m.size() <= 256) {
      entries.resize(m.size());
      for (std::size_t i = 0; i < m.size(); ++i) entries[i] = i;
    } else {
      Rng picker(1234567);
      for (int i = 0; i < 200; ++i) entries.push_back(picker.uniform_index(m.size()));
    }
    for (std::size_t idx : entries) {
      const double orig = m.storage()[idx];
      m.storage()[idx] = orig + epsilon;
      const double lp = detail::forward_loss_only(probe, batch, keywords, cfg, targets);
      m.storage()[idx] = orig - epsilon;
      const double lm = detail::forward_loss_only(probe, batch, keywords, cfg, targets);
      m.storage()[idx] = orig;
      const double fd = (lp - lm) / (2.0 * epsilon);
      const double a = analytic.storage()[idx];
      worst = std::max(worst,
                       std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1e-8}));
    }
  };

  if (cfg.freeze != Freeze::image) {
    probe_matrix(probe.image.w1, eval.image_grads.w1);
    if (probe.image.w2) probe_matrix(*probe.image.w2, *eval.image_grads.w2);
  }
  if (cfg.freeze != Freeze::text) {
    probe_matrix(probe.text.w1, eval.text_grads.w1);
    if (probe.text.w2) probe_matrix(*probe.text.w2, *eval.text_grads.w2);
  }
  if (probe.tau) {
    const double orig = *probe.tau;
    *probe.tau = orig + epsilon;
    const double lp = detail::forward_loss_only(probe, batch, keywords, cfg, targets);
    *probe.tau = orig - epsilon;
    const double lm = detail::forward_loss_only(probe, batch, keywords, cfg, targets);
    *probe.tau = orig;
    const double fd = (lp - lm) / (2.0 * epsilon);
    worst = std::max(worst, std::fabs(eval.tau_grad - fd) /
                                std::max({std::fabs(eval.tau_grad), std::fabs(fd), 1e-8}));
  }
  return worst;
}

// ---- batch assembly ----

struct CaptionVariant {
  std::vector<double> raw_text;
  std::vector<std::size_t> keyword_indices;
};

struct PairedExample {
  std::vector<double> raw_image;
  std::vector<CaptionVariant> captions;  // at least one
};

/// Seeded batch stream. Paired examples are drawn without replacement within
/// an epoch (reshuffled at each epoch boundary); the unpaired stream advances
/// independently and reshuffles on wraparound. Multi-caption examples get one
/// caption sampled per appearance.
class BatchSampler {
 public:
  BatchSampler(std::vector<PairedExample> paired, Matrix unpaired, std::uint64_t seed)
      : paired_(std::move(paired)), unpaired_(std::move(unpaired)), rng_(seed) {
    if (paired_.empty()) {
      throw Error(Errc::config_invalid, "batch sampler: need at least one paired example");
    }
    paired_order_.resize(paired_.size());
    for (std::size_t i = 0; i < paired_order_.size(); ++i) paired_order_[i] = i;
    unpaired_order_.resize(unpaired_.rows());
    for (std::size_t i = 0; i < unpaired_order_.size(); ++i) unpaired_order_[i] = i;
    rng_.shuffle(paired_order_);
    if (!unpaired_order_.empty()) rng_.shuffle(unpaired_order_);
  }

  std::int64_t steps_per_epoch(int n_per_batch) const {
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(paired_.size()) / n_per_batch);
  }

  Batch next(int n, int m) {
    if (static_cast<std::size_t>(n) > paired_.size()) {
      throw Error(Errc::config_invalid, "batch sampler: batch larger than the paired set");
    }
    if (m > 0 && unpaired_.rows() == 0) {
      throw Error(Errc::config_invalid, "batch sampler: no unpaired data available");
    }
    Batch batch;
    const std::size_t d_img = paired_.front().raw_image.size();
    const std::size_t d_txt = paired_.front().captions.front().raw_text.size();
    batch.paired_images = Matrix(n, d_img);
    batch.paired_texts = Matrix(n, d_txt);
    batch.caption_keywords.resize(n);
    for (int r = 0; r < n; ++r) {
      if (paired_pos_ >= paired_order_.size()) {
        rng_.shuffle(paired_order_);
        paired_pos_ = 0;
      }
      const PairedExample& ex = paired_[paired_order_[paired_pos_++]];
      const std::size_t pick =
          ex.captions.size() > 1 ? rng_.uniform_index(ex.captions.size()) : 0;
      const CaptionVariant& cap = ex.captions[pick];
      for (std::size_t d = 0; d < d_img; ++d) batch.paired_images(r, d) = ex.raw_image[d];
      for (std::size_t d = 0; d < d_txt; ++d) batch.paired_texts(r, d) = cap.raw_text[d];
      batch.caption_keywords[r] = cap.keyword_indices;
    }
    batch.unpaired_images = Matrix(m, m > 0 ? unpaired_.cols() : 0);
    for (int r = 0; r < m; ++r) {
      if (unpaired_pos_ >= unpaired_order_.size()) {
        rng_.shuffle(unpaired_order_);
        unpaired_pos_ = 0;
      }
      const std::size_t src = unpaired_order_[unpaired_pos_++];
      for (std::size_t d = 0; d < unpaired_.cols(); ++d) {
        batch.unpaired_images(r, d) = unpaired_(src, d);
      }
    }
    return batch;
  }

 private:
  std::vector<PairedExample> paired_;
  Matrix unpaired_;
  Rng rng_;
  std::vector<std::size_t> paired_order_;
  std::vector<std::size_t> unpaired_order_;
  std::size_t paired_pos_ = 0;
  std::size_t unpaired_pos_ = 0;
};

// ---- checkpoints ----

inline constexpr std::string_view kCheckpointMagic = "SCKP1";

inline void save_checkpoint(const std::string& path, const EncoderParams& params,
                            const OptimizerState& opt, std::string_view config_echo) {
  ByteWriter w;
  w.magic(kCheckpointMagic);
  w.str(config_echo);
  auto tower = [&](const Tower& t) {
    w.u32(t.w2 ? 1 : 0);
    w.matrix(t.w1);
    if (t.w2) w.matrix(*t.w2);
  };
  auto buffers = [&](const TowerGrads& g) {
    w.u32(g.w2 ? 1 : 0);
    w.matrix(g.w1);
    if (g.w2) w.matrix(*g.w2);
  };
  tower(params.image);
  tower(params.text);
  w.u32(params.tau ? 1 : 0);
  if (params.tau) w.f64(*params.tau);
  buffers(opt.image);
  buffers(opt.text);
  w.f64(opt.tau_buf);
  w.u64(static_cast<std::uint64_t>(opt.step));
  atomic_write_file(path, w.buffer());
}

struct Checkpoint {
  EncoderParams params;
  OptimizerState opt;
  std::string config_echo;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  const std::string data = read_file(path);
  ByteReader r(data);
  r.expect_magic(kCheckpointMagic);
  Checkpoint ckpt;
  ckpt.config_echo = r.str();
  auto tower = [&]() {
    Tower t;
    const bool has_w2 = r.u32() != 0;
    t.w1 = r.matrix();
    if (has_w2) t.w2 = r.matrix();
    return t;
  };
  auto buffers = [&]() {
    TowerGrads g;
    const bool has_w2 = r.u32() != 0;
    g.w1 = r.matrix();
    if (has_w2) g.w2 = r.matrix();
    return g;
  };
  ckpt.params.image = tower();
  ckpt.params.text = tower();
  if (r.u32() != 0) ckpt.params.tau = r.f64();
  ckpt.opt.image = buffers();
  ckpt.opt.text = buffers();
  ckpt.opt.tau_buf = r.f64();
  ckpt.opt.step = static_cast<std::int64_t>(r.u64());
  if (!r.at_end()) {
    throw Error(Errc::parse_error, "trailing bytes after checkpoint payload", r.position());
  }
  return ckpt;
}

}  // namespace sclip
