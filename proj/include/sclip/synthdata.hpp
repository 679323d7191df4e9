#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sclip/core_math.hpp"
#include "sclip/error.hpp"
#include "sclip/io.hpp"
#include "sclip/matrix.hpp"
#include "sclip/rng.hpp"

namespace sclip {

enum class ShiftKind { none, class_prior, prototype_perturbation };

inline std::string to_string(ShiftKind k) {
  switch (k) {
    case ShiftKind::none: return "none";
    case ShiftKind::class_prior: return "class_prior";
    case ShiftKind::prototype_perturbation: return "prototype_perturbation";
  }
  return "?";
}

inline ShiftKind parse_shift_kind(std::string_view s) {
  if (s == "none") return ShiftKind::none;
  if (s == "class_prior") return ShiftKind::class_prior;
  if (s == "prototype_perturbation") return ShiftKind::prototype_perturbation;
  throw Error(Errc::config_invalid, "unknown shift kind '" + std::string(s) + "'");
}

struct ShiftSpec {
  ShiftKind kind = ShiftKind::none;
  double skew = 0.5;   // geometric class-prior decay ratio
  double sigma = 0.3;  // prototype perturbation scale
};

/// Generative recipe for a two-modality world: K keyword prototypes on the
/// unit sphere of a latent space, per-class keyword preferences, and fixed
/// random projections into each raw modality. Captions are keyword index
/// sets; images and texts are noisy projections of the keyword mixture.
struct WorldSpec {
  int num_classes = 8;
  int vocab_size = 32;
  int keywords_min = 2;
  int keywords_max = 3;
  int latent_dim = 16;
  int d_img_raw = 24;
  int d_txt_raw = 20;
  double image_noise_sigma = 0.06;
  double text_noise_sigma = 0.06;
  double keyword_affinity = 4.0;  // log-scale spread of per-class keyword preferences
  int captions_per_image = 1;
  ShiftSpec shift;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_classes < 2) throw Error(Errc::spec_invalid, "world.num_classes must be >= 2");
    if (vocab_size < num_classes) {
      throw Error(Errc::spec_invalid, "world.vocab_size must be >= world.num_classes");
    }
    if (keywords_min < 1) {
      throw Error(Errc::spec_invalid, "world.keywords_per_caption[0] must be >= 1");
    }
    if (keywords_max < keywords_min) {
      throw Error(Errc::spec_invalid,
                  "world.keywords_per_caption[1] must be >= world.keywords_per_caption[0]");
    }
    if (latent_dim < 2) throw Error(Errc::spec_invalid, "world.latent_dim must be >= 2");
    if (d_img_raw < 2) throw Error(Errc::spec_invalid, "world.d_img_raw must be >= 2");
    if (d_txt_raw < 2) throw Error(Errc::spec_invalid, "world.d_txt_raw must be >= 2");
    if (image_noise_sigma < 0.0) {
      throw Error(Errc::spec_invalid, "world.image_noise_sigma must be >= 0");
    }
    if (text_noise_sigma < 0.0) {
      throw Error(Errc::spec_invalid, "world.text_noise_sigma must be >= 0");
    }
    if (keyword_affinity < 0.0) {
      throw Error(Errc::spec_invalid, "world.keyword_affinity must be >= 0");
    }
    if (captions_per_image < 1) {
      throw Error(Errc::spec_invalid, "world.captions_per_image must be >= 1");
    }
    if (shift.skew <= 0.0) throw Error(Errc::spec_invalid, "world.shift.skew must be > 0");
    if (shift.sigma < 0.0) throw Error(Errc::spec_invalid, "world.shift.sigma must be >= 0");
  }
};

inline nlohmann::json world_spec_to_json(const WorldSpec& w) {
  return nlohmann::json{
      {"num_classes", w.num_classes},
      {"vocab_size", w.vocab_size},
      {"keywords_per_caption", {w.keywords_min, w.keywords_max}},
      {"latent_dim", w.latent_dim},
      {"d_img_raw", w.d_img_raw},
      {"d_txt_raw", w.d_txt_raw},
      {"image_noise_sigma", w.image_noise_sigma},
      {"text_noise_sigma", w.text_noise_sigma},
      {"keyword_affinity", w.keyword_affinity},
      {"captions_per_image", w.captions_per_image},
      {"shift",
       {{"kind", to_string(w.shift.kind)}, {"skew", w.shift.skew}, {"sigma", w.shift.sigma}}},
      {"seed", w.seed}};
}

inline WorldSpec world_spec_from_json(const nlohmann::json& j) {
  WorldSpec w;
  try {
    w.num_classes = j.value("num_classes", w.num_classes);
    w.vocab_size = j.value("vocab_size", w.vocab_size);
    if (j.contains("keywords_per_caption")) {
      const auto& range = j.at("keywords_per_caption");
      if (!range.is_array() || range.size() != 2) {
        throw Error(Errc::config_invalid,
                    "world.keywords_per_caption must be a [min, max] pair");
      }
      w.keywords_min = range[0].get<int>();
      w.keywords_max = range[1].get<int>();
    }
    w.latent_dim = j.value("latent_dim", w.latent_dim);
    w.d_img_raw = j.value("d_img_raw", w.d_img_raw);
    w.d_txt_raw = j.value("d_txt_raw", w.d_txt_raw);
    w.image_noise_sigma = j.value("image_noise_sigma", w.image_noise_sigma);
    w.text_noise_sigma = j.value("text_noise_sigma", w.text_noise_sigma);
    w.keyword_affinity = j.value("keyword_affinity", w.keyword_affinity);
    w.captions_per_image = j.value("captions_per_image", w.captions_per_image);
    if (j.contains("shift")) {
      const auto& s = j.at("shift");
      w.shift.kind = parse_shift_kind(s.value("kind", "none"));
      w.shift.skew = s.value("skew", w.shift.skew);
      w.shift.sigma = s.value("sigma", w.shift.sigma);
    }
    w.seed = j.value("seed", w.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config_invalid, std::string("world config: ") + e.what());
  }
  return w;
}

struct World {
  WorldSpec spec;
  Matrix prototypes;          // K x latent_dim, unit rows
  Matrix shifted_prototypes;  // used by the unlabeled pool under perturbation
  Matrix extra_weights;       // num_classes x K preferences over non-class keywords
  Matrix img_proj;            // latent_dim x d_img_raw
  Matrix txt_proj;            // latent_dim x d_txt_raw
};

/// A generated example. Labeled samples carry at least one caption (raw text
/// features plus the keyword indices composing it); unlabeled samples have an
/// empty raw_text. The class keyword is always among keyword_indices.
struct SynthSample {
  std::vector<double> raw_image;
  std::vector<double> raw_text;  // empty for unlabeled samples
  std::vector<std::size_t> keyword_indices;
  std::size_t class_index = 0;
  // additional caption variants when captions_per_image > 1
  std::vector<std::pair<std::vector<double>, std::vector<std::size_t>>> extra_captions;
};

/// Deterministic in spec.seed. Classes own the first num_classes keywords,
/// one each; the remaining vocabulary is shared through per-class preference
/// weights. Draw order: prototypes, preferences, projections, perturbation.
inline World generate_world(const WorldSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  World world;
  world.spec = spec;
  const std::size_t k = spec.vocab_size;
  const std::size_t latent = spec.latent_dim;

  world.prototypes = normalize_rows(rng.normal_matrix(k, latent)).values();

  world.extra_weights = Matrix(spec.num_classes, k);
  for (int c = 0; c < spec.num_classes; ++c) {
    for (std::size_t j = spec.num_classes; j < k; ++j) {
      world.extra_weights(c, j) = std::exp(spec.keyword_affinity * rng.normal());
    }
  }

  world.img_proj = rng.normal_matrix(latent, spec.d_img_raw, 1.0 / std::sqrt(double(latent)));
  world.txt_proj = rng.normal_matrix(latent, spec.d_txt_raw, 1.0 / std::sqrt(double(latent)));

  if (spec.shift.kind == ShiftKind::prototype_perturbation && spec.shift.sigma > 0.0) {
    Matrix perturbed = world.prototypes;
    add_scaled(perturbed, rng.normal_matrix(k, latent), spec.shift.sigma);
    world.shifted_prototypes = normalize_rows(perturbed).values();
  } else {
    world.shifted_prototypes = world.prototypes;
  }
  return world;
}

namespace detail {

/// Class keyword plus (l - 1) distinct extras drawn by per-class preference
/// weights without replacement; sorted ascending.
inline std::vector<std::size_t> draw_keywords(const World& world, std::size_t class_index,
                                              Rng& rng) {
  const WorldSpec& spec = world.spec;
  const int l = rng.uniform_int(spec.keywords_min, spec.keywords_max);
  std::vector<double> weights(world.extra_weights.row(class_index).begin(),
                              world.extra_weights.row(class_index).end());
  double total = 0.0;
  for (double w : weights) total += w;
  std::vector<std::size_t> kws = {class_index};
  int extras = l - 1;
  while (extras > 0 && total > 0.0) {
    double r = rng.uniform() * total;
    std::size_t pick = 0;
    for (std::size_t j = 0; j < weights.size(); ++j) {
      if (weights[j] <= 0.0) continue;
      r -= weights[j];
      pick = j;
      if (r <= 0.0) break;
    }
    kws.push_back(pick);
    total -= weights[pick];
    weights[pick] = 0.0;
    --extras;
  }
  std::sort(kws.begin(), kws.end());
  return kws;
}

inline std::vector<double> keyword_mixture(const Matrix& prototypes,
                                           const std::vector<std::size_t>& kws) {
  std::vector<double> mix(prototypes.cols(), 0.0);
  for (std::size_t idx : kws) {
    for (std::size_t d = 0; d < mix.size(); ++d) mix[d] += prototypes(idx, d);
  }
  for (double& v : mix) v /= static_cast<double>(kws.size());
  return mix;
}

inline std::vector<double> project(const std::vector<double>& latent, const Matrix& proj) {
  std::vector<double> out(proj.cols(), 0.0);
  for (std::size_t d = 0; d < latent.size(); ++d) {
    const double l = latent[d];
    if (l == 0.0) continue;
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += l * proj(d, j);
  }
  return out;
}

inline std::vector<double> noisy_projection(const std::vector<double>& mix, const Matrix& proj,
                                            double sigma, Rng& rng) {
  std::vector<double> latent = mix;
  for (double& v : latent) v += sigma * rng.normal();
  return project(latent, proj);
}

}  // namespace detail

/// Labeled pairs: per sample draw class, keywords, then image and text noise
/// (in that order); extra caption variants redraw keywords and text noise.
inline std::vector<SynthSample> sample_paired(const World& world, std::size_t n, Rng& rng) {
  const WorldSpec& spec = world.spec;
  std::vector<SynthSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    SynthSample s;
    s.class_index = rng.uniform_index(spec.num_classes);
    s.keyword_indices = detail::draw_keywords(world, s.class_index, rng);
    const auto mix = detail::keyword_mixture(world.prototypes, s.keyword_indices);
    s.raw_image = detail::noisy_projection(mix, world.img_proj, spec.image_noise_sigma, rng);
    s.raw_text = detail::noisy_projection(mix, world.txt_proj, spec.text_noise_sigma, rng);
    for (int extra = 1; extra < spec.captions_per_image; ++extra) {
      auto kws = detail::draw_keywords(world, s.class_index, rng);
      const auto extra_mix = detail::keyword_mixture(world.prototypes, kws);
      auto text =
          detail::noisy_projection(extra_mix, world.txt_proj, spec.text_noise_sigma, rng);
      s.extra_captions.emplace_back(std::move(text), std::move(kws));
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Unlabeled pool. shift=none reuses the labeled generative process (minus
/// the text side); class_prior reweights classes geometrically by skew;
/// prototype_perturbation swaps in the once-perturbed prototypes.
inline std::vector<SynthSample> sample_unlabeled(const World& world, std::size_t m, Rng& rng) {
  const WorldSpec& spec = world.spec;
  std::vector<double> class_weights;
  if (spec.shift.kind == ShiftKind::class_prior) {
    class_weights.resize(spec.num_classes);
    double total = 0.0;
    for (int c = 0; c < spec.num_classes; ++c) {
      class_weights[c] = std::pow(spec.shift.skew, c);
      total += class_weights[c];
    }
    for (double& w : class_weights) w /= total;
  }
  const Matrix& prototypes = spec.shift.kind == ShiftKind::prototype_perturbation
                                 ? world.shifted_prototypes
                                 : world.prototypes;

  std::vector<SynthSample> out;
  out.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    SynthSample s;
    if (class_weights.empty()) {
      s.class_index = rng.uniform_index(spec.num_classes);
    } else {
      double r = rng.uniform();
      std::size_t pick = spec.num_classes - 1;
      for (std::size_t c = 0; c < class_weights.size(); ++c) {
        r -= class_weights[c];
        if (r <= 0.0) {
          pick = c;
          break;
        }
      }
      s.class_index = pick;
    }
    s.keyword_indices = detail::draw_keywords(world, s.class_index, rng);
    const auto mix = detail::keyword_mixture(prototypes, s.keyword_indices);
    s.raw_image = detail::noisy_projection(mix, world.img_proj, spec.image_noise_sigma, rng);
    out.push_back(std::move(s));
  }
  return out;
}

/// Noiseless text-side features of every keyword prototype: the anchors used
/// for the keyword loss and, for the first num_classes rows, as class
/// prompts in zero-shot evaluation.
inline Matrix keyword_raw_features(const World& world) {
  Matrix out(world.spec.vocab_size, world.spec.d_txt_raw);
  for (int k = 0; k < world.spec.vocab_size; ++k) {
    std::vector<double> proto(world.prototypes.row(k).begin(), world.prototypes.row(k).end());
    const auto raw = detail::project(proto, world.txt_proj);
    for (std::size_t j = 0; j < raw.size(); ++j) out(k, j) = raw[j];
  }
  return out;
}

// ---- dataset container and SCDS1 serialization ----

struct Dataset {
  WorldSpec world_spec;
  std::vector<SynthSample> train_paired;
  std::vector<SynthSample> train_unlabeled;
  std::vector<SynthSample> eval_paired;
  Matrix keyword_raw;
  std::vector<std::string> keyword_names;

  std::size_t num_classes() const { return world_spec.num_classes; }
  Matrix class_prompt_raw() const {
    Matrix out(world_spec.num_classes, keyword_raw.cols());
    for (int c = 0; c < world_spec.num_classes; ++c) {
      for (std::size_t j = 0; j < keyword_raw.cols(); ++j) out(c, j) = keyword_raw(c, j);
    }
    return out;
  }
};

/// Draw the labeled pool, the unlabeled pool, and a held-out evaluation set
/// (always from the unshifted distribution) from one data stream.
inline Dataset build_dataset(const World& world, std::size_t n_labeled,
                             std::size_t n_unlabeled, std::size_t n_eval) {
  Rng rng(world.spec.seed + 1);  // distinct from the world-generation stream
  Dataset ds;
  ds.world_spec = world.spec;
  ds.train_paired = sample_paired(world, n_labeled, rng);
  ds.train_unlabeled = sample_unlabeled(world, n_unlabeled, rng);
  ds.eval_paired = sample_paired(world, n_eval, rng);
  ds.keyword_raw = keyword_raw_features(world);
  for (int k = 0; k < world.spec.vocab_size; ++k) {
    ds.keyword_names.push_back("kw_" + std::to_string(k));
  }
  return ds;
}

inline constexpr std::string_view kDatasetMagic = "SCDS1";

namespace detail {

inline void write_sample(ByteWriter& w, const SynthSample& s) {
  w.u32(static_cast<std::uint32_t>(s.class_index));
  w.u32(static_cast<std::uint32_t>(s.raw_image.size()));
  for (double v : s.raw_image) w.f64(v);
  const std::uint32_t captions = s.raw_text.empty()
                                     ? 0
                                     : 1 + static_cast<std::uint32_t>(s.extra_captions.size());
  w.u32(captions);
  auto write_caption = [&](const std::vector<double>& text,
                           const std::vector<std::size_t>& kws) {
    w.u32(static_cast<std::uint32_t>(text.size()));
    for (double v : text) w.f64(v);
    w.u32(static_cast<std::uint32_t>(kws.size()));
    for (std::size_t idx : kws) w.u32(static_cast<std::uint32_t>(idx));
  };
  if (captions > 0) {
    write_caption(s.raw_text, s.keyword_indices);
    for (const auto& [text, kws] : s.extra_captions) write_caption(text, kws);
  } else {
    w.u32(static_cast<std::uint32_t>(s.keyword_indices.size()));
    for (std::size_t idx : s.keyword_indices) w.u32(static_cast<std::uint32_t>(idx));
  }
}

inline SynthSample read_sample(ByteReader& r) {
  SynthSample s;
  s.class_index = r.u32();
  s.raw_image.resize(r.u32());
  for (double& v : s.raw_image) v = r.f64();
  const std::uint32_t captions = r.u32();
  auto read_kws = [&]() {
    std::vector<std::size_t> kws(r.u32());
    for (std::size_t& idx : kws) idx = r.u32();
    return kws;
  };
  if (captions == 0) {
    s.keyword_indices = read_kws();
    return s;
  }
  for (std::uint32_t c = 0; c < captions; ++c) {
    std::vector<double> text(r.u32());
    for (double& v : text) v = r.f64();
    auto kws = read_kws();
    if (c == 0) {
      s.raw_text = std::move(text);
      s.keyword_indices = std::move(kws);
    } else {
      s.extra_captions.emplace_back(std::move(text), std::move(kws));
    }
  }
  return s;
}

}  // namespace detail

/// Writes the SCDS1 binary plus a JSON sidecar (path + ".json") echoing the
/// world spec and counts.
inline void save_dataset(const std::string& path, const Dataset& ds) {
  ByteWriter w;
  w.magic(kDatasetMagic);
  w.u32(static_cast<std::uint32_t>(ds.world_spec.num_classes));
  for (const auto* split : {&ds.train_paired, &ds.train_unlabeled, &ds.eval_paired}) {
    w.u32(static_cast<std::uint32_t>(split->size()));
    for (const auto& s : *split) detail::write_sample(w, s);
  }
  w.matrix(ds.keyword_raw);
  w.u32(static_cast<std::uint32_t>(ds.keyword_names.size()));
  for (const auto& name : ds.keyword_names) w.str(name);
  atomic_write_file(path, w.buffer());

  nlohmann::json sidecar{{"world", world_spec_to_json(ds.world_spec)},
                         {"n_labeled", ds.train_paired.size()},
                         {"n_unlabeled", ds.train_unlabeled.size()},
                         {"n_eval", ds.eval_paired.size()}};
  atomic_write_file(path + ".json", sidecar.dump(2) + "\n");
}

inline Dataset load_dataset(const std::string& path) {
  Dataset ds;
  nlohmann::json sidecar;
  try {
    sidecar = nlohmann::json::parse(read_file(path + ".json"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse_error, std::string("dataset sidecar: ") + e.what());
  }
  ds.world_spec = world_spec_from_json(sidecar.at("world"));

  const std::string data = read_file(path);
  ByteReader r(data);
  r.expect_magic(kDatasetMagic);
  const std::uint32_t num_classes = r.u32();
  if (static_cast<int>(num_classes) != ds.world_spec.num_classes) {
    throw Error(Errc::parse_error, "dataset class count disagrees with sidecar");
  }
  for (auto* split : {&ds.train_paired, &ds.train_unlabeled, &ds.eval_paired}) {
    split->resize(r.u32());
    for (auto& s : *split) s = detail::read_sample(r);
  }
  ds.keyword_raw = r.matrix();
  ds.keyword_names.resize(r.u32());
  for (auto& name : ds.keyword_names) name = r.str();
  if (!r.at_end()) {
    throw Error(Errc::parse_error, "trailing bytes after dataset payload", r.position());
  }
  return ds;
}

}  // namespace sclip
