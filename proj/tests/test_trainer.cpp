#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "sclip/rng.hpp"
#include "sclip/trainer.hpp"

using namespace sclip;

namespace {

struct Fixture {
  Batch batch;
  KeywordContext keywords;
  TrainConfig cfg;
  EncoderParams params;
  OptimizerState opt;
};

// Random raw features and keyword lists; shapes follow the spec's desk-scale
// gradient-check configuration unless overridden.
Fixture make_fixture(Method method, std::uint64_t seed, int n = 6, int m = 5, int k = 7,
                     int d_img_raw = 8, int d_txt_raw = 8, int embed_dim = 8,
                     int hidden_dim = 0) {
  Rng rng(seed);
  Fixture f;
  f.cfg.method = method;
  f.cfg.tau = 0.1;
  f.cfg.lambda = 0.1;
  f.cfg.n_paired_per_batch = n;
  f.cfg.m_unpaired_per_batch = m;
  f.cfg.embed_dim = embed_dim;
  f.cfg.hidden_dim = hidden_dim;
  f.cfg.seed = seed;

  f.batch.paired_images = rng.normal_matrix(n, d_img_raw);
  f.batch.paired_texts = rng.normal_matrix(n, d_txt_raw);
  f.batch.caption_keywords.resize(n);
  for (int i = 0; i < n; ++i) {
    std::vector<std::size_t> kws;
    const int count = rng.uniform_int(1, 3);
    while (static_cast<int>(kws.size()) < count) {
      const std::size_t idx = rng.uniform_index(k);
      if (std::find(kws.begin(), kws.end(), idx) == kws.end()) kws.push_back(idx);
    }
    std::sort(kws.begin(), kws.end());
    f.batch.caption_keywords[i] = kws;
  }
  f.batch.unpaired_images = rng.normal_matrix(m, d_img_raw);

  f.keywords.raw = rng.normal_matrix(k, d_txt_raw);
  for (int i = 0; i < k; ++i) f.keywords.names.push_back("kw" + std::to_string(i));

  f.params = EncoderParams::init(d_img_raw, d_txt_raw, f.cfg, rng);
  f.opt = OptimizerState::init(f.params);
  return f;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("encode with identity weights keeps pre-normalized rows") {
  EncoderParams params;
  params.image.w1 = Matrix::identity(4);
  params.text.w1 = Matrix::identity(4);
  Rng rng(5);
  const Matrix raw = normalize_rows(rng.normal_matrix(3, 4)).values();
  auto out = encode(params, raw, TowerKind::image);
  REQUIRE(max_abs_diff(out.values(), raw) < 1e-15);
}

TEST_CASE("encode is invariant to positive weight scaling") {
  Rng rng(6);
  EncoderParams params;
  params.image.w1 = rng.normal_matrix(5, 3);
  params.text.w1 = rng.normal_matrix(5, 3);
  const Matrix raw = rng.normal_matrix(4, 5);
  auto base = encode(params, raw, TowerKind::image);
  EncoderParams scaled_params = params;
  scaled_params.image.w1 = scaled(params.image.w1, 3.0);
  auto rescaled = encode(scaled_params, raw, TowerKind::image);
  REQUIRE(max_abs_diff(base.values(), rescaled.values()) < 1e-12);
}

TEST_CASE("encode matches a scalar matrix-multiply oracle") {
  Rng rng(7);
  EncoderParams params;
  params.image.w1 = rng.normal_matrix(5, 3);
  params.text.w1 = rng.normal_matrix(5, 3);
  const Matrix raw = rng.normal_matrix(4, 5);
  auto out = encode(params, raw, TowerKind::image);
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<double> z(3, 0.0);
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t d = 0; d < 5; ++d) z[j] += raw(i, d) * params.image.w1(d, j);
    }
    const double n = std::sqrt(z[0] * z[0] + z[1] * z[1] + z[2] * z[2]);
    for (std::size_t j = 0; j < 3; ++j) {
      REQUIRE(out.values()(i, j) == Catch::Approx(z[j] / n).margin(1e-12));
    }
  }
}

TEST_CASE("learning-rate schedule endpoints") {
  TrainConfig cfg;
  cfg.learning_rate = 0.4;
  cfg.warmup_steps = 10;
  cfg.total_steps = 100;
  cfg.schedule = Schedule::cosine;
  REQUIRE(lr_at(0, cfg) == 0.0);
  REQUIRE(lr_at(10, cfg) == Catch::Approx(0.4).margin(1e-15));
  REQUIRE(lr_at(100, cfg) == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(lr_at(55, cfg) == Catch::Approx(0.4 * 0.5).margin(1e-12));

  cfg.schedule = Schedule::constant;
  REQUIRE(lr_at(0, cfg) == 0.0);
  REQUIRE(lr_at(5, cfg) == Catch::Approx(0.2).margin(1e-15));
  REQUIRE(lr_at(77, cfg) == Catch::Approx(0.4).margin(1e-15));
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  auto f = make_fixture(Method::sclip, 21);
  f.cfg.learning_rate = 0.0;
  f.cfg.warmup_steps = 0;
  f.cfg.schedule = Schedule::constant;
  const Matrix before_img = f.params.image.w1;
  const Matrix before_txt = f.params.text.w1;
  train_step(f.params, f.opt, f.batch, f.keywords, f.cfg);
  REQUIRE(f.params.image.w1 == before_img);
  REQUIRE(f.params.text.w1 == before_txt);
}

TEST_CASE("supervised method ignores unlabeled data") {
  auto f = make_fixture(Method::supervised, 22);
  f.batch.unpaired_images = Matrix(0, 8);
  f.cfg.m_unpaired_per_batch = 0;
  auto metrics = train_step(f.params, f.opt, f.batch, f.keywords, f.cfg);
  REQUIRE(metrics.loss_caption == 0.0);
  REQUIRE(metrics.loss_keyword == 0.0);
  REQUIRE(metrics.loss_total == Catch::Approx(metrics.loss_clip).margin(1e-15));
}

TEST_CASE("one step decreases the loss on the same batch") {
  for (Method method : {Method::supervised, Method::soft_pl, Method::sclip}) {
    auto f = make_fixture(method, 23, 8, 6);
    f.cfg.learning_rate = 1e-3;
    f.cfg.warmup_steps = 0;
    f.cfg.schedule = Schedule::constant;
    const double before = evaluate_loss(f.params, f.batch, f.keywords, f.cfg).loss_total;
    train_step(f.params, f.opt, f.batch, f.keywords, f.cfg);
    const double after = evaluate_loss(f.params, f.batch, f.keywords, f.cfg).loss_total;
    REQUIRE(after < before);
  }
}

TEST_CASE("training is bit-deterministic") {
  auto run = [] {
    auto f = make_fixture(Method::sclip, 31);
    f.cfg.learning_rate = 5e-3;
    for (int step = 0; step < 5; ++step) {
      train_step(f.params, f.opt, f.batch, f.keywords, f.cfg);
    }
    return f.params;
  };
  const EncoderParams a = run();
  const EncoderParams b = run();
  REQUIRE(a.image.w1 == b.image.w1);
  REQUIRE(a.text.w1 == b.text.w1);
}

TEST_CASE("frozen towers do not move") {
  auto f = make_fixture(Method::sclip, 32);
  f.cfg.freeze = Freeze::image;
  f.cfg.learning_rate = 1e-2;
  f.cfg.warmup_steps = 0;
  const Matrix image_before = f.params.image.w1;
  const Matrix text_before = f.params.text.w1;
  for (int step = 0; step < 4; ++step) {
    train_step(f.params, f.opt, f.batch, f.keywords, f.cfg);
  }
  REQUIRE(f.params.image.w1 == image_before);
  REQUIRE(max_abs_diff(f.params.text.w1, text_before) > 0.0);
}

TEST_CASE("gradient check: linear towers across methods") {
  for (Method method :
       {Method::supervised, Method::hard_pl, Method::soft_pl, Method::sclip,
        Method::sclip_pseudo_embed}) {
    auto f = make_fixture(method, 41, 4, 3, 5, 6, 6, 4);
    REQUIRE(grad_check(f.params, f.batch, f.keywords, f.cfg, 1e-5) < 1e-4);
  }
}

TEST_CASE("gradient check: desk-scale sclip configuration") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto f = make_fixture(Method::sclip, 50 + seed);
    REQUIRE(grad_check(f.params, f.batch, f.keywords, f.cfg, 1e-5) < 1e-4);
  }
}

TEST_CASE("gradient check: hidden-layer towers") {
  auto f = make_fixture(Method::sclip, 60, 5, 4, 6, 7, 7, 4, 6);
  REQUIRE(grad_check(f.params, f.batch, f.keywords, f.cfg, 1e-5) < 1e-4);
}

TEST_CASE("gradient check: frozen image tower skips image parameters") {
  auto f = make_fixture(Method::sclip, 61);
  f.cfg.freeze = Freeze::image;
  REQUIRE(grad_check(f.params, f.batch, f.keywords, f.cfg, 1e-5) < 1e-4);
}

TEST_CASE("gradient check: fixed keyword embeddings are constants") {
  auto f = make_fixture(Method::sclip, 62);
  f.cfg.keyword_source = KeywordSource::fixed;
  f.keywords.fixed = encode(f.params, f.keywords.raw, TowerKind::text);
  REQUIRE(grad_check(f.params, f.batch, f.keywords, f.cfg, 1e-5) < 1e-4);
}

TEST_CASE("gradient check: hardmax keyword loss and text pseudo-source") {
  auto hard = make_fixture(Method::sclip, 63);
  hard.cfg.keyword_loss_mode = KeywordLossMode::hardmax;
  REQUIRE(grad_check(hard.params, hard.batch, hard.keywords, hard.cfg, 1e-5) < 1e-4);

  auto text_src = make_fixture(Method::sclip, 64);
  text_src.cfg.pseudo_source = PseudoSource::text;
  REQUIRE(grad_check(text_src.params, text_src.batch, text_src.keywords, text_src.cfg, 1e-5) <
          1e-4);
}

TEST_CASE("gradient check: learnable temperature") {
  auto f = make_fixture(Method::sclip, 65);
  f.cfg.learnable_tau = true;
  f.params.tau = f.cfg.tau;
  REQUIRE(grad_check(f.params, f.batch, f.keywords, f.cfg, 1e-5) < 1e-4);
}

TEST_CASE("checkpoint round trip restores bit-identical state") {
  auto f = make_fixture(Method::sclip, 70, 6, 5, 7, 8, 8, 4, 5);
  f.cfg.learnable_tau = true;
  f.params.tau = f.cfg.tau;
  f.opt = OptimizerState::init(f.params);
  for (int step = 0; step < 3; ++step) {
    train_step(f.params, f.opt, f.batch, f.keywords, f.cfg);
  }
  const std::string path = temp_path("sclip_ckpt_test.sckp");
  save_checkpoint(path, f.params, f.opt, "{\"echo\":true}");
  auto ckpt = load_checkpoint(path);
  std::remove(path.c_str());

  REQUIRE(ckpt.config_echo == "{\"echo\":true}");
  REQUIRE(ckpt.params.image.w1 == f.params.image.w1);
  REQUIRE(ckpt.params.image.w2.has_value());
  REQUIRE(*ckpt.params.image.w2 == *f.params.image.w2);
  REQUIRE(ckpt.params.text.w1 == f.params.text.w1);
  REQUIRE(ckpt.params.tau == f.params.tau);
  REQUIRE(ckpt.opt.image.w1 == f.opt.image.w1);
  REQUIRE(ckpt.opt.step == f.opt.step);
}

TEST_CASE("checkpoint loader rejects truncated and foreign files") {
  const std::string path = temp_path("sclip_ckpt_bad.sckp");
  atomic_write_file(path, "SCKP1\x02\x00");
  try {
    load_checkpoint(path);
    FAIL("expected parse error");
  } catch (const Error& e) {
    REQUIRE(e.code() == Errc::parse_error);
  }
  atomic_write_file(path, "WRONG_MAGIC___");
  try {
    load_checkpoint(path);
    FAIL("expected bad magic");
  } catch (const Error& e) {
    REQUIRE(e.code() == Errc::bad_magic);
  }
  std::remove(path.c_str());
}

TEST_CASE("exploding update reports a non-finite failure") {
  auto f = make_fixture(Method::supervised, 80);
  f.cfg.learning_rate = 1e300;
  f.cfg.warmup_steps = 0;
  f.cfg.schedule = Schedule::constant;
  try {
    for (int step = 0; step < 3; ++step) {
      train_step(f.params, f.opt, f.batch, f.keywords, f.cfg);
    }
    FAIL("expected NonFiniteLoss");
  } catch (const Error& e) {
    REQUIRE(e.code() == Errc::non_finite_loss);
  }
}

TEST_CASE("batch sampler covers each paired example once per epoch") {
  std::vector<PairedExample> paired(6);
  for (std::size_t i = 0; i < 6; ++i) {
    paired[i].raw_image = {static_cast<double>(i), 0.0};
    paired[i].captions.push_back({{static_cast<double>(i)}, {i % 3}});
  }
  Rng rng(90);
  BatchSampler sampler(paired, rng.normal_matrix(4, 2), 17);
  REQUIRE(sampler.steps_per_epoch(3) == 2);

  std::vector<int> seen(6, 0);
  for (int step = 0; step < 2; ++step) {
    Batch b = sampler.next(3, 2);
    for (int r = 0; r < 3; ++r) seen[static_cast<int>(b.paired_images(r, 0))] += 1;
    REQUIRE(b.unpaired_images.rows() == 2);
  }
  for (int c : seen) REQUIRE(c == 1);
}

TEST_CASE("batch sampler picks among caption variants") {
  std::vector<PairedExample> paired(1);
  paired[0].raw_image = {1.0};
  paired[0].captions.push_back({{10.0}, {0}});
  paired[0].captions.push_back({{20.0}, {1}});
  BatchSampler sampler(paired, Matrix(0, 1), 3);
  bool saw_first = false, saw_second = false;
  for (int step = 0; step < 40 && !(saw_first && saw_second); ++step) {
    Batch b = sampler.next(1, 0);
    if (b.paired_texts(0, 0) == 10.0) saw_first = true;
    if (b.paired_texts(0, 0) == 20.0) saw_second = true;
  }
  REQUIRE(saw_first);
  REQUIRE(saw_second);
}
