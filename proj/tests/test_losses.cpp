#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "sclip/losses.hpp"
#include "sclip/rng.hpp"

using namespace sclip;

namespace {

EmbeddingMatrix random_unit(std::size_t rows, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  return normalize_rows(rng.normal_matrix(rows, dim));
}

// Central finite differences of a scalar function with respect to one matrix.
Matrix fd_gradient(Matrix& param, const std::function<double()>& eval, double eps) {
  Matrix g(param.rows(), param.cols());
  for (std::size_t i = 0; i < param.rows(); ++i) {
    for (std::size_t j = 0; j < param.cols(); ++j) {
      const double orig = param(i, j);
      param(i, j) = orig + eps;
      const double lp = eval();
      param(i, j) = orig - eps;
      const double lm = eval();
      param(i, j) = orig;
      g(i, j) = (lp - lm) / (2.0 * eps);
    }
  }
  return g;
}

double max_rel_err(const Matrix& analytic, const Matrix& fd) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic.storage()[i];
    const double f = fd.storage()[i];
    worst = std::max(worst, std::fabs(a - f) / std::max({std::fabs(a), std::fabs(f), 1e-8}));
  }
  return worst;
}

double fd_scalar(double& param, const std::function<double()>& eval, double eps) {
  const double orig = param;
  param = orig + eps;
  const double lp = eval();
  param = orig - eps;
  const double lm = eval();
  param = orig;
  return (lp - lm) / (2.0 * eps);
}

// Random orthogonal matrix via Gram-Schmidt on a Gaussian draw.
Matrix random_rotation(std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Matrix q = rng.normal_matrix(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t p = 0; p < i; ++p) {
      const double proj = dot(q.row(i), q.row(p));
      for (std::size_t j = 0; j < d; ++j) q(i, j) -= proj * q(p, j);
    }
    const double n = norm2(q.row(i));
    for (double& x : q.row(i)) x /= n;
  }
  return q;
}

constexpr double kEps = 1e-5;
constexpr double kGradTol = 1e-4;

}  // namespace

TEST_CASE("clip loss closed form on aligned orthonormal pairs") {
  const double tau = 1.0;
  const std::size_t n = 4;
  auto basis = normalize_rows(Matrix::identity(n));
  auto loss = clip_loss(basis, basis, tau);
  const double expected =
      -std::log(std::exp(1.0 / tau) / (std::exp(1.0 / tau) + static_cast<double>(n - 1)));
  REQUIRE(loss.value == Catch::Approx(expected).margin(1e-12));
  REQUIRE(loss.grad_x.has_value());
  REQUIRE(loss.grad_y.has_value());
  REQUIRE_FALSE(loss.grad_u.has_value());
  REQUIRE_FALSE(loss.grad_k.has_value());
}

TEST_CASE("clip loss invariant under joint pair permutation") {
  auto x = random_unit(6, 8, 101);
  auto y = random_unit(6, 8, 102);
  const double base = clip_loss(x, y, 0.1).value;

  const std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
  Matrix xp(6, 8), yp(6, 8);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t d = 0; d < 8; ++d) {
      xp(i, d) = x.values()(perm[i], d);
      yp(i, d) = y.values()(perm[i], d);
    }
  }
  const double permuted =
      clip_loss(EmbeddingMatrix::from_unit_rows(xp), EmbeddingMatrix::from_unit_rows(yp), 0.1)
          .value;
  REQUIRE(std::fabs(base - permuted) < 1e-12);
}

TEST_CASE("clip loss invariant under shared rotation") {
  auto x = random_unit(6, 8, 111);
  auto y = random_unit(6, 8, 112);
  const Matrix rot = random_rotation(8, 113);
  auto xr = EmbeddingMatrix::from_unit_rows(matmul(x.values(), rot));
  auto yr = EmbeddingMatrix::from_unit_rows(matmul(y.values(), rot));
  REQUIRE(std::fabs(clip_loss(x, y, 0.07).value - clip_loss(xr, yr, 0.07).value) < 1e-9);
}

TEST_CASE("clip loss gradients match finite differences") {
  const double tau = 0.1;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Matrix x = random_unit(6, 8, 200 + seed).values();
    Matrix y = random_unit(6, 8, 300 + seed).values();
    auto loss = detail::clip_core(x, y, tau);
    auto eval = [&] { return detail::clip_core(x, y, tau).value; };
    REQUIRE(max_rel_err(*loss.grad_x, fd_gradient(x, eval, kEps)) < kGradTol);
    REQUIRE(max_rel_err(*loss.grad_y, fd_gradient(y, eval, kEps)) < kGradTol);

    double tau_var = tau;
    auto eval_tau = [&] { return detail::clip_core(x, y, tau_var).value; };
    const double fd_tau = fd_scalar(tau_var, eval_tau, kEps);
    REQUIRE(std::fabs(*loss.grad_tau - fd_tau) /
                std::max({std::fabs(*loss.grad_tau), std::fabs(fd_tau), 1e-8}) <
            kGradTol);
  }
}

TEST_CASE("caption loss closed forms") {
  // q one-hot and u exactly aligned with the indicated text rows: the
  // single-direction analog of the clip closed form.
  const double tau = 0.5;
  const std::size_t n = 4;
  auto basis = normalize_rows(Matrix::identity(n));
  PseudoLabelMatrix q;
  q.values = Matrix::identity(n);
  auto loss = caption_loss(basis, basis, q, tau);
  const double expected =
      -std::log(std::exp(1.0 / tau) / (std::exp(1.0 / tau) + static_cast<double>(n - 1)));
  REQUIRE(loss.value == Catch::Approx(expected).margin(1e-12));

  // uniform q with all similarities equal: log N
  auto u = normalize_rows(Matrix::from_rows({{1.0, 0.0, 0.0}}));
  auto y = normalize_rows(
      Matrix::from_rows({{0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}, {0.0, -1.0, 0.0}}));
  PseudoLabelMatrix qu;
  qu.values = Matrix(1, 3, 1.0 / 3.0);
  REQUIRE(caption_loss(u, y, qu, 0.2).value == Catch::Approx(std::log(3.0)).margin(1e-12));
}

TEST_CASE("caption loss with one-hot targets doubles the image direction of clip") {
  auto x = random_unit(5, 8, 400);
  auto y = random_unit(5, 8, 401);
  const double tau = 0.1;
  PseudoLabelMatrix q;
  q.values = Matrix::identity(5);
  const double cap = caption_loss(x, y, q, tau).value;

  // image-direction term computed by scalar evaluation
  double image_term = 0.0;
  const Matrix sims = cosine_matrix(x, y);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto p = softmax_scores(sims.row(i), tau);
    image_term -= std::log(p[i]);
  }
  image_term /= 2.0 * 5.0;
  REQUIRE(std::fabs(cap - 2.0 * image_term) < 1e-12);
}

TEST_CASE("caption loss gradients match finite differences") {
  const double tau = 0.1;
  Rng qrng(77);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Matrix u = random_unit(5, 8, 500 + seed).values();
    Matrix y = random_unit(6, 8, 600 + seed).values();
    Matrix targets(5, 6);
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        targets(i, j) = -std::log(1.0 - qrng.uniform());
        s += targets(i, j);
      }
      for (std::size_t j = 0; j < 6; ++j) targets(i, j) /= s;
    }
    auto loss = detail::caption_core(u, y, targets, tau);
    auto eval = [&] { return detail::caption_core(u, y, targets, tau).value; };
    REQUIRE(max_rel_err(*loss.grad_u, fd_gradient(u, eval, kEps)) < kGradTol);
    REQUIRE(max_rel_err(*loss.grad_y, fd_gradient(y, eval, kEps)) < kGradTol);
  }
}

TEST_CASE("keyword loss skips flagged rows and zeroes out when all skipped") {
  auto catalog = KeywordCatalog::create(normalize_rows(Matrix::identity(3)), {"a", "b", "c"},
                                        {{0}, {1}, {2}});
  auto u = random_unit(4, 3, 700);
  PseudoLabelMatrix qk;
  qk.values = Matrix(4, 3);
  qk.skipped.assign(4, 1);
  auto loss = keyword_loss(u, catalog, qk, 0.1);
  REQUIRE(loss.value == 0.0);
  REQUIRE(max_abs_diff(*loss.grad_u, Matrix(4, 3)) == 0.0);
  REQUIRE(max_abs_diff(*loss.grad_k, Matrix(3, 3)) == 0.0);
}

TEST_CASE("keyword loss single-row closed form") {
  // K=3 orthonormal keywords, singleton candidate at the nearest keyword
  auto catalog = KeywordCatalog::create(normalize_rows(Matrix::identity(3)), {"a", "b", "c"},
                                        {{0}});
  auto u = normalize_rows(Matrix::from_rows({{1.0, 0.0, 0.0}}));
  const double tau = 0.3;
  auto qk = keyword_pseudo_labels(u, catalog, {{0}}, tau);
  auto loss = keyword_loss(u, catalog, qk, tau);
  auto full = softmax_classifier(u.row(0), catalog.embeddings, tau);
  REQUIRE(loss.value == Catch::Approx(-std::log(full[0])).margin(1e-12));
}

TEST_CASE("keyword loss gradients match finite differences") {
  const double tau = 0.1;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Matrix u = random_unit(5, 8, 800 + seed).values();
    Matrix keywords = random_unit(7, 8, 900 + seed).values();
    // mixed candidate sizes, one skipped row
    const std::vector<std::vector<std::size_t>> candidates = {
        {0, 3, 5}, {1}, {}, {2, 4}, {0, 1, 2, 6}};
    auto u_emb = EmbeddingMatrix::from_unit_rows(u);
    auto catalog = KeywordCatalog::create(EmbeddingMatrix::from_unit_rows(keywords),
                                          {"0", "1", "2", "3", "4", "5", "6"}, {});
    auto qk = keyword_pseudo_labels(u_emb, catalog, candidates, tau);

    auto loss = detail::keyword_core(u, keywords, qk.values, qk.skipped, tau);
    auto eval = [&] {
      return detail::keyword_core(u, keywords, qk.values, qk.skipped, tau).value;
    };
    REQUIRE(max_rel_err(*loss.grad_u, fd_gradient(u, eval, kEps)) < kGradTol);
    REQUIRE(max_rel_err(*loss.grad_k, fd_gradient(keywords, eval, kEps)) < kGradTol);
  }
}

TEST_CASE("hardmax keyword loss equals brute-force candidate minimum") {
  const double tau = 0.1;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto u = random_unit(5, 8, 1000 + seed);
    auto keywords = random_unit(7, 8, 1100 + seed);
    auto catalog = KeywordCatalog::create(keywords, {"0", "1", "2", "3", "4", "5", "6"}, {});
    const std::vector<std::vector<std::size_t>> candidates = {
        {0, 3, 5}, {1}, {2, 4}, {0, 6}, {1, 2, 3}};
    auto loss = hardmax_keyword_loss(u, catalog, candidates, tau);

    double expected = 0.0;
    const Matrix sims = cosine_matrix(u, keywords);
    for (std::size_t i = 0; i < 5; ++i) {
      const auto pred = softmax_scores(sims.row(i), tau);
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c : candidates[i]) best = std::min(best, -std::log(pred[c]));
      expected += best;
    }
    expected /= 5.0;
    REQUIRE(loss.value == Catch::Approx(expected).margin(1e-12));
  }
}

TEST_CASE("hardmax picks the aligned candidate and matches singleton keyword loss") {
  auto catalog = KeywordCatalog::create(normalize_rows(Matrix::identity(3)), {"a", "b", "c"},
                                        {});
  auto u = normalize_rows(Matrix::from_rows({{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}}));
  const double tau = 0.2;

  // candidate {0, 2} for a query aligned with keyword 0: the aligned one wins
  auto two = hardmax_keyword_loss(u, catalog, {{0, 2}, {1}}, tau);
  auto qk = keyword_pseudo_labels(u, catalog, {{0}, {1}}, tau);
  auto soft_equiv = keyword_loss(u, catalog, qk, tau);
  REQUIRE(two.value == Catch::Approx(soft_equiv.value).margin(1e-12));
}

TEST_CASE("hardmax keyword loss gradients match finite differences") {
  const double tau = 0.1;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Matrix u = random_unit(5, 8, 1200 + seed).values();
    Matrix keywords = random_unit(7, 8, 1300 + seed).values();
    const std::vector<std::vector<std::size_t>> candidates = {
        {0, 3, 5}, {1}, {}, {2, 4}, {0, 1, 2, 6}};
    auto loss = detail::hardmax_core(u, keywords, candidates, tau);
    auto eval = [&] { return detail::hardmax_core(u, keywords, candidates, tau).value; };
    REQUIRE(max_rel_err(*loss.grad_u, fd_gradient(u, eval, kEps)) < kGradTol);
    REQUIRE(max_rel_err(*loss.grad_k, fd_gradient(keywords, eval, kEps)) < kGradTol);
  }
}

TEST_CASE("pseudo embedding pair loss: gradients and collapsed-row handling") {
  const double tau = 0.1;
  Rng rng(1400);
  Matrix u = random_unit(5, 8, 1401).values();
  Matrix targets = rng.normal_matrix(5, 8);
  for (std::size_t d = 0; d < 8; ++d) targets(2, d) = 0.0;  // collapsed row

  std::vector<std::size_t> active = {0, 1, 3, 4};
  Matrix unit = targets;
  for (std::size_t i : active) {
    const double n = norm2(unit.row(i));
    for (double& v : unit.row(i)) v /= n;
  }
  auto loss = detail::pseudo_pair_core(u, unit, active, tau);
  auto eval = [&] { return detail::pseudo_pair_core(u, unit, active, tau).value; };
  REQUIRE(max_rel_err(*loss.grad_u, fd_gradient(u, eval, kEps)) < kGradTol);
  for (std::size_t d = 0; d < 8; ++d) {
    REQUIRE((*loss.grad_u)(2, d) == 0.0);  // dropped row gets no gradient
  }
}

TEST_CASE("total loss combination and masks") {
  LossValue clip;
  clip.value = 1.0;
  clip.grad_x = Matrix(2, 2, 1.0);
  clip.grad_y = Matrix(2, 2, 2.0);
  LossValue caption;
  caption.value = 0.4;
  caption.grad_u = Matrix(3, 2, 4.0);
  caption.grad_y = Matrix(2, 2, 6.0);
  LossValue keyword;
  keyword.value = 0.2;
  keyword.grad_u = Matrix(3, 2, 8.0);
  keyword.grad_k = Matrix(4, 2, 10.0);

  auto supervised = total_loss(clip);
  REQUIRE(supervised.value == Catch::Approx(1.0));
  REQUIRE_FALSE(supervised.grad_u.has_value());

  auto combined = total_loss(clip, &caption, &keyword);
  REQUIRE(combined.value == Catch::Approx(1.3).margin(1e-15));
  REQUIRE((*combined.grad_u)(0, 0) == Catch::Approx(0.5 * (4.0 + 8.0)).margin(1e-15));
  REQUIRE((*combined.grad_y)(0, 0) == Catch::Approx(2.0 + 0.5 * 6.0).margin(1e-15));
  REQUIRE((*combined.grad_k)(0, 0) == Catch::Approx(5.0).margin(1e-15));
  REQUIRE((*combined.grad_x)(0, 0) == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("losses are nonnegative and finite on random inputs") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto x = random_unit(6, 8, 1500 + seed);
    auto y = random_unit(6, 8, 1600 + seed);
    auto u = random_unit(4, 8, 1700 + seed);
    auto cl = clip_loss(x, y, 0.07);
    REQUIRE(cl.value >= 0.0);
    REQUIRE(loss_is_finite(cl));

    auto q = soft_pl(u, x, 0.07);
    auto cap = caption_loss(u, y, q, 0.07);
    REQUIRE(cap.value >= 0.0);
    REQUIRE(loss_is_finite(cap));
  }
}
