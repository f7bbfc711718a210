#include <doctest.h>

#include <cmath>
#include <random>

#include "defeat/distill_losses.hpp"
#include "grad_cases.hpp"

using namespace defeat;

namespace {

Tensor filled(int h, int w, int c, std::initializer_list<double> v) {
  Tensor t(h, w, c);
  t.data.assign(v.begin(), v.end());
  return t;
}

BinaryMask mask_of(int h, int w, std::initializer_list<int> v) {
  BinaryMask m;
  m.h = h;
  m.w = w;
  for (int x : v) m.values.push_back(static_cast<std::uint8_t>(x));
  return m;
}

// Independent KL: sum p_t log p_t - sum p_t log p_s, without the library.
double kl_by_hand(const std::vector<double>& zs, const std::vector<double>& zt, double temp) {
  auto probs = [&](const std::vector<double>& z) {
    std::vector<double> p;
    double s = 0;
    for (double v : z) s += std::exp(v / temp);
    for (double v : z) p.push_back(std::exp(v / temp) / s);
    return p;
  };
  const auto ps = probs(zs), pt = probs(zt);
  double kl = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) kl += pt[i] * (std::log(pt[i]) - std::log(ps[i]));
  return temp * temp * kl;
}

}  // namespace

TEST_CASE("adapt: identity, zero and matrix-product oracle") {
  std::mt19937_64 rng(3);
  FeatureMap s{grad_cases::random_tensor(2, 2, 3, rng), 0, 8};
  CHECK(adapt(AdaptLayer::identity(3), s).values.data == s.values.data);
  for (double v : adapt(AdaptLayer::zeros(3, 2), s).values.data) CHECK(v == 0.0);

  AdaptLayer layer = AdaptLayer::zeros(3, 2);
  layer.weight = gradcheck::randn(6, rng);
  layer.bias = {0.5, -0.25};
  const auto out = adapt(layer, s);
  REQUIRE(out.values.c == 2);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x)
      for (int o = 0; o < 2; ++o) {
        double expect = layer.bias[static_cast<std::size_t>(o)];
        for (int i = 0; i < 3; ++i) expect += s.values.at(y, x, i) * layer.weight[static_cast<std::size_t>(i * 2 + o)];
        CHECK(out.values.at(y, x, o) == doctest::Approx(expect).epsilon(1e-12));
      }
  CHECK_THROWS_AS(adapt(AdaptLayer::identity(4), s), ContractViolation);
}

TEST_CASE("uniform feature loss hand values") {
  const Tensor s = filled(1, 1, 1, {0.0}), t = filled(1, 1, 1, {2.0});
  CHECK(uniform_feature_loss(s, t, 1.0) == doctest::Approx(2.0));
  CHECK(uniform_feature_loss(t, t, 1.0) == 0.0);
  CHECK(uniform_feature_loss(s, t, 0.0) == 0.0);
  CHECK_THROWS_AS(uniform_feature_loss(s, filled(1, 1, 2, {0, 0}), 1.0), ContractViolation);
}

TEST_CASE("decoupled feature loss hand values and empty regions") {
  const Tensor s = filled(2, 1, 1, {0, 0}), t = filled(2, 1, 1, {2, 4});
  const auto parts = decoupled_feature_loss(s, t, mask_of(2, 1, {1, 0}), 2.0, 2.0);
  CHECK(parts.obj == doctest::Approx(4.0));
  CHECK(parts.bg == doctest::Approx(16.0));
  CHECK(parts.total() == doctest::Approx(20.0));
  CHECK(decoupled_feature_loss(t, t, mask_of(2, 1, {1, 0}), 2, 2).total() == 0.0);

  const auto no_obj = decoupled_feature_loss(s, t, mask_of(2, 1, {0, 0}), 5.0, 1.0);
  CHECK(no_obj.obj == 0.0);
  CHECK(std::isfinite(no_obj.bg));
  const auto no_bg = decoupled_feature_loss(s, t, mask_of(2, 1, {1, 1}), 1.0, 5.0);
  CHECK(no_bg.bg == 0.0);
}

TEST_CASE("decoupled loss reduces to the uniform loss with matched coefficients") {
  std::mt19937_64 rng(11);
  for (int n = 0; n < 25; ++n) {
    const int h = 1 + n % 4, w = 1 + n % 3, c = 1 + n % 5;
    const auto s = grad_cases::random_tensor(h, w, c, rng), t = grad_cases::random_tensor(h, w, c, rng);
    const auto m = grad_cases::random_mask(h, w, rng);
    const double gamma = grad_cases::uniform(rng, 0.1, 4);
    const double total = static_cast<double>(h * w * c);
    const double a_obj = gamma * static_cast<double>(m.n_obj(c)) / total;
    const double a_bg = gamma * static_cast<double>(m.n_bg(c)) / total;
    const double u = uniform_feature_loss(s, t, gamma);
    CHECK(std::abs(decoupled_feature_loss(s, t, m, a_obj, a_bg).total() - u) <= 1e-10 * u);
  }
}

TEST_CASE("feature losses are invariant to a consistent spatial permutation") {
  std::mt19937_64 rng(5);
  const auto s = grad_cases::random_tensor(3, 3, 2, rng), t = grad_cases::random_tensor(3, 3, 2, rng);
  const auto m = grad_cases::random_mask(3, 3, rng);
  std::vector<int> perm(9);
  for (int i = 0; i < 9; ++i) perm[static_cast<std::size_t>(i)] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor ps(3, 3, 2), pt(3, 3, 2);
  BinaryMask pm = m;
  for (int i = 0; i < 9; ++i) {
    const int j = perm[static_cast<std::size_t>(i)];
    for (int ch = 0; ch < 2; ++ch) {
      ps.data[static_cast<std::size_t>(i * 2 + ch)] = s.data[static_cast<std::size_t>(j * 2 + ch)];
      pt.data[static_cast<std::size_t>(i * 2 + ch)] = t.data[static_cast<std::size_t>(j * 2 + ch)];
    }
    pm.values[static_cast<std::size_t>(i)] = m.values[static_cast<std::size_t>(j)];
  }
  CHECK(decoupled_feature_loss(ps, pt, pm, 4, 16).total() ==
        doctest::Approx(decoupled_feature_loss(s, t, m, 4, 16).total()).epsilon(1e-12));
  CHECK(uniform_feature_loss(ps, pt, 2.0, &pm) == doctest::Approx(uniform_feature_loss(s, t, 2.0, &m)).epsilon(1e-12));
}

TEST_CASE("softened probabilities") {
  const std::vector<double> zero{0, 0};
  for (double t : {0.5, 1.0, 7.0}) {
    const auto p = softened_probs(zero, t);
    CHECK(p[0] == doctest::Approx(0.5));
    CHECK(p[1] == doctest::Approx(0.5));
  }
  const std::vector<double> z{std::log(4.0), 0.0};
  const auto p = softened_probs(z, 1.0);
  CHECK(p[0] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(0.2).epsilon(1e-12));

  const std::vector<double> wide{3.0, -1.0, 10.0, 0.5};
  for (double v : softened_probs(wide, 1e6)) CHECK(std::abs(v - 0.25) < 1e-5);
  const std::vector<double> huge{1000.0, -1000.0, 999.0};
  double sum = 0;
  const auto ph = softened_probs(huge, 1.0);
  for (double v : ph) {
    CHECK(std::isfinite(v));
    sum += v;
  }
  CHECK(ph[0] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
  CHECK(std::abs(sum - 1.0) < 1e-12);
  CHECK_THROWS_AS(softened_probs(z, 0.0), ContractViolation);
  const std::vector<double> bad{NAN, 0.0};
  CHECK_THROWS_AS(softened_probs(bad, 1.0), ContractViolation);
}

TEST_CASE("KL distillation hand value, equality and temperature scaling") {
  const std::vector<double> pt{0.8, 0.2}, ps{0.5, 0.5};
  const double expect = 0.8 * std::log(1.6) + 0.2 * std::log(0.4);
  CHECK(kl_distill(ps, pt, 1.0) == doctest::Approx(expect).epsilon(1e-14));
  CHECK(std::abs(kl_distill(ps, pt, 1.0) - 0.19274) < 1e-5);
  CHECK(kl_distill(pt, pt, 3.0) == 0.0);
  CHECK(kl_distill(ps, pt, 3.0) == doctest::Approx(9.0 * kl_distill(ps, pt, 1.0)).epsilon(1e-14));
  const std::vector<double> zero_entry{1.0, 0.0};
  CHECK_THROWS_AS(kl_distill(zero_entry, pt, 1.0), ContractViolation);
}

TEST_CASE("decoupled classification loss: two-proposal hand case") {
  MatrixRM zs(2, 2), zt(2, 2);
  zs << 0.3, -0.2, 1.0, 0.5;
  zt << 2.0, -1.0, -0.5, 1.5;
  const std::vector<int> b{1, 0};
  DistillConfig cfg;  // beta 0.05 / 2, T 3 / 1
  const auto parts = decoupled_cls_loss(zs, zt, b, cfg);
  const double pos = 0.05 / 1 * kl_by_hand({0.3, -0.2}, {2.0, -1.0}, 3.0);
  const double neg = 2.0 / 1 * kl_by_hand({1.0, 0.5}, {-0.5, 1.5}, 1.0);
  CHECK(parts.pos == doctest::Approx(pos).epsilon(1e-12));
  CHECK(parts.neg == doctest::Approx(neg).epsilon(1e-12));
  CHECK(parts.k_obj == 1);
  CHECK(parts.k_bg == 1);
  CHECK(decoupled_cls_loss(zs, zs, b, cfg).total() == 0.0);
}

TEST_CASE("decoupled classification loss: one-sided and empty inputs") {
  std::mt19937_64 rng(8);
  MatrixRM zs(4, 5), zt(4, 5);
  for (Eigen::Index i = 0; i < zs.size(); ++i) zs.data()[i] = grad_cases::uniform(rng, -2, 2), zt.data()[i] = grad_cases::uniform(rng, -2, 2);
  const std::vector<int> all_pos{1, 1, 1, 1};
  DistillConfig cfg;
  double expect = 0;
  for (Eigen::Index i = 0; i < 4; ++i) {
    std::vector<double> a(zs.row(i).data(), zs.row(i).data() + 5), t(zt.row(i).data(), zt.row(i).data() + 5);
    expect += cfg.beta_obj / 4 * kl_by_hand(a, t, cfg.t_obj);
  }
  const auto parts = decoupled_cls_loss(zs, zt, all_pos, cfg);
  CHECK(parts.pos == doctest::Approx(expect).epsilon(1e-12));
  CHECK(parts.neg == 0.0);

  const MatrixRM empty(0, 5);
  const auto none = decoupled_cls_loss(empty, empty, std::vector<int>{}, cfg);
  CHECK(none.empty);
  CHECK(none.total() == 0.0);
  const std::vector<int> bad{1, 2, 0, 0};
  CHECK_THROWS_AS(decoupled_cls_loss(zs, zt, bad, cfg), ContractViolation);
}

TEST_CASE("decoupled and baseline KL agree with balanced halves") {
  std::mt19937_64 rng(21);
  MatrixRM zs(6, 4), zt(6, 4);
  for (Eigen::Index i = 0; i < zs.size(); ++i) zs.data()[i] = grad_cases::uniform(rng, -3, 3), zt.data()[i] = grad_cases::uniform(rng, -3, 3);
  const std::vector<int> b{1, 0, 0, 1, 1, 0};
  const double lambda = 1.3;
  DistillConfig cfg;
  cfg.beta_obj = cfg.beta_bg = lambda / 2;
  cfg.t_obj = cfg.t_bg = 1.0;
  const std::vector<int> y{0, 0, 0, 0, 0, 0};
  CHECK(decoupled_cls_loss(zs, zt, b, cfg).total() ==
        doctest::Approx(baseline_cls_loss(zs, zt, y, lambda).kl).epsilon(1e-12));
}

TEST_CASE("baseline classification loss") {
  MatrixRM zs(3, 3), zt(3, 3);
  zs << 1.0, 2.0, 0.5, -1.0, 0.0, 3.0, 0.2, 0.2, 0.2;
  zt << 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 2.0, -2.0, 0.0;
  const std::vector<int> y{1, 2, 0};
  double ce = 0, kl = 0;
  for (int i = 0; i < 3; ++i) {
    double s = 0;
    for (int c = 0; c < 3; ++c) s += std::exp(zs(i, c));
    ce += -(zs(i, y[static_cast<std::size_t>(i)]) - std::log(s)) / 3;
    kl += 0.7 / 3 * kl_by_hand({zs(i, 0), zs(i, 1), zs(i, 2)}, {zt(i, 0), zt(i, 1), zt(i, 2)}, 1.0);
  }
  const auto parts = baseline_cls_loss(zs, zt, y, 0.7);
  CHECK(parts.ce == doctest::Approx(ce).epsilon(1e-12));
  CHECK(parts.kl == doctest::Approx(kl).epsilon(1e-12));
  CHECK(baseline_cls_loss(zs, zt, y, 0.0).total() == doctest::Approx(ce).epsilon(1e-12));

  MatrixRM confident(2, 3), same(2, 3);
  confident << 60, 0, 0, 0, 0, 60;
  const std::vector<int> yc{0, 2};
  const auto p = baseline_cls_loss(confident, confident, yc, 1.0);
  CHECK(p.kl == 0.0);
  CHECK(p.ce < 1e-20);
}

TEST_CASE("classification losses are invariant to proposal order") {
  std::mt19937_64 rng(4);
  MatrixRM zs(5, 4), zt(5, 4);
  for (Eigen::Index i = 0; i < zs.size(); ++i) zs.data()[i] = grad_cases::uniform(rng, -3, 3), zt.data()[i] = grad_cases::uniform(rng, -3, 3);
  const std::vector<int> b{1, 0, 1, 0, 0}, y{2, 0, 1, 0, 3};
  const std::vector<int> order{3, 0, 4, 2, 1};
  MatrixRM ps(5, 4), pt(5, 4);
  std::vector<int> pb, py;
  for (int i = 0; i < 5; ++i) {
    ps.row(i) = zs.row(order[static_cast<std::size_t>(i)]);
    pt.row(i) = zt.row(order[static_cast<std::size_t>(i)]);
    pb.push_back(b[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
    py.push_back(y[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
  }
  DistillConfig cfg;
  CHECK(decoupled_cls_loss(ps, pt, pb, cfg).total() == doctest::Approx(decoupled_cls_loss(zs, zt, b, cfg).total()).epsilon(1e-12));
  CHECK(baseline_cls_loss(ps, pt, py, 1.0).total() == doctest::Approx(baseline_cls_loss(zs, zt, y, 1.0).total()).epsilon(1e-12));
}

TEST_CASE("softmax over foreground columns ignores the background logit") {
  MatrixRM zs(1, 3), zt(1, 3), zs2(1, 3);
  zs << 5.0, 0.1, 0.4;
  zs2 << -7.0, 0.1, 0.4;
  zt << 1.0, 0.9, -0.3;
  DistillConfig cfg;
  cfg.softmax_includes_bg = false;
  const std::vector<int> b{1};
  MatrixRM g;
  const double a = decoupled_cls_loss(zs, zt, b, cfg, &g).total();
  CHECK(a == doctest::Approx(decoupled_cls_loss(zs2, zt, b, cfg).total()).epsilon(1e-14));
  CHECK(g(0, 0) == 0.0);
}

TEST_CASE("distill config validation and parsing") {
  DistillConfig cfg;
  CHECK(cfg.alpha_obj == 4.0);
  CHECK(cfg.alpha_bg == 16.0);
  CHECK(cfg.beta_obj == 0.05);
  CHECK(cfg.beta_bg == 2.0);
  CHECK(cfg.t_obj == 3.0);
  CHECK(cfg.t_bg == 1.0);
  cfg.t_obj = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.alpha_bg = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_neck_mode("decoupled") == NeckMode::decoupled);
  CHECK(parse_cls_mode("all") == ClsMode::all);
  CHECK(parse_mask_kind("random") == MaskKind::random);
  CHECK_THROWS_AS(parse_neck_mode("sideways"), ConfigError);
  DistillConfig round;
  round.neck = NeckMode::all;
  round.gamma = 3.5;
  const nlohmann::json j = round;
  CHECK(j.get<DistillConfig>().gamma == 3.5);
  CHECK(j.get<DistillConfig>().neck == NeckMode::all);
}

TEST_CASE("analytic gradients of the distillation losses") {
  for (const auto& r : {grad_cases::adapt_case(3, 101), grad_cases::uniform_feature_case(3, 102),
                        grad_cases::decoupled_feature_case(3, 103), grad_cases::softened_kl_case(3, 104),
                        grad_cases::decoupled_cls_case(3, 105), grad_cases::baseline_cls_case(3, 106)}) {
    INFO(r.name << " max rel err " << r.max_rel_err);
    CHECK(r.ok());
  }
}
