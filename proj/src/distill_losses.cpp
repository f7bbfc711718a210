#include "defeat/distill_losses.hpp"

#include <cmath>

namespace defeat {

namespace {

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> table, const char* what) {
  for (const auto& [name, value] : table)
    if (s == name) return value;
  throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
}

void check_shapes(const Tensor& a, const Tensor& b, const char* who) {
  require(a.same_shape(b), std::string(who) + ": student/teacher shape mismatch");
}

void check_mask(const Tensor& a, const BinaryMask& m, const char* who) {
  require(m.h == a.h && m.w == a.w, std::string(who) + ": mask shape mismatch");
}

}  // namespace

void DistillConfig::validate() const {
  if (!(t_obj > 0 && t_bg > 0)) throw ConfigError("temperatures must be > 0");
  for (double v : {gamma, lambda, alpha_obj, alpha_bg, beta_obj, beta_bg})
    if (!(v >= 0)) throw ConfigError("distillation coefficients must be >= 0");
}

std::string to_string(NeckMode m) {
  switch (m) {
    case NeckMode::none: return "none";
    case NeckMode::all: return "all";
    default: return "decoupled";
  }
}
std::string to_string(ClsMode m) {
  switch (m) {
    case ClsMode::none: return "none";
    case ClsMode::all: return "all";
    default: return "decoupled";
  }
}
std::string to_string(MaskKind m) {
  switch (m) {
    case MaskKind::gt: return "gt";
    case MaskKind::random: return "random";
    default: return "all_one";
  }
}
std::string to_string(NeckRegion r) {
  switch (r) {
    case NeckRegion::all: return "all";
    case NeckRegion::object: return "object";
    default: return "background";
  }
}
NeckMode parse_neck_mode(const std::string& s) {
  return parse_enum<NeckMode>(s, {{"none", NeckMode::none}, {"all", NeckMode::all}, {"decoupled", NeckMode::decoupled}},
                              "neck mode");
}
ClsMode parse_cls_mode(const std::string& s) {
  return parse_enum<ClsMode>(s, {{"none", ClsMode::none}, {"all", ClsMode::all}, {"decoupled", ClsMode::decoupled}},
                             "cls mode");
}
MaskKind parse_mask_kind(const std::string& s) {
  return parse_enum<MaskKind>(s, {{"gt", MaskKind::gt}, {"random", MaskKind::random}, {"all_one", MaskKind::all_one}},
                              "mask kind");
}
NeckRegion parse_neck_region(const std::string& s) {
  return parse_enum<NeckRegion>(
      s, {{"all", NeckRegion::all}, {"object", NeckRegion::object}, {"background", NeckRegion::background}},
      "neck region");
}

void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = nlohmann::json{{"gamma", c.gamma},
                     {"lambda", c.lambda},
                     {"alpha_obj", c.alpha_obj},
                     {"alpha_bg", c.alpha_bg},
                     {"beta_obj", c.beta_obj},
                     {"beta_bg", c.beta_bg},
                     {"t_obj", c.t_obj},
                     {"t_bg", c.t_bg},
                     {"neck", to_string(c.neck)},
                     {"cls", to_string(c.cls)},
                     {"backbone", c.backbone},
                     {"backbone_decoupled", c.backbone_decoupled},
                     {"mask", to_string(c.mask)},
                     {"region", to_string(c.region)},
                     {"softmax_includes_bg", c.softmax_includes_bg}};
}

void from_json(const nlohmann::json& j, DistillConfig& c) {
  j.at("gamma").get_to(c.gamma);
  j.at("lambda").get_to(c.lambda);
  j.at("alpha_obj").get_to(c.alpha_obj);
  j.at("alpha_bg").get_to(c.alpha_bg);
  j.at("beta_obj").get_to(c.beta_obj);
  j.at("beta_bg").get_to(c.beta_bg);
  j.at("t_obj").get_to(c.t_obj);
  j.at("t_bg").get_to(c.t_bg);
  c.neck = parse_neck_mode(j.at("neck").get<std::string>());
  c.cls = parse_cls_mode(j.at("cls").get<std::string>());
  j.at("backbone").get_to(c.backbone);
  j.at("backbone_decoupled").get_to(c.backbone_decoupled);
  c.mask = parse_mask_kind(j.at("mask").get<std::string>());
  c.region = parse_neck_region(j.at("region").get<std::string>());
  j.at("softmax_includes_bg").get_to(c.softmax_includes_bg);
}

// ---------------------------------------------------------------- adaptation

AdaptLayer AdaptLayer::identity(int channels) {
  AdaptLayer l = zeros(channels, channels);
  for (int i = 0; i < channels; ++i) l.weight[static_cast<std::size_t>(i) * channels + i] = 1.0;
  return l;
}

AdaptLayer AdaptLayer::zeros(int in, int out) {
  return {in, out, std::vector<double>(static_cast<std::size_t>(in) * out, 0.0),
          std::vector<double>(static_cast<std::size_t>(out), 0.0)};
}

FeatureMap adapt(const AdaptLayer& layer, const FeatureMap& s) {
  require(s.values.c == layer.in_channels, "adapt: student has " + std::to_string(s.values.c) +
                                               " channels, layer expects " + std::to_string(layer.in_channels));
  const Eigen::Index cells = static_cast<Eigen::Index>(s.values.h) * s.values.w;
  FeatureMap out{Tensor(s.values.h, s.values.w, layer.out_channels), s.level, s.stride};
  Eigen::Map<const MatrixRM> x(s.values.data.data(), cells, layer.in_channels);
  Eigen::Map<const MatrixRM> w(layer.weight.data(), layer.in_channels, layer.out_channels);
  Eigen::Map<const Eigen::RowVectorXd> b(layer.bias.data(), layer.out_channels);
  Eigen::Map<MatrixRM> y(out.values.data.data(), cells, layer.out_channels);
  y.noalias() = x * w;
  y.rowwise() += b;
  return out;
}

AdaptGrads adapt_backward(const AdaptLayer& layer, const FeatureMap& s, const Tensor& d_out) {
  require(d_out.c == layer.out_channels && d_out.h == s.values.h && d_out.w == s.values.w,
          "adapt_backward: gradient shape mismatch");
  const Eigen::Index cells = static_cast<Eigen::Index>(s.values.h) * s.values.w;
  AdaptGrads g{Tensor(s.values.h, s.values.w, layer.in_channels),
               std::vector<double>(layer.weight.size(), 0.0), std::vector<double>(layer.bias.size(), 0.0)};
  Eigen::Map<const MatrixRM> x(s.values.data.data(), cells, layer.in_channels);
  Eigen::Map<const MatrixRM> dy(d_out.data.data(), cells, layer.out_channels);
  Eigen::Map<const MatrixRM> w(layer.weight.data(), layer.in_channels, layer.out_channels);
  Eigen::Map<MatrixRM>(g.d_weight.data(), layer.in_channels, layer.out_channels).noalias() = x.transpose() * dy;
  Eigen::Map<Eigen::RowVectorXd>(g.d_bias.data(), layer.out_channels) = dy.colwise().sum();
  Eigen::Map<MatrixRM>(g.d_input.data.data(), cells, layer.in_channels).noalias() = dy * w.transpose();
  return g;
}

// ---------------------------------------------------------------- feature losses

double uniform_feature_loss(const Tensor& s, const Tensor& t, double gamma, const BinaryMask* mask, Tensor* grad) {
  check_shapes(s, t, "uniform_feature_loss");
  if (mask) check_mask(s, *mask, "uniform_feature_loss");
  if (grad) *grad = zeros_like(s);
  if (s.size() == 0) return 0.0;
  const double scale = gamma / (2.0 * static_cast<double>(s.size()));
  double sum = 0;
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      if (mask && !mask->at(y, x)) continue;
      const std::size_t base = s.index(y, x, 0);
      for (int c = 0; c < s.c; ++c) {
        const double d = s.data[base + c] - t.data[base + c];
        sum += d * d;
        if (grad) grad->data[base + c] = 2.0 * scale * d;
      }
    }
  }
  return scale * sum;
}

FeatureLossParts decoupled_feature_loss(const Tensor& s, const Tensor& t, const BinaryMask& mask, double alpha_obj,
                                        double alpha_bg, Tensor* grad) {
  check_shapes(s, t, "decoupled_feature_loss");
  check_mask(s, mask, "decoupled_feature_loss");
  if (grad) *grad = zeros_like(s);
  const std::size_t n_obj = mask.n_obj(s.c), n_bg = mask.n_bg(s.c);
  const double k_obj = n_obj ? alpha_obj / (2.0 * static_cast<double>(n_obj)) : 0.0;
  const double k_bg = n_bg ? alpha_bg / (2.0 * static_cast<double>(n_bg)) : 0.0;
  double sum_obj = 0, sum_bg = 0;
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      const bool obj = mask.at(y, x) != 0;
      const double k = obj ? k_obj : k_bg;
      const std::size_t base = s.index(y, x, 0);
      double local = 0;
      for (int c = 0; c < s.c; ++c) {
        const double d = s.data[base + c] - t.data[base + c];
        local += d * d;
        if (grad) grad->data[base + c] = 2.0 * k * d;
      }
      (obj ? sum_obj : sum_bg) += local;
    }
  }
  return {k_obj * sum_obj, k_bg * sum_bg};
}

// ---------------------------------------------------------------- proposal losses

std::vector<double> softened_probs(std::span<const double> z, double temperature) {
  require(temperature > 0, "softened_probs: temperature must be > 0");
  require(!z.empty(), "softened_probs: empty logits");
  double mx = -INFINITY;
  for (double v : z) {
    require(std::isfinite(v), "softened_probs: non-finite logit");
    mx = std::max(mx, v);
  }
  std::vector<double> p(z.size());
  double sum = 0;
  for (std::size_t i = 0; i < z.size(); ++i) sum += p[i] = std::exp((z[i] - mx) / temperature);
  for (auto& v : p) v /= sum;
  return p;
}

double kl_distill(std::span<const double> p_s, std::span<const double> p_t, double temperature) {
  require(p_s.size() == p_t.size(), "kl_distill: length mismatch");
  double kl = 0;
  for (std::size_t c = 0; c < p_s.size(); ++c) {
    require(p_s[c] > 0, "kl_distill: zero student probability");
    if (p_t[c] > 0) kl += p_t[c] * std::log(p_t[c] / p_s[c]);
  }
  return temperature * temperature * kl;
}

namespace {

// Adds coef * T^2 * KL(p_t || p_s) of one row and its logit gradient.
double row_kl(const MatrixRM& zs, const MatrixRM& zt, Eigen::Index row, Eigen::Index first, double temperature,
              double coef, MatrixRM* grad) {
  const Eigen::Index n = zs.cols() - first;
  const auto ps = softened_probs(std::span<const double>(zs.row(row).data() + first, n), temperature);
  const auto pt = softened_probs(std::span<const double>(zt.row(row).data() + first, n), temperature);
  if (grad)
    for (Eigen::Index c = 0; c < n; ++c) (*grad)(row, first + c) += coef * temperature * (ps[c] - pt[c]);
  return coef * kl_distill(ps, pt, temperature);
}

}  // namespace

ClsDistillParts decoupled_cls_loss(const MatrixRM& zs, const MatrixRM& zt, std::span<const int> labels,
                                   const DistillConfig& cfg, MatrixRM* grad) {
  require(zs.rows() == zt.rows() && zs.cols() == zt.cols(), "decoupled_cls_loss: logit shape mismatch");
  require(static_cast<std::size_t>(zs.rows()) == labels.size(), "decoupled_cls_loss: label count mismatch");
  if (grad) *grad = MatrixRM::Zero(zs.rows(), zs.cols());
  ClsDistillParts out;
  if (zs.rows() == 0) {
    out.empty = true;
    return out;
  }
  for (int b : labels) {
    require(b == 0 || b == 1, "decoupled_cls_loss: labels must be binary");
    out.k_obj += b;
  }
  out.k_bg = static_cast<int>(labels.size()) - out.k_obj;
  const Eigen::Index first = cfg.softmax_includes_bg ? 0 : 1;
  for (Eigen::Index i = 0; i < zs.rows(); ++i) {
    if (labels[i] == 1)
      out.pos += row_kl(zs, zt, i, first, cfg.t_obj, cfg.beta_obj / out.k_obj, grad);
    else
      out.neg += row_kl(zs, zt, i, first, cfg.t_bg, cfg.beta_bg / out.k_bg, grad);
  }
  return out;
}

BaselineClsParts baseline_cls_loss(const MatrixRM& zs, const MatrixRM& zt, std::span<const int> gt_labels,
                                   double lambda, bool softmax_includes_bg, MatrixRM* grad) {
  require(zs.rows() == zt.rows() && zs.cols() == zt.cols(), "baseline_cls_loss: logit shape mismatch");
  require(static_cast<std::size_t>(zs.rows()) == gt_labels.size(), "baseline_cls_loss: label count mismatch");
  if (grad) *grad = MatrixRM::Zero(zs.rows(), zs.cols());
  BaselineClsParts out;
  const Eigen::Index K = zs.rows();
  if (K == 0) return out;
  const double invK = 1.0 / static_cast<double>(K);
  const Eigen::Index first = softmax_includes_bg ? 0 : 1;
  for (Eigen::Index i = 0; i < K; ++i) {
    const int y = gt_labels[i];
    require(y >= 0 && y < zs.cols(), "baseline_cls_loss: label out of range");
    const auto p = softened_probs(std::span<const double>(zs.row(i).data(), zs.cols()), 1.0);
    const double mx = zs.row(i).maxCoeff();
    out.ce += (std::log((zs.row(i).array() - mx).exp().sum()) - (zs(i, y) - mx)) * invK;
    if (grad) {
      for (Eigen::Index c = 0; c < zs.cols(); ++c) (*grad)(i, c) += p[c] * invK;
      (*grad)(i, y) -= invK;
    }
    out.kl += row_kl(zs, zt, i, first, 1.0, lambda * invK, grad);
  }
  return out;
}

}  // namespace defeat
