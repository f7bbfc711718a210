#include "defeat/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace defeat {

namespace {

using ConstMap = Eigen::Map<const MatrixRM>;

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Numerically stable log(1 + exp(x)).
double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

struct BilinearTap {
  int idx[4] = {0, 0, 0, 0};  // cell offsets (y*w+x)
  double weight[4] = {0, 0, 0, 0};
  bool valid = false;
};

BilinearTap bilinear_tap(double fy, double fx, int h, int w) {
  BilinearTap t;
  if (fy < -1.0 || fy > h || fx < -1.0 || fx > w) return t;
  fy = std::max(fy, 0.0);
  fx = std::max(fx, 0.0);
  int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
  int y1, x1;
  if (y0 >= h - 1) {
    y0 = y1 = h - 1;
    fy = y0;
  } else {
    y1 = y0 + 1;
  }
  if (x0 >= w - 1) {
    x0 = x1 = w - 1;
    fx = x0;
  } else {
    x1 = x0 + 1;
  }
  const double ly = fy - y0, lx = fx - x0, hy = 1 - ly, hx = 1 - lx;
  t.idx[0] = y0 * w + x0, t.weight[0] = hy * hx;
  t.idx[1] = y0 * w + x1, t.weight[1] = hy * lx;
  t.idx[2] = y1 * w + x0, t.weight[2] = ly * hx;
  t.idx[3] = y1 * w + x1, t.weight[3] = ly * lx;
  t.valid = true;
  return t;
}

// Sample point of output cell (oy, ox) in feature coordinates.
template <typename Fn>
bool for_each_sample(const FeatureMap& f, const BBox& box, int out_size, int image_size, Fn&& fn) {
  const BBox b = clip_box(box, image_size, image_size);
  if (!(b.area() >= 1.0)) return false;
  const double bw = b.width() / out_size, bh = b.height() / out_size;
  for (int oy = 0; oy < out_size; ++oy) {
    for (int ox = 0; ox < out_size; ++ox) {
      const double fy = (b.y1 + (oy + 0.5) * bh) / f.stride - 0.5;
      const double fx = (b.x1 + (ox + 0.5) * bw) / f.stride - 0.5;
      fn(oy, ox, bilinear_tap(fy, fx, f.values.h, f.values.w));
    }
  }
  return true;
}

}  // namespace

// ---------------------------------------------------------------- config

std::vector<int> DetectorConfig::strides() const {
  std::vector<int> out;
  const int stages = static_cast<int>(backbone_widths.size());
  for (int l = 0; l < num_levels; ++l) out.push_back(1 << (stages - num_levels + l + 1));
  return out;
}

void DetectorConfig::validate() const {
  if (backbone_widths.empty()) throw ConfigError("backbone_widths must not be empty");
  for (int w : backbone_widths)
    if (w < 1) throw ConfigError("backbone widths must be positive");
  if (num_levels < 1 || num_levels > static_cast<int>(backbone_widths.size()))
    throw ConfigError("num_levels must be in [1, number of backbone stages]");
  if (static_cast<int>(anchors.size()) != num_levels) throw ConfigError("need one anchor list per level");
  for (const auto& lvl : anchors) {
    if (lvl.empty() || lvl.size() != anchors.front().size())
      throw ConfigError("every level needs the same non-zero number of anchors");
    for (const auto& a : lvl)
      if (!(a.scale > 0 && a.aspect > 0)) throw ConfigError("anchor scale/aspect must be positive");
  }
  if (image_size <= 0 || image_size % backbone_stride() != 0)
    throw ConfigError("image_size must be divisible by the largest stride " + std::to_string(backbone_stride()));
  if (neck_channels < 1 || num_classes < 1 || roi_output < 1 || head_hidden < 1 || backbone_extra_convs < 0)
    throw ConfigError("detector sizes must be positive");
  if (!(level_scale > 0)) throw ConfigError("level_scale must be positive");
  if (adapt_neck_to < 0 || adapt_backbone_to < 0) throw ConfigError("adaptation widths must be >= 0");
}

bool DetectorConfig::same_anchor_grid(const DetectorConfig& o) const {
  return image_size == o.image_size && strides() == o.strides() && anchors == o.anchors;
}

bool DetectorConfig::dominates(const DetectorConfig& o) const {
  if (backbone_widths.size() != o.backbone_widths.size()) return false;
  for (std::size_t i = 0; i < backbone_widths.size(); ++i)
    if (backbone_widths[i] < o.backbone_widths[i]) return false;
  return neck_channels >= o.neck_channels && head_hidden >= o.head_hidden &&
         backbone_extra_convs >= o.backbone_extra_convs;
}

void to_json(nlohmann::json& j, const DetectorConfig& c) {
  nlohmann::json anchors = nlohmann::json::array();
  for (const auto& lvl : c.anchors) {
    nlohmann::json l = nlohmann::json::array();
    for (const auto& a : lvl) l.push_back({a.scale, a.aspect});
    anchors.push_back(l);
  }
  j = nlohmann::json{{"image_size", c.image_size},
                     {"backbone_widths", c.backbone_widths},
                     {"backbone_extra_convs", c.backbone_extra_convs},
                     {"neck_channels", c.neck_channels},
                     {"num_levels", c.num_levels},
                     {"anchors", anchors},
                     {"num_classes", c.num_classes},
                     {"roi_output", c.roi_output},
                     {"head_hidden", c.head_hidden},
                     {"level_scale", c.level_scale},
                     {"adapt_neck_to", c.adapt_neck_to},
                     {"adapt_backbone_to", c.adapt_backbone_to}};
}

void from_json(const nlohmann::json& j, DetectorConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("backbone_widths").get_to(c.backbone_widths);
  j.at("backbone_extra_convs").get_to(c.backbone_extra_convs);
  j.at("neck_channels").get_to(c.neck_channels);
  j.at("num_levels").get_to(c.num_levels);
  c.anchors.clear();
  for (const auto& lvl : j.at("anchors")) {
    std::vector<AnchorSpec> l;
    for (const auto& a : lvl) l.push_back({a.at(0).get<double>(), a.at(1).get<double>()});
    c.anchors.push_back(std::move(l));
  }
  j.at("num_classes").get_to(c.num_classes);
  j.at("roi_output").get_to(c.roi_output);
  j.at("head_hidden").get_to(c.head_hidden);
  j.at("level_scale").get_to(c.level_scale);
  j.at("adapt_neck_to").get_to(c.adapt_neck_to);
  j.at("adapt_backbone_to").get_to(c.adapt_backbone_to);
}

std::vector<BBox> generate_anchors(const DetectorConfig& cfg) {
  std::vector<BBox> out;
  const auto strides = cfg.strides();
  for (int l = 0; l < cfg.num_levels; ++l) {
    const int s = strides[l];
    const int n = cfg.image_size / s;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        const double cx = (j + 0.5) * s, cy = (i + 0.5) * s;
        for (const auto& a : cfg.anchors[l]) {
          const double side = a.scale * s;
          const double w = side * std::sqrt(a.aspect), h = side / std::sqrt(a.aspect);
          out.push_back({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2});
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- detector

Detector::Detector(DetectorConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  int in = 3;
  const int stages = static_cast<int>(cfg_.backbone_widths.size());
  std::vector<int> stage_end;
  for (int s = 0; s < stages; ++s) {
    const int w = cfg_.backbone_widths[s];
    backbone_.push_back(add_conv("backbone.s" + std::to_string(s) + ".conv0", {3, 2, 1, in, w}));
    for (int e = 0; e < cfg_.backbone_extra_convs; ++e)
      backbone_.push_back(add_conv("backbone.s" + std::to_string(s) + ".conv" + std::to_string(e + 1), {3, 1, 1, w, w}));
    in = w;
  }
  for (int l = 0; l < cfg_.num_levels; ++l) {
    const int tap = stages - cfg_.num_levels + l;
    lateral_.push_back(
        add_conv("neck.lateral" + std::to_string(l), {1, 1, 0, cfg_.backbone_widths[tap], cfg_.neck_channels}));
  }
  for (int l = 0; l < cfg_.num_levels; ++l)
    output_.push_back(add_conv("neck.output" + std::to_string(l), {3, 1, 1, cfg_.neck_channels, cfg_.neck_channels}));
  const int a = cfg_.anchors_per_cell();
  rpn_conv_ = add_conv("rpn.conv", {3, 1, 1, cfg_.neck_channels, cfg_.neck_channels});
  rpn_obj_ = add_conv("rpn.obj", {1, 1, 0, cfg_.neck_channels, a});
  rpn_delta_ = add_conv("rpn.delta", {1, 1, 0, cfg_.neck_channels, 4 * a});
  fc1_ = add_fc("head.fc1", pooled_size(), cfg_.head_hidden);
  fc2_ = add_fc("head.fc2", cfg_.head_hidden, cfg_.head_hidden);
  cls_ = add_fc("head.cls", cfg_.head_hidden, cfg_.num_classes + 1);
  box_ = add_fc("head.box", cfg_.head_hidden, 4 * cfg_.num_classes);
  if (cfg_.adapt_neck_to > 0) {
    for (int l = 0; l < cfg_.num_levels; ++l) {
      params_.add("adapt.neck" + std::to_string(l) + ".weight", {cfg_.neck_channels, cfg_.adapt_neck_to});
      params_.add("adapt.neck" + std::to_string(l) + ".bias", {cfg_.adapt_neck_to});
    }
  }
  if (cfg_.adapt_backbone_to > 0) {
    params_.add("adapt.backbone.weight", {cfg_.backbone_widths.back(), cfg_.adapt_backbone_to});
    params_.add("adapt.backbone.bias", {cfg_.adapt_backbone_to});
  }
  anchors_ = generate_anchors(cfg_);
}

Detector::ConvLayer Detector::add_conv(const std::string& name, ConvShape shape) {
  const auto w = params_.add(name + ".weight", {shape.kernel, shape.kernel, shape.cin, shape.cout});
  const auto b = params_.add(name + ".bias", {shape.cout});
  return {w, b, shape};
}

Detector::FcLayer Detector::add_fc(const std::string& name, int in, int out) {
  const auto w = params_.add(name + ".weight", {in, out});
  const auto b = params_.add(name + ".bias", {out});
  return {w, b, in, out};
}

void Detector::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : params_) {
    std::fill(p.data.begin(), p.data.end(), 0.0);
    if (!ends_with(p.name, ".weight")) continue;
    const int out = p.shape.back();
    const std::size_t fan_in = p.data.size() / static_cast<std::size_t>(out);
    if (p.name.rfind("adapt.", 0) == 0) {
      for (int i = 0; i < std::min<int>(static_cast<int>(fan_in), out); ++i) p.data[static_cast<std::size_t>(i) * out + i] = 1.0;
      continue;
    }
    double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    if (p.name == "rpn.obj.weight" || p.name == "rpn.delta.weight" || p.name == "head.cls.weight") stddev = 0.01;
    if (p.name == "head.box.weight") stddev = 0.001;
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : p.data) v = dist(rng);
  }
}

Features Detector::forward_features(const Tensor& image, FeatureCache* cache) const {
  require(image.h == cfg_.image_size && image.w == cfg_.image_size && image.c == 3,
          "forward_features: image must be " + std::to_string(cfg_.image_size) + "x" +
              std::to_string(cfg_.image_size) + "x3");
  FeatureCache local;
  FeatureCache& fc = cache ? *cache : local;
  fc.backbone.assign(backbone_.size(), {});
  fc.backbone_acts.assign(backbone_.size(), {});
  fc.lateral.assign(lateral_.size(), {});
  fc.output.assign(output_.size(), {});

  const int per_stage = 1 + cfg_.backbone_extra_convs;
  const int stages = static_cast<int>(cfg_.backbone_widths.size());
  const Tensor* x = &image;
  for (std::size_t i = 0; i < backbone_.size(); ++i) {
    const auto& L = backbone_[i];
    Tensor y = conv_forward(*x, params_[L.w].span(), params_[L.b].span(), L.shape, &fc.backbone[i]);
    relu_inplace(y);
    fc.backbone_acts[i] = std::move(y);
    x = &fc.backbone_acts[i];
  }

  const int levels = cfg_.num_levels;
  const auto strides = cfg_.strides();
  std::vector<Tensor> merged(levels);
  for (int l = levels - 1; l >= 0; --l) {
    const int tap = (stages - levels + l + 1) * per_stage - 1;
    const auto& L = lateral_[l];
    merged[l] = conv_forward(fc.backbone_acts[tap], params_[L.w].span(), params_[L.b].span(), L.shape, &fc.lateral[l]);
    if (l + 1 < levels) merged[l] += upsample2_nearest(merged[l + 1]);
  }

  Features out;
  for (int l = 0; l < levels; ++l) {
    const auto& L = output_[l];
    out.neck.push_back({conv_forward(merged[l], params_[L.w].span(), params_[L.b].span(), L.shape, &fc.output[l]), l,
                        strides[l]});
  }
  out.backbone_final = {fc.backbone_acts.back(), levels - 1, cfg_.backbone_stride()};
  return out;
}

void Detector::backward_features(const FeatureCache& cache, const std::vector<Tensor>& d_neck,
                                 const Tensor& d_backbone_final, ParamStore& grads) const {
  const int levels = cfg_.num_levels;
  const int per_stage = 1 + cfg_.backbone_extra_convs;
  const int stages = static_cast<int>(cfg_.backbone_widths.size());

  std::vector<Tensor> d_merged(levels);
  for (int l = 0; l < levels; ++l) {
    if (l >= static_cast<int>(d_neck.size()) || d_neck[l].size() == 0) continue;
    const auto& L = output_[l];
    d_merged[l] = conv_backward(d_neck[l], params_[L.w].span(), L.shape, cache.output[l], grads[L.w].span(),
                                grads[L.b].span());
  }
  for (int l = 0; l + 1 < levels; ++l) {
    if (d_merged[l].size() == 0) continue;
    Tensor up = upsample2_nearest_backward(d_merged[l]);
    if (d_merged[l + 1].size() == 0) d_merged[l + 1] = std::move(up);
    else d_merged[l + 1] += up;
  }

  std::vector<Tensor> d_act(backbone_.size());
  for (int l = 0; l < levels; ++l) {
    if (d_merged[l].size() == 0) continue;
    const int tap = (stages - levels + l + 1) * per_stage - 1;
    const auto& L = lateral_[l];
    Tensor d = conv_backward(d_merged[l], params_[L.w].span(), L.shape, cache.lateral[l], grads[L.w].span(),
                             grads[L.b].span());
    if (d_act[tap].size() == 0) d_act[tap] = std::move(d);
    else d_act[tap] += d;
  }
  if (d_backbone_final.size() != 0) {
    if (d_act.back().size() == 0) d_act.back() = d_backbone_final;
    else d_act.back() += d_backbone_final;
  }

  for (int i = static_cast<int>(backbone_.size()) - 1; i >= 0; --i) {
    if (d_act[i].size() == 0) continue;
    relu_backward_inplace(d_act[i], cache.backbone_acts[i]);
    const auto& L = backbone_[i];
    Tensor dx = conv_backward(d_act[i], params_[L.w].span(), L.shape, cache.backbone[i], grads[L.w].span(),
                              grads[L.b].span(), i > 0);
    if (i == 0) break;
    if (d_act[i - 1].size() == 0) d_act[i - 1] = std::move(dx);
    else d_act[i - 1] += dx;
  }
}

RpnOutput Detector::rpn_forward(const std::vector<FeatureMap>& neck, RpnCache* cache) const {
  RpnCache local;
  RpnCache& rc = cache ? *cache : local;
  const std::size_t n = neck.size();
  rc.conv.assign(n, {});
  rc.obj.assign(n, {});
  rc.delta.assign(n, {});
  rc.hidden.assign(n, {});
  RpnOutput out;
  for (std::size_t l = 0; l < n; ++l) {
    Tensor h = conv_forward(neck[l].values, params_[rpn_conv_.w].span(), params_[rpn_conv_.b].span(), rpn_conv_.shape,
                            &rc.conv[l]);
    relu_inplace(h);
    out.objectness.push_back(
        conv_forward(h, params_[rpn_obj_.w].span(), params_[rpn_obj_.b].span(), rpn_obj_.shape, &rc.obj[l]));
    out.deltas.push_back(
        conv_forward(h, params_[rpn_delta_.w].span(), params_[rpn_delta_.b].span(), rpn_delta_.shape, &rc.delta[l]));
    rc.hidden[l] = std::move(h);
  }
  return out;
}

std::vector<Tensor> Detector::backward_rpn(const RpnCache& cache, const RpnOutput& d_out, ParamStore& grads) const {
  std::vector<Tensor> d_neck;
  for (std::size_t l = 0; l < cache.hidden.size(); ++l) {
    Tensor dh = conv_backward(d_out.objectness[l], params_[rpn_obj_.w].span(), rpn_obj_.shape, cache.obj[l],
                              grads[rpn_obj_.w].span(), grads[rpn_obj_.b].span());
    dh += conv_backward(d_out.deltas[l], params_[rpn_delta_.w].span(), rpn_delta_.shape, cache.delta[l],
                        grads[rpn_delta_.w].span(), grads[rpn_delta_.b].span());
    relu_backward_inplace(dh, cache.hidden[l]);
    d_neck.push_back(conv_backward(dh, params_[rpn_conv_.w].span(), rpn_conv_.shape, cache.conv[l],
                                   grads[rpn_conv_.w].span(), grads[rpn_conv_.b].span()));
  }
  return d_neck;
}

HeadOutput Detector::head_forward(const MatrixRM& pooled, HeadCache* cache) const {
  require(pooled.cols() == fc1_.in, "head_forward: pooled width " + std::to_string(pooled.cols()) + " != " +
                                        std::to_string(fc1_.in));
  auto dense = [&](const MatrixRM& x, const FcLayer& L) {
    ConstMap w(params_[L.w].data.data(), L.in, L.out);
    Eigen::Map<const Eigen::RowVectorXd> b(params_[L.b].data.data(), L.out);
    MatrixRM y = x * w;
    y.rowwise() += b;
    return y;
  };
  MatrixRM h1 = dense(pooled, fc1_).cwiseMax(0.0);
  MatrixRM h2 = dense(h1, fc2_).cwiseMax(0.0);
  HeadOutput out{dense(h2, cls_), dense(h2, box_)};
  if (cache) {
    cache->input = pooled;
    cache->hidden1 = std::move(h1);
    cache->hidden2 = std::move(h2);
  }
  return out;
}

MatrixRM Detector::backward_head(const HeadCache& cache, const MatrixRM& d_logits, const MatrixRM& d_deltas,
                                 ParamStore& grads) const {
  auto dense_back = [&](const MatrixRM& x, const MatrixRM& dy, const FcLayer& L) -> MatrixRM {
    Eigen::Map<MatrixRM> dw(grads[L.w].data.data(), L.in, L.out);
    Eigen::Map<Eigen::RowVectorXd> db(grads[L.b].data.data(), L.out);
    dw.noalias() += x.transpose() * dy;
    db += dy.colwise().sum();
    ConstMap w(params_[L.w].data.data(), L.in, L.out);
    return dy * w.transpose();
  };
  MatrixRM dh2 = dense_back(cache.hidden2, d_logits, cls_) + dense_back(cache.hidden2, d_deltas, box_);
  dh2 = dh2.cwiseProduct((cache.hidden2.array() > 0).cast<double>().matrix());
  MatrixRM dh1 = dense_back(cache.hidden1, dh2, fc2_);
  dh1 = dh1.cwiseProduct((cache.hidden1.array() > 0).cast<double>().matrix());
  return dense_back(cache.input, dh1, fc1_);
}

MatrixRM Detector::pool_proposals(const std::vector<FeatureMap>& neck, std::span<const Proposal> proposals,
                                  std::vector<int>& kept, std::vector<int>& levels) const {
  kept.clear();
  levels.clear();
  const auto strides = cfg_.strides();
  std::vector<Tensor> rows;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const int level = assign_level(proposals[i].box, strides, cfg_.level_scale);
    auto t = roi_align(neck[level], proposals[i].box, cfg_.roi_output, cfg_.image_size);
    if (!t) continue;
    kept.push_back(static_cast<int>(i));
    levels.push_back(level);
    rows.push_back(std::move(*t));
  }
  MatrixRM out(static_cast<Eigen::Index>(rows.size()), pooled_size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy(rows[r].data.begin(), rows[r].data.end(), out.data() + r * static_cast<std::size_t>(pooled_size()));
  return out;
}

void Detector::backward_pool(const std::vector<FeatureMap>& neck, std::span<const Proposal> proposals,
                             const std::vector<int>& kept, const std::vector<int>& levels, const MatrixRM& d_pooled,
                             std::vector<Tensor>& d_neck) const {
  if (d_neck.size() < neck.size()) d_neck.resize(neck.size());
  for (std::size_t l = 0; l < neck.size(); ++l)
    if (d_neck[l].size() == 0) d_neck[l] = zeros_like(neck[l].values);
  const int r = cfg_.roi_output;
  for (std::size_t k = 0; k < kept.size(); ++k) {
    Tensor d(r, r, cfg_.neck_channels);
    std::copy(d_pooled.row(static_cast<Eigen::Index>(k)).data(),
              d_pooled.row(static_cast<Eigen::Index>(k)).data() + pooled_size(), d.data.begin());
    roi_align_backward(neck[levels[k]], proposals[kept[k]].box, r, cfg_.image_size, d, d_neck[levels[k]]);
  }
}

std::vector<Detection> Detector::detect(const Tensor& image, int proposal_count, double score_threshold,
                                        double nms_iou, int max_detections) const {
  const Features f = forward_features(image);
  const RpnOutput rpn = rpn_forward(f.neck);
  const auto props = propose(rpn, anchors_, cfg_.image_size, proposal_count, 0.7);
  std::vector<int> kept, levels;
  const MatrixRM pooled = pool_proposals(f.neck, props, kept, levels);
  std::vector<Detection> all;
  if (kept.empty()) return all;
  const HeadOutput head = head_forward(pooled);
  const int C = cfg_.num_classes;
  for (int c = 1; c <= C; ++c) {
    std::vector<BBox> boxes;
    std::vector<double> scores;
    for (std::size_t k = 0; k < kept.size(); ++k) {
      const auto row = head.logits.row(static_cast<Eigen::Index>(k));
      const double mx = row.maxCoeff();
      const double denom = (row.array() - mx).exp().sum();
      const double p = std::exp(row(c) - mx) / denom;
      if (p < score_threshold) continue;
      double d[4];
      for (int q = 0; q < 4; ++q) d[q] = head.box_deltas(static_cast<Eigen::Index>(k), (c - 1) * 4 + q) * kHeadDeltaStd[q];
      const BBox b = clip_box(decode_box(props[kept[k]].box, d), cfg_.image_size, cfg_.image_size);
      if (!b.valid()) continue;
      boxes.push_back(b);
      scores.push_back(p);
    }
    for (int idx : nms(boxes, scores, nms_iou)) all.push_back({boxes[idx], c, scores[idx]});
  }
  std::stable_sort(all.begin(), all.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (static_cast<int>(all.size()) > max_detections) all.resize(max_detections);
  return all;
}

// ---------------------------------------------------------------- proposals

std::vector<int> nms(std::span<const BBox> boxes, std::span<const double> scores, double iou_threshold) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> keep;
  for (int i : order) {
    bool suppressed = false;
    for (int k : keep) {
      if (iou(boxes[i], boxes[k]) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) keep.push_back(i);
  }
  return keep;
}

std::vector<Proposal> propose(const RpnOutput& rpn, std::span<const BBox> anchors, int image_size, int k,
                              double nms_iou) {
  require(k >= 1, "propose: k must be >= 1");
  require(nms_iou > 0 && nms_iou < 1, "propose: nms_iou must be in (0, 1)");
  std::vector<double> scores;
  std::vector<BBox> boxes;
  scores.reserve(anchors.size());
  boxes.reserve(anchors.size());
  for (std::size_t l = 0; l < rpn.objectness.size(); ++l) {
    const auto& obj = rpn.objectness[l].data;
    const auto& del = rpn.deltas[l].data;
    for (std::size_t n = 0; n < obj.size(); ++n) {
      const std::size_t idx = boxes.size();
      require(idx < anchors.size(), "propose: more RPN outputs than anchors");
      scores.push_back(obj[n]);
      boxes.push_back(clip_box(decode_box(anchors[idx], &del[n * 4]), image_size, image_size));
    }
  }
  require(boxes.size() == anchors.size(), "propose: RPN output/anchor count mismatch");
  std::vector<Proposal> out;
  for (int idx : nms(boxes, scores, nms_iou)) {
    Proposal p;
    p.box = boxes[idx];
    p.score = scores[idx];
    p.objectness = sigmoid(scores[idx]);
    p.anchor_index = idx;
    out.push_back(p);
    if (static_cast<int>(out.size()) == k) break;
  }
  return out;
}

std::vector<Proposal> rpn_propose(const Detector& det, const std::vector<FeatureMap>& neck, int k, double nms_iou) {
  return propose(det.rpn_forward(neck), det.anchors(), det.config().image_size, k, nms_iou);
}

// ---------------------------------------------------------------- RoI align

std::optional<Tensor> roi_align(const FeatureMap& feature, const BBox& box, int out_size, int image_size) {
  require(out_size >= 1, "roi_align: out_size must be >= 1");
  const int ch = feature.values.c;
  Tensor out(out_size, out_size, ch);
  const auto& f = feature.values.data;
  const bool ok = for_each_sample(feature, box, out_size, image_size, [&](int oy, int ox, const BilinearTap& t) {
    if (!t.valid) return;
    auto dst = out.pixel(oy, ox);
    for (int q = 0; q < 4; ++q) {
      const double* src = f.data() + static_cast<std::size_t>(t.idx[q]) * ch;
      for (int c = 0; c < ch; ++c) dst[c] += t.weight[q] * src[c];
    }
  });
  if (!ok) return std::nullopt;
  return out;
}

void roi_align_backward(const FeatureMap& feature, const BBox& box, int out_size, int image_size, const Tensor& d_out,
                        Tensor& d_feature) {
  const int ch = feature.values.c;
  for_each_sample(feature, box, out_size, image_size, [&](int oy, int ox, const BilinearTap& t) {
    if (!t.valid) return;
    auto src = d_out.pixel(oy, ox);
    for (int q = 0; q < 4; ++q) {
      double* dst = d_feature.data.data() + static_cast<std::size_t>(t.idx[q]) * ch;
      for (int c = 0; c < ch; ++c) dst[c] += t.weight[q] * src[c];
    }
  });
}

// ---------------------------------------------------------------- losses

int label_proposals(std::vector<Proposal>& proposals, std::span<const Annotation> gt, double iou_pos) {
  require(iou_pos > 0 && iou_pos < 1, "label_proposals: iou_pos must be in (0, 1)");
  int positives = 0;
  for (auto& p : proposals) {
    double best = 0;
    int best_idx = -1;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(p.box, gt[g].box);
      if (v > best) best = v, best_idx = static_cast<int>(g);
    }
    p.b = (best_idx >= 0 && best >= iou_pos) ? 1 : 0;
    p.matched_gt = best_idx;
    p.assigned_class = p.b ? gt[best_idx].class_id : 0;
    positives += p.b;
  }
  return positives;
}

double smooth_l1(double x, double beta) {
  const double a = std::abs(x);
  return a < beta ? 0.5 * a * a / beta : a - 0.5 * beta;
}

double smooth_l1_grad(double x, double beta) {
  const double a = std::abs(x);
  if (a < beta) return x / beta;
  return x > 0 ? 1.0 : -1.0;
}

DetectionLosses detection_losses(const HeadOutput& head, std::span<const Proposal> proposals,
                                 std::span<const Annotation> gt, const RpnOutput& rpn, std::span<const BBox> anchors,
                                 const LossConfig& cfg) {
  DetectionLosses out;
  const Eigen::Index K = head.rows();
  require(static_cast<std::size_t>(K) == proposals.size(), "detection_losses: head rows != proposals");
  out.d_logits = MatrixRM::Zero(K, head.logits.cols());
  out.d_deltas = MatrixRM::Zero(K, head.box_deltas.cols());

  if (K > 0) {
    const double invK = 1.0 / static_cast<double>(K);
    for (Eigen::Index i = 0; i < K; ++i) {
      const auto row = head.logits.row(i);
      const double mx = row.maxCoeff();
      const Eigen::RowVectorXd e = (row.array() - mx).exp().matrix();
      const double z = e.sum();
      const int target = proposals[i].assigned_class;
      require(target >= 0 && target < head.logits.cols(), "detection_losses: class out of range");
      out.cls += (std::log(z) - (row(target) - mx)) * invK;
      out.d_logits.row(i) = e / z * invK;
      out.d_logits(i, target) -= invK;

      if (proposals[i].b == 1) {
        const auto& g = gt[proposals[i].matched_gt];
        const auto t = encode_box(proposals[i].box, g.box);
        const int c0 = (target - 1) * 4;
        for (int q = 0; q < 4; ++q) {
          const double diff = head.box_deltas(i, c0 + q) - t[q] / kHeadDeltaStd[q];
          out.reg += smooth_l1(diff, cfg.head_smooth_l1_beta) * invK;
          out.d_deltas(i, c0 + q) = smooth_l1_grad(diff, cfg.head_smooth_l1_beta) * invK;
        }
      }
    }
  }

  // RPN: anchors labelled by IoU with the ground truth, plus each box's best anchor.
  const std::size_t N = anchors.size();
  std::vector<int> label(N, -1), match(N, -1);
  std::vector<double> best_gt_iou(gt.size(), 0.0);
  std::vector<std::vector<double>> ious(gt.size(), std::vector<double>(N));
  for (std::size_t g = 0; g < gt.size(); ++g)
    for (std::size_t n = 0; n < N; ++n) {
      ious[g][n] = iou(anchors[n], gt[g].box);
      best_gt_iou[g] = std::max(best_gt_iou[g], ious[g][n]);
    }
  for (std::size_t n = 0; n < N; ++n) {
    double best = 0;
    for (std::size_t g = 0; g < gt.size(); ++g)
      if (ious[g][n] > best) best = ious[g][n], match[n] = static_cast<int>(g);
    if (best >= cfg.rpn_pos_iou) label[n] = 1;
    else if (best < cfg.rpn_neg_iou) label[n] = 0;
  }
  for (std::size_t g = 0; g < gt.size(); ++g) {
    if (best_gt_iou[g] < 0.1) continue;
    for (std::size_t n = 0; n < N; ++n)
      if (ious[g][n] == best_gt_iou[g]) label[n] = 1, match[n] = static_cast<int>(g);
  }
  const int P = static_cast<int>(std::count(label.begin(), label.end(), 1));
  const int Q = static_cast<int>(std::count(label.begin(), label.end(), 0));
  out.rpn_positives = P;

  for (std::size_t l = 0; l < rpn.objectness.size(); ++l) {
    out.d_rpn.objectness.push_back(zeros_like(rpn.objectness[l]));
    out.d_rpn.deltas.push_back(zeros_like(rpn.deltas[l]));
  }
  std::size_t n = 0;
  for (std::size_t l = 0; l < rpn.objectness.size(); ++l) {
    const auto& obj = rpn.objectness[l].data;
    const auto& del = rpn.deltas[l].data;
    auto& dobj = out.d_rpn.objectness[l].data;
    auto& ddel = out.d_rpn.deltas[l].data;
    for (std::size_t m = 0; m < obj.size(); ++m, ++n) {
      if (label[n] < 0) continue;
      const double s = obj[m];
      const double y = label[n];
      const double w = y == 1 ? 0.5 / P : 0.5 / Q;
      out.rpn += w * (softplus(s) - y * s);
      dobj[m] = w * (sigmoid(s) - y);
      if (label[n] == 1) {
        const auto t = encode_box(anchors[n], gt[match[n]].box);
        for (int q = 0; q < 4; ++q) {
          const double diff = del[m * 4 + q] - t[q];
          out.rpn += smooth_l1(diff, cfg.rpn_smooth_l1_beta) / P;
          ddel[m * 4 + q] = smooth_l1_grad(diff, cfg.rpn_smooth_l1_beta) / P;
        }
      }
    }
  }
  return out;
}

}  // namespace defeat
