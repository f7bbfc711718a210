#include "defeat/train_loop.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "defeat/checkpoint.hpp"
#include "defeat/errors.hpp"
#include "defeat/eval_analysis.hpp"

namespace defeat {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finaliser over a combined word
  std::uint64_t z = a * 0x9e3779b97f4a7c15ULL + b + 0x632be59bd9b4e019ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

AdaptLayer adapt_from(const ParamStore& p, const std::string& prefix, int in, int out) {
  return AdaptLayer{in, out, p.at(prefix + ".weight").data, p.at(prefix + ".bias").data};
}

void add_adapt_grads(ParamStore& grads, const std::string& prefix, const AdaptGrads& g) {
  auto& w = grads.at(prefix + ".weight").data;
  auto& b = grads.at(prefix + ".bias").data;
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += g.d_weight[i];
  for (std::size_t i = 0; i < b.size(); ++i) b[i] += g.d_bias[i];
}

BinaryMask invert(BinaryMask m) {
  for (auto& v : m.values) v = static_cast<std::uint8_t>(1 - v);
  return m;
}

void add_into(Tensor& dst, const Tensor& src) {
  if (src.size() == 0) return;
  if (dst.size() == 0) {
    dst = src;
    return;
  }
  dst += src;
}

struct FeatureTerm {
  double obj = 0, bg = 0;
};

// One imitation term on a single map. Returns the loss parts and writes
// d(loss)/d(student_adapted) into grad.
FeatureTerm feature_term(const Tensor& s, const Tensor& t, const BinaryMask& mask, bool decoupled,
                         const DistillConfig& cfg, double scale, Tensor& grad) {
  FeatureTerm out;
  grad = zeros_like(s);
  if (decoupled) {
    const auto parts = decoupled_feature_loss(s, t, mask, cfg.alpha_obj, cfg.alpha_bg, &grad);
    out.obj = parts.obj;
    out.bg = parts.bg;
  } else {
    // The uniform loss over I is split into its object and background cells
    // for logging only; the sum is the uniform loss.
    const BinaryMask bg = invert(mask);
    Tensor g_obj = zeros_like(s), g_bg = zeros_like(s);
    const bool use_obj = cfg.region != NeckRegion::background;
    const bool use_bg = cfg.region != NeckRegion::object;
    if (use_obj) out.obj = uniform_feature_loss(s, t, cfg.gamma, &mask, &g_obj);
    if (use_bg) out.bg = uniform_feature_loss(s, t, cfg.gamma, &bg, &g_bg);
    grad = g_obj;
    grad += g_bg;
  }
  out.obj *= scale;
  out.bg *= scale;
  for (auto& v : grad.data) v *= scale;
  return out;
}

// lambda/K * sum KL at temperature 1 over the same K rows.
ClsDistillParts all_cls_kl(const MatrixRM& zs, const MatrixRM& zt, std::span<const int> labels,
                           const DistillConfig& cfg, MatrixRM& grad) {
  ClsDistillParts out;
  const auto k = zs.rows();
  grad = MatrixRM::Zero(zs.rows(), zs.cols());
  if (k == 0) {
    out.empty = true;
    return out;
  }
  const Eigen::Index first = cfg.softmax_includes_bg ? 0 : 1;
  const Eigen::Index n = zs.cols() - first;
  const double coef = cfg.lambda / static_cast<double>(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const std::span<const double> rs(zs.row(i).data() + first, static_cast<std::size_t>(n));
    const std::span<const double> rt(zt.row(i).data() + first, static_cast<std::size_t>(n));
    const auto ps = softened_probs(rs, 1.0);
    const auto pt = softened_probs(rt, 1.0);
    const double kl = coef * kl_distill(ps, pt, 1.0);
    if (labels[static_cast<std::size_t>(i)]) out.pos += kl, ++out.k_obj;
    else out.neg += kl, ++out.k_bg;
    for (Eigen::Index c = 0; c < n; ++c) grad(i, first + c) = coef * (ps[static_cast<std::size_t>(c)] - pt[static_cast<std::size_t>(c)]);
  }
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs <= 0) throw ConfigError("epochs must be positive");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0, 1)");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (!(lr_decay_factor > 0)) throw ConfigError("lr_decay_factor must be positive");
  for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
    if (lr_decay_epochs[i] <= 0 || lr_decay_epochs[i] >= epochs)
      throw ConfigError("lr_decay_epochs must lie in (0, epochs)");
    if (i && lr_decay_epochs[i] <= lr_decay_epochs[i - 1])
      throw ConfigError("lr_decay_epochs must be strictly ascending");
  }
  if (warmup_iters < 0) throw ConfigError("warmup_iters must be >= 0");
  if (warmup_ratio <= 0 || warmup_ratio > 1) throw ConfigError("warmup_ratio must be in (0, 1]");
  if (step.train_proposals <= 0 || step.distill_proposals <= 0) throw ConfigError("proposal counts must be positive");
  if (step.rpn_nms_iou <= 0 || step.rpn_nms_iou > 1) throw ConfigError("rpn_nms_iou must be in (0, 1]");
  distill.validate();
}

double TrainConfig::lr_at(int epoch, long iter) const {
  double v = lr;
  for (int e : lr_decay_epochs)
    if (epoch >= e) v *= lr_decay_factor;
  if (iter < warmup_iters) {
    const double frac = static_cast<double>(iter) / static_cast<double>(warmup_iters);
    v *= warmup_ratio + (1.0 - warmup_ratio) * frac;
  }
  return v;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"momentum", c.momentum},
                     {"weight_decay", c.weight_decay},
                     {"lr_decay_epochs", c.lr_decay_epochs},
                     {"lr_decay_factor", c.lr_decay_factor},
                     {"warmup_iters", c.warmup_iters},
                     {"warmup_ratio", c.warmup_ratio},
                     {"seed", c.seed},
                     {"distill", c.distill},
                     {"teacher_checkpoint", c.teacher_checkpoint},
                     {"train_proposals", c.step.train_proposals},
                     {"distill_proposals", c.step.distill_proposals},
                     {"rpn_nms_iou", c.step.rpn_nms_iou},
                     {"add_gt_proposals", c.step.add_gt_proposals},
                     {"proposal_source", c.step.proposal_source == ProposalSource::teacher ? "teacher" : "student"},
                     {"iou_pos", c.step.loss.iou_pos},
                     {"rpn_pos_iou", c.step.loss.rpn_pos_iou},
                     {"rpn_neg_iou", c.step.loss.rpn_neg_iou}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.momentum = j.value("momentum", d.momentum);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.lr_decay_epochs = j.value("lr_decay_epochs", d.lr_decay_epochs);
  c.lr_decay_factor = j.value("lr_decay_factor", d.lr_decay_factor);
  c.warmup_iters = j.value("warmup_iters", d.warmup_iters);
  c.warmup_ratio = j.value("warmup_ratio", d.warmup_ratio);
  c.seed = j.value("seed", d.seed);
  c.distill = j.contains("distill") ? j.at("distill").get<DistillConfig>() : d.distill;
  c.teacher_checkpoint = j.value("teacher_checkpoint", d.teacher_checkpoint);
  c.step.train_proposals = j.value("train_proposals", d.step.train_proposals);
  c.step.distill_proposals = j.value("distill_proposals", d.step.distill_proposals);
  c.step.rpn_nms_iou = j.value("rpn_nms_iou", d.step.rpn_nms_iou);
  c.step.add_gt_proposals = j.value("add_gt_proposals", d.step.add_gt_proposals);
  const auto src = j.value("proposal_source", std::string("teacher"));
  if (src != "teacher" && src != "student") throw ConfigError("unknown proposal_source '" + src + "'");
  c.step.proposal_source = src == "teacher" ? ProposalSource::teacher : ProposalSource::student;
  c.step.loss.iou_pos = j.value("iou_pos", d.step.loss.iou_pos);
  c.step.loss.rpn_pos_iou = j.value("rpn_pos_iou", d.step.loss.rpn_pos_iou);
  c.step.loss.rpn_neg_iou = j.value("rpn_neg_iou", d.step.loss.rpn_neg_iou);
}

const std::vector<std::string>& TrainLog::columns() {
  static const std::vector<std::string> cols{"iter",     "L_cls_gt",  "L_reg",     "L_rpn", "L_fea_obj", "L_fea_bg",
                                             "L_cls_pos", "L_cls_neg", "lr",        "K_obj", "K_bg"};
  return cols;
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  const auto& cols = columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& r : records) {
    out << r.iter;
    for (double v : {r.cls_gt, r.reg, r.rpn, r.fea_obj, r.fea_bg, r.cls_pos, r.cls_neg, r.lr, r.k_obj, r.k_bg})
      out << ',' << format_number(v);
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

TeacherOutputs teacher_outputs(const Detector& teacher, const DetectionSample& sample, const StepSettings& step) {
  TeacherOutputs out;
  auto f = teacher.forward_features(sample.image);
  out.neck = std::move(f.neck);
  out.backbone_final = std::move(f.backbone_final);
  out.proposals = rpn_propose(teacher, out.neck, step.distill_proposals, step.rpn_nms_iou);
  for (auto& p : out.proposals) p.source = ProposalSource::teacher;
  std::vector<int> levels;
  const MatrixRM pooled = teacher.pool_proposals(out.neck, out.proposals, out.kept, levels);
  out.logits = teacher.head_forward(pooled).logits;
  return out;
}

std::vector<BinaryMask> distill_masks(const DetectorConfig& cfg, const DistillConfig& distill,
                                      std::span<const Annotation> gt, std::uint64_t seed) {
  const auto strides = cfg.strides();
  std::vector<BBox> boxes;
  for (const auto& a : gt) boxes.push_back(a.box);
  const auto per_level = assign_boxes_to_levels(boxes, strides, cfg.level_scale);
  std::vector<BinaryMask> masks;
  for (std::size_t l = 0; l < strides.size(); ++l) {
    const int s = strides[l];
    const int hw = cfg.image_size / s;
    const int level = static_cast<int>(l);
    auto gt_mask = make_gt_mask(per_level[l], hw, hw, s, level);
    switch (distill.mask) {
      case MaskKind::gt:
        masks.push_back(std::move(gt_mask));
        break;
      case MaskKind::random: {
        // Same object-cell budget as the ground-truth mask, random placement.
        const double frac = static_cast<double>(gt_mask.ones()) / static_cast<double>(gt_mask.values.size());
        masks.push_back(make_random_mask(hw, hw, frac, mix(seed, l), s, level));
        break;
      }
      case MaskKind::all_one:
        masks.push_back(make_full_mask(hw, hw, 1, s, level));
        break;
    }
  }
  return masks;
}

SampleLosses accumulate_sample_gradients(const Detector& student, const DetectionSample& sample,
                                         const Detector* teacher, const TeacherOutputs* teacher_out,
                                         const TrainConfig& cfg, ParamStore& grads, std::uint64_t mask_seed,
                                         std::vector<Tensor>* neck_grads_out,
                                         const std::vector<Proposal>* fixed_proposals) {
  const auto& scfg = student.config();
  const auto& step = cfg.step;
  const auto& dc = cfg.distill;
  const std::span<const Annotation> gt(sample.annotations);
  SampleLosses out;

  FeatureCache fcache;
  const Features feats = student.forward_features(sample.image, &fcache);
  RpnCache rcache;
  const RpnOutput rpn = student.rpn_forward(feats.neck, &rcache);

  // Student's own proposals and detection losses.
  auto own = fixed_proposals ? *fixed_proposals
                             : propose(rpn, student.anchors(), scfg.image_size, step.train_proposals, step.rpn_nms_iou);
  if (step.add_gt_proposals)
    for (const auto& a : gt) {
      Proposal p;
      p.box = a.box;
      p.objectness = 1.0;
      own.push_back(p);
    }
  std::vector<int> kept, levels;
  const MatrixRM pooled = student.pool_proposals(feats.neck, own, kept, levels);
  std::vector<Proposal> rows;
  for (int k : kept) rows.push_back(own[static_cast<std::size_t>(k)]);
  label_proposals(rows, gt, step.loss.iou_pos);
  HeadCache hcache;
  const HeadOutput head = student.head_forward(pooled, &hcache);
  const DetectionLosses det = detection_losses(head, rows, gt, rpn, student.anchors(), step.loss);
  out.cls_gt = det.cls;
  out.reg = det.reg;
  out.rpn = det.rpn;

  std::vector<Tensor> d_neck = student.backward_rpn(rcache, det.d_rpn, grads);
  if (!kept.empty()) {
    const MatrixRM d_pooled = student.backward_head(hcache, det.d_logits, det.d_deltas, grads);
    student.backward_pool(feats.neck, own, kept, levels, d_pooled, d_neck);
  }
  Tensor d_backbone;

  if (teacher && dc.any()) {
    TeacherOutputs local;
    if (!teacher_out) {
      local = teacher_outputs(*teacher, sample, step);
      teacher_out = &local;
    }
    const auto masks = distill_masks(scfg, dc, gt, mask_seed);

    if (dc.neck != NeckMode::none) {
      const double scale = 1.0 / static_cast<double>(scfg.num_levels);
      for (int l = 0; l < scfg.num_levels; ++l) {
        const auto li = static_cast<std::size_t>(l);
        const std::string prefix = "adapt.neck" + std::to_string(l);
        const bool has_adapt = scfg.adapt_neck_to > 0;
        AdaptLayer layer;
        FeatureMap s_adapted;
        if (has_adapt) {
          layer = adapt_from(student.params(), prefix, scfg.neck_channels, scfg.adapt_neck_to);
          s_adapted = adapt(layer, feats.neck[li]);
        } else {
          s_adapted = feats.neck[li];
        }
        Tensor g;
        const auto term = feature_term(s_adapted.values, teacher_out->neck[li].values, masks[li],
                                       dc.neck == NeckMode::decoupled, dc, scale, g);
        out.fea_obj += term.obj;
        out.fea_bg += term.bg;
        if (has_adapt) {
          const auto ag = adapt_backward(layer, feats.neck[li], g);
          add_adapt_grads(grads, prefix, ag);
          add_into(d_neck[li], ag.d_input);
        } else {
          add_into(d_neck[li], g);
        }
      }
    }

    if (dc.backbone) {
      const int stride = scfg.backbone_stride();
      const int hw = scfg.image_size / stride;
      std::vector<BBox> boxes;
      for (const auto& a : gt) boxes.push_back(a.box);
      const BinaryMask mask = dc.mask == MaskKind::all_one
                                  ? make_full_mask(hw, hw, 1, stride)
                                  : make_gt_mask(boxes, hw, hw, stride);
      const bool has_adapt = scfg.adapt_backbone_to > 0;
      AdaptLayer layer;
      FeatureMap s_adapted;
      if (has_adapt) {
        layer = adapt_from(student.params(), "adapt.backbone", scfg.backbone_widths.back(), scfg.adapt_backbone_to);
        s_adapted = adapt(layer, feats.backbone_final);
      } else {
        s_adapted = feats.backbone_final;
      }
      Tensor g;
      const auto term = feature_term(s_adapted.values, teacher_out->backbone_final.values, mask,
                                     dc.backbone_decoupled, dc, 1.0, g);
      out.fea_obj += term.obj;
      out.fea_bg += term.bg;
      if (has_adapt) {
        const auto ag = adapt_backward(layer, feats.backbone_final, g);
        add_adapt_grads(grads, "adapt.backbone", ag);
        d_backbone = ag.d_input;
      } else {
        d_backbone = g;
      }
    }

    if (dc.cls != ClsMode::none) {
      // Shared proposals go through both heads.
      std::vector<Proposal> shared;
      MatrixRM t_logits;
      if (step.proposal_source == ProposalSource::teacher) {
        for (int k : teacher_out->kept) shared.push_back(teacher_out->proposals[static_cast<std::size_t>(k)]);
        t_logits = teacher_out->logits;
      } else {
        auto cand = propose(rpn, student.anchors(), scfg.image_size, step.distill_proposals, step.rpn_nms_iou);
        std::vector<int> t_kept, t_levels;
        const MatrixRM t_pooled = teacher->pool_proposals(teacher_out->neck, cand, t_kept, t_levels);
        for (int k : t_kept) shared.push_back(cand[static_cast<std::size_t>(k)]);
        t_logits = teacher->head_forward(t_pooled).logits;
      }
      std::vector<int> s_kept, s_levels;
      const MatrixRM s_pooled = student.pool_proposals(feats.neck, shared, s_kept, s_levels);
      require(s_kept.size() == shared.size(), "shared proposals pooled differently by teacher and student");
      if (!shared.empty()) {
        label_proposals(shared, gt, step.loss.iou_pos);
        std::vector<int> b;
        for (const auto& p : shared) b.push_back(p.b);
        HeadCache scache;
        const HeadOutput s_head = student.head_forward(s_pooled, &scache);
        MatrixRM d_logits;
        ClsDistillParts parts;
        if (dc.cls == ClsMode::decoupled) parts = decoupled_cls_loss(s_head.logits, t_logits, b, dc, &d_logits);
        else parts = all_cls_kl(s_head.logits, t_logits, b, dc, d_logits);
        out.cls_pos = parts.pos;
        out.cls_neg = parts.neg;
        out.k_obj = parts.k_obj;
        out.k_bg = parts.k_bg;
        const MatrixRM d_deltas = MatrixRM::Zero(s_head.box_deltas.rows(), s_head.box_deltas.cols());
        const MatrixRM d_pooled = student.backward_head(scache, d_logits, d_deltas, grads);
        student.backward_pool(feats.neck, shared, s_kept, s_levels, d_pooled, d_neck);
      }
    }
  }

  student.backward_features(fcache, d_neck, d_backbone, grads);
  if (neck_grads_out) *neck_grads_out = std::move(d_neck);
  return out;
}

std::vector<Tensor> detection_neck_gradients(const Detector& student, const DetectionSample& sample,
                                             const StepSettings& step,
                                             const std::vector<Proposal>* fixed_proposals) {
  TrainConfig cfg;
  cfg.step = step;
  ParamStore scratch = student.params().zeros_like();
  std::vector<Tensor> d_neck;
  accumulate_sample_gradients(student, sample, nullptr, nullptr, cfg, scratch, 0, &d_neck, fixed_proposals);
  return d_neck;
}

DetectorConfig configure_student(DetectorConfig student, const DetectorConfig& teacher, const DistillConfig& distill) {
  student.adapt_neck_to = distill.neck != NeckMode::none ? teacher.neck_channels : 0;
  student.adapt_backbone_to = distill.backbone ? teacher.backbone_widths.back() : 0;
  return student;
}

TrainResult train_detector(const DetectorConfig& cfg, const TrainConfig& tc, std::span<const DetectionSample> train,
                           const Detector* teacher, const ProgressFn& progress) {
  tc.validate();
  cfg.validate();
  if (train.empty()) throw ConfigError("training set is empty");
  for (const auto& s : train)
    if (s.image.h != cfg.image_size || s.image.w != cfg.image_size)
      throw ConfigError("sample " + std::to_string(s.sample_id) + " does not match image_size " +
                        std::to_string(cfg.image_size));
  const bool distilling = teacher && tc.distill.any();

  Detector model(cfg);
  model.init(tc.seed);
  ParamStore grads = model.params().zeros_like();
  ParamStore velocity = model.params().zeros_like();

  std::vector<TeacherOutputs> cache;
  if (distilling) {
    cache.reserve(train.size());
    for (const auto& s : train) cache.push_back(teacher_outputs(*teacher, s, tc.step));
  }

  TrainResult result{model, {}};
  std::vector<std::size_t> order(train.size());
  long iter = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(mix(tc.seed, 0xE90C0000ULL + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size));
      grads.zero();
      TrainRecord rec;
      rec.iter = iter;
      rec.lr = tc.lr_at(epoch, iter);
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        const auto seed = mix(tc.seed, (static_cast<std::uint64_t>(iter) << 20) ^ static_cast<std::uint64_t>(idx));
        const auto l = accumulate_sample_gradients(result.model, train[idx], distilling ? teacher : nullptr,
                                                   distilling ? &cache[idx] : nullptr, tc, grads, seed);
        if (!std::isfinite(l.total()))
          throw DivergenceError("non-finite loss at iteration " + std::to_string(iter) + " (sample " +
                                std::to_string(train[idx].sample_id) + ")");
        rec.cls_gt += l.cls_gt, rec.reg += l.reg, rec.rpn += l.rpn;
        rec.fea_obj += l.fea_obj, rec.fea_bg += l.fea_bg;
        rec.cls_pos += l.cls_pos, rec.cls_neg += l.cls_neg;
        rec.k_obj += l.k_obj, rec.k_bg += l.k_bg;
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (double* v : {&rec.cls_gt, &rec.reg, &rec.rpn, &rec.fea_obj, &rec.fea_bg, &rec.cls_pos, &rec.cls_neg,
                        &rec.k_obj, &rec.k_bg})
        *v *= inv;

      auto& params = result.model.params();
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto& w = params[p].data;
        const auto& g = grads[p].data;
        auto& v = velocity[p].data;
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double gi = g[i] * inv + tc.weight_decay * w[i];
          v[i] = tc.momentum * v[i] + gi;
          w[i] -= rec.lr * v[i];
        }
        for (double x : w)
          if (!std::isfinite(x))
            throw DivergenceError("non-finite parameter '" + params[p].name + "' after iteration " +
                                  std::to_string(iter));
      }
      result.log.records.push_back(rec);
      if (progress) progress(epoch, iter, rec);
      ++iter;
    }
  }
  round_params_to_float(result.model.params());
  return result;
}

TrainResult train_teacher(const DetectorConfig& cfg, const TrainConfig& tc, std::span<const DetectionSample> train,
                          const ProgressFn& progress) {
  if (tc.distill.any()) throw ConfigError("teacher training cannot use distillation");
  return train_detector(cfg, tc, train, nullptr, progress);
}

TrainResult distill_student(const DetectorConfig& student_cfg, const TrainConfig& tc,
                            std::span<const DetectionSample> train, const Detector& teacher,
                            const ProgressFn& progress) {
  const auto& t = teacher.config();
  if (!student_cfg.same_anchor_grid(t))
    throw TeacherStudentMismatch("teacher and student differ in image size, strides or anchors");
  if (std::abs(student_cfg.level_scale - t.level_scale) > 1e-12)
    throw TeacherStudentMismatch("teacher and student use different level assignment scales");
  if (student_cfg.num_classes != t.num_classes)
    throw TeacherStudentMismatch("teacher and student differ in class count");
  if (!t.dominates(student_cfg)) throw TeacherStudentMismatch("teacher is narrower than the student");
  if (tc.distill.backbone && t.backbone_stride() != student_cfg.backbone_stride())
    throw TeacherStudentMismatch("backbone distillation needs equal backbone strides");
  const auto cfg = configure_student(student_cfg, t, tc.distill);
  return train_detector(cfg, tc, train, &teacher, progress);
}

DetectorConfig teacher_preset(int image_size) {
  DetectorConfig c;
  c.image_size = image_size;
  c.backbone_widths = {16, 32, 48, 64};
  c.backbone_extra_convs = 1;
  c.neck_channels = 16;
  c.head_hidden = 128;
  return c;
}

DetectorConfig student_preset(int image_size) {
  DetectorConfig c;
  c.image_size = image_size;
  c.backbone_widths = {8, 12, 16, 24};
  c.backbone_extra_convs = 0;
  c.neck_channels = 16;
  c.head_hidden = 64;
  return c;
}

void set_distill_param(DistillConfig& cfg, const std::string& name, double value) {
  if (name == "gamma") cfg.gamma = value;
  else if (name == "lambda") cfg.lambda = value;
  else if (name == "alpha_obj") cfg.alpha_obj = value;
  else if (name == "alpha_bg") cfg.alpha_bg = value;
  else if (name == "beta_obj") cfg.beta_obj = value;
  else if (name == "beta_bg") cfg.beta_bg = value;
  else if (name == "t_obj") cfg.t_obj = value;
  else if (name == "t_bg") cfg.t_bg = value;
  else throw ConfigError("unknown distillation parameter '" + name + "'");
}

std::vector<SweepRow> sweep_coefficient(const DetectorConfig& student_cfg, const TrainConfig& base,
                                        const std::string& parameter, std::span<const double> values,
                                        std::span<const std::uint64_t> seeds, std::span<const DetectionSample> train,
                                        std::span<const DetectionSample> val, const Detector& teacher) {
  std::vector<SweepRow> rows;
  const auto classes = class_table(student_cfg.num_classes);
  for (double v : values)
    for (auto seed : seeds) {
      TrainConfig tc = base;
      set_distill_param(tc.distill, parameter, v);
      tc.seed = seed;
      const auto run = distill_student(student_cfg, tc, train, teacher);
      const auto dets = run_detector(run.model, val);
      std::vector<ImageGroundTruth> gts;
      for (const auto& s : val) gts.push_back(s.annotations);
      const double half[] = {0.5};
      rows.push_back({v, seed, compute_map(dets, gts, half, student_cfg.num_classes).map});
    }
  return rows;
}

void write_sweep_csv(const std::filesystem::path& path, const std::string& parameter, std::span<const SweepRow> rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << parameter << ",seed,map50\n";
  std::vector<double> values;
  for (const auto& r : rows) {
    out << format_number(r.value) << ',' << r.seed << ',' << format_number(r.map50) << '\n';
    if (std::find(values.begin(), values.end(), r.value) == values.end()) values.push_back(r.value);
  }
  for (double v : values) {
    double sum = 0;
    int n = 0;
    for (const auto& r : rows)
      if (r.value == v) sum += r.map50, ++n;
    out << format_number(v) << ",mean," << format_number(sum / n) << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace defeat
