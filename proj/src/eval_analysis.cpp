#include "defeat/eval_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <thread>

#include "defeat/errors.hpp"

namespace defeat {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct RankedDet {
  double score;
  std::size_t image;
  std::size_t index;
  const BBox* box;
};

// All-points interpolated area under the precision/recall curve.
double average_precision(const std::vector<int>& tp, long num_gt) {
  const std::size_t n = tp.size();
  std::vector<double> recall(n), precision(n);
  long cum_tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cum_tp += tp[i];
    recall[i] = static_cast<double>(cum_tp) / static_cast<double>(num_gt);
    precision[i] = static_cast<double>(cum_tp) / static_cast<double>(i + 1);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

}  // namespace

double MapResult::map_at(double threshold) const {
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    if (std::abs(thresholds[t] - threshold) > 1e-9) continue;
    double sum = 0;
    int n = 0;
    for (const auto& row : ap)
      if (!std::isnan(row[t])) sum += row[t], ++n;
    return n ? sum / n : 0.0;
  }
  throw ContractViolation("threshold not evaluated: " + std::to_string(threshold));
}

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

MapResult compute_map(const std::vector<ImageDetections>& detections, const std::vector<ImageGroundTruth>& gts,
                      std::span<const double> iou_thresholds, int num_classes) {
  require(detections.size() == gts.size(), "compute_map: detections and ground truth differ in image count");
  for (double t : iou_thresholds) require(t > 0 && t < 1, "compute_map: IoU threshold outside (0, 1)");
  MapResult res;
  res.thresholds.assign(iou_thresholds.begin(), iou_thresholds.end());
  res.ap.assign(static_cast<std::size_t>(num_classes), std::vector<double>(res.thresholds.size(), kNaN));

  for (int c = 1; c <= num_classes; ++c) {
    long num_gt = 0;
    std::vector<std::vector<const BBox*>> class_gt(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i)
      for (const auto& g : gts[i])
        if (g.class_id == c) class_gt[i].push_back(&g.box), ++num_gt;
    std::vector<RankedDet> ranked;
    for (std::size_t i = 0; i < detections.size(); ++i)
      for (std::size_t k = 0; k < detections[i].size(); ++k)
        if (detections[i][k].class_id == c) ranked.push_back({detections[i][k].score, i, k, &detections[i][k].box});
    std::stable_sort(ranked.begin(), ranked.end(), [](const RankedDet& a, const RankedDet& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.image != b.image) return a.image < b.image;
      return a.index < b.index;
    });
    if (num_gt == 0) continue;

    for (std::size_t t = 0; t < res.thresholds.size(); ++t) {
      const double thr = res.thresholds[t];
      std::vector<std::vector<char>> used(gts.size());
      for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(class_gt[i].size(), 0);
      std::vector<int> tp(ranked.size(), 0);
      for (std::size_t r = 0; r < ranked.size(); ++r) {
        const auto& cand = class_gt[ranked[r].image];
        int best = -1;
        double best_iou = thr;
        for (std::size_t g = 0; g < cand.size(); ++g) {
          if (used[ranked[r].image][g]) continue;
          const double v = iou(*ranked[r].box, *cand[g]);
          if (v >= best_iou && (best < 0 || v > best_iou)) best = static_cast<int>(g), best_iou = v;
        }
        if (best >= 0) {
          used[ranked[r].image][static_cast<std::size_t>(best)] = 1;
          tp[r] = 1;
        }
      }
      res.ap[static_cast<std::size_t>(c - 1)][t] = average_precision(tp, num_gt);
    }
  }

  double sum = 0;
  long n = 0;
  for (const auto& row : res.ap)
    for (double v : row)
      if (!std::isnan(v)) sum += v, ++n;
  res.map = n ? sum / static_cast<double>(n) : 0.0;
  return res;
}

long ErrorBreakdown::total(ErrorKind kind) const {
  long s = 0;
  for (const auto& row : counts) s += row[kind];
  return s;
}

long ErrorBreakdown::detections() const {
  return total(kCor) + total(kLoc) + total(kSim) + total(kOth) + total(kBG);
}

ErrorBreakdown categorize_errors(const std::vector<ImageDetections>& detections,
                                 const std::vector<ImageGroundTruth>& gts, const std::vector<ClassInfo>& classes,
                                 double min_score) {
  require(detections.size() == gts.size(), "categorize_errors: detections and ground truth differ in image count");
  std::map<int, int> super;
  for (const auto& c : classes) super[c.id] = c.supercategory_id;
  const int num_classes = classes.empty() ? 0 : std::max_element(classes.begin(), classes.end(), [](auto& a, auto& b) {
                                                  return a.id < b.id;
                                                })->id;
  auto check = [&](int id, const char* what) {
    if (!super.count(id)) throw DataError(std::string("unknown class_id ") + std::to_string(id) + " in " + what);
  };

  ErrorBreakdown out;
  out.counts.assign(static_cast<std::size_t>(num_classes), {});
  for (std::size_t i = 0; i < gts.size(); ++i) {
    const auto& gt = gts[i];
    for (const auto& g : gt) check(g.class_id, "ground truth");
    std::vector<std::size_t> order;
    for (std::size_t k = 0; k < detections[i].size(); ++k) {
      check(detections[i][k].class_id, "detections");
      if (detections[i][k].score >= min_score) order.push_back(k);
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return detections[i][a].score > detections[i][b].score; });

    std::vector<char> matched(gt.size(), 0);
    for (std::size_t k : order) {
      const auto& d = detections[i][k];
      double best_same = 0, best_same_free = 0, best_super = 0, best_any = 0;
      int free_idx = -1;
      for (std::size_t g = 0; g < gt.size(); ++g) {
        const double v = iou(d.box, gt[g].box);
        best_any = std::max(best_any, v);
        if (gt[g].class_id == d.class_id) {
          best_same = std::max(best_same, v);
          if (!matched[g] && v > best_same_free) best_same_free = v, free_idx = static_cast<int>(g);
        } else if (super[gt[g].class_id] == super[d.class_id]) {
          best_super = std::max(best_super, v);
        }
      }
      ErrorKind kind;
      if (free_idx >= 0 && best_same_free >= 0.5) {
        kind = kCor;
        matched[static_cast<std::size_t>(free_idx)] = 1;
      } else if (best_same >= 0.1) {
        kind = kLoc;
      } else if (best_super >= 0.1) {
        kind = kSim;
      } else if (best_any >= 0.1) {
        kind = kOth;
      } else {
        kind = kBG;
      }
      ++out.counts[static_cast<std::size_t>(d.class_id - 1)][kind];
    }
    for (std::size_t g = 0; g < gt.size(); ++g)
      if (!matched[g]) ++out.counts[static_cast<std::size_t>(gt[g].class_id - 1)][kFN];
  }
  return out;
}

ChannelDistance per_channel_distance(const Tensor& teacher, const Tensor& student_adapted, const BinaryMask& mask) {
  require(teacher.same_shape(student_adapted), "per_channel_distance: shape mismatch");
  require(mask.h == teacher.h && mask.w == teacher.w, "per_channel_distance: mask does not match feature map");
  const int c = teacher.c;
  ChannelDistance d;
  d.d_obj.assign(static_cast<std::size_t>(c), 0.0);
  d.d_bg.assign(static_cast<std::size_t>(c), 0.0);
  long n_obj = 0, n_bg = 0;
  for (int y = 0; y < teacher.h; ++y)
    for (int x = 0; x < teacher.w; ++x) {
      auto& acc = mask.at(y, x) ? d.d_obj : d.d_bg;
      (mask.at(y, x) ? n_obj : n_bg) += 1;
      for (int ch = 0; ch < c; ++ch)
        acc[static_cast<std::size_t>(ch)] += std::abs(student_adapted.at(y, x, ch) - teacher.at(y, x, ch));
    }
  d.has_obj = n_obj > 0;
  d.has_bg = n_bg > 0;
  for (int ch = 0; ch < c; ++ch) {
    if (n_obj) d.d_obj[static_cast<std::size_t>(ch)] /= static_cast<double>(n_obj);
    if (n_bg) d.d_bg[static_cast<std::size_t>(ch)] /= static_cast<double>(n_bg);
  }
  return d;
}

void ChannelDistanceAverager::add(const ChannelDistance& d) {
  auto accumulate = [](std::vector<double>& sum, const std::vector<double>& v) {
    if (sum.empty()) sum.assign(v.size(), 0.0);
    require(sum.size() == v.size(), "ChannelDistanceAverager: channel count changed");
    for (std::size_t i = 0; i < v.size(); ++i) sum[i] += v[i];
  };
  if (d.has_obj) accumulate(sum_obj_, d.d_obj), ++n_obj_;
  if (d.has_bg) accumulate(sum_bg_, d.d_bg), ++n_bg_;
}

ChannelDistance ChannelDistanceAverager::result() const {
  ChannelDistance r;
  r.has_obj = n_obj_ > 0;
  r.has_bg = n_bg_ > 0;
  r.d_obj = sum_obj_;
  r.d_bg = sum_bg_;
  for (auto& v : r.d_obj) v /= static_cast<double>(n_obj_);
  for (auto& v : r.d_bg) v /= static_cast<double>(n_bg_);
  return r;
}

GradNormResult gradient_norm_stats(const std::vector<Tensor>& d_neck, const std::vector<BinaryMask>& masks) {
  require(d_neck.size() == masks.size(), "gradient_norm_stats: one mask per level required");
  GradNormResult r;
  double sum_obj = 0, sum_bg = 0;
  for (std::size_t l = 0; l < d_neck.size(); ++l) {
    const auto& g = d_neck[l];
    require(masks[l].h == g.h && masks[l].w == g.w, "gradient_norm_stats: mask does not match gradient map");
    Tensor norm(g.h, g.w, 1);
    for (int y = 0; y < g.h; ++y)
      for (int x = 0; x < g.w; ++x) {
        double s = 0;
        for (double v : g.pixel(y, x)) s += v * v;
        const double n = std::sqrt(s);
        norm.at(y, x, 0) = n;
        if (masks[l].at(y, x)) sum_obj += n, ++r.cells_obj;
        else sum_bg += n, ++r.cells_bg;
      }
    r.norm_maps.push_back(std::move(norm));
  }
  r.avg_obj = r.cells_obj ? sum_obj / static_cast<double>(r.cells_obj) : 0.0;
  r.avg_bg = r.cells_bg ? sum_bg / static_cast<double>(r.cells_bg) : 0.0;
  return r;
}

GradNormResult feature_gradient_norms(const Detector& student, const DetectionSample& sample, const StepSettings& step) {
  const auto grads = detection_neck_gradients(student, sample, step);
  DistillConfig gt_masks;
  const auto masks = distill_masks(student.config(), gt_masks, sample.annotations, 0);
  return gradient_norm_stats(grads, masks);
}

void accumulate_neck_distance(const Detector& teacher, const Detector& student, const DetectionSample& sample,
                              ChannelDistanceAverager& acc) {
  const auto t = teacher.forward_features(sample.image);
  const auto s = student.forward_features(sample.image);
  const auto& scfg = student.config();
  require(scfg.same_anchor_grid(teacher.config()), "neck distance: teacher and student grids differ");
  const auto masks = distill_masks(scfg, DistillConfig{}, sample.annotations, 0);
  for (int l = 0; l < scfg.num_levels; ++l) {
    const auto idx = static_cast<std::size_t>(l);
    Tensor adapted;
    if (scfg.adapt_neck_to > 0) {
      const auto& w = student.params().at("adapt.neck" + std::to_string(l) + ".weight");
      const auto& b = student.params().at("adapt.neck" + std::to_string(l) + ".bias");
      AdaptLayer layer{scfg.neck_channels, scfg.adapt_neck_to, w.data, b.data};
      adapted = adapt(layer, s.neck[idx]).values;
    } else {
      adapted = s.neck[idx].values;
    }
    require(adapted.c == t.neck[idx].values.c,
            "neck distance: student channels differ from the teacher and no adaptation layer is present");
    acc.add(per_channel_distance(t.neck[idx].values, adapted, masks[idx]));
  }
}

std::vector<ImageDetections> run_detector(const Detector& det, std::span<const DetectionSample> samples,
                                          const InferenceSettings& s) {
  std::vector<ImageDetections> out(samples.size());
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < samples.size(); i += step)
      out[i] = det.detect(samples[i].image, s.proposals, s.score_threshold, s.nms_iou, s.max_detections);
  };
  const auto workers = static_cast<std::size_t>(std::max(1, s.workers));
  if (workers == 1) {
    work(0, 1);
    return out;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
  for (auto& t : pool) t.join();
  return out;
}

EvalSummary evaluate(const Detector& det, std::span<const DetectionSample> samples, const std::vector<ClassInfo>& classes,
                     const InferenceSettings& settings, double error_min_score) {
  const auto dets = run_detector(det, samples, settings);
  std::vector<ImageGroundTruth> gts;
  gts.reserve(samples.size());
  for (const auto& s : samples) gts.push_back(s.annotations);
  const int nc = det.config().num_classes;
  EvalSummary r;
  const double half[] = {0.5};
  r.map50 = compute_map(dets, gts, half, nc);
  const auto coco = coco_thresholds();
  r.map_coco = compute_map(dets, gts, coco, nc);
  r.errors = categorize_errors(dets, gts, classes, error_min_score);
  for (const auto& d : dets) r.num_detections += static_cast<long>(d.size());
  return r;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void emit_report(const std::filesystem::path& dir, const ReportData& data) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  auto class_name = [&](std::size_t idx) {
    for (const auto& c : data.classes)
      if (c.id == static_cast<int>(idx) + 1) return c.name;
    return std::to_string(idx + 1);
  };

  nlohmann::json summary = nlohmann::json::object();
  {
    auto out = open_out(dir / "map.csv");
    out << "class,iou_threshold,ap\n";
    for (const auto* m : {&data.map50, &data.map_coco}) {
      if (!*m) continue;
      for (std::size_t c = 0; c < (*m)->ap.size(); ++c)
        for (std::size_t t = 0; t < (*m)->thresholds.size(); ++t)
          out << class_name(c) << ',' << format_number((*m)->thresholds[t]) << ','
              << format_number((*m)->ap[c][t]) << '\n';
    }
    if (data.map50) summary["map50"] = data.map50->map;
    if (data.map_coco) summary["map_coco"] = data.map_coco->map;
  }
  {
    auto out = open_out(dir / "errors.csv");
    out << "class,Cor,Loc,Sim,Oth,BG,FN\n";
    if (data.errors) {
      for (std::size_t c = 0; c < data.errors->counts.size(); ++c) {
        out << class_name(c);
        for (long v : data.errors->counts[c]) out << ',' << v;
        out << '\n';
      }
      nlohmann::json e = nlohmann::json::object();
      for (int k = 0; k < kErrorKinds; ++k) e[kErrorNames[static_cast<std::size_t>(k)]] = data.errors->total(ErrorKind(k));
      e["detections"] = data.errors->detections();
      summary["errors"] = e;
    }
  }
  {
    auto out = open_out(dir / "channel_distance.csv");
    out << "channel,d_obj,d_bg\n";
    if (data.distance) {
      const auto& d = *data.distance;
      const std::size_t n = std::max(d.d_obj.size(), d.d_bg.size());
      double mo = 0, mb = 0;
      for (std::size_t c = 0; c < n; ++c) {
        const double o = d.has_obj && c < d.d_obj.size() ? d.d_obj[c] : kNaN;
        const double b = d.has_bg && c < d.d_bg.size() ? d.d_bg[c] : kNaN;
        out << c << ',' << format_number(o) << ',' << format_number(b) << '\n';
        mo += o, mb += b;
      }
      if (n) {
        summary["distance_obj_mean"] = d.has_obj ? nlohmann::json(mo / n) : nlohmann::json(nullptr);
        summary["distance_bg_mean"] = d.has_bg ? nlohmann::json(mb / n) : nlohmann::json(nullptr);
      }
    }
  }
  {
    auto out = open_out(dir / "grad_norms.csv");
    out << "region,mean_l2\n";
    if (data.grad_norms) {
      out << "object," << format_number(data.grad_norms->avg_obj) << '\n';
      out << "background," << format_number(data.grad_norms->avg_bg) << '\n';
      summary["grad_norm_obj"] = data.grad_norms->avg_obj;
      summary["grad_norm_bg"] = data.grad_norms->avg_bg;
    }
  }
  for (const auto& [k, v] : data.extra.items()) summary[k] = v;
  auto out = open_out(dir / "summary.json");
  out << summary.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + (dir / "summary.json").string());
}

}  // namespace defeat
