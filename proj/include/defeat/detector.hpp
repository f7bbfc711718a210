#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "defeat/bbox.hpp"
#include "defeat/data_synth.hpp"
#include "defeat/layers.hpp"
#include "defeat/params.hpp"
#include "defeat/region_masks.hpp"
#include "defeat/tensor.hpp"

namespace defeat {

struct AnchorSpec {
  double scale = 2.0;   // side = scale * stride
  double aspect = 1.0;  // w / h
  friend bool operator==(const AnchorSpec&, const AnchorSpec&) = default;
};

/// Architecture of the two-stage detector. Backbone stage s has stride
/// 2^(s+1); the neck taps the last `num_levels` stages.
struct DetectorConfig {
  int image_size = 128;
  std::vector<int> backbone_widths{8, 16, 24, 32};
  int backbone_extra_convs = 0;  // stride-1 3x3 convs after each strided conv
  int neck_channels = 16;
  int num_levels = 2;
  std::vector<std::vector<AnchorSpec>> anchors{{{1.5, 1}, {2.5, 1}, {3.5, 1}}, {{1.5, 1}, {2.5, 1}, {3.5, 1}}};
  int num_classes = 8;
  int roi_output = 5;
  int head_hidden = 64;
  double level_scale = kDefaultLevelScale;
  int adapt_neck_to = 0;      // > 0: 1x1 adaptation layers neck -> this many channels
  int adapt_backbone_to = 0;  // > 0: 1x1 adaptation layer on the final backbone stage

  std::vector<int> strides() const;
  int backbone_stride() const { return 1 << static_cast<int>(backbone_widths.size()); }
  int anchors_per_cell() const { return anchors.empty() ? 0 : static_cast<int>(anchors.front().size()); }
  /// Throws ConfigError.
  void validate() const;
  /// Same anchors, strides and image size (prerequisite for sharing proposals).
  bool same_anchor_grid(const DetectorConfig& other) const;
  /// True when every width of this config is >= the other's.
  bool dominates(const DetectorConfig& other) const;
  friend bool operator==(const DetectorConfig&, const DetectorConfig&) = default;
};

void to_json(nlohmann::json& j, const DetectorConfig& c);
void from_json(const nlohmann::json& j, DetectorConfig& c);

struct FeatureMap {
  Tensor values;
  int level = 0;
  int stride = 1;
};

enum class ProposalSource { teacher, student };

struct Proposal {
  BBox box;
  double objectness = 0;  // sigmoid of the RPN score
  double score = 0;       // raw RPN logit, used for ordering
  int anchor_index = -1;
  int b = 0;               // 1 = positive w.r.t. ground truth
  int assigned_class = 0;  // 0 = background
  int matched_gt = -1;
  ProposalSource source = ProposalSource::student;
};

/// Classification logits (C+1 per row, column 0 = background) and
/// class-specific box deltas (4*C per row), one row per proposal.
struct HeadOutput {
  MatrixRM logits;
  MatrixRM box_deltas;
  Eigen::Index rows() const { return logits.rows(); }
};

struct RpnOutput {
  std::vector<Tensor> objectness;  // per level H x W x A
  std::vector<Tensor> deltas;      // per level H x W x 4A
};

struct Detection {
  BBox box;
  int class_id = 0;
  double score = 0;
};

struct FeatureCache {
  std::vector<ConvCache> backbone;
  std::vector<Tensor> backbone_acts;  // post-ReLU output of each backbone conv
  std::vector<ConvCache> lateral;
  std::vector<ConvCache> output;
};

struct RpnCache {
  std::vector<ConvCache> conv, obj, delta;
  std::vector<Tensor> hidden;
};

struct HeadCache {
  MatrixRM input, hidden1, hidden2;
};

struct Features {
  FeatureMap backbone_final;
  std::vector<FeatureMap> neck;
};

/// Regression targets are divided by these before the loss.
inline constexpr std::array<double, 4> kHeadDeltaStd{0.1, 0.1, 0.2, 0.2};

/// Miniature FPN-style two-stage detector with explicit backward passes.
class Detector {
 public:
  explicit Detector(DetectorConfig cfg);

  const DetectorConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const std::vector<BBox>& anchors() const { return anchors_; }

  /// He-normal weights, zero biases, identity-initialised adaptation layers.
  void init(std::uint64_t seed);

  Features forward_features(const Tensor& image, FeatureCache* cache = nullptr) const;
  /// Gradients may be empty tensors (treated as zero).
  void backward_features(const FeatureCache& cache, const std::vector<Tensor>& d_neck, const Tensor& d_backbone_final,
                         ParamStore& grads) const;

  RpnOutput rpn_forward(const std::vector<FeatureMap>& neck, RpnCache* cache = nullptr) const;
  /// Returns per-level neck gradients.
  std::vector<Tensor> backward_rpn(const RpnCache& cache, const RpnOutput& d_out, ParamStore& grads) const;

  HeadOutput head_forward(const MatrixRM& pooled, HeadCache* cache = nullptr) const;
  MatrixRM backward_head(const HeadCache& cache, const MatrixRM& d_logits, const MatrixRM& d_deltas,
                         ParamStore& grads) const;

  /// Pools one row per usable proposal (rows follow `kept`, which lists the
  /// indices of proposals that were not degenerate).
  MatrixRM pool_proposals(const std::vector<FeatureMap>& neck, std::span<const Proposal> proposals,
                          std::vector<int>& kept, std::vector<int>& levels) const;
  void backward_pool(const std::vector<FeatureMap>& neck, std::span<const Proposal> proposals,
                     const std::vector<int>& kept, const std::vector<int>& levels, const MatrixRM& d_pooled,
                     std::vector<Tensor>& d_neck) const;

  int pooled_size() const { return cfg_.roi_output * cfg_.roi_output * cfg_.neck_channels; }

  /// Full inference: proposals -> head -> per-class NMS.
  std::vector<Detection> detect(const Tensor& image, int proposals = 64, double score_threshold = 0.05,
                                double nms_iou = 0.5, int max_detections = 100) const;

 private:
  struct ConvLayer {
    std::size_t w, b;
    ConvShape shape;
  };
  struct FcLayer {
    std::size_t w, b;
    int in, out;
  };

  ConvLayer add_conv(const std::string& name, ConvShape shape);
  FcLayer add_fc(const std::string& name, int in, int out);

  DetectorConfig cfg_;
  ParamStore params_;
  std::vector<BBox> anchors_;
  std::vector<ConvLayer> backbone_;
  std::vector<ConvLayer> lateral_, output_;
  ConvLayer rpn_conv_{}, rpn_obj_{}, rpn_delta_{};
  FcLayer fc1_{}, fc2_{}, cls_{}, box_{};
};

std::vector<BBox> generate_anchors(const DetectorConfig& cfg);

/// Decodes every anchor, clips to the image, sorts by (score desc, anchor
/// index asc) and applies greedy NMS (suppress IoU > nms_iou); keeps <= k.
std::vector<Proposal> propose(const RpnOutput& rpn, std::span<const BBox> anchors, int image_size, int k,
                              double nms_iou);
std::vector<Proposal> rpn_propose(const Detector& det, const std::vector<FeatureMap>& neck, int k, double nms_iou);

/// Greedy NMS over score-sorted indices; returns the kept indices.
std::vector<int> nms(std::span<const BBox> boxes, std::span<const double> scores, double iou_threshold);

/// Bilinear RoI align with one sample per output cell. nullopt when the
/// clipped box is degenerate (area < 1 px^2).
std::optional<Tensor> roi_align(const FeatureMap& feature, const BBox& box, int out_size, int image_size);
/// Adds d_out back into d_feature (same sampling pattern as roi_align).
void roi_align_backward(const FeatureMap& feature, const BBox& box, int out_size, int image_size, const Tensor& d_out,
                        Tensor& d_feature);

/// Sets b, assigned_class and matched_gt. Returns K_obj.
int label_proposals(std::vector<Proposal>& proposals, std::span<const Annotation> gt, double iou_pos = 0.5);

struct LossConfig {
  double iou_pos = 0.5;
  double rpn_pos_iou = 0.5;
  double rpn_neg_iou = 0.3;
  double rpn_smooth_l1_beta = 1.0 / 9.0;
  double head_smooth_l1_beta = 1.0;
};

struct DetectionLosses {
  double cls = 0;  // ground-truth cross-entropy over C+1 classes
  double reg = 0;
  double rpn = 0;
  MatrixRM d_logits, d_deltas;
  RpnOutput d_rpn;
  int rpn_positives = 0;
};

/// Losses of the student's own head and RPN. `proposals` must be labelled and
/// aligned with the rows of `head`.
DetectionLosses detection_losses(const HeadOutput& head, std::span<const Proposal> proposals,
                                 std::span<const Annotation> gt, const RpnOutput& rpn, std::span<const BBox> anchors,
                                 const LossConfig& cfg = {});

double smooth_l1(double x, double beta);
double smooth_l1_grad(double x, double beta);

}  // namespace defeat
