#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "defeat/detector.hpp"
#include "defeat/region_masks.hpp"
#include "defeat/tensor.hpp"

namespace defeat {

enum class NeckMode { none, all, decoupled };
enum class ClsMode { none, all, decoupled };
enum class MaskKind { gt, random, all_one };
/// Which cells the uniform (all-neck) imitation mask I selects.
enum class NeckRegion { all, object, background };

struct DistillConfig {
  double gamma = 1.0;     // uniform feature loss scale
  double lambda = 1.0;    // KL weight of the uniform proposal loss
  double alpha_obj = 4.0;
  double alpha_bg = 16.0;
  double beta_obj = 0.05;
  double beta_bg = 2.0;
  double t_obj = 3.0;
  double t_bg = 1.0;
  NeckMode neck = NeckMode::none;
  ClsMode cls = ClsMode::none;
  bool backbone = false;
  bool backbone_decoupled = true;  // false: uniform loss on the backbone map
  MaskKind mask = MaskKind::gt;
  NeckRegion region = NeckRegion::all;
  bool softmax_includes_bg = true;

  bool any() const { return neck != NeckMode::none || cls != ClsMode::none || backbone; }
  /// Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const DistillConfig& c);
void from_json(const nlohmann::json& j, DistillConfig& c);

std::string to_string(NeckMode m);
std::string to_string(ClsMode m);
std::string to_string(MaskKind m);
std::string to_string(NeckRegion r);
NeckMode parse_neck_mode(const std::string& s);
ClsMode parse_cls_mode(const std::string& s);
MaskKind parse_mask_kind(const std::string& s);
NeckRegion parse_neck_region(const std::string& s);

/// 1x1 linear projection from student channels to teacher channels.
struct AdaptLayer {
  int in_channels = 0;
  int out_channels = 0;
  std::vector<double> weight;  // in x out, row-major
  std::vector<double> bias;    // out

  static AdaptLayer identity(int channels);
  static AdaptLayer zeros(int in, int out);
};

FeatureMap adapt(const AdaptLayer& layer, const FeatureMap& s);

struct AdaptGrads {
  Tensor d_input;
  std::vector<double> d_weight, d_bias;
};
AdaptGrads adapt_backward(const AdaptLayer& layer, const FeatureMap& s, const Tensor& d_out);

/// (gamma / 2N) * sum I * (S - T)^2 with N = H*W*C. A null mask means I = 1.
double uniform_feature_loss(const Tensor& s_adapted, const Tensor& t, double gamma, const BinaryMask* mask = nullptr,
                            Tensor* grad = nullptr);

struct FeatureLossParts {
  double obj = 0;
  double bg = 0;
  double total() const { return obj + bg; }
};

/// Object and background imitation terms, each normalised by its own element
/// count. An empty region contributes 0.
FeatureLossParts decoupled_feature_loss(const Tensor& s_adapted, const Tensor& t, const BinaryMask& mask,
                                        double alpha_obj, double alpha_bg, Tensor* grad = nullptr);

/// Temperature-softened softmax with max subtraction.
std::vector<double> softened_probs(std::span<const double> logits, double temperature);

/// T^2 * sum_c p_t(c) log(p_t(c) / p_s(c)).
double kl_distill(std::span<const double> p_s, std::span<const double> p_t, double temperature);

struct ClsDistillParts {
  double pos = 0;  // positive-proposal term (already scaled by its coefficient)
  double neg = 0;
  int k_obj = 0;
  int k_bg = 0;
  bool empty = false;  // K = 0
  double total() const { return pos + neg; }
};

/// Positive/negative-decoupled KL over the same K proposals. `labels` holds b_i.
/// With softmax_includes_bg = false the softmax spans the foreground columns only.
ClsDistillParts decoupled_cls_loss(const MatrixRM& student_logits, const MatrixRM& teacher_logits,
                                   std::span<const int> labels, const DistillConfig& cfg,
                                   MatrixRM* grad = nullptr);

struct BaselineClsParts {
  double ce = 0;
  double kl = 0;
  double total() const { return ce + kl; }
};

/// (1/K) sum CE(student, Y) + (lambda/K) sum KL at temperature 1.
BaselineClsParts baseline_cls_loss(const MatrixRM& student_logits, const MatrixRM& teacher_logits,
                                   std::span<const int> gt_labels, double lambda, bool softmax_includes_bg = true,
                                   MatrixRM* grad = nullptr);

}  // namespace defeat
