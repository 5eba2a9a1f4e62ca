#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hiri/model.hpp"

namespace hiri {

// ------------------------------------------------------------- mixing

/// Mixed batch. x is [N,3,H,W]; y is [N,K]; mask is [H,W] (Cutmix only).
struct MixedSample {
  Array x;
  Array y;
  std::optional<Array> mask;
  double lambda = 1.0;
};

inline constexpr double kCutmixBeta = 1.0;
inline constexpr double kMixupBeta = 0.8;

double sample_beta(double a, double b, Rng& rng);

/// Axis-aligned rectangle of ones in a field of zeros. Its target area
/// fraction is drawn from Beta(1,1); the rectangle is clipped to the image.
Array sample_cutmix_mask(Index height, Index width, Rng& rng);

/// x = M*xa + (1-M)*xb per pixel, y = lambda*ya + (1-lambda)*yb with
/// lambda = sum(M)/(H*W) of the given mask.
MixedSample cutmix_with_mask(const Array& xa, const Array& ya, const Array& xb, const Array& yb, const Array& mask);
MixedSample cutmix(const Array& xa, const Array& ya, const Array& xb, const Array& yb, Rng& rng);

MixedSample mixup_with_lambda(const Array& xa, const Array& ya, const Array& xb, const Array& yb, double lambda);
MixedSample mixup(const Array& xa, const Array& ya, const Array& xb, const Array& yb, Rng& rng);

// ------------------------------------------------------- distillation

/// Maps are [N,K,h,w]; y_hat, y_bar are [N,K].
struct DistillTarget {
  Array p_a;
  Array p_b;
  Array p_tilde;
  Array y_hat;
  Array y_bar;
  double alpha = 1.0;
};

/// Majority vote per cell: cell (i,j) covers rows [i*H/h, (i+1)*H/h) and the
/// analogous columns; it is 1 iff more than half its pixels are 1.
Array downsample_mask(const Array& mask, Index height, Index width);

/// Per-position class probabilities of `model` in eval mode without gradients.
Array teacher_probability_maps(const Model& model, ParamTree& params, const Array& images);

/// P~ = M*P_a + (1-M)*P_b (M at map resolution, or lambda for Mixup),
/// y_hat = spatial mean of P~, y_bar = alpha*y_tilde + (1-alpha)*y_hat.
DistillTarget mix_teacher_maps(const Array& p_a, const Array& p_b, const MixedSample& sample, double alpha);

/// Full target; with alpha == 1 the teacher is not run and y_bar == sample.y.
DistillTarget distill_target(const Model& teacher, ParamTree& teacher_params, const Array& xa, const Array& xb,
                             const MixedSample& sample, double alpha);

// ----------------------------------------------------------------- EMA

struct EmaState {
  ParamTree teacher;
  double decay = 0.9998;
  std::int64_t steps = 0;
};

EmaState make_ema(const ParamTree& student, double decay);
/// teacher = d*teacher + (1-d)*student for every tensor, buffers included.
void ema_update(EmaState& state, const ParamTree& student);

// ----------------------------------------------------------- optimizer

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.05;
};

/// One decoupled-decay Adam update of a single tensor at step t (1-based).
void adamw_update(Array& param, const Array& grad, Array& m, Array& v, std::int64_t t, double lr,
                  const AdamWOptions& opts, bool decay);

class AdamW {
 public:
  explicit AdamW(AdamWOptions opts = {}) : opts_(opts) {}
  /// Updates every learnable tensor; missing gradients count as zero.
  /// Weight decay applies to tensors of rank >= 2.
  void step(ParamTree& params, double lr);
  std::int64_t steps() const { return t_; }

 private:
  struct Moments {
    Array m, v;
  };
  AdamWOptions opts_;
  std::int64_t t_ = 0;
  std::vector<Moments> moments_;
};

/// Linear warmup 0 -> base_lr, then half-cosine decay to 0 at total_steps.
double cosine_schedule(Index step, Index total_steps, Index warmup_steps, double base_lr);

// ------------------------------------------------------------- dataset

struct Dataset {
  Array images;               // [N,3,H,W]
  std::vector<Index> labels;  // class indices
  Index num_classes = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  Array batch_images(const std::vector<Index>& indices) const;
  Array batch_targets(const std::vector<Index>& indices) const;  // one-hot [B,K]
};

/// Two classes: one random quadrant carries a red (class 0) or blue (class 1) patch over noise.
Dataset synthetic_quadrants(Index count, Index resolution, std::uint64_t seed);

/// Files hold records "images" [N,3,H,W] and "labels" [N]; a directory
/// loads every regular file in name order and concatenates them.
Dataset load_dataset(const std::filesystem::path& path, Index num_classes = 0);
void save_dataset(const Dataset& data, const std::filesystem::path& path);

// ---------------------------------------------------------------- loop

struct TrainConfig {
  Index steps = 200;
  Index batch_size = 16;
  double base_lr = 1e-3;
  Index warmup_steps = 10;
  double alpha = 0.5;
  double ema_decay = 0.9998;
  double cutmix_prob = 0.5;  // otherwise Mixup
  bool use_teacher = true;   // false: train on the mixed labels alone
  std::uint64_t seed = 0;
  AdamWOptions adamw{};
};

struct StepMetrics {
  Index step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double train_acc = 0.0;  // agreement of argmax logits with argmax mixed label
};

std::string format_metrics(const StepMetrics& m);

struct TrainResult {
  ParamTree student;
  EmaState ema;
  std::vector<StepMetrics> metrics;
};

/// Throws NumericError naming the step and batch indices on a non-finite loss.
TrainResult train_loop(const Model& model, ParamTree student, const Dataset& data, const TrainConfig& config,
                       const std::function<void(const StepMetrics&)>& on_step = {});

/// Clean accuracy in eval mode.
double evaluate_accuracy(const Model& model, ParamTree& params, const Dataset& data, Index batch_size = 32);

}  // namespace hiri
