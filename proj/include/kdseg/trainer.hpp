#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <utility>
#include <vector>

#include "kdseg/data.hpp"
#include "kdseg/distill.hpp"
#include "kdseg/metrics.hpp"
#include "kdseg/rng.hpp"
#include "kdseg/scenario.hpp"
#include "kdseg/segnet.hpp"

namespace kdseg {

struct TrainConfig {
  float lr_start = 1e-4f;
  float lr_end = 1e-6f;
  float power = 0.9f;
  int steps_per_class = 200;      // desk-scale default; full runs use 1000
  float weight_decay = 1e-4f;
  float momentum = 0.0f;          // plain SGD by default
  int batch_size = 4;
  int crop = 64;                  // desk-scale default; full runs use 321
  std::uint64_t seed = 1;
  DistillConfig distill;
  FreezePolicy freeze = FreezePolicy::None;
  int log_every = 50;

  void validate() const;
};

struct AugmentSpec {
  float flip_prob = 0.5f;
  float scale_min = 0.5f;
  float scale_max = 1.5f;

  void validate() const;
};

// lr_end + (lr_start - lr_end) * (1 - step/total)^power.
float poly_lr(int step, int total_steps, float lr_start, float lr_end, float power);

// Augmentation pieces. Images are [H,W,3] tensors, labels raw class ids.
void hflip(Tensor& image, LabelMap& labels);
std::pair<Tensor, LabelMap> scale_sample(const Tensor& image, const LabelMap& labels,
                                         double factor);
// Window copy with zero padding for the image and ignore padding for labels.
std::pair<Tensor, LabelMap> crop_sample(const Tensor& image, const LabelMap& labels, int crop,
                                        int y0, int x0);
std::pair<Tensor, LabelMap> augment(const Tensor& image, const LabelMap& labels,
                                    const AugmentSpec& spec, int crop, Rng& rng);

// Decoupled weight decay: p <- p * (1 - lr*wd) - lr*v with v the (optionally
// momentum-filtered) gradient. Only requires_grad parameters move.
struct SgdState {
  std::vector<std::vector<float>> velocity;
};
void sgd_step(std::span<const Param> params, float lr, float weight_decay, float momentum,
              SgdState& state);

// Initial training of M_0 on D_0 for |S_0| * steps_per_class steps.
// Returns the number of optimizer steps executed.
int train_initial(SegModel& model, const DatasetManifest& data, const StepDataset& d0,
                  const ClassSchedule& schedule, const TrainConfig& cfg,
                  std::ostream* log = nullptr);

// One incremental step: CE plus the configured distillation term against the
// frozen teacher, |U_k| * steps_per_class optimizer steps.
int train_incremental(const ModelSnapshot& teacher, SegModel& student,
                      const DatasetManifest& data, const StepDataset& dk,
                      const ClassSchedule& schedule, int k, const TrainConfig& cfg,
                      std::ostream* log = nullptr);

std::vector<std::uint8_t> argmax_channels(const Tensor& logits);

// Confusion matrix over the channels seen after step k; ground-truth pixels
// of not-yet-introduced classes count as ignore.
ConfusionMatrix evaluate(const SegModel& model, const DatasetManifest& data,
                         std::span<const std::string> ids, const ClassSchedule& schedule, int k);

}  // namespace kdseg
