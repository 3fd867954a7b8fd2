#include "kdseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "kdseg/error.hpp"
#include "kdseg/log.hpp"

namespace kdseg {

void TrainConfig::validate() const {
  if (!(lr_start >= lr_end && lr_end > 0.0f))
    throw ParamError("learning rates must satisfy lr_start >= lr_end > 0");
  if (power <= 0.0f) throw ParamError("poly decay power must be > 0");
  if (steps_per_class < 0) throw ParamError("steps_per_class must be >= 0");
  if (weight_decay < 0.0f) throw ParamError("weight_decay must be >= 0");
  if (momentum < 0.0f || momentum >= 1.0f) throw ParamError("momentum must be in [0,1)");
  if (batch_size < 1) throw ParamError("batch_size must be >= 1");
  if (crop < 4 || crop % 4 != 0) throw ParamError("crop must be positive and divisible by 4");
  if (log_every < 1) throw ParamError("log_every must be >= 1");
  distill.validate();
}

void AugmentSpec::validate() const {
  if (flip_prob < 0.0f || flip_prob > 1.0f) throw ParamError("flip_prob must be in [0,1]");
  if (!(scale_min <= scale_max) || scale_min <= 0.0f)
    throw ParamError("scale range must satisfy 0 < scale_min <= scale_max");
}

float poly_lr(int step, int total_steps, float lr_start, float lr_end, float power) {
  if (total_steps == 0) throw ParamError("poly_lr needs total_steps > 0");
  if (step < 0 || step > total_steps) throw ParamError("poly_lr step outside [0, total_steps]");
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
  return static_cast<float>(lr_end + (lr_start - lr_end) * std::pow(frac, static_cast<double>(power)));
}

void hflip(Tensor& image, LabelMap& labels) {
  const Shape& s = image.shape();
  const int h = s[0], w = s[1], c = s[2];
  auto v = image.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w / 2; ++x)
      for (int ch = 0; ch < c; ++ch)
        std::swap(v[(static_cast<std::size_t>(y) * w + x) * c + ch],
                  v[(static_cast<std::size_t>(y) * w + (w - 1 - x)) * c + ch]);
  for (int y = 0; y < labels.h; ++y)
    for (int x = 0; x < labels.w / 2; ++x) std::swap(labels.at(y, x), labels.at(y, labels.w - 1 - x));
}

std::pair<Tensor, LabelMap> scale_sample(const Tensor& image, const LabelMap& labels,
                                         double factor) {
  const Shape& s = image.shape();
  const int h = s[0], w = s[1];
  const int nh = std::max(1, static_cast<int>(std::lround(h * factor)));
  const int nw = std::max(1, static_cast<int>(std::lround(w * factor)));

  Tape tape;
  NoGradScope<float> ng(tape);
  Tensor batched = reshape(tape, image, Shape{1, h, w, 3});
  Tensor resized = bilinear_resize(tape, batched, nh, nw);
  Tensor out = reshape(tape, resized, Shape{nh, nw, 3});

  LabelMap nl(nh, nw);
  for (int y = 0; y < nh; ++y) {
    // Nearest neighbour with the same half-pixel mapping as the image.
    int sy = static_cast<int>((y + 0.5) * h / nh);
    sy = std::clamp(sy, 0, h - 1);
    for (int x = 0; x < nw; ++x) {
      int sx = static_cast<int>((x + 0.5) * w / nw);
      sx = std::clamp(sx, 0, w - 1);
      nl.at(y, x) = labels.at(sy, sx);
    }
  }
  return {out, std::move(nl)};
}

std::pair<Tensor, LabelMap> crop_sample(const Tensor& image, const LabelMap& labels, int crop,
                                        int y0, int x0) {
  const Shape& s = image.shape();
  const int h = s[0], w = s[1];
  Tensor out = Tensor::zeros(Shape{crop, crop, 3});
  LabelMap nl(crop, crop, 255);
  auto src = image.data();
  auto dst = out.data();
  for (int y = 0; y < crop; ++y) {
    const int sy = y0 + y;
    if (sy < 0 || sy >= h) continue;
    for (int x = 0; x < crop; ++x) {
      const int sx = x0 + x;
      if (sx < 0 || sx >= w) continue;
      for (int ch = 0; ch < 3; ++ch)
        dst[(static_cast<std::size_t>(y) * crop + x) * 3 + ch] =
            src[(static_cast<std::size_t>(sy) * w + sx) * 3 + ch];
      nl.at(y, x) = labels.at(sy, sx);
    }
  }
  return {out, std::move(nl)};
}

std::pair<Tensor, LabelMap> augment(const Tensor& image, const LabelMap& labels,
                                    const AugmentSpec& spec, int crop, Rng& rng) {
  spec.validate();
  const Shape& s = image.shape();
  if (s.ndim() != 3 || s[2] != 3) throw ShapeError("augment expects [H,W,3], got " + s.str());
  if (s[0] != labels.h || s[1] != labels.w) throw ShapeError("image/label size mismatch in augment");

  Tensor img = image.clone();
  LabelMap lab = labels;
  if (rng.bernoulli(spec.flip_prob)) hflip(img, lab);

  const double factor = rng.uniform(spec.scale_min, spec.scale_max);
  auto [scaled, scaled_labels] = scale_sample(img, lab, factor);

  const int sh = scaled.shape()[0], sw = scaled.shape()[1];
  const int y0 = sh > crop ? static_cast<int>(rng.next_below(static_cast<std::uint64_t>(sh - crop + 1)))
                : -(crop > sh ? static_cast<int>(rng.next_below(static_cast<std::uint64_t>(crop - sh + 1))) : 0);
  const int x0 = sw > crop ? static_cast<int>(rng.next_below(static_cast<std::uint64_t>(sw - crop + 1)))
                : -(crop > sw ? static_cast<int>(rng.next_below(static_cast<std::uint64_t>(crop - sw + 1))) : 0);
  return crop_sample(scaled, scaled_labels, crop, y0, x0);
}

void sgd_step(std::span<const Param> params, float lr, float weight_decay, float momentum,
              SgdState& state) {
  if (state.velocity.size() != params.size())
    state.velocity.assign(params.size(), {});
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (!p.tensor.requires_grad()) continue;
    auto data = p.tensor.data();
    auto grad = p.tensor.grad();
    const float decay = 1.0f - lr * weight_decay;
    if (momentum > 0.0f) {
      auto& vel = state.velocity[i];
      if (vel.size() != data.size()) vel.assign(data.size(), 0.0f);
      for (std::size_t j = 0; j < data.size(); ++j) {
        vel[j] = momentum * vel[j] + grad[j];
        data[j] = data[j] * decay - lr * vel[j];
      }
    } else {
      for (std::size_t j = 0; j < data.size(); ++j) data[j] = data[j] * decay - lr * grad[j];
    }
  }
}

namespace {

struct PreparedSample {
  Tensor image;     // [H,W,3]
  LabelMap labels;  // channel ids + ignore
};

// Loads a step's samples once, with mode relabeling and channel remapping
// already applied.
std::vector<PreparedSample> prepare_samples(const DatasetManifest& data, const StepDataset& step,
                                            const ClassSchedule& schedule) {
  std::vector<PreparedSample> out;
  out.reserve(step.sample_ids.size());
  const auto s_prev = schedule.seen_after(std::max(0, step.k - 1));
  const std::vector<int> u_k =
      step.k > 0 ? schedule.steps[static_cast<std::size_t>(step.k - 1)] : std::vector<int>{};
  for (const auto& id : step.sample_ids) {
    auto [image, labels] = load_sample(data, id);
    if (step.k > 0) labels = relabel(labels, step.mode, s_prev, u_k);
    labels = remap_to_channels(labels, schedule, step.k, /*unseen_to_ignore=*/false);
    out.push_back({std::move(image), std::move(labels)});
  }
  return out;
}

struct Batch {
  Tensor images;                    // [B,crop,crop,3]
  std::vector<std::uint8_t> labels; // B*crop*crop
};

class BatchCycler {
 public:
  BatchCycler(const std::vector<PreparedSample>& samples, const TrainConfig& cfg)
      : samples_(samples), cfg_(cfg), order_(samples.size()) {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  }

  Batch next(int global_step) {
    const int b = cfg_.batch_size;
    const int crop = cfg_.crop;
    Batch batch;
    batch.images = Tensor::zeros(Shape{b, crop, crop, 3});
    batch.labels.assign(static_cast<std::size_t>(b) * crop * crop, 255);
    auto dst = batch.images.data();
    for (int slot = 0; slot < b; ++slot) {
      if (cursor_ == 0) reshuffle();
      const PreparedSample& s = samples_[order_[cursor_]];
      cursor_ = (cursor_ + 1) % order_.size();
      if (cursor_ == 0) ++epoch_;

      Rng aug_rng(stream_seed(cfg_.seed, "aug",
                              (static_cast<std::uint64_t>(global_step) << 8) |
                                  static_cast<std::uint64_t>(slot)));
      auto [img, lab] = augment(s.image, s.labels, aug_, crop, aug_rng);
      std::copy(img.data().begin(), img.data().end(),
                dst.begin() + static_cast<std::size_t>(slot) * crop * crop * 3);
      std::copy(lab.v.begin(), lab.v.end(),
                batch.labels.begin() + static_cast<std::size_t>(slot) * crop * crop);
    }
    return batch;
  }

 private:
  void reshuffle() {
    Rng rng(stream_seed(cfg_.seed, "shuffle", static_cast<std::uint64_t>(epoch_)));
    for (std::size_t i = order_.size(); i > 1; --i)
      std::swap(order_[i - 1], order_[rng.next_below(i)]);
  }

  const std::vector<PreparedSample>& samples_;
  const TrainConfig& cfg_;
  AugmentSpec aug_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  int epoch_ = 0;
};

// Shared SGD loop; teacher is null for the initial stage.
int run_training(const ModelSnapshot* teacher, SegModel& model, const DatasetManifest& data,
                 const StepDataset& step, const ClassSchedule& schedule, int total_steps,
                 const TrainConfig& cfg, std::ostream* log) {
  cfg.validate();
  if (step.sample_ids.empty())
    throw DataError("step " + std::to_string(step.k) + " has no training samples");
  if (total_steps == 0) return 0;

  auto samples = prepare_samples(data, step, schedule);
  BatchCycler cycler(samples, cfg);
  auto params = model.parameters();
  SgdState sgd;

  const int num_channels = model.num_classes();
  ClassMask mask = ClassMask::first_n(
      step.k > 0 ? schedule.channels_after(step.k - 1) : num_channels, num_channels);

  const bool want_distill =
      teacher != nullptr &&
      (cfg.distill.variant != DistillVariant::None || !cfg.distill.extra_variants.empty());

  Tape tape;
  for (int t = 0; t < total_steps; ++t) {
    const float lr = poly_lr(t, total_steps, cfg.lr_start, cfg.lr_end, cfg.power);
    Batch batch = cycler.next(t);

    for (auto& p : params) p.tensor.zero_grad();
    tape.clear();

    auto student_taps = model.forward(tape, batch.images);
    Tensor ce = loss_ce(tape, student_taps.logits, batch.labels, num_channels);

    Tensor distill_term;
    if (want_distill) {
      SegModel::Taps teacher_taps = teacher->forward(tape, batch.images);
      // The teacher head is |U_k| channels short; distill on the student's
      // old-channel logits against the full teacher output.
      std::vector<DistillVariant> variants = {cfg.distill.variant};
      variants.insert(variants.end(), cfg.distill.extra_variants.begin(),
                      cfg.distill.extra_variants.end());
      for (DistillVariant v : variants) {
        Tensor term;
        switch (v) {
          case DistillVariant::None:
            continue;
          case DistillVariant::ClsT: {
            // The teacher head is shorter by |U_k|; pad its new-class logits
            // with a huge negative score so its softmax over the old channels
            // matches the old model's own distribution exactly.
            const int old_c = teacher->num_classes();
            Tensor teacher_full = Tensor::full(student_taps.logits.shape(), -1e9f);
            auto tv = teacher_full.data();
            auto told = teacher_taps.logits.data();
            const std::size_t pixels = teacher_full.numel() / static_cast<std::size_t>(num_channels);
            for (std::size_t px = 0; px < pixels; ++px)
              for (int c = 0; c < old_c; ++c)
                tv[px * num_channels + static_cast<std::size_t>(c)] =
                    told[px * old_c + static_cast<std::size_t>(c)];
            term = loss_cls_t(tape, student_taps.logits, teacher_full, mask, cfg.distill.temperature);
            break;
          }
          case DistillVariant::Enc:
            term = loss_enc(tape, student_taps.features, teacher_taps.features);
            break;
          case DistillVariant::Dec:
            term = loss_dec<float>(tape, student_taps.dilations, teacher_taps.dilations,
                                   cfg.distill.dec_branches);
            break;
          case DistillVariant::SPKD:
            term = loss_spkd(tape, student_taps.features, teacher_taps.features);
            break;
          case DistillVariant::SPKDAvg:
            term = loss_spkd_avg(tape, student_taps.features, teacher_taps.features);
            break;
        }
        distill_term = distill_term.defined() ? add(tape, distill_term, term) : term;
      }
    }
    if (!distill_term.defined()) distill_term = Tensor::scalar(0.0f);

    Tensor total = total_loss(tape, ce, distill_term, cfg.distill.lambda_d);
    backward(tape, total);
    sgd_step(params, lr, cfg.weight_decay, cfg.momentum, sgd);

    if (log != nullptr && ((t + 1) % cfg.log_every == 0 || t + 1 == total_steps)) {
      char line[160];
      std::snprintf(line, sizeof(line), "step %d lr %.8g ce %.6g distill %.6g total %.6g",
                    t + 1, lr, ce.item(), distill_term.item(), total.item());
      (*log) << line << "\n";
    }
  }
  tape.clear();
  return total_steps;
}

}  // namespace

int train_initial(SegModel& model, const DatasetManifest& data, const StepDataset& d0,
                  const ClassSchedule& schedule, const TrainConfig& cfg, std::ostream* log) {
  if (d0.k != 0) throw ParamError("train_initial expects the step-0 dataset");
  const int s0 = schedule.channels_after(0);
  if (model.num_classes() != s0)
    throw ScenarioError("model has " + std::to_string(model.num_classes()) +
                        " classes, S_0 has " + std::to_string(s0));
  apply_freeze(model, FreezePolicy::None);
  TrainConfig plain = cfg;
  plain.distill.variant = DistillVariant::None;
  plain.distill.extra_variants.clear();
  plain.distill.lambda_d = 0.0f;
  return run_training(nullptr, model, data, d0, schedule, s0 * cfg.steps_per_class, plain, log);
}

int train_incremental(const ModelSnapshot& teacher, SegModel& student,
                      const DatasetManifest& data, const StepDataset& dk,
                      const ClassSchedule& schedule, int k, const TrainConfig& cfg,
                      std::ostream* log) {
  if (k < 1 || k > schedule.num_steps()) throw ParamError("bad incremental step index");
  if (dk.k != k) throw ParamError("step dataset does not match step index");
  const int u_k = static_cast<int>(schedule.steps[static_cast<std::size_t>(k - 1)].size());
  if (student.num_classes() != teacher.num_classes() + u_k ||
      student.num_classes() != schedule.channels_after(k))
    throw ScenarioError("teacher/student channel mismatch: teacher " +
                        std::to_string(teacher.num_classes()) + " + |U_k| " + std::to_string(u_k) +
                        " vs student " + std::to_string(student.num_classes()));
  apply_freeze(student, cfg.freeze);
  return run_training(&teacher, student, data, dk, schedule, u_k * cfg.steps_per_class, cfg, log);
}

std::vector<std::uint8_t> argmax_channels(const Tensor& logits) {
  const Shape& s = logits.shape();
  const int c = s[s.ndim() - 1];
  const std::size_t pixels = logits.numel() / static_cast<std::size_t>(c);
  std::vector<std::uint8_t> out(pixels);
  auto v = logits.data();
  for (std::size_t px = 0; px < pixels; ++px) {
    int best = 0;
    float best_v = v[px * static_cast<std::size_t>(c)];
    for (int ch = 1; ch < c; ++ch) {
      const float x = v[px * static_cast<std::size_t>(c) + static_cast<std::size_t>(ch)];
      if (x > best_v) {
        best_v = x;
        best = ch;
      }
    }
    out[px] = static_cast<std::uint8_t>(best);
  }
  return out;
}

ConfusionMatrix evaluate(const SegModel& model, const DatasetManifest& data,
                         std::span<const std::string> ids, const ClassSchedule& schedule, int k) {
  ConfusionMatrix cm(schedule.channels_after(k));
  Tape tape;
  NoGradScope<float> ng(tape);
  for (const auto& id : ids) {
    auto [image, labels] = load_sample(data, id);
    LabelMap gt = remap_to_channels(labels, schedule, k, /*unseen_to_ignore=*/true);
    const Shape& s = image.shape();
    Tensor batched = reshape(tape, image, Shape{1, s[0], s[1], 3});
    auto taps = model.forward(tape, batched);
    auto pred = argmax_channels(taps.logits);
    cm.accumulate(pred, gt.v);
  }
  return cm;
}

}  // namespace kdseg
