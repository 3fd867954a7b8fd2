#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kdseg/metrics.hpp"
#include "kdseg/tensor.hpp"

namespace kdseg {

enum class DistillVariant { None, ClsT, Enc, Dec, SPKD, SPKDAvg };

const char* distill_variant_name(DistillVariant v);
std::optional<DistillVariant> parse_distill_variant(std::string_view name);

// Which distillation term joins the composite objective and how strongly.
// variant None with any lambda, or lambda 0, degenerates to plain fine-tuning.
struct DistillConfig {
  DistillVariant variant = DistillVariant::None;
  float lambda_d = 1.0f;
  float temperature = 2.0f;
  std::vector<int> dec_branches = {1, 2, 3, 4};        // 1-based branch ids
  std::vector<DistillVariant> extra_variants;          // optional multi-term sum

  void validate() const;
};

// Per-channel flag: true for channels holding already-seen classes.
struct ClassMask {
  std::vector<bool> old_of_channel;

  static ClassMask first_n(int old_count, int total);
  int old_count() const;
  void validate(int num_channels) const;
};

namespace detail {

// Teacher-side tensors are constants per the incremental-step contract; a
// grad-tracking tensor is replaced by a detached copy before use.
template <class T>
TensorT<T> as_constant(const TensorT<T>& t) {
  if (!t.requires_grad()) return t;
  TensorT<T> c = t.clone();
  c.set_requires_grad(false);
  return c;
}

// -mean over valid pixels of log(max(p[label], clamp)). Custom scalar op so
// the ignore handling stays out of the autodiff primitives.
template <class T>
TensorT<T> nll_mean(TapeT<T>& tape, const TensorT<T>& probs,
                    std::span<const std::uint8_t> labels, int num_classes, int ignore_index) {
  const Shape& sh = probs.shape();
  const int c = sh[sh.ndim() - 1];
  const std::size_t pixels = probs.numel() / static_cast<std::size_t>(c);
  if (labels.size() != pixels)
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match " +
                     std::to_string(pixels) + " pixels");

  std::size_t valid = 0;
  double acc = 0.0;
  auto pv = probs.data();
  for (std::size_t i = 0; i < pixels; ++i) {
    const int label = labels[i];
    if (label == ignore_index) continue;
    if (label >= num_classes)
      throw DataError("label value " + std::to_string(label) + " outside [0," +
                      std::to_string(num_classes) + ")");
    ++valid;
    acc -= std::log(std::max(static_cast<double>(pv[i * static_cast<std::size_t>(c) + label]),
                             kLogClamp));
  }

  bool rg = tape.recording() && probs.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(Shape{}, rg);
  out.data()[0] = valid ? static_cast<T>(acc / static_cast<double>(valid)) : T(0);
  if (rg && valid > 0) {
    std::vector<std::uint8_t> labels_copy(labels.begin(), labels.end());
    detail::record_node(tape, out, [probs, out, labels_copy, c, ignore_index, valid]() mutable {
      const T g = out.grad()[0];
      auto pv2 = probs.data();
      auto gp = probs.grad();
      const T inv = T(1) / static_cast<T>(valid);
      for (std::size_t i = 0; i < labels_copy.size(); ++i) {
        const int label = labels_copy[i];
        if (label == ignore_index) continue;
        const std::size_t off = i * static_cast<std::size_t>(c) + static_cast<std::size_t>(label);
        if (pv2[off] > static_cast<T>(kLogClamp)) gp[off] -= g * inv / pv2[off];
      }
    });
  }
  return out;
}

}  // namespace detail

// Cross-entropy against hard labels, averaged over non-ignored pixels.
// Ignored pixels contribute nothing to the value or the gradient.
template <class T>
TensorT<T> loss_ce(TapeT<T>& tape, const TensorT<T>& logits,
                   std::span<const std::uint8_t> labels, int num_classes,
                   int ignore_index = kIgnoreIndex) {
  const Shape& sh = logits.shape();
  if (sh[sh.ndim() - 1] != num_classes)
    throw ShapeError("logits channel count " + std::to_string(sh[sh.ndim() - 1]) +
                     " vs num_classes " + std::to_string(num_classes));
  auto probs = softmax_t(tape, logits, T(1));
  return detail::nll_mean(tape, probs, labels, num_classes, ignore_index);
}

// Output-layer distillation: cross-entropy between teacher and student
// temperature softmaxes, summed over old channels only, averaged over pixels.
// The softmax runs over all channels; the mask restricts the outer sum. The
// teacher side is constant, so gradient reaches only the student.
template <class T>
TensorT<T> loss_cls_t(TapeT<T>& tape, const TensorT<T>& student_logits,
                      const TensorT<T>& teacher_logits, const ClassMask& mask, T temperature) {
  detail::require_same_shape(student_logits, teacher_logits, "loss_cls_t");
  const Shape& sh = student_logits.shape();
  const int c = sh[sh.ndim() - 1];
  mask.validate(c);
  const std::size_t pixels = student_logits.numel() / static_cast<std::size_t>(c);

  TensorT<T> teacher_weights;
  {
    NoGradScope<T> ng(tape);
    auto teacher_probs = softmax_t(tape, detail::as_constant(teacher_logits), temperature);
    teacher_weights = TensorT<T>::zeros(sh);
    auto tw = teacher_weights.data();
    auto tp = teacher_probs.data();
    for (std::size_t px = 0; px < pixels; ++px)
      for (int ch = 0; ch < c; ++ch)
        if (mask.old_of_channel[static_cast<std::size_t>(ch)])
          tw[px * static_cast<std::size_t>(c) + static_cast<std::size_t>(ch)] =
              tp[px * static_cast<std::size_t>(c) + static_cast<std::size_t>(ch)];
  }

  auto student_log_probs = log_guarded(tape, softmax_t(tape, student_logits, temperature));
  auto weighted = mul(tape, student_log_probs, teacher_weights);
  return scale(tape, sum_all(tape, weighted), -T(1) / static_cast<T>(pixels));
}

// Feature-space distillation: mean over the batch of the squared Frobenius
// distance between encoder outputs.
template <class T>
TensorT<T> loss_enc(TapeT<T>& tape, const TensorT<T>& student_features,
                    const TensorT<T>& teacher_features) {
  detail::require_same_shape(student_features, teacher_features, "loss_enc");
  const int b = student_features.shape()[0];
  return scale(tape, frobenius_sq(tape, student_features, detail::as_constant(teacher_features)),
               T(1) / static_cast<T>(b));
}

// Dilation-branch distillation over the selected ASPP branches, each branch's
// squared distance divided by the number of selected branches.
template <class T>
TensorT<T> loss_dec(TapeT<T>& tape, std::span<const TensorT<T>> student_dilations,
                    std::span<const TensorT<T>> teacher_dilations,
                    std::span<const int> branches) {
  if (branches.empty()) throw ParamError("loss_dec needs a non-empty branch set");
  if (student_dilations.size() != 4 || teacher_dilations.size() != 4)
    throw ParamError("loss_dec expects 4 dilation branches per model");
  TensorT<T> total;
  for (int id : branches) {
    if (id < 1 || id > 4) throw ParamError("loss_dec branch id " + std::to_string(id) + " outside 1..4");
    const auto& s = student_dilations[static_cast<std::size_t>(id - 1)];
    const auto t = detail::as_constant(teacher_dilations[static_cast<std::size_t>(id - 1)]);
    detail::require_same_shape(s, t, "loss_dec");
    auto term = frobenius_sq(tape, s, t);
    total = total.defined() ? add(tape, total, term) : term;
  }
  const int b = student_dilations[0].shape()[0];
  const T norm = T(1) / (static_cast<T>(branches.size()) * static_cast<T>(b));
  return scale(tape, total, norm);
}

namespace detail {

template <class T>
TensorT<T> similarity_matrix(TapeT<T>& tape, const TensorT<T>& rows) {
  auto sim = matmul(tape, rows, transpose2d(tape, rows));
  return row_l2_normalize(tape, sim);
}

}  // namespace detail

// Similarity-preserving distillation: rows are flattened per-sample features,
// the B x B self-similarity matrices are row-normalized and compared.
template <class T>
TensorT<T> loss_spkd(TapeT<T>& tape, const TensorT<T>& student_features,
                     const TensorT<T>& teacher_features) {
  detail::require_same_shape(student_features, teacher_features, "loss_spkd");
  const Shape& sh = student_features.shape();
  if (sh.ndim() != 4) throw ShapeError("loss_spkd expects [B,h,w,F], got " + sh.str());
  const int b = sh[0];
  const int flat = static_cast<int>(sh.numel()) / b;

  auto student_sim = detail::similarity_matrix(tape, reshape(tape, student_features, Shape{b, flat}));
  TensorT<T> teacher_sim;
  {
    NoGradScope<T> ng(tape);
    teacher_sim = detail::similarity_matrix(
        tape, reshape(tape, detail::as_constant(teacher_features), Shape{b, flat}));
  }
  return scale(tape, frobenius_sq(tape, student_sim, teacher_sim), T(1) / static_cast<T>(b));
}

// SPKD on spatially accumulated activations: features are summed over all
// spatial positions first, removing the dependence on object locations.
template <class T>
TensorT<T> loss_spkd_avg(TapeT<T>& tape, const TensorT<T>& student_features,
                         const TensorT<T>& teacher_features) {
  detail::require_same_shape(student_features, teacher_features, "loss_spkd_avg");
  const Shape& sh = student_features.shape();
  if (sh.ndim() != 4) throw ShapeError("loss_spkd_avg expects [B,h,w,F], got " + sh.str());
  const int b = sh[0];

  auto student_sim = detail::similarity_matrix(tape, spatial_sum(tape, student_features));
  TensorT<T> teacher_sim;
  {
    NoGradScope<T> ng(tape);
    teacher_sim = detail::similarity_matrix(tape, spatial_sum(tape, detail::as_constant(teacher_features)));
  }
  return scale(tape, frobenius_sq(tape, student_sim, teacher_sim), T(1) / static_cast<T>(b));
}

// Composite objective: ce + lambda_d * distill.
template <class T>
TensorT<T> total_loss(TapeT<T>& tape, const TensorT<T>& ce, const TensorT<T>& distill,
                      T lambda_d) {
  if (ce.numel() != 1 || distill.numel() != 1) throw ParamError("total_loss expects scalars");
  return add(tape, ce, scale(tape, distill, lambda_d));
}

}  // namespace kdseg
