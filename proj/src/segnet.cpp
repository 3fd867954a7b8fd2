#include "kdseg/segnet.hpp"

#include <cmath>

#include "kdseg/error.hpp"
#include "kdseg/rng.hpp"

namespace kdseg {

namespace {

Tensor he_uniform(Shape shape, int fan_in, Rng& rng) {
  Tensor t = Tensor::zeros(shape, /*requires_grad=*/true);
  const double limit = std::sqrt(6.0 / fan_in);
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-limit, limit));
  return t;
}

}  // namespace

const char* freeze_policy_name(FreezePolicy p) {
  switch (p) {
    case FreezePolicy::EncoderFrozen: return "encoder";
    case FreezePolicy::FirstTwoLayersFrozen: return "first-two";
    default: return "none";
  }
}

SegModel::SegModel(int num_classes, std::uint64_t seed) : num_classes_(num_classes) {
  if (num_classes < 1) throw ParamError("model needs at least 1 class");
  Rng rng(stream_seed(seed, "segnet-init"));

  int cin = kInputChannels;
  for (int i = 0; i < 4; ++i) {
    const int cout = kEncoderWidths[static_cast<std::size_t>(i)];
    auto& layer = encoder_[static_cast<std::size_t>(i)];
    layer.w = he_uniform(Shape{3, 3, cin, cout}, 3 * 3 * cin, rng);
    layer.b = Tensor::zeros(Shape{cout}, true);
    layer.stride = kEncoderStrides[static_cast<std::size_t>(i)];
    layer.dilation = 1;
    layer.padding = 1;
    cin = cout;
  }
  for (int i = 0; i < 4; ++i) {
    const int rate = kDilationRates[static_cast<std::size_t>(i)];
    auto& layer = decoder_[static_cast<std::size_t>(i)];
    layer.w = he_uniform(Shape{3, 3, kFeatureChannels, kFeatureChannels},
                         3 * 3 * kFeatureChannels, rng);
    layer.b = Tensor::zeros(Shape{kFeatureChannels}, true);
    layer.stride = 1;
    layer.dilation = rate;
    layer.padding = rate;
  }
  head_.w = he_uniform(Shape{1, 1, kFeatureChannels, num_classes}, kFeatureChannels, rng);
  head_.b = Tensor::zeros(Shape{num_classes}, true);
  head_.stride = 1;
  head_.dilation = 1;
  head_.padding = 0;
}

SegModel::Taps SegModel::forward(Tape& tape, const Tensor& batch) const {
  const Shape& s = batch.shape();
  if (s.ndim() != 4 || s[3] != kInputChannels)
    throw ShapeError("forward expects [B,H,W,3], got " + s.str());
  if (s[1] % 4 != 0 || s[2] % 4 != 0)
    throw ShapeError("spatial dims must be divisible by 4, got " + s.str());

  Tensor h = batch;
  for (const auto& layer : encoder_)
    h = relu(tape, conv2d(tape, h, layer.w, layer.b, layer.stride, layer.dilation, layer.padding));

  Taps taps;
  taps.features = h;
  for (int i = 0; i < 4; ++i) {
    const auto& layer = decoder_[static_cast<std::size_t>(i)];
    taps.dilations[static_cast<std::size_t>(i)] =
        conv2d(tape, h, layer.w, layer.b, layer.stride, layer.dilation, layer.padding);
  }
  Tensor merged = add(tape, add(tape, taps.dilations[0], taps.dilations[1]),
                      add(tape, taps.dilations[2], taps.dilations[3]));
  Tensor logits_small = conv2d(tape, merged, head_.w, head_.b, 1, 1, 0);
  taps.logits = bilinear_resize(tape, logits_small, s[1], s[2]);
  return taps;
}

std::vector<Param> SegModel::parameters() const {
  std::vector<Param> out;
  out.reserve(18);
  for (int i = 0; i < 4; ++i) {
    const auto& layer = encoder_[static_cast<std::size_t>(i)];
    out.push_back({"enc" + std::to_string(i + 1) + ".w", layer.w});
    out.push_back({"enc" + std::to_string(i + 1) + ".b", layer.b});
  }
  for (int i = 0; i < 4; ++i) {
    const auto& layer = decoder_[static_cast<std::size_t>(i)];
    out.push_back({"dec" + std::to_string(i + 1) + ".w", layer.w});
    out.push_back({"dec" + std::to_string(i + 1) + ".b", layer.b});
  }
  out.push_back({"head.w", head_.w});
  out.push_back({"head.b", head_.b});
  return out;
}

std::vector<Param> SegModel::trainable_parameters() const {
  std::vector<Param> out;
  for (auto& p : parameters())
    if (p.tensor.requires_grad()) out.push_back(std::move(p));
  return out;
}

SegModel SegModel::deep_copy() const {
  SegModel copy = *this;  // shares storage so far
  for (auto& layer : copy.encoder_) {
    layer.w = layer.w.clone();
    layer.b = layer.b.clone();
  }
  for (auto& layer : copy.decoder_) {
    layer.w = layer.w.clone();
    layer.b = layer.b.clone();
  }
  copy.head_.w = copy.head_.w.clone();
  copy.head_.b = copy.head_.b.clone();
  return copy;
}

ModelSnapshot::ModelSnapshot(const SegModel& model) : model_(model.deep_copy()) {
  for (auto& p : model_.parameters()) p.tensor.set_requires_grad(false);
}

ModelSnapshot snapshot(const SegModel& model) { return ModelSnapshot(model); }

SegModel extend_classifier(const SegModel& model, int added, std::uint64_t seed) {
  if (added < 1) throw ParamError("extend_classifier needs added >= 1");
  SegModel out = model.deep_copy();
  const int old_c = model.num_classes_;
  const int new_c = old_c + added;
  const int f = SegModel::kFeatureChannels;

  Tensor w = Tensor::zeros(Shape{1, 1, f, new_c}, true);
  Tensor b = Tensor::zeros(Shape{new_c}, true);
  auto wv = w.data();
  auto bv = b.data();
  auto old_w = out.head_.w.data();
  auto old_b = out.head_.b.data();

  Rng rng(stream_seed(seed, "extend", static_cast<std::uint64_t>(new_c)));
  const float new_bias = static_cast<float>(-std::log(static_cast<double>(new_c)));
  for (int ci = 0; ci < f; ++ci) {
    for (int co = 0; co < old_c; ++co)
      wv[static_cast<std::size_t>(ci) * new_c + co] = old_w[static_cast<std::size_t>(ci) * old_c + co];
    for (int co = old_c; co < new_c; ++co)
      wv[static_cast<std::size_t>(ci) * new_c + co] = static_cast<float>(rng.normal(0.0, 0.01));
  }
  for (int co = 0; co < old_c; ++co) bv[static_cast<std::size_t>(co)] = old_b[static_cast<std::size_t>(co)];
  for (int co = old_c; co < new_c; ++co) bv[static_cast<std::size_t>(co)] = new_bias;

  out.head_.w = w;
  out.head_.b = b;
  out.num_classes_ = new_c;
  return out;
}

void apply_freeze(SegModel& model, FreezePolicy policy) {
  for (int i = 0; i < 4; ++i) {
    auto& layer = model.encoder_[static_cast<std::size_t>(i)];
    const bool frozen = policy == FreezePolicy::EncoderFrozen ||
                        (policy == FreezePolicy::FirstTwoLayersFrozen && i < 2);
    layer.w.set_requires_grad(!frozen);
    layer.b.set_requires_grad(!frozen);
  }
  for (auto& layer : model.decoder_) {
    layer.w.set_requires_grad(true);
    layer.b.set_requires_grad(true);
  }
  model.head_.w.set_requires_grad(true);
  model.head_.b.set_requires_grad(true);
}

}  // namespace kdseg
