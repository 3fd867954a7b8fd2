#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "kdseg/tensor.hpp"

namespace kdseg {

// Which parameters stay fixed during an incremental step. EncoderFrozen
// freezes all of L1..L4; FirstTwoLayersFrozen only L1 and L2.
enum class FreezePolicy { None, EncoderFrozen, FirstTwoLayersFrozen };

const char* freeze_policy_name(FreezePolicy p);

struct Param {
  std::string name;
  Tensor tensor;  // shares storage with the model
};

// Toy encoder-decoder segmentation network. Four 3x3 conv+relu encoder blocks
// (strides 1,2,1,2) reduce resolution by 4; four parallel dilated 3x3 branches
// (rates 1,2,4,8) are summed and a 1x1 head plus bilinear x4 upsample produces
// per-pixel logits at input resolution.
class SegModel {
 public:
  static constexpr std::array<int, 4> kEncoderWidths = {16, 32, 32, 64};
  static constexpr std::array<int, 4> kEncoderStrides = {1, 2, 1, 2};
  static constexpr std::array<int, 4> kDilationRates = {1, 2, 4, 8};
  static constexpr int kInputChannels = 3;
  static constexpr int kFeatureChannels = 64;

  SegModel(int num_classes, std::uint64_t seed);

  int num_classes() const { return num_classes_; }

  struct Taps {
    Tensor features;                   // [B,H/4,W/4,64], encoder output
    std::array<Tensor, 4> dilations;   // branch outputs, pre-merge
    Tensor logits;                     // [B,H,W,C]
  };

  // One pass returning every tap the distillation losses can attach to.
  Taps forward(Tape& tape, const Tensor& batch) const;

  // Canonical order (enc1..enc4, dec1..dec4, head), storage shared.
  std::vector<Param> parameters() const;
  std::vector<Param> trainable_parameters() const;

  // Deep copy; same values, fresh storage.
  SegModel deep_copy() const;

 private:
  struct ConvLayer {
    Tensor w;  // [kh,kw,Cin,Cout]
    Tensor b;  // [Cout]
    int stride = 1;
    int dilation = 1;
    int padding = 1;
  };

  SegModel() = default;

  std::array<ConvLayer, 4> encoder_;
  std::array<ConvLayer, 4> decoder_;
  ConvLayer head_;
  int num_classes_ = 0;

  friend SegModel extend_classifier(const SegModel& model, int added, std::uint64_t seed);
  friend void apply_freeze(SegModel& model, FreezePolicy policy);
};

// Frozen deep copy of the previous-step model; it only ever runs forward and
// never receives gradient.
class ModelSnapshot {
 public:
  explicit ModelSnapshot(const SegModel& model);

  SegModel::Taps forward(Tape& tape, const Tensor& batch) const { return model_.forward(tape, batch); }
  int num_classes() const { return model_.num_classes(); }
  const SegModel& model() const { return model_; }

 private:
  SegModel model_;
};

ModelSnapshot snapshot(const SegModel& model);

// Returns a model whose head has `added` extra output channels. Existing
// parameters are copied bit-exactly; new channels start near zero with bias
// -ln(C_new) so fresh classes begin with low probability mass.
SegModel extend_classifier(const SegModel& model, int added, std::uint64_t seed);

void apply_freeze(SegModel& model, FreezePolicy policy);

}  // namespace kdseg
