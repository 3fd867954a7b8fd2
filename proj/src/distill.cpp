#include "kdseg/distill.hpp"

#include <algorithm>

#include "kdseg/error.hpp"

namespace kdseg {

const char* distill_variant_name(DistillVariant v) {
  switch (v) {
    case DistillVariant::ClsT: return "cls-t";
    case DistillVariant::Enc: return "enc";
    case DistillVariant::Dec: return "dec";
    case DistillVariant::SPKD: return "spkd";
    case DistillVariant::SPKDAvg: return "spkd-avg";
    default: return "none";
  }
}

std::optional<DistillVariant> parse_distill_variant(std::string_view name) {
  if (name == "none") return DistillVariant::None;
  if (name == "cls-t") return DistillVariant::ClsT;
  if (name == "enc") return DistillVariant::Enc;
  if (name == "dec") return DistillVariant::Dec;
  if (name == "spkd") return DistillVariant::SPKD;
  if (name == "spkd-avg") return DistillVariant::SPKDAvg;
  return std::nullopt;
}

void DistillConfig::validate() const {
  if (!(temperature > 0.0f)) throw ParamError("distillation temperature must be > 0");
  if (lambda_d < 0.0f) throw ParamError("lambda_d must be >= 0");
  if (dec_branches.empty()) throw ParamError("dec_branches must not be empty");
  for (int b : dec_branches)
    if (b < 1 || b > 4) throw ParamError("dec_branches entries must be in 1..4");
  for (DistillVariant v : extra_variants)
    if (v == DistillVariant::None || v == variant)
      throw ParamError("extra_variants must name distinct non-trivial variants");
}

ClassMask ClassMask::first_n(int old_count, int total) {
  if (old_count < 0 || old_count > total) throw ParamError("class mask old_count out of range");
  ClassMask m;
  m.old_of_channel.assign(static_cast<std::size_t>(total), false);
  std::fill(m.old_of_channel.begin(), m.old_of_channel.begin() + old_count, true);
  return m;
}

int ClassMask::old_count() const {
  return static_cast<int>(std::count(old_of_channel.begin(), old_of_channel.end(), true));
}

void ClassMask::validate(int num_channels) const {
  if (static_cast<int>(old_of_channel.size()) != num_channels)
    throw ParamError("class mask length " + std::to_string(old_of_channel.size()) +
                     " does not match channel count " + std::to_string(num_channels));
}

}  // namespace kdseg
