#pragma once

#include "attmil/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace attmil {

/// Extents of one instance tensor (channels x height x width).
struct InstanceShape {
  Index channels = 0;
  Index height = 0;
  Index width = 0;

  Index numel() const noexcept { return channels * height * width; }
  Shape shape() const { return {channels, height, width}; }
  std::string str() const { return shape_string(shape()); }
  friend bool operator==(const InstanceShape&, const InstanceShape&) = default;
};

/// A weakly labelled set of instances. Instances are stored stacked as one
/// [N, C, H, W] tensor so the embedding network can process a bag in one pass.
struct Bag {
  std::string id;
  std::string patient_id;
  Index label = 0;
  Tensor instances;

  Index size() const { return instances.rank() == 4 ? instances.dim(0) : 0; }
  InstanceShape instance_shape() const {
    return {instances.dim(1), instances.dim(2), instances.dim(3)};
  }
  /// Copy of instance i as a [C, H, W] tensor.
  Tensor instance(Index i) const;

  friend bool operator==(const Bag&, const Bag&) = default;
};

/// Per-bag landmark flags (1 = landmark), parallel to `Dataset::bags`.
using LandmarkMask = std::vector<std::uint8_t>;

struct Dataset {
  Index num_classes = 0;
  InstanceShape instance_shape;
  std::vector<Bag> bags;
  /// Hidden ground truth from the generator; never consumed by training.
  std::optional<std::vector<LandmarkMask>> landmarks;

  const Bag& find(const std::string& bag_id) const;
  Index find_index(const std::string& bag_id) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

}  // namespace attmil
