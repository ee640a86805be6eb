#pragma once

#include "attmil/bag.hpp"
#include "attmil/rng.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace attmil {

/// Synthetic landmark-bag generator settings.
///
/// Class 0 is the control class (background instances only). Every other
/// class k owns a fixed prototype tensor P_k; a bag of class k hides
/// ceil(witness * N) landmark instances P_k + noise among background noise.
///
/// Prototype scale: ||P_k|| = prototype_separation * noise_sigma * sqrt(D) / 2
/// with D = C*H*W, i.e. at separation 2 a landmark's signal has the norm of
/// the noise it is buried in. Prototypes are mutually orthogonal.
struct GeneratorConfig {
  Index num_classes = 5;
  double witness_min = 0.05;
  double witness_max = 0.10;
  Index bag_size_min = 20;
  Index bag_size_max = 60;
  InstanceShape instance_shape{4, 8, 8};
  double prototype_separation = 2.0;
  double noise_sigma = 1.0;
  /// Per-element std of the offset shared by all instances of one patient.
  double patient_offset_sigma = 0.2;
  std::uint64_t seed = 0;

  /// Throws ArgumentError on invalid ranges.
  void validate() const;
  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

nlohmann::json to_json(const GeneratorConfig& cfg);
GeneratorConfig generator_config_from_json(const nlohmann::json& j, GeneratorConfig base = {});

/// Class prototypes used by `generate_dataset` for this config; row k-1 is P_k
/// (flattened), class 0 has none.
Eigen::MatrixXd generator_prototypes(const GeneratorConfig& cfg);

/// Deterministic in (cfg, patients_per_class, bags_per_patient). Landmark
/// positions are recorded in `Dataset::landmarks`.
Dataset generate_dataset(const GeneratorConfig& cfg, Index patients_per_class, Index bags_per_patient);

// Bag container ------------------------------------------------------------------
//
//   "MILB" u32 version=1, u32 K, u32 C, u32 H, u32 W, u64 bag count
//   per bag: u32 id length + UTF-8 id, u32 patient id length + bytes,
//            u32 label, u32 N, N*C*H*W f64
//   optional trailer: "LMRK", then per bag ceil(N/8) bytes of landmark flags
//            (bit i of byte i/8, least significant bit first)
//
// Everything little-endian.

inline constexpr std::string_view kBagMagic = "MILB";
inline constexpr std::string_view kLandmarkMagic = "LMRK";
inline constexpr std::uint32_t kBagVersion = 1;

std::string encode_bagfile(const Dataset& ds);
Dataset decode_bagfile(std::string_view bytes);
void write_bagfile(const Dataset& ds, const std::string& path);
Dataset read_bagfile(const std::string& path);

// Patient-wise folds ------------------------------------------------------------------

struct FoldAssignment {
  Index folds = 0;
  std::map<std::string, Index> patient_fold;
  std::vector<Index> bag_fold;  // parallel to Dataset::bags

  std::vector<Index> validation_bags(Index fold) const;
  std::vector<Index> training_bags(Index fold) const;
};

/// Stratified by class at patient granularity: each class's patients are
/// shuffled and dealt round-robin, so per-class counts across folds differ by
/// at most one and no patient spans two folds. Throws ConfigError when a class
/// has fewer than `folds` patients, or a patient's bags carry different labels.
FoldAssignment split_patientwise(const Dataset& ds, Index folds, std::uint64_t seed);

/// Patients in first-appearance order with their class.
std::vector<std::pair<std::string, Index>> patients_of(const Dataset& ds);

}  // namespace attmil
