#include "attmil/data.hpp"

#include "attmil/binio.hpp"
#include "attmil/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace attmil {

Tensor Bag::instance(Index i) const {
  if (i < 0 || i >= size()) throw LookupError("instance " + std::to_string(i) + " out of range in bag " + id);
  const InstanceShape s = instance_shape();
  return Tensor(s.shape(), instances.data().segment(i * s.numel(), s.numel()));
}

Index Dataset::find_index(const std::string& bag_id) const {
  for (std::size_t i = 0; i < bags.size(); ++i) {
    if (bags[i].id == bag_id) return static_cast<Index>(i);
  }
  throw LookupError("unknown bag id '" + bag_id + "'");
}

const Bag& Dataset::find(const std::string& bag_id) const {
  return bags[static_cast<std::size_t>(find_index(bag_id))];
}

// Generator ----------------------------------------------------------------------

void GeneratorConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ArgumentError("generator config: " + msg); };
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (!(witness_min > 0.0 && witness_min <= witness_max && witness_max <= 1.0)) {
    fail("witness rate range must satisfy 0 < min <= max <= 1");
  }
  if (bag_size_min < 1 || bag_size_max < bag_size_min) fail("bag size range must satisfy 1 <= min <= max");
  if (instance_shape.channels < 1 || instance_shape.height < 1 || instance_shape.width < 1) {
    fail("instance_shape extents must be positive");
  }
  if (!(prototype_separation > 0.0)) fail("prototype_separation must be positive");
  if (!(noise_sigma > 0.0)) fail("noise_sigma must be positive");
  if (!(patient_offset_sigma >= 0.0)) fail("patient_offset_sigma must be non-negative");
  if (num_classes - 1 > instance_shape.numel()) fail("more disorder classes than instance dimensions");
}

nlohmann::json to_json(const GeneratorConfig& cfg) {
  return {
      {"num_classes", cfg.num_classes},
      {"witness_rate", {cfg.witness_min, cfg.witness_max}},
      {"bag_size", {cfg.bag_size_min, cfg.bag_size_max}},
      {"instance_shape", {cfg.instance_shape.channels, cfg.instance_shape.height, cfg.instance_shape.width}},
      {"prototype_separation", cfg.prototype_separation},
      {"noise_sigma", cfg.noise_sigma},
      {"patient_offset_sigma", cfg.patient_offset_sigma},
      {"seed", cfg.seed},
  };
}

GeneratorConfig generator_config_from_json(const nlohmann::json& j, GeneratorConfig cfg) {
  if (!j.is_object()) throw ConfigError("generator config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "num_classes") {
        cfg.num_classes = value.get<Index>();
      } else if (key == "witness_rate") {
        const auto v = value.get<std::vector<double>>();
        if (v.size() != 2) throw ConfigError("generator config: witness_rate needs [min, max]");
        cfg.witness_min = v[0];
        cfg.witness_max = v[1];
      } else if (key == "bag_size") {
        const auto v = value.get<std::vector<Index>>();
        if (v.size() != 2) throw ConfigError("generator config: bag_size needs [min, max]");
        cfg.bag_size_min = v[0];
        cfg.bag_size_max = v[1];
      } else if (key == "instance_shape") {
        const auto v = value.get<std::vector<Index>>();
        if (v.size() != 3) throw ConfigError("generator config: instance_shape needs 3 extents");
        cfg.instance_shape = {v[0], v[1], v[2]};
      } else if (key == "prototype_separation") {
        cfg.prototype_separation = value.get<double>();
      } else if (key == "noise_sigma") {
        cfg.noise_sigma = value.get<double>();
      } else if (key == "patient_offset_sigma") {
        cfg.patient_offset_sigma = value.get<double>();
      } else if (key == "seed") {
        cfg.seed = value.get<std::uint64_t>();
      } else {
        throw ConfigError("generator config: unknown key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("generator config: ") + e.what());
  }
  return cfg;
}

namespace {

enum Stream : std::uint64_t { kPrototypeStream = 1, kPatientStream = 1000 };

char class_digit(Index k) { return static_cast<char>('0' + k % 10); }

std::string two_digits(Index i) {
  std::string s = std::to_string(i);
  return s.size() < 2 ? "0" + s : s;
}

}  // namespace

Eigen::MatrixXd generator_prototypes(const GeneratorConfig& cfg) {
  cfg.validate();
  const Index d = cfg.instance_shape.numel();
  const Index disorders = cfg.num_classes - 1;
  const double norm = 0.5 * cfg.prototype_separation * cfg.noise_sigma * std::sqrt(static_cast<double>(d));
  Rng rng = Rng(cfg.seed).split(kPrototypeStream);
  Eigen::MatrixXd protos(disorders, d);
  for (Index k = 0; k < disorders; ++k) {
    Eigen::VectorXd v(d);
    for (Index i = 0; i < d; ++i) v[i] = rng.normal();
    // Gram-Schmidt against earlier prototypes.
    for (Index j = 0; j < k; ++j) {
      const Eigen::VectorXd u = protos.row(j).transpose() / norm;
      v -= u.dot(v) * u;
    }
    protos.row(k) = (norm / v.norm()) * v.transpose();
  }
  return protos;
}

Dataset generate_dataset(const GeneratorConfig& cfg, Index patients_per_class, Index bags_per_patient) {
  cfg.validate();
  if (patients_per_class < 1) throw ArgumentError("patients_per_class must be >= 1");
  if (bags_per_patient < 1) throw ArgumentError("bags_per_patient must be >= 1");

  const Eigen::MatrixXd protos = generator_prototypes(cfg);
  const Index d = cfg.instance_shape.numel();
  Dataset ds;
  ds.num_classes = cfg.num_classes;
  ds.instance_shape = cfg.instance_shape;
  ds.landmarks.emplace();

  const Rng root(cfg.seed);
  Index patient_counter = 0;
  for (Index k = 0; k < cfg.num_classes; ++k) {
    for (Index p = 0; p < patients_per_class; ++p, ++patient_counter) {
      Rng rng = root.split(kPatientStream + static_cast<std::uint64_t>(patient_counter));
      const std::string patient = std::string("c") + class_digit(k) + "-p" + two_digits(p);
      Eigen::VectorXd offset(d);
      for (Index i = 0; i < d; ++i) offset[i] = rng.normal(0.0, cfg.patient_offset_sigma);

      for (Index b = 0; b < bags_per_patient; ++b) {
        const Index n = cfg.bag_size_min +
                        static_cast<Index>(rng.below(static_cast<std::uint64_t>(cfg.bag_size_max - cfg.bag_size_min + 1)));
        Index landmarks = 0;
        if (k > 0) {
          const double witness = rng.uniform(cfg.witness_min, cfg.witness_max);
          landmarks = std::min<Index>(n, static_cast<Index>(std::ceil(witness * static_cast<double>(n) - 1e-12)));
        }
        std::vector<Index> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), Index{0});
        rng.shuffle(std::span<Index>(order));
        LandmarkMask mask(static_cast<std::size_t>(n), 0);
        for (Index i = 0; i < landmarks; ++i) mask[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;

        Bag bag;
        bag.id = patient + "-b" + two_digits(b);
        bag.patient_id = patient;
        bag.label = k;
        bag.instances = Tensor({n, cfg.instance_shape.channels, cfg.instance_shape.height, cfg.instance_shape.width});
        auto rows = bag.instances.matrix(n, d);
        for (Index i = 0; i < n; ++i) {
          for (Index j = 0; j < d; ++j) rows(i, j) = offset[j] + rng.normal(0.0, cfg.noise_sigma);
          if (mask[static_cast<std::size_t>(i)]) rows.row(i) += protos.row(k - 1);
        }
        ds.bags.push_back(std::move(bag));
        ds.landmarks->push_back(std::move(mask));
      }
    }
  }
  return ds;
}

// Bag container ----------------------------------------------------------------------

std::string encode_bagfile(const Dataset& ds) {
  binio::Writer w;
  w.bytes(kBagMagic);
  w.u32(kBagVersion);
  w.u32(static_cast<std::uint32_t>(ds.num_classes));
  w.u32(static_cast<std::uint32_t>(ds.instance_shape.channels));
  w.u32(static_cast<std::uint32_t>(ds.instance_shape.height));
  w.u32(static_cast<std::uint32_t>(ds.instance_shape.width));
  w.u64(ds.bags.size());
  for (const Bag& b : ds.bags) {
    if (b.instance_shape() != ds.instance_shape) {
      throw DimensionError("bag '" + b.id + "' has instance shape " + b.instance_shape().str() +
                           ", dataset declares " + ds.instance_shape.str());
    }
    w.str32(b.id);
    w.str32(b.patient_id);
    w.u32(static_cast<std::uint32_t>(b.label));
    w.u32(static_cast<std::uint32_t>(b.size()));
    w.f64s(std::span<const double>(b.instances.data().data(), static_cast<std::size_t>(b.instances.numel())));
  }
  if (ds.landmarks) {
    if (ds.landmarks->size() != ds.bags.size()) throw DimensionError("landmark annotations do not match bag count");
    w.bytes(kLandmarkMagic);
    for (std::size_t i = 0; i < ds.bags.size(); ++i) {
      const LandmarkMask& m = (*ds.landmarks)[i];
      if (static_cast<Index>(m.size()) != ds.bags[i].size()) {
        throw DimensionError("landmark mask size does not match bag '" + ds.bags[i].id + "'");
      }
      std::string bits((m.size() + 7) / 8, '\0');
      for (std::size_t j = 0; j < m.size(); ++j) {
        if (m[j]) bits[j / 8] = static_cast<char>(bits[j / 8] | (1 << (j % 8)));
      }
      w.bytes(bits);
    }
  }
  return w.take();
}

Dataset decode_bagfile(std::string_view bytes) {
  binio::Reader r(bytes);
  r.expect(kBagMagic, "bag file magic");
  const auto version_at = r.offset();
  if (const auto v = r.u32("version"); v != kBagVersion) {
    throw FormatError(version_at, "unsupported bag file version " + std::to_string(v));
  }
  Dataset ds;
  const auto header_at = r.offset();
  ds.num_classes = r.u32("class count");
  ds.instance_shape.channels = r.u32("channels");
  ds.instance_shape.height = r.u32("height");
  ds.instance_shape.width = r.u32("width");
  if (ds.num_classes < 1 || ds.instance_shape.numel() == 0) {
    throw FormatError(header_at, "header declares an empty class set or instance shape");
  }
  const std::uint64_t count = r.u64("bag count");
  const Index d = ds.instance_shape.numel();

  for (std::uint64_t i = 0; i < count; ++i) {
    Bag b;
    b.id = r.str32("bag id");
    b.patient_id = r.str32("patient id");
    const auto label_at = r.offset();
    b.label = r.u32("label");
    if (b.label >= ds.num_classes) {
      throw FormatError(label_at, "label " + std::to_string(b.label) + " outside [0," +
                                      std::to_string(ds.num_classes) + ") in bag '" + b.id + "'");
    }
    const auto n_at = r.offset();
    const Index n = r.u32("instance count");
    if (n < 1) throw FormatError(n_at, "bag '" + b.id + "' has no instances");
    if (static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(d) * 8 > r.remaining()) {
      throw FormatError(r.offset(), "truncated instance data in bag '" + b.id + "'");
    }
    b.instances = Tensor({n, ds.instance_shape.channels, ds.instance_shape.height, ds.instance_shape.width});
    r.f64s(std::span<double>(b.instances.data().data(), static_cast<std::size_t>(b.instances.numel())),
           "instance data");
    ds.bags.push_back(std::move(b));
  }

  if (!r.at_end()) {
    r.expect(kLandmarkMagic, "trailer magic");
    ds.landmarks.emplace();
    for (const Bag& b : ds.bags) {
      const auto n = static_cast<std::size_t>(b.size());
      const std::string_view bits = r.bytes((n + 7) / 8, "landmark bitmap");
      LandmarkMask m(n, 0);
      for (std::size_t j = 0; j < n; ++j) m[j] = (static_cast<unsigned char>(bits[j / 8]) >> (j % 8)) & 1U;
      ds.landmarks->push_back(std::move(m));
    }
    if (!r.at_end()) r.fail("unexpected bytes after landmark trailer");
  }
  return ds;
}

void write_bagfile(const Dataset& ds, const std::string& path) { binio::write_file(path, encode_bagfile(ds)); }

Dataset read_bagfile(const std::string& path) { return decode_bagfile(binio::read_file(path)); }

// Folds ---------------------------------------------------------------------------------

std::vector<std::pair<std::string, Index>> patients_of(const Dataset& ds) {
  std::vector<std::pair<std::string, Index>> out;
  std::map<std::string, Index> label_of;
  for (const Bag& b : ds.bags) {
    auto [it, inserted] = label_of.emplace(b.patient_id, b.label);
    if (inserted) {
      out.emplace_back(b.patient_id, b.label);
    } else if (it->second != b.label) {
      throw ConfigError("patient '" + b.patient_id + "' has bags of classes " + std::to_string(it->second) +
                        " and " + std::to_string(b.label));
    }
  }
  return out;
}

std::vector<Index> FoldAssignment::validation_bags(Index fold) const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < bag_fold.size(); ++i) {
    if (bag_fold[i] == fold) out.push_back(static_cast<Index>(i));
  }
  return out;
}

std::vector<Index> FoldAssignment::training_bags(Index fold) const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < bag_fold.size(); ++i) {
    if (bag_fold[i] != fold || folds == 1) out.push_back(static_cast<Index>(i));
  }
  return out;
}

FoldAssignment split_patientwise(const Dataset& ds, Index folds, std::uint64_t seed) {
  if (folds < 1) throw ArgumentError("folds must be >= 1");
  const auto patients = patients_of(ds);
  std::vector<std::vector<std::string>> by_class(static_cast<std::size_t>(ds.num_classes));
  for (const auto& [id, label] : patients) by_class[static_cast<std::size_t>(label)].push_back(id);

  FoldAssignment fa;
  fa.folds = folds;
  const Rng root(seed);
  Index next = 0;
  for (Index k = 0; k < ds.num_classes; ++k) {
    auto& ids = by_class[static_cast<std::size_t>(k)];
    if (static_cast<Index>(ids.size()) < folds) {
      throw ConfigError("class " + std::to_string(k) + " has " + std::to_string(ids.size()) +
                        " patients, fewer than the " + std::to_string(folds) + " folds requested");
    }
    Rng rng = root.split(static_cast<std::uint64_t>(k));
    rng.shuffle(std::span<std::string>(ids));
    // Continue the deal where the previous class stopped to balance fold sizes.
    for (const auto& id : ids) {
      fa.patient_fold[id] = next;
      next = (next + 1) % folds;
    }
  }
  fa.bag_fold.reserve(ds.bags.size());
  for (const Bag& b : ds.bags) fa.bag_fold.push_back(fa.patient_fold.at(b.patient_id));
  return fa;
}

}  // namespace attmil
