#include "attmil/checkpoint.hpp"

#include "attmil/binio.hpp"
#include "attmil/errors.hpp"

namespace attmil {

std::string encode_checkpoint(const Checkpoint& ckpt) {
  binio::Writer w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  const std::string cfg = to_json(ckpt.config).dump();
  w.u64(cfg.size());
  w.bytes(cfg);
  for (const auto& e : ckpt.params.entries()) {
    w.str32(e.name);
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (Index d : e.value.shape()) w.u64(static_cast<std::uint64_t>(d));
    w.f64s(std::span<const double>(e.value.data().data(), static_cast<std::size_t>(e.value.numel())));
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  binio::Reader r(bytes);
  r.expect(kCheckpointMagic, "checkpoint magic");
  const auto version_at = r.offset();
  if (const auto v = r.u32("version"); v != kCheckpointVersion) {
    throw FormatError(version_at, "unsupported checkpoint version " + std::to_string(v));
  }
  const auto cfg_at = r.offset();
  const std::uint64_t cfg_len = r.u64("config length");
  const std::string_view cfg_text = r.bytes(cfg_len, "config");

  Checkpoint ckpt;
  try {
    ckpt.config = model_config_from_json(nlohmann::json::parse(cfg_text));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(cfg_at, std::string("config is not valid JSON: ") + e.what());
  }

  while (!r.at_end()) {
    std::string name = r.str32("parameter name");
    const std::uint32_t rank = r.u32("parameter rank");
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank) + " for '" + name + "'");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = r.u64("parameter extent");
      if (d == 0 || d > (1ULL << 40)) r.fail("bad extent for '" + name + "'");
      shape.push_back(static_cast<Index>(d));
    }
    Tensor t(shape);
    r.f64s(std::span<double>(t.data().data(), static_cast<std::size_t>(t.numel())), "parameter data");
    ckpt.params.add(std::move(name), std::move(t));
  }
  ckpt.config.validate();
  ckpt.params.check_against(ckpt.config);
  return ckpt;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  binio::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(binio::read_file(path)); }

}  // namespace attmil
