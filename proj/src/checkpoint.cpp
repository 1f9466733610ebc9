#include "casdiff/checkpoint.hpp"

#include "casdiff/io.hpp"
#include "casdiff/rng.hpp"

namespace casdiff {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'S', 'D', 'C', 'K', 'P', 'T'};

void write_tensor(ByteWriter& w, const std::string& name, const Tensor<float>& t) {
  w.string(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.floats(t.values());
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.bytes(std::string_view(kMagic, sizeof kMagic));
  w.u32(Checkpoint::kFormatVersion);
  nlohmann::json meta = ckpt.metadata;
  meta["optimizer_steps"] = ckpt.optimizer_steps;
  w.string(meta.dump());
  w.u32(static_cast<std::uint32_t>(ckpt.params.size() + ckpt.optimizer_state.size()));
  for (const auto& [name, t] : ckpt.params) write_tensor(w, name, t);
  for (const auto& [name, t] : ckpt.optimizer_state) write_tensor(w, "opt/" + name, t);
  const std::uint64_t sum = fnv1a64(w.str());
  w.u64(sum);
  return w.str();
}

Checkpoint parse_checkpoint(std::string_view bytes, const std::string& source) {
  if (bytes.size() < sizeof kMagic + 4 + 8 || bytes.substr(0, sizeof kMagic) != std::string_view(kMagic, sizeof kMagic))
    throw CorruptionError(source + ": not a checkpoint (bad header)");
  ByteReader header(bytes.substr(sizeof kMagic, 4), source);
  const std::uint32_t version = header.u32();
  if (version != Checkpoint::kFormatVersion)
    throw IncompatibleVersion(source + ": checkpoint format version " + std::to_string(version) + ", expected " +
                              std::to_string(Checkpoint::kFormatVersion));
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  ByteReader trailer(bytes.substr(bytes.size() - 8), source);
  if (trailer.u64() != fnv1a64(body)) throw CorruptionError(source + ": checksum mismatch");

  ByteReader r(body, source);
  r.bytes(sizeof kMagic + 4);
  Checkpoint ckpt;
  try {
    ckpt.metadata = nlohmann::json::parse(r.string());
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(source + ": bad metadata: " + e.what());
  }
  ckpt.optimizer_steps = ckpt.metadata.value("optimizer_steps", std::int64_t{0});
  ckpt.metadata.erase("optimizer_steps");
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.string();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CorruptionError(source + ": implausible tensor rank");
    std::vector<int> shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<int>(r.u32()));
    const std::size_t n = Tensor<float>::count(shape);
    if (n * 4 > body.size()) throw CorruptionError(source + ": truncated data");
    Tensor<float> t(shape);
    r.floats(t.values());
    if (name.rfind("opt/", 0) == 0)
      ckpt.optimizer_state.emplace_back(name.substr(4), std::move(t));
    else
      ckpt.params.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw CorruptionError(source + ": trailing bytes");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file(path), path.string());
}

Checkpoint make_checkpoint(const ParameterStore<float>& params, const Optimizer* optimizer, nlohmann::json metadata) {
  Checkpoint ckpt;
  ckpt.metadata = std::move(metadata);
  for (const auto& [name, var] : params.entries()) ckpt.params.emplace_back(name, var->value);
  if (optimizer) {
    ckpt.optimizer_state = optimizer->state();
    ckpt.optimizer_steps = optimizer->steps();
  }
  return ckpt;
}

void restore_parameters(const Checkpoint& ckpt, ParameterStore<float>& params) {
  const auto& entries = params.entries();
  if (entries.size() != ckpt.params.size())
    throw InvalidArgument("checkpoint has " + std::to_string(ckpt.params.size()) + " parameter tensors, model has " +
                          std::to_string(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].first != ckpt.params[i].first || entries[i].second->value.shape() != ckpt.params[i].second.shape())
      throw InvalidArgument("checkpoint parameter '" + ckpt.params[i].first + "' does not match model parameter '" +
                            entries[i].first + "'");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) entries[i].second->value = ckpt.params[i].second;
}

void restore_optimizer(const Checkpoint& ckpt, Optimizer& optimizer) {
  optimizer.load_state(ckpt.optimizer_state, ckpt.optimizer_steps);
}

}  // namespace casdiff
