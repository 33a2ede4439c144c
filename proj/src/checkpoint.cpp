#include "fpq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "fpq/error.hpp"

namespace fpq {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in host order");

namespace {

constexpr char kMagic[4] = {'F', 'P', 'Q', 'C'};

template <typename T>
std::vector<std::uint8_t> to_bytes(std::span<const T> values) {
  std::vector<std::uint8_t> out(values.size_bytes());
  if (!out.empty()) std::memcpy(out.data(), values.data(), out.size());
  return out;
}

template <typename T>
std::vector<T> from_bytes(const CheckpointEntry& e) {
  std::vector<T> out(e.bytes.size() / sizeof(T));
  if (!out.empty()) std::memcpy(out.data(), e.bytes.data(), out.size() * sizeof(T));
  return out;
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::F32: return 4;
    case DType::I32: return 4;
    case DType::U8: return 1;
    case DType::I64: return 8;
  }
  return 0;
}

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out.insert(out.end(), p, p + n);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  template <typename T>
  T pod(const char* what) {
    T v;
    std::memcpy(&v, take(sizeof(T), what), sizeof(T));
    return v;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_) throw ParseError(std::string("checkpoint truncated while reading ") + what, pos_);
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::put(const std::string& name, const Tensor& t) { put_floats(name, t.shape(), t.data()); }

void Checkpoint::put_floats(const std::string& name, const Shape& shape, std::span<const float> values) {
  entries_[name] = {DType::F32, shape, to_bytes(values)};
}

void Checkpoint::put_ints(const std::string& name, const std::vector<std::int32_t>& values) {
  entries_[name] = {DType::I32, {static_cast<std::int64_t>(values.size())},
                    to_bytes(std::span<const std::int32_t>(values))};
}

void Checkpoint::put_i64(const std::string& name, std::int64_t value) {
  entries_[name] = {DType::I64, {1}, to_bytes(std::span<const std::int64_t>(&value, 1))};
}

void Checkpoint::put_string(const std::string& name, const std::string& value) {
  entries_[name] = {DType::U8, {static_cast<std::int64_t>(value.size())},
                    std::vector<std::uint8_t>(value.begin(), value.end())};
}

const CheckpointEntry& Checkpoint::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("checkpoint has no entry '" + name + "'");
  return it->second;
}

Tensor Checkpoint::tensor(const std::string& name) const {
  const auto& e = entry(name);
  if (e.dtype != DType::F32) throw Error("checkpoint entry '" + name + "' is not f32");
  return Tensor::from(e.shape, from_bytes<float>(e));
}

std::vector<std::int32_t> Checkpoint::ints(const std::string& name) const {
  const auto& e = entry(name);
  if (e.dtype != DType::I32) throw Error("checkpoint entry '" + name + "' is not i32");
  return from_bytes<std::int32_t>(e);
}

std::int64_t Checkpoint::i64(const std::string& name) const {
  const auto& e = entry(name);
  if (e.dtype != DType::I64 || e.bytes.size() != 8) throw Error("checkpoint entry '" + name + "' is not an i64 scalar");
  return from_bytes<std::int64_t>(e)[0];
}

std::string Checkpoint::str(const std::string& name) const {
  const auto& e = entry(name);
  if (e.dtype != DType::U8) throw Error("checkpoint entry '" + name + "' is not a byte string");
  return {e.bytes.begin(), e.bytes.end()};
}

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  Writer w;
  w.pod(kCheckpointVersion);
  w.raw(kMagic, 4);
  w.pod(static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, e] : entries_) {
    w.pod(static_cast<std::uint32_t>(name.size()));
    w.raw(name.data(), name.size());
    w.pod(static_cast<std::uint8_t>(e.dtype));
    w.pod(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) w.pod(static_cast<std::int64_t>(d));
    w.pod(static_cast<std::uint64_t>(e.bytes.size()));
    w.raw(e.bytes.data(), e.bytes.size());
  }
  return std::move(w.out);
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto version = r.pod<std::uint8_t>("version");
  if (version != kCheckpointVersion) {
    throw VersionError("incompatible checkpoint version " + std::to_string(version) + " (this build reads version " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t magic_at = r.pos();
  if (std::memcmp(r.take(4, "magic"), kMagic, 4) != 0) throw ParseError("not a checkpoint file (bad magic)", magic_at);
  const auto count = r.pod<std::uint32_t>("entry count");
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.pod<std::uint32_t>("name length");
    const auto* name = r.take(len, "name");
    CheckpointEntry e;
    const std::size_t dtype_at = r.pos();
    const auto dtype = r.pod<std::uint8_t>("dtype");
    if (dtype > 3) throw ParseError("unknown dtype tag " + std::to_string(dtype), dtype_at);
    e.dtype = static_cast<DType>(dtype);
    const auto ndim = r.pod<std::uint8_t>("rank");
    for (int d = 0; d < ndim; ++d) e.shape.push_back(r.pod<std::int64_t>("dims"));
    const std::size_t size_at = r.pos();
    const auto size = r.pod<std::uint64_t>("payload length");
    if (static_cast<std::uint64_t>(shape_numel(e.shape)) * dtype_size(e.dtype) != size) {
      throw ParseError("payload length does not match shape " + shape_str(e.shape), size_at);
    }
    const auto* payload = r.take(size, "payload");
    e.bytes.assign(payload, payload + size);
    ckpt.entries_[std::string(reinterpret_cast<const char*>(name), len)] = std::move(e);
  }
  return ckpt;
}

void Checkpoint::save(const std::string& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint '" + path + "'");
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

namespace {

void put_spec(Checkpoint& ckpt, const std::string& key, const QuantSpec& spec) {
  if (!spec.scale.defined()) return;
  ckpt.put(key + ".scale", spec.scale);
  ckpt.put_ints(key + ".zero_point", spec.zero_point);
  ckpt.put_ints(key + ".meta", {spec.bits, static_cast<int>(spec.granularity), static_cast<int>(spec.mode),
                                spec.scale.requires_grad() ? 1 : 0});
}

void get_spec(const Checkpoint& ckpt, const std::string& key, QuantSpec& spec) {
  if (!ckpt.has(key + ".scale")) return;
  auto meta = ckpt.ints(key + ".meta");
  if (meta.size() != 4) throw Error("checkpoint entry '" + key + ".meta' is malformed");
  spec.bits = meta[0];
  spec.granularity = static_cast<Granularity>(meta[1]);
  spec.mode = static_cast<QuantMode>(meta[2]);
  spec.scale = ckpt.tensor(key + ".scale");
  spec.scale.set_requires_grad(meta[3] != 0);
  spec.zero_point = ckpt.ints(key + ".zero_point");
}

void load_into(const Checkpoint& ckpt, const std::string& key, Tensor& dst) {
  Tensor src = ckpt.tensor(key);
  if (src.shape() != dst.shape()) {
    throw ShapeError("checkpoint entry '" + key + "' has shape " + shape_str(src.shape()) + ", model expects " +
                     shape_str(dst.shape()));
  }
  auto s = src.data();
  std::copy(s.begin(), s.end(), dst.mutable_data().begin());
}

}  // namespace

void save_model(Checkpoint& ckpt, const LayeredModel& model, const std::string& prefix) {
  const auto& c = model.config;
  ckpt.put_string(prefix + "arch", to_string(c.arch));
  ckpt.put_ints(prefix + "config",
                {static_cast<int>(c.in_channels), static_cast<int>(c.num_classes), static_cast<int>(c.width),
                 c.quantized ? 1 : 0, c.weight_bits, c.activation_bits, c.keep_edges_8bit ? 1 : 0,
                 model.calibrated ? 1 : 0, static_cast<int>(model.activation)});
  ckpt.put_i64(prefix + "seed", static_cast<std::int64_t>(c.seed));
  for (const auto& u : model.convs) {
    const std::string key = prefix + u.name;
    ckpt.put(key + ".weight", u.weight);
    ckpt.put(key + ".gamma", u.gamma);
    ckpt.put(key + ".beta", u.beta);
    put_spec(ckpt, key + ".weight_q", u.weight_q);
    put_spec(ckpt, key + ".activation_q", u.activation_q);
  }
  ckpt.put(prefix + "fc.weight", model.fc.weight);
  ckpt.put(prefix + "fc.bias", model.fc.bias);
  put_spec(ckpt, prefix + "fc.weight_q", model.fc.weight_q);
  put_spec(ckpt, prefix + "fc.activation_q", model.fc.activation_q);
}

LayeredModel load_model(const Checkpoint& ckpt, const std::string& prefix) {
  auto cfg = ckpt.ints(prefix + "config");
  if (cfg.size() != 9) throw Error("checkpoint entry '" + prefix + "config' is malformed");
  ModelConfig config;
  config.arch = arch_from_string(ckpt.str(prefix + "arch"));
  config.in_channels = cfg[0];
  config.num_classes = cfg[1];
  config.width = cfg[2];
  config.quantized = cfg[3] != 0;
  config.weight_bits = cfg[4];
  config.activation_bits = cfg[5];
  config.keep_edges_8bit = cfg[6] != 0;
  config.seed = static_cast<std::uint64_t>(ckpt.i64(prefix + "seed"));
  LayeredModel model = build(config);
  model.calibrated = cfg[7] != 0;
  model.activation = static_cast<Activation>(cfg[8]);
  for (auto& u : model.convs) {
    const std::string key = prefix + u.name;
    load_into(ckpt, key + ".weight", u.weight);
    load_into(ckpt, key + ".gamma", u.gamma);
    load_into(ckpt, key + ".beta", u.beta);
    get_spec(ckpt, key + ".weight_q", u.weight_q);
    get_spec(ckpt, key + ".activation_q", u.activation_q);
  }
  load_into(ckpt, prefix + "fc.weight", model.fc.weight);
  load_into(ckpt, prefix + "fc.bias", model.fc.bias);
  get_spec(ckpt, prefix + "fc.weight_q", model.fc.weight_q);
  get_spec(ckpt, prefix + "fc.activation_q", model.fc.activation_q);
  return model;
}

}  // namespace fpq
