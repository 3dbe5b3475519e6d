#include "ekd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace ekd::io {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

DType CheckpointEntry::dtype() const {
  return std::holds_alternative<std::vector<float>>(values) ? DType::float32 : DType::float64;
}

std::size_t CheckpointEntry::numel() const {
  return std::visit([](const auto& v) { return v.size(); }, values);
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

namespace {

class Writer {
 public:
  template <typename U>
  void put(U value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}
  template <typename U>
  U get(const char* what) {
    U value;
    take(&value, sizeof(U), what);
    return value;
  }
  void take(void* out, std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
    }
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
  Writer w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(checkpoint.version);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(checkpoint.entries.size()));
  for (const auto& e : checkpoint.entries) {
    if (ad::shape_numel(e.shape) != e.numel()) {
      throw CheckpointError("entry '" + e.name + "' has " + std::to_string(e.numel()) +
                            " values for shape " + ad::shape_str(e.shape));
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
    w.put_bytes(e.name.data(), e.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.dtype()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.put<std::uint64_t>(d);
    std::visit([&](const auto& v) { w.put_bytes(v.data(), v.size() * sizeof(v[0])); }, e.values);
  }
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[4];
  r.take(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw CheckpointError("not an EKD1 checkpoint (bad magic)");
  }
  Checkpoint ck;
  ck.version = r.get<std::uint32_t>("version");
  if (ck.version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(ck.version));
  }
  const auto count = r.get<std::uint32_t>("entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto name_len = r.get<std::uint32_t>("name length");
    e.name.resize(name_len);
    r.take(e.name.data(), name_len, "name");
    const auto dtype = r.get<std::uint8_t>("dtype");
    const auto rank = r.get<std::uint32_t>("rank");
    for (std::uint32_t k = 0; k < rank; ++k) {
      e.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("dims")));
    }
    const std::size_t n = ad::shape_numel(e.shape);
    if (dtype == static_cast<std::uint8_t>(DType::float32)) {
      std::vector<float> v(n);
      r.take(v.data(), n * sizeof(float), "values");
      e.values = std::move(v);
    } else if (dtype == static_cast<std::uint8_t>(DType::float64)) {
      std::vector<double> v(n);
      r.take(v.data(), n * sizeof(double), "values");
      e.values = std::move(v);
    } else {
      throw CheckpointError("entry '" + e.name + "' has unknown dtype code " +
                            std::to_string(dtype));
    }
    ck.entries.push_back(std::move(e));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after last checkpoint entry");
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = encode_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

template <typename T>
Checkpoint make_checkpoint(const std::vector<nn::NamedTensor<T>>& tensors) {
  Checkpoint ck;
  for (const auto& t : tensors) {
    CheckpointEntry e;
    e.name = t.name;
    e.shape = t.tensor.shape();
    e.values = std::vector<T>(t.tensor.data().begin(), t.tensor.data().end());
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

template <typename T>
void load_into(const Checkpoint& checkpoint, const std::vector<nn::NamedTensor<T>>& tensors,
               bool allow_extra) {
  std::set<std::string> wanted;
  for (const auto& t : tensors) {
    wanted.insert(t.name);
    const CheckpointEntry* e = checkpoint.find(t.name);
    if (!e) throw CheckpointError("checkpoint lacks tensor '" + t.name + "'");
    if (e->shape != t.tensor.shape()) {
      throw CheckpointError("tensor '" + t.name + "' has shape " + ad::shape_str(e->shape) +
                            " in the checkpoint but " + ad::shape_str(t.tensor.shape()) +
                            " in the model");
    }
    auto dst = ad::Tensor<T>(t.tensor).mutable_data();
    std::visit(
        [&](const auto& v) {
          for (std::size_t i = 0; i < v.size(); ++i) dst[i] = static_cast<T>(v[i]);
        },
        e->values);
  }
  if (!allow_extra) {
    for (const auto& e : checkpoint.entries) {
      if (!wanted.count(e.name)) {
        throw CheckpointError("checkpoint tensor '" + e.name + "' has no counterpart in the model");
      }
    }
  }
}

template Checkpoint make_checkpoint(const std::vector<nn::NamedTensor<float>>&);
template Checkpoint make_checkpoint(const std::vector<nn::NamedTensor<double>>&);
template void load_into(const Checkpoint&, const std::vector<nn::NamedTensor<float>>&, bool);
template void load_into(const Checkpoint&, const std::vector<nn::NamedTensor<double>>&, bool);

}  // namespace ekd::io
