#include "relush/checkpoint.hpp"

#include <cstring>

#include "relush/common.hpp"
#include "relush/config.hpp"

namespace relush {

namespace {

constexpr char kMagic[4] = {'R', 'L', 'S', 'H'};

template <typename T>
void put_le(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T read() {
    if (pos_ + sizeof(T) > bytes_.size()) {
      throw FormatError("checkpoint truncated");
    }
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string read_str(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw FormatError("checkpoint truncated");
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string Checkpoint::to_bytes() const {
  std::string out;
  out.append(kMagic, 4);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint64_t>(out, meta_json.size());
  out += meta_json;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    if (t.name.size() > 0xffff) throw FormatError("tensor name too long");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    std::size_t count = 1;
    for (int d : t.shape) {
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
      count *= static_cast<std::size_t>(d);
    }
    if (count != t.values.size()) {
      throw FormatError("tensor '" + t.name + "' shape/data mismatch");
    }
    for (double v : t.values) put_le<double>(out, v);
  }
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(gates.size()));
  for (const GateEntry& g : gates) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(g.layer_index));
    put_le<std::uint64_t>(out, g.spec_json.size());
    out += g.spec_json;
  }
  return out;
}

Checkpoint Checkpoint::from_bytes(const std::string& bytes) {
  Reader r(bytes);
  const std::string magic = r.read_str(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw FormatError("bad checkpoint magic (not an RLSH file)");
  }
  const auto version = r.read<std::uint32_t>();
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " +
                      std::to_string(version));
  }
  Checkpoint ckpt;
  const auto meta_len = r.read<std::uint64_t>();
  ckpt.meta_json = r.read_str(static_cast<std::size_t>(meta_len));
  const auto n_tensors = r.read<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    NamedTensor t;
    const auto name_len = r.read<std::uint16_t>();
    t.name = r.read_str(name_len);
    const auto ndim = r.read<std::uint8_t>();
    std::size_t count = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      const auto extent = r.read<std::uint32_t>();
      if (extent == 0) throw FormatError("zero tensor extent in checkpoint");
      t.shape.push_back(static_cast<int>(extent));
      count *= extent;
    }
    t.values.resize(count);
    for (std::size_t j = 0; j < count; ++j) t.values[j] = r.read<double>();
    ckpt.tensors.push_back(std::move(t));
  }
  const auto n_gates = r.read<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_gates; ++i) {
    GateEntry g;
    g.layer_index = static_cast<int>(r.read<std::uint32_t>());
    const auto len = r.read<std::uint64_t>();
    g.spec_json = r.read_str(static_cast<std::size_t>(len));
    ckpt.gates.push_back(std::move(g));
  }
  if (!r.done()) throw FormatError("trailing bytes in checkpoint");
  return ckpt;
}

void Checkpoint::save(const std::string& path) const {
  write_file_atomic(path, to_bytes());
}

Checkpoint Checkpoint::load(const std::string& path) {
  return from_bytes(read_file(path));
}

const Checkpoint::NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

}  // namespace relush
