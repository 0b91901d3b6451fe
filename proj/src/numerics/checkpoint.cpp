#include "vipa/numerics/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace vipa {

namespace {

constexpr char kMagic[5] = {'V', 'I', 'P', 'A', '1'};

template <typename U>
void put_le(std::vector<char>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(std::string("checkpoint truncated reading ") + what + " at byte " + std::to_string(pos_));
    }
  }

  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::vector<char> out(std::begin(kMagic), std::end(kMagic));
  out.push_back(static_cast<char>(ckpt.precision));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    if (shape_numel(e.shape) != e.values.size()) throw CheckpointError("entry " + e.name + " shape/value mismatch");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) put_le<std::uint64_t>(out, d);
    for (double v : e.values) {
      if (ckpt.precision == Precision::f32) {
        put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes));
  const auto magic = r.get_string(sizeof(kMagic), "magic");
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a VIPA1 checkpoint (bad magic): " + path.string());
  }
  Checkpoint ckpt;
  const auto prec = r.get<std::uint8_t>("precision flag");
  if (prec != 4 && prec != 8) throw CheckpointError("unknown precision flag " + std::to_string(prec));
  ckpt.precision = static_cast<Precision>(prec);
  const auto count = r.get<std::uint32_t>("entry count");
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    const auto name_len = r.get<std::uint32_t>("name length");
    e.name = r.get_string(name_len, "name");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw CheckpointError("implausible rank for " + e.name + " at byte " + std::to_string(r.pos()));
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(r.get<std::uint64_t>("dims"));
    const auto n = shape_numel(e.shape);
    e.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      e.values[i] = ckpt.precision == Precision::f32
                        ? static_cast<double>(std::bit_cast<float>(r.get<std::uint32_t>("values")))
                        : std::bit_cast<double>(r.get<std::uint64_t>("values"));
    }
    ckpt.entries.push_back(std::move(e));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint entries at byte " + std::to_string(r.pos()));
  return ckpt;
}

template <typename T>
Checkpoint snapshot_parameters(const ParameterList<T>& params) {
  Checkpoint ckpt;
  ckpt.precision = precision_of<T>();
  for (const auto& e : params.entries()) {
    ckpt.entries.push_back({e.name, e.tensor.shape(), {e.tensor.values().begin(), e.tensor.values().end()}});
  }
  return ckpt;
}

template <typename T>
void restore_parameters(ParameterList<T>& params, const Checkpoint& ckpt) {
  for (const auto& e : params.entries()) {
    const auto* src = ckpt.find(e.name);
    if (!src) throw CheckpointError("checkpoint lacks parameter " + e.name + " (model/config mismatch)");
    if (src->shape != e.tensor.shape()) {
      throw CheckpointError("parameter " + e.name + " has shape " + shape_string(src->shape) + " in checkpoint but " +
                            shape_string(e.tensor.shape()) + " in model");
    }
    Tensor<T> t = e.tensor;
    auto dst = t.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src->values[i]);
  }
}

template Checkpoint snapshot_parameters(const ParameterList<float>&);
template Checkpoint snapshot_parameters(const ParameterList<double>&);
template void restore_parameters(ParameterList<float>&, const Checkpoint&);
template void restore_parameters(ParameterList<double>&, const Checkpoint&);

}  // namespace vipa
