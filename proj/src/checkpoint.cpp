#include "more/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "more/errors.hpp"

namespace more {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename T>
void put_raw(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_str(std::string& out, const std::string& s) {
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T raw() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = raw<std::uint32_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void bytes(std::vector<unsigned char>& out, std::size_t n) {
    need(n);
    out.assign(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw SchemaError("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

template <typename S>
constexpr std::uint8_t dtype_of() {
  return sizeof(S) == 4 ? 0 : 1;
}

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& path) const {
  for (const auto& t : tensors)
    if (t.path == path) return &t;
  return nullptr;
}

const std::string& Checkpoint::get(const std::string& key) const {
  const auto it = meta.find(key);
  if (it == meta.end()) throw SchemaError("checkpoint has no metadata key " + key);
  return it->second;
}

template <typename S>
void Checkpoint::put(const std::string& path, const Tensor<S>& t) {
  CheckpointTensor rec;
  rec.path = path;
  rec.dtype = dtype_of<S>();
  rec.shape = t.shape();
  rec.data.resize(static_cast<std::size_t>(t.size()) * sizeof(S));
  if (t.size() > 0) std::memcpy(rec.data.data(), t.value().data(), rec.data.size());
  tensors.push_back(std::move(rec));
}

template <typename S>
void Checkpoint::read_into(const std::string& path, Tensor<S>& t) const {
  const CheckpointTensor* rec = find(path);
  if (!rec) throw SchemaError("checkpoint has no tensor " + path);
  if (rec->shape != t.shape())
    throw SchemaError("shape mismatch for " + path + ": stored " + shape_str(rec->shape) + ", expected " +
                      shape_str(t.shape()));
  auto& dst = t.mutable_value();
  const auto n = static_cast<std::size_t>(dst.size());
  if (rec->dtype == 0) {
    if (rec->data.size() != n * 4) throw SchemaError("bad payload size for " + path);
    for (std::size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, rec->data.data() + i * 4, 4);
      dst[static_cast<Index>(i)] = static_cast<S>(f);
    }
  } else if (rec->dtype == 1) {
    if (rec->data.size() != n * 8) throw SchemaError("bad payload size for " + path);
    for (std::size_t i = 0; i < n; ++i) {
      double d;
      std::memcpy(&d, rec->data.data() + i * 8, 8);
      dst[static_cast<Index>(i)] = static_cast<S>(d);
    }
  } else {
    throw SchemaError("unknown dtype for " + path);
  }
}

void save_checkpoint(const std::filesystem::path& file, const Checkpoint& ckpt) {
  std::string out = "MORE";
  put_raw<std::uint32_t>(out, kCheckpointVersion);
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.meta.size()));
  for (const auto& [k, v] : ckpt.meta) {
    put_str(out, k);
    put_str(out, v);
  }
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    put_str(out, t.path);
    put_raw<std::uint8_t>(out, t.dtype);
    put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (Index e : t.shape) put_raw<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size());
  }
  std::ofstream f(file, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingFileError("cannot write " + file.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw MissingFileError("write failed for " + file.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream f(file, std::ios::binary);
  if (!f) throw MissingFileError("no such checkpoint: " + file.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || bytes.compare(0, 4, "MORE") != 0) throw SchemaError("not a checkpoint: " + file.string());
  Reader r(bytes);
  r.raw<std::uint32_t>();
  if (r.raw<std::uint32_t>() != kCheckpointVersion) throw SchemaError("unsupported checkpoint version");
  Checkpoint ckpt;
  const auto n_meta = r.raw<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    ckpt.meta[k] = r.str();
  }
  const auto n_tensors = r.raw<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    CheckpointTensor t;
    t.path = r.str();
    t.dtype = r.raw<std::uint8_t>();
    if (t.dtype > 1) throw SchemaError("unknown dtype for " + t.path);
    const auto rank = r.raw<std::uint32_t>();
    std::uint64_t count = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto e = r.raw<std::uint64_t>();
      t.shape.push_back(static_cast<Index>(e));
      count *= e;
    }
    r.bytes(t.data, static_cast<std::size_t>(count) * (t.dtype == 0 ? 4 : 8));
    ckpt.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw SchemaError("trailing bytes in checkpoint");
  return ckpt;
}

std::string digest_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = hex[h & 0xF];
  return out;
}

template <typename S>
void put_params(Checkpoint& ckpt, const ParamList<S>& params, const std::string& prefix) {
  for (const auto& p : params) ckpt.put(prefix + p.path, p.tensor);
}

template <typename S>
void read_params(const Checkpoint& ckpt, ParamList<S>& params, const std::string& prefix) {
  for (auto& p : params) ckpt.read_into(prefix + p.path, p.tensor);
}

template void Checkpoint::put<float>(const std::string&, const Tensor<float>&);
template void Checkpoint::put<double>(const std::string&, const Tensor<double>&);
template void Checkpoint::read_into<float>(const std::string&, Tensor<float>&) const;
template void Checkpoint::read_into<double>(const std::string&, Tensor<double>&) const;
template void put_params<float>(Checkpoint&, const ParamList<float>&, const std::string&);
template void put_params<double>(Checkpoint&, const ParamList<double>&, const std::string&);
template void read_params<float>(const Checkpoint&, ParamList<float>&, const std::string&);
template void read_params<double>(const Checkpoint&, ParamList<double>&, const std::string&);

}  // namespace more
