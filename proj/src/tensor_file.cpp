#include "apbface/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "apbface/error.hpp"

static_assert(std::endian::native == std::endian::little, "APBT I/O assumes a little-endian host");

namespace apb {

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::U8: return 1;
    case DType::I64: return 8;
  }
  throw IoError("unknown dtype code");
}

std::size_t ArrayRecord::numel() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

template <typename T>
ArrayRecord make_record(DType dt, std::span<const T> v, std::vector<std::uint64_t> shape) {
  ArrayRecord r;
  r.dtype = dt;
  r.shape = std::move(shape);
  if (r.numel() != v.size()) throw ConfigError("array record: shape does not match element count");
  r.bytes.resize(v.size_bytes());
  if (!v.empty()) std::memcpy(r.bytes.data(), v.data(), v.size_bytes());
  return r;
}

template <typename Out, typename In>
std::vector<Out> convert(const std::vector<std::uint8_t>& bytes, std::size_t n) {
  std::vector<Out> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    In x;
    std::memcpy(&x, bytes.data() + i * sizeof(In), sizeof(In));
    out[i] = static_cast<Out>(x);
  }
  return out;
}

template <typename Out>
std::vector<Out> convert_any(const ArrayRecord& r) {
  switch (r.dtype) {
    case DType::F32: return convert<Out, float>(r.bytes, r.numel());
    case DType::F64: return convert<Out, double>(r.bytes, r.numel());
    case DType::U8: return convert<Out, std::uint8_t>(r.bytes, r.numel());
    case DType::I64: return convert<Out, std::int64_t>(r.bytes, r.numel());
  }
  throw IoError("unknown dtype code");
}

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> d) : data_(d) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IoError("APBT: truncated data");
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace

ArrayRecord ArrayRecord::from_f64(std::span<const double> v, std::vector<std::uint64_t> shape) {
  return make_record(DType::F64, v, std::move(shape));
}
ArrayRecord ArrayRecord::from_f32(std::span<const float> v, std::vector<std::uint64_t> shape) {
  return make_record(DType::F32, v, std::move(shape));
}
ArrayRecord ArrayRecord::from_u8(std::span<const std::uint8_t> v, std::vector<std::uint64_t> shape) {
  return make_record(DType::U8, v, std::move(shape));
}
ArrayRecord ArrayRecord::from_i64(std::span<const std::int64_t> v, std::vector<std::uint64_t> shape) {
  return make_record(DType::I64, v, std::move(shape));
}
ArrayRecord ArrayRecord::from_string(const std::string& s) {
  std::span<const std::uint8_t> v(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
  return from_u8(v, {s.size()});
}

std::vector<double> ArrayRecord::to_f64() const { return convert_any<double>(*this); }
std::vector<float> ArrayRecord::to_f32() const { return convert_any<float>(*this); }
std::vector<std::int64_t> ArrayRecord::to_i64() const { return convert_any<std::int64_t>(*this); }
std::string ArrayRecord::to_string() const {
  if (dtype != DType::U8) throw IoError("APBT: string record must be u8");
  return std::string(bytes.begin(), bytes.end());
}

std::vector<std::uint8_t> encode_bundle(const ArrayBundle& bundle) {
  std::vector<std::uint8_t> out{'A', 'P', 'B', 'T'};
  put<std::uint32_t>(out, 1);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(bundle.size()));
  for (const auto& [name, rec] : bundle) {
    if (name.size() > 0xFFFF) throw IoError("APBT: record name too long");
    if (rec.shape.size() > 0xFF) throw IoError("APBT: rank too large");
    if (rec.bytes.size() != rec.numel() * dtype_size(rec.dtype)) {
      throw IoError("APBT: payload size mismatch for '" + name + "'");
    }
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(rec.dtype));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(rec.shape.size()));
    for (auto d : rec.shape) put<std::uint64_t>(out, d);
    out.insert(out.end(), rec.bytes.begin(), rec.bytes.end());
  }
  return out;
}

ArrayBundle decode_bundle(std::span<const std::uint8_t> data) {
  Reader rd(data);
  auto magic = rd.take(4);
  if (std::memcmp(magic.data(), "APBT", 4) != 0) throw IoError("APBT: bad magic");
  if (rd.get<std::uint32_t>() != 1) throw IoError("APBT: unsupported version");
  const auto count = rd.get<std::uint32_t>();
  ArrayBundle out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = rd.get<std::uint16_t>();
    auto name_bytes = rd.take(name_len);
    std::string name(name_bytes.begin(), name_bytes.end());
    ArrayRecord rec;
    const auto code = rd.get<std::uint8_t>();
    if (code < 1 || code > 4) throw IoError("APBT: unknown dtype code");
    rec.dtype = static_cast<DType>(code);
    const auto rank = rd.get<std::uint8_t>();
    for (int k = 0; k < rank; ++k) rec.shape.push_back(rd.get<std::uint64_t>());
    auto payload = rd.take(rec.numel() * dtype_size(rec.dtype));
    rec.bytes.assign(payload.begin(), payload.end());
    out.emplace(std::move(name), std::move(rec));
  }
  if (!rd.done()) throw IoError("APBT: trailing bytes");
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void save_bundle(const std::filesystem::path& path, const ArrayBundle& bundle) {
  write_file_bytes(path, encode_bundle(bundle));
}

ArrayBundle load_bundle(const std::filesystem::path& path) { return decode_bundle(read_file_bytes(path)); }

const ArrayRecord& require(const ArrayBundle& bundle, const std::string& name) {
  auto it = bundle.find(name);
  if (it == bundle.end()) throw IoError("APBT: missing record '" + name + "'");
  return it->second;
}

}  // namespace apb
