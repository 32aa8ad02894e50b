#include "optimerge/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "optimerge/error.hpp"

namespace optimerge {

namespace {

using json = nlohmann::ordered_json;

constexpr std::uint64_t kMaxHeaderBytes = 100ull << 20;
constexpr std::string_view kMetadataKey = "__metadata__";

std::uint64_t load_le64(const std::byte* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<std::uint64_t>(p[i]);
  return v;
}

void store_le64(std::byte* p, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<std::byte>((v >> (8 * i)) & 0xff);
}

std::uint16_t load_le16(const std::byte* p) {
  return static_cast<std::uint16_t>(static_cast<unsigned>(p[0]) | (static_cast<unsigned>(p[1]) << 8));
}

void store_le16(std::byte* p, std::uint16_t v) {
  p[0] = static_cast<std::byte>(v & 0xff);
  p[1] = static_cast<std::byte>(v >> 8);
}

float load_f32(const std::byte* p) {
  std::uint32_t bits = 0;
  for (int i = 3; i >= 0; --i) bits = (bits << 8) | static_cast<std::uint32_t>(p[i]);
  return std::bit_cast<float>(bits);
}

void store_f32(std::byte* p, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) p[i] = static_cast<std::byte>((bits >> (8 * i)) & 0xff);
}

[[noreturn]] void malformed(const std::string& msg) { throw Error(Errc::MalformedHeader, msg); }

std::uint64_t checked_numel(const Shape& shape) {
  std::uint64_t n = 1;
  for (auto d : shape) {
    if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d) malformed("shape overflows 64 bits");
    n *= d;
  }
  return n;
}

TensorMeta parse_entry(const std::string& name, const json& entry) {
  if (name.empty()) malformed("empty tensor name");
  if (!entry.is_object()) malformed("entry for '" + name + "' is not an object");
  for (const auto& [key, _] : entry.items()) {
    if (key != "dtype" && key != "shape" && key != "data_offsets") {
      malformed("unknown field '" + key + "' in '" + name + "'");
    }
  }
  TensorMeta meta;
  meta.name = name;
  auto dt = entry.find("dtype");
  if (dt == entry.end() || !dt->is_string()) malformed("missing dtype for '" + name + "'");
  meta.dtype = parse_dtype(dt->get<std::string>());

  auto shape = entry.find("shape");
  if (shape == entry.end() || !shape->is_array()) malformed("missing shape for '" + name + "'");
  for (const auto& d : *shape) {
    if (!d.is_number_unsigned() && !(d.is_number_integer() && d.get<std::int64_t>() >= 0)) {
      malformed("bad dimension in shape of '" + name + "'");
    }
    meta.shape.push_back(d.get<std::uint64_t>());
  }

  auto offs = entry.find("data_offsets");
  if (offs == entry.end() || !offs->is_array() || offs->size() != 2) {
    malformed("missing data_offsets for '" + name + "'");
  }
  for (const auto& o : *offs) {
    if (!o.is_number_unsigned() && !(o.is_number_integer() && o.get<std::int64_t>() >= 0)) {
      malformed("bad data_offsets for '" + name + "'");
    }
  }
  meta.begin = (*offs)[0].get<std::uint64_t>();
  meta.end = (*offs)[1].get<std::uint64_t>();
  if (meta.end < meta.begin) malformed("data_offsets end < begin for '" + name + "'");

  const std::uint64_t numel = checked_numel(meta.shape);
  if (numel > std::numeric_limits<std::uint64_t>::max() / dtype_size(meta.dtype)) {
    malformed("byte size overflows for '" + name + "'");
  }
  if (meta.end - meta.begin != numel * dtype_size(meta.dtype)) {
    malformed("byte range of '" + name + "' does not match its shape and dtype");
  }
  return meta;
}

}  // namespace

std::string_view dtype_name(DType dt) noexcept {
  switch (dt) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
  }
  return "F32";
}

DType parse_dtype(std::string_view name) {
  if (name == "F32") return DType::F32;
  if (name == "F16") return DType::F16;
  if (name == "BF16") return DType::BF16;
  malformed("unknown dtype '" + std::string(name) + "'");
}

std::uint64_t shape_numel(const Shape& shape) { return checked_numel(shape); }

// --- scalar conversions --------------------------------------------------

std::uint16_t f32_to_bf16(float value) noexcept {
  auto x = std::bit_cast<std::uint32_t>(value);
  if ((x & 0x7fffffffu) > 0x7f800000u) return static_cast<std::uint16_t>((x >> 16) | 0x40u);
  x += 0x7fffu + ((x >> 16) & 1u);
  return static_cast<std::uint16_t>(x >> 16);
}

float bf16_to_f32(std::uint16_t bits) noexcept {
  return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

std::uint16_t f32_to_f16(float value) noexcept {
  auto x = std::bit_cast<std::uint32_t>(value);
  const std::uint32_t sign = (x >> 16) & 0x8000u;
  x &= 0x7fffffffu;
  if (x > 0x7f800000u) return static_cast<std::uint16_t>(sign | 0x7e00u | ((x >> 13) & 0x3ffu));
  if (x >= 0x477ff000u) return static_cast<std::uint16_t>(sign | 0x7c00u);  // rounds to inf
  if (x < 0x38800000u) {
    // Below the smallest normal half: the result is an integer multiple of 2^-24.
    const float scaled = std::bit_cast<float>(x) * 16777216.0f;
    return static_cast<std::uint16_t>(sign | static_cast<std::uint32_t>(std::nearbyint(scaled)));
  }
  const std::uint32_t odd = (x >> 13) & 1u;
  x += 0xc8000fffu + odd;  // rebias exponent by (15 - 127) and round half to even
  return static_cast<std::uint16_t>(sign | (x >> 13));
}

float f16_to_f32(std::uint16_t bits) noexcept {
  const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
  const std::uint32_t exp = (bits >> 10) & 0x1fu;
  const std::uint32_t mant = bits & 0x3ffu;
  if (exp == 0) {
    const float mag = std::ldexp(static_cast<float>(mant), -24);
    return sign ? -mag : mag;
  }
  if (exp == 0x1f) return std::bit_cast<float>(sign | 0x7f800000u | (mant << 13));
  return std::bit_cast<float>(sign | ((exp + 112u) << 23) | (mant << 13));
}

// --- Tensor / TensorMap ----------------------------------------------------

std::vector<float> Tensor::to_f32() const {
  const std::size_t width = dtype_size(dtype);
  const std::size_t n = data.size() / width;
  std::vector<float> out(n);
  const std::byte* p = data.data();
  switch (dtype) {
    case DType::F32:
      for (std::size_t i = 0; i < n; ++i) out[i] = load_f32(p + 4 * i);
      break;
    case DType::F16:
      for (std::size_t i = 0; i < n; ++i) out[i] = f16_to_f32(load_le16(p + 2 * i));
      break;
    case DType::BF16:
      for (std::size_t i = 0; i < n; ++i) out[i] = bf16_to_f32(load_le16(p + 2 * i));
      break;
  }
  return out;
}

Tensor Tensor::from_f32(std::span<const float> values, Shape shape, DType dtype) {
  if (shape_numel(shape) != values.size()) {
    throw Error(Errc::LengthMismatch, "value count does not match shape");
  }
  Tensor t;
  t.dtype = dtype;
  t.shape = std::move(shape);
  t.data.resize(values.size() * dtype_size(dtype));
  std::byte* p = t.data.data();
  switch (dtype) {
    case DType::F32:
      for (std::size_t i = 0; i < values.size(); ++i) store_f32(p + 4 * i, values[i]);
      break;
    case DType::F16:
      for (std::size_t i = 0; i < values.size(); ++i) store_le16(p + 2 * i, f32_to_f16(values[i]));
      break;
    case DType::BF16:
      for (std::size_t i = 0; i < values.size(); ++i) store_le16(p + 2 * i, f32_to_bf16(values[i]));
      break;
  }
  return t;
}

const Tensor& TensorMap::at(std::string_view name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error(Errc::MissingTensor, "no tensor named '" + std::string(name) + "'");
  return it->second;
}

void TensorMap::insert(std::string name, Tensor tensor) {
  if (name.empty()) throw Error(Errc::InvalidArgument, "tensor name must be non-empty");
  if (tensor.data.size() != tensor.numel() * dtype_size(tensor.dtype)) {
    throw Error(Errc::LengthMismatch, "byte length of '" + name + "' does not match its shape");
  }
  tensors.insert_or_assign(std::move(name), std::move(tensor));
}

std::uint64_t TensorMap::parameter_count() const {
  std::uint64_t n = 0;
  for (const auto& [_, t] : tensors) n += t.numel();
  return n;
}

std::vector<std::byte> cast_tensor(std::span<const std::byte> bytes, DType from, DType to) {
  if (bytes.size() % dtype_size(from) != 0) {
    throw Error(Errc::LengthMismatch, "byte length is not a multiple of the source element width");
  }
  if (from == to) return {bytes.begin(), bytes.end()};
  Tensor src;
  src.dtype = from;
  src.data.assign(bytes.begin(), bytes.end());
  const auto values = src.to_f32();
  return Tensor::from_f32(values, Shape{values.size()}, to).data;
}

// --- container ---------------------------------------------------------------

std::vector<TensorMeta> canonical_layout(const TensorMap& tm) {
  std::vector<TensorMeta> layout;
  layout.reserve(tm.tensors.size());
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tm.tensors) {
    TensorMeta m{name, t.dtype, t.shape, offset, offset + t.data.size()};
    offset = m.end;
    layout.push_back(std::move(m));
  }
  return layout;
}

std::vector<std::byte> serialize_container(const TensorMap& tm) {
  json header = json::object();
  if (!tm.metadata.empty()) {
    json meta = json::object();
    for (const auto& [k, v] : tm.metadata) meta[k] = v;
    header[std::string(kMetadataKey)] = std::move(meta);
  }
  const auto layout = canonical_layout(tm);
  for (const auto& m : layout) {
    if (m.end - m.begin != shape_numel(m.shape) * dtype_size(m.dtype)) {
      throw Error(Errc::LengthMismatch, "byte length of '" + m.name + "' does not match its shape");
    }
    header[m.name] = {{"dtype", dtype_name(m.dtype)}, {"shape", m.shape}, {"data_offsets", {m.begin, m.end}}};
  }
  std::string text = header.dump();
  // Pad so the data region starts 8-byte aligned.
  text.append((8 - text.size() % 8) % 8, ' ');

  const std::uint64_t data_size = layout.empty() ? 0 : layout.back().end;
  std::vector<std::byte> out(8 + text.size() + data_size);
  store_le64(out.data(), text.size());
  std::memcpy(out.data() + 8, text.data(), text.size());
  std::byte* dst = out.data() + 8 + text.size();
  for (const auto& [_, t] : tm.tensors) {
    std::memcpy(dst, t.data.data(), t.data.size());
    dst += t.data.size();
  }
  return out;
}

TensorMap parse_container(std::span<const std::byte> bytes) {
  if (bytes.size() < 8) malformed("file shorter than the 8-byte header length");
  const std::uint64_t header_len = load_le64(bytes.data());
  if (header_len > kMaxHeaderBytes || header_len > bytes.size() - 8) {
    malformed("header length " + std::to_string(header_len) + " exceeds file");
  }
  const auto* text = reinterpret_cast<const char*>(bytes.data() + 8);
  json header;
  try {
    header = json::parse(text, text + header_len);
  } catch (const json::exception& e) {
    malformed(std::string("invalid JSON header: ") + e.what());
  }
  if (!header.is_object()) malformed("header is not a JSON object");

  TensorMap tm;
  std::vector<TensorMeta> metas;
  for (const auto& [key, value] : header.items()) {
    if (key == kMetadataKey) {
      if (!value.is_object()) malformed("__metadata__ is not an object");
      for (const auto& [mk, mv] : value.items()) {
        if (!mv.is_string()) malformed("__metadata__ value for '" + mk + "' is not a string");
        tm.metadata.emplace(mk, mv.get<std::string>());
      }
      continue;
    }
    metas.push_back(parse_entry(key, value));
  }

  std::sort(metas.begin(), metas.end(), [](const TensorMeta& a, const TensorMeta& b) {
    return a.begin != b.begin ? a.begin < b.begin : a.end < b.end;
  });
  std::uint64_t cursor = 0;
  for (const auto& m : metas) {
    if (m.begin < cursor) throw Error(Errc::OverlappingOffsets, "'" + m.name + "' overlaps a previous tensor");
    if (m.begin > cursor) malformed("gap in data region before '" + m.name + "'");
    cursor = m.end;
  }
  const std::uint64_t available = bytes.size() - 8 - header_len;
  if (cursor > available) {
    throw Error(Errc::TruncatedData, "data region needs " + std::to_string(cursor) + " bytes, file has " +
                                         std::to_string(available));
  }

  const std::byte* data = bytes.data() + 8 + header_len;
  for (auto& m : metas) {
    Tensor t;
    t.dtype = m.dtype;
    t.shape = std::move(m.shape);
    t.data.assign(data + m.begin, data + m.end);
    tm.tensors.emplace(std::move(m.name), std::move(t));
  }
  return tm;
}

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw Error(Errc::IoFailure, "cannot open '" + path.string() + "'");
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<std::byte> bytes(size);
  in.seekg(0);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw Error(Errc::IoFailure, "cannot read '" + path.string() + "'");
  }
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  // Write-then-rename so readers never observe a half-written file.
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::IoFailure, "cannot create '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Errc::IoFailure, "cannot write '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(Errc::IoFailure, "cannot move '" + tmp.string() + "' into place: " + ec.message());
}

TensorMap read_container(const std::filesystem::path& path) { return parse_container(read_file_bytes(path)); }

void write_container(const TensorMap& tm, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_container(tm));
}

}  // namespace optimerge
