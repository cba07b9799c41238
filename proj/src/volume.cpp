#include "voxlrp/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "voxlrp/error.hpp"

namespace voxlrp {
namespace {

constexpr std::size_t kHeaderBytes = 8 + 3 * 4;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 |
         std::uint32_t{p[3]} << 24;
}

Dims decode_header(std::span<const std::uint8_t> bytes, std::size_t total_size) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kVolumeMagic, 8) != 0) {
    fail(ErrorCode::FormatBadMagic, "volume: bad magic (expected VOXW0001)");
  }
  if (bytes.size() < kHeaderBytes) fail(ErrorCode::FormatTruncated, "volume: truncated header");
  Dims d{get_u32(bytes.data() + 8), get_u32(bytes.data() + 12), get_u32(bytes.data() + 16)};
  const std::uint64_t nxy = std::uint64_t{d.nx} * d.ny;
  const std::uint64_t n = nxy <= kMaxVoxels ? nxy * d.nz : 0;
  if (d.nx == 0 || d.ny == 0 || d.nz == 0 || nxy > kMaxVoxels || n > kMaxVoxels) {
    fail(ErrorCode::FormatDimOverflow, "volume: invalid dims " + to_string(d));
  }
  const std::uint64_t expected = kHeaderBytes + n * 4;
  if (total_size < expected) fail(ErrorCode::FormatTruncated, "volume: truncated payload");
  if (total_size > expected) fail(ErrorCode::FormatTrailingBytes, "volume: trailing bytes");
  return d;
}

}  // namespace

std::string to_string(const Dims& d) {
  std::ostringstream os;
  os << d.nx << "x" << d.ny << "x" << d.nz;
  return os.str();
}

Volume3D::Volume3D(Dims dims, float fill) : dims_(dims), voxels_(dims.voxel_count(), fill) {}

Volume3D::Volume3D(Dims dims, std::vector<float> voxels)
    : dims_(dims), voxels_(std::move(voxels)) {
  require(voxels_.size() == dims_.voxel_count(), ErrorCode::DimMismatch,
          "volume: voxel count does not match dims " + to_string(dims_));
}

bool Volume3D::all_finite() const {
  return std::all_of(voxels_.begin(), voxels_.end(), [](float v) { return std::isfinite(v); });
}

double Volume3D::sum() const {
  double s = 0.0;
  for (float v : voxels_) s += v;
  return s;
}

BinaryMask::BinaryMask(Dims dims, bool fill) : dims_(dims), bits_(dims.voxel_count(), fill) {}

BinaryMask::BinaryMask(Dims dims, std::vector<std::uint8_t> bits)
    : dims_(dims), bits_(std::move(bits)) {
  require(bits_.size() == dims_.voxel_count(), ErrorCode::DimMismatch,
          "mask: bit count does not match dims " + to_string(dims_));
  for (auto& b : bits_) b = b ? 1 : 0;
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

std::vector<std::uint8_t> encode_volume(const Volume3D& v) {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + v.size() * 4);
  out.insert(out.end(), kVolumeMagic, kVolumeMagic + 8);
  put_u32(out, v.dims().nx);
  put_u32(out, v.dims().ny);
  put_u32(out, v.dims().nz);
  for (float f : v.values()) put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

Volume3D decode_volume(std::span<const std::uint8_t> bytes) {
  const Dims d = decode_header(bytes, bytes.size());
  std::vector<float> voxels(d.voxel_count());
  const std::uint8_t* p = bytes.data() + kHeaderBytes;
  for (std::size_t i = 0; i < voxels.size(); ++i, p += 4) {
    voxels[i] = std::bit_cast<float>(get_u32(p));
  }
  return Volume3D(d, std::move(voxels));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::Io, "write failed for " + path.string());
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

void write_volume(const Volume3D& v, const std::filesystem::path& path) {
  write_file_bytes(path, encode_volume(v));
}

Volume3D read_volume(const std::filesystem::path& path) {
  return decode_volume(read_file_bytes(path));
}

Dims read_volume_dims(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::uint8_t header[kHeaderBytes] = {};
  in.read(reinterpret_cast<char*>(header), kHeaderBytes);
  return decode_header(std::span(header, std::min(size, kHeaderBytes)), size);
}

Volume3D mask_to_volume(const BinaryMask& m) {
  Volume3D v(m.dims());
  for (std::size_t i = 0; i < m.size(); ++i) v[i] = m[i] ? 1.0f : 0.0f;
  return v;
}

void write_mask(const BinaryMask& m, const std::filesystem::path& path) {
  write_volume(mask_to_volume(m), path);
}

BinaryMask read_mask(const std::filesystem::path& path) {
  const Volume3D v = read_volume(path);
  std::vector<std::uint8_t> bits(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] != 0.0f && v[i] != 1.0f) {
      fail(ErrorCode::Schema, "mask " + path.string() + " holds values other than 0 and 1");
    }
    bits[i] = v[i] == 1.0f;
  }
  return BinaryMask(v.dims(), std::move(bits));
}

Volume3D shift_volume(const Volume3D& v, int dx, int dy, int dz) {
  const Dims& d = v.dims();
  const auto too_big = [](int s, std::uint32_t n) {
    return static_cast<std::uint64_t>(std::abs(static_cast<long long>(s))) >= n;
  };
  if (too_big(dx, d.nx) || too_big(dy, d.ny) || too_big(dz, d.nz)) {
    fail(ErrorCode::InvalidArgument, "shift_volume: shift magnitude must be below each dim");
  }
  Volume3D out(d);
  const long nx = d.nx, ny = d.ny, nz = d.nz;
  for (long z = 0; z < nz; ++z) {
    const long sz = z - dz;
    if (sz < 0 || sz >= nz) continue;
    for (long y = 0; y < ny; ++y) {
      const long sy = y - dy;
      if (sy < 0 || sy >= ny) continue;
      const long x0 = std::max(0L, static_cast<long>(dx));
      const long x1 = std::min(nx, nx + dx);
      for (long x = x0; x < x1; ++x) out.at(x, y, z) = v.at(x - dx, sy, sz);
    }
  }
  return out;
}

}  // namespace voxlrp
