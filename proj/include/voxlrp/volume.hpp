#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace voxlrp {

/// Voxel extents along (sagittal x, coronal y, axial z).
struct Dims {
  std::uint32_t nx = 0;
  std::uint32_t ny = 0;
  std::uint32_t nz = 0;

  std::size_t voxel_count() const {
    return std::size_t{nx} * std::size_t{ny} * std::size_t{nz};
  }
  std::uint32_t extent(int axis) const { return axis == 0 ? nx : axis == 1 ? ny : nz; }
  bool operator==(const Dims&) const = default;
};

std::string to_string(const Dims& d);

enum class Axis { Sagittal = 0, Coronal = 1, Axial = 2 };

/// Dense scalar field, x-fastest: index = x + nx * (y + ny * z).
class Volume3D {
 public:
  Volume3D() = default;
  explicit Volume3D(Dims dims, float fill = 0.0f);
  Volume3D(Dims dims, std::vector<float> voxels);

  const Dims& dims() const { return dims_; }
  std::size_t size() const { return voxels_.size(); }

  std::span<float> values() { return voxels_; }
  std::span<const float> values() const { return voxels_; }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + dims_.nx * (y + dims_.ny * z);
  }
  float& at(std::size_t x, std::size_t y, std::size_t z) { return voxels_[index(x, y, z)]; }
  float at(std::size_t x, std::size_t y, std::size_t z) const { return voxels_[index(x, y, z)]; }

  float operator[](std::size_t i) const { return voxels_[i]; }
  float& operator[](std::size_t i) { return voxels_[i]; }

  bool all_finite() const;
  double sum() const;

  bool operator==(const Volume3D&) const = default;

 private:
  Dims dims_;
  std::vector<float> voxels_;
};

class BinaryMask {
 public:
  BinaryMask() = default;
  explicit BinaryMask(Dims dims, bool fill = false);
  BinaryMask(Dims dims, std::vector<std::uint8_t> bits);

  const Dims& dims() const { return dims_; }
  std::size_t size() const { return bits_.size(); }
  std::size_t count() const;

  bool operator[](std::size_t i) const { return bits_[i] != 0; }
  void set(std::size_t i, bool value) { bits_[i] = value ? 1 : 0; }
  std::span<const std::uint8_t> bits() const { return bits_; }

  bool operator==(const BinaryMask&) const = default;

 private:
  Dims dims_;
  std::vector<std::uint8_t> bits_;
};

// "VOXW0001" container: 8-byte magic, three u32 LE dims, nx*ny*nz f32 LE.
inline constexpr char kVolumeMagic[8] = {'V', 'O', 'X', 'W', '0', '0', '0', '1'};
inline constexpr std::uint64_t kMaxVoxels = std::uint64_t{1} << 32;

std::vector<std::uint8_t> encode_volume(const Volume3D& v);
Volume3D decode_volume(std::span<const std::uint8_t> bytes);

void write_volume(const Volume3D& v, const std::filesystem::path& path);
Volume3D read_volume(const std::filesystem::path& path);
/// Reads only the header; validates magic, dims, and payload length.
Dims read_volume_dims(const std::filesystem::path& path);

/// Masks are stored as VOXW volumes holding exactly 0.0 or 1.0.
void write_mask(const BinaryMask& m, const std::filesystem::path& path);
BinaryMask read_mask(const std::filesystem::path& path);
Volume3D mask_to_volume(const BinaryMask& m);

/// Translates content by (dx, dy, dz) voxels; vacated voxels are zero.
Volume3D shift_volume(const Volume3D& v, int dx, int dy, int dz);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace voxlrp
