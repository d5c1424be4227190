#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "marvis/image.hpp"

namespace marvis {

namespace fs = std::filesystem;

// Binary PGM (P5, maxval 255). Pixels are scaled by 1/255 on read and
// written as round(v * 255), half away from zero.
GrayImage read_pgm(const fs::path& path);
void write_pgm(const GrayImage& img, const fs::path& path);

// Masks are PGM files holding only 0 and 255.
BinaryMask read_mask(const fs::path& path);
void write_mask(const BinaryMask& mask, const fs::path& path);

// Middlebury .flo: "PIEH", int32 width, int32 height, interleaved float32 (u, v).
FlowField read_flo(const fs::path& path);
void write_flo(const FlowField& flow, const fs::path& path);

// "LMEF", int32 width, int32 height, float32 row-major payload.
FloatMap read_floatmap(const fs::path& path);
void write_floatmap(const FloatMap& map, const fs::path& path);

/// One named float32 array of a checkpoint.
struct NamedArray {
  std::string name;
  std::vector<std::int32_t> shape;
  std::vector<float> values;

  bool operator==(const NamedArray&) const = default;
};

using NamedArrays = std::vector<NamedArray>;

inline constexpr std::int32_t kCheckpointVersion = 1;

// "MRVS", version, count, then per entry: name length, UTF-8 name, rank,
// dims, payload. All integers int32 little-endian.
void save_checkpoint(const NamedArrays& state, const fs::path& path);
NamedArrays load_checkpoint(const fs::path& path);

enum class Split { kTrain, kVal, kTest };

const char* split_name(Split s);
Split parse_split(const std::string& s);

struct ManifestEntry {
  std::string frame_prev_path;
  std::string frame_curr_path;
  std::optional<std::string> stereo_right_path;
  std::string mask_path;
  std::optional<std::string> flow_path;
  std::optional<std::string> calib_id;
  Split split = Split::kTrain;

  bool operator==(const ManifestEntry&) const = default;
};

/// Dataset listing. Entry paths are relative to base_dir (the directory of
/// the manifest file) unless absolute.
struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::array<double, 3> split_fractions{0.80, 0.05, 0.15};
  fs::path base_dir;

  fs::path resolve(const std::string& rel) const;
  /// calib_id "x" resolves to base_dir / "x.json".
  fs::path calib_path(const std::string& calib_id) const;
  std::vector<std::size_t> indices(Split s) const;
};

void write_manifest(const DatasetManifest& manifest, const fs::path& path);

/// Throws IoError when a referenced file does not exist.
DatasetManifest read_manifest(const fs::path& path);

// Low-level helpers shared by the binary formats.
namespace io_detail {

std::vector<std::uint8_t> read_file(const fs::path& path);
void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes);

void put_i32(std::vector<std::uint8_t>& out, std::int32_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);
std::int32_t get_i32(const std::uint8_t* p);
float get_f32(const std::uint8_t* p);

}  // namespace io_detail

}  // namespace marvis
