#include "marvis/imageio.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "marvis/errors.hpp"

namespace marvis {

namespace io_detail {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void put_i32(std::vector<std::uint8_t>& out, std::int32_t v) {
  const auto u = static_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
  put_i32(out, static_cast<std::int32_t>(std::bit_cast<std::uint32_t>(v)));
}

std::int32_t get_i32(const std::uint8_t* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return static_cast<std::int32_t>(u);
}

float get_f32(const std::uint8_t* p) {
  return std::bit_cast<float>(static_cast<std::uint32_t>(get_i32(p)));
}

}  // namespace io_detail

using namespace io_detail;

namespace {

struct PgmPayload {
  int width = 0;
  int height = 0;
  const std::uint8_t* data = nullptr;
};

// Parses the P5 header in place; the payload pointer aliases `bytes`.
PgmPayload parse_pgm(const std::vector<std::uint8_t>& bytes, const fs::path& path) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> FormatError {
    return FormatError(path.string() + ": " + what);
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
    throw fail("not a binary PGM (magic P5 expected)");
  pos = 2;

  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* field) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos]))
      throw fail(std::string("malformed header field ") + field);
    long value = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      value = value * 10 + (bytes[pos] - '0');
      if (value > (1 << 24)) throw fail(std::string("header field too large: ") + field);
      ++pos;
    }
    return static_cast<int>(value);
  };

  if (pos < bytes.size() && !std::isspace(bytes[pos])) throw fail("malformed magic");
  PgmPayload out;
  out.width = read_int("width");
  out.height = read_int("height");
  const int maxval = read_int("maxval");
  if (maxval != 255) throw fail("maxval must be 255, found " + std::to_string(maxval));
  if (out.width <= 0 || out.height <= 0) throw fail("image dimensions must be positive");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw fail("missing header terminator");
  ++pos;

  const std::size_t need = static_cast<std::size_t>(out.width) * out.height;
  if (bytes.size() - pos != need)
    throw LengthError(path.string() + ": payload has " + std::to_string(bytes.size() - pos) +
                      " bytes, expected " + std::to_string(need));
  out.data = bytes.data() + pos;
  return out;
}

std::vector<std::uint8_t> pgm_header(int width, int height) {
  const std::string header =
      "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  return {header.begin(), header.end()};
}

void check_dims(int width, int height, const char* what) {
  if (width <= 0 || height <= 0)
    throw ValidationError(std::string(what) + " must have positive dimensions");
}

}  // namespace

GrayImage read_pgm(const fs::path& path) {
  const auto bytes = read_file(path);
  const auto pgm = parse_pgm(bytes, path);
  GrayImage img(pgm.width, pgm.height);
  float* dst = img.pixels.data();
  for (std::size_t i = 0; i < static_cast<std::size_t>(img.pixels.size()); ++i)
    dst[i] = static_cast<float>(pgm.data[i]) / 255.0f;
  return img;
}

void write_pgm(const GrayImage& img, const fs::path& path) {
  check_dims(img.width(), img.height(), "image");
  auto bytes = pgm_header(img.width(), img.height());
  const float* src = img.pixels.data();
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) {
    const float v = src[i];
    if (!(v >= 0.0f && v <= 1.0f))
      throw ValidationError("pixel value outside [0,1] in " + path.string());
    bytes.push_back(static_cast<std::uint8_t>(std::lround(static_cast<double>(v) * 255.0)));
  }
  write_file(path, bytes);
}

BinaryMask read_mask(const fs::path& path) {
  const auto bytes = read_file(path);
  const auto pgm = parse_pgm(bytes, path);
  BinaryMask mask(pgm.width, pgm.height);
  std::uint8_t* dst = mask.labels.data();
  for (std::size_t i = 0; i < static_cast<std::size_t>(mask.labels.size()); ++i) {
    const std::uint8_t b = pgm.data[i];
    if (b != 0 && b != 255)
      throw FormatError(path.string() + ": mask value " + std::to_string(b) +
                        " is neither 0 nor 255");
    dst[i] = b == 255 ? 1 : 0;
  }
  return mask;
}

void write_mask(const BinaryMask& mask, const fs::path& path) {
  check_dims(mask.width(), mask.height(), "mask");
  auto bytes = pgm_header(mask.width(), mask.height());
  const std::uint8_t* src = mask.labels.data();
  for (Eigen::Index i = 0; i < mask.labels.size(); ++i) {
    if (src[i] > 1) throw ValidationError("mask label outside {0,1}");
    bytes.push_back(src[i] ? 255 : 0);
  }
  write_file(path, bytes);
}

namespace {

// Shared reader for the two "magic + int32 w + int32 h + floats" formats.
std::vector<float> read_float_grid(const fs::path& path, const char* magic, int channels,
                                   int& width, int& height) {
  const auto bytes = read_file(path);
  if (bytes.size() < 12 || std::memcmp(bytes.data(), magic, 4) != 0)
    throw FormatError(path.string() + ": bad magic, expected " + magic);
  width = get_i32(bytes.data() + 4);
  height = get_i32(bytes.data() + 8);
  if (width <= 0 || height <= 0)
    throw FormatError(path.string() + ": non-positive dimensions");
  const std::uint64_t count = static_cast<std::uint64_t>(width) * height * channels;
  if (bytes.size() - 12 != count * 4)
    throw LengthError(path.string() + ": payload has " + std::to_string(bytes.size() - 12) +
                      " bytes, expected " + std::to_string(count * 4));
  std::vector<float> values(count);
  for (std::uint64_t i = 0; i < count; ++i) values[i] = get_f32(bytes.data() + 12 + 4 * i);
  return values;
}

std::vector<std::uint8_t> float_grid_header(const char* magic, int width, int height) {
  std::vector<std::uint8_t> out(magic, magic + 4);
  put_i32(out, width);
  put_i32(out, height);
  return out;
}

}  // namespace

FlowField read_flo(const fs::path& path) {
  int w = 0, h = 0;
  const auto values = read_float_grid(path, "PIEH", 2, w, h);
  FlowField flow(w, h);
  for (int i = 0; i < w * h; ++i) {
    flow.u.data()[i] = values[2 * i];
    flow.v.data()[i] = values[2 * i + 1];
  }
  return flow;
}

void write_flo(const FlowField& flow, const fs::path& path) {
  check_dims(flow.width(), flow.height(), "flow");
  if (flow.v.rows() != flow.u.rows() || flow.v.cols() != flow.u.cols())
    throw ShapeError("flow components differ in shape");
  auto bytes = float_grid_header("PIEH", flow.width(), flow.height());
  for (Eigen::Index i = 0; i < flow.u.size(); ++i) {
    put_f32(bytes, flow.u.data()[i]);
    put_f32(bytes, flow.v.data()[i]);
  }
  write_file(path, bytes);
}

FloatMap read_floatmap(const fs::path& path) {
  int w = 0, h = 0;
  const auto values = read_float_grid(path, "LMEF", 1, w, h);
  FloatMap map(w, h);
  for (int i = 0; i < w * h; ++i) {
    if (!std::isfinite(values[i]))
      throw ValidationError(path.string() + ": non-finite value in float map");
    map.values.data()[i] = values[i];
  }
  return map;
}

void write_floatmap(const FloatMap& map, const fs::path& path) {
  check_dims(map.width(), map.height(), "float map");
  if (!map.values.allFinite()) throw ValidationError("float map contains non-finite values");
  auto bytes = float_grid_header("LMEF", map.width(), map.height());
  for (Eigen::Index i = 0; i < map.values.size(); ++i) put_f32(bytes, map.values.data()[i]);
  write_file(path, bytes);
}

void save_checkpoint(const NamedArrays& state, const fs::path& path) {
  std::set<std::string> seen;
  std::vector<std::uint8_t> bytes{'M', 'R', 'V', 'S'};
  put_i32(bytes, kCheckpointVersion);
  put_i32(bytes, static_cast<std::int32_t>(state.size()));
  for (const auto& entry : state) {
    if (!seen.insert(entry.name).second)
      throw ValidationError("duplicate checkpoint entry name: " + entry.name);
    std::int64_t count = 1;
    for (auto d : entry.shape) {
      if (d < 0) throw ValidationError("negative dimension in " + entry.name);
      count *= d;
    }
    if (count != static_cast<std::int64_t>(entry.values.size()))
      throw ValidationError("payload size does not match shape for " + entry.name);
    put_i32(bytes, static_cast<std::int32_t>(entry.name.size()));
    bytes.insert(bytes.end(), entry.name.begin(), entry.name.end());
    put_i32(bytes, static_cast<std::int32_t>(entry.shape.size()));
    for (auto d : entry.shape) put_i32(bytes, d);
    for (float v : entry.values) put_f32(bytes, v);
  }
  write_file(path, bytes);
}

NamedArrays load_checkpoint(const fs::path& path) {
  const auto bytes = read_file(path);
  const std::string where = path.string() + ": ";
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "MRVS", 4) != 0)
    throw FormatError(where + "bad magic, expected MRVS");
  const std::int32_t version = get_i32(bytes.data() + 4);
  if (version != kCheckpointVersion)
    throw VersionError(where + "checkpoint version " + std::to_string(version) +
                       ", expected " + std::to_string(kCheckpointVersion));
  const std::int32_t count = get_i32(bytes.data() + 8);
  if (count < 0) throw FormatError(where + "negative entry count");

  std::size_t pos = 12;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw LengthError(where + "truncated checkpoint");
  };
  auto next_i32 = [&] {
    need(4);
    const auto v = get_i32(bytes.data() + pos);
    pos += 4;
    return v;
  };

  NamedArrays out;
  std::set<std::string> seen;
  for (std::int32_t e = 0; e < count; ++e) {
    NamedArray entry;
    const std::int32_t name_len = next_i32();
    if (name_len < 0) throw FormatError(where + "negative name length");
    need(static_cast<std::size_t>(name_len));
    entry.name.assign(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
    pos += name_len;
    if (!seen.insert(entry.name).second)
      throw FormatError(where + "duplicate entry " + entry.name);
    const std::int32_t rank = next_i32();
    if (rank < 0 || rank > 16) throw FormatError(where + "invalid rank for " + entry.name);
    std::uint64_t n = 1;
    for (std::int32_t r = 0; r < rank; ++r) {
      const std::int32_t d = next_i32();
      if (d < 0) throw FormatError(where + "negative dimension for " + entry.name);
      entry.shape.push_back(d);
      n *= static_cast<std::uint64_t>(d);
      if (n > bytes.size()) throw LengthError(where + "payload exceeds file for " + entry.name);
    }
    need(n * 4);
    entry.values.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) entry.values[i] = get_f32(bytes.data() + pos + 4 * i);
    pos += n * 4;
    out.push_back(std::move(entry));
  }
  if (pos != bytes.size()) throw LengthError(where + "trailing bytes after last entry");
  return out;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw FormatError("unknown split '" + s + "'");
}

fs::path DatasetManifest::resolve(const std::string& rel) const {
  const fs::path p(rel);
  return p.is_absolute() ? p : base_dir / p;
}

fs::path DatasetManifest::calib_path(const std::string& calib_id) const {
  return base_dir / (calib_id + ".json");
}

std::vector<std::size_t> DatasetManifest::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == s) out.push_back(i);
  return out;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  nlohmann::json j;
  j["split_fractions"] = manifest.split_fractions;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : manifest.entries) {
    nlohmann::json je;
    je["frame_prev_path"] = e.frame_prev_path;
    je["frame_curr_path"] = e.frame_curr_path;
    if (e.stereo_right_path) je["stereo_right_path"] = *e.stereo_right_path;
    je["mask_path"] = e.mask_path;
    if (e.flow_path) je["flow_path"] = *e.flow_path;
    if (e.calib_id) je["calib_id"] = *e.calib_id;
    je["split"] = split_name(e.split);
    j["entries"].push_back(std::move(je));
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.base_dir = path.parent_path();
  try {
    if (j.contains("split_fractions")) m.split_fractions = j.at("split_fractions");
    for (const auto& je : j.at("entries")) {
      ManifestEntry e;
      e.frame_prev_path = je.at("frame_prev_path").get<std::string>();
      e.frame_curr_path = je.at("frame_curr_path").get<std::string>();
      e.mask_path = je.at("mask_path").get<std::string>();
      if (je.contains("stereo_right_path"))
        e.stereo_right_path = je.at("stereo_right_path").get<std::string>();
      if (je.contains("flow_path")) e.flow_path = je.at("flow_path").get<std::string>();
      if (je.contains("calib_id")) e.calib_id = je.at("calib_id").get<std::string>();
      e.split = parse_split(je.value("split", std::string("train")));
      m.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }

  auto require = [&](const fs::path& p) {
    if (!fs::exists(p)) throw IoError("manifest references missing file " + p.string());
  };
  for (const auto& e : m.entries) {
    require(m.resolve(e.frame_prev_path));
    require(m.resolve(e.frame_curr_path));
    require(m.resolve(e.mask_path));
    if (e.stereo_right_path) require(m.resolve(*e.stereo_right_path));
    if (e.flow_path) require(m.resolve(*e.flow_path));
    if (e.calib_id) require(m.calib_path(*e.calib_id));
  }
  return m;
}

}  // namespace marvis
