#include "crowdfuse/data.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "crowdfuse/errors.hpp"

namespace crowdfuse::data {
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> fields;
  std::string f;
  while (in >> f) fields.push_back(f);
  return fields;
}

bool skippable(const std::string& line) {
  const auto first = line.find_first_not_of(" \t\r");
  return first == std::string::npos || line[first] == '#';
}

bool parse_double(const std::string& text, double& out) {
  const char* begin = text.data();
  const char* end = begin + text.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

}  // namespace

void CrowdSample::validate() const {
  if (rgb.channels != 3)
    throw ValidationError("rgb image must have 3 channels, got " + std::to_string(rgb.channels));
  if (thermal.channels != 1)
    throw ValidationError("thermal image must have 1 channel, got " + std::to_string(thermal.channels));
  if (rgb.height != thermal.height || rgb.width != thermal.width)
    throw ValidationError("size mismatch: rgb " + std::to_string(rgb.width) + "x" + std::to_string(rgb.height) +
                          " vs thermal " + std::to_string(thermal.width) + "x" + std::to_string(thermal.height));
  if (rgb.height < 1 || rgb.width < 1) throw ValidationError("empty image");
  for (const auto& p : points) {
    if (!(p.x >= 0.0 && p.x < rgb.width && p.y >= 0.0 && p.y < rgb.height))
      throw ValidationError("point (" + format_double(p.x) + ", " + format_double(p.y) + ") outside " +
                            std::to_string(rgb.width) + "x" + std::to_string(rgb.height) + " image");
  }
}

fs::path DatasetManifest::resolve(const std::string& relative) const {
  const fs::path p(relative);
  return p.is_absolute() ? p : root / p;
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  DatasetManifest manifest;
  manifest.root = path.parent_path();
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (skippable(line)) continue;
    const auto fields = split_ws(line);
    if (fields.size() < 3 || fields[1].find('=') != std::string::npos ||
        fields[2].find('=') != std::string::npos)
      throw ParseError("manifest record needs <rgb> <thermal> <annotation>", line_no);
    ManifestEntry entry{fields[0], fields[1], fields[2], {}};
    for (std::size_t i = 3; i < fields.size(); ++i) {
      const auto eq = fields[i].find('=');
      if (eq == std::string::npos) throw ParseError("unexpected field '" + fields[i] + "'", line_no);
      const std::string key = fields[i].substr(0, eq);
      const std::string value = fields[i].substr(eq + 1);
      if (key == "id") {
        entry.meta.id = value;
      } else if (key == "source") {
        entry.meta.source_id = value;
      } else if (key == "time") {
        double t = 0.0;
        if (!parse_double(value, t) || t < 0.0 || t >= 24.0)
          throw ParseError("time must be hours in [0, 24), got '" + value + "'", line_no);
        entry.meta.time_of_day = t;
      } else {
        throw ParseError("unknown manifest key '" + key + "'", line_no);
      }
    }
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

std::string format_manifest_line(const ManifestEntry& entry) {
  std::string line = entry.rgb + "\t" + entry.thermal + "\t" + entry.annotation;
  if (!entry.meta.id.empty()) line += "\tid=" + entry.meta.id;
  if (!entry.meta.source_id.empty()) line += "\tsource=" + entry.meta.source_id;
  if (entry.meta.time_of_day) line += "\ttime=" + format_double(*entry.meta.time_of_day);
  return line;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& e : manifest.entries) out << format_manifest_line(e) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<PointAnnotation> read_annotations(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read annotations " + path.string());
  std::vector<PointAnnotation> points;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (skippable(line)) continue;
    const auto fields = split_ws(line);
    PointAnnotation p;
    if (fields.size() != 2 || !parse_double(fields[0], p.x) || !parse_double(fields[1], p.y))
      throw ParseError(path.string() + ": expected 'x y'", line_no);
    points.push_back(p);
  }
  return points;
}

void write_annotations(const std::vector<PointAnnotation>& points, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write annotations " + path.string());
  for (const auto& p : points) out << format_double(p.x) << ' ' << format_double(p.y) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

Image read_image(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing image " + path.string());
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw IoError("cannot decode image " + path.string());
  if (mat.depth() != CV_8U) throw IoError("only 8-bit images are supported: " + path.string());
  if (mat.channels() == 4) cv::cvtColor(mat, mat, cv::COLOR_BGRA2BGR);
  if (mat.channels() == 3) cv::cvtColor(mat, mat, cv::COLOR_BGR2RGB);
  Image image(mat.rows, mat.cols, mat.channels());
  const std::size_t row_bytes = static_cast<std::size_t>(mat.cols) * mat.channels();
  for (int y = 0; y < mat.rows; ++y)
    std::copy_n(mat.ptr<std::uint8_t>(y), row_bytes, image.pixels.begin() + static_cast<std::ptrdiff_t>(y * row_bytes));
  return image;
}

void write_image(const Image& image, const fs::path& path) {
  if (image.channels != 1 && image.channels != 3)
    throw IoError("cannot write " + std::to_string(image.channels) + "-channel image " + path.string());
  cv::Mat mat(image.height, image.width, image.channels == 3 ? CV_8UC3 : CV_8UC1,
              const_cast<std::uint8_t*>(image.pixels.data()));
  cv::Mat out;
  if (image.channels == 3)
    cv::cvtColor(mat, out, cv::COLOR_RGB2BGR);
  else
    out = mat;
  const std::vector<int> params{cv::IMWRITE_PNG_COMPRESSION, 6};
  bool ok = false;
  try {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    ok = cv::imwrite(path.string(), out, params);
  } catch (const cv::Exception&) {
    ok = false;
  } catch (const fs::filesystem_error&) {
    ok = false;
  }
  if (!ok) throw IoError("cannot write image " + path.string());
}

Image to_single_channel(const Image& image) {
  if (image.channels == 1) return image;
  Image out(image.height, image.width, 1);
  const int c = image.channels;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    int total = 0;
    for (int k = 0; k < c; ++k) total += image.pixels[i * c + k];
    out.pixels[i] = static_cast<std::uint8_t>((total + c / 2) / c);
  }
  return out;
}

CrowdSample load_sample(const ManifestEntry& entry, const fs::path& root) {
  auto resolve = [&](const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : root / path;
  };
  CrowdSample sample;
  sample.rgb = read_image(resolve(entry.rgb));
  if (sample.rgb.channels == 1) {
    throw ValidationError("rgb image " + entry.rgb + " is single-channel");
  }
  sample.thermal = to_single_channel(read_image(resolve(entry.thermal)));
  sample.points = read_annotations(resolve(entry.annotation));
  sample.meta = entry.meta;
  if (sample.meta.id.empty()) sample.meta.id = sample_id(entry);
  sample.validate();
  return sample;
}

CrowdSample load_sample(const DatasetManifest& manifest, std::size_t index) {
  return load_sample(manifest.entries.at(index), manifest.root);
}

std::vector<CrowdSample> load_dataset(const DatasetManifest& manifest) {
  std::vector<CrowdSample> samples;
  samples.reserve(manifest.size());
  for (std::size_t i = 0; i < manifest.size(); ++i) samples.push_back(load_sample(manifest, i));
  return samples;
}

std::string sample_id(const ManifestEntry& entry) {
  if (!entry.meta.id.empty()) return entry.meta.id;
  return fs::path(entry.rgb).stem().string();
}

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv_update(std::uint64_t& h, const char* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<std::uint8_t>(data[i]);
    h *= kFnvPrime;
  }
}

void fnv_file(std::uint64_t& h, const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    fnv_update(h, buf, static_cast<std::size_t>(in.gcount()));
  }
}

}  // namespace

std::uint64_t dataset_hash(const DatasetManifest& manifest) {
  std::uint64_t h = kFnvOffset;
  for (const auto& e : manifest.entries) {
    const std::string line = format_manifest_line(e) + "\n";
    fnv_update(h, line.data(), line.size());
    fnv_file(h, manifest.resolve(e.rgb));
    fnv_file(h, manifest.resolve(e.thermal));
    fnv_file(h, manifest.resolve(e.annotation));
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << value;
  return s.str();
}

}  // namespace crowdfuse::data
