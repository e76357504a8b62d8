#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace crowdfuse::data {

/// 8-bit image, row-major, channels interleaved (H x W x C).
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int h, int w, int c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  bool empty() const { return pixels.empty(); }
  std::size_t index(int y, int x, int c = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  std::uint8_t at(int y, int x, int c = 0) const { return pixels[index(y, x, c)]; }
  std::uint8_t& at(int y, int x, int c = 0) { return pixels[index(y, x, c)]; }

  bool operator==(const Image&) const = default;
};

/// A labelled head position in pixel coordinates of the shared frame.
struct PointAnnotation {
  double x = 0.0;  // column, 0 <= x < W
  double y = 0.0;  // row, 0 <= y < H

  bool operator==(const PointAnnotation&) const = default;
};

struct CaptureMeta {
  std::string id;
  std::string source_id;
  std::optional<double> time_of_day;  // hours in [0, 24)

  bool operator==(const CaptureMeta&) const = default;
};

/// An aligned optical/thermal pair with its shared point annotations.
struct CrowdSample {
  Image rgb;      // H x W x 3
  Image thermal;  // H x W x 1
  std::vector<PointAnnotation> points;
  CaptureMeta meta;

  int height() const { return rgb.height; }
  int width() const { return rgb.width; }
  /// Ground-truth number of individuals.
  std::size_t count() const { return points.size(); }

  /// Throws ValidationError when a typed invariant is violated.
  void validate() const;
};

struct ManifestEntry {
  std::string rgb;
  std::string thermal;
  std::string annotation;
  CaptureMeta meta;

  bool operator==(const ManifestEntry&) const = default;
};

/// Line-delimited list of sample files; relative paths resolve against root.
///
/// Each non-blank, non-comment line holds whitespace-separated fields:
///
///     <rgb> <thermal> <annotation> [id=<s>] [source=<s>] [time=<hours>]
struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  std::filesystem::path resolve(const std::string& relative) const;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
std::string format_manifest_line(const ManifestEntry& entry);

std::vector<PointAnnotation> read_annotations(const std::filesystem::path& path);
void write_annotations(const std::vector<PointAnnotation>& points, const std::filesystem::path& path);

/// PNG or JPEG. Colour files decode to RGB order; single-channel files stay single-channel.
Image read_image(const std::filesystem::path& path);
void write_image(const Image& image, const std::filesystem::path& path);
/// Collapse a multi-channel image to one channel by the rounded channel mean.
Image to_single_channel(const Image& image);

CrowdSample load_sample(const ManifestEntry& entry, const std::filesystem::path& root);
CrowdSample load_sample(const DatasetManifest& manifest, std::size_t index);
/// All samples in manifest order; the first failure propagates.
std::vector<CrowdSample> load_dataset(const DatasetManifest& manifest);

/// Identifier used in reports: the manifest id when present, otherwise the rgb file stem.
std::string sample_id(const ManifestEntry& entry);

/// FNV-1a 64 over the manifest lines and the bytes of every referenced file.
std::uint64_t dataset_hash(const DatasetManifest& manifest);
std::string hex64(std::uint64_t value);

}  // namespace crowdfuse::data
