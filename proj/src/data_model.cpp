#include "ramseg/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "ramseg/raster_io.hpp"

namespace ramseg {

namespace fs = std::filesystem;
using nlohmann::json;

void ImageSlice::validate() const {
  if (pixels.height() < 1 || pixels.width() < 1)
    fail(ErrorCode::ShapeMismatch, "image slice must be at least 1x1");
  for (float v : pixels.values())
    if (!std::isfinite(v)) fail(ErrorCode::NonFiniteInput, "image slice contains non-finite pixels");
}

BinaryMask LabelMask::binary(int label) const {
  BinaryMask out(labels.height(), labels.width());
  auto src = labels.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] == label ? 1 : 0;
  return out;
}

std::size_t LabelMask::count(int label) const {
  return static_cast<std::size_t>(std::count(labels.values().begin(), labels.values().end(), label));
}

std::string_view provenance_name(Provenance p) {
  return p == Provenance::Dataset ? "dataset" : "user-accepted";
}

Provenance parse_provenance(std::string_view name) {
  if (name == "dataset") return Provenance::Dataset;
  if (name == "user-accepted") return Provenance::UserAccepted;
  fail(ErrorCode::SchemaViolation, "unknown provenance '" + std::string(name) + "'");
}

void SampleRecord::validate() const {
  image.validate();
  if (!mask.labels.same_shape(image.pixels))
    fail(ErrorCode::ShapeMismatch, "sample '" + id + "': mask " + std::to_string(mask.labels.height()) +
                                       "x" + std::to_string(mask.labels.width()) + " vs image " +
                                       std::to_string(image.height()) + "x" + std::to_string(image.width()));
  if (!mask.class_map.empty()) {
    std::set<int> seen(mask.labels.values().begin(), mask.labels.values().end());
    for (int label : seen)
      if (label != 0 && !mask.class_map.contains(label))
        fail(ErrorCode::SchemaViolation,
             "sample '" + id + "': label " + std::to_string(label) + " missing from class_map");
  }
}

fs::path DatasetManifest::resolve(const std::string& relative) const {
  fs::path p(relative);
  return p.is_absolute() ? p : base_dir / p;
}

namespace {

template <class T>
T required(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key))
    fail(ErrorCode::SchemaViolation, where + ": missing field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorCode::SchemaViolation, where + ": field '" + key + "' has the wrong type");
  }
}

}  // namespace

DatasetManifest parse_manifest(const json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) fail(ErrorCode::SchemaViolation, "manifest: top level must be an object");
  DatasetManifest m;
  m.base_dir = base_dir;
  m.format_version = required<int>(doc, "format_version", "manifest");
  if (m.format_version != 1)
    fail(ErrorCode::SchemaViolation, "manifest: unsupported format_version " + std::to_string(m.format_version));

  const auto& classes = doc.contains("class_map") ? doc.at("class_map") : json::object();
  if (!classes.is_object()) fail(ErrorCode::SchemaViolation, "manifest: class_map must be an object");
  for (const auto& [key, value] : classes.items()) {
    int label = 0;
    try {
      std::size_t used = 0;
      label = std::stoi(key, &used);
      if (used != key.size()) throw std::invalid_argument(key);
    } catch (const std::exception&) {
      fail(ErrorCode::SchemaViolation, "manifest: class_map key '" + key + "' is not an integer");
    }
    if (label == 0) fail(ErrorCode::SchemaViolation, "manifest: label 0 is reserved for background");
    if (!value.is_string()) fail(ErrorCode::SchemaViolation, "manifest: class names must be strings");
    m.class_map[label] = value.get<std::string>();
  }

  const auto entries = required<json>(doc, "entries", "manifest");
  if (!entries.is_array()) fail(ErrorCode::SchemaViolation, "manifest: entries must be an array");
  std::set<std::string> ids;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::string where = "manifest entry " + std::to_string(i);
    ManifestEntry e;
    e.id = required<std::string>(entries[i], "id", where);
    e.image_path = required<std::string>(entries[i], "image_path", where);
    e.mask_path = required<std::string>(entries[i], "mask_path", where);
    e.subject_id = required<std::string>(entries[i], "subject_id", where);
    e.slice_index = required<int>(entries[i], "slice_index", where);
    e.modality = required<std::string>(entries[i], "modality", where);
    if (e.id.empty()) fail(ErrorCode::SchemaViolation, where + ": empty id");
    if (e.slice_index < 0) fail(ErrorCode::SchemaViolation, where + ": negative slice_index");
    if (!ids.insert(e.id).second) fail(ErrorCode::DuplicateId, "manifest: duplicate id '" + e.id + "'");
    m.entries.push_back(std::move(e));
  }
  return m;
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::MissingFile, "manifest not found: " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::SchemaViolation, "manifest " + path.string() + ": " + e.what());
  }
  auto m = parse_manifest(doc, path.parent_path());
  for (const auto& e : m.entries) {
    for (const auto& rel : {e.image_path, e.mask_path})
      if (!fs::exists(m.resolve(rel)))
        fail(ErrorCode::MissingFile, "manifest entry '" + e.id + "': " + m.resolve(rel).string() + " not found");
  }
  return m;
}

json manifest_to_json(const DatasetManifest& manifest) {
  json classes = json::object();
  for (const auto& [label, name] : manifest.class_map) classes[std::to_string(label)] = name;
  json entries = json::array();
  for (const auto& e : manifest.entries)
    entries.push_back({{"id", e.id},
                       {"image_path", e.image_path},
                       {"mask_path", e.mask_path},
                       {"subject_id", e.subject_id},
                       {"slice_index", e.slice_index},
                       {"modality", e.modality}});
  return {{"format_version", manifest.format_version}, {"class_map", classes}, {"entries", entries}};
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot write manifest " + path.string());
  out << manifest_to_json(manifest).dump(2) << '\n';
  if (!out) fail(ErrorCode::IoError, "write failed for " + path.string());
}

SampleRecord load_sample(const DatasetManifest& manifest, const ManifestEntry& entry) {
  SampleRecord r;
  r.id = entry.id;
  r.image.pixels = read_image(manifest.resolve(entry.image_path));
  r.image.subject_id = entry.subject_id;
  r.image.slice_index = entry.slice_index;
  r.image.modality = entry.modality;
  r.mask.labels = read_labels(manifest.resolve(entry.mask_path));
  r.mask.class_map = manifest.class_map;
  r.validate();
  return r;
}

std::vector<SampleRecord> load_samples(const DatasetManifest& manifest) {
  std::vector<SampleRecord> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) out.push_back(load_sample(manifest, e));
  return out;
}

std::vector<SampleRecord> slice_volume(const Volume<float>& volume, const Volume<std::int32_t>& masks,
                                       const std::string& subject_id, const ClassMap& class_map,
                                       const std::string& modality) {
  if (volume.depth != masks.depth || volume.height != masks.height || volume.width != masks.width)
    fail(ErrorCode::ShapeMismatch, "volume " + std::to_string(volume.depth) + "x" + std::to_string(volume.height) +
                                       "x" + std::to_string(volume.width) + " vs masks " +
                                       std::to_string(masks.depth) + "x" + std::to_string(masks.height) + "x" +
                                       std::to_string(masks.width));
  const std::size_t n = volume.slice_size();
  if (volume.voxels.size() != n * volume.depth || masks.voxels.size() != n * masks.depth)
    fail(ErrorCode::ShapeMismatch, "volume storage does not match its extent");

  std::vector<SampleRecord> out;
  out.reserve(volume.depth);
  for (int z = 0; z < volume.depth; ++z) {
    SampleRecord r;
    char suffix[16];
    std::snprintf(suffix, sizeof suffix, "_%02d", z);
    r.id = subject_id + suffix;
    auto first = volume.voxels.begin() + static_cast<std::ptrdiff_t>(n * z);
    r.image.pixels = Grid<float>(volume.height, volume.width, std::vector<float>(first, first + n));
    r.image.subject_id = subject_id;
    r.image.slice_index = z;
    r.image.modality = modality;
    auto mfirst = masks.voxels.begin() + static_cast<std::ptrdiff_t>(n * z);
    r.mask.labels = Grid<std::int32_t>(volume.height, volume.width, std::vector<std::int32_t>(mfirst, mfirst + n));
    r.mask.class_map = class_map;
    out.push_back(std::move(r));
  }
  return out;
}

std::pair<Volume<float>, Volume<std::int32_t>> stack_slices(const std::vector<SampleRecord>& records) {
  Volume<float> vol;
  Volume<std::int32_t> lab;
  if (records.empty()) return {vol, lab};
  vol.depth = lab.depth = static_cast<int>(records.size());
  vol.height = lab.height = records.front().image.height();
  vol.width = lab.width = records.front().image.width();
  for (const auto& r : records) {
    if (!r.image.pixels.same_shape(vol.height, vol.width) || !r.mask.labels.same_shape(vol.height, vol.width))
      fail(ErrorCode::ShapeMismatch, "cannot stack slices of different sizes");
    vol.voxels.insert(vol.voxels.end(), r.image.pixels.values().begin(), r.image.pixels.values().end());
    lab.voxels.insert(lab.voxels.end(), r.mask.labels.values().begin(), r.mask.labels.values().end());
  }
  return {vol, lab};
}

void PreprocessSpec::validate() const {
  if (embed_resolution <= 0 || embed_resolution % 14 != 0)
    fail(ErrorCode::InvalidArgument,
         "embed_resolution must be a positive multiple of 14, got " + std::to_string(embed_resolution));
  if (seg_resolution <= 0)
    fail(ErrorCode::InvalidArgument, "seg_resolution must be positive, got " + std::to_string(seg_resolution));
}

json preprocess_to_json(const PreprocessSpec& spec) {
  return {{"embed_resolution", spec.embed_resolution},
          {"seg_resolution", spec.seg_resolution},
          {"intensity_mode", spec.intensity_mode == IntensityMode::MinMax ? "minmax" : "zscore"}};
}

PreprocessSpec preprocess_from_json(const json& doc) {
  PreprocessSpec spec;
  if (!doc.is_object()) return spec;
  spec.embed_resolution = doc.value("embed_resolution", spec.embed_resolution);
  spec.seg_resolution = doc.value("seg_resolution", spec.seg_resolution);
  const auto mode = doc.value("intensity_mode", std::string("minmax"));
  if (mode == "minmax")
    spec.intensity_mode = IntensityMode::MinMax;
  else if (mode == "zscore")
    spec.intensity_mode = IntensityMode::ZScore;
  else
    fail(ErrorCode::SchemaViolation, "unknown intensity_mode '" + mode + "'");
  spec.validate();
  return spec;
}

Grid<float> normalize_intensity(const Grid<float>& pixels, IntensityMode mode) {
  Grid<float> out(pixels.height(), pixels.width());
  auto src = pixels.values();
  auto dst = out.values();
  if (src.empty()) return out;
  for (float v : src)
    if (!std::isfinite(v)) fail(ErrorCode::NonFiniteInput, "non-finite pixel in input image");

  if (mode == IntensityMode::MinMax) {
    const auto [lo_it, hi_it] = std::minmax_element(src.begin(), src.end());
    const double lo = *lo_it, range = static_cast<double>(*hi_it) - lo;
    if (range <= 0.0) return out;
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<float>((src[i] - lo) / range);
    return out;
  }

  double mean = 0.0;
  for (float v : src) mean += v;
  mean /= static_cast<double>(src.size());
  double var = 0.0;
  for (float v : src) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(src.size()));
  if (sd <= 0.0) return out;
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<float>((src[i] - mean) / sd);
  return out;
}

namespace {

cv::Mat as_mat(const Grid<float>& g) {
  return cv::Mat(g.height(), g.width(), CV_32F, const_cast<float*>(g.values().data()));
}

Tensor3 replicate_standardized(const Grid<float>& scaled) {
  Tensor3 out(scaled.height(), scaled.width(), 3);
  auto src = scaled.values();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto px = out.pixel(i);
    for (int c = 0; c < 3; ++c) px[c] = (src[i] - kBackboneMean[c]) / kBackboneStd[c];
  }
  return out;
}

Tensor3 preprocess_to(const ImageSlice& image, IntensityMode mode, int resolution) {
  image.validate();
  // Replication commutes with per-channel resizing, so resize the single channel.
  auto scaled = normalize_intensity(image.pixels, mode);
  return replicate_standardized(resize_bilinear(scaled, resolution, resolution));
}

}  // namespace

Grid<float> resize_bilinear(const Grid<float>& src, int height, int width) {
  if (src.same_shape(height, width)) return src;
  Grid<float> out(height, width);
  cv::Mat dst(height, width, CV_32F, out.values().data());
  cv::resize(as_mat(src), dst, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  return out;
}

Grid<float> resize_area(const Grid<float>& src, int height, int width) {
  if (src.same_shape(height, width)) return src;
  Grid<float> out(height, width);
  cv::Mat dst(height, width, CV_32F, out.values().data());
  cv::resize(as_mat(src), dst, cv::Size(width, height), 0, 0, cv::INTER_AREA);
  return out;
}

namespace {

// Pixel-center nearest neighbor: source index floor((i + 0.5) * src / dst).
template <class T>
Grid<T> resize_nearest(const Grid<T>& src, int height, int width) {
  if (src.same_shape(height, width)) return src;
  if (src.empty()) fail(ErrorCode::ShapeMismatch, "cannot resize an empty grid");
  Grid<T> out(height, width);
  std::vector<int> xs(width);
  for (int x = 0; x < width; ++x)
    xs[x] = std::min(src.width() - 1, static_cast<int>((2LL * x + 1) * src.width() / (2LL * width)));
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(src.height() - 1, static_cast<int>((2LL * y + 1) * src.height() / (2LL * height)));
    for (int x = 0; x < width; ++x) out.at(y, x) = src.at(sy, xs[x]);
  }
  return out;
}

}  // namespace

Grid<std::int32_t> resize_labels_nearest(const Grid<std::int32_t>& src, int height, int width) {
  return resize_nearest(src, height, width);
}

BinaryMask resize_mask_nearest(const BinaryMask& src, int height, int width) {
  return resize_nearest(src, height, width);
}

Tensor3 preprocess_for_embedding(const ImageSlice& image, const PreprocessSpec& spec) {
  spec.validate();
  return preprocess_to(image, spec.intensity_mode, spec.embed_resolution);
}

Tensor3 preprocess_for_segmentation(const ImageSlice& image, const PreprocessSpec& spec) {
  spec.validate();
  return preprocess_to(image, spec.intensity_mode, spec.seg_resolution);
}

}  // namespace ramseg
