#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ramseg/tensor.hpp"

namespace ramseg {

using ClassMap = std::map<int, std::string>;

struct ImageSlice {
  Grid<float> pixels;
  std::string subject_id;
  int slice_index = 0;
  std::string modality;

  int height() const noexcept { return pixels.height(); }
  int width() const noexcept { return pixels.width(); }
  // Throws ShapeMismatch on an empty grid, NonFiniteInput on NaN/Inf pixels.
  void validate() const;
};

struct LabelMask {
  Grid<std::int32_t> labels;
  ClassMap class_map;

  // 1 where labels == label.
  BinaryMask binary(int label) const;
  std::size_t count(int label) const;
};

enum class Provenance { Dataset, UserAccepted };

std::string_view provenance_name(Provenance p);
Provenance parse_provenance(std::string_view name);

struct SampleRecord {
  std::string id;
  ImageSlice image;
  LabelMask mask;
  Provenance provenance = Provenance::Dataset;

  void validate() const;
};

struct ManifestEntry {
  std::string id;
  std::string image_path;
  std::string mask_path;
  std::string subject_id;
  int slice_index = 0;
  std::string modality;
};

struct DatasetManifest {
  int format_version = 1;
  ClassMap class_map;
  std::vector<ManifestEntry> entries;
  // Directory relative paths resolve against; the manifest file's parent.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& relative) const;
};

DatasetManifest parse_manifest(const nlohmann::json& doc, const std::filesystem::path& base_dir);
DatasetManifest load_manifest(const std::filesystem::path& path);
nlohmann::json manifest_to_json(const DatasetManifest& manifest);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

SampleRecord load_sample(const DatasetManifest& manifest, const ManifestEntry& entry);
std::vector<SampleRecord> load_samples(const DatasetManifest& manifest);

// D×H×W volume, slice-major.
template <class T>
struct Volume {
  int depth = 0;
  int height = 0;
  int width = 0;
  std::vector<T> voxels;

  std::size_t slice_size() const noexcept { return static_cast<std::size_t>(height) * width; }
  friend bool operator==(const Volume&, const Volume&) = default;
};

// One record per axial slice with id "<subject>_<NN>" and slice_index = axial position.
std::vector<SampleRecord> slice_volume(const Volume<float>& volume,
                                       const Volume<std::int32_t>& masks,
                                       const std::string& subject_id,
                                       const ClassMap& class_map = {},
                                       const std::string& modality = "MR");

// Inverse of slice_volume for records of one subject in slice order.
std::pair<Volume<float>, Volume<std::int32_t>> stack_slices(const std::vector<SampleRecord>& records);

enum class IntensityMode { MinMax, ZScore };

struct PreprocessSpec {
  int embed_resolution = 518;
  int seg_resolution = 1024;
  IntensityMode intensity_mode = IntensityMode::MinMax;

  void validate() const;
  friend bool operator==(const PreprocessSpec&, const PreprocessSpec&) = default;
};

nlohmann::json preprocess_to_json(const PreprocessSpec& spec);
PreprocessSpec preprocess_from_json(const nlohmann::json& doc);

// Per-slice intensity scaling applied before any backbone standardization.
// MinMax maps to [0,1]; a constant image maps to all zeros.
Grid<float> normalize_intensity(const Grid<float>& pixels, IntensityMode mode);

// ImageNet channel statistics shared by both backbones.
inline constexpr float kBackboneMean[3] = {0.485f, 0.456f, 0.406f};
inline constexpr float kBackboneStd[3] = {0.229f, 0.224f, 0.225f};

Tensor3 preprocess_for_embedding(const ImageSlice& image, const PreprocessSpec& spec);
Tensor3 preprocess_for_segmentation(const ImageSlice& image, const PreprocessSpec& spec);

Grid<float> resize_bilinear(const Grid<float>& src, int height, int width);
Grid<float> resize_area(const Grid<float>& src, int height, int width);
Grid<std::int32_t> resize_labels_nearest(const Grid<std::int32_t>& src, int height, int width);
BinaryMask resize_mask_nearest(const BinaryMask& src, int height, int width);

}  // namespace ramseg
