#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ramseg/data_model.hpp"

namespace ramseg {

// Short-axis-like phantom slices: an LV disc (3) inside a myocardium ring (2)
// with an RV crescent (1) on one side, integer intensities plus noise. Apical
// slices shrink toward small regions.
struct SyntheticSpec {
  int count = 30;
  int subjects = 3;
  int height = 64;
  int width = 64;
  std::uint64_t seed = 7;
  std::string subject_prefix = "syn";
};

ClassMap cardiac_class_map();

std::vector<SampleRecord> make_synthetic_samples(const SyntheticSpec& spec);

// Writes images/<id>.png, masks/<id>.png and manifest.json under `dir`.
DatasetManifest write_dataset(const std::vector<SampleRecord>& samples, const std::filesystem::path& dir,
                              const ClassMap& class_map);

}  // namespace ramseg
