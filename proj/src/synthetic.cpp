#include "ramseg/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "ramseg/raster_io.hpp"

namespace ramseg {

namespace fs = std::filesystem;

ClassMap cardiac_class_map() { return {{1, "RV"}, {2, "Myo"}, {3, "LV"}}; }

std::vector<SampleRecord> make_synthetic_samples(const SyntheticSpec& spec) {
  if (spec.count < 0 || spec.subjects < 1 || spec.height < 8 || spec.width < 8)
    fail(ErrorCode::InvalidArgument, "synthetic dataset parameters out of range");
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 6.0);

  const int per_subject = (spec.count + spec.subjects - 1) / spec.subjects;
  const double scale = std::min(spec.height, spec.width) / 64.0;
  std::vector<SampleRecord> out;
  out.reserve(spec.count);
  for (int i = 0; i < spec.count; ++i) {
    const int subject = i / per_subject;
    const int slice = i % per_subject;
    // Base-to-apex position in [0,1]; apical slices get small structures.
    const double t = per_subject > 1 ? static_cast<double>(slice) / (per_subject - 1) : 0.5;

    const double cy = spec.height * (0.45 + 0.1 * unit(rng));
    const double cx = spec.width * (0.5 + 0.1 * unit(rng));
    const double lv_r = scale * (9.0 - 6.5 * t + 1.5 * unit(rng));
    const double wall = scale * (3.0 + 1.5 * unit(rng)) * (1.0 - 0.4 * t);
    const double rv_r = scale * (11.0 - 8.0 * t + 2.0 * unit(rng));
    const double rv_dx = -(lv_r + wall + rv_r * 0.55);
    const double rv_squash = 0.55 + 0.2 * unit(rng);
    const double base_level = 30.0 + 20.0 * unit(rng);
    const double contrast = 0.8 + 0.4 * unit(rng);

    SampleRecord r;
    char suffix[16];
    std::snprintf(suffix, sizeof suffix, "_%02d", slice);
    r.image.subject_id = spec.subject_prefix + std::to_string(spec.seed) + "s" + std::to_string(subject);
    r.id = r.image.subject_id + suffix;
    r.image.slice_index = slice;
    r.image.modality = "MR";
    r.image.pixels = Grid<float>(spec.height, spec.width);
    r.mask.labels = Grid<std::int32_t>(spec.height, spec.width);
    r.mask.class_map = cardiac_class_map();

    for (int y = 0; y < spec.height; ++y) {
      for (int x = 0; x < spec.width; ++x) {
        const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
        const double d = std::hypot(dy, dx);
        const double ry = dy / rv_squash, rx = dx - rv_dx;
        int label = 0;
        double level = base_level;
        if (d < lv_r) {
          label = 3;
          level = 190.0;
        } else if (d < lv_r + wall) {
          label = 2;
          level = 85.0;
        } else if (std::hypot(ry, rx) < rv_r) {
          label = 1;
          level = 165.0;
        }
        r.mask.labels.at(y, x) = label;
        const double v = base_level + (level - base_level) * contrast + noise(rng);
        r.image.pixels.at(y, x) = static_cast<float>(std::clamp(std::round(v), 0.0, 1000.0));
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

DatasetManifest write_dataset(const std::vector<SampleRecord>& samples, const fs::path& dir,
                              const ClassMap& class_map) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  DatasetManifest m;
  m.class_map = class_map;
  m.base_dir = dir;
  for (const auto& s : samples) {
    ManifestEntry e;
    e.id = s.id;
    e.image_path = "images/" + s.id + ".png";
    e.mask_path = "masks/" + s.id + ".png";
    e.subject_id = s.image.subject_id;
    e.slice_index = s.image.slice_index;
    e.modality = s.image.modality;
    write_image(dir / e.image_path, s.image.pixels);
    write_labels(dir / e.mask_path, s.mask.labels);
    m.entries.push_back(std::move(e));
  }
  save_manifest(m, dir / "manifest.json");
  return m;
}

}  // namespace ramseg
