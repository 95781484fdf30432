#pragma once

// Synthetic leaf images with a three-level class hierarchy, exact lesion
// severity and domain factors; protocol splits; directory ingestion.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmp/dataset.hpp"
#include "pmp/taxonomy.hpp"

namespace pmp::datagen {

struct GenSpec {
  int coarse = 3;        // base leaf texture groups
  int medium = 2;        // lesion colour groups per coarse group
  int fine = 5;          // lesion geometries per medium group
  int image_size = 32;
  double severity_min = 0.15;
  double severity_max = 0.65;
  double complex_fraction = 0.0;  // probability of a cluttered background
  double illumination = 0.0;      // brightness offset drawn from [-a, a]
  std::uint64_t seed = 0;

  int class_count() const { return coarse * medium * fine; }
  void validate() const;
  nlohmann::json to_json() const;
  static GenSpec from_json(const nlohmann::json& j);
};

// Class names sort in label order: "c<k>m<j>f<i>".
taxonomy::Taxonomy make_taxonomy(const GenSpec& spec);

// Per-class sample counts; each image is a pure function of (spec, class,
// index). Pixel values are multiples of 1/255.
data::Dataset generate_dataset(const GenSpec& spec, int samples_per_class);

// One image, [3 x size*size] row-major pixels, and its metadata.
std::pair<Eigen::MatrixXd, data::SampleMeta> render_image(const GenSpec& spec, int label, int index,
                                                          double severity);

// Labels whose fine index is in `fine_indices` (held-out geometry).
std::vector<int> classes_with_fine(const GenSpec& spec, const std::vector<int>& fine_indices);

// ---------------------------------------------------------------------------
// Protocol splits

struct Partition {
  std::string name;
  std::vector<int> indices;
};

struct ProtocolSplit {
  Partition train;
  std::vector<Partition> eval;
};

struct ProtocolOptions {
  double uniform_illumination = 0.02;  // |offset| at or below counts as uniform
  std::vector<double> severity_bounds = {0.0, 0.25, 0.60, 1.0};
  std::vector<double> resolution_factors = {0.5, 2.0};
};

// "domain-shift", "severity" or "multi-resolution". For multi-resolution the
// eval partitions index the resampled copies from `resample`.
ProtocolSplit split_protocol(const data::Dataset& d, const std::string& protocol, const ProtocolOptions& opts = {});

// Area-averaged (down) or bilinear (up) resampling of every image.
data::Dataset resample(const data::Dataset& d, int size);

// ---------------------------------------------------------------------------
// Directories of images

struct IngestResult {
  data::Dataset data;
  std::vector<int> train, val, test;
  nlohmann::json manifest;
  int skipped = 0;
};

// Class-named subdirectories of decodable images, resized to `size`.
// Stratified 80/10/10 split after a name sort and a seeded shuffle.
IngestResult ingest_directory(const std::string& root, int size, std::uint64_t seed);

// Writes one PNG per image under root/<class>/ and root/manifest.json.
nlohmann::json write_directory(const data::Dataset& d, const std::string& root);

// Stratified split of sample indices per class, fractions 0.8/0.1/0.1.
void stratified_split(const data::Dataset& d, std::uint64_t seed, std::vector<int>& train, std::vector<int>& val,
                      std::vector<int>& test);

}  // namespace pmp::datagen
