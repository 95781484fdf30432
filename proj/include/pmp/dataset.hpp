#pragma once

// In-memory labelled image collection with per-image factor metadata.

#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "pmp/net.hpp"

namespace pmp::data {

struct SampleMeta {
  double severity = 0.0;          // lesion pixel fraction of the leaf
  std::string background = "simple";  // simple | complex
  double illumination = 0.0;      // applied brightness offset
  int resolution = 0;             // pixels per side
  std::string source;             // file path for ingested images
};

struct Dataset {
  int channels = 3;
  int height = 0;
  int width = 0;
  Eigen::MatrixXd data;  // [channels x (count * height * width)], values in [0,1]
  std::vector<int> labels;
  std::vector<SampleMeta> meta;
  std::vector<std::string> class_names;

  int count() const { return static_cast<int>(labels.size()); }
  int class_count() const { return static_cast<int>(class_names.size()); }
  Eigen::Index pixels() const { return static_cast<Eigen::Index>(height) * width; }

  // Image i as a [channels x (height*width)] block.
  auto image(int i) const { return data.middleCols(i * pixels(), pixels()); }

  net::Batch gather(const std::vector<int>& idx) const;
  // Same, with labels replaced.
  net::Batch gather(const std::vector<int>& idx, const std::vector<int>& labels) const;
  Dataset subset(const std::vector<int>& idx) const;
  // Sample indices per class label.
  std::vector<std::vector<int>> by_class() const;
  // Keeps only samples of the listed classes; labels are preserved.
  Dataset restrict_classes(const std::vector<int>& classes) const;

  void validate() const;
};

Dataset concat(const Dataset& a, const Dataset& b);

// Stable content digest (SHA-256 hex) over geometry, labels and pixels.
std::string content_hash(const Dataset& d);
std::string sha256_hex(const std::string& bytes);

}  // namespace pmp::data
