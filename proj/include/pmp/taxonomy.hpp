#pragma once

// Three-level class hierarchy (coarse: pathogen type, medium: symptom type,
// fine: disease identity) and the channel protection derived from it.

#include <array>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "pmp/dacis.hpp"
#include "pmp/net.hpp"

namespace pmp::taxonomy {

enum class Level { Coarse = 0, Medium = 1, Fine = 2 };
enum class Policy { Full, Partial, None };

const char* level_name(Level l);

struct ClassEntry {
  std::string name;
  std::string coarse;
  std::string medium;
  std::string fine;
};

class Taxonomy {
 public:
  Taxonomy() = default;
  // Class ids are positions in `classes`. Throws StructuralError when the
  // hierarchy is not a tree or fine labels repeat.
  explicit Taxonomy(std::vector<ClassEntry> classes);

  std::size_t size() const { return classes_.size(); }
  const ClassEntry& at(int id) const;
  int id_of(const std::string& name) const;
  const std::vector<ClassEntry>& classes() const { return classes_; }

  // 0 same fine label, 1 same coarse label, 2 otherwise.
  int distance(int i, int j) const;
  int distance(const std::string& a, const std::string& b) const;

  // Group index of each class id when classes are merged to `level`.
  std::vector<int> groups(Level level) const;
  int group_count(Level level) const;

  std::map<Level, Policy> policy = {
      {Level::Coarse, Policy::Full}, {Level::Medium, Policy::Partial}, {Level::Fine, Policy::None}};

 private:
  std::vector<ClassEntry> classes_;
  std::map<std::string, int> index_;
};

// {class -> [coarse, medium, fine]}; class order follows the object's key order.
Taxonomy taxonomy_from_json(const nlohmann::json& j);
nlohmann::json taxonomy_to_json(const Taxonomy& t);
Taxonomy load_taxonomy(const std::string& path);
void save_taxonomy(const Taxonomy& t, const std::string& path);

double policy_multiplier(Policy p);  // full 2.0, partial 1.5, none 1.0

// Fisher separation of one pooled channel with classes merged to each
// level, scaled by degrees of freedom ((n-k)/(k-1)) so that levels with
// different group counts are comparable. Levels with one group are NaN.
std::array<double, 3> level_separation(const Eigen::VectorXd& pooled, const std::vector<int>& class_ids,
                                       const Taxonomy& t);

// Argmax of level_separation per channel; ties go to the finer level.
std::vector<Level> attribute_channels(const Eigen::MatrixXd& pooled, const std::vector<int>& class_ids,
                                      const Taxonomy& t);

struct LayerAttribution {
  std::string layer;
  std::vector<int> channels;
  std::vector<Level> levels;
};
using Attribution = std::vector<LayerAttribution>;

// `acts.labels` are class ids of `t`.
Attribution attribute(const net::ActivationRecord& acts, const Taxonomy& t);

// Per layer, per retained channel multiplier (>= 1).
std::map<std::string, std::vector<double>> protection_factor(const Taxonomy& t, const Attribution& attribution);

// All multipliers 1.0 for the channels of `table`.
std::map<std::string, std::vector<double>> no_protection(const dacis::ImportanceTable& table);

}  // namespace pmp::taxonomy
