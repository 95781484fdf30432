#include "pmp/taxonomy.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "pmp/errors.hpp"

namespace pmp::taxonomy {

const char* level_name(Level l) {
  switch (l) {
    case Level::Coarse: return "coarse";
    case Level::Medium: return "medium";
    case Level::Fine: return "fine";
  }
  return "?";
}

Taxonomy::Taxonomy(std::vector<ClassEntry> classes) : classes_(std::move(classes)) {
  std::map<std::string, std::string> medium_parent;
  std::set<std::string> fines;
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    const auto& c = classes_[i];
    if (c.name.empty() || c.coarse.empty() || c.medium.empty() || c.fine.empty())
      throw StructuralError("class '" + c.name + "' is missing a taxonomy level");
    if (!index_.emplace(c.name, static_cast<int>(i)).second)
      throw StructuralError("duplicate class '" + c.name + "'");
    if (!fines.insert(c.fine).second) throw StructuralError("fine label '" + c.fine + "' is not unique");
    auto [it, fresh] = medium_parent.emplace(c.medium, c.coarse);
    if (!fresh && it->second != c.coarse)
      throw StructuralError("medium label '" + c.medium + "' appears under coarse labels '" + it->second +
                            "' and '" + c.coarse + "'");
  }
}

const ClassEntry& Taxonomy::at(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= classes_.size())
    throw LookupError("unknown class id " + std::to_string(id));
  return classes_[static_cast<std::size_t>(id)];
}

int Taxonomy::id_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw LookupError("unknown class '" + name + "'");
  return it->second;
}

int Taxonomy::distance(int i, int j) const {
  const auto& a = at(i);
  const auto& b = at(j);
  if (a.fine == b.fine) return 0;
  if (a.coarse == b.coarse) return 1;
  return 2;
}

int Taxonomy::distance(const std::string& a, const std::string& b) const { return distance(id_of(a), id_of(b)); }

std::vector<int> Taxonomy::groups(Level level) const {
  std::map<std::string, int> ids;
  std::vector<int> out;
  for (const auto& c : classes_) {
    const std::string& key = level == Level::Coarse ? c.coarse : level == Level::Medium ? c.medium : c.fine;
    auto it = ids.emplace(key, static_cast<int>(ids.size())).first;
    out.push_back(it->second);
  }
  return out;
}

int Taxonomy::group_count(Level level) const {
  auto g = groups(level);
  return static_cast<int>(std::set<int>(g.begin(), g.end()).size());
}

Taxonomy taxonomy_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("taxonomy must be a JSON object");
  std::vector<ClassEntry> classes;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& v = it.value();
    if (!v.is_array() || v.size() != 3)
      throw ConfigError("taxonomy entry '" + it.key() + "' must be [coarse, medium, fine]");
    classes.push_back({it.key(), v[0].get<std::string>(), v[1].get<std::string>(), v[2].get<std::string>()});
  }
  return Taxonomy(std::move(classes));
}

nlohmann::json taxonomy_to_json(const Taxonomy& t) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& c : t.classes()) j[c.name] = {c.coarse, c.medium, c.fine};
  return j;
}

Taxonomy load_taxonomy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open taxonomy file " + path);
  try {
    return taxonomy_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed taxonomy file " + path + ": " + e.what());
  }
}

void save_taxonomy(const Taxonomy& t, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << taxonomy_to_json(t).dump(2) << '\n';
}

double policy_multiplier(Policy p) {
  switch (p) {
    case Policy::Full: return 2.0;
    case Policy::Partial: return 1.5;
    case Policy::None: return 1.0;
  }
  return 1.0;
}

std::array<double, 3> level_separation(const Eigen::VectorXd& pooled, const std::vector<int>& class_ids,
                                       const Taxonomy& t) {
  if (static_cast<Eigen::Index>(class_ids.size()) != pooled.size())
    throw StructuralError("class ids do not match activation rows");
  std::array<double, 3> out{};
  const auto n = static_cast<double>(pooled.size());
  for (int lv = 0; lv < 3; ++lv) {
    const auto g = t.groups(static_cast<Level>(lv));
    std::vector<int> labels;
    labels.reserve(class_ids.size());
    for (int id : class_ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= g.size()) throw LookupError("unknown class id " + std::to_string(id));
      labels.push_back(g[static_cast<std::size_t>(id)]);
    }
    const auto k = static_cast<double>(std::set<int>(labels.begin(), labels.end()).size());
    if (k < 2 || n <= k) {
      out[lv] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    const double d = dacis::fisher_discriminant(Eigen::MatrixXd(pooled), labels)(0);
    out[lv] = d * (n - k) / (k - 1.0);
  }
  return out;
}

std::vector<Level> attribute_channels(const Eigen::MatrixXd& pooled, const std::vector<int>& class_ids,
                                      const Taxonomy& t) {
  std::vector<Level> out;
  for (Eigen::Index c = 0; c < pooled.cols(); ++c) {
    auto s = level_separation(pooled.col(c), class_ids, t);
    // Near-equal separations (identical partitions) resolve to the finer level.
    Level best = Level::Fine;
    double best_v = std::numeric_limits<double>::quiet_NaN();
    for (int lv = 2; lv >= 0; --lv) {
      if (std::isnan(s[lv])) continue;
      if (std::isnan(best_v) || s[lv] > best_v + 1e-12 * std::abs(best_v)) {
        best_v = s[lv];
        best = static_cast<Level>(lv);
      }
    }
    out.push_back(best);
  }
  return out;
}

Attribution attribute(const net::ActivationRecord& acts, const Taxonomy& t) {
  Attribution out;
  for (const auto& l : acts.layers)
    out.push_back({l.layer, l.channels, attribute_channels(l.pooled, acts.labels, t)});
  return out;
}

std::map<std::string, std::vector<double>> protection_factor(const Taxonomy& t, const Attribution& attribution) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& l : attribution) {
    auto& m = out[l.layer];
    for (Level lv : l.levels) {
      auto it = t.policy.find(lv);
      m.push_back(policy_multiplier(it == t.policy.end() ? Policy::None : it->second));
    }
  }
  return out;
}

std::map<std::string, std::vector<double>> no_protection(const dacis::ImportanceTable& table) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& l : table.layers) out[l.layer].assign(l.channels.size(), 1.0);
  return out;
}

}  // namespace pmp::taxonomy
