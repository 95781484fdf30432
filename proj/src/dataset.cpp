#include "pmp/dataset.hpp"

#include <cstring>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "pmp/errors.hpp"

namespace pmp::data {

net::Batch Dataset::gather(const std::vector<int>& idx) const {
  std::vector<int> l;
  l.reserve(idx.size());
  for (int i : idx) {
    if (i < 0 || i >= count()) throw LookupError("sample index " + std::to_string(i) + " out of range");
    l.push_back(labels[static_cast<std::size_t>(i)]);
  }
  return gather(idx, l);
}

net::Batch Dataset::gather(const std::vector<int>& idx, const std::vector<int>& new_labels) const {
  if (idx.size() != new_labels.size()) throw StructuralError("index and label counts differ");
  net::Batch b;
  b.channels = channels;
  b.height = height;
  b.width = width;
  b.labels = new_labels;
  b.data.resize(channels, static_cast<Eigen::Index>(idx.size()) * pixels());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= count()) throw LookupError("sample index " + std::to_string(idx[k]) + " out of range");
    b.data.middleCols(static_cast<Eigen::Index>(k) * pixels(), pixels()) = image(idx[k]);
  }
  return b;
}

Dataset Dataset::subset(const std::vector<int>& idx) const {
  Dataset d;
  d.channels = channels;
  d.height = height;
  d.width = width;
  d.class_names = class_names;
  d.data = gather(idx).data;
  for (int i : idx) {
    d.labels.push_back(labels[static_cast<std::size_t>(i)]);
    d.meta.push_back(meta[static_cast<std::size_t>(i)]);
  }
  return d;
}

std::vector<std::vector<int>> Dataset::by_class() const {
  std::vector<std::vector<int>> out(static_cast<std::size_t>(class_count()));
  for (int i = 0; i < count(); ++i) out.at(static_cast<std::size_t>(labels[i])).push_back(i);
  return out;
}

Dataset Dataset::restrict_classes(const std::vector<int>& classes) const {
  std::vector<bool> want(static_cast<std::size_t>(class_count()), false);
  for (int c : classes) want.at(static_cast<std::size_t>(c)) = true;
  std::vector<int> idx;
  for (int i = 0; i < count(); ++i)
    if (want[static_cast<std::size_t>(labels[i])]) idx.push_back(i);
  return subset(idx);
}

void Dataset::validate() const {
  if (channels <= 0 || height <= 0 || width <= 0) throw StructuralError("dataset geometry must be positive");
  if (meta.size() != labels.size()) throw StructuralError("metadata count does not match labels");
  if (data.rows() != channels || data.cols() != static_cast<Eigen::Index>(count()) * pixels())
    throw StructuralError("dataset pixel block does not match its geometry");
  for (int l : labels)
    if (l < 0 || l >= class_count()) throw StructuralError("label " + std::to_string(l) + " has no class name");
}

Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.channels != b.channels || a.height != b.height || a.width != b.width || a.class_names != b.class_names)
    throw StructuralError("datasets are not compatible");
  Dataset d = a;
  d.data.conservativeResize(Eigen::NoChange, a.data.cols() + b.data.cols());
  d.data.rightCols(b.data.cols()) = b.data;
  d.labels.insert(d.labels.end(), b.labels.begin(), b.labels.end());
  d.meta.insert(d.meta.end(), b.meta.begin(), b.meta.end());
  return d;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string content_hash(const Dataset& d) {
  std::string buf;
  auto put = [&](const void* p, std::size_t n) { buf.append(static_cast<const char*>(p), n); };
  const int geom[4] = {d.channels, d.height, d.width, d.count()};
  put(geom, sizeof geom);
  put(d.labels.data(), d.labels.size() * sizeof(int));
  put(d.data.data(), static_cast<std::size_t>(d.data.size()) * sizeof(double));
  for (const auto& n : d.class_names) buf += n + '\n';
  return sha256_hex(buf);
}

}  // namespace pmp::data
