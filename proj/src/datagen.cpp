#include "pmp/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include "pmp/errors.hpp"
#include "pmp/random.hpp"

namespace pmp::datagen {

namespace fs = std::filesystem;

void GenSpec::validate() const {
  if (coarse < 1 || medium < 1 || fine < 1 || class_count() < 2) throw ConfigError("generator needs at least 2 classes");
  if (image_size < 16) throw ConfigError("image size must be at least 16");
  if (!(severity_min >= 0 && severity_max <= 1 && severity_min <= severity_max))
    throw ConfigError("severity range must lie within [0,1]");
  if (!(complex_fraction >= 0 && complex_fraction <= 1)) throw ConfigError("complex fraction must lie within [0,1]");
  if (!(illumination >= 0 && illumination <= 0.5)) throw ConfigError("illumination amplitude must lie within [0,0.5]");
}

nlohmann::json GenSpec::to_json() const {
  return {{"coarse", coarse},
          {"medium", medium},
          {"fine", fine},
          {"image_size", image_size},
          {"severity", {severity_min, severity_max}},
          {"complex_fraction", complex_fraction},
          {"illumination", illumination},
          {"seed", seed}};
}

GenSpec GenSpec::from_json(const nlohmann::json& j) {
  GenSpec s;
  s.coarse = j.value("coarse", s.coarse);
  s.medium = j.value("medium", s.medium);
  s.fine = j.value("fine", s.fine);
  s.image_size = j.value("image_size", s.image_size);
  if (j.contains("severity")) {
    s.severity_min = j.at("severity").at(0).get<double>();
    s.severity_max = j.at("severity").at(1).get<double>();
  }
  s.complex_fraction = j.value("complex_fraction", s.complex_fraction);
  s.illumination = j.value("illumination", s.illumination);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

namespace {

struct ClassCode {
  int coarse, medium, fine;
};

ClassCode decode(const GenSpec& s, int label) {
  return {label / (s.medium * s.fine), (label / s.fine) % s.medium, label % s.fine};
}

std::string pad(int v) { return (v < 10 ? "0" : "") + std::to_string(v); }

std::string class_name(const ClassCode& c) { return "c" + pad(c.coarse) + "m" + pad(c.medium) + "f" + pad(c.fine); }

// Hue-like colour wheel with fixed saturation, for arbitrary group counts.
std::array<double, 3> palette(double t, double lo, double hi) {
  std::array<double, 3> c;
  for (int k = 0; k < 3; ++k) c[k] = lo + (hi - lo) * (0.5 + 0.5 * std::cos(2.0 * M_PI * (t - k / 3.0)));
  return c;
}

}  // namespace

taxonomy::Taxonomy make_taxonomy(const GenSpec& spec) {
  spec.validate();
  std::vector<taxonomy::ClassEntry> entries;
  for (int l = 0; l < spec.class_count(); ++l) {
    const auto c = decode(spec, l);
    const auto name = class_name(c);
    entries.push_back({name, "c" + pad(c.coarse), "c" + pad(c.coarse) + "m" + pad(c.medium), name});
  }
  return taxonomy::Taxonomy(entries);
}

std::vector<int> classes_with_fine(const GenSpec& spec, const std::vector<int>& fine_indices) {
  std::vector<int> out;
  for (int l = 0; l < spec.class_count(); ++l)
    if (std::find(fine_indices.begin(), fine_indices.end(), decode(spec, l).fine) != fine_indices.end())
      out.push_back(l);
  return out;
}

std::pair<Eigen::MatrixXd, data::SampleMeta> render_image(const GenSpec& spec, int label, int index,
                                                          double severity) {
  const int S = spec.image_size;
  const auto code = decode(spec, label);
  auto rng = rnd::engine(spec.seed, static_cast<std::uint64_t>(label) * 1000003ULL + static_cast<std::uint64_t>(index));
  auto u = [&](double a, double b) { return rnd::uniform(rng, a, b); };

  data::SampleMeta meta;
  meta.resolution = S;
  meta.background = rnd::uniform01(rng) < spec.complex_fraction ? "complex" : "simple";
  meta.illumination = spec.illumination > 0 ? u(-spec.illumination, spec.illumination) : 0.0;

  // Leaf geometry.
  const double cx = u(-0.04, 0.04), cy = u(-0.04, 0.04);
  const double ax = 0.42 * u(0.9, 1.1), ay = 0.34 * u(0.9, 1.1);
  const double rot = u(-0.25, 0.25), cr = std::cos(rot), sr = std::sin(rot);

  // Coarse group: leaf colour and vein frequency.
  const double tc = spec.coarse > 1 ? double(code.coarse) / spec.coarse : 0.0;
  auto leaf = palette(0.33 + 0.25 * tc, 0.12, 0.62);
  const double vein_freq = 3.0 + 2.5 * code.coarse;
  // Medium group: lesion colour.
  const double tm = spec.medium > 1 ? double(code.medium) / spec.medium : 0.0;
  auto lesion = palette(0.02 + 0.5 * tm + 0.1 * tc + 0.08 * code.fine, 0.10, 0.85);

  // Fine geometry parameters.
  const int kind = code.fine % 5;
  const double orient = 0.6 * (code.fine / 5) + 0.5 * code.medium;
  std::vector<std::array<double, 2>> blobs;
  for (int b = 0; b < 6; ++b) blobs.push_back({u(-0.25, 0.25), u(-0.25, -0.05)});
  const double phase = u(0.0, 2.0 * M_PI);
  const double ring_x = u(-0.1, 0.1), ring_y = u(-0.1, 0.1);

  const Eigen::Index P = static_cast<Eigen::Index>(S) * S;
  Eigen::MatrixXd img(3, P);
  std::vector<double> field(static_cast<std::size_t>(P), -1e300);
  std::vector<Eigen::Index> leaf_px;
  std::vector<double> bg_noise(3);
  for (auto& v : bg_noise) v = u(0, 2.0 * M_PI);

  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const Eigen::Index p = static_cast<Eigen::Index>(y) * S + x;
      const double px = (x + 0.5) / S - 0.5, py = (y + 0.5) / S - 0.5;
      const double lx = cr * (px - cx) + sr * (py - cy), ly = -sr * (px - cx) + cr * (py - cy);
      const double r2 = (lx / ax) * (lx / ax) + (ly / ay) * (ly / ay);
      if (r2 <= 1.0) {
        const double vein = 0.07 * std::sin(2.0 * M_PI * vein_freq * ly + 0.5 * lx);
        for (int k = 0; k < 3; ++k) img(k, p) = leaf[static_cast<std::size_t>(k)] + vein + 0.025 * rnd::normal(rng);
        double f = 0.0;
        switch (kind) {
          case 0:  // spots
            for (const auto& b : blobs) f += std::exp(-((lx - b[0]) * (lx - b[0]) + (ly - b[1]) * (ly - b[1])) / 0.004);
            break;
          case 1: {  // stripes
            const double t = std::cos(orient) * lx + std::sin(orient) * ly;
            f = std::sin(2.0 * M_PI * 6.0 * t + phase) - 4.0 * lx;
            break;
          }
          case 2: {  // rings
            const double r = std::hypot(lx - ring_x, ly - ring_y);
            f = std::cos(2.0 * M_PI * 7.0 * r) - 2.0 * r + 4.0 * lx;
            break;
          }
          case 3:  // blight from the margin
            f = r2 + 0.3 * std::sin(9.0 * std::atan2(ly, lx) + phase);
            break;
          default:  // central blotch
            f = -std::hypot(lx - 0.5 * ring_x, ly - 0.5 * ring_y) + 0.05 * std::sin(5.0 * lx + phase);
        }
        field[static_cast<std::size_t>(p)] = f + 1e-9 * rnd::uniform01(rng);
        leaf_px.push_back(p);
      } else if (meta.background == "complex") {
        for (int k = 0; k < 3; ++k)
          img(k, p) = 0.45 + 0.2 * std::sin(11.0 * px + 7.0 * py + bg_noise[static_cast<std::size_t>(k)]) +
                      0.15 * std::sin(23.0 * py - 5.0 * px) + 0.08 * rnd::normal(rng);
      } else {
        img(0, p) = 0.88;
        img(1, p) = 0.86;
        img(2, p) = 0.80;
      }
    }

  const auto lesion_count = static_cast<std::size_t>(std::llround(severity * double(leaf_px.size())));
  if (lesion_count > 0) {
    std::vector<Eigen::Index> order = leaf_px;
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(lesion_count - 1), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) {
                       return field[static_cast<std::size_t>(a)] > field[static_cast<std::size_t>(b)];
                     });
    for (std::size_t i = 0; i < lesion_count; ++i)
      for (int k = 0; k < 3; ++k)
        img(k, order[i]) = lesion[static_cast<std::size_t>(k)] + 0.04 * rnd::normal(rng);
  }
  meta.severity = leaf_px.empty() ? 0.0 : double(lesion_count) / double(leaf_px.size());

  img.array() += meta.illumination;
  for (Eigen::Index k = 0; k < img.size(); ++k)
    img.data()[k] = std::round(std::clamp(img.data()[k], 0.0, 1.0) * 255.0) / 255.0;
  return {img, meta};
}

data::Dataset generate_dataset(const GenSpec& spec, int samples_per_class) {
  spec.validate();
  if (samples_per_class < 1) throw ConfigError("samples per class must be positive");
  data::Dataset d;
  d.channels = 3;
  d.height = d.width = spec.image_size;
  for (int l = 0; l < spec.class_count(); ++l) d.class_names.push_back(class_name(decode(spec, l)));
  const int n = spec.class_count() * samples_per_class;
  d.data.resize(3, static_cast<Eigen::Index>(n) * d.pixels());
  int at = 0;
  for (int l = 0; l < spec.class_count(); ++l) {
    auto srng = rnd::engine(spec.seed, 0x5e7e81ULL + static_cast<std::uint64_t>(l));
    for (int i = 0; i < samples_per_class; ++i) {
      const double sev = rnd::uniform(srng, spec.severity_min, spec.severity_max);
      auto [img, meta] = render_image(spec, l, i, sev);
      d.data.middleCols(static_cast<Eigen::Index>(at) * d.pixels(), d.pixels()) = img;
      d.labels.push_back(l);
      d.meta.push_back(meta);
      ++at;
    }
  }
  return d;
}

// ---------------------------------------------------------------------------

namespace {

cv::Mat to_mat(const data::Dataset& d, int i) {
  cv::Mat m(d.height, d.width, CV_64FC3);
  const auto img = d.image(i);
  for (int y = 0; y < d.height; ++y)
    for (int x = 0; x < d.width; ++x) {
      auto& px = m.at<cv::Vec3d>(y, x);
      for (int k = 0; k < 3; ++k) px[k] = img(k, static_cast<Eigen::Index>(y) * d.width + x);
    }
  return m;
}

void from_mat(const cv::Mat& m, Eigen::Ref<Eigen::MatrixXd> out) {
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) {
      const auto& px = m.at<cv::Vec3d>(y, x);
      for (int k = 0; k < 3; ++k) out(k, static_cast<Eigen::Index>(y) * m.cols + x) = px[k];
    }
}

std::string bounds_text(double lo, double hi) {
  return "[" + std::to_string(lo) + ", " + std::to_string(hi) + ")";
}

}  // namespace

data::Dataset resample(const data::Dataset& d, int size) {
  if (size < 1) throw ArgumentError("resample size must be positive");
  if (d.channels != 3) throw StructuralError("resampling expects 3-channel images");
  data::Dataset out;
  out.channels = 3;
  out.height = out.width = size;
  out.class_names = d.class_names;
  out.labels = d.labels;
  out.meta = d.meta;
  out.data.resize(3, static_cast<Eigen::Index>(d.count()) * size * size);
  const int interp = size < d.width ? cv::INTER_AREA : cv::INTER_LINEAR;
  for (int i = 0; i < d.count(); ++i) {
    cv::Mat r;
    cv::resize(to_mat(d, i), r, cv::Size(size, size), 0, 0, interp);
    from_mat(r, out.data.middleCols(static_cast<Eigen::Index>(i) * size * size, static_cast<Eigen::Index>(size) * size));
    out.meta[static_cast<std::size_t>(i)].resolution = size;
  }
  return out;
}

ProtocolSplit split_protocol(const data::Dataset& d, const std::string& protocol, const ProtocolOptions& opts) {
  ProtocolSplit s;
  if (protocol == "domain-shift") {
    s.train.name = "simple-uniform";
    Partition eval{"complex-or-variable", {}};
    for (int i = 0; i < d.count(); ++i) {
      const auto& m = d.meta[static_cast<std::size_t>(i)];
      const bool uniform = m.background == "simple" && std::abs(m.illumination) <= opts.uniform_illumination;
      (uniform ? s.train.indices : eval.indices).push_back(i);
    }
    if (s.train.indices.empty())
      throw ArgumentError("domain-shift train partition is empty (background simple, |illumination| <= " +
                          std::to_string(opts.uniform_illumination) + ")");
    if (eval.indices.empty())
      throw ArgumentError("domain-shift eval partition is empty (background complex or |illumination| > " +
                          std::to_string(opts.uniform_illumination) + ")");
    s.eval.push_back(eval);
  } else if (protocol == "severity") {
    const auto& b = opts.severity_bounds;
    if (b.size() < 3) throw ConfigError("severity protocol needs at least three bounds");
    std::vector<Partition> parts(b.size() - 1);
    for (std::size_t k = 0; k + 1 < b.size(); ++k) parts[k].name = "severity " + bounds_text(b[k], b[k + 1]);
    for (int i = 0; i < d.count(); ++i) {
      const double v = d.meta[static_cast<std::size_t>(i)].severity;
      for (std::size_t k = 0; k + 1 < b.size(); ++k) {
        const bool last = k + 2 == b.size();
        if (v >= b[k] && (v < b[k + 1] || (last && v <= b[k + 1]))) {
          parts[k].indices.push_back(i);
          break;
        }
      }
    }
    for (std::size_t k = 0; k < parts.size(); ++k)
      if (parts[k].indices.empty())
        throw ArgumentError("severity partition " + bounds_text(b[k], b[k + 1]) + " is empty");
    s.train = parts.front();
    s.eval.assign(parts.begin() + 1, parts.end());
  } else if (protocol == "multi-resolution") {
    s.train.name = "native " + std::to_string(d.width);
    for (int i = 0; i < d.count(); ++i) s.train.indices.push_back(i);
    if (s.train.indices.empty()) throw ArgumentError("multi-resolution protocol on an empty dataset");
    for (double f : opts.resolution_factors) {
      const int size = static_cast<int>(std::lround(d.width * f));
      if (size < 1) throw ArgumentError("resolution factor " + std::to_string(f) + " gives an empty image");
      s.eval.push_back({"resolution " + std::to_string(size), s.train.indices});
    }
  } else {
    throw ArgumentError("unknown protocol '" + protocol + "' (domain-shift, multi-resolution, severity)");
  }
  return s;
}

void stratified_split(const data::Dataset& d, std::uint64_t seed, std::vector<int>& train, std::vector<int>& val,
                      std::vector<int>& test) {
  train.clear();
  val.clear();
  test.clear();
  const auto groups = d.by_class();
  for (std::size_t c = 0; c < groups.size(); ++c) {
    auto idx = groups[c];
    auto rng = rnd::engine(seed, 0x5b117ULL + c);
    rnd::shuffle(idx, rng);
    const auto n = idx.size();
    const auto n_train = static_cast<std::size_t>(std::llround(0.8 * double(n)));
    const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(0.1 * double(n))));
    for (std::size_t i = 0; i < n; ++i) (i < n_train ? train : i < n_train + n_val ? val : test).push_back(idx[i]);
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  std::sort(test.begin(), test.end());
}

IngestResult ingest_directory(const std::string& root, int size, std::uint64_t seed) {
  if (!fs::is_directory(root)) throw ArgumentError("dataset root '" + root + "' is not a directory");
  if (size < 1) throw ArgumentError("ingest size must be positive");
  std::vector<std::string> classes;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) classes.push_back(e.path().filename().string());
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw ArgumentError("dataset root '" + root + "' has no class directories");

  std::map<std::string, nlohmann::json> recorded;
  if (std::ifstream mf(fs::path(root) / "manifest.json"); mf) {
    try {
      const auto j = nlohmann::json::parse(mf);
      for (const auto& f : j.at("files")) recorded[f.at("path").get<std::string>()] = f;
    } catch (const std::exception& e) {
      spdlog::warn("ignoring unreadable manifest in {}: {}", root, e.what());
    }
  }

  IngestResult r;
  r.data.channels = 3;
  r.data.height = r.data.width = size;
  r.data.class_names = classes;
  std::vector<Eigen::MatrixXd> images;
  std::vector<std::string> files_json;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(fs::path(root) / classes[c]))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    int kept = 0;
    for (const auto& f : files) {
      cv::Mat raw = cv::imread(f.string(), cv::IMREAD_COLOR);
      if (raw.empty()) {
        spdlog::warn("skipping unreadable image {}", f.string());
        ++r.skipped;
        continue;
      }
      cv::Mat rgb, sized, dbl;
      cv::cvtColor(raw, rgb, cv::COLOR_BGR2RGB);
      if (rgb.rows != size || rgb.cols != size)
        cv::resize(rgb, sized, cv::Size(size, size), 0, 0, rgb.cols > size ? cv::INTER_AREA : cv::INTER_LINEAR);
      else
        sized = rgb;
      sized.convertTo(dbl, CV_64FC3);
      Eigen::MatrixXd img(3, static_cast<Eigen::Index>(size) * size);
      from_mat(dbl, img);
      for (Eigen::Index k = 0; k < img.size(); ++k) img.data()[k] = img.data()[k] / 255.0;
      images.push_back(std::move(img));
      r.data.labels.push_back(static_cast<int>(c));
      data::SampleMeta m;
      m.resolution = size;
      m.source = fs::relative(f, root).string();
      if (auto it = recorded.find(m.source); it != recorded.end()) {
        m.severity = it->second.value("severity", 0.0);
        m.background = it->second.value("background", std::string("simple"));
        m.illumination = it->second.value("illumination", 0.0);
      }
      r.data.meta.push_back(m);
      ++kept;
    }
    if (kept == 0) throw ArgumentError("class directory '" + classes[c] + "' has no readable images");
  }
  r.data.data.resize(3, static_cast<Eigen::Index>(images.size()) * size * size);
  for (std::size_t i = 0; i < images.size(); ++i)
    r.data.data.middleCols(static_cast<Eigen::Index>(i) * size * size, static_cast<Eigen::Index>(size) * size) =
        images[i];

  stratified_split(r.data, seed, r.train, r.val, r.test);
  auto names = [&](const std::vector<int>& idx) {
    std::vector<std::string> out;
    for (int i : idx) out.push_back(r.data.meta[static_cast<std::size_t>(i)].source);
    return out;
  };
  r.manifest = {{"root", root},
                {"size", size},
                {"seed", seed},
                {"classes", classes},
                {"skipped", r.skipped},
                {"splits", {{"train", names(r.train)}, {"val", names(r.val)}, {"test", names(r.test)}}},
                {"content_sha256", data::content_hash(r.data)}};
  r.manifest["split_sha256"] = data::sha256_hex(r.manifest["splits"].dump());
  return r;
}

nlohmann::json write_directory(const data::Dataset& d, const std::string& root) {
  fs::create_directories(root);
  nlohmann::json files = nlohmann::json::array();
  std::vector<int> counter(static_cast<std::size_t>(d.class_count()), 0);
  for (int i = 0; i < d.count(); ++i) {
    const int l = d.labels[static_cast<std::size_t>(i)];
    const auto& cls = d.class_names[static_cast<std::size_t>(l)];
    fs::create_directories(fs::path(root) / cls);
    const int k = counter[static_cast<std::size_t>(l)]++;
    std::string num = std::to_string(k);
    num.insert(0, num.size() < 5 ? 5 - num.size() : 0, '0');
    const auto rel = (fs::path(cls) / ("img_" + num + ".png")).string();
    cv::Mat m = to_mat(d, i), rgb8, bgr8;
    m.convertTo(rgb8, CV_8UC3, 255.0);
    cv::cvtColor(rgb8, bgr8, cv::COLOR_RGB2BGR);
    if (!cv::imwrite((fs::path(root) / rel).string(), bgr8)) throw std::runtime_error("failed to write " + rel);
    const auto& meta = d.meta[static_cast<std::size_t>(i)];
    files.push_back({{"path", rel},
                     {"label", cls},
                     {"severity", meta.severity},
                     {"background", meta.background},
                     {"illumination", meta.illumination},
                     {"resolution", meta.resolution}});
  }
  nlohmann::json manifest = {{"classes", d.class_names}, {"files", files}, {"content_sha256", data::content_hash(d)}};
  std::ofstream(fs::path(root) / "manifest.json") << manifest.dump(2) << "\n";
  return manifest;
}

}  // namespace pmp::datagen
