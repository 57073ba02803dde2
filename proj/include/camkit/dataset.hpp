#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "camkit/error.hpp"
#include "camkit/image.hpp"
#include "camkit/netpbm.hpp"
#include "camkit/preprocess.hpp"
#include "camkit/rng.hpp"

namespace camkit {

struct LabeledDataset {
  std::vector<ImageF> images;
  std::vector<std::size_t> labels;
  std::vector<std::string> paths;  // relative to the dataset root; empty for in-memory items
  std::vector<std::string> class_names;

  std::size_t size() const { return images.size(); }

  void validate() const {
    if (labels.size() != images.size()) throw Error(Errc::invalid_argument, "labels/images size mismatch");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= class_names.size()) {
        throw Error(Errc::label_out_of_range, "item " + std::to_string(i) + " has label " +
                                                  std::to_string(labels[i]));
      }
    }
  }

  /// Items at `indices`, in that order.
  LabeledDataset subset(const std::vector<std::size_t>& indices) const {
    LabeledDataset out;
    out.class_names = class_names;
    for (std::size_t i : indices) {
      out.images.push_back(images.at(i));
      out.labels.push_back(labels.at(i));
      out.paths.push_back(paths.empty() ? std::string() : paths.at(i));
    }
    return out;
  }
};

enum class SplitPart { train, val, test };

inline const char* split_name(SplitPart part) {
  switch (part) {
    case SplitPart::train: return "train";
    case SplitPart::val: return "val";
    case SplitPart::test: return "test";
  }
  return "?";
}

struct SplitManifest {
  std::vector<std::size_t> train, val, test;  // ascending dataset indices
  std::uint64_t seed = 0;
  std::vector<std::array<std::size_t, 3>> per_class;  // (train, val, test) counts per class

  const std::vector<std::size_t>& part(SplitPart p) const {
    return p == SplitPart::train ? train : p == SplitPart::val ? val : test;
  }
};

/// Per class c (in class order) with n_c items: shuffle the class's indices
/// with one Rng(seed) shared across classes; n_test = floor(r_test * n_c),
/// n_val = floor(r_val * n_c); test takes the first n_test shuffled indices,
/// val the next n_val, train the rest.
inline SplitManifest stratified_split(const std::vector<std::size_t>& labels, std::size_t num_classes,
                                      std::array<double, 3> ratios, std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0) {
    throw Error(Errc::invalid_argument, "split ratios must be non-negative and sum to 1");
  }
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw Error(Errc::label_out_of_range, "item " + std::to_string(i) + " has label " +
                                                std::to_string(labels[i]));
    }
    by_class[labels[i]].push_back(i);
  }
  SplitManifest m;
  m.seed = seed;
  Rng rng(seed);
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < 3) {
      throw Error(Errc::invalid_argument, "class " + std::to_string(c) + " has " +
                                              std::to_string(idx.size()) + " items; need at least 3");
    }
    rng.shuffle(std::span<std::size_t>(idx));
    const double n = static_cast<double>(idx.size());
    const auto n_test = static_cast<std::size_t>(std::floor(ratios[2] * n + 1e-9));
    const auto n_val = static_cast<std::size_t>(std::floor(ratios[1] * n + 1e-9));
    const std::size_t n_train = idx.size() - n_val - n_test;
    m.test.insert(m.test.end(), idx.begin(), idx.begin() + n_test);
    m.val.insert(m.val.end(), idx.begin() + n_test, idx.begin() + n_test + n_val);
    m.train.insert(m.train.end(), idx.begin() + n_test + n_val, idx.end());
    m.per_class.push_back({n_train, n_val, n_test});
  }
  std::sort(m.train.begin(), m.train.end());
  std::sort(m.val.begin(), m.val.end());
  std::sort(m.test.begin(), m.test.end());
  return m;
}

inline SplitManifest stratified_split(const LabeledDataset& data, std::uint64_t seed,
                                      std::array<double, 3> ratios = {0.8, 0.1, 0.1}) {
  return stratified_split(data.labels, data.class_names.size(), ratios, seed);
}

/// CSV `index,path,label,split`, one row per dataset item in index order.
inline std::string manifest_csv(const SplitManifest& m, const LabeledDataset& data) {
  std::vector<const char*> part(data.size(), nullptr);
  for (SplitPart p : {SplitPart::train, SplitPart::val, SplitPart::test})
    for (std::size_t i : m.part(p)) part.at(i) = split_name(p);
  std::ostringstream out;
  out << "index,path,label,split\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!part[i]) throw Error(Errc::invalid_argument, "item " + std::to_string(i) + " not in any split");
    out << i << ',' << (data.paths.empty() ? "" : data.paths[i]) << ',' << data.labels[i] << ','
        << part[i] << '\n';
  }
  return out.str();
}

/// Reads the split assignment back; checks it against the dataset's paths and labels.
inline SplitManifest parse_manifest_csv(const std::string& text, const LabeledDataset& data) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "index,path,label,split") {
    throw Error(Errc::parse_error, "manifest header must be 'index,path,label,split'");
  }
  SplitManifest m;
  std::vector<bool> seen(data.size(), false);
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() != 4) throw Error(Errc::parse_error, "manifest row " + std::to_string(row) + " malformed");
    std::size_t index = 0, label = 0;
    try {
      index = std::stoul(cells[0]);
      label = std::stoul(cells[2]);
    } catch (const std::exception&) {
      throw Error(Errc::parse_error, "manifest row " + std::to_string(row) + " has a bad number");
    }
    if (index >= data.size() || seen[index]) {
      throw Error(Errc::parse_error, "manifest row " + std::to_string(row) + " has bad index");
    }
    if (label != data.labels[index] || (!data.paths.empty() && cells[1] != data.paths[index])) {
      throw Error(Errc::parse_error, "manifest row " + std::to_string(row) + " does not match dataset");
    }
    seen[index] = true;
    if (cells[3] == "train") m.train.push_back(index);
    else if (cells[3] == "val") m.val.push_back(index);
    else if (cells[3] == "test") m.test.push_back(index);
    else throw Error(Errc::parse_error, "manifest row " + std::to_string(row) + " has split '" + cells[3] + "'");
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw Error(Errc::parse_error, "manifest does not cover every dataset item");
  }
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

inline const std::vector<std::string>& synth_class_names() {
  static const std::vector<std::string> names{"0_disk", "1_rectangle", "2_cross"};
  return names;
}

/// One synthetic image: dark background, a bright shape of class `label`
/// with random center, size and intensity, plus N(0, 0.02^2) noise, clipped
/// to [0,1] and min-max normalized like ingested images. Shapes: 0 disk;
/// 1 axis-aligned rectangle with aspect ratio at least 1.5 (long side
/// horizontal or vertical at random); 2 plus-shaped cross with thin arms.
inline ImageF synth_image(std::size_t label, std::size_t size, Rng& rng) {
  const double s = static_cast<double>(size);
  const double background = rng.uniform(0.0, 0.15);
  const double intensity = rng.uniform(0.6, 1.0);
  const double cx = rng.uniform(0.4, 0.6) * s;
  const double cy = rng.uniform(0.4, 0.6) * s;
  const double a = rng.uniform(0.16, 0.24) * s;  // radius / long half-side / arm length
  const double b = rng.uniform(0.07, 0.11) * s;  // short half-side
  const double t = rng.uniform(0.035, 0.05) * s;  // cross half-thickness
  const bool tall = rng.bernoulli(0.5);
  const double hw = tall ? b : a, hh = tall ? a : b;
  ImageF img(size, size, 1, background);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx;
      const double dy = static_cast<double>(y) + 0.5 - cy;
      bool inside = false;
      switch (label) {
        case 0: inside = dx * dx + dy * dy <= a * a; break;
        case 1: inside = std::abs(dx) <= hw && std::abs(dy) <= hh; break;
        default:
          inside = (std::abs(dx) <= a && std::abs(dy) <= t) || (std::abs(dy) <= a && std::abs(dx) <= t);
          break;
      }
      if (inside) img.at(y, x) = intensity;
    }
  }
  for (double& v : img.values) v = std::clamp(v + 0.02 * rng.normal(), 0.0, 1.0);
  return minmax_normalize(img);
}

/// n_per_class images of each of the three classes, class-major order.
/// Item i of class c draws from Rng(derive_seed(seed, {c, i})).
inline LabeledDataset synth_dataset(std::size_t n_per_class, std::size_t image_size, std::uint64_t seed) {
  if (n_per_class == 0) throw Error(Errc::invalid_argument, "n_per_class must be >= 1");
  if (image_size < 8) throw Error(Errc::invalid_argument, "image_size must be >= 8");
  LabeledDataset data;
  data.class_names = synth_class_names();
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      Rng rng(derive_seed(seed, {c, i}));
      data.images.push_back(synth_image(c, image_size, rng));
      data.labels.push_back(c);
      char name[32];
      std::snprintf(name, sizeof(name), "%05zu.pgm", i);
      data.paths.push_back(data.class_names[c] + "/" + name);
    }
  }
  return data;
}

/// Writes `<root>/<class>/<file>.pgm` for every item (paths must be set).
inline void write_corpus(const LabeledDataset& data, const std::filesystem::path& root) {
  for (const auto& name : data.class_names) std::filesystem::create_directories(root / name);
  for (std::size_t i = 0; i < data.size(); ++i) write_netpbm(quantize(data.images[i]), root / data.paths.at(i));
}

/// Loads `<root>/<class_name>/*.pgm|*.ppm`; classes are the subdirectories
/// in alphabetical order, files sorted by name. Each image goes through
/// preprocess() to (channels, height, width).
inline LabeledDataset load_corpus(const std::filesystem::path& root, std::size_t channels,
                                  std::size_t height, std::size_t width) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw Error(Errc::io_error, root.string() + " is not a directory");
  LabeledDataset data;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) data.class_names.push_back(entry.path().filename().string());
  std::sort(data.class_names.begin(), data.class_names.end());
  if (data.class_names.size() < 2) throw Error(Errc::invalid_argument, "need at least two class directories");
  for (std::size_t c = 0; c < data.class_names.size(); ++c) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(root / data.class_names[c])) {
      const auto ext = entry.path().extension().string();
      if (entry.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files.push_back(entry.path().filename().string());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const std::string rel = data.class_names[c] + "/" + f;
      data.images.push_back(preprocess(read_netpbm(root / rel), channels, height, width));
      data.labels.push_back(c);
      data.paths.push_back(rel);
    }
  }
  return data;
}

}  // namespace camkit
