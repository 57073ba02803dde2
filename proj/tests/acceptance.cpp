// End-to-end acceptance checks. Prints one [PASS]/[FAIL] line per criterion
// and exits nonzero if any fails. Needs CAMKIT_README and CAMKIT_CLI.

#include <malloc.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "camkit/camkit.hpp"
#include "support/cam_fixtures.hpp"

using namespace camkit;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double d = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) d = std::max(d, std::abs(a[j] - b[j]));
  return d;
}

Tensor synth_input(std::size_t label, std::uint64_t seed) {
  Rng rng(seed);
  return to_batch(synth_image(label, 128, rng));
}

// ---------------------------------------------------------------------------

Outcome readme_statement() {
  const std::string text = slurp(CAMKIT_README);
  std::string flat;
  for (char ch : text) flat += ch == '\n' ? ' ' : ch;
  const std::vector<std::string> needles{"99.17%", "not reproducible", "ImageNet-pretrained", "6,056"};
  for (const auto& n : needles)
    if (flat.find(n) == std::string::npos) return {false, "README lacks \"" + n + "\""};
  return {true, "VGG16 99.17% stated as not reproducible (pretrained backbones, 6,056 images)"};
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto results = run_gradcheck();
  const double secs = seconds_since(t0);
  double worst = 0.0;
  bool ok = secs < 60.0;
  std::string failed;
  for (const auto& r : results) {
    worst = std::max(worst, r.max_rel_error);
    if (!r.passed || r.max_rel_error > 1e-6 || r.checked == 0) ok = false, failed += " " + r.name;
  }
  return {ok, "max_rel_err " + fmt("%.3e", worst) + " over " + std::to_string(results.size()) + " checks in " +
                  fmt("%.1f", secs) + "s" + (failed.empty() ? "" : ", failed:" + failed)};
}

Outcome gradcam_brute_force() {
  auto net = camkit::testing::two_map_net();
  double worst = 0.0;
  for (std::size_t c = 0; c < 2; ++c) {
    const auto want = camkit::testing::brute_cam(net, c, false, false);
    const CamResult got = gradcam(net.model, net.input, c);
    for (std::size_t m = 0; m < 2; ++m) worst = std::max(worst, std::abs(got.weights.alpha[m] - want.alpha[m]));
    worst = std::max(worst, max_abs_diff(got.heatmap.raw, want.raw));
    worst = std::max(worst, max_abs_diff(got.heatmap.normalized, want.normalized));
  }
  return {worst <= 1e-12, "max abs diff " + fmt("%.3e", worst)};
}

Outcome gradcampp_checks() {
  std::string detail;
  bool ok = true;

  // (a) linear-logit head: the second derivative vanishes, alpha doubles.
  auto net = camkit::testing::two_map_net();
  double linear = 0.0;
  for (std::size_t c = 0; c < 2; ++c) {
    const CamResult gc = gradcam(net.model, net.input, c);
    const CamResult pp = gradcam_pp(net.model, net.input, c);
    linear = std::max(linear, max_abs_diff(gc.heatmap.normalized, pp.heatmap.normalized));
  }
  ok &= linear <= 1e-12;
  detail += "(a) " + fmt("%.2e", linear);

  // (b) Y = exp(2a): d2Y/da2 = 4 exp(2a).
  Model toy = camkit::testing::scalar_exp_toy();
  CamConfig exp_cfg;
  exp_cfg.score_kind = ScoreKind::exp_logit;
  double toy_err = 0.0;
  for (double a : {-0.7, 0.0, 0.3, 1.2}) {
    const Tensor h = hessian_diag(toy, Tensor({1, 1, 1}, a), 0, exp_cfg);
    const double want = 4.0 * std::exp(2.0 * a);
    toy_err = std::max(toy_err, std::abs(h[0] - want) / want);
  }
  ok &= toy_err <= 1e-4;
  detail += "  (b) " + fmt("%.2e", toy_err);

  // (c) closed form vs finite differences on vgg-nano, off activation-pattern boundaries.
  double worst = 0.0;
  std::size_t compared = 0, skipped = 0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    Model m = build_model(preset("vgg-nano", synth_class_names()), 100 + s);
    const Tensor x = synth_input(s, 200 + s);
    CamConfig cfg = exp_cfg;
    const Tensor fd = hessian_diag(m, x, s, cfg);
    const auto kinks = camkit::testing::vgg_head_kinks(m, m.last_conv_layer(), cfg.fd_step);
    cfg.hessian = HessianEstimator::exp_fast_path;
    const Tensor fast = hessian_diag(m, x, s, cfg);
    for (std::size_t j = 0; j < fd.size(); ++j) {
      if (kinks[j]) {
        ++skipped;
        continue;
      }
      ++compared;
      if (fd[j] != fast[j]) {
        worst = std::max(worst, std::abs(fd[j] - fast[j]) / std::max(std::abs(fd[j]), std::abs(fast[j])));
      }
    }
  }
  ok &= worst <= 1e-3 && compared > 0;
  detail += "  (c) " + fmt("%.2e", worst) + " on " + std::to_string(compared) + " activations (" +
            std::to_string(skipped) + " near kinks skipped)";
  return {ok, detail};
}

Outcome heatmap_invariants() {
  Model m = build_model(preset("vgg-nano", synth_class_names()), 5);
  Rng rng(77);
  std::size_t zero_maps = 0, violations = 0;
  for (int i = 0; i < 100; ++i) {
    Tensor x({1, 1, 128, 128});
    for (double& v : x.values()) v = rng.uniform();
    const auto c = static_cast<std::size_t>(rng.below(3));
    for (const CamResult& r : {gradcam(m, x, c), gradcam_pp(m, x, c)}) {
      double raw_max = 0.0, norm_max = 0.0;
      for (double v : r.heatmap.raw.values()) {
        violations += !(v >= 0.0);
        raw_max = std::max(raw_max, v);
      }
      for (double v : r.heatmap.normalized.values()) {
        violations += !(v >= 0.0 && v <= 1.0);
        norm_max = std::max(norm_max, v);
      }
      if (raw_max > 0.0) {
        violations += norm_max != 1.0;
      } else {
        ++zero_maps;
        violations += norm_max != 0.0;
      }
    }
  }
  return {violations == 0, std::to_string(violations) + " violations over 200 maps (" +
                               std::to_string(zero_maps) + " all-zero)"};
}

Outcome augmentation() {
  AugmentConfig cfg;
  cfg.flip_probability = 0.0;
  cfg.noise_std = 0.0;
  cfg.rotation_set = {0.0};
  Rng rng(1);
  const ImageF half = augment_chain(ImageF(4, 4, 1, 0.5), cfg, rng);
  const ImageF one = augment_chain(ImageF(4, 4, 1, 1.0), cfg, rng);
  double err = 0.0;
  for (double v : half.values) err = std::max(err, std::abs(v - 0.635));
  for (double v : one.values) err = std::max(err, std::abs(v - 1.0));

  Rng noise_rng(2);
  bool in_range = true;
  for (int i = 0; i < 200; ++i) {
    ImageF img(16, 16, i % 2 ? 3 : 1);
    for (double& v : img.values) v = noise_rng.bernoulli(0.5) ? noise_rng.uniform() : static_cast<double>(noise_rng.below(2));
    const double std_dev = i < 100 ? 0.0023 : 0.5;
    in_range &= in_unit_range(add_gaussian_noise(img, std_dev, noise_rng));
  }

  bool involution = true;
  for (int i = 0; i < 50; ++i) {
    ImageF img(1 + noise_rng.below(9), 1 + noise_rng.below(9), i % 2 ? 3 : 1);
    for (double& v : img.values) v = noise_rng.uniform();
    const ImageF once = hflip(img);
    involution &= hflip(once) == img && (img.width < 2 || once.at(0, 0) == img.at(0, img.width - 1));
  }
  return {err <= 1e-12 && in_range && involution,
          "contrast/brightness err " + fmt("%.1e", err) + ", noise in [0,1] " + (in_range ? "yes" : "no") +
              ", hflip involution " + (involution ? "yes" : "no")};
}

Outcome split_sizes() {
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < 3; ++c) labels.insert(labels.end(), c == 2 ? 2048 : 2004, c);
  bool ok = true;
  std::string first;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const SplitManifest m = stratified_split(labels, 3, {0.8, 0.1, 0.1}, seed);
    ok &= m.test.size() == 604 && m.val.size() == 604 && m.train.size() == 4848;
    std::vector<int> seen(labels.size(), 0);
    for (auto* part : {&m.train, &m.val, &m.test})
      for (std::size_t i : *part) ++seen[i];
    ok &= std::all_of(seen.begin(), seen.end(), [](int n) { return n == 1; });
    if (seed == 0) {
      first = "train " + std::to_string(m.train.size()) + " val " + std::to_string(m.val.size()) + " test " +
              std::to_string(m.test.size());
    }
  }
  return {ok, first + "; disjoint and covering for 50 seeds: " + (ok ? "yes" : "no")};
}

Outcome synthetic_training() {
  const auto t0 = Clock::now();
  const LabeledDataset data = synth_dataset(200, 128, 7);
  const SplitManifest split = stratified_split(data, 7);
  const LabeledDataset tr = data.subset(split.train), va = data.subset(split.val), te = data.subset(split.test);
  Model m = build_model(preset("vgg-nano", data.class_names), 42);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.seed = 42;
  cfg.learning_rate = 1e-4;
  cfg.optimizer.kind = OptimizerKind::adam;
  train(m, tr, va, cfg, [](const EpochRecord& e) {
    std::fprintf(stderr, "  epoch %zu  loss %.4f  acc %.4f  val_acc %.4f\n", e.epoch, e.train_loss, e.train_acc,
                 e.val_acc);
  });
  const double train_acc = evaluate(m, tr).accuracy, test_acc = evaluate(m, te).accuracy;
  const double secs = seconds_since(t0);
  return {train_acc >= 0.99 && test_acc >= 0.95 && secs <= 600.0,
          "train acc " + fmt("%.4f", train_acc) + ", test acc " + fmt("%.4f", test_acc) + ", " + fmt("%.0f", secs) +
              "s"};
}

int run(const std::string& cmd) { return std::system((cmd + " > /dev/null 2>&1").c_str()); }

std::string without_seconds(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

Outcome cli_determinism() {
  const fs::path dir = fs::temp_directory_path() / ("camkit_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cli = CAMKIT_CLI, d = (dir / "data").string();
  std::string why;
  if (run(cli + " synth --out " + d + " --n 12 --size 32 --seed 3") != 0) why = "synth failed";
  if (why.empty() && run(cli + " split --data " + d + " --seed 4") != 0) why = "split failed";
  for (const char* r : {"r1", "r2"}) {
    if (!why.empty()) break;
    const std::string cmd = cli + " train --data " + d + " --seed 9 --epochs 3 --batch-size 8 --augment --out " +
                            (dir / r).string() + " --set data.height=32 --set data.width=32";
    if (run(cmd) != 0) why = std::string("train ") + r + " failed";
  }
  if (!why.empty()) {
    fs::remove_all(dir);
    return {false, why};
  }
  const std::string w1 = slurp(dir / "r1" / "weights.camf"), w2 = slurp(dir / "r2" / "weights.camf");
  const std::string c1 = slurp(dir / "r1" / "train_report.csv"), c2 = slurp(dir / "r2" / "train_report.csv");
  const bool weights_same = !w1.empty() && w1 == w2;
  const bool csv_same = !c1.empty() && without_seconds(c1) == without_seconds(c2);

  const fs::path path = dir / "r1" / "weights.camf";
  const Model loaded = load_weights(read_weights_spec(path), path);
  const fs::path again = dir / "again.camf";
  save_weights(loaded, again);
  const std::vector<std::uint8_t> bytes = encode_weights(loaded);
  const bool round_trip = slurp(again) == w1 && std::string(bytes.begin(), bytes.end()) == w1;
  fs::remove_all(dir);
  return {weights_same && csv_same && round_trip, std::string("weights identical ") + (weights_same ? "yes" : "no") +
                                                      ", report identical " + (csv_same ? "yes" : "no") +
                                                      ", save/load round trip " + (round_trip ? "yes" : "no")};
}

/// Independent oracle: counts straight from the pairs, no matrix reuse.
MetricsReport naive_report(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& label, std::size_t k) {
  MetricsReport r;
  std::uint64_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == label[i];
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t tp = 0, predicted = 0, actual = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      tp += pred[i] == c && label[i] == c;
      predicted += pred[i] == c;
      actual += label[i] == c;
    }
    ClassMetrics m;
    if (predicted) m.precision = static_cast<double>(tp) / static_cast<double>(predicted);
    if (actual) m.recall = static_cast<double>(tp) / static_cast<double>(actual);
    if (m.precision + m.recall > 0.0) m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    r.per_class.push_back(m);
  }
  if (!pred.empty()) r.accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
  for (const auto& m : r.per_class) {
    r.macro_precision += m.precision;
    r.macro_recall += m.recall;
    r.macro_f1 += m.f1;
  }
  r.macro_precision /= static_cast<double>(k);
  r.macro_recall /= static_cast<double>(k);
  r.macro_f1 /= static_cast<double>(k);
  return r;
}

Outcome metrics_oracle() {
  Rng rng(2024);
  std::size_t mismatches = 0;
  const std::size_t ks[] = {2, 3, 5};
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = ks[trial % 3];
    const auto n = static_cast<std::size_t>(rng.below(60));
    std::vector<std::size_t> pred(n), label(n);
    for (std::size_t i = 0; i < n; ++i) {
      label[i] = static_cast<std::size_t>(rng.below(k));
      pred[i] = rng.bernoulli(0.6) ? label[i] : static_cast<std::size_t>(rng.below(k));
    }
    mismatches += !(report(confusion(pred, label, k)) == naive_report(pred, label, k));
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches in 1000 instances"};
}

}  // namespace

int main() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"README states the published accuracies are not reproducible", readme_statement},
      {"finite-difference gradient suite", gradient_suite},
      {"Grad-CAM equals brute force on a two-map net", gradcam_brute_force},
      {"Grad-CAM++ linear head, exp toy Hessian, fast path vs FD", gradcampp_checks},
      {"heatmap invariants on 100 random inputs", heatmap_invariants},
      {"augmentation arithmetic, noise range, hflip involution", augmentation},
      {"stratified split sizes, disjointness, coverage", split_sizes},
      {"vgg-nano learns the synthetic corpus", synthetic_training},
      {"CLI train determinism and weight round trip", cli_determinism},
      {"metrics report equals a naive oracle", metrics_oracle},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << i + 1 << ". " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  std::cout << (failures ? std::to_string(failures) + " criteria failed" : "all criteria passed") << std::endl;
  return failures ? 1 : 0;
}
