// camkit command-line tool.
//
// Exit codes: 0 success, 1 usage error, 2 data or format error, 3 gradcheck failure.

#include <malloc.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "camkit/camkit.hpp"

namespace fs = std::filesystem;
using namespace camkit;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config_file;
  std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, CommonOptions& common) {
  cmd->add_option("--config", common.config_file, "key=value config file");
  cmd->add_option("--set", common.overrides, "override one key, e.g. train.epochs=10")->allow_extra_args(false);
}

/// Defaults, then the config file, then --set overrides, then the given flag values.
RunConfig resolve_config(const CommonOptions& common, const std::vector<std::pair<std::string, std::string>>& flags) {
  RunConfig cfg;
  try {
    if (!common.config_file.empty()) cfg.apply_file(common.config_file);
    for (const auto& kv : common.overrides) cfg.apply_text(kv, "--set");
    for (const auto& [k, v] : flags) cfg.set(k, v);
  } catch (const camkit::Error& e) {
    if (e.code() == Errc::io_error) throw;
    throw UsageError(e.what());
  }
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw camkit::Error(Errc::io_error, "cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw camkit::Error(Errc::io_error, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_run_manifest(const fs::path& path, const std::string& command,
                        const std::vector<std::pair<std::string, std::string>>& entries, const RunConfig* cfg) {
  std::string text = "command=" + command + "\n";
  for (const auto& [k, v] : entries) text += k + "=" + v + "\n";
  text += "threads=" + std::to_string(thread_count()) + "\n";
  if (cfg) text += cfg->to_text();
  write_text(path, text);
}

fs::path default_manifest(const std::string& data, const std::string& manifest) {
  return manifest.empty() ? fs::path(data) / "split.csv" : fs::path(manifest);
}

LabeledDataset load_for_model(const std::string& data, const ModelSpec& spec) {
  const Shape& in = spec.input_shape;
  return load_corpus(data, in[0], in[1], in[2]);
}

// ---------------------------------------------------------------------------

int cmd_synth(const std::string& out, std::size_t n, std::size_t size, std::uint64_t seed) {
  const LabeledDataset data = synth_dataset(n, size, seed);
  fs::create_directories(out);
  write_corpus(data, out);
  write_run_manifest(fs::path(out) / "run.txt", "synth",
                     {{"out", out}, {"n_per_class", std::to_string(n)}, {"image_size", std::to_string(size)},
                      {"seed", std::to_string(seed)}},
                     nullptr);
  std::cout << "wrote " << data.size() << " images to " << out << "\n";
  return 0;
}

int cmd_split(const std::string& data_dir, std::uint64_t seed, const std::string& out_opt, const CommonOptions& common) {
  const RunConfig cfg = resolve_config(common, {});
  // Only labels and paths matter here; images are decoded at their stored size.
  LabeledDataset data = load_corpus(data_dir, 1, 8, 8);
  const SplitManifest m = stratified_split(data, seed, cfg.split_ratios);
  const fs::path out = default_manifest(data_dir, out_opt);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_text(out, manifest_csv(m, data));
  fs::path run = out;
  run.replace_extension(".run.txt");
  write_run_manifest(run, "split", {{"data", data_dir}, {"seed", std::to_string(seed)}, {"manifest", out.string()}},
                     &cfg);
  std::cout << "train " << m.train.size() << " val " << m.val.size() << " test " << m.test.size() << " -> "
            << out.string() << "\n";
  return 0;
}

int cmd_augment(const std::string& data_dir, const std::string& out, std::uint64_t seed, std::size_t epoch,
                const CommonOptions& common) {
  RunConfig cfg = resolve_config(common, {{"augment.seed", std::to_string(seed)}});
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(data_dir)) {
    const auto ext = entry.path().extension().string();
    if (entry.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files.push_back(fs::relative(entry.path(), data_dir));
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw camkit::Error(Errc::invalid_argument, "no .pgm/.ppm files under " + data_dir);
  const AugmentConfig& aug = cfg.train.augmentation;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const ImageF img = to_float(read_netpbm(fs::path(data_dir) / files[i]));
    Rng rng = augment_rng(aug, epoch, i);
    const fs::path dst = fs::path(out) / files[i];
    fs::create_directories(dst.parent_path());
    write_netpbm(quantize(augment_chain(img, aug, rng)), dst);
  }
  write_run_manifest(fs::path(out) / "run.txt", "augment",
                     {{"data", data_dir}, {"out", out}, {"epoch", std::to_string(epoch)}}, &cfg);
  std::cout << "augmented " << files.size() << " images into " << out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data, preset, spec_file, manifest, out = "train-run";
  std::uint64_t seed = 0;
  std::optional<std::size_t> epochs, batch_size;
  std::optional<double> lr;
  std::string optimizer;
  bool augment = false;
};

int cmd_train(const TrainArgs& a, const CommonOptions& common) {
  std::vector<std::pair<std::string, std::string>> flags{{"train.seed", std::to_string(a.seed)}};
  if (a.epochs) flags.emplace_back("train.epochs", std::to_string(*a.epochs));
  if (a.batch_size) flags.emplace_back("train.batch_size", std::to_string(*a.batch_size));
  if (a.lr) flags.emplace_back("train.learning_rate", detail::fmt_double(*a.lr));
  if (!a.optimizer.empty()) flags.emplace_back("train.optimizer", a.optimizer);
  if (a.augment) flags.emplace_back("train.augment", "true");
  if (!a.preset.empty()) flags.emplace_back("model.preset", a.preset);
  RunConfig cfg = resolve_config(common, flags);
  if (!cfg.explicit_keys.count("augment.seed")) cfg.train.augmentation.seed = cfg.train.seed;
  try {
    cfg.train.validate();
  } catch (const camkit::Error& e) {
    throw UsageError(e.what());
  }

  ModelSpec spec;
  if (!a.spec_file.empty()) {
    std::string text = read_text(a.spec_file);
    while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
    spec = parse_model_spec(text);
  }
  LabeledDataset data = load_corpus(a.data, a.spec_file.empty() ? cfg.data_channels : spec.input_shape[0],
                                    a.spec_file.empty() ? cfg.data_height : spec.input_shape[1],
                                    a.spec_file.empty() ? cfg.data_width : spec.input_shape[2]);
  if (a.spec_file.empty()) {
    spec = preset(cfg.model_preset, data.class_names, {cfg.data_channels, cfg.data_height, cfg.data_width},
                  cfg.model_dropout, cfg.model_head_units);
  } else if (spec.class_names != data.class_names) {
    throw camkit::Error(Errc::spec_mismatch, "spec class names do not match the dataset's class directories");
  }
  const fs::path manifest = default_manifest(a.data, a.manifest);
  if (!fs::exists(manifest)) {
    throw camkit::Error(Errc::io_error, "split manifest " + manifest.string() + " not found; run `camkit split` first");
  }
  const SplitManifest split = parse_manifest_csv(read_text(manifest), data);
  const LabeledDataset train_set = data.subset(split.train);
  const LabeledDataset val_set = data.subset(split.val);

  Model model = build_model(spec, cfg.train.seed);
  fs::create_directories(a.out);
  const fs::path weights = fs::path(a.out) / "weights.camf";
  const fs::path report_path = fs::path(a.out) / "train_report.csv";
  std::cout << "training " << to_text(spec) << " on " << train_set.size() << " images (" << val_set.size()
            << " val)\n";
  TrainReport report = train(model, train_set, val_set, cfg.train, [](const EpochRecord& e) {
    std::printf("epoch %zu  loss %.6f  acc %.4f  val_loss %.6f  val_acc %.4f  (%.1fs)\n", e.epoch, e.train_loss,
                e.train_acc, e.val_loss, e.val_acc, e.seconds);
    std::fflush(stdout);
  });
  save_weights(model, weights);
  report.weights_path = weights.string();
  write_text(report_path, report_csv(report));
  write_run_manifest(fs::path(a.out) / "run.txt", "train",
                     {{"data", a.data},
                      {"manifest", manifest.string()},
                      {"spec", to_text(spec)},
                      {"spec_file", a.spec_file},
                      {"weights", weights.string()},
                      {"report", report_path.string()}},
                     &cfg);
  std::cout << "weights -> " << weights.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& weights, const std::string& data_dir, const std::string& manifest_opt,
             const std::string& part, const std::string& out, std::size_t batch_size) {
  const ModelSpec spec = read_weights_spec(weights);
  const Model model = load_weights(spec, weights);
  const LabeledDataset data = load_for_model(data_dir, spec);
  if (data.class_names != spec.class_names) {
    throw camkit::Error(Errc::spec_mismatch, "dataset class directories do not match the model's classes");
  }
  const fs::path manifest = default_manifest(data_dir, manifest_opt);
  if (!fs::exists(manifest)) throw camkit::Error(Errc::io_error, "split manifest " + manifest.string() + " not found");
  const SplitManifest split = parse_manifest_csv(read_text(manifest), data);
  const SplitPart which = part == "train" ? SplitPart::train : part == "val" ? SplitPart::val : SplitPart::test;
  const LabeledDataset subset = data.subset(split.part(which));
  if (subset.size() == 0) throw camkit::Error(Errc::invalid_argument, "the " + part + " split is empty");
  const EvalResult r = evaluate(model, subset, batch_size);
  const ConfusionMatrix cm = confusion(r.predictions, subset.labels, spec.num_classes(), spec.class_names);
  const MetricsReport rep = report(cm);
  fs::create_directories(out);
  write_text(fs::path(out) / "confusion.csv", confusion_csv(cm));
  write_text(fs::path(out) / "metrics.csv", metrics_csv(cm, rep));
  const std::string table = metrics_table(fs::path(weights).stem().string(), cm, rep);
  write_text(fs::path(out) / "metrics.txt", table);
  write_run_manifest(fs::path(out) / "run.txt", "eval",
                     {{"weights", weights}, {"data", data_dir}, {"manifest", manifest.string()}, {"split", part},
                      {"batch_size", std::to_string(batch_size)}, {"out", out}},
                     nullptr);
  std::cout << table;
  return 0;
}

struct ExplainArgs {
  std::string weights, image, method, out = "explain-run", class_name, score, hessian;
  std::optional<std::size_t> target_layer;
};

int cmd_explain(const ExplainArgs& a, const CommonOptions& common) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (!a.method.empty()) flags.emplace_back("cam.method", a.method);
  if (!a.score.empty()) flags.emplace_back("cam.score_kind", a.score);
  if (!a.hessian.empty()) flags.emplace_back("cam.hessian", a.hessian);
  if (a.target_layer) flags.emplace_back("cam.target_layer", std::to_string(*a.target_layer));
  const RunConfig cfg = resolve_config(common, flags);

  const ModelSpec spec = read_weights_spec(a.weights);
  Model model = load_weights(spec, a.weights);
  const Shape& in = spec.input_shape;
  const ImageF img = preprocess(read_netpbm(a.image), in[0], in[1], in[2]);
  const Tensor batch = to_batch(img);
  const Tensor probs = model.infer(batch);
  const std::size_t predicted = argmax_row(probs, 0);
  std::size_t target_class = predicted;
  if (!a.class_name.empty()) {
    auto it = std::find(spec.class_names.begin(), spec.class_names.end(), a.class_name);
    if (it != spec.class_names.end()) {
      target_class = static_cast<std::size_t>(it - spec.class_names.begin());
    } else {
      try {
        target_class = std::stoul(a.class_name);
      } catch (const std::exception&) {
        throw UsageError("--class '" + a.class_name + "' is neither a class name nor an index");
      }
      if (target_class >= spec.num_classes()) throw UsageError("--class index out of range");
    }
  }
  fs::create_directories(a.out);
  const std::string stem = fs::path(a.image).stem().string();
  const std::string& cls = spec.class_names[target_class];
  std::vector<std::pair<std::string, std::string>> entries{
      {"weights", a.weights}, {"image", a.image}, {"class", cls}, {"out", a.out}};
  auto emit = [&](const CamResult& r) {
    const auto [pgm, ppm] = write_heatmap_files(r, img, a.out, stem, cls);
    const std::string key = cam_method_name(r.weights.method);
    entries.emplace_back(key + ".heatmap", pgm.string());
    entries.emplace_back(key + ".overlay", ppm.string());
  };
  if (cfg.cam_method == "gradcam" || cfg.cam_method == "both") emit(gradcam(model, batch, target_class, cfg.cam));
  if (cfg.cam_method == "gradcam_pp" || cfg.cam_method == "both") emit(gradcam_pp(model, batch, target_class, cfg.cam));
  write_run_manifest(fs::path(a.out) / "run.txt", "explain", entries, &cfg);
  std::printf("predicted %s probability %.6f\n", spec.class_names[predicted].c_str(), probs[predicted]);
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& out) {
  GradcheckOptions opt;
  opt.seed = seed;
  const auto results = run_gradcheck(opt);
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-4s %-34s max_rel_err %.3e  checked %zu  skipped %zu  %.2fs\n", r.passed ? "ok" : "FAIL",
                r.name.c_str(), r.max_rel_error, r.checked, r.skipped, r.seconds);
    ok = ok && r.passed;
  }
  if (!out.empty()) {
    fs::create_directories(out);
    write_run_manifest(fs::path(out) / "run.txt", "gradcheck",
                       {{"seed", std::to_string(seed)}, {"step", detail::fmt_double(opt.step)},
                        {"tolerance", detail::fmt_double(opt.tolerance)}, {"passed", ok ? "true" : "false"}},
                       nullptr);
  }
  return ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  // Layer outputs are large and short-lived; keep them on the heap instead of
  // paying an mmap/munmap and page faults per tensor.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"camkit: CNN training and Grad-CAM explanations"};
  app.require_subcommand(1);
  std::size_t threads = 0;
  app.add_option("--threads", threads, "worker threads (0 = hardware concurrency)");

  std::string s_out;
  std::size_t s_n = 200, s_size = 128;
  std::uint64_t s_seed = 0;
  auto* synth = app.add_subcommand("synth", "write a synthetic 3-class Netpbm corpus");
  synth->add_option("--out", s_out, "output directory")->required();
  synth->add_option("--n", s_n, "images per class");
  synth->add_option("--size", s_size, "image side length");
  synth->add_option("--seed", s_seed, "generator seed")->required();

  std::string sp_data, sp_out;
  std::uint64_t sp_seed = 0;
  CommonOptions sp_common;
  auto* split = app.add_subcommand("split", "write a stratified train/val/test manifest");
  split->add_option("--data", sp_data, "dataset root")->required();
  split->add_option("--seed", sp_seed, "split seed")->required();
  split->add_option("--out", sp_out, "manifest path (default <data>/split.csv)");
  add_config_options(split, sp_common);

  std::string au_data, au_out;
  std::uint64_t au_seed = 0;
  std::size_t au_epoch = 0;
  CommonOptions au_common;
  auto* augment = app.add_subcommand("augment", "write augmented copies of a directory of images");
  augment->add_option("--data", au_data, "input directory")->required();
  augment->add_option("--out", au_out, "output directory")->required();
  augment->add_option("--seed", au_seed, "augmentation seed")->required();
  augment->add_option("--epoch", au_epoch, "epoch index for the per-item streams");
  add_config_options(augment, au_common);

  TrainArgs tr;
  CommonOptions tr_common;
  std::size_t tr_epochs = 0, tr_batch = 0;
  double tr_lr = 0.0;
  auto* trainc = app.add_subcommand("train", "train a model and write weights plus a per-epoch report");
  trainc->add_option("--data", tr.data, "dataset root")->required();
  trainc->add_option("--seed", tr.seed, "initialization, shuffle and dropout seed")->required();
  auto* preset_opt = trainc->add_option("--preset", tr.preset, "vgg-nano or vgg-micro");
  trainc->add_option("--spec", tr.spec_file, "file holding a canonical model spec")->excludes(preset_opt);
  trainc->add_option("--manifest", tr.manifest, "split manifest (default <data>/split.csv)");
  trainc->add_option("--out", tr.out, "output directory");
  auto* ep = trainc->add_option("--epochs", tr_epochs, "epochs");
  auto* bs = trainc->add_option("--batch-size", tr_batch, "batch size");
  auto* lr = trainc->add_option("--lr", tr_lr, "learning rate");
  trainc->add_option("--optimizer", tr.optimizer, "adam, adagrad or sgd");
  trainc->add_flag("--augment", tr.augment, "online augmentation of training images");
  add_config_options(trainc, tr_common);

  std::string ev_weights, ev_data, ev_manifest, ev_split = "test", ev_out = "eval-run";
  std::size_t ev_batch = 32;
  auto* evalc = app.add_subcommand("eval", "confusion matrix and metrics on one split");
  evalc->add_option("--weights", ev_weights, "weight file")->required();
  evalc->add_option("--data", ev_data, "dataset root")->required();
  evalc->add_option("--manifest", ev_manifest, "split manifest (default <data>/split.csv)");
  evalc->add_option("--split", ev_split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  evalc->add_option("--out", ev_out, "output directory");
  evalc->add_option("--batch-size", ev_batch, "inference batch size");

  ExplainArgs ex;
  CommonOptions ex_common;
  std::size_t ex_target = 0;
  auto* explain = app.add_subcommand("explain", "Grad-CAM / Grad-CAM++ heatmaps for one image");
  explain->add_option("--weights", ex.weights, "weight file")->required();
  explain->add_option("--image", ex.image, "P5/P6 image")->required();
  explain->add_option("--method", ex.method, "gradcam, gradcam_pp or both (default both)")
      ->check(CLI::IsMember({"gradcam", "gradcam_pp", "both"}));
  explain->add_option("--class", ex.class_name, "class name or index (default: predicted)");
  explain->add_option("--out", ex.out, "output directory");
  explain->add_option("--score", ex.score, "logit, probability or exp_logit");
  explain->add_option("--hessian", ex.hessian, "fd or fast");
  auto* tl = explain->add_option("--target-layer", ex_target, "conv layer index (default: deepest conv)");
  add_config_options(explain, ex_common);

  std::uint64_t gc_seed = 1;
  std::string gc_out;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference verification of all backward rules");
  gradcheck->add_option("--seed", gc_seed, "seed for the random test tensors");
  gradcheck->add_option("--out", gc_out, "directory for run.txt (optional)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  set_thread_count(threads);

  try {
    if (*synth) return cmd_synth(s_out, s_n, s_size, s_seed);
    if (*split) return cmd_split(sp_data, sp_seed, sp_out, sp_common);
    if (*augment) return cmd_augment(au_data, au_out, au_seed, au_epoch, au_common);
    if (*trainc) {
      if (*ep) tr.epochs = tr_epochs;
      if (*bs) tr.batch_size = tr_batch;
      if (*lr) tr.lr = tr_lr;
      return cmd_train(tr, tr_common);
    }
    if (*evalc) return cmd_eval(ev_weights, ev_data, ev_manifest, ev_split, ev_out, ev_batch);
    if (*explain) {
      if (*tl) ex.target_layer = ex_target;
      return cmd_explain(ex, ex_common);
    }
    if (*gradcheck) return cmd_gradcheck(gc_seed, gc_out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
