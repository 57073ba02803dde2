#pragma once

#include <chrono>
#include <functional>
#include <span>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "camkit/augment.hpp"
#include "camkit/dataset.hpp"
#include "camkit/error.hpp"
#include "camkit/model.hpp"
#include "camkit/ops.hpp"
#include "camkit/parallel.hpp"
#include "camkit/rng.hpp"

namespace camkit {

// ---------------------------------------------------------------------------
// Loss

struct LossResult {
  double loss = 0.0;
  Tensor grad_logits;  // (N,K)
};

/// Sparse categorical cross-entropy on softmax outputs. The loss is
/// -(1/N) sum log(max(p[i, y_i], 1e-12)); the gradient is taken with respect
/// to the pre-softmax logits, (p - onehot) / N.
inline LossResult sparse_ce(const Tensor& probs, const std::vector<std::size_t>& labels) {
  if (probs.rank() != 2) throw Error(Errc::shape_mismatch, "sparse_ce expects (N,K) probabilities");
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  if (labels.size() != n) {
    throw Error(Errc::shape_mismatch, "sparse_ce: " + std::to_string(labels.size()) +
                                          " labels for " + std::to_string(n) + " rows");
  }
  LossResult r{0.0, probs};
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) {
      throw Error(Errc::label_out_of_range, "label at index " + std::to_string(i) + " is " +
                                                std::to_string(labels[i]) + ", classes " +
                                                std::to_string(k));
    }
    r.loss -= std::log(std::max(probs[i * k + labels[i]], 1e-12));
    r.grad_logits[i * k + labels[i]] -= 1.0;
  }
  const double inv = 1.0 / static_cast<double>(n);
  r.loss *= inv;
  for (double& g : r.grad_logits.values()) g *= inv;
  return r;
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { adam, adagrad, sgd };

inline const char* optimizer_name(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::adagrad: return "adagrad";
    case OptimizerKind::sgd: return "sgd";
  }
  return "?";
}

inline OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "adagrad") return OptimizerKind::adagrad;
  if (name == "sgd") return OptimizerKind::sgd;
  throw Error(Errc::invalid_argument, "unknown optimizer '" + std::string(name) + "' (adam, adagrad, sgd)");
}

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double adagrad_epsilon = 1e-8;
};

/// Accumulators mirroring the parameter tensors: adam (m, v, step), adagrad (sum g^2).
struct OptState {
  std::vector<Tensor> first;   // adam m / adagrad accumulator
  std::vector<Tensor> second;  // adam v
  std::uint64_t step = 0;
};

/// Applies one update to every tensor in `params` given matching `grads`.
inline void optimizer_step(const OptimizerSettings& opt, std::vector<Tensor*> params,
                           const std::vector<const Tensor*>& grads, OptState& state, double lr) {
  if (params.size() != grads.size()) throw Error(Errc::shape_mismatch, "params/grads count mismatch");
  if (state.first.empty() && opt.kind != OptimizerKind::sgd) {
    for (const Tensor* p : params) state.first.emplace_back(p->shape());
    if (opt.kind == OptimizerKind::adam)
      for (const Tensor* p : params) state.second.emplace_back(p->shape());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i]->shape() ||
        (opt.kind != OptimizerKind::sgd && state.first.at(i).shape() != params[i]->shape())) {
      throw Error(Errc::shape_mismatch, "optimizer tensor " + std::to_string(i) + " shape mismatch");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* p = params[i]->data();
    const double* g = grads[i]->data();
    const std::size_t n = params[i]->size();
    switch (opt.kind) {
      case OptimizerKind::sgd:
        for (std::size_t j = 0; j < n; ++j) p[j] -= lr * g[j];
        break;
      case OptimizerKind::adagrad: {
        double* acc = state.first[i].data();
        for (std::size_t j = 0; j < n; ++j) {
          acc[j] += g[j] * g[j];
          p[j] -= lr * g[j] / (std::sqrt(acc[j]) + opt.adagrad_epsilon);
        }
        break;
      }
      case OptimizerKind::adam: {
        double* m = state.first[i].data();
        double* v = state.second[i].data();
        for (std::size_t j = 0; j < n; ++j) {
          m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
          v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
          const double mhat = m[j] / c1;
          const double vhat = v[j] / c2;
          p[j] -= lr * mhat / (std::sqrt(vhat) + opt.adam_epsilon);
        }
        break;
      }
    }
  }
}

/// Parameter tensors of a model in file order (layer order, weights then bias).
inline std::vector<Tensor*> parameter_tensors(std::vector<LayerParams>& params) {
  std::vector<Tensor*> out;
  for (auto& p : params) {
    if (p.empty()) continue;
    out.push_back(&p.weights);
    out.push_back(&p.bias);
  }
  return out;
}

inline std::vector<const Tensor*> parameter_tensors(const std::vector<LayerParams>& params) {
  std::vector<const Tensor*> out;
  for (const auto& p : params) {
    if (p.empty()) continue;
    out.push_back(&p.weights);
    out.push_back(&p.bias);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  std::size_t epochs = 30;
  double learning_rate = 1e-4;
  std::size_t batch_size = 32;
  OptimizerSettings optimizer;
  std::uint64_t seed = 0;
  bool shuffle = true;
  bool augment = false;
  AugmentConfig augmentation;

  void validate() const {
    if (epochs < 1) throw Error(Errc::invalid_argument, "epochs must be >= 1");
    if (batch_size < 1) throw Error(Errc::invalid_argument, "batch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw Error(Errc::invalid_argument, "learning_rate must be finite and >= 0");
    }
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::string weights_path;
};

/// Header `epoch,train_loss,train_acc,val_loss,val_acc,seconds`; values with 17 significant digits.
inline std::string report_csv(const TrainReport& report, bool include_seconds = true) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,train_loss,train_acc,val_loss,val_acc,seconds\n";
  for (const auto& e : report.epochs) {
    out << e.epoch << ',' << e.train_loss << ',' << e.train_acc << ',' << e.val_loss << ','
        << e.val_acc << ',';
    if (include_seconds) {
      std::ostringstream sec;
      sec.precision(3);
      sec << std::fixed << e.seconds;
      out << sec.str();
    } else {
      out << 0;
    }
    out << '\n';
  }
  return out.str();
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<std::size_t> predictions;
};

inline std::size_t argmax_row(const Tensor& probs, std::size_t row) {
  const std::size_t k = probs.dim(1);
  const double* p = probs.data() + row * k;
  return static_cast<std::size_t>(std::max_element(p, p + k) - p);
}

/// Eval-mode loss, accuracy and argmax predictions in dataset order.
inline EvalResult evaluate(const Model& model, const LabeledDataset& data, std::size_t batch_size = 32) {
  EvalResult r;
  if (data.size() == 0) return r;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<const ImageF*> imgs;
    std::vector<std::size_t> labels;
    for (std::size_t i = start; i < end; ++i) {
      imgs.push_back(&data.images[i]);
      labels.push_back(data.labels[i]);
    }
    const Tensor probs = model.infer(to_batch(imgs));
    loss_sum += sparse_ce(probs, labels).loss * static_cast<double>(end - start);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const std::size_t pred = argmax_row(probs, i);
      r.predictions.push_back(pred);
      correct += pred == labels[i];
    }
  }
  r.loss = loss_sum / static_cast<double>(data.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return r;
}

/// Deterministic mini-batch training. Epoch e (0-based) visits items in the
/// order given by Rng(seed ^ e).shuffle of 0..N-1 (identity when shuffle is
/// off); batch b uses dropout seed derive_seed(seed, {e, b}); augmentation,
/// when enabled, draws item i's stream from augment_rng(cfg, e, i).
inline TrainReport train(Model& model, const LabeledDataset& train_set, const LabeledDataset& val_set,
                         const TrainConfig& config,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  config.validate();
  if (train_set.size() == 0) throw Error(Errc::invalid_argument, "training set is empty");
  train_set.validate();
  val_set.validate();
  if (train_set.class_names.size() != model.spec().num_classes()) {
    throw Error(Errc::label_out_of_range, "dataset has " + std::to_string(train_set.class_names.size()) +
                                              " classes, model has " +
                                              std::to_string(model.spec().num_classes()));
  }
  TrainReport report;
  OptState state;
  const std::size_t n = train_set.size();
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (config.shuffle) {
      Rng rng(config.seed ^ static_cast<std::uint64_t>(epoch));
      rng.shuffle(std::span<std::size_t>(order));
    }
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(n, start + config.batch_size);
      std::vector<ImageF> augmented;
      std::vector<const ImageF*> imgs(end - start);
      std::vector<std::size_t> labels(end - start);
      if (config.augment) {
        augmented.resize(end - start);
        parallel_for(end - start, [&](std::size_t j) {
          const std::size_t item = order[start + j];
          Rng rng = augment_rng(config.augmentation, epoch, item);
          augmented[j] = augment_chain(train_set.images[item], config.augmentation, rng);
        });
      }
      for (std::size_t j = 0; j < end - start; ++j) {
        const std::size_t item = order[start + j];
        imgs[j] = config.augment ? &augmented[j] : &train_set.images[item];
        labels[j] = train_set.labels[item];
      }
      ForwardOptions fo;
      fo.train = true;
      fo.capture = true;
      fo.dropout_seed = derive_seed(config.seed, {epoch, batch_index});
      const std::string where = "epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(batch_index);
      Tensor probs;
      try {
        probs = model.forward(to_batch(imgs), fo);
      } catch (const Error& e) {
        // softmax rejects non-finite logits with invalid_argument
        if (e.code() != Errc::invalid_argument) throw;
        throw Error(Errc::divergence, "logits are not finite at " + where);
      }
      LossResult lr = sparse_ce(probs, labels);
      if (!std::isfinite(lr.loss)) throw Error(Errc::divergence, "loss is not finite at " + where);
      loss_sum += lr.loss * static_cast<double>(end - start);
      for (std::size_t j = 0; j < labels.size(); ++j) correct += argmax_row(probs, j) == labels[j];
      const Gradients grads = model.backward(lr.grad_logits);
      optimizer_step(config.optimizer, parameter_tensors(model.params()),
                     parameter_tensors(grads.params), state, config.learning_rate);
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    if (val_set.size() > 0) {
      const EvalResult ev = evaluate(model, val_set, config.batch_size);
      rec.val_loss = ev.loss;
      rec.val_acc = ev.accuracy;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return report;
}

}  // namespace camkit
