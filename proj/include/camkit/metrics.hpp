#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "camkit/error.hpp"

namespace camkit {

/// counts[t][p]: items of true class t predicted as p.
struct ConfusionMatrix {
  std::vector<std::vector<std::uint64_t>> counts;
  std::vector<std::string> class_names;

  std::size_t classes() const { return counts.size(); }
  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (const auto& row : counts)
      for (auto v : row) n += v;
    return n;
  }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  friend bool operator==(const ClassMetrics&, const ClassMetrics&) = default;
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline ConfusionMatrix confusion(const std::vector<std::size_t>& predictions,
                                 const std::vector<std::size_t>& labels, std::size_t num_classes,
                                 std::vector<std::string> class_names = {}) {
  if (predictions.size() != labels.size()) {
    throw Error(Errc::shape_mismatch, std::to_string(predictions.size()) + " predictions for " +
                                          std::to_string(labels.size()) + " labels");
  }
  if (!class_names.empty() && class_names.size() != num_classes) {
    throw Error(Errc::invalid_argument, "class_names must have one entry per class");
  }
  ConfusionMatrix cm;
  cm.counts.assign(num_classes, std::vector<std::uint64_t>(num_classes, 0));
  cm.class_names = std::move(class_names);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes || predictions[i] >= num_classes) {
      throw Error(Errc::label_out_of_range, "pair " + std::to_string(i) + " (" +
                                                std::to_string(predictions[i]) + ", " +
                                                std::to_string(labels[i]) + ") outside [0," +
                                                std::to_string(num_classes) + ")");
    }
    ++cm.counts[labels[i]][predictions[i]];
  }
  return cm;
}

/// Per-class precision/recall/F1, accuracy and unweighted macro means. 0/0 is 0.
inline MetricsReport report(const ConfusionMatrix& cm) {
  auto ratio = [](double a, double b) { return b == 0.0 ? 0.0 : a / b; };
  const std::size_t k = cm.classes();
  MetricsReport r;
  double trace = 0.0, total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    double row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      row += static_cast<double>(cm.counts[c][j]);
      col += static_cast<double>(cm.counts[j][c]);
    }
    const double tp = static_cast<double>(cm.counts[c][c]);
    ClassMetrics m;
    m.precision = ratio(tp, col);
    m.recall = ratio(tp, row);
    m.f1 = ratio(2.0 * m.precision * m.recall, m.precision + m.recall);
    r.per_class.push_back(m);
    trace += tp;
    total += row;
  }
  r.accuracy = ratio(trace, total);
  for (const auto& m : r.per_class) {
    r.macro_precision += m.precision;
    r.macro_recall += m.recall;
    r.macro_f1 += m.f1;
  }
  if (k > 0) {
    r.macro_precision /= static_cast<double>(k);
    r.macro_recall /= static_cast<double>(k);
    r.macro_f1 /= static_cast<double>(k);
  }
  return r;
}

namespace detail {
inline std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

inline std::string class_label(const ConfusionMatrix& cm, std::size_t c) {
  return c < cm.class_names.size() ? cm.class_names[c] : std::to_string(c);
}
}  // namespace detail

/// `class,precision,recall,f1` rows, then `accuracy,<v>` and `macro_f1,<v>`; 4 decimals.
inline std::string metrics_csv(const ConfusionMatrix& cm, const MetricsReport& r) {
  std::ostringstream out;
  out << "class,precision,recall,f1\n";
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    out << detail::class_label(cm, c) << ',' << detail::fixed4(r.per_class[c].precision) << ','
        << detail::fixed4(r.per_class[c].recall) << ',' << detail::fixed4(r.per_class[c].f1) << '\n';
  }
  out << "accuracy," << detail::fixed4(r.accuracy) << '\n';
  out << "macro_f1," << detail::fixed4(r.macro_f1) << '\n';
  return out.str();
}

/// Rows are true classes, columns predictions, with a header row of class names.
inline std::string confusion_csv(const ConfusionMatrix& cm) {
  std::ostringstream out;
  out << "true\\pred";
  for (std::size_t c = 0; c < cm.classes(); ++c) out << ',' << detail::class_label(cm, c);
  out << '\n';
  for (std::size_t t = 0; t < cm.classes(); ++t) {
    out << detail::class_label(cm, t);
    for (auto v : cm.counts[t]) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

/// Aligned text table: model, class, accuracy, precision, recall, F1.
inline std::string metrics_table(const std::string& model_name, const ConfusionMatrix& cm,
                                 const MetricsReport& r) {
  std::size_t model_w = std::max<std::size_t>(5, model_name.size());
  std::size_t class_w = 5;
  for (std::size_t c = 0; c < cm.classes(); ++c) class_w = std::max(class_w, detail::class_label(cm, c).size());
  auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w - s.size(), ' '); };
  std::ostringstream out;
  out << pad("model", model_w) << "  " << pad("class", class_w)
      << "  accuracy  precision  recall  f1\n";
  auto line = [&](const std::string& cls, double p, double rc, double f) {
    out << pad(model_name, model_w) << "  " << pad(cls, class_w) << "  " << pad(detail::fixed4(r.accuracy), 8)
        << "  " << pad(detail::fixed4(p), 9) << "  " << pad(detail::fixed4(rc), 6) << "  " << detail::fixed4(f)
        << '\n';
  };
  for (std::size_t c = 0; c < r.per_class.size(); ++c)
    line(detail::class_label(cm, c), r.per_class[c].precision, r.per_class[c].recall, r.per_class[c].f1);
  line("macro", r.macro_precision, r.macro_recall, r.macro_f1);
  return out.str();
}

}  // namespace camkit
