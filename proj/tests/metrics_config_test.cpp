#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "camkit/config.hpp"
#include "camkit/metrics.hpp"
#include "camkit/rng.hpp"

using namespace camkit;

namespace {

template <class F>
Error capture(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e;
  }
  ADD_FAILURE() << "no camkit::Error thrown";
  return Error(Errc::invalid_argument, "none");
}

}  // namespace

TEST(Confusion, WorkedExample) {
  const auto cm = confusion({0, 0, 1, 2, 2, 2}, {0, 1, 1, 2, 2, 0}, 3);
  const std::vector<std::vector<std::uint64_t>> expected{{1, 0, 1}, {1, 1, 0}, {0, 0, 2}};
  EXPECT_EQ(cm.counts, expected);
  EXPECT_EQ(cm.total(), 6u);

  const auto r = report(cm);
  EXPECT_DOUBLE_EQ(r.per_class[0].precision, 0.5);
  EXPECT_DOUBLE_EQ(r.per_class[0].recall, 0.5);
  EXPECT_DOUBLE_EQ(r.per_class[0].f1, 0.5);
  EXPECT_DOUBLE_EQ(r.per_class[1].precision, 1.0);
  EXPECT_DOUBLE_EQ(r.per_class[1].recall, 0.5);
  EXPECT_DOUBLE_EQ(r.per_class[1].f1, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.per_class[2].precision, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.per_class[2].recall, 1.0);
  EXPECT_DOUBLE_EQ(r.per_class[2].f1, 0.8);
  EXPECT_DOUBLE_EQ(r.accuracy, 4.0 / 6.0);
  EXPECT_NEAR(r.macro_f1, (0.5 + 2.0 / 3.0 + 0.8) / 3.0, 1e-15);
}

TEST(Confusion, EmptyClassGivesZeroNotNaN) {
  const auto r = report(confusion({0, 0}, {0, 0}, 3));
  EXPECT_EQ(r.per_class[1], ClassMetrics{});
  EXPECT_EQ(r.per_class[2], ClassMetrics{});
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
  EXPECT_DOUBLE_EQ(r.macro_recall, 1.0 / 3.0);
  EXPECT_EQ(report(confusion({}, {}, 2)).accuracy, 0.0);
}

TEST(Confusion, Errors) {
  EXPECT_EQ(capture([] { confusion({0}, {0, 1}, 2); }).code(), Errc::shape_mismatch);
  const Error e = capture([] { confusion({0, 3}, {0, 1}, 3); });
  EXPECT_EQ(e.code(), Errc::label_out_of_range);
  EXPECT_NE(e.detail().find("pair 1"), std::string::npos);
  EXPECT_EQ(capture([] { confusion({0}, {0}, 2, {"a"}); }).code(), Errc::invalid_argument);
}

TEST(Confusion, CountsSumToSampleCount) {
  Rng rng(11);
  std::vector<std::size_t> p(500), l(500);
  for (std::size_t i = 0; i < 500; ++i) p[i] = rng.below(4), l[i] = rng.below(4);
  const auto cm = confusion(p, l, 4);
  EXPECT_EQ(cm.total(), 500u);
  for (std::size_t t = 0; t < 4; ++t) {
    std::uint64_t row = 0;
    for (auto v : cm.counts[t]) row += v;
    EXPECT_EQ(row, static_cast<std::uint64_t>(std::count(l.begin(), l.end(), t)));
  }
}

TEST(MetricsCsv, Format) {
  const auto cm = confusion({0, 0, 1, 2, 2, 2}, {0, 1, 1, 2, 2, 0}, 3, {"a", "b", "c"});
  EXPECT_EQ(metrics_csv(cm, report(cm)),
            "class,precision,recall,f1\n"
            "a,0.5000,0.5000,0.5000\n"
            "b,1.0000,0.5000,0.6667\n"
            "c,0.6667,1.0000,0.8000\n"
            "accuracy,0.6667\n"
            "macro_f1,0.6556\n");
  EXPECT_EQ(confusion_csv(cm),
            "true\\pred,a,b,c\n"
            "a,1,0,1\n"
            "b,1,1,0\n"
            "c,0,0,2\n");
  const std::string table = metrics_table("vgg-nano", cm, report(cm));
  EXPECT_EQ(table.substr(0, table.find('\n')), "model     class  accuracy  precision  recall  f1");
  EXPECT_NE(table.find("vgg-nano  macro  0.6667    0.7222     0.6667  0.6556"), std::string::npos);
}

TEST(MetricsCsv, UnnamedClassesUseIndices) {
  const auto cm = confusion({1}, {1}, 2);
  EXPECT_EQ(confusion_csv(cm), "true\\pred,0,1\n0,0,0\n1,0,1\n");
}

TEST(RunConfig, DefaultsAndRoundTrip) {
  RunConfig c;
  EXPECT_EQ(c.get("train.epochs"), "30");
  EXPECT_EQ(c.get("train.optimizer"), "adam");
  EXPECT_EQ(c.get("cam.target_layer"), "auto");
  EXPECT_TRUE(c.explicit_keys.empty());

  c.set("train.learning_rate", "0.003");
  c.set("augment.rotation_set", "-5, 0,5");
  c.set("cam.target_layer", "7");
  RunConfig d;
  d.apply_text(c.to_text());
  EXPECT_EQ(d.to_text(), c.to_text());
  EXPECT_EQ(d.train.learning_rate, 0.003);
  EXPECT_EQ(d.train.augmentation.rotation_set, (std::vector<double>{-5, 0, 5}));
  EXPECT_EQ(d.cam.target_layer, std::optional<std::size_t>(7));
  EXPECT_EQ(d.explicit_keys.size(), RunConfig::keys().size());
}

TEST(RunConfig, LaterSourcesWin) {
  RunConfig c;
  c.apply_text("train.epochs=5\n# comment\n\n  train.batch_size = 8 \n");
  c.set("train.epochs", "7");
  EXPECT_EQ(c.train.epochs, 7u);
  EXPECT_EQ(c.train.batch_size, 8u);
  EXPECT_EQ(c.explicit_keys, (std::set<std::string>{"train.epochs", "train.batch_size"}));
}

TEST(RunConfig, ErrorsCarrySourceAndLine) {
  RunConfig c;
  Error e = capture([&] { c.apply_text("train.epochs=3\ntrain.epoch=4\n", "run.cfg"); });
  EXPECT_EQ(e.code(), Errc::invalid_argument);
  EXPECT_EQ(e.detail(), "run.cfg:2: unknown config key 'train.epoch'");

  e = capture([&] { c.apply_text("train.learning_rate=fast", "x"); });
  EXPECT_EQ(e.detail(), "x:1: train.learning_rate: 'fast' is not a number");

  e = capture([&] { c.apply_text("\nno equals sign", "y"); });
  EXPECT_EQ(e.code(), Errc::parse_error);
  EXPECT_EQ(e.detail(), "y:2: expected key=value");

  EXPECT_EQ(capture([&] { c.set("train.shuffle", "maybe"); }).code(), Errc::invalid_argument);
  EXPECT_EQ(capture([&] { c.set("split.ratios", "0.5,0.5"); }).code(), Errc::invalid_argument);
  EXPECT_EQ(capture([&] { c.set("cam.method", "lime"); }).code(), Errc::invalid_argument);
  EXPECT_EQ(capture([&] { c.set("cam.hessian", "exact"); }).code(), Errc::invalid_argument);
  EXPECT_EQ(capture([&] { c.set("train.epochs", "-1"); }).code(), Errc::invalid_argument);
}

TEST(RunConfig, FileSource) {
  const auto path = std::filesystem::temp_directory_path() / "camkit_config_test.cfg";
  {
    std::ofstream out(path);
    out << "train.seed=99\nbogus\n";
  }
  RunConfig c;
  const Error e = capture([&] { c.apply_file(path.string()); });
  EXPECT_EQ(e.detail(), path.string() + ":2: expected key=value");
  EXPECT_EQ(c.train.seed, 99u);
  std::filesystem::remove(path);
  EXPECT_EQ(capture([&] { c.apply_file(path.string()); }).code(), Errc::io_error);
}
