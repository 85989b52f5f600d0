#include <cmath>
#include <random>

#include "doctest.h"
#include "gamblenet/metrics.hpp"
#include "oracles.hpp"

using namespace gamblenet;
using namespace gamblenet::metrics;

namespace {

LabelMap from_rows(std::initializer_list<std::initializer_list<int>> rows) {
  const int h = static_cast<int>(rows.size());
  const int w = static_cast<int>(rows.begin()->size());
  LabelMap m(h, w);
  int r = 0;
  for (const auto& row : rows) {
    int c = 0;
    for (int v : row) m.at(r, c++) = v;
    ++r;
  }
  return m;
}

std::vector<Point> to_points(const std::vector<oracle::Pt>& v) {
  std::vector<Point> out;
  for (auto p : v) out.push_back({p.r, p.c});
  return out;
}

}  // namespace

TEST_CASE("IoU hand cases") {
  const LabelMap label = from_rows({{1, 1, 0, 0}});
  const LabelMap pred = from_rows({{0, 1, 1, 0}});
  const IouResult r = confusion_and_iou(pred, label, 2);
  REQUIRE(r.per_class[1].has_value());
  CHECK(*r.per_class[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const IouResult same = confusion_and_iou(label, label, 3);
  CHECK(*same.per_class[0] == 1.0);
  CHECK(*same.per_class[1] == 1.0);
  CHECK_FALSE(same.per_class[2].has_value());
  CHECK(same.mean == 1.0);

  const IouResult disjoint = confusion_and_iou(from_rows({{1, 0}}), from_rows({{0, 1}}), 2);
  CHECK(*disjoint.per_class[1] == 0.0);

  LabelMap ignored = label;
  ignored.ignore = {1, 1, 1, 1};
  CHECK_THROWS_AS(confusion_and_iou(pred, ignored, 2), Error);
  CHECK_THROWS_AS(confusion_and_iou(pred, from_rows({{0, 1}}), 2), Error);
}

TEST_CASE("constant predictor IoU equals class fraction") {
  std::mt19937_64 rng(2);
  const LabelMap label = oracle::random_blob_map(rng, 16, 16, 4);
  const LabelMap pred(16, 16, 0);
  const IouResult r = confusion_and_iou(pred, label, 4);
  int bg = 0;
  for (int v : label.classes) bg += v == 0;
  CHECK(*r.per_class[0] == doctest::Approx(bg / 256.0));
  for (int k = 1; k < 4; ++k) {
    if (r.per_class[std::size_t(k)]) CHECK(*r.per_class[std::size_t(k)] == 0.0);
  }
}

TEST_CASE("contour extraction") {
  const ContourSet flat = extract_contours(LabelMap(4, 4, 2), 3);
  for (const auto& c : flat.per_class) CHECK(c.empty());

  const LabelMap center = from_rows({{0, 0, 0}, {0, 1, 0}, {0, 0, 0}});
  const ContourSet cs = extract_contours(center, 2);
  REQUIRE(cs.per_class[1].size() == 1);
  CHECK(cs.per_class[1][0] == Point{1, 1});
  CHECK(cs.per_class[0].size() == 4);

  const ContourSet checker = extract_contours(from_rows({{0, 1}, {1, 0}}), 2);
  CHECK(checker.per_class[0].size() == 2);
  CHECK(checker.per_class[1].size() == 2);

  std::mt19937_64 rng(9);
  for (int t = 0; t < 20; ++t) {
    const LabelMap m = oracle::random_blob_map(rng, 12, 9, 4);
    const auto expect = oracle::contours(m, 4);
    const ContourSet got = extract_contours(m, 4);
    for (int k = 0; k < 4; ++k) CHECK(got.per_class[std::size_t(k)] == to_points(expect[std::size_t(k)]));
  }
}

TEST_CASE("modified Hausdorff hand values and properties") {
  const std::vector<Point> a = {{0, 0}}, b = {{0, 3}}, c = {{0, 0}, {0, 3}};
  CHECK(modified_hausdorff(a, a) == 0.0);
  CHECK(modified_hausdorff(a, b) == 3.0);
  CHECK(modified_hausdorff(a, c) == 0.75);
  CHECK(modified_hausdorff(c, a) == 0.75);
  CHECK_THROWS_AS(modified_hausdorff(a, std::vector<Point>{}), Error);

  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> coord(0, 30), count(1, 25);
  for (int t = 0; t < 50; ++t) {
    std::vector<Point> x(std::size_t(count(rng))), y(std::size_t(count(rng)));
    for (auto& p : x) p = {coord(rng), coord(rng)};
    for (auto& p : y) p = {coord(rng), coord(rng)};
    const double d = modified_hausdorff(x, y);
    CHECK(d == doctest::Approx(modified_hausdorff(y, x)).epsilon(1e-12));
    CHECK(modified_hausdorff(x, x) == 0.0);
    auto shift = [](std::vector<Point> v) {
      for (auto& p : v) p = {p.row + 7, p.col + 5};
      return v;
    };
    CHECK(modified_hausdorff(shift(x), shift(y)) == doctest::Approx(d).epsilon(1e-12));
  }
}

TEST_CASE("image Hausdorff composition and skip policy") {
  const LabelMap label = from_rows({{0, 0, 0, 0}, {0, 1, 1, 0}, {0, 0, 0, 0}});
  CHECK(image_hausdorff(label, label, 2).mean == 0.0);

  // Class present in exactly one map is skipped, not scored.
  const LabelMap pred = from_rows({{0, 0, 0, 0}, {0, 1, 1, 0}, {0, 0, 0, 2}});
  const HausdorffResult r = image_hausdorff(pred, label, 3);
  CHECK_FALSE(r.per_class[2].has_value());

  CHECK_THROWS_AS(image_hausdorff(LabelMap(3, 3, 0), LabelMap(3, 3, 1), 2), Error);
}

TEST_CASE("shipped metrics agree with brute-force oracles") {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 60; ++t) {
    const bool noisy = t % 3 == 0;
    const LabelMap a = noisy ? oracle::random_noise_map(rng, 16, 16, 4) : oracle::random_blob_map(rng, 16, 16, 4);
    const LabelMap b = oracle::random_blob_map(rng, 16, 16, 4);
    for (double tau : {0.0, 1.0, 2.5}) {
      const auto expect = oracle::bf_mean(a, b, 4, tau);
      REQUIRE(expect.has_value());
      CHECK(bf_score(a, b, 4, tau).mean == doctest::Approx(*expect).epsilon(1e-12));
      CHECK(bf_score(a, b, 4, tau).mean == doctest::Approx(bf_score(b, a, 4, tau).mean).epsilon(1e-12));
    }
    const auto hd = oracle::image_hausdorff(a, b, 4);
    if (hd) {
      CHECK(image_hausdorff(a, b, 4).mean == doctest::Approx(*hd).epsilon(1e-12));
    } else {
      CHECK_THROWS_AS(image_hausdorff(a, b, 4), Error);
    }
  }
}

TEST_CASE("BF score hand cases") {
  LabelMap label(8, 8, 0), shifted(8, 8, 0);
  for (int r = 2; r < 6; ++r)
    for (int c = 2; c < 5; ++c) {
      label.at(r, c) = 1;
      shifted.at(r, c + 1) = 1;
    }
  CHECK(bf_score(label, label, 2, 0.0).mean == 1.0);
  CHECK(bf_score(shifted, label, 2, 1.0).mean == 1.0);
  CHECK(bf_score(shifted, label, 2, 0.0).mean < 1.0);

  LabelMap far(8, 8, 0);
  far.at(0, 0) = 1;
  LabelMap near(8, 8, 0);
  near.at(7, 7) = 1;
  CHECK(*bf_score(far, near, 2, 1.0).per_class[1] == 0.0);
  CHECK(default_bf_tolerance(64, 64) == doctest::Approx(0.0075 * std::sqrt(2.0) * 64));
}

TEST_CASE("perfect IoU implies perfect BF and zero Hausdorff per class") {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 20; ++t) {
    const LabelMap m = oracle::random_blob_map(rng, 16, 16, 4);
    const IouResult iou = confusion_and_iou(m, m, 4);
    const BfResult bf = bf_score(m, m, 4);
    const HausdorffResult hd = image_hausdorff(m, m, 4);
    for (int k = 0; k < 4; ++k) {
      if (!iou.per_class[std::size_t(k)]) continue;
      CHECK(*iou.per_class[std::size_t(k)] == 1.0);
      CHECK(*bf.per_class[std::size_t(k)] == 1.0);
      if (hd.per_class[std::size_t(k)]) CHECK(*hd.per_class[std::size_t(k)] == 0.0);
    }
  }
}

TEST_CASE("mean-max confidence") {
  const std::vector<Tensor> uniform = {Tensor(4, 3, 3, 0.25), Tensor(4, 3, 3, 0.25)};
  const Confidence u = mean_max_confidence(uniform);
  CHECK(u.mean == doctest::Approx(0.25));
  CHECK(u.std == doctest::Approx(0.0));

  const std::vector<Tensor> hard = {one_hot(LabelMap(2, 2, 1), 3)};
  CHECK(mean_max_confidence(hard).mean == 1.0);
  CHECK(mean_max_confidence(hard).std == 0.0);

  Tensor mixed(2, 1, 2);
  mixed.at(0, 0, 0) = 1.0;
  mixed.at(0, 0, 1) = 0.5;
  mixed.at(1, 0, 1) = 0.5;
  const std::vector<Tensor> m = {mixed};
  CHECK(mean_max_confidence(m).mean == doctest::Approx(0.75));
  CHECK(mean_max_confidence(m).std == doctest::Approx(0.25));
  CHECK_THROWS_AS(mean_max_confidence(std::span<const Tensor>{}), Error);
}

TEST_CASE("evaluator report and serialisation") {
  const LabelMap label = from_rows({{0, 0, 1, 1}, {0, 0, 1, 1}, {2, 2, 2, 2}, {2, 2, 2, 2}});
  Evaluator ev(3);
  ev.add(one_hot(label, 3), label);
  const MetricReport r = ev.report();
  CHECK(r.mean_iou == 1.0);
  CHECK(r.mean_bf == 1.0);
  CHECK(r.mean_hausdorff == 0.0);
  CHECK(r.confidence.mean == 1.0);
  CHECK(r.images == 1);

  const std::string csv = report_csv(r);
  CHECK(csv.rfind("class,iou,bf_score,hausdorff\n0,", 0) == 0);
  CHECK(csv.find("\n1,") < csv.find("\n2,"));
  CHECK(csv.find("\nmean,") != std::string::npos);
  CHECK(report_json(r).find("\"mean_iou\"") != std::string::npos);
}
