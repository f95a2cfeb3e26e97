#include <cmath>

#include "doctest.h"
#include "manipshield/error.hpp"
#include "manipshield/metrics_eval.hpp"
#include "manipshield/rng.hpp"
#include "oracles.hpp"

using namespace manipshield;
using namespace manipshield::metrics;
using doctest::Approx;

TEST_SUITE("metrics") {
  TEST_CASE("binary metrics hand values") {
    const std::vector<double> scores = {0.9, 0.8, 0.7, 0.1, 0.2, 0.3, 0.1, 0.2, 0.3, 0.4};
    const std::vector<std::uint8_t> labels = {1, 1, 0, 1, 0, 0, 0, 0, 0, 0};
    const auto m = binary_metrics(scores, labels);
    CHECK(m.counts == ConfusionCounts{2, 1, 6, 1});
    CHECK(m.accuracy == Approx(0.8));
    CHECK(m.f1 == Approx(4.0 / 6.0));
  }

  TEST_CASE("degenerate f1") {
    const std::vector<double> scores = {0.1, 0.2};
    const std::vector<std::uint8_t> labels = {0, 0};
    const auto m = binary_metrics(scores, labels);
    CHECK(m.f1 == 0.0);
    CHECK(m.accuracy == 1.0);
    const std::vector<double> perfect = {0.9, 0.1};
    const std::vector<std::uint8_t> l2 = {1, 0};
    CHECK(binary_metrics(perfect, l2).f1 == 1.0);
  }

  TEST_CASE("threshold is inclusive and lengths must match") {
    const std::vector<double> scores = {0.5};
    const std::vector<std::uint8_t> labels = {1};
    CHECK(binary_metrics(scores, labels).counts.tp == 1);
    const std::vector<std::uint8_t> two = {1, 0};
    CHECK_THROWS_AS(binary_metrics(scores, two), Error);
  }

  TEST_CASE("binary metrics agree with brute force") {
    Rng rng(1);
    for (int t = 0; t < 200; ++t) {
      const std::size_t n = 1 + uniform_index(rng, 30);
      std::vector<double> s(n);
      std::vector<std::uint8_t> l(n);
      for (std::size_t i = 0; i < n; ++i) {
        s[i] = std::round(uniform01(rng) * 10) / 10;
        l[i] = static_cast<std::uint8_t>(uniform_index(rng, 2));
      }
      const auto c = oracle::confusion(s, l, 0.5);
      const auto m = binary_metrics(s, l);
      CHECK(m.counts == ConfusionCounts{c.tp, c.fp, c.tn, c.fn});
    }
  }

  TEST_CASE("iou") {
    CHECK(box_iou({0, 0, 2, 2}, {1, 1, 3, 3}) == Approx(1.0 / 7));
    const double a[4] = {0, 0, 2, 2}, b[4] = {1, 1, 3, 3};
    CHECK(std::abs(box_iou({0, 0, 2, 2}, {1, 1, 3, 3}) - oracle::raster_iou(a, b, 1e-3)) < 1e-3);
    CHECK(box_iou({0, 0, 1, 1}, {0, 0, 1, 1}) == 1.0);
    CHECK(box_iou({0, 0, 1, 1}, {2, 2, 3, 3}) == 0.0);
    CHECK(box_iou({2, 2, 0, 0}, {1, 1, 3, 3}) == Approx(1.0 / 7));
    CHECK(box_iou({0, 0, 0, 0}, {0, 0, 0, 0}) == 0.0);
    Rng rng(2);
    for (int i = 0; i < 100; ++i) {
      Box p{uniform01(rng), uniform01(rng), uniform01(rng), uniform01(rng)};
      Box q{uniform01(rng), uniform01(rng), uniform01(rng), uniform01(rng)};
      p = p.canonical();
      q = q.canonical();
      CHECK(box_iou(p, q) == box_iou(q, p));
      CHECK(box_iou(p, q) >= 0.0);
      CHECK(box_iou(p, q) <= 1.0);
    }
  }

  TEST_CASE("localization score") {
    const std::vector<Box> gt = {{0, 0, 0.5, 0.5}};
    const std::vector<decoders::ScoredBox> exact = {{{0, 0, 0.5, 0.5}, 0.9}};
    CHECK(localization_score(exact, gt) == 1.0);
    CHECK(localization_score({}, {}) == 1.0);
    CHECK(localization_score(exact, {}) == 0.0);
    const std::vector<decoders::ScoredBox> low = {{{0, 0, 0.5, 0.5}, 0.2}};
    CHECK(localization_score(low, gt) == 0.0);
    CHECK(localization_score(low, {}) == 1.0);

    const std::vector<Box> two = {{0, 0, 1, 0.5}, {0.6, 0.6, 0.9, 0.9}};
    const std::vector<decoders::ScoredBox> one = {{{0, 0, 0.8, 0.5}, 0.9}};
    CHECK(localization_score(one, two) == Approx(0.4));
  }

  TEST_CASE("css") {
    const std::vector<double> a = {1, 2}, b = {2, 4}, c = {-2, 1}, z = {0, 0}, n = {-1, -2};
    CHECK(css(a, a) == Approx(1.0));
    CHECK(css(a, b) == Approx(1.0));
    CHECK(css(a, c) == Approx(0.0));
    CHECK(css(a, n) == Approx(-1.0));
    CHECK_THROWS_AS(css(a, z), Error);
    const std::vector<double> three = {1, 2, 3};
    CHECK_THROWS_AS(css(a, three), Error);
  }

  TEST_CASE("generalization matrix") {
    RunGrid grid;
    auto cell = [](double acc) {
      EvalResult r;
      r.overall.accuracy = acc;
      return r;
    };
    grid[{"A", "A"}] = cell(0.95);
    grid[{"A", "B"}] = cell(0.70);
    grid[{"B", "A"}] = cell(0.65);
    grid[{"B", "B"}] = cell(0.93);
    const auto m = generalization_matrix(grid);
    CHECK(*m.row_average[0] == Approx(0.825));
    CHECK(*m.row_average[1] == Approx(0.79));
    CHECK(render_markdown(m).find("**0.9500**") != std::string::npos);

    grid.erase({"A", "B"});
    const auto missing = generalization_matrix(grid);
    CHECK_FALSE(missing.accuracy[0][1]);
    CHECK(*missing.row_average[0] == Approx(0.95));
    CHECK(render_markdown(missing).find(" - ") != std::string::npos);

    RunGrid single;
    single[{"X", "X"}] = cell(0.5);
    const auto s = generalization_matrix(single);
    CHECK(s.train_subsets.size() == 1);
    CHECK(s.test_subsets.size() == 1);
  }

  TEST_CASE("eval result json round-trip") {
    EvalResult r;
    r.overall.accuracy = 0.75;
    r.overall.f1 = 0.5;
    r.per_subset["SDXL"].mean_iou = 0.25;
    r.counts = ConfusionCounts{1, 2, 3, 4};
    const auto back = eval_result_from_json(nlohmann::json::parse(to_json(r).dump()));
    CHECK(back.overall.accuracy == 0.75);
    CHECK(back.overall.f1 == 0.5);
    CHECK_FALSE(back.overall.mean_css);
    CHECK(back.per_subset.at("SDXL").mean_iou == 0.25);
    CHECK(back.counts == r.counts);
  }
}
