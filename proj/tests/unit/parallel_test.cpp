#include "doctest.h"
#include "manipshield/corpus_stats.hpp"
#include "manipshield/lds_probe.hpp"
#include "manipshield/parallel.hpp"
#include "manipshield/synthetic.hpp"

using namespace manipshield;

namespace {

void check_close(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

void check_close(const corpus::ImageStats& a, const corpus::ImageStats& b) {
  check_close(std::vector<double>{a.brightness, a.contrast, a.colorfulness, a.si},
              std::vector<double>{b.brightness, b.contrast, b.colorfulness, b.si});
}

}  // namespace

TEST_SUITE("parallel") {
  TEST_CASE("layer metrics match the serial reference") {
    synthetic::PlantedLayerSpec spec;
    spec.layers = 9;
    spec.dim = 33;
    spec.per_class = 70;
    spec.planted_layer = 4;
    const auto fx = synthetic::planted_layer(spec);
    const auto flags = lds::class_flags(fx.labels);
    const auto serial = lds::layer_metrics_serial(fx.dump, flags, {});
    set_threads(1);
    const auto one = lds::layer_metrics(fx.dump, flags, {});
    check_close(one.kl, serial.kl);
    check_close(one.ldr, serial.ldr);
    check_close(one.entropy, serial.entropy);
    for (int threads : {2, 4}) {
      set_threads(threads);
      CHECK(lds::layer_metrics(fx.dump, flags, {}) == one);
    }
    set_threads(1);
  }

  TEST_CASE("batch stats match the serial path") {
    std::vector<corpus::RgbImage> images;
    for (std::uint64_t s = 0; s < 6; ++s) images.push_back(synthetic::random_image(20 + s, 15, s));
    const auto serial = corpus::batch_stats_serial(images);
    set_threads(1);
    const auto one = corpus::batch_stats(images);
    for (std::size_t i = 0; i < images.size(); ++i) check_close(one[i], serial[i]);
    set_threads(3);
    CHECK(corpus::batch_stats(images) == one);
    set_threads(1);
    const auto big = synthetic::random_image(400, 300, 9);
    set_threads(4);
    const auto many = corpus::image_stats(big);
    set_threads(1);
    CHECK(corpus::image_stats(big) == many);
  }
}
