#include <doctest.h>

#include <sstream>

#include "efh/imgbackbone/backbone.hpp"
#include "efh/numcore/grad_check.hpp"
#include "test_util.hpp"

using namespace efh;
using namespace efh::imgbackbone;
using efh::test::random_tensor;

TEST_CASE("pyramid shapes follow strides 8/16/32") {
  ParamStore<float> store;
  BackboneConfig cfg;
  init_backbone(store, Init{1}, cfg);
  CounterRng rng(2);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{64, 64}, {32, 96}, {128, 64}}) {
    DiffContext<float> ctx(false);
    TensorF img = random_tensor<float>(rng, {h, w, 3}, 1.0);
    const auto p = extract_pyramid(ctx, store, cfg, ctx.constant(img));
    CHECK(p.p3.shape() == Shape{h / 8, w / 8, cfg.d});
    CHECK(p.p4.shape() == Shape{h / 16, w / 16, cfg.d});
    CHECK(p.p5.shape() == Shape{h / 32, w / 32, cfg.d});
  }
  DiffContext<float> ctx(false);
  CHECK_THROWS_AS(extract_pyramid(ctx, store, cfg, ctx.constant(TensorF({48, 64, 3}))),
                  ArgumentError);
  CHECK_THROWS_AS(extract_pyramid(ctx, store, cfg, ctx.constant(TensorF({64, 64, 1}))),
                  ArgumentError);
}

TEST_CASE("zero image with zero biases gives a zero pyramid; repeat runs are identical") {
  ParamStore<float> store;
  BackboneConfig cfg;
  init_backbone(store, Init{5}, cfg);
  DiffContext<float> ctx(false);
  const auto p = extract_pyramid(ctx, store, cfg, ctx.constant(TensorF({64, 64, 3})));
  for (const auto& v : {p.p3, p.p4, p.p5}) {
    for (float x : v.value().data()) CHECK(x == 0.0f);
  }
  CounterRng rng(6);
  const TensorF img = random_tensor<float>(rng, {64, 64, 3});
  DiffContext<float> a(false), b(false);
  const auto pa = extract_pyramid(a, store, cfg, a.constant(img));
  const auto pb = extract_pyramid(b, store, cfg, b.constant(img));
  CHECK(bit_identical(pa.p5.value(), pb.p5.value()));
  CHECK(bit_identical(pa.p3.value(), pb.p3.value()));
}

TEST_CASE("gradient of a P5 functional w.r.t. pixels matches finite differences") {
  ParamStore<double> store;
  BackboneConfig cfg;
  cfg.d = 8;
  init_backbone(store, Init{7}, cfg);
  CounterRng rng(8);
  const TensorD weights = random_tensor<double>(rng, {1, 1, cfg.d});
  const ScalarFn f = [&](DiffContext<double>& c, const std::vector<Var<double>>& in) {
    const auto p = extract_pyramid(c, store, cfg, in[0]);
    return ops::sum(ops::mul(p.p5, c.constant(weights)));
  };
  CHECK(grad_check(f, {random_tensor<double>(rng, {32, 32, 3})}) <= 1e-5);
}

TEST_CASE("PPM read/write") {
  TensorF img({2, 3, 3});
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = static_cast<float>(i * 14) / 255.0f;
  std::stringstream ss;
  write_ppm(ss, img);
  const TensorF back = read_ppm(ss);
  CHECK(back.shape() == img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(back[i] == img[i]);

  std::stringstream commented("P6\n# made by hand\n1 1\n255\n\x01\x02\x03");
  const TensorF one = read_ppm(commented);
  CHECK(one[2] == 3.0f / 255.0f);
  std::stringstream p3("P3\n1 1\n255\n1 2 3");
  CHECK_THROWS_AS(read_ppm(p3), FormatError);
  std::stringstream truncated("P6\n2 2\n255\n\x01");
  CHECK_THROWS_AS(read_ppm(truncated), FormatError);
}
