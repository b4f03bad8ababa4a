#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <memory>

#include "c2f/checks.hpp"
#include "c2f/desk.hpp"
#include "c2f/io.hpp"
#include "c2f/model.hpp"
#include "oracles.hpp"

using namespace c2f;

namespace {

std::shared_ptr<const HierarchyTree> desk_tree() { return std::make_shared<const HierarchyTree>(desk::hierarchy()); }

std::shared_ptr<const StepView> view_of(const std::shared_ptr<const HierarchyTree>& tree, std::size_t t) {
  return std::make_shared<const StepView>(step_view(tree, t, LabelMode::masked));
}

SegModel random_model(const std::shared_ptr<const StepView>& view, std::uint64_t seed, double bias_spread = 0.5) {
  RandomStream rng(seed);
  SegModel m = init_model(view, rng);
  for (Array* b : {&m.conv1_b, &m.conv2_b, &m.head_b})
    for (double& v : b->values()) v = bias_spread * rng.normal();
  return m;
}

std::vector<double> vec(const Array& a) { return a.storage(); }

}  // namespace

TEST_CASE("shapes and init") {
  const auto tree = desk_tree();
  const auto v = view_of(tree, 1);
  RandomStream rng(1);
  const SegModel m = init_model(v, rng);
  CHECK(m.conv1_w.shape() == Shape{3, 3, 3, 8});
  CHECK(m.conv2_w.shape() == Shape{3, 3, 8, 16});
  CHECK(m.head_w.shape() == Shape{6, 16});
  CHECK(m.class_count() == 6);
  const double bound1 = 1.0 / std::sqrt(27.0);
  for (double w : m.conv1_w.values()) CHECK(std::fabs(w) <= bound1);
  for (double b : m.conv2_b.values()) CHECK(b == 0.0);
  RandomStream rng2(1);
  CHECK(init_model(v, rng2).conv2_w == m.conv2_w);
  RandomStream rng3(1);
  const SegModel z = init_model(v, rng3, true);
  for (double w : z.head_w.values()) CHECK(w == 0.0);
  CHECK(SegModel::parameter_names().size() == m.parameters().size());
}

TEST_CASE("zero head gives uniform probabilities") {
  const auto tree = desk_tree();
  RandomStream rng(3);
  const SegModel m = init_model(view_of(tree, 2), rng, true);
  const Array img = random_images(rng, 1, 5, 6);
  const Prediction p = predict(m, img);
  CHECK(p.probs.shape() == Shape{1, 5, 6, 9});
  for (double v : p.probs.values()) CHECK(v == doctest::Approx(1.0 / 9.0).epsilon(1e-15));
}

TEST_CASE("constant image gives a constant interior") {
  const auto tree = desk_tree();
  const SegModel m = random_model(view_of(tree, 1), 4);
  const Array img({9, 9, 3}, 0.37);
  const Prediction p = predict(m, img);
  REQUIRE(p.probs.shape() == Shape{9, 9, 6});
  const std::size_t k = 6;
  const std::size_t centre = (4 * 9 + 4) * k;
  // Two stacked 3x3 convolutions: pixels at least 2 away from the border see no padding.
  for (std::size_t y = 2; y < 7; ++y)
    for (std::size_t x = 2; x < 7; ++x)
      for (std::size_t c = 0; c < k; ++c) CHECK(p.probs[(y * 9 + x) * k + c] == p.probs[centre + c]);
}

TEST_CASE("forward pass matches a direct convolution loop") {
  const auto tree = desk_tree();
  const SegModel m = random_model(view_of(tree, 2), 5);
  RandomStream rng(6);
  const std::size_t h = 5, w = 4;
  const Array img = random_images(rng, 1, h, w);
  auto h1 = oracle::conv3x3(vec(img), h, w, 3, vec(m.conv1_w), vec(m.conv1_b), 8);
  for (double& v : h1) v = std::max(v, 0.0);
  auto f = oracle::conv3x3(h1, h, w, 8, vec(m.conv2_w), vec(m.conv2_b), 16);
  for (double& v : f) v = std::max(v, 0.0);
  const std::size_t k = m.class_count();
  const Prediction p = predict(m, img.reshaped({h, w, 3}));
  for (std::size_t px = 0; px < h * w; ++px) {
    std::vector<double> z(k);
    for (std::size_t c = 0; c < k; ++c) {
      z[c] = m.head_b[c];
      for (std::size_t d = 0; d < 16; ++d) z[c] += m.head_w[c * 16 + d] * f[px * 16 + d];
    }
    const auto ref = oracle::softmax(z);
    for (std::size_t d = 0; d < 16; ++d) CHECK(p.features[px * 16 + d] == doctest::Approx(f[px * 16 + d]).epsilon(1e-12));
    for (std::size_t c = 0; c < k; ++c) {
      CHECK(p.logits[px * k + c] == doctest::Approx(z[c]).epsilon(1e-12));
      CHECK(p.probs[px * k + c] == doctest::Approx(ref[c]).epsilon(1e-12));
    }
  }
}

TEST_CASE("predict rejects bad shapes") {
  const auto tree = desk_tree();
  const SegModel m = random_model(view_of(tree, 0), 1);
  CHECK_THROWS_AS(predict(m, Array({4, 4, 2})), ModelError);
  CHECK_THROWS_AS(predict(m, Array({4, 4})), ModelError);
}

TEST_CASE("argmax labels") {
  const Array a({3, 2}, {0.1, 0.9, 0.7, 0.3, 0.5, 0.5});
  CHECK(argmax_labels(a) == std::vector<Label>{1, 0, 0});
}

TEST_CASE("expansion copies weights and spreads the bias") {
  const auto tree = desk_tree();
  const auto v0 = view_of(tree, 0), v1 = view_of(tree, 1);
  const SegModel prev = random_model(v0, 7);
  for (BiasMode mode : {BiasMode::unbiased, BiasMode::naive}) {
    const SegModel next = expand_head(prev, v1, mode);
    CHECK(next.conv1_w == prev.conv1_w);
    CHECK(next.conv2_b == prev.conv2_b);
    for (std::size_t f = 0; f < next.class_count(); ++f) {
      const std::size_t c = v1->parent_in_prev()[f];
      for (std::size_t d = 0; d < 16; ++d) CHECK(next.head_w[f * 16 + d] == prev.head_w[c * 16 + d]);
      const double shift = mode == BiasMode::unbiased && !v1->is_carried(f) ? std::log(double(v1->split(c).size())) : 0.0;
      CHECK(next.head_b[f] == prev.head_b[c] - shift);
    }
  }
}

TEST_CASE("two-way split of a 0.6 parent gives 0.3 per child") {
  const auto tree = std::make_shared<const HierarchyTree>(
      parse_hierarchy(R"({"roots":[{"name":"a","children":[{"name":"a1"},{"name":"a2"}]},{"name":"b"}]})"));
  RandomStream rng(0);
  SegModel prev = init_model(view_of(tree, 0), rng, true);
  // Zero head weights: logits are the biases. softmax([log .6, log .4]) = [.6, .4].
  prev.head_b[0] = std::log(0.6);
  prev.head_b[1] = std::log(0.4);
  const SegModel next = expand_head(prev, view_of(tree, 1), BiasMode::unbiased);
  const Prediction p = predict(next, Array({1, 1, 3}, 0.5));
  REQUIRE(p.probs.size() == 3);
  CHECK(p.probs[0] == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(p.probs[1] == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(p.probs[2] == doctest::Approx(0.4).epsilon(1e-15));
  const Prediction naive = predict(expand_head(prev, view_of(tree, 1), BiasMode::naive), Array({1, 1, 3}, 0.5));
  CHECK(naive.probs[0] == doctest::Approx(0.6 / 1.6).epsilon(1e-12));
}

TEST_CASE("single-child split keeps the probability in both modes") {
  const auto tree = std::make_shared<const HierarchyTree>(
      parse_hierarchy(R"({"roots":[{"name":"a","children":[{"name":"a1"}]},{"name":"b","children":[{"name":"b1"}]}]})"));
  const SegModel prev = random_model(view_of(tree, 0), 8);
  RandomStream rng(9);
  const Array img = random_images(rng, 1, 3, 3);
  const Prediction p0 = predict(prev, img);
  for (BiasMode mode : {BiasMode::unbiased, BiasMode::naive}) {
    const Prediction p1 = predict(expand_head(prev, view_of(tree, 1), mode), img);
    CHECK(p1.probs == p0.probs);
  }
}

TEST_CASE("unbiased expansion conserves coarse probabilities and argmax") {
  const auto tree = desk_tree();
  RandomStream rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    for (std::size_t t = 1; t <= tree->max_step(); ++t) {
      const auto prev_view = view_of(tree, t - 1), view = view_of(tree, t);
      const SegModel prev = random_model(prev_view, 100 + trial * 7 + t, 1.5);
      const SegModel next = expand_head(prev, view, BiasMode::unbiased);
      const Array img = random_images(rng, 2, 4, 4);
      const Array p_prev = predict(prev, img).probs;
      const Array agg = aggregate_probs(predict(next, img).probs, *view);
      REQUIRE(agg.shape() == p_prev.shape());
      for (std::size_t i = 0; i < agg.size(); ++i) CHECK(std::fabs(agg[i] - p_prev[i]) <= 1e-9);
      CHECK(argmax_labels(agg) == argmax_labels(p_prev));
    }
  }
}

TEST_CASE("naive expansion breaks conservation for uneven splits") {
  const auto tree = std::make_shared<const HierarchyTree>(parse_hierarchy(
      R"({"roots":[{"name":"a","children":[{"name":"a1"},{"name":"a2"}]},
                   {"name":"b","children":[{"name":"b1"},{"name":"b2"},{"name":"b3"}]}]})"));
  RandomStream rng(0);
  SegModel prev = init_model(view_of(tree, 0), rng, true);
  const auto v1 = view_of(tree, 1);
  const Array img({1, 1, 3}, 0.2);
  const Array p_prev = predict(prev, img).probs;
  CHECK(p_prev[0] == doctest::Approx(0.5));
  const Array naive = aggregate_probs(predict(expand_head(prev, v1, BiasMode::naive), img).probs, *v1);
  CHECK(naive[0] == doctest::Approx(0.4));
  CHECK(std::fabs(naive[0] - p_prev[0]) > 0.05);
  const Array unbiased = aggregate_probs(predict(expand_head(prev, v1, BiasMode::unbiased), img).probs, *v1);
  CHECK(unbiased[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("expansion errors") {
  const auto tree = desk_tree();
  const SegModel m0 = random_model(view_of(tree, 0), 1);
  CHECK_THROWS_WITH_AS(expand_head(m0, view_of(tree, 2), BiasMode::unbiased), doctest::Contains("step"), ModelError);
  CHECK_THROWS_AS(expand_head(m0, view_of(tree, 0), BiasMode::unbiased), ModelError);
  const auto other = std::make_shared<const HierarchyTree>(desk::hierarchy());
  const auto alien = std::make_shared<const HierarchyTree>(
      parse_hierarchy(R"({"roots":[{"name":"x","children":[{"name":"y"}]}]})"));
  CHECK_NOTHROW(expand_head(m0, view_of(other, 1), BiasMode::unbiased));
  CHECK_THROWS_WITH_AS(expand_head(m0, view_of(alien, 1), BiasMode::unbiased), doctest::Contains("hierarch"),
                       ModelError);
  CHECK_THROWS_AS(bias_mode_from_string("fancy"), ModelError);
  CHECK(bias_mode_from_string("naive") == BiasMode::naive);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const auto tree = desk_tree();
  Checkpoint c{random_model(view_of(tree, 2), 11), {}};
  c.meta.step = 2;
  c.meta.iteration = 1000;
  c.meta.seed = 42;
  c.meta.method = "skdc";
  c.meta.config_hash = "00ff";
  const auto path = (std::filesystem::temp_directory_path() / "c2f_test_model.c2fm").string();
  save_checkpoint(c, path);
  const Checkpoint d = load_checkpoint(path);
  std::filesystem::remove(path);
  for (std::size_t i = 0; i < c.model.parameters().size(); ++i) CHECK(*d.model.parameters()[i] == *c.model.parameters()[i]);
  CHECK(d.meta.step == 2);
  CHECK(d.meta.iteration == 1000);
  CHECK(d.meta.seed == 42);
  CHECK(d.meta.method == "skdc");
  CHECK(d.meta.config_hash == "00ff");
  CHECK(d.model.view->step() == 2);
  CHECK(d.model.view->tree()->fingerprint() == tree->fingerprint());
  RandomStream rng(12);
  const Array img = random_images(rng, 2, 6, 5);
  CHECK(predict(d.model, img).probs == predict(c.model, img).probs);
  CHECK(encode_checkpoint(d) == encode_checkpoint(c));
}

TEST_CASE("checkpoint hash matches a recomputation") {
  const auto tree = desk_tree();
  const Checkpoint c{random_model(view_of(tree, 1), 13), {}};
  const Checkpoint d = decode_checkpoint(encode_checkpoint(c));
  io::ByteWriter w;
  for (const Array* p : c.model.parameters())
    for (double v : p->values()) w.put_f64(v);
  CHECK(d.meta.param_hash == io::hex64(io::fnv1a(w.bytes())));
  CHECK(parameter_hash(c.model) == d.meta.param_hash);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto tree = desk_tree();
  const auto good = encode_checkpoint(Checkpoint{random_model(view_of(tree, 1), 14), {}});
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, good.size() / 2, good.size() - 1}) {
    const std::vector<std::uint8_t> trunc(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK_THROWS_AS(decode_checkpoint(trunc), ModelError);
  }
  auto bad = good;
  bad[0] = 'Z';
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad), doctest::Contains("magic"), ModelError);
  bad = good;
  bad[4] = 9;
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad), doctest::Contains("version"), ModelError);
  bad = good;
  bad[bad.size() - 3] ^= 0x40;
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad), doctest::Contains("hash"), ModelError);
}
