#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "test_support.hpp"
#include "vitbench/error.hpp"
#include "vitbench/model.hpp"
#include "vitbench/train.hpp"

using namespace vitbench;
using vitbench::testing::TempDir;

namespace {

// Plain nested-loop reference network, 64-bit, written against the layer
// definitions rather than the library's kernels.
struct Tensor {
  std::size_t c;
  Dims d;
  std::vector<double> v;  // (c, z, y, x)
  double& at(std::size_t ch, std::size_t z, std::size_t y, std::size_t x) {
    return v[((ch * d[0] + z) * d[1] + y) * d[2] + x];
  }
  double at(std::size_t ch, std::size_t z, std::size_t y, std::size_t x) const {
    return v[((ch * d[0] + z) * d[1] + y) * d[2] + x];
  }
};

Tensor naive_conv(const Tensor& in, const ConvParams<double>& p) {
  Tensor out{p.cout, {}, {}};
  for (int a = 0; a < 3; ++a) out.d[a] = (in.d[a] + 2 - 3) / p.stride[a] + 1;
  out.v.assign(p.cout * voxel_count(out.d), 0.0);
  for (std::size_t co = 0; co < p.cout; ++co)
    for (std::size_t z = 0; z < out.d[0]; ++z)
      for (std::size_t y = 0; y < out.d[1]; ++y)
        for (std::size_t x = 0; x < out.d[2]; ++x) {
          double acc = p.bias[co];
          for (std::size_t ci = 0; ci < p.cin; ++ci)
            for (int kz = 0; kz < 3; ++kz)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                  const long iz = long(z * p.stride[0]) + kz - 1;
                  const long iy = long(y * p.stride[1]) + ky - 1;
                  const long ix = long(x * p.stride[2]) + kx - 1;
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= long(in.d[0]) || iy >= long(in.d[1]) || ix >= long(in.d[2]))
                    continue;
                  acc += p.weight[((co * p.cin + ci) * 3 + kz) * 9 + ky * 3 + kx] * in.at(ci, iz, iy, ix);
                }
          out.at(co, z, y, x) = acc;
        }
  return out;
}

// Batch norm over a whole batch of tensors; batch statistics when `train`.
void naive_bn(std::vector<Tensor>& xs, const BatchNormParams<double>& p, bool train) {
  const std::size_t C = xs[0].c, S = voxel_count(xs[0].d);
  for (std::size_t c = 0; c < C; ++c) {
    double mean = p.running_mean[c], var = p.running_var[c];
    if (train) {
      double s = 0, q = 0;
      for (const auto& t : xs)
        for (std::size_t i = 0; i < S; ++i) s += t.v[c * S + i];
      mean = s / double(xs.size() * S);
      for (const auto& t : xs)
        for (std::size_t i = 0; i < S; ++i) q += (t.v[c * S + i] - mean) * (t.v[c * S + i] - mean);
      var = q / double(xs.size() * S);
    }
    for (auto& t : xs)
      for (std::size_t i = 0; i < S; ++i)
        t.v[c * S + i] = p.gamma[c] * (t.v[c * S + i] - mean) / std::sqrt(var + p.eps) + p.beta[c];
  }
}

void naive_relu(std::vector<Tensor>& xs) {
  for (auto& t : xs)
    for (auto& v : t.v) v = std::max(v, 0.0);
}

std::vector<Tensor> naive_rblock(const std::vector<Tensor>& x, const RBlockParams<double>& p, bool train) {
  auto h = x;
  naive_bn(h, p.bn, train);
  naive_relu(h);
  std::vector<Tensor> out;
  for (std::size_t n = 0; n < x.size(); ++n) {
    auto c = naive_conv(h[n], p.conv);
    for (std::size_t i = 0; i < c.v.size(); ++i) c.v[i] += x[n].v[i];
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<double> naive_forward(const ModelParamsT<double>& p, const std::vector<Tensor>& batch, bool train) {
  std::vector<Tensor> h;
  for (const auto& t : batch) h.push_back(naive_conv(t, p.stem));
  h = naive_rblock(h, p.scale1, train);
  for (auto& t : h) t = naive_conv(t, p.down);
  h = naive_rblock(h, p.scale2, train);
  naive_bn(h, p.head.bn, train);
  naive_relu(h);
  std::vector<double> probs;
  for (const auto& t : h) {
    const std::size_t S = voxel_count(t.d);
    double z = p.head.bias[0];
    for (std::size_t c = 0; c < t.c; ++c) {
      double s = 0;
      for (std::size_t i = 0; i < S; ++i) s += t.v[c * S + i];
      z += p.head.weight[c] * s / double(S);
    }
    probs.push_back(1.0 / (1.0 + std::exp(-z)));
  }
  return probs;
}

ModelParamsT<double> random_params(std::size_t c1, std::size_t c2, std::uint64_t seed) {
  Rng rng(seed);
  auto p = init_params<double>(c1, c2, rng);
  for_each_tensor(p, [&](const std::string& name, std::vector<double>& v, bool learnable) {
    if (name.ends_with("running_var")) {
      for (auto& x : v) x = uniform(rng, 0.5, 2.0);
    } else if (name.ends_with("running_mean")) {
      for (auto& x : v) x = uniform(rng, -0.3, 0.3);
    } else if (learnable && !name.ends_with(".weight")) {
      for (auto& x : v) x = name.ends_with("gamma") ? uniform(rng, 0.5, 1.5) : uniform(rng, -0.2, 0.2);
    } else if (name == "head.weight") {
      for (auto& x : v) x = uniform(rng, -1, 1);
    }
  });
  return p;
}

Activation<double> random_batch(std::size_t n, Dims d, std::uint64_t seed) {
  Rng rng(seed);
  Activation<double> a{n, 1, d, std::vector<double>(n * voxel_count(d))};
  for (auto& x : a.data) x = uniform01(rng);
  return a;
}

std::vector<Tensor> as_tensors(const Activation<double>& a) {
  std::vector<Tensor> out;
  const std::size_t S = a.spatial();
  for (std::size_t n = 0; n < a.n; ++n)
    out.push_back({1, a.dims, std::vector<double>(a.data.begin() + n * S, a.data.begin() + (n + 1) * S)});
  return out;
}

double ref_bce(double p, int y) { return -(y ? std::log(p) : std::log(1 - p)); }

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("fresh model outputs exactly one half") {
    Rng rng(1);
    const auto p = init_params<float>(8, 16, rng);
    const auto batch = random_batch(3, {8, 16, 16}, 2);
    Activation<float> fb{batch.n, 1, batch.dims, std::vector<float>(batch.data.begin(), batch.data.end())};
    for (Mode m : {Mode::Eval, Mode::Train}) {
      Rng drop(3);
      for (float x : forward(p, fb, m, &drop).probs) CHECK(x == 0.5f);
    }
  }

  TEST_CASE("forward matches a direct-convolution oracle") {
    const auto p = random_params(2, 4, 5);
    const auto batch = random_batch(3, {8, 16, 16}, 6);
    const auto want_eval = naive_forward(p, as_tensors(batch), false);
    const auto got_eval = forward(p, batch, Mode::Eval).probs;
    const auto want_train = naive_forward(p, as_tensors(batch), true);
    const auto got_train = forward(p, batch, Mode::Train, nullptr, 0.0).probs;
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(std::abs(got_eval[i] - want_eval[i]) < 1e-6);
      CHECK(std::abs(got_train[i] - want_train[i]) < 1e-6);
    }
    // Odd dims exercise the stride arithmetic at the borders.
    const auto odd = random_batch(2, {9, 11, 13}, 7);
    const auto w = naive_forward(p, as_tensors(odd), false);
    const auto g = forward(p, odd, Mode::Eval).probs;
    for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(g[i] - w[i]) < 1e-6);
  }

  TEST_CASE("eval-mode forward is deterministic and inside (0, 1)") {
    const auto p = convert_params<float>(random_params(8, 16, 8));
    Rng rng(9);
    Activation<float> b{4, 1, {8, 16, 16}, std::vector<float>(4 * 8 * 16 * 16)};
    for (auto& x : b.data) x = static_cast<float>(uniform01(rng));
    const auto a = forward(p, b, Mode::Eval).probs;
    const auto c = forward(p, b, Mode::Eval).probs;
    CHECK(a == c);
    for (float x : a) CHECK((x > 0.0f && x < 1.0f));
  }

  TEST_CASE("train-mode forward with a fixed dropout seed is reproducible") {
    const auto p = random_params(2, 4, 10);
    const auto b = random_batch(4, {8, 8, 8}, 11);
    Rng r1(12), r2(12);
    CHECK(forward(p, b, Mode::Train, &r1).probs == forward(p, b, Mode::Train, &r2).probs);
  }

  TEST_CASE("an R-block with zero conv weights and gamma is the identity") {
    auto p = random_params(2, 4, 13);
    std::fill(p.scale1.conv.weight.begin(), p.scale1.conv.weight.end(), 0.0);
    std::fill(p.scale1.conv.bias.begin(), p.scale1.conv.bias.end(), 0.0);
    std::fill(p.scale1.bn.gamma.begin(), p.scale1.bn.gamma.end(), 0.0);
    std::fill(p.scale1.bn.beta.begin(), p.scale1.bn.beta.end(), 0.0);
    const auto b = random_batch(2, {8, 8, 8}, 14);
    const auto r = forward(p, b, Mode::Train, nullptr, 0.0);
    CHECK(r.cache->block1_out.data == r.cache->stem_out.data);
  }

  TEST_CASE("global average pooling of a constant map is that constant") {
    auto p = random_params(2, 4, 15);
    for (auto* c : {&p.stem, &p.scale1.conv, &p.down, &p.scale2.conv})
      std::fill(c->weight.begin(), c->weight.end(), 0.0);
    // Every activation below the head is now constant per channel, so pooled
    // equals relu(bn(block2)) at any single voxel.
    const auto b = random_batch(1, {8, 8, 8}, 16);
    Rng drop(1);
    const auto r = forward(p, b, Mode::Train, &drop, 0.0);
    const auto& head = r.cache->head_act;
    for (std::size_t c = 0; c < 4; ++c) CHECK(r.cache->pooled[c] == doctest::Approx(head.data[c * head.spatial()]).epsilon(1e-12));
  }

  TEST_CASE("wcel reference values") {
    const std::vector<double> half{0.5, 0.5, 0.5};
    const std::vector<int> y{1, 0, 1};
    CHECK(wcel<double>(half, y, {1, 1}) == doctest::Approx(0.693147).epsilon(1e-6));
    const std::vector<double> p08{0.8};
    const std::vector<int> one{1};
    CHECK(wcel<double>(p08, one, {2, 1}) == doctest::Approx(0.446287).epsilon(1e-6));
    CHECK_THROWS_AS(wcel<double>(std::span<const double>{}, std::span<const int>{}, {1, 1}), Error);

    Rng rng(17);
    for (int t = 0; t < 200; ++t) {
      std::vector<double> p(1 + uniform_index(rng, 16));
      std::vector<int> l(p.size());
      double ref = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = uniform(rng, 0.01, 0.99);
        l[i] = static_cast<int>(uniform_index(rng, 2));
        ref += ref_bce(p[i], l[i]);
      }
      CHECK(std::abs(wcel<double>(p, l, {1, 1}) - ref / double(p.size())) <= 1e-12);
    }
  }

  TEST_CASE("wcel clamps probabilities before the log") {
    const std::vector<double> p{0.0, 1.0};
    const std::vector<int> y{1, 0};
    CHECK(wcel<double>(p, y, {1, 1}) == doctest::Approx(-std::log(1e-7)));
  }

  TEST_CASE("backward matches central differences on the reduced model") {
    const auto r = gradcheck(GradcheckOptions{});
    CHECK(r.max_rel_error < 1e-4);
    CHECK(r.groups.size() == 16);
    for (const auto& g : r.groups) CHECK(g.checked > 0);
  }

  TEST_CASE("gradcheck refuses non-finite parameters") {
    GradcheckOptions o;
    o.inject_nonfinite = true;
    try {
      gradcheck(o);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Numeric);
      CHECK(std::string(e.what()).find("stem") != std::string::npos);
    }
  }

  TEST_CASE("doubling both class weights doubles every gradient") {
    const auto p = random_params(2, 4, 18);
    const auto b = random_batch(3, {8, 8, 8}, 19);
    const std::vector<int> y{1, 0, 1};
    Rng d1(20), d2(20);
    const auto f1 = forward(p, b, Mode::Train, &d1);
    const auto f2 = forward(p, b, Mode::Train, &d2);
    const auto g1 = backward(p, *f1.cache, y, {0.7, 1.3});
    const auto g2 = backward(p, *f2.cache, y, {1.4, 2.6});
    std::vector<const std::vector<double>*> a, c;
    for_each_tensor(g1, [&](const std::string&, const std::vector<double>& v, bool) { a.push_back(&v); });
    for_each_tensor(g2, [&](const std::string&, const std::vector<double>& v, bool) { c.push_back(&v); });
    for (std::size_t t = 0; t < a.size(); ++t)
      for (std::size_t i = 0; i < a[t]->size(); ++i) CHECK((*c[t])[i] == 2.0 * (*a[t])[i]);
  }

  TEST_CASE("a saturated head has a vanishing gradient") {
    auto p = random_params(2, 4, 21);
    std::fill(p.head.weight.begin(), p.head.weight.end(), 0.0);
    p.head.bias[0] = 30.0;
    const auto b = random_batch(2, {8, 8, 8}, 22);
    const std::vector<int> y{1, 1};
    const auto f = forward(p, b, Mode::Train, nullptr, 0.0);
    const auto g = backward(p, *f.cache, y, {1, 1});
    double norm = g.head.bias[0] * g.head.bias[0];
    for (double x : g.head.weight) norm += x * x;
    CHECK(std::sqrt(norm) < 1e-3);
  }

  TEST_CASE("running statistics follow momentum 0.9 with unbiased variance") {
    auto p = random_params(2, 4, 23);
    const auto before = p;
    const auto b = random_batch(2, {8, 8, 8}, 24);
    const auto f = forward(p, b, Mode::Train, nullptr, 0.0);
    update_running_stats(p, *f.cache);
    // Recompute the stem output's batch statistics independently.
    std::vector<Tensor> stem;
    for (const auto& t : as_tensors(b)) stem.push_back(naive_conv(t, p.stem));
    const std::size_t S = voxel_count(stem[0].d);
    const double M = double(2 * S);
    for (std::size_t c = 0; c < 2; ++c) {
      double s = 0, q = 0;
      for (const auto& t : stem)
        for (std::size_t i = 0; i < S; ++i) s += t.v[c * S + i];
      const double mean = s / M;
      for (const auto& t : stem)
        for (std::size_t i = 0; i < S; ++i) q += (t.v[c * S + i] - mean) * (t.v[c * S + i] - mean);
      CHECK(p.scale1.bn.running_mean[c] == doctest::Approx(0.9 * before.scale1.bn.running_mean[c] + 0.1 * mean));
      CHECK(p.scale1.bn.running_var[c] == doctest::Approx(0.9 * before.scale1.bn.running_var[c] + 0.1 * q / (M - 1)));
    }
    // Forward alone never touches running statistics.
    auto q = before;
    (void)forward(q, b, Mode::Train, nullptr, 0.0);
    CHECK(q.scale1.bn.running_mean == before.scale1.bn.running_mean);
  }

  TEST_CASE("sgd_step updates learnables only") {
    auto p = random_params(2, 4, 25);
    const auto b = random_batch(2, {8, 8, 8}, 26);
    const std::vector<int> y{1, 0};
    const auto f = forward(p, b, Mode::Train, nullptr, 0.0);
    const auto g = backward(p, *f.cache, y, {1, 1});

    auto same = p;
    sgd_step(same, g, 0.0);
    std::vector<const std::vector<double>*> after, before;
    for_each_tensor(same, [&](const std::string&, const std::vector<double>& v, bool) { after.push_back(&v); });
    for_each_tensor(p, [&](const std::string&, const std::vector<double>& v, bool) { before.push_back(&v); });
    for (std::size_t t = 0; t < after.size(); ++t)
      CHECK(std::memcmp(after[t]->data(), before[t]->data(), after[t]->size() * sizeof(double)) == 0);

    auto once = p, twice = p;
    sgd_step(once, g, 0.3);
    sgd_step(twice, g, 0.1);
    sgd_step(twice, g, 0.2);
    CHECK(once.stem.weight[0] == doctest::Approx(twice.stem.weight[0]));
    CHECK(once.head.bias[0] == doctest::Approx(p.head.bias[0] - 0.3 * g.head.bias[0]));
    CHECK(once.scale1.bn.running_var == p.scale1.bn.running_var);

    auto tiny = p;
    auto tg = g;
    tiny.head.bias[0] = 1.0;
    tg.head.bias[0] = 2.0;
    sgd_step(tiny, tg, 0.1);
    CHECK(tiny.head.bias[0] == doctest::Approx(0.8));
  }

  TEST_CASE("learning-rate schedule") {
    TrainConfig c;
    CHECK(lr_schedule(c, 0) == 0.01);
    CHECK(lr_schedule(c, 100) == doctest::Approx(0.009));
    CHECK(lr_schedule(c, 250) == doctest::Approx(0.0076886).epsilon(1e-5));
  }

  TEST_CASE("inverse-frequency class weights") {
    const auto even = inverse_frequency_weights(30, 30);
    CHECK(even.pos == 1.0);
    CHECK(even.neg == 1.0);
    const auto mos = inverse_frequency_weights(856, 254);
    CHECK(mos.pos == doctest::Approx(0.6483).epsilon(1e-4));
    CHECK(mos.neg == doctest::Approx(2.1850).epsilon(1e-4));
  }

  TEST_CASE("checkpoints round-trip") {
    TempDir dir("ckpt");
    const auto p = convert_params<float>(random_params(3, 5, 27));
    write_checkpoint(p, {{8, 16, 16}, 7, 0.75}, dir / "m.ckpt");
    CheckpointInfo info;
    const auto q = read_checkpoint(dir / "m.ckpt", &info);
    CHECK(info.patch == Dims{8, 16, 16});
    CHECK(info.epoch == 7);
    CHECK(info.val_auc == 0.75);
    CHECK(q.c1 == 3);
    CHECK(q.c2 == 5);
    std::vector<std::vector<float>> a, b;
    for_each_tensor(p, [&](const std::string&, const std::vector<float>& v, bool) { a.push_back(v); });
    for_each_tensor(q, [&](const std::string&, const std::vector<float>& v, bool) { b.push_back(v); });
    CHECK(a == b);

    std::ofstream(dir / "bad.ckpt") << "not a checkpoint";
    try {
      read_checkpoint(dir / "bad.ckpt");
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Io);
    }
  }

  TEST_CASE("training loss falls over the first epochs on a separable set") {
    // Dense high-contrast speckle for positives, none for negatives.
    Manifest m;
    std::map<std::string, Volume3D> vols;
    Rng rng(28);
    for (int i = 0; i < 40; ++i) {
      const bool pos = i % 2;
      const std::string id = std::string(pos ? "pos-" : "neg-") + std::to_string(i) + "@57";
      std::vector<float> v(8 * 16 * 16);
      for (auto& x : v) x = static_cast<float>(0.1 + (pos && uniform01(rng) < 0.2 ? 0.6 : 0.0));
      vols.emplace(id, Volume3D({8, 16, 16}, {5, 2, 2}, v, Domain::Unit));
      m.cases.push_back({id, pos ? Label::Positive : Label::Negative, 57.0, pos ? 0.2 : 0.0, id + ".vvol",
                         i < 30 ? Split::Train : Split::Val});
    }
    TrainConfig cfg;
    cfg.epochs = 5;
    const auto r = train(m, cfg, [&](const CaseRecord& c) { return vols.at(c.case_id); });
    REQUIRE(r.history.size() == 5);
    CHECK(r.history.back().loss < r.history.front().loss);
    for (const auto& e : r.history) CHECK(std::isfinite(e.loss));
    CHECK(r.best_val_auc == 1.0);

    const auto again = train(m, cfg, [&](const CaseRecord& c) { return vols.at(c.case_id); });
    for (std::size_t i = 0; i < 5; ++i) CHECK(again.history[i].loss == r.history[i].loss);
  }

  TEST_CASE("training refuses a single-class split") {
    Manifest m;
    for (int i = 0; i < 4; ++i)
      m.cases.push_back({"pos-" + std::to_string(i) + "@57", Label::Positive, 57.0, 0.1, "x", i < 2 ? Split::Train : Split::Val});
    try {
      train(m, TrainConfig{}, [](const CaseRecord&) { return Volume3D::filled({8, 8, 8}, {1, 1, 1}, 0.f, Domain::Unit); });
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Degenerate);
    }
  }
}
