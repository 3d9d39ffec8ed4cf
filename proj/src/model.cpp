#include "vitbench/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>

#include <json.hpp>

#include "vitbench/error.hpp"

namespace vitbench {

namespace {

constexpr std::size_t kTaps = 27;

Dims conv_out_dims(const Dims& in, const Stride& s) {
  Dims out{};
  for (int a = 0; a < 3; ++a) out[a] = (in[a] - 1) / s[a] + 1;
  return out;
}

template <typename T>
ConvParams<T> make_conv(std::size_t cin, std::size_t cout, Stride stride) {
  return {cin, cout, stride, std::vector<T>(cout * cin * kTaps, T(0)), std::vector<T>(cout, T(0))};
}

template <typename T>
BatchNormParams<T> make_bn(std::size_t c) {
  return {std::vector<T>(c, T(1)), std::vector<T>(c, T(0)), std::vector<T>(c, T(0)), std::vector<T>(c, T(1)),
          kBnMomentum, kBnEps};
}

template <typename T>
void check_finite(const std::vector<T>& v, const char* layer) {
  for (const T x : v)
    if (!std::isfinite(x)) fail(ErrorKind::Numeric, std::string("non-finite activation in layer ") + layer);
}

// Output positions [lo, hi) along x whose input tap ox*s + k - 1 is in range.
struct Range {
  std::size_t lo, hi;
};

Range valid_range(std::size_t k, std::size_t stride, std::size_t in, std::size_t out) {
  std::size_t lo = 0;
  while (lo < out && static_cast<std::ptrdiff_t>(lo * stride + k) - 1 < 0) ++lo;
  std::size_t hi = out;
  while (hi > lo && (hi - 1) * stride + k - 1 >= in) --hi;
  return {lo, hi};
}

template <typename T>
Activation<T> conv_forward(const ConvParams<T>& p, const Activation<T>& in) {
  const Dims od = conv_out_dims(in.dims, p.stride);
  Activation<T> out{in.n, p.cout, od, std::vector<T>(in.n * p.cout * voxel_count(od))};
  const auto [D, H, W] = in.dims;
  const auto [OD, OH, OW] = od;
  const auto [s0, s1, s2] = p.stride;
  const std::size_t isp = in.spatial(), osp = voxel_count(od);
  std::array<Range, 3> xr{valid_range(0, s2, W, OW), valid_range(1, s2, W, OW), valid_range(2, s2, W, OW)};

  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t co = 0; co < p.cout; ++co) {
      T* o = out.data.data() + (n * p.cout + co) * osp;
      std::fill(o, o + osp, p.bias[co]);
      for (std::size_t ci = 0; ci < p.cin; ++ci) {
        const T* x = in.data.data() + (n * p.cin + ci) * isp;
        const T* w = p.weight.data() + (co * p.cin + ci) * kTaps;
        for (std::size_t kz = 0; kz < 3; ++kz)
          for (std::size_t oz = 0; oz < OD; ++oz) {
            const auto iz = static_cast<std::ptrdiff_t>(oz * s0 + kz) - 1;
            if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(D)) continue;
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t oy = 0; oy < OH; ++oy) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * s1 + ky) - 1;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                T* orow = o + (oz * OH + oy) * OW;
                const T* xrow = x + (static_cast<std::size_t>(iz) * H + static_cast<std::size_t>(iy)) * W;
                for (std::size_t kx = 0; kx < 3; ++kx) {
                  const T wv = w[(kz * 3 + ky) * 3 + kx];
                  if (s2 == 1) {
                    for (std::size_t ox = xr[kx].lo; ox < xr[kx].hi; ++ox) orow[ox] += wv * xrow[ox + kx - 1];
                  } else {
                    for (std::size_t ox = xr[kx].lo; ox < xr[kx].hi; ++ox) orow[ox] += wv * xrow[ox * s2 + kx - 1];
                  }
                }
              }
          }
      }
    }
  return out;
}

// Accumulates weight/bias gradients into g and, if grad_in is non-null, the
// input gradient.
template <typename T>
void conv_backward(const ConvParams<T>& p, const Activation<T>& in, const Activation<T>& dout, ConvParams<T>& g,
                   Activation<T>* grad_in) {
  const auto [D, H, W] = in.dims;
  const auto [OD, OH, OW] = dout.dims;
  const auto [s0, s1, s2] = p.stride;
  const std::size_t isp = in.spatial(), osp = dout.spatial();
  std::array<Range, 3> xr{valid_range(0, s2, W, OW), valid_range(1, s2, W, OW), valid_range(2, s2, W, OW)};
  if (grad_in) *grad_in = Activation<T>{in.n, in.c, in.dims, std::vector<T>(in.data.size(), T(0))};

  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t co = 0; co < p.cout; ++co) {
      const T* go = dout.data.data() + (n * p.cout + co) * osp;
      double bsum = 0.0;
      for (std::size_t i = 0; i < osp; ++i) bsum += go[i];
      g.bias[co] += static_cast<T>(bsum);
      for (std::size_t ci = 0; ci < p.cin; ++ci) {
        const T* x = in.data.data() + (n * p.cin + ci) * isp;
        T* gx = grad_in ? grad_in->data.data() + (n * p.cin + ci) * isp : nullptr;
        const T* w = p.weight.data() + (co * p.cin + ci) * kTaps;
        T* gw = g.weight.data() + (co * p.cin + ci) * kTaps;
        for (std::size_t kz = 0; kz < 3; ++kz)
          for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const std::size_t k = (kz * 3 + ky) * 3 + kx;
              const T wv = w[k];
              double acc = 0.0;
              for (std::size_t oz = 0; oz < OD; ++oz) {
                const auto iz = static_cast<std::ptrdiff_t>(oz * s0 + kz) - 1;
                if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(D)) continue;
                for (std::size_t oy = 0; oy < OH; ++oy) {
                  const auto iy = static_cast<std::ptrdiff_t>(oy * s1 + ky) - 1;
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                  const T* grow = go + (oz * OH + oy) * OW;
                  const std::size_t row = (static_cast<std::size_t>(iz) * H + static_cast<std::size_t>(iy)) * W;
                  const T* xrow = x + row;
                  T racc = T(0);
                  for (std::size_t ox = xr[kx].lo; ox < xr[kx].hi; ++ox) racc += grow[ox] * xrow[ox * s2 + kx - 1];
                  acc += racc;
                  if (gx) {
                    T* grow_in = gx + row;
                    for (std::size_t ox = xr[kx].lo; ox < xr[kx].hi; ++ox) grow_in[ox * s2 + kx - 1] += wv * grow[ox];
                  }
                }
              }
              gw[k] += static_cast<T>(acc);
            }
      }
    }
}

template <typename T>
Activation<T> bn_forward(const BatchNormParams<T>& p, const Activation<T>& x, Mode mode, BatchNormCache<T>* cache) {
  Activation<T> y{x.n, x.c, x.dims, std::vector<T>(x.data.size())};
  const std::size_t S = x.spatial();
  const double M = static_cast<double>(x.n * S);
  if (cache) {
    cache->xhat.resize(x.data.size());
    cache->mean.assign(x.c, 0.0);
    cache->var.assign(x.c, 0.0);
    cache->inv_std.assign(x.c, 0.0);
  }
  for (std::size_t c = 0; c < x.c; ++c) {
    double mean = 0.0, var = 0.0;
    if (mode == Mode::Train) {
      for (std::size_t n = 0; n < x.n; ++n) {
        const T* src = x.data.data() + (n * x.c + c) * S;
        for (std::size_t s = 0; s < S; ++s) mean += src[s];
      }
      mean /= M;
      for (std::size_t n = 0; n < x.n; ++n) {
        const T* src = x.data.data() + (n * x.c + c) * S;
        for (std::size_t s = 0; s < S; ++s) {
          const double d = src[s] - mean;
          var += d * d;
        }
      }
      var /= M;
    } else {
      mean = p.running_mean[c];
      var = p.running_var[c];
    }
    const double inv_std = 1.0 / std::sqrt(var + p.eps);
    const T g = p.gamma[c], b = p.beta[c];
    for (std::size_t n = 0; n < x.n; ++n) {
      const std::size_t base = (n * x.c + c) * S;
      for (std::size_t s = 0; s < S; ++s) {
        const T xh = static_cast<T>((x.data[base + s] - mean) * inv_std);
        if (cache) cache->xhat[base + s] = xh;
        y.data[base + s] = g * xh + b;
      }
    }
    if (cache) {
      cache->mean[c] = mean;
      cache->var[c] = var;
      cache->inv_std[c] = inv_std;
    }
  }
  return y;
}

template <typename T>
Activation<T> bn_backward(const BatchNormParams<T>& p, const BatchNormCache<T>& cache, const Activation<T>& dy,
                          BatchNormParams<T>& g) {
  Activation<T> dx{dy.n, dy.c, dy.dims, std::vector<T>(dy.data.size())};
  const std::size_t S = dy.spatial();
  const double M = static_cast<double>(dy.n * S);
  for (std::size_t c = 0; c < dy.c; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < dy.n; ++n) {
      const std::size_t base = (n * dy.c + c) * S;
      for (std::size_t s = 0; s < S; ++s) {
        sum_dy += dy.data[base + s];
        sum_dy_xhat += static_cast<double>(dy.data[base + s]) * cache.xhat[base + s];
      }
    }
    g.gamma[c] += static_cast<T>(sum_dy_xhat);
    g.beta[c] += static_cast<T>(sum_dy);
    const double k = static_cast<double>(p.gamma[c]) * cache.inv_std[c] / M;
    for (std::size_t n = 0; n < dy.n; ++n) {
      const std::size_t base = (n * dy.c + c) * S;
      for (std::size_t s = 0; s < S; ++s)
        dx.data[base + s] =
            static_cast<T>(k * (M * dy.data[base + s] - sum_dy - static_cast<double>(cache.xhat[base + s]) * sum_dy_xhat));
    }
  }
  return dx;
}

template <typename T>
void relu_inplace(Activation<T>& a) {
  for (auto& v : a.data) v = v > T(0) ? v : T(0);
}

// Zeroes gradient entries where the forward ReLU output was not positive.
template <typename T>
void relu_backward_inplace(Activation<T>& grad, const Activation<T>& relu_out) {
  for (std::size_t i = 0; i < grad.data.size(); ++i)
    if (!(relu_out.data[i] > T(0))) grad.data[i] = T(0);
}

template <typename T>
void add_inplace(Activation<T>& a, const Activation<T>& b) {
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

template <typename T>
void check_conv(const ConvParams<T>& c, std::size_t cin, std::size_t cout, const Stride& stride, const char* name) {
  require(c.cin == cin && c.cout == cout && c.stride == stride && c.weight.size() == cin * cout * kTaps &&
              c.bias.size() == cout,
          std::string("inconsistent shape for ") + name);
}

template <typename T>
void check_bn(const BatchNormParams<T>& b, std::size_t c, const char* name) {
  require(b.gamma.size() == c && b.beta.size() == c && b.running_mean.size() == c && b.running_var.size() == c,
          std::string("inconsistent shape for ") + name);
  for (const T v : b.running_var) require(v > T(0), std::string("non-positive running variance in ") + name);
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
void ModelParamsT<T>::validate() const {
  require(c1 > 0 && c2 > 0, "channel counts must be positive");
  check_conv(stem, 1, c1, kStemStride, "stem");
  check_bn(scale1.bn, c1, "scale1.bn");
  check_conv(scale1.conv, c1, c1, Stride{1, 1, 1}, "scale1.conv");
  check_conv(down, c1, c2, kDownStride, "down");
  check_bn(scale2.bn, c2, "scale2.bn");
  check_conv(scale2.conv, c2, c2, Stride{1, 1, 1}, "scale2.conv");
  check_bn(head.bn, c2, "head.bn");
  require(head.weight.size() == c2 && head.bias.size() == 1, "inconsistent shape for head");
  for_each_tensor(*this, [](const std::string& name, const std::vector<T>& v, bool) {
    for (const T x : v) require(std::isfinite(x), "non-finite value in " + name);
  });
}

template <typename T>
ModelParamsT<T> init_params(std::size_t c1, std::size_t c2, Rng& rng) {
  require(c1 > 0 && c2 > 0, "channel counts must be positive");
  ModelParamsT<T> p;
  p.c1 = c1;
  p.c2 = c2;
  p.stem = make_conv<T>(1, c1, kStemStride);
  p.scale1 = {make_bn<T>(c1), make_conv<T>(c1, c1, Stride{1, 1, 1})};
  p.down = make_conv<T>(c1, c2, kDownStride);
  p.scale2 = {make_bn<T>(c2), make_conv<T>(c2, c2, Stride{1, 1, 1})};
  p.head = {make_bn<T>(c2), std::vector<T>(c2, T(0)), std::vector<T>(1, T(0))};
  for (ConvParams<T>* c : {&p.stem, &p.scale1.conv, &p.down, &p.scale2.conv}) {
    const double bound = std::sqrt(6.0 / static_cast<double>(c->cin * kTaps));
    for (auto& w : c->weight) w = static_cast<T>(uniform(rng, -bound, bound));
  }
  return p;
}

template <typename To, typename From>
ModelParamsT<To> convert_params(const ModelParamsT<From>& p) {
  auto cv = [](const std::vector<From>& v) { return std::vector<To>(v.begin(), v.end()); };
  auto conv = [&](const ConvParams<From>& c) { return ConvParams<To>{c.cin, c.cout, c.stride, cv(c.weight), cv(c.bias)}; };
  auto bn = [&](const BatchNormParams<From>& b) {
    return BatchNormParams<To>{cv(b.gamma), cv(b.beta), cv(b.running_mean), cv(b.running_var), b.momentum, b.eps};
  };
  ModelParamsT<To> out;
  out.c1 = p.c1;
  out.c2 = p.c2;
  out.stem = conv(p.stem);
  out.scale1 = {bn(p.scale1.bn), conv(p.scale1.conv)};
  out.down = conv(p.down);
  out.scale2 = {bn(p.scale2.bn), conv(p.scale2.conv)};
  out.head = {bn(p.head.bn), cv(p.head.weight), cv(p.head.bias)};
  return out;
}

template <typename T>
Activation<T> make_batch(std::span<const Volume3D> patches) {
  require(!patches.empty(), "empty batch");
  const Dims dims = patches.front().dims();
  Activation<T> a{patches.size(), 1, dims, {}};
  a.data.reserve(patches.size() * voxel_count(dims));
  for (const auto& v : patches) {
    require(v.dims() == dims, "patches in a batch must share dims");
    require(v.domain() == Domain::Unit, "network input must be unit-domain");
    a.data.insert(a.data.end(), v.voxels().begin(), v.voxels().end());
  }
  return a;
}

template <typename T>
ForwardResult<T> forward(const ModelParamsT<T>& params, const Activation<T>& batch, Mode mode, Rng* rng,
                         double dropout_p) {
  require(batch.n > 0 && batch.c == 1, "forward expects an (n, 1, z, y, x) batch");
  for (auto d : batch.dims) require(d >= 8, "input patch needs >= 8 voxels per axis");
  require(dropout_p >= 0.0 && dropout_p < 1.0, "dropout_p must be in [0, 1)");
  require(mode == Mode::Eval || dropout_p == 0.0 || rng != nullptr, "train-mode dropout needs an rng");
  for (const T v : batch.data) require(v >= T(0) && v <= T(1), "input values must lie in [0, 1]");

  const bool train = mode == Mode::Train;
  ForwardCache<T> c;
  c.stem_out = conv_forward(params.stem, batch);
  check_finite(c.stem_out.data, "stem");

  Activation<T> bn1 = bn_forward(params.scale1.bn, c.stem_out, mode, train ? &c.bn1 : nullptr);
  relu_inplace(bn1);
  c.act1 = std::move(bn1);
  c.block1_out = conv_forward(params.scale1.conv, c.act1);
  add_inplace(c.block1_out, c.stem_out);
  check_finite(c.block1_out.data, "scale1");

  c.down_out = conv_forward(params.down, c.block1_out);
  check_finite(c.down_out.data, "down");

  Activation<T> bn2 = bn_forward(params.scale2.bn, c.down_out, mode, train ? &c.bn2 : nullptr);
  relu_inplace(bn2);
  c.act2 = std::move(bn2);
  c.block2_out = conv_forward(params.scale2.conv, c.act2);
  add_inplace(c.block2_out, c.down_out);
  check_finite(c.block2_out.data, "scale2");

  c.head_act = bn_forward(params.head.bn, c.block2_out, mode, train ? &c.bnh : nullptr);
  relu_inplace(c.head_act);
  check_finite(c.head_act.data, "head.bn");

  const std::size_t N = batch.n, C = params.c2, S = c.head_act.spatial();
  c.pooled.assign(N * C, T(0));
  for (std::size_t i = 0; i < N * C; ++i) {
    double s = 0.0;
    const T* src = c.head_act.data.data() + i * S;
    for (std::size_t k = 0; k < S; ++k) s += src[k];
    c.pooled[i] = static_cast<T>(s / static_cast<double>(S));
  }

  c.dropout_scale.assign(N * C, T(1));
  if (train && dropout_p > 0.0) {
    const T keep = static_cast<T>(1.0 / (1.0 - dropout_p));
    for (auto& d : c.dropout_scale) d = uniform01(*rng) < dropout_p ? T(0) : keep;
  }

  ForwardResult<T> r;
  c.logits.assign(N, T(0));
  r.probs.assign(N, T(0));
  for (std::size_t n = 0; n < N; ++n) {
    double z = params.head.bias[0];
    for (std::size_t ch = 0; ch < C; ++ch)
      z += static_cast<double>(params.head.weight[ch]) * c.pooled[n * C + ch] * c.dropout_scale[n * C + ch];
    c.logits[n] = static_cast<T>(z);
    r.probs[n] = static_cast<T>(1.0 / (1.0 + std::exp(-z)));
  }
  check_finite(c.logits, "head");

  if (train) {
    c.input = batch;
    r.cache = std::move(c);
  }
  return r;
}

template <typename T>
void update_running_stats(ModelParamsT<T>& params, const ForwardCache<T>& cache) {
  auto update = [](BatchNormParams<T>& bn, const BatchNormCache<T>& bc, std::size_t m) {
    const double unbias = m > 1 ? static_cast<double>(m) / static_cast<double>(m - 1) : 1.0;
    for (std::size_t c = 0; c < bn.gamma.size(); ++c) {
      bn.running_mean[c] = static_cast<T>(bn.momentum * bn.running_mean[c] + (1.0 - bn.momentum) * bc.mean[c]);
      bn.running_var[c] = static_cast<T>(bn.momentum * bn.running_var[c] + (1.0 - bn.momentum) * bc.var[c] * unbias);
    }
  };
  update(params.scale1.bn, cache.bn1, cache.stem_out.n * cache.stem_out.spatial());
  update(params.scale2.bn, cache.bn2, cache.down_out.n * cache.down_out.spatial());
  update(params.head.bn, cache.bnh, cache.block2_out.n * cache.block2_out.spatial());
}

// ---------------------------------------------------------------------------

template <typename T>
double wcel(std::span<const T> probs, std::span<const int> labels, ClassWeights w) {
  require(!probs.empty(), "wcel on an empty batch");
  require(probs.size() == labels.size(), "probs and labels differ in length");
  require(w.pos > 0.0 && w.neg > 0.0, "class weights must be > 0");
  double sum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(static_cast<double>(probs[i]), kProbClamp, 1.0 - kProbClamp);
    sum += labels[i] ? w.pos * std::log(p) : w.neg * std::log(1.0 - p);
  }
  return -sum / static_cast<double>(probs.size());
}

template <typename T>
std::vector<T> wcel_logit_grad(std::span<const T> probs, std::span<const int> labels, ClassWeights w) {
  require(!probs.empty(), "wcel on an empty batch");
  require(probs.size() == labels.size(), "probs and labels differ in length");
  const double inv_n = 1.0 / static_cast<double>(probs.size());
  std::vector<T> g(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    // The clamp is flat outside [eps, 1 - eps], so the loss gradient vanishes there.
    if (p < kProbClamp || p > 1.0 - kProbClamp) {
      g[i] = T(0);
      continue;
    }
    g[i] = static_cast<T>((labels[i] ? -(w.pos * (1.0 - p)) : w.neg * p) * inv_n);
  }
  return g;
}

template <typename T>
Gradients<T> backward(const ModelParamsT<T>& params, const ForwardCache<T>& cache, std::span<const int> labels,
                      ClassWeights w) {
  const std::size_t N = cache.logits.size(), C = params.c2;
  require(labels.size() == N && cache.input.n == N, "cache and label batch sizes differ");
  Gradients<T> g = convert_params<T>(params);
  for_each_tensor(g, [](const std::string&, std::vector<T>& v, bool) { std::fill(v.begin(), v.end(), T(0)); });

  std::vector<T> probs(N);
  for (std::size_t n = 0; n < N; ++n) probs[n] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(cache.logits[n]))));
  const std::vector<T> dz = wcel_logit_grad<T>(probs, labels, w);

  // Head affine and pooling.
  const std::size_t S = cache.head_act.spatial();
  Activation<T> d_head{N, C, cache.head_act.dims, std::vector<T>(cache.head_act.data.size())};
  for (std::size_t n = 0; n < N; ++n) {
    g.head.bias[0] += dz[n];
    for (std::size_t ch = 0; ch < C; ++ch) {
      const T scale = cache.dropout_scale[n * C + ch];
      g.head.weight[ch] += dz[n] * cache.pooled[n * C + ch] * scale;
      const T dp = dz[n] * params.head.weight[ch] * scale / static_cast<T>(S);
      std::fill_n(d_head.data.begin() + static_cast<std::ptrdiff_t>((n * C + ch) * S), S, dp);
    }
  }
  relu_backward_inplace(d_head, cache.head_act);
  Activation<T> d_block2 = bn_backward(params.head.bn, cache.bnh, d_head, g.head.bn);

  // scale2: y = x + conv(relu(bn(x)))
  Activation<T> d_act2;
  conv_backward(params.scale2.conv, cache.act2, d_block2, g.scale2.conv, &d_act2);
  relu_backward_inplace(d_act2, cache.act2);
  Activation<T> d_down = bn_backward(params.scale2.bn, cache.bn2, d_act2, g.scale2.bn);
  add_inplace(d_down, d_block2);

  Activation<T> d_block1;
  conv_backward(params.down, cache.block1_out, d_down, g.down, &d_block1);

  Activation<T> d_act1;
  conv_backward(params.scale1.conv, cache.act1, d_block1, g.scale1.conv, &d_act1);
  relu_backward_inplace(d_act1, cache.act1);
  Activation<T> d_stem = bn_backward(params.scale1.bn, cache.bn1, d_act1, g.scale1.bn);
  add_inplace(d_stem, d_block1);

  conv_backward(params.stem, cache.input, d_stem, g.stem, static_cast<Activation<T>*>(nullptr));
  return g;
}

template <typename T>
void sgd_step(ModelParamsT<T>& params, const Gradients<T>& grads, double lr) {
  require(params.c1 == grads.c1 && params.c2 == grads.c2, "gradient shape mismatch");
  std::vector<const std::vector<T>*> gs;
  for_each_tensor(grads, [&](const std::string&, const std::vector<T>& v, bool) { gs.push_back(&v); });
  std::size_t k = 0;
  for_each_tensor(params, [&](const std::string& name, std::vector<T>& v, bool learnable) {
    const auto& gv = *gs[k++];
    require(gv.size() == v.size(), "gradient shape mismatch in " + name);
    if (!learnable || lr == 0.0) return;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(v[i] - lr * gv[i]);
  });
}

void TrainConfig::validate() const {
  require(lr0 > 0.0 && std::isfinite(lr0), "train.lr0 must be > 0");
  require(decay_rate > 0.0 && decay_rate <= 1.0, "train.decay_rate must be in (0, 1]");
  require(decay_steps >= 1.0, "train.decay_steps must be >= 1");
  require(epochs >= 1, "train.epochs must be >= 1");
  require(batch_size >= 1, "train.batch_size must be >= 1");
  require(dropout_p >= 0.0 && dropout_p < 1.0, "train.dropout_p must be in [0, 1)");
  if (class_weights) require(class_weights->pos > 0.0 && class_weights->neg > 0.0, "class weights must be > 0");
  require(c1 > 0 && c2 > 0, "model channel counts must be > 0");
}

double lr_schedule(const TrainConfig& cfg, std::size_t step) {
  return cfg.lr0 * std::pow(cfg.decay_rate, static_cast<double>(step) / cfg.decay_steps);
}

ClassWeights inverse_frequency_weights(std::size_t n_pos, std::size_t n_neg) {
  if (n_pos == 0 || n_neg == 0) fail(ErrorKind::Degenerate, "class weights need both classes present");
  const double n = static_cast<double>(n_pos + n_neg);
  return {n / (2.0 * static_cast<double>(n_pos)), n / (2.0 * static_cast<double>(n_neg))};
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCkptMagic[8] = {'V', 'I', 'T', 'C', 'K', 'P', 'T', '1'};

void put_u32le(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void write_checkpoint(const ModelParams& params, const CheckpointInfo& info, const std::filesystem::path& path) {
  params.validate();
  nlohmann::ordered_json header;
  header["architecture"] = "rcnn3d-2scale";
  header["c1"] = params.c1;
  header["c2"] = params.c2;
  header["patch"] = {info.patch[0], info.patch[1], info.patch[2]};
  header["epoch"] = info.epoch;
  header["val_auc"] = info.val_auc;
  header["bn_momentum"] = params.scale1.bn.momentum;
  header["bn_eps"] = params.scale1.bn.eps;
  auto tensors = nlohmann::ordered_json::array();
  for_each_tensor(params, [&](const std::string& name, const std::vector<float>& v, bool) {
    tensors.push_back({{"name", name}, {"size", v.size()}});
  });
  header["tensors"] = tensors;
  const std::string text = header.dump();

  std::string buf(kCkptMagic, sizeof(kCkptMagic));
  put_u32le(buf, static_cast<std::uint32_t>(text.size()));
  buf += text;
  for_each_tensor(params, [&](const std::string&, const std::vector<float>& v, bool) {
    for (float x : v) put_u32le(buf, std::bit_cast<std::uint32_t>(x));
  });
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) fail(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

ModelParams read_checkpoint(const std::filesystem::path& path, CheckpointInfo* info) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open checkpoint '" + path.string() + "'");
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::string where = " in '" + path.string() + "'";
  if (bytes.size() < 12 || !std::equal(std::begin(kCkptMagic), std::end(kCkptMagic), bytes.begin()))
    fail(ErrorKind::Io, "malformed checkpoint: bad magic" + where);
  const std::uint32_t len = get_u32le(bytes.data() + 8);
  if (bytes.size() - 12 < len) fail(ErrorKind::Io, "malformed checkpoint: truncated header" + where);

  ModelParams params;
  CheckpointInfo ci;
  try {
    const auto header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
    const auto c1 = header.at("c1").get<std::size_t>();
    const auto c2 = header.at("c2").get<std::size_t>();
    require(c1 > 0 && c2 > 0 && c1 < 4096 && c2 < 4096, "invalid channel counts");
    Rng unused(0);
    params = init_params<float>(c1, c2, unused);
    const auto& patch = header.at("patch");
    for (int a = 0; a < 3; ++a) ci.patch[a] = patch.at(a).get<std::size_t>();
    ci.epoch = header.at("epoch").get<std::size_t>();
    ci.val_auc = header.at("val_auc").get<double>();
    const double momentum = header.at("bn_momentum").get<double>();
    const double eps = header.at("bn_eps").get<double>();
    for (auto* bn : {&params.scale1.bn, &params.scale2.bn, &params.head.bn}) {
      bn->momentum = momentum;
      bn->eps = eps;
    }
    const auto& tensors = header.at("tensors");
    std::size_t k = 0;
    for_each_tensor(params, [&](const std::string& name, std::vector<float>& v, bool) {
      const auto& t = tensors.at(k++);
      if (t.at("name").get<std::string>() != name || t.at("size").get<std::size_t>() != v.size())
        throw std::runtime_error("tensor layout mismatch at " + name);
    });
    if (k != tensors.size()) throw std::runtime_error("unexpected extra tensors");
  } catch (const std::exception& e) {
    fail(ErrorKind::Io, std::string("malformed checkpoint header: ") + e.what() + where);
  }

  std::size_t total = 0;
  for_each_tensor(params, [&](const std::string&, const std::vector<float>& v, bool) { total += v.size(); });
  if (bytes.size() - 12 - len != 4 * total) fail(ErrorKind::Io, "checkpoint payload length mismatch" + where);
  const unsigned char* p = bytes.data() + 12 + len;
  for_each_tensor(params, [&](const std::string&, std::vector<float>& v, bool) {
    for (auto& x : v) {
      x = std::bit_cast<float>(get_u32le(p));
      p += 4;
    }
  });
  try {
    params.validate();
  } catch (const Error& e) {
    fail(ErrorKind::Io, std::string("invalid checkpoint: ") + e.what() + where);
  }
  if (info) *info = ci;
  return params;
}

// ---------------------------------------------------------------------------
// Gradient check

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
}

GradcheckReport gradcheck(const GradcheckOptions& opts) {
  require(opts.eps > 0.0 && std::isfinite(opts.eps), "gradcheck eps must be > 0");
  require(opts.batch >= 1, "gradcheck batch must be >= 1");
  Rng rng = make_rng(opts.seed, "gradcheck:init");
  ModelParamsT<double> params = init_params<double>(opts.c1, opts.c2, rng);
  // Randomize everything the default init pins to constants so every path
  // carries gradient.
  for_each_tensor(params, [&](const std::string& name, std::vector<double>& v, bool learnable) {
    if (!learnable) return;
    if (name.ends_with("bn.gamma")) {
      for (auto& x : v) x = uniform(rng, 0.5, 1.5);
    } else if (name == "head.weight") {
      for (auto& x : v) x = uniform(rng, -1.0, 1.0);
    } else if (!name.ends_with(".weight")) {
      for (auto& x : v) x = uniform(rng, -0.2, 0.2);
    }
  });
  if (opts.inject_nonfinite) params.stem.weight[0] = std::numeric_limits<double>::quiet_NaN();

  Activation<double> batch{opts.batch, 1, opts.patch, std::vector<double>(opts.batch * voxel_count(opts.patch))};
  for (auto& x : batch.data) x = uniform01(rng);
  std::vector<int> labels(opts.batch);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>((i + 1) % 2);
  const ClassWeights w{1.3, 0.7};
  const std::uint64_t dropout_seed = derive_seed(opts.seed, "gradcheck:dropout");

  // ReLU on/off pattern of a forward pass. Central differences are only
  // meaningful when neither probe crosses a kink, i.e. leaves it unchanged.
  auto gates = [](const ForwardCache<double>& c) {
    std::vector<bool> g;
    for (const auto* a : {&c.act1, &c.act2, &c.head_act})
      for (double v : a->data) g.push_back(v > 0.0);
    return g;
  };
  auto probe_loss = [&](const ModelParamsT<double>& p, std::vector<bool>* pattern) {
    Rng drop(dropout_seed);
    const auto r = forward(p, batch, Mode::Train, &drop, opts.dropout_p);
    *pattern = gates(*r.cache);
    return wcel<double>(r.probs, labels, w);
  };

  Rng drop(dropout_seed);
  const auto fwd = forward(params, batch, Mode::Train, &drop, opts.dropout_p);
  const std::vector<bool> base_gates = gates(*fwd.cache);
  const Gradients<double> grads = backward(params, *fwd.cache, labels, w);
  std::vector<const std::vector<double>*> gvec;
  for_each_tensor(grads, [&](const std::string&, const std::vector<double>& v, bool) { gvec.push_back(&v); });

  GradcheckReport report;
  ModelParamsT<double> probe = params;
  std::vector<std::vector<double>*> pvec;
  std::vector<std::pair<std::string, bool>> meta;
  for_each_tensor(probe, [&](const std::string& name, std::vector<double>& v, bool learnable) {
    pvec.push_back(&v);
    meta.emplace_back(name, learnable);
  });
  for (std::size_t t = 0; t < pvec.size(); ++t) {
    if (!meta[t].second) continue;
    auto& v = *pvec[t];
    GradcheckGroup group{meta[t].first, 0, 0, 0.0};
    const std::size_t count = opts.max_entries_per_tensor == 0 ? v.size() : std::min(v.size(), opts.max_entries_per_tensor);
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t i = k * v.size() / count;
      const double orig = v[i];
      std::vector<bool> g_up, g_down;
      v[i] = orig + opts.eps;
      const double up = probe_loss(probe, &g_up);
      v[i] = orig - opts.eps;
      const double down = probe_loss(probe, &g_down);
      v[i] = orig;
      if (g_up != base_gates || g_down != base_gates) {
        ++group.kinks;
        continue;
      }
      const double numeric = (up - down) / (2.0 * opts.eps);
      group.max_rel_error = std::max(group.max_rel_error, relative_error((*gvec[t])[i], numeric));
      ++group.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, group.max_rel_error);
    report.checked += group.checked;
    report.kinks += group.kinks;
    report.groups.push_back(std::move(group));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define VITBENCH_INSTANTIATE(T)                                                                                 \
  template struct ModelParamsT<T>;                                                                              \
  template ModelParamsT<T> init_params<T>(std::size_t, std::size_t, Rng&);                                      \
  template Activation<T> make_batch<T>(std::span<const Volume3D>);                                              \
  template ForwardResult<T> forward<T>(const ModelParamsT<T>&, const Activation<T>&, Mode, Rng*, double);       \
  template void update_running_stats<T>(ModelParamsT<T>&, const ForwardCache<T>&);                              \
  template double wcel<T>(std::span<const T>, std::span<const int>, ClassWeights);                              \
  template std::vector<T> wcel_logit_grad<T>(std::span<const T>, std::span<const int>, ClassWeights);           \
  template Gradients<T> backward<T>(const ModelParamsT<T>&, const ForwardCache<T>&, std::span<const int>,       \
                                    ClassWeights);                                                              \
  template void sgd_step<T>(ModelParamsT<T>&, const Gradients<T>&, double);

VITBENCH_INSTANTIATE(float)
VITBENCH_INSTANTIATE(double)
#undef VITBENCH_INSTANTIATE

template ModelParamsT<float> convert_params<float, double>(const ModelParamsT<double>&);
template ModelParamsT<double> convert_params<double, float>(const ModelParamsT<float>&);
template ModelParamsT<float> convert_params<float, float>(const ModelParamsT<float>&);
template ModelParamsT<double> convert_params<double, double>(const ModelParamsT<double>&);

}  // namespace vitbench
