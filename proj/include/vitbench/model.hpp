#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vitbench/rng.hpp"
#include "vitbench/volume.hpp"

namespace vitbench {

using Stride = std::array<std::size_t, 3>;

inline constexpr Stride kStemStride{1, 2, 2};
inline constexpr Stride kDownStride{2, 2, 2};
inline constexpr double kBnMomentum = 0.9;
inline constexpr double kBnEps = 1e-5;
inline constexpr double kProbClamp = 1e-7;

// 3x3x3 convolution with zero padding 1. weight layout: (cout, cin, 3, 3, 3).
template <typename T>
struct ConvParams {
  std::size_t cin = 0;
  std::size_t cout = 0;
  Stride stride{1, 1, 1};
  std::vector<T> weight;
  std::vector<T> bias;
};

template <typename T>
struct BatchNormParams {
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double momentum = kBnMomentum;
  double eps = kBnEps;
};

// Pre-activation residual unit: y = x + conv(relu(bn(x))).
template <typename T>
struct RBlockParams {
  BatchNormParams<T> bn;
  ConvParams<T> conv;
};

template <typename T>
struct HeadParams {
  BatchNormParams<T> bn;
  std::vector<T> weight;  // C2 -> 1
  std::vector<T> bias;    // size 1
};

// stem conv (1 -> c1, stride 1,2,2) -> RBlock(c1) -> down conv (c1 -> c2,
// stride 2,2,2) -> RBlock(c2) -> BN -> ReLU -> GAP -> dropout -> affine -> sigmoid
template <typename T>
struct ModelParamsT {
  std::size_t c1 = 8;
  std::size_t c2 = 16;
  ConvParams<T> stem;
  RBlockParams<T> scale1;
  ConvParams<T> down;
  RBlockParams<T> scale2;
  HeadParams<T> head;

  void validate() const;
};

using ModelParams = ModelParamsT<float>;

// Fan-in scaled uniform conv weights, zero biases, unit BN gammas, and a zero
// head so the untrained model outputs exactly 0.5.
template <typename T>
ModelParamsT<T> init_params(std::size_t c1, std::size_t c2, Rng& rng);

template <typename To, typename From>
ModelParamsT<To> convert_params(const ModelParamsT<From>& p);

// Visits every tensor in checkpoint order. fn(name, std::vector<T>&, learnable).
template <typename T, typename Fn>
void for_each_tensor(ModelParamsT<T>& p, Fn&& fn) {
  auto bn = [&](const std::string& prefix, BatchNormParams<T>& b) {
    fn(prefix + ".bn.gamma", b.gamma, true);
    fn(prefix + ".bn.beta", b.beta, true);
    fn(prefix + ".bn.running_mean", b.running_mean, false);
    fn(prefix + ".bn.running_var", b.running_var, false);
  };
  auto conv = [&](const std::string& prefix, ConvParams<T>& c) {
    fn(prefix + ".weight", c.weight, true);
    fn(prefix + ".bias", c.bias, true);
  };
  conv("stem", p.stem);
  bn("scale1", p.scale1.bn);
  conv("scale1.conv", p.scale1.conv);
  conv("down", p.down);
  bn("scale2", p.scale2.bn);
  conv("scale2.conv", p.scale2.conv);
  bn("head", p.head.bn);
  fn("head.weight", p.head.weight, true);
  fn("head.bias", p.head.bias, true);
}

template <typename T, typename Fn>
void for_each_tensor(const ModelParamsT<T>& p, Fn&& fn) {
  for_each_tensor(const_cast<ModelParamsT<T>&>(p),
                  [&](const std::string& name, std::vector<T>& v, bool learnable) {
                    fn(name, static_cast<const std::vector<T>&>(v), learnable);
                  });
}

// ---------------------------------------------------------------------------
// Activations

// (n, c, z, y, x) dense tensor.
template <typename T>
struct Activation {
  std::size_t n = 0;
  std::size_t c = 0;
  Dims dims{};
  std::vector<T> data;

  std::size_t spatial() const { return voxel_count(dims); }
};

// Stacks unit-domain patches of identical dims into an (n, 1, z, y, x) batch.
template <typename T>
Activation<T> make_batch(std::span<const Volume3D> patches);

enum class Mode { Train, Eval };

template <typename T>
struct BatchNormCache {
  std::vector<T> xhat;
  std::vector<double> mean;
  std::vector<double> var;  // biased batch variance
  std::vector<double> inv_std;
};

template <typename T>
struct ForwardCache {
  Activation<T> input;
  Activation<T> stem_out;
  BatchNormCache<T> bn1;
  Activation<T> act1;  // relu(bn1(stem_out))
  Activation<T> block1_out;
  Activation<T> down_out;
  BatchNormCache<T> bn2;
  Activation<T> act2;
  Activation<T> block2_out;
  BatchNormCache<T> bnh;
  Activation<T> head_act;       // relu(bnh(block2_out))
  std::vector<T> pooled;        // (n, c2)
  std::vector<T> dropout_scale; // (n, c2): 0 or 1/(1-p)
  std::vector<T> logits;        // (n)
};

template <typename T>
struct ForwardResult {
  std::vector<T> probs;
  std::optional<ForwardCache<T>> cache;  // train mode only
};

// Train mode uses batch statistics and draws a dropout mask from `rng`;
// eval mode uses running statistics and no dropout. Running statistics are
// folded in separately by update_running_stats so that this stays a pure
// function of its arguments. Throws Error(Numeric) naming the first layer
// that produces a non-finite value.
template <typename T>
ForwardResult<T> forward(const ModelParamsT<T>& params, const Activation<T>& batch, Mode mode, Rng* rng = nullptr,
                         double dropout_p = 0.5);

template <typename T>
void update_running_stats(ModelParamsT<T>& params, const ForwardCache<T>& cache);

// ---------------------------------------------------------------------------
// Loss, gradients, optimizer

struct ClassWeights {
  double pos = 1.0;
  double neg = 1.0;
};

// -(1/N) sum [w_pos y log p + w_neg (1-y) log(1-p)], p clamped to [1e-7, 1-1e-7].
template <typename T>
double wcel(std::span<const T> probs, std::span<const int> labels, ClassWeights w);

// d wcel / d logit for each sample.
template <typename T>
std::vector<T> wcel_logit_grad(std::span<const T> probs, std::span<const int> labels, ClassWeights w);

// Gradients share the parameter layout; running statistics stay zero.
template <typename T>
using Gradients = ModelParamsT<T>;

template <typename T>
Gradients<T> backward(const ModelParamsT<T>& params, const ForwardCache<T>& cache, std::span<const int> labels,
                      ClassWeights w);

template <typename T>
void sgd_step(ModelParamsT<T>& params, const Gradients<T>& grads, double lr);

struct TrainConfig {
  double lr0 = 0.01;
  double decay_rate = 0.9;
  double decay_steps = 100.0;
  std::size_t epochs = 20;
  std::size_t batch_size = 4;
  double dropout_p = 0.5;
  std::optional<ClassWeights> class_weights;  // default: inverse frequency on the train split
  std::size_t c1 = 8;
  std::size_t c2 = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

// lr0 * decay_rate^(step / decay_steps), continuous exponent.
double lr_schedule(const TrainConfig& cfg, std::size_t step);

// w_pos = N / (2 N_pos), w_neg = N / (2 N_neg).
ClassWeights inverse_frequency_weights(std::size_t n_pos, std::size_t n_neg);

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointInfo {
  Dims patch{};
  std::size_t epoch = 0;
  double val_auc = 0.0;
};

// "VITCKPT1", u32 LE header length, JSON header, then float32 LE tensors in
// for_each_tensor order.
void write_checkpoint(const ModelParams& params, const CheckpointInfo& info, const std::filesystem::path& path);
ModelParams read_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

// ---------------------------------------------------------------------------
// Gradient check

struct GradcheckOptions {
  std::size_t c1 = 2;
  std::size_t c2 = 4;
  Dims patch{8, 16, 16};
  std::size_t batch = 3;
  double eps = 1e-5;
  double dropout_p = 0.5;
  std::size_t max_entries_per_tensor = 64;  // 0: every entry
  std::uint64_t seed = 0;
  bool inject_nonfinite = false;
};

struct GradcheckGroup {
  std::string name;
  std::size_t checked = 0;
  std::size_t kinks = 0;  // probes that flipped a ReLU gate; excluded from the error
  double max_rel_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckGroup> groups;
  std::size_t checked = 0;
  std::size_t kinks = 0;
  double max_rel_error = 0.0;
};

// |a - n| / max(|a| + |n|, 1e-6), analytic vs central differences, 64-bit.
double relative_error(double analytic, double numeric);

GradcheckReport gradcheck(const GradcheckOptions& opts);

}  // namespace vitbench
