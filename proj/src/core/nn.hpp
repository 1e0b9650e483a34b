#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "core/common.hpp"
#include "core/rng.hpp"

namespace ps::nn {

template <class T>
struct TensorT {
  std::vector<uint32_t> shape;
  std::vector<T> data;

  TensorT() = default;
  explicit TensorT(std::vector<uint32_t> s) : shape(std::move(s)) {
    data.assign(element_count(shape), T(0));
  }

  static size_t element_count(const std::vector<uint32_t>& s) {
    size_t n = 1;
    for (uint32_t d : s) n *= d;
    return n;
  }
  size_t size() const { return data.size(); }
};

using Tensor = TensorT<float>;

enum class Activation : uint8_t { Identity = 0, Relu = 1 };
enum class DuelCombine : uint8_t { RawSum = 0, MeanCentered = 1 };

// How the 4-frame history of Px*Py*Pz grids maps onto the (C, D, H, W) input:
// Channels folds the slab axis into channels (C = 4*Pz, D = 1); Depth keeps
// it spatial (C = 4, D = Pz). Both share one memory layout.
enum class StackMode : uint8_t { Channels = 0, Depth = 1 };

struct ConvLayer {
  uint32_t filters = 0;
  std::array<uint32_t, 3> kernel{1, 3, 3};   // kd, kh, kw
  std::array<uint32_t, 3> stride{1, 1, 1};
  Activation act = Activation::Relu;
};

struct DenseLayer {
  uint32_t units = 0;
  Activation act = Activation::Relu;
};

struct LayerSpec {
  enum class Kind : uint8_t { Conv = 0, Flatten = 1, Dense = 2 } kind;
  ConvLayer conv{};
  DenseLayer dense{};

  static LayerSpec make_conv(uint32_t filters, std::array<uint32_t, 3> kernel,
                             std::array<uint32_t, 3> stride, Activation act) {
    return {Kind::Conv, {filters, kernel, stride, act}, {}};
  }
  static LayerSpec make_flatten() { return {Kind::Flatten, {}, {}}; }
  static LayerSpec make_dense(uint32_t units, Activation act) {
    return {Kind::Dense, {}, {units, act}};
  }
};

struct HeadSpec {
  bool dueling = false;
  DuelCombine combine = DuelCombine::MeanCentered;
  uint32_t actions = 8;
};

struct Architecture {
  std::array<uint32_t, 4> input{};  // C, D, H, W
  StackMode stack = StackMode::Channels;
  std::vector<LayerSpec> layers;
  HeadSpec head;

  std::string to_json_string() const;
  static Architecture from_json_string(const std::string& text);
  bool operator==(const Architecture&) const;

  // The default Q-network over a (Px, Py, Pz) plane grid with a 4-frame
  // history: four conv stages (32, 32, 64, 64 filters, 3x3 in-plane kernels,
  // stride 2 on the first two), dense 256 and 128, then the head.
  static Architecture default_for_grid(const std::array<uint32_t, 3>& grid_size,
                                       bool dueling,
                                       DuelCombine combine = DuelCombine::MeanCentered,
                                       StackMode stack = StackMode::Channels);
};

// Q(s, a) = A(s, a) + V(s), optionally with the advantage mean subtracted so
// the split is identifiable. V is [B, 1], A is [B, actions].
template <class T>
TensorT<T> dueling_combine(const TensorT<T>& v, const TensorT<T>& a,
                           DuelCombine mode);

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Feed-forward Q-network with explicit analytic backprop and Adam state.
// Copyable: a copy is a fully independent parameter set (the target-network
// clone). Scalar type T is float in production; tests instantiate double to
// compare gradients against central finite differences.
template <class T>
class NetworkT {
public:
  NetworkT(Architecture arch, Rng& init_rng);

  // batch shape [B, C, D, H, W] -> Q [B, actions].
  TensorT<T> forward(const TensorT<T>& batch) const;

  struct Cache {
    std::vector<TensorT<T>> acts;  // acts[0] = input, then per-stage outputs
  };
  TensorT<T> forward(const TensorT<T>& batch, Cache& cache) const;

  // Gradients of a scalar loss with upstream dL/dQ, aligned with params().
  std::vector<TensorT<T>> backward(const Cache& cache,
                                   const TensorT<T>& q_grad) const;

  void adam_step(const std::vector<TensorT<T>>& grads, const AdamConfig& cfg);

  const Architecture& arch() const { return arch_; }
  size_t param_count() const;
  uint64_t step_count() const { return step_count_; }

  const std::vector<TensorT<T>>& params() const { return params_; }
  std::vector<TensorT<T>>& params() { return params_; }
  const std::vector<TensorT<T>>& adam_m() const { return adam_m_; }
  const std::vector<TensorT<T>>& adam_v() const { return adam_v_; }
  std::vector<TensorT<T>>& adam_m() { return adam_m_; }
  std::vector<TensorT<T>>& adam_v() { return adam_v_; }
  void set_step_count(uint64_t t) { step_count_ = t; }

private:
  struct Stage {
    LayerSpec spec;
    std::array<uint32_t, 4> in_shape, out_shape;  // C, D, H, W (flat: C,1,1,1)
    size_t first_param = 0;  // index of this stage's weight tensor
  };

  void build_stages();
  void init_params(Rng& rng);

  Architecture arch_;
  std::vector<Stage> stages_;
  size_t head_first_param_ = 0;
  uint32_t head_in_features_ = 0;
  std::vector<TensorT<T>> params_;
  std::vector<TensorT<T>> adam_m_, adam_v_;
  uint64_t step_count_ = 0;
};

using Network = NetworkT<float>;

// Checkpoint: magic "PQN1", length-prefixed architecture JSON, all parameter
// tensors (rank u32, dims u32..., payload f32), Adam first and second moments
// in the same layout, then the u64 step counter. Little-endian throughout.
void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace ps::nn
