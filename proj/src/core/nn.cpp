#include "core/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "core/threads.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace ps::nn {

namespace {

using nlohmann::json;

const char* activation_name(Activation a) {
  return a == Activation::Relu ? "relu" : "identity";
}

Activation activation_from(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "identity") return Activation::Identity;
  raise(ErrorCode::Format, "unknown activation: " + s);
}

const char* combine_name(DuelCombine c) {
  return c == DuelCombine::RawSum ? "raw_sum" : "mean_centered";
}

DuelCombine combine_from(const std::string& s) {
  if (s == "raw_sum") return DuelCombine::RawSum;
  if (s == "mean_centered") return DuelCombine::MeanCentered;
  raise(ErrorCode::Format, "unknown dueling combine mode: " + s);
}

const char* stack_name(StackMode m) {
  return m == StackMode::Channels ? "channels" : "depth";
}

StackMode stack_from(const std::string& s) {
  if (s == "channels") return StackMode::Channels;
  if (s == "depth") return StackMode::Depth;
  raise(ErrorCode::Format, "unknown stack mode: " + s);
}

void reject_unknown_keys(const json& j, std::initializer_list<const char*> known,
                         const char* where) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known)
      if (item.key() == k) ok = true;
    if (!ok)
      raise(ErrorCode::Format, std::string("unknown key \"") + item.key() +
                                   "\" in " + where);
  }
}

template <class T>
T apply_act(Activation act, T z) {
  return act == Activation::Relu ? (z > T(0) ? z : T(0)) : z;
}

// Unit-stride dot product with four independent 64-bit accumulators; the
// fixed summation order keeps results identical across runs and thread
// counts while breaking the FMA latency chain.
template <class T>
double dot_accumulate(const T* a, const T* b, size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += double(a[i]) * double(b[i]);
    s1 += double(a[i + 1]) * double(b[i + 1]);
    s2 += double(a[i + 2]) * double(b[i + 2]);
    s3 += double(a[i + 3]) * double(b[i + 3]);
  }
  for (; i < n; ++i) s0 += double(a[i]) * double(b[i]);
  return (s0 + s1) + (s2 + s3);
}

template <class T>
void check_finite(const TensorT<T>& t, const char* where) {
  for (T v : t.data)
    if (!std::isfinite(double(v)))
      raise(ErrorCode::Numeric,
            std::string("non-finite value produced by ") + where);
}

struct ConvDims {
  uint32_t B, C, D, H, W;       // input
  uint32_t F, OD, OH, OW;       // output
  std::array<uint32_t, 3> k, s, p;
};

ConvDims conv_dims(const std::array<uint32_t, 4>& in, uint32_t batch,
                   const ConvLayer& layer) {
  ConvDims d{};
  d.B = batch;
  d.C = in[0];
  d.D = in[1];
  d.H = in[2];
  d.W = in[3];
  d.F = layer.filters;
  d.k = layer.kernel;
  d.s = layer.stride;
  for (int i = 0; i < 3; ++i) d.p[i] = layer.kernel[i] / 2;
  const uint32_t ins[3] = {d.D, d.H, d.W};
  uint32_t outs[3];
  for (int i = 0; i < 3; ++i) {
    const int64_t num =
        int64_t(ins[i]) + 2 * int64_t(d.p[i]) - int64_t(d.k[i]);
    if (num < 0 || d.s[i] == 0)
      raise(ErrorCode::Contract, "conv kernel larger than padded input");
    outs[i] = uint32_t(num / d.s[i]) + 1;
  }
  d.OD = outs[0];
  d.OH = outs[1];
  d.OW = outs[2];
  return d;
}

// Valid kernel index range per output position, so the hot loops carry no
// bounds checks.
struct KernelRange {
  int64_t base;     // input start index (may be negative before clamping)
  uint32_t lo, hi;  // kernel indices with in-bounds input
};

std::vector<KernelRange> kernel_ranges(uint32_t out, uint32_t in, uint32_t k,
                                       uint32_t stride, uint32_t pad) {
  std::vector<KernelRange> r(out);
  for (uint32_t o = 0; o < out; ++o) {
    const int64_t base = int64_t(o) * stride - pad;
    uint32_t lo = 0, hi = k;
    if (base < 0) lo = uint32_t(-base);
    if (base + k > in) hi = uint32_t(int64_t(in) - base);
    r[o] = {base, lo, hi < lo ? lo : hi};
  }
  return r;
}

// The conv stages run as im2col + GEMM-style loops: gathering each output
// position's receptive field into one contiguous row turns every reduction
// into a long unit-stride dot product. Padded-out entries stay zero.
//
// col layout: [out position][fan-in], fan-in index ((c*kd + kz)*kh + ky)*kw
// + kx, matching the flattened weight tensor.
template <class T>
void im2col_item(const ConvDims& d, const T* xb,
                 const std::vector<KernelRange>& rz,
                 const std::vector<KernelRange>& ry,
                 const std::vector<KernelRange>& rx, T* col) {
  const size_t in_plane = size_t(d.H) * d.W;
  const size_t in_chan = size_t(d.D) * in_plane;
  const size_t ker_chan = size_t(d.k[0]) * d.k[1] * d.k[2];
  const size_t fan_in = size_t(d.C) * ker_chan;

  size_t os = 0;
  for (uint32_t oz = 0; oz < d.OD; ++oz)
    for (uint32_t oy = 0; oy < d.OH; ++oy)
      for (uint32_t ox = 0; ox < d.OW; ++ox, ++os) {
        T* row = col + os * fan_in;
        const bool interior = rz[oz].lo == 0 && rz[oz].hi == d.k[0] &&
                              ry[oy].lo == 0 && ry[oy].hi == d.k[1] &&
                              rx[ox].lo == 0 && rx[ox].hi == d.k[2];
        if (!interior) std::fill(row, row + fan_in, T(0));
        for (uint32_t c = 0; c < d.C; ++c) {
          const T* xc = xb + c * in_chan;
          T* rowc = row + c * ker_chan;
          for (uint32_t kz = rz[oz].lo; kz < rz[oz].hi; ++kz) {
            const size_t iz = size_t(rz[oz].base + kz);
            for (uint32_t ky = ry[oy].lo; ky < ry[oy].hi; ++ky) {
              const size_t iy = size_t(ry[oy].base + ky);
              const T* src = xc + iz * in_plane + iy * d.W + rx[ox].base +
                             rx[ox].lo;
              T* dst = rowc + (size_t(kz) * d.k[1] + ky) * d.k[2] + rx[ox].lo;
              std::copy(src, src + (rx[ox].hi - rx[ox].lo), dst);
            }
          }
        }
      }
}

// y[b,f,os] = act(bias[f] + w_f . col_os)
template <class T>
void conv_forward(const ConvDims& d, const T* x, const T* w, const T* bias,
                  Activation act, T* y) {
  const size_t in_item = size_t(d.C) * d.D * d.H * d.W;
  const size_t out_spatial = size_t(d.OD) * d.OH * d.OW;
  const size_t out_item = size_t(d.F) * out_spatial;
  const size_t fan_in = size_t(d.C) * d.k[0] * d.k[1] * d.k[2];

  const auto rz = kernel_ranges(d.OD, d.D, d.k[0], d.s[0], d.p[0]);
  const auto ry = kernel_ranges(d.OH, d.H, d.k[1], d.s[1], d.p[1]);
  const auto rx = kernel_ranges(d.OW, d.W, d.k[2], d.s[2], d.p[2]);

  parallel_for(d.B, [&](size_t b) {
    std::vector<T> col(out_spatial * fan_in);
    im2col_item(d, x + b * in_item, rz, ry, rx, col.data());
    T* yb = y + b * out_item;
    for (uint32_t f = 0; f < d.F; ++f) {
      const T* wf = w + size_t(f) * fan_in;
      T* yf = yb + size_t(f) * out_spatial;
      for (size_t os = 0; os < out_spatial; ++os) {
        const double acc =
            double(bias[f]) +
            dot_accumulate(wf, col.data() + os * fan_in, fan_in);
        yf[os] = apply_act(act, T(acc));
      }
    }
  });
}

// Gradients for one conv stage. dz is the pre-activation gradient.
template <class T>
void conv_backward(const ConvDims& d, const T* x, const T* w, const T* dz,
                   T* dw, T* db, T* dx) {
  const size_t in_plane = size_t(d.H) * d.W;
  const size_t in_chan = size_t(d.D) * in_plane;
  const size_t in_item = size_t(d.C) * in_chan;
  const size_t out_spatial = size_t(d.OD) * d.OH * d.OW;
  const size_t out_item = size_t(d.F) * out_spatial;
  const size_t ker_chan = size_t(d.k[0]) * d.k[1] * d.k[2];
  const size_t fan_in = size_t(d.C) * ker_chan;

  const auto rz = kernel_ranges(d.OD, d.D, d.k[0], d.s[0], d.p[0]);
  const auto ry = kernel_ranges(d.OH, d.H, d.k[1], d.s[1], d.p[1]);
  const auto rx = kernel_ranges(d.OW, d.W, d.k[2], d.s[2], d.p[2]);

  // Receptive-field rows for the whole batch (rebuilt; cheap next to the
  // reductions below).
  std::vector<T> cols(size_t(d.B) * out_spatial * fan_in);
  parallel_for(d.B, [&](size_t b) {
    im2col_item(d, x + b * in_item, rz, ry, rx,
                cols.data() + b * out_spatial * fan_in);
  });

  // dW[f] = sum_{b,os} dz[b,f,os] * col[b,os]: one worker per filter, batch
  // and spatial order fixed so the accumulation order never depends on the
  // thread count.
  parallel_for(d.F, [&](size_t f) {
    std::vector<double> wacc(fan_in, 0.0);
    double bacc = 0.0;
    for (uint32_t b = 0; b < d.B; ++b) {
      const T* dzf = dz + size_t(b) * out_item + f * out_spatial;
      const T* colb = cols.data() + size_t(b) * out_spatial * fan_in;
      for (size_t os = 0; os < out_spatial; ++os) {
        const double g = double(dzf[os]);
        if (g == 0.0) continue;
        bacc += g;
        const T* row = colb + os * fan_in;
        for (size_t i = 0; i < fan_in; ++i) wacc[i] += g * double(row[i]);
      }
    }
    for (size_t i = 0; i < fan_in; ++i) dw[f * fan_in + i] = T(wacc[i]);
    db[f] = T(bacc);
  });

  // dX: accumulate dcol[os] = sum_f dz[f,os] * w_f per item, then scatter the
  // receptive-field rows back onto the input lattice (col2im).
  parallel_for(d.B, [&](size_t b) {
    std::vector<double> dcol(out_spatial * fan_in, 0.0);
    const T* dzb = dz + b * out_item;
    for (uint32_t f = 0; f < d.F; ++f) {
      const T* wf = w + size_t(f) * fan_in;
      const T* dzf = dzb + size_t(f) * out_spatial;
      for (size_t os = 0; os < out_spatial; ++os) {
        const double g = double(dzf[os]);
        if (g == 0.0) continue;
        double* row = dcol.data() + os * fan_in;
        for (size_t i = 0; i < fan_in; ++i) row[i] += g * double(wf[i]);
      }
    }

    std::vector<double> xacc(in_item, 0.0);
    size_t os = 0;
    for (uint32_t oz = 0; oz < d.OD; ++oz)
      for (uint32_t oy = 0; oy < d.OH; ++oy)
        for (uint32_t ox = 0; ox < d.OW; ++ox, ++os) {
          const double* row = dcol.data() + os * fan_in;
          for (uint32_t c = 0; c < d.C; ++c) {
            double* xc = xacc.data() + c * in_chan;
            const double* rowc = row + c * ker_chan;
            for (uint32_t kz = rz[oz].lo; kz < rz[oz].hi; ++kz) {
              const size_t iz = size_t(rz[oz].base + kz);
              for (uint32_t ky = ry[oy].lo; ky < ry[oy].hi; ++ky) {
                const size_t iy = size_t(ry[oy].base + ky);
                double* xrow = xc + iz * in_plane + iy * d.W;
                const double* src =
                    rowc + (size_t(kz) * d.k[1] + ky) * d.k[2];
                for (uint32_t kx = rx[ox].lo; kx < rx[ox].hi; ++kx)
                  xrow[rx[ox].base + kx] += src[kx];
              }
            }
          }
        }
    T* out = dx + b * in_item;
    for (size_t i = 0; i < in_item; ++i) out[i] = T(xacc[i]);
  });
}

template <class T>
void dense_forward(uint32_t B, uint32_t in, uint32_t out, const T* x,
                   const T* w, const T* bias, Activation act, T* y) {
  // One task per output element; each element is produced exactly once with
  // a fixed-order inner reduction, so the split cannot change results.
  parallel_for(size_t(B) * out, [&](size_t task) {
    const size_t b = task / out;
    const uint32_t o = uint32_t(task % out);
    const double acc =
        double(bias[o]) + dot_accumulate(w + size_t(o) * in, x + b * in, in);
    y[b * out + o] = apply_act(act, T(acc));
  });
}

template <class T>
void dense_backward(uint32_t B, uint32_t in, uint32_t out, const T* x,
                    const T* w, const T* dz, T* dw, T* db, T* dx) {
  parallel_for(out, [&](size_t o) {
    std::vector<double> wacc(in, 0.0);
    double bacc = 0.0;
    for (uint32_t b = 0; b < B; ++b) {
      const double g = double(dz[size_t(b) * out + o]);
      if (g == 0.0) continue;
      bacc += g;
      const T* xb = x + size_t(b) * in;
      for (uint32_t i = 0; i < in; ++i) wacc[i] += g * double(xb[i]);
    }
    for (uint32_t i = 0; i < in; ++i) dw[o * in + i] = T(wacc[i]);
    db[o] = T(bacc);
  });
  if (!dx) return;
  parallel_for(B, [&](size_t b) {
    std::vector<double> xacc(in, 0.0);
    const T* dzb = dz + b * out;
    for (uint32_t o = 0; o < out; ++o) {
      const double g = double(dzb[o]);
      if (g == 0.0) continue;
      const T* wrow = w + size_t(o) * in;
      for (uint32_t i = 0; i < in; ++i) xacc[i] += g * double(wrow[i]);
    }
    T* xg = dx + b * in;
    for (uint32_t i = 0; i < in; ++i) xg[i] = T(xacc[i]);
  });
}

// Pre-activation gradient from the post-activation gradient: relu passes
// gradient exactly where the output is positive.
template <class T>
TensorT<T> mask_activation(const TensorT<T>& post, const TensorT<T>& d_post,
                           Activation act) {
  if (act == Activation::Identity) return d_post;
  TensorT<T> dz = d_post;
  for (size_t i = 0; i < dz.data.size(); ++i)
    if (!(post.data[i] > T(0))) dz.data[i] = T(0);
  return dz;
}

}  // namespace

std::string Architecture::to_json_string() const {
  json layers_json = json::array();
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerSpec::Kind::Conv:
        layers_json.push_back({{"type", "conv3d"},
                               {"filters", l.conv.filters},
                               {"kernel", l.conv.kernel},
                               {"stride", l.conv.stride},
                               {"activation", activation_name(l.conv.act)}});
        break;
      case LayerSpec::Kind::Flatten:
        layers_json.push_back({{"type", "flatten"}});
        break;
      case LayerSpec::Kind::Dense:
        layers_json.push_back({{"type", "dense"},
                               {"units", l.dense.units},
                               {"activation", activation_name(l.dense.act)}});
        break;
    }
  }
  json j{{"input", input},
         {"stack", stack_name(stack)},
         {"layers", layers_json},
         {"head",
          {{"dueling", head.dueling},
           {"combine", combine_name(head.combine)},
           {"actions", head.actions}}}};
  return j.dump();
}

Architecture Architecture::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    raise(ErrorCode::Format, std::string("bad architecture JSON: ") + e.what());
  }
  try {
    reject_unknown_keys(j, {"input", "stack", "layers", "head"}, "architecture");
    Architecture a;
    const auto in = j.at("input");
    for (int i = 0; i < 4; ++i) a.input[i] = in.at(i).get<uint32_t>();
    a.stack = stack_from(j.at("stack").get<std::string>());
    for (const auto& l : j.at("layers")) {
      const auto type = l.at("type").get<std::string>();
      if (type == "conv3d") {
        reject_unknown_keys(l, {"type", "filters", "kernel", "stride",
                                "activation"}, "conv layer");
        ConvLayer c;
        c.filters = l.at("filters").get<uint32_t>();
        for (int i = 0; i < 3; ++i) {
          c.kernel[i] = l.at("kernel").at(i).get<uint32_t>();
          c.stride[i] = l.at("stride").at(i).get<uint32_t>();
        }
        c.act = activation_from(l.at("activation").get<std::string>());
        a.layers.push_back(LayerSpec{LayerSpec::Kind::Conv, c, {}});
      } else if (type == "flatten") {
        reject_unknown_keys(l, {"type"}, "flatten layer");
        a.layers.push_back(LayerSpec::make_flatten());
      } else if (type == "dense") {
        reject_unknown_keys(l, {"type", "units", "activation"}, "dense layer");
        a.layers.push_back(LayerSpec::make_dense(
            l.at("units").get<uint32_t>(),
            activation_from(l.at("activation").get<std::string>())));
      } else {
        raise(ErrorCode::Format, "unknown layer type: " + type);
      }
    }
    const auto& h = j.at("head");
    reject_unknown_keys(h, {"dueling", "combine", "actions"}, "head");
    a.head.dueling = h.at("dueling").get<bool>();
    a.head.combine = combine_from(h.at("combine").get<std::string>());
    a.head.actions = h.at("actions").get<uint32_t>();
    return a;
  } catch (const json::exception& e) {
    raise(ErrorCode::Format,
          std::string("architecture JSON missing fields: ") + e.what());
  }
}

bool Architecture::operator==(const Architecture& o) const {
  return to_json_string() == o.to_json_string();
}

Architecture Architecture::default_for_grid(
    const std::array<uint32_t, 3>& grid_size, bool dueling, DuelCombine combine,
    StackMode stack) {
  const uint32_t px = grid_size[0], py = grid_size[1], pz = grid_size[2];
  Architecture a;
  a.stack = stack;
  if (stack == StackMode::Channels)
    a.input = {4 * pz, 1, py, px};
  else
    a.input = {4, pz, py, px};
  const std::array<uint32_t, 3> k{1, 3, 3};
  a.layers = {
      LayerSpec::make_conv(32, k, {1, 2, 2}, Activation::Relu),
      LayerSpec::make_conv(32, k, {1, 2, 2}, Activation::Relu),
      LayerSpec::make_conv(64, k, {1, 1, 1}, Activation::Relu),
      LayerSpec::make_conv(64, k, {1, 1, 1}, Activation::Relu),
      LayerSpec::make_flatten(),
      LayerSpec::make_dense(256, Activation::Relu),
      LayerSpec::make_dense(128, Activation::Relu),
  };
  a.head = HeadSpec{dueling, combine, 8};
  return a;
}

template <class T>
TensorT<T> dueling_combine(const TensorT<T>& v, const TensorT<T>& a,
                           DuelCombine mode) {
  if (v.shape.size() != 2 || a.shape.size() != 2 || v.shape[1] != 1 ||
      v.shape[0] != a.shape[0])
    raise(ErrorCode::Contract, "dueling_combine expects V [B,1] and A [B,N]");
  const uint32_t batch = a.shape[0], n = a.shape[1];
  TensorT<T> q(std::vector<uint32_t>{batch, n});
  for (uint32_t b = 0; b < batch; ++b) {
    double mean = 0.0;
    if (mode == DuelCombine::MeanCentered) {
      for (uint32_t i = 0; i < n; ++i)
        mean += double(a.data[size_t(b) * n + i]);
      mean /= n;
    }
    for (uint32_t i = 0; i < n; ++i)
      q.data[size_t(b) * n + i] =
          T(double(v.data[b]) + double(a.data[size_t(b) * n + i]) - mean);
  }
  return q;
}

template <class T>
NetworkT<T>::NetworkT(Architecture arch, Rng& init_rng)
    : arch_(std::move(arch)) {
  if (arch_.head.actions == 0)
    raise(ErrorCode::Contract, "network head needs at least one action");
  build_stages();
  init_params(init_rng);
}

template <class T>
void NetworkT<T>::build_stages() {
  std::array<uint32_t, 4> shape = arch_.input;
  for (uint32_t d : shape)
    if (d == 0) raise(ErrorCode::Contract, "network input dims must be > 0");

  size_t param_index = 0;
  for (const auto& spec : arch_.layers) {
    Stage st;
    st.spec = spec;
    st.in_shape = shape;
    st.first_param = param_index;
    switch (spec.kind) {
      case LayerSpec::Kind::Conv: {
        if (spec.conv.filters == 0)
          raise(ErrorCode::Contract, "conv layer needs filters");
        const ConvDims d = conv_dims(shape, 1, spec.conv);
        st.out_shape = {d.F, d.OD, d.OH, d.OW};
        param_index += 2;
        break;
      }
      case LayerSpec::Kind::Flatten: {
        const uint32_t feat = shape[0] * shape[1] * shape[2] * shape[3];
        st.out_shape = {feat, 1, 1, 1};
        break;
      }
      case LayerSpec::Kind::Dense: {
        if (shape[1] != 1 || shape[2] != 1 || shape[3] != 1)
          raise(ErrorCode::Contract,
                "dense layer requires flattened input (add a flatten layer)");
        st.out_shape = {spec.dense.units, 1, 1, 1};
        param_index += 2;
        break;
      }
    }
    shape = st.out_shape;
    stages_.push_back(st);
  }
  if (shape[1] != 1 || shape[2] != 1 || shape[3] != 1)
    raise(ErrorCode::Contract, "network head requires flattened input");
  head_in_features_ = shape[0];
  head_first_param_ = param_index;
}

template <class T>
void NetworkT<T>::init_params(Rng& rng) {
  params_.clear();
  auto add_dense = [&](uint32_t out, uint32_t in) {
    TensorT<T> w(std::vector<uint32_t>{out, in});
    const double bound = std::sqrt(3.0 / double(in));
    for (auto& x : w.data) x = T(rng.uniform(-bound, bound));
    params_.push_back(std::move(w));
    params_.emplace_back(std::vector<uint32_t>{out});  // zero bias
  };

  for (const auto& st : stages_) {
    if (st.spec.kind == LayerSpec::Kind::Conv) {
      const auto& c = st.spec.conv;
      const uint32_t fan_in =
          st.in_shape[0] * c.kernel[0] * c.kernel[1] * c.kernel[2];
      TensorT<T> w(std::vector<uint32_t>{c.filters, st.in_shape[0], c.kernel[0],
                                         c.kernel[1], c.kernel[2]});
      const double bound = std::sqrt(3.0 / double(fan_in));
      for (auto& x : w.data) x = T(rng.uniform(-bound, bound));
      params_.push_back(std::move(w));
      params_.emplace_back(std::vector<uint32_t>{c.filters});
    } else if (st.spec.kind == LayerSpec::Kind::Dense) {
      add_dense(st.spec.dense.units, st.in_shape[0]);
    }
  }
  if (arch_.head.dueling) {
    add_dense(1, head_in_features_);
    add_dense(arch_.head.actions, head_in_features_);
  } else {
    add_dense(arch_.head.actions, head_in_features_);
  }

  adam_m_.clear();
  adam_v_.clear();
  for (const auto& p : params_) {
    adam_m_.emplace_back(p.shape);
    adam_v_.emplace_back(p.shape);
  }
  step_count_ = 0;
}

template <class T>
size_t NetworkT<T>::param_count() const {
  size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

template <class T>
TensorT<T> NetworkT<T>::forward(const TensorT<T>& batch) const {
  Cache cache;
  return forward(batch, cache);
}

template <class T>
TensorT<T> NetworkT<T>::forward(const TensorT<T>& batch, Cache& cache) const {
  if (batch.shape.size() != 5)
    raise(ErrorCode::Contract, "network input must be [B, C, D, H, W]");
  for (int i = 0; i < 4; ++i)
    if (batch.shape[i + 1] != arch_.input[i])
      raise(ErrorCode::Contract, "network input shape mismatch");
  const uint32_t B = batch.shape[0];

  cache.acts.clear();
  cache.acts.push_back(batch);

  for (const auto& st : stages_) {
    const TensorT<T>& x = cache.acts.back();
    switch (st.spec.kind) {
      case LayerSpec::Kind::Conv: {
        const ConvDims d = conv_dims(st.in_shape, B, st.spec.conv);
        TensorT<T> y(std::vector<uint32_t>{B, d.F, d.OD, d.OH, d.OW});
        conv_forward(d, x.data.data(), params_[st.first_param].data.data(),
                     params_[st.first_param + 1].data.data(), st.spec.conv.act,
                     y.data.data());
        check_finite(y, "conv layer");
        cache.acts.push_back(std::move(y));
        break;
      }
      case LayerSpec::Kind::Flatten: {
        TensorT<T> y = x;
        y.shape = {B, st.out_shape[0]};
        cache.acts.push_back(std::move(y));
        break;
      }
      case LayerSpec::Kind::Dense: {
        TensorT<T> y(std::vector<uint32_t>{B, st.out_shape[0]});
        dense_forward(B, st.in_shape[0], st.out_shape[0], x.data.data(),
                      params_[st.first_param].data.data(),
                      params_[st.first_param + 1].data.data(), st.spec.dense.act,
                      y.data.data());
        check_finite(y, "dense layer");
        cache.acts.push_back(std::move(y));
        break;
      }
    }
  }

  const TensorT<T>& hidden = cache.acts.back();
  const uint32_t in = head_in_features_;
  const uint32_t actions = arch_.head.actions;
  if (arch_.head.dueling) {
    TensorT<T> value(std::vector<uint32_t>{B, 1});
    TensorT<T> adv(std::vector<uint32_t>{B, actions});
    dense_forward(B, in, 1, hidden.data.data(),
                  params_[head_first_param_].data.data(),
                  params_[head_first_param_ + 1].data.data(),
                  Activation::Identity, value.data.data());
    dense_forward(B, in, actions, hidden.data.data(),
                  params_[head_first_param_ + 2].data.data(),
                  params_[head_first_param_ + 3].data.data(),
                  Activation::Identity, adv.data.data());
    TensorT<T> q = dueling_combine(value, adv, arch_.head.combine);
    check_finite(q, "dueling head");
    return q;
  }
  TensorT<T> q(std::vector<uint32_t>{B, actions});
  dense_forward(B, in, actions, hidden.data.data(),
                params_[head_first_param_].data.data(),
                params_[head_first_param_ + 1].data.data(), Activation::Identity,
                q.data.data());
  check_finite(q, "head");
  return q;
}

template <class T>
std::vector<TensorT<T>> NetworkT<T>::backward(const Cache& cache,
                                              const TensorT<T>& q_grad) const {
  if (cache.acts.size() != stages_.size() + 1)
    raise(ErrorCode::Contract, "backward requires a cache from forward");
  const uint32_t B = cache.acts[0].shape[0];
  const uint32_t actions = arch_.head.actions;
  if (q_grad.shape.size() != 2 || q_grad.shape[0] != B ||
      q_grad.shape[1] != actions)
    raise(ErrorCode::Contract, "upstream gradient must be [B, actions]");

  std::vector<TensorT<T>> grads;
  grads.reserve(params_.size());
  for (const auto& p : params_) grads.emplace_back(p.shape);

  const TensorT<T>& hidden = cache.acts.back();
  const uint32_t in = head_in_features_;
  TensorT<T> d_hidden(std::vector<uint32_t>{B, in});

  if (arch_.head.dueling) {
    // Q = V + A (- mean(A)); both branches are linear.
    TensorT<T> dv(std::vector<uint32_t>{B, 1});
    TensorT<T> da(std::vector<uint32_t>{B, actions});
    for (uint32_t b = 0; b < B; ++b) {
      double sum = 0.0;
      for (uint32_t i = 0; i < actions; ++i)
        sum += double(q_grad.data[size_t(b) * actions + i]);
      dv.data[b] = T(sum);
      const double mean =
          arch_.head.combine == DuelCombine::MeanCentered ? sum / actions : 0.0;
      for (uint32_t i = 0; i < actions; ++i)
        da.data[size_t(b) * actions + i] =
            T(double(q_grad.data[size_t(b) * actions + i]) - mean);
    }
    TensorT<T> d_hidden_v(std::vector<uint32_t>{B, in});
    dense_backward(B, in, 1, hidden.data.data(),
                   params_[head_first_param_].data.data(), dv.data.data(),
                   grads[head_first_param_].data.data(),
                   grads[head_first_param_ + 1].data.data(),
                   d_hidden_v.data.data());
    dense_backward(B, in, actions, hidden.data.data(),
                   params_[head_first_param_ + 2].data.data(), da.data.data(),
                   grads[head_first_param_ + 2].data.data(),
                   grads[head_first_param_ + 3].data.data(),
                   d_hidden.data.data());
    for (size_t i = 0; i < d_hidden.data.size(); ++i)
      d_hidden.data[i] = T(double(d_hidden.data[i]) + double(d_hidden_v.data[i]));
  } else {
    dense_backward(B, in, actions, hidden.data.data(),
                   params_[head_first_param_].data.data(), q_grad.data.data(),
                   grads[head_first_param_].data.data(),
                   grads[head_first_param_ + 1].data.data(),
                   d_hidden.data.data());
  }

  TensorT<T> d_out = std::move(d_hidden);
  for (size_t si = stages_.size(); si-- > 0;) {
    const Stage& st = stages_[si];
    const TensorT<T>& x = cache.acts[si];
    const TensorT<T>& y = cache.acts[si + 1];
    switch (st.spec.kind) {
      case LayerSpec::Kind::Conv: {
        const TensorT<T> dz = mask_activation(y, d_out, st.spec.conv.act);
        const ConvDims d = conv_dims(st.in_shape, B, st.spec.conv);
        TensorT<T> dx(x.shape);
        conv_backward(d, x.data.data(), params_[st.first_param].data.data(),
                      dz.data.data(), grads[st.first_param].data.data(),
                      grads[st.first_param + 1].data.data(), dx.data.data());
        d_out = std::move(dx);
        break;
      }
      case LayerSpec::Kind::Flatten: {
        TensorT<T> dx = std::move(d_out);
        dx.shape = x.shape;
        d_out = std::move(dx);
        break;
      }
      case LayerSpec::Kind::Dense: {
        const TensorT<T> dz = mask_activation(y, d_out, st.spec.dense.act);
        TensorT<T> dx(std::vector<uint32_t>{B, st.in_shape[0]});
        dense_backward(B, st.in_shape[0], st.out_shape[0], x.data.data(),
                       params_[st.first_param].data.data(), dz.data.data(),
                       grads[st.first_param].data.data(),
                       grads[st.first_param + 1].data.data(), dx.data.data());
        d_out = std::move(dx);
        break;
      }
    }
  }

  for (const auto& g : grads) check_finite(g, "backward");
  return grads;
}

template <class T>
void NetworkT<T>::adam_step(const std::vector<TensorT<T>>& grads,
                            const AdamConfig& cfg) {
  if (grads.size() != params_.size())
    raise(ErrorCode::Contract, "gradient list does not match parameters");
  for (size_t i = 0; i < grads.size(); ++i)
    if (grads[i].shape != params_[i].shape)
      raise(ErrorCode::Contract, "gradient shape mismatch");

  step_count_ += 1;
  const double t = double(step_count_);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);

  parallel_for(params_.size(), [&](size_t i) {
    auto& p = params_[i].data;
    auto& m = adam_m_[i].data;
    auto& v = adam_v_[i].data;
    const auto& g = grads[i].data;
    for (size_t j = 0; j < p.size(); ++j) {
      const double gj = double(g[j]);
      const double mj = cfg.beta1 * double(m[j]) + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * double(v[j]) + (1.0 - cfg.beta2) * gj * gj;
      m[j] = T(mj);
      v[j] = T(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      p[j] = T(double(p[j]) -
               cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon));
    }
  });
}

template class NetworkT<float>;
template class NetworkT<double>;
template TensorT<float> dueling_combine<float>(const TensorT<float>&,
                                               const TensorT<float>&,
                                               DuelCombine);
template TensorT<double> dueling_combine<double>(const TensorT<double>&,
                                                 const TensorT<double>&,
                                                 DuelCombine);

namespace {

constexpr char kCheckpointMagic[4] = {'P', 'Q', 'N', '1'};

class CountingReader {
public:
  CountingReader(std::ifstream& in, std::string path)
      : in_(in), path_(std::move(path)) {}

  void read(void* dst, size_t n, const char* section) {
    in_.read(reinterpret_cast<char*>(dst), std::streamsize(n));
    if (in_.gcount() != std::streamsize(n))
      raise(ErrorCode::Format,
            "checkpoint " + path_ + " truncated in " + section + " at offset " +
                std::to_string(offset_ + size_t(std::max<std::streamsize>(
                                             in_.gcount(), 0))));
    offset_ += n;
  }

  uint32_t read_u32(const char* section) {
    uint32_t v;
    read(&v, sizeof(v), section);
    return v;
  }

  uint64_t read_u64(const char* section) {
    uint64_t v;
    read(&v, sizeof(v), section);
    return v;
  }

  size_t offset() const { return offset_; }

private:
  std::ifstream& in_;
  std::string path_;
  size_t offset_ = 0;
};

void write_tensor(std::ofstream& out, const Tensor& t) {
  const uint32_t rank = uint32_t(t.shape.size());
  out.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
  out.write(reinterpret_cast<const char*>(t.shape.data()),
            std::streamsize(t.shape.size() * sizeof(uint32_t)));
  out.write(reinterpret_cast<const char*>(t.data.data()),
            std::streamsize(t.data.size() * sizeof(float)));
}

void read_tensor_into(CountingReader& r, Tensor& t, const char* section) {
  const size_t at = r.offset();
  const uint32_t rank = r.read_u32(section);
  if (rank != t.shape.size())
    raise(ErrorCode::Format, std::string("checkpoint ") + section +
                                 " rank mismatch at offset " +
                                 std::to_string(at));
  std::vector<uint32_t> dims(rank);
  r.read(dims.data(), rank * sizeof(uint32_t), section);
  if (dims != t.shape)
    raise(ErrorCode::Format, std::string("checkpoint ") + section +
                                 " shape mismatch at offset " +
                                 std::to_string(at));
  r.read(t.data.data(), t.data.size() * sizeof(float), section);
}

}  // namespace

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  // Write-temp-then-rename so an abort mid-save never clobbers the previous
  // good checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      raise(ErrorCode::Io, "cannot write checkpoint: " + tmp.string());
    out.write(kCheckpointMagic, 4);
    const std::string arch_json = net.arch().to_json_string();
    const uint32_t len = uint32_t(arch_json.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(arch_json.data(), std::streamsize(arch_json.size()));
    for (const auto& p : net.params()) write_tensor(out, p);
    for (const auto& m : net.adam_m()) write_tensor(out, m);
    for (const auto& v : net.adam_v()) write_tensor(out, v);
    const uint64_t steps = net.step_count();
    out.write(reinterpret_cast<const char*>(&steps), sizeof(steps));
    if (!out)
      raise(ErrorCode::Io, "I/O failure writing checkpoint: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec)
    raise(ErrorCode::Io,
          "cannot finalize checkpoint " + path.string() + ": " + ec.message());
}

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    raise(ErrorCode::Io, "cannot open checkpoint: " + path.string());
  CountingReader r(in, path.string());

  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    raise(ErrorCode::Format,
          "not a PQN1 checkpoint at offset 0: " + path.string());

  const uint32_t len = r.read_u32("architecture length");
  if (len > (1u << 20))
    raise(ErrorCode::Format, "implausible architecture length at offset 4");
  std::string arch_json(len, '\0');
  r.read(arch_json.data(), len, "architecture JSON");
  Architecture arch;
  try {
    arch = Architecture::from_json_string(arch_json);
  } catch (const Error& e) {
    raise(ErrorCode::Format, std::string("checkpoint architecture at offset 8 "
                                         "is invalid: ") + e.what());
  }

  Rng scratch(0);
  Network net(arch, scratch);
  for (auto& p : net.params()) read_tensor_into(r, p, "parameters");
  for (auto& m : net.adam_m()) read_tensor_into(r, m, "adam first moment");
  for (auto& v : net.adam_v()) read_tensor_into(r, v, "adam second moment");
  net.set_step_count(r.read_u64("step counter"));
  return net;
}

}  // namespace ps::nn
