#include "core/nn.hpp"

#include <cmath>
#include <fstream>

#include <doctest.h>

#include "core/rng.hpp"
#include "core/threads.hpp"
#include "test_util.hpp"

using namespace ps;
using namespace ps::nn;

namespace {

template <class T>
TensorT<T> random_tensor(std::vector<uint32_t> shape, Rng& rng,
                         double scale = 1.0) {
  TensorT<T> t(std::move(shape));
  for (auto& x : t.data) x = T(rng.uniform(-scale, scale));
  return t;
}

// Scalar probe loss, linear in Q so its exact gradient is the coefficient
// tensor itself.
double probe_loss(const NetworkT<double>& net, const TensorT<double>& input,
                  const TensorT<double>& coef) {
  const auto q = net.forward(input);
  REQUIRE(q.data.size() == coef.data.size());
  double s = 0.0;
  for (size_t i = 0; i < q.data.size(); ++i) s += q.data[i] * coef.data[i];
  return s;
}

bool grad_close(double analytic, double fd) {
  if (std::abs(analytic - fd) <= 1e-10) return true;
  const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-8});
  return std::abs(analytic - fd) / denom <= 1e-4;
}

// Central finite differences over every parameter component (or a strided
// subset), against the analytic backward pass.
void check_gradients(NetworkT<double>& net, Rng& rng, size_t stride = 1) {
  const auto& in = net.arch().input;
  const uint32_t batch = 3;
  const TensorT<double> input =
      random_tensor<double>({batch, in[0], in[1], in[2], in[3]}, rng);
  const TensorT<double> coef =
      random_tensor<double>({batch, net.arch().head.actions}, rng);

  typename NetworkT<double>::Cache cache;
  net.forward(input, cache);
  const auto grads = net.backward(cache, coef);

  const double h = 1e-5;
  size_t checked = 0, mismatched = 0;
  for (size_t t = 0; t < net.params().size(); ++t) {
    auto& tensor = net.params()[t];
    for (size_t j = 0; j < tensor.data.size(); j += stride) {
      const double saved = tensor.data[j];
      tensor.data[j] = saved + h;
      const double up = probe_loss(net, input, coef);
      tensor.data[j] = saved - h;
      const double down = probe_loss(net, input, coef);
      tensor.data[j] = saved;
      const double fd = (up - down) / (2.0 * h);
      checked += 1;
      if (!grad_close(grads[t].data[j], fd)) {
        mismatched += 1;
        CAPTURE(t);
        CAPTURE(j);
        CHECK(grad_close(grads[t].data[j], fd));
      }
    }
  }
  REQUIRE(checked > 0);
  CHECK(mismatched == 0);
}

Architecture tiny_arch(LayerSpec layer, std::array<uint32_t, 4> input,
                       bool dueling = false,
                       DuelCombine combine = DuelCombine::MeanCentered) {
  Architecture a;
  a.input = input;
  a.layers = {std::move(layer), LayerSpec::make_flatten()};
  a.head = HeadSpec{dueling, combine, 8};
  return a;
}

}  // namespace

TEST_CASE("forward of a hand-set dense layer matches the matrix product") {
  Architecture a;
  a.input = {4, 1, 1, 1};
  a.layers = {LayerSpec::make_flatten()};
  a.head = HeadSpec{false, DuelCombine::MeanCentered, 8};
  Rng rng(1);
  Network net(a, rng);

  Rng wrng(2);
  auto& w = net.params()[0];  // [8, 4]
  auto& b = net.params()[1];  // [8]
  for (auto& x : w.data) x = float(wrng.uniform(-1.0, 1.0));
  for (auto& x : b.data) x = float(wrng.uniform(-1.0, 1.0));

  Tensor input(std::vector<uint32_t>{2, 4, 1, 1, 1});
  for (auto& x : input.data) x = float(wrng.uniform(-1.0, 1.0));

  const Tensor q = net.forward(input);
  for (uint32_t bi = 0; bi < 2; ++bi)
    for (uint32_t o = 0; o < 8; ++o) {
      double expect = b.data[o];
      for (uint32_t i = 0; i < 4; ++i)
        expect += double(w.data[o * 4 + i]) * double(input.data[bi * 4 + i]);
      CHECK_NEAR(double(q.data[bi * 8 + o]), expect, 1e-6);
    }
}

TEST_CASE("zero-initialized head maps every input to zero Q") {
  Rng rng(3);
  Architecture a = Architecture::default_for_grid({8, 8, 3}, false);
  Network net(a, rng);
  auto& w = net.params()[net.params().size() - 2];
  auto& b = net.params()[net.params().size() - 1];
  std::fill(w.data.begin(), w.data.end(), 0.0f);
  std::fill(b.data.begin(), b.data.end(), 0.0f);

  const Tensor input =
      random_tensor<float>({2, a.input[0], a.input[1], a.input[2], a.input[3]},
                           rng);
  const Tensor q = net.forward(input);
  for (float v : q.data) CHECK(v == 0.0f);
}

TEST_CASE("identical batch rows produce identical Q rows") {
  Rng rng(4);
  Architecture a = Architecture::default_for_grid({8, 8, 3}, true);
  Network net(a, rng);

  const size_t item = size_t(a.input[0]) * a.input[1] * a.input[2] * a.input[3];
  Tensor input(std::vector<uint32_t>{2, a.input[0], a.input[1], a.input[2],
                                     a.input[3]});
  for (size_t i = 0; i < item; ++i) {
    input.data[i] = float(rng.uniform(0.0, 1.0));
    input.data[item + i] = input.data[i];
  }
  const Tensor q = net.forward(input);
  for (uint32_t o = 0; o < 8; ++o) CHECK(q.data[o] == q.data[8 + o]);
}

TEST_CASE("dueling_combine") {
  TensorT<float> v(std::vector<uint32_t>{1, 1});
  TensorT<float> adv(std::vector<uint32_t>{1, 8});
  Rng rng(5);
  for (auto& x : adv.data) x = float(rng.uniform(-2.0, 2.0));

  SUBCASE("raw sum with zero V returns A") {
    v.data[0] = 0.0f;
    const auto q = dueling_combine(v, adv, DuelCombine::RawSum);
    for (size_t i = 0; i < 8; ++i) CHECK(q.data[i] == adv.data[i]);
  }

  SUBCASE("mean-centered is invariant to constant advantage shifts") {
    v.data[0] = 0.7f;
    const auto q1 = dueling_combine(v, adv, DuelCombine::MeanCentered);
    TensorT<float> shifted = adv;
    for (auto& x : shifted.data) x += 3.25f;
    const auto q2 = dueling_combine(v, shifted, DuelCombine::MeanCentered);
    for (size_t i = 0; i < 8; ++i) CHECK_NEAR(q1.data[i], q2.data[i], 1e-5);
  }

  SUBCASE("raw-sum shifts preserve the argmax") {
    v.data[0] = 0.7f;
    const auto q1 = dueling_combine(v, adv, DuelCombine::RawSum);
    TensorT<float> shifted = adv;
    for (auto& x : shifted.data) x += 3.25f;
    const auto q2 = dueling_combine(v, shifted, DuelCombine::RawSum);
    size_t arg1 = 0, arg2 = 0;
    for (size_t i = 1; i < 8; ++i) {
      if (q1.data[i] > q1.data[arg1]) arg1 = i;
      if (q2.data[i] > q2.data[arg2]) arg2 = i;
    }
    CHECK(arg1 == arg2);
    for (size_t i = 0; i < 8; ++i)
      CHECK_NEAR(q2.data[i] - q1.data[i], 3.25, 1e-5);
  }
}

TEST_CASE("zero upstream gradient produces zero parameter gradients") {
  Rng rng(6);
  Architecture a = Architecture::default_for_grid({8, 8, 3}, false);
  Network net(a, rng);
  const Tensor input =
      random_tensor<float>({2, a.input[0], a.input[1], a.input[2], a.input[3]},
                           rng);
  Network::Cache cache;
  net.forward(input, cache);
  const Tensor zero(std::vector<uint32_t>{2, 8});
  const auto grads = net.backward(cache, zero);
  for (const auto& g : grads)
    for (float x : g.data) CHECK(x == 0.0f);
}

TEST_CASE("gradient check: dense layers") {
  Rng rng(7);
  for (int i = 0; i < 5; ++i) {
    Architecture a;
    a.input = {5, 1, 1, 1};
    a.layers = {LayerSpec::make_flatten(),
                LayerSpec::make_dense(6, Activation::Relu),
                LayerSpec::make_dense(4, Activation::Identity)};
    a.head = HeadSpec{false, DuelCombine::MeanCentered, 8};
    NetworkT<double> net(a, rng);
    check_gradients(net, rng);
  }
}

TEST_CASE("gradient check: conv layers, in-plane kernels and strides") {
  Rng rng(8);
  for (int i = 0; i < 5; ++i) {
    Architecture a = tiny_arch(
        LayerSpec::make_conv(4, {1, 3, 3}, {1, 2, 2}, Activation::Relu),
        {3, 1, 7, 6});
    NetworkT<double> net(a, rng);
    check_gradients(net, rng);
  }
}

TEST_CASE("gradient check: true 3D conv kernels over the depth axis") {
  Rng rng(9);
  for (int i = 0; i < 5; ++i) {
    Architecture a = tiny_arch(
        LayerSpec::make_conv(3, {3, 3, 3}, {1, 1, 2}, Activation::Relu),
        {2, 4, 5, 6});
    NetworkT<double> net(a, rng);
    check_gradients(net, rng);
  }
}

TEST_CASE("gradient check: dueling heads in both combine modes") {
  Rng rng(10);
  for (int i = 0; i < 5; ++i) {
    for (const auto mode : {DuelCombine::RawSum, DuelCombine::MeanCentered}) {
      Architecture a = tiny_arch(
          LayerSpec::make_conv(3, {1, 3, 3}, {1, 1, 1}, Activation::Relu),
          {2, 1, 5, 5}, true, mode);
      NetworkT<double> net(a, rng);
      check_gradients(net, rng);
    }
  }
}

TEST_CASE("gradient check: full default architecture on a small grid") {
  Rng rng(11);
  Architecture a = Architecture::default_for_grid({9, 9, 3}, true);
  NetworkT<double> net(a, rng);
  check_gradients(net, rng, /*stride=*/617);  // sampled components
}

TEST_CASE("adam first step moves against the gradient, scaled by lr") {
  Rng rng(12);
  Architecture a;
  a.input = {3, 1, 1, 1};
  a.layers = {LayerSpec::make_flatten()};
  a.head = HeadSpec{false, DuelCombine::MeanCentered, 8};
  Network net(a, rng);

  const auto before = net.params();
  std::vector<Tensor> grads;
  Rng grng(13);
  for (const auto& p : net.params())
    grads.push_back(random_tensor<float>(p.shape, grng));

  const AdamConfig cfg{0.01, 0.9, 0.999, 1e-8};
  net.adam_step(grads, cfg);
  CHECK(net.step_count() == 1);

  for (size_t t = 0; t < before.size(); ++t)
    for (size_t j = 0; j < before[t].data.size(); ++j) {
      const double g = grads[t].data[j];
      const double delta =
          double(net.params()[t].data[j]) - double(before[t].data[j]);
      if (std::abs(g) > 1e-3) {
        // At t=1 the bias-corrected update is -lr * g / (|g| + eps).
        CHECK_NEAR(delta, -0.01 * g / (std::abs(g) + 1e-8), 1e-6);
      }
    }
}

TEST_CASE("adam with zero gradients leaves a fresh network unchanged") {
  Rng rng(14);
  Architecture a = Architecture::default_for_grid({8, 8, 3}, false);
  Network net(a, rng);
  const auto before = net.params();

  std::vector<Tensor> zeros;
  for (const auto& p : net.params()) zeros.emplace_back(p.shape);
  net.adam_step(zeros, AdamConfig{});

  for (size_t t = 0; t < before.size(); ++t)
    CHECK(net.params()[t].data == before[t].data);
}

TEST_CASE("adam drives a quadratic to its optimum") {
  Rng rng(15);
  Architecture a;
  a.input = {2, 1, 1, 1};
  a.layers = {LayerSpec::make_flatten()};
  a.head = HeadSpec{false, DuelCombine::MeanCentered, 8};
  Network net(a, rng);

  Rng trng(16);
  std::vector<Tensor> target;
  for (const auto& p : net.params())
    target.push_back(random_tensor<float>(p.shape, trng));

  const AdamConfig cfg{0.05, 0.9, 0.999, 1e-8};
  for (int step = 0; step < 3000; ++step) {
    std::vector<Tensor> grads;
    for (size_t t = 0; t < net.params().size(); ++t) {
      Tensor g(net.params()[t].shape);
      for (size_t j = 0; j < g.data.size(); ++j)
        g.data[j] =
            2.0f * (net.params()[t].data[j] - target[t].data[j]);
      grads.push_back(std::move(g));
    }
    net.adam_step(grads, cfg);
  }
  double worst = 0.0;
  for (size_t t = 0; t < net.params().size(); ++t)
    for (size_t j = 0; j < net.params()[t].data.size(); ++j)
      worst = std::max(worst, std::abs(double(net.params()[t].data[j]) -
                                       double(target[t].data[j])));
  CHECK(worst < 1e-3);
}

TEST_CASE("clone independence") {
  Rng rng(17);
  Architecture a = Architecture::default_for_grid({8, 8, 3}, false);
  Network net(a, rng);
  Network clone = net;

  const Tensor probe =
      random_tensor<float>({1, a.input[0], a.input[1], a.input[2], a.input[3]},
                           rng);
  const Tensor q0 = net.forward(probe);
  const Tensor qc0 = clone.forward(probe);
  CHECK(q0.data == qc0.data);

  // Ten updates on the source must not leak into the clone.
  for (int i = 0; i < 10; ++i) {
    std::vector<Tensor> grads;
    Rng grng(100 + i);
    for (const auto& p : net.params())
      grads.push_back(random_tensor<float>(p.shape, grng, 0.1));
    net.adam_step(grads, AdamConfig{0.01, 0.9, 0.999, 1e-8});
  }
  const Tensor q1 = net.forward(probe);
  const Tensor qc1 = clone.forward(probe);
  CHECK(qc1.data == qc0.data);
  CHECK(q1.data != q0.data);
}

TEST_CASE("parameter count matches the per-layer formula") {
  const Architecture a = Architecture::default_for_grid({24, 24, 5}, false);
  Rng rng(18);
  const Network net(a, rng);

  // conv f x (c k k k) + f, spatial 24 ->12 -> 6 -> 6 -> 6.
  const size_t conv1 = 32 * (20 * 1 * 3 * 3) + 32;
  const size_t conv2 = 32 * (32 * 1 * 3 * 3) + 32;
  const size_t conv3 = 64 * (32 * 1 * 3 * 3) + 64;
  const size_t conv4 = 64 * (64 * 1 * 3 * 3) + 64;
  const size_t dense1 = 256 * (64 * 6 * 6) + 256;
  const size_t dense2 = 128 * 256 + 128;
  const size_t head = 8 * 128 + 8;
  CHECK(net.param_count() ==
        conv1 + conv2 + conv3 + conv4 + dense1 + dense2 + head);

  SUBCASE("dueling head adds the value branch") {
    const Architecture duel = Architecture::default_for_grid({24, 24, 5}, true);
    Rng rng2(19);
    const Network dnet(duel, rng2);
    CHECK(dnet.param_count() == net.param_count() + (1 * 128 + 1));
  }
}

TEST_CASE("identical seeds give bitwise-identical initialization") {
  const Architecture a = Architecture::default_for_grid({8, 8, 3}, true);
  Rng r1(555), r2(555), r3(556);
  const Network n1(a, r1), n2(a, r2), n3(a, r3);
  for (size_t t = 0; t < n1.params().size(); ++t) {
    CHECK(n1.params()[t].data == n2.params()[t].data);
  }
  bool any_diff = false;
  for (size_t t = 0; t < n1.params().size(); ++t)
    if (n1.params()[t].data != n3.params()[t].data) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("results do not depend on the worker thread count") {
  Rng rng(20);
  Architecture a = Architecture::default_for_grid({8, 8, 3}, true);
  Network net(a, rng);
  const Tensor input =
      random_tensor<float>({4, a.input[0], a.input[1], a.input[2], a.input[3]},
                           rng);
  const Tensor coef = random_tensor<float>({4, 8}, rng);

  set_thread_count(1);
  Network::Cache c1;
  const Tensor q1 = net.forward(input, c1);
  const auto g1 = net.backward(c1, coef);

  set_thread_count(4);
  Network::Cache c4;
  const Tensor q4 = net.forward(input, c4);
  const auto g4 = net.backward(c4, coef);
  set_thread_count(0);

  CHECK(q1.data == q4.data);
  for (size_t t = 0; t < g1.size(); ++t) CHECK(g1[t].data == g4[t].data);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = test::scratch_dir("nn");
  Rng rng(21);
  Architecture a = Architecture::default_for_grid({8, 8, 3}, true);
  Network net(a, rng);
  net.set_step_count(12345);

  const auto path = dir / "net.pqn";
  save_checkpoint(net, path);
  const Network loaded = load_checkpoint(path);

  CHECK(loaded.arch() == net.arch());
  CHECK(loaded.step_count() == 12345);
  REQUIRE(loaded.params().size() == net.params().size());
  for (size_t t = 0; t < net.params().size(); ++t) {
    CHECK(loaded.params()[t].shape == net.params()[t].shape);
    CHECK(loaded.params()[t].data == net.params()[t].data);
    CHECK(loaded.adam_m()[t].data == net.adam_m()[t].data);
    CHECK(loaded.adam_v()[t].data == net.adam_v()[t].data);
  }

  SUBCASE("truncated checkpoints name the failing section") {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    const auto cut_path = dir / "cut.pqn";
    std::ofstream out(cut_path, std::ios::binary);
    out.write(bytes.data(), std::streamsize(bytes.size() / 2));
    out.close();
    try {
      load_checkpoint(cut_path);
      FAIL("expected a format error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Format);
      CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }
  }

  SUBCASE("bad magic is rejected") {
    const auto bad = dir / "bad.pqn";
    std::ofstream out(bad, std::ios::binary);
    out << "XXXX" << std::string(100, '\0');
    out.close();
    CHECK_THROWS_AS(load_checkpoint(bad), Error);
  }
}

TEST_CASE("architecture JSON rejects unknown keys") {
  const Architecture a = Architecture::default_for_grid({8, 8, 3}, false);
  const std::string text = a.to_json_string();
  CHECK(Architecture::from_json_string(text) == a);

  std::string corrupted = text;
  corrupted.insert(1, "\"bogus\": 1, ");
  CHECK_THROWS_AS(Architecture::from_json_string(corrupted), Error);
}

TEST_CASE("forward validates the input shape") {
  Rng rng(22);
  Architecture a = Architecture::default_for_grid({8, 8, 3}, false);
  Network net(a, rng);
  Tensor bad(std::vector<uint32_t>{1, 3, 1, 8, 8});
  CHECK_THROWS_AS(net.forward(bad), Error);
}
