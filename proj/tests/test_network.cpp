#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "hadanet/hadamard.hpp"
#include "hadanet/network.hpp"
#include "hadanet/tensor.hpp"

using hadanet::DataSplit;
using hadanet::DenseLayer;
using hadanet::LayerSpec;
using hadanet::Network;
using hadanet::Tensor;
using hadanet::TrainConfig;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint32_t seed,
                     float lo, float hi) {
  Tensor t(std::move(shape));
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> dist(lo, hi);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

// Two linearly separable 2-D blobs.
DataSplit blob_split(std::size_t n, std::uint32_t seed) {
  DataSplit split;
  split.images = Tensor({n, 2});
  split.labels.resize(n);
  std::mt19937 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.45f);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const float cx = label == 0 ? -1.5f : 1.5f;
    split.images(i, 0) = cx + noise(rng);
    split.images(i, 1) = -cx + noise(rng);
    split.labels[i] = label;
  }
  return split;
}

Network blob_net(std::uint64_t seed) {
  Network net({LayerSpec::dense(2, 16), LayerSpec::relu(),
               LayerSpec::dense(16, 2)});
  net.init_params(seed);
  return net;
}

// Test-only full-precision twin of a Dense-ReLU-Dense stack, written from
// the textbook formulas with raw loops. Used to check the engine at beta 1.
struct DenseTwin {
  std::vector<float> w1, b1, w2, b2;  // w1: (h, in), w2: (k, h)
  std::size_t in, h, k;

  struct Result {
    std::vector<float> logits;
    std::vector<float> gw1, gb1, gw2, gb2;
    float loss;
  };

  Result run(const std::vector<float>& x, std::size_t batch,
             const std::vector<int>& labels) const {
    Result r;
    std::vector<float> z1(batch * h), a1(batch * h);
    r.logits.assign(batch * k, 0.0f);
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t j = 0; j < h; ++j) {
        float s = b1[j];
        for (std::size_t d = 0; d < in; ++d)
          s += x[i * in + d] * w1[j * in + d];
        z1[i * h + j] = s;
        a1[i * h + j] = s > 0 ? s : 0;
      }
      for (std::size_t c = 0; c < k; ++c) {
        float s = b2[c];
        for (std::size_t j = 0; j < h; ++j)
          s += a1[i * h + j] * w2[c * h + j];
        r.logits[i * k + c] = s;
      }
    }
    // softmax cross-entropy with mean reduction
    std::vector<float> glog(batch * k);
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
      float mx = r.logits[i * k];
      for (std::size_t c = 1; c < k; ++c)
        mx = std::max(mx, r.logits[i * k + c]);
      float denom = 0;
      for (std::size_t c = 0; c < k; ++c)
        denom += std::exp(r.logits[i * k + c] - mx);
      total += std::log(denom) -
               (r.logits[i * k + static_cast<std::size_t>(labels[i])] - mx);
      for (std::size_t c = 0; c < k; ++c) {
        const float p = std::exp(r.logits[i * k + c] - mx) / denom;
        glog[i * k + c] =
            (p - (static_cast<int>(c) == labels[i] ? 1.0f : 0.0f)) /
            static_cast<float>(batch);
      }
    }
    r.loss = static_cast<float>(total / batch);

    r.gw2.assign(k * h, 0.0f);
    r.gb2.assign(k, 0.0f);
    std::vector<float> ga1(batch * h, 0.0f);
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t c = 0; c < k; ++c) {
        const float g = glog[i * k + c];
        r.gb2[c] += g;
        for (std::size_t j = 0; j < h; ++j) {
          r.gw2[c * h + j] += g * a1[i * h + j];
          ga1[i * h + j] += g * w2[c * h + j];
        }
      }
    r.gw1.assign(h * in, 0.0f);
    r.gb1.assign(h, 0.0f);
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t j = 0; j < h; ++j) {
        const float g = z1[i * h + j] > 0 ? ga1[i * h + j] : 0.0f;
        r.gb1[j] += g;
        for (std::size_t d = 0; d < in; ++d)
          r.gw1[j * in + d] += g * x[i * in + d];
      }
    return r;
  }
};

}  // namespace

TEST_CASE("beta-1 network reproduces an independent dense implementation") {
  const std::size_t in = 4, h = 8, k = 3, batch = 6;
  Network net({LayerSpec::dense(in, h), LayerSpec::relu(),
               LayerSpec::dense(h, k)});
  net.init_params(11);

  DenseTwin twin;
  twin.in = in;
  twin.h = h;
  twin.k = k;
  auto& l1 = static_cast<DenseLayer&>(*net.layers()[0]);
  auto& l2 = static_cast<DenseLayer&>(*net.layers()[2]);
  twin.w1 = l1.weight().value.storage();
  twin.b1 = l1.bias().value.storage();
  twin.w2 = l2.weight().value.storage();
  twin.b2 = l2.bias().value.storage();

  const Tensor x = random_tensor({batch, in}, 77, -1.0f, 1.0f);
  const std::vector<int> labels{0, 1, 2, 1, 0, 2};

  const Tensor logits = net.forward(x, /*train=*/true);
  const auto loss = hadanet::softmax_cross_entropy(logits, labels);
  net.backward(loss.grad_logits);

  const DenseTwin::Result twin_res = twin.run(x.storage(), batch, labels);
  for (std::size_t i = 0; i < logits.numel(); ++i)
    REQUIRE_THAT(logits[i],
                 Catch::Matchers::WithinAbs(twin_res.logits[i], 1e-5));
  for (std::size_t i = 0; i < twin.w1.size(); ++i)
    REQUIRE_THAT(l1.weight().grad[i],
                 Catch::Matchers::WithinAbs(twin_res.gw1[i], 1e-5));
  for (std::size_t i = 0; i < twin.w2.size(); ++i)
    REQUIRE_THAT(l2.weight().grad[i],
                 Catch::Matchers::WithinAbs(twin_res.gw2[i], 1e-5));
  for (std::size_t i = 0; i < h; ++i)
    REQUIRE_THAT(l1.bias().grad[i],
                 Catch::Matchers::WithinAbs(twin_res.gb1[i], 1e-5));
}

TEST_CASE("hand-computed single-layer logit") {
  // weights [1,-2,3,-4] binarized at beta_w=2 give [1.5,-1.5,3.5,-3.5];
  // an all-ones input cancels it to zero.
  Network net({LayerSpec::dense(4, 1, /*bw=*/2, /*ba=*/1)});
  auto& l = static_cast<DenseLayer&>(*net.layers()[0]);
  l.weight().value = Tensor({1, 4}, {1, -2, 3, -4});
  const Tensor x({1, 4}, {1, 1, 1, 1});
  const Tensor y = net.forward(x, false);
  REQUIRE_THAT(y[0], Catch::Matchers::WithinAbs(0.0, 1e-6));
}

TEST_CASE("eval-mode forward is deterministic") {
  TrainConfig cfg;
  cfg.conv1_filters = 4;
  cfg.conv2_filters = 6;
  cfg.fc_hidden = 24;
  Network net(hadanet::lenet_specs(cfg));
  net.init_params(3);
  const Tensor x = random_tensor({2, 1, 28, 28}, 5, -1.0f, 1.0f);
  const Tensor a = net.forward(x, false);
  const Tensor b = net.forward(x, false);
  REQUIRE(a.storage() == b.storage());
}

TEST_CASE("zero upstream gradient produces zero weight gradients") {
  Network net({LayerSpec::dense(5, 3, 2, 1)});
  net.init_params(21);
  const Tensor x = random_tensor({4, 5}, 22, -1.0f, 1.0f);
  net.forward(x, true);
  net.backward(Tensor({4, 3}));
  auto& l = static_cast<DenseLayer&>(*net.layers()[0]);
  for (std::size_t i = 0; i < l.weight().grad.numel(); ++i)
    REQUIRE(l.weight().grad[i] == 0.0f);
}

TEST_CASE("beta-1 gradient matches finite differences of the loss") {
  // all |W| <= 1 and |A| <= 1; at beta 1 the binarization sites are exact
  // pass-throughs, so the engine gradient equals the loss FD gradient.
  const std::size_t in = 3, out = 2, batch = 4;
  Network net({LayerSpec::dense(in, out, 1, 1)});
  auto& l = static_cast<DenseLayer&>(*net.layers()[0]);
  l.weight().value = random_tensor({out, in}, 31, -0.9f, 0.9f);
  const Tensor x = random_tensor({batch, in}, 32, -0.9f, 0.9f);
  const std::vector<int> labels{0, 1, 1, 0};

  const Tensor logits = net.forward(x, true);
  const auto loss = hadanet::softmax_cross_entropy(logits, labels);
  net.backward(loss.grad_logits);

  const float h = 1e-2f;
  for (std::size_t i = 0; i < l.weight().value.numel(); ++i) {
    const float orig = l.weight().value[i];
    l.weight().value[i] = orig + h;
    const float lp = hadanet::softmax_cross_entropy(net.forward(x, false),
                                                    labels)
                         .loss;
    l.weight().value[i] = orig - h;
    const float lm = hadanet::softmax_cross_entropy(net.forward(x, false),
                                                    labels)
                         .loss;
    l.weight().value[i] = orig;
    const float fd = (lp - lm) / (2 * h);
    const float tol = 1e-2f * std::max(0.05f, std::fabs(fd));
    REQUIRE_THAT(l.weight().grad[i], Catch::Matchers::WithinAbs(fd, tol));
  }
}

TEST_CASE("binarized dense layer gradient matches the composed oracle") {
  // Engine gradient through a beta_w=2 dense layer == the backward rule
  // applied per row to the plain dense-layer weight gradient.
  const std::size_t in = 6, out = 3, batch = 5;
  Network net({LayerSpec::dense(in, out, 2, 1)});
  net.init_params(41);
  auto& l = static_cast<DenseLayer&>(*net.layers()[0]);
  const Tensor x = random_tensor({batch, in}, 42, -1.0f, 1.0f);
  const Tensor g = random_tensor({batch, out}, 43, -1.0f, 1.0f);

  net.forward(x, true);
  net.backward(g);

  // oracle: grad wrt binarized weights is g^T x, then the backward rule
  Tensor grad_wtilde({out, in});
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t d = 0; d < in; ++d) {
      float s = 0;
      for (std::size_t i = 0; i < batch; ++i) s += g(i, o) * x(i, d);
      grad_wtilde(o, d) = s;
    }
  const Tensor expected =
      hadanet::hadamard_backward_rows(l.weight().value, grad_wtilde, 2);
  for (std::size_t i = 0; i < expected.numel(); ++i)
    REQUIRE_THAT(l.weight().grad[i],
                 Catch::Matchers::WithinAbs(expected[i], 1e-5));
}

TEST_CASE("training separable blobs reaches 99 percent") {
  DataSplit train_split = blob_split(400, 1);
  DataSplit test_split = blob_split(100, 2);
  Network net = blob_net(7);
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch = 32;
  cfg.lr = 0.01f;
  cfg.lr_decay_period = 100;
  const auto result = hadanet::train(net, train_split, test_split, cfg);
  REQUIRE_FALSE(result.diverged);
  REQUIRE(result.history.back().train_acc >= 0.99);
}

TEST_CASE("empty training split is an error, not a silent success") {
  DataSplit empty;
  DataSplit test_split = blob_split(10, 3);
  Network net = blob_net(1);
  TrainConfig cfg;
  REQUIRE_THROWS_AS(hadanet::train(net, empty, test_split, cfg),
                    hadanet::DataError);
}

TEST_CASE("divergence is reported as a structured failure") {
  DataSplit train_split = blob_split(64, 4);
  Network net = blob_net(2);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch = 16;
  cfg.lr = 1e30f;  // drives the weights to overflow
  const auto result = hadanet::train(net, train_split, train_split, cfg);
  REQUIRE(result.diverged);
  REQUIRE(result.divergence_epoch >= 0);
}

TEST_CASE("evaluate scores a memorizing network at 1.0") {
  // one-hot passthrough: weights the identity, each sample its own class
  Network net({LayerSpec::dense(10, 10)});
  auto& l = static_cast<DenseLayer&>(*net.layers()[0]);
  for (std::size_t i = 0; i < 10; ++i) l.weight().value(i, i) = 5.0f;
  DataSplit split;
  split.images = Tensor({10, 10});
  for (std::size_t i = 0; i < 10; ++i) {
    split.images(i, i) = 1.0f;
    split.labels.push_back(static_cast<int>(i));
  }
  REQUIRE(hadanet::evaluate(net, split) == 1.0);
}

TEST_CASE("an untrained network scores chance level on balanced data") {
  DataSplit split;
  const std::size_t n = 1000;
  split.images = random_tensor({n, 8}, 99, -1.0f, 1.0f);
  for (std::size_t i = 0; i < n; ++i)
    split.labels.push_back(static_cast<int>(i % 10));
  Network net({LayerSpec::dense(8, 10)});
  net.init_params(17);
  const double acc = hadanet::evaluate(net, split);
  REQUIRE(acc >= 0.05);
  REQUIRE(acc <= 0.15);
}

TEST_CASE("evaluate rejects an empty split") {
  Network net = blob_net(5);
  REQUIRE_THROWS_AS(hadanet::evaluate(net, DataSplit{}), hadanet::DataError);
}

TEST_CASE("accuracy is invariant under the evaluation batch size") {
  DataSplit split = blob_split(101, 6);
  Network net = blob_net(8);
  REQUIRE(hadanet::evaluate(net, split, 1) ==
          hadanet::evaluate(net, split, 256));
}

TEST_CASE("learning-rate step decay") {
  TrainConfig cfg;
  cfg.lr = 0.005f;
  cfg.lr_decay = 0.1f;
  cfg.lr_decay_period = 15;
  REQUIRE(hadanet::update_learning_rate(0.005f, 0, cfg) == 0.005f);
  REQUIRE_THAT(hadanet::update_learning_rate(0.005f, 15, cfg),
               Catch::Matchers::WithinRel(0.0005f, 1e-6f));
  REQUIRE_THAT(hadanet::update_learning_rate(0.005f, 45, cfg),
               Catch::Matchers::WithinRel(5e-6f, 1e-5f));
  REQUIRE_THAT(hadanet::update_learning_rate(0.005f, 29, cfg),
               Catch::Matchers::WithinRel(0.0005f, 1e-6f));
}

TEST_CASE("forward never touches the master weights") {
  Network net({LayerSpec::dense(6, 4, 2, 2)});
  net.init_params(61);
  auto& l = static_cast<DenseLayer&>(*net.layers()[0]);
  const std::vector<float> before = l.weight().value.storage();
  const Tensor x = random_tensor({3, 6}, 62, -1.0f, 1.0f);
  net.forward(x, true);
  net.backward(random_tensor({3, 4}, 63, -1.0f, 1.0f));
  REQUIRE(l.weight().value.storage() == before);
}

TEST_CASE("packed inference equals the dense binarized forward") {
  for (auto betas : {std::pair<std::size_t, std::size_t>{4, 2},
                     {16, 1},
                     {8, 8}}) {
    Network net({LayerSpec::dense(64, 10, betas.first, betas.second)});
    net.init_params(71);
    auto& l = static_cast<DenseLayer&>(*net.layers()[0]);
    const Tensor x = random_tensor({5, 64}, 72, -1.0f, 1.0f);

    net.set_packed_inference(false);
    const Tensor dense = net.forward(x, false);

    // reference on explicitly binarized operands through the oracle GEMM
    const Tensor xt = betas.second > 1
                          ? hadanet::binarize_activations(x, betas.second)
                          : x;
    const Tensor wt = hadanet::binarize_weights(l.weight().value, betas.first);
    Tensor ref = hadanet::matmul_ref(xt, hadanet::transpose(wt));
    for (std::size_t i = 0; i < ref.extent(0); ++i)
      for (std::size_t j = 0; j < ref.extent(1); ++j)
        ref(i, j) += l.bias().value[j];

    net.set_packed_inference(true);
    const Tensor packed = net.forward(x, false);

    for (std::size_t i = 0; i < ref.numel(); ++i) {
      const float tol = 1e-4f * std::max(1.0f, std::fabs(ref[i]));
      REQUIRE_THAT(packed[i], Catch::Matchers::WithinAbs(ref[i], tol));
      REQUIRE_THAT(dense[i], Catch::Matchers::WithinAbs(ref[i], tol));
    }
  }
}

TEST_CASE("batchnorm train and eval modes agree after stats converge") {
  Network net({LayerSpec::batchnorm(3, /*spatial=*/false)});
  const Tensor x = random_tensor({64, 3}, 81, -2.0f, 2.0f);
  Tensor train_out;
  for (int i = 0; i < 400; ++i) train_out = net.forward(x, true);
  const Tensor eval_out = net.forward(x, false);
  for (std::size_t i = 0; i < x.numel(); ++i)
    REQUIRE_THAT(eval_out[i],
                 Catch::Matchers::WithinAbs(train_out[i], 1e-2));
}

TEST_CASE("fixed seed and one worker give bit-identical metrics") {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 32;
  cfg.workers = 1;
  cfg.seed = 5;

  auto run = [&] {
    DataSplit train_split = blob_split(200, 10);
    DataSplit test_split = blob_split(50, 11);
    Network net = blob_net(cfg.seed);
    return hadanet::train(net, train_split, test_split, cfg);
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    REQUIRE(a.history[i].train_loss == b.history[i].train_loss);
    REQUIRE(a.history[i].train_acc == b.history[i].train_acc);
    REQUIRE(a.history[i].test_acc == b.history[i].test_acc);
  }
}

TEST_CASE("a small binarized LeNet trains end to end") {
  TrainConfig cfg;
  cfg.conv1_filters = 4;
  cfg.conv2_filters = 8;
  cfg.fc_hidden = 32;
  cfg.beta_w = 4;
  cfg.beta_a = 4;
  cfg.epochs = 2;
  cfg.batch = 32;
  cfg.lr = 0.01f;
  Network net(hadanet::lenet_specs(cfg));
  net.init_params(cfg.seed);
  DataSplit train_split = hadanet::synthetic_digits(320, 1);
  DataSplit test_split = hadanet::synthetic_digits(80, 2);
  const auto result = hadanet::train(net, train_split, test_split, cfg);
  REQUIRE_FALSE(result.diverged);
  // two epochs on a tiny slice: just demand better than chance
  REQUIRE(result.history.back().test_acc > 0.2);
}

TEST_CASE("shape chain mismatches are rejected") {
  Network net({LayerSpec::dense(4, 2)});
  net.init_params(1);
  REQUIRE_THROWS_AS(net.forward(Tensor({3, 5}), false),
                    std::invalid_argument);
  Network conv({LayerSpec::conv2d(2, 3, 3, 3, 1, 0)});
  conv.init_params(1);
  REQUIRE_THROWS_AS(conv.forward(Tensor({1, 2, 8, 8}), false),
                    std::invalid_argument);
}
