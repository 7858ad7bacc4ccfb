#include <doctest.h>

#include <cmath>
#include <limits>

#include "more/encoders.hpp"
#include "more/errors.hpp"

using namespace more;
using T = Tensor<double>;

namespace {

T random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  T::Array v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = rng.normal(0.0, scale);
  return T(std::move(shape), std::move(v));
}

VitConfig small_cfg(Index depth = 2, Index dim = 16, Index heads = 2) {
  VitConfig c;
  c.depth = depth;
  c.dim = dim;
  c.heads = heads;
  c.mlp_ratio = 2;
  return c;
}

std::vector<T> tensors_of(const ParamList<double>& params) {
  std::vector<T> out;
  for (const auto& p : params)
    if (!p.buffer && p.tensor.requires_grad()) out.push_back(p.tensor);
  return out;
}

}  // namespace

TEST_CASE("dropkey_schedule") {
  CHECK(dropkey_schedule(0, 12, 0.2, 0.0) == 0.2);
  CHECK(dropkey_schedule(11, 12, 0.2, 0.0) == 0.0);
  CHECK(dropkey_schedule(6, 12, 0.2, 0.0) == doctest::Approx(0.2 * (1.0 - 6.0 / 11.0)).epsilon(1e-15));
  CHECK(dropkey_schedule(0, 1, 0.3, 0.1) == 0.3);
  CHECK_THROWS_AS(dropkey_schedule(4, 4, 0.1, 0.0), ParameterError);
  for (Index depth = 2; depth <= 12; ++depth) {
    CHECK(dropkey_schedule(depth - 1, depth, 0.1, 0.0) == 0.0);
    for (Index l = 0; l < depth; ++l) CHECK(dropkey_schedule(l, depth, 0.1, 0.0) >= 0.0);
  }

  // Exact linearity holds where every value is representable (dyadic grid);
  // elsewhere second differences are at rounding level.
  for (Index l = 1; l + 1 < 5; ++l) {
    const double d2 = dropkey_schedule(l + 1, 5, 0.25, 0.0) - 2 * dropkey_schedule(l, 5, 0.25, 0.0) +
                      dropkey_schedule(l - 1, 5, 0.25, 0.0);
    CHECK(d2 == 0.0);
  }
  for (Index l = 1; l + 1 < 12; ++l) {
    const double a = dropkey_schedule(l - 1, 12, 0.1, 0.0), b = dropkey_schedule(l, 12, 0.1, 0.0),
                 c = dropkey_schedule(l + 1, 12, 0.1, 0.0);
    CHECK(b <= a);
    CHECK(c <= b);
    CHECK(std::abs(c - 2 * b + a) <= 4 * std::numeric_limits<double>::epsilon());
  }
}

TEST_CASE("dropkey_mask frequency") {
  Rng rng(3);
  for (double rate : {0.1, 0.3}) {
    const auto mask = dropkey_mask(10, 10, 100, rate, rng);
    long dropped = 0, total = 0;
    for (const auto& g : mask)
      for (const auto& row : g)
        for (char m : row) {
          dropped += m;
          ++total;
        }
    REQUIRE(total == 10000);
    CHECK(std::abs(static_cast<double>(dropped) / static_cast<double>(total) - rate) <= 0.02);
  }
  SUBCASE("padding keys are never drawn and a key always survives") {
    std::vector<std::vector<char>> valid = {{1, 0, 0, 0}};
    const auto mask = dropkey_mask(1, 200, 4, 0.9, rng, valid);
    for (const auto& row : mask[0]) {
      CHECK(row[0] == 0);
      CHECK(row[1] + row[2] + row[3] == 0);
    }
  }
  CHECK_THROWS_AS(dropkey_mask(1, 1, 1, 1.0, rng), ParameterError);
}

TEST_CASE("dropkey_attention") {
  Rng rng(5);
  const T q = random_tensor({3, 5, 4}, rng), k = random_tensor({3, 5, 4}, rng), v = random_tensor({3, 5, 4}, rng);

  SUBCASE("rate 0 matches plain attention") {
    Rng r(1);
    const auto train = dropkey_attention(q, k, v, 0.0, true, &r);
    const auto eval = dropkey_attention(q, k, v, 0.0, false, nullptr);
    const T plain = bmm(softmax(scale(bmm_nt(q, k), 1.0 / std::sqrt(4.0)), -1), v);
    CHECK((train.output.value() == plain.value()).all());
    CHECK((eval.output.value() == plain.value()).all());
    // Independent evaluation with Eigen.
    for (Index g = 0; g < 3; ++g) {
      Eigen::MatrixXd Q(5, 4), K(5, 4), V(5, 4);
      for (Index i = 0; i < 5; ++i)
        for (Index j = 0; j < 4; ++j) {
          Q(i, j) = q.value()[(g * 5 + i) * 4 + j];
          K(i, j) = k.value()[(g * 5 + i) * 4 + j];
          V(i, j) = v.value()[(g * 5 + i) * 4 + j];
        }
      Eigen::MatrixXd A = (Q * K.transpose()) / 2.0;
      for (Index i = 0; i < 5; ++i) {
        A.row(i) = (A.row(i).array() - A.row(i).maxCoeff()).exp();
        A.row(i) /= A.row(i).sum();
      }
      const Eigen::MatrixXd O = A * V;
      for (Index i = 0; i < 5; ++i)
        for (Index j = 0; j < 4; ++j) CHECK(std::abs(O(i, j) - plain.value()[(g * 5 + i) * 4 + j]) < 1e-12);
    }
  }

  SUBCASE("eval rows sum to one") {
    const auto r = dropkey_attention(q, k, v, 0.5, false, nullptr);
    const auto a = r.attention.matrix();
    for (Index i = 0; i < a.rows(); ++i) CHECK(std::abs(a.row(i).sum() - 1.0) < 1e-9);
  }

  SUBCASE("masked keys get zero weight") {
    Rng r(9), mirror(9);
    const auto res = dropkey_attention(q, k, v, 0.4, true, &r);
    const auto mask = dropkey_mask(3, 5, 5, 0.4, mirror);
    const auto a = res.attention.matrix();
    for (Index g = 0; g < 3; ++g)
      for (Index i = 0; i < 5; ++i) {
        double row_sum = 0;
        for (Index j = 0; j < 5; ++j) {
          if (mask[static_cast<std::size_t>(g)][static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) CHECK(a(g * 5 + i, j) == 0.0);
          row_sum += a(g * 5 + i, j);
        }
        CHECK(std::abs(row_sum - 1.0) < 1e-12);
      }
  }

  SUBCASE("2 queries x 4 keys against a per-row softmax") {
    const T q2 = random_tensor({1, 2, 3}, rng), k2 = random_tensor({1, 4, 3}, rng), v2 = random_tensor({1, 4, 2}, rng);
    Rng r(42), mirror(42);
    const auto res = dropkey_attention(q2, k2, v2, 0.5, true, &r);
    const auto mask = dropkey_mask(1, 2, 4, 0.5, mirror);
    for (Index i = 0; i < 2; ++i) {
      std::vector<double> logits(4), w(4, 0.0);
      double total = 0;
      for (Index j = 0; j < 4; ++j) {
        double dot = 0;
        for (Index c = 0; c < 3; ++c) dot += q2.value()[i * 3 + c] * k2.value()[j * 3 + c];
        logits[static_cast<std::size_t>(j)] = dot / std::sqrt(3.0);
      }
      for (Index j = 0; j < 4; ++j)
        if (!mask[0][static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) total += w[static_cast<std::size_t>(j)] = std::exp(logits[static_cast<std::size_t>(j)]);
      for (Index c = 0; c < 2; ++c) {
        double expected = 0;
        for (Index j = 0; j < 4; ++j) expected += w[static_cast<std::size_t>(j)] / total * v2.value()[j * 2 + c];
        CHECK(std::abs(res.output.value()[i * 2 + c] - expected) < 1e-12);
      }
    }
  }

  SUBCASE("errors") {
    Rng r(1);
    CHECK_THROWS_AS(dropkey_attention(q, k, v, 1.0, true, &r), ParameterError);
    CHECK_THROWS_AS(dropkey_attention(q, k, v, 0.2, true, nullptr), ParameterError);
    CHECK_THROWS_AS(dropkey_attention(q, random_tensor({3, 5, 3}, rng), v, 0.0, false, nullptr), DimensionError);
  }
}

TEST_CASE("LoRA") {
  Rng rng(7);
  LoraLinear<double> layer(12, 10, false, rng);
  const T x = random_tensor({6, 12}, rng);
  const T base = layer.forward(x);
  layer.enable_lora({4, 8.0, true}, rng);
  const T adapted = layer.forward(x);
  CHECK((adapted.value() - base.value()).abs().maxCoeff() == 0.0);
  CHECK_FALSE(layer.base.weight.requires_grad());
  CHECK(layer.lora_a.requires_grad());
  CHECK(layer.lora_scale == 2.0);

  LoraLinear<double> small(4, 8, false, rng);
  CHECK_THROWS_AS(small.enable_lora({4, 8.0, true}, rng), ParameterError);
  CHECK_THROWS_AS(small.enable_lora({0, 8.0, true}, rng), ParameterError);

  SUBCASE("nonzero adapter adds (alpha/r) x A B") {
    layer.lora_b.mutable_value().setConstant(0.5);
    const T y = layer.forward(x);
    const Eigen::MatrixXd expected = x.matrix() * layer.base.weight.matrix() +
                                     2.0 * (x.matrix() * layer.lora_a.matrix()) * layer.lora_b.matrix();
    CHECK((y.matrix() - expected).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("trainable_fraction") {
  Rng rng(1);
  Linear<double> layer(99, 10, true, rng);
  ParamList<double> params;
  layer.collect("fc", params);
  CHECK(trainable_fraction(params) == 1.0);
  layer.weight.set_requires_grad(false);
  CHECK(parameter_count(params) == 1000);
  CHECK(trainable_fraction(params) == 0.01);

  SUBCASE("LoRA text encoder reference config") {
    VitConfig cfg;
    cfg.depth = 4;
    cfg.dim = 256;
    cfg.heads = 4;
    cfg.dropkey_rate_first = cfg.dropkey_rate_last = 0.0;
    const LoraConfig lora{4, 8.0, true};
    const Index vocab = 1000, d = 256, r = 4, hidden = 4 * d, max_len = 512;
    TextEncoder<double> text(vocab, cfg, &lora, rng);
    ParamList<double> p;
    text.collect("text", p);

    const Index per_layer_base = 2 * 2 * d           // two layer norms
                                 + 3 * d * d         // q, k, v
                                 + d * d + d         // output projection
                                 + d * hidden + hidden + hidden * d + d;  // MLP
    const Index adapters_per_layer = 3 * (d * r + r * d);
    const Index total = vocab * d + max_len * d + 4 * (per_layer_base + adapters_per_layer) + 2 * d;
    const Index trainable = 4 * adapters_per_layer;
    CHECK(parameter_count(p) == total);
    CHECK(parameter_count(p, true) == trainable);
    CHECK(trainable_fraction(p) == static_cast<double>(trainable) / static_cast<double>(total));
    CHECK(trainable_fraction(p) < 0.02);
  }
}

TEST_CASE("ECG encoder") {
  Rng rng(11);
  const auto cfg = small_cfg();
  CHECK(EcgEncoder<double>::token_count(1000) == 48);
  EcgEncoder<double> enc(1000, cfg, rng);
  CHECK(enc.tokens == 48);
  CHECK(enc.pos.dim(0) == 49);

  SUBCASE("receptive fields follow the conv arithmetic") {
    // Conv2 output t reads conv1 outputs [4t, 4t + 6]; conv1 output p reads samples [5p, 5p + 14].
    for (Index t : {0, 1, 47}) {
      const auto [first, last] = EcgEncoder<double>::receptive_field(t);
      CHECK(first == 5 * (4 * t));
      CHECK(last == 5 * (4 * t + 6) + 14);
    }
    CHECK(EcgEncoder<double>::receptive_field(47).second <= 999);
  }

  SUBCASE("zero signal gives zero conv tokens") {
    const T tokens = enc.conv_tokens(T::zeros({2, 12, 1000}), true);
    CHECK(tokens.shape() == Shape{2, 48, 16});
    CHECK(tokens.value().abs().maxCoeff() == 0.0);
  }

  SUBCASE("too short") {
    CHECK_THROWS_AS(EcgEncoder<double>(20, cfg, rng), DimensionError);
    CHECK_THROWS_AS(enc.forward(T::zeros({1, 12, 500}), false, nullptr), DimensionError);
  }

  SUBCASE("gradient through both conv layers") {
    EcgEncoder<double> e(80, cfg, rng);
    const T x = random_tensor({3, 12, 80}, rng);
    const T w = random_tensor({3, e.tokens, 16}, rng);
    ParamList<double> p;
    e.collect("ecg", p);
    std::vector<T> conv_params;
    for (const auto& np : p)
      if (np.path.find("conv") != std::string::npos || np.path.find("bn") != std::string::npos)
        if (!np.buffer) conv_params.push_back(np.tensor);
    const double err = grad_check_params<double>([&] { return sum(mul(e.conv_tokens(x, true), w)); }, conv_params, 1e-6, 20, 3);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("image encoder") {
  Rng rng(13);
  const auto cfg = small_cfg();
  ImageEncoder<double> enc(64, cfg, rng);
  const T tokens = enc.embed(random_tensor({2, 64, 64}, rng));
  CHECK(tokens.shape() == Shape{2, 17, 16});

  SUBCASE("zero image gives positions only") {
    const T z = enc.embed(T::zeros({1, 64, 64}));
    const auto zm = z.matrix();
    const auto pm = enc.pos.matrix();
    CHECK((zm.bottomRows(16) - pm.bottomRows(16)).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("patch projection equals a stride-16 convolution") {
    const T img = random_tensor({1, 64, 64}, rng);
    const T proj = enc.patch.forward(patchify(img, 16));
    const auto w = enc.patch.weight.matrix();  // [256, D]
    for (Index py = 0; py < 4; ++py)
      for (Index px = 0; px < 4; ++px)
        for (Index c = 0; c < 16; ++c) {
          double acc = enc.patch.bias.value()[c];
          for (Index dy = 0; dy < 16; ++dy)
            for (Index dx = 0; dx < 16; ++dx) acc += img.value()[(py * 16 + dy) * 64 + px * 16 + dx] * w(dy * 16 + dx, c);
          CHECK(std::abs(acc - proj.value()[(py * 4 + px) * 16 + c]) < 1e-10);
        }
  }

  SUBCASE("non-multiple sizes are padded") {
    ImageEncoder<double> odd(40, cfg, rng);
    CHECK(odd.grid == 3);
    CHECK(odd.forward(random_tensor({2, 40, 40}, rng), false, nullptr).shape() == Shape{2, 16});
  }

  SUBCASE("depth 0 returns the normalized CLS input") {
    ImageEncoder<double> flat(32, small_cfg(0), rng);
    const T img = random_tensor({1, 32, 32}, rng);
    const T out = flat.forward(img, false, nullptr);
    Eigen::RowVectorXd cls = flat.embed(img).matrix().row(0);
    const double mu = cls.mean();
    const double var = (cls.array() - mu).square().mean();
    const Eigen::RowVectorXd expected = (cls.array() - mu) / std::sqrt(var + 1e-5);
    CHECK((out.matrix().row(0) - expected).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("eval is deterministic and zero rates make training equal eval") {
    const T img = random_tensor({2, 64, 64}, rng);
    CHECK((enc.forward(img, false, nullptr).value() == enc.forward(img, false, nullptr).value()).all());
    VitConfig zero = small_cfg();
    zero.dropkey_rate_first = zero.dropkey_rate_last = 0.0;
    Rng init(2);
    ImageEncoder<double> z(64, zero, init);
    Rng r(1);
    CHECK((z.forward(img, true, &r).value() == z.forward(img, false, nullptr).value()).all());
  }

  SUBCASE("attention trace rows sum to one") {
    AttentionTrace<double> trace;
    enc.forward(random_tensor({2, 64, 64}, rng), false, nullptr, &trace);
    REQUIRE(trace.attention.size() == 2);
    const auto a = trace.attention[1].matrix();
    CHECK(trace.attention[1].shape() == Shape{4, 17, 17});
    for (Index i = 0; i < a.rows(); ++i) CHECK(std::abs(a.row(i).sum() - 1.0) < 1e-9);
  }

  SUBCASE("full gradient check of a scalar head on a 2-layer ViT") {
    ImageEncoder<double> e(32, small_cfg(2, 8, 2), rng);
    const T img = random_tensor({2, 32, 32}, rng);
    const T head = random_tensor({8, 1}, rng);
    ParamList<double> p;
    e.collect("image", p);
    const double err = grad_check_params<double>([&] { return sum(matmul(e.forward(img, false, nullptr), head)); },
                                                 tensors_of(p), 1e-6, 6, 5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("text encoder") {
  Rng rng(17);
  auto cfg = small_cfg();
  cfg.dropkey_rate_first = cfg.dropkey_rate_last = 0.0;
  const LoraConfig lora{2, 4.0, true};
  TextEncoder<double> enc(30, cfg, &lora, rng, 32);

  const std::vector<TokenId> sentence = {kClsId, 7, 9, 12, kSepId, 20, kSepId};
  SUBCASE("padding does not change the CLS output") {
    const T a = enc.forward({sentence}, false, nullptr);
    const T b = enc.forward({pad_to(sentence, 12)}, false, nullptr);
    const T c = enc.forward(pad_batch({pad_to(sentence, 20), {kClsId, 5, kSepId}}), false, nullptr);
    CHECK((a.value() - b.value()).abs().maxCoeff() < 1e-9);
    CHECK((a.matrix().row(0) - c.matrix().row(0)).cwiseAbs().maxCoeff() < 1e-9);
  }

  SUBCASE("errors") {
    CHECK_THROWS_AS(enc.forward({{kPadId, kPadId}}, false, nullptr), ParameterError);
    CHECK_THROWS_AS(enc.forward({{kClsId, 30}}, false, nullptr), ParameterError);
    CHECK_THROWS_AS(enc.forward({std::vector<TokenId>(33, 5)}, false, nullptr), ParameterError);
  }

  SUBCASE("only adapters train") {
    ParamList<double> p;
    enc.collect("text", p);
    for (const auto& np : p)
      if (!np.buffer) CHECK(np.tensor.requires_grad() == (np.path.ends_with("lora_a") || np.path.ends_with("lora_b")));
  }

  SUBCASE("gradient check through adapters") {
    ParamList<double> p;
    enc.collect("text", p);
    for (auto& np : p)
      if (np.path.ends_with("lora_b")) np.tensor.mutable_value().setRandom();
    const T head = random_tensor({16, 1}, rng);
    const auto batch = pad_batch({sentence, {kClsId, 4, 5, kSepId}});
    const double err = grad_check_params<double>([&] { return sum(matmul(enc.forward(batch, false, nullptr), head)); },
                                                 tensors_of(p), 1e-6, 0, 0);
    CHECK(err < 1e-4);
  }
}
