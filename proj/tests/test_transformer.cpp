#include <doctest.h>

#include <cmath>
#include <random>

#include "uvim/transformer.hpp"

using namespace uvim;

namespace {

Tensor random_input(std::uint64_t seed, Shape shape) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(n(rng));
  return Tensor(std::move(shape), std::move(v));
}

// Row-major vector helpers for the hand-written oracle below.
using Vec = std::vector<double>;

const Tensor& param(const ParameterSet& p, const std::string& name) {
  const Tensor* t = p.find(name);
  REQUIRE(t != nullptr);
  return *t;
}

Vec affine(const Vec& x, const Tensor& w, const Tensor& b) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  Vec y(out);
  for (std::size_t j = 0; j < out; ++j) {
    double s = b[j];
    for (std::size_t i = 0; i < in; ++i) s += x[i] * w[i * out + j];
    y[j] = s;
  }
  return y;
}

Vec norm(const Vec& x, const Tensor& g, const Tensor& b) {
  double mu = 0, var = 0;
  for (double v : x) mu += v;
  mu /= x.size();
  for (double v : x) var += (v - mu) * (v - mu);
  var /= x.size();
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mu) / std::sqrt(var + 1e-6) * g[i] + b[i];
  return y;
}

double gelu_ref(double x) { return 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x))); }

}  // namespace

TEST_CASE("config validation") {
  TransformerConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.num_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.num_heads = 4;
  cfg.input_size = 60;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("patchify") {
  TransformerConfig cfg{.width = 16, .depth = 1, .num_heads = 2, .mlp_dim = 8, .patch_size = 8, .input_size = 32};
  ParameterSet params;
  Rng rng(1);
  PatchEmbedding embed(params, "embed", cfg, 3, rng);

  SUBCASE("32x32x3 with p=8 gives 16 tokens") {
    Tensor tokens = embed(Tensor({32, 32, 3}));
    CHECK(tokens.shape() == Shape{1, 16, 16});
  }

  SUBCASE("zero image gives the positional embeddings exactly") {
    Tensor tokens = embed(Tensor({1, 32, 32, 3}));
    const auto pos = embed.positions().values();
    CHECK(tokens.values() == pos);
  }

  SUBCASE("swapping two patches swaps the projected tokens") {
    Tensor img = random_input(5, {1, 32, 32, 3});
    Tensor swapped = img.detach();
    auto d = swapped.mutable_data();
    auto src = img.data();
    // Patch (0,1) <-> patch (2,3).
    for (std::size_t r = 0; r < 8; ++r) {
      for (std::size_t c = 0; c < 8; ++c) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const std::size_t a = ((0 * 8 + r) * 32 + (1 * 8 + c)) * 3 + ch;
          const std::size_t b = ((2 * 8 + r) * 32 + (3 * 8 + c)) * 3 + ch;
          d[a] = src[b];
          d[b] = src[a];
        }
      }
    }
    const auto t0 = embed.project(img).values();
    const auto t1 = embed.project(swapped).values();
    const std::size_t w = cfg.width, pa = 1, pb = 2 * 4 + 3;
    for (std::size_t tok = 0; tok < 16; ++tok) {
      const std::size_t other = tok == pa ? pb : tok == pb ? pa : tok;
      for (std::size_t k = 0; k < w; ++k) CHECK(t1[tok * w + k] == t0[other * w + k]);
    }
  }

  SUBCASE("indivisible or wrong-sized images are rejected") {
    CHECK_THROWS_AS(embed(Tensor({30, 30, 3})), ShapeError);
    CHECK_THROWS_AS(embed(Tensor({32, 24, 3})), ShapeError);
    CHECK_THROWS_AS(extract_patches(Tensor({1, 12, 12, 1}), 8), ShapeError);
  }

  SUBCASE("assemble_patches inverts extract_patches") {
    Tensor img = random_input(9, {2, 32, 32, 3});
    CHECK(assemble_patches(extract_patches(img, 8), 4, 8, 3).values() == img.values());
  }
}

TEST_CASE("sine-cosine position table") {
  // Independent evaluation of one row at grid coordinates (y, x).
  auto expected = [](double y, double x, std::size_t width) {
    const std::size_t q = width / 4;
    std::vector<float> row(width, 0.0f);
    for (std::size_t k = 0; k < q; ++k) {
      const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(q));
      row[k] = static_cast<float>(std::sin(y * omega));
      row[q + k] = static_cast<float>(std::cos(y * omega));
      row[2 * q + k] = static_cast<float>(std::sin(x * omega));
      row[3 * q + k] = static_cast<float>(std::cos(x * omega));
    }
    return row;
  };
  auto row = [](const Tensor& t, std::size_t r) {
    const auto v = t.values();
    const std::size_t w = t.dim(1);
    return std::vector<float>(v.begin() + static_cast<std::ptrdiff_t>(r * w), v.begin() + static_cast<std::ptrdiff_t>((r + 1) * w));
  };

  const Tensor fine = init::sincos_2d(8, 16);
  CHECK(fine.shape() == Shape{64, 16});
  const auto a = row(fine, 2 * 8 + 3), b = expected(2.0, 3.0, 16);
  for (std::size_t k = 0; k < 16; ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-6));

  // A 4x4 grid over the same 8x8 frame puts cell (1, 2) at (2.5, 4.5).
  const auto c = row(init::sincos_2d(4, 16, 2.0), 1 * 4 + 2), d = expected(2.5, 4.5, 16);
  for (std::size_t k = 0; k < 16; ++k) CHECK(c[k] == doctest::Approx(d[k]).epsilon(1e-6));

  // Trailing dimensions past a multiple of 4 stay zero.
  const auto e = row(init::sincos_2d(2, 6), 3);
  CHECK(e[4] == 0.0f);
  CHECK(e[5] == 0.0f);
}

TEST_CASE("encoder") {
  SUBCASE("depth 0 is the identity") {
    TransformerConfig cfg{.width = 8, .depth = 0, .num_heads = 2, .mlp_dim = 16};
    ParameterSet params;
    Rng rng(2);
    Encoder enc(params, "enc", cfg, rng);
    Tensor x = random_input(3, {2, 5, 8});
    CHECK(enc(x).values() == x.values());
    CHECK(params.scalar_count() == 0);
  }

  SUBCASE("output shape matches input for any length") {
    TransformerConfig cfg{.width = 8, .depth = 2, .num_heads = 2, .mlp_dim = 16};
    ParameterSet params;
    Rng rng(2);
    Encoder enc(params, "enc", cfg, rng);
    for (std::size_t len : {1u, 4u, 9u}) CHECK(enc(random_input(len, {3, len, 8})).shape() == Shape{3, len, 8});
    CHECK_THROWS_AS(enc(Tensor({4, 8})), ShapeError);
  }

  SUBCASE("single-head width-4 block against a direct computation") {
    TransformerConfig cfg{.width = 4, .depth = 1, .num_heads = 1, .mlp_dim = 6};
    ParameterSet params;
    Rng rng(17);
    Encoder enc(params, "enc", cfg, rng);
    // Non-trivial norms so they are exercised by the oracle.
    for (auto& [name, t] : params.items()) {
      if (name.find("/ln") != std::string::npos || name.find("bias") != std::string::npos) {
        Rng r2(derive_seed(4, name.size()));
        std::uniform_real_distribution<float> u(0.5f, 1.5f);
        for (auto& v : t.mutable_data()) v = u(r2);
      }
    }
    Tensor x = random_input(21, {1, 2, 4});
    const auto out = enc(x).values();

    auto p = [&](const std::string& n) -> const Tensor& { return param(params, "enc/" + n); };
    std::vector<Vec> tok(2, Vec(4));
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t k = 0; k < 4; ++k) tok[t][k] = x[t * 4 + k];
    std::vector<Vec> q(2), k(2), v(2);
    for (std::size_t t = 0; t < 2; ++t) {
      Vec h = norm(tok[t], p("block0/ln1/scale"), p("block0/ln1/bias"));
      q[t] = affine(h, p("block0/attn/query/kernel"), p("block0/attn/query/bias"));
      k[t] = affine(h, p("block0/attn/key/kernel"), p("block0/attn/key/bias"));
      v[t] = affine(h, p("block0/attn/value/kernel"), p("block0/attn/value/bias"));
    }
    for (std::size_t t = 0; t < 2; ++t) {
      double logits[2];
      for (std::size_t s = 0; s < 2; ++s) {
        double dot = 0;
        for (std::size_t c = 0; c < 4; ++c) dot += q[t][c] * k[s][c];
        logits[s] = dot / 2.0;  // sqrt(4)
      }
      const double m = std::max(logits[0], logits[1]);
      const double e0 = std::exp(logits[0] - m), e1 = std::exp(logits[1] - m);
      Vec ctx(4);
      for (std::size_t c = 0; c < 4; ++c) ctx[c] = (e0 * v[0][c] + e1 * v[1][c]) / (e0 + e1);
      Vec attn = affine(ctx, p("block0/attn/out/kernel"), p("block0/attn/out/bias"));
      Vec y(4);
      for (std::size_t c = 0; c < 4; ++c) y[c] = tok[t][c] + attn[c];
      Vec hid = affine(norm(y, p("block0/ln2/scale"), p("block0/ln2/bias")), p("block0/mlp/fc1/kernel"),
                       p("block0/mlp/fc1/bias"));
      for (auto& a : hid) a = gelu_ref(a);
      Vec mlp = affine(hid, p("block0/mlp/fc2/kernel"), p("block0/mlp/fc2/bias"));
      for (std::size_t c = 0; c < 4; ++c) y[c] += mlp[c];
      Vec expect = norm(y, p("ln_final/scale"), p("ln_final/bias"));
      for (std::size_t c = 0; c < 4; ++c) CHECK(out[t * 4 + c] == doctest::Approx(expect[c]).epsilon(1e-5));
    }
  }

  SUBCASE("batch composition does not change per-example outputs") {
    TransformerConfig cfg{.width = 16, .depth = 2, .num_heads = 4, .mlp_dim = 32};
    ParameterSet params;
    Rng rng(8);
    Encoder enc(params, "enc", cfg, rng);
    Tensor batch = random_input(12, {5, 7, 16});
    const auto together = enc(batch).values();
    for (std::size_t b = 0; b < 5; ++b) {
      const auto alone = enc(slice(batch, 0, b, 1)).values();
      for (std::size_t i = 0; i < alone.size(); ++i) {
        CHECK(std::abs(alone[i] - together[b * alone.size() + i]) <= 1e-5);
      }
    }
  }
}

TEST_CASE("decoder") {
  TransformerConfig cfg{.width = 16, .depth = 2, .num_heads = 2, .mlp_dim = 32};
  ParameterSet params;
  Rng rng(31);
  Decoder dec(params, "dec", cfg, rng);
  Tensor memory = random_input(1, {2, 5, 16});
  Tensor target = random_input(2, {2, 6, 16});

  SUBCASE("perturbing position i leaves earlier outputs bitwise unchanged") {
    const auto base = dec(target, memory).values();
    for (std::size_t i = 0; i < 6; ++i) {
      Tensor bumped = target.detach();
      for (std::size_t b = 0; b < 2; ++b) bumped.mutable_data()[(b * 6 + i) * 16 + 3] += 0.5f;
      const auto out = dec(bumped, memory).values();
      for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t pos = 0; pos < 6; ++pos) {
          bool same = true;
          for (std::size_t c = 0; c < 16; ++c) same &= out[(b * 6 + pos) * 16 + c] == base[(b * 6 + pos) * 16 + c];
          if (pos < i) CHECK(same);
          if (pos == i) CHECK_FALSE(same);
        }
      }
    }
  }

  SUBCASE("empty memory is rejected") { CHECK_THROWS_AS(dec(target, Tensor({2, 0, 16})), ShapeError); }

  SUBCASE("depth 0 is the identity") {
    TransformerConfig c0 = cfg;
    c0.depth = 0;
    ParameterSet p0;
    Decoder d0(p0, "dec", c0, rng);
    CHECK(d0(target, memory).values() == target.values());
  }

  SUBCASE("causal mask layout") {
    Tensor m = causal_mask(3);
    CHECK(m[0] == 0.0f);
    CHECK(std::isinf(m[1]));
    CHECK(m[3] == 0.0f);
    CHECK(m[4] == 0.0f);
    CHECK(std::isinf(m[5]));
  }
}

TEST_CASE("parameter counts match the closed form") {
  TransformerConfig cfg{.width = 128, .depth = 6, .num_heads = 4, .mlp_dim = 512, .patch_size = 8, .input_size = 64};
  // Hand-evaluated: per block 2 norms (512) + 4 projections (4*(128*128+128)=66048) + MLP
  // (128*512+512 + 512*128+128 = 131712) = 198272; 6 blocks + final norm 256.
  CHECK(encoder_parameter_count(cfg) == 6 * 198272 + 256);
  ParameterSet enc_params, dec_params, emb_params;
  Rng rng(0);
  Encoder enc(enc_params, "e", cfg, rng);
  Decoder dec(dec_params, "d", cfg, rng);
  PatchEmbedding emb(emb_params, "p", cfg, 3, rng);
  CHECK(enc_params.scalar_count() == encoder_parameter_count(cfg));
  CHECK(dec_params.scalar_count() == decoder_parameter_count(cfg));
  CHECK(emb_params.scalar_count() == patch_embedding_parameter_count(cfg, 3));
  CHECK(patch_embedding_parameter_count(cfg, 3) == 192 * 128 + 128 + 64 * 128);
}
