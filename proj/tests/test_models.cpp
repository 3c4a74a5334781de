#include <doctest.h>

#include <cmath>

#include "uvim/models.hpp"

using namespace uvim;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.width = 32;
  cfg.num_heads = 2;
  cfg.mlp_dim = 64;
  cfg.patch_size = 4;
  cfg.input_size = 16;
  cfg.f_depth = 2;
  cfg.oracle_depth = 1;
  cfg.lm_enc_depth = 1;
  cfg.lm_dec_depth = 2;
  cfg.code_len = 4;
  cfg.dict_size = 8;
  cfg.codeword_dim = 8;
  return cfg;
}

Tensor random_tensor(Rng& rng, Shape shape) { return init::normal(rng, std::move(shape), 1.0); }

// Makes the zero-initialized heads produce non-trivial outputs.
void perturb(ParameterSet& params, Rng& rng) {
  std::normal_distribution<float> n(0.0f, 0.05f);
  for (auto& [name, t] : params.items()) {
    if (name.find("head") == std::string::npos) continue;
    for (float& v : t.mutable_data()) v += n(rng);
  }
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.code_side() == 4);
  cfg.code_len = 12;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ModelConfig{};
  cfg.dict_size = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ModelConfig{};
  cfg.no_image = cfg.no_oracle = true;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("oracle") {
  const ModelConfig cfg = tiny_config();
  const TaskConfig task;
  Rng rng(1);
  const Tensor y = random_tensor(rng, {3, 16, 16, task.label_channels()});
  const Tensor x1 = random_tensor(rng, {3, 16, 16, 3}), x2 = random_tensor(rng, {3, 16, 16, 3});

  SUBCASE("code length is n per example") {
    OracleModel oracle(cfg, task, rng);
    const auto out = oracle.encode(y, x1);
    CHECK(out.code.size() == 3 * cfg.code_len);
    CHECK(out.z_q.shape() == Shape{3, cfg.code_len, cfg.codeword_dim});
    CHECK(out.z_e.shape() == out.z_q.shape());
    for (int c : out.code) CHECK((c >= 0 && c < static_cast<int>(cfg.dict_size)));
    CHECK_THROWS_AS(oracle.encode(y, Tensor{}), ShapeError);
  }

  SUBCASE("image context off makes the code a pure function of the label") {
    ModelConfig off = cfg;
    off.oracle_image_context = false;
    OracleModel oracle(off, task, rng);
    CHECK_FALSE(oracle.uses_image());
    const auto a = oracle.encode(y, x1), b = oracle.encode(y, x2), c = oracle.encode(y, Tensor{});
    CHECK(a.code == b.code);
    CHECK(a.code == c.code);
    CHECK(a.z_e.values() == b.z_e.values());
  }

  SUBCASE("image context on reads the image") {
    OracleModel oracle(cfg, task, rng);
    CHECK(oracle.encode(y, x1).z_e.values() != oracle.encode(y, x2).z_e.values());
  }

  SUBCASE("label channel mismatch is rejected") {
    OracleModel oracle(cfg, task, rng);
    CHECK_THROWS(oracle.encode(random_tensor(rng, {1, 16, 16, 3}), random_tensor(rng, {1, 16, 16, 3})));
  }
}

TEST_CASE("base model") {
  SUBCASE("panoptic logits at the default geometry") {
    ModelConfig cfg;
    cfg.f_depth = 1;
    const TaskConfig task;
    Rng rng(2);
    BaseModel f(cfg, task, rng);
    const Tensor x = random_tensor(rng, {2, 64, 64, 3});
    const Tensor z = random_tensor(rng, {2, cfg.code_len, cfg.codeword_dim});
    const Tensor logits = f.forward(x, z);
    CHECK(logits.shape() == Shape{2, 64, 64, task.num_classes + task.num_instances});
    // All-zero code, as after full dropout.
    const Tensor zero = f.forward(x, Tensor::zeros({2, cfg.code_len, cfg.codeword_dim}));
    CHECK(zero.shape() == logits.shape());
    for (float v : zero.data()) CHECK(std::isfinite(v));
    CHECK_THROWS_AS(f.forward(x, Tensor::zeros({2, cfg.code_len + 1, cfg.codeword_dim})), ShapeError);
    CHECK_THROWS_AS(f.forward(x, Tensor{}), ShapeError);
    CHECK_THROWS(f.forward(random_tensor(rng, {2, 32, 32, 3}), z));
  }

  SUBCASE("every task head keeps the spatial extent") {
    const ModelConfig cfg = tiny_config();
    for (TaskKind kind : {TaskKind::panoptic, TaskKind::depth, TaskKind::colorization}) {
      const TaskConfig task{.kind = kind};
      Rng rng(3);
      BaseModel f(cfg, task, rng);
      const Tensor out = f.forward(random_tensor(rng, {1, 16, 16, task.input_channels()}),
                                   random_tensor(rng, {1, cfg.code_len, cfg.codeword_dim}));
      CHECK(out.shape() == Shape{1, 16, 16, task.output_channels()});
      const TaskLabel decoded = decode_output(task, reshape(out, {16, 16, task.output_channels()}));
      std::visit([](const auto& l) { CHECK((l.height == 16 && l.width == 16)); }, decoded);
    }
  }

  SUBCASE("deterministic and code-sensitive") {
    const ModelConfig cfg = tiny_config();
    const TaskConfig task;
    Rng rng(4);
    BaseModel f(cfg, task, rng);
    perturb(f.params(), rng);
    const Tensor x = random_tensor(rng, {1, 16, 16, 3});
    const Tensor z = random_tensor(rng, {1, cfg.code_len, cfg.codeword_dim});
    CHECK(f.forward(x, z).values() == f.forward(x, z).values());
    Tensor z2 = z.detach();
    z2.mutable_data()[0] += 1.0f;
    CHECK(f.forward(x, z).values() != f.forward(x, z2).values());
  }

  SUBCASE("ablations") {
    ModelConfig cfg = tiny_config();
    const TaskConfig task;
    Rng rng(5);
    const Tensor x1 = random_tensor(rng, {1, 16, 16, 3}), x2 = random_tensor(rng, {1, 16, 16, 3});
    const Tensor z1 = random_tensor(rng, {1, cfg.code_len, cfg.codeword_dim});
    const Tensor z2 = random_tensor(rng, {1, cfg.code_len, cfg.codeword_dim});

    cfg.no_oracle = true;
    BaseModel image_only(cfg, task, rng);
    perturb(image_only.params(), rng);
    CHECK(image_only.forward(x1, z1).values() == image_only.forward(x1, Tensor{}).values());
    CHECK(image_only.params().find("f/code_embed/kernel") == nullptr);

    cfg.no_oracle = false;
    cfg.no_image = true;
    BaseModel code_only(cfg, task, rng);
    perturb(code_only.params(), rng);
    CHECK(code_only.forward(x1, z1).values() == code_only.forward(x2, z1).values());
    CHECK(code_only.forward(x1, z1).values() != code_only.forward(x1, z2).values());
  }
}

TEST_CASE("language model") {
  const ModelConfig cfg = tiny_config();
  const TaskConfig task;
  Rng rng(6);
  LanguageModel lm(cfg, task, rng);
  perturb(lm.params(), rng);
  const std::size_t n = cfg.code_len, N = cfg.dict_size, V = N + 1;
  const Tensor x = random_tensor(rng, {2, 16, 16, 3});
  const Tensor memory = lm.encode_image(x);
  const std::vector<int> codes = {3, 1, 4, 1, 5, 2, 6, 5};

  SUBCASE("vocabulary") {
    CHECK(lm.vocab_size() == V);
    CHECK(lm.bos() == static_cast<int>(N));
    CHECK(lm.sequence_logits(memory, codes).shape() == Shape{2, n, V});
  }

  SUBCASE("empty prefix gives a well-formed distribution") {
    const Tensor logits = real_symbol_logits(lm.next_logits(memory, {}, 0), N);
    CHECK(logits.shape() == Shape{2, N});
    const Tensor p = softmax(logits);
    for (std::size_t e = 0; e < 2; ++e) {
      double total = 0.0;
      for (std::size_t k = 0; k < N; ++k) {
        CHECK(std::isfinite(logits[e * N + k]));
        total += p[e * N + k];
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  SUBCASE("teacher forcing agrees with incremental decoding") {
    const Tensor full = lm.sequence_logits(memory, codes);
    for (std::size_t k = 0; k < n; ++k) {
      std::vector<int> prefix;
      for (std::size_t e = 0; e < 2; ++e)
        for (std::size_t j = 0; j < k; ++j) prefix.push_back(codes[e * n + j]);
      const Tensor step = lm.next_logits(memory, prefix, k);
      for (std::size_t e = 0; e < 2; ++e)
        for (std::size_t v = 0; v < V; ++v) CHECK(std::abs(step[e * V + v] - full[(e * n + k) * V + v]) <= 1e-5f);
    }
  }

  SUBCASE("later symbols never change earlier logits") {
    const Tensor base = lm.sequence_logits(memory, codes);
    std::vector<int> changed = codes;
    changed[2] = 7;  // visible from position 3 onward in example 0
    const Tensor after = lm.sequence_logits(memory, changed);
    for (std::size_t k = 0; k < n; ++k) {
      bool same = true;
      for (std::size_t v = 0; v < V; ++v) same = same && base[k * V + v] == after[k * V + v];
      CHECK(same == (k <= 2));
    }
  }

  SUBCASE("errors") {
    CHECK_THROWS_AS(lm.next_logits(memory, std::vector<int>(2 * n, 0), n), std::invalid_argument);
    CHECK_THROWS_AS(lm.next_logits(memory, std::vector<int>(3, 0), 1), ShapeError);
    CHECK_THROWS_AS(lm.sequence_logits(memory, std::vector<int>(2 * n, static_cast<int>(N))), std::out_of_range);
    CHECK_THROWS_AS(lm.sequence_logits(memory, std::vector<int>(n, 0)), ShapeError);
  }

  SUBCASE("fresh model starts at log N nats") {
    Rng fresh_rng(7);
    LanguageModel fresh(cfg, task, fresh_rng);
    const float loss = fresh.loss(fresh.encode_image(x), codes).item();
    CHECK(loss == doctest::Approx(std::log(static_cast<double>(N))).epsilon(1e-5));
  }

  SUBCASE("non-autoregressive variant ignores the prefix") {
    ModelConfig nar = cfg;
    nar.non_autoregressive = true;
    Rng r(8);
    LanguageModel model(nar, task, r);
    perturb(model.params(), r);
    const Tensor m = model.encode_image(x);
    const Tensor a = model.sequence_logits(m, codes);
    CHECK(a.values() == model.sequence_logits(m, std::vector<int>(2 * n, 0)).values());
    const Tensor step = model.next_logits(m, std::vector<int>{1, 2}, 1);
    for (std::size_t e = 0; e < 2; ++e)
      for (std::size_t v = 0; v < V; ++v) CHECK(std::abs(step[e * V + v] - a[(e * n + 1) * V + v]) <= 1e-5f);
  }
}
