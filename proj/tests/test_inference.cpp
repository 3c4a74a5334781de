#include <doctest.h>

#include <cmath>

#include "support/sampler_oracle.hpp"
#include "uvim/training.hpp"

using namespace uvim;
using namespace uvim::testing;

namespace {

Tensor random_images(std::size_t b, std::uint64_t seed) {
  Rng rng(seed);
  return init::normal(rng, {b, 16, 16, 3}, 0.5);
}

}  // namespace

TEST_CASE("symbol distribution") {
  const std::vector<float> logits = {1.0f, 3.0f, 3.0f, -1.0f};
  const auto greedy = symbol_distribution(logits, 0.0);
  CHECK(greedy == std::vector<double>{0.0, 1.0, 0.0, 0.0});
  const auto p = symbol_distribution(logits, 1.0);
  const double z = std::exp(1.0) + 2 * std::exp(3.0) + std::exp(-1.0);
  CHECK(p[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-12));
  CHECK(p[3] == doctest::Approx(std::exp(-1.0) / z).epsilon(1e-12));
  const auto flat = symbol_distribution(logits, 1e6);
  for (double v : flat) CHECK(v == doctest::Approx(0.25).epsilon(1e-5));
  CHECK_THROWS_AS(symbol_distribution(logits, -0.5), std::invalid_argument);
  Rng rng(1);
  CHECK(sample_symbol(logits, 0.0, rng) == 1);
  CHECK_THROWS_AS(symbol_distribution({}, 1.0), std::invalid_argument);
}

TEST_CASE("sample_code") {
  const ModelConfig cfg = tiny_lm_config();
  const TaskConfig task;
  Rng init(2);
  LanguageModel lm(cfg, task, init);
  randomize_heads(lm.params(), 3);
  const Tensor images = random_images(3, 4);

  SUBCASE("T = 0 is seed independent and equals the argmax chain") {
    Rng a(10), b(11);
    const GuidingCode ca = sample_code(lm, images, 0.0, a), cb = sample_code(lm, images, 0.0, b);
    CHECK(ca == cb);
    CHECK(ca.size() == 3 * cfg.code_len);
    CHECK(is_teacher_forced_argmax_chain(lm, images, ca));
  }

  SUBCASE("T > 0 is reproducible for a fixed seed and emits no BOS") {
    const SamplingParams params{.temperature = 1.0, .seed = 5, .num_samples = 3};
    const auto first = sample_codes(lm, images, params), second = sample_codes(lm, images, params);
    CHECK(first == second);
    CHECK(first[0] != first[1]);
    for (const auto& code : first)
      for (int c : code) CHECK((c >= 0 && c < static_cast<int>(cfg.dict_size)));
  }

  SUBCASE("negative temperature is rejected") {
    Rng rng(0);
    CHECK_THROWS_AS(sample_code(lm, images, -1.0, rng), std::invalid_argument);
    CHECK_THROWS_AS(sample_codes(lm, images, SamplingParams{.num_samples = 0}), std::invalid_argument);
  }

  SUBCASE("first-symbol frequencies match the model at T = 1") {
    const auto outcome = first_symbol_chi_square(lm, random_images(1, 6), 20000, 7);
    MESSAGE("chi-square " << outcome.statistic << " (critical " << outcome.critical << ", min expected "
                          << outcome.min_expected << ")");
    CHECK(outcome.min_expected >= 5.0);
    CHECK(outcome.pass());
  }

  SUBCASE("very high temperature approaches the uniform entropy") {
    const std::size_t samples = 20000, n = cfg.code_len, N = cfg.dict_size;
    const Tensor image = random_images(1, 8);
    std::vector<float> tiled(samples * image.numel());
    for (std::size_t e = 0; e < samples; ++e)
      std::copy(image.data().begin(), image.data().end(), tiled.begin() + e * image.numel());
    Rng rng(9);
    const GuidingCode code = sample_code(lm, Tensor({samples, 16, 16, 3}, tiled), 1e4, rng);
    for (std::size_t k = 0; k < n; ++k) {
      std::vector<double> counts(N, 0.0);
      for (std::size_t e = 0; e < samples; ++e) counts[code[e * n + k]] += 1.0;
      double entropy = 0.0;
      for (double c : counts)
        if (c > 0) entropy -= c / samples * std::log(c / samples);
      CHECK(std::abs(entropy - std::log(static_cast<double>(N))) <= 0.05 * std::log(static_cast<double>(N)));
    }
  }
}

TEST_CASE("predict and plumbing") {
  ModelConfig cfg = tiny_lm_config();
  cfg.codebook_init_std = 0.3;
  const TaskConfig task;
  SyntheticDataset data(DataConfig{.seed = 3, .image_size = 16, .holdout_size = 4}, task);
  const auto batch = data.holdout(4);
  Stage1Trainer stage1(cfg, task, Stage1Config{.steps = 10, .warmup_steps = 0}, 1);
  stage1.step(batch);
  randomize_heads(stage1.base().params(), 2, 0.05f);
  Rng init(3);
  LanguageModel lm(cfg, task, init);
  randomize_heads(lm.params(), 4);
  const Tensor images = batch_images(batch);
  const Codebook& book = stage1.oracle().codebook();

  SUBCASE("oracle code through the predict path equals stage-1 reconstruction") {
    const GuidingCode code = oracle_codes(stage1.oracle(), task, batch);
    const auto via_code = decode_with_code(stage1.base(), book, images, code);
    const auto via_stage1 = decode_batch(task, stage1.reconstruct(batch));
    for (std::size_t e = 0; e < batch.size(); ++e) {
      CHECK(std::get<PanopticMask>(via_code[e]) == std::get<PanopticMask>(via_stage1[e]));
    }
    NoRecordScope<float> no_record;
    CHECK(stage1.base().forward(images, code_embeddings(book, code, 4)).values() ==
          stage1.reconstruct(batch).values());
  }

  SUBCASE("output extent and determinism at T = 0") {
    Rng a(1), b(2);
    const auto pa = predict(stage1.base(), book, lm, images, 0.0, a);
    const auto pb = predict(stage1.base(), book, lm, images, 0.0, b);
    REQUIRE(pa.size() == 4);
    for (std::size_t e = 0; e < 4; ++e) {
      const auto& m = std::get<PanopticMask>(pa[e]);
      CHECK((m.height == 16 && m.width == 16));
      CHECK(m == std::get<PanopticMask>(pb[e]));
      CHECK(canonicalize_instances(m) == m);
    }
  }

  SUBCASE("mismatched geometry is rejected") {
    ModelConfig other = cfg;
    other.dict_size = 16;
    Rng r(5);
    LanguageModel wrong(other, task, r);
    Rng rng(0);
    CHECK_THROWS_AS(predict(stage1.base(), book, wrong, images, 0.0, rng), std::invalid_argument);
    try {
      check_compatible(cfg, book, other);
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("model.dict_size") != std::string::npos);
    }
  }
}

TEST_CASE("masked code probes") {
  ModelConfig cfg = tiny_lm_config();
  cfg.code_len = 16;
  const TaskConfig task;
  Rng init(1);
  BaseModel f(cfg, task, init);
  randomize_heads(f.params(), 2, 0.05f);
  Codebook book(cfg.dict_size, cfg.codeword_dim, 0.99, 10, init, 1.0);
  const Tensor images = random_images(2, 3);
  GuidingCode code(2 * 16);
  for (std::size_t i = 0; i < code.size(); ++i) code[i] = static_cast<int>((i * 5) % 8);
  const auto plain = decode_with_code(f, book, images, code);
  auto same = [](const std::vector<TaskLabel>& a, const std::vector<TaskLabel>& b) {
    for (std::size_t e = 0; e < a.size(); ++e)
      if (!(std::get<PanopticMask>(a[e]) == std::get<PanopticMask>(b[e]))) return false;
    return true;
  };

  SUBCASE("empty region is the identity for every mode") {
    for (MaskMode mode : {MaskMode::zero_embedding, MaskMode::random_codeword, MaskMode::constant_codeword}) {
      Rng rng(4);
      CHECK(same(probe_masked_code(f, book, images, code, MaskProbeSpec{.top = 1, .left = 2, .mode = mode}, rng), plain));
    }
  }

  SUBCASE("full zero_embedding equals an all-zero code") {
    Rng rng(5);
    const auto masked =
        probe_masked_code(f, book, images, code, MaskProbeSpec{.height = 4, .width = 4}, rng);
    CHECK(same(masked, decode_with_embeddings(f, images, Tensor::zeros({2, 16, cfg.codeword_dim}))));
  }

  SUBCASE("constant mode equals decoding the substituted code") {
    Rng rng(6);
    const MaskProbeSpec spec{.top = 1, .left = 1, .height = 2, .width = 3, .mode = MaskMode::constant_codeword,
                             .constant_index = 7};
    GuidingCode expected = code;
    for (std::size_t e = 0; e < 2; ++e)
      for (std::size_t p = 0; p < 16; ++p)
        if (spec.contains(p / 4, p % 4)) expected[e * 16 + p] = 7;
    CHECK(same(probe_masked_code(f, book, images, code, spec, rng), decode_with_code(f, book, images, expected)));
  }

  SUBCASE("out-of-bounds regions are rejected") {
    Rng rng(7);
    CHECK_THROWS_AS(probe_masked_code(f, book, images, code, MaskProbeSpec{.top = 3, .height = 2, .width = 1}, rng),
                    std::out_of_range);
    CHECK_THROWS_AS(probe_masked_code(f, book, images, code,
                                      MaskProbeSpec{.height = 1, .width = 1, .mode = MaskMode::constant_codeword,
                                                    .constant_index = 8},
                                      rng),
                    std::out_of_range);
    CHECK(parse_mask_mode(mask_mode_name(MaskMode::random_codeword)) == MaskMode::random_codeword);
    CHECK_THROWS_AS(parse_mask_mode("blur"), std::invalid_argument);
  }

  SUBCASE("pixel region covers the masked cells") {
    const auto region = probe_pixel_region(MaskProbeSpec{.top = 1, .left = 2, .height = 1, .width = 2}, 4, 16, 16);
    std::size_t covered = 0;
    for (std::size_t r = 0; r < 16; ++r)
      for (std::size_t c = 0; c < 16; ++c) {
        covered += region[r * 16 + c];
        CHECK(region[r * 16 + c] == (r >= 4 && r < 8 && c >= 8));
      }
    CHECK(covered == 32);
  }
}

TEST_CASE("colorization samples are diverse at T = 1") {
  ModelConfig cfg = tiny_lm_config();
  cfg.codebook_init_std = 0.3;
  const TaskConfig task{.kind = TaskKind::colorization};
  SyntheticDataset data(DataConfig{.seed = 4, .image_size = 16, .train_size = 64, .holdout_size = 2}, task);
  Stage1Trainer stage1(cfg, task, Stage1Config{.steps = 40, .warmup_steps = 5, .opt = {.lr = 1e-3}}, 2);
  Stage2Trainer stage2(cfg, task, Stage2Config{.steps = 40, .warmup_steps = 5, .opt = {.lr = 1e-3}}, 3);
  for (std::size_t s = 0; s < 40; ++s) {
    const auto batch = data.train_batch(s, 8);
    stage1.step(batch);
    stage2.step(stage1.oracle(), batch);
  }
  const auto probe = data.holdout(1);
  const Tensor x = batch_images(probe);
  Rng a(1), b(2);
  const auto first = predict(stage1.base(), stage1.oracle().codebook(), stage2.lm(), x, 1.0, a);
  const auto second = predict(stage1.base(), stage1.oracle().codebook(), stage2.lm(), x, 1.0, b);
  const auto& i1 = std::get<Image>(first[0]);
  const auto& i2 = std::get<Image>(second[0]);
  CHECK((i1.height == 16 && i1.channels == 3));
  CHECK_FALSE(i1 == i2);
  for (float v : i1.pixels) CHECK((v >= -1.0f && v <= 1.0f));
}
