// Acceptance runner. Each criterion is checked by `uvim_acceptance <n>` and
// prints one PASS/FAIL line; the exit status is nonzero on FAIL.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "support/gradcheck.hpp"
#include "support/masks.hpp"
#include "support/sampler_oracle.hpp"
#include "support/vq_oracle.hpp"
#include "uvim/runner.hpp"

using namespace uvim;
using namespace uvim::testing;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr std::size_t kQuantizeQueries = 1000;
constexpr double kEmaTolerance = 1e-12;
constexpr double kVqSeconds = 10.0;
constexpr std::size_t kDropoutDraws = 10000;
constexpr double kDropoutLow = 0.45, kDropoutHigh = 0.55;
constexpr std::size_t kRandomMasks = 100;
constexpr std::size_t kChiSquareSamples = 20000;
constexpr double kStage1PixelAccuracy = 0.95;
constexpr double kStage1Pq = 0.85;
constexpr double kStage1Seconds = 45.0 * 60.0;
constexpr double kOracleMarginPq = 0.20;  // 20 PQ points
constexpr std::size_t kSeeds = 3, kSeedsRequired = 2;
constexpr double kSweepTolerancePq = 0.01;  // 1 PQ point

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream out;
  out << std::setprecision(precision) << v;
  return out.str();
}

std::ostream& progress() { return std::cerr; }

// Desk-scale configuration shared by the ablation and sweep criteria.
RunConfig desk_config(std::uint64_t seed) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.model.input_size = 32;
  cfg.model.patch_size = 4;
  cfg.model.width = 64;
  cfg.model.num_heads = 4;
  cfg.model.mlp_dim = 256;
  cfg.model.f_depth = 4;
  cfg.model.oracle_depth = 2;
  cfg.model.lm_enc_depth = 3;
  cfg.model.lm_dec_depth = 2;
  cfg.model.code_len = 16;
  cfg.model.dict_size = 64;
  cfg.model.codeword_dim = 32;
  cfg.data.max_shapes = 4;
  cfg.batch_size = 16;
  cfg.total_steps = 1000;
  cfg.warmup_steps = 50;
  cfg.log_training_steps = 100;
  cfg.log_eval_steps = 1000;
  cfg.eval_size = 128;
  cfg.stage2_batch_size = 16;
  cfg.stage2_total_steps = 1000;
  cfg.stage2_warmup_steps = 50;
  cfg.stage2_log_eval_steps = 1000;
  cfg.stage2_eval_size = 128;
  return cfg;
}

Outcome criterion1() {
  const auto start = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_name;
  auto cases = primitive_grad_cases();
  cases.push_back(composed_mlp_case());
  for (const auto& c : cases) {
    const double err = gradcheck(c);
    if (!(err <= worst)) {
      worst = err;
      worst_name = c.name;
    }
  }
  const double elapsed = seconds_since(start);
  const bool pass = worst < kGradTolerance && elapsed < kGradSeconds;
  return {pass, std::to_string(cases.size()) + " cases, max relative error " + fmt(worst) + " (" + worst_name +
                    ", < " + fmt(kGradTolerance) + "), " + fmt(elapsed, 3) + " s (< " + fmt(kGradSeconds) + ")"};
}

Outcome criterion2() {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t mismatches = quantize_oracle_mismatches(kQuantizeQueries, 64, 16, 2024);
  const double ema = ema_single_step_deviation(11);

  // Entry 2 never receives an assignment over a full usage window.
  constexpr std::size_t d = 8, window = 5;
  Rng init(3);
  Codebook book(4, d, 0.9, window, init, 1.0);
  const std::vector<int> code = {0, 0, 1, 3};
  for (std::size_t t = 0; t < window; ++t) {
    std::vector<double> z;
    for (int c : code)
      for (std::size_t k = 0; k < d; ++k) z.push_back(book.entries()[c * d + k]);
    book.ema_update(Tensor64({code.size(), d}, z), code);
  }
  const auto before = book.entries().values();
  Rng rng(4);
  const auto respawned = book.respawn_dead_entries(book.default_noise_scale(), rng);
  const auto after = book.entries().values();
  bool replaced = respawned == std::vector<int>{2};
  double to_donor = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    replaced = replaced && after[2 * d + k] != before[2 * d + k];
    to_donor = std::max(to_donor, std::abs(after[2 * d + k] - after[k]));
  }
  replaced = replaced && to_donor < 10 * book.default_noise_scale();
  const double elapsed = seconds_since(start);
  const bool pass = mismatches == 0 && ema <= kEmaTolerance && replaced && elapsed < kVqSeconds;
  return {pass, std::to_string(mismatches) + "/" + std::to_string(kQuantizeQueries) +
                    " quantize mismatches, EMA deviation " + fmt(ema) + " (<= 1e-12), dead entry " +
                    (replaced ? "replaced by a noisy copy of the most used entry" : "NOT replaced") + ", " +
                    fmt(elapsed, 3) + " s (< " + fmt(kVqSeconds) + ")"};
}

Outcome criterion3() {
  constexpr std::size_t n = 16, d = 4;
  Rng rng(5);
  const Tensor z = Tensor::full({n, d}, 1.5f);
  double zeroed_total = 0.0;
  std::size_t saw_none = 0, saw_all = 0;
  bool edges_ok = true;
  for (std::size_t i = 0; i < kDropoutDraws; ++i) {
    const auto mask = sample_code_dropout_mask(n, rng);
    std::size_t zeroed = 0;
    for (float m : mask) zeroed += m == 0.0f;
    zeroed_total += static_cast<double>(zeroed);
    if (zeroed == 0 || zeroed == n) {
      const auto out = apply_code_mask(z, mask).values();
      for (float v : out) edges_ok = edges_ok && v == (zeroed == 0 ? 1.5f : 0.0f);
      (zeroed == 0 ? saw_none : saw_all) += 1;
    }
  }
  const double fraction = zeroed_total / static_cast<double>(kDropoutDraws * n);
  const bool pass = fraction >= kDropoutLow && fraction <= kDropoutHigh && saw_none > 0 && saw_all > 0 && edges_ok;
  return {pass, "mean zeroed fraction " + fmt(fraction) + " in [0.45, 0.55]; k=0 draws " + std::to_string(saw_none) +
                    ", k=n draws " + std::to_string(saw_all) + (edges_ok ? ", both exact" : ", edge draw mismatch")};
}

Outcome criterion4() {
  std::mt19937_64 rng(4);
  bool identity = true, canonical = true;
  for (std::size_t i = 0; i < kRandomMasks; ++i) {
    const PanopticMask m = random_mask(rng, 12, 12, 5, 8, i % 2 == 0);
    identity = identity && panoptic_quality(m, m).pq() == 1.0;
    const PanopticMask c = canonicalize_instances(m);
    canonical = canonical && canonicalize_instances(c) == c && canonicalize_instances(permute_ids(m, rng)) == c;
  }

  PanopticMask gt = blank(10, 10, kVoidClass), pred = blank(10, 10, kVoidClass);
  paint(gt, 0, 0, 0, 9, 2, 1);  // 10 px; prediction covers 8 of them: IoU 0.8
  paint(pred, 0, 0, 0, 7, 2, 1);
  paint(gt, 5, 5, 0, 3, 3, 2);  // same pixels, wrong class: one FP and one FN
  paint(pred, 5, 5, 0, 3, 4, 2);
  const auto q = panoptic_quality(pred, gt);
  const bool hand = q.tp == 1 && q.fp == 1 && q.fn == 1 && q.pq() == 0.4;

  const DepthBins bins;
  constexpr std::size_t sweep = 100001;
  DepthMap dense{1, sweep, std::vector<float>(sweep)};
  for (std::size_t k = 0; k < sweep; ++k) {
    dense.values[k] = static_cast<float>(bins.min + (bins.max - bins.min) * k / (sweep - 1));
  }
  const DepthMap back = depth_dequantize(depth_quantize(dense, bins), 1, sweep, bins);
  double worst = 0.0;
  for (std::size_t k = 0; k < sweep; ++k) {
    worst = std::max(worst, std::abs(static_cast<double>(back.values[k]) - dense.values[k]));
  }
  // Float storage of depths adds at most a few ulps at 8.0.
  const bool depth = worst <= bins.bin_width() / 2 + 1e-6;

  const bool pass = identity && hand && depth && canonical;
  return {pass, std::string("PQ(m, m) = 1 on ") + std::to_string(kRandomMasks) + " masks: " + (identity ? "yes" : "no") +
                    "; TP+FP+FN case PQ = " + fmt(q.pq()) + "; depth round-trip max error " + fmt(worst) +
                    " (half bin " + fmt(bins.bin_width() / 2) + "); canonicalization idempotent and permutation " +
                    "invariant: " + (canonical ? "yes" : "no")};
}

Outcome criterion5() {
  const ModelConfig cfg = tiny_lm_config();
  const TaskConfig task;
  Rng init(2);
  LanguageModel lm(cfg, task, init);
  randomize_heads(lm.params(), 3);
  Rng image_rng(4);
  const Tensor images = init::normal(image_rng, {4, cfg.input_size, cfg.input_size, 3}, 0.5);
  Rng a(10), b(987654321);
  const GuidingCode ca = sample_code(lm, images, 0.0, a), cb = sample_code(lm, images, 0.0, b);
  const bool deterministic = ca == cb;
  const bool argmax = is_teacher_forced_argmax_chain(lm, images, ca);
  Rng probe_rng(6);
  const Tensor probe = init::normal(probe_rng, {1, cfg.input_size, cfg.input_size, 3}, 0.5);
  const auto chi = first_symbol_chi_square(lm, probe, kChiSquareSamples, 7);
  const bool pass = deterministic && argmax && chi.pass() && chi.min_expected >= 5.0;
  return {pass, std::string("T=0 seed independent: ") + (deterministic ? "yes" : "no") + ", equals argmax chain: " +
                    (argmax ? "yes" : "no") + "; chi-square " + fmt(chi.statistic) + " vs critical " +
                    fmt(chi.critical) + " (df 7, alpha 0.01, " + std::to_string(kChiSquareSamples) +
                    " samples, min expected " + fmt(chi.min_expected) + ")"};
}

Outcome criterion6(const fs::path& work) {
  RunConfig cfg;  // defaults: 64x64 panoptic, n = 16, N = 64, 3000 steps, batch 32, 256 held out
  cfg.log_eval_steps = 1000;
  const auto start = std::chrono::steady_clock::now();
  const Stage1Run run = run_stage1(cfg, {.out_dir = (work / "criterion6").string(), .log = &progress()});
  const double elapsed = seconds_since(start);
  const double accuracy = metric_value(run.final_metrics, "pixel_accuracy");
  const double pq = metric_value(run.final_metrics, "pq");
  const bool pass = accuracy >= kStage1PixelAccuracy && pq >= kStage1Pq && elapsed <= kStage1Seconds;
  return {pass, "oracle-guided pixel accuracy " + fmt(accuracy) + " (>= 0.95), PQ " + fmt(pq) + " (>= 0.85) on " +
                    std::to_string(cfg.eval_size) + " held-out scenes, " + fmt(elapsed / 60.0, 3) +
                    " min (<= 45)"};
}

Outcome criterion7(const fs::path& work) {
  const std::vector<std::string> arms = {"default", "no_dropout", "no_oracle", "non_autoregressive"};
  std::size_t a = 0, b = 0, c = 0, d = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const auto rows = run_ablations(desk_config(seed),
                                    {.out_dir = (work / "criterion7" / ("seed" + std::to_string(seed))).string(),
                                     .log = &progress()},
                                    arms);
    std::map<std::string, AblationRow> by_arm;
    for (const auto& r : rows) by_arm[r.arm] = r;
    auto ok = [&](const std::string& arm) { return by_arm[arm].status == "ok"; };
    const AblationRow &def = by_arm["default"], &nod = by_arm["no_dropout"], &noo = by_arm["no_oracle"],
                      &nar = by_arm["non_autoregressive"];
    const bool ia = ok("default") && ok("no_oracle") && *def.stage1 - *noo.stage1 >= kOracleMarginPq;
    const bool ib = ok("default") && ok("non_autoregressive") && *def.stage2 > *nar.stage2;
    const bool ic = ok("default") && ok("no_dropout") && *nod.stage1 >= *def.stage1;
    const bool id = ok("default") && ok("no_dropout") && *def.stage2_nll < *nod.stage2_nll;
    a += ia;
    b += ib;
    c += ic;
    d += id;
    auto v = [](const std::optional<double>& x) { return x ? fmt(*x) : std::string("N/A"); };
    detail += " | seed " + std::to_string(seed) + ": S1 " + v(def.stage1) + " vs no-oracle " + v(noo.stage1) +
              "; S2 AR " + v(def.stage2) + " vs non-AR " + v(nar.stage2) + "; S1 no-dropout " + v(nod.stage1) +
              "; NLL dropout " + v(def.stage2_nll) + " vs no-dropout " + v(nod.stage2_nll);
  }
  const bool pass = a >= kSeedsRequired && b >= kSeedsRequired && c >= kSeedsRequired && d >= kSeedsRequired;
  auto count = [](std::size_t k) { return std::to_string(k) + "/" + std::to_string(kSeeds); };
  return {pass, "(a) oracle margin >= 20 PQ points " + count(a) + ", (b) AR > non-AR " + count(b) +
                    ", (c) no-dropout S1 >= dropout S1 " + count(c) + ", (d) dropout NLL < no-dropout NLL " +
                    count(d) + detail};
}

Outcome criterion8(const fs::path& work) {
  const std::vector<std::size_t> lengths = {4, 16, 64};
  const auto rows = run_code_sweep(desk_config(0), lengths, {64}, false,
                                   {.out_dir = (work / "criterion8").string(), .log = &progress()});
  bool pass = rows.size() == lengths.size();
  std::string detail = "PQ by code_len:";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    pass = pass && rows[i].status == "ok";
    detail += " " + std::to_string(rows[i].code_len) + "=" + (rows[i].stage1_metric ? fmt(*rows[i].stage1_metric) : "failed");
    if (i > 0 && rows[i].stage1_metric && rows[i - 1].stage1_metric) {
      pass = pass && *rows[i].stage1_metric >= *rows[i - 1].stage1_metric - kSweepTolerancePq;
    }
  }
  return {pass, detail + " (non-decreasing within 1 point)"};
}

Outcome criterion9() {
  RunConfig cfg = desk_config(5);
  cfg.total_steps = 30;
  cfg.warmup_steps = 5;
  cfg.log_training_steps = 5;
  cfg.log_eval_steps = 15;
  cfg.eval_size = 16;
  cfg.stage2_total_steps = 20;
  cfg.stage2_warmup_steps = 5;
  cfg.stage2_log_eval_steps = 10;
  cfg.stage2_eval_size = 16;

  const Stage1Run s1 = run_stage1(cfg);
  const Checkpoint ckpt1 = stage1_checkpoint(cfg, *s1.trainer);
  const Stage2Run s2 = run_stage2(cfg, ckpt1);

  // Oracle code through the predict path versus the stage-I reconstruction.
  const auto examples = SyntheticDataset(cfg.data_config(), cfg.task).holdout(8);
  const Tensor images = batch_images(examples);
  const Stage1Trainer& t = *s1.trainer;
  const GuidingCode code = oracle_codes(t.oracle(), cfg.task, examples);
  bool substituted;
  {
    NoRecordScope<float> no_record;
    substituted = t.base().forward(images, code_embeddings(t.oracle().codebook(), code, examples.size())).values() ==
                  t.reconstruct(examples).values();
  }
  const auto via_predict = decode_with_code(t.base(), t.oracle().codebook(), images, code);
  const auto via_stage1 = decode_batch(cfg.task, t.reconstruct(examples));
  for (std::size_t e = 0; e < examples.size(); ++e) {
    substituted = substituted && std::get<PanopticMask>(via_predict[e]) == std::get<PanopticMask>(via_stage1[e]);
  }

  // Checkpoint round trips through bytes.
  const auto reloaded1 = load_stage1_trainer(Checkpoint::from_bytes(ckpt1.bytes()));
  const Checkpoint ckpt2 = Checkpoint::from_bytes(stage2_checkpoint(cfg, *s2.stage1, *s2.trainer).bytes());
  const auto reloaded2 = load_stage2_trainer(ckpt2);
  bool roundtrip = reloaded1->reconstruct(examples).values() == t.reconstruct(examples).values();
  {
    NoRecordScope<float> no_record;
    const LanguageModel &a = s2.trainer->lm(), &b = reloaded2->lm();
    roundtrip = roundtrip && a.sequence_logits(a.encode_image(images), code).values() ==
                                 b.sequence_logits(b.encode_image(images), code).values();
  }
  roundtrip = roundtrip && stage2_checkpoint(cfg, *load_stage1_trainer(ckpt2), *reloaded2).bytes() == ckpt2.bytes();

  // Full reruns with the same seed.
  const Stage1Run s1_again = run_stage1(cfg);
  const Stage2Run s2_again = run_stage2(cfg, stage1_checkpoint(cfg, *s1_again.trainer));
  const bool traces = s1_again.train_rows == s1.train_rows && s1_again.eval_rows == s1.eval_rows &&
                      s2_again.train_rows == s2.train_rows && s2_again.eval_rows == s2.eval_rows;

  const bool pass = substituted && roundtrip && traces;
  auto yes = [](bool v) { return v ? std::string("yes") : std::string("no"); };
  return {pass, "oracle code via predict equals reconstruction bitwise: " + yes(substituted) +
                    "; checkpoint round trip bitwise: " + yes(roundtrip) + "; fixed-seed traces identical: " +
                    yes(traces) + " (" + std::to_string(s1.train_rows.size() + s1.eval_rows.size() +
                                                        s2.train_rows.size() + s2.eval_rows.size()) +
                    " rows)"};
}

Outcome criterion10(const fs::path& work) {
  const fs::path path = work / "criterion6" / "stage1.ckpt";
  if (!fs::exists(path)) return {false, "missing " + path.string() + "; run criterion 6 first"};
  const auto trainer = load_stage1_trainer(Checkpoint::load(path.string()));
  const RunConfig& cfg = Checkpoint::load(path.string()).config;
  const auto examples = SyntheticDataset(cfg.data_config(), cfg.task).holdout(cfg.eval_size);

  const auto batch = std::span<const Example>(examples).first(16);
  const Tensor images = batch_images(batch);
  const GuidingCode code = oracle_codes(trainer->oracle(), cfg.task, batch);
  const auto plain = decode_with_code(trainer->base(), trainer->oracle().codebook(), images, code);
  bool identity = true;
  for (MaskMode mode : {MaskMode::zero_embedding, MaskMode::random_codeword, MaskMode::constant_codeword}) {
    Rng rng(1);
    const auto probed = probe_masked_code(trainer->base(), trainer->oracle().codebook(), images, code,
                                          MaskProbeSpec{.top = 1, .left = 1, .mode = mode, .constant_index = 3}, rng);
    for (std::size_t e = 0; e < batch.size(); ++e) {
      identity = identity && std::get<PanopticMask>(probed[e]) == std::get<PanopticMask>(plain[e]);
    }
  }

  // Top-left quarter of the code grid replaced by random codewords.
  const std::size_t side = trainer->model_config().code_side();
  const MaskProbeSpec spec{.height = side / 2, .width = side / 2, .mode = MaskMode::random_codeword};
  const ProbeResult probe = run_mask_probe(*trainer, examples, spec, 10);
  const bool lower = probe.masked_accuracy < probe.unmasked_accuracy;
  return {identity && lower, std::string("empty-region probes are identity for all modes: ") +
                                 (identity ? "yes" : "no") + "; random_codeword masked accuracy " +
                                 fmt(probe.masked_accuracy) + " < unmasked " + fmt(probe.unmasked_accuracy) + " over " +
                                 std::to_string(examples.size()) + " held-out scenes"};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: uvim_acceptance <criterion 1-10> [work-dir]\n";
    return 2;
  }
  const int criterion = std::atoi(argv[1]);
  const fs::path work = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "uvim_acceptance";
  const std::map<int, std::function<Outcome()>> criteria = {
      {1, criterion1},
      {2, criterion2},
      {3, criterion3},
      {4, criterion4},
      {5, criterion5},
      {6, [&] { return criterion6(work); }},
      {7, [&] { return criterion7(work); }},
      {8, [&] { return criterion8(work); }},
      {9, criterion9},
      {10, [&] { return criterion10(work); }},
  };
  const auto it = criteria.find(criterion);
  if (it == criteria.end()) {
    std::cerr << "unknown criterion " << argv[1] << "\n";
    return 2;
  }
  Outcome outcome;
  try {
    outcome = it->second();
  } catch (const std::exception& e) {
    outcome = {false, std::string("error: ") + e.what()};
  }
  const std::string verdict = "criterion " + std::to_string(criterion) + ": " + (outcome.pass ? "PASS" : "FAIL") +
                              " - " + outcome.detail;
  std::cout << verdict << std::endl;
  fs::create_directories(work);
  std::ofstream(work / ("criterion" + std::to_string(criterion) + ".verdict")) << verdict << "\n";
  return outcome.pass ? 0 : 1;
}
