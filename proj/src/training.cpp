#include "uvim/training.hpp"

#include <cmath>
#include <numbers>

namespace uvim {

void Schedule::validate() const {
  if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) throw std::invalid_argument("schedule: base_lr must be >= 0");
  if (decay_type != "cosine" && decay_type != "constant") {
    throw std::invalid_argument("schedule: unknown decay type '" + decay_type + "'");
  }
  if (total_steps == 0) throw std::invalid_argument("schedule: total_steps must be positive");
  if (warmup_steps >= total_steps && decay_type == "cosine") {
    throw std::invalid_argument("schedule: warmup_steps (" + std::to_string(warmup_steps) +
                                ") must be below total_steps (" + std::to_string(total_steps) + ")");
  }
}

double lr_at(std::size_t step, const Schedule& s) {
  s.validate();
  if (step > s.total_steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " beyond total_steps " + std::to_string(s.total_steps));
  }
  if (step < s.warmup_steps) return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (s.decay_type == "constant") return s.base_lr;
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_global_norm(GradMap<float>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  double total = 0.0;
  for (const auto& [id, g] : grads) {
    for (float v : g.data()) total += static_cast<double>(v) * v;
  }
  const double norm = std::sqrt(total);
  if (!std::isfinite(norm)) throw NonFiniteError("clip_global_norm: gradient norm is not finite");
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& [id, g] : grads) {
      for (float& v : g.mutable_data()) v = static_cast<float>(v * factor);
    }
  }
  return norm;
}

Optimizer::Optimizer(ParameterSet params, OptimizerConfig cfg, Schedule schedule)
    : params_(std::move(params)), cfg_(cfg), schedule_(std::move(schedule)) {
  schedule_.validate();
  if (!(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0)) throw std::invalid_argument("optimizer: beta1 must be in [0, 1)");
  if (!(cfg_.beta2_cap > 0.0 && cfg_.beta2_cap < 1.0)) throw std::invalid_argument("optimizer: beta2_cap must be in (0, 1)");
  if (!(cfg_.wd >= 0.0)) throw std::invalid_argument("optimizer: wd must be >= 0");
  for (const auto& [name, p] : params_.items()) {
    m_.push_back(Tensor::zeros(p.shape()));
    v_.push_back(Tensor::zeros(p.shape()));
    lr_mult_.push_back(1.0);
    decay_.push_back(name.ends_with("kernel"));
  }
}

void Optimizer::set_lr_multiplier(const std::string& prefix, double multiplier) {
  if (!(multiplier >= 0.0)) throw std::invalid_argument("optimizer: lr multiplier must be >= 0");
  const auto& items = params_.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].first.starts_with(prefix)) lr_mult_[i] = multiplier;
  }
}

double Optimizer::step(const GradMap<float>& grads) {
  const double lr = lr_at(steps_, schedule_);
  const double t = static_cast<double>(steps_ + 1);
  const double beta1 = cfg_.beta1;
  const double beta2 = std::min(cfg_.beta2_cap, 1.0 - std::pow(t, -0.8));
  const double correction1 = 1.0 - std::pow(beta1, t);
  const double decay_scale = schedule_.base_lr > 0.0 ? cfg_.wd * lr / schedule_.base_lr : 0.0;

  auto& items = params_.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    Tensor& p = items[i].second;
    const auto found = grads.find(p.id());
    if (found == grads.end()) continue;
    const auto g = found->second.data();
    if (g.size() != p.numel()) throw ShapeError("optimizer: gradient size mismatch for " + items[i].first);
    auto w = p.mutable_data();
    auto m = m_[i].mutable_data();
    auto v = v_[i].mutable_data();
    const double rate = lr * lr_mult_[i];
    const double decay = decay_[i] ? decay_scale * lr_mult_[i] : 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k];
      m[k] = static_cast<float>(beta1 * m[k] + (1.0 - beta1) * gk);
      v[k] = static_cast<float>(beta2 * v[k] + (1.0 - beta2) * gk * gk);
      const double update = (m[k] / correction1) / (std::sqrt(static_cast<double>(v[k])) + cfg_.eps);
      w[k] = static_cast<float>(w[k] - rate * update - decay * w[k]);
    }
  }
  ++steps_;
  return lr;
}

void Optimizer::restore(std::size_t steps, const std::vector<Tensor>& m, const std::vector<Tensor>& v) {
  if (m.size() != m_.size() || v.size() != v_.size()) throw ShapeError("optimizer restore: moment count mismatch");
  for (std::size_t i = 0; i < m_.size(); ++i) {
    if (m[i].shape() != m_[i].shape() || v[i].shape() != v_[i].shape()) {
      throw ShapeError("optimizer restore: moment shape mismatch for " + params_.items()[i].first);
    }
    std::copy(m[i].data().begin(), m[i].data().end(), m_[i].mutable_data().begin());
    std::copy(v[i].data().begin(), v[i].data().end(), v_[i].mutable_data().begin());
  }
  steps_ = steps;
}

Tensor batch_images(std::span<const Example> batch) {
  std::vector<Image> xs;
  xs.reserve(batch.size());
  for (const auto& e : batch) xs.push_back(e.x);
  return image_tensor(xs);
}

std::vector<TaskLabel> batch_labels(std::span<const Example> batch) {
  std::vector<TaskLabel> ys;
  ys.reserve(batch.size());
  for (const auto& e : batch) ys.push_back(e.y);
  return ys;
}

GuidingCode oracle_codes(const OracleModel& oracle, const TaskConfig& task, std::span<const Example> batch) {
  NoRecordScope<float> no_record;
  const Tensor images = oracle.uses_image() ? batch_images(batch) : Tensor{};
  return oracle.encode(encode_labels(task, batch_labels(batch)), images).code;
}

namespace {

ParameterSet stage1_parameters(const ModelConfig& model, OracleModel& oracle, BaseModel& base) {
  ParameterSet all;
  if (!model.no_oracle) all.extend(oracle.params());
  all.extend(base.params());
  return all;
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

Stage1Trainer::Stage1Trainer(const ModelConfig& model, const TaskConfig& task, const Stage1Config& cfg,
                             std::uint64_t seed)
    : model_(model),
      task_(task),
      cfg_(cfg),
      init_rng_(derive_seed(seed, 1)),
      oracle_(model, task, init_rng_),
      base_(model, task, init_rng_),
      optimizer_(stage1_parameters(model, oracle_, base_), cfg.opt,
                 Schedule{cfg.opt.lr, cfg.warmup_steps, cfg.steps, cfg.decay_type}),
      rng_(derive_seed(seed, 2)) {
  task_.validate();
  if (cfg.batch_size == 0) throw std::invalid_argument("stage1: batch_size must be positive");
}

Stage1Metrics Stage1Trainer::step(std::span<const Example> batch) {
  if (batch.empty()) throw std::invalid_argument("stage1: empty batch");
  const Rng saved_rng = rng_;
  const Tensor images = batch_images(batch);
  const auto labels = batch_labels(batch);

  Stage1Metrics out;
  out.step = optimizer_.steps();
  GradMap<float> grads;
  Tensor z_e;
  GuidingCode code;
  {
    ComputationRecord<float> record;
    Tensor z;
    Tensor commitment = Tensor::scalar(0.0f);
    if (!model_.no_oracle) {
      auto encoded = oracle_.encode(encode_labels(task_, labels), oracle_.uses_image() ? images : Tensor{});
      z = cfg_.code_dropout ? code_dropout(encoded.z_q, rng_) : encoded.z_q;
      commitment = commitment_loss(encoded.z_e, encoded.z_q, cfg_.commitment_beta);
      z_e = encoded.z_e;
      code = std::move(encoded.code);
    }
    const Tensor reconstruction = task_reconstruction_loss(task_, base_.forward(images, z), labels);
    const Tensor loss = add(reconstruction, commitment);
    out.reconstruction = reconstruction.item();
    out.commitment = commitment.item();
    out.loss = loss.item();
    if (!finite(out.loss)) {
      rng_ = saved_rng;
      throw NonFiniteError("stage1 step " + std::to_string(out.step) + ": loss is not finite (reconstruction " +
                           std::to_string(out.reconstruction) + ", commitment " + std::to_string(out.commitment) + ")");
    }
    grads = record.backward(loss);
  }
  try {
    out.grad_norm = clip_global_norm(grads, cfg_.opt.grad_clip_norm);
  } catch (const NonFiniteError&) {
    rng_ = saved_rng;
    throw NonFiniteError("stage1 step " + std::to_string(out.step) + ": gradient norm is not finite at loss " +
                         std::to_string(out.loss));
  }
  out.lr = optimizer_.step(grads);

  if (!model_.no_oracle) {
    Codebook& book = oracle_.codebook();
    book.ema_update(cast<double>(z_e), code);
    out.respawned = book.respawn_dead_entries(book.default_noise_scale(), rng_).size();
    out.perplexity = codebook_perplexity(code_histogram(code, book.size()));
  }
  return out;
}

Tensor Stage1Trainer::reconstruct(std::span<const Example> batch) const {
  NoRecordScope<float> no_record;
  const Tensor images = batch_images(batch);
  Tensor z;
  if (!model_.no_oracle) {
    z = oracle_.encode(encode_labels(task_, batch_labels(batch)), oracle_.uses_image() ? images : Tensor{}).z_q;
  }
  return base_.forward(images, z);
}

Stage2Trainer::Stage2Trainer(const ModelConfig& model, const TaskConfig& task, const Stage2Config& cfg,
                             std::uint64_t seed)
    : model_(model),
      task_(task),
      cfg_(cfg),
      init_rng_(derive_seed(seed, 3)),
      lm_(model, task, init_rng_),
      optimizer_(lm_.params(), cfg.opt, Schedule{cfg.opt.lr, cfg.warmup_steps, cfg.steps, cfg.decay_type}) {
  if (cfg.batch_size == 0) throw std::invalid_argument("stage2: batch_size must be positive");
}

Stage2Metrics Stage2Trainer::step(const OracleModel& oracle, std::span<const Example> batch) {
  if (batch.empty()) throw std::invalid_argument("stage2: empty batch");
  const GuidingCode codes = oracle_codes(oracle, task_, batch);
  return step(batch_images(batch), codes);
}

Stage2Metrics Stage2Trainer::step(const Tensor& images, std::span<const int> codes) {
  Stage2Metrics out;
  out.step = optimizer_.steps();
  GradMap<float> grads;
  {
    ComputationRecord<float> record;
    const Tensor loss = lm_.loss(lm_.encode_image(images), codes);
    out.loss = loss.item();
    if (!finite(out.loss)) {
      throw NonFiniteError("stage2 step " + std::to_string(out.step) + ": loss is not finite");
    }
    grads = record.backward(loss);
  }
  out.grad_norm = clip_global_norm(grads, cfg_.opt.grad_clip_norm);
  out.lr = optimizer_.step(grads);
  return out;
}

}  // namespace uvim
