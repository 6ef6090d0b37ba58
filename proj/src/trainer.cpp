#include "actnet/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>

#include "actnet/losses.hpp"
#include "actnet/metrics.hpp"

namespace actnet {

double lr_at(std::int64_t t, double base_lr, std::int64_t t_max) {
  if (t_max < 1) throw ValueError("lr_at: t_max must be >= 1");
  if (t < 0 || t > t_max)
    throw ValueError("lr_at: iteration " + std::to_string(t) + " outside [0, " + std::to_string(t_max) + "]");
  return base_lr * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(t_max), 0.9);
}

void sgd_step(std::vector<Parameter<float>>& params, std::vector<Tensor>& velocity, double lr, double momentum) {
  if (velocity.size() != params.size())
    throw ShapeError("sgd_step: " + std::to_string(velocity.size()) + " velocity tensors for " +
                     std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(params[i].value.shape(), params[i].grad.shape(), params[i].name.c_str());
    require_same_shape(params[i].value.shape(), velocity[i].shape(), params[i].name.c_str());
    for (float g : params[i].grad.storage())
      if (!std::isfinite(g)) throw ValueError("non-finite gradient in parameter " + params[i].name);
  }
  const auto m = static_cast<float>(momentum), step = static_cast<float>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    float* p = params[i].value.ptr();
    const float* g = params[i].grad.ptr();
    float* v = velocity[i].ptr();
    for (std::size_t k = 0; k < params[i].value.size(); ++k) {
      v[k] = m * v[k] + g[k];
      p[k] -= step * v[k];
    }
  }
}

double rampup_weight(std::int64_t t, std::int64_t rampup) {
  if (rampup <= 0 || t >= rampup) return 1.0;
  const double phase = 1.0 - static_cast<double>(t) / static_cast<double>(rampup);
  return std::exp(-5.0 * phase * phase);
}

bool same_architecture(const ModelSpec& a, const ModelSpec& b) noexcept {
  return a.num_encoder_layers == b.num_encoder_layers && a.initial_channels == b.initial_channels &&
         a.in_channels == b.in_channels && a.num_classes == b.num_classes;
}

int dataset_side(const DatasetSplits& data) {
  for (const auto* pool : {&data.train_labeled, &data.train_unlabeled, &data.val, &data.test})
    if (!pool->empty()) return static_cast<int>(pool->front().image.dim(1));
  throw DataError("dataset is empty");
}

// ---------------------------------------------------------------------------

TeacherCache::TeacherCache(UNet teacher, double temperature) : teacher_(std::move(teacher)), temperature_(temperature) {
  if (!(temperature > 0)) throw ValueError("teacher temperature must be > 0");
}

const Tensor& TeacherCache::probs(const SliceSample& sample, const GeometricTransform& view) {
  const std::pair<std::string, int> key{sample.id, (view.flip ? 4 : 0) + view.quarter_turns};
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  const Tensor v = apply_geometry(sample.image, view);
  Tensor x({1, v.dim(0), v.dim(1), v.dim(2)}, v.storage());
  const Tensor logits = teacher_.forward(x, Phase::Eval);
  SoftPrediction<float> sp = soft_prediction(logits, static_cast<float>(temperature_));
  Tensor probs({logits.dim(1), logits.dim(2), logits.dim(3)}, std::move(sp.probs.storage()));
  return cache_.emplace(key, std::move(probs)).first->second;
}

// ---------------------------------------------------------------------------

MetricsWriter::MetricsWriter(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path.string()) {
  if (!out_) throw DataError("cannot write metrics " + path_);
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[64];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  out_ << "# created " << stamp << "\n";
  out_ << "iter,lr,L_seg,L_kd,L_co,L_total,val_dsc_mean\n";
  out_.flush();
}

void MetricsWriter::write(const IterationLosses& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,", static_cast<long long>(r.iteration), r.lr, r.seg,
                r.kd, r.co, r.total);
  out_ << buf;
  if (r.val_dsc) {
    std::snprintf(buf, sizeof buf, "%.9g", *r.val_dsc);
    out_ << buf;
  }
  out_ << '\n';
  if (r.val_dsc) out_.flush();  // validation rows are visible while training runs
  if (!out_) throw DataError("failed writing metrics " + path_);
}

// ---------------------------------------------------------------------------

namespace {

TrainConfig validated(TrainConfig c) {
  c.validate();
  return c;
}

SemiBatchSampler make_sampler(const TrainConfig& c, const DatasetSplits& data) {
  if (data.train_labeled.empty()) throw DataError("labeled training pool is empty");
  BatchConfig b = c.batch;
  if (data.train_unlabeled.empty()) b.unlabeled = 0;
  return SemiBatchSampler(data.train_labeled.size(), data.train_unlabeled.size(), b, derive_seed(c.seed, 0xba7c));
}

}  // namespace

Trainer::Trainer(TrainConfig config, const DatasetSplits& data, UNet student, std::shared_ptr<TeacherCache> teacher)
    : config_(validated(std::move(config))),
      data_(data),
      student_(std::move(student)),
      ema_(student_, config_.ema_decay, config_.ema_warmup),
      teacher_(std::move(teacher)),
      sampler_(make_sampler(config_, data)) {
  if (!same_architecture(student_.spec(), config_.student_spec))
    throw ConfigError("student model " + to_string(student_.spec()) + " does not match student_spec " +
                      to_string(config_.student_spec));
  kd_on_ = uses_kd(config_.mode) && config_.weights.lambda_kd > 0;
  co_on_ = uses_co(config_.mode) && config_.weights.lambda_co > 0;
  if (kd_on_) {
    if (!teacher_) throw ConfigError("mode " + to_string(config_.mode) + " needs a teacher");
    if (!same_architecture(teacher_->teacher().spec(), config_.teacher_spec))
      throw ConfigError("teacher is " + to_string(teacher_->teacher().spec()) + " but teacher_spec is " +
                        to_string(config_.teacher_spec));
    if (teacher_->temperature() != config_.weights.temperature)
      throw ConfigError("teacher cache temperature differs from the configured temperature");
  }
  for (const auto& p : student_.parameters()) velocity_.emplace_back(p.value.shape());
}

void Trainer::set_metrics(const std::filesystem::path& path) { metrics_ = std::make_unique<MetricsWriter>(path); }

IterationLosses Trainer::step() {
  const std::int64_t t = iteration_;
  if (t >= config_.t_max) throw Error("training already reached t_max = " + std::to_string(config_.t_max));
  const auto idx = sampler_.indices_at(t);
  std::vector<const SliceSample*> items;
  for (auto i : idx.labeled) items.push_back(&data_.train_labeled[i]);
  const std::size_t n_labeled = items.size();
  if (kd_on_ || co_on_)
    for (auto i : idx.unlabeled) items.push_back(&data_.train_unlabeled[i]);

  // Slot k draws from streams (t, k, view) only, so a slice's perturbation
  // does not depend on which loss terms are active.
  const Perturbation& pert = config_.perturbation;
  const std::uint64_t base = derive_seed(config_.seed, 0x9e27, pert.rng_seed);
  std::vector<Tensor> student_in, co_in;
  std::vector<LabelTensor> masks;
  std::vector<GeometricTransform> views;
  for (std::size_t k = 0; k < items.size(); ++k) {
    const auto tt = static_cast<std::uint64_t>(t);
    Rng geom(derive_seed(base, tt, k, 0));
    const GeometricTransform view = draw_geometry(pert, geom);
    const Tensor v = apply_geometry(items[k]->image, view);
    Rng n1(derive_seed(base, tt, k, 1));
    student_in.push_back(add_noise(v, pert.noise_sigma, n1));
    if (co_on_) {
      Rng n2(derive_seed(base, tt, k, 2));
      co_in.push_back(add_noise(v, pert.noise_sigma, n2));
    }
    if (k < n_labeled) masks.push_back(apply_geometry(*items[k]->mask, view));
    views.push_back(view);
  }

  IterationLosses row;
  row.iteration = t;
  row.lr = lr_at(t, config_.base_lr, config_.t_max);
  const double ramp = rampup_weight(t, config_.consistency_rampup);
  LossWeights w = config_.weights;
  w.lambda_kd = kd_on_ ? w.lambda_kd * ramp : 0.0;
  w.lambda_co = co_on_ ? w.lambda_co * ramp : 0.0;

  try {
    const Tensor logits = student_.forward(stack_images(student_in), Phase::Train);
    Tensor grad(logits.shape());
    {
      const Tensor labeled_logits =
          n_labeled == items.size() ? logits : slice_batch(logits, 0, static_cast<std::int64_t>(n_labeled));
      const auto seg = supervised_loss<float>(labeled_logits, stack_masks(masks), static_cast<float>(w.dice_eps));
      row.seg = seg.value;
      std::copy(seg.grad.storage().begin(), seg.grad.storage().end(), grad.storage().begin());
    }
    auto accumulate = [&grad](const Tensor& g, double scale) {
      const auto s = static_cast<float>(scale);
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += s * g[i];
    };
    if (kd_on_) {
      const std::int64_t C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
      Tensor probs(logits.shape());
      const std::size_t item = static_cast<std::size_t>(C * H * W);
      for (std::size_t k = 0; k < items.size(); ++k) {
        const Tensor& p = teacher_->probs(*items[k], views[k]);
        std::copy(p.storage().begin(), p.storage().end(), probs.storage().begin() + static_cast<std::ptrdiff_t>(k * item));
      }
      const auto kd = kd_consistency_loss_grad(logits, SoftPrediction<float>{std::move(probs), static_cast<float>(w.temperature)});
      row.kd = kd.value;
      accumulate(kd.grad, w.lambda_kd);
    }
    if (co_on_) {
      const Tensor co_logits = coteacher_forward(ema_, student_.spec(), stack_images(co_in));
      const Tensor co_probs = soft_prediction(co_logits, 1.0f).probs;
      const auto co = co_consistency_loss_grad(logits, co_probs);
      row.co = co.value;
      accumulate(co.grad, w.lambda_co);
    }
    if (!std::isfinite(row.seg) || !std::isfinite(row.kd) || !std::isfinite(row.co))
      throw DivergenceError("non-finite loss at iteration " + std::to_string(t), t);
    row.total = student_total_loss(row.seg, row.kd, row.co, w);
    student_.zero_grad();
    student_.backward(grad);
    sgd_step(student_.parameters(), velocity_, row.lr, config_.momentum);
  } catch (const ValueError& e) {
    throw DivergenceError(std::string(e.what()) + " at iteration " + std::to_string(t), t);
  }
  ema_update(ema_, student_);
  ++iteration_;
  return row;
}

double Trainer::validate() { return evaluate(student_, data_.val).mean_dsc; }

void Trainer::record_validation(IterationLosses& row) {
  if (data_.val.empty()) return;
  const double d = validate();
  row.val_dsc = d;
  if (!has_best_ || d > best_val_dsc_) {
    has_best_ = true;
    best_val_dsc_ = d;
    best_iteration_ = iteration_;
    best_ = capture(student_);
  }
}

std::vector<IterationLosses> Trainer::run() {
  std::vector<IterationLosses> out;
  while (iteration_ < config_.t_max) {
    IterationLosses row = step();
    if (iteration_ % config_.eval_every == 0 || iteration_ == config_.t_max) record_validation(row);
    if (metrics_) metrics_->write(row);
    if (checkpoint_path_ && config_.checkpoint_every > 0 && iteration_ % config_.checkpoint_every == 0)
      save_checkpoint(*checkpoint_path_, checkpoint());
    if (progress_) progress_(row);
    out.push_back(row);
  }
  return out;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.config_text = config_text(config_);
  c.config_digest = config_digest(config_);
  c.iteration = iteration_;
  c.student = capture(student_);
  c.velocity = velocity_;
  c.has_ema = true;
  c.ema_decay = ema_.decay();
  c.ema_warmup = ema_.warmup();
  c.ema_steps = ema_.step_count();
  c.ema_shadow = ema_.shadow();
  for (const auto& b : ema_.shadow_buffers()) c.ema_buffers.emplace_back(b.name, b.value);
  c.has_best = has_best_;
  c.best_iteration = best_iteration_;
  c.best_val_dsc = best_val_dsc_;
  if (has_best_) c.best = best_;
  return c;
}

void Trainer::restore(const Checkpoint& c) {
  if (c.config_digest != config_digest(config_))
    throw ConfigError("checkpoint config digest " + c.config_digest + " does not match " + config_digest(config_));
  if (!c.has_ema) throw DataError("checkpoint has no co-teacher state");
  if (c.velocity.size() != velocity_.size()) throw ShapeError("checkpoint velocity count mismatch");
  for (std::size_t i = 0; i < velocity_.size(); ++i)
    require_same_shape(c.velocity[i].shape(), velocity_[i].shape(), "checkpoint velocity");
  load_into(student_, c.student);
  velocity_ = c.velocity;
  std::vector<Buffer<float>> buffers;
  for (const auto& [name, t] : c.ema_buffers) buffers.push_back({name, t});
  ema_.restore(c.ema_shadow, buffers, c.ema_steps);
  iteration_ = c.iteration;
  has_best_ = c.has_best;
  best_iteration_ = c.best_iteration;
  best_val_dsc_ = c.best_val_dsc;
  best_ = c.has_best ? c.best : ModelState{};
}

// ---------------------------------------------------------------------------

namespace {

void adopt_side(TrainConfig& config, const DatasetSplits& data) {
  const int side = dataset_side(data);
  config.student_spec.input_side = side;
  config.teacher_spec.input_side = side;
}

TrainResult finish(Trainer& trainer, const RunOptions& options) {
  if (options.metrics_path) trainer.set_metrics(*options.metrics_path);
  if (options.checkpoint_path) trainer.set_checkpoint_path(*options.checkpoint_path);
  if (options.progress) trainer.set_progress(options.progress);
  TrainResult r;
  r.history = trainer.run();
  r.checkpoint = trainer.checkpoint();
  return r;
}

}  // namespace

TrainResult pretrain_mean_teacher(const DatasetSplits& data, TrainConfig config, const RunOptions& options) {
  if (config.mode != TrainMode::MT && config.mode != TrainMode::FS)
    throw ConfigError("pretraining runs in mode MT or FS, not " + to_string(config.mode));
  adopt_side(config, data);
  UNet student(config.student_spec, config.init_seed);
  Trainer trainer(config, data, std::move(student));
  return finish(trainer, options);
}

TrainResult train_act(const DatasetSplits& data, TrainConfig config, const Checkpoint* teacher_ckpt,
                      const Checkpoint* student_init, const RunOptions& options, std::shared_ptr<TeacherCache> teacher) {
  adopt_side(config, data);
  const bool needs_teacher = uses_kd(config.mode) && config.weights.lambda_kd > 0;
  if (needs_teacher && !teacher) {
    if (!teacher_ckpt) throw ConfigError("mode " + to_string(config.mode) + " needs a teacher checkpoint");
    const ModelState& ts = teacher_ckpt->selected();
    if (!same_architecture(ts.spec, config.teacher_spec))
      throw ConfigError("teacher checkpoint holds " + to_string(ts.spec) + " but teacher_spec is " +
                        to_string(config.teacher_spec));
    teacher = std::make_shared<TeacherCache>(make_model(ts), config.weights.temperature);
  }
  UNet student(config.student_spec, config.init_seed);
  if (!config.from_scratch) {
    if (!student_init) throw ConfigError("student initialization checkpoint required unless from_scratch");
    ModelState s = student_init->selected();
    if (!same_architecture(s.spec, config.student_spec))
      throw ConfigError("student checkpoint holds " + to_string(s.spec) + " but student_spec is " +
                        to_string(config.student_spec));
    s.spec = config.student_spec;
    load_into(student, s);
  }
  Trainer trainer(config, data, std::move(student), needs_teacher ? teacher : nullptr);
  return finish(trainer, options);
}

}  // namespace actnet
