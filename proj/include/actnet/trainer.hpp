#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "actnet/checkpoint.hpp"
#include "actnet/config.hpp"
#include "actnet/data.hpp"
#include "actnet/ema.hpp"
#include "actnet/model.hpp"

namespace actnet {

// base * (1 - t / t_max)^0.9. Throws ValueError unless 0 <= t <= t_max.
double lr_at(std::int64_t t, double base_lr, std::int64_t t_max);

// velocity <- momentum * velocity + grad; value <- value - lr * velocity.
// Every gradient is checked before anything is modified; a non-finite one
// raises ValueError naming the parameter.
void sgd_step(std::vector<Parameter<float>>& params, std::vector<Tensor>& velocity, double lr, double momentum);

// exp(-5 (1 - t/R)^2) for t < R, 1 afterwards or when R == 0.
double rampup_weight(std::int64_t t, std::int64_t rampup);

// True when L, N1, input channels and classes agree.
bool same_architecture(const ModelSpec& a, const ModelSpec& b) noexcept;

// Frozen teacher plus memoized soft predictions per (slice, geometric view).
// The teacher runs in inference mode one slice at a time, so an entry does
// not depend on which other slices shared its batch.
class TeacherCache {
 public:
  TeacherCache(UNet teacher, double temperature);

  // [C, H, W] probabilities at the cache's temperature.
  const Tensor& probs(const SliceSample& sample, const GeometricTransform& view);
  const UNet& teacher() const noexcept { return teacher_; }
  double temperature() const noexcept { return temperature_; }
  std::size_t size() const noexcept { return cache_.size(); }

 private:
  UNet teacher_;
  double temperature_;
  std::map<std::pair<std::string, int>, Tensor> cache_;
};

struct IterationLosses {
  std::int64_t iteration = 0;
  double lr = 0;
  double seg = 0;
  double kd = 0;  // 0 when the term is inactive
  double co = 0;
  double total = 0;
  std::optional<double> val_dsc;
};

// Appends one CSV row per iteration. The first line is a "# created" comment
// carrying a timestamp; everything after it is deterministic.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);
  void write(const IterationLosses& row);

 private:
  std::ofstream out_;
  std::string path_;
};

// One student, its EMA co-teacher and an optional frozen teacher. Which
// consistency terms run is decided by the mode and by lambda > 0; the student
// sees the unlabeled half of the batch only when a consistency term is on.
class Trainer {
 public:
  Trainer(TrainConfig config, const DatasetSplits& data, UNet student, std::shared_ptr<TeacherCache> teacher = nullptr);

  // One SGD iteration at the current iteration counter.
  IterationLosses step();
  // Steps until t_max, evaluating on validation every eval_every iterations
  // and at the end. Returns the full loss trace of this call.
  std::vector<IterationLosses> run();
  // Mean validation DSC of the live student.
  double validate();

  void set_metrics(const std::filesystem::path& path);
  void set_checkpoint_path(const std::filesystem::path& path) { checkpoint_path_ = path; }
  void set_progress(std::function<void(const IterationLosses&)> fn) { progress_ = std::move(fn); }

  Checkpoint checkpoint() const;
  // Restores live state and best record. Throws on config or shape mismatch.
  void restore(const Checkpoint& ckpt);

  const TrainConfig& config() const noexcept { return config_; }
  UNet& student() noexcept { return student_; }
  EmaState& ema() noexcept { return ema_; }
  std::int64_t iteration() const noexcept { return iteration_; }
  bool kd_active() const noexcept { return kd_on_; }
  bool co_active() const noexcept { return co_on_; }

 private:
  void record_validation(IterationLosses& row);

  TrainConfig config_;
  const DatasetSplits& data_;
  UNet student_;
  EmaState ema_;
  std::shared_ptr<TeacherCache> teacher_;
  std::vector<Tensor> velocity_;
  SemiBatchSampler sampler_;
  bool kd_on_ = false, co_on_ = false;
  std::int64_t iteration_ = 0;

  bool has_best_ = false;
  std::int64_t best_iteration_ = -1;
  double best_val_dsc_ = -1;
  ModelState best_;

  std::unique_ptr<MetricsWriter> metrics_;
  std::optional<std::filesystem::path> checkpoint_path_;
  std::function<void(const IterationLosses&)> progress_;
};

struct RunOptions {
  std::optional<std::filesystem::path> metrics_path;
  std::optional<std::filesystem::path> checkpoint_path;  // periodic snapshots
  std::function<void(const IterationLosses&)> progress;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<IterationLosses> history;
};

// Self-ensembling pretraining (mode MT, or FS) of a freshly initialized model.
TrainResult pretrain_mean_teacher(const DatasetSplits& data, TrainConfig config, const RunOptions& options = {});

// Joint training of config.student_spec. The teacher comes from its
// checkpoint's best weights unless `teacher` already holds one; the student
// starts from student_init's best weights unless config.from_scratch.
TrainResult train_act(const DatasetSplits& data, TrainConfig config, const Checkpoint* teacher_ckpt,
                      const Checkpoint* student_init, const RunOptions& options = {},
                      std::shared_ptr<TeacherCache> teacher = nullptr);

// Side length of the dataset's slices; every spec used with it adopts it.
int dataset_side(const DatasetSplits& data);

}  // namespace actnet
