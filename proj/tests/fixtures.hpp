#pragma once

#include "actnet/config.hpp"
#include "actnet/data.hpp"
#include "test_util.hpp"

namespace testutil {

// 60 synthetic 16x16 slices, generated once per process.
inline const actnet::DatasetSplits& tiny_dataset() {
  static TempDir dir("tiny_dataset");
  static const actnet::DatasetSplits splits = [] {
    actnet::generate_synthetic(60, 16, 11, dir.path());
    return actnet::load_dataset(dir.path(), 4);
  }();
  return splits;
}

inline actnet::TrainConfig tiny_config(actnet::TrainMode mode) {
  actnet::TrainConfig c;
  c.student_spec = {2, 2, 1, 4, 16};
  c.teacher_spec = {2, 4, 1, 4, 16};
  c.mode = mode;
  c.t_max = 100;
  c.batch = {4, 4, true};
  c.eval_every = 25;
  return c;
}

}  // namespace testutil
