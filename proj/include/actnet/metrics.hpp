#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "actnet/data.hpp"
#include "actnet/model.hpp"

namespace actnet {

// 2|P & G| / (|P| + |G|) over pixels equal to class_id; 1 when both are empty.
double dsc(const LabelTensor& pred, const LabelTensor& gt, int class_id);

struct EvalReport {
  std::vector<std::string> class_names;  // foreground classes 1..C-1
  std::vector<double> per_class_dsc;
  double mean_dsc = 0;
  std::int64_t sample_count = 0;
  std::string config_digest;
  std::string averaging = "per-slice 2D DSC, averaged over slices whose ground truth contains the class";
};

// RV, MYO, LV for four classes; class<k> otherwise.
std::vector<std::string> default_class_names(int num_classes);

// Per class: mean slice DSC over slices whose ground truth contains it. A
// class absent from every ground-truth slice averages over all slices.
// Background is excluded.
EvalReport evaluate_masks(const std::vector<LabelTensor>& preds, const std::vector<LabelTensor>& gts, int num_classes,
                          std::vector<std::string> class_names = {});

// Per-pixel argmax over classes: [B, C, H, W] -> [B, H, W].
LabelTensor argmax_classes(const Tensor& logits);

// Inference-mode predictions for each slice, in order.
std::vector<LabelTensor> predict_masks(UNet& model, const std::vector<SliceSample>& samples, int batch_size = 20);

// Throws DataError on an empty split or a slice without a mask.
EvalReport evaluate(UNet& model, const std::vector<SliceSample>& split, std::vector<std::string> class_names = {});

std::string format_report_table(const EvalReport& report, const std::string& label);
std::string report_json(const EvalReport& report);
void write_report_json(const std::filesystem::path& path, const EvalReport& report);

}  // namespace actnet
