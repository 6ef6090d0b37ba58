#include "actnet/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "json.hpp"

namespace actnet {

double dsc(const LabelTensor& pred, const LabelTensor& gt, int class_id) {
  require_same_shape(pred.shape(), gt.shape(), "dsc");
  std::int64_t inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == class_id, g = gt[i] == class_id;
    np += p;
    ng += g;
    inter += p && g;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

std::vector<std::string> default_class_names(int num_classes) {
  if (num_classes == 4) return {"RV", "MYO", "LV"};
  std::vector<std::string> out;
  for (int c = 1; c < num_classes; ++c) out.push_back("class" + std::to_string(c));
  return out;
}

EvalReport evaluate_masks(const std::vector<LabelTensor>& preds, const std::vector<LabelTensor>& gts, int num_classes,
                          std::vector<std::string> class_names) {
  if (preds.size() != gts.size()) throw ShapeError("evaluate_masks: prediction and ground-truth counts differ");
  if (gts.empty()) throw DataError("evaluate_masks: empty split");
  if (num_classes < 2) throw ValueError("evaluate_masks: need at least 2 classes");
  if (class_names.empty()) class_names = default_class_names(num_classes);
  if (class_names.size() != static_cast<std::size_t>(num_classes - 1))
    throw ValueError("evaluate_masks: expected " + std::to_string(num_classes - 1) + " class names");
  EvalReport r;
  r.class_names = class_names;
  r.sample_count = static_cast<std::int64_t>(gts.size());
  double mean = 0;
  for (int c = 1; c < num_classes; ++c) {
    double present_sum = 0, all_sum = 0;
    std::int64_t present = 0;
    for (std::size_t i = 0; i < gts.size(); ++i) {
      const double d = dsc(preds[i], gts[i], c);
      all_sum += d;
      if (std::find(gts[i].storage().begin(), gts[i].storage().end(), c) != gts[i].storage().end()) {
        present_sum += d;
        ++present;
      }
    }
    const double v = present > 0 ? present_sum / static_cast<double>(present) : all_sum / static_cast<double>(gts.size());
    r.per_class_dsc.push_back(v);
    mean += v;
  }
  r.mean_dsc = mean / static_cast<double>(num_classes - 1);
  return r;
}

LabelTensor argmax_classes(const Tensor& logits) {
  if (logits.rank() != 4) throw ShapeError("argmax_classes: expected [B, C, H, W]");
  const auto B = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  LabelTensor out({B, H, W});
  const std::size_t plane = static_cast<std::size_t>(H * W);
  for (std::int64_t b = 0; b < B; ++b) {
    const float* base = logits.ptr() + static_cast<std::size_t>(b * C) * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      int best = 0;
      float bv = base[i];
      for (std::int64_t c = 1; c < C; ++c)
        if (base[static_cast<std::size_t>(c) * plane + i] > bv) {
          bv = base[static_cast<std::size_t>(c) * plane + i];
          best = static_cast<int>(c);
        }
      out[static_cast<std::size_t>(b) * plane + i] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

std::vector<LabelTensor> predict_masks(UNet& model, const std::vector<SliceSample>& samples, int batch_size) {
  std::vector<LabelTensor> out;
  for (std::size_t begin = 0; begin < samples.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(samples.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<Tensor> images;
    for (std::size_t i = begin; i < end; ++i) images.push_back(samples[i].image);
    const LabelTensor masks = argmax_classes(model.forward(stack_images(images), Phase::Eval));
    for (std::size_t i = 0; i < end - begin; ++i) {
      LabelTensor m = slice_batch(masks, static_cast<std::int64_t>(i), 1);
      out.emplace_back(Shape{m.dim(1), m.dim(2)}, std::move(m.storage()));
    }
  }
  return out;
}

EvalReport evaluate(UNet& model, const std::vector<SliceSample>& split, std::vector<std::string> class_names) {
  if (split.empty()) throw DataError("evaluate: split is empty");
  std::vector<LabelTensor> gts;
  for (const auto& s : split) {
    if (!s.mask) throw DataError("evaluate: slice " + s.id + " has no mask");
    gts.push_back(*s.mask);
  }
  return evaluate_masks(predict_masks(model, split), gts, model.spec().num_classes, std::move(class_names));
}

std::string format_report_table(const EvalReport& r, const std::string& label) {
  std::string out;
  char buf[64];
  std::size_t label_w = std::max<std::size_t>(6, label.size());
  auto cell = [&](const std::string& s, std::size_t w) {
    std::snprintf(buf, sizeof buf, "%*s", static_cast<int>(w), s.c_str());
    return std::string(buf);
  };
  out += "# " + r.averaging + "; " + std::to_string(r.sample_count) + " slices\n";
  out += cell("Method", label_w);
  for (const auto& n : r.class_names) out += "  " + cell(n, 8);
  out += "  " + cell("Mean", 8) + "\n";
  out += cell(label, label_w);
  for (double v : r.per_class_dsc) {
    std::snprintf(buf, sizeof buf, "  %8.4f", v);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "  %8.4f\n", r.mean_dsc);
  out += buf;
  return out;
}

std::string report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < r.class_names.size(); ++i) per_class[r.class_names[i]] = r.per_class_dsc[i];
  j["per_class_dsc"] = per_class;
  j["mean_dsc"] = r.mean_dsc;
  j["sample_count"] = r.sample_count;
  j["config_digest"] = r.config_digest;
  j["averaging"] = r.averaging;
  return j.dump(2) + "\n";
}

void write_report_json(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write report " + path.string());
  out << report_json(r);
  if (!out) throw DataError("failed writing report " + path.string());
}

}  // namespace actnet
