#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "logcan/tensor.hpp"

namespace logcan {

// Segmentation quality report. confusion[label][pred] counts pixels; classes
// absent from both prediction and reference are excluded from the mIoU / AF
// means so empty classes cannot contribute 0/0 terms.
struct MetricReport {
  int classes = 0;
  std::vector<std::int64_t> confusion;  // K*K row-major, [label][pred]
  std::vector<double> iou;
  std::vector<double> f1;
  std::vector<bool> present;
  double oa = 0;    // overall accuracy
  double miou = 0;  // mean IoU over present classes
  double af = 0;    // average F1 over present classes
};

inline MetricReport metrics_from_confusion(std::vector<std::int64_t> confusion, int classes) {
  MetricReport r;
  r.classes = classes;
  r.confusion = std::move(confusion);
  r.iou.assign(static_cast<std::size_t>(classes), 0.0);
  r.f1.assign(static_cast<std::size_t>(classes), 0.0);
  r.present.assign(static_cast<std::size_t>(classes), false);
  std::int64_t total = 0, correct = 0;
  for (int t = 0; t < classes; ++t)
    for (int p = 0; p < classes; ++p) {
      const std::int64_t c = r.confusion[static_cast<std::size_t>(t * classes + p)];
      total += c;
      if (t == p) correct += c;
    }
  int present_count = 0;
  double iou_sum = 0, f1_sum = 0;
  for (int k = 0; k < classes; ++k) {
    std::int64_t row = 0, col = 0;
    for (int j = 0; j < classes; ++j) {
      row += r.confusion[static_cast<std::size_t>(k * classes + j)];
      col += r.confusion[static_cast<std::size_t>(j * classes + k)];
    }
    const std::int64_t tp = r.confusion[static_cast<std::size_t>(k * classes + k)];
    const std::int64_t uni = row + col - tp;
    if (row + col == 0) continue;  // class absent everywhere
    r.present[static_cast<std::size_t>(k)] = true;
    r.iou[static_cast<std::size_t>(k)] = uni > 0 ? static_cast<double>(tp) / static_cast<double>(uni) : 0.0;
    r.f1[static_cast<std::size_t>(k)] = static_cast<double>(2 * tp) / static_cast<double>(row + col);
    iou_sum += r.iou[static_cast<std::size_t>(k)];
    f1_sum += r.f1[static_cast<std::size_t>(k)];
    ++present_count;
  }
  r.oa = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  r.miou = present_count > 0 ? iou_sum / present_count : 0.0;
  r.af = present_count > 0 ? f1_sum / present_count : 0.0;
  return r;
}

inline MetricReport metrics_compute(const std::vector<std::int32_t>& pred,
                                    const std::vector<std::int32_t>& labels, int classes,
                                    int ignore_index = kIgnoreIndex) {
  if (pred.size() != labels.size())
    throw ShapeError("metrics_compute: prediction count " + std::to_string(pred.size()) +
                     " != label count " + std::to_string(labels.size()));
  std::vector<std::int64_t> confusion(static_cast<std::size_t>(classes) * classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::int32_t t = labels[i];
    if (t == ignore_index) continue;
    const std::int32_t p = pred[i];
    if (t < 0 || t >= classes || p < 0 || p >= classes)
      throw ShapeError("metrics_compute: value out of range for " + std::to_string(classes) +
                       " classes at pixel " + std::to_string(i));
    ++confusion[static_cast<std::size_t>(t * classes + p)];
  }
  return metrics_from_confusion(std::move(confusion), classes);
}

inline std::string metrics_table(const MetricReport& r) {
  char line[128];
  std::string out = "class     iou       f1\n";
  for (int k = 0; k < r.classes; ++k) {
    if (r.present[static_cast<std::size_t>(k)])
      std::snprintf(line, sizeof line, "%-8d  %.6f  %.6f\n", k, r.iou[static_cast<std::size_t>(k)],
                    r.f1[static_cast<std::size_t>(k)]);
    else
      std::snprintf(line, sizeof line, "%-8d  absent    absent\n", k);
    out += line;
  }
  std::snprintf(line, sizeof line, "OA   %.6f\nmIoU %.6f\nAF   %.6f\n", r.oa, r.miou, r.af);
  out += line;
  return out;
}

inline std::string metrics_csv(const MetricReport& r) {
  char line[96];
  std::string out = "class,iou,f1\n";
  for (int k = 0; k < r.classes; ++k) {
    std::snprintf(line, sizeof line, "%d,%.6f,%.6f\n", k, r.iou[static_cast<std::size_t>(k)],
                  r.f1[static_cast<std::size_t>(k)]);
    out += line;
  }
  return out;
}

}  // namespace logcan
