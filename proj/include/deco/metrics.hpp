// Evaluation metrics: top-1 accuracy, macro one-vs-rest ROC AUC, macro F1.
// All values are fractions in [0,1]; reporting scales them to percentages.

#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "deco/tensor.hpp"

namespace deco {

struct ClassificationMetrics {
  double auc = 0;
  double acc = 0;
  double f1 = 0;
};

inline std::vector<std::size_t> argmax_rows(const Tensor<double>& scores) {
  detail::require(scores.rank() == 2, "argmax_rows: expected NxC");
  const std::size_t n = scores.dim(0), c = scores.dim(1);
  std::vector<std::size_t> preds(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (scores[i * c + j] > scores[i * c + best]) best = j;
    preds[i] = best;
  }
  return preds;
}

inline double accuracy(const std::vector<std::size_t>& preds,
                       const std::vector<std::size_t>& labels) {
  detail::require(preds.size() == labels.size() && !preds.empty(),
                  "accuracy: size mismatch or empty");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == labels[i]) ++hit;
  return double(hit) / double(preds.size());
}

// Rank-based (Mann-Whitney) binary AUC with midranks for ties.
inline double auc_binary(const std::vector<double>& scores,
                         const std::vector<bool>& positive) {
  detail::require(scores.size() == positive.size() && !scores.empty(),
                  "auc_binary: size mismatch or empty");
  std::size_t npos = 0;
  for (bool p : positive) npos += p;
  const std::size_t nneg = scores.size() - npos;
  detail::require(npos > 0 && nneg > 0,
                  "auc_binary: needs both positive and negative samples");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return scores[a] < scores[b];
                   });

  double rank_sum_pos = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * double(i + 1 + j);  // ranks are 1-based
    for (std::size_t k = i; k < j; ++k)
      if (positive[order[k]]) rank_sum_pos += midrank;
    i = j;
  }
  return (rank_sum_pos - 0.5 * double(npos) * double(npos + 1)) /
         (double(npos) * double(nneg));
}

// Macro one-vs-rest AUC over the classes present in the labels (a class also
// needs at least one negative, i.e. the test set is not single-class).
inline double macro_ovr_auc(const Tensor<double>& scores,
                            const std::vector<std::size_t>& labels) {
  detail::require(scores.rank() == 2 && scores.dim(0) == labels.size(),
                  "macro_ovr_auc: scores NxC with one label per row");
  const std::size_t n = scores.dim(0), c = scores.dim(1);
  double total = 0;
  std::size_t used = 0;
  for (std::size_t cls = 0; cls < c; ++cls) {
    std::size_t npos = 0;
    for (std::size_t i = 0; i < n; ++i) npos += labels[i] == cls;
    if (npos == 0 || npos == n) continue;
    std::vector<double> s(n);
    std::vector<bool> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = scores[i * c + cls];
      pos[i] = labels[i] == cls;
    }
    total += auc_binary(s, pos);
    ++used;
  }
  detail::require(used > 0, "macro_ovr_auc: no class has both labels");
  return total / double(used);
}

// Macro F1 over classes present in the labels; a class the model never
// predicts correctly contributes 0.
inline double macro_f1(const std::vector<std::size_t>& preds,
                       const std::vector<std::size_t>& labels,
                       std::size_t classes) {
  detail::require(preds.size() == labels.size() && !preds.empty(),
                  "macro_f1: size mismatch or empty");
  std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0),
      support(classes, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    detail::require(preds[i] < classes && labels[i] < classes,
                    "macro_f1: class id out of range");
    ++support[labels[i]];
    if (preds[i] == labels[i])
      ++tp[labels[i]];
    else {
      ++fp[preds[i]];
      ++fn[labels[i]];
    }
  }
  double total = 0;
  std::size_t used = 0;
  for (std::size_t cls = 0; cls < classes; ++cls) {
    if (support[cls] == 0) continue;
    ++used;
    if (tp[cls] == 0) continue;  // F1 = 0
    const double p = double(tp[cls]) / double(tp[cls] + fp[cls]);
    const double r = double(tp[cls]) / double(tp[cls] + fn[cls]);
    total += 2.0 * p * r / (p + r);
  }
  return total / double(used);
}

inline ClassificationMetrics classification_metrics(
    const Tensor<double>& scores, const std::vector<std::size_t>& labels,
    std::size_t classes) {
  ClassificationMetrics m;
  const auto preds = argmax_rows(scores);
  m.acc = accuracy(preds, labels);
  m.auc = macro_ovr_auc(scores, labels);
  m.f1 = macro_f1(preds, labels, classes);
  return m;
}

}  // namespace deco
