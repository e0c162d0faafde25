#include "retrikt/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace retrikt {

namespace {

void check_inputs(const std::vector<int>& gold, const std::vector<int>& predicted) {
  if (gold.empty()) throw std::invalid_argument("metric: empty dataset");
  if (gold.size() != predicted.size()) throw std::invalid_argument("metric: prediction count differs from gold");
}

}  // namespace

double accuracy_score(const std::vector<int>& gold, const std::vector<int>& predicted) {
  check_inputs(gold, predicted);
  long correct = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) correct += gold[i] == predicted[i];
  return static_cast<double>(correct) / static_cast<double>(gold.size());
}

double matthews_correlation(const std::vector<int>& gold, const std::vector<int>& predicted, int num_classes) {
  check_inputs(gold, predicted);
  std::vector<double> t(static_cast<std::size_t>(num_classes), 0.0), p(t.size(), 0.0);
  double c = 0.0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] < 0 || gold[i] >= num_classes || predicted[i] < 0 || predicted[i] >= num_classes) {
      throw std::invalid_argument("metric: class id outside range");
    }
    t[static_cast<std::size_t>(gold[i])] += 1.0;
    p[static_cast<std::size_t>(predicted[i])] += 1.0;
    c += gold[i] == predicted[i];
  }
  const double s = static_cast<double>(gold.size());
  double tp = 0.0, pp = 0.0, tt = 0.0;
  for (std::size_t k = 0; k < t.size(); ++k) {
    tp += t[k] * p[k];
    pp += p[k] * p[k];
    tt += t[k] * t[k];
  }
  const double denom_p = s * s - pp, denom_t = s * s - tt;
  if (denom_p == 0.0 || denom_t == 0.0) return 0.0;
  return (c * s - tp) / std::sqrt(denom_p * denom_t);
}

double metric_score(Metric metric, const std::vector<int>& gold, const std::vector<int>& predicted, int num_classes) {
  return metric == Metric::accuracy ? accuracy_score(gold, predicted)
                                    : matthews_correlation(gold, predicted, num_classes);
}

}  // namespace retrikt
