#pragma once

#include "retrikt/data.hpp"

#include <vector>

namespace retrikt {

double accuracy_score(const std::vector<int>& gold, const std::vector<int>& predicted);
// Multi-class Matthews correlation from the confusion matrix; 0 when a
// denominator factor is 0.
double matthews_correlation(const std::vector<int>& gold, const std::vector<int>& predicted, int num_classes);
double metric_score(Metric metric, const std::vector<int>& gold, const std::vector<int>& predicted, int num_classes);

}  // namespace retrikt
