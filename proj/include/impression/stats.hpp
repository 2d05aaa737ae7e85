#pragma once

#include <span>

namespace impression {

/// Sample Pearson correlation. Requires equal lengths of at least 3; throws
/// ConstantInput when either side has zero variance.
double pearson(std::span<const double> a, std::span<const double> b);

double mean(std::span<const double> xs);
/// Unbiased sample standard deviation; 0 for fewer than two values.
double sample_sd(std::span<const double> xs);

}  // namespace impression
