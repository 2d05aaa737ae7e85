#include "impression/stats.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "impression/error.hpp"

namespace impression {

double mean(std::span<const double> xs) {
  if (xs.empty()) throw ValueError("mean of empty sequence");
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double sample_sd(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw ValueError("pearson: length mismatch " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  if (a.size() < 3) throw ValueError("pearson: need at least 3 pairs, got " + std::to_string(a.size()));
  const double ma = mean(a), mb = mean(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw ConstantInput("pearson: input has zero variance");
  const double r = sab / std::sqrt(saa * sbb);
  return std::clamp(r, -1.0, 1.0);
}

}  // namespace impression
