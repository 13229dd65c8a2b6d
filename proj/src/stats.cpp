#include "nhgcat/stats.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "nhgcat/errors.hpp"

namespace nhgcat {

namespace {

constexpr int kMaxIterations = 10000;
constexpr double kTiny = 1e-300;

// Modified Lentz evaluation of the incomplete beta continued fraction.
double beta_fraction(double a, double b, double x) {
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIterations; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kSpecialTolerance) return h;
  }
  throw NumericalError("incomplete beta: continued fraction did not converge");
}

double gamma_series(double a, double x) {
  double ap = a, sum = 1.0 / a, del = sum;
  for (int n = 0; n < kMaxIterations; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * kSpecialTolerance)
      return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
  }
  throw NumericalError("incomplete gamma: series did not converge");
}

double gamma_fraction(double a, double x) {
  double b = x + 1.0 - a, c = 1.0 / kTiny, d = 1.0 / b, h = d;
  for (int i = 1; i <= kMaxIterations; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kSpecialTolerance) return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
  }
  throw NumericalError("incomplete gamma: continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw UsageError("incomplete_beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw UsageError("incomplete_beta: x must lie in [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double front =
      std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x));
  // The fraction converges fast on this side of the mean; use symmetry otherwise.
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_fraction(a, b, x) / a;
  return 1.0 - front * beta_fraction(b, a, 1.0 - x) / b;
}

double gamma_p(double a, double x) {
  if (!(a > 0.0)) throw UsageError("gamma_p: a must be positive");
  if (!(x >= 0.0)) throw UsageError("gamma_p: x must be >= 0");
  if (x == 0.0) return 0.0;
  return x < a + 1.0 ? gamma_series(a, x) : 1.0 - gamma_fraction(a, x);
}

double gamma_q(double a, double x) {
  if (!(a > 0.0)) throw UsageError("gamma_q: a must be positive");
  if (!(x >= 0.0)) throw UsageError("gamma_q: x must be >= 0");
  if (x == 0.0) return 1.0;
  return x < a + 1.0 ? 1.0 - gamma_series(a, x) : gamma_fraction(a, x);
}

double student_t_two_sided(double t, double df) {
  if (!(df > 0.0)) throw UsageError("student_t: df must be positive");
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

double chi_square_sf(double x, double df) {
  if (!(df > 0.0)) throw UsageError("chi_square: df must be positive");
  if (x <= 0.0) return 1.0;
  return gamma_q(df / 2.0, x / 2.0);
}

TTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw UsageError("paired_t_test: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + " values");
  if (a.size() < 2) throw UsageError("paired_t_test: need at least 2 pairs");
  const double n = static_cast<double>(a.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= n;
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  TTest r;
  r.df = n - 1.0;
  r.mean_difference = mean;
  r.sd_difference = std::sqrt(ss / r.df);
  if (r.sd_difference == 0.0) {
    r.degenerate = true;
    r.t = mean == 0.0 ? 0.0 : std::copysign(kDegenerateT, mean);
    r.p = mean == 0.0 ? 1.0 : 0.0;
    return r;
  }
  r.t = mean / (r.sd_difference / std::sqrt(n));
  r.p = student_t_two_sided(r.t, r.df);
  return r;
}

ChiSquare chi_square_independence(std::span<const double> table, std::size_t rows, std::size_t cols) {
  if (rows < 2 || cols < 2 || table.size() != rows * cols)
    throw UsageError("chi_square: table must be at least 2 x 2 and match its extents");
  std::vector<double> row_sum(rows, 0.0), col_sum(cols, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = table[r * cols + c];
      if (v < 0.0) throw DataError("chi_square: negative count");
      row_sum[r] += v;
      col_sum[c] += v;
      total += v;
    }
  ChiSquare out;
  out.df = static_cast<double>((rows - 1) * (cols - 1));
  if (total == 0.0) return out;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double expected = row_sum[r] * col_sum[c] / total;
      if (expected == 0.0) continue;
      const double diff = table[r * cols + c] - expected;
      out.statistic += diff * diff / expected;
    }
  out.p = chi_square_sf(out.statistic, out.df);
  return out;
}

}  // namespace nhgcat
