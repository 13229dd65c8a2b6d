#pragma once

#include <span>

namespace nhgcat {

// Series and continued fractions stop once the relative update falls below
// this tolerance.
inline constexpr double kSpecialTolerance = 1e-10;

// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);
// Regularized lower incomplete gamma P(a, x) and its complement Q(a, x).
double gamma_p(double a, double x);
double gamma_q(double a, double x);

// Two-sided p-value of Student's t with df degrees of freedom.
double student_t_two_sided(double t, double df);
// Upper tail of the chi-square distribution.
double chi_square_sf(double x, double df);

struct TTest {
  double t = 0.0;
  double p = 1.0;
  double df = 0.0;
  double mean_difference = 0.0;
  double sd_difference = 0.0;
  bool degenerate = false;  // zero variance of the differences
};

// |t| reported for a nonzero mean difference with zero variance.
inline constexpr double kDegenerateT = 1e12;

// Paired t-test on a - b.
TTest paired_t_test(std::span<const double> a, std::span<const double> b);

struct ChiSquare {
  double statistic = 0.0;
  double df = 0.0;
  double p = 1.0;
};

// Test of independence on a rows x cols contingency table stored row-major.
// Cells with zero expected count contribute nothing; df = (rows-1)(cols-1).
ChiSquare chi_square_independence(std::span<const double> table, std::size_t rows, std::size_t cols);

}  // namespace nhgcat
