#pragma once

#include <span>
#include <string>

namespace dlgresp::stats {

/// A success proportion with its confidence interval. successes is real
/// because tied comparisons contribute half a success.
struct Proportion {
  double successes = 0.0;
  int n = 0;
  double estimate = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double level = 0.95;
};

/// Wilson score interval. Requires n >= 1 and 0 <= successes <= n.
Proportion wilson_ci(double successes, int n, double level = 0.95);

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p_one_sided = 0.5;  // P(T >= t) under H0, alternative mean_a > mean_b
  double mean_a = 0.0;
  double mean_b = 0.0;
  std::string direction = "mean_a > mean_b";
};

/// Unpaired Welch t-test with Welch-Satterthwaite degrees of freedom and a
/// one-sided alternative (mean of `a` exceeds mean of `b`). Each group needs at
/// least two values and the groups may not both have zero variance.
TTestResult one_sided_welch_t(std::span<const double> a, std::span<const double> b);

/// Inverse of the standard normal CDF on (0, 1).
double normal_quantile(double p);

/// I_x(a, b), via the continued fraction expansion.
double regularized_incomplete_beta(double a, double b, double x);

/// P(T >= t) for Student's t with `df` degrees of freedom.
double student_t_upper_tail(double t, double df);

}  // namespace dlgresp::stats
