#pragma once

// Independent reference computations for the statistics, built on Boost.Math.

#include <cmath>
#include <utility>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

namespace testing {

struct WilsonRef {
  double low, high;
};

inline WilsonRef wilson_reference(double successes, int n, double level) {
  const boost::math::normal_distribution<long double> normal;
  const long double z = boost::math::quantile(normal, 1.0L - (1.0L - level) / 2.0L);
  const long double nn = n;
  const long double p = successes / nn;
  const long double denom = 1.0L + z * z / nn;
  const long double center = (p + z * z / (2.0L * nn)) / denom;
  const long double half = z * std::sqrt(p * (1.0L - p) / nn + z * z / (4.0L * nn * nn)) / denom;
  return {static_cast<double>(center - half), static_cast<double>(center + half)};
}

struct WelchRef {
  double t, df, p;
};

inline WelchRef welch_reference(const std::vector<double>& a, const std::vector<double>& b) {
  auto moments = [](const std::vector<double>& x) {
    long double m = 0;
    for (double v : x) m += v;
    m /= x.size();
    long double ss = 0;
    for (double v : x) ss += (v - m) * (v - m);
    return std::pair<long double, long double>{m, ss / (x.size() - 1)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const long double sa = va / a.size(), sb = vb / b.size();
  const long double t = (ma - mb) / std::sqrt(sa + sb);
  const long double df =
      (sa + sb) * (sa + sb) / (sa * sa / (a.size() - 1) + sb * sb / (b.size() - 1));
  const boost::math::students_t_distribution<long double> dist(df);
  const long double p = boost::math::cdf(boost::math::complement(dist, t));
  return {static_cast<double>(t), static_cast<double>(df), static_cast<double>(p)};
}

}  // namespace testing
