#pragma once

// Independent reference implementations used only by the tests. Nothing here
// calls into the library's likelihood, information or search code.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace oracle {

using ld = long double;
using VectorL = Eigen::Matrix<ld, Eigen::Dynamic, 1>;

inline ld sigmoid(ld t) { return 1.0L / (1.0L + std::exp(-t)); }
inline ld bern(ld p1, int v) { return v == 1 ? p1 : 1.0L - p1; }

// Main-effects model with an optional binary Z entering every sub-model,
// coded directly from its four conditionals. Flat layout:
//   [beta, c0, c1(x*), c2(y), c3(x), (cz), b0, b1(y), b2(x), (bz), a0, (az), g0, (gz)]
// for P(Y*|..) = c, P(X*|..) = b, P(Y|..) = beta, a, P(X|..) = g.
struct MainEffects {
  bool with_z = false;

  int size() const { return with_z ? 14 : 10; }

  ld cell_probability(const VectorL& t, int ystar, int xstar, int y, int x, int z) const {
    const ld zz = with_z ? ld(z) : 0.0L;
    int i = 0;
    const ld beta = t(i++);
    const ld c0 = t(i++), c1 = t(i++), c2 = t(i++), c3 = t(i++);
    const ld cz = with_z ? t(i++) : 0.0L;
    const ld b0 = t(i++), b1 = t(i++), b2 = t(i++);
    const ld bz = with_z ? t(i++) : 0.0L;
    const ld a0 = t(i++);
    const ld az = with_z ? t(i++) : 0.0L;
    const ld g0 = t(i++);
    const ld gz = with_z ? t(i++) : 0.0L;
    const ld px = sigmoid(g0 + gz * zz);
    const ld py = sigmoid(a0 + beta * x + az * zz);
    const ld pxs = sigmoid(b0 + b1 * y + b2 * x + bz * zz);
    const ld pys = sigmoid(c0 + c1 * xstar + c2 * y + c3 * x + cz * zz);
    return bern(pys, ystar) * bern(pxs, xstar) * bern(py, y) * bern(px, x);
  }

  // log P(y*, x*, y, x | z) when validated, log sum_{y,x} of it otherwise.
  ld record_loglik(const VectorL& t, int v, int ystar, int xstar, int y, int x, int z) const {
    if (v == 1) return std::log(cell_probability(t, ystar, xstar, y, x, z));
    ld s = 0.0L;
    for (int yy = 0; yy < 2; ++yy)
      for (int xx = 0; xx < 2; ++xx) s += cell_probability(t, ystar, xstar, yy, xx, z);
    return std::log(s);
  }

  // Central differences in long double.
  VectorL fd_score(const VectorL& t, int v, int ystar, int xstar, int y, int x, int z, ld h = 1e-6L) const {
    VectorL g(t.size());
    for (Eigen::Index j = 0; j < t.size(); ++j) {
      VectorL up = t, dn = t;
      up(j) += h;
      dn(j) -= h;
      g(j) = (record_loglik(up, v, ystar, xstar, y, x, z) - record_loglik(dn, v, ystar, xstar, y, x, z)) / (2.0L * h);
    }
    return g;
  }
};

// Newton-Raphson / IRLS for one logistic regression.
inline Eigen::VectorXd irls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int iterations = 100) {
  Eigen::VectorXd b = Eigen::VectorXd::Zero(X.cols());
  for (int it = 0; it < iterations; ++it) {
    const Eigen::ArrayXd eta = X * b;
    const Eigen::ArrayXd p = 1.0 / (1.0 + (-eta).exp());
    const Eigen::ArrayXd w = p * (1.0 - p);
    const Eigen::MatrixXd H = X.transpose() * (X.array().colwise() * w).matrix();
    const Eigen::VectorXd g = X.transpose() * (y.array() - p).matrix();
    const Eigen::VectorXd d = H.ldlt().solve(g);
    b += d;
    if (d.lpNorm<Eigen::Infinity>() < 1e-13) break;
  }
  return b;
}

// Every integer vector with lower_k <= v_k <= upper_k, v_k = lower_k (mod step)
// and sum n, by unpruned nested enumeration of the box.
inline std::vector<Eigen::VectorXi> brute_force_grid(const Eigen::VectorXi& lower, const Eigen::VectorXi& upper,
                                                     int step, int n) {
  std::vector<Eigen::VectorXi> out;
  Eigen::VectorXi v = lower;
  const Eigen::Index K = lower.size();
  std::function<void(Eigen::Index)> rec = [&](Eigen::Index k) {
    if (k == K) {
      if (v.sum() == n) out.push_back(v);
      return;
    }
    for (int a = lower(k); a <= upper(k); a += step) {
      v(k) = a;
      rec(k + 1);
    }
  };
  if (K > 0) rec(0);
  return out;
}

// Every allocation with floor_k <= n_k <= cap_k summing to n.
inline std::vector<Eigen::VectorXi> all_designs(const Eigen::VectorXi& floor, const Eigen::VectorXi& cap, int n) {
  return brute_force_grid(floor, cap, 1, n);
}

}  // namespace oracle
