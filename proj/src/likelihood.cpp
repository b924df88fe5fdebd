#include "twophase/likelihood.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>

namespace twophase {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Positions {
  std::array<std::vector<int>, 4> of;
  explicit Positions(const ModelSpec& spec) {
    for (SubModel s : kSubModels) of[index(s)] = spec.coefficient_positions(s);
  }
};

// log P(y*, x*, y, x | z) and accumulates S^v into `score` (assumed zeroed).
double cell_log_probability(const ModelSpec& spec, const Positions& pos, const Eigen::VectorXd& flat,
                            const Cell& cell, int z, Eigen::Ref<Eigen::VectorXd> score) {
  const Eigen::VectorXd& zf = spec.z_levels[static_cast<std::size_t>(z)];
  double logp = 0.0;
  std::vector<double> values;
  for (SubModel s : kSubModels) {
    const auto& terms = spec.terms_for(s);
    const auto& at = pos.of[index(s)];
    values.resize(terms.size());
    double eta = 0.0;
    for (std::size_t j = 0; j < terms.size(); ++j) {
      values[j] = terms[j].evaluate<double>(cell, zf);
      eta += flat(at[j]) * values[j];
    }
    const int r = response_of(s, cell);
    logp += log_logistic(r == 1 ? eta : -eta);
    const double residual = r - logistic(eta);
    for (std::size_t j = 0; j < terms.size(); ++j) score(at[j]) += residual * values[j];
  }
  return logp;
}

void require_record_shape(const Record& r, const ModelSpec& spec) {
  auto binary = [](int v) { return v == 0 || v == 1; };
  if (!binary(r.v) || !binary(r.ystar) || !binary(r.xstar)) {
    throw Error(ErrorKind::InvalidArgument, "record fields v, ystar, xstar must be 0 or 1");
  }
  if (r.z < 0 || r.z >= spec.num_z_levels()) {
    throw Error(ErrorKind::InvalidArgument, "record z index out of range");
  }
  if (r.v == 1) {
    if (!r.y || !r.x || !binary(*r.y) || !binary(*r.x)) {
      throw Error(ErrorKind::InvalidArgument, "validated record needs binary y and x");
    }
  } else if (r.y || r.x) {
    throw Error(ErrorKind::InvalidArgument, "unvalidated record must not carry y or x");
  }
}

}  // namespace

void Dataset::validate(bool require_validated) const {
  spec.validate();
  for (const Record& r : records) require_record_shape(r, spec);
  if (records.empty()) throw Error(ErrorKind::InvalidArgument, "dataset has no records");
  if (require_validated && validated_count() == 0) {
    throw Error(ErrorKind::InvalidArgument, "dataset has no validated records");
  }
}

std::size_t Dataset::validated_count() const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [](const Record& r) { return r.v == 1; }));
}

StratumTable tabulate_strata(const std::vector<Record>& records) {
  std::set<int> z_present;
  for (const Record& r : records) z_present.insert(r.z);
  std::vector<StratumKey> keys;
  for (int z : z_present)
    for (int ys = 0; ys < 2; ++ys)
      for (int xs = 0; xs < 2; ++xs) keys.push_back({ys, xs, z});
  std::map<StratumKey, int> where;
  for (std::size_t k = 0; k < keys.size(); ++k) where[keys[k]] = static_cast<int>(k);
  Eigen::VectorXi counts = Eigen::VectorXi::Zero(static_cast<Eigen::Index>(keys.size()));
  for (const Record& r : records) counts(where.at(r.stratum())) += 1;
  return StratumTable(std::move(keys), std::move(counts));
}

std::vector<std::vector<std::size_t>> index_strata(const std::vector<Record>& records,
                                                   const StratumTable& strata) {
  std::map<StratumKey, int> where;
  for (int k = 0; k < strata.size(); ++k) where[strata.key(k)] = k;
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(strata.size()));
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto it = where.find(records[i].stratum());
    if (it == where.end()) throw Error(ErrorKind::InvalidArgument, "record outside the stratum table");
    out[static_cast<std::size_t>(it->second)].push_back(i);
  }
  return out;
}

ScoreTable::ScoreTable(const ModelSpec& spec, const ParamVector& theta) : z_levels_(spec.num_z_levels()) {
  const Eigen::VectorXd flat = theta.flatten();
  const Eigen::Index p = flat.size();
  const Positions pos(spec);
  log_prob_.resize(16 * z_levels_);
  validated_ = Eigen::MatrixXd::Zero(p, 16 * z_levels_);
  stratum_prob_.resize(4 * z_levels_);
  stratum_log_prob_.resize(4 * z_levels_);
  unvalidated_ = Eigen::MatrixXd::Zero(p, 4 * z_levels_);

  for (int z = 0; z < z_levels_; ++z) {
    for (int ys = 0; ys < 2; ++ys) {
      for (int xs = 0; xs < 2; ++xs) {
        const int st = stratum_index(z, ys, xs);
        double mx = kNegInf;
        for (int y = 0; y < 2; ++y) {
          for (int x = 0; x < 2; ++x) {
            const int c = cell_index(z, ys, xs, y, x);
            log_prob_(c) = cell_log_probability(spec, pos, flat, {ys, xs, y, x}, z, validated_.col(c));
            mx = std::max(mx, log_prob_(c));
          }
        }
        if (!std::isfinite(mx)) {
          stratum_prob_(st) = 0.0;
          stratum_log_prob_(st) = kNegInf;
          unvalidated_.col(st).setConstant(std::numeric_limits<double>::quiet_NaN());
          continue;
        }
        const int c0 = cell_index(z, ys, xs, 0, 0);
        const Eigen::Array4d w = (log_prob_.segment<4>(c0).array() - mx).exp();
        const double total = w.sum();
        stratum_log_prob_(st) = mx + std::log(total);
        stratum_prob_(st) = std::exp(stratum_log_prob_(st));
        unvalidated_.col(st) = validated_.middleCols<4>(c0) * (w / total).matrix();
      }
    }
  }
}

Eigen::VectorXd ScoreTable::unvalidated_score(int stratum) const {
  if (!std::isfinite(stratum_log_prob_(stratum))) {
    throw Error(ErrorKind::DegenerateStratum, "stratum has zero probability under the model");
  }
  return unvalidated_.col(stratum);
}

Eigen::Vector4d ScoreTable::conditional(int stratum) const {
  if (!std::isfinite(stratum_log_prob_(stratum))) {
    throw Error(ErrorKind::DegenerateStratum, "stratum has zero probability under the model");
  }
  const int z = stratum / 4;
  const int ys = (stratum / 2) % 2;
  const int xs = stratum % 2;
  const int c0 = cell_index(z, ys, xs, 0, 0);
  return (log_prob_.segment<4>(c0).array() - stratum_log_prob_(stratum)).exp().matrix();
}

CellCounts CellCounts::tabulate(const Dataset& data) {
  const int L = data.spec.num_z_levels();
  CellCounts c{Eigen::VectorXd::Zero(16 * L), Eigen::VectorXd::Zero(4 * L)};
  for (const Record& r : data.records) {
    if (r.v == 1) {
      c.validated(ScoreTable::cell_index(r.z, r.ystar, r.xstar, *r.y, *r.x)) += 1.0;
    } else {
      c.unvalidated(ScoreTable::stratum_index(r.z, r.ystar, r.xstar)) += 1.0;
    }
  }
  return c;
}

namespace {

[[noreturn]] void throw_non_finite(const Dataset& data, bool validated, int slot) {
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    const Record& r = data.records[i];
    const bool hit = validated ? (r.v == 1 && ScoreTable::cell_index(r.z, r.ystar, r.xstar, *r.y, *r.x) == slot)
                               : (r.v == 0 && ScoreTable::stratum_index(r.z, r.ystar, r.xstar) == slot);
    if (hit) {
      throw Error(ErrorKind::NonFiniteLikelihood,
                  "record " + std::to_string(i) + " has zero probability under the model");
    }
  }
  throw Error(ErrorKind::NonFiniteLikelihood, "zero-probability cell");
}

double loglik_from(const ScoreTable& table, const CellCounts& counts) {
  double ll = 0.0;
  for (Eigen::Index c = 0; c < counts.validated.size(); ++c) {
    if (counts.validated(c) > 0) ll += counts.validated(c) * table.log_probability(static_cast<int>(c));
  }
  for (Eigen::Index s = 0; s < counts.unvalidated.size(); ++s) {
    if (counts.unvalidated(s) > 0) ll += counts.unvalidated(s) * table.stratum_log_probability(static_cast<int>(s));
  }
  return ll;
}

Eigen::VectorXd score_from(const ScoreTable& table, const CellCounts& counts) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(table.num_parameters());
  for (Eigen::Index c = 0; c < counts.validated.size(); ++c) {
    if (counts.validated(c) > 0) g += counts.validated(c) * table.validated_score(static_cast<int>(c));
  }
  for (Eigen::Index s = 0; s < counts.unvalidated.size(); ++s) {
    if (counts.unvalidated(s) > 0) g += counts.unvalidated(s) * table.unvalidated_score(static_cast<int>(s));
  }
  return g;
}

}  // namespace

double observed_loglik(const ParamVector& theta, const Dataset& data) {
  data.validate();
  validate(theta, data.spec);
  const ScoreTable table(data.spec, theta);
  const CellCounts counts = CellCounts::tabulate(data);
  for (Eigen::Index c = 0; c < counts.validated.size(); ++c) {
    if (counts.validated(c) > 0 && !std::isfinite(table.log_probability(static_cast<int>(c)))) {
      throw_non_finite(data, true, static_cast<int>(c));
    }
  }
  for (Eigen::Index s = 0; s < counts.unvalidated.size(); ++s) {
    if (counts.unvalidated(s) > 0 && !std::isfinite(table.stratum_log_probability(static_cast<int>(s)))) {
      throw_non_finite(data, false, static_cast<int>(s));
    }
  }
  return loglik_from(table, counts);
}

Eigen::VectorXd observed_score(const ParamVector& theta, const Dataset& data) {
  data.validate();
  validate(theta, data.spec);
  return score_from(ScoreTable(data.spec, theta), CellCounts::tabulate(data));
}

Eigen::VectorXd score_validated(const ParamVector& theta, const ModelSpec& spec, const Record& record) {
  require_record_shape(record, spec);
  if (record.v != 1) throw Error(ErrorKind::InvalidArgument, "score_validated needs a validated record");
  const Eigen::VectorXd flat = theta.flatten();
  Eigen::VectorXd score = Eigen::VectorXd::Zero(flat.size());
  cell_log_probability(spec, Positions(spec), flat, record.cell(), record.z, score);
  return score;
}

Eigen::VectorXd score_unvalidated(const ParamVector& theta, const ModelSpec& spec, const Record& record) {
  require_record_shape(record, spec);
  if (record.v != 0) throw Error(ErrorKind::InvalidArgument, "score_unvalidated needs an unvalidated record");
  const Eigen::VectorXd flat = theta.flatten();
  const Positions pos(spec);
  Eigen::MatrixXd scores = Eigen::MatrixXd::Zero(flat.size(), 4);
  Eigen::Array4d logp;
  for (int y = 0; y < 2; ++y) {
    for (int x = 0; x < 2; ++x) {
      logp(2 * y + x) =
          cell_log_probability(spec, pos, flat, {record.ystar, record.xstar, y, x}, record.z, scores.col(2 * y + x));
    }
  }
  const double mx = logp.maxCoeff();
  if (!std::isfinite(mx)) throw Error(ErrorKind::DegenerateStratum, "stratum has zero probability under the model");
  const Eigen::Array4d w = (logp - mx).exp();
  return scores * (w / w.sum()).matrix();
}

namespace {

Eigen::MatrixXd fd_negative_hessian(const ModelSpec& spec, const Eigen::VectorXd& flat,
                                    const Eigen::VectorXd& z_marginal, const CellCounts& counts) {
  const Eigen::Index p = flat.size();
  Eigen::MatrixXd h(p, p);
  for (Eigen::Index j = 0; j < p; ++j) {
    const double step = 1e-5 * std::max(1.0, std::abs(flat(j)));
    Eigen::VectorXd up = flat, down = flat;
    up(j) += step;
    down(j) -= step;
    const Eigen::VectorXd gu = score_from(ScoreTable(spec, ParamVector::unflatten(spec, up, z_marginal)), counts);
    const Eigen::VectorXd gd = score_from(ScoreTable(spec, ParamVector::unflatten(spec, down, z_marginal)), counts);
    h.col(j) = -(gu - gd) / (2.0 * step);
  }
  return 0.5 * (h + h.transpose());
}

}  // namespace

Eigen::MatrixXd observed_information(const ParamVector& theta, const Dataset& data) {
  data.validate();
  validate(theta, data.spec);
  return fd_negative_hessian(data.spec, theta.flatten(), theta.z_marginal, CellCounts::tabulate(data));
}

ParamVector default_initialization(const Dataset& data) {
  ParamVector theta = zero_parameters(data.spec);
  double ys = 0, xs = 0, y = 0, x = 0, nv = 0;
  Eigen::VectorXd pz = Eigen::VectorXd::Zero(data.spec.num_z_levels());
  for (const Record& r : data.records) {
    ys += r.ystar;
    xs += r.xstar;
    pz(r.z) += 1.0;
    if (r.v == 1) {
      y += *r.y;
      x += *r.x;
      nv += 1.0;
    }
  }
  const double n = static_cast<double>(data.records.size());
  auto logit = [](double p) {
    p = std::clamp(p, 1e-3, 1.0 - 1e-3);
    return std::log(p / (1.0 - p));
  };
  auto set_intercept = [&](SubModel s, Eigen::VectorXd& block, double value) {
    const auto& terms = data.spec.terms_for(s);
    Eigen::Index k = 0;
    for (std::size_t j = 0; j < terms.size(); ++j) {
      if (s == SubModel::Outcome && static_cast<int>(j) == data.spec.beta_term()) continue;
      if (terms[j].is_intercept()) block(k) = value;
      ++k;
    }
  };
  set_intercept(SubModel::OutcomeMisclassification, theta.eta_ystar, logit(ys / n));
  set_intercept(SubModel::ExposureMisclassification, theta.eta_xstar, logit(xs / n));
  set_intercept(SubModel::Outcome, theta.eta_y, logit(nv > 0 ? y / nv : 0.5));
  set_intercept(SubModel::Exposure, theta.eta_x, logit(nv > 0 ? x / nv : 0.5));
  theta.z_marginal = pz / n;
  return theta;
}

namespace {

struct Objective {
  const ModelSpec& spec;
  const CellCounts& counts;
  const Eigen::VectorXd& z_marginal;

  // Log-likelihood and score; -inf when some observed cell has zero probability.
  double operator()(const Eigen::VectorXd& flat, Eigen::VectorXd& grad) const {
    const ScoreTable table(spec, ParamVector::unflatten(spec, flat, z_marginal));
    const double ll = loglik_from(table, counts);
    if (!std::isfinite(ll)) return kNegInf;
    grad = score_from(table, counts);
    if (!grad.allFinite()) return kNegInf;
    return ll;
  }
};

double max_norm(const Eigen::VectorXd& v) { return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff(); }

// Curvature restricted to the free coordinates; frozen rows and columns become identity.
Eigen::MatrixXd masked(Eigen::MatrixXd h, const Eigen::VectorXd& free) {
  for (Eigen::Index j = 0; j < free.size(); ++j) {
    if (free(j) == 0.0) {
      h.row(j).setZero();
      h.col(j).setZero();
      h(j, j) = 1.0;
    }
  }
  return h;
}

struct Ascent {
  const Objective& objective;
  const ModelSpec& spec;
  const Eigen::VectorXd& z_marginal;
  const CellCounts& counts;
  const FitOptions& options;
  Eigen::VectorXd free;  // 1 for coordinates being optimized
  Eigen::VectorXd x;
  Eigen::VectorXd g;
  double f = 0.0;
  int iterations = 0;

  double projected_norm() const { return max_norm(g.cwiseProduct(free)); }

  Eigen::MatrixXd curvature() const { return masked(fd_negative_hessian(spec, x, z_marginal, counts), free); }

  // Freezes nuisance coordinates past the bound at the bound; beta past it is separation.
  bool enforce_bound() {
    Eigen::Index j = 0;
    const double worst = x.cwiseProduct(free).cwiseAbs().maxCoeff(&j);
    if (!(worst > options.separation_bound)) return false;
    if (!options.allow_boundary_nuisance || j == 0) {
      throw Error(ErrorKind::SeparationDetected,
                  "coefficient " + spec.parameter_names()[static_cast<std::size_t>(j)] + " exceeded +/-" +
                      std::to_string(options.separation_bound) + " during ascent");
    }
    for (Eigen::Index k = 1; k < x.size(); ++k) {
      if (free(k) != 0.0 && std::abs(x(k)) > options.separation_bound) {
        x(k) = std::copysign(options.separation_bound, x(k));
        free(k) = 0.0;
      }
    }
    f = objective(x, g);
    if (!std::isfinite(f)) throw Error(ErrorKind::NonFiniteLikelihood, "log-likelihood not finite at the boundary");
    return true;
  }

  Eigen::MatrixXd initial_inverse() const {
    Eigen::LLT<Eigen::MatrixXd> llt(curvature());
    if (llt.info() == Eigen::Success) return masked(llt.solve(Eigen::MatrixXd::Identity(x.size(), x.size())), free);
    return masked(Eigen::MatrixXd::Identity(x.size(), x.size()), free);
  }

  // Quasi-Newton ascent; returns once converged, stalled, or after a freeze.
  void quasi_newton() {
    const Eigen::Index p = x.size();
    Eigen::MatrixXd inv_h = initial_inverse();
    Eigen::VectorXd gn(p);
    for (; iterations < options.max_iterations; ++iterations) {
      if (projected_norm() <= options.gradient_tolerance) return;
      const Eigen::VectorXd gf = g.cwiseProduct(free);
      Eigen::VectorXd d = (inv_h * gf).cwiseProduct(free);
      if (gf.dot(d) <= 0.0) {
        inv_h = masked(Eigen::MatrixXd::Identity(p, p), free);
        d = gf;
      }
      const double cap = 5.0 / std::max(5.0, max_norm(d));
      double t = cap;
      bool accepted = false;
      Eigen::VectorXd xn;
      double fn = kNegInf;
      for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
        xn = x + t * d;
        fn = objective(xn, gn);
        if (std::isfinite(fn) && fn >= f + 1e-4 * t * gf.dot(d)) {
          accepted = true;
          break;
        }
      }
      if (!accepted) return;
      const Eigen::VectorXd s = xn - x;
      const Eigen::VectorXd yv = (g - gn).cwiseProduct(free);
      const double sy = s.dot(yv);
      if (sy > 1e-12 * s.norm() * yv.norm()) {
        const Eigen::VectorXd hy = inv_h * yv;
        const double rho = 1.0 / sy;
        inv_h += (rho * rho * yv.dot(hy) + rho) * s * s.transpose() - rho * (hy * s.transpose() + s * hy.transpose());
      }
      const double rel = std::abs(fn - f) / std::max(1.0, std::abs(f));
      x = xn;
      f = fn;
      g = gn;
      if (enforce_bound()) {
        ++iterations;
        return;
      }
      if (rel <= options.relative_tolerance) return;
    }
  }

  // Newton steps on the finite-difference curvature of the free block.
  void polish() {
    Eigen::VectorXd gn(x.size());
    for (int k = 0; k < 50 && projected_norm() > options.gradient_tolerance; ++k) {
      Eigen::LDLT<Eigen::MatrixXd> ldlt(curvature());
      if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return;
      const Eigen::VectorXd gf = g.cwiseProduct(free);
      const Eigen::VectorXd d = ldlt.solve(gf).cwiseProduct(free);
      double t = 1.0;
      bool accepted = false;
      for (int ls = 0; ls < 30; ++ls, t *= 0.5) {
        const Eigen::VectorXd xn = x + t * d;
        const double fn = objective(xn, gn);
        if (!std::isfinite(fn)) continue;
        const bool armijo = fn >= f + 1e-4 * t * gf.dot(d);
        const bool flat_better =
            max_norm(gn.cwiseProduct(free)) < projected_norm() && fn >= f - 1e-10 * std::max(1.0, std::abs(f));
        if (armijo || flat_better) {
          x = xn;
          f = fn;
          g = gn;
          accepted = true;
          break;
        }
      }
      if (!accepted) return;
      ++iterations;
      if (enforce_bound()) return;
    }
  }

  // Releases frozen coordinates whose gradient points back inside the box.
  bool release_inward() {
    bool released = false;
    for (Eigen::Index k = 1; k < x.size(); ++k) {
      if (free(k) == 0.0 && g(k) * x(k) < 0.0 && std::abs(g(k)) > options.gradient_tolerance) {
        free(k) = 1.0;
        released = true;
      }
    }
    return released;
  }
};

}  // namespace

FitResult fit_mle(const Dataset& data, const std::optional<ParamVector>& init, const FitOptions& options) {
  data.validate(true);
  const ModelSpec& spec = data.spec;
  ParamVector start = init ? *init : default_initialization(data);
  if (start.z_marginal.size() == 0) start.z_marginal = default_initialization(data).z_marginal;
  validate(start, spec);

  const CellCounts counts = CellCounts::tabulate(data);
  const Objective objective{spec, counts, start.z_marginal};
  const Eigen::Index p = spec.num_parameters();

  Ascent ascent{objective, spec, start.z_marginal, counts, options, Eigen::VectorXd::Ones(p), start.flatten(),
                Eigen::VectorXd(p)};
  ascent.f = objective(ascent.x, ascent.g);
  if (!std::isfinite(ascent.f)) {
    throw Error(ErrorKind::NonFiniteLikelihood, "log-likelihood is not finite at the initial value");
  }

  // Each freeze or release restarts the ascent on the new free set.
  for (int round = 0; round < 2 * p + 2; ++round) {
    const Eigen::VectorXd before = ascent.free;
    ascent.quasi_newton();
    if (ascent.free != before) continue;
    if (ascent.iterations >= options.max_iterations && ascent.projected_norm() > options.gradient_tolerance) {
      throw Error(ErrorKind::MaxIterations,
                  "MLE did not converge in " + std::to_string(options.max_iterations) + " iterations");
    }
    ascent.polish();
    if (ascent.free != before) continue;
    if (!ascent.release_inward()) break;
  }

  const Eigen::MatrixXd info = fd_negative_hessian(spec, ascent.x, start.z_marginal, counts);
  std::vector<Eigen::Index> free_index;
  for (Eigen::Index j = 0; j < p; ++j) {
    if (ascent.free(j) != 0.0) free_index.push_back(j);
  }
  const Eigen::MatrixXd free_info = info(free_index, free_index);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(free_info, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > options.singular_condition) {
    throw Error(ErrorKind::SingularInformation, "information matrix at the MLE is singular (condition " +
                                                    std::to_string(lo > 0.0 ? hi / lo : INFINITY) + ")");
  }

  FitResult result;
  result.theta_hat = ParamVector::unflatten(spec, ascent.x, start.z_marginal);
  result.loglik = ascent.f;
  result.gradient_norm = ascent.projected_norm();
  result.converged = result.gradient_norm <= options.gradient_tolerance;
  result.iterations = ascent.iterations;
  const auto names = spec.parameter_names();
  for (Eigen::Index j = 0; j < p; ++j) {
    if (ascent.free(j) == 0.0) result.boundary.push_back(names[static_cast<std::size_t>(j)]);
  }
  if (options.compute_information) result.information_at_mle = info;
  return result;
}

}  // namespace twophase
