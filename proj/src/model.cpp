#include "twophase/model.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <set>
#include <sstream>

namespace twophase {

std::string_view to_string(SubModel s) noexcept {
  switch (s) {
    case SubModel::OutcomeMisclassification: return "ystar";
    case SubModel::ExposureMisclassification: return "xstar";
    case SubModel::Outcome: return "y";
    case SubModel::Exposure: return "x";
  }
  return "?";
}

int response_of(SubModel s, const Cell& cell) noexcept {
  switch (s) {
    case SubModel::OutcomeMisclassification: return cell.ystar;
    case SubModel::ExposureMisclassification: return cell.xstar;
    case SubModel::Outcome: return cell.y;
    case SubModel::Exposure: return cell.x;
  }
  return 0;
}

namespace {

bool factor_less(const Factor& a, const Factor& b) {
  if (a.variable != b.variable) return a.variable < b.variable;
  return a.z_feature < b.z_feature;
}

std::string factor_name(const Factor& f) {
  switch (f.variable) {
    case Variable::YStar: return "ystar";
    case Variable::XStar: return "xstar";
    case Variable::Y: return "y";
    case Variable::X: return "x";
    case Variable::Z: return "z" + std::to_string(f.z_feature);
  }
  return "?";
}

// Variables that may appear as predictors of each sub-model.
bool admissible(SubModel s, Variable v) {
  switch (s) {
    case SubModel::OutcomeMisclassification:
      return v == Variable::XStar || v == Variable::Y || v == Variable::X || v == Variable::Z;
    case SubModel::ExposureMisclassification:
      return v == Variable::Y || v == Variable::X || v == Variable::Z;
    case SubModel::Outcome:
      return v == Variable::X || v == Variable::Z;
    case SubModel::Exposure:
      return v == Variable::Z;
  }
  return false;
}

}  // namespace

Term::Term(std::vector<Factor> factors) : factors_(std::move(factors)) {
  std::sort(factors_.begin(), factors_.end(), factor_less);
}

Term Term::of(Variable v, int z_feature) { return Term({Factor{v, v == Variable::Z ? z_feature : 0}}); }

Term Term::operator*(const Term& other) const {
  std::vector<Factor> f = factors_;
  f.insert(f.end(), other.factors_.begin(), other.factors_.end());
  return Term(std::move(f));
}

Term Term::parse(std::string_view text) {
  auto trim = [](std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    return s;
  };
  text = trim(text);
  if (text == "1" || text == "intercept" || text == "(Intercept)") return Term{};
  std::vector<Factor> factors;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t stop = std::min(text.find('*', start), text.size());
    const std::string_view part = trim(text.substr(start, stop - start));
    if (part == "ystar") {
      factors.push_back({Variable::YStar, 0});
    } else if (part == "xstar") {
      factors.push_back({Variable::XStar, 0});
    } else if (part == "y") {
      factors.push_back({Variable::Y, 0});
    } else if (part == "x") {
      factors.push_back({Variable::X, 0});
    } else if (part.size() > 1 && part.front() == 'z') {
      int k = -1;
      const auto* first = part.data() + 1;
      const auto* last = part.data() + part.size();
      const auto res = std::from_chars(first, last, k);
      if (res.ec != std::errc{} || res.ptr != last || k < 0) {
        throw Error(ErrorKind::ParseError, "bad covariate term '" + std::string(part) + "'");
      }
      factors.push_back({Variable::Z, k});
    } else {
      throw Error(ErrorKind::ParseError, "unknown term '" + std::string(text) + "'");
    }
    start = stop + 1;
  }
  return Term(std::move(factors));
}

std::string Term::name() const {
  if (factors_.empty()) return "1";
  std::string out;
  for (const Factor& f : factors_) {
    if (!out.empty()) out += '*';
    out += factor_name(f);
  }
  return out;
}

bool Term::is_pure(Variable v) const noexcept {
  return factors_.size() == 1 && factors_.front().variable == v;
}

bool Term::involves(Variable v) const noexcept {
  return std::any_of(factors_.begin(), factors_.end(), [v](const Factor& f) { return f.variable == v; });
}

std::vector<Eigen::VectorXd> ModelSpec::indicator_levels(int levels) {
  if (levels < 1) throw Error(ErrorKind::InvalidArgument, "need at least one z level");
  std::vector<Eigen::VectorXd> out;
  for (int l = 0; l < levels; ++l) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(levels - 1);
    if (l > 0) v(l - 1) = 1.0;
    out.push_back(v);
  }
  return out;
}

ModelSpec ModelSpec::main_effects() { return main_effects({Eigen::VectorXd()}); }

ModelSpec ModelSpec::main_effects(std::vector<Eigen::VectorXd> z_levels) {
  ModelSpec spec;
  spec.z_levels = std::move(z_levels);
  const int nz = spec.num_z_features();
  auto with_z = [nz](std::vector<Term> t) {
    for (int k = 0; k < nz; ++k) t.push_back(Term::of(Variable::Z, k));
    return t;
  };
  spec.terms_for(SubModel::OutcomeMisclassification) =
      with_z({Term::intercept(), Term::of(Variable::XStar), Term::of(Variable::Y), Term::of(Variable::X)});
  spec.terms_for(SubModel::ExposureMisclassification) =
      with_z({Term::intercept(), Term::of(Variable::Y), Term::of(Variable::X)});
  spec.terms_for(SubModel::Outcome) = with_z({Term::intercept(), Term::of(Variable::X)});
  spec.terms_for(SubModel::Exposure) = with_z({Term::intercept()});
  return spec;
}

int ModelSpec::beta_term() const {
  const auto& t = terms_for(SubModel::Outcome);
  for (std::size_t j = 0; j < t.size(); ++j) {
    if (t[j].is_pure(Variable::X)) return static_cast<int>(j);
  }
  throw Error(ErrorKind::InvalidArgument, "outcome model has no X term");
}

int ModelSpec::num_parameters() const {
  int p = 0;
  for (const auto& t : terms) p += static_cast<int>(t.size());
  return p;  // beta is one of the outcome terms
}

std::vector<int> ModelSpec::coefficient_positions(SubModel s) const {
  const int n_ys = static_cast<int>(terms_for(SubModel::OutcomeMisclassification).size());
  const int n_xs = static_cast<int>(terms_for(SubModel::ExposureMisclassification).size());
  const int n_y = static_cast<int>(terms_for(SubModel::Outcome).size());
  std::vector<int> pos;
  switch (s) {
    case SubModel::OutcomeMisclassification:
      for (int j = 0; j < n_ys; ++j) pos.push_back(1 + j);
      break;
    case SubModel::ExposureMisclassification:
      for (int j = 0; j < n_xs; ++j) pos.push_back(1 + n_ys + j);
      break;
    case SubModel::Outcome: {
      const int bt = beta_term();
      int k = 0;
      for (int j = 0; j < n_y; ++j) pos.push_back(j == bt ? 0 : 1 + n_ys + n_xs + k++);
      break;
    }
    case SubModel::Exposure: {
      const int n_x = static_cast<int>(terms_for(SubModel::Exposure).size());
      for (int j = 0; j < n_x; ++j) pos.push_back(n_ys + n_xs + n_y + j);
      break;
    }
  }
  return pos;
}

std::vector<std::string> ModelSpec::parameter_names() const {
  std::vector<std::string> names(static_cast<std::size_t>(num_parameters()));
  for (SubModel s : kSubModels) {
    const auto pos = coefficient_positions(s);
    const auto& t = terms_for(s);
    for (std::size_t j = 0; j < t.size(); ++j) {
      names[static_cast<std::size_t>(pos[j])] = std::string(to_string(s)) + ":" + t[j].name();
    }
  }
  return names;
}

void ModelSpec::validate() const {
  if (z_levels.empty()) throw Error(ErrorKind::InvalidArgument, "z_levels must be non-empty");
  const auto nf = z_levels.front().size();
  for (std::size_t a = 0; a < z_levels.size(); ++a) {
    if (z_levels[a].size() != nf) {
      throw Error(ErrorKind::InvalidArgument, "all z levels must have the same number of features");
    }
    if (!z_levels[a].allFinite()) throw Error(ErrorKind::InvalidArgument, "z level features must be finite");
    for (std::size_t b = 0; b < a; ++b) {
      if (z_levels[a] == z_levels[b]) throw Error(ErrorKind::InvalidArgument, "z levels must be distinct");
    }
  }
  for (SubModel s : kSubModels) {
    const auto& t = terms_for(s);
    if (std::none_of(t.begin(), t.end(), [](const Term& x) { return x.is_intercept(); })) {
      throw Error(ErrorKind::InvalidArgument, "sub-model " + std::string(to_string(s)) + " needs an intercept");
    }
    std::set<std::string> seen;
    for (const Term& term : t) {
      if (!seen.insert(term.name()).second) {
        throw Error(ErrorKind::InvalidArgument, "duplicate term " + term.name());
      }
      for (const Factor& f : term.factors()) {
        if (!admissible(s, f.variable)) {
          throw Error(ErrorKind::InvalidArgument, "term " + term.name() + " not allowed in sub-model " +
                                                      std::string(to_string(s)));
        }
        if (f.variable == Variable::Z && f.z_feature >= nf) {
          throw Error(ErrorKind::InvalidArgument, "term " + term.name() + " refers to a missing z feature");
        }
      }
    }
  }
  const auto& y_terms = terms_for(SubModel::Outcome);
  const auto pure_x = std::count_if(y_terms.begin(), y_terms.end(),
                                    [](const Term& t) { return t.is_pure(Variable::X); });
  if (pure_x != 1) throw Error(ErrorKind::InvalidArgument, "outcome model needs exactly one X term");
}

ParamVector zero_parameters(const ModelSpec& spec) {
  ParamVector p;
  p.beta = 0.0;
  p.eta_ystar = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec.terms_for(SubModel::OutcomeMisclassification).size()));
  p.eta_xstar = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec.terms_for(SubModel::ExposureMisclassification).size()));
  p.eta_y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec.terms_for(SubModel::Outcome).size()) - 1);
  p.eta_x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec.terms_for(SubModel::Exposure).size()));
  p.z_marginal = Eigen::VectorXd::Constant(spec.num_z_levels(), 1.0 / spec.num_z_levels());
  return p;
}

void validate(const ParamVector& theta, const ModelSpec& spec) {
  auto len = [&](SubModel s) { return static_cast<Eigen::Index>(spec.terms_for(s).size()); };
  if (theta.eta_ystar.size() != len(SubModel::OutcomeMisclassification) ||
      theta.eta_xstar.size() != len(SubModel::ExposureMisclassification) ||
      theta.eta_y.size() != len(SubModel::Outcome) - 1 || theta.eta_x.size() != len(SubModel::Exposure)) {
    throw Error(ErrorKind::InvalidArgument, "parameter block lengths do not match the model terms");
  }
  if (!std::isfinite(theta.beta) || !theta.eta_ystar.allFinite() || !theta.eta_xstar.allFinite() ||
      !theta.eta_y.allFinite() || !theta.eta_x.allFinite()) {
    throw Error(ErrorKind::InvalidArgument, "all coefficients must be finite");
  }
  if (theta.z_marginal.size() > 0) {
    if (theta.z_marginal.size() != spec.num_z_levels()) {
      throw Error(ErrorKind::InvalidArgument, "z_marginal length must equal the number of z levels");
    }
    if ((theta.z_marginal.array() < 0.0).any() || (theta.z_marginal.array() > 1.0).any() ||
        std::abs(theta.z_marginal.sum() - 1.0) > 1e-12) {
      throw Error(ErrorKind::InvalidArgument, "z_marginal must be a probability vector");
    }
  }
}

namespace {
double checked_logit(double p, const char* what) {
  if (!(p > 0.0 && p < 1.0)) {
    throw Error(ErrorKind::DegenerateRate, std::string(what) + " must lie strictly inside (0, 1)");
  }
  return std::log(p / (1.0 - p));
}
}  // namespace

LogisticCoefficients fpr_tpr_to_coefficients(const ErrorRateSpec& spec) {
  const double intercept = checked_logit(spec.fpr, "false positive rate");
  const double at_one = checked_logit(spec.tpr, "true positive rate");
  return {intercept, at_one - intercept};
}

double prevalence_to_intercept(double p0) { return checked_logit(p0, "prevalence"); }

Eigen::Vector4d phase2_given_phase1(const ParamVector& theta, const ModelSpec& spec, int ystar,
                                    int xstar, int z) {
  Eigen::Vector4d logp;
  for (int y = 0; y < 2; ++y) {
    for (int x = 0; x < 2; ++x) {
      const Cell cell{ystar, xstar, y, x};
      double lp = 0.0;
      for (SubModel s : kSubModels) {
        const double eta = linear_predictor(theta, spec, s, cell, z);
        lp += log_logistic(response_of(s, cell) == 1 ? eta : -eta);
      }
      logp(2 * y + x) = lp;
    }
  }
  const double mx = logp.maxCoeff();
  if (!std::isfinite(mx)) {
    throw Error(ErrorKind::DegenerateStratum, "stratum has zero probability under the model");
  }
  Eigen::Vector4d p = (logp.array() - mx).exp();
  return p / p.sum();
}

StratumTable::StratumTable(std::vector<StratumKey> keys, Eigen::VectorXi counts)
    : keys_(std::move(keys)), counts_(std::move(counts)) {
  if (static_cast<Eigen::Index>(keys_.size()) != counts_.size()) {
    throw Error(ErrorKind::InvalidArgument, "stratum keys and counts differ in length");
  }
}

StratumTable StratumTable::from_counts(const Eigen::VectorXi& counts, int z_levels) {
  if (counts.size() != 4 * z_levels) {
    throw Error(ErrorKind::InvalidArgument, "expected 4 counts per z level");
  }
  std::vector<StratumKey> keys;
  for (int z = 0; z < z_levels; ++z)
    for (int ys = 0; ys < 2; ++ys)
      for (int xs = 0; xs < 2; ++xs) keys.push_back({ys, xs, z});
  return StratumTable(std::move(keys), counts);
}

std::optional<int> StratumTable::find(const StratumKey& key) const {
  for (std::size_t k = 0; k < keys_.size(); ++k) {
    if (keys_[k] == key) return static_cast<int>(k);
  }
  return std::nullopt;
}

std::vector<int> StratumTable::z_levels_present() const {
  std::set<int> z;
  for (const auto& k : keys_) z.insert(k.z);
  return {z.begin(), z.end()};
}

Eigen::VectorXd StratumTable::empirical_z_marginal(int levels) const {
  Eigen::VectorXd pz = Eigen::VectorXd::Zero(levels);
  for (std::size_t k = 0; k < keys_.size(); ++k) {
    if (keys_[k].z < 0 || keys_[k].z >= levels) {
      throw Error(ErrorKind::InvalidArgument, "stratum z level outside the model's z levels");
    }
    pz(keys_[k].z) += counts_(static_cast<Eigen::Index>(k));
  }
  return pz / pz.sum();
}

void StratumTable::validate() const {
  if (keys_.empty()) throw Error(ErrorKind::InvalidArgument, "stratum table is empty");
  std::set<StratumKey> unique(keys_.begin(), keys_.end());
  if (unique.size() != keys_.size()) throw Error(ErrorKind::InvalidArgument, "duplicate stratum keys");
  for (const auto& k : keys_) {
    if ((k.ystar != 0 && k.ystar != 1) || (k.xstar != 0 && k.xstar != 1) || k.z < 0) {
      throw Error(ErrorKind::InvalidArgument, "stratum keys must be binary (y*, x*) with z >= 0");
    }
  }
  if ((counts_.array() < 0).any()) throw Error(ErrorKind::InvalidArgument, "stratum counts must be >= 0");
  if (total() <= 0) throw Error(ErrorKind::InvalidArgument, "Phase I total N must be positive");
  for (int z : z_levels_present()) {
    for (int ys = 0; ys < 2; ++ys)
      for (int xs = 0; xs < 2; ++xs)
        if (!unique.count({ys, xs, z})) {
          throw Error(ErrorKind::InvalidArgument,
                      "every (y*, x*) pair must appear for z level " + std::to_string(z));
        }
  }
}

Eigen::VectorXd resolve_z_marginal(const ParamVector& theta, const ModelSpec& spec,
                                   const StratumTable& strata) {
  if (theta.z_marginal.size() > 0) return theta.z_marginal;
  return strata.empirical_z_marginal(spec.num_z_levels());
}

}  // namespace twophase
