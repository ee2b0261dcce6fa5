#pragma once

#include <string>

#include "qspec/dos.hpp"

namespace qspec {

/// Exponent below which the distribution function is Hoelder continuous, for
/// beta = [0;b,b,...] and coupling lambda > 24.
double gamma_lower(int b, double lambda);

/// Exponent above which Hoelder continuity fails, same regime.
double gamma_upper(int b, double lambda);

/// log of the lower bound on |B|/4 over all level-k generating bands
/// (constant-b formulas).
double bound_L_log(int b, double lambda, int k);

/// log of the upper bound on the shortest level-k band length over 4.
double bound_U_log(int b, double lambda, int k);

struct ExponentEntry {
  int level = 0;
  int ordinal = 0;
  BandKind kind = BandKind::I;
  double log_length = 0;
  double log_mass = 0;
  double exponent = 0;
};

struct EmpiricalExponents {
  double min_exponent = 0;
  double max_exponent = 0;
  std::vector<double> per_level_min;  // index = level, NaN when undefined
  std::vector<ExponentEntry> table;
  double C_est = 1.0;
};

/// Per-band scaling exponents log(mass)/log(length) from a built tree; only
/// bands shorter than 1 enter (the ratio is meaningless above unit length).
EmpiricalExponents empirical_exponents(const BandTree& tree);
EmpiricalExponents empirical_exponents(const ModelParams& params, int depth);

/// gamma_k = (log C - log q_k)/log L(k+1): constant-b uses the closed-form
/// L bound, other frequencies the measured minimal band lengths. Entries are
/// NaN where the denominator is not yet negative.
std::vector<double> gamma_k_sequence(const ModelParams& params, int depth);

/// Per-level minimal band lengths (log). Uses the full tree when the level
/// sizes allow, otherwise a beam search over the shortest bands.
std::vector<double> min_length_logs(const ModelParams& params, int depth, int beam_width = 192);

enum class DecayClass { Geometric, SuperGeometric, Inconclusive };

struct DichotomyResult {
  DecayClass cls = DecayClass::Inconclusive;
  std::vector<double> min_len_log;  // index = level, from 1
  std::vector<double> gamma_k;      // index = k, from 1
  double fit_residual = 0;
  double median_second_diff = 0;
  double mean_step = 0;
  bool matches_cf_statistic = false;
  std::string summary;
};

/// Classifies the per-level minimal band-length decay as geometric (Hoelder
/// regime) or super-geometric (non-Hoelder), and checks the verdict against
/// the coefficient mean of the frequency.
DichotomyResult dichotomy_check(const CFExpansion& cf, double lambda, int depth,
                                long precision_bits = 256);

struct CorollaryRow {
  double lambda = 0;
  double lower_times_loglam = 0;
  double upper_times_loglam = 0;
  double target = 0;
};

/// Both exponent bounds multiplied by log(lambda), against the common
/// lambda -> infinity limit.
std::vector<CorollaryRow> corollary_asymptotics(int b, const std::vector<double>& lambdas);

struct HolderReport {
  bool constant_b = false;
  unsigned long b = 0;
  double lambda = 0;
  int depth = 0;
  double gamma_lower_value = 0;
  double gamma_upper_value = 0;
  std::vector<double> L_log_seq;  // closed form for constant b, else measured minima
  std::vector<double> U_log_seq;
  std::vector<double> measured_min_log;
  std::vector<double> measured_max_log;
  std::vector<double> gamma_k_seq;
  double C_est = 1.0;
  double delta = 0;  // validity window surrogate: deepest length bound
  EmpiricalExponents empirical;
};

/// Full pipeline: tree, exponent table, bound sequences, gamma_k.
HolderReport holder_report(const ModelParams& params, int depth);

}  // namespace qspec
