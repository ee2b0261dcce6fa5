#pragma once

#include <cstdint>
#include <vector>

#include "qspec/contfrac.hpp"
#include "qspec/real.hpp"

namespace qspec {

/// Model data shared by every computation: frequency (through its continued
/// fraction), coupling constant, and working precision in bits.
struct ModelParams {
  CFExpansion cf;
  Real lambda;
  long precision_bits = 256;

  ModelParams(CFExpansion cf_, double lambda_, long bits = 256)
      : cf(std::move(cf_)), lambda(real_from(lambda_, bits)), precision_bits(bits) {}
  ModelParams(CFExpansion cf_, const std::string& lambda_, long bits = 256)
      : cf(std::move(cf_)), lambda(real_from(lambda_, bits)), precision_bits(bits) {}

  double lambda_d() const { return to_double(lambda); }
  /// Band structure needs lambda > 4.
  void require_band_regime() const;
  /// The exponent formulas are asserted only for lambda > 24.
  void require_theorem_regime() const;
};

/// Exact floor(n*beta), via convergents refined until two consecutive
/// approximants agree on the floor. Requires an infinite expansion for n >= 1.
BigInt floor_n_beta(const CFExpansion& cf, const BigInt& n);

/// Potential pattern V(n)/lambda in {0,1} for n in [n_from, n_to].
std::vector<std::uint8_t> potential_pattern(const CFExpansion& cf, long n_from, long n_to);

/// Potential values V(n) = lambda*(floor((n+1)beta) - floor(n beta)), exact.
std::vector<Real> potential(const ModelParams& params, long n_from, long n_to);

/// Result of an inertia count; `perturbed` is set when the shift collided with
/// an exact pivot zero and was nudged by one ulp.
struct SturmCount {
  long count = 0;
  bool perturbed = false;
  double applied_shift = 0;
};

/// Number of eigenvalues of H_n strictly below x, by the sign-change count of
/// the shifted leading-principal-minor recursion.
SturmCount sturm_count_below(const ModelParams& params, long n, const Real& x);

/// Eigenvalues of H_n in the closed interval [lo, hi].
long eig_count_interval(const ModelParams& params, long n, const Real& lo, const Real& hi);

namespace oracle {

/// All n eigenvalues of H_n, found by root isolation of the characteristic
/// recurrence with interlacing brackets and plain sign bisection. Slow; meant
/// as an independent cross-check for small n.
std::vector<Real> charpoly_eigenvalues(const ModelParams& params, long n);

}  // namespace oracle

}  // namespace qspec
