#pragma once

#include "qspec/bandtree.hpp"

namespace qspec {

/// Level-k approximation of the integrated density of states: the bands of
/// sigma_{(k+1,0)}, each carrying mass 1/q_k. N_k is the associated step
/// distribution with linear interpolation inside a band.
struct DOSApprox {
  int k = 0;
  BigInt q_k;
  std::vector<std::pair<Real, Real>> bands;  // sorted

  double band_mass() const { return 1.0 / q_k.convert_to<double>(); }
  double total_mass() const { return band_mass() * static_cast<double>(bands.size()); }
  /// N_k(x): fraction of bands below x, partial bands by position.
  double cdf(double x) const;
  /// Mass assigned to the closed interval [lo, hi].
  double interval_mass(double lo, double hi) const { return cdf(hi) - cdf(lo); }
};

/// Band-counting construction, from a tree already built at least to level k.
DOSApprox dos_from_bands(const BandTree& tree, int k);

/// Convenience variant that builds the tree itself.
DOSApprox dos_from_bands(const ModelParams& params, int k);

/// Finite-volume construction: eigenvalues of H_n in [lo, hi] over n.
double dos_direct(const ModelParams& params, long n, const Real& lo, const Real& hi);

/// Max discrepancy between the two constructions over the test intervals,
/// with the finite-volume side evaluated at n = q_{k+2}.
double dos_compare(const ModelParams& params, int k,
                   const std::vector<std::pair<double, double>>& intervals);
double dos_compare(const BandTree& tree, int k,
                   const std::vector<std::pair<double, double>>& intervals);

}  // namespace qspec
