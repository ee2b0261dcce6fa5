#include "qspec/dos.hpp"

#include <algorithm>

#include "qspec/errors.hpp"

namespace qspec {

double DOSApprox::cdf(double x) const {
  double whole = 0;
  for (const auto& [lo, hi] : bands) {
    double l = to_double(lo), h = to_double(hi);
    if (x >= h) {
      whole += 1.0;
    } else if (x > l) {
      whole += (x - l) / (h - l);
    } else {
      break;  // bands are sorted
    }
  }
  return whole * band_mass();
}

DOSApprox dos_from_bands(const BandTree& tree, int k) {
  if (k < 0 || k > tree.depth()) throw ValidationError("level outside the built tree");
  DOSApprox d;
  d.k = k;
  d.q_k = convergent_denominators(tree.params().cf, k)[k];
  for (const Band* b : tree.sigma_next_bands(k)) d.bands.emplace_back(b->lo, b->hi);
  if (BigInt(static_cast<long>(d.bands.size())) != d.q_k)
    throw CountMismatchError("sigma band count does not match q_k");
  return d;
}

DOSApprox dos_from_bands(const ModelParams& params, int k) {
  if (k < 1) throw ValidationError("k must be >= 1");
  BandTree tree = build_generating_tree(params, k);
  return dos_from_bands(tree, k);
}

double dos_direct(const ModelParams& params, long n, const Real& lo, const Real& hi) {
  if (n < 1) throw ValidationError("n must be >= 1");
  return static_cast<double>(eig_count_interval(params, n, lo, hi)) / static_cast<double>(n);
}

double dos_compare(const BandTree& tree, int k,
                   const std::vector<std::pair<double, double>>& intervals) {
  const ModelParams& params = tree.params();
  DOSApprox approx = dos_from_bands(tree, k);
  auto qs = convergent_denominators(params.cf, k + 2);
  long n = qs[k + 2].convert_to<long>();
  double worst = 0;
  for (const auto& [lo_d, hi_d] : intervals) {
    Real lo = real_from(lo_d, params.precision_bits);
    Real hi = real_from(hi_d, params.precision_bits);
    double band_side = approx.interval_mass(lo_d, hi_d);
    double direct_side = dos_direct(params, n, lo, hi);
    worst = std::max(worst, std::fabs(band_side - direct_side));
  }
  return worst;
}

double dos_compare(const ModelParams& params, int k,
                   const std::vector<std::pair<double, double>>& intervals) {
  BandTree tree = build_generating_tree(params, k);
  return dos_compare(tree, k, intervals);
}

}  // namespace qspec
