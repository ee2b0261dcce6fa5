#pragma once

#include <array>

#include "qspec/schrodinger.hpp"

namespace qspec {

/// Trace triple at level k:
///   t_prev = tr M_{k-1},  t_cur = tr M_k,  t_mix = tr(M_{k-1} M_k).
/// The combination t_prev^2 + t_cur^2 + t_mix^2 - t_prev*t_cur*t_mix - 4
/// stays equal to lambda^2 along the recursion and serves as a drift monitor.
struct TraceState {
  int k = 0;
  Real energy;
  Real t_prev, t_cur, t_mix;
};

/// Reusable trace-recursion workspace bound to one (cf, lambda, precision).
/// Not thread safe; create one per thread. All scratch is preallocated, so a
/// call costs sum(a_l) fused multiply-subtracts.
class TraceKernel {
 public:
  TraceKernel(const CFExpansion& cf, const Real& lambda, long bits);

  long bits() const { return bits_; }
  const Real& lambda() const { return lambda_; }

  /// Advance the triple from level 0 to `level` at energy E. The invariant is
  /// verified at the final level (and at every level when `check_each` is
  /// set); violation raises PrecisionLossError.
  void eval(mpfr_srcptr E, int level, bool check_each = false);

  mpfr_srcptr u() const { return raw(u_); }  // tr M_{level-1}
  mpfr_srcptr v() const { return raw(v_); }  // tr M_level
  mpfr_srcptr w() const { return raw(w_); }  // tr(M_{level-1} M_level)

  /// x_{(level,-1)} = t_cur*t_prev - t_mix for the current triple.
  void x_minus_one(mpfr_ptr out) const;

  /// |invariant - lambda^2| of the current triple.
  double residual() const;

  TraceState state(int level) const;

 private:
  void check_invariant();

  CFExpansion cf_;
  long bits_;
  Real lambda_, lambda_sq_;
  Real u_, v_, w_;
  Real xp_, xc_, xn_;
  mutable Real s1_, s2_, s3_;
};

/// Trace triple (2, E, E - lambda) at level 0.
TraceState initial_state(const ModelParams& params, const Real& E);

/// Level k -> k+1 via tr(M_{k-1} M_k^p) three-term recursion; O(a) cost,
/// no matrix entries formed.
TraceState advance_state(const ModelParams& params, const TraceState& state);

/// x_{(k,p)}(E) = tr(M_{k-1} M_k^p). Requires k >= 0, p >= -1.
Real trace_x(const ModelParams& params, const Real& E, int k, int p);

/// |t_prev^2 + t_cur^2 + t_mix^2 - t_prev*t_cur*t_mix - 4 - lambda^2|.
Real fricke_residual(const ModelParams& params, const TraceState& state);

/// Direct ordered product of one-step matrices over q_k sites (k >= 1), or the
/// fixed level -1/0 matrices. Row-major 2x2. Verification oracle only;
/// rejects q_k > 20000.
std::array<Real, 4> transfer_matrix(const ModelParams& params, const Real& E, int k);

}  // namespace qspec
