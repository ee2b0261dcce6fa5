#include "qspec/tracemap.hpp"

#include "qspec/errors.hpp"

namespace qspec {

namespace {
constexpr int kAlarmMarginBits = 40;
}

TraceKernel::TraceKernel(const CFExpansion& cf, const Real& lambda, long bits)
    : cf_(cf), bits_(bits) {
  for (Real* r : {&lambda_, &lambda_sq_, &u_, &v_, &w_, &xp_, &xc_, &xn_, &s1_, &s2_, &s3_})
    mpfr_set_prec(raw(*r), bits_);
  mpfr_set(raw(lambda_), raw(lambda), MPFR_RNDN);
  mpfr_sqr(raw(lambda_sq_), raw(lambda_), MPFR_RNDN);
}

void TraceKernel::eval(mpfr_srcptr E, int level, bool check_each) {
  // level 0: (tr M_{-1}, tr M_0, tr(M_{-1} M_0)) = (2, E, E - lambda)
  mpfr_set_ui(raw(u_), 2, MPFR_RNDN);
  mpfr_set(raw(v_), E, MPFR_RNDN);
  mpfr_sub(raw(w_), E, raw(lambda_), MPFR_RNDN);
  if (check_each) check_invariant();
  for (int l = 0; l < level; ++l) {
    unsigned long a = cf_.a(l + 1);
    // x_p = tr(M_{l-1} M_l^p): x_0 = u, x_1 = w, multiplier v
    mpfr_swap(raw(xp_), raw(u_));
    mpfr_swap(raw(xc_), raw(w_));
    for (unsigned long p = 2; p <= a + 1; ++p) {
      mpfr_fms(raw(xn_), raw(v_), raw(xc_), raw(xp_), MPFR_RNDN);
      mpfr_swap(raw(xp_), raw(xc_));
      mpfr_swap(raw(xc_), raw(xn_));
    }
    // new triple: (v, x_a, x_{a+1})
    mpfr_swap(raw(u_), raw(v_));
    mpfr_swap(raw(v_), raw(xp_));
    mpfr_swap(raw(w_), raw(xc_));
    if (check_each) check_invariant();
  }
  if (!check_each) check_invariant();
}

void TraceKernel::x_minus_one(mpfr_ptr out) const {
  mpfr_mul(raw(s1_), raw(u_), raw(v_), MPFR_RNDN);
  mpfr_sub(out, raw(s1_), raw(w_), MPFR_RNDN);
}

double TraceKernel::residual() const {
  mpfr_sqr(raw(s1_), raw(u_), MPFR_RNDN);
  mpfr_fma(raw(s1_), raw(v_), raw(v_), raw(s1_), MPFR_RNDN);
  mpfr_fma(raw(s1_), raw(w_), raw(w_), raw(s1_), MPFR_RNDN);  // u^2+v^2+w^2
  mpfr_mul(raw(s2_), raw(u_), raw(v_), MPFR_RNDN);
  mpfr_mul(raw(s2_), raw(s2_), raw(w_), MPFR_RNDN);            // u v w
  mpfr_sub(raw(s3_), raw(s1_), raw(s2_), MPFR_RNDN);
  mpfr_sub_ui(raw(s3_), raw(s3_), 4, MPFR_RNDN);
  mpfr_sub(raw(s3_), raw(s3_), raw(lambda_sq_), MPFR_RNDN);
  mpfr_abs(raw(s3_), raw(s3_), MPFR_RNDN);
  return mpfr_get_d(raw(s3_), MPFR_RNDU);
}

void TraceKernel::check_invariant() {
  // relative-to-scale rounding check: the invariant is exact in exact
  // arithmetic, so the residual must stay at roundoff level of the largest
  // term regardless of how big the traces themselves are.
  mpfr_sqr(raw(s1_), raw(u_), MPFR_RNDN);
  mpfr_fma(raw(s1_), raw(v_), raw(v_), raw(s1_), MPFR_RNDN);
  mpfr_fma(raw(s1_), raw(w_), raw(w_), raw(s1_), MPFR_RNDN);
  mpfr_mul(raw(s2_), raw(u_), raw(v_), MPFR_RNDN);
  mpfr_mul(raw(s2_), raw(s2_), raw(w_), MPFR_RNDN);
  mpfr_sub(raw(s3_), raw(s1_), raw(s2_), MPFR_RNDN);
  mpfr_sub_ui(raw(s3_), raw(s3_), 4, MPFR_RNDN);
  mpfr_sub(raw(s3_), raw(s3_), raw(lambda_sq_), MPFR_RNDN);
  mpfr_abs(raw(s3_), raw(s3_), MPFR_RNDN);
  // scale = u^2+v^2+w^2 + |uvw| + lambda^2 + 4
  mpfr_abs(raw(s2_), raw(s2_), MPFR_RNDN);
  mpfr_add(raw(s2_), raw(s2_), raw(s1_), MPFR_RNDN);
  mpfr_add(raw(s2_), raw(s2_), raw(lambda_sq_), MPFR_RNDN);
  mpfr_add_ui(raw(s2_), raw(s2_), 4, MPFR_RNDN);
  mpfr_mul_2si(raw(s2_), raw(s2_), -(bits_ - kAlarmMarginBits), MPFR_RNDN);
  if (mpfr_cmp(raw(s3_), raw(s2_)) > 0)
    throw PrecisionLossError("trace invariant drift exceeded tolerance");
}

TraceState TraceKernel::state(int level) const {
  TraceState st;
  st.k = level;
  st.t_prev = u_;
  st.t_cur = v_;
  st.t_mix = w_;
  return st;
}

TraceState initial_state(const ModelParams& params, const Real& E) {
  const long bits = params.precision_bits;
  TraceState st;
  st.k = 0;
  st.energy = make_real(bits);
  mpfr_set(raw(st.energy), raw(E), MPFR_RNDN);
  st.t_prev = real_from(2.0, bits);
  st.t_cur = st.energy;
  st.t_mix = make_real(bits);
  mpfr_sub(raw(st.t_mix), raw(E), raw(params.lambda), MPFR_RNDN);
  return st;
}

TraceState advance_state(const ModelParams& params, const TraceState& state) {
  const long bits = params.precision_bits;
  unsigned long a = params.cf.a(state.k + 1);
  Real xp = state.t_prev, xc = state.t_mix, xn = make_real(bits);
  for (unsigned long p = 2; p <= a + 1; ++p) {
    mpfr_fms(raw(xn), raw(state.t_cur), raw(xc), raw(xp), MPFR_RNDN);
    mpfr_swap(raw(xp), raw(xc));
    mpfr_swap(raw(xc), raw(xn));
  }
  TraceState next;
  next.k = state.k + 1;
  next.energy = state.energy;
  next.t_prev = state.t_cur;
  next.t_cur = std::move(xp);
  next.t_mix = std::move(xc);
  Real resid = fricke_residual(params, next);
  Real scale = make_real(bits);
  mpfr_sqr(raw(scale), raw(next.t_mix), MPFR_RNDN);
  mpfr_fma(raw(scale), raw(next.t_cur), raw(next.t_cur), raw(scale), MPFR_RNDN);
  mpfr_fma(raw(scale), raw(next.t_prev), raw(next.t_prev), raw(scale), MPFR_RNDN);
  mpfr_sqr(raw(scale), raw(scale), MPFR_RNDN);  // generous: (u^2+v^2+w^2)^2 >= |uvw| scale
  mpfr_add_ui(raw(scale), raw(scale), 16, MPFR_RNDN);
  mpfr_mul_2si(raw(scale), raw(scale), -(bits - kAlarmMarginBits), MPFR_RNDN);
  if (mpfr_cmp(raw(resid), raw(scale)) > 0)
    throw PrecisionLossError("trace invariant drift exceeded tolerance");
  return next;
}

Real trace_x(const ModelParams& params, const Real& E, int k, int p) {
  if (k < 0 || p < -1) throw ValidationError("trace_x needs k >= 0, p >= -1");
  const long bits = params.precision_bits;
  TraceKernel kernel(params.cf, params.lambda, bits);
  kernel.eval(raw(E), k);
  Real out = make_real(bits);
  if (p == 0) {
    mpfr_set(raw(out), kernel.u(), MPFR_RNDN);
  } else if (p == 1) {
    mpfr_set(raw(out), kernel.w(), MPFR_RNDN);
  } else if (p == -1) {
    kernel.x_minus_one(raw(out));
  } else {
    Real xp = make_real(bits), xc = make_real(bits), xn = make_real(bits);
    mpfr_set(raw(xp), kernel.u(), MPFR_RNDN);
    mpfr_set(raw(xc), kernel.w(), MPFR_RNDN);
    for (int j = 2; j <= p; ++j) {
      mpfr_fms(raw(xn), kernel.v(), raw(xc), raw(xp), MPFR_RNDN);
      mpfr_swap(raw(xp), raw(xc));
      mpfr_swap(raw(xc), raw(xn));
    }
    mpfr_set(raw(out), raw(xc), MPFR_RNDN);
  }
  return out;
}

Real fricke_residual(const ModelParams& params, const TraceState& state) {
  const long bits = params.precision_bits;
  Real acc = make_real(bits), t = make_real(bits);
  mpfr_sqr(raw(acc), raw(state.t_prev), MPFR_RNDN);
  mpfr_fma(raw(acc), raw(state.t_cur), raw(state.t_cur), raw(acc), MPFR_RNDN);
  mpfr_fma(raw(acc), raw(state.t_mix), raw(state.t_mix), raw(acc), MPFR_RNDN);
  mpfr_mul(raw(t), raw(state.t_prev), raw(state.t_cur), MPFR_RNDN);
  mpfr_mul(raw(t), raw(t), raw(state.t_mix), MPFR_RNDN);
  mpfr_sub(raw(acc), raw(acc), raw(t), MPFR_RNDN);
  mpfr_sub_ui(raw(acc), raw(acc), 4, MPFR_RNDN);
  mpfr_fms(raw(t), raw(params.lambda), raw(params.lambda), raw(acc), MPFR_RNDN);
  mpfr_abs(raw(t), raw(t), MPFR_RNDN);
  return t;
}

std::array<Real, 4> transfer_matrix(const ModelParams& params, const Real& E, int k) {
  if (k < -1) throw ValidationError("transfer_matrix needs k >= -1");
  const long bits = params.precision_bits;
  auto mat = [&](double a00, double a01, double a10, double a11) {
    return std::array<Real, 4>{real_from(a00, bits), real_from(a01, bits),
                               real_from(a10, bits), real_from(a11, bits)};
  };
  if (k == -1) {
    auto m = mat(1, 0, 0, 1);
    mpfr_neg(raw(m[1]), raw(params.lambda), MPFR_RNDN);
    return m;
  }
  if (k == 0) {
    auto m = mat(0, -1, 1, 0);
    mpfr_set(raw(m[0]), raw(E), MPFR_RNDN);
    return m;
  }
  auto qs = convergent_denominators(params.cf, k);
  if (qs[k] > 20000) throw ValidationError("direct transfer product limited to q_k <= 20000");
  long sites = static_cast<long>(qs[k]);
  auto pattern = potential_pattern(params.cf, 1, sites);

  // M = T(q_k) ... T(1): site n left-multiplies the running product
  auto m = mat(1, 0, 0, 1);
  Real d = make_real(bits);
  Real r00 = make_real(bits), r01 = make_real(bits);
  for (long n = 1; n <= sites; ++n) {
    if (pattern[n - 1])
      mpfr_sub(raw(d), raw(E), raw(params.lambda), MPFR_RNDN);
    else
      mpfr_set(raw(d), raw(E), MPFR_RNDN);
    // [[d,-1],[1,0]] * M
    mpfr_fms(raw(r00), raw(d), raw(m[0]), raw(m[2]), MPFR_RNDN);
    mpfr_fms(raw(r01), raw(d), raw(m[1]), raw(m[3]), MPFR_RNDN);
    mpfr_swap(raw(m[2]), raw(m[0]));
    mpfr_swap(raw(m[3]), raw(m[1]));
    mpfr_swap(raw(m[0]), raw(r00));
    mpfr_swap(raw(m[1]), raw(r01));
  }
  return m;
}

}  // namespace qspec
