#include "qspec/schrodinger.hpp"

#include <cmath>

#include "qspec/errors.hpp"

namespace qspec {

void ModelParams::require_band_regime() const {
  if (!(lambda > 4)) throw ValidationError("lambda must exceed 4 for a band structure");
}

void ModelParams::require_theorem_regime() const {
  if (!(lambda > 24)) throw ValidationError("lambda must exceed 24 here");
}

BigInt floor_n_beta(const CFExpansion& cf, const BigInt& n) {
  if (n < 0) throw ValidationError("n must be >= 0");
  if (n == 0) return 0;
  BigInt p_prev = 1, p_cur = 0;  // p_{-1}, p_0
  BigInt q_prev = 0, q_cur = 1;
  BigInt f_prev;
  bool have_prev = false;
  for (std::size_t k = 1;; ++k) {
    unsigned long a;
    try {
      a = cf.a(k);
    } catch (const CFExhaustedError&) {
      throw CFExhaustedError(
          "floor(n*beta) needs an irrational beta; finite expansion exhausted");
    }
    BigInt p_next = BigInt(a) * p_cur + p_prev;
    BigInt q_next = BigInt(a) * q_cur + q_prev;
    p_prev = std::move(p_cur);
    p_cur = std::move(p_next);
    q_prev = std::move(q_cur);
    q_cur = std::move(q_next);
    // floor(n p_k / q_k); beta lies strictly between consecutive approximants,
    // so agreement of two consecutive floors pins floor(n beta).
    BigInt f;
    mpz_fdiv_q(f.backend().data(), BigInt(n * p_cur).backend().data(),
               q_cur.backend().data());
    if (have_prev && f == f_prev) return f;
    f_prev = std::move(f);
    have_prev = true;
  }
}

std::vector<std::uint8_t> potential_pattern(const CFExpansion& cf, long n_from, long n_to) {
  if (n_from < 1 || n_from > n_to) throw ValidationError("need 1 <= n_from <= n_to");
  std::vector<std::uint8_t> out;
  out.reserve(n_to - n_from + 1);
  BigInt prev = floor_n_beta(cf, n_from);
  for (long n = n_from; n <= n_to; ++n) {
    BigInt next = floor_n_beta(cf, n + 1);
    BigInt d = next - prev;
    if (d != 0 && d != 1) throw ComputationError("Beatty difference outside {0,1}");
    out.push_back(static_cast<std::uint8_t>(d));
    prev = std::move(next);
  }
  return out;
}

std::vector<Real> potential(const ModelParams& params, long n_from, long n_to) {
  auto bits = potential_pattern(params.cf, n_from, n_to);
  std::vector<Real> out;
  out.reserve(bits.size());
  Real zero = real_from(0.0, params.precision_bits);
  for (auto b : bits) out.push_back(b ? params.lambda : zero);
  return out;
}

SturmCount sturm_count_below(const ModelParams& params, long n, const Real& x) {
  if (n < 1) throw ValidationError("n must be >= 1");
  const long bits = params.precision_bits;
  auto pattern = potential_pattern(params.cf, 1, n);

  Real shift = make_real(bits);
  mpfr_set(raw(shift), raw(x), MPFR_RNDN);
  SturmCount result;
  Real d = make_real(bits), t = make_real(bits);
  for (int attempt = 0; attempt < 4; ++attempt) {
    long negatives = 0;
    bool breakdown = false;
    // d_i = (V(i) - x) - 1/d_{i-1}
    for (long i = 1; i <= n; ++i) {
      if (i == 1) {
        if (pattern[0])
          mpfr_sub(raw(d), raw(params.lambda), raw(shift), MPFR_RNDN);
        else
          mpfr_neg(raw(d), raw(shift), MPFR_RNDN);
      } else {
        mpfr_ui_div(raw(t), 1, raw(d), MPFR_RNDN);
        if (pattern[i - 1])
          mpfr_sub(raw(d), raw(params.lambda), raw(shift), MPFR_RNDN);
        else
          mpfr_neg(raw(d), raw(shift), MPFR_RNDN);
        mpfr_sub(raw(d), raw(d), raw(t), MPFR_RNDN);
      }
      if (mpfr_zero_p(raw(d))) {
        breakdown = true;
        break;
      }
      if (mpfr_sgn(raw(d)) < 0) ++negatives;
    }
    if (!breakdown) {
      result.count = negatives;
      return result;
    }
    // exact pivot zero: nudge the shift by one ulp and retry
    Real eps = make_real(bits);
    if (mpfr_zero_p(raw(shift)))
      mpfr_set_d(raw(eps), std::ldexp(1.0, -static_cast<int>(bits)), MPFR_RNDN);
    else {
      mpfr_abs(raw(eps), raw(shift), MPFR_RNDN);
      mpfr_mul_2si(raw(eps), raw(eps), -(bits - 2), MPFR_RNDN);
    }
    mpfr_add(raw(shift), raw(shift), raw(eps), MPFR_RNDN);
    result.perturbed = true;
    result.applied_shift += to_double(eps);
  }
  throw ComputationError("sturm pivot breakdown persisted after perturbation");
}

long eig_count_interval(const ModelParams& params, long n, const Real& lo, const Real& hi) {
  if (lo > hi) throw ValidationError("need lo <= hi");
  const long bits = params.precision_bits;
  // closed-interval semantics: count strictly below hi+ and subtract strictly below lo-
  auto nudge = [&](const Real& v, int dir) {
    Real out = make_real(bits), eps = make_real(bits);
    mpfr_abs(raw(eps), raw(v), MPFR_RNDN);
    mpfr_add_ui(raw(eps), raw(eps), 1, MPFR_RNDN);
    mpfr_mul_2si(raw(eps), raw(eps), -(bits / 2), MPFR_RNDN);
    if (dir > 0)
      mpfr_add(raw(out), raw(v), raw(eps), MPFR_RNDN);
    else
      mpfr_sub(raw(out), raw(v), raw(eps), MPFR_RNDN);
    return out;
  };
  long above = sturm_count_below(params, n, nudge(hi, +1)).count;
  long below = sturm_count_below(params, n, nudge(lo, -1)).count;
  return above - below;
}

namespace oracle {

namespace {

// P_n(x) of the leading principal n x n minor, by the three-term recurrence.
Real charpoly_at(const std::vector<std::uint8_t>& pattern, const Real& lambda, long n,
                 const Real& x, long bits) {
  Real pm1 = real_from(1.0, bits);  // P_0
  Real pcur = make_real(bits);      // P_1
  Real diag = make_real(bits), next = make_real(bits);
  if (pattern[0])
    mpfr_sub(raw(pcur), raw(lambda), raw(x), MPFR_RNDN);
  else
    mpfr_neg(raw(pcur), raw(x), MPFR_RNDN);
  for (long i = 2; i <= n; ++i) {
    if (pattern[i - 1])
      mpfr_sub(raw(diag), raw(lambda), raw(x), MPFR_RNDN);
    else
      mpfr_neg(raw(diag), raw(x), MPFR_RNDN);
    mpfr_fms(raw(next), raw(diag), raw(pcur), raw(pm1), MPFR_RNDN);  // diag*P_{i-1} - P_{i-2}
    mpfr_swap(raw(pm1), raw(pcur));
    mpfr_swap(raw(pcur), raw(next));
  }
  return pcur;
}

}  // namespace

std::vector<Real> charpoly_eigenvalues(const ModelParams& params, long n) {
  if (n < 1 || n > 64) throw ValidationError("oracle supports 1 <= n <= 64");
  const long bits = params.precision_bits;
  auto pattern = potential_pattern(params.cf, 1, n);

  Real lo_bound = real_from(-3.0, bits);
  Real hi_bound = make_real(bits);
  mpfr_add_ui(raw(hi_bound), raw(params.lambda), 3, MPFR_RNDN);

  // roots of P_i strictly interlace roots of P_{i+1}; bisect each bracket
  std::vector<Real> roots;
  if (pattern[0])
    roots.push_back(params.lambda);
  else
    roots.push_back(real_from(0.0, bits));

  Real tol = make_real(bits);
  mpfr_set_d(raw(tol), 1.0, MPFR_RNDN);
  mpfr_mul_2si(raw(tol), raw(tol), -(bits / 2), MPFR_RNDN);

  Real a = make_real(bits), b = make_real(bits), mid = make_real(bits), width = make_real(bits);
  for (long m = 2; m <= n; ++m) {
    std::vector<Real> next;
    next.reserve(m);
    for (long j = 0; j <= static_cast<long>(roots.size()); ++j) {
      if (j == 0)
        mpfr_set(raw(a), raw(lo_bound), MPFR_RNDN);
      else
        mpfr_set(raw(a), raw(roots[j - 1]), MPFR_RNDN);
      if (j == static_cast<long>(roots.size()))
        mpfr_set(raw(b), raw(hi_bound), MPFR_RNDN);
      else
        mpfr_set(raw(b), raw(roots[j]), MPFR_RNDN);
      int sa = mpfr_sgn(raw(charpoly_at(pattern, params.lambda, m, a, bits)));
      int sb = mpfr_sgn(raw(charpoly_at(pattern, params.lambda, m, b, bits)));
      if (sa == 0 || sb == 0 || sa == sb)
        throw ComputationError("interlacing bracket failed in charpoly oracle");
      for (int iter = 0; iter < 4 * static_cast<int>(bits); ++iter) {
        mpfr_sub(raw(width), raw(b), raw(a), MPFR_RNDN);
        if (mpfr_cmp(raw(width), raw(tol)) <= 0) break;
        mpfr_add(raw(mid), raw(a), raw(b), MPFR_RNDN);
        mpfr_div_2ui(raw(mid), raw(mid), 1, MPFR_RNDN);
        int sm = mpfr_sgn(raw(charpoly_at(pattern, params.lambda, m, mid, bits)));
        if (sm == 0) {
          mpfr_set(raw(a), raw(mid), MPFR_RNDN);
          break;
        }
        if (sm == sa)
          mpfr_set(raw(a), raw(mid), MPFR_RNDN);
        else
          mpfr_set(raw(b), raw(mid), MPFR_RNDN);
      }
      Real r = make_real(bits);
      mpfr_add(raw(r), raw(a), raw(b), MPFR_RNDN);
      mpfr_div_2ui(raw(r), raw(r), 1, MPFR_RNDN);
      next.push_back(r);
    }
    roots = std::move(next);
  }
  return roots;
}

}  // namespace oracle

}  // namespace qspec
