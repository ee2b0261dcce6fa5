#pragma once

#include <boost/multiprecision/gmp.hpp>
#include <boost/multiprecision/mpfr.hpp>

#include <string>

namespace qspec {

/// Arbitrary-precision real backed by MPFR. Precision is tracked per value;
/// helpers below make the working precision explicit at construction sites.
using Real = boost::multiprecision::number<boost::multiprecision::mpfr_float_backend<0>,
                                           boost::multiprecision::et_off>;

/// Arbitrary-precision integer (GMP).
using BigInt = boost::multiprecision::mpz_int;

/// Rational with exact integer numerator/denominator.
using BigRational = boost::multiprecision::mpq_rational;

inline mpfr_ptr raw(Real& x) { return x.backend().data(); }
inline mpfr_srcptr raw(const Real& x) { return x.backend().data(); }

/// Fresh value at the given bit precision (contents unspecified until assigned).
inline Real make_real(long bits) {
  Real x;
  mpfr_set_prec(raw(x), bits);
  return x;
}

inline Real real_from(double v, long bits) {
  Real x = make_real(bits);
  mpfr_set_d(raw(x), v, MPFR_RNDN);
  return x;
}

inline Real real_from(const std::string& decimal, long bits) {
  Real x = make_real(bits);
  mpfr_set_str(raw(x), decimal.c_str(), 10, MPFR_RNDN);
  return x;
}

inline Real real_from(const BigInt& v, long bits) {
  Real x = make_real(bits);
  mpfr_set_z(raw(x), v.backend().data(), MPFR_RNDN);
  return x;
}

inline double to_double(const Real& x) { return mpfr_get_d(raw(x), MPFR_RNDN); }

inline long precision_of(const Real& x) { return mpfr_get_prec(raw(x)); }

/// Decimal string carrying the full working precision of x, round-trippable.
std::string to_decimal_string(const Real& x);

}  // namespace qspec
