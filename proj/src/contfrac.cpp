#include "qspec/contfrac.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <sstream>

namespace qspec {

CFExpansion::CFExpansion(Kind kind, std::vector<unsigned long> terms, std::size_t period)
    : kind_(kind), terms_(std::move(terms)), period_(period) {
  for (unsigned long t : terms_) {
    if (t < 1) throw ValidationError("continued-fraction coefficients must be >= 1");
  }
  if (kind_ == Kind::Periodic) {
    if (period_ < 1 || period_ > terms_.size())
      throw ValidationError("period must be between 1 and the prefix length");
  }
  if (kind_ != Kind::ArithmeticRule && terms_.empty())
    throw ValidationError("empty coefficient list");
}

CFExpansion CFExpansion::constant(unsigned long b) {
  return CFExpansion(Kind::Periodic, {b}, 1);
}

CFExpansion CFExpansion::periodic(std::vector<unsigned long> prefix, std::size_t period) {
  return CFExpansion(Kind::Periodic, std::move(prefix), period);
}

CFExpansion CFExpansion::finite(std::vector<unsigned long> terms) {
  return CFExpansion(Kind::Finite, std::move(terms), 0);
}

CFExpansion CFExpansion::arithmetic_rule() {
  return CFExpansion(Kind::ArithmeticRule, {}, 0);
}

CFExpansion CFExpansion::parse(std::string_view spec) {
  std::string s;
  for (char c : spec)
    if (!std::isspace(static_cast<unsigned char>(c))) s.push_back(c);
  if (s.empty()) throw ValidationError("empty CF specification");
  if (s == "k") return arithmetic_rule();

  bool periodic_tail = false;
  if (s.back() == '*') {
    periodic_tail = true;
    s.pop_back();
    if (s.empty()) throw ValidationError("'*' needs at least one coefficient");
  }
  std::vector<unsigned long> terms;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t comma = s.find(',', pos);
    std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) {
          return std::isdigit(static_cast<unsigned char>(c));
        }))
      throw ValidationError("bad CF coefficient '" + tok + "'");
    unsigned long v = std::stoul(tok);
    if (v < 1) throw ValidationError("CF coefficients must be >= 1");
    terms.push_back(v);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (terms.empty()) throw ValidationError("no CF coefficients given");
  return periodic_tail ? periodic(std::move(terms), 1) : finite(std::move(terms));
}

unsigned long CFExpansion::a(std::size_t k) const {
  if (k < 1) throw ValidationError("coefficient index is 1-based");
  switch (kind_) {
    case Kind::ArithmeticRule:
      return static_cast<unsigned long>(k);
    case Kind::Finite:
      if (k > terms_.size())
        throw CFExhaustedError("finite continued fraction exhausted at index " + std::to_string(k));
      return terms_[k - 1];
    case Kind::Periodic: {
      if (k <= terms_.size()) return terms_[k - 1];
      std::size_t base = terms_.size() - period_;
      return terms_[base + (k - terms_.size() - 1) % period_];
    }
  }
  throw Error("unreachable");
}

std::size_t CFExpansion::length() const {
  if (kind_ != Kind::Finite) return std::numeric_limits<std::size_t>::max();
  return terms_.size();
}

bool CFExpansion::constant_value(unsigned long* b) const {
  if (kind_ != Kind::Periodic) return false;
  unsigned long v = terms_.front();
  for (unsigned long t : terms_)
    if (t != v) return false;
  if (b) *b = v;
  return true;
}

std::vector<unsigned long> CFExpansion::prefix(std::size_t K) const {
  std::vector<unsigned long> out;
  out.reserve(K);
  for (std::size_t k = 1; k <= K; ++k) out.push_back(a(k));
  return out;
}

std::string CFExpansion::spec_string() const {
  if (kind_ == Kind::ArithmeticRule) return "k";
  std::ostringstream os;
  for (std::size_t i = 0; i < terms_.size(); ++i) {
    if (i) os << ',';
    os << terms_[i];
  }
  if (kind_ == Kind::Periodic) {
    if (period_ == 1) {
      os << '*';
    } else {
      os << " (period " << period_ << ')';
    }
  }
  return os.str();
}

std::vector<Convergent> convergents(const CFExpansion& cf, int K) {
  if (K < 1) throw ValidationError("K must be >= 1");
  std::vector<Convergent> out;
  out.reserve(K);
  BigInt p_prev = 1, p_cur = 0;  // p_{-1}, p_0
  BigInt q_prev = 0, q_cur = 1;  // q_{-1}, q_0
  for (int k = 1; k <= K; ++k) {
    BigInt a = cf.a(k);
    BigInt p_next = a * p_cur + p_prev;
    BigInt q_next = a * q_cur + q_prev;
    out.push_back({k, p_next, q_next});
    p_prev = std::move(p_cur);
    p_cur = std::move(p_next);
    q_prev = std::move(q_cur);
    q_cur = std::move(q_next);
  }
  return out;
}

std::vector<BigInt> convergent_denominators(const CFExpansion& cf, int K) {
  std::vector<BigInt> q(K + 1);
  q[0] = 1;
  BigInt q_prev = 0, q_cur = 1;
  for (int k = 1; k <= K; ++k) {
    BigInt q_next = BigInt(cf.a(k)) * q_cur + q_prev;
    q[k] = q_next;
    q_prev = std::move(q_cur);
    q_cur = std::move(q_next);
  }
  return q;
}

Real cf_value(const CFExpansion& cf, long precision_bits) {
  if (precision_bits < 53) throw ValidationError("precision_bits must be >= 53");
  BigInt p_prev = 1, p_cur = 0;
  BigInt q_prev = 0, q_cur = 1;
  // 1/(q_k q_{k+1}) bounds |beta - p_k/q_k|; stop once it beats the target.
  BigInt target = BigInt(1) << (precision_bits + 3);
  std::size_t k = 0;
  while (true) {
    ++k;
    unsigned long a;
    try {
      a = cf.a(k);
    } catch (const CFExhaustedError&) {
      break;  // finite: p_cur/q_cur is beta exactly
    }
    BigInt p_next = BigInt(a) * p_cur + p_prev;
    BigInt q_next = BigInt(a) * q_cur + q_prev;
    p_prev = std::move(p_cur);
    p_cur = std::move(p_next);
    q_prev = std::move(q_cur);
    q_cur = std::move(q_next);
    if (q_prev * q_cur > target) {
      break;
    }
  }
  long work = precision_bits + 32;
  Real num = real_from(p_cur, work);
  Real den = real_from(q_cur, work);
  Real v = make_real(precision_bits);
  mpfr_div(raw(v), raw(num), raw(den), MPFR_RNDN);
  return v;
}

CFStats cf_statistics(const CFExpansion& cf, int K) {
  if (K < 1) throw ValidationError("K must be >= 1");
  double log_sum = 0, sum = 0;
  for (int k = 1; k <= K; ++k) {
    double a = static_cast<double>(cf.a(k));
    log_sum += std::log(a);
    sum += a;
  }
  return {std::exp(log_sum / K), sum / K};
}

std::string to_decimal_string(const Real& x) {
  long bits = precision_of(x);
  // ceil(bits*log10(2)) + 2 digits round-trips the value.
  long digits = static_cast<long>(bits * 0.30103) + 3;
  std::ostringstream os;
  char* s = nullptr;
  mpfr_exp_t e = 0;
  if (mpfr_nan_p(raw(x))) return "nan";
  if (mpfr_inf_p(raw(x))) return mpfr_sgn(raw(x)) < 0 ? "-inf" : "inf";
  if (mpfr_zero_p(raw(x))) return "0";
  s = mpfr_get_str(nullptr, &e, 10, digits, raw(x), MPFR_RNDN);
  std::string mant(s);
  mpfr_free_str(s);
  bool neg = !mant.empty() && mant[0] == '-';
  std::string d = neg ? mant.substr(1) : mant;
  // strip trailing zeros of the mantissa
  std::size_t last = d.find_last_not_of('0');
  if (last != std::string::npos) d = d.substr(0, last + 1);
  if (d.empty()) d = "0";
  if (neg) os << '-';
  os << "0." << d << 'e' << e;
  return os.str();
}

}  // namespace qspec
