#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "qspec/errors.hpp"
#include "qspec/real.hpp"

namespace qspec {

/// A frequency beta in (0,1) given by its continued-fraction coefficients
/// [0; a_1, a_2, ...]. Supported forms: a finite prefix, a prefix whose
/// trailing block repeats forever, and the rule a_k = k. Coefficient access
/// is a pure function of the index, so repeated runs agree bit for bit.
class CFExpansion {
 public:
  enum class Kind { Finite, Periodic, ArithmeticRule };

  static CFExpansion constant(unsigned long b);
  /// `period` trailing entries of `prefix` repeat forever; period >= 1.
  static CFExpansion periodic(std::vector<unsigned long> prefix, std::size_t period);
  static CFExpansion finite(std::vector<unsigned long> terms);
  /// a_k = k.
  static CFExpansion arithmetic_rule();

  /// Accepts "3*" == [0;3,3,...], "1,2*" == [0;1,2,2,...], "2" == [0;2] (finite),
  /// and "k" for the rule a_k = k.
  static CFExpansion parse(std::string_view spec);

  /// k-th coefficient, 1-based. Throws CFExhaustedError past the end of a
  /// finite expansion.
  unsigned long a(std::size_t k) const;

  Kind kind() const { return kind_; }
  bool is_finite() const { return kind_ == Kind::Finite; }
  bool is_periodic() const { return kind_ == Kind::Periodic; }
  /// Length of the repeating tail block (periodic expansions only).
  std::size_t period() const { return period_; }
  /// Number of terms of a finite expansion.
  std::size_t length() const;
  /// True when every coefficient equals the same b (reports b via out param).
  bool constant_value(unsigned long* b = nullptr) const;
  /// True when the Cesaro mean of the coefficients diverges.
  bool mean_diverges() const { return kind_ == Kind::ArithmeticRule; }

  std::vector<unsigned long> prefix(std::size_t K) const;
  std::string spec_string() const;

 private:
  CFExpansion(Kind kind, std::vector<unsigned long> terms, std::size_t period);

  Kind kind_;
  std::vector<unsigned long> terms_;
  std::size_t period_ = 0;
};

/// One rational approximant p_k/q_k.
struct Convergent {
  int k = 0;
  BigInt p;
  BigInt q;
};

/// First K convergents from q_{-1} = 0, q_0 = 1, q_{k+1} = a_{k+1} q_k + q_{k-1}.
/// Exact integer arithmetic throughout.
std::vector<Convergent> convergents(const CFExpansion& cf, int K);

/// Denominators q_0..q_K (q[k] is the level-k denominator).
std::vector<BigInt> convergent_denominators(const CFExpansion& cf, int K);

/// Value of beta to within 2^-(precision_bits+2).
Real cf_value(const CFExpansion& cf, long precision_bits);

struct CFStats {
  double geometric_mean = 0;  // (a_1 ... a_K)^(1/K)
  double arithmetic_mean = 0; // (a_1 + ... + a_K)/K
};

CFStats cf_statistics(const CFExpansion& cf, int K);

}  // namespace qspec
