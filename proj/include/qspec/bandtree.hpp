#pragma once

#include <cstdint>
#include <memory>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qspec/tracemap.hpp"

namespace qspec {

enum class BandKind : std::uint8_t { I = 0, II = 1, III = 2 };

const char* kind_name(BandKind k);

/// One closed interval of some sigma_{(k,p)}. Level-k bands of kind I belong
/// to sigma_{(k,1)}; kinds II and III belong to sigma_{(k+1,0)}.
struct Band {
  Real lo, hi;
  int level = 0;
  BandKind kind = BandKind::I;
  std::int32_t parent = -1;  // ordinal in the previous level; -1 for roots
  double log_len = 0;        // log(hi - lo)
  double log_q_prod = 0;     // accumulated log lower-length factors
  double log_p_prod = 0;     // accumulated log upper-length factors
  bool touches_parent_lo = false;
  bool touches_parent_hi = false;

  double length() const { return std::exp(log_len); }
  double mid_d() const { return 0.5 * (to_double(lo) + to_double(hi)); }
};

struct BandLevel {
  int k = 0;
  std::vector<Band> bands;  // sorted by lo
  long count(BandKind kind) const;
};

/// Realized child counts for one parent kind at one level step.
struct TransitionCounts {
  long to_I = 0, to_II = 0, to_III = 0;
};

/// Per-step natural-log length factors; `a` is the coefficient driving the
/// step. Throws on transitions the combinatorics forbids.
double log_q_factor(BandKind from, BandKind to, unsigned long a, double lambda);
double log_p_factor(BandKind from, BandKind to, unsigned long a, double lambda);

/// The child-count rule: kind `from` with step coefficient `a` spawns
/// row = (#I, #II, #III) children.
TransitionCounts transition_row(BandKind from, unsigned long a);

/// Nested family of spectral generating bands, levels 0..depth.
class BandTree {
 public:
  BandTree(ModelParams params) : params_(std::move(params)) {}

  const ModelParams& params() const { return params_; }
  int depth() const { return static_cast<int>(levels_.size()) - 1; }
  const BandLevel& level(int k) const { return levels_.at(k); }
  const std::vector<BandLevel>& levels() const { return levels_; }
  std::vector<BandLevel>& mutable_levels() { return levels_; }

  /// Kinds of all ancestors of band (k, ordinal), root first, self last.
  std::vector<BandKind> type_index(int k, int ordinal) const;

  /// sigma_{(k+1,0)} bands at level k (kinds II and III), in energy order.
  std::vector<const Band*> sigma_next_bands(int k) const;

  /// For each level m <= k, the number of level-k II/III descendants of every
  /// band at level m (index [m][ordinal]).
  std::vector<std::vector<long>> sigma_descendant_counts(int k) const;

 private:
  ModelParams params_;
  std::vector<BandLevel> levels_;
};

struct TreeBuildStats {
  long long evaluations = 0;
  long long bisection_steps = 0;
  long refinement_rounds = 0;
  long precision_escalations = 0;
};

struct TreeBuildOptions {
  int depth = 1;
  bool keep_levels = true;  // false: levels are dropped after the callback
  int threads = 0;          // 0 = hardware concurrency
  int theta_oversample = 8;
  int max_refine_rounds = 5;
  long max_precision_bits = 4096;
  /// Called after each level is sealed with (parent level, new level).
  std::function<void(const BandLevel&, const BandLevel&)> on_level;
};

/// Build generating bands down to `depth` levels. Level 0 holds the two exact
/// roots; each deeper level is found inside its parents, child counts checked
/// against the transition rule at every parent.
BandTree build_generating_tree(const ModelParams& params, int depth);
BandTree build_generating_tree(const ModelParams& params, const TreeBuildOptions& options,
                               TreeBuildStats* stats = nullptr);

/// (4 * prod Q, 4 * prod P) length bounds from the band's ancestry.
std::pair<double, double> band_length_bounds(const ModelParams& params, const Band& band);

/// Children of a single band: the per-parent search step of the tree builder.
/// `parent` links are left at -1; length-factor products are accumulated from
/// the parent's.
std::vector<Band> expand_band(const ModelParams& params, const Band& parent,
                              const TreeBuildOptions& options = {},
                              TreeBuildStats* stats = nullptr);

/// All maximal closed intervals of {|x_{(k,p)}| <= 2} in `window` by adaptive
/// sampling plus bisection. With no window, searches the spectral hull and
/// requires the count to match the polynomial degree.
std::vector<std::pair<Real, Real>> enumerate_bands(
    const ModelParams& params, int k, int p,
    std::optional<std::pair<Real, Real>> window = std::nullopt);

/// Expected number of bands of sigma_{(k,p)} on the whole line.
BigInt expected_band_count(const CFExpansion& cf, int k, int p);

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct TreeReport {
  std::vector<CheckResult> checks;
  bool all_pass() const;
};

/// Structural verification: band counts, nesting, disjointness, transition
/// counts, length sandwich, type-exclusivity, direct level-1 agreement, and
/// the finite-volume eigenvalue cover anchor.
TreeReport verify_tree(const BandTree& tree);

/// Incremental version of the structural checks, fed (parents, children) as
/// levels are sealed. Lets deep trees be verified without holding every level
/// in memory.
class StreamingVerifier {
 public:
  StreamingVerifier(const ModelParams& params, double endpoint_tol = 1e-30,
                    bool check_types = true);
  ~StreamingVerifier();
  StreamingVerifier(const StreamingVerifier&) = delete;

  void observe_root(const BandLevel& root);
  void observe(const BandLevel& parents, const BandLevel& children);
  TreeReport report() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace qspec
