#include "qspec/bandtree.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "qspec/errors.hpp"

namespace qspec {

const char* kind_name(BandKind k) {
  switch (k) {
    case BandKind::I: return "I";
    case BandKind::II: return "II";
    case BandKind::III: return "III";
  }
  return "?";
}

long BandLevel::count(BandKind kind) const {
  long c = 0;
  for (const Band& b : bands)
    if (b.kind == kind) ++c;
  return c;
}

TransitionCounts transition_row(BandKind from, unsigned long a) {
  switch (from) {
    case BandKind::I: return {0, 1, 0};
    case BandKind::II: return {static_cast<long>(a) + 1, 0, static_cast<long>(a)};
    case BandKind::III: return {static_cast<long>(a), 0, static_cast<long>(a) - 1};
  }
  return {};
}

double log_q_factor(BandKind from, BandKind to, unsigned long a, double lambda) {
  if (from == BandKind::I) {
    if (to != BandKind::II) throw ValidationError("kind I bands only spawn kind II");
    return -(static_cast<double>(a) - 1.0) * std::log(lambda + 5.0);
  }
  if (to == BandKind::II) throw ValidationError("kind II bands descend from kind I only");
  return -(std::log(lambda + 5.0) + 3.0 * std::log(static_cast<double>(a) + 2.0));
}

double log_p_factor(BandKind from, BandKind to, unsigned long a, double lambda) {
  if (lambda <= 8.0) throw ValidationError("upper length factors need lambda > 8");
  if (from == BandKind::I) {
    if (to != BandKind::II) throw ValidationError("kind I bands only spawn kind II");
    return (static_cast<double>(a) - 1.0) * (std::log(3.0) - std::log(lambda - 8.0));
  }
  if (to == BandKind::II) throw ValidationError("kind II bands descend from kind I only");
  return std::log(3.0) - std::log(static_cast<double>(a)) - std::log(lambda - 8.0);
}

BigInt expected_band_count(const CFExpansion& cf, int k, int p) {
  if (k < 0 || p < -1) throw ValidationError("need k >= 0, p >= -1");
  auto qs = convergent_denominators(cf, k);
  BigInt qk = qs[k];
  BigInt qkm1 = (k >= 1) ? qs[k - 1] : BigInt(0);
  if (p >= 0) return BigInt(p) * qk + qkm1;
  return qk - qkm1;  // tr(M_{k-1} M_k^{-1}) = tr(M_{k-2} M_{k-1}^{a_k - 1})
}

std::vector<BandKind> BandTree::type_index(int k, int ordinal) const {
  std::vector<BandKind> out;
  int lvl = k, ord = ordinal;
  while (lvl >= 0) {
    const Band& b = levels_.at(lvl).bands.at(ord);
    out.push_back(b.kind);
    ord = b.parent;
    --lvl;
    if (lvl >= 0 && ord < 0) throw Error("broken parent link");
  }
  std::reverse(out.begin(), out.end());
  return out;
}

std::vector<const Band*> BandTree::sigma_next_bands(int k) const {
  std::vector<const Band*> out;
  for (const Band& b : levels_.at(k).bands)
    if (b.kind != BandKind::I) out.push_back(&b);
  return out;
}

std::vector<std::vector<long>> BandTree::sigma_descendant_counts(int k) const {
  std::vector<std::vector<long>> counts(k + 1);
  counts[k].resize(levels_.at(k).bands.size());
  for (std::size_t i = 0; i < levels_[k].bands.size(); ++i)
    counts[k][i] = levels_[k].bands[i].kind != BandKind::I ? 1 : 0;
  for (int m = k - 1; m >= 0; --m) {
    counts[m].assign(levels_.at(m).bands.size(), 0);
    const auto& child_level = levels_[m + 1].bands;
    for (std::size_t c = 0; c < child_level.size(); ++c)
      counts[m][child_level[c].parent] += counts[m + 1][c];
  }
  return counts;
}

std::pair<double, double> band_length_bounds(const ModelParams& params, const Band& band) {
  (void)params;
  return {4.0 * std::exp(band.log_q_prod), 4.0 * std::exp(band.log_p_prod)};
}

bool TreeReport::all_pass() const {
  for (const auto& c : checks)
    if (!c.pass) return false;
  return true;
}

// ---------------------------------------------------------------------------
// band search machinery
// ---------------------------------------------------------------------------

namespace {

constexpr double kPi = 3.14159265358979323846;

struct SearchCtx {
  TraceKernel kernel;
  long bits;
  TreeBuildStats* stats;
  Real mid, t1, t2;

  SearchCtx(const CFExpansion& cf, const Real& lambda, long bits_, TreeBuildStats* st)
      : kernel(cf, lambda, bits_), bits(bits_), stats(st) {
    for (Real* r : {&mid, &t1, &t2}) mpfr_set_prec(raw(*r), bits_);
  }
};

// which trace drives the band family at child level k1 = k+1
enum class Family : std::uint8_t { H, G };  // H: tr M_{k1} -> sigma_{(k1+1,0)}; G: tr(M_k M_{k1}) -> sigma_{(k1,1)}

mpfr_srcptr family_value(const SearchCtx& cx, Family fam) {
  return fam == Family::H ? cx.kernel.v() : cx.kernel.w();
}

struct Probe {
  int sgn = 0;
  bool inband = false;  // |f| <= 2
};

Probe probe_family(SearchCtx& cx, Family fam, mpfr_srcptr E, int k1) {
  cx.kernel.eval(E, k1);
  if (cx.stats) cx.stats->evaluations++;
  mpfr_srcptr f = family_value(cx, fam);
  return {mpfr_sgn(f), mpfr_cmpabs_ui(f, 2) <= 0};
}

struct Sample {
  Real E;
  double theta = 0;
  Probe h, g;
};

Sample make_sample(SearchCtx& cx, const Real& E, int k1) {
  cx.kernel.eval(raw(E), k1);
  if (cx.stats) cx.stats->evaluations++;
  Sample s;
  s.E = E;
  double u = mpfr_get_d(cx.kernel.u(), MPFR_RNDN);
  s.theta = std::acos(std::clamp(u / 2.0, -1.0, 1.0));
  s.h = {mpfr_sgn(cx.kernel.v()), mpfr_cmpabs_ui(cx.kernel.v(), 2) <= 0};
  s.g = {mpfr_sgn(cx.kernel.w()), mpfr_cmpabs_ui(cx.kernel.w(), 2) <= 0};
  return s;
}

// grid over the parent with consecutive spacing <= pi/M in the angle
// parametrized by the parent trace; count-driven callers re-enter with larger M
std::vector<Sample> theta_samples(SearchCtx& cx, const Real& plo, const Real& phi, int k1,
                                  int M) {
  std::vector<Sample> samples;
  samples.reserve(2 * M);
  const long bits = cx.bits;
  Real step = make_real(bits), E = make_real(bits);
  mpfr_sub(raw(step), raw(phi), raw(plo), MPFR_RNDN);
  mpfr_div_ui(raw(step), raw(step), M, MPFR_RNDN);
  for (int j = 0; j <= M; ++j) {
    if (j == 0)
      mpfr_set(raw(E), raw(plo), MPFR_RNDN);
    else if (j == M)
      mpfr_set(raw(E), raw(phi), MPFR_RNDN);
    else {
      mpfr_mul_ui(raw(E), raw(step), j, MPFR_RNDN);
      mpfr_add(raw(E), raw(E), raw(plo), MPFR_RNDN);
    }
    samples.push_back(make_sample(cx, E, k1));
  }
  const double dtheta_max = kPi / M;
  // E-gap floor relative to the parent width
  Real width = make_real(bits);
  mpfr_sub(raw(width), raw(phi), raw(plo), MPFR_RNDN);
  double wd = mpfr_get_d(raw(width), MPFR_RNDN);
  const double e_floor = wd * std::ldexp(1.0, -48);
  const std::size_t cap = static_cast<std::size_t>(64) * M + 1024;
  bool changed = true;
  int passes = 0;
  while (changed && samples.size() < cap && passes < 60) {
    changed = false;
    ++passes;
    std::vector<Sample> next;
    next.reserve(samples.size() * 2);
    for (std::size_t i = 0; i + 1 < samples.size(); ++i) {
      next.push_back(samples[i]);
      double de = to_double(samples[i + 1].E) - to_double(samples[i].E);
      if (std::fabs(samples[i + 1].theta - samples[i].theta) > dtheta_max && de > e_floor) {
        mpfr_add(raw(E), raw(samples[i].E), raw(samples[i + 1].E), MPFR_RNDN);
        mpfr_div_2ui(raw(E), raw(E), 1, MPFR_RNDN);
        next.push_back(make_sample(cx, E, k1));
        changed = true;
      }
    }
    next.push_back(samples.back());
    samples = std::move(next);
  }
  return samples;
}

double spec_tol(double e_abs, long bits) {
  double t = e_abs * std::ldexp(1.0, -static_cast<int>(bits / 2));
  return std::max(t, 1e-30);
}

double ulp_guard(double e_abs, long bits) {
  return std::max(e_abs, 1e-12) * std::ldexp(1.0, -static_cast<int>(bits - 16));
}

// Bisect between an outside point (|f| > 2) and an inside point (|f| <= 2).
// `inner_anchor` is a fixed interior reference used to gauge the band width,
// so the stop rule adapts to bands far thinner than the absolute tolerance.
void bisect_edge(SearchCtx& cx, Family fam, int k1, Real& out_pt, Real& in_pt,
                 const Real& inner_anchor, Real& result) {
  const long bits = cx.bits;
  double e_abs = std::fabs(to_double(in_pt));
  const double tol_spec = spec_tol(e_abs, bits);
  const double guard = ulp_guard(e_abs, bits);
  for (int iter = 0; iter < 6 * bits; ++iter) {
    mpfr_sub(raw(cx.t1), raw(in_pt), raw(out_pt), MPFR_RNDN);
    mpfr_abs(raw(cx.t1), raw(cx.t1), MPFR_RNDN);
    double width = mpfr_get_d(raw(cx.t1), MPFR_RNDU);
    mpfr_sub(raw(cx.t2), raw(in_pt), raw(inner_anchor), MPFR_RNDN);
    mpfr_abs(raw(cx.t2), raw(cx.t2), MPFR_RNDN);
    double band_est = std::max(mpfr_get_d(raw(cx.t2), MPFR_RNDU), width);
    double target = std::max(guard, std::min(tol_spec, band_est * std::ldexp(1.0, -34)));
    if (width <= target) break;
    mpfr_add(raw(cx.mid), raw(out_pt), raw(in_pt), MPFR_RNDN);
    mpfr_div_2ui(raw(cx.mid), raw(cx.mid), 1, MPFR_RNDN);
    Probe p = probe_family(cx, fam, raw(cx.mid), k1);
    if (cx.stats) cx.stats->bisection_steps++;
    if (p.inband)
      mpfr_set(raw(in_pt), raw(cx.mid), MPFR_RNDN);
    else
      mpfr_set(raw(out_pt), raw(cx.mid), MPFR_RNDN);
  }
  mpfr_add(raw(result), raw(out_pt), raw(in_pt), MPFR_RNDN);
  mpfr_div_2ui(raw(result), raw(result), 1, MPFR_RNDN);
}

struct FoundBand {
  Real lo, hi;
  bool touch_lo = false, touch_hi = false;
};

// Locate the band containing the unique zero bracketed by [za, zb] (signs of
// the family differ at the ends). `left_out`/`right_out`: nearest points known
// to be outside the band on each side, or the parent edge when none exists.
FoundBand extract_band(SearchCtx& cx, Family fam, int k1, const Real& za, const Real& zb,
                       const Real& left_limit, bool left_limit_outside, const Real& right_limit,
                       bool right_limit_outside) {
  const long bits = cx.bits;
  Real a = make_real(bits), b = make_real(bits);
  mpfr_set(raw(a), raw(za), MPFR_RNDN);
  mpfr_set(raw(b), raw(zb), MPFR_RNDN);
  Probe pa = probe_family(cx, fam, raw(a), k1);
  // shrink the sign bracket until the midpoint lies inside the band
  Real inner = make_real(bits);
  bool have_inner = false;
  if (pa.inband) {
    mpfr_set(raw(inner), raw(a), MPFR_RNDN);
    have_inner = true;
  } else {
    Probe pb = probe_family(cx, fam, raw(b), k1);
    if (pb.inband) {
      mpfr_set(raw(inner), raw(b), MPFR_RNDN);
      have_inner = true;
    }
  }
  for (int iter = 0; !have_inner && iter < 6 * bits; ++iter) {
    mpfr_add(raw(cx.mid), raw(a), raw(b), MPFR_RNDN);
    mpfr_div_2ui(raw(cx.mid), raw(cx.mid), 1, MPFR_RNDN);
    Probe pm = probe_family(cx, fam, raw(cx.mid), k1);
    if (cx.stats) cx.stats->bisection_steps++;
    if (pm.inband || pm.sgn == 0) {
      mpfr_set(raw(inner), raw(cx.mid), MPFR_RNDN);
      have_inner = true;
      break;
    }
    if (pm.sgn == pa.sgn)
      mpfr_set(raw(a), raw(cx.mid), MPFR_RNDN);
    else
      mpfr_set(raw(b), raw(cx.mid), MPFR_RNDN);
  }
  if (!have_inner)
    throw PrecisionLossError("band thinner than the working precision resolves");

  FoundBand band;
  band.lo = make_real(bits);
  band.hi = make_real(bits);
  // left edge
  if (!left_limit_outside) {
    mpfr_set(raw(band.lo), raw(left_limit), MPFR_RNDN);
    band.touch_lo = true;
  } else {
    Real out = make_real(bits), in = make_real(bits);
    mpfr_set(raw(out), raw(left_limit), MPFR_RNDN);
    mpfr_set(raw(in), raw(inner), MPFR_RNDN);
    bisect_edge(cx, fam, k1, out, in, inner, band.lo);
  }
  // right edge
  if (!right_limit_outside) {
    mpfr_set(raw(band.hi), raw(right_limit), MPFR_RNDN);
    band.touch_hi = true;
  } else {
    Real out = make_real(bits), in = make_real(bits);
    mpfr_set(raw(out), raw(right_limit), MPFR_RNDN);
    mpfr_set(raw(in), raw(inner), MPFR_RNDN);
    bisect_edge(cx, fam, k1, out, in, inner, band.hi);
  }
  if (mpfr_cmp(raw(band.lo), raw(band.hi)) >= 0)
    throw PrecisionLossError("band edges collapsed");
  return band;
}

// All bands of `fam` inside the parent from precomputed samples. Expects
// exactly `expected` sign changes; returns nullopt when fewer are visible so
// the caller can refine the grid.
std::optional<std::vector<FoundBand>> bands_from_samples(SearchCtx& cx, Family fam, int k1,
                                                         const std::vector<Sample>& samples,
                                                         long expected) {
  auto probe_of = [&](const Sample& s) { return fam == Family::H ? s.h : s.g; };
  std::vector<std::pair<std::size_t, std::size_t>> brackets;
  std::size_t i = 0;
  while (i + 1 < samples.size()) {
    int s0 = probe_of(samples[i]).sgn;
    int s1 = probe_of(samples[i + 1]).sgn;
    if (s0 == 0) {
      brackets.emplace_back(i, i);
      ++i;
      continue;
    }
    if (s1 != 0 && s0 != s1) brackets.emplace_back(i, i + 1);
    ++i;
  }
  if (!samples.empty() && probe_of(samples.back()).sgn == 0)
    brackets.emplace_back(samples.size() - 1, samples.size() - 1);
  if (static_cast<long>(brackets.size()) < expected) return std::nullopt;
  if (static_cast<long>(brackets.size()) > expected)
    throw CountMismatchError("more sign changes than bands predicted");

  std::vector<FoundBand> out;
  out.reserve(brackets.size());
  for (std::size_t bi = 0; bi < brackets.size(); ++bi) {
    auto [ia, ib] = brackets[bi];
    // nearest samples outside the band on each side
    long left = static_cast<long>(ia);
    while (left >= 0 && probe_of(samples[left]).inband) --left;
    long right = static_cast<long>(ib);
    while (right < static_cast<long>(samples.size()) && probe_of(samples[right]).inband) ++right;
    const Real& left_limit = left >= 0 ? samples[left].E : samples.front().E;
    const Real& right_limit =
        right < static_cast<long>(samples.size()) ? samples[right].E : samples.back().E;
    out.push_back(extract_band(cx, fam, k1, samples[ia].E, samples[ib].E, left_limit, left >= 0,
                               right_limit, right < static_cast<long>(samples.size())));
  }
  return out;
}

struct ChildRecord {
  FoundBand span;
  BandKind kind;
};

bool in_band_slack(mpfr_srcptr f, mpfr_ptr scratch) {
  // |f| <= 2 with a hair of slack for values sitting exactly on the edge
  mpfr_set_d(scratch, 2.0 + 1e-12, MPFR_RNDN);
  return mpfr_cmpabs(f, scratch) <= 0;
}

// type assignment cross-check at the band midpoint (uniqueness of the
// containing family; an energy in two families signals broken numerics)
void check_classification(SearchCtx& cx, int k1, const Real& lo, const Real& hi,
                          BandKind expected) {
  mpfr_add(raw(cx.mid), raw(lo), raw(hi), MPFR_RNDN);
  mpfr_div_2ui(raw(cx.mid), raw(cx.mid), 1, MPFR_RNDN);
  cx.kernel.eval(raw(cx.mid), k1);
  if (cx.stats) cx.stats->evaluations++;
  const bool in_sigma0 = in_band_slack(cx.kernel.u(), raw(cx.t2));  // sigma_{(k1,0)}
  cx.kernel.x_minus_one(raw(cx.t1));
  const bool in_sigma_m1 = in_band_slack(raw(cx.t1), raw(cx.t2));   // sigma_{(k1,-1)}
  const bool in_sigma_next = in_band_slack(cx.kernel.v(), raw(cx.t2));  // sigma_{(k1+1,0)}
  bool ok = false;
  switch (expected) {
    case BandKind::I:
      // sigma_{(k1,1)} band inside sigma_{(k1,0)}, outside sigma_{(k1+1,0)}
      ok = in_sigma0 && !in_sigma_next;
      break;
    case BandKind::II:
      ok = in_sigma_m1 && !in_sigma0;
      break;
    case BandKind::III:
      ok = in_sigma0 && !in_sigma_m1;
      break;
  }
  if (!ok) {
    std::ostringstream os;
    os << "band classification check failed for kind " << kind_name(expected) << " near E="
       << to_double(cx.mid);
    throw ComputationError(os.str());
  }
}

std::vector<ChildRecord> search_children(SearchCtx& cx, const CFExpansion& cf,
                                         const Band& parent, const TreeBuildOptions& opt) {
  const int k1 = parent.level + 1;
  const unsigned long a = cf.a(k1);
  std::vector<ChildRecord> children;

  if (parent.kind == BandKind::I) {
    if (a == 1) {
      // tr M_{k1} coincides with the parent's own trace polynomial: the single
      // child occupies the identical interval
      FoundBand fb;
      fb.lo = parent.lo;
      fb.hi = parent.hi;
      fb.touch_lo = fb.touch_hi = true;
      children.push_back({std::move(fb), BandKind::II});
    } else {
      Probe plo = probe_family(cx, Family::H, raw(parent.lo), k1);
      Probe phi = probe_family(cx, Family::H, raw(parent.hi), k1);
      if (plo.sgn == phi.sgn && plo.sgn != 0)
        throw CountMismatchError("no sign change across a kind-I parent");
      FoundBand fb = extract_band(cx, Family::H, k1, parent.lo, parent.hi, parent.lo,
                                  !plo.inband, parent.hi, !phi.inband);
      children.push_back({std::move(fb), BandKind::II});
    }
    check_classification(cx, k1, children[0].span.lo, children[0].span.hi, BandKind::II);
    return children;
  }

  const TransitionCounts row = transition_row(parent.kind, a);
  const long nG = row.to_I, nH = row.to_III;
  int M = opt.theta_oversample * static_cast<int>(a + 2);
  for (int round = 0;; ++round) {
    auto samples = theta_samples(cx, parent.lo, parent.hi, k1, M);
    auto g_bands = bands_from_samples(cx, Family::G, k1, samples, nG);
    auto h_bands = nH > 0 ? bands_from_samples(cx, Family::H, k1, samples, nH)
                          : std::make_optional(std::vector<FoundBand>{});
    if (g_bands && h_bands) {
      children.clear();
      for (auto& fb : *g_bands) children.push_back({std::move(fb), BandKind::I});
      for (auto& fb : *h_bands) children.push_back({std::move(fb), BandKind::III});
      std::sort(children.begin(), children.end(),
                [](const ChildRecord& x, const ChildRecord& y) {
                  return mpfr_cmp(raw(x.span.lo), raw(y.span.lo)) < 0;
                });
      bool overlap = false;
      for (std::size_t i = 0; i + 1 < children.size(); ++i)
        if (mpfr_cmp(raw(children[i].span.hi), raw(children[i + 1].span.lo)) > 0) {
          overlap = true;
          break;
        }
      if (!overlap) break;
    }
    if (round >= opt.max_refine_rounds)
      throw CountMismatchError("band count still short after grid refinement");
    M *= 2;
    if (cx.stats) cx.stats->refinement_rounds++;
  }
  for (const auto& c : children) check_classification(cx, k1, c.span.lo, c.span.hi, c.kind);
  return children;
}

// per-parent search with local precision escalation
std::vector<ChildRecord> search_children_robust(const ModelParams& params, const Band& parent,
                                                const TreeBuildOptions& opt, SearchCtx& base_cx,
                                                std::atomic<long>* escalations) {
  try {
    return search_children(base_cx, params.cf, parent, opt);
  } catch (const ComputationError&) {
    long bits = base_cx.bits;
    while (true) {
      bits *= 2;
      if (bits > opt.max_precision_bits) throw;
      if (escalations) escalations->fetch_add(1);
      SearchCtx cx(params.cf, params.lambda, bits, base_cx.stats);
      try {
        return search_children(cx, params.cf, parent, opt);
      } catch (const ComputationError&) {
        if (bits * 2 > opt.max_precision_bits) throw;
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// tree builder
// ---------------------------------------------------------------------------

BandTree build_generating_tree(const ModelParams& params, int depth) {
  TreeBuildOptions opt;
  opt.depth = depth;
  return build_generating_tree(params, opt);
}

BandTree build_generating_tree(const ModelParams& params, const TreeBuildOptions& options,
                               TreeBuildStats* stats) {
  params.require_band_regime();
  if (options.depth < 1) throw ValidationError("depth must be >= 1");
  const long bits = params.precision_bits;
  const double lambda_d = params.lambda_d();
  const bool track_lengths = lambda_d > 8.0;

  BandTree tree(params);
  BandLevel root;
  root.k = 0;
  {
    // exact roots: sigma_{(1,0)} = [-2,2] (kind III), sigma_{(0,1)} = [l-2,l+2] (kind I)
    Band b3;
    b3.lo = real_from(-2.0, bits);
    b3.hi = real_from(2.0, bits);
    b3.level = 0;
    b3.kind = BandKind::III;
    b3.log_len = std::log(4.0);
    Band b1;
    b1.lo = make_real(bits);
    b1.hi = make_real(bits);
    mpfr_sub_ui(raw(b1.lo), raw(params.lambda), 2, MPFR_RNDN);
    mpfr_add_ui(raw(b1.hi), raw(params.lambda), 2, MPFR_RNDN);
    b1.level = 0;
    b1.kind = BandKind::I;
    b1.log_len = std::log(4.0);
    root.bands.push_back(std::move(b3));
    root.bands.push_back(std::move(b1));
  }

  int threads = options.threads > 0
                    ? options.threads
                    : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));

  TreeBuildStats local_stats;
  TreeBuildStats* st = stats ? stats : &local_stats;
  std::atomic<long> escalations{0};

  BandLevel current = std::move(root);
  if (options.keep_levels) tree.mutable_levels().push_back(current);

  for (int k = 0; k < options.depth; ++k) {
    const std::size_t n_parents = current.bands.size();
    std::vector<std::vector<ChildRecord>> results(n_parents);
    std::vector<TreeBuildStats> thread_stats(threads);
    std::exception_ptr first_error;
    std::size_t first_error_parent = n_parents;
    std::mutex error_mutex;

    auto worker = [&](int t) {
      SearchCtx cx(params.cf, params.lambda, bits, &thread_stats[t]);
      for (std::size_t i = t; i < n_parents; i += threads) {
        try {
          results[i] = search_children_robust(params, current.bands[i], options, cx, &escalations);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (i < first_error_parent) {
            first_error_parent = i;
            first_error = std::current_exception();
          }
          return;
        }
      }
    };
    if (threads == 1 || n_parents < 4) {
      worker(0);
    } else {
      std::vector<std::thread> pool;
      for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
      for (auto& th : pool) th.join();
    }
    if (first_error) std::rethrow_exception(first_error);
    for (const auto& ts : thread_stats) {
      st->evaluations += ts.evaluations;
      st->bisection_steps += ts.bisection_steps;
      st->refinement_rounds += ts.refinement_rounds;
    }

    BandLevel next;
    next.k = k + 1;
    std::size_t total = 0;
    for (const auto& r : results) total += r.size();
    next.bands.reserve(total);
    const unsigned long a = params.cf.a(k + 1);
    for (std::size_t i = 0; i < n_parents; ++i) {
      const Band& parent = current.bands[i];
      for (auto& cr : results[i]) {
        Band b;
        b.lo = std::move(cr.span.lo);
        b.hi = std::move(cr.span.hi);
        b.level = k + 1;
        b.kind = cr.kind;
        b.parent = static_cast<std::int32_t>(i);
        b.touches_parent_lo = cr.span.touch_lo;
        b.touches_parent_hi = cr.span.touch_hi;
        Real len = make_real(bits);
        mpfr_sub(raw(len), raw(b.hi), raw(b.lo), MPFR_RNDN);
        b.log_len = std::log(to_double(len));
        if (track_lengths) {
          b.log_q_prod = parent.log_q_prod + log_q_factor(parent.kind, b.kind, a, lambda_d);
          b.log_p_prod = parent.log_p_prod + log_p_factor(parent.kind, b.kind, a, lambda_d);
        } else {
          b.log_q_prod = b.log_p_prod = std::numeric_limits<double>::quiet_NaN();
        }
        next.bands.push_back(std::move(b));
      }
    }
    for (std::size_t i = 0; i + 1 < next.bands.size(); ++i)
      if (mpfr_cmp(raw(next.bands[i].lo), raw(next.bands[i + 1].lo)) > 0)
        throw ComputationError("level assembly lost energy ordering");

    if (options.on_level) options.on_level(current, next);
    current = std::move(next);
    if (options.keep_levels) tree.mutable_levels().push_back(current);
  }
  st->precision_escalations = escalations.load();
  if (!options.keep_levels) tree.mutable_levels().push_back(std::move(current));
  return tree;
}

std::vector<Band> expand_band(const ModelParams& params, const Band& parent,
                              const TreeBuildOptions& options, TreeBuildStats* stats) {
  params.require_band_regime();
  TreeBuildStats local;
  TreeBuildStats* st = stats ? stats : &local;
  SearchCtx cx(params.cf, params.lambda, params.precision_bits, st);
  auto records = search_children_robust(params, parent, options, cx, nullptr);
  const long bits = params.precision_bits;
  const double lambda_d = params.lambda_d();
  const unsigned long a = params.cf.a(parent.level + 1);
  std::vector<Band> out;
  out.reserve(records.size());
  for (auto& cr : records) {
    Band b;
    b.lo = std::move(cr.span.lo);
    b.hi = std::move(cr.span.hi);
    b.level = parent.level + 1;
    b.kind = cr.kind;
    b.parent = -1;
    b.touches_parent_lo = cr.span.touch_lo;
    b.touches_parent_hi = cr.span.touch_hi;
    Real len = make_real(bits);
    mpfr_sub(raw(len), raw(b.hi), raw(b.lo), MPFR_RNDN);
    b.log_len = std::log(to_double(len));
    if (lambda_d > 8.0) {
      b.log_q_prod = parent.log_q_prod + log_q_factor(parent.kind, b.kind, a, lambda_d);
      b.log_p_prod = parent.log_p_prod + log_p_factor(parent.kind, b.kind, a, lambda_d);
    } else {
      b.log_q_prod = b.log_p_prod = std::numeric_limits<double>::quiet_NaN();
    }
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// direct enumeration
// ---------------------------------------------------------------------------

std::vector<std::pair<Real, Real>> enumerate_bands(const ModelParams& params, int k, int p,
                                                   std::optional<std::pair<Real, Real>> window) {
  params.require_band_regime();
  if (k == 0 && p == 0)
    throw ValidationError("the level-0 constant trace covers the whole line");
  if (k < 0 || p < -1) throw ValidationError("need k >= 0, p >= -1");
  const long base_bits = params.precision_bits;

  BigInt degree = expected_band_count(params.cf, k, p);
  const bool full_line_window = !window.has_value();

  Real wlo = make_real(base_bits), whi = make_real(base_bits);
  if (window) {
    mpfr_set(raw(wlo), raw(window->first), MPFR_RNDN);
    mpfr_set(raw(whi), raw(window->second), MPFR_RNDN);
  } else {
    // spectral hull: every band of every family lies within it
    mpfr_add_ui(raw(whi), raw(params.lambda), 3, MPFR_RNDN);
    mpfr_neg(raw(wlo), raw(whi), MPFR_RNDN);
  }

  if (degree == 0) {
    // constant trace identically 2: the whole line is one band
    return {{wlo, whi}};
  }

  long expected = full_line_window ? degree.convert_to<long>() : -1;

  for (long bits = base_bits; bits <= 4096; bits *= 2) {
    TreeBuildStats stats;
    SearchCtx cx(params.cf, params.lambda, bits, &stats);
    Real xp = make_real(bits), xc = make_real(bits), xn = make_real(bits);
    // x_{(k,p)}: evaluate the triple at level k, then the p-recursion
    auto probe_xkp = [&](mpfr_srcptr E) -> Probe {
      cx.kernel.eval(E, k);
      mpfr_srcptr val;
      if (p == 0) {
        val = cx.kernel.u();
      } else if (p == 1) {
        val = cx.kernel.w();
      } else if (p == -1) {
        cx.kernel.x_minus_one(raw(xc));
        val = raw(xc);
      } else {
        mpfr_set(raw(xp), cx.kernel.u(), MPFR_RNDN);
        mpfr_set(raw(xc), cx.kernel.w(), MPFR_RNDN);
        for (int j = 2; j <= p; ++j) {
          mpfr_fms(raw(xn), cx.kernel.v(), raw(xc), raw(xp), MPFR_RNDN);
          mpfr_swap(raw(xp), raw(xc));
          mpfr_swap(raw(xc), raw(xn));
        }
        val = raw(xc);
      }
      return {mpfr_sgn(val), mpfr_cmpabs_ui(val, 2) <= 0};
    };

    auto refine_edge = [&](Real& out_pt, Real& in_pt, Real& result) {
      for (int iter = 0; iter < 4 * bits; ++iter) {
        mpfr_sub(raw(cx.t1), raw(in_pt), raw(out_pt), MPFR_RNDN);
        double width = std::fabs(to_double(cx.t1));
        double e_abs = std::fabs(to_double(in_pt));
        if (width <= std::max(ulp_guard(e_abs, bits), spec_tol(e_abs, bits))) break;
        mpfr_add(raw(cx.mid), raw(out_pt), raw(in_pt), MPFR_RNDN);
        mpfr_div_2ui(raw(cx.mid), raw(cx.mid), 1, MPFR_RNDN);
        if (probe_xkp(raw(cx.mid)).inband)
          mpfr_set(raw(in_pt), raw(cx.mid), MPFR_RNDN);
        else
          mpfr_set(raw(out_pt), raw(cx.mid), MPFR_RNDN);
      }
      mpfr_add(raw(result), raw(out_pt), raw(in_pt), MPFR_RNDN);
      mpfr_div_2ui(raw(result), raw(result), 1, MPFR_RNDN);
    };

    long N = std::max<long>(255, expected > 0 ? 16 * expected : 255);
    for (; N <= (1L << 20); N *= 2) {
      std::vector<std::uint8_t> inband(N + 1);
      std::vector<Real> grid;
      grid.reserve(N + 1);
      Real step = make_real(bits), E = make_real(bits);
      mpfr_sub(raw(step), raw(whi), raw(wlo), MPFR_RNDN);
      mpfr_div_ui(raw(step), raw(step), N, MPFR_RNDN);
      for (long j = 0; j <= N; ++j) {
        mpfr_mul_ui(raw(E), raw(step), j, MPFR_RNDN);
        mpfr_add(raw(E), raw(E), raw(wlo), MPFR_RNDN);
        grid.push_back(E);
        inband[j] = probe_xkp(raw(E)).inband;
      }
      std::vector<std::pair<Real, Real>> bands;
      long j = 0;
      while (j <= N) {
        if (!inband[j]) {
          ++j;
          continue;
        }
        long j0 = j;
        while (j + 1 <= N && inband[j + 1]) ++j;
        Real lo_e = make_real(bits), hi_e = make_real(bits);
        if (j0 == 0) {
          mpfr_set(raw(lo_e), raw(wlo), MPFR_RNDN);
        } else {
          Real out = grid[j0 - 1], in = grid[j0];
          refine_edge(out, in, lo_e);
        }
        if (j == N) {
          mpfr_set(raw(hi_e), raw(whi), MPFR_RNDN);
        } else {
          Real out = grid[j + 1], in = grid[j];
          refine_edge(out, in, hi_e);
        }
        bands.emplace_back(std::move(lo_e), std::move(hi_e));
        ++j;
      }
      if (expected < 0 || static_cast<long>(bands.size()) == expected) return bands;
      if (static_cast<long>(bands.size()) > expected)
        throw CountMismatchError("found more bands than the degree admits");
    }
  }
  throw CountMismatchError("band enumeration failed to reach the expected count");
}

// ---------------------------------------------------------------------------
// verification
// ---------------------------------------------------------------------------

struct StreamingVerifier::Impl {
  ModelParams params;
  double tol;
  bool check_types;
  std::vector<BigInt> qs;
  std::unique_ptr<SearchCtx> cx;
  TreeBuildStats stats;

  long levels_seen = 0;
  // aggregated results
  long sigma_count_fail = 0;
  long nesting_fail = 0;
  long disjoint_fail = 0;
  long transition_fail = 0;
  long sandwich_fail = 0;
  long type_fail = 0;
  long bands_seen = 0;
  std::string first_failure;

  Impl(const ModelParams& p, double tol_, bool types)
      : params(p), tol(tol_), check_types(types) {
    int kmax = 64;
    if (params.cf.is_finite()) kmax = static_cast<int>(params.cf.length());
    qs = convergent_denominators(params.cf, kmax);
    cx = std::make_unique<SearchCtx>(params.cf, params.lambda, params.precision_bits, &stats);
  }

  void note_failure(const std::string& what) {
    if (first_failure.empty()) first_failure = what;
  }
};

StreamingVerifier::StreamingVerifier(const ModelParams& params, double endpoint_tol,
                                     bool check_types)
    : impl_(std::make_unique<Impl>(params, endpoint_tol, check_types)) {}

StreamingVerifier::~StreamingVerifier() = default;

void StreamingVerifier::observe_root(const BandLevel& root) {
  impl_->levels_seen = 1;
  impl_->bands_seen += root.bands.size();
  if (root.bands.size() != 2) {
    impl_->sigma_count_fail++;
    impl_->note_failure("root level must hold exactly two bands");
  }
}

void StreamingVerifier::observe(const BandLevel& parents, const BandLevel& children) {
  Impl& im = *impl_;
  const int k1 = children.k;
  im.levels_seen = std::max<long>(im.levels_seen, k1 + 1);
  im.bands_seen += children.bands.size();
  const unsigned long a = im.params.cf.a(k1);
  const double lambda_d = im.params.lambda_d();

  // sigma_{(k1+1,0)} band count == q_{k1}
  long sigma_count = 0;
  for (const Band& b : children.bands)
    if (b.kind != BandKind::I) ++sigma_count;
  if (k1 < static_cast<int>(im.qs.size()) && BigInt(sigma_count) != im.qs[k1]) {
    im.sigma_count_fail++;
    std::ostringstream os;
    os << "level " << k1 << ": sigma band count " << sigma_count << " != q_" << k1;
    im.note_failure(os.str());
  }

  // per-parent transition counts + nesting
  std::vector<TransitionCounts> realized(parents.bands.size());
  for (const Band& b : children.bands) {
    if (b.parent < 0 || b.parent >= static_cast<int>(parents.bands.size())) {
      im.nesting_fail++;
      im.note_failure("child with broken parent link");
      continue;
    }
    TransitionCounts& tc = realized[b.parent];
    if (b.kind == BandKind::I)
      tc.to_I++;
    else if (b.kind == BandKind::II)
      tc.to_II++;
    else
      tc.to_III++;
    const Band& par = parents.bands[b.parent];
    Real d1 = make_real(im.params.precision_bits);
    mpfr_sub(raw(d1), raw(par.lo), raw(b.lo), MPFR_RNDN);
    double under = to_double(d1);
    mpfr_sub(raw(d1), raw(b.hi), raw(par.hi), MPFR_RNDN);
    double over = to_double(d1);
    if (under > im.tol || over > im.tol) {
      im.nesting_fail++;
      std::ostringstream os;
      os << "level " << k1 << ": child escapes parent by " << std::max(under, over);
      im.note_failure(os.str());
    }
  }
  for (std::size_t i = 0; i < parents.bands.size(); ++i) {
    TransitionCounts expect = transition_row(parents.bands[i].kind, a);
    if (realized[i].to_I != expect.to_I || realized[i].to_II != expect.to_II ||
        realized[i].to_III != expect.to_III) {
      im.transition_fail++;
      std::ostringstream os;
      os << "level " << k1 << " parent " << i << " (" << kind_name(parents.bands[i].kind)
         << "): children (" << realized[i].to_I << "," << realized[i].to_II << ","
         << realized[i].to_III << ") != (" << expect.to_I << "," << expect.to_II << ","
         << expect.to_III << ")";
      im.note_failure(os.str());
    }
  }

  // sibling disjointness (bands arrive sorted)
  for (std::size_t i = 0; i + 1 < children.bands.size(); ++i) {
    Real gap = make_real(im.params.precision_bits);
    mpfr_sub(raw(gap), raw(children.bands[i + 1].lo), raw(children.bands[i].hi), MPFR_RNDN);
    if (to_double(gap) < -im.tol) {
      im.disjoint_fail++;
      std::ostringstream os;
      os << "level " << k1 << ": bands " << i << "," << i + 1 << " overlap by "
         << -to_double(gap);
      im.note_failure(os.str());
    }
  }

  // length sandwich 4 prod(Q) <= |B| <= 4 prod(P)
  if (lambda_d > 8.0) {
    const double log4 = std::log(4.0);
    for (std::size_t i = 0; i < children.bands.size(); ++i) {
      const Band& b = children.bands[i];
      double slack = 1e-8 * (1.0 + std::fabs(b.log_q_prod) + std::fabs(b.log_p_prod)) + 1e-12;
      if (b.log_len < log4 + b.log_q_prod - slack || b.log_len > log4 + b.log_p_prod + slack) {
        im.sandwich_fail++;
        std::ostringstream os;
        os << "level " << k1 << " band " << i << ": log length " << b.log_len
           << " outside [" << log4 + b.log_q_prod << ", " << log4 + b.log_p_prod << "]";
        im.note_failure(os.str());
      }
    }
  }

  // type exclusivity re-check (triple-intersection emptiness), sampled at mids
  if (im.check_types) {
    for (const Band& b : children.bands) {
      try {
        check_classification(*im.cx, k1, b.lo, b.hi, b.kind);
      } catch (const ComputationError& e) {
        im.type_fail++;
        im.note_failure(e.what());
      }
    }
  }
}

TreeReport StreamingVerifier::report() const {
  const Impl& im = *impl_;
  TreeReport rep;
  auto add = [&](const std::string& name, long fails, const std::string& extra = "") {
    CheckResult c;
    c.name = name;
    c.pass = fails == 0;
    std::ostringstream os;
    if (fails) os << fails << " failure(s). ";
    os << extra;
    if (!c.pass && !im.first_failure.empty()) os << " first: " << im.first_failure;
    c.detail = os.str();
    rep.checks.push_back(std::move(c));
  };
  std::ostringstream seen;
  seen << im.bands_seen << " bands over " << im.levels_seen << " levels.";
  add("sigma_band_counts", im.sigma_count_fail, seen.str());
  add("tree_nesting", im.nesting_fail);
  add("sibling_disjoint", im.disjoint_fail);
  add("transition_counts", im.transition_fail);
  if (im.params.lambda_d() > 8.0) add("band_length_sandwich", im.sandwich_fail);
  if (im.check_types) add("triple_intersection_empty", im.type_fail);
  return rep;
}

TreeReport verify_tree(const BandTree& tree) {
  const ModelParams& params = tree.params();
  StreamingVerifier ver(params);
  ver.observe_root(tree.level(0));
  for (int k = 0; k + 1 <= tree.depth(); ++k) ver.observe(tree.level(k), tree.level(k + 1));
  TreeReport rep = ver.report();

  // direct global enumeration agreement at level 1
  if (tree.depth() >= 1) {
    CheckResult c;
    c.name = "level1_direct_agreement";
    c.pass = true;
    try {
      auto s11 = enumerate_bands(params, 1, 1);
      auto s20 = enumerate_bands(params, 2, 0);
      auto s10 = enumerate_bands(params, 1, 0);
      auto in_some = [&](const std::vector<std::pair<Real, Real>>& sets, const Real& lo,
                         const Real& hi) {
        double tol = 1e-12;
        for (const auto& s : sets)
          if (to_double(lo) >= to_double(s.first) - tol && to_double(hi) <= to_double(s.second) + tol)
            return true;
        return false;
      };
      // classify directly and compare with the built level
      std::vector<std::pair<double, BandKind>> direct;
      for (const auto& band : s11)
        if (in_some(s10, band.first, band.second)) direct.push_back({to_double(band.first), BandKind::I});
      bool sigma_m1_full_line = false;
      std::vector<std::pair<Real, Real>> s1m1;
      if (expected_band_count(params.cf, 1, -1) == 0)
        sigma_m1_full_line = true;
      else
        s1m1 = enumerate_bands(params, 1, -1);
      for (const auto& band : s20) {
        if (in_some(s10, band.first, band.second))
          direct.push_back({to_double(band.first), BandKind::III});
        else if (sigma_m1_full_line || in_some(s1m1, band.first, band.second))
          direct.push_back({to_double(band.first), BandKind::II});
      }
      std::sort(direct.begin(), direct.end());
      const auto& built = tree.level(1).bands;
      if (direct.size() != built.size()) {
        c.pass = false;
        c.detail = "level-1 count disagrees with direct enumeration";
      } else {
        for (std::size_t i = 0; i < built.size(); ++i) {
          if (built[i].kind != direct[i].second ||
              std::fabs(to_double(built[i].lo) - direct[i].first) > 1e-12) {
            c.pass = false;
            c.detail = "level-1 band " + std::to_string(i) + " disagrees with direct enumeration";
            break;
          }
        }
      }
    } catch (const Error& e) {
      c.pass = false;
      c.detail = e.what();
    }
    rep.checks.push_back(std::move(c));
  }

  // finite-volume eigenvalues vs the generating-band cover
  {
    CheckResult c;
    c.name = "eigenvalue_cover";
    c.pass = true;
    try {
      int m = std::min(tree.depth(), 6);
      auto qs = convergent_denominators(params.cf, m);
      long n = static_cast<long>(qs[m]);
      if (n > 2000) {
        c.detail = "skipped (q too large)";
      } else {
        auto eigs = oracle::charpoly_eigenvalues(params, n);
        const auto& bands = tree.level(m).bands;
        long outliers = 0;
        double tol = 1e-12 * (params.lambda_d() + 4.0);
        for (const auto& e : eigs) {
          bool covered = false;
          double ed = to_double(e);
          for (const Band& b : bands)
            if (ed >= to_double(b.lo) - tol && ed <= to_double(b.hi) + tol) {
              covered = true;
              break;
            }
          if (!covered) ++outliers;
        }
        long allowance = 2 + n / 4;  // truncation can park a few eigenvalues in gaps
        std::ostringstream os;
        os << outliers << " of " << n << " eigenvalues outside level-" << m
           << " bands (allowance " << allowance << ")";
        c.detail = os.str();
        c.pass = outliers <= allowance;
      }
    } catch (const Error& e) {
      c.pass = false;
      c.detail = e.what();
    }
    rep.checks.push_back(std::move(c));
  }
  return rep;
}

}  // namespace qspec
