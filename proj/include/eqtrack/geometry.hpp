#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "eqtrack/dual.hpp"
#include "eqtrack/error.hpp"
#include "eqtrack/rng.hpp"

namespace eqtrack::geometry {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kSqrt2 = 1.41421356237309504880;

// Latent value <-> rho scaling: containers store rho mapped from [0, sqrt2]
// onto [-1, 1].
inline double rho_from_latent(double v) { return (v + 1.0) * (kSqrt2 / 2.0); }
inline double rho_to_latent(double r) { return r * (2.0 / kSqrt2) - 1.0; }

enum class Parametrization { XYCSA, XYCS, RCS };

// Which latent parametrization and which elementary transforms a model uses.
struct ModelConfig {
  Parametrization parametrization = Parametrization::XYCSA;
  int n = 8;  // track feature containers per latent vector
  bool rotation = true;
  bool scale = true;
  bool skew = true;
  bool translation = true;
  bool line_shift = false;  // translation invariance along the line
  double gamma = 20.0;      // activation squashing slope
  double epsilon = 1e-6;    // normalization regularizer

  int n_p() const {
    switch (parametrization) {
      case Parametrization::XYCSA: return 5;
      case Parametrization::XYCS: return 4;
      case Parametrization::RCS: return 3;
    }
    return 0;
  }
  int latent_size() const { return n * n_p(); }
  bool has_activation() const { return parametrization == Parametrization::XYCSA; }

  // The five named configurations.
  static ModelConfig preset(const std::string& name) {
    ModelConfig c;
    if (name == "AT+A") {
      c.parametrization = Parametrization::XYCSA;
      c.line_shift = false;
    } else if (name == "AT+TI+A") {
      c.parametrization = Parametrization::XYCSA;
      c.line_shift = true;
    } else if (name == "RT+TI+A") {
      c.parametrization = Parametrization::XYCSA;
      c.scale = c.skew = c.translation = false;
      c.line_shift = true;
    } else if (name == "AT+TI") {
      c.parametrization = Parametrization::XYCS;
      c.line_shift = true;
    } else if (name == "AT,rcs") {
      c.parametrization = Parametrization::RCS;
      c.line_shift = false;
    } else {
      throw ConfigError("unknown model preset: " + name);
    }
    return c;
  }
};

// One coherent sample of the image/latent space transformation.
struct TransformParams {
  double rot = 0.0;
  double scale_x = 1.0, scale_y = 1.0;
  double skew_x = 0.0, skew_y = 0.0;
  double trans_x = 0.0, trans_y = 0.0;
  std::vector<double> line_shift;  // per container, empty means all zero

  double shift_for(int container) const {
    return container < static_cast<int>(line_shift.size()) ? line_shift[container] : 0.0;
  }
  static TransformParams identity(int n_containers = 0) {
    TransformParams p;
    p.line_shift.assign(static_cast<std::size_t>(n_containers), 0.0);
    return p;
  }
};

// Parameter ranges used both for sampling and for randomized tests.
struct XiRanges {
  static constexpr double rot_max = kPi / 4.0;
  static constexpr double scale_lo = 0.7, scale_hi = 1.3;
  static constexpr double skew_max = 0.4;
  static constexpr double trans_max = 0.4;
  static constexpr double shift_max = 0.5;
};

// A line in crop coordinates: point (x, y) plus direction (c, s) with
// c = kappa*cos(phi), s = kappa*sin(phi). Templated so the same formulas run
// on plain doubles and on dual numbers.
template <class S>
struct Line {
  S x, y, c, s;
};

struct TrackXYCS {
  double x = 0, y = 0, c = 1, s = 0;
};

// rho-theta form: r is the distance from the origin to the line, (c, s) are
// kappa*cos(theta), kappa*sin(theta) with theta = phi + pi/2.
struct TrackRCS {
  double r = 0, c = 1, s = 0;
};

inline double kappa(const TrackXYCS& t) { return std::sqrt(t.c * t.c + t.s * t.s); }
inline double phi_of(const TrackXYCS& t) { return std::atan2(t.s, t.c); }

namespace detail {

template <class S>
inline Line<S> rotate(const Line<S>& t, double xi) {
  using std::atan2; using std::cos; using std::sin;
  const double co = std::cos(xi), si = std::sin(xi);
  S phi = atan2(t.s, t.c);
  Line<S> r;
  r.x = t.x * co - t.y * si;
  r.y = t.x * si + t.y * co;
  r.c = cos(phi + xi);
  r.s = sin(phi + xi);
  return r;
}

template <class S>
inline Line<S> scale_x(const Line<S>& t, double xi, double eps) {
  using std::sqrt;
  S n = eps + sqrt(t.c * xi * (t.c * xi) + t.s * t.s);
  return {t.x * xi, t.y, t.c * xi / n, t.s / n};
}

template <class S>
inline Line<S> scale_y(const Line<S>& t, double xi, double eps) {
  using std::sqrt;
  S n = eps + sqrt(t.c * t.c + t.s * xi * (t.s * xi));
  return {t.x, t.y * xi, t.c / n, t.s * xi / n};
}

template <class S>
inline Line<S> skew_x(const Line<S>& t, double xi) {
  using std::atan2; using std::cos; using std::sin;
  S phi = atan2(t.s, t.c + t.s * xi);
  return {t.x + t.y * xi, t.y, cos(phi), sin(phi)};
}

template <class S>
inline Line<S> skew_y(const Line<S>& t, double xi) {
  using std::atan2; using std::cos; using std::sin;
  // direction update is (c, s + xi*c); see xycs notes in the module tests
  S phi = atan2(t.s + t.c * xi, t.c);
  return {t.x, t.y + t.x * xi, cos(phi), sin(phi)};
}

template <class S>
inline Line<S> translate(const Line<S>& t, double tx, double ty) {
  return {t.x + tx, t.y + ty, t.c, t.s};
}

template <class S>
inline Line<S> shift_along(const Line<S>& t, double r) {
  return {t.x + t.c * r, t.y + t.s * r, t.c, t.s};
}

template <class S>
inline S logistic(const S& x) {
  using std::exp;
  if (primal(x) >= 0.0) return 1.0 / (1.0 + exp(S(0.0) - x));
  S e = exp(x);
  return e / (1.0 + e);
}

// rotation -> scale_x -> scale_y -> skew_x -> skew_y -> translation,
// disabled steps are skipped
template <class S>
inline Line<S> compose(const Line<S>& t, const TransformParams& xi, const ModelConfig& cfg) {
  Line<S> r = t;
  if (cfg.rotation) r = rotate(r, xi.rot);
  if (cfg.scale) {
    r = scale_x(r, xi.scale_x, cfg.epsilon);
    r = scale_y(r, xi.scale_y, cfg.epsilon);
  }
  if (cfg.skew) {
    r = skew_x(r, xi.skew_x);
    r = skew_y(r, xi.skew_y);
  }
  if (cfg.translation) r = translate(r, xi.trans_x, xi.trans_y);
  return r;
}

template <class S>
inline void rcs_to_xycs(const S& r, const S& rc, const S& rs, Line<S>* out) {
  using std::atan2; using std::cos; using std::sin;
  S theta = atan2(rs, rc);
  S phi = theta - kPi / 2.0;
  out->x = r * cos(theta);
  out->y = r * sin(theta);
  out->c = cos(phi);
  out->s = sin(phi);
}

// theta is chosen so that (r*cos(theta), r*sin(theta)) is the foot of the
// perpendicular from the origin; for lines through the origin the r -> 0+
// limit theta = phi + pi/2 is used.
template <class S>
inline void xycs_to_rcs(const Line<S>& t, S* r, S* rc, S* rs) {
  using std::atan2; using std::cos; using std::sin;
  S phi = atan2(t.s, t.c);
  S d = t.y * cos(phi) - t.x * sin(phi);  // signed distance along (-sin, cos)
  S theta;
  if (primal(d) >= 0.0) {
    *r = d;
    theta = phi + kPi / 2.0;
  } else {
    *r = -d;
    theta = phi - kPi / 2.0;
  }
  *rc = cos(theta);
  *rs = sin(theta);
}

// Per-container latent transform shared by the scalar API and the autodiff
// op. z_in/z_out hold n_p values; rand4 supplies the uniform(-1,1) values
// used when an activation marks the container disabled.
template <class S>
inline void transform_container(const ModelConfig& cfg, const TransformParams& xi, int container,
                                const S* z_in, S* z_out, const double* rand4) {
  const double shift = xi.shift_for(container);
  switch (cfg.parametrization) {
    case Parametrization::XYCSA: {
      S a = z_in[4];
      if (primal(a) <= 0.0) {
        for (int k = 0; k < 4; ++k) z_out[k] = S(rand4[k]);
      } else {
        Line<S> t{z_in[0], z_in[1], z_in[2], z_in[3]};
        t = compose(t, xi, cfg);
        if (cfg.line_shift) t = shift_along(t, shift);
        z_out[0] = t.x; z_out[1] = t.y; z_out[2] = t.c; z_out[3] = t.s;
      }
      z_out[4] = logistic(a * cfg.gamma);
      break;
    }
    case Parametrization::XYCS: {
      Line<S> t{z_in[0], z_in[1], z_in[2], z_in[3]};
      t = compose(t, xi, cfg);
      if (cfg.line_shift) t = shift_along(t, shift);
      z_out[0] = t.x; z_out[1] = t.y; z_out[2] = t.c; z_out[3] = t.s;
      break;
    }
    case Parametrization::RCS: {
      S r = (z_in[0] + 1.0) * (kSqrt2 / 2.0);
      Line<S> t;
      rcs_to_xycs(r, z_in[1], z_in[2], &t);
      t = compose(t, xi, cfg);
      if (cfg.line_shift) t = shift_along(t, shift);
      S ro, rc, rs;
      xycs_to_rcs(t, &ro, &rc, &rs);
      z_out[0] = ro * (2.0 / kSqrt2) - 1.0;
      z_out[1] = rc;
      z_out[2] = rs;
      break;
    }
  }
}

}  // namespace detail

inline TrackXYCS apply_rotation(const TrackXYCS& t, double xi_r) {
  Line<double> r = detail::rotate(Line<double>{t.x, t.y, t.c, t.s}, xi_r);
  return {r.x, r.y, r.c, r.s};
}

inline TrackXYCS apply_scale(const TrackXYCS& t, double xi_sx, double xi_sy,
                             double eps = 1e-6) {
  auto r = detail::scale_x(Line<double>{t.x, t.y, t.c, t.s}, xi_sx, eps);
  r = detail::scale_y(r, xi_sy, eps);
  return {r.x, r.y, r.c, r.s};
}

inline TrackXYCS apply_skew(const TrackXYCS& t, double xi_kx, double xi_ky) {
  auto r = detail::skew_x(Line<double>{t.x, t.y, t.c, t.s}, xi_kx);
  r = detail::skew_y(r, xi_ky);
  return {r.x, r.y, r.c, r.s};
}

inline TrackXYCS apply_translation(const TrackXYCS& t, double xi_tx, double xi_ty) {
  return {t.x + xi_tx, t.y + xi_ty, t.c, t.s};
}

inline TrackXYCS apply_line_shift(const TrackXYCS& t, double r) {
  return {t.x + t.c * r, t.y + t.s * r, t.c, t.s};
}

inline TrackXYCS compose(const TrackXYCS& t, const TransformParams& xi, const ModelConfig& cfg) {
  auto r = detail::compose(Line<double>{t.x, t.y, t.c, t.s}, xi, cfg);
  return {r.x, r.y, r.c, r.s};
}

// Row-major 2x3 matrix acting on homogeneous points (x, y, 1).
struct Affine {
  std::array<double, 6> m{1, 0, 0, 0, 1, 0};

  std::array<double, 2> apply(double x, double y) const {
    return {m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]};
  }
  double det() const { return m[0] * m[4] - m[1] * m[3]; }
  Affine inverse() const {
    const double d = det();
    if (std::abs(d) <= 1e-8) throw SingularTransform("affine matrix is singular");
    Affine r;
    r.m[0] = m[4] / d;
    r.m[1] = -m[1] / d;
    r.m[3] = -m[3] / d;
    r.m[4] = m[0] / d;
    r.m[2] = -(r.m[0] * m[2] + r.m[1] * m[5]);
    r.m[5] = -(r.m[3] * m[2] + r.m[4] * m[5]);
    return r;
  }
  static Affine mul(const Affine& a, const Affine& b) {
    Affine r;
    r.m[0] = a.m[0] * b.m[0] + a.m[1] * b.m[3];
    r.m[1] = a.m[0] * b.m[1] + a.m[1] * b.m[4];
    r.m[2] = a.m[0] * b.m[2] + a.m[1] * b.m[5] + a.m[2];
    r.m[3] = a.m[3] * b.m[0] + a.m[4] * b.m[3];
    r.m[4] = a.m[3] * b.m[1] + a.m[4] * b.m[4];
    r.m[5] = a.m[3] * b.m[2] + a.m[4] * b.m[5] + a.m[5];
    return r;
  }
};

// Point action of compose() as a single affine matrix.
inline Affine affine_matrix(const TransformParams& xi, const ModelConfig& cfg) {
  Affine m;
  if (cfg.rotation) {
    Affine r;
    const double co = std::cos(xi.rot), si = std::sin(xi.rot);
    r.m = {co, -si, 0, si, co, 0};
    m = Affine::mul(r, m);
  }
  if (cfg.scale) {
    Affine sx;
    sx.m = {xi.scale_x, 0, 0, 0, 1, 0};
    m = Affine::mul(sx, m);
    Affine sy;
    sy.m = {1, 0, 0, 0, xi.scale_y, 0};
    m = Affine::mul(sy, m);
  }
  if (cfg.skew) {
    Affine kx;
    kx.m = {1, xi.skew_x, 0, 0, 1, 0};
    m = Affine::mul(kx, m);
    Affine ky;
    ky.m = {1, 0, 0, xi.skew_y, 1, 0};
    m = Affine::mul(ky, m);
  }
  if (cfg.translation) {
    m.m[2] += xi.trans_x;
    m.m[5] += xi.trans_y;
  }
  return m;
}

inline TrackXYCS rcs_to_xycs(const TrackRCS& t) {
  Line<double> out;
  const double th = std::atan2(t.s, t.c);
  detail::rcs_to_xycs(t.r, std::cos(th), std::sin(th), &out);
  return {out.x, out.y, out.c, out.s};
}

inline TrackRCS xycs_to_rcs(const TrackXYCS& t) {
  double r, rc, rs;
  detail::xycs_to_rcs(Line<double>{t.x, t.y, t.c, t.s}, &r, &rc, &rs);
  return {r, rc, rs};
}

inline double theta_of(const TrackRCS& t) {
  double th = std::atan2(t.s, t.c);
  if (th < 0) th += 2.0 * kPi;
  return th;
}

// Uniform draw of xi within the documented ranges; disabled transforms stay
// at their identity values and consume no randomness.
inline TransformParams sample_xi(rng::Stream& rs, const ModelConfig& cfg) {
  TransformParams xi;
  if (cfg.rotation) xi.rot = rs.uniform(-XiRanges::rot_max, XiRanges::rot_max);
  if (cfg.scale) {
    xi.scale_x = rs.uniform(XiRanges::scale_lo, XiRanges::scale_hi);
    xi.scale_y = rs.uniform(XiRanges::scale_lo, XiRanges::scale_hi);
  }
  if (cfg.skew) {
    xi.skew_x = rs.uniform(-XiRanges::skew_max, XiRanges::skew_max);
    xi.skew_y = rs.uniform(-XiRanges::skew_max, XiRanges::skew_max);
  }
  if (cfg.translation) {
    xi.trans_x = rs.uniform(-XiRanges::trans_max, XiRanges::trans_max);
    xi.trans_y = rs.uniform(-XiRanges::trans_max, XiRanges::trans_max);
  }
  xi.line_shift.assign(static_cast<std::size_t>(cfg.n), 0.0);
  if (cfg.line_shift)
    for (double& v : xi.line_shift) v = rs.uniform(-XiRanges::shift_max, XiRanges::shift_max);
  return xi;
}

// Deterministic core: rand4 holds n*4 uniform(-1,1) values consumed by
// disabled containers of activation models (ignored otherwise).
inline std::vector<double> transform_latent_with(const std::vector<double>& z,
                                                 const TransformParams& xi,
                                                 const ModelConfig& cfg,
                                                 const std::vector<double>& rand4) {
  const int np = cfg.n_p();
  if (static_cast<int>(z.size()) != cfg.n * np)
    throw ShapeMismatch("latent size " + std::to_string(z.size()));
  std::vector<double> out(z.size());
  static const double zeros[4] = {0, 0, 0, 0};
  for (int i = 0; i < cfg.n; ++i) {
    const double* r4 = rand4.empty() ? zeros : &rand4[static_cast<std::size_t>(i) * 4];
    detail::transform_container(cfg, xi, i, &z[static_cast<std::size_t>(i) * np],
                                &out[static_cast<std::size_t>(i) * np], r4);
  }
  return out;
}

inline std::vector<double> transform_latent(const std::vector<double>& z,
                                            const TransformParams& xi, const ModelConfig& cfg,
                                            rng::Stream& rs) {
  std::vector<double> rand4;
  if (cfg.has_activation()) {
    rand4.resize(static_cast<std::size_t>(cfg.n) * 4);
    for (double& v : rand4) v = rs.uniform(-1.0, 1.0);
  }
  return transform_latent_with(z, xi, cfg, rand4);
}

}  // namespace eqtrack::geometry
