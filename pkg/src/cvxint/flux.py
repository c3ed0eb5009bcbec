"""Modified flux profiles for forward-backward diffusion of Perona-Malik type.

The scalar flux rho(s) = s / (1 + s^2) is increasing only on [0, 1], so the
vector flux sigma(p) = p / (1 + |p|^2) loses parabolicity at |p| = 1.  A
``FluxProfile`` replaces rho beyond the subcritical root m_minus(delta) by a
slow C^3 ramp with slope pinched in [theta, Theta], staying strictly below
rho on (m_minus, Lambda].  The induced vector flux A(p) = f(|p|^2) p is then
uniformly parabolic while agreeing with sigma on |p| <= m_minus.

Profiles are built once (knot table plus closed forms), evaluated vectorized,
and serialize to JSON so a run manifest can reproduce them bit for bit.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

__all__ = [
    "rho",
    "rho_prime",
    "rho_double_prime",
    "sigma",
    "m_bounds",
    "FluxProfile",
    "build_profile",
    "A_flux",
    "A_jacobian",
]


def rho(s):
    """Scalar Perona-Malik flux s / (1 + s^2), vectorized."""
    s = np.asarray(s, dtype=float)
    return s / (1.0 + s * s)


def rho_prime(s):
    """Derivative (1 - s^2) / (1 + s^2)^2 of the scalar flux."""
    s = np.asarray(s, dtype=float)
    den = 1.0 + s * s
    return (1.0 - s * s) / (den * den)


def rho_double_prime(s):
    """Second derivative -2 s (3 - s^2) / (1 + s^2)^3."""
    s = np.asarray(s, dtype=float)
    den = 1.0 + s * s
    return -2.0 * s * (3.0 - s * s) / den**3


def sigma(p):
    """Vector flux p / (1 + |p|^2) acting on the trailing axis of p."""
    p = np.asarray(p, dtype=float)
    ss = np.sum(p * p, axis=-1, keepdims=True)
    return p / (1.0 + ss)


def m_bounds(delta):
    """Roots m_minus <= m_plus of rho(s) = delta for 0 < delta < 1/2.

    They satisfy m_minus * m_plus = 1; rho > delta exactly on the open
    interval (m_minus, m_plus).
    """
    delta = float(delta)
    if not 0.0 < delta < 0.5:
        raise ValueError(f"delta must lie in (0, 1/2), got {delta}")
    root = np.sqrt(1.0 - 4.0 * delta * delta)
    return (1.0 - root) / (2.0 * delta), (1.0 + root) / (2.0 * delta)


def _smoothstep7(x):
    """C^3 step: 1 at x <= 0 falling to 0 at x >= 1, flat to third order."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return 1.0 - x**4 * (35.0 - 84.0 * x + 70.0 * x**2 - 20.0 * x**3)


@dataclass
class FluxProfile:
    """Modified flux: rho on [0, m_minus], blended ramp after.

    rho_star equals rho up to m_minus, then integrates a slope
    g(s) = theta + (rho'(s) - theta) * B((s - m_minus)/blend_width) across the
    blend window and continues linearly with slope theta.  The blend slope is
    pinched in [theta, Theta] and rho_star < rho holds strictly on
    (m_minus, Lambda].

    ``knots_s`` / ``knots_rho`` tabulate rho_star on the blend window; a cubic
    spline through them evaluates the window, everything else is closed form.
    """

    delta: float
    Lambda: float
    theta: float
    Theta: float
    blend_width: float
    m_minus: float
    m_plus: float
    knots_s: np.ndarray
    knots_rho: np.ndarray
    achieved: dict = field(default_factory=dict)
    _spline: CubicSpline = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.knots_s = np.asarray(self.knots_s, dtype=float)
        self.knots_rho = np.asarray(self.knots_rho, dtype=float)
        self._spline = CubicSpline(self.knots_s, self.knots_rho)

    @property
    def blend_end(self):
        return self.m_minus + self.blend_width

    # -- scalar profile ---------------------------------------------------

    def rho_star(self, s):
        """Modified scalar flux, vectorized over s >= 0."""
        s = np.asarray(s, dtype=float)
        out = np.empty(s.shape, dtype=float)
        lo = s <= self.m_minus
        hi = s >= self.blend_end
        mid = ~(lo | hi)
        out[lo] = rho(s[lo])
        out[mid] = self._spline(s[mid])
        rho_end = float(self._spline(self.blend_end))
        out[hi] = rho_end + self.theta * (s[hi] - self.blend_end)
        return out if out.shape else float(out)

    def rho_star_prime(self, s):
        """Slope of rho_star; equals rho' below m_minus, theta past the blend."""
        s = np.asarray(s, dtype=float)
        out = np.empty(s.shape, dtype=float)
        lo = s <= self.m_minus
        hi = s >= self.blend_end
        mid = ~(lo | hi)
        out[lo] = rho_prime(s[lo])
        x = (s[mid] - self.m_minus) / self.blend_width
        out[mid] = self.theta + (rho_prime(s[mid]) - self.theta) * _smoothstep7(x)
        out[hi] = self.theta
        return out if out.shape else float(out)

    # -- induced isotropic coefficient ------------------------------------

    def f(self, s_sq):
        """Coefficient f(|p|^2) with A(p) = f(|p|^2) p; f(0) = 1.

        Below m_minus^2 it is exactly 1 / (1 + s); past that
        rho_star(sqrt(s)) / sqrt(s).
        """
        s_sq = np.asarray(s_sq, dtype=float)
        out = np.empty(s_sq.shape, dtype=float)
        cut = self.m_minus * self.m_minus
        lo = s_sq <= cut
        out[lo] = 1.0 / (1.0 + s_sq[lo])
        r = np.sqrt(s_sq[~lo])
        out[~lo] = self.rho_star(r) / r
        return out if out.shape else float(out)

    def f_prime(self, s_sq):
        """d/ds of f(s); exact -1/(1+s)^2 below m_minus^2."""
        s_sq = np.asarray(s_sq, dtype=float)
        out = np.empty(s_sq.shape, dtype=float)
        cut = self.m_minus * self.m_minus
        lo = s_sq <= cut
        den = 1.0 + s_sq[lo]
        out[lo] = -1.0 / (den * den)
        r = np.sqrt(s_sq[~lo])
        out[~lo] = (self.rho_star_prime(r) * r - self.rho_star(r)) / (2.0 * r**3)
        return out if out.shape else float(out)

    def A(self, p):
        """Vector flux A(p) = f(|p|^2) p on the trailing axis."""
        p = np.asarray(p, dtype=float)
        ss = np.sum(p * p, axis=-1)
        return np.asarray(self.f(ss))[..., None] * p

    def A_jacobian(self, p):
        """Jacobian DA(p) = f I + 2 f' p p^T, shape p.shape + (n,).

        Eigenvalues are f(|p|^2) with multiplicity n-1 and rho_star'(|p|),
        both inside [theta, Theta].
        """
        p = np.asarray(p, dtype=float)
        n = p.shape[-1]
        ss = np.sum(p * p, axis=-1)
        eye = np.eye(n)
        fv = np.asarray(self.f(ss))
        fpv = np.asarray(self.f_prime(ss))
        return (
            fv[..., None, None] * eye
            + 2.0 * fpv[..., None, None] * (p[..., :, None] * p[..., None, :])
        )

    # -- serialization -----------------------------------------------------

    def to_json(self):
        payload = {
            "delta": self.delta,
            "Lambda": self.Lambda,
            "theta": self.theta,
            "Theta": self.Theta,
            "blend_width": self.blend_width,
            "m_minus": self.m_minus,
            "m_plus": self.m_plus,
            "knots_s": self.knots_s.tolist(),
            "knots_rho": self.knots_rho.tolist(),
            "achieved": self.achieved,
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            delta=d["delta"],
            Lambda=d["Lambda"],
            theta=d["theta"],
            Theta=d["Theta"],
            blend_width=d["blend_width"],
            m_minus=d["m_minus"],
            m_plus=d["m_plus"],
            knots_s=np.array(d["knots_s"]),
            knots_rho=np.array(d["knots_rho"]),
            achieved=d.get("achieved", {}),
        )


def A_flux(profile, p):
    """Vector flux of the profile at p (trailing axis of p)."""
    return profile.A(p)


def A_jacobian(profile, p):
    """Jacobian of the vector flux at p."""
    return profile.A_jacobian(p)


def _build_knots(delta, m_minus, theta, width, knots):
    s = np.linspace(m_minus, m_minus + width, knots)
    g = theta + (rho_prime(s) - theta) * _smoothstep7((s - m_minus) / width)
    vals = delta + cumulative_simpson(g, x=s, initial=0.0)
    return s, vals


def build_profile(M, slack=0.5, *, delta=None, Lambda=None, theta=None,
                  blend_width=None, knots=4096, max_retries=6):
    """Construct a validated FluxProfile for data with gradient bound M.

    For 0 < M < 1 the profile takes delta = 0.9 rho(M) and
    Lambda = (1 + m_plus)/2; for M >= 1 it takes delta = rho(M + slack) and
    Lambda = M + slack/2.  Explicit delta / Lambda / theta / blend_width
    override the defaults.  The slope target defaults to a quarter of the
    mean slope of rho between m_minus and Lambda, which keeps
    rho_star(Lambda) <= delta + 3 (rho(Lambda) - delta)/4 once the blend
    window is capped inside {rho' >= theta} and below the half-gap level.

    Validation samples the pinch, the strict undercut on (m_minus, Lambda],
    monotonicity, and the induced coefficient bounds; on failure the blend
    width is halved (at most ``max_retries`` times).
    """
    M = float(M)
    if M <= 0:
        raise ValueError("M must be positive")
    if delta is None:
        delta = 0.9 * float(rho(M)) if M < 1.0 else float(rho(M + slack))
    delta = float(delta)
    m_minus, m_plus = m_bounds(delta)
    if Lambda is None:
        Lambda = 0.5 * (1.0 + m_plus) if M < 1.0 else M + 0.5 * slack
    Lambda = float(Lambda)
    if not m_minus < Lambda:
        raise ValueError("Lambda must exceed m_minus")

    gap = float(rho(Lambda)) - delta
    if gap <= 0:
        raise ValueError("rho(Lambda) must exceed delta")
    if theta is None:
        theta = gap / (4.0 * (Lambda - m_minus))
    theta = float(theta)
    Theta = 1.0

    # Largest admissible blend window: stay where rho' >= theta (so the blend
    # slope never dips below theta) and keep rho(m_minus + w) at most half a
    # gap above delta (so the linear tail cannot catch rho before Lambda).
    s_theta = brentq(lambda s: float(rho_prime(s)) - theta, m_minus, 1.0)
    w_cap = 0.95 * (s_theta - m_minus)
    half_level = delta + 0.5 * gap
    if float(rho(s_theta)) > half_level:
        s_half = brentq(lambda s: float(rho(s)) - half_level, m_minus, s_theta)
        w_cap = min(w_cap, s_half - m_minus)
    if blend_width is None:
        blend_width = min(0.5 * (Lambda - m_minus), w_cap)
    blend_width = float(blend_width)

    last_err = None
    for _ in range(max_retries + 1):
        s_knots, rho_knots = _build_knots(delta, m_minus, theta, blend_width, knots)
        prof = FluxProfile(
            delta=delta, Lambda=Lambda, theta=theta, Theta=Theta,
            blend_width=blend_width, m_minus=m_minus, m_plus=m_plus,
            knots_s=s_knots, knots_rho=rho_knots,
        )
        try:
            prof.achieved = _validate_profile(prof)
            return prof
        except ValueError as err:  # retry with a narrower blend
            last_err = err
            blend_width *= 0.5
    raise ValueError(f"profile validation failed after retries: {last_err}")


def _validate_profile(prof):
    tol = 1e-9
    s_lo = np.linspace(0.0, prof.m_minus, 1001)[:-1]
    s_bl = np.linspace(prof.m_minus, prof.blend_end, 4001)
    s_hi = np.linspace(prof.blend_end, max(2.0 * prof.m_plus, prof.Lambda + 1.0), 2001)[1:]
    s_all = np.concatenate([s_lo, s_bl, s_hi])

    g = prof.rho_star_prime(s_bl[1:])
    if g.min() < prof.theta - tol or g.max() > prof.Theta + tol:
        raise ValueError(f"slope pinch violated: [{g.min():.3e}, {g.max():.3e}]")

    # The undercut vanishes to third order at m_minus, so demand strict
    # positivity only past 1% of the blend window and roundoff-flat before.
    strict_from = prof.m_minus + 0.01 * prof.blend_width
    sliver = s_all[(s_all > prof.m_minus) & (s_all < strict_from)]
    if sliver.size and (rho(sliver) - prof.rho_star(sliver)).min() < -1e-13:
        raise ValueError("undercut violated at the contact point")
    inside = s_all[(s_all >= strict_from) & (s_all <= prof.Lambda)]
    undercut = rho(inside) - prof.rho_star(inside)
    if undercut.min() <= 0:
        raise ValueError(f"undercut violated: min {undercut.min():.3e}")

    vals = prof.rho_star(s_all)
    if np.any(np.diff(vals) <= 0):
        raise ValueError("rho_star not strictly increasing")

    fv = prof.f(s_all[1:] ** 2)
    if fv.min() < prof.theta - tol or fv.max() > prof.Theta + tol:
        raise ValueError("coefficient f escapes [theta, Theta]")

    return {
        "slope_min": float(g.min()),
        "slope_max": float(g.max()),
        "undercut_min": float(undercut.min()),
        "undercut_at_Lambda": float(rho(prof.Lambda) - prof.rho_star(prof.Lambda)),
        "rho_star_Lambda": float(prof.rho_star(prof.Lambda)),
    }
