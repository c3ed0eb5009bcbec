"""Regularized parabolic solves and boundary data on node-centered grids.

Grids include both endpoints per axis (spacing h = L/(m-1)); the explicit
stepper is a dual-cell finite-volume scheme whose wall fluxes vanish, so the
weighted mass sum is conserved to roundoff and homogeneous Neumann conditions
hold by construction.  Stored time steps may be split into stable substeps
automatically.  For fine 1D grids, where the explicit bound is unaffordable,
a semi-implicit (lagged-coefficient) stepper solves one symmetric tridiagonal
system per step with the same conservation structure.  The Poisson solve is
cosine-spectral: exact on cosine eigenfunctions and trapezoid-consistent in
its mean convention.

``build_boundary_datum`` packages the full construction: solve the
regularized equation from a catalog datum, lift the initial potential, and
integrate the flux history into the potential field whose time derivative
lands on the modified flux graph.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct, dctn, dst, idctn
from scipy.linalg import solveh_banded

from .divinv import BoxDomain
from .flux import sigma

__all__ = [
    "GridSpec",
    "ScalarField",
    "VectorField",
    "INITIAL_DATA",
    "initial_datum",
    "solve_regularized",
    "solve_semi_implicit",
    "solve_neumann_poisson",
    "spectral_gradient",
    "build_boundary_datum",
    "check_gradient_max_principle",
    "BoundaryDatum",
]


@dataclass(frozen=True)
class GridSpec:
    """Node-centered space-time grid with an explicit-stability guarantee.

    ``shape`` counts nodes per spatial axis (endpoints included), ``nt`` the
    number of *stored* time steps.  The explicit stepper advances each stored
    step in ``substeps`` equal substeps; the default ``substeps = 0`` picks
    the smallest count satisfying dt/substeps <= h_min^2 / (2 n theta_max),
    the stability bound for flux Jacobians pinched below ``theta_max``.  An
    explicit ``substeps`` that violates the bound raises.  (The semi-implicit
    stepper is unconditionally stable and ignores substeps.)
    """

    box: BoxDomain
    shape: tuple
    nt: int
    theta_max: float = 1.0
    substeps: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(m) for m in self.shape))
        if self.box.time is None:
            raise ValueError("GridSpec needs a box with a time interval")
        if len(self.shape) != self.box.n:
            raise ValueError("one node count per spatial axis required")
        if any(m < 3 for m in self.shape):
            raise ValueError("need at least 3 nodes per axis")
        if self.nt < 1:
            raise ValueError("need at least one time step")
        if self.substeps < 0:
            raise ValueError("substeps must be >= 0 (0 = automatic)")
        bound = self.stable_dt_bound()
        if self.substeps == 0:
            k = int(np.ceil(self.dt / (bound * (1.0 + 1e-12))))
            object.__setattr__(self, "substeps", max(1, k))
        elif self.dt / self.substeps > bound * (1.0 + 1e-12):
            raise ValueError(
                f"dt/substeps = {self.dt / self.substeps:.3e} violates "
                f"the stability bound {bound:.3e}"
            )

    @property
    def n(self):
        return self.box.n

    @property
    def spacings(self):
        return tuple(L / (m - 1) for L, m in zip(self.box.side_lengths, self.shape))

    @property
    def h_min(self):
        return min(self.spacings)

    @property
    def h_max(self):
        return max(self.spacings)

    @property
    def dt(self):
        return self.box.time_length / self.nt

    @property
    def dt_sub(self):
        return self.dt / self.substeps

    def stable_dt_bound(self):
        return self.h_min**2 / (2.0 * self.n * self.theta_max)

    @property
    def nodes(self):
        return self.box.nodes(self.shape)

    @property
    def times(self):
        t0, t1 = self.box.time
        return np.linspace(t0, t1, self.nt + 1)

    def cell_weights(self):
        """Trapezoid cell weights per axis: h/2 at walls, h inside."""
        out = []
        for h, m in zip(self.spacings, self.shape):
            w = np.full(m, h)
            w[0] = w[-1] = 0.5 * h
            out.append(w)
        return out

    def weight_array(self):
        W = np.ones(self.shape)
        for ax, w in enumerate(self.cell_weights()):
            shape = [1] * self.n
            shape[ax] = self.shape[ax]
            W = W * w.reshape(shape)
        return W


def _node_gradient(values, nodes, axes_offset):
    comps = [
        np.gradient(values, x, axis=axes_offset + k, edge_order=1)
        for k, x in enumerate(nodes)
    ]
    return np.stack(comps, axis=-1)


@dataclass
class ScalarField:
    """Scalar samples on a space-time grid, shape (nt+1, *shape)."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.grid.nt + 1,) + self.grid.shape
        if self.values.shape != expected:
            raise ValueError(f"expected values of shape {expected}")

    def gradient(self):
        """Spatial gradient: central stencils inside, one-sided at walls."""
        return _node_gradient(self.values, self.grid.nodes, 1)

    def time_derivative(self):
        return np.gradient(self.values, self.grid.times, axis=0, edge_order=1)

    def mass(self):
        """Weighted mass per time level (the conserved quantity)."""
        W = self.grid.weight_array()
        return np.tensordot(self.values, W, axes=(tuple(range(1, self.values.ndim)),
                                                  tuple(range(W.ndim))))

    def sup_norm(self):
        return float(np.max(np.abs(self.values)))


@dataclass
class VectorField:
    """Vector samples on a space-time grid, shape (nt+1, *shape, n)."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.grid.nt + 1,) + self.grid.shape + (self.grid.n,)
        if self.values.shape != expected:
            raise ValueError(f"expected values of shape {expected}")

    def divergence(self):
        div = np.zeros((self.grid.nt + 1,) + self.grid.shape)
        for k, x in enumerate(self.grid.nodes):
            div += np.gradient(self.values[..., k], x, axis=1 + k, edge_order=1)
        return div

    def time_derivative(self):
        return np.gradient(self.values, self.grid.times, axis=0, edge_order=1)

    def sup_norm(self):
        return float(np.max(np.linalg.norm(self.values, axis=-1)))


# -- initial data -------------------------------------------------------------


def _cosine_datum(nodes, M=2.0, k=1):
    """Mean-zero cosine along the first axis, gradient sup exactly M."""
    x = nodes[0]
    a, L = x[0], x[-1] - x[0]
    profile = (M * L / (np.pi * k)) * np.cos(np.pi * k * (x - a) / L)
    shape = [1] * len(nodes)
    shape[0] = len(x)
    out = profile.reshape(shape)
    for ax in range(1, len(nodes)):
        out = np.repeat(out, len(nodes[ax]), axis=ax)
    return out


def _gaussian_datum(nodes, M=2.0, center=0.35, width=0.12):
    """Bump along the first axis with gradient sup M, trapezoid mean removed."""
    x = nodes[0]
    a, L = x[0], x[-1] - x[0]
    xs = (x - a) / L
    amp = M * width * L * np.exp(0.5) / np.sqrt(2.0)
    profile = amp * np.exp(-(((xs - center) / width) ** 2))
    profile = profile - np.trapezoid(profile, x) / L
    shape = [1] * len(nodes)
    shape[0] = len(x)
    out = profile.reshape(shape)
    for ax in range(1, len(nodes)):
        out = np.repeat(out, len(nodes[ax]), axis=ax)
    return out


def _plateau_datum(nodes, M=2.0, edge=0.08):
    """Tent with C^2 quintic shoulders: du = +M then -M on flat plateaus.

    Along the first axis (normalized s in [0,1]) the slope profile ramps
    0 -> M over [0, edge], holds M, swings M -> -M across the center over a
    width-edge band, holds -M, and ramps back to 0 over [1-edge, 1]; wall
    slopes vanish, so the datum is flux-compatible with Neumann walls.  The
    flat plateaus keep the space-time modulus of the evolved pair small,
    which is what makes coarse cube covers possible downstream.
    """
    x = nodes[0]
    a, L = x[0], x[-1] - x[0]
    w = float(edge)
    if not 0.0 < w <= 0.25:
        raise ValueError("edge must lie in (0, 0.25]")
    s = (x - a) / L

    def ramp_int(xi):
        # integral of the quintic smoothstep: P(1) = 1/2
        xi = np.clip(xi, 0.0, 1.0)
        return xi**4 * (2.5 + xi * (-3.0 + xi))

    s1, s2, s3, s4 = w, 0.5 - 0.5 * w, 0.5 + 0.5 * w, 1.0 - w
    a1 = 0.5 * w                        # zone integrals accumulate
    a2 = a1 + (s2 - s1)
    a3 = a2                             # the center swing nets to zero
    a4 = a3 - (s4 - s3)
    F = np.select(
        [s <= s1, s <= s2, s <= s3, s <= s4],
        [w * ramp_int(s / w),
         a1 + (s - s1),
         a2 + (s - s2) - 2.0 * w * ramp_int((s - s2) / w),
         a3 - (s - s3)],
        default=a4 - (s - s4) + w * ramp_int((s - s4) / w),
    )
    profile = M * L * F
    profile = profile - np.trapezoid(profile, x) / L
    shape = [1] * len(nodes)
    shape[0] = len(x)
    out = profile.reshape(shape)
    for ax in range(1, len(nodes)):
        out = np.repeat(out, len(nodes[ax]), axis=ax)
    return out


INITIAL_DATA = {
    "cosine": _cosine_datum,
    "gaussian": _gaussian_datum,
    "plateau": _plateau_datum,
}


def initial_datum(name, nodes, **params):
    try:
        builder = INITIAL_DATA[name]
    except KeyError:
        raise ValueError(f"unknown initial datum {name!r}; "
                         f"have {sorted(INITIAL_DATA)}") from None
    return builder(nodes, **params)


# -- explicit conservative stepper --------------------------------------------


def _step_fluxes(u, spacings, coefficient):
    """Per-axis face fluxes A_k = f(|grad u|^2) d_k u at cell faces."""
    n = u.ndim
    fluxes = []
    for k in range(n):
        h = spacings[k]
        gk = np.diff(u, axis=k) / h
        ss = gk * gk
        for j in range(n):
            if j == k:
                continue
            gj = np.gradient(u, spacings[j], axis=j, edge_order=1)
            lo = tuple(slice(0, -1) if ax == k else slice(None) for ax in range(n))
            hi = tuple(slice(1, None) if ax == k else slice(None) for ax in range(n))
            gj_face = 0.5 * (gj[lo] + gj[hi])
            ss = ss + gj_face * gj_face
        fluxes.append(coefficient(ss) * gk)
    return fluxes


def solve_regularized(grid, u0, profile, collect_diagnostics=True):
    """Explicit dual-cell finite-volume solve of u_t = div A(Du).

    Wall fluxes are identically zero (homogeneous Neumann); the update
    telescopes, so the weighted mass is conserved to roundoff.  Each stored
    step advances in ``grid.substeps`` stable substeps.  ``profile`` provides
    the isotropic coefficient ``f``; any object with an ``f`` attribute
    works, which is how the unmodified flux is driven for subcritical data.

    Returns (ScalarField, diagnostics) where diagnostics is a list of
    per-stored-step dicts (empty when collection is off); flux_sup and
    rate_sup report the last substep.
    """
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != grid.shape:
        raise ValueError("u0 does not match the grid")
    spacings = grid.spacings
    weights = grid.cell_weights()
    dt_sub = grid.dt_sub
    n = grid.n

    out = np.empty((grid.nt + 1,) + grid.shape)
    out[0] = u0
    u = u0.copy()
    W = grid.weight_array()
    mass0 = float(np.sum(u * W))
    diagnostics = []

    for step in range(grid.nt):
        for _ in range(grid.substeps):
            rate = np.zeros_like(u)
            fluxes = _step_fluxes(u, spacings, profile.f)
            for k in range(n):
                F = fluxes[k]
                pad = [(0, 0)] * n
                pad[k] = (1, 1)
                Fp = np.pad(F, pad)  # zero wall fluxes
                shape = [1] * n
                shape[k] = grid.shape[k]
                rate += np.diff(Fp, axis=k) / weights[k].reshape(shape)
            u = u + dt_sub * rate
        out[step + 1] = u
        if collect_diagnostics:
            diagnostics.append({
                "step": step + 1,
                "t": (step + 1) * grid.dt + grid.box.time[0],
                "mass": float(np.sum(u * W)),
                "mass_drift": float(np.sum(u * W)) - mass0,
                "flux_sup": max(float(np.max(np.abs(F))) for F in fluxes),
                "rate_sup": float(np.max(np.abs(rate))),
            })
    return ScalarField(grid, out), diagnostics


def solve_semi_implicit(grid, u0, profile, collect_diagnostics=True):
    """Semi-implicit 1D solve of u_t = div A(Du), one tridiagonal per step.

    Face coefficients a = f(|du|^2) are lagged (evaluated at the current
    level) and the diffusion applied implicitly, so the step is a symmetric
    positive-definite solve with no time-step restriction: the tool for fine
    grids where the explicit bound is unaffordable.  Wall fluxes vanish and
    the weighted mass telescopes exactly as in the explicit scheme.  Spatial
    dimension must be 1.
    """
    if grid.n != 1:
        raise ValueError("semi-implicit stepper is one-dimensional only")
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != grid.shape:
        raise ValueError("u0 does not match the grid")
    h = grid.spacings[0]
    w = grid.cell_weights()[0]
    dt = grid.dt
    m = grid.shape[0]

    out = np.empty((grid.nt + 1,) + grid.shape)
    out[0] = u0
    u = u0.copy()
    W = grid.weight_array()
    mass0 = float(np.sum(u * W))
    diagnostics = []

    ab = np.zeros((2, m))
    for step in range(grid.nt):
        g = np.diff(u) / h
        a = profile.f(g * g)  # m-1 face coefficients, lagged
        aL = np.concatenate(([0.0], a))   # left face per node
        aR = np.concatenate((a, [0.0]))   # right face per node
        ab[1] = w / dt + (aL + aR) / h
        ab[0, 1:] = -a / h
        u_new = solveh_banded(ab, (w / dt) * u, lower=False)
        rate = (u_new - u) / dt
        u = u_new
        out[step + 1] = u
        if collect_diagnostics:
            F = a * np.diff(u) / h
            diagnostics.append({
                "step": step + 1,
                "t": (step + 1) * dt + grid.box.time[0],
                "mass": float(np.sum(u * W)),
                "mass_drift": float(np.sum(u * W)) - mass0,
                "flux_sup": float(np.max(np.abs(F))),
                "rate_sup": float(np.max(np.abs(rate))),
            })
    return ScalarField(grid, out), diagnostics


# -- cosine-spectral Neumann Poisson ------------------------------------------


def solve_neumann_poisson(u0, lengths):
    """Solve lap h = u0 with zero Neumann data on the box, mean-zero h.

    Cosine-spectral (DCT-I) solve with continuum symbols -(pi k / L)^2:
    exact on cosine eigenfunctions.  The k = 0 mode of u0 is discarded
    (its trapezoid-consistent mean) and reported.  Returns (h, info) where
    info carries the spectral residual of the solved operator and the
    3-point finite-difference residual as a grid-consistency diagnostic.
    """
    u0 = np.asarray(u0, dtype=float)
    n = u0.ndim
    lengths = [float(L) for L in np.atleast_1d(lengths)]
    if len(lengths) != n:
        raise ValueError("one length per axis required")
    F = dctn(u0, type=1)
    lam = np.zeros(u0.shape)
    for ax, L in enumerate(lengths):
        k = np.arange(u0.shape[ax], dtype=float)
        shape = [1] * n
        shape[ax] = u0.shape[ax]
        lam = lam - (np.pi * k / L).reshape(shape) ** 2
    zero = (0,) * n
    mean_mode = F[zero] / np.prod([2.0 * (m - 1) for m in u0.shape])
    lam_safe = lam.copy()
    lam_safe[zero] = 1.0
    H = F / lam_safe
    H[zero] = 0.0
    h = idctn(H, type=1)

    # residual in the solved operator (roundoff scale)
    back = dctn(h, type=1) * lam
    u0_proj = F.copy()
    u0_proj[zero] = 0.0
    scale = max(float(np.max(np.abs(u0))), 1e-300)
    spectral_residual = float(np.max(np.abs(idctn(back - u0_proj, type=1)))) / scale

    # 3-point reflected-ghost Laplacian as a consistency diagnostic
    fd = np.zeros_like(h)
    for ax, L in enumerate(lengths):
        m = u0.shape[ax]
        hx = L / (m - 1)
        padded = np.pad(h, [(1, 1) if a == ax else (0, 0) for a in range(n)],
                        mode="reflect")
        sl = [slice(None)] * n
        lo = list(sl); lo[ax] = slice(0, -2)
        hi = list(sl); hi[ax] = slice(2, None)
        mid = list(sl); mid[ax] = slice(1, -1)
        fd += (padded[tuple(lo)] - 2.0 * padded[tuple(mid)] + padded[tuple(hi)]) / hx**2
    fd_residual = float(np.max(np.abs(fd - (u0 - mean_mode)))) / scale

    info = {
        "spectral_residual": spectral_residual,
        "fd_residual": fd_residual,
        "mean_mode_removed": float(mean_mode),
    }
    return h, info


def spectral_gradient(values, lengths):
    """Exact gradient of the cosine-series interpolant of node data.

    Differentiates each axis in DCT-I space (cosine modes -> sine modes), so
    wall-normal components vanish identically and one-sided divergence
    stencils applied to the result stay consistent at the walls.
    """
    values = np.asarray(values, dtype=float)
    n = values.ndim
    lengths = [float(L) for L in np.atleast_1d(lengths)]
    comps = []
    for ax, L in enumerate(lengths):
        m = values.shape[ax]
        X = dct(values, type=1, axis=ax)
        k = np.arange(1, m - 1, dtype=float)
        shape = [1] * n
        shape[ax] = m - 2
        sl = [slice(None)] * n
        sl[ax] = slice(1, m - 1)
        b = -(np.pi * k / L).reshape(shape) * X[tuple(sl)] / (m - 1)
        interior = dst(b, type=1, axis=ax) / 2.0
        comp = np.zeros_like(values)
        comp[tuple(sl)] = interior
        comps.append(comp)
    return np.stack(comps, axis=-1)


# -- boundary datum ------------------------------------------------------------


@dataclass
class BoundaryDatum:
    """Admissible starting pair (u, v) plus its derived channels and reports."""

    grid: GridSpec
    profile: object
    u: ScalarField
    v: VectorField
    v0: np.ndarray
    du: np.ndarray
    ut: np.ndarray
    vt: np.ndarray
    mu: float
    classification: dict
    poisson_info: dict
    diagnostics: list = field(default_factory=list)


def build_boundary_datum(grid, profile, datum="cosine", params=None,
                         tol_k=1e-3, collect_diagnostics=True,
                         method="explicit"):
    """Solve the regularized flow and lift it to an admissible pair.

    u solves u_t = div A(Du) from the catalog datum; v integrates the flux
    history on top of the gradient lift of the initial potential, so that
    the stored v_t channel is A(Du) itself (the analytic derivative of the
    quadrature history; the defect of differencing v instead is recorded)
    and div v = u up to grid tolerance.
    ``method`` picks the stepper: "explicit" (any dimension, substepped) or
    "semi_implicit" (1D, unconditionally stable).  The classification report
    counts interior nodes whose reduced state (Du, v_t) lands in the
    subcritical band K (within ``tol_k``), in the supercritical body S, or
    in neither.
    """
    from .hull import s_delta_expression  # local import avoids a cycle

    try:
        solver = {"explicit": solve_regularized,
                  "semi_implicit": solve_semi_implicit}[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}") from None
    params = dict(params or {})
    nodes = grid.nodes
    u0 = initial_datum(datum, nodes, **params) if isinstance(datum, str) \
        else np.asarray(datum, dtype=float)
    W = grid.weight_array()
    shift = float(np.sum(u0 * W) / np.sum(W))
    u0 = u0 - shift

    u_field, diagnostics = solver(grid, u0, profile, collect_diagnostics)

    h, poisson_info = solve_neumann_poisson(u0, grid.box.side_lengths)
    v0 = spectral_gradient(h, grid.box.side_lengths)
    poisson_info["u0_mean_shift"] = shift
    wall_sup = 0.0
    for ax in range(grid.n):
        sl0 = [slice(None)] * grid.n
        sl1 = [slice(None)] * grid.n
        sl0[ax], sl1[ax] = 0, -1
        wall_sup = max(wall_sup,
                       float(np.max(np.abs(v0[tuple(sl0)][..., ax]))),
                       float(np.max(np.abs(v0[tuple(sl1)][..., ax]))))
    poisson_info["wall_normal_sup"] = wall_sup

    du = _node_gradient(u_field.values, nodes, 1)
    flux_series = profile.A(du)
    dt = grid.dt
    v_values = np.empty_like(flux_series)
    v_values[0] = v0
    # cumulative trapezoid of the flux history
    increments = 0.5 * dt * (flux_series[1:] + flux_series[:-1])
    v_values[1:] = v0 + np.cumsum(increments, axis=0)

    v_field = VectorField(grid, v_values)
    ut = u_field.time_derivative()
    # v is the quadrature of the flux history, so the flux itself is its
    # analytic time derivative; differencing v instead would pollute the
    # channel with O(dt)*|u_tt| noise exactly where the flow is stiff
    vt = flux_series
    poisson_info["vt_fd_defect"] = float(
        np.max(np.abs(v_field.time_derivative() - vt)))
    mu = float(np.max(np.abs(ut))) + 1.0

    core = (slice(None),) + tuple(slice(1, -1) for _ in range(grid.n))
    p = du[core]
    beta = vt[core]
    pn = np.linalg.norm(p, axis=-1)
    sig = sigma(p)
    k_band = (pn <= profile.m_minus + tol_k) & (
        np.linalg.norm(beta - sig, axis=-1) <= tol_k
    )
    expr = s_delta_expression(p, beta, profile.delta)
    s_body = expr < 0.0
    ok = k_band | s_body
    bad_expr = expr[~ok]
    classification = {
        "tol_k": tol_k,
        "interior_nodes": int(ok.size),
        "fraction_k": float(np.mean(k_band)),
        "fraction_s": float(np.mean(s_body & ~k_band)),
        "fraction_ok": float(np.mean(ok)),
        "violations": int(np.count_nonzero(~ok)),
        "worst_expression": float(bad_expr.max()) if bad_expr.size else 0.0,
    }

    return BoundaryDatum(
        grid=grid, profile=profile, u=u_field, v=v_field, v0=v0,
        du=du, ut=ut, vt=vt, mu=mu,
        classification=classification, poisson_info=poisson_info,
        diagnostics=diagnostics,
    )


def check_gradient_max_principle(u_field, tol=1e-9):
    """Report sup_t |Du(t)| / |Du(0)| for the gradient max principle."""
    g = u_field.gradient()
    sup_t = np.max(np.linalg.norm(g, axis=-1), axis=tuple(range(1, g.ndim - 1)))
    ratio = float(sup_t.max() / sup_t[0])
    return {
        "initial_sup": float(sup_t[0]),
        "max_sup": float(sup_t.max()),
        "ratio": ratio,
        "ok": bool(ratio <= 1.0 + tol),
    }
