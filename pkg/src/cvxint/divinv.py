"""A structure-preserving right inverse of the divergence on boxes.

Given u on a box, ``right_inverse_static`` produces a field v with
div v = u (to quadrature accuracy on the grid) such that v vanishes on the
box walls whenever u has zero mean.  The construction is the classical
axis recursion: integrate out the last axis, solve on the lower box, and
re-inflate with a normalized bump profile; everything is local to the box,
linear in u, and commutes with time differentiation slice by slice.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid

__all__ = [
    "BoxDomain",
    "BumpProfile",
    "bump_values",
    "right_inverse_static",
    "right_inverse_spacetime",
    "discrete_divergence",
    "measure_inverse_constant",
]


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box: spatial intervals plus an optional time interval."""

    intervals: tuple
    time: tuple = None

    def __post_init__(self):
        ivs = tuple((float(a), float(b)) for a, b in self.intervals)
        object.__setattr__(self, "intervals", ivs)
        for a, b in ivs:
            if not b > a:
                raise ValueError(f"degenerate interval ({a}, {b})")
        if self.time is not None:
            t0, t1 = (float(self.time[0]), float(self.time[1]))
            if not t1 > t0:
                raise ValueError("degenerate time interval")
            object.__setattr__(self, "time", (t0, t1))

    @property
    def n(self):
        return len(self.intervals)

    @property
    def side_lengths(self):
        return tuple(b - a for a, b in self.intervals)

    @property
    def sum_sides(self):
        return float(sum(self.side_lengths))

    @property
    def volume(self):
        return float(np.prod(self.side_lengths))

    @property
    def time_length(self):
        return None if self.time is None else self.time[1] - self.time[0]

    def nodes(self, counts):
        """Per-axis node arrays, endpoints included."""
        counts = [counts] * self.n if np.isscalar(counts) else list(counts)
        if len(counts) != self.n:
            raise ValueError("one node count per spatial axis required")
        return [np.linspace(a, b, int(m)) for (a, b), m in zip(self.intervals, counts)]


def bump_values(x, a, b):
    """Quartic bump (x-a)^4 (b-x)^4 on [a, b], trapezoid-normalized to mass 1.

    The continuum normalization is 630/(b-a)^9; renormalizing against the
    trapezoid rule on the given nodes makes the discrete mass exactly one,
    which the recursion needs for exact wall vanishing.
    """
    x = np.asarray(x, dtype=float)
    v = np.where((x > a) & (x < b), (x - a) ** 4 * (b - x) ** 4, 0.0)
    mass = np.trapezoid(v, x)
    if mass <= 0:
        raise ValueError("bump mass vanished; too few nodes")
    return v / mass


@dataclass
class BumpProfile:
    """Sampled normalized bump on an interval, with its continuum constants."""

    a: float
    b: float
    x: np.ndarray
    values: np.ndarray = field(init=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.values = bump_values(self.x, self.a, self.b)

    @property
    def c0_continuum(self):
        return 630.0 / (self.b - self.a) ** 9

    @property
    def sup_bound(self):
        """Sup of the continuum bump: 630/256 divided by the side length."""
        return 630.0 / 256.0 / (self.b - self.a)

    @property
    def mass(self):
        return float(np.trapezoid(self.values, self.x))


def _recurse(u, nodes):
    n = len(nodes)
    x = nodes[-1]
    if n == 1:
        return cumulative_trapezoid(u, x, axis=-1, initial=0.0)[..., None]
    u_tilde = np.trapezoid(u, x, axis=-1)
    Z = _recurse(u_tilde, nodes[:-1])
    rho = bump_values(x, x[0], x[-1])
    Prho = cumulative_trapezoid(rho, x, initial=0.0)
    V = cumulative_trapezoid(u, x, axis=-1, initial=0.0)
    v_last = V - u_tilde[..., None] * Prho
    v_front = Z[..., None, :] * rho[:, None]
    return np.concatenate([v_front, v_last[..., None]], axis=-1)


def right_inverse_static(u, nodes, warn_mean=True):
    """Right inverse of the divergence on the box spanned by ``nodes``.

    ``u`` has the spatial axes last (leading axes are treated as a batch);
    the result appends a component axis of length len(nodes).  Wall values
    vanish exactly on all axes except the first, whose outflow picks up the
    total mean of u; a nonzero mean triggers a warning.
    """
    u = np.asarray(u, dtype=float)
    n = len(nodes)
    if u.ndim < n:
        raise ValueError("u has fewer axes than the box")
    for ax, x in enumerate(nodes):
        if u.shape[u.ndim - n + ax] != len(x):
            raise ValueError("node counts do not match u")
    if warn_mean:
        total = u
        for x in reversed(nodes):
            total = np.trapezoid(total, x, axis=-1)
        scale = np.max(np.abs(u)) * np.prod([x[-1] - x[0] for x in nodes])
        if np.any(np.abs(total) > 1e-10 * max(scale, 1e-300)):
            warnings.warn("right_inverse_static: u has nonzero mean; "
                          "the field will not vanish on the outflow wall")
    return _recurse(u, nodes)


def right_inverse_spacetime(u, nodes, warn_mean=True):
    """Slice-wise right inverse for u of shape (nt, *spatial).

    Linearity makes time differentiation commute with the inverse: the
    discrete time derivative of the result equals the inverse of the
    discrete time derivative of u, stencil for stencil.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim != len(nodes) + 1:
        raise ValueError("expected one leading time axis plus spatial axes")
    if warn_mean:
        total = u
        for x in reversed(nodes):
            total = np.trapezoid(total, x, axis=-1)
        scale = np.max(np.abs(u)) * np.prod([x[-1] - x[0] for x in nodes])
        if np.any(np.abs(total) > 1e-10 * max(scale, 1e-300)):
            warnings.warn("right_inverse_spacetime: a slice of u has nonzero "
                          "mean; the field will not vanish on the outflow wall")
    return _recurse(u, nodes)


def discrete_divergence(v, nodes, include_boundary=True):
    """Divergence of v (component axis last) on the node grid.

    Interior stencils are central (second order); with
    ``include_boundary=True`` the walls use one-sided first-order
    differences, otherwise the interior-only array is returned.
    """
    v = np.asarray(v, dtype=float)
    n = len(nodes)
    if v.shape[-1] != n:
        raise ValueError("component count does not match the box dimension")
    div = np.zeros(v.shape[:-1])
    for k, x in enumerate(nodes):
        axis = v.ndim - 1 - n + k
        div += np.gradient(v[..., k], x, axis=axis, edge_order=1)
    if include_boundary:
        return div
    core = tuple([slice(None)] * (v.ndim - 1 - n) + [slice(1, -1)] * n)
    return div[core]


def measure_inverse_constant(box, trials=20, seed=0, resolution=64,
                             modes=6):
    """Empirical operator constant sup |R u| / (sum of sides) over trig data.

    Random normalized trigonometric polynomials probe the box; the report
    carries the observed constant and the probe parameters so runs are
    reproducible.
    """
    if not isinstance(box, BoxDomain):
        box = BoxDomain(tuple(box))
    rng = np.random.default_rng(seed)
    nodes = box.nodes(resolution)
    n = box.n
    best = 0.0
    for _ in range(trials):
        u = np.zeros([resolution] * n)
        for _ in range(modes):
            amp = rng.normal()
            ks = rng.integers(1, 5, size=n)
            phases = rng.uniform(0, 2 * np.pi, size=n)
            term = amp
            for ax, x in enumerate(nodes):
                xs = (x - x[0]) / (x[-1] - x[0])
                factor = np.cos(np.pi * ks[ax] * xs + phases[ax])
                shape = [1] * n
                shape[ax] = resolution
                term = term * factor.reshape(shape)
            u = u + term
        u /= max(np.max(np.abs(u)), 1e-300)
        v = right_inverse_static(u, nodes, warn_mean=False)
        best = max(best, float(np.max(np.abs(v))) / box.sum_sides)
    return {
        "constant": best,
        "trials": trials,
        "resolution": resolution,
        "modes": modes,
        "seed": seed,
        "sum_sides": box.sum_sides,
    }
