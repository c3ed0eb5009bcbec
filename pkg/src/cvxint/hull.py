"""Constraint-set geometry for the space-time differential inclusion.

A reduced state is a pair (p, beta) with p the spatial gradient of u and
beta the time derivative of the potential v.  Two sets drive the
construction:

* ``K_0``-laminates: the open set L(K0) = {G < 0} with
  G(p, beta) = |beta|^2 + (p . beta)^2 - p . beta, consisting of states that
  decompose along a rank-one segment with both endpoints on the flux graph
  {beta = sigma(p)}.
* the supercritical body S_delta = {delta F + G < 0} with
  F(p, beta) = |(1 - p.beta) p - beta|, an open subset of L(K0) whose
  closure stays uniformly inside the admissible gradient band
  m_minus(delta) < |p| < m_plus(delta), delta < |beta| < 1/2.

``rank_one_decompose`` returns the explicit space-time rank-one frame; the
independent ``brute_force_hull_oracle`` recovers the same geometry by damped
Newton from random starts and never shares code with the closed form.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .flux import m_bounds, rho, sigma

__all__ = [
    "ReducedPoint",
    "SpaceTimeJacobian",
    "RankOneFrame",
    "lamination_expression",
    "s_delta_expression",
    "in_L_K0",
    "in_S_delta",
    "s_delta_distance",
    "rank_one_decompose",
    "flux_residual",
    "segment_in_S_delta",
    "brute_force_hull_oracle",
    "s_delta_bounds_check",
    "membership_rows",
    "write_membership_csv",
]


@dataclass
class ReducedPoint:
    """Reduced state (p, beta) = (Du, v_t), both shape (n,)."""

    p: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.p = np.atleast_1d(np.asarray(self.p, dtype=float))
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if self.p.shape != self.beta.shape:
            raise ValueError("p and beta must share a shape")

    @property
    def n(self):
        return self.p.shape[0]


@dataclass
class SpaceTimeJacobian:
    """Full space-time Jacobian of w = (u, v): block [[p, c], [B, beta]]."""

    p: np.ndarray
    c: float
    B: np.ndarray
    beta: np.ndarray

    def as_matrix(self):
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        top = np.concatenate([p, [float(self.c)]])
        bottom = np.concatenate([B, beta[:, None]], axis=1)
        return np.concatenate([top[None, :], bottom], axis=0)

    def reduced(self):
        return ReducedPoint(self.p, self.beta)

    def div_defect(self, u_value):
        """Trace of the spatial v-block minus u (zero on admissible states)."""
        return float(np.trace(np.atleast_2d(self.B)) - u_value)


def lamination_expression(p, beta):
    """G(p, beta) = |beta|^2 + (p.beta)^2 - p.beta; negative inside L(K0)."""
    p = np.asarray(p, dtype=float)
    beta = np.asarray(beta, dtype=float)
    d = np.sum(p * beta, axis=-1)
    return np.sum(beta * beta, axis=-1) + d * d - d


def s_delta_expression(p, beta, delta):
    """delta * F + G with F = |(1 - p.beta) p - beta|; negative inside S_delta."""
    p = np.asarray(p, dtype=float)
    beta = np.asarray(beta, dtype=float)
    d = np.sum(p * beta, axis=-1)
    w = (1.0 - d)[..., None] * p - beta
    F = np.sqrt(np.sum(w * w, axis=-1))
    G = np.sum(beta * beta, axis=-1) + d * d - d
    return float(delta) * F + G


def in_L_K0(p, beta):
    """Strict membership in the laminate interior L(K0)."""
    return lamination_expression(p, beta) < 0.0


def in_S_delta(p, beta, delta):
    """Strict membership in the supercritical body S_delta."""
    return s_delta_expression(p, beta, delta) < 0.0


def _expression_gradients(p, beta, delta):
    d = np.sum(p * beta, axis=-1)
    w = (1.0 - d)[..., None] * p - beta
    F = np.sqrt(np.sum(w * w, axis=-1))
    F = np.where(F == 0.0, 1e-300, F)
    pw = np.sum(p * w, axis=-1)
    grad_F_p = ((1.0 - d)[..., None] * w - pw[..., None] * beta) / F[..., None]
    grad_F_b = (-pw[..., None] * p - w) / F[..., None]
    grad_G_p = (2.0 * d - 1.0)[..., None] * beta
    grad_G_b = 2.0 * beta + (2.0 * d - 1.0)[..., None] * p
    return delta * grad_F_p + grad_G_p, delta * grad_F_b + grad_G_b


def s_delta_distance(p, beta, delta):
    """First-order distance estimate to the boundary of S_delta.

    Returns |expression| / |gradient| with the sign of the expression:
    negative values estimate the interior margin, positive values the
    distance back to the set.  Exact only to first order; used for
    tolerance bands, never as a certificate of strict membership.
    """
    p = np.asarray(p, dtype=float)
    beta = np.asarray(beta, dtype=float)
    e = s_delta_expression(p, beta, delta)
    gp, gb = _expression_gradients(p, beta, float(delta))
    norm = np.sqrt(np.sum(gp * gp, axis=-1) + np.sum(gb * gb, axis=-1))
    return e / np.maximum(norm, 1e-300)


@dataclass
class RankOneFrame:
    """Space-time rank-one segment through a laminate state.

    The segment t -> (p + t q, beta + t gamma), t in [t_minus, t_plus],
    has both endpoints on the flux graph; |q| = 1, gamma . q = 0, and the
    lifted direction eta = outer([1, gamma/b], [q, b]) is rank one with a
    trace-free spatial v-block.
    """

    q: np.ndarray
    gamma: np.ndarray
    b: float
    t_minus: float
    t_plus: float

    @property
    def lam(self):
        """Barycentric weight placing the base state on the segment."""
        return -self.t_minus / (self.t_plus - self.t_minus)

    def eta(self):
        left = np.concatenate([[1.0], self.gamma / self.b])
        right = np.concatenate([self.q, [self.b]])
        return np.outer(left, right)

    def endpoints(self, p, beta):
        p = np.asarray(p, dtype=float)
        beta = np.asarray(beta, dtype=float)
        lo = (p + self.t_minus * self.q, beta + self.t_minus * self.gamma)
        hi = (p + self.t_plus * self.q, beta + self.t_plus * self.gamma)
        return lo, hi


def rank_one_decompose(p, beta, b_scale=None):
    """Closed-form rank-one decomposition of a state in L(K0).

    Raises ValueError unless the lamination expression is <= -1e-12 (states
    on or outside the boundary have degenerate segments).  The collinear
    case gamma = 0 falls out of the same formulas.
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    G = float(lamination_expression(p, beta))
    if G > -1e-12:
        raise ValueError(f"state not strictly inside L(K0): expression {G:.3e}")

    d = float(np.dot(p, beta))
    w = (1.0 - d) * p - beta
    F = float(np.linalg.norm(w))
    ell = 1.0 / (1.0 - d)
    k = ((1.0 - d) * float(np.dot(p, p)) - d) / (-G)
    u = -G / F
    x = k * u
    v = x - 1.0 / u
    y = ell * v
    den = x * v - y * u
    if den >= 0:
        raise ValueError("degenerate decomposition: nonnegative discriminant block")
    q = (v * p - y * beta) / den
    gamma = (-u * p + x * beta) / den
    disc = (x + v) ** 2 - 4.0 * den
    root = np.sqrt(disc)
    t_plus = 0.5 * (-(x + v) + root)
    t_minus = 0.5 * (-(x + v) - root)
    if b_scale is None:
        b_scale = 1e-2 / (t_plus - t_minus)
    return RankOneFrame(q=q, gamma=gamma, b=float(b_scale),
                        t_minus=float(t_minus), t_plus=float(t_plus))


def flux_residual(p, beta, frame):
    """Max endpoint defect |sigma(p + t q) - (beta + t gamma)| over t = t_plus, t_minus."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    res = 0.0
    for t in (frame.t_minus, frame.t_plus):
        z = p + t * frame.q
        res = max(res, float(np.linalg.norm(sigma(z) - (beta + t * frame.gamma))))
    return res


def segment_in_S_delta(p, beta, frame, delta, samples=128):
    """Sampled membership of the open segment in S_delta.

    Returns (all_inside, worst_expression) over interior barycentric
    samples; the endpoints themselves sit on the flux graph, outside.
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    t = frame.t_minus + (frame.t_plus - frame.t_minus) * (
        np.arange(1, samples + 1) / (samples + 1.0)
    )
    ps = p[None, :] + t[:, None] * frame.q[None, :]
    bs = beta[None, :] + t[:, None] * frame.gamma[None, :]
    expr = s_delta_expression(ps, bs, delta)
    return bool(np.all(expr < 0.0)), float(expr.max())


# -- independent oracle ----------------------------------------------------


def _sigma_jacobian(z):
    """D sigma at z, batched over leading axes: I/(1+|z|^2) - 2 z z^T/(1+|z|^2)^2."""
    ss = np.sum(z * z, axis=-1)
    den = 1.0 + ss
    n = z.shape[-1]
    eye = np.eye(n)
    return eye / den[..., None, None] - 2.0 * (
        z[..., :, None] * z[..., None, :]
    ) / (den * den)[..., None, None]


def _oracle_residual(Prow, Brow, Q, Gm, tp, tm):
    zp = Prow + tp[:, None] * Q
    zm = Prow + tm[:, None] * Q
    r1 = sigma(zp) - Brow - tp[:, None] * Gm
    r2 = sigma(zm) - Brow - tm[:, None] * Gm
    r3 = 0.5 * (np.sum(Q * Q, axis=-1) - 1.0)
    r4 = np.sum(Q * Gm, axis=-1)
    return np.concatenate([r1, r2, r3[:, None], r4[:, None]], axis=1)


def _oracle_jacobian(Prow, Brow, Q, Gm, tp, tm):
    R, n = Q.shape
    m = 2 * n + 2
    J = np.zeros((R, m, m))
    zp = Prow + tp[:, None] * Q
    zm = Prow + tm[:, None] * Q
    Dsp = _sigma_jacobian(zp)
    Dsm = _sigma_jacobian(zm)
    J[:, 0:n, 0:n] = tp[:, None, None] * Dsp
    J[:, 0:n, n:2 * n] = -tp[:, None, None] * np.eye(n)
    J[:, 0:n, 2 * n] = np.einsum("dij,dj->di", Dsp, Q) - Gm
    J[:, n:2 * n, 0:n] = tm[:, None, None] * Dsm
    J[:, n:2 * n, n:2 * n] = -tm[:, None, None] * np.eye(n)
    J[:, n:2 * n, 2 * n + 1] = np.einsum("dij,dj->di", Dsm, Q) - Gm
    J[:, 2 * n, 0:n] = Q
    J[:, 2 * n + 1, 0:n] = Gm
    J[:, 2 * n + 1, n:2 * n] = Q
    return J


def _oracle_worker(P, B, directions, rng, tol, max_iter):
    """Damped Newton over points x directions; returns per-point results."""
    m, n = P.shape
    D = directions
    R = m * D
    pt = np.repeat(np.arange(m), D)
    Prow = np.repeat(P, D, axis=0)
    Brow = np.repeat(B, D, axis=0)

    def draw(count):
        Qf = rng.normal(size=(count, n))
        Qf /= np.linalg.norm(Qf, axis=1, keepdims=True)
        Wf = rng.normal(size=(count, n))
        Wf -= np.sum(Wf * Qf, axis=1, keepdims=True) * Qf
        wnf = np.linalg.norm(Wf, axis=1, keepdims=True)
        magf = 10.0 ** rng.uniform(-2, 1, size=(count, 1))
        Gf = np.where(wnf > 1e-12, Wf / np.maximum(wnf, 1e-12) * magf, 0.0)
        tpf = 10.0 ** rng.uniform(-3, 0.7, size=count)
        tmf = -(10.0 ** rng.uniform(-3, 0.7, size=count))
        return Qf, Gf, tpf, tmf

    Q, Gm, tp, tm = draw(R)
    rn = np.max(np.abs(_oracle_residual(Prow, Brow, Q, Gm, tp, tm)), axis=1)

    found = np.zeros(m, dtype=bool)
    n_conv = np.zeros(m, dtype=int)
    best_res = np.full(m, np.inf)
    iters = np.zeros(m, dtype=int)
    frame_q = np.full((m, n), np.nan)
    frame_g = np.full((m, n), np.nan)
    frame_tp = np.full(m, np.nan)
    frame_tm = np.full(m, np.nan)
    floor = np.full(m, np.inf)
    stall = np.zeros(m, dtype=int)
    active = np.ones(m, dtype=bool)

    for _ in range(max_iter):
        row_on = active[pt]
        idx = np.nonzero(row_on)[0]
        if idx.size == 0:
            break
        iters[active] += 1
        q, g, a, c = Q[idx], Gm[idx], tp[idx], tm[idx]
        pr, br = Prow[idx], Brow[idx]
        r = _oracle_residual(pr, br, q, g, a, c)
        J = _oracle_jacobian(pr, br, q, g, a, c)
        try:
            step = np.linalg.solve(J, -r[..., None])[..., 0]
        except np.linalg.LinAlgError:
            J = J + 1e-9 * np.eye(J.shape[-1])
            step = np.linalg.solve(J, -r[..., None])[..., 0]
        alpha = np.ones(idx.size)
        rcur = rn[idx]
        qn, gn, an, cn = q, g, a, c
        for _ in range(7):
            qn = q + alpha[:, None] * step[:, 0:n]
            gn = g + alpha[:, None] * step[:, n:2 * n]
            an = a + alpha * step[:, 2 * n]
            cn = c + alpha * step[:, 2 * n + 1]
            with np.errstate(invalid="ignore", over="ignore"):
                rn_new = np.max(np.abs(_oracle_residual(pr, br, qn, gn, an, cn)), axis=1)
            bad = ~(rn_new <= (1.0 - 1e-4) * rcur)
            if not np.any(bad):
                break
            alpha[bad] *= 0.5
        # diverged or non-finite rows restart from fresh draws
        finite = (
            np.isfinite(qn).all(axis=1) & np.isfinite(gn).all(axis=1)
            & np.isfinite(an) & np.isfinite(cn)
        )
        wild = (~finite) | (np.abs(an) > 1e4) | (np.abs(cn) > 1e4) \
            | (np.linalg.norm(qn, axis=1) > 1e3) | (np.linalg.norm(gn, axis=1) > 1e4)
        if np.any(wild):
            qf, gf, tpf, tmf = draw(int(np.count_nonzero(wild)))
            qn[wild], gn[wild], an[wild], cn[wild] = qf, gf, tpf, tmf
        rn_new = np.max(np.abs(_oracle_residual(pr, br, qn, gn, an, cn)), axis=1)
        Q[idx], Gm[idx], tp[idx], tm[idx] = qn, gn, an, cn
        rn[idx] = rn_new

        hit_rows = (rn_new < tol) & (an > 1e-6) & (cn < -1e-6)
        if np.any(hit_rows):
            for i in np.unique(pt[idx[hit_rows]]):
                rows_i = idx[(pt[idx] == i) & hit_rows]
                j = rows_i[np.argmin(rn[rows_i])]
                found[i] = True
                n_conv[i] = rows_i.size
                best_res[i] = float(rn[j])
                frame_q[i] = Q[j]
                frame_g[i] = Gm[j]
                frame_tp[i] = tp[j]
                frame_tm[i] = tm[j]
                active[i] = False

        # stagnation of the per-point residual floor ends hopeless searches
        new_floor = np.full(m, np.inf)
        np.minimum.at(new_floor, pt[idx], rn[idx])
        live = active & np.isfinite(new_floor)
        improved = new_floor < floor * (1.0 - 1e-2)
        stall[live & improved] = 0
        stall[live & ~improved] += 1
        floor = np.minimum(floor, new_floor)
        give_up = live & (stall >= 10) & (floor > 100.0 * tol)
        if np.any(give_up):
            best_res[give_up] = floor[give_up]
            active[give_up] = False

    still = active
    if np.any(still):
        rem_floor = np.full(m, np.inf)
        np.minimum.at(rem_floor, pt, rn)
        best_res[still] = rem_floor[still]
    return {
        "found": found,
        "n_converged": n_conv,
        "best_residual": best_res,
        "iterations": iters,
        "frame_q": frame_q,
        "frame_g": frame_g,
        "frame_tp": frame_tp,
        "frame_tm": frame_tm,
    }


def brute_force_hull_oracle(p, beta, directions=200, seed=0, tol=1e-8,
                            max_iter=50):
    """Search for a two-sided flux-graph connection by damped Newton.

    Solves sigma(p + t q) = beta + t gamma at t = t_plus > 0 and
    t = t_minus < 0 together with |q| = 1 and gamma . q = 0, from
    ``directions`` random starts (t magnitudes log-uniform in [1e-3, 5],
    |gamma| log-uniform in [1e-2, 10]).  Fully independent of the
    closed-form pipeline.

    Returns a dict with ``found``, the count of converged starts, the best
    residual, and the recovered frame (or None).
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    rng = np.random.default_rng(seed)
    out = _oracle_worker(p[None, :], beta[None, :], directions, rng, tol, max_iter)
    frame = None
    if out["found"][0]:
        frame = RankOneFrame(
            q=out["frame_q"][0], gamma=out["frame_g"][0],
            b=1e-2 / (out["frame_tp"][0] - out["frame_tm"][0]),
            t_minus=float(out["frame_tm"][0]), t_plus=float(out["frame_tp"][0]),
        )
    return {
        "found": bool(out["found"][0]),
        "n_converged": int(out["n_converged"][0]),
        "best_residual": float(out["best_residual"][0]),
        "iterations": int(out["iterations"][0]),
        "frame": frame,
    }


def hull_oracle_batch(P, B, directions=200, seed=0, tol=1e-8, max_iter=50,
                      chunk=250):
    """Vectorized oracle over many points; same algorithm as the scalar form.

    P and B have shape (m, n).  Returns the worker's dict of arrays, with
    points processed in chunks to bound memory.
    """
    P = np.asarray(P, dtype=float)
    B = np.asarray(B, dtype=float)
    rng = np.random.default_rng(seed)
    outs = []
    for start in range(0, P.shape[0], chunk):
        outs.append(_oracle_worker(P[start:start + chunk], B[start:start + chunk],
                                   directions, rng, tol, max_iter))
    return {key: np.concatenate([o[key] for o in outs]) for key in outs[0]}


# -- envelope sampling -------------------------------------------------------


def s_delta_bounds_check(delta, samples=1_000_000, seed=0, n=2,
                         collinear_fraction=0.05):
    """Rejection-sample S_delta and compare observed extremes to the bounds.

    Uniform proposals fill the bulk; a small collinear family (p parallel
    to beta, |beta| just above delta) supplies the near-extremal |p| that
    uniform sampling cannot reach at practical counts.  Returns a report
    dict with observed sup/inf of |p| and |beta| and the closed-form bounds
    m_minus < |p| < m_plus, delta < |beta| < 1/2.
    """
    delta = float(delta)
    m_minus, m_plus = m_bounds(delta)
    rng = np.random.default_rng(seed)

    target_col = int(collinear_fraction * samples)
    target_uni = samples - target_col

    kept_p = []
    kept_b = []
    got = 0
    while got < target_uni:
        chunk = min(4_000_000, max(200_000, 8 * (target_uni - got)))
        p = rng.uniform(-(m_plus + 0.5), m_plus + 0.5, size=(chunk, n))
        b = rng.uniform(-0.55, 0.55, size=(chunk, n))
        mask = in_S_delta(p, b, delta)
        p, b = p[mask], b[mask]
        take = min(p.shape[0], target_uni - got)
        kept_p.append(p[:take])
        kept_b.append(b[:take])
        got += take

    got = 0
    while got < target_col:
        chunk = max(50_000, 4 * (target_col - got))
        r = delta * (1.0 + 10.0 ** rng.uniform(-4, -0.5, size=chunk))
        s = rng.uniform(m_minus, m_plus, size=chunk)
        direction = rng.normal(size=(chunk, n))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        p = s[:, None] * direction
        b = r[:, None] * direction
        mask = in_S_delta(p, b, delta)
        p, b = p[mask], b[mask]
        take = min(p.shape[0], target_col - got)
        kept_p.append(p[:take])
        kept_b.append(b[:take])
        got += take

    P = np.concatenate(kept_p, axis=0)
    B = np.concatenate(kept_b, axis=0)
    pn = np.linalg.norm(P, axis=1)
    bn = np.linalg.norm(B, axis=1)
    report = {
        "delta": delta,
        "n": n,
        "samples": int(P.shape[0]),
        "sup_p": float(pn.max()),
        "inf_p": float(pn.min()),
        "sup_beta": float(bn.max()),
        "inf_beta": float(bn.min()),
        "m_minus": float(m_minus),
        "m_plus": float(m_plus),
    }
    report["bounds_ok"] = bool(
        m_minus < report["inf_p"]
        and report["sup_p"] < m_plus
        and delta < report["inf_beta"]
        and report["sup_beta"] < 0.5
    )
    return report


# -- CSV export --------------------------------------------------------------


def membership_rows(points, delta):
    """Rows of membership and decomposition results for CSV export.

    ``points`` is an iterable of (p, beta) pairs.  Decomposition columns are
    empty strings outside L(K0).
    """
    rows = []
    for p, beta in points:
        p = np.atleast_1d(np.asarray(p, dtype=float))
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        G = float(lamination_expression(p, beta))
        e = float(s_delta_expression(p, beta, delta))
        row = {
            "delta": delta,
            "expression_L": G,
            "expression_S": e,
            "in_L_K0": int(G < 0.0),
            "in_S_delta": int(e < 0.0),
        }
        for i, v in enumerate(p):
            row[f"p_{i}"] = float(v)
        for i, v in enumerate(beta):
            row[f"beta_{i}"] = float(v)
        if G < -1e-12:
            frame = rank_one_decompose(p, beta)
            row["t_minus"] = frame.t_minus
            row["t_plus"] = frame.t_plus
            row["flux_residual"] = flux_residual(p, beta, frame)
            for i, v in enumerate(frame.q):
                row[f"q_{i}"] = float(v)
            for i, v in enumerate(frame.gamma):
                row[f"gamma_{i}"] = float(v)
        else:
            for key in ("t_minus", "t_plus", "flux_residual"):
                row[key] = ""
            for i in range(p.shape[0]):
                row[f"q_{i}"] = ""
                row[f"gamma_{i}"] = ""
        rows.append(row)
    return rows


def write_membership_csv(path, points, delta):
    rows = membership_rows(points, delta)
    if not rows:
        raise ValueError("no points to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return len(rows)
