"""Exact-on-the-grid sum-product inference for small instances.

The factor graph has one likelihood factor per echo element (l, n, k, m),
each connected to the four target-state variables and to the RCS variable of
its BS. All messages are stored as normalised log tables on a fixed grid;
integrals are plain sums over the grid, so the grid is part of the model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateMessageError
from .forward import TargetState, unit_model

XI_AXES = ("x0", "y0", "vx", "vy")


# ---------------------------------------------------------------------------
# containers


@dataclass
class ParameterGrid:
    """Per-axis samples for xi and a Cartesian real/imag grid per alpha_l."""

    xi_axes: list
    alpha_re: list
    alpha_im: list

    def __post_init__(self):
        self.xi_axes = [np.asarray(a, dtype=float) for a in self.xi_axes]
        self.alpha_re = [np.asarray(a, dtype=float) for a in self.alpha_re]
        self.alpha_im = [np.asarray(a, dtype=float) for a in self.alpha_im]
        if len(self.xi_axes) != 4:
            raise ValueError("need exactly four xi axes")
        if len(self.alpha_re) != len(self.alpha_im):
            raise ValueError("alpha real/imag grid lists differ in length")
        for a in [*self.xi_axes, *self.alpha_re, *self.alpha_im]:
            if a.ndim != 1 or a.size < 2:
                raise ValueError("every grid axis needs at least 2 samples")
            if np.any(np.diff(a) <= 0):
                raise ValueError("grid samples must be strictly increasing")

    @property
    def n_bs(self) -> int:
        return len(self.alpha_re)

    @property
    def xi_shape(self):
        return tuple(a.size for a in self.xi_axes)

    def alpha_points(self, l: int) -> np.ndarray:
        """Flattened complex alpha grid of BS l (real index major)."""
        re, im = np.meshgrid(self.alpha_re[l], self.alpha_im[l], indexing="ij")
        return (re + 1j * im).ravel()

    def xi_points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.xi_axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def bounds(self):
        return [(float(a[0]), float(a[-1])) for a in self.xi_axes]

    def covers(self, point) -> bool:
        return all(lo <= p <= hi for p, (lo, hi) in zip(point, self.bounds()))

    def to_json(self) -> dict:
        return {
            "xi_axes": [a.tolist() for a in self.xi_axes],
            "alpha_re": [a.tolist() for a in self.alpha_re],
            "alpha_im": [a.tolist() for a in self.alpha_im],
        }


def normalize_log(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if not np.any(np.isfinite(v)):
        raise DegenerateMessageError("message vanished on the whole grid")
    return v - logsumexp(v)


@dataclass
class TabulatedMessage:
    axis: str
    log_values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.log_values = np.asarray(self.log_values, dtype=float)
        if self.normalized:
            return
        self.log_values = normalize_log(self.log_values)
        if not np.all(np.isfinite(self.log_values)):
            raise DegenerateMessageError(f"non-finite entries in message on {self.axis}")
        self.normalized = True

    def probs(self) -> np.ndarray:
        return np.exp(self.log_values)


@dataclass
class BeliefTable:
    axis: str
    log_values: np.ndarray
    points: np.ndarray
    map_index: int = 0
    mean: complex = 0.0
    variance: float = 0.0

    @classmethod
    def from_log(cls, axis, log_values, points) -> "BeliefTable":
        lv = normalize_log(log_values)
        p = np.exp(lv)
        pts = np.asarray(points)
        mean = np.sum(p * pts)
        var = float(np.sum(p * np.abs(pts - mean) ** 2))
        if not np.iscomplexobj(pts):
            mean = float(mean)
        # argmax returns the lowest index among ties
        return cls(axis, lv, pts, int(np.argmax(lv)), mean, var)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_values)

    @property
    def map_value(self):
        return self.points[self.map_index]

    def to_json(self) -> dict:
        mean = self.mean
        return {
            "axis": self.axis,
            "probs": self.probs().tolist(),
            "map_index": self.map_index,
            "mean": [float(np.real(mean)), float(np.imag(mean))] if np.iscomplexobj(self.points) else float(mean),
            "variance": self.variance,
        }


# ---------------------------------------------------------------------------
# the four message operations


def _inbound_sum(inbound_xi, inbound_alpha, skip_xi=None, skip_alpha=False):
    """Broadcast sum of the inbound log messages over the (xi1..xi4, alpha) table."""
    total = 0.0
    for q, msg in enumerate(inbound_xi):
        if q == skip_xi:
            continue
        shape = [1] * 5
        shape[q] = -1
        total = total + np.asarray(msg, dtype=float).reshape(shape)
    if not skip_alpha:
        total = total + np.asarray(inbound_alpha, dtype=float).reshape(1, 1, 1, 1, -1)
    return total


def _as_log(m):
    return m.log_values if isinstance(m, TabulatedMessage) else np.asarray(m, dtype=float)


def factor_to_state_message(log_potential, q: int, inbound_xi, inbound_alpha) -> TabulatedMessage:
    """Message from one likelihood factor to xi_q.

    ``log_potential`` is the factor log table over (xi1, xi2, xi3, xi4, alpha),
    ``inbound_xi`` the four variable-to-factor messages (entry q is ignored) and
    ``inbound_alpha`` the RCS variable-to-factor message.
    """
    if inbound_xi is None or inbound_alpha is None or any(m is None for i, m in enumerate(inbound_xi) if i != q):
        raise ValueError("missing inbound message")
    lx = [None if (i == q) else _as_log(m) for i, m in enumerate(inbound_xi)]
    t = log_potential + _inbound_sum(lx, _as_log(inbound_alpha), skip_xi=q)
    axes = tuple(i for i in range(5) if i != q)
    return TabulatedMessage(XI_AXES[q], logsumexp(t, axis=axes))


def factor_to_rcs_message(log_potential, inbound_xi, bs: int = 0) -> TabulatedMessage:
    """Message from one likelihood factor to its alpha_l."""
    if inbound_xi is None or any(m is None for m in inbound_xi):
        raise ValueError("missing inbound message")
    t = log_potential + _inbound_sum([_as_log(m) for m in inbound_xi], None, skip_alpha=True)
    return TabulatedMessage(f"alpha{bs}", logsumexp(t, axis=(0, 1, 2, 3)))


def _variable_to_factor(axis, prior, messages: dict, dest):
    if dest not in messages:
        raise KeyError(f"factor {dest} is not connected to {axis}")
    total = np.asarray(_as_log(prior), dtype=float).copy()
    for fid, m in messages.items():
        if fid != dest:
            total = total + _as_log(m)
    return TabulatedMessage(axis, total)


def state_to_factor_message(q: int, factor_id, prior, messages: dict) -> TabulatedMessage:
    """log prior of xi_q plus every inbound factor message except the destination's.

    ``messages`` maps factor ids of F(q) to their current factor-to-xi_q messages.
    """
    return _variable_to_factor(XI_AXES[q], prior, messages, factor_id)


def rcs_to_factor_message(l: int, factor_id, prior, messages: dict) -> TabulatedMessage:
    return _variable_to_factor(f"alpha{l}", prior, messages, factor_id)


# ---------------------------------------------------------------------------
# problem assembly


@dataclass
class SpaProblem:
    """Grid, priors and per-factor log potentials of one instance."""

    grid: ParameterGrid
    xi_prior: list              # four log tables
    alpha_prior: list           # one log table per BS
    potentials: list            # per BS: array [E, n1, n2, n3, n4, A]
    factor_ids: list = field(default_factory=list)   # per BS: list of (l, n, k, m)

    def factors(self):
        for l, ids in enumerate(self.factor_ids):
            for e, fid in enumerate(ids):
                yield l, e, fid


def build_problem(scene, echoes, grid: ParameterGrid, xi_prior_mean=None, xi_prior_var=None,
                  alpha_prior_var=None) -> SpaProblem:
    """Tabulate every factor log potential -|y - alpha zt(xi)|^2 / sigma^2 on the grid."""
    if len(echoes) != grid.n_bs:
        raise ValueError("one alpha grid per echo is required")
    pm = scene.prior_means() if xi_prior_mean is None else np.asarray(xi_prior_mean, dtype=float)
    pv = scene.prior_variances() if xi_prior_var is None else np.asarray(xi_prior_var, dtype=float)
    xi_prior = [normalize_log(-0.5 * (a - pm[q]) ** 2 / pv[q]) for q, a in enumerate(grid.xi_axes)]
    pts = grid.xi_points()
    potentials, alpha_prior, ids = [], [], []
    for l, echo in enumerate(echoes):
        var = scene.stations[l].rcs_variance if alpha_prior_var is None else alpha_prior_var[l]
        al = grid.alpha_points(l)
        alpha_prior.append(normalize_log(-np.abs(al) ** 2 / var))
        zt = np.stack([
            unit_model(scene, l, TargetState.from_array(p), echo.symbols, echo.beamformers).ravel()
            for p in pts
        ])                                                        # [G, E]
        y = echo.y.ravel()
        resid = y[:, None, None] - al[None, None, :] * zt.T[:, :, None]   # [E, G, A]
        lp = -np.abs(resid) ** 2 / echo.noise_variance
        potentials.append(lp.reshape(len(y), *grid.xi_shape, len(al)))
        n, k, m = echo.y.shape
        ids.append([(l, a, b, c) for a in range(n) for b in range(k) for c in range(m)])
    return SpaProblem(grid, xi_prior, alpha_prior, potentials, ids)


# ---------------------------------------------------------------------------
# inference


@dataclass
class SpaResult:
    xi_beliefs: list
    alpha_beliefs: list
    trace: list
    converged: bool
    iterations: int

    @property
    def map_xi(self) -> np.ndarray:
        return np.array([b.map_value for b in self.xi_beliefs], dtype=float)

    def __iter__(self):
        return iter((self.xi_beliefs, self.alpha_beliefs, self.trace))

    def to_json(self, grid: ParameterGrid | None = None) -> dict:
        out = {
            "converged": self.converged,
            "iterations": self.iterations,
            "map_xi": self.map_xi.tolist(),
            "xi_beliefs": [b.to_json() for b in self.xi_beliefs],
            "alpha_beliefs": [b.to_json() for b in self.alpha_beliefs],
            "trace": self.trace,
        }
        if grid is not None:
            out["grid"] = grid.to_json()
        return out


def _beliefs(problem: SpaProblem, f2x, f2a):
    g = problem.grid
    xb = []
    for q in range(4):
        total = problem.xi_prior[q] + sum(f2x[fid][q] for _, _, fid in problem.factors())
        xb.append(BeliefTable.from_log(XI_AXES[q], total, g.xi_axes[q]))
    ab = []
    for l in range(g.n_bs):
        total = problem.alpha_prior[l] + sum(f2a[fid] for fid in problem.factor_ids[l])
        ab.append(BeliefTable.from_log(f"alpha{l}", total, g.alpha_points(l)))
    return xb, ab


def run_spa(problem: SpaProblem, schedule: str = "flooding", max_iters: int = 200,
            tol: float = 1e-10) -> SpaResult:
    """Flooding sum-product: all factor-to-variable updates, then all
    variable-to-factor updates, per iteration; no damping.

    Stops once the largest change of any normalised belief entry drops below
    ``tol``. Non-convergence is reported, not raised.
    """
    if schedule != "flooding":
        raise ValueError(f"unknown schedule {schedule!r}")
    g = problem.grid
    sizes = g.xi_shape
    # variable-to-factor messages start at the priors
    x2f = {fid: [problem.xi_prior[q].copy() for q in range(4)] for _, _, fid in problem.factors()}
    a2f = {fid: problem.alpha_prior[l].copy() for l, _, fid in problem.factors()}
    f2x = {fid: [np.full(sizes[q], -np.log(sizes[q])) for q in range(4)] for _, _, fid in problem.factors()}
    f2a = {fid: np.full(len(problem.alpha_prior[l]), -np.log(len(problem.alpha_prior[l])))
           for l, _, fid in problem.factors()}
    xb, ab = _beliefs(problem, f2x, f2a)
    trace, converged, it = [], False, 0
    for it in range(1, max_iters + 1):
        new_x, new_a = {}, {}
        for l, e, fid in problem.factors():
            lp = problem.potentials[l][e]
            new_x[fid] = [factor_to_state_message(lp, q, x2f[fid], a2f[fid]).log_values for q in range(4)]
            new_a[fid] = factor_to_rcs_message(lp, x2f[fid], l).log_values
        f2x, f2a = new_x, new_a
        for q in range(4):
            msgs = {fid: f2x[fid][q] for _, _, fid in problem.factors()}
            for fid in msgs:
                x2f[fid][q] = state_to_factor_message(q, fid, problem.xi_prior[q], msgs).log_values
        for l in range(g.n_bs):
            msgs = {fid: f2a[fid] for fid in problem.factor_ids[l]}
            for fid in msgs:
                a2f[fid] = rcs_to_factor_message(l, fid, problem.alpha_prior[l], msgs).log_values
        nxb, nab = _beliefs(problem, f2x, f2a)
        delta = max(float(np.max(np.abs(b1.probs() - b0.probs())))
                    for b0, b1 in zip(xb + ab, nxb + nab))
        xb, ab = nxb, nab
        trace.append({"iteration": it, "max_belief_change": delta,
                      "map_xi": [float(b.map_value) for b in xb]})
        if delta < tol:
            converged = True
            break
    return SpaResult(xb, ab, trace, converged, it)


# ---------------------------------------------------------------------------
# brute-force oracle


def enumerate_posterior(problem: SpaProblem):
    """Exact grid marginals by summing the full joint table over
    (xi1, xi2, xi3, xi4, alpha_1, ..., alpha_L)."""
    g = problem.grid
    L = g.n_bs
    joint = np.zeros(g.xi_shape + tuple(len(p) for p in problem.alpha_prior))
    for q in range(4):
        shape = [1] * (4 + L)
        shape[q] = -1
        joint = joint + problem.xi_prior[q].reshape(shape)
    for l in range(L):
        shape = [1] * 4 + [1] * L
        shape[4 + l] = -1
        joint = joint + problem.alpha_prior[l].reshape(shape)
        lik = problem.potentials[l].sum(axis=0)           # [n1..n4, A]
        shape = list(g.xi_shape) + [1] * L
        shape[4 + l] = lik.shape[-1]
        joint = joint + lik.reshape(shape)
    joint = joint - logsumexp(joint)
    xb = []
    for q in range(4):
        axes = tuple(i for i in range(4 + L) if i != q)
        xb.append(BeliefTable.from_log(XI_AXES[q], logsumexp(joint, axis=axes), g.xi_axes[q]))
    ab = []
    for l in range(L):
        axes = tuple(i for i in range(4 + L) if i != 4 + l)
        ab.append(BeliefTable.from_log(f"alpha{l}", logsumexp(joint, axis=axes), g.alpha_points(l)))
    return xb, ab


def total_variation(p, q) -> float:
    pa = p.probs() if hasattr(p, "probs") else np.asarray(p)
    qa = q.probs() if hasattr(q, "probs") else np.asarray(q)
    return 0.5 * float(np.sum(np.abs(pa - qa)))


def max_total_variation(beliefs_a, beliefs_b) -> float:
    return max(total_variation(a, b) for a, b in zip(beliefs_a, beliefs_b))


# ---------------------------------------------------------------------------
# tiny randomized instances


def tiny_instance(scene, seed: int):
    """Random tiny oracle instance built from ``scene`` and its oracle settings.

    Returns (problem, truth, alphas, echoes). The truth is drawn uniformly in
    the middle of the xi grid and the grid is centred on it with a random
    sub-cell offset.
    """
    from .forward import synthesize_echo

    oc = scene.oracle
    rng = np.random.default_rng(np.random.SeedSequence([oc.seed, seed]))
    base = scene.truth.as_array()
    half = np.array([oc.position_halfwidth_m] * 2 + [oc.velocity_halfwidth_mps] * 2)
    truth = base + rng.uniform(-0.25, 0.25, 4) * half
    cell = 2 * half / (oc.xi_points - 1)
    centre = truth + rng.uniform(-0.5, 0.5, 4) * cell
    axes = [np.linspace(c - h, c + h, oc.xi_points) for c, h in zip(centre, half)]
    alphas, echoes, re_axes, im_axes = [], [], [], []
    for l, st in enumerate(scene.stations):
        sd = np.sqrt(st.rcs_variance / 2.0)
        a = complex(rng.normal(0, sd), rng.normal(0, sd))
        alphas.append(a)
        box = oc.alpha_box_sd * np.sqrt(st.rcs_variance)
        re_axes.append(np.linspace(-box, box, oc.alpha_points))
        im_axes.append(np.linspace(-box, box, oc.alpha_points))
        child = np.random.default_rng(np.random.SeedSequence([oc.seed, seed, l]))
        echoes.append(synthesize_echo(scene, TargetState.from_array(truth), a, l, child))
    grid = ParameterGrid(axes, re_axes, im_axes)
    return build_problem(scene, echoes, grid), truth, alphas, echoes


def oracle_check(scene, n_instances: int | None = None) -> list:
    """Run SPA and enumeration on the configured number of tiny instances."""
    import time

    oc = scene.oracle
    out = []
    for i in range(oc.n_instances if n_instances is None else n_instances):
        t0 = time.perf_counter()
        problem, truth, _, _ = tiny_instance(scene, i)
        res = run_spa(problem, max_iters=oc.max_iters, tol=oc.tol)
        exb, eab = enumerate_posterior(problem)
        tv_xi = max_total_variation(res.xi_beliefs, exb)
        tv_alpha = max_total_variation(res.alpha_beliefs, eab)
        out.append({
            "instance": i,
            "truth": truth.tolist(),
            "converged": res.converged,
            "iterations": res.iterations,
            "tv_xi": tv_xi,
            "tv_alpha": tv_alpha,
            "passed": res.converged and max(tv_xi, tv_alpha) <= oc.tv_tolerance,
            "runtime_s": time.perf_counter() - t0,
            "spa_map": res.map_xi.tolist(),
            "exact_map": [float(b.map_value) for b in exb],
        })
    return out


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
