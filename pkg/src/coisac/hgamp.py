"""Hierarchical Gaussian-approximated message passing.

Each BS turns its echo into four scalar Gaussian messages on the target
state (one per component of xi) and ships them to a fusion centre, which
multiplies them with the prior and returns extrinsic feedback. The
per-BS message on xi_q is

    log int p(Y_l | xi, alpha) p(alpha) prod_{q' != q} N(xi_q'; feedback) d alpha d xi_{-q}

evaluated on a local grid along xi_q. Alpha is integrated in closed form.
The nuisance components are integrated with an adaptive Gauss-Hermite rule
centred on the local Laplace approximation, and importance weights undo the
proposal. The tabulated message is then projected onto a Gaussian.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.optimize import least_squares
from scipy.special import logsumexp

from .config import HgampConfig, SceneConfig
from .correlator import EchoCorrelator, FlopCounter, gauss_newton, marginal_loglik
from .errors import DegenerateGainError, DegenerateMessageError
from .report import EstimationReport, OverheadCounter

N_STATE = 4
POSITION_AXES = (0, 1)
SCALARS_PER_PACKET = 2 * N_STATE


# ---------------------------------------------------------------------------
# Gaussian messages


@dataclass(frozen=True)
class GaussianMessage:
    """Mean and variance of a scalar Gaussian; complex means are circular and
    the variance is the total complex variance."""

    mean: complex
    variance: float

    def __post_init__(self):
        if not (np.isfinite(self.variance) and self.variance > 0):
            raise DegenerateMessageError(f"invalid variance {self.variance!r}")
        if not np.isfinite(self.mean):
            raise DegenerateMessageError(f"invalid mean {self.mean!r}")

    @property
    def precision(self) -> float:
        return 1.0 / self.variance

    @property
    def sd(self) -> float:
        return math.sqrt(self.variance)


def gaussian_product(messages) -> GaussianMessage:
    """Normalised product of Gaussians: precisions add, means are precision weighted."""
    messages = list(messages)
    if not messages:
        raise ValueError("empty product")
    prec = sum(m.precision for m in messages)
    mean = sum(m.precision * m.mean for m in messages) / prec
    return GaussianMessage(mean, 1.0 / prec)


@dataclass(frozen=True)
class LocalBeliefPacket:
    """Uplink unit: BS id, iteration tag and four (mean, variance) pairs."""

    bs: int
    messages: tuple
    iteration: int = 0

    def __post_init__(self):
        if len(self.messages) != N_STATE:
            raise ValueError("a packet carries exactly four state messages")

    def to_wire(self) -> list:
        out = [self.bs, self.iteration]
        for m in self.messages:
            out.extend([float(np.real(m.mean)), float(m.variance)])
        return out

    @classmethod
    def from_wire(cls, wire) -> "LocalBeliefPacket":
        bs, it = int(wire[0]), int(wire[1])
        vals = wire[2:]
        if len(vals) != SCALARS_PER_PACKET:
            raise ValueError("wire packet must carry 8 scalars")
        msgs = tuple(GaussianMessage(vals[2 * i], vals[2 * i + 1]) for i in range(N_STATE))
        return cls(bs, msgs, it)

    @property
    def n_scalars(self) -> int:
        return SCALARS_PER_PACKET


@dataclass
class GlobalBelief:
    posterior: tuple
    feedback: dict

    @property
    def means(self) -> np.ndarray:
        return np.array([float(np.real(m.mean)) for m in self.posterior])

    @property
    def variances(self) -> np.ndarray:
        return np.array([m.variance for m in self.posterior])


def global_fuse(packets, priors=None) -> GlobalBelief:
    """Multiply the prior with every packet per state component and build the
    extrinsic feedback for each BS (prior times the other BSs' messages).

    ``priors`` is a sequence of four ``GaussianMessage`` or None for a flat prior.
    """
    packets = list(packets)
    if not packets:
        raise ValueError("global_fuse needs at least one packet")
    post, feedback = [], {p.bs: [] for p in packets}
    for q in range(N_STATE):
        base = [] if priors is None or priors[q] is None else [priors[q]]
        post.append(gaussian_product(base + [p.messages[q] for p in packets]))
        for p in packets:
            others = base + [o.messages[q] for o in packets if o.bs != p.bs]
            # an empty product is the flat message; use an infinitely wide stand-in
            feedback[p.bs].append(gaussian_product(others) if others else None)
    return GlobalBelief(tuple(post), {k: tuple(v) for k, v in feedback.items()})


# ---------------------------------------------------------------------------
# RCS message


def local_rcs_message(corr: EchoCorrelator, xi_bar, rcs_variance: float) -> GaussianMessage:
    """Exact Gaussian posterior of alpha_l for fixed xi = xi_bar.

    The model is linear in alpha, so the aggregate over all (n, k, m) is
    CN(<zt, y> / (||zt||^2 + s2 / sl2), s2 sl2 / (sl2 ||zt||^2 + s2)).
    """
    energy, b = corr.correlate(np.asarray(xi_bar, dtype=float))
    a, b = float(energy[0]), complex(b[0])
    s2 = corr.noise_variance
    if not a > 1e-300:
        raise DegenerateGainError("template has zero energy; transmit gain vanishes on all subcarriers")
    if np.isinf(rcs_variance):
        return GaussianMessage(b / a, s2 / a)
    return GaussianMessage(b / (a + s2 / rcs_variance), s2 * rcs_variance / (rcs_variance * a + s2))


# ---------------------------------------------------------------------------
# likelihood back-ends


# Above this per-BS SNR the local posterior is narrower than the window
# arithmetic can resolve in double precision, so the noise level is floored.
MAX_LOCAL_SNR_DB = 80.0


class EchoLikelihood:
    """log p(Y_l | xi) with alpha ~ CN(0, rcs_variance) integrated out.

    The noise variance is floored at mean |y|^2 / 10^(MAX_LOCAL_SNR_DB / 10).
    """

    def __init__(self, scene: SceneConfig, echo, bs: int, counter: FlopCounter | None = None):
        self.corr = EchoCorrelator(scene, echo, bs, counter)
        floor = float(np.mean(np.abs(echo.y) ** 2)) * 10.0 ** (-MAX_LOCAL_SNR_DB / 10.0)
        self.corr.noise_variance = max(self.corr.noise_variance, floor)
        self.rcs_variance = scene.stations[bs].rcs_variance
        self.bs = bs

    @property
    def counter(self) -> FlopCounter:
        return self.corr.counter

    def evaluate(self, x, y, vx, vy):
        """x, y: [P]; vx, vy: [P, J] -> log-likelihood [P, J]."""
        u, energy, theta = self.corr.position_stage(x, y)
        b = self.corr.velocity_pairs(u, theta, vx, vy)
        return marginal_loglik(energy[:, None], b, self.corr.noise_variance, 0.0, self.rcs_variance)

    def laplace(self, start, cavity_means, cavity_vars, iters: int = 8):
        xi, h, _, _, _ = gauss_newton([self.corr], start, cavity_means, cavity_vars,
                                      alpha_priors=[(0.0, self.rcs_variance)], iters=iters)
        return xi, h


class GaussianLikelihood:
    """Synthetic Gaussian log-likelihood N(xi; mean, cov), for exactness checks."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.prec = np.linalg.inv(self.cov)
        self.counter = FlopCounter()

    def evaluate(self, x, y, vx, vy):
        x = np.broadcast_to(np.asarray(x, dtype=float)[:, None], np.shape(vx))
        y = np.broadcast_to(np.asarray(y, dtype=float)[:, None], np.shape(vx))
        d = np.stack([x, y, vx, vy], axis=-1) - self.mean
        return -0.5 * np.einsum("...i,ij,...j->...", d, self.prec, d)

    def laplace(self, start, cavity_means, cavity_vars, iters: int = 8):
        cp = 1.0 / np.asarray(cavity_vars, dtype=float)
        h = self.prec + np.diag(cp)
        xi = np.linalg.solve(h, self.prec @ self.mean + cp * np.asarray(cavity_means, dtype=float))
        return xi, h


# ---------------------------------------------------------------------------
# Gaussian projection


def _grid_moments(t, logw):
    w = np.exp(logw - np.max(logw))
    w = w / w.sum()
    m = float(np.sum(w * t))
    return m, float(np.sum(w * (t - m) ** 2))


def gaussian_project(t, logw):
    """Gaussian matching the first two moments of the tabulated message.

    The raw grid moments are biased by the finite window; when the message is
    bell shaped they are corrected by solving for the Gaussian whose samples
    on the same grid reproduce them. Returns (mean, variance, corrected).
    """
    t = np.asarray(t, dtype=float)
    m, v = _grid_moments(t, logw)
    h = t[1] - t[0]
    uniform_var = float(np.var(t))
    if not (h > 0) or not (v > 0) or v > 0.5 * uniform_var or math.sqrt(v) < 0.5 * h:
        return m, v, False

    def resid(p):
        mu, ls = p
        lw = -0.5 * ((t - mu) / math.exp(ls)) ** 2
        mm, vv = _grid_moments(t, lw)
        return [(mm - m) / h, (vv - v) / (h * h)]

    sol = least_squares(resid, [m, 0.5 * math.log(v)], xtol=1e-15, ftol=1e-15, gtol=1e-15,
                        max_nfev=200)
    if not sol.success or np.max(np.abs(sol.fun)) > 1e-9:
        return m, v, False
    return float(sol.x[0]), float(math.exp(2 * sol.x[1])), True


# ---------------------------------------------------------------------------
# local state message


@dataclass
class StateMessageResult:
    message: GaussianMessage
    window: np.ndarray
    log_values: np.ndarray
    zooms: int = 0
    vanished: bool = False
    corrected: bool = False


def _gh_rule(n: int):
    z, w = hermegauss(n)
    return z, w / math.sqrt(2.0 * math.pi)


# relative eigenvalue floor for local Hessians; a single BS barely sees the
# tangential velocity, so at tiny noise the condition number reaches 1/eps
_EIG_FLOOR = 1e-15


def _eig_factor(h):
    ev, vec = np.linalg.eigh(h)
    return np.maximum(ev, ev.max() * _EIG_FLOOR), vec


def _tabulate(lik, q, t, mode, hess, cav_m, cav_v, n_nodes):
    """log message on the points ``t`` of axis q."""
    nuis = [i for i in range(N_STATE) if i != q]              # positions come first
    hnn = hess[np.ix_(nuis, nuis)]
    ev, vec = _eig_factor(hnn)
    cov = (vec / ev) @ vec.T
    cov = 0.5 * (cov + cov.T)
    # lower triangular keeps the position offsets independent of the velocity nodes
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        chol = np.linalg.cholesky(cov + np.eye(len(nuis)) * np.max(np.diag(cov)) * 1e-12)
    slope = -cov @ hess[nuis, q]
    n_pos = sum(1 for i in nuis if i in POSITION_AXES)
    if q not in POSITION_AXES:
        slope[:n_pos] = 0.0                                     # share positions across t
    z1, w1 = _gh_rule(n_nodes)
    d = len(nuis)
    zz = np.stack(np.meshgrid(*([z1] * d), indexing="ij"), axis=-1).reshape(-1, d)
    lw = np.sum(np.log(np.stack(np.meshgrid(*([w1] * d), indexing="ij"), axis=-1).reshape(-1, d)), axis=1)
    log_q = -0.5 * np.sum(zz ** 2, axis=1) - np.sum(np.log(np.diag(chol))) - 0.5 * d * math.log(2 * math.pi)
    off = zz @ chol.T                                           # [Z, d]
    nt = len(t)
    pts = np.empty((nt, len(zz), N_STATE))
    pts[:, :, q] = t[:, None]
    pts[:, :, nuis] = mode[nuis] + slope[None, None, :] * (t - mode[q])[:, None, None] + off[None, :, :]
    log_cav = np.zeros((nt, len(zz)))
    for j, i in enumerate(nuis):
        log_cav += -0.5 * (pts[:, :, i] - cav_m[i]) ** 2 / cav_v[i] - 0.5 * math.log(2 * math.pi * cav_v[i])
    zp = n_nodes ** n_pos
    zv = len(zz) // zp
    grid = pts.reshape(nt, zp, zv, N_STATE)
    if q in POSITION_AXES:
        pos = grid[:, :, 0, :2].reshape(nt * zp, 2)
        vel = grid[..., 2:].reshape(nt * zp, zv, 2)
        ll = lik.evaluate(pos[:, 0], pos[:, 1], vel[..., 0], vel[..., 1]).reshape(nt, zp * zv)
    else:
        pos = grid[0, :, 0, :2]
        vel = grid[..., 2:].transpose(1, 0, 2, 3).reshape(zp, nt * zv, 2)
        ll = lik.evaluate(pos[:, 0], pos[:, 1], vel[..., 0], vel[..., 1])
        ll = ll.reshape(zp, nt, zv).transpose(1, 0, 2).reshape(nt, zp * zv)
    return logsumexp(ll + log_cav + (lw - log_q)[None, :], axis=1)


def local_state_message(lik, q: int, cavity, mode, hess, cfg: HgampConfig | None = None,
                        previous: GaussianMessage | None = None) -> StateMessageResult:
    """Gaussian projection of the BS message on xi_q.

    ``cavity`` holds the four feedback Gaussians ((mean, variance) pairs or
    ``GaussianMessage``), ``mode``/``hess`` the local Laplace approximation
    of log-likelihood plus cavity.
    """
    cfg = cfg or HgampConfig()
    cav_m = np.array([float(np.real(c.mean)) if isinstance(c, GaussianMessage) else c[0] for c in cavity])
    cav_v = np.array([c.variance if isinstance(c, GaussianMessage) else c[1] for c in cavity])
    mode = np.asarray(mode, dtype=float)
    hess = 0.5 * (np.asarray(hess, dtype=float) + np.asarray(hess, dtype=float).T)
    nuis = [i for i in range(N_STATE) if i != q]
    ev, vec = _eig_factor(hess[np.ix_(nuis, nuis)])
    proj = vec.T @ hess[nuis, q]
    schur = hess[q, q] - float(np.sum(proj ** 2 / ev))
    msg_prec = schur - 1.0 / cav_v[q]
    cap = cfg.window_cap * math.sqrt(cav_v[q])
    spread = min(1.0 / math.sqrt(msg_prec), cap) if msg_prec > 0 else cap
    centre, half = mode[q], cfg.window_k * spread
    zooms, corrected = 0, False
    while True:
        t = centre + half * np.linspace(-1.0, 1.0, cfg.grid_points)
        logw = _tabulate(lik, q, t, mode, hess, cav_m, cav_v, cfg.gh_nodes)
        if not np.any(np.isfinite(logw)):
            base = previous if previous is not None else GaussianMessage(mode[q], cav_v[q])
            var = max(10.0 * base.variance, cfg.variance_floor)
            return StateMessageResult(GaussianMessage(float(np.real(base.mean)), var), t, logw,
                                      zooms, vanished=True)
        logw = np.where(np.isfinite(logw), logw, -np.inf)
        mean, var, corrected = gaussian_project(t, logw)
        sd = math.sqrt(max(var, 0.0))
        h = t[1] - t[0]
        # zoom when the bell is narrower than a grid step or pokes out of the window
        under = sd < h
        edge = abs(mean - centre) + 2.0 * sd > half and half < cfg.window_k * cap
        if zooms >= cfg.max_zoom or not (under or edge):
            break
        zooms += 1
        if edge and not under:
            centre, half = mean, min(2.0 * half, cfg.window_k * cap)
        else:
            # never narrower than float resolution around the centre
            floor = 64.0 * np.spacing(abs(mean)) * cfg.grid_points
            centre, half = mean, max(cfg.window_k * sd, 1e-3 * half, floor)
    var = max(var, cfg.variance_floor)
    return StateMessageResult(GaussianMessage(mean, var), t, logw, zooms, False, corrected)


# ---------------------------------------------------------------------------
# driver


@dataclass
class _BsState:
    lik: object
    start: np.ndarray
    messages: list = field(default_factory=lambda: [None] * N_STATE)
    mode: np.ndarray | None = None
    hess: np.ndarray | None = None


def _warm_start(scene, echo, bs, cav_m, counter):
    """Position from the BS's own range/angle fix, radial velocity from its
    Doppler; the tangential velocity comes from the feedback mean."""
    from .baselines import estimate_range_angle
    from .forward import SPEED_OF_LIGHT

    try:
        est = estimate_range_angle(echo, scene, bs, scene.baselines, counter)
    except Exception:
        return cav_m.copy()
    pos = est.point_fix(scene.stations[bs].position_m)
    u = np.array([math.cos(est.angle_rad), math.sin(est.angle_rad)])
    kap = 2.0 * scene.ofdm.carrier_freq_hz[bs] / SPEED_OF_LIGHT
    v_prior = cav_m[2:]
    vel = (est.doppler_hz / kap) * u + (v_prior - u * (u @ v_prior))
    return np.concatenate([pos, vel])


def _cavity(fb, priors_vec, q):
    m, v = priors_vec
    return fb[q] if fb is not None and fb[q] is not None else GaussianMessage(m[q], v[q])


def run_hgamp(scene: SceneConfig, echoes, priors=None, max_outer: int | None = None,
              damping: float | None = None, tol: float | None = None,
              cfg: HgampConfig | None = None, trace_path=None, likelihoods=None,
              warm_start: bool = True) -> EstimationReport:
    """Alternate per-BS local stages and the fusion-centre global stage.

    ``priors`` is (means, variances) for xi; default from the scene config.
    """
    t0 = time.perf_counter()
    cfg = cfg or scene.hgamp
    max_outer = cfg.max_outer if max_outer is None else max_outer
    damping = cfg.damping if damping is None else damping
    tol = cfg.tol if tol is None else tol
    pm, pv = (np.asarray(scene.prior_means(), dtype=float), np.asarray(scene.prior_variances(), dtype=float)) \
        if priors is None else (np.asarray(priors[0], dtype=float), np.asarray(priors[1], dtype=float))
    prior_msgs = [GaussianMessage(pm[q], pv[q]) for q in range(N_STATE)]
    counter = OverheadCounter()
    if likelihoods is None:
        if not echoes:
            raise ValueError("run_hgamp needs echoes or explicit likelihoods")
        local_counters = [FlopCounter() for _ in echoes]
        likelihoods = [EchoLikelihood(scene, e, l, local_counters[l]) for l, e in enumerate(echoes)]
    else:
        local_counters = [lk.counter for lk in likelihoods]

    flags, trace = [], []
    restarted = False
    box = scene.box

    def init_states(use_warm):
        out = []
        for l, lk in enumerate(likelihoods):
            start = pm.copy()
            if use_warm and echoes is not None and l < len(echoes):
                start = _warm_start(scene, echoes[l], l, pm, local_counters[l])
            out.append(_BsState(lk, start))
        return out

    states = init_states(warm_start)
    belief = None
    feedback = {l: None for l in range(len(likelihoods))}
    gamma = damping
    converged = False
    prev_means = None
    it = 0
    n_vanished = 0
    total_iters = 0
    while it < max_outer:
        it += 1
        total_iters += 1
        packets = []
        for l, st in enumerate(states):
            cav = [_cavity(feedback[l], (pm, pv), q) for q in range(N_STATE)]
            cm = np.array([float(np.real(c.mean)) for c in cav])
            cv = np.array([c.variance for c in cav])
            start = st.mode if st.mode is not None else st.start
            for sweep in range(cfg.inner_sweeps):
                mode, hess = st.lik.laplace(start, cm, cv, cfg.gn_iters)
                if not np.all(np.isfinite(mode)):
                    mode, hess = start, np.diag(1.0 / cv)
                results = [local_state_message(st.lik, q, cav, mode, hess, cfg, st.messages[q])
                           for q in range(N_STATE)]
                # later sweeps re-centre on the local belief (feedback times own message)
                start = np.array([float(np.real(gaussian_product([cav[q], r.message]).mean))
                                  for q, r in enumerate(results)])
            st.mode, st.hess = mode, hess
            new = []
            for q, res in enumerate(results):
                n_vanished += res.vanished
                msg = res.message
                old = st.messages[q]
                if old is not None and gamma < 1.0:
                    msg = GaussianMessage(gamma * float(np.real(msg.mean)) + (1 - gamma) * float(np.real(old.mean)),
                                          msg.variance)
                new.append(msg)
            st.messages = new
            packets.append(LocalBeliefPacket(l, tuple(new), it))
            counter.uplink(SCALARS_PER_PACKET)
        belief = global_fuse(packets, prior_msgs)
        counter.flops_global += N_STATE * len(packets) * 6 * 2
        feedback = dict(belief.feedback)
        counter.downlink(SCALARS_PER_PACKET * len(packets))
        means = belief.means
        entry = {"iteration": total_iters, "means": means.tolist(),
                 "variances": belief.variances.tolist(),
                 "uplinked": counter.scalars_uplinked, "downlinked": counter.scalars_downlinked,
                 "flops": sum(c.flops for c in local_counters) + counter.flops_global}
        trace.append(entry)
        if not box.contains(means, scale=2.0) or not np.all(np.isfinite(means)):
            if restarted:
                flags.append("diverged")
                break
            restarted = True
            flags.append("restarted")
            gamma = damping / 2.0
            states = init_states(False)
            feedback = {l: None for l in range(len(states))}
            prev_means = None
            it = 0
            continue
        if prev_means is not None:
            shift = np.max(np.abs(means - prev_means) / np.sqrt(belief.variances))
            entry["max_shift"] = float(shift)
            if shift < tol:
                converged = True
                break
        prev_means = means
    if n_vanished:
        flags.append(f"vanished_messages:{n_vanished}")
    if not converged and "diverged" not in flags:
        flags.append("max_outer_reached")
    counter.flops_local = sum(c.flops for c in local_counters)
    alphas = []
    if belief is not None and echoes is not None:
        for l, lk in enumerate(likelihoods):
            if isinstance(lk, EchoLikelihood):
                alphas.append(local_rcs_message(lk.corr, belief.means, lk.rcs_variance).mean)
        counter.flops_local = sum(c.flops for c in local_counters)
    if trace_path is not None:
        write_trace(trace, trace_path)
    xi_hat = belief.means if belief is not None else pm
    return EstimationReport(
        method="hgamp", xi_hat=xi_hat, alpha_hat=alphas,
        variances=belief.variances if belief is not None else pv,
        converged=converged, iterations=total_iters, trace=trace, overhead=counter, flags=flags,
        extra={"damping": gamma}, runtime_s=time.perf_counter() - t0,
    )


def write_trace(trace, path) -> None:
    with open(path, "w") as fh:
        for entry in trace:
            fh.write(json.dumps(entry) + "\n")
