"""Comparison estimators: single-BS ML range plus MUSIC angle, parameter-level
LS fusion, and centralized signal-level ML fusion.

Every estimator returns an ``EstimationReport`` so the harness can treat all
methods the same way.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .config import BaselineConfig, SceneBox, SceneConfig, SignalMlConfig
from .correlator import CMAC, CMUL, CEXP, EchoCorrelator, FlopCounter, gauss_newton
from .errors import DegenerateGeometryError, GridCoverageError, RankDeficiencyError
from .forward import SPEED_OF_LIGHT, EchoBlock, station_gain, steering_vector
from .report import EstimationReport, OverheadCounter

PARAM_SCALARS_PER_BS = 3


@dataclass
class RangeAngleEstimate:
    bs_index: int
    range_m: float
    angle_rad: float
    doppler_hz: float
    range_var: float = 1.0
    angle_var: float = 1.0
    doppler_var: float = 1.0
    scores: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def __post_init__(self):
        if not self.range_m > 0:
            raise ValueError("range_m must be > 0")

    def point_fix(self, origin) -> np.ndarray:
        o = np.asarray(origin, dtype=float)
        return o + self.range_m * np.array([math.cos(self.angle_rad), math.sin(self.angle_rad)])


@dataclass
class FusionResult:
    xi_hat: np.ndarray
    method: str
    objective: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xi_hat = np.asarray(self.xi_hat, dtype=float)
        if not np.all(np.isfinite(self.xi_hat)):
            raise ValueError("fused estimate is not finite")


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def _parabolic(left, mid, right):
    den = left - 2.0 * mid + right
    if den >= 0 or not np.isfinite(den):
        return 0.0
    return float(np.clip(0.5 * (left - right) / den, -0.5, 0.5))


# ---------------------------------------------------------------------------
# MUSIC


def music_spectrum(echo: EchoBlock, angles_rad, n_sources: int = 1):
    """Pseudo-spectrum 1/||E_n^H a_r(theta)||^2 on the given angles."""
    x = _snapshots(echo)
    n_rx = x.shape[0]
    if n_sources >= n_rx:
        raise ValueError("n_sources must be smaller than the number of receive elements")
    cov = x @ x.conj().T / x.shape[1]
    vals, vecs = np.linalg.eigh(cov)
    if not vals[-1] > 0:
        raise DegenerateGeometryError("snapshot covariance has rank < 1")
    en = vecs[:, : n_rx - n_sources]
    a = steering_vector(np.asarray(angles_rad, dtype=float), n_rx)
    denom = np.sum(np.abs(a.conj() @ en) ** 2, axis=-1)
    return 1.0 / np.maximum(denom, 1e-300), denom


def _snapshots(echo: EchoBlock) -> np.ndarray:
    # (n, m) snapshots of the antenna vector with the known symbol removed
    n, k, m = echo.y.shape
    if n * m < k:
        raise ValueError("need at least N_r snapshots")
    yc = echo.y * echo.symbols.conj()[:, None, :]
    return yc.transpose(1, 0, 2).reshape(k, n * m)


def music_angle(echo: EchoBlock, bs: int = 0, n_sources: int = 1, step_deg: float = 0.1,
                details: bool = False):
    """Broadside-referenced MUSIC angle in (-90, 90] degrees, returned in radians.

    The 0.1 degree grid peak is refined by a parabola through the three
    denominator samples around the minimum. With ``details`` the peak-to-mean
    score and a low-score flag are returned as well.
    """
    count = int(round(180.0 / step_deg))
    grid_deg = -90.0 + step_deg * np.arange(1, count + 1)
    spec, denom = music_spectrum(echo, np.radians(grid_deg), n_sources)
    i = int(np.argmax(spec))
    offset = 0.0
    if 0 < i < len(grid_deg) - 1:
        offset = _parabolic(-denom[i - 1], -denom[i], -denom[i + 1])
    angle = math.radians(grid_deg[i] + offset * step_deg)
    if not details:
        return angle
    score = float(spec[i] / np.mean(spec))
    return angle, {"peak_to_mean": score, "low_score": score < 3.0, "grid_index": i}


def resolve_hemisphere(broadside_angle: float, origin, reference_point=None, pointing=None) -> float:
    """Pick theta or pi - theta, the two azimuths a ULA cannot tell apart.

    The BS transmit pointing angle is used when known, otherwise the
    direction toward ``reference_point``.
    """
    cands = wrap_angle(np.array([broadside_angle, math.pi - broadside_angle]))
    if pointing is None:
        if reference_point is None:
            return float(cands[0])
        o = np.asarray(origin, dtype=float)
        r = np.asarray(reference_point, dtype=float)
        pointing = math.atan2(r[1] - o[1], r[0] - o[0])
    d = np.abs(wrap_angle(cands - pointing))
    return float(cands[int(np.argmin(d))])


# ---------------------------------------------------------------------------
# ML range / Doppler


class ParametricCorrelator:
    """Profiled likelihood of one echo in the native (tau, theta, nu) parameters."""

    def __init__(self, scene: SceneConfig, echo: EchoBlock, bs: int):
        self.scene, self.echo, self.bs = scene, echo, bs
        ofdm = scene.ofdm
        self.df, self.T = ofdm.subcarrier_spacing_hz, ofdm.symbol_duration_s
        self.gain = station_gain(scene, bs)
        self.yc = echo.y * echo.symbols.conj()[:, None, :]
        self.sym_energy = np.sum(np.abs(echo.symbols) ** 2, axis=1)
        n, k, m = echo.y.shape
        self.n_idx, self.m_idx, self.n_rx = np.arange(n), np.arange(m), k

    def gains(self, theta):
        a_t = steering_vector(theta, self.echo.beamformers.shape[1])
        return self.gain * (self.echo.beamformers @ a_t.conj())

    def combined(self, theta):
        """x[n, m]: antennas and transmit gain matched to ``theta``."""
        a_r = steering_vector(theta, self.n_rx)
        g = self.gains(theta)
        return g.conj()[:, None] * np.einsum("k,nkm->nm", a_r.conj(), self.yc)

    def energy(self, theta):
        return self.n_rx * float(np.abs(self.gains(theta)) ** 2 @ self.sym_energy)

    def loglik(self, tau, theta, nu):
        x = self.combined(theta)
        b = np.exp(2j * np.pi * tau * self.df * self.n_idx) @ x @ np.exp(-2j * np.pi * nu * self.T * self.m_idx)
        a = self.energy(theta)
        if a <= 0:
            return -np.inf
        return float(abs(b) ** 2 / (a * self.echo.noise_variance))

    def curvature_variances(self, tau, theta, nu):
        """Inverse curvature of the profiled log-likelihood along each parameter."""
        steps = (0.02 / (len(self.n_idx) * self.df), 0.02 / self.n_rx, 0.02 / (len(self.m_idx) * self.T))
        p0 = np.array([tau, theta, nu])
        f0 = self.loglik(*p0)
        out = []
        for i, h in enumerate(steps):
            e = np.zeros(3)
            e[i] = h
            c = -(self.loglik(*(p0 + e)) - 2 * f0 + self.loglik(*(p0 - e))) / (h * h)
            out.append(1.0 / c if c > 0 and np.isfinite(c) else None)
        return out


def range_doppler_search(echo: EchoBlock, scene: SceneConfig, bs: int, angle_hint: float,
                         cfg: BaselineConfig | None = None, counter: FlopCounter | None = None) -> dict:
    """Zero-padded 2-D FFT matched-filter search over (tau, nu) with parabolic
    interpolation per axis. Returns a dict with range, delay, Doppler, the
    profiled peak and boundary flags."""
    cfg = cfg or BaselineConfig()
    pc = ParametricCorrelator(scene, echo, bs)
    x = pc.combined(angle_hint)
    n, m = x.shape
    nd, nm = max(cfg.delay_bins, n), max(cfg.doppler_bins, m)
    # sum_n x e^{+j 2 pi n q / nd} and sum_m x e^{-j 2 pi m p / nm}
    c = np.fft.ifft(x, n=nd, axis=0) * nd
    c = np.fft.fftshift(np.fft.fft(c, n=nm, axis=1), axes=1)
    mag = np.abs(c)
    if counter is not None:
        k = echo.y.shape[1]
        counter.add(CMAC * n * k * m + 5 * nd * math.log2(nd) * m + 5 * nm * math.log2(nm) * nd)
    q, p = np.unravel_index(int(np.argmax(mag)), mag.shape)
    flags = []
    dq = dp = 0.0
    if 0 < q < nd - 1:
        dq = _parabolic(mag[q - 1, p], mag[q, p], mag[q + 1, p])
    else:
        flags.append("delay_boundary")
    if 0 < p < nm - 1:
        dp = _parabolic(mag[q, p - 1], mag[q, p], mag[q, p + 1])
    else:
        flags.append("doppler_boundary")
    tau = (q + dq) / (nd * pc.df)
    nu = (p - nm // 2 + dp) / (nm * pc.T)
    return {
        "tau_s": tau,
        "range_m": SPEED_OF_LIGHT * tau / 2.0,
        "doppler_hz": nu,
        "peak": float(mag[q, p]),
        "flags": flags,
        "correlator": pc,
    }


def ml_range_doppler(echo: EchoBlock, scene: SceneConfig, bs: int, angle_hint: float,
                     cfg: BaselineConfig | None = None):
    """(range_m, doppler_hz) of the strongest matched-filter peak."""
    r = range_doppler_search(echo, scene, bs, angle_hint, cfg)
    return r["range_m"], r["doppler_hz"]


def estimate_range_angle(echo: EchoBlock, scene: SceneConfig, bs: int,
                         cfg: BaselineConfig | None = None,
                         counter: FlopCounter | None = None) -> RangeAngleEstimate:
    """MUSIC angle (hemisphere resolved) followed by the ML range/Doppler search."""
    cfg = cfg or BaselineConfig()
    origin = scene.stations[bs].position_m
    broadside, info = music_angle(echo, bs, step_deg=cfg.music_step_deg, details=True)
    if counter is not None:
        n, k, m = echo.y.shape
        counter.add(CMAC * k * k * n * m + CMAC * k ** 3 + CMAC * k * k * int(180 / cfg.music_step_deg))
    box_centre = np.array([np.mean(scene.box.x_m), np.mean(scene.box.y_m)])
    angle = resolve_hemisphere(broadside, origin, box_centre, echo.meta.get("pointing_rad"))
    rd = range_doppler_search(echo, scene, bs, angle, cfg, counter)
    flags = list(rd["flags"])
    if info["low_score"]:
        flags.append("music_low_score")
    rng = rd["range_m"]
    if not rng > 0:
        flags.append("zero_range")
        rng = SPEED_OF_LIGHT / (4.0 * cfg.delay_bins * scene.ofdm.subcarrier_spacing_hz)
    var = rd["correlator"].curvature_variances(rd["tau_s"], angle, rd["doppler_hz"])
    if any(v is None for v in var):
        flags.append("equal_weights")
        var = [(SPEED_OF_LIGHT / (2 * scene.ofdm.n_subcarriers * scene.ofdm.subcarrier_spacing_hz)) ** 2
               * (2.0 / SPEED_OF_LIGHT) ** 2, (2.0 / scene.array.n_rx) ** 2,
               (1.0 / (scene.ofdm.n_symbols * scene.ofdm.symbol_duration_s)) ** 2]
    return RangeAngleEstimate(
        bs_index=bs, range_m=rng, angle_rad=angle, doppler_hz=rd["doppler_hz"],
        range_var=var[0] * (SPEED_OF_LIGHT / 2.0) ** 2, angle_var=var[1], doppler_var=var[2],
        scores={"peak_to_mean": info["peak_to_mean"], "matched_peak": rd["peak"]}, flags=flags,
    )


# ---------------------------------------------------------------------------
# parameter-level LS fusion


def _range_angle_model(xy, origins):
    d = xy[None, :] - origins
    return np.hypot(d[:, 0], d[:, 1]), np.arctan2(d[:, 1], d[:, 0]), d


def _fusion_cost(xy, r_hat, th_hat, origins, wr, wt):
    r, th, _ = _range_angle_model(xy, origins)
    return float(np.sum(wr * (r_hat - r) ** 2 + wt * wrap_angle(th_hat - th) ** 2))


def ls_fuse_position(estimates, stations, box: SceneBox | None = None, max_iter: int = 50,
                     weighted: bool = True) -> FusionResult:
    """Weighted nonlinear LS position from per-BS (range, angle) estimates."""
    if len(estimates) < 2:
        raise ValueError("position fusion needs at least 2 BSs")
    origins = np.array([stations[e.bs_index].position_m for e in estimates], dtype=float)
    r_hat = np.array([e.range_m for e in estimates])
    th_hat = np.array([e.angle_rad for e in estimates])
    if weighted:
        wr = 1.0 / np.array([e.range_var for e in estimates])
        wt = 1.0 / np.array([e.angle_var for e in estimates])
    else:
        wr = np.ones(len(estimates))
        wt = r_hat ** 2
    fixes = np.array([e.point_fix(o) for e, o in zip(estimates, origins)])
    # positional spread of each point fix
    spread = np.array([e.range_var + e.range_m ** 2 * e.angle_var for e in estimates]) if weighted \
        else np.ones(len(estimates))
    best = np.argsort(spread, kind="stable")[:2]
    pw = 1.0 / spread[best]
    start = (fixes[best] * pw[:, None]).sum(axis=0) / pw.sum()

    def gn(xy):
        cost = _fusion_cost(xy, r_hat, th_hat, origins, wr, wt)
        for it in range(max_iter):
            r, th, d = _range_angle_model(xy, origins)
            if np.any(r <= 0):
                return None, np.inf, it
            jr = d / r[:, None]
            jt = np.stack([-d[:, 1], d[:, 0]], axis=1) / (r ** 2)[:, None]
            jac = np.vstack([jr, jt])
            res = np.concatenate([r_hat - r, wrap_angle(th_hat - th)])
            w = np.concatenate([wr, wt])
            h = jac.T @ (w[:, None] * jac)
            g = jac.T @ (w * res)
            try:
                step = np.linalg.solve(h, g)
            except np.linalg.LinAlgError:
                return None, np.inf, it
            mu = 1.0
            while mu > 1e-6:
                cand = xy + mu * step
                c2 = _fusion_cost(cand, r_hat, th_hat, origins, wr, wt)
                if c2 <= cost:
                    break
                mu *= 0.5
            else:
                return xy, cost, it
            xy, prev, cost = cand, cost, c2
            if np.linalg.norm(mu * step) < 1e-10 * (1 + np.linalg.norm(xy)):
                return xy, cost, it + 1
        return xy, cost, max_iter

    xy, cost, iters = gn(start)
    meta = {"start": start, "iterations": iters, "fallback": False}
    diverged = xy is None or not np.all(np.isfinite(xy))
    if not diverged and box is not None:
        diverged = not box.contains(np.array([xy[0], xy[1], 0.0, 0.0]), scale=2.0)
    if diverged:
        b = box or SceneBox()
        gx, gy = np.meshgrid(np.linspace(*b.x_m, 101), np.linspace(*b.y_m, 101), indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        costs = [_fusion_cost(p, r_hat, th_hat, origins, wr, wt) for p in pts]
        xy, cost, iters = gn(pts[int(np.argmin(costs))])
        if xy is None:
            xy, cost = pts[int(np.argmin(costs))], float(np.min(costs))
        meta.update(fallback=True, iterations=iters)
    return FusionResult(np.asarray(xy, dtype=float), "parameter-level", float(cost), meta)


def ls_fuse_velocity(dopplers, angles, carriers, variances=None) -> np.ndarray:
    """Weighted linear LS for (vx, vy) from nu_l = (2 f_l / c)(vx cos th_l + vy sin th_l)."""
    nu = np.asarray(dopplers, dtype=float)
    th = np.asarray(angles, dtype=float)
    kap = 2.0 * np.asarray(carriers, dtype=float) / SPEED_OF_LIGHT
    if nu.size < 2:
        raise ValueError("velocity fusion needs at least 2 BSs")
    a = kap[:, None] * np.stack([np.cos(th), np.sin(th)], axis=1)
    w = np.ones_like(nu) if variances is None else 1.0 / np.asarray(variances, dtype=float)
    sw = np.sqrt(w)
    aw, bw = a * sw[:, None], nu * sw
    s = np.linalg.svd(aw, compute_uv=False)
    if s[-1] <= 1e-9 * s[0]:
        raise RankDeficiencyError("Doppler rows are parallel; velocity is not identifiable")
    return np.linalg.solve(aw.T @ aw, aw.T @ bw)


# ---------------------------------------------------------------------------
# report-level wrappers


def run_single_bs(scene: SceneConfig, echoes, bs: int | None = None,
                  cfg: BaselineConfig | None = None) -> EstimationReport:
    """Point fix of one BS; velocity is only the radial component."""
    t0 = time.perf_counter()
    bs = scene.single_bs_index if bs is None else bs
    counter = FlopCounter()
    est = estimate_range_angle(echoes[bs], scene, bs, cfg or scene.baselines, counter)
    pos = est.point_fix(scene.stations[bs].position_m)
    kap = 2.0 * scene.ofdm.carrier_freq_hz[bs] / SPEED_OF_LIGHT
    u = np.array([math.cos(est.angle_rad), math.sin(est.angle_rad)])
    vel = (est.doppler_hz / kap) * u
    oh = OverheadCounter(flops_local=counter.flops)
    return EstimationReport(
        method="single_bs", xi_hat=np.concatenate([pos, vel]),
        flags=["velocity_underdetermined"] + est.flags, overhead=oh,
        extra={"per_bs": [_estimate_dict(est, scene)]},
        runtime_s=time.perf_counter() - t0,
    )


def _estimate_dict(est: RangeAngleEstimate, scene) -> dict:
    pos = est.point_fix(scene.stations[est.bs_index].position_m)
    return {"bs": est.bs_index, "range_m": est.range_m, "angle_rad": est.angle_rad,
            "doppler_hz": est.doppler_hz, "x_m": float(pos[0]), "y_m": float(pos[1]),
            "range_var": est.range_var, "angle_var": est.angle_var,
            "doppler_var": est.doppler_var, "flags": list(est.flags)}


def run_param_fusion(scene: SceneConfig, echoes, cfg: BaselineConfig | None = None) -> EstimationReport:
    t0 = time.perf_counter()
    cfg = cfg or scene.baselines
    oh = OverheadCounter()
    ests = []
    for l, e in enumerate(echoes):
        c = FlopCounter()
        ests.append(estimate_range_angle(e, scene, l, cfg, c))
        oh.flops_local += c.flops
        oh.uplink(PARAM_SCALARS_PER_BS)
    pos = ls_fuse_position(ests, scene.stations, scene.box)
    vel = ls_fuse_velocity([e.doppler_hz for e in ests], [e.angle_rad for e in ests],
                           scene.ofdm.carrier_freq_hz, [e.doppler_var for e in ests])
    l_count = len(ests)
    oh.flops_global += int(pos.meta["iterations"] + 1) * l_count * 60 + l_count * 40
    flags = [f"bs{e.bs_index}:{f}" for e in ests for f in e.flags]
    if pos.meta["fallback"]:
        flags.append("gn_fallback_grid")
    return EstimationReport(
        method="param_fusion", xi_hat=np.concatenate([pos.xi_hat, vel]), overhead=oh, flags=flags,
        iterations=int(pos.meta["iterations"]),
        extra={"per_bs": [_estimate_dict(e, scene) for e in ests], "objective": pos.objective},
        runtime_s=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# signal-level ML


def _axis(lo, hi, count):
    return np.linspace(lo, hi, count)


def _grid_objective(correlators, xs, ys, vxs, vys):
    """Sum over BSs of the profiled log-likelihood on a tensor grid,
    shape [Px, Py, Vx, Vy]."""
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    total = 0.0
    for c in correlators:
        u, energy, theta = c.position_stage(gx.ravel(), gy.ravel())
        b = c.velocity_grid(u, theta, vxs, vys)
        total = total + np.abs(b) ** 2 / (energy[:, None, None] * c.noise_variance)
    return total.reshape(len(xs), len(ys), len(vxs), len(vys))


def signal_level_ml(scene: SceneConfig, echoes, cfg: SignalMlConfig | None = None,
                    grid_bounds=None, counter: FlopCounter | None = None) -> FusionResult:
    """Coarse-to-fine maximisation of sum_l max_alpha log p(Y_l | xi, alpha).

    ``grid_bounds`` overrides the coarse grid extent; it has to cover the
    configured scene box.
    """
    cfg = cfg or scene.signal_ml
    counter = counter if counter is not None else FlopCounter()
    box = scene.box
    bounds = np.array(grid_bounds if grid_bounds is not None else box.bounds(), dtype=float)
    need = np.array(box.bounds(), dtype=float)
    if np.any(bounds[:, 0] > need[:, 0] + 1e-12) or np.any(bounds[:, 1] < need[:, 1] - 1e-12):
        raise GridCoverageError("signal-level ML coarse grid does not cover the scene box")
    corrs = [EchoCorrelator(scene, e, l, counter) for l, e in enumerate(echoes)]
    counts = [cfg.pos_points, cfg.pos_points, cfg.vel_points, cfg.vel_points]
    lo, hi = bounds[:, 0].copy(), bounds[:, 1].copy()
    levels = []
    best = None
    for level in range(cfg.refine_levels + 1):
        axes = [_axis(lo[i], hi[i], counts[i]) for i in range(4)]
        obj = _grid_objective(corrs, *axes)
        idx = np.unravel_index(int(np.argmax(obj)), obj.shape)
        best = np.array([axes[i][idx[i]] for i in range(4)])
        levels.append({"level": level, "lo": lo.tolist(), "hi": hi.tolist(),
                       "xi": best.tolist(), "objective": float(obj[idx])})
        span = (hi - lo) / cfg.shrink
        lo, hi = best - span / 2.0, best + span / 2.0
    objective = levels[-1]["objective"]
    cell = [(levels[-1]["hi"][i] - levels[-1]["lo"][i]) / max(counts[i] - 1, 1) for i in range(4)]
    meta = {"levels": levels, "finest_cell": cell, "polished": False}
    if cfg.polish:
        xi, _, phi, _, iters = gauss_newton(corrs, best, iters=10)
        # phi is the profiled residual; convert back to the profiled log-likelihood gain
        gain = sum(c.y_energy / c.noise_variance for c in corrs) - phi
        if np.all(np.isfinite(xi)) and gain >= objective - 1e-9 * abs(objective) \
                and np.all(np.abs(xi - best) <= np.asarray(cell) * 2):
            best, objective = xi, float(gain)
            meta.update(polished=True, polish_iterations=iters)
    meta["flops"] = counter.flops
    return FusionResult(best, "signal-level", float(objective), meta)


def run_signal_ml(scene: SceneConfig, echoes, cfg: SignalMlConfig | None = None) -> EstimationReport:
    t0 = time.perf_counter()
    counter = FlopCounter()
    res = signal_level_ml(scene, echoes, cfg, counter=counter)
    oh = OverheadCounter(flops_global=counter.flops)
    for e in echoes:
        oh.uplink(2 * e.y.size)
    corrs = [EchoCorrelator(scene, e, l) for l, e in enumerate(echoes)]
    alphas = []
    for c in corrs:
        a, b = c.correlate(res.xi_hat)
        alphas.append(complex(b[0] / a[0]))
    return EstimationReport(
        method="signal_ml", xi_hat=res.xi_hat, alpha_hat=alphas, overhead=oh,
        iterations=len(res.meta["levels"]), extra={"objective": res.objective,
                                                   "polished": res.meta["polished"]},
        runtime_s=time.perf_counter() - t0,
    )
