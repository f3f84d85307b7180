"""Fast evaluation of the alpha-free echo likelihood at many target states.

For one BS the likelihood depends on the target state only through the
unit-RCS template ``zt(xi)`` via

    a(xi) = ||zt(xi)||^2        b(xi) = <zt(xi), y>

The template factorises into a position part (delay, angle) and a velocity
part (Doppler), so ``b`` is computed in two stages: a position stage that
collapses subcarriers and antennas, ``u[p, m]``, and a velocity stage that
collapses symbols. Every kernel charges its arithmetic to a ``FlopCounter``
using the fixed cost model below, which is what the overhead accounting
reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .forward import SPEED_OF_LIGHT, EchoBlock, station_gain, steering_vector

# real floating-point operations charged per primitive
CMAC = 8      # complex multiply-accumulate
CMUL = 6      # complex multiply
CEXP = 10     # complex exponential (cos + sin)


@dataclass
class FlopCounter:
    flops: int = 0

    def add(self, n) -> None:
        self.flops += int(n)


class EchoCorrelator:
    """Template correlations of one BS echo."""

    def __init__(self, scene, echo: EchoBlock, bs_index: int, counter: FlopCounter | None = None):
        ofdm = scene.ofdm
        self.n_sub, self.n_rx, self.n_sym = echo.y.shape
        self.origin = np.asarray(scene.stations[bs_index].position_m, dtype=float)
        self.df = ofdm.subcarrier_spacing_hz
        self.T = ofdm.symbol_duration_s
        self.kappa = 2.0 * ofdm.carrier_freq_hz[bs_index] / SPEED_OF_LIGHT
        self.gain = station_gain(scene, bs_index)
        self.noise_variance = echo.noise_variance
        self.echo = echo
        self.counter = counter if counter is not None else FlopCounter()
        self.w = echo.beamformers
        # symbol-compensated data, flattened over (n, k)
        yc = echo.y * echo.symbols.conj()[:, None, :]
        self.yc = yc.reshape(self.n_sub * self.n_rx, self.n_sym)
        self.sym_energy = np.sum(np.abs(echo.symbols) ** 2, axis=1)
        self.y_energy = float(np.sum(np.abs(echo.y) ** 2))
        self.n_idx = np.arange(self.n_sub)
        self.m_idx = np.arange(self.n_sym)
        self.counter.add(CMUL * echo.y.size)

    # -- geometry -----------------------------------------------------------

    def geometry(self, x, y):
        dx = np.asarray(x, dtype=float) - self.origin[0]
        dy = np.asarray(y, dtype=float) - self.origin[1]
        rng = np.hypot(dx, dy)
        return 2.0 * rng / SPEED_OF_LIGHT, np.arctan2(dy, dx), rng

    def tx_gain(self, theta):
        """gain_n(theta) for an array of angles, shape theta.shape + (N,)."""
        a_t = steering_vector(theta, self.w.shape[1])
        return self.gain * np.einsum("...i,ni->...n", a_t.conj(), self.w)

    # -- stages ---------------------------------------------------------------

    def position_stage(self, x, y):
        """Collapse subcarriers and antennas for positions ``(x[p], y[p])``.

        Returns ``u[p, m]``, the template energy ``a[p]`` and the angles.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        tau, theta, _ = self.geometry(x, y)
        gain = self.tx_gain(theta)                                   # [P, N]
        a_r = steering_vector(theta, self.n_rx)                      # [P, K]
        delay = np.exp(2j * np.pi * self.df * tau[:, None] * self.n_idx)  # conj of template phase
        wn = gain.conj() * delay                                     # [P, N]
        weights = (wn[:, :, None] * a_r.conj()[:, None, :]).reshape(len(x), -1)
        u = weights @ self.yc
        energy = self.n_rx * (np.abs(gain) ** 2 @ self.sym_energy)
        P, NK = weights.shape
        self.counter.add(P * (CEXP * (self.n_sub + self.n_rx + self.w.shape[1])
                              + CMAC * self.n_sub * self.w.shape[1] + CMUL * NK
                              + CMAC * NK * self.n_sym))
        return u, energy, theta

    def doppler(self, theta, vx, vy):
        return self.kappa * (vx * np.cos(theta) + vy * np.sin(theta))

    def velocity_pairs(self, u, theta, vx, vy):
        """b[p, j] for per-position velocity sets ``vx[p, j], vy[p, j]``.

        sum_m u[p, m] r^m with r = exp(-j 2 pi T nu) is a polynomial in r and
        is evaluated by Horner's rule, one exponential per pair.
        """
        nu = self.doppler(theta[:, None], vx, vy)
        r = np.exp(-2j * np.pi * self.T * nu)
        b = np.repeat(u[:, -1:], r.shape[1], axis=1)
        for m in range(self.n_sym - 2, -1, -1):
            b *= r
            b += u[:, m:m + 1]
        self.counter.add(nu.size * (CEXP + CMAC * self.n_sym))
        return b

    def _phasors(self, coef, grid):
        """exp(-j 2 pi T m coef[p] grid[i]) as [P, V, M].

        On a uniform grid the table is a running product along the grid axis,
        which needs two exponentials per (p, m) instead of V.
        """
        arg = -2j * np.pi * self.T * self.m_idx
        steps = np.diff(grid)
        P, V, M = len(coef), len(grid), self.n_sym
        if V > 2 and np.allclose(steps, steps[0], rtol=1e-12, atol=0):
            first = np.exp(arg * (coef[:, None] * grid[0]))
            step = np.exp(arg * (coef[:, None] * steps[0]))
            out = np.empty((P, V, M), dtype=complex)
            out[:, 0] = first
            for i in range(1, V):
                np.multiply(out[:, i - 1], step, out=out[:, i])
            self.counter.add(P * M * (2 * CEXP + CMUL * (V - 1)))
            return out
        self.counter.add(P * M * V * CEXP)
        return np.exp(arg * (coef[:, None, None] * grid[None, :, None]))

    def velocity_grid(self, u, theta, vx_grid, vy_grid):
        """b[p, ix, iy] on a tensor velocity grid (same grid for every position)."""
        vx_grid = np.asarray(vx_grid, dtype=float)
        vy_grid = np.asarray(vy_grid, dtype=float)
        ex = self._phasors(self.kappa * np.cos(theta), vx_grid)       # [P, Vx, M]
        ey = self._phasors(self.kappa * np.sin(theta), vy_grid)       # [P, Vy, M]
        b = np.matmul(ex * u[:, None, :], ey.transpose(0, 2, 1))
        P, Vx, Vy = b.shape
        self.counter.add(P * self.n_sym * (CMUL * Vx + CMAC * Vx * Vy))
        return b

    def correlate(self, xi):
        """(a, b) at target states ``xi[..., 4]`` without structure sharing."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        u, energy, theta = self.position_stage(xi[:, 0], xi[:, 1])
        b = self.velocity_pairs(u, theta, xi[:, 2:3], xi[:, 3:4])[:, 0]
        return energy, b

    # -- template and derivatives at one point -------------------------------

    def template(self, xi, derivatives=False):
        """Unit-RCS template at one state; optionally d/d(tau, theta, nu).

        Returns ``zt`` (N, K, M) and, if requested, the three partials stacked
        on a leading axis plus the 3x4 Jacobian of (tau, theta, nu) w.r.t. xi.
        """
        x, y, vx, vy = (float(v) for v in xi)
        tau, theta, rng = self.geometry(x, y)
        tau, theta, rng = float(tau), float(theta), float(rng)
        nu = float(self.doppler(theta, vx, vy))
        n, m = self.n_idx, self.m_idx
        k = np.arange(self.n_rx)
        i = np.arange(self.w.shape[1])
        a_t = np.exp(-1j * np.pi * i * math.sin(theta))
        gain = self.gain * (self.w @ a_t.conj())
        a_r = np.exp(-1j * np.pi * k * math.sin(theta))
        delay = np.exp(-2j * np.pi * self.df * tau * n)
        dopp = np.exp(2j * np.pi * self.T * nu * m)
        s = self.echo.symbols
        base = (gain * delay)[:, None, None] * a_r[None, :, None] * (s * dopp)[:, None, :]
        self.counter.add(base.size * 2 * CMUL)
        if not derivatives:
            return base
        c = math.cos(theta)
        d_gain = self.gain * (self.w @ (a_t.conj() * (1j * np.pi * i * c)))
        d_tau = base * (-2j * np.pi * self.df * n)[:, None, None]
        d_nu = base * (2j * np.pi * self.T * m)[None, None, :]
        d_theta = base * (-1j * np.pi * k * c)[None, :, None] + (
            (d_gain * delay)[:, None, None] * a_r[None, :, None] * (s * dopp)[:, None, :]
        )
        dx = x - self.origin[0]
        dy = y - self.origin[1]
        r2 = rng * rng
        dtheta = np.array([-dy / r2, dx / r2, 0.0, 0.0])
        dtau = np.array([2 * dx / (rng * SPEED_OF_LIGHT), 2 * dy / (rng * SPEED_OF_LIGHT), 0.0, 0.0])
        dnu_dtheta = self.kappa * (-vx * math.sin(theta) + vy * c)
        dnu = dnu_dtheta * dtheta + np.array([0.0, 0.0, self.kappa * c, self.kappa * math.sin(theta)])
        jac = np.vstack([dtau, dtheta, dnu])
        self.counter.add(base.size * 5 * CMUL)
        return base, np.stack([d_tau, d_theta, d_nu]), jac


def profile_loglik(energy, b, noise_variance):
    """max over alpha of the log-likelihood, offset so that ||y||^2 drops out."""
    return np.abs(b) ** 2 / (energy * noise_variance)


def marginal_loglik(energy, b, noise_variance, alpha_mean=0.0, alpha_var=1.0):
    """log of the likelihood integrated against CN(alpha; mean, var), up to
    a constant independent of the target state."""
    prec = energy / noise_variance + 1.0 / alpha_var
    h = b / noise_variance + alpha_mean / alpha_var
    return np.abs(h) ** 2 / prec - np.log(prec)


# ---------------------------------------------------------------------------
# Gauss-Newton on the alpha-profiled objective


def _profiled_alpha(energy, b, noise_variance, alpha_prior):
    if alpha_prior is None:
        return b / energy
    mu, var = alpha_prior
    return (b / noise_variance + mu / var) / (energy / noise_variance + 1.0 / var)


def profiled_objective(corr: EchoCorrelator, xi, alpha_prior=None) -> float:
    """||y - a zt||^2 / s2 (+ |a - mu|^2 / v) at the profiled alpha."""
    energy, b = corr.correlate(xi)
    energy, b = float(energy[0]), complex(b[0])
    s2 = corr.noise_variance
    al = _profiled_alpha(energy, b, s2, alpha_prior)
    phi = (corr.y_energy - 2 * (al.conjugate() * b).real + abs(al) ** 2 * energy) / s2
    if alpha_prior is not None:
        phi += abs(al - alpha_prior[0]) ** 2 / alpha_prior[1]
    return float(phi)


def gn_terms(corr: EchoCorrelator, xi, alpha_prior=None):
    """Objective, gradient and Gauss-Newton Hessian in xi with alpha profiled out.

    ``alpha_prior`` is ``(mean, variance)`` of a circular complex Gaussian or
    None for a flat prior. The Hessian is the Schur complement of the joint
    (xi, Re alpha, Im alpha) Gauss-Newton matrix, i.e. the Laplace precision
    of xi with alpha integrated out.
    """
    zt, dz, jac = corr.template(xi, derivatives=True)
    basis = np.vstack([zt.ravel(), dz.reshape(3, -1)])
    gram = basis.conj() @ basis.T
    proj = basis.conj() @ corr.echo.y.ravel()
    corr.counter.add(CMAC * basis.shape[1] * 14)
    s2 = corr.noise_variance
    energy, b = gram[0, 0].real, proj[0]
    al = _profiled_alpha(energy, b, s2, alpha_prior)
    phi = (corr.y_energy - 2 * (al.conjugate() * b).real + abs(al) ** 2 * energy) / s2
    coef = np.zeros((4, 6), dtype=complex)
    coef[1:, :4] = al * jac
    coef[0, 4], coef[0, 5] = 1.0, 1j
    jhj = coef.conj().T @ gram @ coef
    jhr = coef.conj().T @ (proj - al * gram[:, 0])
    hess = 2.0 * jhj.real / s2
    grad = -2.0 * jhr.real / s2
    if alpha_prior is not None:
        mu, var = alpha_prior
        phi += abs(al - mu) ** 2 / var
        hess[4, 4] += 2.0 / var
        hess[5, 5] += 2.0 / var
        grad[4] += 2.0 * (al - mu).real / var
        grad[5] += 2.0 * (al - mu).imag / var
    haa, hxa = hess[4:, 4:], hess[:4, 4:]
    schur = hess[:4, :4] - hxa @ np.linalg.solve(haa, hxa.T)
    g = grad[:4] - hxa @ np.linalg.solve(haa, grad[4:])
    return float(phi), g, 0.5 * (schur + schur.T), al


def gauss_newton(correlators, xi0, prior_mean=None, prior_var=None, alpha_priors=None,
                 iters: int = 8, step_tol: float = 1e-7):
    """Levenberg-damped Gauss-Newton minimum of
    sum_l phi_l(xi) + sum_q (xi_q - m_q)^2 / (2 v_q).

    Returns (xi, hessian, objective, alphas, n_iterations).
    """
    alpha_priors = alpha_priors or [None] * len(correlators)
    xi = np.asarray(xi0, dtype=float).copy()
    pm = None if prior_mean is None else np.asarray(prior_mean, dtype=float)
    pp = None if prior_var is None else 1.0 / np.asarray(prior_var, dtype=float)

    def terms(x):
        phi, g, h, als = 0.0, np.zeros(4), np.zeros((4, 4)), []
        for c, ap in zip(correlators, alpha_priors):
            p_, g_, h_, a_ = gn_terms(c, x, ap)
            phi, g, h = phi + p_, g + g_, h + h_
            als.append(a_)
        if pm is not None:
            d = x - pm
            phi += 0.5 * float(np.sum(pp * d * d))
            g = g + pp * d
            h = h + np.diag(pp)
        return phi, g, h, als

    def objective(x):
        val = sum(profiled_objective(c, x, ap) for c, ap in zip(correlators, alpha_priors))
        if pm is not None:
            val += 0.5 * float(np.sum(pp * (x - pm) ** 2))
        return val

    phi, g, h, als = terms(xi)
    lam = 1e-6
    it = 0
    for it in range(1, iters + 1):
        scale = np.sqrt(np.maximum(np.diag(h), 1e-300))
        accepted = False
        for _ in range(12):
            hd = h / np.outer(scale, scale) + lam * np.eye(4)
            try:
                step = -np.linalg.solve(hd, g / scale) / scale
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = xi + step
            if np.all(np.isfinite(cand)) and objective(cand) <= phi:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        xi = cand
        lam = max(lam / 10.0, 1e-9)
        phi, g, h, als = terms(xi)
        if np.all(np.abs(step) * scale < step_tol):
            break
    return xi, h, phi, als, it
