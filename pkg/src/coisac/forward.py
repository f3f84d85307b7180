"""Geometry, steering vectors and OFDM radar echo synthesis.

Echo tensors are laid out as ``y[n, k, m]``: subcarrier ``n``, receive
antenna ``k``, OFDM symbol ``m``. All processing happens after the FFT, so
the model is the per-subcarrier frequency-domain echo

    y[n, k, m] = alpha * gain_n(theta) * a_r[k](theta) * s[n, m]
                 * exp(-2j pi tau n df) * exp(2j pi nu m T) + noise

with ``gain_n(theta) = beta * a_t(theta)^H w_n``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometryError, DimensionError

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class OfdmConfig:
    n_subcarriers: int
    n_symbols: int
    subcarrier_spacing_hz: float
    symbol_duration_s: float
    carrier_freq_hz: tuple[float, ...]

    def __post_init__(self):
        if self.n_subcarriers < 1 or self.n_symbols < 1:
            raise ValueError("n_subcarriers and n_symbols must be >= 1")
        if self.subcarrier_spacing_hz <= 0:
            raise ValueError("subcarrier_spacing_hz must be > 0")
        # tolerate round-off when T was computed as exactly 1/df
        if self.symbol_duration_s * self.subcarrier_spacing_hz < 1.0 - 1e-12:
            raise ValueError("symbol_duration_s must be >= 1/subcarrier_spacing_hz")
        if any(f <= 0 for f in self.carrier_freq_hz):
            raise ValueError("carrier frequencies must be > 0")


@dataclass(frozen=True)
class ArrayConfig:
    n_tx: int
    n_rx: int

    def __post_init__(self):
        if self.n_tx < 1 or self.n_rx < 1:
            raise ValueError("array sizes must be >= 1")


@dataclass(frozen=True)
class BsGeometry:
    position_m: tuple[float, float]
    rcs_variance: float = 1.0
    path_loss: complex = 1.0

    def __post_init__(self):
        if not self.rcs_variance > 0:
            raise ValueError("rcs_variance must be > 0")


@dataclass(frozen=True)
class TargetState:
    x0_m: float
    y0_m: float
    vx_mps: float
    vy_mps: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x0_m, self.y0_m, self.vx_mps, self.vy_mps])

    @classmethod
    def from_array(cls, xi) -> "TargetState":
        xi = np.asarray(xi, dtype=float)
        return cls(float(xi[0]), float(xi[1]), float(xi[2]), float(xi[3]))


@dataclass(frozen=True)
class PropagationParams:
    delay_s: float
    azimuth_rad: float
    doppler_hz: float


@dataclass
class EchoBlock:
    """Received tensor of one BS plus the waveform that produced it."""

    y: np.ndarray
    symbols: np.ndarray
    beamformers: np.ndarray
    noise_variance: float
    bs_index: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.y.ndim != 3:
            raise DimensionError(f"echo tensor must be 3-D, got shape {self.y.shape}")
        n, _, m = self.y.shape
        if self.symbols.shape != (n, m):
            raise DimensionError(
                f"symbols shape {self.symbols.shape} does not match echo {(n, m)}"
            )
        if self.beamformers.ndim != 2 or self.beamformers.shape[0] != n:
            raise DimensionError(
                f"beamformers shape {self.beamformers.shape} does not match N={n}"
            )
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be > 0")

    @property
    def shape(self):
        return self.y.shape

    def check_against(self, scene):
        expected = (scene.ofdm.n_subcarriers, scene.array.n_rx, scene.ofdm.n_symbols)
        if self.y.shape != expected:
            raise DimensionError(f"echo shape {self.y.shape} != scene shape {expected}")
        if self.beamformers.shape[1] != scene.array.n_tx:
            raise DimensionError(
                f"beamformer length {self.beamformers.shape[1]} != n_tx {scene.array.n_tx}"
            )


# ---------------------------------------------------------------------------
# geometry and steering


def propagation_params(bs: BsGeometry, target: TargetState, carrier_hz: float) -> PropagationParams:
    dx = target.x0_m - bs.position_m[0]
    dy = target.y0_m - bs.position_m[1]
    rng = math.hypot(dx, dy)
    if rng == 0.0:
        raise DegenerateGeometryError("target is colocated with the base station")
    theta = math.atan2(dy, dx)
    nu = 2.0 * carrier_hz / SPEED_OF_LIGHT * (
        target.vx_mps * math.cos(theta) + target.vy_mps * math.sin(theta)
    )
    return PropagationParams(2.0 * rng / SPEED_OF_LIGHT, theta, nu)


def steering_vector(theta_rad, count: int) -> np.ndarray:
    """Half-wavelength ULA response, element k = exp(-j k pi sin theta).

    Vectorised over ``theta_rad``; the element axis is last.
    """
    if count < 1:
        raise ValueError("element count must be >= 1")
    k = np.arange(count)
    s = np.sin(np.asarray(theta_rad, dtype=float))[..., None]
    return np.exp(-1j * np.pi * k * s)


def steering_tx(theta_rad, n_tx: int) -> np.ndarray:
    return steering_vector(theta_rad, n_tx)


def steering_rx(theta_rad, n_rx: int) -> np.ndarray:
    return steering_vector(theta_rad, n_rx)


def delay_phase_matrix(tau_s: float, n_subcarriers: int, spacing_hz: float) -> np.ndarray:
    n = np.arange(n_subcarriers)
    return np.diag(np.exp(-2j * np.pi * tau_s * n * spacing_hz))


def doppler_phase_matrix(nu_hz: float, n_symbols: int, symbol_s: float) -> np.ndarray:
    m = np.arange(n_symbols)
    return np.diag(np.exp(2j * np.pi * nu_hz * m * symbol_s))


def tx_gains(theta_rad, beamformers: np.ndarray, beta=1.0) -> np.ndarray:
    """Per-subcarrier transmit gains beta * a_t(theta)^H w_n.

    ``theta_rad`` may be an array; the result then has shape theta.shape + (N,).
    """
    a_t = steering_vector(theta_rad, beamformers.shape[1])
    return beta * np.einsum("...i,ni->...n", a_t.conj(), beamformers)


def tx_gain_matrix(theta_rad: float, beamformers: np.ndarray, beta=1.0) -> np.ndarray:
    return np.diag(tx_gains(theta_rad, beamformers, beta))


# ---------------------------------------------------------------------------
# waveform


def qpsk_symbols(rng: np.random.Generator, n_subcarriers: int, n_symbols: int) -> np.ndarray:
    bits = rng.integers(0, 4, size=(n_subcarriers, n_symbols))
    return np.exp(1j * (np.pi / 4 + np.pi / 2 * bits))


def make_beamformers(mode: str, n_subcarriers: int, n_tx: int, pointing_rad: float = 0.0,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Unit-norm beamformers, one row per subcarrier."""
    if mode in ("target", "pointing"):
        w = steering_tx(pointing_rad, n_tx) / math.sqrt(n_tx)
        return np.tile(w, (n_subcarriers, 1))
    if mode == "broadside":
        return np.tile(steering_tx(0.0, n_tx) / math.sqrt(n_tx), (n_subcarriers, 1))
    if mode == "random":
        if rng is None:
            raise ValueError("random beamformers need an rng")
        w = rng.standard_normal((n_subcarriers, n_tx)) + 1j * rng.standard_normal((n_subcarriers, n_tx))
        return w / np.linalg.norm(w, axis=1, keepdims=True)
    raise ValueError(f"unknown beamformer mode {mode!r}")


def station_gain(scene, bs_index: int) -> complex:
    """Scalar gain beta_l * sqrt(P) applied on top of a_t^H w."""
    return complex(scene.stations[bs_index].path_loss) * math.sqrt(scene.tx_power_w)


def pointing_angle(scene, bs_index: int, target: TargetState) -> float:
    if scene.beamformer == "pointing":
        return math.radians(scene.pointing_deg[bs_index])
    if scene.beamformer == "target":
        st = scene.stations[bs_index]
        return math.atan2(target.y0_m - st.position_m[1], target.x0_m - st.position_m[0])
    return 0.0


def unit_model(scene, bs_index: int, target: TargetState, symbols: np.ndarray,
               beamformers: np.ndarray) -> np.ndarray:
    """Noise-free echo with alpha = 1, built element-wise."""
    ofdm = scene.ofdm
    p = propagation_params(scene.stations[bs_index], target, ofdm.carrier_freq_hz[bs_index])
    n = np.arange(ofdm.n_subcarriers)
    m = np.arange(ofdm.n_symbols)
    gain = tx_gains(p.azimuth_rad, beamformers, station_gain(scene, bs_index))
    a_r = steering_rx(p.azimuth_rad, scene.array.n_rx)
    delay = np.exp(-2j * np.pi * p.delay_s * n * ofdm.subcarrier_spacing_hz)
    dopp = np.exp(2j * np.pi * p.doppler_hz * m * ofdm.symbol_duration_s)
    return (
        (gain * delay)[:, None, None]
        * a_r[None, :, None]
        * (symbols * dopp[None, :])[:, None, :]
    )


def stacked_model(scene, bs_index: int, target: TargetState, symbols: np.ndarray,
                  beamformers: np.ndarray) -> np.ndarray:
    """Noise-free alpha = 1 echo as the (N*Nr x M) stacked matrix.

    Built as (I_N kron a_r) D_tau D_l S D_nu; row n*Nr + k holds y[n, k, :].
    """
    ofdm = scene.ofdm
    p = propagation_params(scene.stations[bs_index], target, ofdm.carrier_freq_hz[bs_index])
    a_r = steering_rx(p.azimuth_rad, scene.array.n_rx)[:, None]
    left = np.kron(np.eye(ofdm.n_subcarriers), a_r)
    d_tau = delay_phase_matrix(p.delay_s, ofdm.n_subcarriers, ofdm.subcarrier_spacing_hz)
    d_l = tx_gain_matrix(p.azimuth_rad, beamformers, station_gain(scene, bs_index))
    d_nu = doppler_phase_matrix(p.doppler_hz, ofdm.n_symbols, ofdm.symbol_duration_s)
    return left @ d_tau @ d_l @ symbols @ d_nu


def synthesize_echo(scene, target: TargetState, alpha: complex, bs_index: int, rng_seed,
                    noise_variance: float | None = None) -> EchoBlock:
    """Draw symbols (and random beamformers, if configured) and noise, then
    synthesize the echo of BS ``bs_index``.

    ``rng_seed`` is an int seed or a ``numpy.random.Generator``; the draw
    order is symbols, beamformers (random mode only), noise.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    nv = scene.noise_variance if noise_variance is None else noise_variance
    if not nv > 0:
        raise ValueError("noise variance must be > 0")
    ofdm, arr = scene.ofdm, scene.array
    symbols = qpsk_symbols(rng, ofdm.n_subcarriers, ofdm.n_symbols)
    pointing = pointing_angle(scene, bs_index, target)
    w = make_beamformers(scene.beamformer, ofdm.n_subcarriers, arr.n_tx, pointing, rng)
    clean = alpha * unit_model(scene, bs_index, target, symbols, w)
    shape = clean.shape
    noise = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * math.sqrt(nv / 2.0)
    return EchoBlock(clean + noise, symbols, w, nv, bs_index, meta={"pointing_rad": pointing})


def log_likelihood(echo: EchoBlock, scene, bs_index: int, target: TargetState, alpha: complex) -> float:
    """-||y - z||^2 / sigma^2; the additive constant is zero so a perfect fit scores 0."""
    echo.check_against(scene)
    z = alpha * unit_model(scene, bs_index, target, echo.symbols, echo.beamformers)
    return -float(np.sum(np.abs(echo.y - z) ** 2)) / echo.noise_variance


def ls_rcs_coefficient(echo: EchoBlock, scene, bs_index: int, target: TargetState) -> complex:
    """Maximiser over alpha of the log-likelihood for fixed target state."""
    zt = unit_model(scene, bs_index, target, echo.symbols, echo.beamformers)
    return complex(np.vdot(zt, echo.y) / np.vdot(zt, zt).real)


def mean_signal_power(scene, bs_index: int, target: TargetState) -> float:
    """E|noise-free element|^2 with unit RCS variance and unit-modulus symbols."""
    if scene.beamformer == "random":
        # E|a_t^H w|^2 = 1 for isotropic unit-norm w
        return float(abs(station_gain(scene, bs_index)) ** 2)
    w = make_beamformers(scene.beamformer, scene.ofdm.n_subcarriers, scene.array.n_tx,
                         pointing_angle(scene, bs_index, target))
    theta = propagation_params(scene.stations[bs_index], target,
                               scene.ofdm.carrier_freq_hz[bs_index]).azimuth_rad
    g = tx_gains(theta, w, station_gain(scene, bs_index))
    return float(np.mean(np.abs(g) ** 2))


def noise_variance_for_snr(scene, snr_db: float, target: TargetState | None = None) -> float:
    """sigma_r^2 such that mean signal power over BSs / sigma_r^2 equals the SNR."""
    target = scene.truth if target is None else target
    power = np.mean([mean_signal_power(scene, l, target) for l in range(len(scene.stations))])
    return float(power / 10.0 ** (snr_db / 10.0))


# ---------------------------------------------------------------------------
# binary echo export: magic, version, ndim, dims..., then little-endian complex64

_ECHO_MAGIC = b"CEC1"


def write_echo(path, echo: EchoBlock) -> None:
    y = np.ascontiguousarray(echo.y, dtype="<c8")
    with open(path, "wb") as fh:
        fh.write(_ECHO_MAGIC)
        fh.write(struct.pack("<II", 1, y.ndim))
        fh.write(struct.pack(f"<{y.ndim}I", *y.shape))
        fh.write(y.tobytes(order="C"))


def read_echo(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _ECHO_MAGIC:
        raise ValueError(f"{path}: not an echo file")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from(f"<{ndim}I", data, 12)
    offset = 12 + 4 * ndim
    return np.frombuffer(data, dtype="<c8", offset=offset).reshape(dims).copy()
