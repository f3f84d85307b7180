"""Scene configuration: TOML ingestion, validation and defaults."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .errors import ConfigError
from .forward import SPEED_OF_LIGHT, ArrayConfig, BsGeometry, OfdmConfig, TargetState

METHODS = ("single_bs", "param_fusion", "hgamp", "signal_ml")


@dataclass(frozen=True)
class SceneBox:
    x_m: tuple[float, float] = (-25.0, 125.0)
    y_m: tuple[float, float] = (-25.0, 125.0)
    vx_mps: tuple[float, float] = (-100.0, 100.0)
    vy_mps: tuple[float, float] = (-100.0, 100.0)

    def __post_init__(self):
        for name in ("x_m", "y_m", "vx_mps", "vy_mps"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"box {name} must satisfy lo < hi")

    def bounds(self):
        return (self.x_m, self.y_m, self.vx_mps, self.vy_mps)

    def contains(self, xi, scale=1.0) -> bool:
        for v, (lo, hi) in zip(xi, self.bounds()):
            c, h = 0.5 * (lo + hi), 0.5 * (hi - lo) * scale
            if not c - h <= v <= c + h:
                return False
        return True


@dataclass(frozen=True)
class PriorConfig:
    position_mean_m: tuple[float, float] | None = None   # None: BS centroid
    position_sd_m: float = 100.0
    velocity_mean_mps: tuple[float, float] = (0.0, 0.0)
    velocity_sd_mps: float = 50.0

    def __post_init__(self):
        if not (self.position_sd_m > 0 and self.velocity_sd_mps > 0):
            raise ValueError("prior standard deviations must be > 0")


@dataclass(frozen=True)
class HgampConfig:
    max_outer: int = 50
    damping: float = 0.7
    tol: float = 1e-4
    gh_nodes: int = 5
    grid_points: int = 33
    window_k: float = 4.0
    window_cap: float = 10.0
    max_zoom: int = 3
    variance_floor: float = 1e-8
    inner_sweeps: int = 1
    gn_iters: int = 8

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError("damping must be in (0, 1]")
        if self.max_outer < 1 or self.gh_nodes < 1 or self.grid_points < 3 or self.inner_sweeps < 1:
            raise ValueError("hgamp counts out of range")
        if not self.variance_floor > 0:
            raise ValueError("variance_floor must be > 0")


@dataclass(frozen=True)
class SignalMlConfig:
    pos_points: int = 41
    vel_points: int = 21
    refine_levels: int = 2
    shrink: float = 5.0
    polish: bool = True

    def __post_init__(self):
        if self.pos_points < 3 or self.vel_points < 3 or self.shrink <= 1:
            raise ValueError("signal_ml grid settings out of range")


@dataclass(frozen=True)
class BaselineConfig:
    delay_bins: int = 256
    doppler_bins: int = 512
    music_step_deg: float = 0.1

    def __post_init__(self):
        if self.delay_bins < 3 or self.doppler_bins < 3 or self.music_step_deg <= 0:
            raise ValueError("baseline grid settings out of range")


@dataclass(frozen=True)
class OracleConfig:
    n_instances: int = 5
    xi_points: int = 5
    alpha_points: int = 9
    alpha_box_sd: float = 4.0
    position_halfwidth_m: float = 6.0
    velocity_halfwidth_mps: float = 200.0
    max_iters: int = 200
    tol: float = 1e-10
    tv_tolerance: float = 1e-6
    seed: int = 7

    def __post_init__(self):
        if self.xi_points < 2 or self.alpha_points < 2:
            raise ValueError("oracle grids need >= 2 points per axis")


@dataclass(frozen=True)
class SceneConfig:
    ofdm: OfdmConfig
    array: ArrayConfig
    stations: tuple[BsGeometry, ...]
    truth: TargetState
    noise_variance: float = 0.01
    tx_power_w: float = 5.0
    snr_db: tuple[float, ...] = (-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0)
    n_trials: int = 100
    seed: int = 2024
    methods: tuple[str, ...] = METHODS
    beamformer: str = "target"
    pointing_deg: tuple[float, ...] | None = None
    single_bs_index: int = 0
    box: SceneBox = field(default_factory=SceneBox)
    priors: PriorConfig = field(default_factory=PriorConfig)
    hgamp: HgampConfig = field(default_factory=HgampConfig)
    signal_ml: SignalMlConfig = field(default_factory=SignalMlConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    defaults_filled: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.stations) < 1:
            raise ConfigError("at least one station required", field="stations")
        if len(self.ofdm.carrier_freq_hz) != len(self.stations):
            raise ConfigError("one carrier frequency per station required", field="ofdm.carrier_freq_hz")
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1", field="n_trials")
        if not self.noise_variance > 0:
            raise ConfigError("noise_variance must be > 0", field="noise_variance")
        if not self.tx_power_w > 0:
            raise ConfigError("tx_power_w must be > 0", field="tx_power_w")
        if any(b <= a for a, b in zip(self.snr_db, self.snr_db[1:])):
            raise ConfigError("snr_db must be strictly increasing", field="snr_db")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown methods {bad}", field="methods")
        if self.beamformer not in ("target", "pointing", "broadside", "random"):
            raise ConfigError(f"unknown beamformer {self.beamformer!r}", field="beamformer")
        if self.beamformer == "pointing" and (
            self.pointing_deg is None or len(self.pointing_deg) != len(self.stations)
        ):
            raise ConfigError("pointing mode needs one angle per station", field="pointing_deg")
        if not 0 <= self.single_bs_index < len(self.stations):
            raise ConfigError("single_bs_index out of range", field="single_bs_index")
        for st in self.stations:
            if math.hypot(self.truth.x0_m - st.position_m[0], self.truth.y0_m - st.position_m[1]) == 0:
                raise ConfigError("target colocated with a station", field="target")

    @property
    def n_stations(self) -> int:
        return len(self.stations)

    def prior_means(self):
        pm = self.priors.position_mean_m
        if pm is None:
            pm = tuple(sum(s.position_m[i] for s in self.stations) / self.n_stations for i in (0, 1))
        return (pm[0], pm[1], *self.priors.velocity_mean_mps)

    def prior_variances(self):
        p, v = self.priors.position_sd_m ** 2, self.priors.velocity_sd_mps ** 2
        return (p, p, v, v)

    def replace(self, **changes) -> "SceneConfig":
        return dataclasses.replace(self, **changes)

    def resolved_dict(self) -> dict:
        d = _to_plain(self)
        d.pop("defaults_filled")
        return {"config": d, "defaults_filled": list(self.defaults_filled)}


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


# ---------------------------------------------------------------------------
# parsing

_TOP_KEYS = {
    "noise_variance", "tx_power_w", "snr_db", "n_trials", "seed", "methods", "beamformer",
    "pointing_deg", "single_bs_index",
}
_SECTIONS = {
    "box": SceneBox, "priors": PriorConfig, "hgamp": HgampConfig, "signal_ml": SignalMlConfig,
    "baselines": BaselineConfig, "oracle": OracleConfig,
}
_OFDM_KEYS = {"n_subcarriers", "n_symbols", "subcarrier_spacing_hz", "symbol_duration_s",
              "cp_fraction", "carrier_freq_hz"}
_OFDM_DEFAULTS = {"n_subcarriers": 36, "n_symbols": 64, "subcarrier_spacing_hz": 120e3,
                  "cp_fraction": 0.25, "carrier_freq_hz": 3.5e9}
_STATION_KEYS = {"position_m", "rcs_variance", "path_loss"}
_TARGET_KEYS = {"x0_m", "y0_m", "vx_mps", "vy_mps"}


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _check_keys(section: str, given: dict, allowed):
    extra = set(given) - set(allowed)
    if extra:
        name = sorted(extra)[0]
        raise ConfigError(f"unknown key {name!r}", field=f"{section}.{name}" if section else name)


def _build_section(name, cls, raw: dict, filled: list):
    raw = raw or {}
    names = [f.name for f in dataclasses.fields(cls)]
    _check_keys(name, raw, names)
    for n in names:
        if n not in raw:
            filled.append(f"{name}.{n}")
    try:
        return cls(**{k: _tuplify(v) for k, v in raw.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field=name) from exc


def _path_loss(value, station_pos, truth, carrier, field_name):
    if value in (None, "unit"):
        return 1.0
    if value == "free_space":
        r = math.hypot(truth.x0_m - station_pos[0], truth.y0_m - station_pos[1])
        # amplitude of the two-way power loss (c / (4 pi f_c))^2 / r^4
        return (SPEED_OF_LIGHT / (4 * math.pi * carrier)) / r ** 2
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, list) and len(value) == 2:
        return complex(value[0], value[1])
    raise ConfigError(f"bad path_loss {value!r}", field=field_name)


def config_from_dict(raw: dict) -> SceneConfig:
    filled: list[str] = []
    allowed = _TOP_KEYS | set(_SECTIONS) | {"ofdm", "array", "stations", "target"}
    _check_keys("", raw, allowed)

    ofdm_raw = dict(raw.get("ofdm", {}))
    _check_keys("ofdm", ofdm_raw, _OFDM_KEYS)
    for k, v in _OFDM_DEFAULTS.items():
        if k not in ofdm_raw:
            ofdm_raw[k] = v
            filled.append(f"ofdm.{k}")
    stations_raw = raw.get("stations")
    if not stations_raw:
        raise ConfigError("at least one [[stations]] entry required", field="stations")
    n_st = len(stations_raw)
    fc = ofdm_raw["carrier_freq_hz"]
    fc = tuple(float(f) for f in fc) if isinstance(fc, list) else (float(fc),) * n_st
    df = float(ofdm_raw["subcarrier_spacing_hz"])
    cp = float(ofdm_raw.pop("cp_fraction"))
    if cp < 0:
        raise ConfigError("cp_fraction must be >= 0", field="ofdm.cp_fraction")
    if "symbol_duration_s" not in ofdm_raw:
        ofdm_raw["symbol_duration_s"] = (1.0 + cp) / df if df > 0 else 0.0
        filled.append("ofdm.symbol_duration_s")
    try:
        ofdm = OfdmConfig(int(ofdm_raw["n_subcarriers"]), int(ofdm_raw["n_symbols"]), df,
                          float(ofdm_raw["symbol_duration_s"]), fc)
    except ValueError as exc:
        raise ConfigError(str(exc), field="ofdm") from exc

    arr_raw = dict(raw.get("array", {}))
    _check_keys("array", arr_raw, {"n_tx", "n_rx"})
    for k in ("n_tx", "n_rx"):
        if k not in arr_raw:
            arr_raw[k] = 8
            filled.append(f"array.{k}")
    try:
        array = ArrayConfig(int(arr_raw["n_tx"]), int(arr_raw["n_rx"]))
    except ValueError as exc:
        raise ConfigError(str(exc), field="array") from exc

    t_raw = raw.get("target")
    if t_raw is None:
        raise ConfigError("missing [target] section", field="target")
    _check_keys("target", t_raw, _TARGET_KEYS)
    missing = _TARGET_KEYS - set(t_raw)
    if missing:
        raise ConfigError("missing target component", field=f"target.{sorted(missing)[0]}")
    truth = TargetState(**{k: float(v) for k, v in t_raw.items()})

    stations = []
    if len(fc) != n_st:
        raise ConfigError("one carrier frequency per station required", field="ofdm.carrier_freq_hz")
    for i, st in enumerate(stations_raw):
        _check_keys(f"stations[{i}]", st, _STATION_KEYS)
        if "position_m" not in st:
            raise ConfigError("station position required", field=f"stations[{i}].position_m")
        pos = tuple(float(v) for v in st["position_m"])
        if len(pos) != 2:
            raise ConfigError("position must be 2-D", field=f"stations[{i}].position_m")
        if "rcs_variance" not in st:
            filled.append(f"stations[{i}].rcs_variance")
        pl = _path_loss(st.get("path_loss"), pos, truth, fc[i], f"stations[{i}].path_loss")
        try:
            stations.append(BsGeometry(pos, float(st.get("rcs_variance", 1.0)), pl))
        except ValueError as exc:
            raise ConfigError(str(exc), field=f"stations[{i}].rcs_variance") from exc

    sections = {name: _build_section(name, cls, raw.get(name), filled) for name, cls in _SECTIONS.items()}

    top = {}
    defaults = {f.name: f.default for f in dataclasses.fields(SceneConfig)}
    for k in sorted(_TOP_KEYS):
        if k in raw:
            top[k] = _tuplify(raw[k])
        else:
            filled.append(k)
    if "snr_db" in top:
        top["snr_db"] = tuple(float(v) for v in top["snr_db"])
    for k in ("noise_variance", "tx_power_w"):
        if k in top and not isinstance(top[k], (int, float)):
            raise ConfigError("must be a number", field=k)
    for k in ("n_trials", "seed", "single_bs_index"):
        if k in top and not isinstance(top[k], int):
            raise ConfigError("must be an integer", field=k)
    del defaults
    try:
        return SceneConfig(ofdm=ofdm, array=array, stations=tuple(stations), truth=truth,
                           defaults_filled=tuple(filled), **sections, **top)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> SceneConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        line = None
        msg = str(exc)
        if "line " in msg:
            try:
                line = int(msg.split("line ")[1].split(",")[0].rstrip(")"))
            except ValueError:
                pass
        raise ConfigError(f"{path}: parse error: {msg}", line=line) from exc
    return config_from_dict(raw)


def dump_resolved(config: SceneConfig, path) -> None:
    Path(path).write_text(json.dumps(config.resolved_dict(), indent=2))


def paper_scene(**overrides) -> SceneConfig:
    """Three-BS scene with the published geometry and numerology."""
    raw = {
        "stations": [{"position_m": [0.0, 0.0]}, {"position_m": [100.0, 100.0]},
                     {"position_m": [50.0, 100.0]}],
        "target": {"x0_m": 60.0, "y0_m": 40.0, "vx_mps": 30.0, "vy_mps": 50.0},
        "ofdm": {"n_subcarriers": 36, "n_symbols": 64},
        "array": {"n_tx": 8, "n_rx": 8},
        "noise_variance": 0.01,
        "tx_power_w": 5.0,
    }
    cfg = config_from_dict(raw)
    return cfg.replace(**overrides) if overrides else cfg
