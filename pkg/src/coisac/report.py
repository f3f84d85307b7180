"""Result containers shared by every estimator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class OverheadCounter:
    scalars_uplinked: int = 0
    scalars_downlinked: int = 0
    flops_local: int = 0
    flops_global: int = 0

    def uplink(self, n: int) -> None:
        self.scalars_uplinked += int(n)

    def downlink(self, n: int) -> None:
        self.scalars_downlinked += int(n)

    @property
    def flops(self) -> int:
        return self.flops_local + self.flops_global

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class EstimationReport:
    method: str
    xi_hat: np.ndarray
    alpha_hat: list = field(default_factory=list)
    variances: np.ndarray | None = None
    converged: bool = True
    iterations: int = 0
    trace: list = field(default_factory=list)
    overhead: OverheadCounter = field(default_factory=OverheadCounter)
    flags: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    runtime_s: float = 0.0

    def position_error(self, truth) -> float:
        t = np.asarray(truth, dtype=float)
        return float(np.hypot(*(self.xi_hat[:2] - t[:2])))

    def velocity_error(self, truth) -> float:
        t = np.asarray(truth, dtype=float)
        return float(np.hypot(*(self.xi_hat[2:] - t[2:])))

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "xi_hat": [float(v) for v in self.xi_hat],
            "alpha_hat": [[float(np.real(a)), float(np.imag(a))] for a in self.alpha_hat],
            "variances": None if self.variances is None else [float(v) for v in self.variances],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "overhead": self.overhead.as_dict(),
            "flags": list(self.flags),
            "extra": _plain(self.extra),
            "runtime_s": float(self.runtime_s),
        }


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj
