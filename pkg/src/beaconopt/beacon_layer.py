"""Learnable beacon placement: logits, annealed softmax, hardening, regularizer."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np


def init_logits(L: int, C: int, rng: np.random.Generator, std: float = 0.01) -> np.ndarray:
    return rng.normal(0.0, std, size=(L, C + 1))


def softmax_assign(w: np.ndarray, alpha: float) -> np.ndarray:
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    z = alpha * np.asarray(w, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(soft: np.ndarray, alpha: float, dsoft: np.ndarray) -> np.ndarray:
    if soft.shape != dsoft.shape:
        raise ValueError(f"shape mismatch: {soft.shape} vs {dsoft.shape}")
    inner = np.sum(soft * dsoft, axis=1, keepdims=True)
    return alpha * soft * (dsoft - inner)


def harden_slots(w: np.ndarray) -> np.ndarray:
    """Index of the largest logit per row; ties go to the lowest index."""
    return np.argmax(np.asarray(w), axis=1)


def onehot(slots: np.ndarray, n_slots: int) -> np.ndarray:
    out = np.zeros((len(slots), n_slots))
    out[np.arange(len(slots)), slots] = 1.0
    return out


@dataclass
class Placement:
    """Hard beacon assignment over a set of sites.

    ``slots[l] == 0`` means no beacon at site ``l``; ``slots[l] == c + 1``
    means a beacon broadcasting on channel ``c``.
    """

    sites: np.ndarray  # (L, 2)
    slots: np.ndarray  # (L,) ints in 0..C
    n_channels: int
    map_name: str = ""

    def __post_init__(self):
        self.sites = np.asarray(self.sites, dtype=np.float64).reshape(-1, 2)
        self.slots = np.asarray(self.slots, dtype=np.int64).reshape(-1)
        if len(self.sites) != len(self.slots):
            raise ValueError(f"{len(self.sites)} sites but {len(self.slots)} assignments")
        if np.any(self.slots < 0) or np.any(self.slots > self.n_channels):
            raise ValueError(f"assignments must lie in 0..{self.n_channels}")

    @property
    def assign(self) -> np.ndarray:
        return onehot(self.slots, self.n_channels + 1)

    @property
    def beacon_count(self) -> int:
        return int(np.count_nonzero(self.slots))

    def channel_sites(self) -> list[np.ndarray]:
        return [self.sites[self.slots == c + 1] for c in range(self.n_channels)]

    def to_dict(self) -> dict:
        return {
            "map": self.map_name,
            "C": self.n_channels,
            "assignments": self.slots.tolist(),
            "locations": self.sites.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Placement":
        slots = np.asarray(doc["assignments"], dtype=np.int64)
        slots[slots == -1] = 0
        return cls(sites=np.asarray(doc["locations"], dtype=np.float64), slots=slots,
                   n_channels=int(doc["C"]), map_name=doc.get("map", ""))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "Placement":
        return cls.from_dict(json.loads(Path(path).read_text()))


def harden(w: np.ndarray, sites: np.ndarray, map_name: str = "") -> Placement:
    w = np.asarray(w)
    return Placement(sites=sites, slots=harden_slots(w), n_channels=w.shape[1] - 1,
                     map_name=map_name)


def regularizer(soft: np.ndarray, lam: float, sign: str = "intent") -> tuple[float, np.ndarray]:
    """Beacon-count penalty and its gradient w.r.t. the relaxed assignment.

    ``sign="intent"`` penalizes beacon mass, lam * sum(1 - soft[:, 0]);
    ``sign="as_printed"`` is lam * sum(soft[:, 0]).
    """
    grad = np.zeros_like(soft)
    if sign == "intent":
        value = lam * float(np.sum(1.0 - soft[:, 0]))
        grad[:, 0] = -lam
    elif sign == "as_printed":
        value = lam * float(np.sum(soft[:, 0]))
        grad[:, 0] = lam
    else:
        raise ValueError(f"unknown regularizer sign {sign!r}")
    return value, grad


@dataclass(frozen=True)
class TemperatureSchedule:
    alpha0: float = 1.0
    gamma: float = 1.25e-9
    argmax_switch_iter: int = 900_000

    def __post_init__(self):
        if self.alpha0 <= 0 or self.gamma < 0:
            raise ValueError("TemperatureSchedule needs alpha0 > 0 and gamma >= 0")


class Temperature(NamedTuple):
    alpha: float
    hard: bool  # past the argmax switch: use the hardened placement


def alpha_at(t: int, sched: TemperatureSchedule) -> Temperature:
    if t < 0:
        raise ValueError(f"iteration must be >= 0, got {t}")
    alpha = sched.alpha0 * (1.0 + sched.gamma * float(t * t))
    return Temperature(alpha, t >= sched.argmax_switch_iter)


@dataclass(frozen=True)
class RegSchedule:
    mode: str = "fixed"  # fixed | annealed
    lambda0: float = 0.04
    eta: float = 0.25
    period: int = 100_000
    sign: str = "intent"

    def __post_init__(self):
        if self.mode not in ("fixed", "annealed"):
            raise ValueError(f"RegSchedule.mode must be fixed or annealed, got {self.mode!r}")
        if self.lambda0 < 0:
            raise ValueError("RegSchedule.lambda0 must be >= 0")
        if self.mode == "annealed" and (self.period < 1 or not 0 < self.eta <= 1):
            raise ValueError("annealed RegSchedule needs period >= 1 and eta in (0, 1]")
        if self.sign not in ("intent", "as_printed"):
            raise ValueError(f"RegSchedule.sign must be intent or as_printed, got {self.sign!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def lambda_at(t: int, sched: RegSchedule) -> float:
    if sched.mode == "fixed":
        return sched.lambda0
    return sched.lambda0 * sched.eta ** (t // sched.period)
