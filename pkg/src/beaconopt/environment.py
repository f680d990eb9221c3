"""RF signal model: attenuated received power and per-channel measured power.

Measurements are batched: a batch of ``B`` agent locations sees ``L`` beacon
sites, and every measurement draws one phase per site and one (eps1, eps2)
noise pair per channel.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import MapSpec, candidate_locations, crossing_counts


@dataclass(frozen=True)
class PropagationParams:
    P0: float = 6.25e-4
    zeta: float = 2.0
    beta: float = math.exp(-1.0)
    sigma_z2: float = 1e-4
    tau: float = 1.0
    r_min: float = 1e-3

    def __post_init__(self):
        checks = [
            ("P0", self.P0 > 0),
            ("zeta", self.zeta >= 0),
            ("beta", 0 < self.beta <= 1),
            ("sigma_z2", self.sigma_z2 >= 0),
            ("tau", self.tau > 0),
            ("r_min", self.r_min > 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"PropagationParams.{name} out of range: {getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PropagationParams":
        doc = dict(doc)
        # allow beta to be given as a log-attenuation, e.g. {"log_beta": -0.2}
        if "log_beta" in doc:
            doc["beta"] = math.exp(doc.pop("log_beta"))
        return cls(**doc)


@dataclass
class MeasurementDraw:
    phases: np.ndarray  # (..., L) in [0, 2pi)
    noise: np.ndarray   # (..., C, 2)

    @property
    def n_sites(self) -> int:
        return self.phases.shape[-1]

    @property
    def n_channels(self) -> int:
        return self.noise.shape[-2]


@dataclass
class SoftMeasureCache:
    acos: np.ndarray  # (B, L) sqrt(P) cos(phi)
    asin: np.ndarray  # (B, L) sqrt(P) sin(phi)
    re: np.ndarray    # (B, C) eps1 + sum
    im: np.ndarray    # (B, C) eps2 + sum
    power: np.ndarray  # (B, C) pre-clip
    tau: float
    n_slots: int


def received_power(site, v, spec: MapSpec, p: PropagationParams) -> float:
    return float(power_table(np.asarray(v).reshape(1, 2), spec, p,
                             np.asarray(site).reshape(1, 2))[0, 0])


def power_table(points, spec: MapSpec, p: PropagationParams, sites=None) -> np.ndarray:
    """Received power from every site at every point, shape (B, L)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    sites = candidate_locations(spec) if sites is None else np.asarray(sites, dtype=np.float64)
    r = np.maximum(np.hypot(points[:, 0:1] - sites[:, 0], points[:, 1:2] - sites[:, 1]), p.r_min)
    if p.zeta == 2.0:
        falloff = 1.0 / (r * r)
    else:
        falloff = r ** (-p.zeta)
    o = crossing_counts(points, sites, spec.walls)
    if o.size and o.max() > 0:
        falloff *= (p.beta ** np.arange(o.max() + 1))[o]
    return p.P0 * falloff


def amplitude_table(points, spec: MapSpec, p: PropagationParams, sites=None) -> np.ndarray:
    return np.sqrt(power_table(points, spec, p, sites))


def draw_measurement(rng: np.random.Generator, L: int, C: int, p: PropagationParams,
                     batch: int | None = None) -> MeasurementDraw:
    if L < 1 or C < 1:
        raise ValueError(f"L and C must be >= 1, got L={L}, C={C}")
    lead = () if batch is None else (batch,)
    phases = rng.uniform(0.0, 2 * np.pi, size=lead + (L,))
    if p.sigma_z2 == 0:
        noise = np.zeros(lead + (C, 2))
    else:
        noise = rng.normal(0.0, math.sqrt(p.sigma_z2), size=lead + (C, 2))
    return MeasurementDraw(phases=phases, noise=noise)


def _check_onehot(assign: np.ndarray) -> None:
    ok = np.all((assign == 0) | (assign == 1), axis=1) & (assign.sum(axis=1) == 1)
    if not np.all(ok):
        raise ValueError(f"assignment row {int(np.flatnonzero(~ok)[0])} is not one-hot")


def _check_simplex(assign: np.ndarray, tol: float = 1e-9) -> None:
    ok = np.all(assign >= 0, axis=1) & (np.abs(assign.sum(axis=1) - 1.0) <= tol)
    if not np.all(ok):
        raise ValueError(f"assignment row {int(np.flatnonzero(~ok)[0])} is not on the simplex")


def _as_batch(amp, draw):
    amp = np.asarray(amp, dtype=np.float64)
    single = amp.ndim == 1
    amp = amp.reshape(-1, amp.shape[-1])
    phases = draw.phases.reshape(-1, draw.phases.shape[-1])
    noise = draw.noise.reshape(-1, draw.noise.shape[-2], 2)
    if phases.shape != amp.shape or noise.shape[0] != amp.shape[0]:
        raise ValueError(f"draw shape {draw.phases.shape} does not match amplitudes {amp.shape}")
    return amp, phases, noise, single


def signal_from_amplitudes(amp, assign, draw: MeasurementDraw, tau: float):
    """Clipped per-channel power for (relaxed or hard) assignments.

    ``amp`` is (B, L) or (L,); ``assign`` is (L, C+1) with slot 0 meaning
    "no beacon". Returns ``(s, cache)``.
    """
    amp, phases, noise, single = _as_batch(amp, draw)
    assign = np.asarray(assign, dtype=np.float64)
    if assign.shape[0] != amp.shape[1] or assign.shape[1] - 1 != noise.shape[1]:
        raise ValueError(f"assignment shape {assign.shape} incompatible with "
                         f"L={amp.shape[1]}, C={noise.shape[1]}")
    acos = amp * np.cos(phases)
    asin = amp * np.sin(phases)
    chan = assign[:, 1:]
    re = noise[..., 0] + acos @ chan
    im = noise[..., 1] + asin @ chan
    power = re * re + im * im
    s = np.minimum(power, tau)
    cache = SoftMeasureCache(acos, asin, re, im, power, tau, assign.shape[1])
    if single:
        s = s[0]
    return s, cache


def measure_hard(v, assign, spec: MapSpec, p: PropagationParams, draw: MeasurementDraw,
                 sites=None) -> np.ndarray:
    assign = np.asarray(assign)
    _check_onehot(assign)
    amp = amplitude_table(v, spec, p, sites)
    if np.ndim(v) == 1:
        amp = amp[0]
    return signal_from_amplitudes(amp, assign, draw, p.tau)[0]


def measure_soft(v, assign, spec: MapSpec, p: PropagationParams, draw: MeasurementDraw,
                 sites=None):
    assign = np.asarray(assign, dtype=np.float64)
    _check_simplex(assign)
    amp = amplitude_table(v, spec, p, sites)
    if np.ndim(v) == 1:
        amp = amp[0]
    return signal_from_amplitudes(amp, assign, draw, p.tau)


def measure_soft_backward(cache: SoftMeasureCache, ds) -> np.ndarray:
    """Gradient of the clipped measurement w.r.t. the (L, C+1) assignment matrix.

    Gradients are summed over the batch; the no-beacon slot gets zero.
    """
    ds = np.asarray(ds, dtype=np.float64).reshape(cache.power.shape[0], -1)
    if ds.shape != cache.power.shape:
        raise ValueError(f"ds shape {ds.shape} does not match cache {cache.power.shape}")
    g = np.where(cache.power < cache.tau, ds, 0.0)
    g_re = 2.0 * cache.re * g
    g_im = 2.0 * cache.im * g
    grad = np.zeros((cache.acos.shape[1], cache.n_slots))
    grad[:, 1:] = cache.acos.T @ g_re + cache.asin.T @ g_im
    return grad
