"""Localization metrics, error maps, the kNN fingerprint baseline and handcrafted placements."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .beacon_layer import Placement
from .environment import PropagationParams, amplitude_table, draw_measurement, \
    signal_from_amplitudes
from .geometry import MapSpec, candidate_locations
from .net import NetParams, forward

KNN_KS = (1, 5, 10, 20)


@dataclass(frozen=True)
class EvalConfig:
    grid_rows: int = 70
    grid_cols: int = 100
    samples_per_location: int = 30
    thresholds: tuple = (0.1, 0.2, 0.5)
    seed: int = 12345
    chunk: int = 256  # locations per vectorized block

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ValueError("evaluation lattice must be at least 1x1")
        if self.samples_per_location < 1:
            raise ValueError("samples_per_location must be >= 1")
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if list(self.thresholds) != sorted(self.thresholds):
            raise ValueError("thresholds must be sorted ascending")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        return d


@dataclass
class EvalReport:
    rmse: float
    worst_case_rmse: float
    failure_rates: list
    thresholds: list
    beacon_count: int
    error_grid: np.ndarray = field(repr=False)  # (rows, cols) mean error per location
    map_name: str = ""
    inference: str = ""
    extent: tuple = ((0.0, 0.0), (0.0, 0.0))  # first and last lattice point

    def to_dict(self) -> dict:
        d = asdict(self)
        d["error_grid"] = self.error_grid.tolist()
        d["extent"] = [list(self.extent[0]), list(self.extent[1])]
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        doc = dict(doc)
        doc["error_grid"] = np.asarray(doc["error_grid"], dtype=np.float64)
        doc["extent"] = tuple(tuple(p) for p in doc["extent"])
        return cls(**doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    def summary(self) -> str:
        rates = " ".join(f"fail@{t:g}={r * 100:.4f}%"
                         for t, r in zip(self.thresholds, self.failure_rates))
        return (f"{self.map_name} {self.inference}: beacons={self.beacon_count} "
                f"rmse={self.rmse:.4f} worst={self.worst_case_rmse:.4f} {rates}")


def lattice(spec: MapSpec, rows: int, cols: int) -> np.ndarray:
    """Cell-centre lattice over the map, (rows*cols, 2), row-major."""
    xs = (np.arange(cols) + 0.5) * spec.width / cols
    ys = (np.arange(rows) + 0.5) * spec.height / rows
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


class NetPredictor:
    """Eval-mode network as a signal -> location function."""

    def __init__(self, net: NetParams, batch: int = 4096):
        self.net = net
        self.batch = batch

    def __call__(self, signals: np.ndarray) -> np.ndarray:
        out = [forward(self.net, signals[i:i + self.batch], "eval")[0]
               for i in range(0, len(signals), self.batch)]
        return np.concatenate(out).astype(np.float64)


class TrueLocationOracle:
    """Returns the true location; used to check the metric plumbing."""

    uses_truth = True

    def __call__(self, signals, truth):
        return np.array(truth, dtype=np.float64)


class ConstantPredictor:
    def __init__(self, point):
        self.point = np.asarray(point, dtype=np.float64)

    def __call__(self, signals):
        return np.broadcast_to(self.point, (len(signals), 2)).copy()


def location_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def sample_signals(placement: Placement, spec: MapSpec, prop: PropagationParams,
                   points: np.ndarray, samples: int, seed: int,
                   offset: int = 0) -> np.ndarray:
    """``samples`` hard-assignment measurements at each point, (len(points), samples, C).

    Point ``i`` uses the substream ``(seed, offset + i)``, so results do not
    depend on how the points are chunked.
    """
    L, C = len(placement.sites), placement.n_channels
    amp = amplitude_table(points, spec, prop, placement.sites)
    phases = np.empty((len(points), samples, L))
    noise = np.empty((len(points), samples, C, 2))
    for i in range(len(points)):
        d = draw_measurement(location_rng(seed, offset + i), L, C, prop, batch=samples)
        phases[i], noise[i] = d.phases, d.noise
    draw = type(d)(phases=phases.reshape(-1, L), noise=noise.reshape(-1, C, 2))
    amp_rep = np.repeat(amp, samples, axis=0)
    s, _ = signal_from_amplitudes(amp_rep, placement.assign, draw, prop.tau)
    return s.reshape(len(points), samples, C)


def metrics(errors: np.ndarray, thresholds: Sequence[float]):
    """RMSE, worst-case RMSE and failure rates from an (n_locations, samples) error array."""
    rmse = float(np.sqrt(np.mean(errors ** 2)))
    worst = float(np.sqrt(np.mean(errors.max(axis=1) ** 2)))
    rates = [float(np.mean(errors > t)) for t in thresholds]
    return rmse, worst, rates


def evaluate(placement: Placement, predictor: Callable, spec: MapSpec, prop: PropagationParams,
             cfg: EvalConfig = EvalConfig(), inference: str = "") -> EvalReport:
    points = lattice(spec, cfg.grid_rows, cfg.grid_cols)
    S = cfg.samples_per_location
    errors = np.empty((len(points), S))
    uses_truth = getattr(predictor, "uses_truth", False)
    for start in range(0, len(points), cfg.chunk):
        pts = points[start:start + cfg.chunk]
        s = sample_signals(placement, spec, prop, pts, S, cfg.seed, offset=start)
        flat = s.reshape(-1, s.shape[-1])
        truth = np.repeat(pts, S, axis=0)
        pred = predictor(flat, truth) if uses_truth else predictor(flat)
        err = np.hypot(*(np.asarray(pred, dtype=np.float64) - truth).T)
        errors[start:start + len(pts)] = err.reshape(len(pts), S)
    rmse, worst, rates = metrics(errors, cfg.thresholds)
    return EvalReport(
        rmse=rmse, worst_case_rmse=worst, failure_rates=rates,
        thresholds=list(cfg.thresholds), beacon_count=placement.beacon_count,
        error_grid=errors.mean(axis=1).reshape(cfg.grid_rows, cfg.grid_cols),
        map_name=spec.name, inference=inference,
        extent=(tuple(points[0]), tuple(points[-1])),
    )


def error_map(report: EvalReport, path) -> None:
    grid = np.asarray(report.error_grid)
    if grid.size == 0:
        raise ValueError("report has an empty error grid")
    (x0, y0), (x1, y1) = report.extent
    rows, cols = grid.shape
    header = f"map={report.map_name} rows={rows} cols={cols} x0={x0!r} y0={y0!r} x1={x1!r} y1={y1!r}"
    np.savetxt(path, grid, delimiter=",", fmt="%.17g", header=header)


def read_error_map(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))


@dataclass
class FingerprintDB:
    signals: np.ndarray    # (N, C)
    locations: np.ndarray  # (N, 2)
    k: int = 1

    def __post_init__(self):
        if len(self.signals) == 0:
            raise ValueError("fingerprint database is empty")
        if not 1 <= self.k <= len(self.signals):
            raise ValueError(f"k={self.k} must be in 1..{len(self.signals)}")

    def with_k(self, k: int) -> "FingerprintDB":
        return FingerprintDB(self.signals, self.locations, k)

    def __call__(self, signals):
        return knn_predict(signals, self, self.k)


def knn_build(placement: Placement, spec: MapSpec, prop: PropagationParams,
              rows: int = 35, cols: int = 50, rng: np.random.Generator | None = None,
              k: int = 1) -> FingerprintDB:
    """One noisy measurement per lattice point, stored with its true location."""
    rng = np.random.default_rng(0) if rng is None else rng
    points = lattice(spec, rows, cols)
    L, C = len(placement.sites), placement.n_channels
    amp = amplitude_table(points, spec, prop, placement.sites)
    draw = draw_measurement(rng, L, C, prop, batch=len(points))
    s, _ = signal_from_amplitudes(amp, placement.assign, draw, prop.tau)
    return FingerprintDB(s, points, k)


def knn_predict(signals, db: FingerprintDB, k: int | None = None, chunk: int = 512) -> np.ndarray:
    """Mean location of the ``k`` nearest fingerprints (Euclidean, ties to lower index)."""
    k = db.k if k is None else k
    if not 1 <= k <= len(db.signals):
        raise ValueError(f"k={k} must be in 1..{len(db.signals)}")
    q = np.asarray(signals, dtype=np.float64)
    single = q.ndim == 1
    q = q.reshape(-1, db.signals.shape[1])
    out = np.empty((len(q), 2))
    for i in range(0, len(q), chunk):
        d = q[i:i + chunk, None, :] - db.signals[None, :, :]
        dist = np.einsum("qnc,qnc->qn", d, d)
        if k == len(db.signals):
            nearest = np.broadcast_to(np.arange(k), (len(dist), k))
        else:
            nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
        out[i:i + chunk] = db.locations[nearest].mean(axis=1)
    return out[0] if single else out


def knn_sweep(placement: Placement, spec: MapSpec, prop: PropagationParams, cfg: EvalConfig,
              db: FingerprintDB, ks: Sequence[int] = KNN_KS):
    """Evaluate kNN inference for each k; returns ``(reports_by_k, best_k)``."""
    reports = {}
    for k in ks:
        reports[k] = evaluate(placement, db.with_k(k), spec, prop, cfg, inference=f"knn({k})")
    best = min(reports, key=lambda k: (reports[k].rmse, k))
    return reports, best


def handcrafted_placement(spec: MapSpec, C: int, spacing, channel_rule: str = "round_robin",
                          seed: int = 0) -> Placement:
    """Beacons on a uniform lattice centred in the map.

    ``spacing`` is one distance or an ``(dx, dy)`` pair; ``channel_rule`` is
    ``round_robin`` (row-major order) or ``random``.
    """
    dx, dy = (spacing, spacing) if np.isscalar(spacing) else spacing
    if dx <= 0 or dy <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    nx = int(np.floor(spec.width / dx + 1e-9))
    ny = int(np.floor(spec.height / dy + 1e-9))
    if nx < 1 or ny < 1:
        raise ValueError(f"spacing {spacing} does not fit a single beacon in "
                         f"{spec.width}x{spec.height}")
    xs = (spec.width - (nx - 1) * dx) / 2 + dx * np.arange(nx)
    ys = (spec.height - (ny - 1) * dy) / 2 + dy * np.arange(ny)
    gx, gy = np.meshgrid(xs, ys)
    sites = np.stack([gx.ravel(), gy.ravel()], axis=1)
    n = len(sites)
    if channel_rule == "round_robin":
        channels = np.arange(n) % C
    elif channel_rule == "random":
        channels = np.random.default_rng(seed).integers(0, C, size=n)
    else:
        raise ValueError(f"unknown channel_rule {channel_rule!r}; use round_robin or random")
    return Placement(sites, channels + 1, C, spec.name)


# lattice shapes sized to the beacon counts of the two best handcrafted baselines
HANDCRAFTED_PRESETS = {
    "A": (34, 16),  # 544 beacons
    "B": (18, 10),  # 180 beacons
}


def handcrafted_preset(spec: MapSpec, C: int, name: str, channel_rule: str = "round_robin",
                       seed: int = 0) -> Placement:
    nx, ny = HANDCRAFTED_PRESETS[name]
    return handcrafted_placement(spec, C, (spec.width / nx, spec.height / ny), channel_rule, seed)


def random_placement(spec: MapSpec, C: int, count: int, rng: np.random.Generator) -> Placement:
    """``count`` beacons at distinct random candidate sites with random channels."""
    sites = candidate_locations(spec)
    if not 0 <= count <= len(sites):
        raise ValueError(f"cannot place {count} beacons on {len(sites)} candidate sites")
    slots = np.zeros(len(sites), dtype=np.int64)
    chosen = rng.choice(len(sites), size=count, replace=False)
    slots[chosen] = rng.integers(1, C + 1, size=count)
    return Placement(sites, slots, C, spec.name)
