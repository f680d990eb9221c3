"""Joint optimization of beacon logits and the inference network."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import beacon_layer as bl
from .environment import PropagationParams, amplitude_table, draw_measurement, \
    measure_soft_backward, signal_from_amplitudes
from .geometry import MapSpec, candidate_locations, sample_locations
from .net import NetConfig, NetParams, backward, forward, init_net, load_weights, save_weights, \
    sgd_step

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, record: "TrainLogRecord", state: "TrainState"):
        super().__init__(f"non-finite loss or gradient at iteration {record.iter}: "
                         f"loss={record.loss}, mse={record.mse}, reg={record.reg}")
        self.record = record
        self.state = state


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 1_100_000
    batch_size: int = 1000
    lr_schedule: tuple = ((0, 0.01), (1_000_000, 0.001))
    momentum: float = 0.9
    seed: int = 0
    temperature: bl.TemperatureSchedule = bl.TemperatureSchedule()
    reg: bl.RegSchedule = bl.RegSchedule()
    snapshot_period: int = 10_000
    log_period: int = 100
    logit_std: float = 0.01

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.temperature.argmax_switch_iter > self.total_iters:
            raise ValueError("argmax_switch_iter must not exceed total_iters")
        object.__setattr__(self, "lr_schedule",
                           tuple((int(s), float(lr)) for s, lr in self.lr_schedule))
        if not self.lr_schedule or self.lr_schedule[0][0] != 0:
            raise ValueError("lr_schedule must start at iteration 0")

    @property
    def post_switch_iters(self) -> int:
        return self.total_iters - self.temperature.argmax_switch_iter

    def lr_at(self, t: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if t >= start:
                lr = value
        return lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(x) for x in self.lr_schedule]
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        if "temperature" in doc:
            doc["temperature"] = bl.TemperatureSchedule(**doc["temperature"])
        if "reg" in doc:
            doc["reg"] = bl.RegSchedule(**doc["reg"])
        if "lr_schedule" in doc:
            doc["lr_schedule"] = tuple(tuple(x) for x in doc["lr_schedule"])
        return cls(**doc)


@dataclass
class TrainLogRecord:
    iter: int
    loss: float
    mse: float
    reg: float
    alpha: float
    lam: float
    beacon_count: int
    wall_clock: float = 0.0

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_clock")
        return d


@dataclass
class BatchLoss:
    loss: float
    mse: float
    reg: float
    dpred: np.ndarray
    dsoft: np.ndarray | None


def loss_batch(v, pred, soft=None, lam: float = 0.0, sign: str = "intent") -> BatchLoss:
    """Mean squared localization error plus the beacon regularizer."""
    v = np.asarray(v, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if v.shape != pred.shape:
        raise ValueError(f"shape mismatch: {v.shape} vs {pred.shape}")
    B = v.shape[0]
    err = pred - v
    mse = float(np.sum(err * err) / B)
    if soft is None:
        reg, dsoft = 0.0, None
    else:
        reg, dsoft = bl.regularizer(soft, lam, sign)
    return BatchLoss(mse + reg, mse, reg, 2.0 * err / B, dsoft)


@dataclass
class TrainState:
    """Everything needed to resume a run bit-for-bit."""

    net: NetParams
    logits: np.ndarray | None
    logit_buf: np.ndarray | None
    rng: np.random.Generator
    iteration: int = 0
    slots: np.ndarray | None = None  # frozen placement once hardened
    log: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # (iter, slots)
    losses: list = field(default_factory=list)


@dataclass
class TrainResult:
    placement: bl.Placement
    net: NetParams
    log: list
    logits: np.ndarray | None
    snapshots: list
    losses: np.ndarray

    def __iter__(self):
        yield self.placement
        yield self.net
        yield self.log


def _streams(seed: int):
    net_ss, logit_ss, data_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(net_ss), np.random.default_rng(logit_ss),
            np.random.default_rng(data_ss))


def init_state(spec: MapSpec, netcfg: NetConfig, cfg: TrainConfig, joint: bool = True,
               placement: bl.Placement | None = None) -> TrainState:
    net_rng, logit_rng, data_rng = _streams(cfg.seed)
    net = init_net(netcfg, net_rng)
    if joint:
        C = netcfg.input_dim
        w = bl.init_logits(spec.n_candidates, C, logit_rng, cfg.logit_std)
        return TrainState(net, w, np.zeros_like(w), data_rng)
    return TrainState(net, None, None, data_rng, slots=placement.slots.copy())


def _finite(*arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


def run(state: TrainState, spec: MapSpec, prop: PropagationParams, cfg: TrainConfig,
        sites: np.ndarray, until: int | None = None, joint: bool = True,
        on_checkpoint: Callable[[TrainState], None] | None = None,
        checkpoint_period: int = 0) -> TrainState:
    """Advance ``state`` to iteration ``until`` (default ``cfg.total_iters``)."""
    until = cfg.total_iters if until is None else until
    net = state.net
    L = len(sites)
    C = net.config.input_dim
    n_slots = C + 1
    start_clock = time.perf_counter()
    for t in range(state.iteration, until):
        lr = cfg.lr_at(t)
        temp = bl.alpha_at(t, cfg.temperature)
        lam = bl.lambda_at(t, cfg.reg) if joint else 0.0
        hard = (not joint) or temp.hard
        if hard and state.slots is None:
            state.slots = bl.harden_slots(state.logits)
            log.info("argmax switch at iteration %d: %d beacons", t,
                     int(np.count_nonzero(state.slots)))

        v = sample_locations(spec, cfg.batch_size, state.rng)
        amp = amplitude_table(v, spec, prop, sites)
        draw = draw_measurement(state.rng, L, C, prop, batch=cfg.batch_size)
        if hard:
            assign = bl.onehot(state.slots, n_slots)
        else:
            assign = bl.softmax_assign(state.logits, temp.alpha)
        s, cache = signal_from_amplitudes(amp, assign, draw, prop.tau)
        pred, tape = forward(net, s, "train")
        terms = loss_batch(v, pred, assign if joint else None, lam, cfg.reg.sign)
        grads, dx = backward(net, tape, terms.dpred)

        dw = None
        if not hard:
            dsoft = measure_soft_backward(cache, dx) + terms.dsoft
            dw = bl.softmax_backward(assign, temp.alpha, dsoft)

        slots_now = state.slots if hard else bl.harden_slots(state.logits)
        if t % cfg.log_period == 0 or t == until - 1 or not math.isfinite(terms.loss):
            rec = TrainLogRecord(t, terms.loss, terms.mse, terms.reg, temp.alpha, lam,
                                 int(np.count_nonzero(slots_now)),
                                 time.perf_counter() - start_clock)
            state.log.append(rec)
        if not (math.isfinite(terms.loss) and _finite(*grads.values())
                and (dw is None or _finite(dw))):
            rec = TrainLogRecord(t, terms.loss, terms.mse, terms.reg, temp.alpha, lam,
                                 int(np.count_nonzero(slots_now)),
                                 time.perf_counter() - start_clock)
            raise TrainingDiverged(rec, state)
        state.losses.append(terms.loss)

        sgd_step(net.params, grads, net.momentum, lr, cfg.momentum)
        if dw is not None:
            sgd_step({"w": state.logits}, {"w": dw}, {"w": state.logit_buf}, lr, cfg.momentum)

        state.iteration = t + 1
        if cfg.snapshot_period and state.iteration % cfg.snapshot_period == 0 and joint:
            snap = state.slots if state.slots is not None else bl.harden_slots(state.logits)
            state.snapshots.append((state.iteration, snap.copy()))
        if on_checkpoint and checkpoint_period and state.iteration % checkpoint_period == 0:
            on_checkpoint(state)
    return state


def _result(state: TrainState, spec: MapSpec, sites, C: int) -> TrainResult:
    slots = state.slots if state.slots is not None else bl.harden_slots(state.logits)
    placement = bl.Placement(sites, slots, C, spec.name)
    return TrainResult(placement, state.net, state.log, state.logits, state.snapshots,
                       np.asarray(state.losses))


def train_joint(spec: MapSpec, prop: PropagationParams, netcfg: NetConfig, cfg: TrainConfig,
                resume: TrainState | None = None, **kwargs) -> TrainResult:
    sites = candidate_locations(spec)
    state = resume or init_state(spec, netcfg, cfg, joint=True)
    state = run(state, spec, prop, cfg, sites, joint=True, **kwargs)
    return _result(state, spec, sites, netcfg.input_dim)


def train_inference_only(spec: MapSpec, prop: PropagationParams, placement: bl.Placement,
                         netcfg: NetConfig, cfg: TrainConfig,
                         resume: TrainState | None = None, **kwargs) -> TrainResult:
    if placement.n_channels != netcfg.input_dim:
        raise ValueError(f"placement has C={placement.n_channels} but the network expects "
                         f"{netcfg.input_dim} inputs")
    state = resume or init_state(spec, netcfg, cfg, joint=False, placement=placement)
    state = run(state, spec, prop, cfg, placement.sites, joint=False, **kwargs)
    return _result(state, spec, placement.sites, netcfg.input_dim)


def save_checkpoint(state: TrainState, directory, spec: MapSpec | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_weights(state.net, d / "weights.npz")
    extra = {}
    if state.logits is not None:
        extra["logits"] = state.logits
        extra["logit_buf"] = state.logit_buf
    if state.slots is not None:
        extra["slots"] = state.slots
    np.savez(d / "beacons.npz", **extra)
    meta = {
        "iteration": state.iteration,
        "rng": state.rng.bit_generator.state,
        "log": [r.to_dict(timing=True) for r in state.log],
        "snapshots": [[it, s.tolist()] for it, s in state.snapshots],
        "losses": list(state.losses),
    }
    (d / "state.json").write_text(json.dumps(meta))
    if spec is not None and state.logits is not None:
        slots = state.slots if state.slots is not None else bl.harden_slots(state.logits)
        bl.Placement(candidate_locations(spec), slots, state.logits.shape[1] - 1,
                     spec.name).save(d / "placement.json")


def load_checkpoint(directory) -> TrainState:
    d = Path(directory)
    net = load_weights(d / "weights.npz")
    meta = json.loads((d / "state.json").read_text())
    with np.load(d / "beacons.npz") as extra:
        logits = np.array(extra["logits"]) if "logits" in extra else None
        logit_buf = np.array(extra["logit_buf"]) if "logit_buf" in extra else None
        slots = np.array(extra["slots"]) if "slots" in extra else None
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(
        net=net, logits=logits, logit_buf=logit_buf, rng=rng, iteration=meta["iteration"],
        slots=slots, log=[TrainLogRecord(**r) for r in meta["log"]],
        snapshots=[(it, np.asarray(s)) for it, s in meta["snapshots"]],
        losses=meta["losses"])
