"""Feed-forward location regressor with batch norm and block max-pooling.

Each block is ``layers_per_block`` x (fully-connected -> batch norm -> ReLU)
followed by max-pooling over contiguous groups of ``pool_group`` units. A
final fully-connected layer maps the last pooled output to (x, y).

Parameters live in a flat ``dict`` keyed ``fc{i}.W``, ``fc{i}.b``,
``bn{i}.gamma``, ``bn{i}.beta``, ``out.W``, ``out.b`` so that the same
optimizer can also update the beacon logits.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

WEIGHTS_FORMAT = "beaconopt-weights"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    blocks: int = 6
    layers_per_block: int = 2
    hidden_width: int = 1024
    pool_group: int = 4
    output_dim: int = 2
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.99
    dtype: str = "float64"

    def __post_init__(self):
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.blocks < 1 or self.layers_per_block < 1:
            raise ValueError("NetConfig needs blocks >= 1 and layers_per_block >= 1")
        if self.hidden_width % self.pool_group:
            raise ValueError(f"hidden_width {self.hidden_width} not divisible by "
                             f"pool_group {self.pool_group}")
        if not 0 < self.bn_momentum < 1:
            raise ValueError("bn_momentum must be in (0, 1)")

    @property
    def n_hidden(self) -> int:
        return self.blocks * self.layers_per_block

    @property
    def pooled_width(self) -> int:
        return self.hidden_width // self.pool_group

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NetParams:
    config: NetConfig
    params: dict[str, np.ndarray]
    running: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_weight_layers(self) -> int:
        return self.config.n_hidden + 1

    def copy(self) -> "NetParams":
        return NetParams(self.config,
                         {k: v.copy() for k, v in self.params.items()},
                         {k: v.copy() for k, v in self.running.items()},
                         {k: v.copy() for k, v in self.momentum.items()})


@dataclass
class ForwardTape:
    x: np.ndarray
    layers: list = field(default_factory=list)
    pools: list = field(default_factory=list)
    final_in: np.ndarray | None = None


def _fan_ins(cfg: NetConfig):
    for i in range(cfg.n_hidden):
        block, j = divmod(i, cfg.layers_per_block)
        if j > 0:
            yield i, cfg.hidden_width
        elif block == 0:
            yield i, cfg.input_dim
        else:
            yield i, cfg.pooled_width


def init_net(cfg: NetConfig, rng: np.random.Generator) -> NetParams:
    params: dict[str, np.ndarray] = {}
    running: dict[str, np.ndarray] = {}
    H = cfg.hidden_width
    for i, fan_in in _fan_ins(cfg):
        params[f"fc{i}.W"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, H))
        params[f"fc{i}.b"] = np.zeros(H)
        params[f"bn{i}.gamma"] = np.ones(H)
        params[f"bn{i}.beta"] = np.zeros(H)
        running[f"bn{i}.mean"] = np.zeros(H)
        running[f"bn{i}.var"] = np.ones(H)
    fan_in = cfg.pooled_width
    params["out.W"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, cfg.output_dim))
    params["out.b"] = np.zeros(cfg.output_dim)
    params = {k: v.astype(cfg.dtype) for k, v in params.items()}
    running = {k: v.astype(cfg.dtype) for k, v in running.items()}
    momentum = {k: np.zeros_like(v) for k, v in params.items()}
    return NetParams(cfg, params, running, momentum)


def _pool_forward(h: np.ndarray, group: int):
    """Max over contiguous groups; returns the pooled output and one winner mask per offset."""
    cols = [h[:, j::group] for j in range(group)]
    out = cols[0]
    for c in cols[1:]:
        out = np.maximum(out, c)
    masks = []
    taken = np.zeros(out.shape, dtype=bool)
    for c in cols:
        m = (c == out) & ~taken  # ties go to the lowest offset
        taken |= m
        masks.append(m)
    return out, masks


def _pool_backward(dout: np.ndarray, masks: list, group: int) -> np.ndarray:
    B, G = dout.shape
    dh = np.empty((B, G * group), dtype=dout.dtype)
    for j, m in enumerate(masks):
        dh[:, j::group] = dout * m
    return dh


def forward(net: NetParams, x: np.ndarray, mode: str = "train"):
    """Predict locations for a (B, input_dim) batch.

    Train mode normalizes with batch statistics, updates the running
    statistics and returns a tape for :func:`backward`; eval mode uses the
    running statistics, mutates nothing and returns ``(pred, None)``.
    """
    cfg, P = net.config, net.params
    x = np.asarray(x, dtype=cfg.dtype)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(f"expected input of shape (B, {cfg.input_dim}), got {x.shape}")
    train = mode == "train"
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    if train and x.shape[0] < 2:
        raise ValueError("train mode needs a batch of at least 2 for batch statistics")
    tape = ForwardTape(x=x) if train else None
    h = x
    eps, mom = cfg.bn_epsilon, cfg.bn_momentum
    for i in range(cfg.n_hidden):
        z = h @ P[f"fc{i}.W"] + P[f"fc{i}.b"]
        if train:
            mu = z.mean(axis=0)
            xc = z - mu
            var = np.mean(xc * xc, axis=0)
            inv = 1.0 / np.sqrt(var + eps)
            rm, rv = net.running[f"bn{i}.mean"], net.running[f"bn{i}.var"]
            rm *= mom
            rm += (1.0 - mom) * mu
            rv *= mom
            rv += (1.0 - mom) * var
        else:
            xc = z - net.running[f"bn{i}.mean"]
            inv = 1.0 / np.sqrt(net.running[f"bn{i}.var"] + eps)
        xhat = xc * inv
        y = xhat * P[f"bn{i}.gamma"] + P[f"bn{i}.beta"]
        a = np.maximum(y, 0.0)
        if train:
            tape.layers.append((h, xhat, inv, y))
        h = a
        if (i + 1) % cfg.layers_per_block == 0:
            h, idx = _pool_forward(h, cfg.pool_group)
            if train:
                tape.pools.append(idx)
    pred = h @ P["out.W"] + P["out.b"]
    if train:
        tape.final_in = h
    return pred, tape


def backward(net: NetParams, tape: ForwardTape, dpred: np.ndarray):
    """Exact gradients of the train-mode forward map.

    Returns ``(grads, dx)`` with ``grads`` keyed like ``net.params``.
    """
    cfg, P = net.config, net.params
    if tape is None or len(tape.layers) != cfg.n_hidden:
        raise ValueError("tape does not match a train-mode forward pass of this network")
    dpred = np.asarray(dpred, dtype=cfg.dtype)
    if dpred.shape != (tape.x.shape[0], cfg.output_dim):
        raise ValueError(f"dpred shape {dpred.shape} does not match batch")
    grads: dict[str, np.ndarray] = {}
    grads["out.W"] = tape.final_in.T @ dpred
    grads["out.b"] = dpred.sum(axis=0)
    dh = dpred @ P["out.W"].T
    B = tape.x.shape[0]
    for i in reversed(range(cfg.n_hidden)):
        if (i + 1) % cfg.layers_per_block == 0:
            dh = _pool_backward(dh, tape.pools[i // cfg.layers_per_block], cfg.pool_group)
        h_in, xhat, inv, y = tape.layers[i]
        dy = dh * (y > 0)
        grads[f"bn{i}.gamma"] = np.sum(dy * xhat, axis=0)
        grads[f"bn{i}.beta"] = dy.sum(axis=0)
        dxhat = dy * P[f"bn{i}.gamma"]
        dz = (inv / B) * (B * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        grads[f"fc{i}.W"] = h_in.T @ dz
        grads[f"fc{i}.b"] = dz.sum(axis=0)
        dh = dz @ P[f"fc{i}.W"].T
    return grads, dh


def sgd_step(params: dict, grads: dict, buffers: dict, lr: float, momentum: float) -> None:
    """In-place SGD with momentum: buf = m*buf + g; p -= lr*buf."""
    for k, g in grads.items():
        buf = buffers.get(k)
        if buf is None:
            buf = buffers[k] = np.zeros_like(params[k])
        buf *= momentum
        buf += g
        params[k] -= lr * buf


def _write_npz(path: Path, arrays: dict) -> None:
    # np.savez stamps entries with the current time; a fixed stamp keeps files byte-reproducible
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)),
                        buf.getvalue())


def save_weights(net: NetParams, path) -> None:
    """Write a self-describing little-endian ``.npz`` plus a JSON config sidecar."""
    path = Path(path)
    meta = {"format": WEIGHTS_FORMAT, "version": WEIGHTS_VERSION, "config": net.config.to_dict(),
            "tensors": {}}
    arrays = {}
    for group, tensors in (("param", net.params), ("running", net.running),
                           ("momentum", net.momentum)):
        for k, v in sorted(tensors.items()):
            name = f"{group}/{k}"
            arrays[name] = np.ascontiguousarray(v, dtype="<f8" if v.dtype == np.float64 else "<f4")
            meta["tensors"][name] = list(v.shape)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    _write_npz(path, arrays)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(net.config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_weights(path) -> NetParams:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != WEIGHTS_FORMAT or meta.get("version") != WEIGHTS_VERSION:
            raise ValueError(f"{path}: unsupported weights format {meta.get('format')!r} "
                             f"v{meta.get('version')}")
        cfg = NetConfig(**meta["config"])
        groups = {"param": {}, "running": {}, "momentum": {}}
        for name, shape in meta["tensors"].items():
            arr = np.array(data[name], dtype=cfg.dtype)
            if list(arr.shape) != shape:
                raise ValueError(f"{path}: tensor {name} has shape {arr.shape}, declared {shape}")
            group, key = name.split("/", 1)
            groups[group][key] = arr
    return NetParams(cfg, groups["param"], groups["running"], groups["momentum"])
