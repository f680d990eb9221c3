"""Environment geometry: maps, wall crossings, candidate grids, location sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MapError(ValueError):
    """Raised when a map document is malformed or violates an invariant."""


@dataclass(frozen=True)
class MapSpec:
    name: str
    width: float
    height: float
    walls: np.ndarray = field(repr=False)  # (W, 2, 2): wall, endpoint, xy
    grid_rows: int = 25
    grid_cols: int = 25
    extent: tuple[tuple[float, float], tuple[float, float]] | None = None

    def __post_init__(self):
        walls = np.asarray(self.walls, dtype=np.float64).reshape(-1, 2, 2)
        object.__setattr__(self, "walls", walls)
        if not (np.isfinite(self.width) and self.width > 0):
            raise MapError(f"width: must be positive, got {self.width}")
        if not (np.isfinite(self.height) and self.height > 0):
            raise MapError(f"height: must be positive, got {self.height}")
        if not np.all(np.isfinite(walls)):
            raise MapError("walls: non-finite coordinate")
        xs, ys = walls[..., 0], walls[..., 1]
        if np.any(xs < 0) or np.any(xs > self.width) or np.any(ys < 0) or np.any(ys > self.height):
            bad = int(np.flatnonzero(
                ((xs < 0) | (xs > self.width) | (ys < 0) | (ys > self.height)).any(axis=1))[0])
            raise MapError(f"walls[{bad}]: endpoint outside [0,{self.width}]x[0,{self.height}]")
        lengths = np.hypot(*(walls[:, 1] - walls[:, 0]).T) if len(walls) else np.zeros(0)
        if np.any(lengths == 0):
            raise MapError(f"walls[{int(np.flatnonzero(lengths == 0)[0])}]: zero-length wall")
        if int(self.grid_rows) < 1 or int(self.grid_cols) < 1:
            raise MapError(f"grid: rows and cols must be >= 1, got {self.grid_rows}x{self.grid_cols}")
        object.__setattr__(self, "grid_rows", int(self.grid_rows))
        object.__setattr__(self, "grid_cols", int(self.grid_cols))
        if self.extent is None:
            ext = ((0.0, 0.0), (float(self.width), float(self.height)))
        else:
            (x0, y0), (x1, y1) = self.extent
            ext = ((float(x0), float(y0)), (float(x1), float(y1)))
            if not (0 <= x0 <= x1 <= self.width and 0 <= y0 <= y1 <= self.height):
                raise MapError(f"grid.extent: {ext} not inside the map rectangle")
        object.__setattr__(self, "extent", ext)

    @property
    def n_candidates(self) -> int:
        return self.grid_rows * self.grid_cols

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "width": self.width,
            "height": self.height,
            "walls": self.walls.tolist(),
            "grid": {"rows": self.grid_rows, "cols": self.grid_cols,
                     "extent": [list(self.extent[0]), list(self.extent[1])]},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MapSpec":
        try:
            grid = doc.get("grid", {})
            walls = doc.get("walls", [])
            for i, w in enumerate(walls):
                if len(w) != 2 or any(len(p) != 2 for p in w):
                    raise MapError(f"walls[{i}]: expected [[x1,y1],[x2,y2]]")
            return cls(
                name=str(doc.get("name", "map")),
                width=float(doc["width"]),
                height=float(doc["height"]),
                walls=np.array(walls, dtype=np.float64).reshape(-1, 2, 2),
                grid_rows=int(grid.get("rows", 25)),
                grid_cols=int(grid.get("cols", 25)),
                extent=grid.get("extent"),
            )
        except KeyError as exc:
            raise MapError(f"{exc.args[0]}: missing required field") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, MapError):
                raise
            raise MapError(f"malformed map document: {exc}") from None


def load_map(path) -> MapSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MapError(f"{path}: not valid JSON ({exc})") from None
    return MapSpec.from_dict(doc)


def save_map(spec: MapSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")


def rectangular_map(width: float, height: float, dividers: int = 0, door: float = 0.2,
                    rows: int = 25, cols: int = 25, name: str = "rect") -> MapSpec:
    """Rectangle split into ``dividers + 1`` rooms by vertical walls with a door gap.

    Doors alternate between the bottom and top of successive walls.
    """
    walls = []
    for i in range(dividers):
        x = width * (i + 1) / (dividers + 1)
        gap = min(door, height)
        if i % 2 == 0:
            walls.append([[x, gap], [x, height]])
        else:
            walls.append([[x, 0.0], [x, height - gap]])
    return MapSpec(name=name, width=width, height=height, walls=np.array(walls).reshape(-1, 2, 2),
                   grid_rows=rows, grid_cols=cols)


def candidate_locations(spec: MapSpec) -> np.ndarray:
    """Evenly spaced candidate beacon sites, (rows*cols, 2), row-major (y outer, x inner)."""
    (x0, y0), (x1, y1) = spec.extent
    xs = np.linspace(x0, x1, spec.grid_cols)
    ys = np.linspace(y0, y1, spec.grid_rows)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _orient(ax, ay, bx, by, cx, cy):
    return np.sign((bx - ax) * (cy - ay) - (by - ay) * (cx - ax))


def _on_segment(ax, ay, bx, by, cx, cy):
    # c collinear with ab is assumed; test bounding box
    return ((np.minimum(ax, bx) <= cx) & (cx <= np.maximum(ax, bx))
            & (np.minimum(ay, by) <= cy) & (cy <= np.maximum(ay, by)))


def segments_intersect(a, b, p, q) -> np.ndarray:
    """Closed-segment intersection test for ab vs pq, broadcasting over leading dims.

    Touching endpoints and collinear overlap count as intersecting.
    """
    a, b, p, q = (np.asarray(z, dtype=np.float64) for z in (a, b, p, q))
    ax, ay, bx, by = a[..., 0], a[..., 1], b[..., 0], b[..., 1]
    px, py, qx, qy = p[..., 0], p[..., 1], q[..., 0], q[..., 1]
    o1 = _orient(ax, ay, bx, by, px, py)
    o2 = _orient(ax, ay, bx, by, qx, qy)
    o3 = _orient(px, py, qx, qy, ax, ay)
    o4 = _orient(px, py, qx, qy, bx, by)
    hit = (o1 != o2) & (o3 != o4)
    hit |= (o1 == 0) & _on_segment(ax, ay, bx, by, px, py)
    hit |= (o2 == 0) & _on_segment(ax, ay, bx, by, qx, qy)
    hit |= (o3 == 0) & _on_segment(px, py, qx, qy, ax, ay)
    hit |= (o4 == 0) & _on_segment(px, py, qx, qy, bx, by)
    return hit


def crossing_counts(points: np.ndarray, sites: np.ndarray, walls: np.ndarray) -> np.ndarray:
    """Walls crossed by each point-to-site segment, shape (len(points), len(sites)).

    Bitwise equal to summing :func:`segments_intersect` over walls with the
    point as the first endpoint. Non-degenerate entries are decided from
    cross-product signs whose wall terms depend on the point or the site
    alone; degenerate ones (any zero orientation) go through the exact test.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    sites = np.asarray(sites, dtype=np.float64).reshape(-1, 2)
    walls = np.asarray(walls, dtype=np.float64).reshape(-1, 2, 2)
    counts = np.zeros((len(points), len(sites)), dtype=np.int64)
    if len(walls) == 0 or counts.size == 0:
        return counts
    ax, ay = points[:, 0:1], points[:, 1:2]
    bx, by = sites[None, :, 0], sites[None, :, 1]
    dx, dy = bx - ax, by - ay
    for (px, py), (qx, qy) in walls:
        c1 = dx * (py - ay) - dy * (px - ax)
        c2 = dx * (qy - ay) - dy * (qx - ax)
        ex, ey = qx - px, qy - py
        c3 = ex * (ay - py) - ey * (ax - px)  # (B, 1)
        c4 = ex * (by - py) - ey * (bx - px)  # (1, L)
        s12 = np.sign(c1) * np.sign(c2)
        s34 = np.sign(c3) * np.sign(c4)
        counts += (s12 < 0) & (s34 < 0)
        degenerate = (s12 == 0) | (s34 == 0)
        if degenerate.any():
            i, j = np.nonzero(degenerate)
            counts[i, j] += segments_intersect(points[i], sites[j], (px, py), (qx, qy))
    return counts


def crossing_count(a, b, spec: MapSpec) -> int:
    """Walls crossed by the closed segment ab; symmetric in a and b."""
    a = tuple(float(z) for z in np.asarray(a).reshape(2))
    b = tuple(float(z) for z in np.asarray(b).reshape(2))
    if b < a:
        a, b = b, a
    return int(crossing_counts(np.array(a), np.array(b), spec.walls)[0, 0])


def sample_locations(spec: MapSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    u = rng.random((n, 2))
    return u * np.array([spec.width, spec.height])
