"""Sparse voxel assets, procedural primitives and edit operators.

An asset is a set of active voxels on an N^3 grid, each carrying a shape
feature vector (signed distances at the 8 cell corners, clamped to [-1, 1])
and a material vector (r, g, b, roughness mapped to [-1, 1]). Voxels are
always kept in canonical (z, y, x) lexicographic order.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPE_DIM = 8
MAT_DIM = 4
DEFAULT_GRID = 16

MAGIC = b"OVX1"
_HEADER = struct.Struct("<4sIIHH")

PRIMITIVES = ("box", "sphere", "l-shape", "torus")

# (r, g, b, roughness) in [0, 1]; stored as 2v - 1
PALETTE = {
    "red": (0.9, 0.1, 0.1, 0.3),
    "green": (0.1, 0.8, 0.2, 0.6),
    "blue": (0.1, 0.2, 0.9, 0.2),
    "yellow": (0.95, 0.9, 0.1, 0.5),
    "white": (0.95, 0.95, 0.95, 0.8),
    "black": (0.05, 0.05, 0.05, 0.1),
    "purple": (0.6, 0.1, 0.8, 0.4),
    "orange": (1.0, 0.5, 0.0, 0.7),
}

_CORNERS = np.array([(i, j, k) for k in (0, 1) for j in (0, 1) for i in (0, 1)], dtype=np.float64)


class VoxelError(ValueError):
    pass


class BoundsError(VoxelError):
    pass


class EmptyAssetError(VoxelError):
    pass


class GenerationError(RuntimeError):
    pass


def palette_vector(color: str) -> np.ndarray:
    return np.asarray(PALETTE[color], dtype=np.float32) * 2.0 - 1.0


def canonical_order(coords: np.ndarray) -> np.ndarray:
    return np.lexsort((coords[:, 0], coords[:, 1], coords[:, 2]))


class OVoxelAsset:
    """Active voxels with per-voxel shape and material features."""

    __slots__ = ("grid_n", "coords", "f_shape", "f_mat")

    def __init__(self, grid_n: int, coords, f_shape, f_mat):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        f_shape = np.asarray(f_shape, dtype=np.float32).reshape(len(coords), -1)
        f_mat = np.asarray(f_mat, dtype=np.float32).reshape(len(coords), -1)
        if len(coords) == 0:
            raise EmptyAssetError("asset has no active voxels")
        if coords.min() < 0 or coords.max() >= grid_n:
            raise BoundsError(f"voxel coordinates outside [0, {grid_n})")
        order = canonical_order(coords)
        coords, f_shape, f_mat = coords[order], f_shape[order], f_mat[order]
        if len(coords) > 1 and np.any(np.all(coords[1:] == coords[:-1], axis=1)):
            raise VoxelError("duplicate voxel coordinates")
        self.grid_n = int(grid_n)
        self.coords = coords
        self.f_shape = f_shape
        self.f_mat = f_mat

    def __len__(self):
        return len(self.coords)

    def __eq__(self, other):
        if not isinstance(other, OVoxelAsset):
            return NotImplemented
        return (
            self.grid_n == other.grid_n
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.f_shape, other.f_shape)
            and np.array_equal(self.f_mat, other.f_mat)
        )

    __hash__ = None

    def __repr__(self):
        return f"OVoxelAsset(grid_n={self.grid_n}, L={len(self)})"

    @property
    def shape_dim(self):
        return self.f_shape.shape[1]

    @property
    def mat_dim(self):
        return self.f_mat.shape[1]

    def occupancy(self) -> np.ndarray:
        """Dense boolean grid indexed [x, y, z]."""
        occ = np.zeros((self.grid_n,) * 3, dtype=bool)
        occ[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = True
        return occ

    def coord_set(self) -> set:
        return set(map(tuple, self.coords.tolist()))

    def to_bytes(self) -> bytes:
        rec = np.dtype(
            [("xyz", "<u2", 3), ("f", "<f4", self.shape_dim + self.mat_dim)]
        )
        body = np.empty(len(self), dtype=rec)
        body["xyz"] = self.coords
        body["f"] = np.concatenate([self.f_shape, self.f_mat], axis=1)
        head = _HEADER.pack(MAGIC, self.grid_n, len(self), self.shape_dim, self.mat_dim)
        return head + body.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "OVoxelAsset":
        if len(raw) < _HEADER.size:
            raise VoxelError("truncated OVX1 header")
        magic, grid_n, count, s, m = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise VoxelError(f"bad magic {magic!r}")
        rec = np.dtype([("xyz", "<u2", 3), ("f", "<f4", s + m)])
        if len(raw) != _HEADER.size + count * rec.itemsize:
            raise VoxelError("OVX1 payload size does not match header")
        body = np.frombuffer(raw, dtype=rec, offset=_HEADER.size, count=count)
        f = body["f"].reshape(count, s + m)
        return cls(grid_n, body["xyz"].astype(np.int64), f[:, :s], f[:, s:])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "OVoxelAsset":
        return cls.from_bytes(Path(path).read_bytes())


def iou(a: OVoxelAsset, b: OVoxelAsset) -> float:
    oa, ob = a.occupancy(), b.occupancy()
    union = np.logical_or(oa, ob).sum()
    return float(np.logical_and(oa, ob).sum() / union) if union else 1.0


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Primitive:
    """Parametric solid. ``origin``/``size`` for box and l-shape (plus
    ``arm`` thickness), ``center``/``radius`` for sphere, and center, outer
    ``radius``, ``inner`` radius, ``origin[2]`` base and ``size[2]`` height
    for the torus slab."""

    kind: str
    origin: tuple = (0, 0, 0)
    size: tuple = (1, 1, 1)
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.0
    inner: float = 0.0
    arm: int = 1
    color: str = "red"

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        """Signed distance (negative inside) at continuous points (..., 3)."""
        if self.kind == "box":
            return _box_sdf(pts, np.array(self.origin, float), np.array(self.size, float))
        if self.kind == "sphere":
            return np.linalg.norm(pts - np.array(self.center), axis=-1) - self.radius
        if self.kind == "l-shape":
            o = np.array(self.origin, float)
            a, b, c = self.size
            leg1 = _box_sdf(pts, o, np.array([a, self.arm, c], float))
            leg2 = _box_sdf(pts, o, np.array([self.arm, b, c], float))
            return np.minimum(leg1, leg2)
        if self.kind == "torus":
            cx, cy, _ = self.center
            rho = np.hypot(pts[..., 0] - cx, pts[..., 1] - cy)
            ring = np.maximum(rho - self.radius, self.inner - rho)
            z0, h = self.origin[2], self.size[2]
            slab = np.abs(pts[..., 2] - (z0 + h / 2.0)) - h / 2.0
            return np.maximum(ring, slab)
        raise VoxelError(f"unknown primitive kind {self.kind!r}")

    def bounds(self) -> tuple:
        """Inclusive-exclusive continuous extent (lo, hi) per axis."""
        if self.kind in ("box", "l-shape"):
            lo = np.array(self.origin, float)
            return lo, lo + np.array(self.size, float)
        if self.kind == "sphere":
            c = np.array(self.center, float)
            return c - self.radius, c + self.radius
        c = np.array(self.center, float)
        lo = np.array([c[0] - self.radius, c[1] - self.radius, self.origin[2]], float)
        hi = np.array([c[0] + self.radius, c[1] + self.radius, self.origin[2] + self.size[2]], float)
        return lo, hi


def _box_sdf(pts, lo, size):
    half = size / 2.0
    q = np.abs(pts - (lo + half)) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def _fmt(t) -> str:
    return "(" + ",".join(str(int(v)) for v in t) + ")"


def make_primitive(prim: Primitive, grid_n: int = DEFAULT_GRID) -> OVoxelAsset:
    """Voxelize ``prim``: a voxel is active when its center lies inside."""
    lo, hi = prim.bounds()
    if np.any(lo < 0) or np.any(hi > grid_n):
        raise BoundsError(f"{prim.kind} extent {lo}..{hi} exceeds grid {grid_n}")
    if prim.kind in ("box", "l-shape") and (min(prim.size) < 1 or prim.arm < 1):
        raise VoxelError("box sizes must be positive")
    # scan only the bounding box of the primitive
    a = np.floor(lo).astype(int)
    b = np.minimum(np.ceil(hi).astype(int), grid_n)
    axes = [np.arange(a[i], b[i]) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    cells = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    inside = prim.sdf(cells + 0.5) <= 0.0
    coords = cells[inside]
    if len(coords) == 0:
        raise EmptyAssetError(f"{prim.kind} covers no voxel centers")
    return OVoxelAsset(grid_n, coords, shape_features(prim, coords), np.tile(palette_vector(prim.color), (len(coords), 1)))


def shape_features(prim: Primitive, coords: np.ndarray) -> np.ndarray:
    corners = coords[:, None, :].astype(np.float64) + _CORNERS[None]
    return np.clip(prim.sdf(corners), -1.0, 1.0).astype(np.float32)


def recolor(asset: OVoxelAsset, color: str) -> OVoxelAsset:
    mat = np.tile(palette_vector(color), (len(asset), 1))
    return OVoxelAsset(asset.grid_n, asset.coords, asset.f_shape, mat)


# ---------------------------------------------------------------------------
# edits

EDIT_KINDS = ("translate", "rotate90", "scale_axis", "union", "difference", "intersection", "frame_step")
_AXES = "xyz"


@dataclass(frozen=True)
class EditOp:
    kind: str
    offset: tuple = (0, 0, 0)
    axis: str = "z"
    turns: int = 1
    factor: int = 1
    other: Primitive | None = None
    stride: int = 1

    def __post_init__(self):
        if self.kind not in EDIT_KINDS:
            raise VoxelError(f"unknown edit kind {self.kind!r}")
        if self.kind == "rotate90" and self.turns not in (1, 2, 3):
            raise VoxelError("rotate90 turns must be 1, 2 or 3")
        if self.kind == "scale_axis" and self.factor < 1:
            raise VoxelError("scale factor must be >= 1")
        if self.axis not in _AXES:
            raise VoxelError(f"bad axis {self.axis!r}")
        if self.kind in ("union", "difference", "intersection") and self.other is None:
            raise VoxelError(f"{self.kind} needs a second operand")
        if self.kind == "frame_step" and self.stride < 1:
            raise VoxelError("frame stride must be >= 1")

    def instruction(self) -> str:
        """Templated instruction text; :func:`parse_instruction` inverts it."""
        k = self.kind
        if k == "translate":
            return f"translate by {_fmt(self.offset)}"
        if k == "rotate90":
            return f"rotate {self.axis} by {90 * self.turns}"
        if k == "scale_axis":
            return f"scale {self.axis} by {self.factor}"
        if k == "frame_step":
            return f"animate {_fmt(self.offset)} stride {self.stride}"
        verb = {"union": "add", "difference": "cut", "intersection": "keep"}[k]
        o = self.other
        return f"{verb} {o.color} box at {_fmt(o.origin)} size {_fmt(o.size)}"


_TRIPLE = r"\((-?\d+),(-?\d+),(-?\d+)\)"
_PATTERNS = [
    (re.compile(rf"^translate by {_TRIPLE}$"), "translate"),
    (re.compile(r"^rotate ([xyz]) by (90|180|270)$"), "rotate90"),
    (re.compile(r"^scale ([xyz]) by (\d+)$"), "scale_axis"),
    (re.compile(rf"^animate {_TRIPLE} stride (\d+)$"), "frame_step"),
    (re.compile(rf"^(add|cut|keep) ([a-z]+) box at {_TRIPLE} size {_TRIPLE}$"), "boolean"),
]


def parse_instruction(text: str) -> EditOp:
    for pat, kind in _PATTERNS:
        m = pat.match(text)
        if not m:
            continue
        g = m.groups()
        if kind == "translate":
            return EditOp("translate", offset=tuple(int(v) for v in g))
        if kind == "rotate90":
            return EditOp("rotate90", axis=g[0], turns=int(g[1]) // 90)
        if kind == "scale_axis":
            return EditOp("scale_axis", axis=g[0], factor=int(g[1]))
        if kind == "frame_step":
            return EditOp("frame_step", offset=tuple(int(v) for v in g[:3]), stride=int(g[3]))
        verb = {"add": "union", "cut": "difference", "keep": "intersection"}[g[0]]
        if g[1] not in PALETTE:
            break
        other = Primitive("box", origin=tuple(int(v) for v in g[2:5]), size=tuple(int(v) for v in g[5:8]), color=g[1])
        return EditOp(verb, other=other)
    raise VoxelError(f"unparseable instruction {text!r}")


def _clip(asset: OVoxelAsset, coords, keep_rows=None) -> OVoxelAsset:
    n = asset.grid_n
    rows = np.arange(len(coords)) if keep_rows is None else keep_rows
    inside = np.all((coords >= 0) & (coords < n), axis=1)
    if not inside.any():
        raise BoundsError("edit moves every voxel out of the grid")
    if inside.sum() * 2 < len(coords):
        raise BoundsError(f"only {inside.sum()} of {len(coords)} voxels stay in the grid")
    rows = rows[inside]
    return OVoxelAsset(n, coords[inside], asset.f_shape[rows], asset.f_mat[rows])


def _rotate_coords(coords, axis, turns, n):
    u, v = {"z": (0, 1), "x": (1, 2), "y": (2, 0)}[axis]
    out = coords.copy()
    for _ in range(turns):
        nu = n - 1 - out[:, v]
        nv = out[:, u].copy()
        out[:, u] = nu
        out[:, v] = nv
    return out


def apply_edit(asset: OVoxelAsset, op: EditOp) -> OVoxelAsset:
    n = asset.grid_n
    k = op.kind
    if k in ("translate", "frame_step"):
        step = np.asarray(op.offset, dtype=np.int64) * (op.stride if k == "frame_step" else 1)
        return _clip(asset, asset.coords + step)
    if k == "rotate90":
        coords = _rotate_coords(asset.coords, op.axis, op.turns, n)
        return OVoxelAsset(n, coords, asset.f_shape, asset.f_mat)
    if k == "scale_axis":
        a = _AXES.index(op.axis)
        anchor = asset.coords[:, a].min()
        reps = np.repeat(np.arange(len(asset)), op.factor)
        coords = asset.coords[reps].copy()
        offs = np.tile(np.arange(op.factor), len(asset))
        coords[:, a] = anchor + op.factor * (coords[:, a] - anchor) + offs
        return _clip(asset, coords, reps)

    other = make_primitive(op.other, n)
    return {"union": union, "difference": difference, "intersection": intersection}[k](asset, other)


def difference(a: OVoxelAsset, b: OVoxelAsset) -> OVoxelAsset:
    """Set difference of two assets (A's features)."""
    theirs = b.coord_set()
    keep = [i for i, c in enumerate(map(tuple, a.coords.tolist())) if c not in theirs]
    if not keep:
        raise EmptyAssetError("difference leaves no voxels")
    return OVoxelAsset(a.grid_n, a.coords[keep], a.f_shape[keep], a.f_mat[keep])


def union(a: OVoxelAsset, b: OVoxelAsset) -> OVoxelAsset:
    mine = a.coord_set()
    extra = [i for i, c in enumerate(map(tuple, b.coords.tolist())) if c not in mine]
    return OVoxelAsset(
        a.grid_n,
        np.concatenate([a.coords, b.coords[extra]]),
        np.concatenate([a.f_shape, b.f_shape[extra]]),
        np.concatenate([a.f_mat, b.f_mat[extra]]),
    )


def intersection(a: OVoxelAsset, b: OVoxelAsset) -> OVoxelAsset:
    theirs = b.coord_set()
    keep = [i for i, c in enumerate(map(tuple, a.coords.tolist())) if c in theirs]
    if not keep:
        raise EmptyAssetError("intersection leaves no voxels")
    return OVoxelAsset(a.grid_n, a.coords[keep], a.f_shape[keep], a.f_mat[keep])


# ---------------------------------------------------------------------------
# rendering


def render_image(asset: OVoxelAsset, axis: str = "z") -> np.ndarray:
    """Orthographic depth image looking along +axis from coordinate 0.

    Pixels hit at depth d get value 1 - d/N, empty pixels 0. The image is
    indexed [u, v] over the two remaining axes in (x, y, z) order.
    """
    if axis not in _AXES:
        raise VoxelError(f"bad axis {axis!r}")
    a = _AXES.index(axis)
    uv = [i for i in range(3) if i != a]
    n = asset.grid_n
    depth = np.full((n, n), n, dtype=np.int64)
    np.minimum.at(depth, (asset.coords[:, uv[0]], asset.coords[:, uv[1]]), asset.coords[:, a])
    img = np.where(depth < n, 1.0 - depth / n, 0.0)
    return img.astype(np.float32)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Turn:
    instruction: str
    asset: OVoxelAsset
    image: np.ndarray | None = None


@dataclass
class Trajectory:
    caption: str
    initial: OVoxelAsset
    turns: list = field(default_factory=list)

    def states(self) -> list:
        return [self.initial] + [t.asset for t in self.turns]

    def prefix(self, k: int) -> "Trajectory":
        return Trajectory(self.caption, self.initial, list(self.turns[:k]))

    def save(self, path) -> None:
        """Write ``<path>`` (line records) plus one OVX1 file per state."""
        path = Path(path)
        stem = path.with_suffix("")
        lines = []
        for i, asset in enumerate(self.states()):
            name = f"{stem.name}_{i}.ovx"
            asset.save(path.parent / name)
            if i == 0:
                lines.append(f"caption\t{self.caption}\t{name}")
            else:
                lines.append(f"turn\t{self.turns[i - 1].instruction}\t{name}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Trajectory":
        path = Path(path)
        traj = None
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            tag, text, name = line.split("\t")
            asset = OVoxelAsset.load(path.parent / name)
            if tag == "caption":
                traj = cls(text, asset)
            elif tag == "turn" and traj is not None:
                traj.turns.append(Turn(text, asset))
            else:
                raise VoxelError(f"malformed trajectory record {line!r}")
        if traj is None:
            raise VoxelError(f"empty trajectory file {path}")
        grids = {a.grid_n for a in traj.states()}
        if len(grids) != 1:
            raise VoxelError("trajectory mixes grid resolutions")
        return traj


def sample_primitive(rng: np.random.Generator, grid_n: int = DEFAULT_GRID, kinds=PRIMITIVES) -> Primitive:
    """Random primitive that fits comfortably inside the grid."""
    kind = kinds[int(rng.integers(len(kinds)))]
    color = list(PALETTE)[int(rng.integers(len(PALETTE)))]
    lo_size, hi_size = max(2, grid_n // 8), max(3, grid_n // 2)
    if kind in ("box", "l-shape"):
        size = tuple(int(rng.integers(lo_size, hi_size + 1)) for _ in range(3))
        origin = tuple(int(rng.integers(0, grid_n - s + 1)) for s in size)
        arm = max(1, min(size[:2]) // 2)
        return Primitive(kind, origin=origin, size=size, arm=arm, color=color)
    if kind == "sphere":
        r = float(rng.integers(lo_size, max(lo_size, grid_n // 4) + 1))
        center = tuple(float(rng.integers(int(np.ceil(r)), int(grid_n - r) + 1)) for _ in range(3))
        return Primitive(kind, center=center, radius=r, color=color)
    outer = float(rng.integers(max(2, grid_n // 8 + 1), max(3, grid_n // 4) + 1))
    inner = max(0.5, outer - max(1.0, outer / 2))
    h = int(rng.integers(1, max(2, grid_n // 4) + 1))
    cx, cy = (float(rng.integers(int(outer), int(grid_n - outer) + 1)) for _ in range(2))
    z0 = int(rng.integers(0, grid_n - h + 1))
    return Primitive(kind, origin=(0, 0, z0), size=(0, 0, h), center=(cx, cy, 0.0), radius=outer, inner=inner, color=color)


def sample_edit(rng: np.random.Generator, asset: OVoxelAsset, kinds=EDIT_KINDS, templates=()) -> EditOp:
    """Random edit of one of ``kinds``, or one of the fixed instruction ``templates`` when given."""
    if templates:
        return parse_instruction(templates[int(rng.integers(len(templates)))])
    n = asset.grid_n
    kind = kinds[int(rng.integers(len(kinds)))]
    axis = _AXES[int(rng.integers(3))]
    if kind == "translate":
        off = [0, 0, 0]
        off[_AXES.index(axis)] = int(rng.choice([-3, -2, -1, 1, 2, 3]))
        return EditOp("translate", offset=tuple(off))
    if kind == "rotate90":
        return EditOp("rotate90", axis=axis, turns=int(rng.integers(1, 4)))
    if kind == "scale_axis":
        return EditOp("scale_axis", axis=axis, factor=2)
    if kind == "frame_step":
        off = [0, 0, 0]
        off[_AXES.index(axis)] = int(rng.choice([-1, 1]))
        return EditOp("frame_step", offset=tuple(off), stride=int(rng.integers(1, 4)))
    # boolean with a random box near the asset
    lo = asset.coords.min(axis=0)
    hi = asset.coords.max(axis=0) + 1
    size = tuple(int(rng.integers(1, max(2, n // 4) + 1)) for _ in range(3))
    origin = tuple(int(np.clip(rng.integers(lo[i] - 1, hi[i] + 1), 0, n - size[i])) for i in range(3))
    color = list(PALETTE)[int(rng.integers(len(PALETTE)))]
    return EditOp(kind, other=Primitive("box", origin=origin, size=size, color=color))


def primitive_caption(prim: Primitive) -> str:
    return f"{prim.color} {prim.kind}"


def sample_asset(rng: np.random.Generator, grid_n: int = DEFAULT_GRID, primitives=PRIMITIVES) -> tuple:
    """(primitive, voxelized asset), resampling primitives that voxelize to nothing."""
    for _ in range(101):
        prim = sample_primitive(rng, grid_n, primitives)
        try:
            return prim, make_primitive(prim, grid_n)
        except VoxelError:
            continue
    raise GenerationError("could not sample a primitive")


def make_trajectory(seed: int, turns: int, grid_n: int = DEFAULT_GRID, kinds=EDIT_KINDS, primitives=PRIMITIVES, templates=()) -> Trajectory:
    """Sample a primitive and ``turns`` procedural edits on it.

    Rejected edits (out of bounds, empty) are resampled; more than 100
    rejections in total raise :class:`GenerationError`. With ``templates``
    (instruction strings) every edit is one of them, and a primitive that
    admits none is replaced by a fresh one.
    """
    if not 1 <= turns <= 5:
        raise ValueError(f"turns must be in [1, 5], got {turns}")
    rng = np.random.default_rng(seed)
    prim, asset = sample_asset(rng, grid_n, primitives)
    traj = Trajectory(primitive_caption(prim), asset)
    rejects = 0
    current = asset
    while len(traj.turns) < turns:
        op = sample_edit(rng, current, kinds, templates)
        try:
            nxt = apply_edit(current, op)
        except VoxelError:
            rejects += 1
            if rejects > 100:
                raise GenerationError(f"more than 100 rejected edits (seed {seed})") from None
            if templates and not traj.turns and rejects % 10 == 0:
                prim, asset = sample_asset(rng, grid_n, primitives)
                traj = Trajectory(primitive_caption(prim), asset)
                current = asset
            continue
        traj.turns.append(Turn(op.instruction(), nxt))
        current = nxt
    return traj


def make_semantic_trajectory(seed: int, turns: int, grid_n: int = DEFAULT_GRID) -> Trajectory:
    """Attribute edits: each turn repaints the asset with a new palette color."""
    if not 1 <= turns <= 5:
        raise ValueError(f"turns must be in [1, 5], got {turns}")
    base = make_trajectory(seed, 1, grid_n)
    rng = np.random.default_rng([seed, 1])
    traj = Trajectory(base.caption, base.initial)
    current = base.initial
    colors = list(PALETTE)
    for _ in range(turns):
        color = colors[int(rng.integers(len(colors)))]
        current = recolor(current, color)
        traj.turns.append(Turn(f"paint {color}", current))
    return traj


def replay(traj: Trajectory) -> list:
    """Re-derive every state from the initial asset and parsed instructions."""
    out = [traj.initial]
    cur = traj.initial
    for t in traj.turns:
        if t.instruction.startswith("paint "):
            cur = recolor(cur, t.instruction.split()[1])
        else:
            cur = apply_edit(cur, parse_instruction(t.instruction))
        out.append(cur)
    return out
