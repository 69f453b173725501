"""Curved-layer extraction: isosurfaces of m trimmed by the solid.

Layers are marching-cubes isosurfaces of the deposition field sampled on a
regular grid.  Faces touching void vertices are dropped and every vertex
attribute (fiber direction, thickness, curvatures) is taken from exact
field evaluation at the vertex, not from the grid.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .fields import FieldTriple, Mode, evaluate
from .losses import (GRAD_FLOOR, ManufacturingLimits, collision_curvature, path_curvature,
                     surface_curvatures)
from .material import DTYPE

log = logging.getLogger(__name__)

SOLID = 0.5
CHUNK = 200_000
ATTR_CHUNK = 20_000


# ----------------------------------------------------------------------------
# field sources
# ----------------------------------------------------------------------------
@dataclass
class PointFields:
    """Field values needed by the slicer at a batch of points (numpy, mm units)."""

    m: np.ndarray
    H: np.ndarray
    grad_m: np.ndarray | None = None
    hess_m: np.ndarray | None = None
    grad_a: np.ndarray | None = None
    hess_a: np.ndarray | None = None

    @property
    def fiber(self) -> np.ndarray:
        return np.cross(self.grad_a, self.grad_m)


class FieldSource(Protocol):
    mode: Mode

    def __call__(self, x: np.ndarray, order: int) -> PointFields: ...


class TripleSource:
    """Slicer view of a trained field triple, with optional passive voids."""

    def __init__(self, triple: FieldTriple, void_mask: Callable | None = None):
        self.triple = triple
        self.mode = triple.mode
        self.void_mask = void_mask

    def __call__(self, x, order=0):
        parts = []
        with torch.no_grad():
            for i in range(0, len(x), CHUNK):
                xs = x[i:i + CHUNK]
                s = evaluate(self.triple, xs, order=order, hess_a=order >= 2 and self.mode is Mode.FIVE_AXIS)
                parts.append(s)
        cat = lambda name: (None if getattr(parts[0], name) is None
                            else torch.cat([getattr(p, name) for p in parts]).numpy())
        out = PointFields(m=cat("m"), H=cat("rho"), grad_m=cat("grad_m"), hess_m=cat("hess_m"),
                          grad_a=cat("grad_a"), hess_a=cat("hess_a"))
        if self.void_mask is not None:
            mask = self.void_mask(x)
            if mask is not None:
                out.H = np.where(mask, 0.0, out.H)
        return out


class AnalyticSource:
    """Closed-form fields, used to check the slicer against known geometry.

    ``m``, ``grad_m``, ``hess_m`` and ``H`` are callables of ``(N, 3)``
    positions; ``fiber`` defaults to any unit vector tangent to the layers.
    """

    def __init__(self, m, grad_m, hess_m, H, fiber=None, mode=Mode.FIVE_AXIS):
        self._m, self._gm, self._hm, self._H, self._f = m, grad_m, hess_m, H, fiber
        self.mode = Mode.parse(mode)

    def __call__(self, x, order=0):
        out = PointFields(m=self._m(x), H=self._H(x))
        if order >= 1:
            out.grad_m = self._gm(x)
            f = self._f(x) if self._f is not None else _tangent(out.grad_m)
            # encode f as grad_a x grad_m with grad_a = grad_m x f / |grad_m|^2
            g2 = np.maximum((out.grad_m**2).sum(-1, keepdims=True), 1e-300)
            out.grad_a = np.cross(out.grad_m, f) / g2
        if order >= 2:
            out.hess_m = self._hm(x)
            out.hess_a = np.zeros_like(out.hess_m)
        return out

    @classmethod
    def sphere(cls, center, r_in: float, r_out: float, sign: float = 1.0):
        c = np.asarray(center, float)

        def m(x):
            return sign * np.linalg.norm(x - c, axis=-1)

        def gm(x):
            d = x - c
            return sign * d / np.linalg.norm(d, axis=-1, keepdims=True)

        def hm(x):
            d = x - c
            r = np.linalg.norm(d, axis=-1)[:, None, None]
            u = d[:, :, None] / r
            return sign * (np.eye(3) - u * u.transpose(0, 2, 1)) / r

        def H(x):
            r = np.linalg.norm(x - c, axis=-1)
            return ((r >= r_in) & (r <= r_out)).astype(float)

        return cls(m, gm, hm, H)

    @classmethod
    def plane(cls, normal, origin=(0, 0, 0), H=None, mode=Mode.PLANAR):
        n = np.asarray(normal, float)
        n = n / np.linalg.norm(n)
        o = np.asarray(origin, float)
        H = H or (lambda x: np.ones(len(x)))
        return cls(lambda x: (x - o) @ n, lambda x: np.broadcast_to(n, x.shape).copy(),
                   lambda x: np.zeros((len(x), 3, 3)), H, mode=mode)


def _tangent(g):
    g = np.asarray(g, float)
    ref = np.where(np.abs(g[:, :1]) < 0.9 * np.linalg.norm(g, axis=1, keepdims=True), [[1.0, 0, 0]], [[0, 1.0, 0]])
    t = np.cross(g, ref)
    return t / np.linalg.norm(t, axis=1, keepdims=True)


# ----------------------------------------------------------------------------
# schedule and layers
# ----------------------------------------------------------------------------
@dataclass
class IsoSchedule:
    isovalues: np.ndarray
    spacing: float
    m_range: tuple[float, float]

    def __post_init__(self):
        self.isovalues = np.asarray(self.isovalues, float)
        if np.any(np.diff(self.isovalues) <= 0):
            raise ValueError("isovalues must be strictly increasing")

    @property
    def expected_count(self) -> float:
        return (self.m_range[1] - self.m_range[0]) / self.spacing


def iso_schedule(m_solid: np.ndarray, spacing: float) -> IsoSchedule:
    """Isovalues ``m_min + (i + 1/2) spacing`` covering the solid's range of m."""
    if spacing <= 0:
        raise ValueError("isovalue spacing must be positive")
    if len(m_solid) == 0:
        return IsoSchedule(np.zeros(0), spacing, (0.0, 0.0))
    lo, hi = float(np.min(m_solid)), float(np.max(m_solid))
    n = max(int(math.floor((hi - lo) / spacing - 0.5)) + 1, 0)
    return IsoSchedule(lo + (np.arange(n) + 0.5) * spacing, spacing, (lo, hi))


@dataclass
class CurvedLayer:
    isovalue: float
    vertices: np.ndarray
    faces: np.ndarray
    fiber: np.ndarray           # unit fiber direction per vertex
    normal: np.ndarray          # unit field normal grad m / |grad m|
    thickness: np.ndarray       # spacing / |grad m|
    K_max: np.ndarray           # curvature compared against K_lc
    K_f: np.ndarray
    m_values: np.ndarray
    H: np.ndarray
    grad_norm: np.ndarray
    index: int = 0
    flags: dict = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted mesh normals (discrete surface, not the field)."""
        v, f = self.vertices, self.faces
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        vn = np.zeros_like(v)
        for k in range(3):
            np.add.at(vn, f[:, k], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        return vn / np.where(norm > 0, norm, 1.0)


def sampling_grid(lo, hi, resolution: int):
    """Node grid with cubic cells and ``resolution`` cells along the longest axis."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    h = float((hi - lo).max()) / resolution
    counts = np.maximum(np.round((hi - lo) / h).astype(int), 1) + 1
    axes = [lo[i] + h * np.arange(counts[i]) for i in range(3)]
    return axes, h


def _grid_points(axes) -> np.ndarray:
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)


def vertex_attributes(source, x, spacing: float, limits: ManufacturingLimits) -> dict:
    # second derivatives are memory hungry, so work through the points in slices
    x = np.asarray(x, float)
    parts = [_vertex_attributes(source, x[i:i + ATTR_CHUNK], spacing, limits)
             for i in range(0, max(len(x), 1), ATTR_CHUNK)]
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def _vertex_attributes(source, x, spacing: float, limits: ManufacturingLimits) -> dict:
    pf = source(x, order=2)
    g = pf.grad_m
    gn = np.linalg.norm(g, axis=1)
    with torch.no_grad():
        curv = surface_curvatures(torch.as_tensor(g), torch.as_tensor(pf.hess_m))
        K = collision_curvature(curv, limits.curvature_measure).numpy()
        if source.mode is Mode.FIVE_AXIS and pf.hess_a is not None:
            K_f = path_curvature(torch.as_tensor(pf.grad_a), torch.as_tensor(g), torch.as_tensor(pf.hess_a),
                                 torch.as_tensor(pf.hess_m))[0].numpy()
        else:
            K_f = np.zeros(len(x))
    f = pf.fiber
    fnorm = np.linalg.norm(f, axis=1, keepdims=True)
    return {
        "m": pf.m, "H": pf.H,
        "fiber": f / np.where(fnorm > GRAD_FLOOR, fnorm, 1.0),
        "normal": g / np.where(gn[:, None] > GRAD_FLOOR, gn[:, None], 1.0),
        "thickness": spacing / np.maximum(gn, GRAD_FLOOR),
        "grad_norm": gn,
        "K_max": K, "K_f": K_f,
    }


def extract_layers(source, lo, hi, resolution: int = 128, limits: ManufacturingLimits | None = None,
                   spacing: float | None = None, schedule: IsoSchedule | None = None, layer_indices=None,
                   trim_level: float = SOLID) -> tuple[list[CurvedLayer], IsoSchedule, float]:
    """Slice ``source`` into trimmed isosurface layers.

    Returns ``(layers, schedule, h)`` where ``h`` is the sampling cell size.
    ``layer_indices`` restricts extraction to a subset of the schedule.
    """
    limits = limits or ManufacturingLimits()
    spacing = limits.delta_c if spacing is None else spacing
    if isinstance(source, FieldTriple):
        source = TripleSource(source)
    axes, h = sampling_grid(lo, hi, resolution)
    shape = tuple(len(a) for a in axes)
    pts = _grid_points(axes)
    pf = source(pts, order=0)
    m_grid, H_grid = pf.m.reshape(shape), pf.H.reshape(shape)
    solid = H_grid >= trim_level
    if schedule is None:
        schedule = iso_schedule(m_grid[solid], spacing)
    if not solid.any():
        log.warning("no solid region; nothing to slice")
        return [], schedule, h
    indices = range(len(schedule.isovalues)) if layer_indices is None else layer_indices
    origin = np.array([a[0] for a in axes])
    raw = []
    for i in indices:
        c = float(schedule.isovalues[i])
        if not m_grid.min() < c < m_grid.max():
            continue
        verts, faces, _, _ = marching_cubes(m_grid, level=c, spacing=(h, h, h), method="lorensen",
                                            allow_degenerate=False)
        raw.append((i, c, verts + origin, faces))
    if not raw:
        return [], schedule, h
    # trim on H first, then evaluate the costly attributes on the surviving vertices only
    H_v = source(np.concatenate([r[2] for r in raw]), order=0).H
    kept, start = [], 0
    for i, c, verts, faces in raw:
        H = H_v[start:start + len(verts)]
        start += len(verts)
        faces = faces[(H[faces] >= trim_level).all(axis=1)]
        if len(faces) == 0:
            continue
        used = np.unique(faces)
        remap = -np.ones(len(verts), np.int64)
        remap[used] = np.arange(len(used))
        kept.append((i, c, verts[used], remap[faces]))
    if not kept:
        return [], schedule, h
    attrs = vertex_attributes(source, np.concatenate([k[2] for k in kept]), schedule.spacing, limits)
    layers, start = [], 0
    for i, c, verts, faces in kept:
        sl = slice(start, start + len(verts))
        start += len(verts)
        a = {k: v[sl] for k, v in attrs.items()}
        layer = CurvedLayer(
            isovalue=c, vertices=verts, faces=faces, fiber=a["fiber"], normal=a["normal"],
            thickness=a["thickness"], K_max=a["K_max"], K_f=a["K_f"], m_values=a["m"], H=a["H"],
            grad_norm=a["grad_norm"], index=int(i),
        )
        layer.flags["non_manifold_edges"] = _non_manifold_edges(layer.faces)
        layers.append(layer)
    return layers, schedule, h


def _non_manifold_edges(faces: np.ndarray) -> int:
    e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return int((counts > 2).sum())


# ----------------------------------------------------------------------------
# statistics
# ----------------------------------------------------------------------------
THICKNESS_BINS = np.linspace(0.0, 2.0, 41)
CURVATURE_BINS = np.linspace(-0.5, 0.5, 41)


def _hist(values, bins):
    v = np.clip(values, bins[0], bins[-1])
    counts, _ = np.histogram(v, bins=bins)
    return counts


@dataclass
class LayerStats:
    count: int
    thickness_hist: np.ndarray
    K_max_hist: np.ndarray
    K_f_hist: np.ndarray
    thickness_violation: float
    curvature_violation: float
    path_violation: float
    bins: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"count": self.count, "thickness_violation": self.thickness_violation,
                "curvature_violation": self.curvature_violation, "path_violation": self.path_violation}


def violation_stats(thickness, K, K_f, limits: ManufacturingLimits) -> LayerStats:
    n = len(thickness)
    tol = 1e-9
    frac = (lambda mask: float(mask.sum() / n)) if n else (lambda mask: 0.0)
    return LayerStats(
        count=n,
        thickness_hist=_hist(thickness, THICKNESS_BINS),
        K_max_hist=_hist(K, CURVATURE_BINS),
        K_f_hist=_hist(K_f, CURVATURE_BINS),
        thickness_violation=frac((thickness < limits.t_min - tol) | (thickness > limits.t_max + tol)),
        curvature_violation=frac(K > limits.K_lc + tol),
        path_violation=frac(np.abs(K_f) > limits.K_f_max + tol),
        bins={"thickness": THICKNESS_BINS, "curvature": CURVATURE_BINS},
    )


def layer_statistics(layers: list[CurvedLayer], limits: ManufacturingLimits) -> LayerStats:
    """Histograms and violation fractions over all (trimmed) layer vertices."""
    if not layers:
        return violation_stats(np.zeros(0), np.zeros(0), np.zeros(0), limits)
    cat = lambda name: np.concatenate([getattr(l, name) for l in layers])
    return violation_stats(cat("thickness"), cat("K_max"), cat("K_f"), limits)


def sample_statistics(triple: FieldTriple, points, limits: ManufacturingLimits, void_mask=None,
                      trim_level: float = SOLID) -> LayerStats:
    """Same statistics over the solid members of a point sample (``H >= 0.5``)."""
    src = TripleSource(triple, void_mask)
    x = np.asarray(points)
    pf = src(x, order=0)
    solid = pf.H >= trim_level
    if not solid.any():
        return violation_stats(np.zeros(0), np.zeros(0), np.zeros(0), limits)
    a = vertex_attributes(src, x[solid], limits.delta_c, limits)
    return violation_stats(a["thickness"], a["K_max"], a["K_f"], limits)


def fiber_alignment_report(layer: CurvedLayer, fiber: np.ndarray | None = None) -> tuple[float, float]:
    """Mean and std (degrees) of the angle between fibers and the mesh tangent plane."""
    f = layer.fiber if fiber is None else np.asarray(fiber, float)
    if layer.n_vertices == 0:
        return 0.0, 0.0
    n = layer.vertex_normals()
    f = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-300)
    ang = np.degrees(np.arcsin(np.clip(np.abs((f * n).sum(1)), 0.0, 1.0)))
    return float(ang.mean()), float(ang.std())


def alignment_over_layers(layers: list[CurvedLayer]) -> tuple[float, float]:
    if not layers:
        return 0.0, 0.0
    angles = []
    for l in layers:
        n = l.vertex_normals()
        angles.append(np.degrees(np.arcsin(np.clip(np.abs((l.fiber * n).sum(1)), 0.0, 1.0))))
    a = np.concatenate(angles)
    return float(a.mean()), float(a.std())


def iso_fidelity(layer: CurvedLayer, h: float) -> float:
    """Largest ``|m(v) - c| / (1.5 * cell diagonal * |grad m(v)|)`` over the layer; <= 1 passes."""
    if layer.n_vertices == 0:
        return 0.0
    bound = 1.5 * math.sqrt(3) * h * np.maximum(layer.grad_norm, 1e-12)
    return float((np.abs(layer.m_values - layer.isovalue) / bound).max())


def layer_spacing(lower: CurvedLayer, upper: CurvedLayer) -> np.ndarray:
    """Distance from each vertex of ``lower`` to the nearest vertex of ``upper``."""
    tree = cKDTree(upper.vertices)
    d, _ = tree.query(lower.vertices)
    return d


# ----------------------------------------------------------------------------
# export
# ----------------------------------------------------------------------------
def write_obj(path, layer: CurvedLayer) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# layer {layer.index} isovalue {layer.isovalue:.9g}\n")
        for v in layer.vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in layer.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def write_vertex_csv(path, layer: CurvedLayer) -> None:
    cols = np.column_stack([np.arange(layer.n_vertices), layer.vertices, layer.fiber, layer.thickness,
                            layer.K_max, layer.K_f])
    header = "vertex,x,y,z,fx,fy,fz,thickness,K_max,K_f"
    np.savetxt(path, cols, delimiter=",", header=header, comments="", fmt="%.9g")


def write_histograms(path, stats: LayerStats) -> None:
    tb, cb = THICKNESS_BINS, CURVATURE_BINS
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("quantity,bin_lo,bin_hi,count\n")
        for name, counts, bins in (("thickness", stats.thickness_hist, tb), ("K_max", stats.K_max_hist, cb),
                                   ("K_f", stats.K_f_hist, cb)):
            for lo, hi, c in zip(bins[:-1], bins[1:], counts):
                fh.write(f"{name},{lo:.6g},{hi:.6g},{int(c)}\n")


def export_layers(out_dir, layers: list[CurvedLayer], schedule: IsoSchedule, stats: LayerStats,
                  extra: dict | None = None) -> dict:
    """Write OBJ + vertex CSV per layer, the histogram CSV and a manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for layer in layers:
        stem = f"layer_{layer.index:04d}"
        write_obj(out / f"{stem}.obj", layer)
        write_vertex_csv(out / f"{stem}.csv", layer)
        entries.append({"index": layer.index, "isovalue": layer.isovalue, "obj": f"{stem}.obj",
                        "attributes": f"{stem}.csv", "vertices": layer.n_vertices, "faces": len(layer.faces),
                        "non_manifold_edges": layer.flags.get("non_manifold_edges", 0)})
    write_histograms(out / "histograms.csv", stats)
    manifest = {
        "layers": entries,
        "isovalues": schedule.isovalues.tolist(),
        "spacing": schedule.spacing,
        "m_range": list(schedule.m_range),
        "violations": stats.to_dict(),
        "files": [e["obj"] for e in entries] + [e["attributes"] for e in entries] + ["histograms.csv",
                                                                                     "layers.json"],
    }
    if extra:
        manifest.update(extra)
    (out / "layers.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest
