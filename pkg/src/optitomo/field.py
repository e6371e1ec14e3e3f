"""Coefficient, solution, and boundary-trace containers plus samplers and emitters.

Coefficients are piecewise constant per element (values sampled at element
centroids); solutions are nodal P1 fields; boundary traces hold one value per
boundary node in angular order.  Boundary transfer between meshes uses the
angle parameterization of the circle, which is exact for the disk geometry
and reproduces constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FieldError
from .mesh import TriMesh


@dataclass(frozen=True)
class PiecewiseConstantField:
    """One value per element."""

    mesh: TriMesh
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float, copy=True)
        if vals.shape != (self.mesh.n_elements,):
            raise FieldError(
                f"expected {self.mesh.n_elements} element values, got {vals.shape}"
            )
        object.__setattr__(self, "values", vals)
        vals.setflags(write=False)

    def require_positive(self) -> "PiecewiseConstantField":
        if np.any(self.values <= 0.0):
            bad = int(np.argmin(self.values))
            raise FieldError(
                f"coefficient must be strictly positive; element {bad} has "
                f"value {self.values[bad]:.6g}"
            )
        return self


@dataclass(frozen=True)
class NodalField:
    """One value per node (P1 finite-element function)."""

    mesh: TriMesh
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float, copy=True)
        if vals.shape != (self.mesh.n_nodes,):
            raise FieldError(f"expected {self.mesh.n_nodes} nodal values, got {vals.shape}")
        object.__setattr__(self, "values", vals)
        vals.setflags(write=False)


@dataclass(frozen=True)
class BoundaryTrace:
    """One value per boundary node, in the angular order of ``mesh.boundary_nodes``."""

    mesh: TriMesh
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float, copy=True)
        if vals.shape != (self.mesh.n_boundary,):
            raise FieldError(
                f"expected {self.mesh.n_boundary} boundary values, got {vals.shape}"
            )
        object.__setattr__(self, "values", vals)
        vals.setflags(write=False)


def constant(value: float):
    """Descriptor: the constant function."""
    def fn(x, y):
        return np.full_like(np.asarray(x, dtype=float), value)
    return fn


def disk_indicator(cx: float, cy: float, radius: float, inside: float, outside: float):
    """Descriptor: ``inside`` on the open disk around (cx, cy), ``outside`` elsewhere."""
    def fn(x, y):
        hit = (np.asarray(x) - cx) ** 2 + (np.asarray(y) - cy) ** 2 < radius ** 2
        return np.where(hit, inside, outside).astype(float)
    return fn


def square_indicator(half_width: float, inside: float, outside: float):
    """Descriptor: sup-norm square of given half width centered at the origin."""
    def fn(x, y):
        hit = np.maximum(np.abs(np.asarray(x)), np.abs(np.asarray(y))) < half_width
        return np.where(hit, inside, outside).astype(float)
    return fn


def _example1_q(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    bump = np.cos(np.pi * x) * np.cos(np.pi * y)
    hit = np.maximum(np.abs(x), np.abs(y)) < 0.5
    return 1.0 + np.where(hit, bump, 0.0)


# The four circular inclusions of the simultaneous-reconstruction benchmark.
EX2_DISKS = {
    "d1": (0.5, 0.0, 0.2),
    "d2": (-0.5, 0.0, 0.2),
    "d3": (0.0, 0.5, 0.2),
    "d4": (0.0, -0.5, 0.2),
}


def _two_disk(values_by_disk, background: float):
    def fn(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.full(np.broadcast(x, y).shape, background, dtype=float)
        for name, value in values_by_disk:
            cx, cy, r = EX2_DISKS[name]
            out = np.where((x - cx) ** 2 + (y - cy) ** 2 < r ** 2, value, out)
        return out
    return fn


CATALOGUE = {
    "one": constant(1.0),
    "example1_sigma": disk_indicator(0.0, 0.0, 0.5, 2.0, 1.0),
    "example1_q": _example1_q,
    "example2_sigma": _two_disk((("d1", 2.0), ("d2", 3.0)), 1.0),
    "example2_q": _two_disk((("d3", 3.0), ("d4", 4.0)), 1.0),
    "example2_sigma_init": _two_disk((("d1", 1.1), ("d2", 1.2)), 1.0),
    "example2_q_init": _two_disk((("d3", 1.1), ("d4", 1.2)), 1.0),
}


def parse_descriptor(text: str):
    """Parse a coefficient descriptor string into a callable of (x, y).

    Accepted forms: a catalogue name, ``constant:VALUE``,
    ``disk:CX,CY,R,INSIDE,OUTSIDE``, and ``square:HALF,INSIDE,OUTSIDE``.
    """
    name, _, arg = text.partition(":")
    name = name.strip()
    if not arg:
        if name in CATALOGUE:
            return CATALOGUE[name]
        raise FieldError(f"unknown coefficient descriptor {text!r}")
    parts = [float(p) for p in arg.split(",")]
    if name == "constant" and len(parts) == 1:
        return constant(parts[0])
    if name == "disk" and len(parts) == 5:
        return disk_indicator(*parts)
    if name == "square" and len(parts) == 3:
        return square_indicator(*parts)
    raise FieldError(f"malformed coefficient descriptor {text!r}")


def sample_coefficient(mesh: TriMesh, expr, positive: bool = True) -> PiecewiseConstantField:
    """Sample a descriptor at element centroids.

    ``expr`` is a catalogue name, a descriptor string, or a callable of
    vectorized (x, y).  With ``positive=True`` (the coefficient role) any
    non-positive sampled value is an error.
    """
    fn = parse_descriptor(expr) if isinstance(expr, str) else expr
    cen = mesh.centroids
    values = np.asarray(fn(cen[:, 0], cen[:, 1]), dtype=float)
    if values.shape != (mesh.n_elements,):
        raise FieldError("descriptor did not evaluate to one value per element")
    out = PiecewiseConstantField(mesh, values)
    if positive:
        out.require_positive()
    return out


def restrict_to_boundary(u: NodalField) -> BoundaryTrace:
    """Pick nodal values at boundary nodes in angular order."""
    return BoundaryTrace(u.mesh, u.values[u.mesh.boundary_nodes])


def transfer_boundary_trace(fine: TriMesh, trace: BoundaryTrace, coarse: TriMesh) -> BoundaryTrace:
    """Transfer a boundary trace between unit-disk meshes by angle interpolation.

    The coarse value at a boundary node with angle theta is the piecewise
    linear interpolant (in theta, periodic) of the fine trace.  Exact on
    constants and linear in the trace.
    """
    if trace.mesh is not fine:
        raise FieldError("trace is not defined on the given fine mesh")
    vals = np.interp(
        coarse.boundary_angles,
        fine.boundary_angles,
        trace.values,
        period=2.0 * np.pi,
    )
    return BoundaryTrace(coarse, vals)


def write_element_csv(field: PiecewiseConstantField, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("element_index,value\n")
        for i, v in enumerate(field.values):
            fh.write(f"{i},{v:.17g}\n")


def read_element_csv(mesh: TriMesh, path) -> PiecewiseConstantField:
    values = _read_indexed_csv(path, "element_index", mesh.n_elements)
    return PiecewiseConstantField(mesh, values)


def write_node_csv(field: NodalField, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("node_index,value\n")
        for i, v in enumerate(field.values):
            fh.write(f"{i},{v:.17g}\n")


def read_node_csv(mesh: TriMesh, path) -> NodalField:
    values = _read_indexed_csv(path, "node_index", mesh.n_nodes)
    return NodalField(mesh, values)


def write_trace_csv(trace: BoundaryTrace, path) -> None:
    """Boundary trace rows keyed by global node index, in angular order."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("node_index,value\n")
        for n, v in zip(trace.mesh.boundary_nodes, trace.values):
            fh.write(f"{n},{v:.17g}\n")


def read_trace_csv(mesh: TriMesh, path) -> BoundaryTrace:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != "node_index,value":
            raise FieldError(f"unexpected trace CSV header {header!r}")
        by_node = {}
        for line in fh:
            idx, val = line.strip().split(",")
            by_node[int(idx)] = float(val)
    try:
        values = np.array([by_node[int(n)] for n in mesh.boundary_nodes])
    except KeyError as exc:
        raise FieldError(f"trace CSV is missing boundary node {exc}") from None
    return BoundaryTrace(mesh, values)


def _read_indexed_csv(path, key: str, expected: int) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != f"{key},value":
            raise FieldError(f"unexpected CSV header {header!r}")
        values = np.full(expected, np.nan)
        for line in fh:
            idx, val = line.strip().split(",")
            values[int(idx)] = float(val)
    if np.any(np.isnan(values)):
        raise FieldError(f"CSV does not cover all {expected} entries")
    return values


def write_field_pgm(field: PiecewiseConstantField, path, resolution: int = 512) -> None:
    """Rasterize element values to a binary PGM heatmap.

    Pixels outside the (polygonal) disk get gray level 0; inside pixels are
    mapped linearly onto 1..255 between the field minimum and maximum (a
    constant field maps to 255).  Row 0 of the image is y = +1.
    """
    mesh = field.mesh
    img = np.zeros((resolution, resolution), dtype=np.uint8)
    vmin = float(field.values.min())
    vmax = float(field.values.max())
    span = vmax - vmin
    if span > 0.0:
        gray = (1.0 + np.round(254.0 * (field.values - vmin) / span)).astype(np.uint8)
    else:
        gray = np.full(mesh.n_elements, 255, dtype=np.uint8)

    h = 2.0 / resolution
    centers = -1.0 + (np.arange(resolution) + 0.5) * h
    p = mesh.nodes[mesh.elements]
    for e in range(mesh.n_elements):
        tri = p[e]
        xlo = int(np.clip(np.floor((tri[:, 0].min() + 1.0) / h), 0, resolution - 1))
        xhi = int(np.clip(np.ceil((tri[:, 0].max() + 1.0) / h), 0, resolution - 1))
        ylo = int(np.clip(np.floor((tri[:, 1].min() + 1.0) / h), 0, resolution - 1))
        yhi = int(np.clip(np.ceil((tri[:, 1].max() + 1.0) / h), 0, resolution - 1))
        xs = centers[xlo:xhi + 1]
        ys = centers[ylo:yhi + 1]
        if xs.size == 0 or ys.size == 0:
            continue
        gx, gy = np.meshgrid(xs, ys)
        inside = _barycentric_mask(tri, gx, gy)
        if not inside.any():
            continue
        rows = (resolution - 1) - (ylo + np.nonzero(inside)[0])
        cols = xlo + np.nonzero(inside)[1]
        img[rows, cols] = gray[e]

    with open(path, "wb") as fh:
        fh.write(f"P5\n{resolution} {resolution}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _barycentric_mask(tri: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    (x0, y0), (x1, y1), (x2, y2) = tri
    det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    l1 = ((gx - x0) * (y2 - y0) - (gy - y0) * (x2 - x0)) / det
    l2 = ((gy - y0) * (x1 - x0) - (gx - x0) * (y1 - y0)) / det
    eps = 1e-12
    return (l1 >= -eps) & (l2 >= -eps) & (l1 + l2 <= 1.0 + eps)
