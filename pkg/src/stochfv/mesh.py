"""Structured admissible meshes in one and two space dimensions.

Cells are numbered in C order over ``counts`` (the last axis varies fastest),
so a state vector reshapes to ``counts`` without copying.  Every face joins a
"first" cell to a "second" cell and carries the unit normal pointing from the
first to the second.  Periodic wrap faces are ordinary interior faces.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    """Raised when a mesh cannot be built or violates its invariants."""


@dataclass(frozen=True, eq=False)
class Mesh:
    dimension: int
    bounds: tuple[tuple[float, float], ...]
    counts: tuple[int, ...]
    periodic: tuple[bool, ...]
    cell_volume: np.ndarray
    cell_centroid: np.ndarray
    cell_diameter: np.ndarray
    cell_perimeter: np.ndarray
    face_measure: np.ndarray
    face_midpoint: np.ndarray
    face_normal: np.ndarray
    face_tangent: np.ndarray
    face_cells: np.ndarray
    cell_faces: np.ndarray
    cell_face_sign: np.ndarray
    h: float
    alpha: float
    spacing: tuple[float, ...] = field(default=())

    @property
    def n_cells(self) -> int:
        return self.cell_volume.shape[0]

    @property
    def n_faces(self) -> int:
        return self.face_measure.shape[0]

    @property
    def measure(self) -> float:
        return float(np.prod([b - a for a, b in self.bounds]))

    def adjacency(self, cell: int) -> list[tuple[int, int]]:
        """(face id, orientation) pairs of ``cell``; orientation +1 if the cell is first."""
        out = []
        for f, s in zip(self.cell_faces[cell], self.cell_face_sign[cell]):
            if f >= 0:
                out.append((int(f), int(s)))
        return out

    def outer_ring(self) -> np.ndarray:
        """Indices of the cells touching the box boundary."""
        idx = np.indices(self.counts).reshape(self.dimension, -1)
        mask = np.zeros(self.n_cells, dtype=bool)
        for axis, n in enumerate(self.counts):
            mask |= (idx[axis] == 0) | (idx[axis] == n - 1)
        return np.flatnonzero(mask)

    def cells_in_ball(self, center, radius: float) -> np.ndarray:
        """Cells entirely contained in the closed ball B(center, radius)."""
        center = np.asarray(center, dtype=float)
        half = np.asarray(self.spacing) / 2.0
        # farthest corner of an axis-aligned box from the center
        far = np.abs(self.cell_centroid - center) + half
        return np.flatnonzero(np.sqrt((far**2).sum(axis=1)) <= radius * (1 + 1e-12))

    def description(self) -> dict:
        return {
            "dimension": self.dimension,
            "extents": [list(b) for b in self.bounds],
            "counts": list(self.counts),
            "periodic": list(self.periodic),
        }

    def digest(self) -> str:
        text = json.dumps(self.description(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def refine(self) -> "Mesh":
        return build_uniform_mesh(
            self.dimension, self.bounds, tuple(2 * n for n in self.counts), self.periodic
        )


def build_uniform_mesh(dimension, extents, counts, periodic=None, *, require_periodic=False) -> Mesh:
    """Uniform Cartesian mesh of the box ``extents``.

    ``extents`` is a sequence of (lower, upper) pairs, one per axis; a bare
    pair is accepted in 1D.  Non-periodic axes get no boundary faces (closed
    walls); pass ``require_periodic=True`` when the run relies on the periodic
    surrogate for the whole space.
    """
    d = int(dimension)
    if d not in (1, 2):
        raise MeshError(f"only dimension 1 or 2 is supported, got {dimension}")
    ext = np.asarray(extents, dtype=float)
    if ext.ndim == 1:
        ext = ext[None, :]
    if ext.shape != (d, 2):
        raise MeshError(f"extents must have shape ({d}, 2), got {ext.shape}")
    if np.isscalar(counts):
        counts = (counts,)
    counts = tuple(int(n) for n in counts)
    if len(counts) != d:
        raise MeshError(f"expected {d} cell counts, got {counts}")
    if periodic is None:
        periodic = (True,) * d
    elif isinstance(periodic, (bool, np.bool_)):
        periodic = (bool(periodic),) * d
    periodic = tuple(bool(p) for p in periodic)
    if len(periodic) != d:
        raise MeshError(f"expected {d} periodic flags, got {periodic}")
    for n in counts:
        if n < 3:
            raise MeshError(f"each axis needs at least 3 cells (two-neighbour stencil), got {counts}")
    lengths = ext[:, 1] - ext[:, 0]
    if not np.all(np.isfinite(lengths)) or np.any(lengths <= 0):
        raise MeshError(f"degenerate extents {ext.tolist()}")
    if require_periodic and not all(periodic):
        raise MeshError("compact-support containment needs periodic axes; got non-periodic axis")

    dx = lengths / np.asarray(counts)
    ncells = int(np.prod(counts))
    idx = np.indices(counts).reshape(d, -1).T  # (ncells, d)
    centroid = ext[:, 0] + (idx + 0.5) * dx
    volume = np.full(ncells, float(np.prod(dx)))
    diameter = np.full(ncells, float(np.sqrt((dx**2).sum())))
    if d == 1:
        perimeter = np.full(ncells, 2.0)
    else:
        perimeter = np.full(ncells, 2.0 * float(dx.sum()))

    first, second, normal, tangent, meas, mid = [], [], [], [], [], []
    for axis in range(d):
        nbr = idx.copy()
        nbr[:, axis] += 1
        if periodic[axis]:
            nbr[:, axis] %= counts[axis]
            keep = np.ones(ncells, dtype=bool)
        else:
            keep = nbr[:, axis] < counts[axis]
        cells = np.flatnonzero(keep)
        nb = np.ravel_multi_index(tuple(nbr[keep].T), counts)
        e = np.zeros(d)
        e[axis] = 1.0
        t = np.zeros(d)
        if d == 2:
            t[1 - axis] = 1.0
        first.append(cells)
        second.append(nb)
        normal.append(np.tile(e, (cells.size, 1)))
        tangent.append(np.tile(t, (cells.size, 1)))
        meas.append(np.full(cells.size, 1.0 if d == 1 else float(dx[1 - axis])))
        m = centroid[cells].copy()
        m[:, axis] += 0.5 * dx[axis]
        mid.append(m)
    face_cells = np.stack([np.concatenate(first), np.concatenate(second)], axis=1)
    nfaces = face_cells.shape[0]

    owner = np.concatenate([face_cells[:, 0], face_cells[:, 1]])
    fid = np.concatenate([np.arange(nfaces), np.arange(nfaces)])
    sgn = np.concatenate([np.ones(nfaces, np.int64), -np.ones(nfaces, np.int64)])
    order = np.argsort(owner, kind="stable")
    owner, fid, sgn = owner[order], fid[order], sgn[order]
    start = np.searchsorted(owner, np.arange(ncells))
    slot = np.arange(owner.size) - start[owner]
    cell_faces = -np.ones((ncells, 2 * d), dtype=np.int64)
    cell_sign = np.zeros((ncells, 2 * d), dtype=np.int64)
    cell_faces[owner, slot] = fid
    cell_sign[owner, slot] = sgn

    h = float(diameter.max())
    mesh = Mesh(
        dimension=d,
        bounds=tuple((float(a), float(b)) for a, b in ext),
        counts=counts,
        periodic=periodic,
        cell_volume=volume,
        cell_centroid=centroid,
        cell_diameter=diameter,
        cell_perimeter=perimeter,
        face_measure=np.concatenate(meas),
        face_midpoint=np.concatenate(mid),
        face_normal=np.concatenate(normal),
        face_tangent=np.concatenate(tangent),
        face_cells=face_cells,
        cell_faces=cell_faces,
        cell_face_sign=cell_sign,
        h=h,
        alpha=uniform_alpha(dx),
        spacing=tuple(float(s) for s in dx),
    )
    for a in (mesh.cell_volume, mesh.cell_centroid, mesh.face_measure, mesh.face_cells):
        a.setflags(write=False)
    return mesh


def uniform_alpha(dx) -> float:
    """Closed-form regularity constant of a uniform box cell with side lengths ``dx``."""
    dx = np.asarray(dx, dtype=float)
    d = dx.size
    h = math.sqrt(float((dx**2).sum()))
    vol = float(np.prod(dx))
    perim = 2.0 if d == 1 else 2.0 * float(dx.sum())
    return min(vol / h**d, h ** (d - 1) / perim)


@dataclass(frozen=True)
class AdmissibilityReport:
    ok: bool
    alpha: float
    worst_cells: np.ndarray
    message: str = ""


def verify_admissibility(mesh: Mesh, rtol: float = 1e-12) -> AdmissibilityReport:
    """Largest alpha with alpha*h^d <= |K| and |dK| <= h^(d-1)/alpha on every cell."""
    d = mesh.dimension
    h = float(mesh.cell_diameter.max())
    vol = np.asarray(mesh.cell_volume, dtype=float)
    perim = np.asarray(mesh.cell_perimeter, dtype=float)
    if not np.all(np.isfinite(vol)) or np.any(vol <= 0) or h <= 0:
        bad = np.flatnonzero(~(vol > 0))
        return AdmissibilityReport(False, 0.0, bad, "cell with non-positive measure")
    with np.errstate(divide="ignore"):
        per_cell = np.minimum(vol / h**d, np.where(perim > 0, h ** (d - 1) / perim, np.inf))
    alpha = float(per_cell.min())
    if not alpha > 0:
        return AdmissibilityReport(False, 0.0, np.flatnonzero(per_cell <= 0), "no positive alpha")
    worst = np.flatnonzero(per_cell <= alpha * (1 + rtol))
    ok = bool(np.all(alpha * h**d <= vol * (1 + rtol)) and np.all(perim <= h ** (d - 1) / alpha * (1 + rtol)))
    return AdmissibilityReport(ok, alpha, worst)


def check_mesh_invariants(mesh: Mesh) -> None:
    """Raise MeshError on broken face orientation, closure or admissibility."""
    fc = mesh.face_cells
    if np.any(fc[:, 0] == fc[:, 1]):
        raise MeshError("a face joins a cell to itself")
    nrm = np.linalg.norm(mesh.face_normal, axis=1)
    if np.max(np.abs(nrm - 1.0)) > 1e-14:
        raise MeshError("face normals are not unit vectors")
    # closure: sum_faces |s| n_{K,s} = 0 on every cell with a complete face set
    acc = np.zeros((mesh.n_cells, mesh.dimension))
    contrib = mesh.face_measure[:, None] * mesh.face_normal
    np.add.at(acc, fc[:, 0], contrib)
    np.add.at(acc, fc[:, 1], -contrib)
    complete = np.all(mesh.cell_faces >= 0, axis=1)
    tol = 1e-12 * mesh.cell_perimeter[complete]
    if np.any(np.abs(acc[complete]).max(axis=1) > tol):
        raise MeshError("closed polytope identity violated")
    rep = verify_admissibility(mesh)
    if not rep.ok:
        raise MeshError(f"mesh not admissible: {rep.message}")
    if not rep.alpha >= mesh.alpha * (1 - 1e-12):
        raise MeshError(f"stored alpha {mesh.alpha} exceeds admissible {rep.alpha}")


def is_nested(coarse: Mesh, fine: Mesh) -> bool:
    return (
        coarse.dimension == fine.dimension
        and coarse.bounds == fine.bounds
        and coarse.periodic == fine.periodic
        and all(2 * a == b for a, b in zip(coarse.counts, fine.counts))
    )


def prolong(values: np.ndarray, coarse: Mesh, fine: Mesh) -> np.ndarray:
    """Conservative projection of a coarse piecewise-constant field onto its refinement."""
    if not is_nested(coarse, fine):
        raise MeshError("meshes are not nested by a factor of two")
    values = np.asarray(values)
    lead = values.shape[:-1]
    v = values.reshape(lead + coarse.counts)
    for k in range(coarse.dimension):
        v = np.repeat(v, 2, axis=len(lead) + k)
    return v.reshape(lead + (fine.n_cells,))


def restrict(values: np.ndarray, fine: Mesh, coarse: Mesh) -> np.ndarray:
    """Cell averages of a fine field over the cells of its coarsening."""
    if not is_nested(coarse, fine):
        raise MeshError("meshes are not nested by a factor of two")
    values = np.asarray(values, dtype=float)
    lead = values.shape[:-1]
    shape = list(lead)
    for n in coarse.counts:
        shape += [n, 2]
    v = values.reshape(tuple(shape))
    axes = tuple(len(lead) + 2 * k + 1 for k in range(coarse.dimension))
    return v.mean(axis=axes).reshape(lead + (coarse.n_cells,))
