"""Finite-volume grids and discrete spatial operators on the fixed domain.

Two cell-centered uniform grids: boxes [0,L_1]x...x[0,L_d] for d = 1,2,3,
and a radially symmetric reduction of the unit ball (cells are spherical
shells, the first cell center sits at dr/2 so no stencil touches r = 0).

assemble_A discretizes A(t)v = -sum_jk d_j(a_jk d_k v) + beta v in flux
form: every interior face carries a_face * (normal difference quotient) *
face area, with a_face the arithmetic mean of the two adjacent cell-center
coefficient values; boundary faces carry no flux, which is the discrete
statement of the conormal condition n . (M grad v) = 0.  The resulting
flux matrix S has exact zero row and column sums, so constants are in its
kernel and the total mass sum(vol * v) only moves through beta and the
right-hand side.  Off-diagonal coefficients a_jk (j != k) are assembled
into a separate matrix meant to be lagged explicitly by the stepper; the
implicit part stays symmetric positive semidefinite.

The operator acts as A v = S v / vol + beta v, which is self-adjoint in
the volume-weighted inner product used by `inner`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .diffeo import BallDomain

_SPHERE_AREA = {1: 2.0, 2: 2.0 * np.pi, 3: 4.0 * np.pi}


class GridError(Exception):
    pass


@dataclass(frozen=True)
class BoxGrid:
    extents: tuple
    counts: tuple

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(float(L) for L in self.extents))
        object.__setattr__(self, "counts", tuple(int(n) for n in self.counts))
        d = len(self.counts)
        if not 1 <= d <= 3 or len(self.extents) != d:
            raise GridError(f"need matching extents/counts in 1..3 axes, "
                            f"got {self.extents} / {self.counts}")
        if any(n < 3 for n in self.counts):
            raise GridError(f"at least 3 cells per axis required, got {self.counts}")
        if any(L <= 0 for L in self.extents):
            raise GridError(f"extents must be positive, got {self.extents}")

    kind = "box"

    @property
    def dim(self):
        return len(self.counts)

    @property
    def axes(self):
        return len(self.counts)

    @property
    def m(self):
        return int(np.prod(self.counts))

    @cached_property
    def spacing(self):
        return tuple(L / n for L, n in zip(self.extents, self.counts))

    @cached_property
    def centers(self):
        axes = [(np.arange(n) + 0.5) * h for n, h in zip(self.counts, self.spacing)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([c.ravel() for c in mesh])

    @cached_property
    def volumes(self):
        return np.full(self.m, float(np.prod(self.spacing)))

    def embed(self):
        return self.centers


@dataclass(frozen=True)
class RadialGrid:
    dim: int
    n: int

    def __post_init__(self):
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "n", int(self.n))
        if self.dim not in (1, 2, 3):
            raise GridError(f"ambient dimension must be 1, 2 or 3, got {self.dim}")
        if self.n < 8:
            raise GridError(f"radial grid needs at least 8 cells, got {self.n}")

    kind = "radial"
    axes = 1

    @property
    def m(self):
        return self.n

    @cached_property
    def spacing(self):
        return (1.0 / self.n,)

    @cached_property
    def faces(self):
        return np.linspace(0.0, 1.0, self.n + 1)

    @cached_property
    def centers(self):
        return ((np.arange(self.n) + 0.5) / self.n).reshape(-1, 1)

    @cached_property
    def volumes(self):
        # exact shell volumes: the cell sums telescope to the ball volume
        rf = self.faces
        return _SPHERE_AREA[self.dim] * (rf[1:] ** self.dim - rf[:-1] ** self.dim) / self.dim

    def embed(self):
        pts = np.zeros((self.n, self.dim))
        pts[:, 0] = self.centers[:, 0]
        return pts


@dataclass
class GridField:
    grid: object
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.m,):
            raise GridError(f"field shape {vals.shape} does not match "
                            f"grid with {self.grid.m} cells")
        if not np.all(np.isfinite(vals)):
            raise GridError("field values must be finite")
        self.values = vals.copy()


def as_field(grid, data) -> GridField:
    """Coerce a scalar, array or GridField onto grid (validating shape)."""
    if isinstance(data, GridField):
        if data.grid != grid:
            raise GridError("field belongs to a different grid")
        return data
    if np.isscalar(data):
        return GridField(grid, np.full(grid.m, float(data)))
    return GridField(grid, np.asarray(data, dtype=float))


def _values(grid, data):
    return as_field(grid, data).values


# ---------------------------------------------------------------------------
# difference matrices

def _deriv_1d(n, h):
    # central interior, second-order one-sided at the ends (exact on quadratics)
    rows = [0, 0, 0, n - 1, n - 1, n - 1]
    cols = [0, 1, 2, n - 3, n - 2, n - 1]
    vals = [-1.5 / h, 2.0 / h, -0.5 / h, 0.5 / h, -2.0 / h, 1.5 / h]
    i = np.arange(1, n - 1)
    rows = np.concatenate([rows, i, i])
    cols = np.concatenate([cols, i - 1, i + 1])
    vals = np.concatenate([vals, np.full(n - 2, -0.5 / h), np.full(n - 2, 0.5 / h)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


@lru_cache(maxsize=64)
def _grad_matrices(grid):
    if grid.kind == "radial":
        return (_deriv_1d(grid.n, grid.spacing[0]),)
    mats = []
    for a in range(grid.dim):
        M = sp.identity(1, format="csr")
        for i, n in enumerate(grid.counts):
            F = _deriv_1d(n, grid.spacing[i]) if i == a else sp.identity(n)
            M = sp.kron(M, F, format="csr")
        mats.append(M)
    return tuple(mats)


def _axis_faces(counts, a):
    """Flat indices of the (low, high) cells across every interior a-face."""
    idx = np.arange(int(np.prod(counts))).reshape(counts)
    sl = [slice(None)] * len(counts)
    sl[a] = slice(None, -1)
    lo = idx[tuple(sl)].ravel()
    sl[a] = slice(1, None)
    hi = idx[tuple(sl)].ravel()
    return lo, hi


def _boundary_cells(counts, a, side):
    idx = np.arange(int(np.prod(counts))).reshape(counts)
    sl = [slice(None)] * len(counts)
    sl[a] = 0 if side == 0 else -1
    return idx[tuple(sl)].ravel()


def gradient(grid, v):
    """Per-axis derivative fields: central interior, one-sided at boundaries."""
    vals = _values(grid, v)
    return [GridField(grid, G @ vals) for G in _grad_matrices(grid)]


def gradient_array(grid, v):
    vals = _values(grid, v)
    return np.column_stack([G @ vals for G in _grad_matrices(grid)])


# ---------------------------------------------------------------------------
# inner products and norms

def inner(grid, v, w):
    # v*w first: elementwise products commute exactly, so inner is
    # bit-for-bit symmetric in its arguments
    return float(np.dot(grid.volumes, _values(grid, v) * _values(grid, w)))


def norm_L2(grid, v):
    return float(np.sqrt(inner(grid, v, v)))


def norm_H1(grid, v):
    vals = _values(grid, v)
    sq = inner(grid, vals, vals)
    for G in _grad_matrices(grid):
        g = G @ vals
        sq += float(np.dot(grid.volumes, g * g))
    return float(np.sqrt(sq))


def mass(grid, v):
    return float(np.dot(grid.volumes, _values(grid, v)))


# ---------------------------------------------------------------------------
# operator assembly

@dataclass(frozen=True, eq=False)
class SparseOperator:
    """A(t) in flux form: apply(v) = (flux @ v) / vol + beta v (+ cross part).

    `flux` collects the symmetric diagonal-coefficient fluxes; `cross` the
    off-diagonal a_jk fluxes, kept apart so time steppers can treat them
    explicitly while the implicit matrix stays SPD.  `symmetric` asserts
    elementwise symmetry of the assembled operator within 1e-13 relative.
    """
    grid: object
    flux: sp.csr_matrix
    volumes: np.ndarray
    beta: float
    cross: object = None
    symmetric: bool = False
    symmetry_residual: float = 0.0

    @property
    def n(self):
        return self.flux.shape[0]

    def apply_implicit(self, v):
        return (self.flux @ v) / self.volumes + self.beta * v

    def apply_explicit(self, v):
        if self.cross is None:
            return np.zeros_like(v)
        return (self.cross @ v) / self.volumes

    def apply(self, v):
        out = self.apply_implicit(v)
        if self.cross is not None:
            out += (self.cross @ v) / self.volumes
        return out

    def shifted(self, dt):
        """Operator I + dt * (implicit part), in the same flux form."""
        return SparseOperator(self.grid, self.flux * dt, self.volumes,
                              1.0 + dt * self.beta, None, self.symmetric,
                              self.symmetry_residual)

    @cached_property
    def spd_matrix(self):
        """flux + beta*diag(vol): the plain-SPD matrix behind apply_implicit."""
        return (self.flux + sp.diags(self.beta * self.volumes)).tocsr()


def _face_flux_coo(lo, hi, w):
    rows = np.concatenate([lo, hi, lo, hi])
    cols = np.concatenate([lo, hi, hi, lo])
    vals = np.concatenate([w, w, -w, -w])
    return rows, cols, vals


def assemble_A(p, grid, t) -> SparseOperator:
    """Finite-volume assembly of A(t) for the transformed problem p."""
    t = float(t)
    if not np.isfinite(t):
        raise GridError(f"assembly time must be finite, got {t}")
    if grid.kind == "radial" and not isinstance(p.domain, BallDomain):
        raise GridError("radial grids apply only to ball domains")
    if grid.kind == "box" and p.dim != grid.dim:
        raise GridError(f"problem dimension {p.dim} does not match "
                        f"grid dimension {grid.dim}")
    a = p.metric.eval_a(t, grid.embed())
    V = grid.volumes
    m = grid.m
    scale = float(np.abs(a).max()) or 1.0

    if grid.kind == "radial":
        off = np.abs(a - a[:, 0, 0][:, None, None] * np.eye(p.dim)).max()
        if off > 1e-9 * scale:
            raise GridError("radial grid requires an isotropic diffusion tensor; "
                            f"anisotropy {off:.3e} detected on the sampling ray")
        s = a[:, 0, 0]
        rf = grid.faces[1:-1]
        dr = grid.spacing[0]
        area = _SPHERE_AREA[grid.dim] * rf ** (grid.dim - 1)
        w = area * 0.5 * (s[:-1] + s[1:]) / dr
        lo = np.arange(m - 1)
        rows, cols, vals = _face_flux_coo(lo, lo + 1, w)
        S = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))
        cross = None
    else:
        rows, cols, vals = [], [], []
        cell_vol = float(np.prod(grid.spacing))
        for ax in range(grid.dim):
            lo, hi = _axis_faces(grid.counts, ax)
            h = grid.spacing[ax]
            area = cell_vol / h
            w = area * 0.5 * (a[lo, ax, ax] + a[hi, ax, ax]) / h
            r, c, v = _face_flux_coo(lo, hi, w)
            rows.append(r)
            cols.append(c)
            vals.append(v)
        S = sp.csr_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(m, m))
        cross = None
        grads = _grad_matrices(grid)
        for j in range(grid.dim):
            for k in range(grid.dim):
                if j == k or np.abs(a[:, j, k]).max() <= 1e-12 * scale:
                    continue
                lo, hi = _axis_faces(grid.counts, j)
                nf = len(lo)
                area = cell_vol / grid.spacing[j]
                w = area * 0.5 * (a[lo, j, k] + a[hi, j, k])
                inc = sp.csr_matrix(
                    (np.concatenate([np.full(nf, -1.0), np.full(nf, 1.0)]),
                     (np.concatenate([np.arange(nf)] * 2),
                      np.concatenate([lo, hi]))), shape=(nf, m))
                avg = sp.csr_matrix(
                    (np.full(2 * nf, 0.5),
                     (np.concatenate([np.arange(nf)] * 2),
                      np.concatenate([lo, hi]))), shape=(nf, m))
                term = inc.T @ sp.diags(w) @ avg @ grads[k]
                cross = term if cross is None else cross + term
        if cross is not None:
            cross = cross.tocsr()

    resid = float(np.abs(S - S.T).max()) if S.nnz else 0.0
    rel = resid / max(float(np.abs(S).max()), 1e-300) if S.nnz else 0.0
    symmetric = cross is None and rel <= 1e-13
    return SparseOperator(grid, S, V, float(p.beta), cross, symmetric, rel)


# ---------------------------------------------------------------------------
# boundary flux diagnostic

def boundary_residual(p, grid, t, v):
    """Max reconstructed conormal flux |n . (M grad v)| over boundary faces."""
    vals = _values(grid, v)
    grads = gradient_array(grid, vals)
    a = p.metric.eval_a(float(t), grid.embed())
    if grid.kind == "radial":
        return float(abs(a[-1, 0, 0] * grads[-1, 0]))
    worst = 0.0
    for ax in range(grid.dim):
        for side in (0, 1):
            cells = _boundary_cells(grid.counts, ax, side)
            flux = np.einsum("mk,mk->m", a[cells][:, ax, :], grads[cells])
            worst = max(worst, float(np.abs(flux).max()))
    return worst


# ---------------------------------------------------------------------------
# snapshots

def write_snapshot(path, field: GridField, time):
    g = field.grid
    counts = g.counts if g.kind == "box" else (g.n,)
    extents = g.extents if g.kind == "box" else (1.0,)
    lines = [
        "movingdom-snapshot 1",
        f"kind {g.kind}",
        f"dim {g.dim}",
        "counts " + " ".join(str(c) for c in counts),
        "extents " + " ".join(repr(float(e)) for e in extents),
        f"time {float(time)!r}",
    ]
    lines.extend(repr(float(x)) for x in field.values)
    Path(path).write_text("\n".join(lines) + "\n")


def read_snapshot(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "movingdom-snapshot 1":
        raise GridError(f"{path} is not a snapshot file")
    head = {}
    for line in lines[1:6]:
        key, _, rest = line.partition(" ")
        head[key] = rest
    counts = tuple(int(c) for c in head["counts"].split())
    extents = tuple(float(e) for e in head["extents"].split())
    if head["kind"] == "box":
        grid = BoxGrid(extents, counts)
    elif head["kind"] == "radial":
        grid = RadialGrid(int(head["dim"]), counts[0])
    else:
        raise GridError(f"unknown grid kind {head['kind']!r}")
    values = np.array([float(s) for s in lines[6:] if s],)
    return GridField(grid, values), float(head["time"])
