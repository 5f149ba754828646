"""Supertoken clustering: grid-seeded centroids, windowed Gaussian
associations, convex center updates, hard assignment and token aggregation.

Centers are numbered cell-major: center ``j`` lives in grid cell ``j // M``
and cells are numbered row-major over the ``F x F`` grid.  A pixel is only
compared against centers whose home cell lies within Chebyshev distance
``window`` of the pixel's own cell, so every association row stores the same
fixed-width, ascending list of candidate centers (padded with -1).
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import sparse

from .rng import Xoshiro256

# pixels per chunk when materialising (pixel, candidate, channel) differences
_CHUNK = 4096


@dataclass
class ClusterConfig:
    grid: int = 16  # F, cells per side
    per_cell: int = 4  # M, centroids per cell
    iterations: int = 4  # T
    knn: int = 9  # k
    window: int = 1  # R, in grid cells
    jitter: bool = False

    def __post_init__(self):
        for name in ("grid", "per_cell", "iterations", "knn"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.window < 0:
            raise ValueError("window must be >= 0")

    @property
    def num_centers(self):
        return self.grid * self.grid * self.per_cell

    def sublattice(self):
        cols = math.ceil(math.sqrt(self.per_cell))
        rows = math.ceil(self.per_cell / cols)
        return rows, cols


class Grid:
    """Balanced partition of an ``H x W`` image into ``F x F`` cells."""

    def __init__(self, height, width, cells):
        if height < cells or width < cells:
            raise ValueError(f"image {height}x{width} is smaller than the {cells}x{cells} grid")
        self.height, self.width, self.cells = height, width, cells
        self.row_bounds = np.array([g * height // cells for g in range(cells + 1)])
        self.col_bounds = np.array([g * width // cells for g in range(cells + 1)])

    def pixel_cells(self):
        """``(cell_row, cell_col)`` arrays of length N in row-major pixel order."""
        cy = np.searchsorted(self.row_bounds, np.arange(self.height), side="right") - 1
        cx = np.searchsorted(self.col_bounds, np.arange(self.width), side="right") - 1
        return np.repeat(cy, self.width), np.tile(cx, self.height)


@dataclass
class CentroidSet:
    features: np.ndarray  # (M_total, C)
    anchors: np.ndarray  # (M_total, 2) pixel (row, col) of the initial sample
    per_cell: int

    @property
    def count(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def home_cells(self):
        return np.arange(self.count) // self.per_cell


@dataclass
class AssociationMatrix:
    """Sparse pixel-by-center weights restricted to each pixel's window.

    ``indices[i]`` lists candidate centers in ascending order (-1 = padding),
    ``sqdist`` the squared distances (inf on padding) and ``weights`` the
    Gaussian similarities ``exp(-sqdist)`` (0 on padding).
    """

    indices: np.ndarray
    sqdist: np.ndarray
    weights: np.ndarray
    num_centers: int

    @property
    def num_pixels(self):
        return self.indices.shape[0]

    def to_dense(self):
        dense = np.zeros((self.num_pixels, self.num_centers))
        rows, slots = np.nonzero(self.indices >= 0)
        dense[rows, self.indices[rows, slots]] = self.weights[rows, slots]
        return dense


@dataclass
class AssignmentMap:
    indices: np.ndarray  # (H, W) center index per pixel
    num_centers: int

    @property
    def height(self):
        return self.indices.shape[0]

    @property
    def width(self):
        return self.indices.shape[1]

    def flat(self):
        return self.indices.reshape(-1)


@dataclass
class SupertokenSet:
    features: np.ndarray  # (M_total, C)
    counts: np.ndarray  # member pixels per token

    @property
    def count(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


class ClusterResult(NamedTuple):
    associations: AssociationMatrix
    centroids: CentroidSet
    assignment: AssignmentMap


def _anchor_positions(grid, cfg, seed):
    rows, cols = cfg.sublattice()
    rng = Xoshiro256(seed) if cfg.jitter else None
    anchors = []
    for gy in range(grid.cells):
        r0, r1 = grid.row_bounds[gy], grid.row_bounds[gy + 1]
        for gx in range(grid.cells):
            c0, c1 = grid.col_bounds[gx], grid.col_bounds[gx + 1]
            ch, cw = r1 - r0, c1 - c0
            if ch < rows or cw < cols:
                raise ValueError(
                    f"grid cell ({gy}, {gx}) of size {ch}x{cw} is smaller than the "
                    f"{rows}x{cols} anchor sub-lattice"
                )
            for m in range(cfg.per_cell):
                a, b = divmod(m, cols)
                if rng is None:
                    u, v = 0.5, 0.5
                else:
                    u, v = rng.next_double(), rng.next_double()
                anchors.append((r0 + int((a + u) * ch / rows), c0 + int((b + v) * cw / cols)))
    return np.array(anchors, dtype=np.int64)


def _sorted_offsets(radius):
    dy, dx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    dy, dx = dy.ravel(), dx.ravel()
    d2 = dy * dy + dx * dx
    order = np.lexsort((dx, dy, d2))
    return dy[order], dx[order], d2[order]


def knn_pixels(anchors, height, width, k):
    """Indices of the ``k`` pixels nearest each anchor (Euclidean, ties by
    row-major index), shape ``(len(anchors), k)``."""
    if k > height * width:
        raise ValueError(f"knn {k} exceeds pixel count {height * width}")
    radius = max(1, math.ceil(math.sqrt(k)))
    ay, ax = anchors[:, 0:1], anchors[:, 1:2]
    while True:
        dy, dx, d2 = _sorted_offsets(radius)
        py, px = ay + dy, ax + dx
        inside = (py >= 0) & (py < height) & (px >= 0) & (px < width)
        rank = np.cumsum(inside, axis=1)
        enough = rank[:, -1] >= k
        if enough.all():
            kth = np.argmax(rank >= k, axis=1)
            # anything outside the square is at squared distance >= (radius+1)^2
            if np.all(d2[kth] < (radius + 1) ** 2):
                break
        radius *= 2
    flat = py * width + px
    out = np.empty((len(anchors), k), dtype=np.int64)
    for a in range(len(anchors)):
        out[a] = flat[a, inside[a]][:k]
    return out


def init_centroids(fd, cfg, seed=0):
    """One anchor per sub-lattice point of every grid cell; each centroid is
    the mean semantic feature over the anchor's ``k`` nearest pixels."""
    grid = Grid(fd.height, fd.width, cfg.grid)
    anchors = _anchor_positions(grid, cfg, seed)
    neighbors = knn_pixels(anchors, fd.height, fd.width, cfg.knn)
    feats = fd.rows[neighbors].mean(axis=1)
    return CentroidSet(feats, anchors, cfg.per_cell)


def cell_candidates(cells, per_cell, window):
    """``(F*F, K)`` ascending candidate center indices per grid cell, -1 padded."""
    gy, gx = np.divmod(np.arange(cells * cells), cells)
    lists = []
    for cy, cx in zip(gy, gx):
        ny = range(max(cy - window, 0), min(cy + window, cells - 1) + 1)
        nx = range(max(cx - window, 0), min(cx + window, cells - 1) + 1)
        lists.append([(y * cells + x) * per_cell + m for y in ny for x in nx for m in range(per_cell)])
    width = max(len(c) for c in lists)
    table = np.full((len(lists), width), -1, dtype=np.int64)
    for i, c in enumerate(lists):
        table[i, : len(c)] = c
    return table


def candidate_centers(grid, per_cell, window):
    """``(N, K)`` ascending candidate center indices per pixel, -1 padded."""
    cy, cx = grid.pixel_cells()
    return cell_candidates(grid.cells, per_cell, window)[cy * grid.cells + cx]


def pixel_signature(fd, ia, ida=None):
    """Per-pixel vector compared against centers: F_D + I_a (+ I'_a)."""
    x = fd.rows + ia.rows
    if ida is not None:
        x = x + ida.rows
    return x


def compute_associations(fd, ia, ida, centroids, cfg):
    """Windowed ``exp(-||F_D + I_a + I'_a - P_j||^2)``; pass ``ida=None`` to
    drop the derivative term."""
    maps = [m for m in (fd, ia, ida) if m is not None]
    for m in maps:
        if m.dim != centroids.dim:
            raise ValueError(f"feature dim {m.dim} does not match centroid dim {centroids.dim}")
        if (m.height, m.width) != (fd.height, fd.width):
            raise ValueError("feature maps disagree on image size")
    if centroids.count != cfg.num_centers:
        raise ValueError(f"expected {cfg.num_centers} centroids, got {centroids.count}")
    grid = Grid(fd.height, fd.width, cfg.grid)
    table = cell_candidates(cfg.grid, cfg.per_cell, cfg.window)
    if not (table >= 0).any(axis=1).all():
        raise ValueError("empty association window for some pixel")
    cy, cx = grid.pixel_cells()
    cell = cy * cfg.grid + cx
    cand = table[cell]
    x = pixel_signature(fd, ia, ida)
    p = centroids.features
    sqdist = np.full(cand.shape, np.inf)
    # pixels of one cell share their candidate list, so compare them block-wise
    order = np.argsort(cell, kind="stable")
    bounds = np.searchsorted(cell[order], np.arange(table.shape[0] + 1))
    for c in range(table.shape[0]):
        k = int((table[c] >= 0).sum())
        members = order[bounds[c] : bounds[c + 1]]
        pc = p[table[c, :k]]
        for start in range(0, len(members), _CHUNK):
            idx = members[start : start + _CHUNK]
            diff = x[idx, None, :] - pc[None, :, :]
            sqdist[idx, :k] = np.einsum("nkc,nkc->nk", diff, diff)
    weights = np.exp(-sqdist)
    return AssociationMatrix(cand, sqdist, weights, cfg.num_centers)


def update_centers(assoc, fd, previous=None):
    """Column-normalised weighted mean of semantic features per center.

    Normalisation is evaluated as ``exp(-(d - min_col d))`` so columns whose
    raw weights underflow still yield the exact convex combination.  Centers
    with no stored entries keep ``previous`` features (zeros if absent).
    Accumulation runs in ascending pixel order per center.
    """
    n_centers = assoc.num_centers
    rows, slots = np.nonzero(assoc.indices >= 0)
    cols = assoc.indices[rows, slots]
    d = assoc.sqdist[rows, slots]
    colmin = np.full(n_centers, np.inf)
    np.minimum.at(colmin, cols, d)
    w = np.exp(-(d - colmin[cols]))
    total = np.bincount(cols, weights=w, minlength=n_centers)
    # CSR rows keep entries in ascending pixel order, which fixes the summation order
    weight_matrix = sparse.csr_matrix((w, (cols, rows)), shape=(n_centers, fd.num_pixels))
    acc = weight_matrix @ fd.rows
    out = np.zeros((n_centers, fd.dim)) if previous is None else previous.features.copy()
    live = total > 0
    out[live] = acc[live] / total[live, None]
    anchors = previous.anchors if previous is not None else np.zeros((n_centers, 2), dtype=np.int64)
    per_cell = previous.per_cell if previous is not None else 1
    return CentroidSet(out, anchors, per_cell)


def hard_assignment(assoc, height, width):
    """Argmax association per pixel, i.e. smallest squared distance; ties
    go to the lowest center index because candidates are ascending."""
    slot = np.argmin(assoc.sqdist, axis=1)
    idx = assoc.indices[np.arange(assoc.num_pixels), slot]
    return AssignmentMap(idx.reshape(height, width), assoc.num_centers)


def cluster(fd, ia, ida, cfg, seed=0):
    """Initialise, run ``T`` association/update rounds, associate once more,
    then hard-assign every pixel."""
    centroids = init_centroids(fd, cfg, seed)
    for _ in range(cfg.iterations):
        assoc = compute_associations(fd, ia, ida, centroids, cfg)
        centroids = update_centers(assoc, fd, centroids)
    assoc = compute_associations(fd, ia, ida, centroids, cfg)
    return ClusterResult(assoc, centroids, hard_assignment(assoc, fd.height, fd.width))


def assigned_weights(assoc, assignment):
    """Association weight of every pixel to its own assigned center."""
    flat = assignment.flat()
    hit = assoc.indices == flat[:, None]
    if not hit.any(axis=1).all():
        raise ValueError("assignment points outside a pixel's association window")
    return assoc.weights[np.arange(assoc.num_pixels), np.argmax(hit, axis=1)]


def aggregate_tokens(assoc, assignment, fd, centroids):
    """``s_j = (p_j + sum a_i f_i) / (1 + sum a_i)`` over pixels assigned to ``j``.

    Evaluated as ``p_j + sum a_i (f_i - p_j) / (1 + sum a_i)`` so members equal
    to their center reproduce ``p_j`` exactly.
    """
    flat = assignment.flat()
    n = centroids.count
    p = centroids.features
    a = assigned_weights(assoc, assignment)
    delta = fd.rows - p[flat]
    num = np.stack([np.bincount(flat, weights=a * delta[:, c], minlength=n) for c in range(fd.dim)], axis=1)
    den = 1.0 + np.bincount(flat, weights=a, minlength=n)
    counts = np.bincount(flat, minlength=n)
    return SupertokenSet(p + num / den[:, None], counts)


def association_op_count(num_pixels, window_centers, dim):
    """Analytic flop-style count for one association pass: per (pixel, center)
    pair, 3C adds (signature sum and difference), C multiplies and one exp."""
    pairs = int(np.sum(window_centers)) if np.ndim(window_centers) else num_pixels * window_centers
    return {"adds": pairs * 3 * dim, "mults": pairs * dim, "exps": pairs}
