"""Quality-contrast attention masking.

Reduces raw spatial attention tensors to per-position fields, contrasts the
low-quality-prompt field against the high-quality one, smooths the signals
with a row-stochastic similarity matrix, reweights with the original-prompt
foreground prior, and thresholds the result into a binary defect mask with
an exact target cardinality.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Grid = tuple[int, int]

_ROW_SUM_TOL = 1e-9


def _as_grid(grid) -> Grid:
    hs, ws = int(grid[0]), int(grid[1])
    if hs < 1 or ws < 1:
        raise ValueError(f"grid dimensions must be positive, got ({hs}, {ws})")
    return (hs, ws)


def _check_vector(values: np.ndarray, grid: Grid, name: str) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    size = grid[0] * grid[1]
    if values.ndim != 1 or values.size != size:
        raise ValueError(
            f"{name} must be a flat vector of length {size} for grid {grid}, "
            f"got shape {values.shape}"
        )
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{name} contains non-finite values")
    return values


@dataclass(frozen=True)
class AttentionField:
    """Non-negative spatial attention mass, one value per grid position."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        grid = _as_grid(self.grid)
        values = _check_vector(self.values, grid, "attention field")
        if np.any(values < 0):
            raise ValueError("attention field values must be non-negative")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "grid", grid)

    @property
    def size(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class QualityMap:
    """Signed per-position quality signal (differences are allowed)."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        grid = _as_grid(self.grid)
        values = _check_vector(self.values, grid, "quality map")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "grid", grid)

    @property
    def size(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class AttentionBundle:
    """Origin / positive-prompt / negative-prompt fields on one grid."""

    orig: AttentionField
    pos: AttentionField
    neg: AttentionField

    def __post_init__(self):
        if not (self.orig.grid == self.pos.grid == self.neg.grid):
            raise ValueError(
                "bundle fields must share one grid, got "
                f"{self.orig.grid}, {self.pos.grid}, {self.neg.grid}"
            )

    @property
    def grid(self) -> Grid:
        return self.orig.grid


@dataclass(frozen=True)
class PropagationMatrix:
    """Row-stochastic similarity matrix used to smooth spatial signals."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape[0] != rows.shape[1]:
            raise ValueError(f"propagation matrix must be square, got {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("propagation matrix contains non-finite values")
        if np.any(rows < 0):
            raise ValueError("propagation matrix entries must be non-negative")
        sums = rows.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > _ROW_SUM_TOL):
            worst = float(np.max(np.abs(sums - 1.0)))
            raise ValueError(f"propagation rows must sum to 1 (max deviation {worst:g})")
        object.__setattr__(self, "rows", rows)

    @property
    def size(self) -> int:
        return self.rows.shape[0]


def mask_cardinality(ratio: float, size: int) -> int:
    """Number of selected positions for a target area ratio.

    ceil(ratio * size), with a snap-to-integer guard so exact fractions such
    as s/S are not pushed up by floating-point drift.
    """
    raw = ratio * size
    nearest = round(raw)
    if abs(raw - nearest) < 1e-9:
        return int(nearest)
    return int(math.ceil(raw))


@dataclass(frozen=True)
class DefectMask:
    """Binary selection over the grid with an exact target cardinality.

    The ratio domain is [0, 1]: 0 encodes the empty mask and 1 the full
    mask, both of which appear as boundary cases of the resampling
    operations. ``threshold_mask`` itself only accepts ratios in (0, 1).
    """

    bits: np.ndarray
    ratio: float
    grid: Grid

    def __post_init__(self):
        grid = _as_grid(self.grid)
        bits = np.asarray(self.bits)
        size = grid[0] * grid[1]
        if bits.ndim != 1 or bits.size != size:
            raise ValueError(f"mask bits must have length {size}, got shape {bits.shape}")
        if not np.all((bits == 0) | (bits == 1)):
            raise ValueError("mask bits must be 0/1")
        bits = bits.astype(np.uint8)
        ratio = float(self.ratio)
        if not 0.0 <= ratio <= 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
        expected = mask_cardinality(ratio, size)
        actual = int(bits.sum())
        if actual != expected:
            raise ValueError(
                f"mask has {actual} set bits but ratio {ratio} over {size} "
                f"positions requires exactly {expected}"
            )
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "ratio", ratio)
        object.__setattr__(self, "grid", grid)

    @property
    def size(self) -> int:
        return self.bits.size

    @property
    def selected(self) -> np.ndarray:
        return np.flatnonzero(self.bits)


def mask_from_indices(grid, indices) -> DefectMask:
    """Build a mask selecting exactly the given patch indices."""
    grid = _as_grid(grid)
    size = grid[0] * grid[1]
    bits = np.zeros(size, dtype=np.uint8)
    idx = np.asarray(indices, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ValueError("mask indices out of range")
    bits[idx] = 1
    return DefectMask(bits=bits, ratio=int(bits.sum()) / size, grid=grid)


def empty_mask(grid) -> DefectMask:
    grid = _as_grid(grid)
    return DefectMask(bits=np.zeros(grid[0] * grid[1], dtype=np.uint8), ratio=0.0, grid=grid)


def full_mask(grid) -> DefectMask:
    grid = _as_grid(grid)
    return DefectMask(bits=np.ones(grid[0] * grid[1], dtype=np.uint8), ratio=1.0, grid=grid)


def reduce_attention(raw: np.ndarray, grid) -> AttentionField:
    """Average a [layers, heads, tokens, positions] tensor into a spatial field.

    All provided layers, heads, and tokens are weighted equally; selecting
    which layers to feed in is the caller's responsibility.
    """
    raw = np.asarray(raw, dtype=float)
    grid = _as_grid(grid)
    if raw.ndim != 4:
        raise ValueError(f"raw attention must have 4 axes, got shape {raw.shape}")
    if min(raw.shape) == 0:
        raise ValueError(f"raw attention has an empty axis: shape {raw.shape}")
    if raw.shape[-1] != grid[0] * grid[1]:
        raise ValueError(
            f"raw attention has {raw.shape[-1]} positions but grid {grid} "
            f"requires {grid[0] * grid[1]}"
        )
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw attention contains non-finite values")
    if np.any(raw < 0):
        raise ValueError("raw attention must be non-negative")
    return AttentionField(values=raw.mean(axis=(0, 1, 2)), grid=grid)


def contrastive_difference(bundle: AttentionBundle) -> QualityMap:
    """Negative-prompt minus positive-prompt attention; high where the
    low-quality prompt attends more strongly."""
    return QualityMap(values=bundle.neg.values - bundle.pos.values, grid=bundle.grid)


def build_propagation(queries: np.ndarray) -> PropagationMatrix:
    """Row-softmax of query inner products, scaled by 1/sqrt(d)."""
    queries = np.asarray(queries, dtype=float)
    if queries.ndim != 2:
        raise ValueError(f"queries must be a 2-D matrix, got shape {queries.shape}")
    d = queries.shape[1]
    if d < 1:
        raise ValueError("query dimension must be at least 1")
    if not np.all(np.isfinite(queries)):
        raise ValueError("queries contain non-finite values")
    logits = queries @ queries.T / math.sqrt(d)
    # max-subtraction so exp never overflows
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return PropagationMatrix(rows=weights)


def propagate(matrix: PropagationMatrix, field):
    """Diffuse a field or quality map across related positions: out = rows @ values.

    The output has the same kind as the input; row-stochastic rows make each
    output entry a convex combination of the input.
    """
    if matrix.size != field.size:
        raise ValueError(
            f"propagation matrix size {matrix.size} does not match field size {field.size}"
        )
    smoothed = matrix.rows @ field.values
    if isinstance(field, AttentionField):
        # convex combinations of non-negative values can dip below zero only
        # through rounding; clamp those
        return AttentionField(values=np.maximum(smoothed, 0.0), grid=field.grid)
    return QualityMap(values=smoothed, grid=field.grid)


def reweight(diff: QualityMap, orig: AttentionField, weight: float) -> QualityMap:
    """Add the foreground prior: diff + weight * orig."""
    if weight < 0:
        raise ValueError(f"foreground weight must be non-negative, got {weight}")
    if diff.grid != orig.grid:
        raise ValueError(f"grid mismatch: {diff.grid} vs {orig.grid}")
    return QualityMap(values=diff.values + weight * orig.values, grid=diff.grid)


def threshold_mask(quality: QualityMap, ratio: float) -> DefectMask:
    """Select exactly ceil(ratio * S) positions with the largest values.

    Ties are broken by ascending index so the mask cardinality is
    deterministic even for constant maps.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie strictly inside (0, 1), got {ratio}")
    values = quality.values
    count = mask_cardinality(ratio, values.size)
    # stable sort on the negated values: descending by value, ascending index on ties
    order = np.argsort(-values, kind="stable")
    bits = np.zeros(values.size, dtype=np.uint8)
    bits[order[:count]] = 1
    return DefectMask(bits=bits, ratio=ratio, grid=quality.grid)


def mask_gen(bundle: AttentionBundle, queries: np.ndarray, weight: float, ratio: float) -> DefectMask:
    """Full mask pipeline: contrast, propagate, reweight, threshold.

    Deterministic given its inputs.
    """
    matrix = build_propagation(queries)
    diff = propagate(matrix, contrastive_difference(bundle))
    orig = propagate(matrix, bundle.orig)
    quality = reweight(diff, orig, weight)
    return threshold_mask(quality, ratio)


# ---------------------------------------------------------------------------
# JSON interchange documents
# ---------------------------------------------------------------------------

def field_from_raw_document(doc: dict) -> AttentionField:
    """Parse {"grid", "layers", "heads", "tokens", "data"} into a field.

    "data" is the flat row-major [layers, heads, tokens, positions] tensor.
    """
    for key in ("grid", "layers", "heads", "tokens", "data"):
        if key not in doc:
            raise ValueError(f"raw attention document missing key '{key}'")
    grid = _as_grid(doc["grid"])
    layers, heads, tokens = int(doc["layers"]), int(doc["heads"]), int(doc["tokens"])
    if min(layers, heads, tokens) < 1:
        raise ValueError("layers, heads, and tokens must all be positive")
    size = grid[0] * grid[1]
    data = np.asarray(doc["data"], dtype=float)
    expected = layers * heads * tokens * size
    if data.size != expected:
        raise ValueError(
            f"raw attention data has {data.size} entries, expected {expected}"
        )
    return reduce_attention(data.reshape(layers, heads, tokens, size), grid)


def bundle_from_document(doc: dict) -> AttentionBundle:
    """Parse {"grid", "orig", "pos", "neg"} into a bundle of reduced fields."""
    for key in ("grid", "orig", "pos", "neg"):
        if key not in doc:
            raise ValueError(f"attention bundle document missing key '{key}'")
    grid = _as_grid(doc["grid"])
    return AttentionBundle(
        orig=AttentionField(values=np.asarray(doc["orig"], dtype=float), grid=grid),
        pos=AttentionField(values=np.asarray(doc["pos"], dtype=float), grid=grid),
        neg=AttentionField(values=np.asarray(doc["neg"], dtype=float), grid=grid),
    )


def mask_to_document(mask: DefectMask) -> dict:
    return {
        "grid": [mask.grid[0], mask.grid[1]],
        "ratio": mask.ratio,
        "bits": [int(b) for b in mask.bits],
    }
