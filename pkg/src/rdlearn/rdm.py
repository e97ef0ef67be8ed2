"""Representational distance matrices and distances between them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, ShapeError

METRICS = ("MeanSquaredError", "SquaredEuclidean", "Euclidean", "Correlation")
RDM_DISTANCE_METHODS = ("correlation", "normalized_euclidean")

# rows whose centred norm falls below this are treated as constant
_DEGENERATE_TOL = 1e-12
_REFINE_RATIO = 0.5
_REFINE_CHUNK = 4096


@dataclass
class Rdm:
    values: np.ndarray
    metric: str
    labels: list | None = field(default=None)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def upper(self) -> np.ndarray:
        """Entries with i < j, row-major."""
        return upper_triangle(self.values)


def check_metric(metric: str) -> None:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def upper_triangle(values: np.ndarray) -> np.ndarray:
    i, j = np.triu_indices(values.shape[0], k=1)
    return values[i, j]


def from_upper(vec: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, n))
    i, j = np.triu_indices(n, k=1)
    out[i, j] = vec
    out[j, i] = vec
    return out


def _flatten(acts) -> np.ndarray:
    acts = np.asarray(acts, dtype=np.float64)
    if acts.ndim < 2:
        raise ShapeError("activations need a leading batch axis")
    return acts.reshape(acts.shape[0], -1)


def _squared_euclidean(x: np.ndarray) -> np.ndarray:
    x = x - x.mean(axis=0)  # translation invariant; reduces cancellation in the Gram form
    sq = np.einsum("ij,ij->i", x, x)
    scale = sq[:, None] + sq[None, :]
    d = scale - 2.0 * (x @ x.T)
    # The Gram form loses relative precision when d << |x_i|^2 + |x_j|^2;
    # recompute those entries from explicit differences.
    iu, ju = np.triu_indices(len(x), k=1)
    close = d[iu, ju] < _REFINE_RATIO * scale[iu, ju]
    iu, ju = iu[close], ju[close]
    for start in range(0, len(iu), _REFINE_CHUNK):
        a, b = iu[start : start + _REFINE_CHUNK], ju[start : start + _REFINE_CHUNK]
        diff = x[a] - x[b]
        d[a, b] = np.einsum("ij,ij->i", diff, diff)
    d = np.triu(d, 1)
    d = d + d.T
    np.maximum(d, 0.0, out=d)
    return d


def _correlation_parts(x: np.ndarray):
    xc = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", xc, xc))
    bad = norms <= _DEGENERATE_TOL * np.sqrt(x.shape[1]) * np.abs(x).max(axis=1)
    if bad.any():
        raise DegenerateInputError(
            f"correlation distance undefined for constant activation rows {np.flatnonzero(bad).tolist()}"
        )
    z = xc / norms[:, None]
    r = z @ z.T
    r = 0.5 * (r + r.T)
    np.fill_diagonal(r, 1.0)
    return z, norms, r


def pairwise(acts, metric: str = "MeanSquaredError") -> np.ndarray:
    """Dense n x n dissimilarity matrix between the rows of ``acts``."""
    check_metric(metric)
    x = _flatten(acts)
    if metric == "SquaredEuclidean":
        return _squared_euclidean(x)
    if metric == "MeanSquaredError":
        return _squared_euclidean(x) / x.shape[1]
    if metric == "Euclidean":
        return np.sqrt(_squared_euclidean(x))
    _, _, r = _correlation_parts(x)
    d = 1.0 - r
    np.fill_diagonal(d, 0.0)
    return d


def pairwise_grad(acts, weights: np.ndarray, metric: str, dists: np.ndarray | None = None) -> np.ndarray:
    """Gradient of ``sum_{i != j} weights[i, j] * d(x_i, x_j)`` w.r.t. each
    ``x_i``, counting only the dependence through the first argument.

    Callers pass a symmetric ``weights`` holding each unordered pair's loss
    derivative in both (i, j) and (j, i); the result then is the full
    gradient of the loss. Returned with the same shape as ``acts``.
    """
    check_metric(metric)
    acts = np.asarray(acts, dtype=np.float64)
    x = _flatten(acts)
    w = np.array(weights, dtype=np.float64)
    np.fill_diagonal(w, 0.0)
    if metric in ("SquaredEuclidean", "MeanSquaredError"):
        g = 2.0 * (w.sum(axis=1)[:, None] * x - w @ x)
        if metric == "MeanSquaredError":
            g /= x.shape[1]
    elif metric == "Euclidean":
        d = np.sqrt(_squared_euclidean(x)) if dists is None else dists
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(d > 0, w / d, 0.0)
        g = w.sum(axis=1)[:, None] * x - w @ x
    else:
        z, norms, r = _correlation_parts(x)
        g = -(w @ z - (w * r).sum(axis=1)[:, None] * z) / norms[:, None]
    return g.reshape(acts.shape)


def compute_rdm(activations, metric: str = "MeanSquaredError", labels=None) -> Rdm:
    """RDM over a batch: ``values[i, j] = d(f(x_i), f(x_j))``.

    ``activations`` is (n, ...) and is flattened per row. Raises
    ``DegenerateInputError`` for constant rows under the Correlation metric.
    """
    x = _flatten(activations)
    if x.shape[0] < 2:
        raise ShapeError("an RDM needs at least two inputs")
    return Rdm(pairwise(x, metric), metric, None if labels is None else list(labels))


def rdm_distance(a: Rdm | np.ndarray, b: Rdm | np.ndarray, method: str = "correlation") -> float:
    """Distance between two RDMs using only their upper triangles.

    ``correlation``: 1 - Pearson r of the two vectors.
    ``normalized_euclidean``: Euclidean distance after scaling each vector to unit norm.
    """
    va = a.values if isinstance(a, Rdm) else np.asarray(a, dtype=np.float64)
    vb = b.values if isinstance(b, Rdm) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ShapeError(f"RDM sizes differ: {va.shape} vs {vb.shape}")
    u, v = upper_triangle(va), upper_triangle(vb)
    if method == "correlation":
        uc, vc = u - u.mean(), v - v.mean()
        nu, nv = np.linalg.norm(uc), np.linalg.norm(vc)
        if nu <= _DEGENERATE_TOL * np.abs(u).max(initial=0.0) * np.sqrt(u.size) or nv <= (
            _DEGENERATE_TOL * np.abs(v).max(initial=0.0) * np.sqrt(v.size)
        ):
            raise DegenerateInputError("correlation distance undefined for a constant RDM triangle")
        r = float(np.dot(uc, vc) / (nu * nv))
        return 1.0 - min(1.0, max(-1.0, r))
    if method == "normalized_euclidean":
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0 or nv == 0:
            raise DegenerateInputError("normalized Euclidean distance undefined for an all-zero RDM")
        return float(np.linalg.norm(u / nu - v / nv))
    raise ValueError(f"unknown RDM distance method {method!r}")


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def write_rdm_csv(rdm: Rdm, path) -> None:
    """n rows of n comma-separated decimals (``repr`` precision, round-trips exactly)."""
    lines = [",".join(repr(float(v)) for v in row) for row in rdm.values]
    Path(path).write_text("\n".join(lines) + "\n")


def read_rdm_csv(path, metric: str = "MeanSquaredError") -> Rdm:
    rows = [line for line in Path(path).read_text().splitlines() if line.strip()]
    values = np.array([[float(v) for v in line.split(",")] for line in rows])
    return Rdm(values, metric)


def write_rdm_sidecar(rdm: Rdm, path) -> None:
    labels = None if rdm.labels is None else [x if isinstance(x, str) else int(x) for x in rdm.labels]
    Path(path).write_text(json.dumps({"n": rdm.n, "metric": rdm.metric, "labels": labels}, indent=2) + "\n")


def rdm_heatmap_svg(rdm: Rdm, cell: int = 4, title: str | None = None) -> str:
    """Grayscale heatmap: the smallest entry maps to white, the largest to black."""
    v = rdm.values
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo
    n = rdm.n
    top = 16 if title else 0
    size = n * cell
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + top}" '
        f'viewBox="0 0 {size} {size + top}" shape-rendering="crispEdges">'
    ]
    if title:
        parts.append(f'<text x="0" y="12" font-family="sans-serif" font-size="11">{title}</text>')
    for i in range(n):
        for j in range(n):
            level = 0.0 if span == 0 else (v[i, j] - lo) / span
            g = int(round(255 * (1.0 - level)))
            parts.append(
                f'<rect x="{j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_rdm(rdm: Rdm, stem, title: str | None = None) -> list[Path]:
    """Write ``<stem>.csv``, ``<stem>.json`` and ``<stem>.svg``."""
    stem = Path(stem)
    paths = [stem.with_suffix(".csv"), stem.with_suffix(".json"), stem.with_suffix(".svg")]
    write_rdm_csv(rdm, paths[0])
    write_rdm_sidecar(rdm, paths[1])
    paths[2].write_text(rdm_heatmap_svg(rdm, title=title))
    return paths
