"""Model comparison: McNemar exact test, bootstrapped RDM distances,
classical MDS and error-curve serialisation."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .rdm import compute_rdm, rdm_distance
from .rng import substream


@dataclass(frozen=True)
class PairedOutcomes:
    """Paired correctness counts of classifiers A and B on one test set.

    ``n01``: correct by A only, ``n10``: correct by B only,
    ``n11``: both correct, ``n00``: both wrong.
    """

    n01: int
    n10: int
    n00: int = 0
    n11: int = 0

    def __post_init__(self):
        if min(self.n01, self.n10, self.n00, self.n11) < 0:
            raise ValueError("counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.n00 + self.n01 + self.n10 + self.n11

    @classmethod
    def from_predictions(cls, pred_a, pred_b, labels) -> "PairedOutcomes":
        a = np.asarray(pred_a) == np.asarray(labels)
        b = np.asarray(pred_b) == np.asarray(labels)
        if a.shape != b.shape:
            raise ShapeError("prediction vectors differ in length")
        return cls(
            n01=int(np.count_nonzero(a & ~b)),
            n10=int(np.count_nonzero(~a & b)),
            n00=int(np.count_nonzero(~a & ~b)),
            n11=int(np.count_nonzero(a & b)),
        )


def mcnemar_exact(outcomes: PairedOutcomes) -> float:
    """Two-sided exact McNemar p-value.

    With ``m = n01 + n10`` discordant pairs and ``k = min(n01, n10)``,
    ``p = min(1, 2 * sum_{i<=k} C(m, i) / 2^m)``; ``p = 1`` when ``m = 0``.
    Evaluated in exact integer arithmetic.
    """
    m = outcomes.n01 + outcomes.n10
    if m == 0:
        return 1.0
    k = min(outcomes.n01, outcomes.n10)
    tail = sum(math.comb(m, i) for i in range(k + 1))
    return float(min(Fraction(1), Fraction(2 * tail, 2**m)))


# ---------------------------------------------------------------------------
# Bootstrapped RDM comparison
# ---------------------------------------------------------------------------


@dataclass
class BootstrapResult:
    mean: float
    distances: list[float]
    skipped: int = 0


def bootstrap_rdm_distance(acts_a: np.ndarray, acts_b: np.ndarray, samples: int = 20, sample_size: int = 100,
                           metric: str = "MeanSquaredError", method: str = "correlation", rng_seed: int = 0,
                           replace: bool = False) -> BootstrapResult:
    """Average RDM distance between two models over random image subsets.

    ``acts_a`` and ``acts_b`` are the two models' activations on the same
    image pool (rows aligned). Iteration ``s`` draws its subset from
    ``substream(rng_seed, "bootstrap", s)``. Subsets whose RDM distance is
    undefined are skipped and counted.
    """
    pool = len(acts_a)
    if len(acts_b) != pool:
        raise ShapeError("activation pools differ in size")
    if sample_size > pool and not replace:
        raise ValueError(f"sample_size {sample_size} exceeds pool of {pool}")
    if samples <= 0 or sample_size < 2:
        raise ValueError("need samples >= 1 and sample_size >= 2")
    dists, skipped = [], 0
    for s in range(samples):
        rng = substream(rng_seed, "bootstrap", s)
        idx = rng.choice(pool, size=sample_size, replace=replace)
        try:
            ra = compute_rdm(acts_a[idx], metric)
            rb = compute_rdm(acts_b[idx], metric)
            dists.append(rdm_distance(ra, rb, method))
        except DegenerateInputError:
            skipped += 1
    mean = float(np.mean(dists)) if dists else float("nan")
    return BootstrapResult(mean=mean, distances=dists, skipped=skipped)


# ---------------------------------------------------------------------------
# Classical MDS
# ---------------------------------------------------------------------------


def jacobi_eigh(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` sorted by descending eigenvalue,
    eigenvectors in columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError("matrix must be square")
    v = np.eye(n)
    scale = np.linalg.norm(a)
    eps = np.finfo(np.float64).eps
    for _ in range(max_sweeps):
        # summed directly: ||A||^2 - sum(diag^2) cancels once the diagonal dominates
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= tol * scale:
            break
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                # negligible against both diagonal entries (or the matrix scale): drop it
                if abs(apq) <= eps * max(math.sqrt(abs(a[p, p] * a[q, q])), tol * scale):
                    a[p, q] = a[q, p] = 0.0
                    continue
                rotated = True
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        warnings.warn("Jacobi eigensolver did not converge", RuntimeWarning)
    evals = np.diag(a).copy()
    order = np.argsort(-evals, kind="stable")
    return evals[order], v[:, order]


@dataclass
class MdsEmbedding:
    points: np.ndarray  # (k, 2), unused axes are zero
    labels: list
    stress: float
    eigenvalues: np.ndarray
    dims: int = 2

    def as_dict(self) -> dict:
        return {str(name): [float(x) for x in p] for name, p in zip(self.labels, self.points)}


def classical_mds(distances, labels=None, dims: int = 2) -> MdsEmbedding:
    """Classical (Torgerson) MDS of a symmetric distance matrix.

    Double-centres ``-D^2/2``, keeps the top ``dims`` eigenpairs with
    positive eigenvalues and scales eigenvectors by their square roots.
    ``stress`` is ``||B - B_dims||_F / ||B||_F``. Each axis is flipped so its
    first nonzero coordinate is positive.
    """
    d = np.asarray(distances, dtype=np.float64)
    k = d.shape[0]
    if d.shape != (k, k):
        raise ShapeError("distance matrix must be square")
    if not np.allclose(d, d.T, rtol=0, atol=1e-12 * max(1.0, np.abs(d).max(initial=0.0))):
        raise ValueError("distance matrix must be symmetric")
    if (d < 0).any() or np.any(np.diag(d) != 0):
        raise ValueError("distances must be nonnegative with a zero diagonal")
    labels = list(range(k)) if labels is None else list(labels)
    j = np.eye(k) - np.ones((k, k)) / k
    b = -0.5 * j @ (d * d) @ j
    b = 0.5 * (b + b.T)
    evals, evecs = jacobi_eigh(b)
    bnorm = np.linalg.norm(b)
    positive = evals > 1e-12 * max(bnorm, 1e-300)
    keep = int(min(dims, np.count_nonzero(positive)))
    if keep < dims:
        warnings.warn(f"only {keep} positive eigenvalue(s); embedding is {keep}-D", RuntimeWarning)
    points = np.zeros((k, dims))
    for axis in range(keep):
        col = evecs[:, axis] * math.sqrt(evals[axis])
        nz = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())
        if nz.size and col[nz[0]] < 0:
            col = -col
        points[:, axis] = col
    points -= points.mean(axis=0)
    recon = evecs[:, :keep] @ np.diag(evals[:keep]) @ evecs[:, :keep].T
    stress = float(np.linalg.norm(b - recon) / bnorm) if bnorm > 0 else 0.0
    return MdsEmbedding(points=points, labels=labels, stress=stress, eigenvalues=evals, dims=keep)


def embedded_distances(emb: MdsEmbedding) -> np.ndarray:
    p = emb.points
    return np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))


def mds_scatter_svg(emb: MdsEmbedding, size: int = 400, title: str | None = None) -> str:
    pts = emb.points[:, :2]
    span = float(np.abs(pts).max()) if pts.size else 0.0
    span = span if span > 0 else 1.0
    margin = 60
    half = (size - 2 * margin) / 2

    def xy(p):
        return margin + half + half * p[0] / span, margin + half - half * p[1] / span

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    if title:
        parts.append(f'<text x="10" y="20" font-family="sans-serif" font-size="14">{title}</text>')
    for name, p in zip(emb.labels, pts):
        x, y = xy(p)
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="black"/>')
        parts.append(f'<text x="{x + 6:.2f}" y="{y - 6:.2f}" font-family="sans-serif" font-size="11">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_mds(emb: MdsEmbedding, stem, title: str | None = None) -> None:
    """``<stem>.svg`` scatter plus ``<stem>.json`` {"points": {model: [x, y]}, "stress": s}."""
    stem = Path(stem)
    stem.with_suffix(".svg").write_text(mds_scatter_svg(emb, title=title))
    payload = {"points": emb.as_dict(), "stress": emb.stress, "dims": emb.dims}
    stem.with_suffix(".json").write_text(json.dumps(payload, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Tables and curves
# ---------------------------------------------------------------------------

ERROR_CURVE_FIELDS = ("epoch", "train_error", "test_error", "train_loss")


def error_curve_csv(history: list[dict]) -> str:
    """CSV text with a header row and one row per epoch."""
    last = None
    for row in history:
        if last is not None and row["epoch"] <= last:
            raise ValueError("epoch index must increase monotonically")
        last = row["epoch"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ERROR_CURVE_FIELDS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: (repr(float(row[k])) if k != "epoch" else int(row[k])) if row.get(k) is not None else ""
                    for k in ERROR_CURVE_FIELDS})
    return buf.getvalue()


def parse_error_curve(text: str) -> list[dict]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append({k: (int(v) if k == "epoch" else (float(v) if v != "" else None)) for k, v in rec.items()})
    return rows


def error_curve(history: list[dict], stem=None) -> str:
    """Serialise per-epoch errors; with ``stem`` also writes ``<stem>.csv`` and ``<stem>.json``."""
    text = error_curve_csv(history)
    if stem is not None:
        stem = Path(stem)
        stem.with_suffix(".csv").write_text(text)
        stem.with_suffix(".json").write_text(json.dumps(parse_error_curve(text), indent=1) + "\n")
    return text


@dataclass
class PairComparison:
    model_a: str
    model_b: str
    p_value: float
    outcomes: PairedOutcomes
    better: str | None = field(default=None)

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05


def compare_predictions(predictions: dict[str, np.ndarray], labels: np.ndarray) -> tuple[np.ndarray, list[PairComparison]]:
    """Pairwise McNemar p-value matrix (unit diagonal) and per-pair rows."""
    names = list(predictions)
    k = len(names)
    pmat = np.ones((k, k))
    rows = []
    for i in range(k):
        for j in range(i + 1, k):
            out = PairedOutcomes.from_predictions(predictions[names[i]], predictions[names[j]], labels)
            p = mcnemar_exact(out)
            pmat[i, j] = pmat[j, i] = p
            better = None
            if p < 0.05:
                better = names[i] if out.n01 > out.n10 else names[j]
            rows.append(PairComparison(names[i], names[j], p, out, better))
    return pmat, rows


def mcnemar_table_csv(rows: list[PairComparison]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model_a", "model_b", "p_value", "significant_at_0.05", "direction", "n01", "n10"])
    for r in rows:
        w.writerow([r.model_a, r.model_b, repr(r.p_value), str(r.significant).lower(), r.better or "",
                    r.outcomes.n01, r.outcomes.n10])
    return buf.getvalue()


def matrix_csv(names: list[str], mat: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(names))
    for name, row in zip(names, mat):
        w.writerow([name] + [repr(float(x)) for x in row])
    return buf.getvalue()
