"""Representational distance learning: the auxiliary RDM-matching loss,
its exact and pair-subsampled gradients, alpha schedules, teacher RDM
provision and the training epoch that injects the auxiliary gradient at
student taps.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .rdm import Rdm, check_metric, compute_rdm, from_upper, pairwise, pairwise_grad, upper_triangle
from .rng import substream

ALPHA_RULES = ("RdlLinear", "DsnDecay")


def _teacher_values(teacher_rdm, n: int) -> np.ndarray:
    t = teacher_rdm.values if isinstance(teacher_rdm, Rdm) else np.asarray(teacher_rdm, dtype=np.float64)
    if t.shape != (n, n):
        raise ShapeError(f"teacher RDM is {t.shape}, student batch has {n} inputs")
    return t


def _check_batch(student_acts) -> int:
    n = np.shape(student_acts)[0]
    if n < 2:
        raise ShapeError("auxiliary loss needs at least two inputs")
    return n


def aux_loss(student_acts, teacher_rdm, metric: str = "MeanSquaredError") -> float:
    """Mean squared difference between student and teacher RDM entries over all i < j."""
    n = _check_batch(student_acts)
    t = _teacher_values(teacher_rdm, n)
    diff = upper_triangle(pairwise(student_acts, metric) - t)
    return float(2.0 / (n * (n - 1)) * np.dot(diff, diff))


def aux_grad_exact(student_acts, teacher_rdm, metric: str = "MeanSquaredError") -> np.ndarray:
    """Exact gradient of :func:`aux_loss` w.r.t. the student activations.

    For squared Euclidean RDMs this is ``8/(n(n-1)) * sum_j (D_ij - T_ij)(f_i - f_j)``;
    the MeanSquaredError metric divides that by the feature count.
    """
    n = _check_batch(student_acts)
    t = _teacher_values(teacher_rdm, n)
    d = pairwise(student_acts, metric)
    weights = 4.0 / (n * (n - 1)) * (d - t)
    return pairwise_grad(student_acts, weights, metric, dists=d)


@dataclass(frozen=True)
class PairSample:
    """Index pairs (i < j) drawn without replacement; ``pairs`` is (m, 2)."""

    pairs: np.ndarray
    n: int
    fraction: float

    def __post_init__(self):
        p = self.pairs
        if p.ndim != 2 or p.shape[1] != 2 or len(p) == 0:
            raise ValueError("a pair sample needs at least one (i, j) pair")
        if (p[:, 0] >= p[:, 1]).any() or p.min() < 0 or p.max() >= self.n:
            raise ValueError("pairs must satisfy 0 <= i < j < n")

    @property
    def images(self) -> np.ndarray:
        """Distinct inputs touched by the sample."""
        return np.unique(self.pairs)

    def counts(self) -> np.ndarray:
        """Number of sampled pairs each input takes part in."""
        return np.bincount(self.pairs.ravel(), minlength=self.n)


def pair_count_for(n: int, fraction: float) -> int:
    """``fraction`` of the n(n-1)/2 unordered pairs, rounded half up."""
    return int(math.floor(fraction * n * (n - 1) / 2 + 0.5))


def sample_pairs(n: int, fraction: float | None = None, rng_seed: int = 0, count: int | None = None,
                 rng: np.random.Generator | None = None) -> PairSample:
    """Uniform sample of unordered pairs without replacement.

    Give either ``fraction`` (of n(n-1)/2 pairs) or an explicit ``count``.
    """
    if n < 2:
        raise ValueError("need at least two inputs to form a pair")
    total = n * (n - 1) // 2
    if count is None:
        if fraction is None or not 0.0 < fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        count = pair_count_for(n, fraction)
    count = min(int(count), total)
    if count <= 0:
        raise ValueError(f"sampling yields zero pairs for n={n}")
    rng = substream(rng_seed, "pairs") if rng is None else rng
    flat = np.sort(rng.choice(total, size=count, replace=False))
    iu, ju = np.triu_indices(n, k=1)
    pairs = np.stack([iu[flat], ju[flat]], axis=1)
    return PairSample(pairs=pairs, n=n, fraction=count / total)


def sampled_weights(dists: np.ndarray, teacher: np.ndarray, sample: PairSample) -> np.ndarray:
    """Per-pair loss weights for the subsampled gradient.

    Input ``i`` gets ``4 (D_ij - T_ij) / (|X_P| |P_i|)`` for each sampled pair,
    where ``X_P`` is the set of distinct sampled inputs and ``P_i`` the
    sampled pairs containing ``i``. The factor 2 in the squared-distance
    derivative brings this to 8/(|X_P||P_i|).
    """
    n = sample.n
    counts = sample.counts()
    n_images = np.count_nonzero(counts)
    i, j = sample.pairs[:, 0], sample.pairs[:, 1]
    err = dists[i, j] - teacher[i, j]
    w = np.zeros((n, n))
    w[i, j] = 4.0 * err / (n_images * counts[i])
    w[j, i] = 4.0 * err / (n_images * counts[j])
    return w


def aux_grad_sampled(student_acts, teacher_rdm, sample: PairSample, metric: str = "MeanSquaredError",
                     dists: np.ndarray | None = None) -> np.ndarray:
    """Pair-subsampled estimate of the auxiliary gradient.

    Inputs absent from the sample get an exactly zero gradient row. With
    every pair sampled the estimate equals :func:`aux_grad_exact`.
    """
    n = _check_batch(student_acts)
    if sample.n != n:
        raise ShapeError(f"pair sample drawn for n={sample.n}, batch has {n}")
    t = _teacher_values(teacher_rdm, n)
    d = pairwise(student_acts, metric) if dists is None else dists
    g = pairwise_grad(student_acts, sampled_weights(d, t, sample), metric, dists=d)
    g = g.reshape(n, -1)
    g[sample.counts() == 0] = 0.0
    return g.reshape(np.shape(student_acts))


# the analytic ratio aux_grad_sampled(full sample) / aux_grad_exact:
# |X_P| = n and |P_i| = n - 1, so 8/(|X_P||P_i|) = 8/(n(n-1)).
FULL_SAMPLE_RATIO = 1.0


def combine_gradients(backprop_grad, aux_grad, alpha: float) -> np.ndarray:
    """``backprop_grad + alpha * aux_grad``; ``None`` backprop counts as zero."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    aux_grad = np.asarray(aux_grad)
    if backprop_grad is None:
        return alpha * aux_grad
    if np.shape(backprop_grad) != aux_grad.shape:
        raise ShapeError(f"gradient shapes differ: {np.shape(backprop_grad)} vs {aux_grad.shape}")
    if alpha == 0:
        return np.array(backprop_grad, copy=True)
    return backprop_grad + alpha * aux_grad


@dataclass(frozen=True)
class AlphaSchedule:
    alpha0: float
    t_max: int
    rule: str = "RdlLinear"

    def __post_init__(self):
        if self.alpha0 < 0:
            raise ValueError("alpha0 must be nonnegative")
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        if self.rule not in ALPHA_RULES:
            raise ValueError(f"unknown alpha rule {self.rule!r}")


def alpha_at(schedule: AlphaSchedule, epoch: int) -> float:
    """Auxiliary weight for ``epoch`` (0-based, 0 <= epoch <= t_max).

    RdlLinear: ``alpha0 * (1 - t/t_max)``.
    DsnDecay: ``alpha_{t+1} = alpha_t * 0.1 * (1 - t/t_max)`` from ``alpha_0 = alpha0``.
    """
    if not 0 <= epoch <= schedule.t_max:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.t_max}]")
    if schedule.rule == "RdlLinear":
        return schedule.alpha0 * (1.0 - epoch / schedule.t_max)
    a = schedule.alpha0
    for t in range(epoch):
        a = a * 0.1 * (1.0 - t / schedule.t_max)
    return a


# ---------------------------------------------------------------------------
# Teacher RDMs
# ---------------------------------------------------------------------------


def batch_hash(batch: np.ndarray) -> str:
    arr = np.ascontiguousarray(batch, dtype=np.float64)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


class RdmCache:
    """On-disk teacher RDM cache.

    One ``<tap>.bin`` per teacher tap holding little-endian float64
    upper-triangle entries batch after batch, and a ``<tap>.json`` manifest
    ``{batch_hash: {"offset": bytes, "n": n, "metric": metric}}``.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._manifests: dict[str, dict] = {}

    def _paths(self, tap: str):
        safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in tap)
        return self.directory / f"{safe}.bin", self.directory / f"{safe}.json"

    def manifest(self, tap: str) -> dict:
        if tap not in self._manifests:
            _, mpath = self._paths(tap)
            self._manifests[tap] = json.loads(mpath.read_text()) if mpath.exists() else {}
        return self._manifests[tap]

    def get(self, key: str, tap: str, metric: str) -> Rdm | None:
        entry = self.manifest(tap).get(key)
        if entry is None or entry["metric"] != metric:
            return None
        bpath, _ = self._paths(tap)
        n = entry["n"]
        m = n * (n - 1) // 2
        with open(bpath, "rb") as fh:
            fh.seek(entry["offset"])
            vec = np.frombuffer(fh.read(8 * m), dtype="<f8")
        return Rdm(from_upper(vec.astype(np.float64), n), metric)

    def put(self, key: str, tap: str, rdm: Rdm) -> None:
        manifest = self.manifest(tap)
        if key in manifest:
            return
        bpath, mpath = self._paths(tap)
        with open(bpath, "ab") as fh:
            offset = fh.tell()
            fh.write(upper_triangle(rdm.values).astype("<f8").tobytes())
        manifest[key] = {"offset": offset, "n": rdm.n, "metric": rdm.metric}
        mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True))


class TeacherRdmProvider:
    """Serves teacher RDMs for a batch at a teacher tap.

    Backed by a live (frozen) teacher network, a precomputed ``RdmCache``,
    or both, in which case the cache is filled on first use.
    """

    def __init__(self, teacher=None, metric: str = "MeanSquaredError", cache: RdmCache | None = None):
        check_metric(metric)
        if teacher is None and cache is None:
            raise ValueError("provider needs a teacher network or a cache")
        self.teacher = teacher
        self.metric = metric
        self.cache = cache

    def rdms(self, batch: np.ndarray, taps) -> dict[str, Rdm]:
        taps = list(taps)
        key = batch_hash(batch) if self.cache is not None else None
        out: dict[str, Rdm] = {}
        missing = []
        for tap in taps:
            hit = self.cache.get(key, tap, self.metric) if self.cache is not None else None
            if hit is None:
                missing.append(tap)
            else:
                out[tap] = hit
        if missing:
            if self.teacher is None:
                raise KeyError(f"no cached teacher RDM for taps {missing} and no live teacher")
            acts = self.teacher.activations(batch, missing, batch_size=len(batch))
            for tap in missing:
                rdm = compute_rdm(acts[tap], self.metric)
                if self.cache is not None:
                    self.cache.put(key, tap, rdm)
                    rdm = self.cache.get(key, tap, self.metric)
                out[tap] = rdm
        return out

    def rdm(self, batch: np.ndarray, tap: str) -> Rdm:
        return self.rdms(batch, [tap])[tap]


# ---------------------------------------------------------------------------
# Training hook
# ---------------------------------------------------------------------------


@dataclass
class RdlAuxiliary:
    """Training hook that injects ``alpha * aux_grad_sampled`` at student taps.

    ``tap_map`` maps student tap names to teacher tap names. One pair sample
    is drawn per tap per mini-batch; with ``pair_count`` set it overrides
    ``fraction``.
    """

    provider: TeacherRdmProvider
    tap_map: dict[str, str]
    schedule: AlphaSchedule
    fraction: float = 0.05
    pair_count: int | None = None
    seed: int = 0
    losses: dict = field(default_factory=dict)

    @property
    def metric(self) -> str:
        return self.provider.metric

    def begin_epoch(self, epoch: int) -> None:
        self.alpha = alpha_at(self.schedule, min(epoch, self.schedule.t_max))
        self.losses = {tap: [] for tap in self.tap_map}

    def tap_gradients(self, result, batch, labels, epoch: int, step: int):
        grads, weights = {}, {}
        n = len(batch)
        if n < 2:
            # a one-example tail batch has no pairs
            return grads, weights
        teacher = self.provider.rdms(batch, self.tap_map.values())
        for s_tap, t_tap in self.tap_map.items():
            acts = result.taps[s_tap]
            t = teacher[t_tap].values
            d = pairwise(acts, self.metric)
            diff = upper_triangle(d - t)
            self.losses[s_tap].append(2.0 / (n * (n - 1)) * float(np.dot(diff, diff)))
            if self.alpha == 0:
                continue
            rng = substream(self.seed, "pairs", epoch, step, s_tap)
            if self.pair_count is not None:
                sample = sample_pairs(n, count=self.pair_count, rng=rng)
            else:
                sample = sample_pairs(n, self.fraction, rng=rng)
            grads[s_tap] = aux_grad_sampled(acts, t, sample, self.metric, dists=d)
            weights[s_tap] = self.alpha
        return grads, weights

    def after_backward(self, epoch: int, step: int) -> None:
        pass

    def epoch_metrics(self) -> dict:
        return {
            "alpha": self.alpha,
            "aux_loss": {tap: float(np.mean(v)) if v else 0.0 for tap, v in self.losses.items()},
        }


def rdl_train_epoch(student, provider: TeacherRdmProvider, tap_map: dict[str, str], images, labels,
                    schedule: AlphaSchedule, sgd, fraction: float = 0.05, rng_seed: int = 0, epoch: int = 0,
                    batch_size: int = 100, pair_count: int | None = None, output_weight: float = 1.0):
    """One epoch of RDL training; returns :class:`rdlearn.training.EpochMetrics`.

    Per mini-batch: forward the student, fetch teacher RDMs per tap, draw a
    pair sample per tap, inject the weighted sampled gradient at the tap,
    backpropagate and take an SGD step.
    """
    from .training import train_epoch

    for s_tap in tap_map:
        student.resolve_tap(s_tap)
    hook = RdlAuxiliary(provider, dict(tap_map), schedule, fraction, pair_count, rng_seed)
    return train_epoch(student, images, labels, sgd, batch_size=batch_size, seed=rng_seed, epoch=epoch,
                       auxiliaries=[hook], output_weight=output_weight)
