"""Comparison transfer methods: finetuning from copied weights, deep
supervision with auxiliary softmax heads, and hints pretraining."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import DTYPE, LayerSpec, Network, SgdState, glorot_uniform, network_sgd_step, sgd_step, softmax_xent
from .rdl import AlphaSchedule, alpha_at
from .rng import derive_seed, substream
from .training import batch_order

METHOD_TAGS = ("Baseline", "Finetune", "DeepSupervision", "Hints", "Rdl")


@dataclass
class TransferMethod:
    """A transfer method tag plus its settings, validated against the student's taps."""

    tag: str
    settings: dict = field(default_factory=dict)

    def validate(self, student: Network, teacher: Network | None = None) -> None:
        problems = []
        if self.tag not in METHOD_TAGS:
            problems.append(f"unknown transfer method {self.tag!r}")
        if self.tag != "Baseline" and teacher is None and self.tag != "DeepSupervision":
            problems.append(f"{self.tag} needs a teacher network")
        if self.tag == "DeepSupervision":
            problems += [f"unknown student tap {t!r}" for t in self.settings.get("taps", []) if t not in student.taps]
        if self.tag == "Hints":
            if self.settings.get("student_tap") not in student.taps:
                problems.append(f"unknown student tap {self.settings.get('student_tap')!r}")
            if teacher is not None and self.settings.get("teacher_tap") not in teacher.taps:
                problems.append(f"unknown teacher tap {self.settings.get('teacher_tap')!r}")
        if self.tag == "Rdl":
            for s, t in self.settings.get("tap_map", {}).items():
                if s not in student.taps:
                    problems.append(f"unknown student tap {s!r}")
                if teacher is not None and t not in teacher.taps:
                    problems.append(f"unknown teacher tap {t!r}")
        if problems:
            raise ConfigError(problems)


# ---------------------------------------------------------------------------
# Finetuning
# ---------------------------------------------------------------------------


def _param_layers(net: Network) -> list[int]:
    return [i for i, layer in enumerate(net.layers) if layer.params]


def finetune_init(student: Network, teacher: Network, readout_replacement: LayerSpec | None = None,
                  seed: int = 0) -> Network:
    """Copy of ``student`` whose parameters are the teacher's.

    With ``readout_replacement`` the final parameterised layer is not copied
    but freshly initialised (e.g. a 10-class teacher feeding a 100-class
    student); its spec must match the student's final layer.
    """
    s_layers, t_layers = _param_layers(student), _param_layers(teacher)
    if len(s_layers) != len(t_layers):
        raise ShapeError("student and teacher have different numbers of parameterised layers")
    out = student.copy()
    readout = s_layers[-1]
    if readout_replacement is not None:
        spec = student.layers[readout].spec
        if (readout_replacement.kind, readout_replacement.features) != (spec.kind, spec.features):
            raise ShapeError("readout replacement does not match the student's final layer")
    for si, ti in zip(s_layers, t_layers):
        if readout_replacement is not None and si == readout:
            out.layers[si].init_params(substream(seed, "readout", si))
            continue
        src, dst = teacher.layers[ti], out.layers[si]
        for name, p in dst.params.items():
            q = src.params.get(name)
            if q is None or q.shape != p.shape:
                raise ShapeError(
                    f"cannot copy {name} into layer {si} ({dst.kind}): "
                    f"teacher {None if q is None else q.shape} vs student {p.shape}"
                )
        dst.params = {k: v.copy() for k, v in src.params.items()}
    return out


# ---------------------------------------------------------------------------
# Deep supervision
# ---------------------------------------------------------------------------


class DeepSupervision:
    """Linear softmax classifier heads on student taps.

    Each head's cross-entropy gradient enters the main network at its tap
    with weight alpha from a (DsnDecay) schedule; heads train jointly on the
    same alpha-weighted objective.
    """

    def __init__(self, student: Network, taps, num_classes: int, schedule: AlphaSchedule, seed: int = 0,
                 learning_rate: float = 0.01, momentum: float = 0.9):
        self.taps = list(taps)
        self.schedule = schedule
        self.heads: dict[str, dict[str, np.ndarray]] = {}
        for tap in self.taps:
            student.resolve_tap(tap)
            flat = int(np.prod(student.tap_shape(tap)))
            rng = substream(seed, "dsn-head", tap)
            self.heads[tap] = {
                "W": glorot_uniform(rng, (flat, num_classes), flat, num_classes),
                "b": np.zeros(num_classes, DTYPE),
            }
        self.sgd = SgdState(learning_rate, momentum)
        self.alpha = schedule.alpha0
        self._pending = []
        self.losses: dict[str, list] = {}

    def param_count(self) -> int:
        return sum(p.size for head in self.heads.values() for p in head.values())

    def begin_epoch(self, epoch: int) -> None:
        self.alpha = alpha_at(self.schedule, min(epoch, self.schedule.t_max))
        self.losses = {tap: [] for tap in self.taps}

    def tap_gradients(self, result, batch, labels, epoch, step):
        grads, weights = {}, {}
        self._pending = []
        for tap in self.taps:
            acts = result.taps[tap]
            a = acts.reshape(len(acts), -1)
            head = self.heads[tap]
            loss, g = softmax_xent(a @ head["W"] + head["b"], labels)
            self.losses[tap].append(loss)
            if self.alpha == 0:
                continue
            grads[tap] = (g @ head["W"].T).reshape(acts.shape)
            weights[tap] = self.alpha
            self._pending.append((tap, a.T @ g, g.sum(axis=0)))
        return grads, weights

    def after_backward(self, epoch, step):
        params, gs = [], []
        for tap, dw, db in self._pending:
            params += [(("dsn", tap, "W"), self.heads[tap]["W"]), (("dsn", tap, "b"), self.heads[tap]["b"])]
            gs += [self.alpha * dw, self.alpha * db]
        if params:
            sgd_step(self.sgd, params, gs)
        self._pending = []

    def epoch_metrics(self) -> dict:
        return {
            "alpha": self.alpha,
            "head_loss": {tap: float(np.mean(v)) if v else 0.0 for tap, v in self.losses.items()},
        }


def deep_supervision_attach(student: Network, taps, num_classes: int, schedule: AlphaSchedule | None = None,
                            seed: int = 0, learning_rate: float = 0.01, momentum: float = 0.9) -> DeepSupervision:
    """Attach softmax heads at ``taps``; pass the result to ``train_epoch`` as an auxiliary."""
    schedule = schedule or AlphaSchedule(1.0, 1, "DsnDecay")
    return DeepSupervision(student, taps, num_classes, schedule, seed, learning_rate, momentum)


# ---------------------------------------------------------------------------
# Hints
# ---------------------------------------------------------------------------


@dataclass
class HintsResult:
    student: Network
    losses: list[float]  # full-set hint loss before training and after each epoch
    regressor: dict[str, np.ndarray]


def _hint_loss(pred: np.ndarray, target: np.ndarray) -> float:
    d = pred - target
    return float(np.mean(d * d))


def hints_pretrain(student: Network, teacher: Network, student_tap: str, teacher_tap: str, images: np.ndarray,
                   epochs: int, sgd: SgdState, batch_size: int = 100, seed: int = 0,
                   regressor_init: str = "glorot") -> HintsResult:
    """Train the student up to ``student_tap`` plus a disposable affine
    regressor so the regressor's output matches the teacher's activations at
    ``teacher_tap`` (mean squared error). Student layers after the tap are
    left untouched and the regressor is discarded by the caller.

    ``regressor_init="identity"`` starts the regressor at the identity map
    (needs equal tap sizes).
    """
    s_idx = student.resolve_tap(student_tap)
    teacher.resolve_tap(teacher_tap)
    ks = int(np.prod(student.tap_shape(student_tap)))
    kt = int(np.prod(teacher.tap_shape(teacher_tap)))
    if regressor_init == "identity":
        if ks != kt:
            raise ShapeError(f"identity regressor needs equal tap sizes, got {ks} and {kt}")
        reg = {"W": np.eye(ks, dtype=DTYPE), "b": np.zeros(kt, DTYPE)}
    else:
        reg = {"W": glorot_uniform(substream(seed, "hint-regressor"), (ks, kt), ks, kt), "b": np.zeros(kt, DTYPE)}

    targets = teacher.activations(images, [teacher_tap])[teacher_tap].reshape(len(images), -1)
    if targets.shape[1] != reg["W"].shape[1]:
        raise ShapeError("regressor output does not match the teacher tap size")

    def full_loss():
        acts = student.activations(images, [student_tap])[student_tap].reshape(len(images), -1)
        return _hint_loss(acts @ reg["W"] + reg["b"], targets)

    losses = [full_loss()]
    layers = range(s_idx + 1)
    for epoch in range(epochs):
        order = batch_order(len(images), seed, epoch)
        for step, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start : start + batch_size]
            res = student.forward(images[idx], "train", derive_seed(seed, "hints-dropout", epoch, step), stop_at=s_idx)
            acts = res.taps[student_tap]
            a = acts.reshape(len(idx), -1)
            t = targets[idx]
            dpred = 2.0 * (a @ reg["W"] + reg["b"] - t) / t.size
            da = (dpred @ reg["W"].T).reshape(acts.shape)
            grads = student.backward(res, tap_grads={student_tap: da})
            network_sgd_step(sgd, student, grads, layers=layers)
            sgd_step(sgd, [(("hint", "W"), reg["W"]), (("hint", "b"), reg["b"])], [a.T @ dpred, dpred.sum(axis=0)])
        losses.append(full_loss())
    return HintsResult(student=student, losses=losses, regressor=reg)
