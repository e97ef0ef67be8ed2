"""Run configuration: a YAML key tree with an explicit schema version.

Unknown keys are errors. Validation collects every violated constraint
before raising :class:`ConfigError`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .nn import LAYER_KINDS, LayerSpec, mnist_table1_specs
from .rdl import ALPHA_RULES
from .rdm import METRICS, RDM_DISTANCE_METHODS
from .transfer import METHOD_TAGS

SCHEMA_VERSION = 1
REQUIRED = object()

_NUM = (int, float)

SECTIONS = {
    "dataset": {
        "kind": (str, REQUIRED),
        "path": (str, None),
        "permutation_seed": (int, 0),
        "train_offset": (int, 0),
        "train_count": (int, None),
        "test_count": (int, None),
        "num_classes": (int, 10),
        "per_class": (int, 100),
        "test_per_class": (int, 50),
        "image_shape": (list, [1, 8, 8]),
        "separation": (_NUM, 3.0),
        "data_seed": (int, 0),
        "validation_count": (int, 0),
        "gcn": (bool, False),
        "hflip": (bool, False),
    },
    "architecture": {
        "preset": (str, None),
        "num_classes": (int, 10),
        "layers": (list, None),
    },
    "method": {
        "kind": (str, REQUIRED),
        "teacher_checkpoint": (str, None),
        "fresh_readout": (bool, False),
        "taps": (list, None),
        "student_tap": (str, None),
        "teacher_tap": (str, None),
        "pretrain_epochs": (int, None),
        "pretrain_lr": (_NUM, None),
    },
    "optimizer": {
        "lr": (_NUM, 0.01),
        "momentum": (_NUM, 0.9),
        "batch_size": (int, 100),
    },
    "schedule": {
        "epochs": (int, 50),
        "alpha0": (_NUM, 1.0),
        "alpha_rule": (str, None),
        "lr_halving_interval": (int, None),
    },
    "rdl": {
        "tap_map": (dict, REQUIRED),
        "pair_fraction": (_NUM, 0.05),
        "pair_count": (int, None),
        "metric": (str, "MeanSquaredError"),
        "cache_dir": (str, None),
    },
    "eval": {
        "taps": (list, None),
        "rdm_metric": (str, "MeanSquaredError"),
        "rdm_methods": (list, ["correlation"]),
        "bootstrap_samples": (int, 20),
        "sample_size": (int, 100),
        "bootstrap_pool": (int, 1000),
        "bootstrap_replace": (bool, False),
        "export_per_class": (int, 10),
        "export_metric": (str, "Euclidean"),
        "per_epoch_test": (bool, True),
    },
}
TOP_LEVEL = {"schema_version", "name", "seed", *SECTIONS}
LAYER_KEYS = {"kind", "kernel", "stride", "features", "dropout_p", "tap"}


@dataclass
class RunConfig:
    name: str
    seed: int
    dataset: dict
    layers: list[LayerSpec]
    method: dict
    optimizer: dict
    schedule: dict
    rdl: dict | None
    eval: dict
    source: Path | None = None
    raw: bytes = field(default=b"", repr=False)

    @property
    def method_kind(self) -> str:
        return self.method["kind"]

    def resolve_path(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(os.path.expandvars(p)).expanduser()
        if not path.is_absolute() and self.source is not None:
            path = self.source.parent / path
        return path

    @property
    def hints_pretrain_epochs(self) -> int:
        e = self.method.get("pretrain_epochs")
        return max(1, round(0.2 * self.schedule["epochs"])) if e is None else e


def _typecheck(value, types) -> bool:
    if types is bool or types == (bool,):
        return isinstance(value, bool)
    if isinstance(value, bool):
        return False
    return isinstance(value, types)


def _section(raw, name, problems) -> dict:
    schema = SECTIONS[name]
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        problems.append(f"{name}: must be a mapping")
        return {k: (None if d is REQUIRED else d) for k, (_, d) in schema.items()}
    out = {}
    for key in raw:
        if key not in schema:
            problems.append(f"{name}.{key}: unknown key")
    for key, (types, default) in schema.items():
        if key not in raw or raw[key] is None:
            if default is REQUIRED:
                problems.append(f"{name}.{key}: required")
                out[key] = None
            else:
                out[key] = default
            continue
        value = raw[key]
        if not _typecheck(value, types):
            tname = types.__name__ if isinstance(types, type) else "number"
            problems.append(f"{name}.{key}: expected {tname}, got {type(value).__name__}")
        out[key] = value
    return out


def _layers(arch: dict, problems) -> list[LayerSpec]:
    if arch["preset"] is not None and arch["layers"] is not None:
        problems.append("architecture: give either preset or layers, not both")
    if arch["preset"] is not None:
        if arch["preset"] != "mnist_table1":
            problems.append(f"architecture.preset: unknown preset {arch['preset']!r}")
            return []
        return mnist_table1_specs(arch["num_classes"])
    if not arch["layers"]:
        problems.append("architecture: needs a preset or a nonempty layers list")
        return []
    specs = []
    for i, entry in enumerate(arch["layers"]):
        if not isinstance(entry, dict):
            problems.append(f"architecture.layers[{i}]: must be a mapping")
            continue
        unknown = set(entry) - LAYER_KEYS
        if unknown:
            problems.append(f"architecture.layers[{i}]: unknown keys {sorted(unknown)}")
        if entry.get("kind") not in LAYER_KINDS:
            problems.append(f"architecture.layers[{i}].kind: expected one of {LAYER_KINDS}")
            continue
        try:
            specs.append(LayerSpec(**{k: v for k, v in entry.items() if k in LAYER_KEYS}))
        except (ValueError, TypeError) as exc:
            problems.append(f"architecture.layers[{i}]: {exc}")
    return specs


def parse_config(text: str | bytes, source: Path | None = None) -> RunConfig:
    raw_bytes = text if isinstance(text, bytes) else text.encode("utf-8")
    try:
        doc = yaml.safe_load(raw_bytes)
    except yaml.YAMLError as exc:
        raise ConfigError([f"YAML parse error: {exc}"]) from None
    if not isinstance(doc, dict):
        raise ConfigError(["config must be a mapping at top level"])
    problems: list[str] = []
    for key in doc:
        if key not in TOP_LEVEL:
            problems.append(f"{key}: unknown key")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        problems.append(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    name = doc.get("name")
    if not isinstance(name, str) or not name or "/" in name:
        problems.append("name: required nonempty string without '/'")
    seed = doc.get("seed")
    if not _typecheck(seed, int) or seed < 0:
        problems.append("seed: required nonnegative integer")

    sections = {s: _section(doc.get(s), s, problems) for s in SECTIONS if s != "rdl"}
    method = sections["method"]
    kind = method["kind"]
    if kind is not None and kind not in METHOD_TAGS:
        problems.append(f"method.kind: expected one of {METHOD_TAGS}")

    rdl = None
    if kind == "Rdl":
        if doc.get("rdl") is None:
            problems.append("rdl: section required when method.kind is Rdl")
        else:
            rdl = _section(doc.get("rdl"), "rdl", problems)
    elif doc.get("rdl") is not None:
        problems.append("rdl: section only allowed when method.kind is Rdl")

    layers = _layers(sections["architecture"], problems)
    taps = {s.tap for s in layers if s.tap}
    dup = [s.tap for s in layers if s.tap and sum(t.tap == s.tap for t in layers) > 1]
    if dup:
        problems.append(f"architecture: duplicate tap names {sorted(set(dup))}")

    ds = sections["dataset"]
    if ds["kind"] not in (None, "mnist", "synthetic"):
        problems.append("dataset.kind: expected 'mnist' or 'synthetic'")
    if ds["kind"] == "mnist" and not ds["path"]:
        problems.append("dataset.path: required for mnist")
    if not (isinstance(ds["image_shape"], list) and len(ds["image_shape"]) == 3
            and all(_typecheck(v, int) and v > 0 for v in ds["image_shape"])):
        problems.append("dataset.image_shape: expected three positive integers")

    opt = sections["optimizer"]
    if _typecheck(opt["lr"], _NUM) and opt["lr"] <= 0:
        problems.append("optimizer.lr: must be positive")
    if _typecheck(opt["momentum"], _NUM) and not 0 <= opt["momentum"] < 1:
        problems.append("optimizer.momentum: must lie in [0, 1)")
    if _typecheck(opt["batch_size"], int) and opt["batch_size"] < 2:
        problems.append("optimizer.batch_size: must be at least 2")

    sched = sections["schedule"]
    if _typecheck(sched["epochs"], int) and sched["epochs"] < 0:
        problems.append("schedule.epochs: must be nonnegative")
    if _typecheck(sched["alpha0"], _NUM) and sched["alpha0"] < 0:
        problems.append("schedule.alpha0: must be nonnegative")
    if sched["alpha_rule"] is None:
        sched["alpha_rule"] = "DsnDecay" if kind == "DeepSupervision" else "RdlLinear"
    elif sched["alpha_rule"] not in ALPHA_RULES:
        problems.append(f"schedule.alpha_rule: expected one of {ALPHA_RULES}")
    if sched["lr_halving_interval"] is not None and _typecheck(sched["lr_halving_interval"], int) \
            and sched["lr_halving_interval"] <= 0:
        problems.append("schedule.lr_halving_interval: must be positive")

    if kind in ("Finetune", "Hints", "Rdl") and not method["teacher_checkpoint"]:
        problems.append(f"method.teacher_checkpoint: required for {kind}")
    if kind == "DeepSupervision":
        if not method["taps"]:
            problems.append("method.taps: required for DeepSupervision")
        else:
            problems += [f"method.taps: unknown tap {t!r}" for t in method["taps"] if t not in taps]
    if kind == "Hints":
        st = method["student_tap"]
        if st is None:
            ordered = [s.tap for s in layers if s.tap]
            method["student_tap"] = st = ordered[len(ordered) // 2] if ordered else None
        if st not in taps:
            problems.append(f"method.student_tap: unknown tap {st!r}")
        if method["teacher_tap"] is None:
            method["teacher_tap"] = st
        pe = method["pretrain_epochs"]
        if pe is not None and _typecheck(sched["epochs"], int) and not 0 <= pe <= sched["epochs"]:
            problems.append("method.pretrain_epochs: must lie in [0, schedule.epochs]")
    if rdl is not None:
        tm = rdl["tap_map"]
        if isinstance(tm, dict):
            if not tm:
                problems.append("rdl.tap_map: must name at least one tap")
            problems += [f"rdl.tap_map: unknown student tap {t!r}" for t in tm if t not in taps]
            problems += [f"rdl.tap_map: teacher tap for {s!r} must be a string" for s, t in tm.items()
                         if not isinstance(t, str)]
        if _typecheck(rdl["pair_fraction"], _NUM) and not 0 < rdl["pair_fraction"] <= 1:
            problems.append("rdl.pair_fraction: must lie in (0, 1]")
        if rdl["pair_count"] is not None and _typecheck(rdl["pair_count"], int) and rdl["pair_count"] <= 0:
            problems.append("rdl.pair_count: must be positive")
        if rdl["metric"] not in METRICS:
            problems.append(f"rdl.metric: expected one of {METRICS}")

    ev = sections["eval"]
    if ev["taps"] is None:
        ev["taps"] = [s.tap for s in layers if s.tap]
    problems += [f"eval.taps: unknown tap {t!r}" for t in ev["taps"] if t not in taps and t != "logits"]
    for key in ("rdm_metric", "export_metric"):
        if ev[key] not in METRICS:
            problems.append(f"eval.{key}: expected one of {METRICS}")
    if isinstance(ev["rdm_methods"], list):
        problems += [f"eval.rdm_methods: unknown method {m!r}" for m in ev["rdm_methods"]
                     if m not in RDM_DISTANCE_METHODS]
    if problems:
        raise ConfigError(problems)
    return RunConfig(
        name=name, seed=seed, dataset=ds, layers=layers, method=method, optimizer=opt,
        schedule=sched, rdl=rdl, eval=ev, source=source, raw=raw_bytes,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_bytes(), source=path.resolve())
