"""Experiment pipeline: train one configured run, and compare finished runs
from their output directories."""

from __future__ import annotations

import json
import logging
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, load_config, parse_config
from .data import Dataset, augment_hflip, gcn, load_mnist, synth_clusters
from .errors import RdlError
from .evaluation import (
    bootstrap_rdm_distance,
    classical_mds,
    compare_predictions,
    error_curve,
    matrix_csv,
    mcnemar_table_csv,
    write_mds,
)
from .nn import Network, SgdState
from .rdl import AlphaSchedule, RdlAuxiliary, RdmCache, TeacherRdmProvider
from .rdm import compute_rdm, export_rdm
from .rng import GENERATOR_NAME, derive_seed, substream
from .training import error_rate, train_epoch
from .transfer import deep_supervision_attach, finetune_init, hints_pretrain

log = logging.getLogger("rdlearn")

OUTPUT_ROOT_ENV = "RDL_OUTPUT_ROOT"


def output_root(default="runs") -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, default))


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class RunData:
    train: Dataset
    validation: Dataset
    test: Dataset


def _slice_train(ds: Dataset, spec: dict, perm: np.ndarray) -> np.ndarray:
    start = spec["train_offset"]
    stop = len(perm) if spec["train_count"] is None else start + spec["train_count"]
    if start < 0 or stop > len(perm) or start >= stop:
        raise RdlError(f"train slice [{start}, {stop}) outside the {len(perm)} available images")
    return perm[start:stop]


def load_run_data(spec: dict, seed: int, resolve=lambda p: Path(p)) -> RunData:
    """Build train/validation/test sets from a dataset config section.

    The training pool is permuted with ``permutation_seed`` and sliced by
    ``train_offset``/``train_count`` so teacher and student runs can use
    disjoint slices of one file.
    """
    if spec["kind"] == "mnist":
        path = resolve(spec["path"])
        full = load_mnist(path, "train")
        test = load_mnist(path, "test")
        if spec["test_count"] is not None:
            test = test.subset(np.arange(min(spec["test_count"], len(test))), "test")
        perm = substream(spec["permutation_seed"], "train-permutation").permutation(len(full))
    else:
        per, tpc = spec["per_class"], spec["test_per_class"]
        allds = synth_clusters(spec["num_classes"], per + tpc, tuple(spec["image_shape"]),
                               float(spec["separation"]), spec["data_seed"])
        train_idx, test_idx = [], []
        for c in range(spec["num_classes"]):
            members = np.flatnonzero(allds.labels == c)
            train_idx.append(members[:per])
            test_idx.append(members[per:])
        full = allds.subset(np.sort(np.concatenate(train_idx)), "train")
        test = allds.subset(np.sort(np.concatenate(test_idx)), "test")
        perm = substream(spec["permutation_seed"], "train-permutation").permutation(len(full))
    pool = full.subset(np.sort(_slice_train(full, spec, perm)), "train")
    vcount = spec["validation_count"]
    vperm = substream(seed, "validation").permutation(len(pool))
    validation = pool.subset(np.sort(vperm[:vcount]), "validation")
    train = pool.subset(np.sort(vperm[vcount:]), "train")
    if spec["gcn"]:
        for ds in (train, validation, test):
            if len(ds):
                ds.images = gcn(ds.images)
    return RunData(train, validation, test)


def export_subset(ds: Dataset, per_class: int) -> np.ndarray:
    """First ``per_class`` examples of every class, ordered by class."""
    idx = [np.flatnonzero(ds.labels == c)[:per_class] for c in range(ds.num_classes)]
    return np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# Training run
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    directory: Path
    name: str
    method: str
    history: list[dict]
    final_test_error: float
    checkpoint_path: Path
    rdm_exports: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def load(cls, directory) -> "RunRecord":
        directory = Path(directory)
        doc = json.loads((directory / "record.json").read_text())
        return cls(directory, doc["name"], doc["method"], doc["history"], doc["final_test_error"],
                   directory / doc["checkpoint"], doc.get("rdm_exports", []), doc)


def _history_row(epoch, metrics, test_err):
    row = {"epoch": epoch, "train_error": metrics.train_error, "test_error": test_err,
           "train_loss": metrics.train_loss, "learning_rate": metrics.learning_rate}
    row.update(metrics.extra)
    return row


def build_student(cfg: RunConfig, input_shape) -> Network:
    return Network(cfg.layers, input_shape, seed=derive_seed(cfg.seed, "init"))


def run(cfg: RunConfig, root: Path | None = None) -> RunRecord:
    """Train, evaluate and export one configured run into ``root/<name>/``."""
    started = time.time()
    root = output_root() if root is None else Path(root)
    out = root / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_bytes(cfg.raw)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    try:
        return _run(cfg, out, started)
    finally:
        log.removeHandler(handler)
        handler.close()


def _run(cfg: RunConfig, out: Path, started: float) -> RunRecord:
    data = load_run_data(cfg.dataset, cfg.seed, cfg.resolve_path)
    log.info("run %s: method=%s train=%d validation=%d test=%d", cfg.name, cfg.method_kind,
             len(data.train), len(data.validation), len(data.test))
    input_shape = data.train.images.shape[1:]
    student = build_student(cfg, input_shape)
    kind = cfg.method_kind
    opt, sched = cfg.optimizer, cfg.schedule
    epochs = sched["epochs"]
    train_seed = derive_seed(cfg.seed, "train")
    teacher = None
    if kind in ("Finetune", "Hints", "Rdl"):
        teacher = checkpoint.load(cfg.resolve_path(cfg.method["teacher_checkpoint"]))

    auxiliaries = []
    history: list[dict] = []
    extra: dict = {}
    first_epoch = 0
    schedule = AlphaSchedule(float(sched["alpha0"]), max(epochs, 1), sched["alpha_rule"])
    if kind == "Finetune":
        readout = None
        if cfg.method["fresh_readout"]:
            readout = [s for s in cfg.layers if s.kind in ("FullyConnected", "LinearReadout", "Conv")][-1]
        student = finetune_init(student, teacher, readout, seed=derive_seed(cfg.seed, "readout"))
    elif kind == "DeepSupervision":
        auxiliaries.append(deep_supervision_attach(
            student, cfg.method["taps"], data.train.num_classes, schedule, seed=derive_seed(cfg.seed, "dsn"),
            learning_rate=opt["lr"], momentum=opt["momentum"]))
    elif kind == "Hints":
        pre_epochs = cfg.hints_pretrain_epochs
        hres = hints_pretrain(
            student, teacher, cfg.method["student_tap"], cfg.method["teacher_tap"], data.train.images,
            pre_epochs, SgdState(cfg.method["pretrain_lr"] or opt["lr"], opt["momentum"]),
            batch_size=opt["batch_size"], seed=derive_seed(cfg.seed, "hints"))
        extra["hint_losses"] = hres.losses
        first_epoch = pre_epochs
        log.info("hints pretraining losses %s", hres.losses)
    elif kind == "Rdl":
        rcfg = cfg.rdl
        cache = RdmCache(cfg.resolve_path(rcfg["cache_dir"])) if rcfg["cache_dir"] else None
        provider = TeacherRdmProvider(teacher, rcfg["metric"], cache)
        for t_tap in rcfg["tap_map"].values():
            teacher.resolve_tap(t_tap)
        auxiliaries.append(RdlAuxiliary(provider, dict(rcfg["tap_map"]), schedule, float(rcfg["pair_fraction"]),
                                        rcfg["pair_count"], seed=derive_seed(cfg.seed, "rdl")))

    augment = None
    if cfg.dataset["hflip"]:
        augment = augment_hflip
    sgd = SgdState(float(opt["lr"]), float(opt["momentum"]))
    for epoch in range(first_epoch, epochs):
        if sched["lr_halving_interval"]:
            sgd.learning_rate = float(opt["lr"]) * 0.5 ** (epoch // sched["lr_halving_interval"])
        try:
            metrics = train_epoch(student, data.train.images, data.train.labels, sgd, opt["batch_size"],
                                  train_seed, epoch, auxiliaries, augment=augment)
        except RdlError as exc:
            raise RdlError(f"epoch {epoch}: {exc}") from exc
        last = epoch == epochs - 1
        test_err = error_rate(student, data.test.images, data.test.labels) \
            if (cfg.eval["per_epoch_test"] or last) else None
        history.append(_history_row(epoch, metrics, test_err))
        log.info("epoch %d: train_error=%.4f test_error=%s loss=%.4f %s", epoch, metrics.train_error,
                 test_err, metrics.train_loss, metrics.extra)

    predictions = student.predict(data.test.images)
    final_err = float(np.mean(predictions != data.test.labels)) if len(data.test) else 0.0
    ckpt = out / "checkpoint.rdlk"
    checkpoint.save(student, ckpt)
    np.savez(out / "predictions.npz", predictions=predictions, labels=data.test.labels)
    error_curve(history, out / "metrics")

    exports = []
    sel = export_subset(data.test, cfg.eval["export_per_class"])
    if len(sel) >= 2:
        rdm_dir = out / "rdms"
        rdm_dir.mkdir(exist_ok=True)
        acts = student.activations(data.test.images[sel], cfg.eval["taps"])
        for tap in cfg.eval["taps"]:
            rdm = compute_rdm(acts[tap], cfg.eval["export_metric"], labels=data.test.labels[sel])
            exports += [str(p.relative_to(out)) for p in export_rdm(rdm, rdm_dir / tap, title=f"{cfg.name} {tap}")]

    finished = time.time()
    dataset_spec = dict(cfg.dataset)
    if dataset_spec.get("path"):
        dataset_spec["path"] = str(cfg.resolve_path(dataset_spec["path"]))
    doc = {
        "name": cfg.name,
        "method": kind,
        "seed": cfg.seed,
        "config": "config.yaml",
        "checkpoint": ckpt.name,
        "predictions": "predictions.npz",
        "final_test_error": final_err,
        "history": history,
        "rdm_exports": exports,
        "eval": cfg.eval,
        "dataset": dataset_spec,
        "test_fingerprint": data.test.fingerprint(),
        "layer_shapes": [list(s) for s in student.shapes],
        "generator": GENERATOR_NAME,
        "wall_clock": {"started": started, "finished": finished, "seconds": finished - started},
        "platform": {"python": platform.python_version(), "numpy": np.__version__},
        **extra,
    }
    (out / "record.json").write_text(json.dumps(doc, indent=2, default=float) + "\n")
    return RunRecord(out, cfg.name, kind, history, final_err, ckpt, exports, doc)


def run_config_file(path, root: Path | None = None) -> RunRecord:
    return run(load_config(path), root)


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------


@dataclass
class CompareReport:
    names: list[str]
    errors: dict[str, float]
    p_values: np.ndarray
    pairs: list
    rdm_distances: dict = field(default_factory=dict)  # (tap, method) -> matrix
    mds: dict = field(default_factory=dict)  # (tap, method) -> MdsEmbedding
    skipped: dict = field(default_factory=dict)


def _unique_names(records) -> list[str]:
    names, seen = [], {}
    for r in records:
        seen[r.name] = seen.get(r.name, 0) + 1
        names.append(r.name if seen[r.name] == 1 else f"{r.name}#{seen[r.name]}")
    return names


def compare(records: list[RunRecord], test: Dataset | None = None, out_dir: Path | None = None,
            taps=None, eval_cfg: dict | None = None, seed: int = 0) -> CompareReport:
    """McNemar p-values, error table, bootstrapped RDM distances and MDS across runs."""
    if not records:
        raise RdlError("nothing to compare")
    fingerprints = {r.extra.get("test_fingerprint") for r in records}
    if len(fingerprints) != 1:
        raise RdlError("records were evaluated on different test sets")
    ev = dict(eval_cfg or records[0].extra["eval"])
    if test is None:
        spec = records[0].extra["dataset"]
        test = load_run_data(spec, records[0].extra["seed"]).test
    if test.fingerprint() != fingerprints.pop():
        raise RdlError("supplied test set does not match the records' test set")

    names = _unique_names(records)
    preds = {}
    for name, r in zip(names, records):
        stored = np.load(r.directory / r.extra["predictions"])
        preds[name] = stored["predictions"]
    pmat, rows = compare_predictions(preds, test.labels)
    errors = {n: float(np.mean(p != test.labels)) for n, p in preds.items()}

    nets = [checkpoint.load(r.checkpoint_path) for r in records]
    if taps is None:
        taps = [t for t in ev["taps"] if all(t in net.taps or t == "logits" for net in nets)]
    pool = test.images[: min(ev["bootstrap_pool"], len(test))]
    acts = [net.activations(pool, taps) for net in nets]
    report = CompareReport(names, errors, pmat, rows)
    k = len(nets)
    for tap in taps:
        for method in ev["rdm_methods"]:
            mat = np.zeros((k, k))
            skipped = 0
            for i in range(k):
                for j in range(i + 1, k):
                    res = bootstrap_rdm_distance(
                        acts[i][tap], acts[j][tap], ev["bootstrap_samples"], min(ev["sample_size"], len(pool)),
                        ev["rdm_metric"], method, rng_seed=derive_seed(seed, "compare", tap),
                        replace=ev["bootstrap_replace"])
                    mat[i, j] = mat[j, i] = res.mean
                    skipped += res.skipped
            report.rdm_distances[(tap, method)] = mat
            report.skipped[(tap, method)] = skipped
            if k >= 2 and np.isfinite(mat).all():
                report.mds[(tap, method)] = classical_mds(mat, labels=names)
    if out_dir is not None:
        write_report(report, Path(out_dir))
    return report


def write_report(report: CompareReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "mcnemar_pvalues.csv").write_text(matrix_csv(report.names, report.p_values))
    (out / "mcnemar_pairs.csv").write_text(mcnemar_table_csv(report.pairs))
    (out / "errors.csv").write_text("model,test_error\n" + "".join(
        f"{n},{repr(e)}\n" for n, e in report.errors.items()))
    summary = {"models": report.names, "errors": report.errors, "rdm": {}}
    for (tap, method), mat in report.rdm_distances.items():
        stem = f"rdm_distance_{tap}_{method}"
        (out / f"{stem}.csv").write_text(matrix_csv(report.names, mat))
        entry = {"skipped": report.skipped[(tap, method)]}
        if (tap, method) in report.mds:
            emb = report.mds[(tap, method)]
            write_mds(emb, out / f"mds_{tap}_{method}", title=f"{tap} ({method})")
            entry["stress"] = emb.stress
        summary["rdm"][f"{tap}/{method}"] = entry
    (out / "report.json").write_text(json.dumps(summary, indent=2) + "\n")


def compare_dirs(run_dirs, out_dir: Path | None = None) -> CompareReport:
    records = [RunRecord.load(d) for d in run_dirs]
    return compare(records, out_dir=out_dir)


def config_from_snapshot(run_dir) -> RunConfig:
    path = Path(run_dir) / "config.yaml"
    return parse_config(path.read_bytes(), source=path.resolve())
