"""Command implementations behind the ``gmvit`` entry point.

Every command takes a resolved :class:`RunConfig`, validates it against the
dataset manifest before doing any work, writes ``config.echo`` into its
output directory and returns a record of what it produced.

Run directories hold ``train_log.csv`` (deterministic: no wall times),
``timing.csv`` (wall time per epoch), ``env.json`` and ``checkpoints/best``
plus ``checkpoints/last``.
"""

from __future__ import annotations

import csv
import json
import os
import platform
import shutil
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import plotting
from ..autodiff import SGD, NumericalError, SgdState
from ..data import CLASS_NAMES, Dataset, DatasetConfig, SplitData, build_dataset, load_dataset
from ..distillation import TARGETS, DistillConfig, Taps, check_compatible, distill_step, teacher_taps
from ..gradsuite import run_suite, sign_flip
from ..model import (STAGES, GMViT, ModelConfig, StageTimer, build_model, load_checkpoint, preset,
                     save_checkpoint)
from ..model.checkpoint import CheckpointError
from ..retrieval import (DescriptorIndex, MetricsReport, classification_metrics, evaluate_retrieval,
                         similarity_matrix, write_metrics, write_similarity_csv)
from ..seeding import substream
from ..training import predict, train_step
from .config import ConfigError, RunConfig, cnn_widths


class GradcheckFailure(ArithmeticError):
    """Raised when the finite-difference suite fails; exit code 2."""


# ------------------------------------------------------------------ helpers
def dataset_config(cfg: RunConfig) -> DatasetConfig:
    d = cfg.dataset
    return DatasetConfig(rig=d.rig, C=d.C, per_class_train=d.per_class_train,
                         per_class_test=d.per_class_test, H=d.H, W=d.W, seed=d.seed, points=d.points)


def open_dataset(cfg: RunConfig) -> Dataset:
    path = Path(cfg.dataset.path)
    if not (path / "manifest.json").exists():
        raise ConfigError(f"[dataset] path = {str(path)!r}: no dataset there (run gen-data first)")
    return load_dataset(path)


def model_config(cfg: RunConfig, ds: Dataset, variant: str | None = None) -> ModelConfig:
    """Model section resolved against the dataset; mismatches are field-level errors."""
    m = cfg.model
    if cfg.dataset.rig != ds.manifest["rig"]:
        raise ConfigError(f"[dataset] rig = {cfg.dataset.rig!r} but the dataset at {ds.root} was "
                          f"rendered with {ds.manifest['rig']!r} (N={ds.N})")
    for key in ("C", "H", "W"):
        if getattr(cfg.dataset, key) != getattr(ds, key):
            raise ConfigError(f"[dataset] {key} = {getattr(cfg.dataset, key)} but the dataset manifest "
                              f"records {key} = {getattr(ds, key)}")
    over = dict(D=m.D, L=m.L, K=m.K, heads=m.heads, expansion=m.expansion, cnn_widths=cnn_widths(m),
                token_weighting=m.token_weighting, dropout=m.dropout, dtype=m.dtype, C=ds.C, H=ds.H, W=ds.W)
    if m.M != "auto":
        over["M"] = int(m.M)
    try:
        return preset(variant or m.variant, ds.manifest["rig"], **over)
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from None


def check_against_dataset(mcfg: ModelConfig, ds: Dataset, what: str) -> None:
    for key, have in (("N", ds.N), ("C", ds.C), ("H", ds.H), ("W", ds.W)):
        if getattr(mcfg, key) != have:
            raise ConfigError(f"{what}: model {key} = {getattr(mcfg, key)} but the dataset has {key} = {have}")


def _subset(split: SplitData, n: int) -> SplitData:
    return split if n <= 0 or n >= len(split) else split.subset(np.arange(n))


def environment() -> dict:
    return {"python": sys.version.split()[0], "numpy": np.__version__, "platform": platform.platform(),
            "cpu_count": os.cpu_count(),
            "threads": {k: os.environ.get(k) for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                                                       "MKL_NUM_THREADS")}}


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path: Path, rows: list[dict]) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([_fmt(v) for v in r.values()])
    return path


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def make_optimizer(cfg: RunConfig, model: GMViT) -> SGD:
    o = cfg.optimizer
    return SGD(model.parameters(), SgdState(momentum=o.momentum, weight_decay=o.weight_decay,
                                            lr_start=o.lr_start, lr_end=o.lr_end, horizon=o.horizon_epochs()))


def resolve_checkpoint(cfg: RunConfig, which: str) -> Path:
    if which in ("best", "last"):
        return cfg.out / "checkpoints" / which
    return Path(which)


def open_checkpoint(path: str | Path, optimizer: SGD | None = None) -> tuple[GMViT, dict]:
    path = Path(path)
    if not (path / "model.json").exists():
        raise CheckpointError(f"no checkpoint at {path}")
    return load_checkpoint(path, optimizer)


def test_accuracy(model: GMViT, split: SplitData, batch_size: int = 40) -> float:
    model.eval()
    p = predict(model, split.images, split.camera_positions, batch_size)
    model.train()
    return float((p.logits.argmax(axis=1) == split.labels).mean())


# -------------------------------------------------------------------- runs
@dataclass
class RunRecord:
    out_dir: Path
    rows: list[dict]
    best_checkpoint: Path
    last_checkpoint: Path
    best_test_oa: float
    best_epoch: int
    metrics: MetricsReport | None = None
    environment: dict = field(default_factory=dict)


StepFn = Callable[[np.ndarray, np.ndarray, float], dict]


def _fit(cfg: RunConfig, model: GMViT, optimizer: SGD, step: StepFn, train: SplitData, test: SplitData,
         out_dir: Path, loss_keys: list[str], extra_meta: dict | None = None,
         resume: Path | None = None) -> RunRecord:
    """Shared epoch loop for train and distill.

    Shuffling and dropout draw from per-epoch substreams, so a run resumed
    from ``checkpoints/last`` continues exactly as the uninterrupted run.
    """
    seed, o = cfg.seed, cfg.optimizer
    ck_dir = out_dir / "checkpoints"
    rows: list[dict] = []
    timing: list[dict] = []
    start, best_oa, best_epoch = 0, -1.0, 0
    if resume is not None:
        model_r, meta = open_checkpoint(resume, optimizer)
        if model_r.config != model.config:
            raise ConfigError(f"[train] resume = {str(resume)!r}: checkpoint config differs from the run config")
        model.load_state_dict(model_r.state_dict())
        optimizer.params = model.parameters()
        state = meta["extra"]
        start, best_oa, best_epoch = state["epoch"], state["best_test_oa"], state["best_epoch"]
        columns = ["epoch", "lr", *loss_keys, "train_oa", "test_oa"]
        rows = [{k: r[k] for k in columns} for r in state["rows"]]  # model.json stores keys sorted
        prev_best = Path(resume).parent / "best"
        if (prev_best / "model.json").exists() and prev_best.resolve() != (ck_dir / "best").resolve():
            shutil.copytree(prev_best, ck_dir / "best", dirs_exist_ok=True)
    n = len(train)
    bs = o.batch_size
    t_run = time.perf_counter()
    for epoch in range(start, o.epochs):
        t0 = time.perf_counter()
        model.train()
        model.dropout_rng = substream(seed, "dropout", epoch)
        order = substream(seed, "shuffle", epoch).permutation(n)
        batches = [order[i:i + bs] for i in range(0, n, bs)]
        if len(batches) > 1 and len(batches[-1]) == 1:
            batches = batches[:-1]  # batch-norm cannot train on a single sample
        sums = dict.fromkeys(loss_keys, 0.0)
        correct, seen = 0.0, 0
        for idx in batches:
            rep = step(idx, train.labels[idx], float(epoch))
            if not np.isfinite(rep["total"]):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}")
            for k in loss_keys:
                sums[k] += rep[k] * len(idx)
            correct += rep["acc"] * len(idx)
            seen += len(idx)
        test_oa = test_accuracy(model, test) if (epoch + 1) % cfg.train.eval_every == 0 or epoch + 1 == o.epochs \
            else float("nan")
        row = {"epoch": epoch + 1, "lr": rep["lr"]}
        row.update({k: sums[k] / seen for k in loss_keys})
        row.update({"train_oa": correct / seen, "test_oa": test_oa})
        rows.append(row)
        if test_oa > best_oa:
            best_oa, best_epoch = test_oa, epoch + 1
            save_checkpoint(model, ck_dir / "best", extra={"epoch": epoch + 1, "test_oa": test_oa, **(extra_meta or {})})
        save_checkpoint(model, ck_dir / "last", optimizer,
                        extra={"epoch": epoch + 1, "best_test_oa": best_oa, "best_epoch": best_epoch,
                               "rows": rows, **(extra_meta or {})})
        timing.append({"epoch": epoch + 1, "wall_s": time.perf_counter() - t0})
    write_csv(out_dir / "train_log.csv", rows)
    if timing:
        timing.append({"epoch": "total", "wall_s": time.perf_counter() - t_run})
        write_csv(out_dir / "timing.csv", timing)
    env = environment()
    env["dtype"] = model.config.dtype
    (out_dir / "env.json").write_text(json.dumps(env, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    plotting.plot_train_log(rows, out_dir / "train_curves.png")
    best, _ = open_checkpoint(ck_dir / "best")
    metrics = evaluate_model(cfg, best, test, out_dir, CLASS_NAMES)
    return RunRecord(out_dir, rows, ck_dir / "best", ck_dir / "last", best_oa, best_epoch, metrics, env)


def evaluate_model(cfg: RunConfig, model: GMViT, split: SplitData, out_dir: Path,
                   class_names=CLASS_NAMES) -> MetricsReport:
    """Classification, retrieval and similarity outputs for one split."""
    e = cfg.eval
    model.eval()
    pred = predict(model, split.images, split.camera_positions, batch_size=cfg.bench.batch_size)
    cls = classification_metrics(pred.logits, split.labels, model.config.C) if e.classification else None
    index = DescriptorIndex(pred.retrieval, split.labels, split.ids, e.backend, e.distance)
    ret = evaluate_retrieval(index, e.cap, e.at_n) if e.retrieval else None
    report = MetricsReport(cls, ret, {"split": split.name, "samples": len(split)})
    out_dir.mkdir(parents=True, exist_ok=True)
    if e.similarity:
        S, zero = similarity_matrix(index)
        write_similarity_csv(out_dir / "similarity.csv", S, index.ids)
        plotting.plot_similarity(S, split.labels, out_dir / "similarity.png")
        report.extra["zero_norm_descriptors"] = int(zero.sum())
    write_metrics(report, out_dir)
    if cls is not None:
        plotting.plot_per_class(cls.per_class, list(class_names), out_dir / "per_class.png")
    return report


# ----------------------------------------------------------------- commands
def cmd_gen_data(cfg: RunConfig, out: str | Path | None = None) -> Path:
    path = Path(out) if out is not None else Path(cfg.dataset.path)
    dcfg = dataset_config(cfg)
    try:
        dcfg.validate()
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"[dataset] {exc}") from None
    root = build_dataset(dcfg, path)
    ds = load_dataset(root)
    m = ds.manifest
    print(f"dataset {root}: rig={m['rig']} N={m['N']} C={m['C']} {m['H']}x{m['W']} "
          f"train={len(m['splits']['train']['samples'])} test={len(m['splits']['test']['samples'])}")
    return root


def cmd_train(cfg: RunConfig) -> RunRecord:
    ds = open_dataset(cfg)
    mcfg = model_config(cfg, ds)
    out_dir = cfg.out
    cfg.write_echo(out_dir)
    train = _subset(ds.split("train"), cfg.train.max_samples)
    test = ds.split("test")
    model = build_model(mcfg, cfg.seed)
    opt = make_optimizer(cfg, model)
    lit = cfg.optimizer.literal_label_softmax

    def step(idx, labels, epoch):
        return train_step(model, train.images[idx], train.camera_positions, labels, opt, epoch, lit)

    resume = None if cfg.train.resume == "none" else Path(cfg.train.resume)
    return _fit(cfg, model, opt, step, train, test, out_dir, ["hard", "total"],
                {"command": "train"}, resume)


def distill_config(cfg: RunConfig, targets: list[str] | None = None) -> DistillConfig:
    d = cfg.distill
    on = set(d.target_list() if targets is None else targets)
    return DistillConfig(temperature=d.temperature, c_soft=d.c_soft, c_hard=d.c_hard,
                         switches={t: t in on for t in TARGETS},
                         weights={t: getattr(d, f"weight_{t}") for t in TARGETS}, hard=d.hard,
                         t2_scale=d.t2_scale, literal_label_softmax=cfg.optimizer.literal_label_softmax)


def _loss_keys(dc: DistillConfig) -> list[str]:
    keys = [t for t in ("cnn", "view", "token", "group", "global") if dc.switches[t]]
    if dc.switches["logit"]:
        keys.append("soft")
    if dc.hard:
        keys.append("hard")
    return keys + ["total"]


def load_teacher(cfg: RunConfig, ds: Dataset) -> GMViT:
    if cfg.distill.teacher == "none":
        raise ConfigError("[distill] teacher: a teacher checkpoint path is required")
    teacher, _ = open_checkpoint(cfg.distill.teacher)
    check_against_dataset(teacher.config, ds, "[distill] teacher")
    teacher.eval()
    return teacher


def _distill_run(cfg: RunConfig, ds: Dataset, teacher: GMViT, dc: DistillConfig, out_dir: Path,
                 cache: Taps | None) -> RunRecord:
    mcfg = model_config(cfg, ds)
    train = _subset(ds.split("train"), cfg.train.max_samples)
    test = ds.split("test")
    student = build_model(mcfg, cfg.seed)
    check_compatible(teacher, student)
    opt = make_optimizer(cfg, student)
    needs = any(dc.switches.values())

    def step(idx, labels, epoch):
        cached = cache.take(idx) if cache is not None and needs else None
        return distill_step(teacher, student, train.images[idx], train.camera_positions, labels, dc,
                            opt, epoch, cached)

    resume = None if cfg.train.resume == "none" else Path(cfg.train.resume)
    return _fit(cfg, student, opt, step, train, test, out_dir, _loss_keys(dc),
                {"command": "distill", "targets": dc.enabled()}, resume)


def cmd_distill(cfg: RunConfig) -> RunRecord | list[dict]:
    """Single distillation run, or the seven-row cumulative target sweep."""
    from ..distillation import SWEEP_ORDER

    ds = open_dataset(cfg)
    model_config(cfg, ds)  # fail fast before loading anything heavy
    teacher = load_teacher(cfg, ds)
    out_dir = cfg.out
    cfg.write_echo(out_dir)
    cache = None
    if cfg.distill.cache_taps:
        train = _subset(ds.split("train"), cfg.train.max_samples)
        cache = teacher_taps(teacher, train.images, train.camera_positions)
    if not cfg.distill.sweep:
        return _distill_run(cfg, ds, teacher, distill_config(cfg), out_dir, cache)
    rows = []
    for k in range(len(SWEEP_ORDER) + 1):
        targets = list(SWEEP_ORDER[:k])
        dc = distill_config(cfg, targets)
        row_cfg = cfg.set("distill", "targets", ",".join(targets) or "none").set("distill", "sweep", False)
        row_cfg = row_cfg.set("run", "out", str(out_dir / f"row{k}"))
        row_cfg.write_echo(row_cfg.out)
        rec = _distill_run(row_cfg, ds, teacher, dc, row_cfg.out, cache)
        rows.append({"row": k, "added": "hard" if k == 0 else ("soft" if SWEEP_ORDER[k - 1] == "logit"
                                                               else SWEEP_ORDER[k - 1]),
                     "targets": "+".join(targets) or "none", "best_test_oa": rec.best_test_oa,
                     "final_test_oa": rec.rows[-1]["test_oa"]})
        print(f"sweep row {k} ({rows[-1]['targets']}): best test OA {rec.best_test_oa:.4f}")
    write_csv(out_dir / "sweep.csv", rows)
    plotting.plot_sweep(rows, out_dir / "sweep.png")
    return rows


def cmd_eval(cfg: RunConfig) -> MetricsReport:
    ds = open_dataset(cfg)
    path = resolve_checkpoint(cfg, cfg.eval.checkpoint)
    model, meta = open_checkpoint(path)
    check_against_dataset(model.config, ds, f"[eval] checkpoint {path}")
    out_dir = cfg.out / "eval" if cfg.eval.checkpoint in ("best", "last") else cfg.out
    cfg.write_echo(out_dir)
    report = evaluate_model(cfg, model, ds.split(cfg.eval.split), out_dir, ds.manifest["class_names"])
    c, r = report.classification, report.retrieval
    if c is not None:
        print(f"OA {c.oa:.4f}  mA {c.ma:.4f}")
    if r is not None:
        print(f"mAP {r.map_micro:.4f} (macro {r.map_macro:.4f})  NDCG {r.ndcg_micro:.4f}")
    return report


@dataclass
class GradcheckReport:
    results: list
    seconds: float
    mutate: str

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_rel_err(self) -> float:
        return max(r.max_rel_err for r in self.results)


def cmd_gradcheck(cfg: RunConfig) -> GradcheckReport:
    g = cfg.gradcheck
    variants = [v.strip() for v in g.variants.split(",") if v.strip()]
    out_dir = cfg.out
    cfg.write_echo(out_dir)
    if g.mutate != "none":
        with sign_flip(g.mutate):
            results, secs = run_suite(variants, g.max_coords, g.tol, cfg.seed)
    else:
        results, secs = run_suite(variants, g.max_coords, g.tol, cfg.seed)
    report = GradcheckReport(results, secs, g.mutate)
    write_csv(out_dir / "gradcheck.csv", [{"case": r.name, "max_rel_err": r.max_rel_err, "checked": r.checked,
                                           "tol": r.tol, "passed": r.passed} for r in results])
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:24s} {r.max_rel_err:.2e}")
    print(f"max rel err {report.max_rel_err:.2e} over {len(results)} cases in {secs:.1f} s: "
          f"{'PASS' if report.passed else 'FAIL'}")
    if not report.passed:
        raise GradcheckFailure(f"gradient check failed (max rel err {report.max_rel_err:.2e}, tol {g.tol})")
    return report


def cmd_bench(cfg: RunConfig) -> dict:
    """Inference throughput, per-stage time and parameter counts for the three variants."""
    b = cfg.bench
    ds = open_dataset(cfg)
    models = {}
    for name in ("teacher", "simple", "mini"):
        path = getattr(b, name)
        if path == "none":
            raise ConfigError(f"[bench] {name}: a checkpoint path is required")
        model, _ = open_checkpoint(path)
        check_against_dataset(model.config, ds, f"[bench] {name}")
        model.eval()
        models[name] = model
    ref = models["teacher"].config
    for name, m in models.items():
        for key in ("D", "N", "M", "C"):
            if getattr(m.config, key) != getattr(ref, key):
                raise ConfigError(f"[bench] {name}: {key} = {getattr(m.config, key)} differs from the teacher's "
                                  f"{getattr(ref, key)}; benchmark needs a shared config")
    out_dir = cfg.out
    cfg.write_echo(out_dir)
    test = _subset(ds.split("test"), b.max_samples)
    times = {n: [] for n in models}
    stages = {}
    for _ in range(b.repeats):
        for name, m in models.items():  # interleaved so drift hits every model alike
            timer = StageTimer()
            t0 = time.perf_counter()
            predict(m, test.images, test.camera_positions, b.batch_size, timer)
            times[name].append(time.perf_counter() - t0)
            stages.setdefault(name, []).append({s: timer.seconds.get(s, 0.0) / len(test) for s in STAGES})
    counts = {n: m.num_parameters() for n, m in models.items()}
    rows = []
    for name in models:
        med = statistics.median(times[name])
        st = {s: statistics.median(r[s] for r in stages[name]) for s in STAGES}
        rows.append({"model": name, "params": counts[name],
                     "compression": counts["teacher"] / counts[name],
                     "objects_per_s": len(test) / med, "median_s": med,
                     "runs_s": ";".join(f"{t:.4f}" for t in times[name]),
                     **{f"{s}_ms": 1e3 * v for s, v in st.items()}})
        stages[name] = st
    write_csv(out_dir / "bench.csv", rows)
    doc = {"batch_size": b.batch_size, "repeats": b.repeats, "samples": len(test), "models": rows,
           "environment": environment()}
    (out_dir / "bench.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    plotting.plot_bench(stages, out_dir / "bench_stages.png")
    for r in rows:
        print(f"{r['model']:8s} params {r['params']:>9d}  x{r['compression']:.2f}  "
              f"{r['objects_per_s']:.1f} obj/s")
    return doc
