"""The eleven acceptance criteria, each at its stated tolerance.

Criteria 5-8, 10 and 11 share one set of desk-scale runs on the default
dataset (8 classes, dodeca20, D=64, 30 epochs, float32):

    teacher          hard-label training, seeds 0-4
    mini hard        hard-label training of the mini student, seeds 0-4
    mini hard-distill  distill command with every target off (labels only)
    mini kd T=5      all six targets, teacher of the same seed
    mini kd T=1      same at temperature 1

OA below is the final-epoch test OA. A summary line per criterion is printed
at the end of the session.
"""

import time

import numpy as np
import pytest

from conftest import record_criterion
from oracles import brute_metrics, brute_rank
from gmvit.autodiff import no_grad
from gmvit.cli import RunConfig
from gmvit.cli.commands import cmd_bench, cmd_distill, cmd_train, model_config, open_dataset
from gmvit.distillation import DistillConfig, loss_total, teacher_taps
from gmvit.gradsuite import run_suite
from gmvit.model import assign_groups, build_model, centroids_of, param_count, preset, save_checkpoint
from gmvit.retrieval import DescriptorIndex, evaluate_retrieval, rank

SEEDS = range(5)


# --------------------------------------------------------------- 1 gradients
def test_c01_gradient_suite():
    t0 = time.perf_counter()
    results, _ = run_suite(("teacher", "simple", "mini"), max_coords=6, tol=1e-3)
    secs = time.perf_counter() - t0
    worst = max(r.max_rel_err for r in results)
    ok = all(r.passed for r in results) and worst < 1e-3 and secs < 60
    record_criterion(1, ok, f"{len(results)} op/model checks, max rel err {worst:.2e} (< 1e-3), {secs:.1f} s (< 60 s)")
    assert ok


# ---------------------------------------------------------------- 2 grouping
def _scan(t, M):
    t = np.clip(t, 1e-7, 1 - 1e-7)
    out = np.zeros(t.shape, dtype=int)
    for idx, ti in np.ndenumerate(t):
        for m in range(1, M + 1):
            if (m - 1) / M <= ti < m / M:
                out[idx] = m
                break
    return out


def _centroid_loop(a, pos, M):
    B, N = a.shape
    out = np.zeros((B, M, 3))
    for b in range(B):
        for m in range(1, M + 1):
            members = [pos[b, i] for i in range(N) if a[b, i] == m]
            if members:
                s = np.zeros(3)
                for p in members:
                    s = s + p
                out[b, m - 1] = s / len(members)
    return out


def test_c02_grouping_oracle():
    mismatches, worst = 0, 0.0
    for M in (2, 8, 12):
        rng = np.random.default_rng(100 + M)
        t = rng.random((500, 20))  # 10^4 tokens
        t.flat[:M + 1] = np.arange(M + 1) / M
        a = assign_groups(t, M)
        mismatches += int((a != _scan(t, M)).sum())
        pos = rng.normal(size=(500, 20, 3))
        cent, valid = centroids_of(a, pos, M)
        ref = _centroid_loop(a, pos, M)
        worst = max(worst, float(np.abs(cent - ref).max()))
    ok = mismatches == 0 and worst <= 1e-9
    record_criterion(2, ok, f"assignment mismatches {mismatches} / 30000, centroid max err {worst:.1e} (<= 1e-9)")
    assert ok


# ------------------------------------------------------- 3 permutation invariance
def _rel(a, b):
    return float((np.linalg.norm(a - b, axis=-1) / np.linalg.norm(a, axis=-1)).max())


def test_c03_permutation_invariance(default_dataset):
    cfg = RunConfig().set("dataset", "path", str(default_dataset))
    ds = open_dataset(cfg)
    test = ds.split("test")
    rng = np.random.default_rng(3)
    idx = rng.choice(len(test), 50, replace=False)
    x, pos = test.images[idx], test.camera_positions
    worst = {}
    for v in ("teacher", "simple", "mini"):
        m = build_model(model_config(cfg, ds, v), 0)
        m.eval()
        with no_grad():
            ref = m(x, pos)
            errs = []
            for _ in range(10):
                perms = np.stack([rng.permutation(ds.N) for _ in range(50)])
                xp = np.take_along_axis(x, perms[:, :, None, None], axis=1)
                out = m(xp, pos[perms])
                errs += [_rel(ref.logits.data, out.logits.data), _rel(ref.f_global.data, out.f_global.data)]
        worst[v] = max(errs)
    ok = max(worst.values()) < 1e-5
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record_criterion(3, ok, f"max relative change of logits / F_D over 50 x 10 permutations: {detail} (< 1e-5)")
    assert ok


# ------------------------------------------------------------- 4 fixpoint
def test_c04_distillation_fixpoint(default_dataset):
    cfg = RunConfig().set("dataset", "path", str(default_dataset))
    ds = open_dataset(cfg)
    train = ds.split("train")
    teacher = build_model(model_config(cfg, ds, "teacher"), 0)
    clone = build_model(model_config(cfg, ds, "teacher"), 0)
    clone.load_state_dict(teacher.state_dict())
    x, y = train.images[:8], train.labels[:8]
    taps = teacher_taps(teacher, x, train.camera_positions)
    clone.eval()
    with no_grad():
        out = clone(x, train.camera_positions)
    _, rep = loss_total(taps, out, DistillConfig(), y)
    terms = {k: rep[k] for k in ("cnn", "view", "token", "group", "global", "soft")}
    worst = max(abs(v) for v in terms.values())
    ok = worst <= 1e-10
    record_criterion(4, ok, f"cloned teacher: max feature/soft loss {worst:.1e} (<= 1e-10)")
    assert ok


# ------------------------------------------------------------ desk-scale runs
class DeskRuns:
    """Lazily executed, cached desk-scale runs shared by criteria 5-8, 10, 11."""

    def __init__(self, data, root):
        self.data, self.root, self.cache = data, root, {}

    def config(self, out, seed, **fields):
        cfg = RunConfig().set("dataset", "path", str(self.data)).set("run", "seed", seed)
        cfg = cfg.set("run", "out", str(self.root / out))
        for key, value in fields.items():
            section, name = key.split(".")
            cfg = cfg.set(section, name, str(value))
        return cfg

    def teacher(self, seed):
        key = ("teacher", seed)
        if key not in self.cache:
            self.cache[key] = cmd_train(self.config(f"teacher{seed}", seed))
        return self.cache[key]

    def mini_hard(self, seed):
        key = ("mini_hard", seed)
        if key not in self.cache:
            self.cache[key] = cmd_train(self.config(f"mini_hard{seed}", seed, **{"model.variant": "mini"}))
        return self.cache[key]

    def mini_distill(self, seed, targets="cnn,view,token,group,global,logit", T=5.0):
        key = ("mini_distill", seed, targets, T)
        if key not in self.cache:
            teacher = self.teacher(seed).last_checkpoint
            name = f"mini_kd_{targets.replace(',', '-')}_T{T:g}_{seed}"
            cfg = self.config(name, seed, **{"model.variant": "mini", "distill.teacher": teacher,
                                             "distill.targets": targets, "distill.temperature": T})
            self.cache[key] = cmd_distill(cfg)
        return self.cache[key]


@pytest.fixture(scope="session")
def desk(default_dataset, tmp_path_factory):
    return DeskRuns(default_dataset, tmp_path_factory.mktemp("desk"))


def final_oa(rec):
    return rec.rows[-1]["test_oa"]


def test_c05_teacher_quality(desk):
    oas, mins = [], []
    for s in SEEDS:
        rec = desk.teacher(s)
        oas.append(final_oa(rec))
        wall = float((rec.out_dir / "timing.csv").read_text().strip().splitlines()[-1].split(",")[1])
        mins.append(wall / 60)
    hits = sum(o >= 0.90 for o in oas)
    ok = hits >= 4 and max(mins) < 10
    record_criterion(5, ok, f"teacher test OA per seed {[round(o, 4) for o in oas]}: {hits}/5 >= 0.90 (need 4); "
                            f"slowest run {max(mins):.1f} CPU-min (< 10)")
    assert ok


def test_c06_kd_direction(desk):
    hard = [final_oa(desk.mini_hard(s)) for s in SEEDS]
    kd = [final_oa(desk.mini_distill(s)) for s in SEEDS]
    deltas = [round(k - h, 4) for k, h in zip(kd, hard)]
    margin = np.mean(kd) - np.mean(hard)
    ok = margin >= 0
    record_criterion(6, ok, f"mini all-six KD {np.mean(kd):.4f} vs hard-label {np.mean(hard):.4f}, "
                            f"margin {margin:+.4f} (>= 0); per-seed deltas {deltas}")
    assert ok


def test_c07_temperature(desk):
    t5 = [final_oa(desk.mini_distill(s, T=5.0)) for s in SEEDS]
    t1 = [final_oa(desk.mini_distill(s, T=1.0)) for s in SEEDS]
    ok = np.mean(t5) >= np.mean(t1)
    record_criterion(7, ok, f"distilled mini OA at T=5 {np.mean(t5):.4f} vs T=1 {np.mean(t1):.4f}; "
                            f"per-seed T5-T1 {[round(a - b, 4) for a, b in zip(t5, t1)]}")
    assert ok


def test_c08_ablation_monotonicity(desk):
    six = [final_oa(desk.mini_distill(s)) for s in SEEDS]
    base = [desk.mini_distill(s, targets="none") for s in SEEDS]
    hard = [final_oa(r) for r in base]
    # labels-only distillation is the supervised run, byte for byte
    same = all((r.out_dir / "train_log.csv").read_bytes() == (desk.mini_hard(s).out_dir / "train_log.csv").read_bytes()
               for s, r in zip(SEEDS, base))
    ok = np.mean(six) >= np.mean(hard)
    record_criterion(8, ok, f"all six targets {np.mean(six):.4f} vs hard-label-only distillation {np.mean(hard):.4f} "
                            f"(identical to supervised run: {same}); per-seed {[round(a - b, 4) for a, b in zip(six, hard)]}")
    assert ok and same


# ---------------------------------------------------------------- 9 retrieval
def test_c09_retrieval_oracle():
    rng = np.random.default_rng(9)
    X = np.round(rng.normal(size=(60, 3)) * 2) / 2  # coarse grid: exact ties on purpose
    labels = rng.integers(0, 5, 60)
    ids = [f"obj{k:02d}" for k in rng.permutation(60)]
    index = DescriptorIndex(X, labels, ids)
    worst = 0.0
    for cap in (10, 1000):
        rep = evaluate_retrieval(index, cap=cap)
        ref = brute_metrics(X.tolist(), labels.tolist(), ids, cap)
        got = {"ap_micro": rep.map_micro, "ap_macro": rep.map_macro}
        for k in ("p", "r", "f1", "ndcg"):
            got[k + "_micro"], got[k + "_macro"] = getattr(rep, k + "_micro"), getattr(rep, k + "_macro")
        worst = max(worst, max(abs(got[k] - v) for k, v in ref.items()))
    kd = index.with_backend("kd-tree")
    same = all(list(rank(q, kd, cap)) == list(rank(q, index, cap)) == brute_rank(X, ids, i, cap)[:cap]
               for cap in (5, 59) for i, q in enumerate(ids))
    ok = worst <= 1e-10 and same
    record_criterion(9, ok, f"metrics vs brute force max diff {worst:.1e} (<= 1e-10); kd-tree == exhaustive on all "
                            f"60 queries: {same}")
    assert ok


# ------------------------------------------------------------ 10 compression
def test_c10_compression(desk, tmp_path):
    counts = {v: param_count(preset(v, D=64)) for v in ("teacher", "simple", "mini")}
    size_ok = counts["mini"] < counts["simple"] < counts["teacher"]
    ds = open_dataset(desk.config("x", 0))
    simple = save_checkpoint(build_model(model_config(desk.config("x", 0), ds, "simple"), 0), tmp_path / "simple")
    cfg = desk.config("bench", 0, **{"bench.teacher": desk.teacher(0).last_checkpoint, "bench.simple": simple,
                                     "bench.mini": desk.mini_distill(0).last_checkpoint})
    doc = cmd_bench(cfg)
    tput = {r["model"]: r["objects_per_s"] for r in doc["models"]}
    noise = 0.10
    speed_ok = tput["mini"] >= (1 - noise) * tput["simple"] and tput["simple"] >= (1 - noise) * tput["teacher"]
    ok = size_ok and speed_ok
    record_criterion(10, ok, f"params {counts}; objects/s (median of 3, batch 8) "
                             + ", ".join(f"{k} {v:.0f}" for k, v in tput.items()) + " (10% noise band)")
    assert ok


# ------------------------------------------------------------ 11 determinism
def test_c11_determinism(desk):
    first = desk.mini_hard(0)
    again = cmd_train(desk.config("mini_hard0_again", 0, **{"model.variant": "mini"}))
    log_same = (first.out_dir / "train_log.csv").read_bytes() == (again.out_dir / "train_log.csv").read_bytes()
    ck_same = all((first.last_checkpoint / f.name).read_bytes() == f.read_bytes()
                  for f in again.last_checkpoint.glob("*.gmvt"))
    ok = log_same and ck_same
    record_criterion(11, ok, f"repeat of mini seed 0: train_log.csv byte-identical {log_same}, "
                             f"checkpoint tensors identical {ck_same}")
    assert ok
