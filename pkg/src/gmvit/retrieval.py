"""Classification metrics, descriptor ranking and retrieval metrics."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

BACKENDS = ("exhaustive", "kd-tree")
DISTANCES = ("euclidean", "cosine")


# ------------------------------------------------------------ classification
@dataclass
class ClassificationReport:
    oa: float
    ma: float
    per_class: list[float]  # nan for classes absent from the labels
    counts: list[int]


def classification_metrics(logits: np.ndarray, labels, num_classes: int | None = None) -> ClassificationReport:
    """OA and mean per-class accuracy; argmax ties go to the lowest class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or len(logits) == 0:
        raise ValueError("classification_metrics needs a non-empty (Q, C) logit array")
    if labels.shape != (len(logits),):
        raise ValueError("one label per logit row required")
    C = num_classes or logits.shape[1]
    pred = logits.argmax(axis=1)
    correct = pred == labels
    per_class, counts = [], []
    for c in range(C):
        sel = labels == c
        counts.append(int(sel.sum()))
        per_class.append(float(correct[sel].mean()) if sel.any() else float("nan"))
    present = [a for a in per_class if not math.isnan(a)]
    if len(present) < C:
        warnings.warn(f"{C - len(present)} classes have no samples and are left out of mA", stacklevel=2)
    return ClassificationReport(float(correct.mean()), float(np.mean(present)), per_class, counts)


# -------------------------------------------------------------------- index
@dataclass
class DescriptorIndex:
    descriptors: np.ndarray  # (Q, d)
    labels: np.ndarray  # (Q,)
    ids: list[str]
    backend: str = "exhaustive"
    distance: str = "euclidean"
    _points: np.ndarray = field(init=False, repr=False)
    _id_rank: np.ndarray = field(init=False, repr=False)
    _tree: cKDTree | None = field(init=False, repr=False, default=None)
    _row: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = [str(i) for i in self.ids]
        Q = len(self.descriptors)
        if self.descriptors.ndim != 2 or len(self.labels) != Q or len(self.ids) != Q:
            raise ValueError("descriptors, labels and ids must be aligned")
        if len(set(self.ids)) != Q:
            raise ValueError("ids must be unique")
        if not np.isfinite(self.descriptors).all():
            raise ValueError("descriptors must be finite")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")
        pts = self.descriptors
        if self.distance == "cosine":
            # ranking by Euclidean distance between unit vectors is ranking by cosine
            norm = np.linalg.norm(pts, axis=1, keepdims=True)
            pts = np.divide(pts, norm, out=np.zeros_like(pts), where=norm > 0)
        self._points = pts
        self._id_rank = np.empty(Q, dtype=np.int64)
        self._id_rank[np.argsort(np.array(self.ids), kind="stable")] = np.arange(Q)
        self._row = {i: k for k, i in enumerate(self.ids)}
        if self.backend == "kd-tree":
            self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.ids)

    def with_backend(self, backend: str) -> DescriptorIndex:
        return DescriptorIndex(self.descriptors, self.labels, self.ids, backend, self.distance)

    def row(self, query_id: str) -> int:
        try:
            return self._row[str(query_id)]
        except KeyError:
            raise KeyError(f"unknown query id {query_id!r}") from None

    def distances(self, q: int, rows: np.ndarray) -> np.ndarray:
        diff = self._points[rows] - self._points[q]
        return np.sqrt((diff * diff).sum(axis=1))

    def _order(self, q: int, rows: np.ndarray, cap: int) -> np.ndarray:
        rows = rows[rows != q]
        d = self.distances(q, rows)
        order = np.lexsort((self._id_rank[rows], d))
        return rows[order[:cap]]


def rank(query_id: str, index: DescriptorIndex, cap: int = 1000) -> np.ndarray:
    """Row indices of the other entries by ascending distance, ties by id, at most ``cap``."""
    q = index.row(query_id)
    if cap < 1:
        raise ValueError("cap must be >= 1")
    Q = len(index)
    if index.backend == "exhaustive" or cap + 1 >= Q:
        return index._order(q, np.arange(Q), cap)
    dist, _ = index._tree.query(index._points[q], k=cap + 1)
    radius = float(dist[-1])
    # pick up every entry tied with the boundary distance, then rank exactly
    cand = index._tree.query_ball_point(index._points[q], radius * (1 + 1e-9) + 1e-12)
    return index._order(q, np.asarray(sorted(cand), dtype=np.int64), cap)


def rank_ids(query_id: str, index: DescriptorIndex, cap: int = 1000) -> list[str]:
    return [index.ids[r] for r in rank(query_id, index, cap)]


# ------------------------------------------------------------------ metrics
def average_precision(relevant) -> float:
    """Mean of precision@k over the relevant positions of a ranked list."""
    rel = np.asarray(relevant, dtype=bool)
    R = int(rel.sum())
    if R == 0:
        warnings.warn("no relevant item in the ranked list; AP set to 0", stacklevel=2)
        return 0.0
    hits = np.cumsum(rel)
    k = np.arange(1, len(rel) + 1)
    return float((hits[rel] / k[rel]).sum() / R)


def pr_f1_ndcg(relevant, n: int, total_relevant: int) -> tuple[float, float, float, float]:
    """Precision, recall, F1 and binary-gain NDCG at cutoff ``n``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rel = np.asarray(relevant, dtype=bool)[:n]
    hits = int(rel.sum())
    p = hits / n
    r = hits / total_relevant if total_relevant > 0 else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    disc = 1.0 / np.log2(np.arange(2, n + 2))
    dcg = float((rel * disc[: len(rel)]).sum())
    idcg = float(disc[: min(n, total_relevant)].sum())
    ndcg = dcg / idcg if idcg > 0 else 0.0
    return p, r, f1, ndcg


def micro_macro(values, labels) -> tuple[float, float]:
    """Micro: mean over queries. Macro: mean over classes of the per-class means."""
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    micro = float(values.mean())
    macro = float(np.mean([values[labels == c].mean() for c in np.unique(labels)]))
    return micro, macro


@dataclass
class RetrievalReport:
    cap: int
    map_micro: float
    map_macro: float
    p_micro: float
    p_macro: float
    r_micro: float
    r_macro: float
    f1_micro: float
    f1_macro: float
    ndcg_micro: float
    ndcg_macro: float
    per_query: dict[str, list[float]] = field(default_factory=dict, repr=False)


def evaluate_retrieval(index: DescriptorIndex, cap: int = 1000, at_n: str = "class") -> RetrievalReport:
    """Each entry queries the rest of the index.

    ``at_n="class"`` uses N = (gallery count of the query's class) capped at
    ``cap``; an integer string fixes N for every query.
    """
    labels = index.labels
    class_size = {c: int((labels == c).sum()) for c in np.unique(labels)}
    per = {k: [] for k in ("ap", "p", "r", "f1", "ndcg")}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for qid, lab in zip(index.ids, labels):
            ranked = rank(qid, index, cap)
            rel = labels[ranked] == lab
            total = class_size[lab] - 1
            n = min(total, cap) if at_n == "class" else int(at_n)
            per["ap"].append(average_precision(rel))
            if n >= 1:
                vals = pr_f1_ndcg(rel, n, total)
            else:
                vals = (0.0, 0.0, 0.0, 0.0)
            for k, v in zip(("p", "r", "f1", "ndcg"), vals):
                per[k].append(v)
    agg = {k: micro_macro(v, labels) for k, v in per.items()}
    return RetrievalReport(cap, *agg["ap"], *agg["p"], *agg["r"], *agg["f1"], *agg["ndcg"], per_query=per)


# --------------------------------------------------------------- similarity
def similarity_matrix(index: DescriptorIndex) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise cosine similarity; zero-norm rows get similarity 0 and are flagged."""
    X = index.descriptors
    if len(X) == 0:
        raise ValueError("empty index")
    norm = np.linalg.norm(X, axis=1)
    zero = norm == 0
    U = np.divide(X, norm[:, None], out=np.zeros_like(X), where=~zero[:, None])
    S = U @ U.T
    S = 0.5 * (S + S.T)
    np.fill_diagonal(S, np.where(zero, 0.0, 1.0))
    return S, zero


def write_similarity_csv(path: str | Path, S: np.ndarray, ids: list[str]) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + list(ids))
        for i, row in zip(ids, S):
            w.writerow([i] + [repr(float(v)) for v in row])
    return path


# ------------------------------------------------------------------ reports
@dataclass
class MetricsReport:
    classification: ClassificationReport | None
    retrieval: RetrievalReport | None
    extra: dict = field(default_factory=dict)

    def flat(self) -> dict[str, float]:
        c, r = self.classification, self.retrieval
        out = {}
        if c is not None:
            out.update(oa=c.oa, ma=c.ma)
            for i, a in enumerate(c.per_class):
                out[f"acc_class_{i}"] = a
        if r is not None:
            out.update({k: v for k, v in asdict(r).items() if k != "per_query"})
        out.update(self.extra)
        return out


def write_metrics(report: MetricsReport, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    flat = report.flat()
    c, r = report.classification, report.retrieval
    doc = {"classification": None if c is None else asdict(c),
           "retrieval": None if r is None else {k: v for k, v in asdict(r).items() if k != "per_query"},
           "extra": report.extra}
    jpath = out_dir / "metrics.json"
    jpath.write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")
    cpath = out_dir / "metrics.csv"
    with cpath.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in flat.items():
            w.writerow([k, repr(v) if isinstance(v, float) else v])
    return jpath, cpath


def extract_descriptors(model, split, batch_size: int = 8, backend: str = "exhaustive",
                        distance: str = "euclidean") -> DescriptorIndex:
    """Penultimate classifier features for every sample of ``split``, in split order."""
    from .training import predict

    if model.training:
        raise ValueError("extract_descriptors needs the model in eval mode")
    pred = predict(model, split.images, split.camera_positions, batch_size)
    return DescriptorIndex(pred.retrieval, split.labels, split.ids, backend, distance)
