"""Attack metrics, detection curves, class-pair matrices and corruption tables.

Rates follow the usual definitions: an attack succeeds when f(x') = t
(targeted) or f(x') != y (untargeted); it is undetected when it succeeds and
its reconstruction distance is at most the detection threshold.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datio import Dataset
from .detect import Detector, nearest_rank, predict_and_distance
from .nets import ModelBundle

CSV_HEADER = ("index", "y", "t", "pred", "distance", "flagged", "success")


@dataclass(frozen=True)
class Record:
    index: int
    y: int
    t: int | None
    pred: int
    distance: float
    flagged: bool

    def success(self, targeted: bool) -> bool:
        if targeted:
            if self.t is None:
                raise ValueError("targeted record without a target")
            return self.pred == self.t
        return self.pred != self.y


def _check(records) -> list[Record]:
    records = list(records)
    if not records:
        raise ValueError("no records")
    return records


def success_rate(records: Iterable[Record], targeted: bool) -> float:
    records = _check(records)
    return sum(r.success(targeted) for r in records) / len(records)


def undetected_rate(records: Iterable[Record], targeted: bool, theta: float) -> float:
    records = _check(records)
    return sum(r.success(targeted) and r.distance <= theta for r in records) / len(records)


def true_positive_rate(records: Iterable[Record], targeted: bool, theta: float) -> float:
    """Fraction of successful adversarial inputs that the detector flags."""
    hits = [r for r in _check(records) if r.success(targeted)]
    if not hits:
        return math.nan
    return sum(r.distance > theta for r in hits) / len(hits)


@dataclass
class EvalReport:
    n: int
    targeted: bool
    theta: float
    success: float
    undetected: float
    tpr: float
    records: list[Record] = field(repr=False)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Sequence[Record], targeted: bool, theta: float, meta=None) -> "EvalReport":
        records = list(records)
        if not records:
            return cls(0, targeted, theta, math.nan, math.nan, math.nan, [], dict(meta or {}))
        return cls(len(records), targeted, theta, success_rate(records, targeted),
                   undetected_rate(records, targeted, theta),
                   true_positive_rate(records, targeted, theta), records, dict(meta or {}))

    def summary(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {"n": self.n, "targeted": self.targeted, "theta": self.theta,
                "S": clean(self.success), "R": clean(self.undetected), "TPR": clean(self.tpr),
                **self.meta}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow([r.index, r.y, "" if r.t is None else r.t, r.pred, repr(float(r.distance)),
                        int(r.flagged), int(r.success(self.targeted))])
        return buf.getvalue()

    def write(self, directory, stem: str = "report", inputs: np.ndarray | None = None) -> tuple[Path, Path]:
        """Write ``<stem>.csv`` and ``<stem>.json``; the summary carries a
        git-style blob hash of the evaluated inputs (or of the CSV if none)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        text = self.to_csv()
        payload = text.encode() if inputs is None else np.ascontiguousarray(inputs, dtype="<f4").tobytes()
        summary = self.summary() | {"inputs_hash": git_blob_hash(payload)}
        csv_path, json_path = directory / f"{stem}.csv", directory / f"{stem}.json"
        csv_path.write_text(text)
        json_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        return csv_path, json_path


def read_records_csv(path) -> list[Record]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [Record(int(r["index"]), int(r["y"]), None if r["t"] == "" else int(r["t"]), int(r["pred"]),
                   float(r["distance"]), bool(int(r["flagged"]))) for r in rows]


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def make_records(preds, distances, y, t, theta: float, indices=None) -> list[Record]:
    n = len(preds)
    indices = range(n) if indices is None else indices
    return [Record(int(i), int(y[k]), None if t is None else int(t[k]), int(preds[k]),
                   float(distances[k]), bool(distances[k] > theta))
            for k, i in enumerate(indices)]


def evaluate_attack(model: ModelBundle, detector: Detector, adv, meta: dict | None = None) -> EvalReport:
    """Score an adversarial batch (``attacks.AdvBatch``) against a model and detector."""
    preds, dists = predict_and_distance(model, adv.x_adv) if len(adv) else (np.zeros(0), np.zeros(0))
    records = make_records(preds, dists, adv.y, adv.target, detector.theta, adv.indices)
    m = {"attack": adv.spec.to_dict()} | (meta or {})
    return EvalReport.from_records(records, adv.spec.targeted, detector.theta, m)


# ---------------------------------------------------------------------- curves
@dataclass(frozen=True)
class CurvePoint:
    theta: float
    fpr: float
    undetected: float


def default_thresholds(clean_distances, lo: int = 50, hi: int = 100) -> list[float]:
    return [nearest_rank(clean_distances, p) for p in range(lo, hi + 1)]


def fpr_curve(clean_distances, attack_records: Sequence[Record], targeted: bool,
              thresholds: Sequence[float] | None = None) -> list[CurvePoint]:
    clean = np.asarray(clean_distances, dtype=np.float64)
    if thresholds is None:
        thresholds = default_thresholds(clean)
    th = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(th) < 0):
        raise ValueError("thresholds must be sorted")
    records = list(attack_records)
    succ = np.array([r.success(targeted) for r in records], dtype=bool)
    dist = np.array([r.distance for r in records], dtype=np.float64)
    out = []
    for theta in th:
        fpr = float((clean > theta).mean()) if clean.size else math.nan
        und = float((succ & (dist <= theta)).mean()) if records else math.nan
        out.append(CurvePoint(float(theta), fpr, und))
    return out


def curve_to_csv(points: Sequence[CurvePoint]) -> str:
    lines = ["theta,fpr,undetected"] + [f"{p.theta!r},{p.fpr!r},{p.undetected!r}" for p in points]
    return "\n".join(lines) + "\n"


def load_curve_csv(path) -> list[CurvePoint]:
    """Read a curve file and check its monotonicity."""
    with open(path, newline="") as f:
        pts = [CurvePoint(float(r["theta"]), float(r["fpr"]), float(r["undetected"])) for r in csv.DictReader(f)]
    for a, b in zip(pts, pts[1:]):
        if b.theta < a.theta or b.fpr > a.fpr or b.undetected < a.undetected:
            raise ValueError("curve is not monotone")
    return pts


def undetected_at_fpr(points: Sequence[CurvePoint], fpr: float) -> float:
    """Undetected rate at the smallest threshold whose FPR does not exceed ``fpr``."""
    ok = [p for p in points if p.fpr <= fpr]
    if not ok:
        return math.nan
    return min(ok, key=lambda p: p.theta).undetected


# ----------------------------------------------------------------- pair matrix
@dataclass
class ClassPairMatrix:
    success: np.ndarray  # [K,K], NaN on the diagonal
    undetected: np.ndarray
    counts: np.ndarray

    @property
    def k(self) -> int:
        return len(self.success)

    def off_diagonal(self) -> np.ndarray:
        return self.success[~np.eye(self.k, dtype=bool)]

    def variance(self) -> float:
        return float(np.var(self.off_diagonal()))

    def to_csv(self) -> str:
        lines = ["source,target,success,undetected,n"]
        for s in range(self.k):
            for t in range(self.k):
                if s != t:
                    lines.append(f"{s},{t},{float(self.success[s, t])!r},{float(self.undetected[s, t])!r},{int(self.counts[s, t])}")
        return "\n".join(lines) + "\n"


def class_pair_matrix(model: ModelBundle, detector: Detector, dataset: Dataset, spec,
                      per_pair: int = 100, rng: np.random.Generator | None = None,
                      batch_size: int = 128) -> ClassPairMatrix:
    """Targeted attacks from class-s samples toward every t != s."""
    from . import attacks

    if not spec.targeted:
        raise ValueError("class_pair_matrix needs a targeted spec")
    rng = rng or np.random.default_rng(0)
    k = dataset.n_classes
    succ = np.full((k, k), np.nan)
    und = np.full((k, k), np.nan)
    counts = np.zeros((k, k), dtype=np.int64)
    for s in range(k):
        pool = np.flatnonzero(dataset.labels == s)
        if pool.size == 0:
            raise ValueError(f"class {s} has no samples")
        idx = rng.choice(pool, size=min(per_pair, pool.size), replace=False)
        others = [t for t in range(k) if t != s]
        x = np.concatenate([dataset.images[idx]] * len(others))
        y = np.full(len(x), s, dtype=np.int64)
        tgt = np.repeat(np.asarray(others, dtype=np.int64), len(idx))
        adv = attacks.run_attack(model, x, y, spec, tgt, rng=rng, indices=np.tile(idx, len(others)),
                                 batch_size=batch_size)
        rep = evaluate_attack(model, detector, adv)
        for j, t in enumerate(others):
            part = rep.records[j * len(idx) : (j + 1) * len(idx)]
            succ[s, t] = success_rate(part, True)
            und[s, t] = undetected_rate(part, True, detector.theta)
            counts[s, t] = len(part)
    return ClassPairMatrix(succ, und, counts)


# ------------------------------------------------------------------ corruption
@dataclass(frozen=True)
class CorruptionRow:
    name: str
    n: int
    error_rate: float
    undetected_rate: float


def corruption_report(model: ModelBundle, detector: Detector, corrupted_sets: dict[str, Dataset]) -> list[CorruptionRow]:
    """Error rate and misclassified-and-unflagged rate per corrupted set."""
    rows = []
    for name, ds in corrupted_sets.items():
        preds, dists = predict_and_distance(model, ds.images)
        wrong = preds != ds.labels
        rows.append(CorruptionRow(name, len(ds), float(wrong.mean()),
                                  float((wrong & (dists <= detector.theta)).mean())))
    return rows


def corruption_csv(rows: Sequence[CorruptionRow]) -> str:
    lines = ["corruption,n,error_rate,undetected_rate"]
    lines += [f"{r.name},{r.n},{r.error_rate!r},{r.undetected_rate!r}" for r in rows]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------- samples
def dump_samples(path, images: np.ndarray, records: Sequence[Record], targeted: bool, rows: int, cols: int,
                 seed: int = 0, theta: float | None = None) -> Path:
    """Write a binary PGM grid of randomly chosen successful (and, given
    ``theta``, undetected) adversarial images. Each grid row is labelled in
    a header comment. Cells without a sample stay black."""
    if rows < 0 or cols < 0:
        raise ValueError("grid size must be non-negative")
    images = np.asarray(images)
    if images.ndim == 4:
        images = images.mean(axis=1)
    h, w = images.shape[1:] if len(images) else (0, 0)
    pool = [k for k, r in enumerate(records)
            if r.success(targeted) and (theta is None or r.distance <= theta)]
    want = rows * cols
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(pool), size=min(want, len(pool)), replace=False).tolist()) if pool and want else []
    picks = [pool[c] for c in chosen]
    grid = np.zeros((rows * h, cols * w), dtype=np.uint8)
    comments = []
    for row in range(rows):
        labels = []
        for col in range(cols):
            i = row * cols + col
            if i >= len(picks):
                break
            k = picks[i]
            grid[row * h : (row + 1) * h, col * w : (col + 1) * w] = np.round(
                np.clip(images[k], 0, 1) * 255).astype(np.uint8)
            r = records[k]
            labels.append(f"{r.index}:{r.y}->{r.pred}")
        comments.append(f"# row {row}: " + " ".join(labels))
    header = "P5\n" + "".join(c + "\n" for c in comments) + f"{cols * w} {rows * h}\n255\n"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header.encode() + grid.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    """Minimal binary PGM reader (comments allowed between header fields)."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def report_dict(rows) -> list[dict]:
    return [asdict(r) for r in rows]
