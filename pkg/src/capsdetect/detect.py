"""Reconstruction-distance detector.

An input is flagged when the l2 distance between it and the reconstruction
decoded from its predicted class exceeds a threshold calibrated on clean
validation data.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as G
from .nets import ModelBundle


@dataclass(frozen=True)
class Verdict:
    predicted: int
    distance: float
    flagged: bool


def predict_and_distance(model: ModelBundle, x: np.ndarray, batch_size: int = 32,
                         class_ids: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class and reconstruction distance for every row of ``x``.

    By default the reconstruction uses the predicted class; pass ``class_ids``
    to decode from other capsules instead.
    """
    x = np.asarray(x, dtype=np.float32)
    preds, dists = [], []
    with G.no_grad():
        for i in range(0, len(x), batch_size):
            xb = x[i : i + batch_size]
            logits, poses = model.forward(xb)
            pred = logits.data.argmax(axis=1)
            ids = pred if class_ids is None else np.asarray(class_ids)[i : i + batch_size]
            r = model.reconstruct(poses, ids).data
            diff = r.astype(np.float64) - xb.reshape(len(xb), -1)
            preds.append(pred)
            dists.append(np.sqrt((diff * diff).sum(axis=1)))
    if not preds:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    return np.concatenate(preds), np.concatenate(dists)


def distance(model: ModelBundle, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    return predict_and_distance(model, x, batch_size)[1]


def nearest_rank(values, percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * N)-th smallest value (1-based)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile of an empty sample")
    rank = max(1, math.ceil(percentile / 100.0 * v.size))
    return float(v[min(rank, v.size) - 1])


@dataclass
class Detector:
    theta: float
    percentile: float = 95.0
    n_calibration: int = 0
    dataset: str = ""
    model_checkpoint_hash: str = ""
    model: ModelBundle | None = field(default=None, repr=False, compare=False)

    def flags(self, distances) -> np.ndarray:
        return np.asarray(distances) > self.theta

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("model")
        return json.dumps(d, sort_keys=True, indent=2)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path, model: ModelBundle | None = None) -> "Detector":
        d = json.loads(Path(path).read_text())
        return cls(float(d["theta"]), float(d["percentile"]), int(d["n_calibration"]),
                   d.get("dataset", ""), d.get("model_checkpoint_hash", ""), model)


def calibrate_threshold(model: ModelBundle, validation_x: np.ndarray, percentile: float = 95.0,
                        dataset: str = "", min_samples: int = 100) -> Detector:
    if len(validation_x) == 0:
        raise ValueError("empty validation set")
    if len(validation_x) < min_samples:
        raise ValueError(f"need at least {min_samples} validation samples, got {len(validation_x)}")
    if not 0 < percentile < 100:
        raise ValueError("percentile must be in (0, 100)")
    d = distance(model, validation_x)
    return Detector(nearest_rank(d, percentile), percentile, len(d), dataset, model.checksum(), model)


def judge(detector: Detector, x: np.ndarray) -> Verdict:
    return judge_batch(detector, np.asarray(x)[None])[0]


def judge_batch(detector: Detector, xs: np.ndarray, batch_size: int = 32) -> list[Verdict]:
    if detector.model is None:
        raise ValueError("detector has no model attached")
    preds, dists = predict_and_distance(detector.model, xs, batch_size)
    return [Verdict(int(p), float(d), bool(d > detector.theta)) for p, d in zip(preds, dists)]
