"""Desk-scale experiment harness shared by the acceptance suite.

Models are trained on a seeded subset, cached as checkpoints under the data
cache root, and evaluated with reduced attack iteration counts. Every method
returns plain numbers so the acceptance tests only hold thresholds.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from capsdetect import attacks, datio, detect, evalkit, nets
from capsdetect.attacks import AttackSpec
from capsdetect.cli import substream, substream_seed

GRID_FPR = (0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.40, 0.50)


@dataclass(frozen=True)
class DeskScale:
    train_subset: int = 10000
    epochs: int = 10
    batch_size: int = 128
    preset: str = ""  # empty: the dataset's own preset
    val_fraction: float = 0.1
    n_clean: int = 2000
    n_attack: int = 100
    pgd_iters: int = 50
    pgd_step: float = 0.02
    betas: tuple = tuple(round(0.1 * i, 10) for i in range(11))
    per_pair: int = 10
    n_corrupt: int = 1000
    seed: int = 0

    def training_key(self, dataset: str, arch: str, seed: int) -> str:
        d = {"dataset": dataset, "arch": arch, "seed": seed, "subset": self.train_subset,
             "epochs": self.epochs, "batch": self.batch_size, "preset": self.preset,
             "val": self.val_fraction}
        return hashlib.sha1(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def require(name: str, cache_dir=None) -> tuple[datio.Dataset, datio.Dataset]:
    """Train and test splits, or a DataError/FetchError naming what is missing."""
    return datio.load(name, "train", cache_dir), datio.load(name, "test", cache_dir)


class Desk:
    """Trained models, detectors and attack results for one dataset."""

    def __init__(self, dataset: str, scale: DeskScale, train: datio.Dataset, test: datio.Dataset,
                 cache_dir=None):
        self.dataset = dataset
        self.scale = scale
        self.train_full = train
        self.test = test
        self.cache = datio.cache_root(cache_dir) / "desk" / dataset
        self._models: dict = {}
        self._sweeps: dict = {}

    # -- models ------------------------------------------------------------
    @cached_property
    def splits(self) -> tuple[datio.Dataset, datio.Dataset]:
        s = self.scale
        full = self.train_full
        if s.train_subset and s.train_subset < len(full):
            keep = np.sort(substream(s.seed, "subset").choice(len(full), s.train_subset, replace=False))
            full = full.subset(keep)
        return datio.split(full, s.val_fraction, substream_seed(s.seed, "split"))

    def model(self, arch: str, seed: int | None = None) -> nets.ModelBundle:
        seed = self.scale.seed if seed is None else seed
        if (arch, seed) in self._models:
            return self._models[(arch, seed)]
        s = self.scale
        path = self.cache / f"{arch}-{s.training_key(self.dataset, arch, seed)}.ckpt"
        if path.exists():
            m = nets.ModelBundle.load(path)
        else:
            train, val = self.splits
            name = s.preset or ("fashion" if self.dataset == "fashion" else "mnist")
            m = nets.ModelBundle.create(nets.preset(name, arch), seed=substream_seed(seed, "init"),
                                        meta={"dataset": self.dataset, "seed": seed})
            t0 = time.perf_counter()
            nets.train(m, train.images, train.labels, epochs=s.epochs, batch_size=s.batch_size,
                       rng=substream(seed, "train"))
            m.meta["train_seconds"] = time.perf_counter() - t0
            m.save(path)
        self._models[(arch, seed)] = m
        return m

    def train_seconds(self, arch: str) -> float:
        return float(self.model(arch).meta.get("train_seconds", float("nan")))

    def detector(self, arch: str) -> detect.Detector:
        _, val = self.splits
        return detect.calibrate_threshold(self.model(arch), val.images, 95.0, self.dataset)

    # -- clean evaluation ----------------------------------------------------
    def test_error(self, arch: str) -> float:
        return self.model(arch).error_rate(self.test.images, self.test.labels)

    def clean_flag_rate(self, arch: str) -> tuple[float, int]:
        n = min(self.scale.n_clean, len(self.test))
        idx = substream(self.scale.seed, "clean").choice(len(self.test), n, replace=False)
        det = self.detector(arch)
        return float(det.flags(detect.distance(self.model(arch), self.test.images[idx])).mean()), n

    # -- attacks -------------------------------------------------------------
    def attack_slice(self, arch: str, stream: str = "attack"):
        """Correctly classified test samples (seeded) and wrong-label targets."""
        m = self.model(arch)
        rng = substream(self.scale.seed, stream)
        pool = np.flatnonzero(m.predict(self.test.images) == self.test.labels)
        n = min(self.scale.n_attack, pool.size)
        idx = np.sort(rng.choice(pool, n, replace=False))
        targets = attacks.random_targets(self.test.labels[idx], self.test.n_classes, rng)
        return idx, targets

    def spec(self, family: str, targeted: bool, **over) -> AttackSpec:
        s = self.scale
        if family in ("bim", "pgd", "r_bim", "r_pgd"):
            over = {"iters": s.pgd_iters, "step": s.pgd_step} | over
        return AttackSpec.default(family, self.dataset, targeted, **over)

    def attack(self, arch: str, family: str, targeted: bool, victim: str | None = None,
               substitute_seed: int | None = None, **over) -> evalkit.EvalReport:
        """White-box (or, with ``substitute_seed``, black-box) attack report."""
        victim_model = self.model(victim or arch)
        idx, targets = self.attack_slice(victim or arch)
        spec = self.spec(family, targeted, **over)
        source = self.model(arch, substitute_seed) if substitute_seed is not None else victim_model
        adv = attacks.run_attack(source, self.test.images[idx], self.test.labels[idx], spec,
                                 targets if targeted else None,
                                 rng=substream(self.scale.seed, "attack-run"), indices=idx)
        return evalkit.evaluate_attack(victim_model, self.detector(victim or arch), adv)

    def sweep(self, arch: str, targeted: bool = True) -> tuple[attacks.BetaSweep, list[evalkit.EvalReport]]:
        """R-PGD for every beta; the worst case is the highest undetected rate."""
        key = (arch, targeted)
        if key not in self._sweeps:
            m, det = self.model(arch), self.detector(arch)
            idx, targets = self.attack_slice(arch)
            reports = []
            for b in self.scale.betas:
                spec = self.spec("r_pgd", targeted, beta=b)
                adv = attacks.reconstructive_attack(m, self.test.images[idx], self.test.labels[idx], spec,
                                                    targets if targeted else None,
                                                    rng=substream(self.scale.seed, "attack-run"),
                                                    indices=idx)
                reports.append(evalkit.evaluate_attack(m, det, adv))
            sweep = attacks.BetaSweep(list(self.scale.betas), [r.success for r in reports],
                                      [r.undetected for r in reports])
            self._sweeps[key] = (sweep, reports)
        return self._sweeps[key]

    def worst_case(self, arch: str, targeted: bool = True) -> evalkit.EvalReport:
        sweep, reports = self.sweep(arch, targeted)
        return reports[sweep.worst_index]

    def curve(self, arch: str) -> list[evalkit.CurvePoint]:
        """Undetected rate of worst-case targeted R-PGD versus clean FPR."""
        rep = self.worst_case(arch, True)
        idx, _ = self.attack_slice(arch)
        rest = np.setdiff1d(np.arange(len(self.test)), idx)
        n = min(self.scale.n_clean, rest.size)
        clean = np.sort(substream(self.scale.seed, "curve-clean").choice(rest, n, replace=False))
        clean_d = detect.distance(self.model(arch), self.test.images[clean])
        return evalkit.fpr_curve(clean_d, rep.records, True)

    def curve_at(self, arch: str, grid=GRID_FPR) -> list[float]:
        pts = self.curve(arch)
        return [evalkit.undetected_at_fpr(pts, f) for f in grid]

    # -- corruption / matrix --------------------------------------------------
    def corruption_subset(self) -> datio.Dataset:
        n = min(self.scale.n_corrupt, len(self.test))
        keep = np.sort(substream(self.scale.seed, "corrupt-subset").choice(len(self.test), n, replace=False))
        return self.test.subset(keep)

    def corruption(self, arch: str, kinds: dict[str, datio.CorruptionSpec]) -> dict[str, evalkit.CorruptionRow]:
        base = self.corruption_subset()
        sets = {name: datio.corrupt(base, spec, substream_seed(self.scale.seed, "corrupt-" + name))
                for name, spec in kinds.items()}
        sets["clean"] = base
        rows = evalkit.corruption_report(self.model(arch), self.detector(arch), sets)
        return {r.name: r for r in rows}

    def tune_noise(self, arch: str = "capsnet", target_error: float = 0.10,
                   sigmas=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8)) -> float:
        """Gaussian-noise sigma whose error rate on the corruption subset is closest to the target."""
        base = self.corruption_subset()
        m = self.model(arch)
        errs = []
        for sigma in sigmas:
            noisy = datio.corrupt(base, datio.CorruptionSpec("gaussian_noise", {"sigma": sigma}),
                                  substream_seed(self.scale.seed, "tune-noise"))
            errs.append(m.error_rate(noisy.images, noisy.labels))
        return float(sigmas[int(np.argmin([abs(e - target_error) for e in errs]))])

    def matrix(self, arch: str) -> evalkit.ClassPairMatrix:
        spec = self.spec("r_pgd", True)
        return evalkit.class_pair_matrix(self.model(arch), self.detector(arch), self.test, spec,
                                         self.scale.per_pair, substream(self.scale.seed, "matrix"))
