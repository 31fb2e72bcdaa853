"""White-box attacks (FGSM, BIM, PGD, CW-l2), the two-stage reconstructive
attacks that also push the reconstruction distance down, and black-box
transfer from a substitute model.

Every function takes a batch ``x`` [N,C,H,W] in [0,1] with one label per
row: the true label for untargeted attacks, the target for targeted ones.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as G
from . import tensorio
from .ndgrad import Tensor
from .detect import Detector
from .evalkit import EvalReport, evaluate_attack
from .nets import ModelBundle

log = logging.getLogger(__name__)

FAMILIES = ("fgsm", "bim", "pgd", "cw", "r_fgsm", "r_bim", "r_pgd")
RECONSTRUCTIVE = ("r_fgsm", "r_bim", "r_pgd")

# l_inf budgets and iteration counts per dataset
EPSILON = {"mnist": 0.3, "fashion": 0.1, "svhn": 0.1, "digits": 0.3}
ITERATIONS = {"mnist": 1000, "fashion": 500, "svhn": 200, "digits": 1000}


@dataclass(frozen=True)
class CWParams:
    confidence: float = 0.0
    lr: float = 1e-2
    binary_search_steps: int = 9
    iters: int = 1000
    initial_const: float = 1e-3
    abort_early: bool = True


@dataclass(frozen=True)
class AttackSpec:
    family: str
    targeted: bool = False
    epsilon: float = 0.3
    step: float = 0.01
    iters: int = 1
    beta: float = 1.0
    random_start: bool = False
    cw: CWParams = field(default_factory=CWParams)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must be in (0, 1]")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must be in [0, 1]")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")

    @classmethod
    def default(cls, family: str, dataset: str = "mnist", targeted: bool = False, **overrides) -> "AttackSpec":
        """Per-dataset defaults: FGSM steps the full budget, R-FGSM uses c=0.05,
        iterative variants use c=0.01 for the dataset's iteration count."""
        eps = EPSILON.get(dataset, 0.3)
        base = {"family": family, "targeted": targeted, "epsilon": eps}
        if family == "fgsm":
            base.update(step=eps, iters=1)
        elif family == "r_fgsm":
            base.update(step=0.05, iters=1, beta=0.5)
        elif family in ("bim", "pgd", "r_bim", "r_pgd"):
            base.update(step=0.01, iters=ITERATIONS.get(dataset, 1000),
                        random_start=family in ("pgd", "r_pgd"))
            if family in RECONSTRUCTIVE:
                base["beta"] = 0.5
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        d = dict(d)
        d["cw"] = CWParams(**d.get("cw", {}))
        return cls(**d)


@dataclass
class AdvBatch:
    """Adversarial examples for a batch, one row per source image."""

    x_adv: np.ndarray
    x: np.ndarray
    y: np.ndarray
    target: np.ndarray | None
    indices: np.ndarray
    spec: AttackSpec
    found: np.ndarray | None = None  # CW: whether a successful example was found
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.x_adv)

    @property
    def goal(self) -> np.ndarray:
        return self.target if self.spec.targeted else self.y

    def linf(self) -> np.ndarray:
        return np.abs(self.x_adv - self.x).reshape(len(self), -1).max(axis=1, initial=0.0)

    def l2(self) -> np.ndarray:
        return np.sqrt(((self.x_adv - self.x).astype(np.float64) ** 2).reshape(len(self), -1).sum(axis=1))

    def save(self, directory, seed: int | None = None, dataset: str = "") -> Path:
        """Write ``manifest.json`` plus ``tensors.bin`` (tensor container)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arrays = {"x_adv": self.x_adv, "x": self.x}
        tensorio.save(directory / "tensors.bin",
                      tensorio.Container("advbatch", 0, self.x.shape[1:], arrays, {}))
        manifest = {
            "spec": self.spec.to_dict(), "seed": seed, "dataset": dataset,
            "indices": self.indices.tolist(), "labels": self.y.tolist(),
            "targets": None if self.target is None else self.target.tolist(),
            "found": None if self.found is None else self.found.tolist(),
            "meta": self.meta,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "AdvBatch":
        directory = Path(directory)
        m = json.loads((directory / "manifest.json").read_text())
        c = tensorio.load(directory / "tensors.bin")
        tgt = None if m["targets"] is None else np.asarray(m["targets"], dtype=np.int64)
        found = None if m.get("found") is None else np.asarray(m["found"], dtype=bool)
        return cls(c.arrays["x_adv"], c.arrays["x"], np.asarray(m["labels"], dtype=np.int64), tgt,
                   np.asarray(m["indices"], dtype=np.int64), AttackSpec.from_dict(m["spec"]), found,
                   m.get("meta", {}))


def random_targets(labels: np.ndarray, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform target among the labels different from the true one."""
    labels = np.asarray(labels, dtype=np.int64)
    return (labels + rng.integers(1, n_classes, size=len(labels))) % n_classes


# --------------------------------------------------------------- projections
def project(x: np.ndarray, delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip delta to the l_inf ball, then keep x + delta inside the pixel box."""
    delta = np.clip(delta, -epsilon, epsilon)
    return (np.clip(x + delta, 0.0, 1.0) - x).astype(x.dtype)


def _finish(x: np.ndarray, delta: np.ndarray, epsilon: float) -> np.ndarray:
    # guarantee the budget holds on the emitted image itself, not only on delta
    return np.clip(np.clip(x + delta, x - epsilon, x + epsilon), 0.0, 1.0).astype(x.dtype)


# ---------------------------------------------------------------- gradients
def ce_gradient(model: ModelBundle, x_adv: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d/dx of the summed cross-entropy of the model logits w.r.t. ``labels``."""
    xt = Tensor(x_adv, requires_grad=True)
    logits, _ = model.forward(xt)
    G.backward(G.cross_entropy(logits, labels, reduction="sum"))
    if not np.isfinite(xt.grad).all():
        raise G.NonFiniteError("attack gradient is not finite")
    return xt.grad


def _recon_distance(model: ModelBundle, xt: Tensor, poses: Tensor, pred: np.ndarray) -> Tensor:
    n = xt.shape[0]
    r = model.reconstruct(poses, pred)
    # per-image l2 distance, summed so each row's gradient is its own
    return G.sum(G.l2_norm(G.sub(r, G.reshape(xt, (n, -1))), axis=1))


def recon_gradient(model: ModelBundle, x_adv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ||r(v_f(x')) - x'||_2 w.r.t. x', using the current prediction."""
    xt = Tensor(x_adv, requires_grad=True)
    logits, poses = model.forward(xt)
    pred = logits.data.argmax(axis=1)
    G.backward(_recon_distance(model, xt, poses, pred))
    return xt.grad, pred


def combined_gradient(model: ModelBundle, x_adv: np.ndarray, target: np.ndarray, beta: float) -> np.ndarray:
    xt = Tensor(x_adv, requires_grad=True)
    logits, poses = model.forward(xt)
    pred = logits.data.argmax(axis=1)
    ce = G.cross_entropy(logits, target, reduction="sum")
    rec = _recon_distance(model, xt, poses, pred)
    G.backward(G.add(G.scale(ce, beta), G.scale(rec, 1 - beta)))
    return xt.grad


# ------------------------------------------------------------- l_inf attacks
def _chunks(n: int, batch_size: int):
    for i in range(0, n, batch_size):
        yield slice(i, min(i + batch_size, n))


def _start(x: np.ndarray, spec: AttackSpec, rng: np.random.Generator | None) -> np.ndarray:
    if spec.random_start:
        if rng is None:
            raise ValueError("random start needs an rng")
        return project(x, rng.uniform(-spec.epsilon, spec.epsilon, x.shape).astype(x.dtype), spec.epsilon)
    return np.zeros_like(x)


def _targets_split(labels, targets, spec):
    labels = np.asarray(labels, dtype=np.int64)
    if spec.targeted:
        if targets is None:
            raise ValueError("targeted attack needs target labels")
        targets = np.asarray(targets, dtype=np.int64)
        if (targets == labels).any():
            raise ValueError("a target equals the true label")
        return labels, targets, targets
    return labels, None, labels


def _result(x, x_adv, y, t, spec, indices, found=None) -> AdvBatch:
    idx = np.arange(len(x)) if indices is None else np.asarray(indices, dtype=np.int64)
    return AdvBatch(x_adv, x, y, t, idx, spec, found)


def fgsm(model: ModelBundle, x: np.ndarray, labels, spec: AttackSpec, targets=None,
         indices=None, batch_size: int = 128) -> AdvBatch:
    """One signed-gradient step of size ``spec.step``, clipped to the budget."""
    if spec.family != "fgsm":
        raise ValueError("fgsm needs an fgsm spec")
    model = model.frozen()
    x = np.asarray(x, dtype=np.float32)
    y, t, goal = _targets_split(labels, targets, spec)
    out = np.empty_like(x)
    direction = -1.0 if spec.targeted else 1.0
    for sl in _chunks(len(x), batch_size):
        g = ce_gradient(model, x[sl], goal[sl])
        delta = project(x[sl], direction * spec.step * np.sign(g), spec.epsilon)
        out[sl] = _finish(x[sl], delta, spec.epsilon)
    return _result(x, out, y, t, spec, indices)


def pgd(model: ModelBundle, x: np.ndarray, labels, spec: AttackSpec, targets=None,
        rng: np.random.Generator | None = None, indices=None, batch_size: int = 128) -> AdvBatch:
    """BIM (no random start) or PGD (uniform start in the ball)."""
    if spec.family not in ("bim", "pgd"):
        raise ValueError("pgd needs a bim/pgd spec")
    model = model.frozen()
    x = np.asarray(x, dtype=np.float32)
    y, t, goal = _targets_split(labels, targets, spec)
    out = np.empty_like(x)
    direction = -1.0 if spec.targeted else 1.0
    for sl in _chunks(len(x), batch_size):
        xb = x[sl]
        delta = _start(xb, spec, rng)
        for _ in range(spec.iters):
            g = ce_gradient(model, xb + delta, goal[sl])
            delta = project(xb, delta + direction * spec.step * np.sign(g), spec.epsilon)
        out[sl] = _finish(xb, delta, spec.epsilon)
    return _result(x, out, y, t, spec, indices)


def reconstructive_step_stage1(model: ModelBundle, x: np.ndarray, delta: np.ndarray, labels,
                               spec: AttackSpec) -> np.ndarray:
    """Classification step scaled by beta: ascend CE(y) or, targeted, descend CE(t)."""
    if spec.beta == 0:
        return delta.copy()
    g = ce_gradient(model, x + delta, np.asarray(labels, dtype=np.int64))
    direction = -1.0 if spec.targeted else 1.0
    return project(x, delta + direction * spec.step * spec.beta * np.sign(g), spec.epsilon)


def reconstructive_step_stage2(model: ModelBundle, x: np.ndarray, delta: np.ndarray,
                               spec: AttackSpec) -> np.ndarray:
    """Reconstruction step scaled by (1 - beta): shrink the distance between
    x + delta and its reconstruction from the currently predicted class."""
    if spec.beta == 1:
        return delta.copy()
    g, _ = recon_gradient(model, x + delta)
    return project(x, delta - spec.step * (1 - spec.beta) * np.sign(g), spec.epsilon)


def reconstructive_attack(model: ModelBundle, x: np.ndarray, labels, spec: AttackSpec, targets=None,
                          rng: np.random.Generator | None = None, indices=None,
                          batch_size: int = 128) -> AdvBatch:
    """R-FGSM / R-BIM / R-PGD: each iteration runs stage 1 then stage 2."""
    if spec.family not in RECONSTRUCTIVE:
        raise ValueError("reconstructive_attack needs an r_* spec")
    model = model.frozen()
    x = np.asarray(x, dtype=np.float32)
    y, t, goal = _targets_split(labels, targets, spec)
    iters = 1 if spec.family == "r_fgsm" else spec.iters
    out = np.empty_like(x)
    for sl in _chunks(len(x), batch_size):
        xb = x[sl]
        delta = _start(xb, spec, rng) if spec.family == "r_pgd" else np.zeros_like(xb)
        for _ in range(iters):
            delta = reconstructive_step_stage1(model, xb, delta, goal[sl], spec)
            delta = reconstructive_step_stage2(model, xb, delta, spec)
        out[sl] = _finish(xb, delta, spec.epsilon)
    return _result(x, out, y, t, spec, indices)


def combined_targeted_attack(model: ModelBundle, x: np.ndarray, labels, targets, spec: AttackSpec,
                             rng: np.random.Generator | None = None, indices=None,
                             batch_size: int = 128) -> AdvBatch:
    """One-stage variant: sign-descent on beta*CE(t) + (1-beta)*recon distance."""
    if not spec.targeted:
        raise ValueError("the combined attack is targeted only")
    model = model.frozen()
    x = np.asarray(x, dtype=np.float32)
    y, t, goal = _targets_split(labels, targets, spec)
    iters = 1 if spec.family in ("fgsm", "r_fgsm") else spec.iters
    out = np.empty_like(x)
    for sl in _chunks(len(x), batch_size):
        xb = x[sl]
        delta = _start(xb, spec, rng)
        for _ in range(iters):
            g = combined_gradient(model, xb + delta, goal[sl], spec.beta)
            delta = project(xb, delta - spec.step * np.sign(g), spec.epsilon)
        out[sl] = _finish(xb, delta, spec.epsilon)
    return _result(x, out, y, t, spec, indices)


# ------------------------------------------------------------------------- CW
def _cw_margin(logits: Tensor, goal: np.ndarray, targeted: bool, confidence: float) -> Tensor:
    n, k = logits.shape
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), goal] = 1
    real = G.sum(G.mul(logits, Tensor(onehot)), axis=1)
    # push the goal entry far down before taking the max over the others
    other = G.reduce("max", G.sub(logits, Tensor(onehot * 1e4)), axis=1)
    margin = G.sub(other, real) if targeted else G.sub(real, other)
    return G.sub(G.relu(G.add(margin, Tensor(np.full(n, confidence, dtype=logits.dtype)))),
                 Tensor(np.full(n, confidence, dtype=logits.dtype)))


def _cw_success(logits: np.ndarray, goal: np.ndarray, targeted: bool, confidence: float) -> np.ndarray:
    z = logits.copy()
    rows = np.arange(len(z))
    if targeted:
        z[rows, goal] -= confidence
        return z.argmax(axis=1) == goal
    z[rows, goal] += confidence
    return z.argmax(axis=1) != goal


def cw_l2(model: ModelBundle, x: np.ndarray, labels, spec: AttackSpec, targets=None,
          indices=None, batch_size: int = 128) -> AdvBatch:
    """Carlini-Wagner l2 with a tanh change of variables and a binary search
    over the trade-off constant. Rows with no successful iterate keep the
    final iterate and are marked ``found=False``."""
    if spec.family != "cw":
        raise ValueError("cw_l2 needs a cw spec")
    p = spec.cw
    model = model.frozen()
    x = np.asarray(x, dtype=np.float32)
    y, t, goal = _targets_split(labels, targets, spec)
    out = np.empty_like(x)
    found_all = np.zeros(len(x), dtype=bool)
    for sl in _chunks(len(x), batch_size):
        xb, gb = x[sl], goal[sl]
        n = len(xb)
        flat_x = xb.reshape(n, -1)
        w0 = np.arctanh(np.clip(2 * xb - 1, -1 + 1e-6, 1 - 1e-6)).astype(np.float32)
        lo, hi = np.zeros(n), np.full(n, 1e10)
        const = np.full(n, p.initial_const)
        best_l2 = np.full(n, np.inf)
        best = xb.copy()
        last = xb.copy()
        for _ in range(p.binary_search_steps):
            w = Tensor(w0.copy(), requires_grad=True)
            opt = G.Adam([w], lr=p.lr)
            ok = np.zeros(n, dtype=bool)
            prev = np.inf
            for it in range(p.iters):
                opt.zero_grad()
                xa = G.scale(G.add(G.tanh(w), 1.0), 0.5)
                logits, _ = model.forward(xa)
                dist = G.sum(G.square(G.sub(G.reshape(xa, (n, -1)), Tensor(flat_x))), axis=1)
                margin = _cw_margin(logits, gb, spec.targeted, p.confidence)
                loss = G.sum(G.add(dist, G.mul(Tensor(const.astype(np.float32)), margin)))
                G.backward(loss)
                opt.step()
                succ = _cw_success(logits.data, gb, spec.targeted, p.confidence)
                l2 = dist.data.astype(np.float64)
                better = succ & (l2 < best_l2)
                best_l2[better] = l2[better]
                best[better] = xa.data[better]
                ok |= succ
                if p.abort_early and it % max(p.iters // 10, 1) == 0:
                    if loss.item() > prev * 0.9999:
                        break
                    prev = loss.item()
            last = np.clip((np.tanh(w.data) + 1) / 2, 0, 1).astype(np.float32)
            # success shrinks the constant, failure grows it
            hi = np.where(ok, np.minimum(hi, const), hi)
            lo = np.where(ok, lo, np.maximum(lo, const))
            const = np.where(hi < 1e9, (lo + hi) / 2, const * 10)
        found = np.isfinite(best_l2)
        out[sl] = np.where(found[:, None, None, None], best, last)
        found_all[sl] = found
    return _result(x, out, y, t, spec, indices, found_all)


# -------------------------------------------------------------------- dispatch
def run_attack(model: ModelBundle, x: np.ndarray, labels, spec: AttackSpec, targets=None,
               rng: np.random.Generator | None = None, indices=None, batch_size: int = 128) -> AdvBatch:
    if spec.family == "fgsm":
        return fgsm(model, x, labels, spec, targets, indices, batch_size)
    if spec.family in ("bim", "pgd"):
        return pgd(model, x, labels, spec, targets, rng, indices, batch_size)
    if spec.family == "cw":
        return cw_l2(model, x, labels, spec, targets, indices, batch_size)
    return reconstructive_attack(model, x, labels, spec, targets, rng, indices, batch_size)


# ----------------------------------------------------------------- experiments
@dataclass
class BetaSweep:
    betas: list[float]
    success: list[float]
    undetected: list[float]

    @property
    def worst_index(self) -> int:
        # ties go to the larger success rate, then the first beta
        return max(range(len(self.betas)), key=lambda i: (self.undetected[i], self.success[i], -i))

    @property
    def worst_beta(self) -> float:
        return self.betas[self.worst_index]

    def to_csv(self) -> str:
        w = self.worst_index
        lines = ["beta,success,undetected,worst"]
        lines += [f"{b!r},{s!r},{u!r},{int(i == w)}"
                  for i, (b, s, u) in enumerate(zip(self.betas, self.success, self.undetected))]
        return "\n".join(lines) + "\n"


def beta_sweep(model: ModelBundle, detector: Detector, x: np.ndarray, labels, spec: AttackSpec,
               betas=None, targets=None, seed: int = 0, batch_size: int = 128) -> BetaSweep:
    """Run the reconstructive attack for each beta with the same random stream."""
    if spec.family not in RECONSTRUCTIVE:
        raise ValueError("beta_sweep needs a reconstructive spec")
    betas = [round(0.1 * i, 10) for i in range(11)] if betas is None else [float(b) for b in betas]
    if any(not 0 <= b <= 1 for b in betas):
        raise ValueError("betas must lie in [0, 1]")
    succ, und = [], []
    for b in betas:
        s = dataclasses.replace(spec, beta=b)
        adv = reconstructive_attack(model, x, labels, s, targets, np.random.default_rng(seed),
                                    batch_size=batch_size)
        rep = evaluate_attack(model, detector, adv)
        succ.append(rep.success)
        und.append(rep.undetected)
        log.info("beta %.2f: S=%.3f R=%.3f", b, rep.success, rep.undetected)
    return BetaSweep(betas, succ, und)


def blackbox_transfer(substitute: ModelBundle, victim: ModelBundle, detector: Detector, x: np.ndarray,
                      labels, spec: AttackSpec, targets=None, rng: np.random.Generator | None = None,
                      batch_size: int = 128) -> EvalReport:
    """Craft on the substitute, score on the victim and its detector."""
    if substitute.arch != victim.arch:
        log.warning("substitute architecture %s differs from victim %s", substitute.arch, victim.arch)
    adv = run_attack(substitute, x, labels, spec, targets, rng=rng, batch_size=batch_size)
    return evaluate_attack(victim, detector, adv, {"mode": "blackbox",
                                                   "substitute": substitute.checksum(),
                                                   "victim": victim.checksum()})
