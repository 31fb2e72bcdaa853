"""CapsNet, CNN+R and CNN+CR classifiers with their reconstruction heads.

All three share the same front end (a 9x9 ReLU conv followed by a strided
9x9 conv) and the same decoder (FC-ReLU 512, FC-ReLU 1024, FC-sigmoid). They
differ in what sits between: dynamic routing into class capsules, a
grouped penultimate layer, or a plain penultimate layer with a linear head.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import ndgrad as G
from . import tensorio
from .ndgrad import Tensor

log = logging.getLogger(__name__)

ARCHITECTURES = ("capsnet", "cnn_r", "cnn_cr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    arch: str = "capsnet"
    input_shape: tuple[int, int, int] = (1, 28, 28)
    n_classes: int = 10
    conv1_channels: int = 256
    conv1_kernel: int = 9
    primary_types: int = 32
    primary_dim: int = 8
    primary_kernel: int = 9
    primary_stride: int = 2
    pose_dim: int = 16
    routing_iters: int = 3
    decoder_hidden: tuple[int, ...] = (512, 1024)
    init_std: float = 0.05

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")

    def with_arch(self, arch: str) -> "ArchConfig":
        return dataclasses.replace(self, arch=arch)

    @property
    def image_size(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def primary_grid(self) -> tuple[int, int]:
        _, h, w = self.input_shape
        h1, w1 = h - self.conv1_kernel + 1, w - self.conv1_kernel + 1
        s, k = self.primary_stride, self.primary_kernel
        if h1 < k or w1 < k:
            raise ValueError("primary kernel larger than the first feature map")
        return (h1 - k) // s + 1, (w1 - k) // s + 1

    @property
    def primary_input(self) -> tuple[int, int]:
        """Extent of the first feature map the strided conv actually reads.

        Trailing rows/columns a floor-rounded strided conv would skip are
        cropped explicitly (20x20 -> 19x19 for the MNIST sizing).
        """
        gh, gw = self.primary_grid
        s, k = self.primary_stride, self.primary_kernel
        return (gh - 1) * s + k, (gw - 1) * s + k

    @property
    def n_primary(self) -> int:
        gh, gw = self.primary_grid
        return self.primary_types * gh * gw

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["decoder_hidden"] = tuple(d["decoder_hidden"])
        return cls(**d)


PRESETS = {
    # canonical CapsNet sizing; CNNs reuse the same conv stack
    "mnist": ArchConfig(),
    "fashion": ArchConfig(),
    "svhn": ArchConfig(input_shape=(3, 32, 32), conv1_channels=256, primary_types=64, pose_dim=16,
                       conv1_kernel=9, primary_kernel=9, primary_stride=2),
    # small configuration for fast CPU runs and tests
    "tiny": ArchConfig(conv1_channels=16, primary_types=8, primary_dim=8, pose_dim=8,
                       decoder_hidden=(64, 128)),
}


def preset(name: str, arch: str) -> ArchConfig:
    return PRESETS[name].with_arch(arch)


# ------------------------------------------------------------------- pieces
def squash(s) -> Tensor:
    """Capsule nonlinearity along the last axis; keeps direction, norm in [0, 1)."""
    return G.squash(s, axis=-1)


def dynamic_routing(u_hat, iterations: int = 3, return_couplings: bool = False):
    """Routing-by-agreement from predictions ``u_hat`` [N,I,K,D] (or [I,K,D]).

    Returns the class poses v [N,K,D]; with ``return_couplings`` also the list
    of coupling arrays c [N,I,K] used at each iteration.
    """
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    u_hat = u_hat if isinstance(u_hat, Tensor) else Tensor(u_hat)
    if u_hat.ndim == 3:
        u_hat = G.reshape(u_hat, (1,) + u_hat.shape)
    n, i, k, d = u_hat.shape
    # [N*K, I, D] layout so both contractions are plain batched matmuls
    uk = G.reshape(G.transpose(u_hat, (0, 2, 1, 3)), (n * k, i, d))
    b = Tensor(np.zeros((n, k, i), dtype=u_hat.dtype))
    couplings = []
    v = None
    for it in range(iterations):
        c = G.softmax(b, axis=1)
        couplings.append(c.data.transpose(0, 2, 1))
        s = G.bmm(G.reshape(c, (n * k, 1, i)), uk)
        v = squash(G.reshape(s, (n, k, d)))
        if it + 1 < iterations:
            agree = G.bmm(uk, G.reshape(v, (n * k, d, 1)))
            b = G.add(b, G.reshape(agree, (n, k, i)))
    return (v, couplings) if return_couplings else v


def capsule_predictions(u: Tensor, weights: Tensor) -> Tensor:
    """u_hat[n,i,k,:] = W[i,k] @ u[n,i] for u [N,I,P], W [I,K,D,P] -> [N,I,K,D]."""
    n, i, pdim = u.shape
    _, k, d, _ = weights.shape
    wt = G.transpose(G.reshape(weights, (i, k * d, pdim)), (0, 2, 1))  # [I,P,K*D]
    out = G.bmm(G.transpose(u, (1, 0, 2)), wt)  # [I,N,K*D]
    return G.reshape(G.transpose(out, (1, 0, 2)), (n, i, k, d))


def margin_loss(logits, labels, m_plus: float = 0.9, m_minus: float = 0.1,
                lam: float = 0.5, reduction: str = "mean") -> Tensor:
    """Capsule margin loss on class-capsule lengths [N,K]."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    present = G.square(G.relu(G.sub(m_plus, logits)))
    absent = G.square(G.relu(G.sub(logits, m_minus)))
    per = G.add(G.mul(Tensor(onehot), present), G.scale(G.mul(Tensor(1 - onehot), absent), lam))
    total = G.sum(per)
    return G.scale(total, 1.0 / n) if reduction == "mean" else total


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2
    return (z * std).astype(np.float32)


def init_params(cfg: ArchConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    c_in = cfg.input_shape[0]
    caps_ch = cfg.primary_types * cfg.primary_dim
    p: dict[str, np.ndarray] = {}

    def dense(name, shape):
        p[name + ".w"] = _truncated_normal(rng, shape, cfg.init_std)
        p[name + ".b"] = np.zeros(shape[0] if len(shape) == 4 else shape[1], dtype=np.float32)

    dense("conv1", (cfg.conv1_channels, c_in, cfg.conv1_kernel, cfg.conv1_kernel))
    dense("conv2", (caps_ch, cfg.conv1_channels, cfg.primary_kernel, cfg.primary_kernel))
    pose_width = cfg.n_classes * cfg.pose_dim
    if cfg.arch == "capsnet":
        p["caps.W"] = _truncated_normal(
            rng, (cfg.n_primary, cfg.n_classes, cfg.pose_dim, cfg.primary_dim), cfg.init_std)
    else:
        gh, gw = cfg.primary_grid
        dense("fc", (caps_ch * gh * gw, pose_width))
        if cfg.arch == "cnn_r":
            dense("head", (pose_width, cfg.n_classes))
    widths = (pose_width,) + tuple(cfg.decoder_hidden) + (cfg.image_size,)
    for j in range(len(widths) - 1):
        dense(f"dec{j}", (widths[j], widths[j + 1]))
    return p


# -------------------------------------------------------------------- bundle
class ModelBundle:
    """Classifier plus reconstruction head, with its parameters and metadata.

    ``forward`` returns (logits [N,K], poses). Poses are [N,K,D] for capsnet
    and cnn_cr, and [N,1,K*D] for cnn_r (one ungrouped vector).
    """

    def __init__(self, config: ArchConfig, params: dict[str, np.ndarray | Tensor],
                 meta: dict | None = None, trainable: bool = True):
        self.config = config
        self.params = {
            k: v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float32), requires_grad=trainable)
            for k, v in params.items()
        }
        self.meta = dict(meta or {})

    @classmethod
    def create(cls, config: ArchConfig, seed: int = 0, meta: dict | None = None) -> "ModelBundle":
        rng = np.random.default_rng(seed)
        m = {"seed": seed}
        m.update(meta or {})
        return cls(config, init_params(config, rng), m)

    # -- properties --------------------------------------------------------
    @property
    def arch(self) -> str:
        return self.config.arch

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.config.input_shape

    @property
    def conditional(self) -> bool:
        return self.arch != "cnn_r"

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    def frozen(self) -> "ModelBundle":
        """A view sharing parameter storage, with gradients disabled for parameters."""
        return ModelBundle(self.config, {k: Tensor(v.data, dtype=v.dtype) for k, v in self.params.items()},
                           self.meta, trainable=False)

    def astype(self, dtype) -> "ModelBundle":
        b = ModelBundle(self.config, {}, self.meta)
        b.params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, dtype=dtype)
                    for k, v in self.params.items()}
        return b

    # -- computation -------------------------------------------------------
    def _x(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.params["conv1.w"].dtype))
        if x.ndim != 4 or x.shape[1:] != tuple(self.input_shape):
            raise ValueError(f"input shape {x.shape} does not match model input {self.input_shape}")
        return x

    def _front(self, x: Tensor) -> Tensor:
        p = self.params
        h = G.relu(G.add_bias(G.conv2d(x, p["conv1.w"]), p["conv1.b"], axis=1))
        ch, cw = self.config.primary_input
        if (ch, cw) != h.shape[2:]:
            h = G.crop(h, ch, cw)
        return G.add_bias(G.conv2d(h, p["conv2.w"], stride=self.config.primary_stride), p["conv2.b"], axis=1)

    def forward(self, x, return_couplings: bool = False):
        x = self._x(x)
        cfg, p = self.config, self.params
        feat = self._front(x)
        n = x.shape[0]
        if self.arch == "capsnet":
            gh, gw = cfg.primary_grid
            u = G.reshape(feat, (n, cfg.primary_types, cfg.primary_dim, gh, gw))
            u = G.reshape(G.transpose(u, (0, 1, 3, 4, 2)), (n, cfg.n_primary, cfg.primary_dim))
            u = squash(u)
            u_hat = capsule_predictions(u, p["caps.W"])
            v, cs = dynamic_routing(u_hat, cfg.routing_iters, return_couplings=True)
            logits = G.l2_norm(v, axis=2)
            return (logits, v, cs) if return_couplings else (logits, v)
        h = G.relu(G.add_bias(G.matmul(G.reshape(G.relu(feat), (n, -1)), p["fc.w"]), p["fc.b"]))
        if self.arch == "cnn_cr":
            poses = G.reshape(h, (n, cfg.n_classes, cfg.pose_dim))
            logits = G.sum(poses, axis=2)
        else:
            logits = G.add_bias(G.matmul(h, p["head.w"]), p["head.b"])
            poses = G.reshape(h, (n, 1, cfg.n_classes * cfg.pose_dim))
        return logits, poses

    def reconstruct(self, poses: Tensor, class_ids=None, masked: bool = True) -> Tensor:
        """Decode poses into images [N, C*H*W] in [0, 1].

        For capsnet/cnn_cr every pose except ``class_ids[n]`` is zeroed first
        (``masked=False`` feeds all poses, the unmasked ablation). cnn_r
        ignores ``class_ids``.
        """
        n = poses.shape[0]
        if self.conditional and masked:
            if class_ids is None:
                raise ValueError("class-conditional reconstruction needs class ids")
            poses = G.mask_select(poses, class_ids)
        h = G.reshape(poses, (n, -1))
        n_layers = len(self.config.decoder_hidden) + 1
        for j in range(n_layers):
            h = G.add_bias(G.matmul(h, self.params[f"dec{j}.w"]), self.params[f"dec{j}.b"])
            h = G.relu(h) if j + 1 < n_layers else G.sigmoid(h)
        return h

    def predict(self, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
        out = []
        with G.no_grad():
            for i in range(0, len(x), batch_size):
                logits, _ = self.forward(x[i : i + batch_size])
                out.append(logits.data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def error_rate(self, x: np.ndarray, y: np.ndarray, batch_size: int = 32) -> float:
        return float(np.mean(self.predict(x, batch_size) != y))

    # -- persistence -------------------------------------------------------
    def save(self, path) -> Path:
        meta = {"config": self.config.to_dict(), "train": self.meta}
        c = tensorio.Container(self.arch, self.n_classes, self.input_shape,
                               {k: v.data for k, v in self.params.items()}, meta)
        return tensorio.save(path, c)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        c = tensorio.load(path)
        cfg = ArchConfig.from_dict(c.meta["config"])
        if cfg.arch != c.tag or cfg.n_classes != c.n_classes or tuple(cfg.input_shape) != c.input_shape:
            raise tensorio.ContainerError("checkpoint header disagrees with stored config")
        return cls(cfg, c.arrays, c.meta.get("train", {}))


def mask_and_reconstruct(model: ModelBundle, poses: Tensor, class_id) -> Tensor:
    n = poses.shape[0]
    ids = np.broadcast_to(np.asarray(class_id, dtype=np.int64), (n,))
    if model.conditional and ((ids < 0).any() or (ids >= model.n_classes).any()):
        raise ValueError(f"class id out of range for {model.n_classes} classes")
    return model.reconstruct(poses, ids)


def forward_capsnet(model: ModelBundle, x):
    if model.arch != "capsnet":
        raise ValueError("forward_capsnet needs a capsnet bundle")
    return model.forward(x)


def forward_cnn(model: ModelBundle, x, conditional: bool):
    if model.arch != ("cnn_cr" if conditional else "cnn_r"):
        raise ValueError(f"bundle is {model.arch}, not a matching CNN")
    return model.forward(x)


# ------------------------------------------------------------------ training
def classifier_loss(model: ModelBundle, logits: Tensor, labels) -> Tensor:
    if model.arch == "capsnet":
        return margin_loss(logits, labels)
    return G.cross_entropy(logits, labels, reduction="mean")


def recon_sse(model: ModelBundle, x: Tensor, poses: Tensor, class_ids) -> Tensor:
    """Mean over the batch of the per-image summed squared reconstruction error."""
    n = x.shape[0]
    r = model.reconstruct(poses, class_ids)
    return G.scale(G.sum(G.square(G.sub(r, G.reshape(x, (n, -1))))), 1.0 / n)


def total_loss(model: ModelBundle, x, labels, recon_weight: float = 0.0005) -> tuple[Tensor, float, float]:
    x = model._x(x)
    logits, poses = model.forward(x)
    cls = classifier_loss(model, logits, labels)
    if recon_weight == 0:
        return cls, cls.item(), 0.0
    rec = recon_sse(model, x, poses, labels)  # true-class pose during training
    return G.add(cls, G.scale(rec, recon_weight)), cls.item(), rec.item()


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    class_loss: float
    recon_sse: float
    val_error: float


def train(model: ModelBundle, train_x: np.ndarray, train_y: np.ndarray,
          val_x: np.ndarray | None = None, val_y: np.ndarray | None = None, *,
          epochs: int = 20, batch_size: int = 128, lr: float = 1e-3,
          recon_weight: float = 0.0005, rng: np.random.Generator | None = None,
          checkpoint_dir: str | Path | None = None,
          on_epoch: Callable[[EpochLog], None] | None = None) -> list[EpochLog]:
    """Adam training of classifier + reconstruction head, in place.

    Raises ``TrainingDiverged`` on a non-finite loss. With ``checkpoint_dir``
    a checkpoint is written after every epoch (``epoch_XXX.ckpt``).
    """
    rng = rng or np.random.default_rng(0)
    params = [p for name, p in model.params.items() if recon_weight != 0 or not name.startswith("dec")]
    opt = G.Adam(params, lr=lr)
    history: list[EpochLog] = []
    n = len(train_x)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        tot = cls_tot = rec_tot = 0.0
        batches = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            opt.zero_grad()
            try:
                loss, cls_v, rec_v = total_loss(model, train_x[idx], train_y[idx], recon_weight)
            except G.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch starting {start}: {exc}") from exc
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"epoch {epoch}, batch starting {start}: loss={loss.item()}")
            G.backward(loss)
            opt.step()
            tot, cls_tot, rec_tot, batches = tot + loss.item(), cls_tot + cls_v, rec_tot + rec_v, batches + 1
        val_err = model.error_rate(val_x, val_y) if val_x is not None and len(val_x) else float("nan")
        entry = EpochLog(epoch, tot / batches, cls_tot / batches, rec_tot / batches, val_err)
        history.append(entry)
        log.info("epoch %d loss %.5f cls %.5f rec %.3f val_err %.4f", *dataclasses.astuple(entry))
        if on_epoch:
            on_epoch(entry)
        if checkpoint_dir is not None:
            model.save(Path(checkpoint_dir) / f"epoch_{epoch:03d}.ckpt")
    model.meta.update({"epochs": model.meta.get("epochs", 0) + epochs, "lr": lr,
                       "batch_size": batch_size, "recon_weight": recon_weight})
    return history
