"""Datasets: IDX parsing, cached downloads, splits and synthetic corruptions."""

from __future__ import annotations

import dataclasses
import gzip
import hashlib
import logging
import os
import shutil
import struct
import tempfile
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensorio

log = logging.getLogger(__name__)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
CACHE_ENV = "CAPSDETECT_DATA"


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    split: str = "train"
    name: str = ""
    n_classes: int = 10
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError("image/label count mismatch")
        if len(self.images) == 0:
            raise DataError("empty dataset")
        if self.images.min() < 0 or self.images.max() > 1:
            raise DataError("pixels outside [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DataError(f"labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return dataclasses.replace(self, images=self.images[idx], labels=self.labels[idx],
                                   split=split or self.split)

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


# ------------------------------------------------------------------------ IDX
def _read_maybe_gz(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def parse_idx(buf: bytes, expect_magic: int) -> np.ndarray:
    if len(buf) < 8:
        raise DataError("truncated IDX header")
    magic = struct.unpack(">i", buf[:4])[0]
    if magic != expect_magic:
        raise DataError(f"bad IDX magic {magic}, expected {expect_magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataError("truncated IDX header")
    dims = struct.unpack(f">{ndim}i", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) - header < count:
        raise DataError(f"truncated IDX payload: need {count} bytes, have {len(buf) - header}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train", name: str = "") -> Dataset:
    """Parse an IDX image/label pair (optionally gzipped); bytes scale to [0, 1]."""
    images = parse_idx(_read_maybe_gz(images_path), IMAGE_MAGIC)
    labels = parse_idx(_read_maybe_gz(labels_path), LABEL_MAGIC)
    if len(images) != len(labels):
        raise DataError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    prov = {"images": tensorio.file_hash(images_path), "labels": tensorio.file_hash(labels_path)}
    return Dataset(images[:, None].astype(np.float32) / 255.0, labels.astype(np.int64), split, name,
                   max(10, int(labels.max()) + 1), prov)


def write_idx(path, array: np.ndarray) -> Path:
    """Write a uint8 array as IDX (images: 3-d, labels: 1-d)."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    head = struct.pack(">i", magic) + struct.pack(f">{arr.ndim}i", *arr.shape)
    return tensorio.atomic_write(path, head + arr.tobytes())


# ------------------------------------------------------------------ container
def save_dataset(ds: Dataset, path) -> Path:
    meta = {"split": ds.split, "name": ds.name, "provenance": ds.provenance}
    c = tensorio.Container("dataset", ds.n_classes, ds.images.shape[1:],
                           {"images": ds.images, "labels": ds.labels.astype(np.float32)}, meta)
    return tensorio.save(path, c)


def load_dataset_file(path) -> Dataset:
    c = tensorio.load(path)
    if c.tag != "dataset" or "images" not in c.arrays or "labels" not in c.arrays:
        raise DataError(f"{path}: not a dataset container")
    labels = c.arrays["labels"]
    if not np.array_equal(labels, np.round(labels)):
        raise DataError(f"{path}: non-integer labels")
    return Dataset(c.arrays["images"], labels.astype(np.int64), c.meta.get("split", "test"),
                   c.meta.get("name", Path(path).stem), c.n_classes, c.meta.get("provenance", {}))


# --------------------------------------------------------------------- splits
def split(ds: Dataset, val_fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the last ``val_fraction`` becomes validation."""
    if not 0 < val_fraction < 1:
        raise DataError("val_fraction must be in (0, 1)")
    if len(ds) < 2:
        raise DataError("need at least two samples to split")
    order = np.random.default_rng(seed).permutation(len(ds))
    # both sides keep at least one sample
    n_val = min(max(int(round(len(ds) * val_fraction)), 1), len(ds) - 1)
    return ds.subset(order[n_val:], "train"), ds.subset(order[:n_val], "val")


# --------------------------------------------------------------- corruptions
CORRUPTIONS = ("identity", "gaussian_noise", "gaussian_blur", "rotate", "shear", "contrast",
               "inverse", "saturate", "dotted_line", "zigzag")

DEFAULT_SEVERITY = {
    "gaussian_noise": {"sigma": 0.3},
    "gaussian_blur": {"sigma": 1.5},
    "rotate": {"degrees": 30.0},
    "shear": {"shear": 0.5},
    "contrast": {"factor": 0.2},
    "saturate": {"factor": 3.0},
    "dotted_line": {"dots": 12, "width": 1},
    "zigzag": {"segments": 4, "width": 1},
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise DataError(f"unknown corruption {self.kind!r}")

    def param(self, key):
        return self.params.get(key, DEFAULT_SEVERITY.get(self.kind, {}).get(key))


def _warp(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    # output pixel p samples input at matrix @ (p - c) + c, bilinear
    h, w = img.shape[-2:]
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - matrix @ centre
    out = np.empty_like(img)
    for ch in range(img.shape[0]):
        out[ch] = ndimage.affine_transform(img[ch], matrix, offset=offset, order=1, mode="constant", cval=0.0)
    return out


def _draw_points(canvas: np.ndarray, pts: np.ndarray, width: int) -> None:
    h, w = canvas.shape[-2:]
    r = max(width - 1, 0)
    for y, x in np.round(pts).astype(int):
        canvas[..., max(y - r, 0) : min(y + r + 1, h), max(x - r, 0) : min(x + r + 1, w)] = 1.0


def _polyline(points: np.ndarray, step: float = 0.5) -> np.ndarray:
    out = []
    for a, b in zip(points[:-1], points[1:]):
        n = max(int(np.ceil(np.linalg.norm(b - a) / step)), 1)
        t = np.linspace(0, 1, n, endpoint=False)[:, None]
        out.append(a + t * (b - a))
    out.append(points[-1:])
    return np.concatenate(out)


def _corrupt_one(img: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    k = spec.kind
    h, w = img.shape[-2:]
    if k == "identity":
        return img.copy()
    if k == "gaussian_noise":
        return img + rng.normal(0, spec.param("sigma"), img.shape)
    if k == "gaussian_blur":
        return np.stack([ndimage.gaussian_filter(c, spec.param("sigma"), mode="constant") for c in img])
    if k == "rotate":
        a = np.deg2rad(rng.uniform(-1, 1) * spec.param("degrees"))
        return _warp(img, np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]))
    if k == "shear":
        s = rng.uniform(-1, 1) * spec.param("shear")
        return _warp(img, np.array([[1.0, 0.0], [s, 1.0]]))
    if k == "contrast":
        return (img - 0.5) * spec.param("factor") + 0.5
    if k == "inverse":
        return 1.0 - img
    if k == "saturate":
        return img * spec.param("factor")
    if k == "dotted_line":
        out = img.copy()
        a, b = rng.uniform(0, [h - 1, w - 1], size=(2, 2))
        t = np.linspace(0, 1, int(spec.param("dots")))[:, None]
        _draw_points(out, a + t * (b - a), int(spec.param("width")))
        return out
    if k == "zigzag":
        out = img.copy()
        n = int(spec.param("segments")) + 1
        xs = np.linspace(rng.uniform(0, w / 4), rng.uniform(3 * w / 4, w - 1), n)
        ys = np.where(np.arange(n) % 2 == 0, rng.uniform(0, h / 3), rng.uniform(2 * h / 3, h - 1))
        _draw_points(out, _polyline(np.stack([ys, xs], axis=1)), int(spec.param("width")))
        return out
    raise DataError(f"unknown corruption {k!r}")


def corrupt(ds: Dataset, spec: CorruptionSpec, seed: int = 0) -> Dataset:
    """Apply ``spec`` to every image; labels and shapes are untouched.

    Each image gets its own RNG stream derived from (seed, index), so the
    result does not depend on how the work is chunked.
    """
    if spec.kind == "identity":
        out = ds.images.copy()
    elif spec.kind == "inverse":
        out = 1.0 - ds.images
    else:
        ss = np.random.SeedSequence(seed).spawn(len(ds))
        out = np.stack([_corrupt_one(img, spec, np.random.default_rng(s)) for img, s in zip(ds.images, ss)])
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    prov = dict(ds.provenance, corruption=spec.kind, corruption_params=dict(spec.params), seed=seed)
    return dataclasses.replace(ds, images=out, name=f"{ds.name}:{spec.kind}", provenance=prov)


# ------------------------------------------------------ external corruptions
def load_external_corrupted(directory) -> dict[str, Dataset]:
    """Load pre-built corrupted test sets from ``directory``.

    Accepted per-corruption layouts: ``<name>.tensors`` dataset containers,
    ``<name>/`` with an IDX image/label pair, or ``<name>/`` with
    ``test_images.npy`` + ``test_labels.npy`` (uint8 [N,H,W(,1)]).
    """
    directory = Path(directory)
    out: dict[str, Dataset] = {}
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    for entry in sorted(directory.iterdir()):
        try:
            if entry.is_file() and entry.suffix == ".tensors":
                out[entry.stem] = load_dataset_file(entry)
            elif entry.is_dir():
                imgs = sorted(entry.glob("*images*idx3*"))
                labs = sorted(entry.glob("*labels*idx1*"))
                if imgs and labs:
                    out[entry.name] = load_idx(imgs[0], labs[0], "test", entry.name)
                elif (entry / "test_images.npy").exists():
                    x = np.load(entry / "test_images.npy")
                    y = np.load(entry / "test_labels.npy")
                    x = x.reshape(len(x), *x.shape[1:3])[:, None].astype(np.float32) / 255.0
                    out[entry.name] = Dataset(x, y.astype(np.int64), "test", entry.name)
        except (tensorio.ContainerError, DataError, ValueError, OSError) as exc:
            raise DataError(f"malformed corrupted set {entry}: {exc}") from exc
    return out


# ---------------------------------------------------------------------- fetch
SOURCES = {
    "mnist": {
        "mirrors": ["https://ossci-datasets.s3.amazonaws.com/mnist/", "http://yann.lecun.com/exdb/mnist/"],
        "files": {
            "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
            "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
            "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
            "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
        },
    },
    "fashion": {
        "mirrors": ["http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/"],
        "files": {
            "train-images-idx3-ubyte.gz": "8d4fb7e6c68d591d4c3dfef9ec88bf0d",
            "train-labels-idx1-ubyte.gz": "25c81989df183df01b3e8a0aad5dffbe",
            "t10k-images-idx3-ubyte.gz": "bef4ecab320f06d8554ea6380940ec79",
            "t10k-labels-idx1-ubyte.gz": "bb300cfdad3c16e7a12a480ee83cd310",
        },
    },
}


class FetchError(RuntimeError):
    pass


def cache_root(cache_dir=None) -> Path:
    if cache_dir is not None:
        return Path(cache_dir)
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "capsdetect"))


def _md5(path: Path) -> str:
    return hashlib.md5(path.read_bytes()).hexdigest()


def _download(url: str, dest: Path, md5: str, timeout: float) -> None:
    fd, tmp = tempfile.mkstemp(dir=dest.parent, prefix=".part-")
    tmp_path = Path(tmp)
    try:
        with os.fdopen(fd, "wb") as f, urllib.request.urlopen(url, timeout=timeout) as resp:
            shutil.copyfileobj(resp, f)
        got = _md5(tmp_path)
        if got != md5:
            raise FetchError(f"hash mismatch for {url}: got {got}, expected {md5}")
        os.replace(tmp_path, dest)
    finally:
        tmp_path.unlink(missing_ok=True)


def fetch(name: str, cache_dir=None, offline: bool = False, sources: dict | None = None,
          timeout: float = 30.0) -> dict[str, Path]:
    """Return paths of the decompressed files of dataset ``name``.

    Files live under ``<cache>/<name>/``. Archives are verified against their
    declared MD5 before being moved into the cache, so a failed or corrupted
    download never leaves a partial entry. ``offline`` only consults the cache.
    """
    src = (sources or SOURCES).get(name)
    if src is None:
        raise FetchError(f"no download source for dataset {name!r}")
    root = cache_root(cache_dir) / name
    root.mkdir(parents=True, exist_ok=True)
    out = {}
    for fname, md5 in src["files"].items():
        archive = root / fname
        raw = root / (fname[:-3] if fname.endswith(".gz") else fname)
        if not raw.exists():
            if not archive.exists():
                if offline:
                    raise FetchError(f"{archive} not cached and offline mode is on")
                errors = []
                for mirror in src["mirrors"]:
                    try:
                        _download(mirror + fname, archive, md5, timeout)
                        break
                    except FetchError:
                        raise
                    except OSError as exc:
                        errors.append(f"{mirror}: {exc}")
                else:
                    raise FetchError(f"could not download {fname}: " + "; ".join(errors))
            elif _md5(archive) != md5:
                raise FetchError(f"cached {archive} fails its hash check")
            data = gzip.decompress(archive.read_bytes()) if fname.endswith(".gz") else archive.read_bytes()
            tensorio.atomic_write(raw, data)
        out[raw.name] = raw
    return out


def load(name: str, split_name: str = "train", cache_dir=None, offline: bool = False) -> Dataset:
    """Load ``mnist``/``fashion`` (via ``fetch``), ``digits`` (bundled) or ``svhn`` (container)."""
    if name == "digits":
        return load_digits(split_name)
    if name == "svhn":
        path = cache_root(cache_dir) / "svhn" / f"{split_name}.tensors"
        if not path.exists():
            raise FetchError(f"SVHN expects a pre-converted container at {path}")
        return load_dataset_file(path)
    paths = fetch(name, cache_dir, offline)
    prefix = "train" if split_name in ("train", "val") else "t10k"
    return load_idx(paths[f"{prefix}-images-idx3-ubyte"], paths[f"{prefix}-labels-idx1-ubyte"],
                    split_name, name)


def load_digits(split_name: str = "train", test_fraction: float = 0.25) -> Dataset:
    """scikit-learn's bundled 8x8 digits, bilinearly upsampled to 28x28.

    A small offline stand-in for MNIST: same shape and class count, so every
    architecture and pipeline stage runs without network access.
    """
    from sklearn.datasets import load_digits as _sk_digits

    d = _sk_digits()
    x = d.images.astype(np.float64) / 16.0
    # 8x8 -> 28x28 with a 2-pixel border so strokes stay inside the frame
    up = ndimage.zoom(x, (1, 24 / 8, 24 / 8), order=1)
    x = np.zeros((len(x), 28, 28))
    x[:, 2:26, 2:26] = np.clip(up, 0, 1)
    order = np.random.default_rng(1234).permutation(len(x))
    n_test = int(len(x) * test_fraction)
    idx = order[:n_test] if split_name == "test" else order[n_test:]
    return Dataset(x[idx, None].astype(np.float32), d.target[idx], split_name, "digits",
                   provenance={"source": "sklearn.datasets.load_digits"})
