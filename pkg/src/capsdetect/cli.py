"""Command-line driver: train, calibrate, attack and evaluate.

Every command reads a flat ``key = value`` config (``include = other.cfg``
pulls in another file; later keys win, command-line flags win over files)
and derives all randomness from one root seed through named substreams.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks, datio, detect, evalkit, nets
from . import ndgrad as G

log = logging.getLogger("capsdetect")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


class OutputError(RuntimeError):
    pass


@dataclass
class RunConfig:
    dataset: str = "mnist"
    arch: str = "capsnet"
    preset: str = ""
    seed: int = 0
    out: str = "runs/default"
    data_cache: str = ""
    offline: bool = False
    threads: int = 1
    # training
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    recon_weight: float = 0.0005
    train_subset: int = 10000
    val_fraction: float = 0.1
    # detector
    percentile: float = 95.0
    # attacks
    attack: str = "pgd"
    targeted: bool = False
    epsilon: float = 0.0  # 0 means the dataset default
    step: float = 0.0
    iters: int = 0
    beta: float = -1.0  # negative means the family default
    n: int = 100
    betas: str = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"
    per_pair: int = 100
    corruptions: str = "identity,gaussian_noise,gaussian_blur,rotate,shear,contrast,inverse,saturate,dotted_line,zigzag"
    external_corrupted: str = ""
    substitute_seed: int = 1
    checkpoint: str = ""
    detector: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_config(self) -> nets.ArchConfig:
        name = self.preset or ("fashion" if self.dataset == "fashion" else
                               "svhn" if self.dataset == "svhn" else "mnist")
        return nets.preset(name, self.arch)

    def attack_spec(self) -> attacks.AttackSpec:
        over = {}
        if self.epsilon > 0:
            over["epsilon"] = self.epsilon
        if self.step > 0:
            over["step"] = self.step
        if self.iters > 0:
            over["iters"] = self.iters
        if self.beta >= 0:
            over["beta"] = self.beta
        return attacks.AttackSpec.default(self.attack, self.dataset, self.targeted, **over)

    def beta_list(self) -> list[float]:
        return [float(b) for b in self.betas.split(",") if b.strip()]


# ---------------------------------------------------------------------- config
def read_config(path, _seen=None) -> dict[str, str]:
    """Parse a flat key=value file; ``include = path`` is resolved relative to it."""
    path = Path(path).resolve()
    seen = set() if _seen is None else _seen
    if path in seen:
        raise ValueError(f"include cycle at {path}")
    seen.add(path)
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "include":
            out.update(read_config(path.parent / value, seen))
        else:
            out[key] = value
    return out


def _coerce(value: str, kind):
    if kind is bool or kind == "bool":
        if isinstance(value, bool):
            return value
        low = str(value).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return {"int": int, "float": float, "str": str}.get(kind, kind)(value)


def build_config(file_values: dict, overrides: dict) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    kwargs, extra = {}, {}
    for source in (file_values, overrides):
        for key, value in source.items():
            if value is None:
                continue
            if key in fields and key != "extra":
                kwargs[key] = _coerce(value, fields[key].type)
            else:
                extra[key] = value
    return RunConfig(**kwargs, extra=extra)


def substream(root: int, name: str) -> np.random.Generator:
    """Independent generator for a named stage, fixed by the root seed."""
    return np.random.default_rng(np.random.SeedSequence([root, zlib.crc32(name.encode())]))


def substream_seed(root: int, name: str) -> int:
    return int(substream(root, name).integers(2**31))


# -------------------------------------------------------------------- helpers
def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _sidecar(cfg: RunConfig, command: str, **info) -> None:
    # timestamps live only here so the real outputs stay byte-stable
    with open(_out(cfg) / "run.log", "a") as f:
        f.write(json.dumps({"time": time.strftime("%Y-%m-%dT%H:%M:%S"), "command": command, **info}) + "\n")


def _validate(*paths: Path) -> None:
    for p in paths:
        if not Path(p).exists() or (Path(p).is_file() and Path(p).stat().st_size == 0):
            raise OutputError(f"expected output {p} missing or empty")


def _data(cfg: RunConfig, split_name: str) -> datio.Dataset:
    return datio.load(cfg.dataset, split_name, cfg.data_cache or None, cfg.offline)


def _model(cfg: RunConfig) -> nets.ModelBundle:
    path = cfg.checkpoint or str(Path(cfg.out) / "model.ckpt")
    return nets.ModelBundle.load(path)


def _detector(cfg: RunConfig, model) -> detect.Detector:
    path = cfg.detector or str(Path(cfg.out) / "detector.json")
    return detect.Detector.load(path, model)


def _attack_slice(cfg: RunConfig, ds: datio.Dataset, model=None, stream: str = "attack"):
    """Seeded choice of n test samples (correctly classified when a model is
    given) plus uniformly drawn wrong-label targets."""
    rng = substream(cfg.seed, stream)
    pool = np.arange(len(ds))
    if model is not None:
        pool = pool[model.predict(ds.images) == ds.labels]
    n = min(cfg.n, len(pool))
    idx = np.sort(rng.choice(pool, size=n, replace=False)) if n else np.zeros(0, dtype=np.int64)
    targets = attacks.random_targets(ds.labels[idx], ds.n_classes, rng)
    return idx, targets, rng


# ------------------------------------------------------------------- commands
def cmd_train(cfg: RunConfig) -> Path:
    out = _out(cfg)
    full = _data(cfg, "train")
    if cfg.train_subset and cfg.train_subset < len(full):
        keep = np.sort(substream(cfg.seed, "subset").choice(len(full), cfg.train_subset, replace=False))
        full = full.subset(keep)
    train, val = datio.split(full, cfg.val_fraction, substream_seed(cfg.seed, "split"))
    model = nets.ModelBundle.create(cfg.model_config(), seed=substream_seed(cfg.seed, "init"),
                                    meta={"dataset": cfg.dataset, "seed": cfg.seed})
    history = nets.train(model, train.images, train.labels, val.images, val.labels,
                         epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                         recon_weight=cfg.recon_weight, rng=substream(cfg.seed, "train"))
    ckpt = model.save(out / "model.ckpt")
    datio.save_dataset(val, out / "val.tensors")
    with open(out / "train_log.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "class_loss", "recon_sse", "val_error"])
        for e in history:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.class_loss), repr(e.recon_sse), repr(e.val_error)])
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    _validate(ckpt, out / "val.tensors", out / "train_log.csv")
    _sidecar(cfg, "train", params=model.param_count())
    print(f"checkpoint {ckpt} val_error {history[-1].val_error:.4f}" if history else f"checkpoint {ckpt}")
    return ckpt


def cmd_calibrate(cfg: RunConfig) -> Path:
    model = _model(cfg)
    val_path = Path(cfg.extra.get("val", Path(cfg.checkpoint or Path(cfg.out) / "model.ckpt").parent / "val.tensors"))
    if not val_path.exists():
        raise FileNotFoundError(f"validation split {val_path} not found")
    val = datio.load_dataset_file(val_path)
    det = detect.calibrate_threshold(model, val.images, cfg.percentile, cfg.dataset)
    path = det.save(_out(cfg) / "detector.json")
    detect.Detector.load(path)
    _validate(path)
    print(f"theta {det.theta:.6f} from {det.n_calibration} samples")
    return path


def cmd_attack(cfg: RunConfig) -> evalkit.EvalReport:
    model = _model(cfg)
    det = _detector(cfg, model)
    spec = cfg.attack_spec()
    test = _data(cfg, "test")
    idx, targets, rng = _attack_slice(cfg, test, model)
    adv = attacks.run_attack(model, test.images[idx], test.labels[idx], spec,
                             targets if spec.targeted else None, rng=rng, indices=idx)
    out = _out(cfg)
    adv_dir = adv.save(out / "adv", seed=cfg.seed, dataset=cfg.dataset)
    rep = evalkit.evaluate_attack(model, det, adv)
    csv_path, json_path = rep.write(out, "attack", adv.x_adv)
    _validate(adv_dir / "manifest.json", csv_path, json_path)
    _sidecar(cfg, "attack", n=rep.n)
    print(f"n {rep.n} S {rep.success} R {rep.undetected}")
    return rep


def cmd_sweep_beta(cfg: RunConfig) -> attacks.BetaSweep:
    model = _model(cfg)
    det = _detector(cfg, model)
    spec = cfg.attack_spec()
    test = _data(cfg, "test")
    idx, targets, _ = _attack_slice(cfg, test, model)
    sweep = attacks.beta_sweep(model, det, test.images[idx], test.labels[idx], spec, cfg.beta_list(),
                               targets if spec.targeted else None, seed=substream_seed(cfg.seed, "attack"))
    path = _out(cfg) / "sweep.csv"
    path.write_text(sweep.to_csv())
    _validate(path)
    print(f"worst beta {sweep.worst_beta}")
    return sweep


def cmd_matrix(cfg: RunConfig) -> evalkit.ClassPairMatrix:
    model = _model(cfg)
    det = _detector(cfg, model)
    spec = cfg.attack_spec()
    test = _data(cfg, "test")
    mat = evalkit.class_pair_matrix(model, det, test, spec, cfg.per_pair, substream(cfg.seed, "matrix"))
    path = _out(cfg) / "matrix.csv"
    path.write_text(mat.to_csv())
    _validate(path)
    print(f"variance {mat.variance():.5f}")
    return mat


def cmd_curve(cfg: RunConfig) -> list[evalkit.CurvePoint]:
    model = _model(cfg)
    det = _detector(cfg, model)
    spec = cfg.attack_spec()
    test = _data(cfg, "test")
    idx, targets, rng = _attack_slice(cfg, test, model)
    adv = attacks.run_attack(model, test.images[idx], test.labels[idx], spec,
                             targets if spec.targeted else None, rng=rng, indices=idx)
    rep = evalkit.evaluate_attack(model, det, adv)
    clean = np.delete(np.arange(len(test)), idx)
    clean_d = detect.distance(model, test.images[clean])
    points = evalkit.fpr_curve(clean_d, rep.records, spec.targeted)
    path = _out(cfg) / "curve.csv"
    path.write_text(evalkit.curve_to_csv(points))
    evalkit.load_curve_csv(path)
    return points


def cmd_corrupt(cfg: RunConfig) -> list[evalkit.CorruptionRow]:
    model = _model(cfg)
    det = _detector(cfg, model)
    test = _data(cfg, "test")
    if cfg.n and cfg.n < len(test):
        test = test.subset(np.sort(substream(cfg.seed, "corrupt-subset").choice(len(test), cfg.n, replace=False)))
    sets = {}
    for kind in (k.strip() for k in cfg.corruptions.split(",") if k.strip()):
        sets[kind] = datio.corrupt(test, datio.CorruptionSpec(kind), substream_seed(cfg.seed, "corrupt-" + kind))
    if cfg.external_corrupted:
        sets.update(datio.load_external_corrupted(cfg.external_corrupted))
    rows = evalkit.corruption_report(model, det, sets)
    path = _out(cfg) / "corrupt.csv"
    path.write_text(evalkit.corruption_csv(rows))
    _validate(path)
    return rows


def cmd_blackbox(cfg: RunConfig) -> evalkit.EvalReport:
    victim = _model(cfg)
    det = _detector(cfg, victim)
    out = _out(cfg)
    sub_cfg = dataclasses.replace(cfg, seed=cfg.substitute_seed, out=str(out / "substitute"),
                                  arch=victim.arch, checkpoint="")
    sub_path = out / "substitute" / "model.ckpt"
    if not sub_path.exists():
        cmd_train(sub_cfg)
    substitute = nets.ModelBundle.load(sub_path)
    spec = cfg.attack_spec()
    test = _data(cfg, "test")
    idx, targets, rng = _attack_slice(cfg, test, victim)
    rep = attacks.blackbox_transfer(substitute, victim, det, test.images[idx], test.labels[idx], spec,
                                    targets if spec.targeted else None, rng)
    csv_path, json_path = rep.write(out, "blackbox")
    (out / "blackbox_manifest.json").write_text(json.dumps(
        {"mode": "blackbox", "spec": spec.to_dict(), "seed": cfg.seed, "substitute_seed": cfg.substitute_seed,
         "indices": idx.tolist()}, indent=1, sort_keys=True) + "\n")
    _validate(csv_path, json_path)
    print(f"blackbox n {rep.n} S {rep.success} R {rep.undetected}")
    return rep


def gradcheck_suite(tol: float = 1e-3, probes: int = 20, seed: int = 0) -> dict[str, float]:
    """Finite-difference check of every differentiable op and the model losses."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    labels = np.array([0, 2, 1])
    cases = {
        "matmul": (lambda a, b: G.sum(G.matmul(a, b)), [r(3, 4), r(4, 2)]),
        "bmm": (lambda a, b: G.sum(G.square(G.bmm(a, b))), [r(2, 3, 4), r(2, 4, 2)]),
        "einsum": (lambda a, b: G.sum(G.square(G.einsum("nik,nikd->nkd", a, b))), [r(2, 3, 4), r(2, 3, 4, 5)]),
        "conv2d": (lambda x, w: G.sum(G.square(G.conv2d(x, w, stride=2, padding=1))), [r(2, 2, 7, 7), r(3, 2, 3, 3)]),
        "add_mul_sub": (lambda a, b: G.sum(G.mul(G.add(a, b), G.sub(a, b))), [r(3, 4), r(3, 4)]),
        "scale": (lambda a: G.sum(G.square(G.scale(a, 2.5))), [r(4)]),
        "relu": (lambda a: G.sum(G.square(G.relu(a))), [r(5, 3)]),
        "sigmoid": (lambda a: G.sum(G.sigmoid(a)), [r(5, 3)]),
        "tanh": (lambda a: G.sum(G.tanh(a)), [r(5, 3)]),
        "clamp": (lambda a: G.sum(G.square(G.clamp(a, -0.5, 0.5))), [r(5, 3)]),
        "sqrt": (lambda a: G.sum(G.sqrt(a)), [np.abs(r(6)) + 0.5]),
        "softmax": (lambda a, w: G.sum(G.mul(G.softmax(a, axis=1), w)), [r(3, 5), r(3, 5)]),
        "log_softmax": (lambda a, w: G.sum(G.mul(G.log_softmax(a, axis=1), w)), [r(3, 5), r(3, 5)]),
        "cross_entropy": (lambda a: G.cross_entropy(a, labels), [r(3, 4)]),
        "mean": (lambda a: G.sum(G.mean(G.square(a), axis=0)), [r(3, 4)]),
        "max": (lambda a: G.sum(G.reduce("max", a, axis=1)), [r(3, 4)]),
        "l2_norm": (lambda a: G.sum(G.l2_norm(a, axis=1)), [r(3, 4)]),
        "reshape_transpose": (lambda a, w: G.sum(G.mul(G.transpose(G.reshape(a, (3, 4, 2)), (2, 0, 1)), w)),
                              [r(6, 4), r(2, 3, 4)]),
        "crop": (lambda a: G.sum(G.square(G.crop(a, 3, 2))), [r(1, 2, 4, 4)]),
        "broadcast_to": (lambda a, w: G.sum(G.mul(G.broadcast_to(a, (3, 4)), w)), [r(1, 4), r(3, 4)]),
        "add_bias": (lambda a, b: G.sum(G.square(G.add_bias(a, b, axis=1))), [r(2, 3, 4), r(3)]),
        "mask_select": (lambda p: G.sum(G.square(G.mask_select(p, np.array([1, 0])))), [r(2, 3, 4)]),
        "squash": (lambda s: G.sum(G.mul(G.squash(s), G.tensor(np.linspace(-1, 1, 12).reshape(3, 4)))), [r(3, 4)]),
        "routing": (lambda u: G.sum(G.square(nets.dynamic_routing(u, 3))), [r(2, 6, 3, 4) * 0.5]),
        "margin_loss": (lambda a: nets.margin_loss(G.sigmoid(a), labels), [r(3, 4)]),
    }
    results = {}
    for name, (fn, inputs) in cases.items():
        results[name] = G.gradcheck(fn, inputs, probes=probes, rng=np.random.default_rng(seed))
    results.update(model_gradchecks(probes, seed))
    return results


def model_gradchecks(probes: int = 20, seed: int = 0) -> dict[str, float]:
    """Full training loss of each architecture (small config) w.r.t. inputs and parameters."""
    out = {}
    rng = np.random.default_rng(seed)
    x = rng.random((2, 1, 12, 12))
    y = np.array([1, 0])
    for arch in nets.ARCHITECTURES:
        cfg = nets.ArchConfig(arch, input_shape=(1, 12, 12), n_classes=3, conv1_channels=4, conv1_kernel=3,
                              primary_types=2, primary_dim=4, primary_kernel=3, primary_stride=2,
                              pose_dim=4, decoder_hidden=(8, 8))
        base = nets.ModelBundle.create(cfg, seed=seed).astype(np.float64)
        names = list(base.params)

        def loss(xt, *ps):
            m = nets.ModelBundle(cfg, dict(zip(names, ps)))
            return nets.total_loss(m, xt, y, recon_weight=0.5)[0]

        # biases start at zero, which parks relu inputs on their kink; probe a generic point
        inputs = [x] + [base.params[k].data + (0.1 * rng.standard_normal(base.params[k].shape)
                                               if k.endswith(".b") else 0) for k in names]
        out[f"{arch}_loss"] = G.gradcheck(loss, inputs, probes=probes, rng=np.random.default_rng(seed))
    return out


def cmd_gradcheck(cfg: RunConfig) -> int:
    tol = float(cfg.extra.get("tol", 1e-3))
    results = gradcheck_suite(tol, seed=cfg.seed)
    bad = 0
    for name, err in results.items():
        ok = err < tol
        bad += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:20s} {err:.3e}")
    return EXIT_OK if bad == 0 else EXIT_FAIL


COMMANDS = {
    "train": cmd_train, "calibrate": cmd_calibrate, "attack": cmd_attack, "sweep-beta": cmd_sweep_beta,
    "matrix": cmd_matrix, "curve": cmd_curve, "corrupt": cmd_corrupt, "blackbox": cmd_blackbox,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset globals from clobbering ones given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = common.add_argument_group("global")
    g.add_argument("--config", help="key = value config file")
    g.add_argument("--seed", type=int)
    g.add_argument("--data-cache", dest="data_cache")
    g.add_argument("--offline", action="store_const", const="true")
    g.add_argument("--out")
    g.add_argument("--threads", type=int)
    g.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key")
    g.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="capsdetect", parents=[common],
                                description="Capsule reconstruction detector experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--dataset")
        sp.add_argument("--arch", choices=nets.ARCHITECTURES)
        sp.add_argument("--preset")
        sp.add_argument("--checkpoint")
        sp.add_argument("--detector")
        if name == "train":
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--batch-size", dest="batch_size", type=int)
            sp.add_argument("--train-subset", dest="train_subset", type=int)
        if name == "calibrate":
            sp.add_argument("--percentile", type=float)
        if name in ("attack", "sweep-beta", "matrix", "curve", "blackbox"):
            sp.add_argument("--attack", choices=attacks.FAMILIES)
            sp.add_argument("--targeted", action="store_const", const="true")
            sp.add_argument("--epsilon", type=float)
            sp.add_argument("--step", type=float)
            sp.add_argument("--iters", type=int)
            sp.add_argument("--beta", type=float)
        if name in ("attack", "sweep-beta", "curve", "corrupt", "blackbox"):
            sp.add_argument("-n", type=int)
        if name == "sweep-beta":
            sp.add_argument("--betas")
        if name == "matrix":
            sp.add_argument("--per-pair", dest="per_pair", type=int)
        if name == "blackbox":
            sp.add_argument("--substitute-seed", dest="substitute_seed", type=int)
        if name == "corrupt":
            sp.add_argument("--corruptions")
            sp.add_argument("--external", dest="external_corrupted")
    return p


def parse_config(argv) -> tuple[str, RunConfig, bool]:
    args = build_parser().parse_args(argv)
    values = vars(args).copy()
    command = values.pop("command")
    verbose = values.pop("verbose", False)
    sets = values.pop("set", [])
    file_values = read_config(values.pop("config")) if values.get("config") else {}
    values.pop("config", None)
    for item in sets:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip().replace("-", "_")] = v.strip()
    return command, build_config(file_values, values), verbose


def main(argv=None) -> int:
    try:
        command, cfg, verbose = parse_config(argv)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=cfg.threads):
            result = COMMANDS[command](cfg)
    except (datio.FetchError, datio.DataError) as exc:
        print(f"data unavailable: {exc}", file=sys.stderr)
        return EXIT_DATA
    except nets.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OutputError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return result if isinstance(result, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
