"""Command-line entry point: train, eval, gradcheck, entropy, selftest.

Configuration is a flat key=value file (one pair per line, full-line
comments with '#').  The network is a one-line chain of layer
descriptors, e.g.::

    model.layers = klconv v=8 r=3 s=3 mode=m link=logsimplex; lnorm; \
                   lpool r=2 s=2 stride=2; flatten; divg v=2 mode=m; lnorm

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import data as D
from . import layers as L
from . import model as M
from . import simplex
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    IngestionError,
    SpecError,
    TrainingAbort,
)
from .tensor import Tape, Tensor

GRADCHECK_THRESHOLD = 1e-5

_KEY_TYPES = {
    "dataset.kind": str,
    "dataset.path": str,
    "dataset.labels_path": str,
    "dataset.test_path": str,
    "dataset.test_labels_path": str,
    "dataset.classes": int,
    "dataset.per_class": int,
    "dataset.test_per_class": int,
    "dataset.height": int,
    "dataset.width": int,
    "dataset.states": int,
    "dataset.separation": float,
    "dataset.seed": int,
    "model.encoding": str,
    "model.layers": str,
    "train.epochs": int,
    "train.batch": int,
    "train.lr": float,
    "train.seed": int,
    "diag.out": str,
}

_LAYER_PARAMS = {
    "klconv": {"v", "r", "s", "stride", "pad", "mode", "link", "gamma", "alpha"},
    "divg": {"v", "mode", "link", "gamma", "alpha"},
    "lpool": {"r", "s", "stride"},
    "avgpool": {"r", "s", "stride"},
    "lnorm": set(),
    "softmax": set(),
    "flatten": set(),
}


def parse_config(text: str) -> dict:
    """Flat key=value config; unknown or duplicate keys are rejected."""
    cfg: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _KEY_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in cfg:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            cfg[key] = _KEY_TYPES[key](value)
        except ValueError:
            raise ConfigError(
                f"line {lineno}: cannot parse {value!r} as "
                f"{_KEY_TYPES[key].__name__} for {key}"
            ) from None
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def parse_layers(text: str) -> tuple[M.LayerSpec, ...]:
    """Semicolon-separated layer descriptors into LayerSpecs."""
    specs = []
    for part in text.split(";"):
        tokens = part.split()
        if not tokens:
            continue
        kind, params = tokens[0], tokens[1:]
        if kind not in _LAYER_PARAMS:
            raise ConfigError(f"unknown layer kind {kind!r} in {part.strip()!r}")
        kwargs: dict = {}
        for token in params:
            if "=" not in token:
                raise ConfigError(f"malformed layer parameter {token!r} in {part.strip()!r}")
            name, _, value = token.partition("=")
            if name not in _LAYER_PARAMS[kind]:
                raise ConfigError(f"layer {kind!r} does not take parameter {name!r}")
            try:
                if name in ("v", "r", "s", "stride"):
                    kwargs[name] = int(value)
                elif name in ("gamma", "alpha"):
                    kwargs[name] = float(value)
                else:
                    kwargs[name] = value
            except ValueError:
                raise ConfigError(f"cannot parse {token!r} in layer {kind!r}") from None
        specs.append(
            M.LayerSpec(
                kind=kind,
                filters=kwargs.get("v", 0),
                rows=kwargs.get("r", 1),
                cols=kwargs.get("s", 1),
                stride=kwargs.get("stride", 1),
                pad=kwargs.get("pad", "valid"),
                mode=kwargs.get("mode", "m"),
                link=kwargs.get("link", "logsimplex"),
                gamma=kwargs.get("gamma"),
                alpha=kwargs.get("alpha", 1.0),
            )
        )
    if not specs:
        raise ConfigError("model.layers is empty")
    return tuple(specs)


def _paths(value: str) -> list[str]:
    return [p.strip() for p in value.split(",") if p.strip()]


def _concat_sets(sets: list[D.LabeledImageSet]) -> D.LabeledImageSet:
    return D.LabeledImageSet(
        np.concatenate([s.images for s in sets]),
        np.concatenate([s.labels for s in sets]),
        sets[0].class_count,
    )


def build_datasets(cfg: dict) -> tuple[D.LabeledImageSet, D.LabeledImageSet | None]:
    """Load the train and (optional) test sets named by the config."""
    kind = cfg.get("dataset.kind")
    if kind is None:
        raise ConfigError("dataset.kind is required")
    if kind == "synth":
        classes = cfg.get("dataset.classes", 2)
        per_class = cfg.get("dataset.per_class", 500)
        test_per_class = cfg.get("dataset.test_per_class", per_class // 5)
        rng = np.random.default_rng(cfg.get("dataset.seed", 0))
        full = D.synth_fsd(
            classes,
            per_class + test_per_class,
            cfg.get("dataset.height", 8),
            cfg.get("dataset.width", 8),
            cfg.get("dataset.states", 2),
            cfg.get("dataset.separation", 0.8),
            rng,
        )
        train, test = D.split_per_class(full, per_class)
        return train, (test if len(test) else None)
    if kind in ("cifar10", "cifar100"):
        reader = D.read_cifar10 if kind == "cifar10" else D.read_cifar100
        if "dataset.path" not in cfg:
            raise ConfigError(f"dataset.path is required for {kind}")
        train = _concat_sets([reader(p) for p in _paths(cfg["dataset.path"])])
        test = None
        if "dataset.test_path" in cfg:
            test = _concat_sets([reader(p) for p in _paths(cfg["dataset.test_path"])])
        return train, test
    if kind == "mnist":
        if "dataset.path" not in cfg or "dataset.labels_path" not in cfg:
            raise ConfigError("mnist needs dataset.path and dataset.labels_path")
        train = D.read_mnist_idx(cfg["dataset.path"], cfg["dataset.labels_path"])
        test = None
        if "dataset.test_path" in cfg:
            if "dataset.test_labels_path" not in cfg:
                raise ConfigError("mnist test set needs dataset.test_labels_path")
            test = D.read_mnist_idx(
                cfg["dataset.test_path"], cfg["dataset.test_labels_path"]
            )
        return train, test
    raise ConfigError(f"unknown dataset.kind {kind!r}")


def build_network(cfg: dict, train: D.LabeledImageSet) -> M.NetworkSpec:
    if "model.layers" not in cfg:
        raise ConfigError("model.layers is required")
    net = M.NetworkSpec(
        input_shape=tuple(train.images.shape[1:]),
        encoding=cfg.get("model.encoding", "binary"),
        classes=train.class_count,
        layers=parse_layers(cfg["model.layers"]),
    )
    net.validate()
    return net


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


METRICS_HEADER = ["epoch", "train_loss", "train_top1", "test_top1", "test_top5"]
ENTROPY_HEADER = ["epoch", "layer", "filter_entropy", "bias_entropy", "input_entropy"]


def run_training(cfg: dict, out_dir: str, stream=sys.stdout) -> M.TrainState:
    """Train per config; writes checkpoint, metrics CSV, and entropy CSV."""
    train, test = build_datasets(cfg)
    net = build_network(cfg, train)
    seed = cfg.get("train.seed", 0)
    state = M.build(net, np.random.default_rng(seed))
    os.makedirs(out_dir, exist_ok=True)
    metric_rows: list[list] = []
    entropy_rows: list[list] = []
    for row, ent in M.train_epochs(
        state,
        train,
        test,
        epochs=cfg.get("train.epochs", 1),
        batch_size=cfg.get("train.batch", 64),
        lr=cfg.get("train.lr", 1.0),
        seed=seed,
    ):
        metric_rows.append(
            [
                row["epoch"],
                row["train_loss"],
                100.0 * row["train_top1"],
                100.0 * row["test_top1"],
                100.0 * row["test_top5"],
            ]
        )
        for e in ent:
            entropy_rows.append(
                [row["epoch"], e.layer, e.filter_entropy, e.bias_entropy, e.input_entropy]
            )
        print(
            f"epoch {row['epoch']}: loss {row['train_loss']:.4f} "
            f"train {100 * row['train_top1']:.2f}% test {100 * row['test_top1']:.2f}%",
            file=stream,
        )
    _write_csv(os.path.join(out_dir, "metrics.csv"), METRICS_HEADER, metric_rows)
    entropy_path = cfg.get("diag.out", "entropy.csv")
    if not os.path.isabs(entropy_path):
        entropy_path = os.path.join(out_dir, entropy_path)
    _write_csv(entropy_path, ENTROPY_HEADER, entropy_rows)
    M.save_checkpoint(os.path.join(out_dir, "checkpoint.fsd"), state)
    return state


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["train.seed"] = args.seed
    run_training(cfg, args.out)
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    state = M.load_checkpoint(args.checkpoint)
    train, test = build_datasets(cfg)
    dataset = test if test is not None else train
    if len(dataset) == 0:
        raise ConfigError("eval: dataset is empty")
    top1, top5 = M.evaluate(state, dataset.images, dataset.labels)
    print(f"top1={100 * top1:.2f} top5={100 * top5:.2f}")
    return 0


def gradcheck_battery(seed: int = 0) -> list[tuple[str, list[M.GradCheckRow]]]:
    """Small nets covering every layer kind, both divergences, both links."""
    rng = np.random.default_rng(seed)
    images = rng.random((3, 6, 6, 1))
    labels = rng.integers(0, 2, size=3)
    m_chain = (
        M.LayerSpec("klconv", filters=3, rows=3, cols=3, pad="same", mode="m"),
        M.LayerSpec("lnorm"),
        M.LayerSpec("lpool", rows=2, cols=2, stride=2),
        M.LayerSpec("flatten"),
        M.LayerSpec("divg", filters=2, mode="m"),
        M.LayerSpec("lnorm"),
    )
    i_chain = (
        M.LayerSpec("softmax"),
        M.LayerSpec("klconv", filters=3, rows=3, cols=3, pad="same", mode="i"),
        M.LayerSpec("softmax"),
        M.LayerSpec("avgpool", rows=2, cols=2, stride=2),
        M.LayerSpec("flatten"),
        M.LayerSpec("divg", filters=2, mode="i"),
        M.LayerSpec("lnorm"),
    )
    reports = []
    for name, chain, link in (
        ("m-logsimplex", m_chain, "logsimplex"),
        ("m-spherical", m_chain, "spherical"),
        ("i-logsimplex", i_chain, "logsimplex"),
        ("i-spherical", i_chain, "spherical"),
    ):
        linked = tuple(
            replace(spec, link=link) if spec.kind in ("klconv", "divg") else spec
            for spec in chain
        )
        net = M.NetworkSpec((6, 6, 1), "binary", 2, linked)
        state = M.build(net, np.random.default_rng(seed + 1))
        reports.append((name, M.gradient_check(state, images, labels)))
    return reports


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.config:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.get("train.seed", 0)
    worst = 0.0
    for name, rows in gradcheck_battery(seed):
        for r in rows:
            print(
                f"{name} layer {r.layer} ({r.kind}) {r.param}: "
                f"max rel err {r.max_rel_err:.3e}"
            )
            worst = max(worst, r.max_rel_err)
    ok = worst < GRADCHECK_THRESHOLD
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: worst {worst:.3e}")
    return 0 if ok else 4


def cmd_entropy(args) -> int:
    cfg = load_config(args.config)
    state = M.load_checkpoint(args.checkpoint)
    train, _ = build_datasets(cfg)
    probe = train.images[:256]
    rows = [
        [state.epoch, e.layer, e.filter_entropy, e.bias_entropy, e.input_entropy]
        for e in M.measure_entropy(state, probe)
    ]
    if args.out:
        _write_csv(args.out, ENTROPY_HEADER, rows)
    else:
        print(",".join(ENTROPY_HEADER))
        for row in rows:
            print(",".join(_fmt(v) for v in row))
    return 0


def _selftest_checks(seed: int):
    rng = np.random.default_rng(seed)

    def divg_oracle():
        worst = 0.0
        for _ in range(100):
            d = int(rng.integers(2, 8))
            theta = rng.normal(size=(3, 1, 1, 1, d))
            bias = rng.normal(size=3)
            bank = L.FilterBank(
                Tensor(theta, requires_grad=True),
                Tensor(bias, requires_grad=True),
                mode="logsimplex",
                divergence="m",
            )
            x = np.log(simplex.link_logsimplex(rng.normal(size=(2, 1, d))))
            got = L.divg_dense(Tensor(x), bank).data
            filters = simplex.link_logsimplex(theta)[:, 0, 0, 0, :]
            logp = simplex.safe_log(simplex.link_logsimplex(bias))
            for n in range(2):
                for v in range(3):
                    want = -simplex.kld_m(filters[v], x[n, 0]) + logp[v]
                    worst = max(worst, abs(got[n, v] - want))
        return worst < 1e-9, f"divergence-vs-KLD max |delta| {worst:.2e}"

    def closure():
        x = rng.normal(scale=3.0, size=(1000, 7))
        out = L.lnorm(Tensor(x)).data
        err = np.abs(np.exp(out).sum(axis=-1) - 1.0).max()
        logpmf = L.lnorm(Tensor(rng.normal(size=(50, 4, 4, 1, 5))))
        pooled = L.lpool(logpmf, 2, 2, 2).data
        err2 = np.abs(np.exp(pooled).sum(axis=-1) - 1.0).max()
        return max(err, err2) < 1e-7, f"normalization closure max error {max(err, err2):.2e}"

    def orthogonality():
        theta = rng.normal(size=(20, 6))
        upstream = rng.normal(size=(20, 6))
        g = simplex.link_vjp(theta, upstream, "spherical")
        cosine = np.abs((g * theta).sum(-1)) / (
            np.linalg.norm(g, axis=-1) * np.linalg.norm(theta, axis=-1)
        )
        return cosine.max() < 1e-8, f"spherical gradient orthogonality {cosine.max():.2e}"

    def gradients():
        worst = 0.0
        for _, rows in gradcheck_battery(seed):
            worst = max(worst, max(r.max_rel_err for r in rows))
        return worst < GRADCHECK_THRESHOLD, f"gradient suite worst rel err {worst:.2e}"

    return [
        ("divergence oracle", divg_oracle),
        ("normalization closure", closure),
        ("spherical orthogonality", orthogonality),
        ("gradient suite", gradients),
    ]


def cmd_selftest(args) -> int:
    seed = args.seed if args.seed is not None else 0
    failed = False
    for name, check in _selftest_checks(seed):
        ok, detail = check()
        print(f"selftest {name}: {'ok' if ok else 'FAIL'} ({detail})")
        failed = failed or not ok
    return 4 if failed else 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsdnet",
        description="Train and inspect finite-state distribution networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", default=".", help="output directory")
    p_train.add_argument("--seed", type=int, default=None, help="override train.seed")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the config's dataset")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_grad.add_argument("--config", default=None)
    p_grad.add_argument("--seed", type=int, default=None)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_ent = sub.add_parser("entropy", help="entropy report for a checkpoint")
    p_ent.add_argument("--config", required=True)
    p_ent.add_argument("--checkpoint", required=True)
    p_ent.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p_ent.set_defaults(func=cmd_entropy)

    p_self = sub.add_parser("selftest", help="run built-in numerical checks")
    p_self.add_argument("--seed", type=int, default=None)
    p_self.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, IngestionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (TrainingAbort, ContractError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
