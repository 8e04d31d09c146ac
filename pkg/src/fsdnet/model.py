"""Network assembly from declarative specs, SGD training, and diagnostics.

A network is a chain of layer specs validated at build time: divergence
layers in M mode pair with lnorm/lpool, I mode with softmax/avgpool,
and every network ends with an lnorm head producing per-class
log-posteriors.  Training is plain SGD at a fixed learning rate with
no momentum or weight decay.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from typing import Iterator

import numpy as np

from . import layers as L
from . import simplex
from .data import LabeledImageSet, shuffle_batches
from .errors import ContractError, DimensionError, FormatError, SpecError, TrainingAbort
from .layers import FilterBank, make_filter_bank
from .tensor import Tape, Tensor

CHECKPOINT_MAGIC = b"FSD1"

_LAYER_KINDS = ("klconv", "lnorm", "softmax", "lpool", "avgpool", "flatten", "divg")


@dataclass(frozen=True)
class LayerSpec:
    """One layer in a network description."""

    kind: str
    filters: int = 0
    rows: int = 1
    cols: int = 1
    stride: int = 1
    pad: str = "valid"
    mode: str = "m"
    link: str = "logsimplex"
    gamma: float | None = None
    alpha: float = 1.0

    def describe(self) -> str:
        if self.kind in ("klconv", "divg"):
            return f"{self.kind}[mode={self.mode}]"
        return self.kind


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative architecture: input image shape, encoding, and layer chain."""

    input_shape: tuple[int, int, int]
    encoding: str
    classes: int
    layers: tuple[LayerSpec, ...]

    def validate(self) -> list[tuple]:
        """Shape/mode walk; returns the state entering each layer."""
        return _walk(self)[0]


# Shape states used by the validation walk:
#   ("pmf", h, w, g, d, domain)   spatial factorized pmf, domain "log"|"prob"
#   ("scores", h, w, v)           raw divergence scores on the grid
#   ("pmf_flat", k, d, domain)    flattened factors
#   ("scores_flat", v)            dense divergence scores
#   ("pmf_final", v)              log-posterior head output


def _conv_extent(extent: int, kernel: int, stride: int, pad: str) -> int:
    padded = extent + (2 * ((kernel - 1) // 2) if pad == "same" else 0)
    if kernel > padded:
        raise SpecError(
            f"kernel extent {kernel} larger than (padded) input extent {padded}"
        )
    return (padded - kernel) // stride + 1


def _check_layer_fields(i: int, spec: LayerSpec) -> None:
    if spec.kind not in _LAYER_KINDS:
        raise SpecError(f"layer {i}: unknown kind {spec.kind!r}")
    if spec.kind in ("klconv", "divg"):
        if spec.filters < 1:
            raise SpecError(f"layer {i} ({spec.kind}): needs filters >= 1")
        if spec.mode not in ("m", "i"):
            raise SpecError(f"layer {i} ({spec.kind}): mode must be 'm' or 'i'")
        if spec.link not in simplex.LINK_MODES:
            raise SpecError(f"layer {i} ({spec.kind}): unknown link {spec.link!r}")
        if spec.gamma is not None and spec.gamma < 1.0:
            raise SpecError(f"layer {i} ({spec.kind}): gamma must be >= 1")
        if spec.alpha < 0.0:
            raise SpecError(f"layer {i} ({spec.kind}): alpha must be >= 0")
    if spec.kind in ("klconv", "lpool", "avgpool"):
        if spec.rows < 1 or spec.cols < 1 or spec.stride < 1:
            raise SpecError(f"layer {i} ({spec.kind}): window and stride must be >= 1")
    if spec.kind == "klconv" and spec.pad not in ("same", "valid"):
        raise SpecError(f"layer {i} (klconv): pad must be 'same' or 'valid'")


def _walk(net: NetworkSpec) -> tuple[list[tuple], tuple]:
    h, w, c = net.input_shape
    if h < 1 or w < 1 or c < 1:
        raise SpecError(f"invalid input shape {net.input_shape}")
    if net.classes < 2:
        raise SpecError(f"need at least 2 classes, got {net.classes}")
    if net.encoding == "binary":
        state: tuple = ("pmf", h, w, c, 2, "log")
    elif net.encoding == "channel_simplex":
        if c < 2:
            raise SpecError("channel_simplex encoding needs at least 2 channels")
        state = ("pmf", h, w, 1, c, "log")
    else:
        raise SpecError(f"unknown encoding {net.encoding!r}")

    inputs: list[tuple] = []
    last_divg: tuple[int, str] | None = None
    n_layers = len(net.layers)
    for i, spec in enumerate(net.layers):
        _check_layer_fields(i, spec)
        inputs.append(state)
        kind = spec.kind
        is_last = i == n_layers - 1

        if kind == "klconv":
            if state[0] != "pmf":
                raise SpecError(
                    f"layer {i} (klconv) needs a spatial pmf input, got {state[0]}"
                )
            _, sh, sw, g, d, domain = state
            need = "log" if spec.mode == "m" else "prob"
            if domain != need:
                raise SpecError(
                    f"layer {i} (klconv mode={spec.mode}) needs {need}-domain input, "
                    f"got {domain}-domain"
                )
            try:
                oh = _conv_extent(sh, spec.rows, spec.stride, spec.pad)
                ow = _conv_extent(sw, spec.cols, spec.stride, spec.pad)
            except SpecError as exc:
                raise SpecError(f"layer {i} (klconv): {exc}") from None
            state = ("scores", oh, ow, spec.filters)
            last_divg = (i, spec.mode)

        elif kind == "lnorm":
            if last_divg is not None and last_divg[1] == "i" and not is_last:
                j, _ = last_divg
                raise SpecError(
                    f"layer {i} (lnorm) cannot follow layer {j} "
                    f"({net.layers[j].describe()}); I divergence pairs with softmax"
                )
            if state[0] == "scores":
                _, sh, sw, v = state
                state = ("pmf", sh, sw, 1, v, "log")
            elif state[0] == "scores_flat":
                state = ("pmf_final", state[1])
            elif state[0] in ("pmf", "pmf_flat") and state[-1] == "log":
                pass  # idempotent renormalization
            else:
                raise SpecError(
                    f"layer {i} (lnorm) cannot take input state {state[0]}"
                )

        elif kind == "softmax":
            if last_divg is not None and last_divg[1] == "m":
                j, _ = last_divg
                raise SpecError(
                    f"layer {i} (softmax) cannot follow layer {j} "
                    f"({net.layers[j].describe()}); M divergence pairs with lnorm"
                )
            if state[0] == "scores":
                _, sh, sw, v = state
                state = ("pmf", sh, sw, 1, v, "prob")
            elif state[0] == "pmf" and state[5] == "log":
                state = state[:5] + ("prob",)
            elif state[0] == "pmf_flat" and state[3] == "log":
                state = state[:3] + ("prob",)
            else:
                raise SpecError(
                    f"layer {i} (softmax) cannot take input state {state[0]}"
                )

        elif kind in ("lpool", "avgpool"):
            want = "log" if kind == "lpool" else "prob"
            bad_mode = "i" if kind == "lpool" else "m"
            if last_divg is not None and last_divg[1] == bad_mode:
                j, _ = last_divg
                raise SpecError(
                    f"layer {i} ({kind}) cannot follow layer {j} "
                    f"({net.layers[j].describe()})"
                )
            if state[0] != "pmf" or state[5] != want:
                raise SpecError(
                    f"layer {i} ({kind}) needs a {want}-domain spatial pmf, got {state}"
                )
            _, sh, sw, g, d, domain = state
            if spec.rows > sh or spec.cols > sw:
                raise SpecError(
                    f"layer {i} ({kind}): window {spec.rows}x{spec.cols} exceeds "
                    f"input {sh}x{sw}"
                )
            oh = (sh - spec.rows) // spec.stride + 1
            ow = (sw - spec.cols) // spec.stride + 1
            state = ("pmf", oh, ow, g, d, domain)

        elif kind == "flatten":
            if state[0] != "pmf":
                raise SpecError(f"layer {i} (flatten) needs a spatial pmf input")
            _, sh, sw, g, d, domain = state
            state = ("pmf_flat", sh * sw * g, d, domain)

        elif kind == "divg":
            if state[0] != "pmf_flat":
                raise SpecError(
                    f"layer {i} (divg) needs a flattened pmf input (add flatten first)"
                )
            _, k, d, domain = state
            need = "log" if spec.mode == "m" else "prob"
            if domain != need:
                raise SpecError(
                    f"layer {i} (divg mode={spec.mode}) needs {need}-domain input, "
                    f"got {domain}-domain"
                )
            state = ("scores_flat", spec.filters)
            last_divg = (i, spec.mode)

    # valid heads: lnorm over dense scores, or a spatial/flat log pmf fully
    # reduced to a single factor (e.g. a lone klconv + lnorm classifier)
    if state[0] == "pmf_final":
        width = state[1]
    elif state[0] == "pmf" and state[1:4] == (1, 1, 1) and state[5] == "log":
        width = state[4]
    elif state[0] == "pmf_flat" and state[1] == 1 and state[3] == "log":
        width = state[2]
    else:
        raise SpecError(
            f"network must end with an lnorm head, final state is {state}"
        )
    if width != net.classes:
        raise SpecError(
            f"final layer width {width} does not match class count {net.classes}"
        )
    return inputs, state


@dataclass
class TrainState:
    """Trainable seeds plus training-loop bookkeeping."""

    spec: NetworkSpec
    banks: dict[int, FilterBank]
    epoch: int = 0
    lr: float = 1.0
    train_seed: int | None = None
    diagnostics: list = field(default_factory=list)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i in sorted(self.banks):
            out.append((f"layer{i}.seeds", self.banks[i].seeds))
            out.append((f"layer{i}.bias", self.banks[i].bias_seed))
        return out


def default_gamma(filters: int) -> float:
    """Rule-of-thumb seed sharpening: log of the filter count, at least 1."""
    return max(1.0, math.log(filters))


def build(net: NetworkSpec, rng: np.random.Generator) -> TrainState:
    """Validate the spec and initialize every filter bank per its link mode."""
    inputs = net.validate()
    banks: dict[int, FilterBank] = {}
    for i, spec in enumerate(net.layers):
        if spec.kind == "klconv":
            _, _, _, g, d, _ = inputs[i]
            r, s = spec.rows, spec.cols
        elif spec.kind == "divg":
            _, g, d, _ = inputs[i]
            r = s = 1
        else:
            continue
        gamma = spec.gamma if spec.gamma is not None else default_gamma(spec.filters)
        banks[i] = make_filter_bank(
            spec.filters, r, s, g, d, spec.link, spec.mode, gamma, spec.alpha, rng
        )
    return TrainState(spec=net, banks=banks)


def encode_batch(net: NetworkSpec, images: np.ndarray) -> Tensor:
    """Apply the spec's input encoding to a raw (N, H, W, C) image batch."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != tuple(net.input_shape):
        raise DimensionError(
            f"batch shape {images.shape} does not match spec input "
            f"(N, {', '.join(map(str, net.input_shape))})"
        )
    if net.encoding == "binary":
        return L.encode_binary(images)
    return L.encode_channel_simplex(images)


def forward(state: TrainState, x: Tensor, taps: list | None = None) -> Tensor:
    """Run the network on an encoded batch; returns (N, classes) log-posteriors.

    When ``taps`` is a list, (layer index, input array, divergence mode)
    is appended for every divergence layer, for entropy diagnostics.
    """
    cur = x
    for i, spec in enumerate(state.spec.layers):
        kind = spec.kind
        if kind == "klconv":
            bank = state.banks[i]
            if taps is not None:
                taps.append((i, cur.data, bank.divergence))
            op = L.klconv_m if spec.mode == "m" else L.klconv_i
            cur = op(cur, bank, stride=spec.stride, pad=spec.pad)
        elif kind == "lnorm":
            cur = L.lnorm(cur)
            if cur.ndim == 4:
                n, h, w, v = cur.shape
                cur = cur.reshape(n, h, w, 1, v)
        elif kind == "softmax":
            cur = L.softmax_nl(cur)
            if cur.ndim == 4:
                n, h, w, v = cur.shape
                cur = cur.reshape(n, h, w, 1, v)
        elif kind == "lpool":
            cur = L.lpool(cur, spec.rows, spec.cols, stride=spec.stride)
        elif kind == "avgpool":
            cur = L.avgpool_prob(cur, spec.rows, spec.cols, stride=spec.stride)
        elif kind == "flatten":
            n, h, w, g, d = cur.shape
            cur = cur.reshape(n, h * w * g, d)
        elif kind == "divg":
            bank = state.banks[i]
            if taps is not None:
                taps.append((i, cur.data, bank.divergence))
            cur = L.divg_dense(cur, bank)
    if cur.ndim > 2:  # fully reduced spatial head: drop the unit axes
        cur = cur.reshape(cur.shape[0], cur.shape[-1])
    return cur


def loss_nll(logpost: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-posterior of the true classes."""
    labels = np.asarray(labels, dtype=np.int64)
    n, v = logpost.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} for {n} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= v):
        raise ContractError(f"labels outside [0, {v}) found")
    mask = np.zeros((n, v))
    mask[np.arange(n), labels] = 1.0
    return (logpost * Tensor(mask)).sum() * (-1.0 / n)


def sgd_step(state: TrainState, grads: dict[Tensor, np.ndarray], lr: float = 1.0) -> TrainState:
    """Plain gradient step on every seed; no momentum, no weight decay."""
    for i in sorted(state.banks):
        bank = state.banks[i]
        for attr in ("seeds", "bias_seed"):
            t: Tensor = getattr(bank, attr)
            g = grads.get(t)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingAbort(
                    f"non-finite gradient in layer {i} "
                    f"({state.spec.layers[i].describe()}, {attr})"
                )
            setattr(bank, attr, Tensor(t.data - lr * g, requires_grad=True))
    return state


@dataclass(frozen=True)
class LayerEntropy:
    """Entropy snapshot of one divergence layer (all values in nats)."""

    layer: int
    kind: str
    filter_entropy: float
    bias_entropy: float
    input_entropy: float


def measure_entropy(state: TrainState, images: np.ndarray) -> list[LayerEntropy]:
    """Exact filter/bias entropies plus mean input entropy on a probe batch.

    Filter entropy is the mean over all factor distributions of the
    layer, so every value lies in [0, log D]; bias entropy is the
    entropy of the mixing distribution over the V filters.
    """
    x = encode_batch(state.spec, images)
    taps: list = []
    forward(state, x, taps=taps)
    rows = []
    for i, data, divergence in taps:
        bank = state.banks[i]
        filters = simplex.link(bank.seeds.data, bank.mode)
        fent = float(simplex.entropy(filters).mean())
        bent = float(simplex.entropy(simplex.link(bank.bias_seed.data, bank.mode)))
        if divergence == "m":
            ient = float((-(np.exp(data) * data).sum(axis=-1)).mean())
        else:
            ient = float(simplex.entropy(data).mean())
        rows.append(
            LayerEntropy(
                layer=i,
                kind=state.spec.layers[i].kind,
                filter_entropy=fent,
                bias_entropy=bent,
                input_entropy=ient,
            )
        )
    return rows


def predict_scores(state: TrainState, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Log-posteriors for a raw image array, evaluated without a tape."""
    chunks = []
    for start in range(0, len(images), batch_size):
        x = encode_batch(state.spec, images[start:start + batch_size])
        chunks.append(forward(state, x).data)
    return np.concatenate(chunks, axis=0)


def evaluate(
    state: TrainState, images: np.ndarray, labels: np.ndarray, batch_size: int = 512
) -> tuple[float, float]:
    """Top-1 and top-5 accuracy as fractions; ties break to the lowest index."""
    if len(images) == 0:
        raise ContractError("evaluate: empty dataset")
    labels = np.asarray(labels, dtype=np.int64)
    scores = predict_scores(state, images, batch_size=batch_size)
    pred = np.argmax(scores, axis=1)
    top1 = float(np.mean(pred == labels))
    k = min(5, scores.shape[1])
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    top5 = float(np.mean(np.any(order == labels[:, None], axis=1)))
    return top1, top5


def _shuffle_seed(seed: int, epoch: int) -> int:
    # fixed mixing so every epoch gets a distinct, reproducible ordering
    return (int(seed) ^ ((epoch + 1) * 0x9E3779B97F4A7C15)) & ((1 << 64) - 1)


def train_epochs(
    state: TrainState,
    train_set: LabeledImageSet,
    test_set: LabeledImageSet | None,
    *,
    epochs: int,
    batch_size: int = 64,
    lr: float = 1.0,
    seed: int = 0,
    probe_size: int = 256,
) -> Iterator[tuple[dict, list[LayerEntropy]]]:
    """SGD epochs; yields a metrics row and entropy rows after each epoch.

    Train accuracy/loss are accumulated from the pre-update forward
    passes of the epoch; entropies are measured on a fixed probe batch
    (the first ``probe_size`` training images).
    """
    state.lr = lr
    state.train_seed = seed
    probe = train_set.images[:probe_size]
    for _ in range(epochs):
        loss_total = 0.0
        hit_total = 0
        n_total = 0
        for images, labels in shuffle_batches(
            train_set, batch_size, _shuffle_seed(seed, state.epoch)
        ):
            x = encode_batch(state.spec, images)
            with Tape() as tape:
                logpost = forward(state, x)
                loss = loss_nll(logpost, labels)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingAbort(f"non-finite loss at epoch {state.epoch}")
            grads = tape.backward(loss)
            pred = np.argmax(logpost.data, axis=1)
            loss_total += value * len(labels)
            hit_total += int(np.sum(pred == labels))
            n_total += len(labels)
            sgd_step(state, grads, lr)
        state.epoch += 1
        if test_set is not None and len(test_set) > 0:
            test_top1, test_top5 = evaluate(state, test_set.images, test_set.labels)
        else:
            test_top1 = test_top5 = float("nan")
        row = {
            "epoch": state.epoch,
            "train_loss": loss_total / max(1, n_total),
            "train_top1": hit_total / max(1, n_total),
            "test_top1": test_top1,
            "test_top5": test_top5,
        }
        entropy_rows = measure_entropy(state, probe)
        state.diagnostics.append(entropy_rows)
        yield row, entropy_rows


# -- gradient checking ---------------------------------------------------

@dataclass(frozen=True)
class GradCheckRow:
    layer: int
    kind: str
    param: str
    max_rel_err: float


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Element-wise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def _loss_value(state: TrainState, x: Tensor, labels: np.ndarray) -> float:
    return loss_nll(forward(state, x), labels).item()


def gradient_check(
    state: TrainState,
    images: np.ndarray,
    labels: np.ndarray,
    h: float = 1e-6,
) -> list[GradCheckRow]:
    """Central finite differences vs tape gradients for every parameter."""
    x = encode_batch(state.spec, images)
    with Tape() as tape:
        loss = loss_nll(forward(state, x), labels)
    analytic = tape.backward(loss)
    rows = []
    for i in sorted(state.banks):
        bank = state.banks[i]
        for attr in ("seeds", "bias_seed"):
            t: Tensor = getattr(bank, attr)
            a = analytic.get(t)
            if a is None:
                a = np.zeros_like(t.data)
            numeric = np.zeros_like(t.data)
            flat = numeric.reshape(-1)
            base = t.data.reshape(-1)
            for j in range(base.size):
                for sign in (+1.0, -1.0):
                    bumped = base.copy()
                    bumped[j] += sign * h
                    setattr(bank, attr, Tensor(bumped.reshape(t.data.shape)))
                    flat[j] += sign * _loss_value(state, x, labels)
                flat[j] /= 2.0 * h
            setattr(bank, attr, t)
            rows.append(
                GradCheckRow(
                    layer=i,
                    kind=state.spec.layers[i].kind,
                    param="seeds" if attr == "seeds" else "bias",
                    max_rel_err=float(relative_error(a, numeric).max()),
                )
            )
    return rows


# -- checkpoints ---------------------------------------------------------

def spec_to_dict(net: NetworkSpec) -> dict:
    return {
        "input_shape": list(net.input_shape),
        "encoding": net.encoding,
        "classes": net.classes,
        "layers": [asdict(layer) for layer in net.layers],
    }


def spec_from_dict(d: dict) -> NetworkSpec:
    return NetworkSpec(
        input_shape=tuple(d["input_shape"]),
        encoding=d["encoding"],
        classes=int(d["classes"]),
        layers=tuple(LayerSpec(**layer) for layer in d["layers"]),
    )


def save_checkpoint(path, state: TrainState) -> None:
    """Magic "FSD1", little-endian u32 header length, JSON header, then
    the raw little-endian float64 seed arrays in declaration order."""
    arrays = []
    for i in sorted(state.banks):
        arrays.append(state.banks[i].seeds.data)
        arrays.append(state.banks[i].bias_seed.data)
    header = {
        "version": 1,
        "spec": spec_to_dict(state.spec),
        "epoch": state.epoch,
        "lr": state.lr,
        "train_seed": state.train_seed,
        "arrays": [list(a.shape) for a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(
            f"checkpoint magic mismatch: expected {CHECKPOINT_MAGIC!r}, found {raw[:4]!r}"
        )
    if len(raw) < 8:
        raise FormatError("truncated checkpoint header")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    if header.get("version") != 1:
        raise FormatError(f"unsupported checkpoint version {header.get('version')!r}")
    net = spec_from_dict(header["spec"])
    inputs = net.validate()
    offset = 8 + hlen
    shapes = [tuple(s) for s in header["arrays"]]
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(raw):
            raise FormatError("checkpoint seed data truncated")
        arrays.append(
            np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        )
        offset += nbytes
    banks: dict[int, FilterBank] = {}
    cursor = 0
    for i, spec in enumerate(net.layers):
        if spec.kind not in ("klconv", "divg"):
            continue
        seeds, bias = arrays[cursor], arrays[cursor + 1]
        cursor += 2
        banks[i] = FilterBank(
            seeds=Tensor(seeds, requires_grad=True),
            bias_seed=Tensor(bias, requires_grad=True),
            mode=spec.link,
            divergence=spec.mode,
            alpha=spec.alpha,
        )
    if cursor != len(arrays):
        raise FormatError("checkpoint holds more arrays than the spec declares")
    return TrainState(
        spec=net,
        banks=banks,
        epoch=int(header["epoch"]),
        lr=float(header["lr"]),
        train_seed=header["train_seed"],
    )
