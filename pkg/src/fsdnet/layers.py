"""Network layers over finite-state distributions.

Data convention between layers: a log-pmf tensor has shape
``(N, H, W, G, D)`` where G counts the per-pixel factors and D the
states per factor; ``exp`` over the last axis sums to 1 for every
``(n, h, w, g)``.  Divergence layers emit raw score tensors over their
V filters; the normalizers map scores back onto the log (or
probability) simplex.  Spatial padding inside the divergence
convolutions uses the uniform distribution, never zeros, because zero
is not a valid log-probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import simplex
from . import tensor as T
from .errors import ContractError, DimensionError, IngestionError
from .tensor import Tensor


def link_op(seeds: Tensor, mode: str) -> Tensor:
    """Differentiable link from seed parameters to probabilities (last axis)."""
    pi = simplex.link(seeds.data, mode)
    out = Tensor(pi)

    def vjp(g):
        return (simplex.link_vjp(seeds.data, g, mode),)

    return T.record_op(out, (seeds,), vjp)


@dataclass
class FilterBank:
    """Seed parameters of one divergence layer.

    ``seeds`` has shape (V, R, S, G, D): V filters, an R x S spatial
    footprint, G factors per position, D states per factor.  Dense
    layers use R = S = 1 with G equal to the flattened factor count.
    ``bias_seed`` has shape (V,) and links to the mixing distribution
    over filters.
    """

    seeds: Tensor
    bias_seed: Tensor
    mode: str
    divergence: str
    alpha: float = 1.0

    @property
    def filters(self) -> int:
        return self.seeds.shape[0]

    @property
    def states(self) -> int:
        return self.seeds.shape[-1]

    def linked_filters(self) -> Tensor:
        return link_op(self.seeds, self.mode)

    def linked_bias(self) -> Tensor:
        return link_op(self.bias_seed, self.mode)

    def log_bias(self) -> Tensor:
        return self.linked_bias().clamp_min(simplex.PROB_FLOOR).log()


def make_filter_bank(
    v: int,
    r: int,
    s: int,
    groups: int,
    states: int,
    mode: str,
    divergence: str,
    gamma: float,
    alpha: float,
    rng: np.random.Generator,
) -> FilterBank:
    """Initialize a bank per its link mode.

    Log-simplex: flat-Dirichlet filter factors sharpened by gamma, zero
    bias seeds (uniform mixing).  Spherical: unit-sphere factors and
    bias; gamma does not apply since the link is scale invariant.
    """
    if mode == "logsimplex":
        seeds = simplex.init_dirichlet_flat(states, gamma, rng, shape=(v, r, s, groups))
        bias = np.zeros(v)
    else:
        seeds = simplex.init_sphere_uniform(states, rng, shape=(v, r, s, groups))
        bias = simplex.init_sphere_uniform(v, rng)
    return FilterBank(
        seeds=Tensor(seeds, requires_grad=True),
        bias_seed=Tensor(bias, requires_grad=True),
        mode=mode,
        divergence=divergence,
        alpha=alpha,
    )


def validate_log_pmf(values: np.ndarray | Tensor, tol: float = 1e-7) -> None:
    """Check the log-pmf invariant: exp over the last axis sums to 1 per group."""
    data = values.data if isinstance(values, Tensor) else np.asarray(values)
    total = np.exp(data).sum(axis=-1)
    err = np.abs(total - 1.0).max()
    if err > tol:
        raise ContractError(f"log-pmf invariant violated: max |sum(exp)-1| = {err:.3g}")


def encode_binary(images: np.ndarray) -> Tensor:
    """Pixels in [0,1] become per-channel binary pmfs (1-p, p), stored as logs.

    Output shape (..., H, W, C, 2): one factor per channel, two states.
    Probabilities are clamped to [1e-6, 1-1e-6] so logs stay finite.
    """
    arr = np.asarray(images, dtype=np.float64)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise IngestionError(
            f"encode_binary: pixel values outside [0, 1] "
            f"(min {arr.min():.4g}, max {arr.max():.4g})"
        )
    p = np.clip(arr, 1e-6, 1.0 - 1e-6)
    return Tensor(np.stack([np.log(1.0 - p), np.log(p)], axis=-1))


def encode_channel_simplex(images: np.ndarray) -> Tensor:
    """Channel values become unnormalized log-probabilities of one pmf per pixel.

    Output shape (..., H, W, 1, C): a single factor over C states,
    log-normalized across the channels.
    """
    arr = np.asarray(images, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise IngestionError("encode_channel_simplex: non-finite channel values")
    m = arr.max(axis=-1, keepdims=True)
    e = np.exp(arr - m)
    logp = arr - (m + np.log(e.sum(axis=-1, keepdims=True)))
    return Tensor(np.expand_dims(logp, axis=-2))


def lnorm(x: Tensor) -> Tensor:
    """Log-normalization over the last axis: x_v - log(sum_j exp(x_j))."""
    return x - T.logsumexp(x, axis=-1, keepdims=True)


def softmax_nl(x: Tensor) -> Tensor:
    """Probability-domain nonlinearity: exp(lnorm(x))."""
    return lnorm(x).exp()


def _bank_entropy(bank: FilterBank, filters: Tensor) -> Tensor:
    """Total factorized entropy per filter, shape (V,)."""
    logf = filters.clamp_min(simplex.PROB_FLOOR).log()
    return -(filters * logf).sum(axis=(1, 2, 3, 4))


def klconv_m(x: Tensor, bank: FilterBank, stride: int = 1, pad: str = "valid") -> Tensor:
    """Divergence scores of log-domain input patches against the filter bank.

    ``x`` is (N, H, W, G, D) in the log simplex per group.  The score of
    filter v at a location is alpha * (<F_v, patch> + H(F_v)) + B_v,
    i.e. -alpha * D(F_v || patch) + log p_v summed over the factorized
    patch.  "same" padding fills with the uniform log-pmf (-log D).
    """
    if bank.divergence != "m":
        raise ContractError("klconv_m: filter bank is not in M-divergence mode")
    _check_conv_shapes("klconv_m", x, bank)
    n, h, w, g, d = x.shape
    v, r, s = bank.seeds.shape[0], bank.seeds.shape[1], bank.seeds.shape[2]
    filters = bank.linked_filters()
    h_total = _bank_entropy(bank, filters)
    xc = x.reshape(n, h, w, g * d)
    fc = filters.reshape(v, r, s, g * d)
    scores = T.conv2d(xc, fc, stride=stride, pad=pad, pad_value=-math.log(d))
    return (scores + h_total) * bank.alpha + bank.log_bias()


def klconv_i(x: Tensor, bank: FilterBank, stride: int = 1, pad: str = "valid") -> Tensor:
    """Divergence scores of probability-domain input patches against log filters.

    ``x`` is (N, H, W, G, D) of probabilities.  The score of filter v is
    alpha * (<patch, log F_v> + H(patch)) + B_v = -alpha * D(patch || F_v)
    + log p_v.  The patch entropy term is shared across filters and is
    computed once per location with a ones kernel.  "same" padding fills
    probabilities with 1/D and patch entropies with G*log(D).
    """
    if bank.divergence != "i":
        raise ContractError("klconv_i: filter bank is not in I-divergence mode")
    _check_conv_shapes("klconv_i", x, bank)
    n, h, w, g, d = x.shape
    v, r, s = bank.seeds.shape[0], bank.seeds.shape[1], bank.seeds.shape[2]
    filters = bank.linked_filters()
    logf = filters.clamp_min(simplex.PROB_FLOOR).log()
    xc = x.reshape(n, h, w, g * d)
    fc = logf.reshape(v, r, s, g * d)
    cross = T.conv2d(xc, fc, stride=stride, pad=pad, pad_value=1.0 / d)
    pixel_ent = -(x * x.clamp_min(simplex.PROB_FLOOR).log()).sum(axis=(3, 4))
    ones = Tensor(np.ones((1, r, s, 1)))
    patch_ent = T.conv2d(
        pixel_ent.reshape(n, h, w, 1), ones,
        stride=stride, pad=pad, pad_value=g * math.log(d),
    )
    return (cross + patch_ent) * bank.alpha + bank.log_bias()


def divg_dense(x: Tensor, bank: FilterBank) -> Tensor:
    """Dense divergence layer on flattened factors.

    ``x`` is (N, K, D): K factors of D states per sample, log domain for
    M divergence and probability domain for I divergence.  The bank has
    R = S = 1 and G = K; scores are (N, V).
    """
    if x.ndim != 3:
        raise DimensionError(f"divg_dense: expected (N, K, D) input, got shape {x.shape}")
    n, k, d = x.shape
    expanded = x.reshape(n, 1, 1, k, d)
    conv = klconv_m if bank.divergence == "m" else klconv_i
    return conv(expanded, bank, stride=1, pad="valid").reshape(n, bank.filters)


def lpool(x: Tensor, r: int, s: int, stride: int = 1) -> Tensor:
    """Log-domain pooling: marginalize spatial position over a uniform window.

    Each output channel is log(mean(exp(window))) via stable
    log-sum-exp, so the output stays on the log simplex.  Windows must
    fit inside the input (no padding).
    """
    if x.ndim != 5:
        raise DimensionError(f"lpool: expected (N, H, W, G, D) input, got shape {x.shape}")
    n, h, w, g, d = x.shape
    win = T.extract_windows(x.reshape(n, h, w, g * d), (r, s), stride=stride)
    pooled = T.logsumexp(win, axis=3) - math.log(r * s)
    oh, ow = pooled.shape[1], pooled.shape[2]
    return pooled.reshape(n, oh, ow, g, d)


def avgpool_prob(x: Tensor, r: int, s: int, stride: int = 1) -> Tensor:
    """Probability-domain pooling: arithmetic mean over the window per channel."""
    if x.ndim != 5:
        raise DimensionError(
            f"avgpool_prob: expected (N, H, W, G, D) input, got shape {x.shape}"
        )
    n, h, w, g, d = x.shape
    win = T.extract_windows(x.reshape(n, h, w, g * d), (r, s), stride=stride)
    pooled = win.mean(axis=3)
    oh, ow = pooled.shape[1], pooled.shape[2]
    return pooled.reshape(n, oh, ow, g, d)


def _check_conv_shapes(name: str, x: Tensor, bank: FilterBank) -> None:
    if x.ndim != 5:
        raise DimensionError(f"{name}: expected (N, H, W, G, D) input, got shape {x.shape}")
    g, d = x.shape[-2], x.shape[-1]
    bg, bd = bank.seeds.shape[-2], bank.seeds.shape[-1]
    if (g, d) != (bg, bd):
        raise DimensionError(
            f"{name}: input groups/states {(g, d)} do not match filter bank {(bg, bd)}"
        )
