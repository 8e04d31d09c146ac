"""Categorical-distribution math: links, Jacobian products, entropies, divergences.

All functions take plain float64 numpy arrays whose last axis indexes
states; leading axes broadcast.  Entropies and divergences are in nats.
Probabilities are floored at ``PROB_FLOOR`` before any logarithm so that
near-degenerate distributions keep finite log values and gradients.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DegenerateSeedError, DimensionError

PROB_FLOOR = 1e-12

LINK_MODES = ("logsimplex", "spherical")


def _check_mode(mode: str) -> None:
    if mode not in LINK_MODES:
        raise ContractError(f"unknown link mode {mode!r}, expected one of {LINK_MODES}")


def link_logsimplex(theta: np.ndarray) -> np.ndarray:
    """Softmax link: pi_i = exp(theta_i) / sum_j exp(theta_j), max-shifted."""
    theta = np.asarray(theta, dtype=np.float64)
    m = theta.max(axis=-1, keepdims=True)
    e = np.exp(theta - m)
    return e / e.sum(axis=-1, keepdims=True)


def link_spherical(theta: np.ndarray) -> np.ndarray:
    """Squared-normalized link: pi_i = theta_i^2 / sum_j theta_j^2."""
    theta = np.asarray(theta, dtype=np.float64)
    sq = theta * theta
    s = sq.sum(axis=-1, keepdims=True)
    if np.any(s == 0.0):
        raise DegenerateSeedError("spherical link received an all-zero seed vector")
    return sq / s


def link(theta: np.ndarray, mode: str) -> np.ndarray:
    _check_mode(mode)
    return link_logsimplex(theta) if mode == "logsimplex" else link_spherical(theta)


def link_vjp(theta: np.ndarray, upstream: np.ndarray, mode: str) -> np.ndarray:
    """Seed cotangent of the link, from the closed-form Jacobians.

    Log-simplex: g_i = pi_i * (u_i - <u, pi>); depends on theta only
    through pi, hence invariant to translating theta along (1,...,1).
    Spherical: g_j = (2 theta_j / ||theta||^2) * (u_j - <u, pi>), which is
    orthogonal to theta and shrinks as the seed norm grows.
    """
    _check_mode(mode)
    theta = np.asarray(theta, dtype=np.float64)
    u = np.asarray(upstream, dtype=np.float64)
    if theta.shape != u.shape:
        raise DimensionError(
            f"link_vjp: seed shape {theta.shape} vs upstream shape {u.shape}"
        )
    pi = link(theta, mode)
    inner = (u * pi).sum(axis=-1, keepdims=True)
    if mode == "logsimplex":
        return pi * (u - inner)
    s = (theta * theta).sum(axis=-1, keepdims=True)
    return (2.0 * theta / s) * (u - inner)


def safe_log(p: np.ndarray) -> np.ndarray:
    """log with the probability floor applied."""
    return np.log(np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR))


def entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats over the last axis, with 0*log(0) = 0."""
    p = np.asarray(p, dtype=np.float64)
    return -(p * safe_log(p)).sum(axis=-1)


def kld_m(q: np.ndarray, log_x: np.ndarray) -> np.ndarray:
    """D(q || exp(log_x)): divergence of a model distribution from a log-domain input."""
    q = np.asarray(q, dtype=np.float64)
    log_x = np.asarray(log_x, dtype=np.float64)
    if q.shape[-1] != log_x.shape[-1]:
        raise DimensionError(f"kld_m: state counts differ, {q.shape} vs {log_x.shape}")
    return -(q * log_x).sum(axis=-1) - entropy(q)


def kld_i(x: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """D(x || exp(log_q)): divergence of a probability-domain input from a model."""
    x = np.asarray(x, dtype=np.float64)
    log_q = np.asarray(log_q, dtype=np.float64)
    if x.shape[-1] != log_q.shape[-1]:
        raise DimensionError(f"kld_i: state counts differ, {x.shape} vs {log_q.shape}")
    return -(x * log_q).sum(axis=-1) - entropy(x)


def jsd(filters: np.ndarray, weights: np.ndarray) -> float:
    """Mixing entropy of a filter set: H(sum_v p_v pi_v) - sum_v p_v H(pi_v)."""
    filters = np.asarray(filters, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if filters.ndim != 2 or weights.ndim != 1 or filters.shape[0] != weights.shape[0]:
        raise DimensionError(
            f"jsd: need one weight per filter, got {filters.shape} and {weights.shape}"
        )
    mixture = weights @ filters
    return float(entropy(mixture) - weights @ entropy(filters))


def init_dirichlet_flat(
    states: int, gamma: float, rng: np.random.Generator, shape: tuple[int, ...] = ()
) -> np.ndarray:
    """Log-simplex seeds: gamma * log(u) with u ~ Dirichlet(1,...,1).

    The flat Dirichlet is sampled as normalized Exponential(1) draws.
    gamma > 1 sharpens the linked distribution (lower entropy).
    """
    if states < 2:
        raise ContractError(f"init_dirichlet_flat: need at least 2 states, got {states}")
    if gamma < 1.0:
        raise ContractError(f"init_dirichlet_flat: gamma must be >= 1, got {gamma}")
    e = rng.exponential(size=shape + (states,))
    u = e / e.sum(axis=-1, keepdims=True)
    return gamma * np.log(u)


def init_sphere_uniform(
    states: int, rng: np.random.Generator, shape: tuple[int, ...] = ()
) -> np.ndarray:
    """Spherical seeds: unit vectors uniform on the sphere, via normalized normals."""
    if states < 2:
        raise ContractError(f"init_sphere_uniform: need at least 2 states, got {states}")
    g = rng.standard_normal(size=shape + (states,))
    n = np.sqrt((g * g).sum(axis=-1, keepdims=True))
    if np.any(n == 0.0):  # pragma: no cover - probability zero
        raise DegenerateSeedError("drew an all-zero normal vector")
    return g / n
