"""Temporal cycle-consistency losses over latent sequences.

A cycle maps an anchor latent through soft nearest neighbors across one or
more same-category sequences and back; the return distribution over the
anchor's own sequence is scored either as an n-way classification of the
anchor index or as a Gaussian regression onto it. Everything is built from
autodiff ops so the constraint shapes the encoder end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import Rng, Tensor

VARIANTS = ("cls", "reg_mse", "reg_huber")


@dataclass
class TccConfig:
    variant: str = "reg_mse"
    lam: float = 1e-3            # variance regularization weight
    delta: float = 0.1           # huber transition point
    cycle_length: int = 2
    weight: float = 0.1          # contribution to the stage-1 total
    sigma_floor: float = 1e-4    # lower bound on the alignment variance

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lam < 0 or self.weight < 0:
            raise ValueError("lambda and weight must be nonnegative")
        if self.delta <= 0 or self.sigma_floor <= 0:
            raise ValueError("delta and sigma_floor must be positive")
        if self.cycle_length < 2:
            raise ValueError("cycle_length must be >= 2")


@dataclass
class AlignmentDistribution:
    probs: Tensor            # [n] on the simplex
    anchor_index: int
    direction: str           # "U->V" or "V->U"


@dataclass
class CycleStats:
    soft_nn: Tensor          # [d] expected neighbor
    mu: Tensor               # scalar expected index
    sigma_sq: Tensor         # scalar index variance (floored)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else nk.const(np.asarray(x, dtype=np.float64))


def pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """[n, d] x [m, d] -> [n, m] squared Euclidean distances."""
    a, b = _t(a), _t(b)
    an = nk.reshape(nk.sq_norm_rows(a), (a.shape[0], 1))
    bn = nk.reshape(nk.sq_norm_rows(b), (1, b.shape[0]))
    cross = nk.matmul(a, nk.transpose(b, (1, 0)))
    return nk.add(nk.sub(an, nk.mul(cross, 2.0)), bn)


def soft_nn(u_i, v) -> tuple[AlignmentDistribution, Tensor]:
    """Similarity-weighted expectation of v's frames around a query.

    alpha_j = softmax_j(-||v_j - u_i||^2), v_tilde = sum_k alpha_k v_k.
    """
    u_i, v = _t(u_i), _t(v)
    if v.shape[0] < 1:
        raise ValueError("soft_nn: empty candidate sequence")
    q = nk.reshape(u_i, (1, u_i.shape[-1]))
    alpha = nk.softmax(nk.mul(pairwise_sqdist(q, v), -1.0), axis=-1)   # [1, n]
    v_tilde = nk.reshape(nk.matmul(alpha, v), (v.shape[1],))
    dist = AlignmentDistribution(probs=nk.reshape(alpha, (v.shape[0],)),
                                 anchor_index=-1, direction="U->V")
    return dist, v_tilde


def _check_pair(u: Tensor, v: Tensor) -> None:
    if u.shape[0] != v.shape[0]:
        raise ValueError(f"sequences must share length, got {u.shape[0]} vs {v.shape[0]}")
    if u.shape[1] != v.shape[1]:
        raise ValueError("sequences must share the latent dim")


def cycle_cls_loss(u, v, i: int) -> Tensor:
    """Anchor-index classification of the out-and-back cycle: -log beta_i."""
    u, v = _t(u), _t(v)
    _check_pair(u, v)
    _, v_tilde = soft_nn(nk.reshape(nk.narrow(u, 0, i, 1), (u.shape[1],)), v)
    q = nk.reshape(v_tilde, (1, u.shape[1]))
    log_beta = nk.log_softmax(nk.mul(pairwise_sqdist(q, u), -1.0), axis=-1)
    return nk.mul(nk.reshape(nk.narrow(log_beta, 1, i, 1), ()), -1.0)


def beta_stats(beta: Tensor, sigma_floor: float) -> tuple[Tensor, Tensor]:
    """Expected index mu and floored variance sigma^2 of a distribution over
    positions 0..n-1. beta may be [n] or [rows, n] (per-row stats)."""
    beta = _t(beta)
    n = beta.shape[-1]
    idx = np.arange(n, dtype=np.float64)
    mu = nk.sum_(nk.mul(beta, idx), axis=-1)
    second = nk.sum_(nk.mul(beta, idx * idx), axis=-1)
    var = nk.sub(second, nk.mul(mu, mu))
    return mu, nk.maximum(var, sigma_floor)


def reg_loss_from_beta(beta, i, lam: float, sigma_floor: float,
                       huber_delta: float | None = None) -> Tensor:
    """Gaussian alignment penalty |i - mu|^2 / sigma^2 + lambda * log(sigma),
    with the quadratic error swapped for a Huber term when huber_delta is set.
    Vectorized: beta [rows, n] with targets i [rows] gives the mean over rows.
    """
    beta = _t(beta)
    vec = beta.data.ndim == 2
    targets = np.asarray(i, dtype=np.float64)
    mu, var = beta_stats(beta, sigma_floor)
    err = nk.sub(nk.const(targets), mu)
    if huber_delta is None:
        core = nk.mul(err, err)
    else:
        d = float(huber_delta)
        quad = nk.mul(nk.mul(err, err), 0.5)
        lin = nk.mul(nk.sub(nk.abs_(err), 0.5 * d), d)
        core = nk.where_mask(np.abs(err.data) <= d, quad, lin)
    # log(sigma) = 0.5 * log(sigma^2)
    loss = nk.add(nk.div(core, var), nk.mul(nk.log(var), 0.5 * lam))
    return nk.mean(loss) if vec else loss


def _return_beta(u, v, i: int) -> Tensor:
    u, v = _t(u), _t(v)
    _check_pair(u, v)
    _, v_tilde = soft_nn(nk.reshape(nk.narrow(u, 0, i, 1), (u.shape[1],)), v)
    q = nk.reshape(v_tilde, (1, u.shape[1]))
    beta = nk.softmax(nk.mul(pairwise_sqdist(q, u), -1.0), axis=-1)
    return nk.reshape(beta, (u.shape[0],))


def cycle_reg_mse_loss(u, v, i: int, lam: float = 1e-3,
                       sigma_floor: float = 1e-4) -> Tensor:
    """Cycle regression with a squared index error."""
    return reg_loss_from_beta(_return_beta(u, v, i), float(i), lam, sigma_floor)


def cycle_reg_huber_loss(u, v, i: int, lam: float = 1e-3, delta: float = 0.1,
                         sigma_floor: float = 1e-4) -> Tensor:
    """Cycle regression with a Huber index error (delta > 0)."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    return reg_loss_from_beta(_return_beta(u, v, i), float(i), lam, sigma_floor,
                              huber_delta=delta)


def huber_core(err: float, delta: float) -> float:
    """Reference scalar Huber: 0.5 e^2 inside delta, delta(|e| - delta/2) outside."""
    e = abs(err)
    return 0.5 * e * e if e <= delta else delta * (e - 0.5 * delta)


# ---------------------------------------------------------------------------
# batched tuple loss
# ---------------------------------------------------------------------------

def _cycle_losses_all_anchors(seqs: list[Tensor], cfg: TccConfig) -> Tensor:
    """Mean cycle loss over every anchor of seqs[0] through the loop
    seqs[0] -> seqs[1] -> ... -> seqs[-1] -> seqs[0]."""
    n = min(s.shape[0] for s in seqs)
    chain = [nk.narrow(s, 0, 0, n) for s in seqs]
    q = chain[0]                                    # [n, d]: one query per anchor
    for s in chain[1:]:
        alpha = nk.softmax(nk.mul(pairwise_sqdist(q, s), -1.0), axis=-1)
        q = nk.matmul(alpha, s)
    scores = nk.mul(pairwise_sqdist(q, chain[0]), -1.0)
    if cfg.variant == "cls":
        log_beta = nk.log_softmax(scores, axis=-1)
        return nk.mul(nk.mean(nk.take_diag(log_beta)), -1.0)
    beta = nk.softmax(scores, axis=-1)
    targets = np.arange(n, dtype=np.float64)
    delta = cfg.delta if cfg.variant == "reg_huber" else None
    return reg_loss_from_beta(beta, targets, cfg.lam, cfg.sigma_floor,
                              huber_delta=delta)


def tcc_loss(latents_by_category: dict, cfg: TccConfig,
             rng: Rng) -> tuple[Tensor, bool]:
    """Sampled same-category cycle loss over a batch of latent sequences.

    For each category holding at least cycle_length sequences, one tuple of
    distinct sequences is drawn and every position of the tuple's first
    sequence anchors a cycle. Returns (mean loss, skipped); when no category
    can form a tuple the loss is 0 with skipped=True rather than an error.
    """
    tuple_losses = []
    for cat in sorted(latents_by_category):
        seqs = latents_by_category[cat]
        if len(seqs) < cfg.cycle_length:
            continue
        pick = rng.choice(len(seqs), size=cfg.cycle_length, replace=False)
        chain = [seqs[int(k)] for k in pick]
        tuple_losses.append(_cycle_losses_all_anchors(chain, cfg))
    if not tuple_losses:
        return nk.const(0.0), True
    total = tuple_losses[0]
    for t in tuple_losses[1:]:
        total = nk.add(total, t)
    return nk.mul(total, 1.0 / len(tuple_losses)), False
