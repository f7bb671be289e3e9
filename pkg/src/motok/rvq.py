"""Residual vector quantization: stacked nearest-neighbor codebooks over the
residual chain, straight-through training, commitment loss and dead-code
maintenance.

Layer 0 carries the coarse code; layers 1..L quantize what the previous
layers left over, and the decoded latent is the sum of all selected codes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .numkit import Rng, Tensor


@dataclass
class Codebook:
    entries: np.ndarray     # [K, d]

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] < 1:
            raise ValueError("codebook entries must be [K>=1, d]")
        if not np.isfinite(self.entries).all():
            raise ValueError("codebook entries must be finite")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class RVQStack:
    layers: list[Codebook]
    dropout_p: float = 0.2

    def __post_init__(self):
        if not self.layers:
            raise ValueError("need at least one quantization layer")
        d = self.layers[0].dim
        if any(cb.dim != d for cb in self.layers):
            raise ValueError("all layers must share the embedding dim")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def dim(self) -> int:
        return self.layers[0].dim


def init_stack(n_layers: int, codes: int, dim: int, rng: Rng,
               dropout_p: float = 0.2, scale: float = 0.1) -> RVQStack:
    layers = [Codebook(rng.normal((codes, dim), scale=scale))
              for _ in range(n_layers)]
    return RVQStack(layers=layers, dropout_p=dropout_p)


@dataclass
class TokenGrid:
    tokens: np.ndarray      # [n_layers, n] int64

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise ValueError("tokens must be [layers, n]")

    @property
    def n_layers(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


def quantize_nn(r: np.ndarray, cb: Codebook) -> tuple[int, np.ndarray]:
    """Nearest entry by squared distance; ties break to the lowest index."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (cb.dim,):
        raise ValueError(f"vector dim {r.shape} does not match codebook dim {cb.dim}")
    diff = cb.entries - r
    idx = int(np.argmin((diff * diff).sum(axis=1)))
    return idx, cb.entries[idx].copy()


def _nn_rows(r: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Argmin indices for a batch of rows [n, d] against [K, d]."""
    diff = r[:, None, :] - entries[None, :, :]
    return np.argmin((diff * diff).sum(axis=2), axis=1)


@dataclass
class EncodeAux:
    """Per-layer residual inputs and selected codes from one encode pass."""
    residuals: list[np.ndarray]     # r_i entering layer i, [n, d] each
    codes: list[np.ndarray]         # q_i selected at layer i, [n, d] each
    keep_layers: int                # layers summed into z_q (dropout truncation)


def rvq_encode(z_e: np.ndarray, stack: RVQStack, mode: str = "eval",
               rng: Rng | None = None) -> tuple[TokenGrid, np.ndarray, EncodeAux]:
    """Residual quantization of [n, d] latents.

    The residual loop always runs through every layer (the full TokenGrid is
    produced), but in train mode a dropout event with probability dropout_p
    truncates the decoded sum z_q to a uniformly drawn prefix of layers.
    """
    z_e = np.asarray(z_e, dtype=np.float64)
    if z_e.ndim != 2 or z_e.shape[1] != stack.dim:
        raise ValueError(f"latents must be [n, {stack.dim}], got {z_e.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    n = z_e.shape[0]
    tokens = np.zeros((stack.n_layers, n), dtype=np.int64)
    residuals, codes = [], []
    r = z_e.copy()
    for i, cb in enumerate(stack.layers):
        idx = _nn_rows(r, cb.entries)
        q = cb.entries[idx]
        tokens[i] = idx
        residuals.append(r.copy())
        codes.append(q)
        r = r - q
    keep = stack.n_layers
    if mode == "train" and stack.dropout_p > 0.0:
        if rng is None:
            raise ValueError("train-mode encode needs an rng for dropout")
        if rng.random() < stack.dropout_p:
            keep = int(rng.integers(0, stack.n_layers)) + 1
    z_q = np.sum(codes[:keep], axis=0)
    return TokenGrid(tokens), z_q, EncodeAux(residuals, codes, keep)


def rvq_decode(grid: TokenGrid, stack: RVQStack) -> np.ndarray:
    """Sum of the selected codes across layers -> [n, d]."""
    if grid.n_layers != stack.n_layers:
        raise ValueError(f"grid has {grid.n_layers} layers, stack has {stack.n_layers}")
    out = np.zeros((grid.length, stack.dim))
    for i, cb in enumerate(stack.layers):
        idx = grid.tokens[i]
        if idx.size and (idx.min() < 0 or idx.max() >= cb.size):
            raise IndexError(f"layer {i}: token index out of range [0, {cb.size})")
        out += cb.entries[idx]
    return out


def straight_through(z_e: Tensor, z_q_value: Tensor) -> Tensor:
    """Forward z_q bitwise, backward identity into z_e (quantization treated
    as the identity map); no gradient reaches the codebooks through here."""
    return nk.passthrough(z_q_value, z_e)


def commitment_loss_rq(residuals: list, codes: list) -> Tensor:
    """Deep-layer commitment: sum_i mean_t ||r_i - sg(q_i)||^2 for i >= 1.

    Layer 0 is excluded; its commitment belongs to the base quantization
    loss. Gradients reach the encoder through the residuals only.
    """
    if len(residuals) != len(codes):
        raise ValueError(f"got {len(residuals)} residuals but {len(codes)} codes")
    if len(residuals) == 0:
        return nk.const(0.0)
    total = None
    for r, q in zip(residuals, codes):
        r = r if isinstance(r, Tensor) else nk.const(r)
        q = q if isinstance(q, Tensor) else nk.const(q)
        d = nk.sub(r, nk.stop_gradient(q))
        term = nk.mean(nk.sq_norm_rows(d))
        total = term if total is None else nk.add(total, term)
    return total


@dataclass
class UsageTracker:
    """Per-layer step counters since each code was last selected."""
    ages: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_stack(cls, stack: RVQStack) -> "UsageTracker":
        return cls(ages=[np.zeros(cb.size, dtype=np.int64) for cb in stack.layers])

    def update(self, grid: TokenGrid) -> None:
        for i, ages in enumerate(self.ages):
            ages += 1
            ages[np.unique(grid.tokens[i])] = 0

    def usage_fraction(self) -> float:
        used = sum(int((a == 0).sum()) for a in self.ages)
        total = sum(a.size for a in self.ages)
        return used / total


def codebook_maintenance(stack: RVQStack, tracker: UsageTracker,
                         recent_z: np.ndarray, rng: Rng,
                         window: int = 256) -> int:
    """Re-seed codes unused for `window` steps from recent encoder outputs.

    window=0 disables resets. Returns the number of replaced entries.
    """
    if window <= 0:
        return 0
    recent_z = np.asarray(recent_z, dtype=np.float64).reshape(-1, stack.dim)
    if recent_z.shape[0] == 0:
        return 0
    replaced = 0
    for i, cb in enumerate(stack.layers):
        dead = np.where(tracker.ages[i] >= window)[0]
        for k in dead:
            pick = int(rng.integers(0, recent_z.shape[0]))
            cb.entries[k] = recent_z[pick]
            tracker.ages[i][k] = 0
            replaced += 1
    return replaced
