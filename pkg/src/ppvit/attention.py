"""Multi-head self-attention with a pyramid-pooled key/value sequence.

Queries come from the full token sequence; keys and values come from a much
shorter sequence built by pooling the token map at several ratios, adding a
shared depthwise-conv position encoding to each pooled map, flattening all
of them, and concatenating.  With pooling ratios ``p_1..p_n`` the pooled
length is roughly ``N * sum(1/p_i^2)``, which is what makes the attention
affordable at high resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


def pooled_extent(extent: int, ratio: int) -> int:
    """Target size of one spatial axis after pooling at ``ratio``.

    Rounds half away from zero: ``pooled_extent(7, 2) == 4``.  Integer-only
    via ``(2*extent + ratio) // (2*ratio)``.
    """
    if extent < 1 or ratio < 1:
        raise ConfigError(f"extent and ratio must be positive, got {extent}, {ratio}")
    return (2 * extent + ratio) // (2 * ratio)


def pool_targets(h: int, w: int, ratios: tuple[int, ...]) -> list[tuple[int, int]]:
    """Per-level pooled grids for an ``h`` x ``w`` token map.

    Raises ``ConfigError`` if any level would round to an empty grid (cannot
    happen for positive extents with the half-away-from-zero rule, but the
    guard keeps the contract explicit).
    """
    targets = []
    for p in ratios:
        th, tw = pooled_extent(h, p), pooled_extent(w, p)
        if th < 1 or tw < 1:
            raise ConfigError(f"pooling ratio {p} collapses a {h}x{w} map to {th}x{tw}")
        targets.append((th, tw))
    return targets


def pooled_len(h: int, w: int, ratios: tuple[int, ...]) -> int:
    """Total key/value sequence length M for the given map and ratios."""
    return int(np.sum([th * tw for th, tw in pool_targets(h, w, ratios)]))


def _check_increasing(values: tuple[int, ...], what: str) -> None:
    if not values:
        raise ConfigError(f"{what} must be nonempty")
    if any(v < 1 for v in values):
        raise ConfigError(f"{what} must be positive, got {values}")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigError(f"{what} must strictly increase, got {values}")


@dataclass(frozen=True)
class PMHSAConfig:
    """Static shape of one attention layer.

    ``dim`` must split evenly over ``heads``; ``pool_ratios`` must be
    strictly increasing positive ints.  ``pool_mode`` selects average (the
    default) or max pooling; ``use_rpe`` toggles the depthwise position
    encoding on the pooled maps.  When ``pool_sizes`` is set the pyramid
    pools straight to those grid sizes (clamped to the map extent) instead
    of deriving targets from the ratios.
    """

    dim: int
    heads: int
    pool_ratios: tuple[int, ...]
    pool_mode: str = "avg"
    use_rpe: bool = True
    pool_sizes: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1:
            raise ConfigError(f"dim and heads must be positive, got {self.dim}, {self.heads}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        _check_increasing(self.pool_ratios, "pool_ratios")
        if self.pool_sizes is not None:
            _check_increasing(self.pool_sizes, "pool_sizes")
        if self.pool_mode not in ("avg", "max"):
            raise ConfigError(f"pool_mode must be 'avg' or 'max', got {self.pool_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def level_targets(self, h: int, w: int) -> list[tuple[int, int]]:
        """Pooled grid per pyramid level for an ``h`` x ``w`` map."""
        if self.pool_sizes is not None:
            return [(min(s, h), min(s, w)) for s in self.pool_sizes]
        return pool_targets(h, w, self.pool_ratios)

    def pooled_len(self, h: int, w: int) -> int:
        return int(np.sum([th * tw for th, tw in self.level_targets(h, w)]))


@dataclass
class PMHSAState:
    """Parameters of one attention layer (all [in, out] for the linears)."""

    cfg: PMHSAConfig
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    rpe_weight: Tensor  # [C, 1, 3, 3], shared across pyramid levels
    rpe_bias: Tensor
    ln_gamma: Tensor  # applied to the concatenated pooled sequence
    ln_beta: Tensor

    def params(self) -> list[Tensor]:
        ps = [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
              self.ln_gamma, self.ln_beta]
        if self.cfg.use_rpe:
            ps[8:8] = [self.rpe_weight, self.rpe_bias]
        return ps


def pyramid_pool(x_map: Tensor, targets: list[tuple[int, int]],
                 mode: str = "avg") -> list[Tensor]:
    """Pool a [B, C, H, W] map once per target grid."""
    pool = T.adaptive_avg_pool2d if mode == "avg" else T.adaptive_max_pool2d
    return [pool(x_map, th, tw) for th, tw in targets]


def apply_rpe(pooled: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Residual depthwise 3x3 position encoding: ``p + dwconv(p)``."""
    return T.add(pooled, T.depthwise_conv2d(pooled, weight, bias, padding=1))


def build_kv_sequence(x: Tensor, h: int, w: int, state: PMHSAState) -> Tensor:
    """Pool, position-encode, flatten, concatenate, and normalize.

    ``x`` is the token sequence [B, N, C] with ``N == h*w``.  Returns the
    pooled sequence [B, M, C].  One depthwise kernel is shared by every
    pyramid level, and a single layer norm is applied after concatenation.
    """
    cfg = state.cfg
    b, n, c = x.shape
    if n != h * w:
        raise ShapeError(f"sequence length {n} does not match map {h}x{w}")
    x_map = T.transpose(T.reshape(x, (b, h, w, c)), (0, 3, 1, 2))
    levels = pyramid_pool(x_map, cfg.level_targets(h, w), cfg.pool_mode)
    if cfg.use_rpe:
        levels = [apply_rpe(p, state.rpe_weight, state.rpe_bias) for p in levels]
    flat = [T.reshape(T.transpose(p, (0, 2, 3, 1)), (b, p.shape[2] * p.shape[3], c))
            for p in levels]
    seq = flat[0] if len(flat) == 1 else T.concat(flat, axis=1)
    return T.layer_norm(seq, state.ln_gamma, state.ln_beta)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over ``heads`` equal channel slices.

    ``q`` is [B, N, C]; ``k``/``v`` are [B, M, C].  Scores are scaled by
    ``1/sqrt(C/heads)`` and softmaxed over the key axis.
    """
    b, n, c = q.shape
    m = k.shape[1]
    if k.shape != (b, m, c) or v.shape != (b, m, c):
        raise ShapeError(f"k/v shapes {k.shape}/{v.shape} do not match q {q.shape}")
    d = c // heads
    qh = T.transpose(T.reshape(q, (b, n, heads, d)), (0, 2, 1, 3))
    kh = T.transpose(T.reshape(k, (b, m, heads, d)), (0, 2, 1, 3))
    vh = T.transpose(T.reshape(v, (b, m, heads, d)), (0, 2, 1, 3))
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    attn = T.softmax_rows(scores)
    ctx = T.matmul(attn, vh)  # [B, heads, N, d]
    return T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, c))


def pmhsa_forward(x: Tensor, h: int, w: int, state: PMHSAState) -> Tensor:
    """Full layer: queries from ``x``, keys/values from the pooled sequence."""
    cfg = state.cfg
    kv = build_kv_sequence(x, h, w, state)
    q = T.linear(x, state.wq, state.bq)
    k = T.linear(kv, state.wk, state.bk)
    v = T.linear(kv, state.wv, state.bv)
    out = multi_head_attention(q, k, v, cfg.heads)
    return T.linear(out, state.wo, state.bo)
