"""Block-level layers: inverted-bottleneck FFN, transformer block, patch embed.

The FFN here is convolutional: tokens are reshaped to an image, expanded
1x1, filtered by a 3x3 depthwise conv (which is what injects spatial
locality into the feed-forward path), and projected back.  A plain
token-MLP variant is kept for ablation.  Blocks are post-norm: each
residual sum is followed by a layer norm.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .attention import PMHSAConfig, PMHSAState, pmhsa_forward
from .errors import ConfigError, ShapeError
from .tensor import Tensor


def seq_to_image(x: Tensor, h: int, w: int) -> Tensor:
    """[B, N, C] -> [B, C, H, W]; N must equal h*w."""
    b, n, c = x.shape
    if n != h * w:
        raise ShapeError(f"cannot fold {n} tokens into a {h}x{w} map")
    return T.transpose(T.reshape(x, (b, h, w, c)), (0, 3, 1, 2))


def image_to_seq(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, H*W, C] in row-major spatial order."""
    b, c, h, w = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (b, h * w, c))


_ACTS = {"hardswish": T.hardswish, "gelu": T.gelu}


@dataclass
class IRBState:
    """Inverted-bottleneck FFN parameters.

    The 1x1 convs are stored as token-space linears ([C, E*C] and [E*C, C]);
    a 1x1 conv over [B, C, H, W] is exactly a per-token linear map, so this
    keeps the image round trip out of the expand/project steps.  ``dw_*`` is
    absent when ``kind == 'mlp'``.
    """

    kind: str  # 'irb' or 'mlp'
    act: str
    w_expand: Tensor
    b_expand: Tensor
    w_project: Tensor
    b_project: Tensor
    dw_weight: Tensor | None = None  # [E*C, 1, 3, 3]
    dw_bias: Tensor | None = None

    def params(self) -> list[Tensor]:
        ps = [self.w_expand, self.b_expand]
        if self.kind == "irb":
            ps += [self.dw_weight, self.dw_bias]
        ps += [self.w_project, self.b_project]
        return ps


def irb_forward(x: Tensor, h: int, w: int, state: IRBState) -> Tensor:
    """Expand, (depthwise filter,) activate, project.  [B, N, C] -> same.

    The 'irb' kind activates after both the expansion and the depthwise
    conv; the 'mlp' kind activates once between the two linears.
    """
    act = _ACTS[state.act]
    hdn = act(T.linear(x, state.w_expand, state.b_expand))
    if state.kind == "irb":
        img = seq_to_image(hdn, h, w)
        img = T.depthwise_conv2d(img, state.dw_weight, state.dw_bias, padding=1)
        hdn = act(image_to_seq(img))
    return T.linear(hdn, state.w_project, state.b_project)


@dataclass(frozen=True)
class BlockConfig:
    """One transformer block: attention shape plus FFN expansion."""

    dim: int
    heads: int
    pool_ratios: tuple[int, ...]
    expansion: int
    pool_mode: str = "avg"
    use_rpe: bool = True
    ffn_kind: str = "irb"
    act: str = "hardswish"
    pool_sizes: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.expansion < 1:
            raise ConfigError(f"expansion must be positive, got {self.expansion}")
        if self.ffn_kind not in ("irb", "mlp"):
            raise ConfigError(f"ffn_kind must be 'irb' or 'mlp', got {self.ffn_kind!r}")
        if self.act not in _ACTS:
            raise ConfigError(f"act must be one of {sorted(_ACTS)}, got {self.act!r}")

    def attn_config(self) -> PMHSAConfig:
        return PMHSAConfig(self.dim, self.heads, self.pool_ratios,
                           self.pool_mode, self.use_rpe, self.pool_sizes)


@dataclass
class BlockState:
    cfg: BlockConfig
    attn: PMHSAState
    ffn: IRBState
    ln1_gamma: Tensor  # after the attention residual
    ln1_beta: Tensor
    ln2_gamma: Tensor  # after the FFN residual
    ln2_beta: Tensor

    def params(self) -> list[Tensor]:
        return (self.attn.params() + self.ffn.params()
                + [self.ln1_gamma, self.ln1_beta, self.ln2_gamma, self.ln2_beta])


def block_forward(x: Tensor, h: int, w: int, state: BlockState) -> Tensor:
    """Post-norm block: norm(x + attn(x)) then norm(. + ffn(.))."""
    att = T.layer_norm(T.add(x, pmhsa_forward(x, h, w, state.attn)),
                       state.ln1_gamma, state.ln1_beta)
    return T.layer_norm(T.add(att, irb_forward(att, h, w, state.ffn)),
                        state.ln2_gamma, state.ln2_beta)


@dataclass
class PatchEmbedState:
    """Overlapped patch embedding: strided conv then layer norm on tokens.

    The stem uses a 7x7/4 kernel (pad 3); stage transitions use 3x3/2
    (pad 1).  Both halve-or-quarter the grid while letting neighboring
    patches overlap.
    """

    weight: Tensor  # [C_out, C_in, k, k]
    bias: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    stride: int
    padding: int

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias, self.ln_gamma, self.ln_beta]


def patch_embed(x_img: Tensor, state: PatchEmbedState) -> tuple[Tensor, int, int]:
    """[B, C_in, H, W] -> ([B, H'*W', C_out], H', W')."""
    y = T.conv2d(x_img, state.weight, state.bias,
                 stride=state.stride, padding=state.padding)
    h, w = y.shape[2], y.shape[3]
    seq = T.layer_norm(image_to_seq(y), state.ln_gamma, state.ln_beta)
    return seq, h, w
