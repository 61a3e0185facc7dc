"""Four-stage backbone assembly, presets, and checkpointing.

A 7x7/4 stem embeds the image into stride-4 tokens; each later stage starts
with a 3x3/2 patch embed, so the feature pyramid comes out at strides
4/8/16/32.  Stages are numbered 1..4 (the stem is named separately).  The
classification head is layer norm, global average pooling over tokens, and
one affine map to the class count.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import PMHSAConfig, PMHSAState
from .errors import CheckpointError, ConfigError, ShapeError
from .layers import (BlockConfig, BlockState, IRBState, PatchEmbedState,
                     block_forward, image_to_seq, patch_embed, seq_to_image)
from .tensor import Tensor


@dataclass(frozen=True)
class StageConfig:
    """One transformer stage: width, depth, head count, FFN expansion, pyramid."""

    channels: int
    depth: int
    heads: int
    expansion: int
    pool_ratios: tuple[int, ...]

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.depth < 1:
            raise ConfigError(f"depth must be positive, got {self.depth}")


@dataclass(frozen=True)
class ModelConfig:
    """Whole-network shape.  ``stages`` must hold exactly four entries.

    The ablation switches (``pool_mode``, ``use_rpe``, ``ffn_kind``, ``act``,
    ``pool_sizes``) apply uniformly to every block.
    """

    name: str
    stages: tuple[StageConfig, ...]
    num_classes: int = 1000
    head_width: int = 64
    in_channels: int = 3
    pool_mode: str = "avg"
    use_rpe: bool = True
    ffn_kind: str = "irb"
    act: str = "hardswish"
    pool_sizes: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ConfigError(f"stages must hold 4 entries, got {len(self.stages)}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}")
        for i, st in enumerate(self.stages, start=1):
            if st.channels % self.head_width:
                raise ConfigError(
                    f"stages[{i}].channels={st.channels} not divisible by "
                    f"head_width={self.head_width}")
            if st.heads * self.head_width != st.channels:
                raise ConfigError(
                    f"stages[{i}].heads={st.heads} must equal channels/head_width="
                    f"{st.channels // self.head_width}")

    def block_config(self, stage_index: int) -> BlockConfig:
        st = self.stages[stage_index]
        return BlockConfig(st.channels, st.heads, st.pool_ratios, st.expansion,
                           self.pool_mode, self.use_rpe, self.ffn_kind, self.act,
                           self.pool_sizes)


# Pyramid pooling ratios shrink stage to stage with the token grid; the last
# stage keeps ratio 1 so its own tokens stay in the pool.
STANDARD_RATIOS = ((12, 16, 20, 24), (6, 8, 10, 12), (3, 4, 5, 6), (1, 2, 3, 4))

_PRESET_TABLE = {
    # name: (channels, depths, expansions, head_width, pool_ratios)
    "tiny": ((48, 96, 240, 384), (2, 2, 6, 3), (8, 8, 4, 4), 48, STANDARD_RATIOS),
    "small": ((64, 128, 320, 512), (2, 2, 9, 3), (8, 8, 4, 4), 64, STANDARD_RATIOS),
    "base": ((64, 128, 320, 512), (3, 4, 18, 3), (8, 8, 4, 4), 64, STANDARD_RATIOS),
    "large": ((64, 128, 320, 640), (3, 8, 27, 3), (8, 8, 4, 4), 64, STANDARD_RATIOS),
    # desk-scale shapes for tests and the overfit harness; never compared
    # against the published tables
    "micro": ((8, 16, 24, 32), (1, 1, 1, 1), (2, 2, 2, 2), 8,
              ((2, 4), (2, 4), (1, 2), (1,))),
    "nano": ((8, 8, 8, 8), (1, 1, 1, 1), (1, 1, 1, 1), 8,
             ((1, 2), (1, 2), (1,), (1,))),
}

PRESET_NAMES = tuple(_PRESET_TABLE)
REFERENCE_PRESETS = ("tiny", "small", "base", "large")


def preset(name: str, num_classes: int = 1000, **overrides) -> ModelConfig:
    """Build a named configuration; extra keyword fields override defaults."""
    if name not in _PRESET_TABLE:
        raise ConfigError(
            f"unknown preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}")
    chans, depths, exps, head_width, ratios = _PRESET_TABLE[name]
    stages = tuple(
        StageConfig(c, d, c // head_width, e, r)
        for c, d, e, r in zip(chans, depths, exps, ratios))
    return ModelConfig(name=name, stages=stages, num_classes=num_classes,
                       head_width=head_width, **overrides)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...],
                  std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with values beyond 2 std redrawn until inside."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class _Init:
    """Draws parameters in a fixed order so builds are seed-deterministic."""

    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def weight(self, *shape: int) -> Tensor:
        return Tensor(_trunc_normal(self.rng, shape).astype(self.dtype),
                      requires_grad=True)

    def zeros(self, *shape: int) -> Tensor:
        return Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

    def ones(self, *shape: int) -> Tensor:
        return Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)


def _init_patch_embed(init: _Init, cin: int, cout: int, k: int, stride: int,
                      padding: int) -> PatchEmbedState:
    return PatchEmbedState(
        weight=init.weight(cout, cin, k, k), bias=init.zeros(cout),
        ln_gamma=init.ones(cout), ln_beta=init.zeros(cout),
        stride=stride, padding=padding)


def _init_attn(init: _Init, cfg: PMHSAConfig) -> PMHSAState:
    c = cfg.dim
    return PMHSAState(
        cfg=cfg,
        wq=init.weight(c, c), bq=init.zeros(c),
        wk=init.weight(c, c), bk=init.zeros(c),
        wv=init.weight(c, c), bv=init.zeros(c),
        wo=init.weight(c, c), bo=init.zeros(c),
        rpe_weight=init.weight(c, 1, 3, 3), rpe_bias=init.zeros(c),
        ln_gamma=init.ones(c), ln_beta=init.zeros(c))


def _init_irb(init: _Init, cfg: BlockConfig) -> IRBState:
    c, e = cfg.dim, cfg.expansion
    hidden = c * e
    dw_w = dw_b = None
    w_exp, b_exp = init.weight(c, hidden), init.zeros(hidden)
    if cfg.ffn_kind == "irb":
        dw_w, dw_b = init.weight(hidden, 1, 3, 3), init.zeros(hidden)
    w_proj, b_proj = init.weight(hidden, c), init.zeros(c)
    return IRBState(kind=cfg.ffn_kind, act=cfg.act,
                    w_expand=w_exp, b_expand=b_exp,
                    w_project=w_proj, b_project=b_proj,
                    dw_weight=dw_w, dw_bias=dw_b)


def _init_block(init: _Init, cfg: BlockConfig) -> BlockState:
    return BlockState(
        cfg=cfg,
        attn=_init_attn(init, cfg.attn_config()),
        ffn=_init_irb(init, cfg),
        ln1_gamma=init.ones(cfg.dim), ln1_beta=init.zeros(cfg.dim),
        ln2_gamma=init.ones(cfg.dim), ln2_beta=init.zeros(cfg.dim))


@dataclass
class StageState:
    embed: PatchEmbedState | None  # None for stage 1 (the stem feeds it)
    blocks: list[BlockState]


@dataclass
class ModelState:
    cfg: ModelConfig
    seed: int
    stem: PatchEmbedState
    stages: list[StageState]
    head_ln_gamma: Tensor
    head_ln_beta: Tensor
    head_weight: Tensor
    head_bias: Tensor

    def named_params(self) -> list[tuple[str, Tensor]]:
        """Stable (name, tensor) listing; the order defines file layout."""
        out: list[tuple[str, Tensor]] = []

        def emb(prefix: str, pe: PatchEmbedState):
            out.extend([(f"{prefix}.conv.weight", pe.weight),
                        (f"{prefix}.conv.bias", pe.bias),
                        (f"{prefix}.ln.gamma", pe.ln_gamma),
                        (f"{prefix}.ln.beta", pe.ln_beta)])

        emb("stem", self.stem)
        for si, stage in enumerate(self.stages, start=1):
            if stage.embed is not None:
                emb(f"stages.{si}.embed", stage.embed)
            for bi, blk in enumerate(stage.blocks):
                p = f"stages.{si}.blocks.{bi}"
                a = blk.attn
                out.extend([(f"{p}.attn.q.weight", a.wq), (f"{p}.attn.q.bias", a.bq),
                            (f"{p}.attn.k.weight", a.wk), (f"{p}.attn.k.bias", a.bk),
                            (f"{p}.attn.v.weight", a.wv), (f"{p}.attn.v.bias", a.bv),
                            (f"{p}.attn.o.weight", a.wo), (f"{p}.attn.o.bias", a.bo)])
                if a.cfg.use_rpe:
                    out.extend([(f"{p}.attn.rpe.weight", a.rpe_weight),
                                (f"{p}.attn.rpe.bias", a.rpe_bias)])
                out.extend([(f"{p}.attn.pool_ln.gamma", a.ln_gamma),
                            (f"{p}.attn.pool_ln.beta", a.ln_beta),
                            (f"{p}.ln1.gamma", blk.ln1_gamma),
                            (f"{p}.ln1.beta", blk.ln1_beta)])
                f = blk.ffn
                out.extend([(f"{p}.ffn.expand.weight", f.w_expand),
                            (f"{p}.ffn.expand.bias", f.b_expand)])
                if f.kind == "irb":
                    out.extend([(f"{p}.ffn.dw.weight", f.dw_weight),
                                (f"{p}.ffn.dw.bias", f.dw_bias)])
                out.extend([(f"{p}.ffn.project.weight", f.w_project),
                            (f"{p}.ffn.project.bias", f.b_project),
                            (f"{p}.ln2.gamma", blk.ln2_gamma),
                            (f"{p}.ln2.beta", blk.ln2_beta)])
        out.extend([("head.ln.gamma", self.head_ln_gamma),
                    ("head.ln.beta", self.head_ln_beta),
                    ("head.fc.weight", self.head_weight),
                    ("head.fc.bias", self.head_bias)])
        return out

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def param_count(self) -> int:
        return int(np.sum([p.size for p in self.params()]))


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelState:
    """Instantiate every parameter; bit-identical across builds for one seed.

    Note the RPE pair is always allocated (so seeded draws line up between
    ablation arms) but is neither used, counted, nor saved when
    ``cfg.use_rpe`` is off.
    """
    init = _Init(seed, dtype)
    stem = _init_patch_embed(init, cfg.in_channels, cfg.stages[0].channels,
                             k=7, stride=4, padding=3)
    stages: list[StageState] = []
    for i, st in enumerate(cfg.stages):
        embed = None
        if i > 0:
            embed = _init_patch_embed(init, cfg.stages[i - 1].channels, st.channels,
                                      k=3, stride=2, padding=1)
        bcfg = cfg.block_config(i)
        blocks = [_init_block(init, bcfg) for _ in range(st.depth)]
        stages.append(StageState(embed=embed, blocks=blocks))
    c4 = cfg.stages[-1].channels
    return ModelState(
        cfg=cfg, seed=seed, stem=stem, stages=stages,
        head_ln_gamma=init.ones(c4), head_ln_beta=init.zeros(c4),
        head_weight=init.weight(c4, cfg.num_classes),
        head_bias=init.zeros(cfg.num_classes))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

@dataclass
class FeaturePyramid:
    """Stage outputs B1..B4 as [B, C_i, H_i, W_i] maps at strides 4/8/16/32."""

    levels: tuple[Tensor, Tensor, Tensor, Tensor]

    @property
    def b1(self): return self.levels[0]

    @property
    def b2(self): return self.levels[1]

    @property
    def b3(self): return self.levels[2]

    @property
    def b4(self): return self.levels[3]


def _check_input(model: ModelState, x: Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != model.cfg.in_channels:
        raise ShapeError(
            f"input must be [B, {model.cfg.in_channels}, H, W], got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if h < 32 or w < 32 or h % 32 or w % 32:
        raise ShapeError(
            f"input height/width must be multiples of 32 (at least 32), got {h}x{w}")


def forward_features(model: ModelState, x: Tensor) -> FeaturePyramid:
    """Run the stem and all four stages; collect each stage's output map."""
    _check_input(model, x)
    levels = []
    seq, h, w = patch_embed(x, model.stem)
    for stage in model.stages:
        if stage.embed is not None:
            seq, h, w = patch_embed(seq_to_image(seq, h, w), stage.embed)
        for blk in stage.blocks:
            seq = block_forward(seq, h, w, blk)
        levels.append(seq_to_image(seq, h, w))
    return FeaturePyramid(levels=tuple(levels))


def forward_classify(model: ModelState, x: Tensor) -> Tensor:
    """Logits [B, num_classes]: norm B4's tokens, average them, project."""
    pyramid = forward_features(model, x)
    tokens = image_to_seq(pyramid.b4)
    tokens = T.layer_norm(tokens, model.head_ln_gamma, model.head_ln_beta)
    pooled = T.mean(tokens, axis=1)
    return T.linear(pooled, model.head_weight, model.head_bias)


# ---------------------------------------------------------------------------
# config (de)serialization
# ---------------------------------------------------------------------------

def config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "name": cfg.name,
        "num_classes": cfg.num_classes,
        "head_width": cfg.head_width,
        "in_channels": cfg.in_channels,
        "pool_mode": cfg.pool_mode,
        "use_rpe": cfg.use_rpe,
        "ffn_kind": cfg.ffn_kind,
        "act": cfg.act,
        "pool_sizes": list(cfg.pool_sizes) if cfg.pool_sizes is not None else None,
        "stages": [
            {"channels": st.channels, "depth": st.depth, "heads": st.heads,
             "expansion": st.expansion, "pool_ratios": list(st.pool_ratios)}
            for st in cfg.stages
        ],
    }


def config_from_dict(d: dict) -> ModelConfig:
    try:
        stages = tuple(
            StageConfig(int(s["channels"]), int(s["depth"]), int(s["heads"]),
                        int(s["expansion"]), tuple(int(p) for p in s["pool_ratios"]))
            for s in d["stages"])
        sizes = d.get("pool_sizes")
        return ModelConfig(
            name=str(d["name"]), stages=stages,
            num_classes=int(d["num_classes"]), head_width=int(d["head_width"]),
            in_channels=int(d.get("in_channels", 3)),
            pool_mode=str(d.get("pool_mode", "avg")),
            use_rpe=bool(d.get("use_rpe", True)),
            ffn_kind=str(d.get("ffn_kind", "irb")),
            act=str(d.get("act", "hardswish")),
            pool_sizes=tuple(int(s) for s in sizes) if sizes is not None else None)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed model config: {exc}") from exc


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Byte layout (all integers little-endian):
#   magic            8 bytes  b"PPVT\x00\x01\x00\x00"
#   manifest_len     u64
#   manifest         UTF-8 JSON: {format_version, seed, config, extra}
#   per parameter, in named_params order:
#     name_len       u16
#     name           UTF-8
#     ndim           u8
#     dims           u32 x ndim
#     data           f32 x prod(dims), C order
# No trailing bytes.

CHECKPOINT_MAGIC = b"PPVT\x00\x01\x00\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: ModelState, path, extra: dict | None = None) -> None:
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "config": config_to_dict(model.cfg),
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, p in model.named_params():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> tuple[ModelState, dict]:
    """Rebuild the model a checkpoint describes and restore its parameters."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    off = 16
    try:
        manifest = json.loads(raw[off:off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    off += mlen
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported format_version {manifest.get('format_version')!r}")

    cfg = config_from_dict(manifest["config"])
    model = build_model(cfg, seed=int(manifest["seed"]), dtype=dtype)
    expected = dict(model.named_params())
    seen: set[str] = set()
    while off < len(raw):
        try:
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        except (struct.error, UnicodeDecodeError, ValueError) as exc:
            raise CheckpointError(f"truncated or corrupt record: {exc}") from exc
        off += 4 * count
        if name not in expected:
            raise CheckpointError(f"unexpected parameter {name!r}")
        target = expected[name]
        if tuple(dims) != target.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {tuple(dims)}, expected {target.shape}")
        target.data = data.reshape(dims).astype(dtype)
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise CheckpointError(f"missing parameters: {sorted(missing)[:5]}")
    return model, manifest
