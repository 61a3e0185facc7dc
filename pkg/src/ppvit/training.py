"""Desk-scale training loop, optimizer, schedule, and gradient checking.

The optimizer is AdamW with decoupled weight decay (betas 0.9/0.999,
eps 1e-8) under a linear-warmup-then-cosine learning-rate schedule.  The
loop is deterministic end to end: the only randomness is the seeded epoch
shuffle, so two runs from one config produce identical traces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import SyntheticDataset, load_batch
from .errors import ConfigError, DivergenceError, NonFiniteError
from .model import ModelState, forward_classify, save_checkpoint
from .tensor import Tensor, finite_difference_grad, no_grad

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_steps: int = 0
    total_steps: int = 100
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be positive, got {self.total_steps}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(
                f"warmup_steps={self.warmup_steps} must lie in [0, total_steps="
                f"{self.total_steps}]")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")


def lr_at(tc: TrainConfig, step: int) -> float:
    """Linear warmup from 0 to lr, then cosine decay to 0 at total_steps."""
    if not 0 <= step <= tc.total_steps:
        raise ConfigError(f"step {step} outside [0, {tc.total_steps}]")
    if step < tc.warmup_steps:
        return tc.lr * step / tc.warmup_steps
    span = max(tc.total_steps - tc.warmup_steps, 1)
    progress = (step - tc.warmup_steps) / span
    return tc.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    """First/second moment buffers, aligned with a named parameter list."""

    names: list[str]
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def for_params(cls, named_params: list[tuple[str, Tensor]]) -> "AdamWState":
        return cls(names=[n for n, _ in named_params],
                   m=[np.zeros_like(p.data) for _, p in named_params],
                   v=[np.zeros_like(p.data) for _, p in named_params])


def adamw_step(named_params: list[tuple[str, Tensor]], grads: list[np.ndarray],
               state: AdamWState, tc: TrainConfig, step: int) -> float:
    """One in-place update; ``step`` is 1-based.  Returns the lr applied.

    Weight decay is decoupled: ``p -= lr * (m_hat / (sqrt(v_hat) + eps)
    + wd * p)``, with bias-corrected moments.
    """
    if step < 1:
        raise ConfigError(f"step must be 1-based, got {step}")
    if len(named_params) != len(state.m) or len(grads) != len(state.m):
        raise ConfigError("params, grads, and optimizer state are misaligned")
    lr = lr_at(tc, min(step, tc.total_steps))
    c1 = 1.0 - ADAM_BETA1 ** step
    c2 = 1.0 - ADAM_BETA2 ** step
    for i, ((name, p), g) in enumerate(zip(named_params, grads)):
        if g.shape != p.data.shape:
            raise ConfigError(
                f"gradient shape {g.shape} does not match parameter {name!r} "
                f"{p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + ADAM_EPS)
        p.data = p.data - lr * (update + tc.weight_decay * p.data)
    return lr


@dataclass(frozen=True)
class TrainRecord:
    step: int
    loss: float
    train_accuracy: float
    lr: float


def records_to_csv(records: list[TrainRecord]) -> str:
    lines = ["step,loss,train_accuracy,lr"]
    lines += [f"{r.step},{r.loss:.8f},{r.train_accuracy:.6f},{r.lr:.10e}"
              for r in records]
    return "\n".join(lines) + "\n"


class _BatchStream:
    """Deterministic sampler: reshuffle each pass, drop ragged remainders."""

    def __init__(self, num_samples: int, batch_size: int, seed: int):
        if batch_size > num_samples:
            raise ConfigError(
                f"batch_size {batch_size} exceeds dataset size {num_samples}")
        self.rng = np.random.default_rng(seed)
        self.n = num_samples
        self.bs = batch_size
        self.order = self.rng.permutation(self.n)
        self.cursor = 0

    def next(self) -> np.ndarray:
        if self.cursor + self.bs > self.n:
            self.order = self.rng.permutation(self.n)
            self.cursor = 0
        batch = self.order[self.cursor:self.cursor + self.bs]
        self.cursor += self.bs
        return batch


def train(model: ModelState, ds: SyntheticDataset, tc: TrainConfig,
          metrics_path=None, checkpoint_path=None) -> list[TrainRecord]:
    """Optimize the classifier on the dataset; one record per step.

    Raises ``DivergenceError`` carrying the step index if the loss (or any
    intermediate value) stops being finite.  Artifacts are written only
    after the loop finishes, so reruns produce byte-identical files.
    """
    if model.cfg.num_classes != ds.num_classes:
        raise ConfigError(
            f"model has {model.cfg.num_classes} classes, dataset has {ds.num_classes}")
    named = model.named_params()
    state = AdamWState.for_params(named)
    stream = _BatchStream(ds.num_samples, tc.batch_size, tc.seed)
    records: list[TrainRecord] = []
    for step in range(1, tc.total_steps + 1):
        images, labels = load_batch(ds, stream.next())
        try:
            logits = forward_classify(model, images)
            loss = T.cross_entropy_logits(logits, labels)
            T.zero_grads([p for _, p in named])
            loss.backward()
        except NonFiniteError as exc:
            raise DivergenceError(step) from exc
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise DivergenceError(step)
        acc = float((logits.data.argmax(axis=1) == labels).mean())
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for _, p in named]
        lr = adamw_step(named, grads, state, tc, step)
        records.append(TrainRecord(step, loss_val, acc, lr))
    if metrics_path is not None:
        with open(metrics_path, "w") as fh:
            fh.write(records_to_csv(records))
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path,
                        extra={"steps": tc.total_steps,
                               "final_loss": records[-1].loss,
                               "final_accuracy": records[-1].train_accuracy})
    return records


def evaluate(model: ModelState, ds: SyntheticDataset, batch_size: int = 32
             ) -> tuple[float, float]:
    """Mean loss and accuracy over the whole set, without recording a graph."""
    total_loss, correct = 0.0, 0
    with no_grad():
        for start in range(0, ds.num_samples, batch_size):
            idx = range(start, min(start + batch_size, ds.num_samples))
            images, labels = load_batch(ds, idx)
            logits = forward_classify(model, images)
            loss = T.cross_entropy_logits(logits, labels)
            total_loss += loss.item() * len(labels)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
    return total_loss / ds.num_samples, correct / ds.num_samples


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradcheckCase:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


@dataclass
class GradcheckReport:
    scope: str
    cases: list[GradcheckCase]

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.cases)


GRADCHECK_TOL = 1e-4
_FD_H = 1e-4


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0), 1e-6)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _fd_at_coords(f, x: Tensor, coords: list[tuple[int, ...]],
                  h: float = _FD_H) -> np.ndarray:
    """Central differences at selected coordinates only (for big inputs)."""
    out = np.zeros(len(coords))
    with no_grad():
        for j, idx in enumerate(coords):
            orig = x.data[idx]
            x.data[idx] = orig + h
            fp = f().item()
            x.data[idx] = orig - h
            fm = f().item()
            x.data[idx] = orig
            out[j] = (fp - fm) / (2.0 * h)
    return out


def _check_full(name: str, f, inputs: list[Tensor]) -> GradcheckCase:
    """Compare backward against full finite differences on every input."""
    for t in inputs:
        t.grad = None
    out = f()
    out.backward()
    worst = 0.0
    for t in inputs:
        fd = finite_difference_grad(lambda _t: f(), t, h=_FD_H)
        worst = max(worst, _rel_err(t.grad, fd))
    return GradcheckCase(name, worst, GRADCHECK_TOL)


def _projection_loss(y: Tensor, rng: np.random.Generator) -> Tensor:
    """Random fixed projection to a scalar, so every output element matters."""
    w = Tensor(rng.normal(size=y.shape).astype(np.float64))
    return T.sum(T.mul(y, w))


def _ops_cases() -> list[GradcheckCase]:
    rng = np.random.default_rng(2024)

    def t(*shape, scale=1.0):
        return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True,
                      dtype=np.float64)

    cases = []

    def check(name, f, inputs):
        cases.append(_check_full(name, f, inputs))

    a, b = t(3, 4), t(3, 4)
    check("add", lambda: _projection_loss(T.add(a, b), np.random.default_rng(1)), [a, b])
    check("sub", lambda: _projection_loss(T.sub(a, b), np.random.default_rng(2)), [a, b])
    check("mul", lambda: _projection_loss(T.mul(a, b), np.random.default_rng(3)), [a, b])
    br = t(4)
    check("add_broadcast",
          lambda: _projection_loss(T.add(a, br), np.random.default_rng(4)), [a, br])
    x = t(3, 4)
    check("neg", lambda: _projection_loss(T.neg(x), np.random.default_rng(5)), [x])
    check("scale", lambda: _projection_loss(T.scale(x, -1.7), np.random.default_rng(6)), [x])
    check("shift", lambda: _projection_loss(T.shift(x, 0.3), np.random.default_rng(7)), [x])
    check("reshape",
          lambda: _projection_loss(T.reshape(x, (2, 6)), np.random.default_rng(8)), [x])
    x3 = t(2, 3, 4)
    check("transpose",
          lambda: _projection_loss(T.transpose(x3, (2, 0, 1)), np.random.default_rng(9)),
          [x3])
    c1, c2 = t(2, 3), t(2, 5)
    check("concat",
          lambda: _projection_loss(T.concat([c1, c2], axis=1), np.random.default_rng(10)),
          [c1, c2])
    check("sum_all", lambda: T.sum(x), [x])
    check("sum_axis",
          lambda: _projection_loss(T.sum(x3, axis=1), np.random.default_rng(11)), [x3])
    check("mean_axis",
          lambda: _projection_loss(T.mean(x3, axis=(0, 2)), np.random.default_rng(12)),
          [x3])
    m1, m2 = t(3, 4), t(4, 5)
    check("matmul",
          lambda: _projection_loss(T.matmul(m1, m2), np.random.default_rng(13)), [m1, m2])
    bm1, bm2 = t(2, 3, 4), t(2, 4, 5)
    check("matmul_batched",
          lambda: _projection_loss(T.matmul(bm1, bm2), np.random.default_rng(14)),
          [bm1, bm2])
    lw, lb = t(4, 5), t(5)
    check("linear",
          lambda: _projection_loss(T.linear(x, lw, lb), np.random.default_rng(15)),
          [x, lw, lb])
    # keep activation inputs away from the hardswish kinks at +-3
    hx = Tensor(rng.uniform(-2.5, 2.5, size=(3, 4)), requires_grad=True, dtype=np.float64)
    check("hardswish",
          lambda: _projection_loss(T.hardswish(hx), np.random.default_rng(16)), [hx])
    check("gelu", lambda: _projection_loss(T.gelu(x), np.random.default_rng(17)), [x])
    check("softmax_rows",
          lambda: _projection_loss(T.softmax_rows(x), np.random.default_rng(18)), [x])
    g, bta = t(4, scale=0.5), t(4, scale=0.5)
    check("layer_norm",
          lambda: _projection_loss(T.layer_norm(x, g, bta), np.random.default_rng(19)),
          [x, g, bta])
    ci, cw, cb = t(2, 3, 5, 5), t(4, 3, 3, 3), t(4)
    check("conv2d",
          lambda: _projection_loss(T.conv2d(ci, cw, cb, stride=1, padding=1),
                                   np.random.default_rng(20)), [ci, cw, cb])
    check("conv2d_strided",
          lambda: _projection_loss(T.conv2d(ci, cw, cb, stride=2, padding=1),
                                   np.random.default_rng(21)), [ci, cw, cb])
    gi, gw = t(2, 4, 5, 5), t(6, 2, 3, 3)
    check("conv2d_grouped",
          lambda: _projection_loss(T.conv2d(gi, gw, stride=1, padding=1, groups=2),
                                   np.random.default_rng(22)), [gi, gw])
    di, dw, db = t(2, 3, 4, 4), t(3, 1, 3, 3), t(3)
    check("depthwise_conv2d",
          lambda: _projection_loss(T.depthwise_conv2d(di, dw, db),
                                   np.random.default_rng(23)), [di, dw, db])
    pi = t(2, 3, 7, 5)
    check("adaptive_avg_pool2d",
          lambda: _projection_loss(T.adaptive_avg_pool2d(pi, 3, 2),
                                   np.random.default_rng(24)), [pi])
    check("adaptive_max_pool2d",
          lambda: _projection_loss(T.adaptive_max_pool2d(pi, 3, 2),
                                   np.random.default_rng(25)), [pi])
    logits = t(4, 3)
    labels = np.array([0, 2, 1, 2])
    check("cross_entropy_logits",
          lambda: T.cross_entropy_logits(logits, labels), [logits])
    return cases


def _block_cases() -> list[GradcheckCase]:
    from .layers import BlockConfig, block_forward
    from .model import _Init, _init_block

    cases = []
    for name, kwargs in [
        ("block_irb_avg", {}),
        ("block_mlp", {"ffn_kind": "mlp"}),
        ("block_max_pool", {"pool_mode": "max"}),
        ("block_no_rpe", {"use_rpe": False}),
    ]:
        cfg = BlockConfig(dim=8, heads=2, pool_ratios=(1, 2), expansion=2, **kwargs)
        init = _Init(seed=11, dtype=np.float64)
        blk = _init_block(init, cfg)
        x = Tensor(np.random.default_rng(5).normal(size=(1, 16, 8)),
                   requires_grad=True, dtype=np.float64)
        inputs = [x] + blk.params()
        cases.append(_check_full(
            name,
            lambda blk=blk, x=x: _projection_loss(block_forward(x, 4, 4, blk),
                                                  np.random.default_rng(30)),
            inputs))
    return cases


def _model_cases() -> list[GradcheckCase]:
    """End-to-end check on the micro classifier at 32x32.

    The analytic gradient is compared with finite differences at a seeded
    sample of coordinates (the full input alone has 3072), covering the
    input and one parameter from every layer family in every stage.
    """
    from .model import build_model, preset

    cfg = preset("micro", num_classes=2)
    model = build_model(cfg, seed=3, dtype=np.float64)
    rng = np.random.default_rng(17)
    x = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, 32, 32)), requires_grad=True,
               dtype=np.float64)
    proj = Tensor(rng.normal(size=(1, 2)).astype(np.float64))

    from .model import forward_classify as fc

    def loss_fn():
        return T.sum(T.mul(fc(model, x), proj))

    named = model.named_params()
    T.zero_grads([p for _, p in named])
    x.grad = None
    loss_fn().backward()

    def sample_coords(shape, k, rng):
        flat = rng.choice(int(np.prod(shape)), size=min(k, int(np.prod(shape))),
                          replace=False)
        return [tuple(int(q) for q in np.unravel_index(f, shape)) for f in flat]

    cases = []
    coords = sample_coords(x.shape, 48, np.random.default_rng(101))
    fd = _fd_at_coords(loss_fn, x, coords)
    an = np.array([x.grad[c] for c in coords])
    cases.append(GradcheckCase("model_input", _rel_err(an, fd), GRADCHECK_TOL))

    # one parameter per family keeps this scope under a minute
    picks = [n for n in dict(named) if n.endswith("weight")]
    picks += ["stages.1.blocks.0.attn.pool_ln.gamma", "head.ln.gamma"]
    crng = np.random.default_rng(202)
    for name in picks:
        p = dict(named)[name]
        coords = sample_coords(p.shape, 6, crng)
        fd = _fd_at_coords(loss_fn, p, coords)
        an = np.array([p.grad[c] for c in coords])
        cases.append(GradcheckCase(f"model_param:{name}", _rel_err(an, fd),
                                   GRADCHECK_TOL))
    return cases


def gradcheck_suite(scope: str) -> GradcheckReport:
    """Run one of the registered scopes: 'ops', 'block', or 'model'."""
    if scope == "ops":
        cases = _ops_cases()
    elif scope == "block":
        cases = _block_cases()
    elif scope == "model":
        cases = _model_cases()
    else:
        raise ConfigError(f"unknown gradcheck scope {scope!r}; use ops, block, or model")
    return GradcheckReport(scope, cases)
