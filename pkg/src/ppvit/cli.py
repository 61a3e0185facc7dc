"""Command-line surface: summary, squeeze, train, gradcheck, compare.

Exit codes: 0 success, 1 runtime failure (divergence, I/O, failed checks),
2 usage or config error.  Set NO_COLOR to suppress ANSI markup.  CSV output
modes print only CSV on stdout, so machine- and human-readable streams
never mix.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import complexity, model as M, training
from .data import GENERATOR_KINDS, SyntheticDataset
from .errors import ConfigError, DivergenceError, PPVitError
from .model import ModelConfig, build_model, config_from_dict, config_to_dict, preset
from .training import TrainConfig


def _use_color() -> bool:
    return os.environ.get("NO_COLOR") is None and sys.stdout.isatty()


def _paint(text: str, code: str) -> str:
    return f"\x1b[{code}m{text}\x1b[0m" if _use_color() else text


def _fmt_table(rows: list[list[str]], header: list[str]) -> str:
    table = [header] + rows
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# config file handling
# ---------------------------------------------------------------------------

_MODEL_OVERRIDE_KEYS = {"num_classes", "in_channels", "pool_mode", "use_rpe",
                        "ffn_kind", "act", "pool_sizes"}
_EXPLICIT_MODEL_KEYS = {"name", "stages", "num_classes", "head_width", "in_channels",
                        "pool_mode", "use_rpe", "ffn_kind", "act", "pool_sizes"}
_DATA_DEFAULTS = {"kind": "blobs", "num_samples": 32, "image_size": 32,
                  "num_classes": 4, "seed": 0}
_TRAIN_DEFAULTS = {"lr": 1e-3, "weight_decay": 0.05, "warmup_steps": 0,
                   "total_steps": 100, "batch_size": 8, "seed": 0}


def _reject_unknown(section: str, given: dict, allowed: set[str]) -> None:
    for key in given:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {section!r} section")


def _model_from_section(section: dict) -> ModelConfig:
    if "preset" in section:
        _reject_unknown("model", section, {"preset"} | _MODEL_OVERRIDE_KEYS)
        overrides = {k: v for k, v in section.items() if k != "preset"}
        if "pool_sizes" in overrides and overrides["pool_sizes"] is not None:
            overrides["pool_sizes"] = tuple(int(s) for s in overrides["pool_sizes"])
        return preset(section["preset"], **overrides)
    _reject_unknown("model", section, _EXPLICIT_MODEL_KEYS)
    return config_from_dict(section)


def load_run_config(path) -> dict:
    """Parse and validate a run config; returns the fully defaulted form."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown("top-level", raw, {"model", "model_seed", "data", "train", "out_dir"})
    if "model" not in raw:
        raise ConfigError("config is missing the 'model' section")

    cfg = _model_from_section(dict(raw["model"]))

    data_sec = dict(_DATA_DEFAULTS)
    given = dict(raw.get("data", {}))
    _reject_unknown("data", given, set(_DATA_DEFAULTS))
    data_sec.update(given)
    ds = SyntheticDataset(kind=str(data_sec["kind"]),
                          num_samples=int(data_sec["num_samples"]),
                          image_size=int(data_sec["image_size"]),
                          num_classes=int(data_sec["num_classes"]),
                          seed=int(data_sec["seed"]))

    train_sec = dict(_TRAIN_DEFAULTS)
    given = dict(raw.get("train", {}))
    _reject_unknown("train", given, set(_TRAIN_DEFAULTS))
    train_sec.update(given)
    tc = TrainConfig(lr=float(train_sec["lr"]),
                     weight_decay=float(train_sec["weight_decay"]),
                     warmup_steps=int(train_sec["warmup_steps"]),
                     total_steps=int(train_sec["total_steps"]),
                     batch_size=int(train_sec["batch_size"]),
                     seed=int(train_sec["seed"]))

    return {
        "model": cfg,
        "model_seed": int(raw.get("model_seed", 0)),
        "data": ds,
        "train": tc,
        "out_dir": str(raw.get("out_dir", "runs/latest")),
    }


def _effective_config_json(run: dict) -> str:
    ds, tc = run["data"], run["train"]
    return json.dumps({
        "model": config_to_dict(run["model"]),
        "model_seed": run["model_seed"],
        "data": {"kind": ds.kind, "num_samples": ds.num_samples,
                 "image_size": ds.image_size, "num_classes": ds.num_classes,
                 "seed": ds.seed},
        "train": {"lr": tc.lr, "weight_decay": tc.weight_decay,
                  "warmup_steps": tc.warmup_steps, "total_steps": tc.total_steps,
                  "batch_size": tc.batch_size, "seed": tc.seed},
        "out_dir": run["out_dir"],
    }, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _resolve_config(args) -> ModelConfig:
    if args.config:
        return load_run_config(args.config)["model"]
    return preset(args.preset)


def cmd_summary(args) -> int:
    cfg = _resolve_config(args)
    report = complexity.count_flops(cfg, (args.input, args.input))
    factor = 2 if args.double_macs else 1
    if args.csv:
        sys.stdout.write(report.to_csv(per_layer=args.per_layer,
                                       flop_factor=factor))
        return 0

    unit = "FLOPs (2x MAC)" if args.double_macs else "FLOPs (1 MAC = 1)"
    grid = args.input // 4
    rows = [["stem", f"{grid}x{grid}", str(cfg.stages[0].channels), "-", "-",
             "7x7 conv /4"]]
    for i, st in enumerate(cfg.stages, start=1):
        if i > 1:
            grid //= 2
        ratios = ",".join(map(str, st.pool_ratios))
        if cfg.pool_sizes is not None:
            ratios = "sizes " + ",".join(map(str, cfg.pool_sizes))
        rows.append([f"stage {i}", f"{grid}x{grid}", str(st.channels),
                     str(st.expansion), str(st.depth), ratios])
    print(_paint(f"{cfg.name} @ {args.input}x{args.input}", "1"))
    print(_fmt_table(rows, ["scope", "grid", "C", "E", "depth", "pooling"]))
    print()
    if args.per_layer:
        lrows = [[l.scope, f"{l.params:,}", f"{l.flops * factor:,}"]
                 for l in report.layers]
    else:
        lrows = [[l.scope, f"{l.params:,}", f"{l.flops * factor:,}"]
                 for l in report.per_stage()]
    print(_fmt_table(lrows, ["scope", "params", unit]))
    print()
    print(f"total params: {report.total_params:,}")
    print(f"total {unit}: {report.total_flops * factor:,}")
    if cfg.name in complexity.REFERENCE_PARAMS:
        ref_p = complexity.REFERENCE_PARAMS[cfg.name]
        dev_p = 100.0 * (report.total_params - ref_p) / ref_p
        print(f"reference params {ref_p / 1e6:.1f}M, deviation {dev_p:+.2f}%")
        if args.input == 224:
            ref_f = complexity.REFERENCE_FLOPS[cfg.name]
            dev_f = 100.0 * (report.total_flops - ref_f) / ref_f
            print(f"reference flops {ref_f / 1e9:.1f}G, deviation {dev_f:+.2f}%")
    return 0


def cmd_squeeze(args) -> int:
    if any(r < 1 for r in args.ratios):
        raise ConfigError(f"pool ratios must be positive, got {args.ratios}")
    hw = tuple(args.hw) if args.hw else None
    rep = complexity.squeeze_ratio(tuple(args.ratios), hw)
    print(f"pool ratios: {list(rep.pool_ratios)}")
    print(f"analytic squeeze ratio N/M: {rep.analytic_ratio:.1f}")
    if rep.realized_m is not None:
        h, w = rep.realized_hw
        print(f"realized at {h}x{w}: M={rep.realized_m} "
              f"(N={h * w}, N/M={rep.realized_ratio:.1f})")
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    print(_paint("effective config:", "1"))
    print(_effective_config_json(run))
    out_dir = Path(run["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    net = build_model(run["model"], seed=run["model_seed"])
    metrics = out_dir / "metrics.csv"
    ckpt = out_dir / "checkpoint.ckpt"
    records = training.train(net, run["data"], run["train"],
                             metrics_path=metrics, checkpoint_path=ckpt)
    last = records[-1]
    print(f"finished {last.step} steps: loss {last.loss:.4f}, "
          f"train accuracy {last.train_accuracy:.1%}")
    print(f"metrics: {metrics}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_gradcheck(args) -> int:
    report = training.gradcheck_suite(args.scope)
    for case in report.cases:
        tag = _paint("PASS", "32") if case.passed else _paint("FAIL", "31")
        print(f"{tag}  {case.name}: max_rel_err={case.max_rel_err:.3e} "
              f"(tol {case.tolerance:.0e})")
    n_pass = sum(c.passed for c in report.cases)
    print(f"{report.scope}: {n_pass}/{len(report.cases)} cases passed")
    return 0 if report.all_passed else 1


def cmd_compare(args) -> int:
    rows, warnings = complexity.compare_attention(args.n, args.c, args.variants)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    factor = 2 if args.double_macs else 1
    if args.csv:
        sys.stdout.write("variant,m,core_flops\n")
        for r in rows:
            sys.stdout.write(f"{r.variant},{r.m},{r.core_flops * factor}\n")
        return 0
    side = int(round(args.n ** 0.5))
    if side * side != args.n:
        print(f"note: N={args.n} is not a square grid; pooled lengths use the "
              f"analytic ratio")
    table = [[r.variant, str(r.m), f"{r.core_flops * factor:,}",
              f"{r.core_flops / rows[0].core_flops:.3f}"] for r in rows]
    print(_fmt_table(table, ["variant", "M", "attention-core flops", "vs first"]))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ppvit",
        description="pyramid-pooling attention backbone: analysis and training")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("summary", help="architecture table and cost report")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset", choices=M.PRESET_NAMES)
    g.add_argument("--config", help="run-config JSON; its model section is used")
    s.add_argument("--input", type=int, default=224,
                   help="square input size (multiple of 32)")
    s.add_argument("--per-layer", action="store_true",
                   help="emit the per-layer breakdown instead of per-stage")
    s.add_argument("--csv", action="store_true", help="print CSV only")
    s.add_argument("--double-macs", action="store_true",
                   help="display 2 FLOPs per MAC instead of 1")
    s.set_defaults(fn=cmd_summary)

    s = sub.add_parser("squeeze", help="key/value squeeze-ratio analytics")
    s.add_argument("ratios", type=int, nargs="+", help="pooling ratios")
    s.add_argument("--hw", type=int, nargs=2, metavar=("H", "W"),
                   help="also report the realized M for this token grid")
    s.set_defaults(fn=cmd_squeeze)

    s = sub.add_parser("train", help="run the desk-scale training loop")
    s.add_argument("--config", required=True, help="run-config JSON path")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("scope", choices=("ops", "block", "model"))
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("compare", help="attention-cost comparison table")
    s.add_argument("--n", type=int, required=True, help="query sequence length")
    s.add_argument("--c", type=int, required=True, help="channel width")
    s.add_argument("variants", nargs="+",
                   help="vanilla | pool:p | pyramid:p1,p2,...")
    s.add_argument("--csv", action="store_true", help="print CSV only")
    s.add_argument("--double-macs", action="store_true",
                   help="display 2 FLOPs per MAC instead of 1")
    s.set_defaults(fn=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PPVitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
