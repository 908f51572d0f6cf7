"""``irdfusion`` command line.

Exit codes: 0 success, 1 usage or contract violation, 2 verification failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, irdt
from .config import SECTIONS, CliConfig, coerce, load_config
from .fusion import (
    ConfigError,
    FeatureMapPair,
    FusionParams,
    init_fusion_params,
    irdfusion_forward,
    load_parameters,
    reshape_map,
    save_parameters,
)
from .harness import (
    DivergenceError,
    ablation_run,
    build_model,
    emit_heatmap,
    evaluate,
    iteration_sweep,
    train,
)
from .irdt import IRDTError
from .kernel import ShapeError, add
from .synth import Dataset, gen_dataset, load_dataset, make_split
from .verify import grad_suite, identity_suite

EXIT_OK, EXIT_CONTRACT, EXIT_VERIFY = 0, 1, 2
TOOL = f"irdfusion {__version__}"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump(obj))


def _envelope(cfg: CliConfig, body: dict) -> dict:
    return {"tool_version": TOOL, "config": cfg.to_dict(), **body}


def _config_comment(cfg: CliConfig) -> str:
    return f"{TOOL} config={json.dumps(cfg.to_dict(), sort_keys=True, separators=(',', ':'))}"


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (sections fusion/scene/train)")
    p.add_argument("--seed", help="training seed (train.seed)")
    p.add_argument("--k", help="iteration count K (fusion.K)")
    p.add_argument("--variant", help="model variant (train.variant)")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    for section in SECTIONS:
        for f in fields(SECTIONS[section]):
            p.add_argument(f"--{section}.{f.name}", dest=f"ov__{section}__{f.name}", metavar="VALUE")


def _resolve(args) -> CliConfig:
    overrides = {}
    for key, value in vars(args).items():
        if key.startswith("ov__") and value is not None:
            _, section, name = key.split("__", 2)
            overrides[f"{section}.{name}"] = coerce(section, name, value)
    if args.seed is not None:
        overrides["train.seed"] = coerce("train", "seed", args.seed)
    if args.k is not None:
        overrides["fusion.K"] = coerce("fusion", "K", args.k)
    if args.variant is not None:
        overrides["train.variant"] = args.variant
    return load_config(args.config, overrides)


def _datasets(cfg: CliConfig, data_dir) -> tuple[Dataset, Dataset]:
    if data_dir is None:
        return make_split(cfg.scene, cfg.train.n_train), make_split(cfg.scene, cfg.train.n_test, test=True)
    train_data, test_data, scene = load_dataset(data_dir)
    if scene.C != cfg.fusion.d:
        raise ConfigError("fusion.d", f"dataset has C={scene.C} channels, model width is {cfg.fusion.d}")
    return train_data, test_data


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    gen_dataset(cfg.scene, cfg.train.n_train, cfg.train.n_test, args.out,
                extra={"tool_version": TOOL, "config": cfg.to_dict()})
    print(f"wrote {cfg.train.n_train}+{cfg.train.n_test} scenes to {args.out}")
    return EXIT_OK


def _save_checkpoint(model, cfg: CliConfig, ckpt: Path) -> None:
    save_parameters(model.parameters(), ckpt, {"tool_version": TOOL, "variant": model.variant})
    _write_json(ckpt / "config.json", _envelope(cfg, {"variant": model.variant}))


def cmd_train(args) -> int:
    cfg = _resolve(args)
    train_data, test_data = _datasets(cfg, args.data)
    t = cfg.train
    model = build_model(t.variant, cfg.fusion, t.seed)
    rep = train(model, train_data, t.epochs, t.lr, t.batch, t.seed,
                test_data if len(test_data) else None)
    _write_json(args.out / "report.json", _envelope(cfg, {"report": rep.to_dict()}))
    _write_json(args.out / "timing.json", {"wall_time_s": rep.wall_time_s})
    _save_checkpoint(model, cfg, args.out / "checkpoint")
    print(f"{t.variant}: final train loss {rep.train_loss[-1] if rep.train_loss else rep.initial_train_loss:.6f}")
    return EXIT_OK


def _load_model(ckpt: Path):
    meta = json.loads((ckpt / "config.json").read_text())
    sections = meta["config"]
    cfg = load_config(None, {f"{s}.{k}": v for s, body in sections.items() for k, v in body.items()})
    model = build_model(meta["variant"], cfg.fusion, cfg.train.seed)
    load_parameters(model.parameters(), ckpt)
    return model, cfg


def cmd_eval(args) -> int:
    model, cfg = _load_model(args.checkpoint)
    if args.data is not None:
        _, data, _ = load_dataset(args.data)
    else:
        data = make_split(cfg.scene, cfg.train.n_test, test=True)
    metrics = evaluate(model, data)
    body = _envelope(cfg, {"variant": model.variant, "metrics": metrics})
    _write_json(args.out / "eval.json", body)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    report, extras = ablation_run(cfg.scene, cfg.fusion, cfg.train)
    _write_json(args.out / "ablation.json", _envelope(cfg, report))
    _write_json(args.out / "timing.json", extras["timing"])
    for row in report["table"]:
        print(f"{row['variant']:>16s}  soft-IoU {row['median_test_soft_iou']:.4f}  "
              f"bce {row['median_test_bce']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    report, extras = iteration_sweep(cfg.scene, cfg.fusion, cfg.train)
    _write_json(args.out / "sweep.json", _envelope(cfg, report))
    _write_json(args.out / "timing.json", extras["timing"])
    first_seed = report["seeds"][0]
    for k in report["K_values"]:
        emit_heatmap(extras["previews"][f"full/seed{first_seed}/K{k}"],
                     args.out / f"heatmap_K{k}.pgm", _config_comment(cfg))
    for row in report["table"]:
        print(f"K={row['K']}  soft-IoU {row['median_test_soft_iou']:.4f}")
    print(f"argmax K = {report['argmax_K']} (paper reference optimum {report['paper_reference_optimum']})")
    return EXIT_OK


def cmd_fuse(args) -> int:
    cfg = _resolve(args)
    pair = FeatureMapPair(irdt.read(args.map_v), irdt.read(args.map_t))
    C, H, W = pair.map_v.shape
    if C != cfg.fusion.d:
        raise ShapeError(f"maps have C={C} channels but fusion.d={cfg.fusion.d}")
    if args.checkpoint is not None:
        model, ckpt_cfg = _load_model(args.checkpoint)
        if model.fusion is None:
            raise ConfigError("variant", f"checkpoint variant {model.variant!r} has no fusion block")
        params: FusionParams = model.fusion
        fcfg = ckpt_cfg.fusion
    else:
        fcfg = cfg.fusion
        params = init_fusion_params(fcfg, np.random.default_rng([cfg.train.seed, 3]))
    fused, trace = irdfusion_forward(pair, params, fcfg, mode="eval",
                                     force_zero_lambda=args.checkpoint is not None
                                     and model.variant == "dffm_only")
    args.out.mkdir(parents=True, exist_ok=True)
    irdt.write(args.out / "fused.irdt", fused)
    comment = _config_comment(cfg)
    emit_heatmap(fused, args.out / "fused.pgm", comment)
    for k, rec in enumerate(trace, start=1):
        emit_heatmap(reshape_map(add(rec.Fp_v, rec.Fp_t), H, W), args.out / f"iter{k}.pgm", comment)
    body = {"map_shape": [C, H, W], "iterations": len(trace),
            "lambda_v": trace[0].lambda_v, "lambda_t": trace[0].lambda_t,
            "outputs": ["fused.irdt", "fused.pgm"] + [f"iter{k}.pgm" for k in range(1, len(trace) + 1)]}
    _write_json(args.out / "fuse.json", _envelope(cfg, body))
    print(f"fused {C}x{H}x{W} map over K={len(trace)} iterations -> {args.out}")
    return EXIT_OK


def cmd_check_identity(args) -> int:
    report = identity_suite(args.seeds, args.n, args.d)
    report["tool_version"] = TOOL
    text = _dump(report)
    if args.out is not None:
        _write_json(args.out / "identity.json", report)
    sys.stdout.write(text)
    return EXIT_OK if report["pass"] else EXIT_VERIFY


def cmd_grad_check(args) -> int:
    report = grad_suite(K=args.k, seed=args.seed, h=args.h)
    report["tool_version"] = TOOL
    if args.out is not None:
        _write_json(args.out / "gradcheck.json", report)
    sys.stdout.write(_dump(report))
    return EXIT_OK if report["pass"] else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="irdfusion", description="Iterative relation-map difference fusion toolkit")
    parser.add_argument("--version", action="version", version=TOOL)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic two-modality dataset")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model variant")
    _add_common(p)
    p.add_argument("--data", type=Path, help="dataset directory from gen-data (default: generate in memory)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="module ablation grid (four variants x seeds)")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-iters", help="iteration-count sweep for the full model")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fuse", help="fuse two IRDT feature maps")
    _add_common(p)
    p.add_argument("--map-v", type=Path, required=True)
    p.add_argument("--map-t", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, help="trained full/dffm_only checkpoint")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("check-identity", help="relation-map identity suite")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_check_identity)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONTRACT
    if getattr(args, "func", None) is None:
        print(parser.format_help(), file=sys.stderr)
        return EXIT_CONTRACT
    try:
        return args.func(args)
    except (ConfigError, ShapeError, IRDTError, DivergenceError, ValueError, KeyError, OSError) as exc:
        print(f"irdfusion {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
