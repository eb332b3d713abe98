"""Experiment command line: scene generation, training, evaluation, reporting.

Subcommands wire the library into reproducible runs.  Every artifact a
command writes (config snapshot, checkpoint, training log, report files)
carries the pipeline config hash and seed, and rerunning a command with
identical inputs reproduces the artifact bytes exactly; wall-clock data
stays confined to the bench outputs.

Exit codes: 0 success, 2 usage or validation problem, 1 runtime failure.
"""

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ContractError, GenerationError, ParameterError, ShapeError
from .pipeline import PipelineConfig, PipelineState, format_log_line
from .protocol import (
    measure_overhead,
    plot_data,
    render_from_json,
    render_report,
    report_columns,
    report_rows,
    run_ablation,
    run_protocol,
)
from .scenes import CLASS_NAMES, SceneConfig, dataset, load_scene, save_scene

PRESETS = {
    "desk": {},
    "paper": {"decoder_preset": "paper", "lr": 2e-4, "weight_decay": 0.01, "epochs": 24},
}

_VALIDATION_ERRORS = (
    ParameterError,
    ShapeError,
    FileNotFoundError,
    NotADirectoryError,
    IsADirectoryError,
)


def _resolve_seed(flag_seed, file_cfg: dict) -> int:
    if flag_seed is not None:
        return int(flag_seed)
    if "seed" in file_cfg:
        return int(file_cfg["seed"])
    return int(os.environ.get("M2OCC_SEED", "0"))


def _load_toml(path) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def build_config(args) -> PipelineConfig:
    """Defaults < preset < config file < command-line flags."""
    file_cfg = _load_toml(getattr(args, "config", None))
    kw = dict(PRESETS[getattr(args, "preset", "desk") or "desk"])
    pipe_fields = {f.name for f in dataclasses.fields(PipelineConfig)}
    scene_fields = {f.name for f in dataclasses.fields(SceneConfig)}
    scene_cfg = {}
    for key, value in file_cfg.items():
        if key == "scene":
            for k, v in value.items():
                if k not in scene_fields:
                    raise ParameterError(f"unknown scene config key {k!r}")
                scene_cfg[k] = tuple(v) if isinstance(v, list) else v
        elif key not in pipe_fields and key != "seed":
            raise ParameterError(f"unknown config key {key!r}")
        else:
            kw[key] = tuple(value) if isinstance(value, list) else value
    flag_map = {
        "epochs": "epochs",
        "lr": "lr",
        "rvm_p": "rvm_p",
        "rvm_max": "rvm_max",
        "beta_mmr": "beta_mmr",
        "fmm": "fmm",
    }
    for flag, field in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            kw[field] = value
    mmr = getattr(args, "mmr", None)
    if mmr is not None:
        kw["use_mmr"] = mmr == "on"
    kw["seed"] = _resolve_seed(getattr(args, "seed", None), file_cfg)
    kw.pop("scene", None)
    if scene_cfg:
        kw["scene"] = SceneConfig(**scene_cfg)
    return PipelineConfig(**kw)


def _run_dir(args, config_hash: str) -> Path:
    if getattr(args, "out", None):
        path = Path(args.out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path("runs") / f"{stamp}-{config_hash}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_scene_dir(path) -> list:
    root = Path(path)
    if not root.is_dir():
        raise ParameterError(f"scene directory {root} does not exist")
    files = sorted(root.glob("*.mvsc"))
    if not files:
        raise ParameterError(f"no .mvsc scene files under {root}")
    return [load_scene(f) for f in files]


def _check_grid(config: PipelineConfig, scenes) -> None:
    got = tuple(scenes[0].grid.dims)
    want = tuple(config.scene.grid_dims)
    if got != want:
        raise ParameterError(f"dataset grid {got} does not match configured grid {want}")


def _method_label(config: PipelineConfig) -> str:
    if not config.use_mmr:
        return "baseline"
    return {"off": "+MMR", "single": "+MMR+SP", "multi": "+MMR+MP"}[config.fmm]


# -- subcommands ---------------------------------------------------------------


def cmd_gen_scene(args) -> int:
    if args.n <= 0:
        raise ParameterError(f"--n must be positive, got {args.n}")
    seed = _resolve_seed(args.seed, {})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = dataset(args.split, args.n, base_seed=seed)
    histogram = None
    for sample in scenes:
        save_scene(sample, out / f"scene_{sample.sample_id:06d}.mvsc")
        h = sample.grid.class_histogram()
        histogram = h if histogram is None else histogram + h
    print(f"wrote {len(scenes)} scenes to {out}")
    print("class histogram: " + "  ".join(f"{n}={int(c)}" for n, c in zip(CLASS_NAMES, histogram)))
    return 0


def cmd_train(args) -> int:
    config = build_config(args)
    scenes = _load_scene_dir(args.data)
    _check_grid(config, scenes)
    run = _run_dir(args, config.config_hash())
    ckpt_path = run / "checkpoint.mvck"
    log_path = run / "train.jsonl"

    if ckpt_path.exists():
        state = load_checkpoint(ckpt_path)
        if state.config.config_hash() != config.config_hash():
            print(
                f"refusing to resume: checkpoint hash {state.config.config_hash()} "
                f"does not match requested config {config.config_hash()}",
                file=sys.stderr,
            )
            return 2
        mode = "a"
        print(f"resuming from step {state.step}")
    else:
        state = PipelineState(config)
        mode = "w"
        (run / "config.json").write_text(
            json.dumps(
                {"config_hash": config.config_hash(), "config": config.to_dict()},
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )

    with open(log_path, mode) as fh:
        if mode == "w":
            header = {"config_hash": config.config_hash(), "seed": config.seed}
            fh.write(format_log_line(header) + "\n")
        history = state.train(
            scenes, log=lambda e: fh.write(format_log_line(e) + "\n"), stop_after=args.stop_after
        )
    save_checkpoint(ckpt_path, state)
    planned = config.epochs * len(scenes)
    print(f"trained {len(history)} steps (now at {state.step}/{planned}); checkpoint {ckpt_path}")
    if history:
        print(f"final l_occ {history[-1]['l_occ']:.4f}  l_mmr {history[-1]['l_mmr']:.4f}")
    return 0


def _load_states(paths) -> list:
    states = []
    for p in paths:
        path = Path(p)
        if not path.exists():
            raise ParameterError(f"checkpoint {path} does not exist")
        states.append(load_checkpoint(path))
    return states


def cmd_eval(args) -> int:
    states = _load_states(args.ckpt)
    scenes = _load_scene_dir(args.data)
    for state in states:
        _check_grid(state.config, scenes)
    seed = _resolve_seed(args.seed, {})
    ks = tuple(int(v) for v in args.k.split(",")) if args.k else (1, 3, 5)

    if args.suite == "ablation":
        methods = {}
        for state in states:
            label = _method_label(state.config)
            if label in methods:
                raise ParameterError(f"two checkpoints map to the same ablation row {label!r}")
            methods[label] = state
        reports = run_ablation(methods, scenes, seed=seed)
        hashes = [s.config.config_hash() for s in states]
    else:
        if len(states) != 1:
            raise ParameterError(f"suite {args.suite!r} evaluates exactly one checkpoint")
        reports = run_protocol(
            states[0], scenes, args.suite, seed=seed, method=_method_label(states[0].config), ks=ks
        )
        hashes = [states[0].config.config_hash()]

    run = _run_dir(args, hashes[0])
    blob = {
        "suite": args.suite,
        "seed": seed,
        "config_hash": hashes if len(hashes) > 1 else hashes[0],
        "columns": report_columns(),
        "rows": report_rows(reports),
    }
    text = json.dumps(blob, indent=2, sort_keys=False) + "\n"
    (run / "report.json").write_text(text)
    pragma = f"# config_hash={'+'.join(hashes)} seed={seed} suite={args.suite}\n"
    (run / "report.csv").write_text(pragma + render_report(reports, "csv"))
    plot = dict(plot_data(reports))
    plot["config_hash"] = blob["config_hash"]
    plot["seed"] = seed
    (run / "plot.json").write_text(json.dumps(plot, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(render_report(reports, "text"))
    print(f"reports under {run}")
    return 0


def cmd_bench(args) -> int:
    states = _load_states([args.ckpt])
    scenes = _load_scene_dir(args.data)[: args.limit]
    _check_grid(states[0].config, scenes)
    seed = _resolve_seed(args.seed, {})
    reports = measure_overhead(
        states[0], scenes, seed=seed, method=_method_label(states[0].config)
    )
    run = _run_dir(args, states[0].config.config_hash())
    blob = {
        "seed": seed,
        "config_hash": states[0].config.config_hash(),
        "columns": report_columns(include_timing=True),
        "rows": report_rows(reports, include_timing=True),
    }
    (run / "bench.json").write_text(json.dumps(blob, indent=2, sort_keys=False) + "\n")
    (run / "bench.csv").write_text(render_report(reports, "csv", include_timing=True))
    sys.stdout.write(render_report(reports, "text", include_timing=True))
    print(f"bench artifacts under {run}")
    return 0


def cmd_report(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise ParameterError(f"report file {path} does not exist")
    rendered = render_from_json(path.read_text(), args.format)
    if args.out:
        Path(args.out).write_text(rendered)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(rendered)
    return 0


# -- argument wiring -----------------------------------------------------------


def _add_common_model_flags(sub):
    sub.add_argument("--config", help="TOML config file; flags override its values")
    sub.add_argument("--preset", choices=("desk", "paper"), default="desk")
    sub.add_argument("--mmr", choices=("on", "off"))
    sub.add_argument("--fmm", choices=("off", "single", "multi"))
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--rvm-p", dest="rvm_p", type=float)
    sub.add_argument("--rvm-max", dest="rvm_max", type=int)
    sub.add_argument("--beta-mmr", dest="beta_mmr", type=float)
    sub.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvocc",
        description="Multi-view occupancy robustness experiments on synthetic scenes.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    g = subs.add_parser("gen-scene", help="synthesize a scene dataset directory")
    g.add_argument("--n", type=int, required=True, help="number of scenes")
    g.add_argument("--seed", type=int)
    g.add_argument("--split", choices=("train", "val"), default="train")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene)

    t = subs.add_parser("train", help="train a pipeline on a scene directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", help="run directory (default runs/<stamp>-<hash>)")
    t.add_argument("--stop-after", dest="stop_after", type=int, help="steps this invocation")
    _add_common_model_flags(t)
    t.set_defaults(func=cmd_train)

    e = subs.add_parser("eval", help="run an evaluation suite on checkpoints")
    e.add_argument("--ckpt", nargs="+", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--suite", choices=("standard", "single-view", "dropout", "ablation"), default="standard")
    e.add_argument("--k", help="dropout counts, e.g. 1,3,5")
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    b = subs.add_parser("bench", help="latency/memory overhead per missing-view count")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--limit", type=int, default=50, help="scenes to time")
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    r = subs.add_parser("report", help="re-render a stored report.json")
    r.add_argument("--input", required=True)
    r.add_argument("--format", choices=("text", "csv", "json"), default="text")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, ContractError, GenerationError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
