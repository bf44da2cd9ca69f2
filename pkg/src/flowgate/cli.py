"""Command-line surface: training, evaluation, benchmarking, streaming, serving.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 training
divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import ConfigError, RunConfig, format_config, load_config
from .evaluate import (
    bench_latency,
    multimodality_eval,
    quintile_eval,
    run_calibrate_gates,
    run_distill,
    run_gen_data,
    run_train_flow,
    run_train_vae,
    stage1_eval,
    variant_eval,
    write_json,
    write_rows,
)
from .runtime import EpisodeTrace, MissingArtifact, PromptEvent, load_bundle, run_episode
from .vae import TrainingDiverged

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowgate", description=__doc__)
    parser.add_argument("--config", metavar="PATH", default=None, help="run config file")
    parser.add_argument("--seed", type=int, default=None, help="override run seed")
    parser.add_argument("--out", metavar="DIR", default=None, help="override output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("gen-data", "train-vae", "train-flow", "distill-reflow", "calibrate-gates"):
        sub.add_parser(name)

    p_eval = sub.add_parser("eval")
    p_eval.add_argument("--no-gates", action="store_true", help="kept for symmetry; eval never gates")

    sub.add_parser("gate-eval")
    sub.add_parser("bench-latency")

    p_stream = sub.add_parser("stream")
    p_stream.add_argument("--prompts", metavar="FILE", default=None, help="scripted prompt file")
    p_stream.add_argument("--no-gates", action="store_true")
    p_stream.add_argument("--no-guidance", action="store_true", help="use the unguided base flow")
    p_stream.add_argument("--nfe", type=int, default=None, help="override sampler NFE")

    p_serve = sub.add_parser("serve")
    p_serve.add_argument("--port", type=int, default=8321)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--no-gates", action="store_true")
    p_serve.add_argument("--no-guidance", action="store_true")
    p_serve.add_argument("--nfe", type=int, default=None)

    p_config = sub.add_parser("config")
    p_config.add_argument("action", choices=["print"])
    return parser


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        config.run.seed = args.seed
    if args.out is not None:
        config.run.out = args.out
    return config


def _print_report(name: str, report: dict) -> None:
    print(f"{name}: " + json.dumps(report, sort_keys=True))


def cmd_eval(config: RunConfig) -> int:
    bundle = load_bundle(config, need=("dataset", "vae", "flow", "student"))
    rows = variant_eval(bundle, config.run.eval_windows, config.run.seed)
    write_rows(os.path.join(config.run.out, "eval.csv"), rows)
    for row in rows:
        print(
            f"{row['method']:26s} JV {row['JV']:6.2f}%  SC {row['SC']:6.2f}%  "
            f"Succ {row['Succ']:6.2f}%  E_mpjpe {row['E_mpjpe']:7.2f}  "
            f"E_vel {row['E_vel']:.4f}  E_acc {row['E_acc']:.4f}"
        )
    mm = multimodality_eval(
        bundle, config.run.mmodality_prompts, config.run.mmodality_reps, config.run.seed
    )
    write_json(os.path.join(config.run.out, "mmodality.json"), mm)
    ratio = f"{mm['ratio']:.2f}" if mm["ratio"] is not None else "n/a"
    print(
        f"multimodality: unguided {mm['unguided']:.4f}  guided {mm['guided']:.4f} "
        f"(ratio {ratio}, {mm['prompts_used']} prompts)"
    )
    return EXIT_OK


def cmd_gate_eval(config: RunConfig) -> int:
    bundle = load_bundle(config, need=("dataset", "vae", "flow", "student", "gates"))
    rows = stage1_eval(bundle, config.run.seed)
    write_rows(os.path.join(config.run.out, "gate_stage1.csv"), rows)
    for row in rows:
        print(f"{row['prompt_set']:14s} {row['category']:18s} AUROC {row['AUROC'] or '--':>8} accept {row['accept_rate']:.2f}%")
    study = quintile_eval(
        bundle, config.run.quintile_windows, config.run.quintile_ood_fraction, config.run.seed
    )
    q_rows = [
        {
            "quintile": f"Q{q + 1}",
            "n": study.quintile_n[q],
            "n_ood": study.quintile_ood[q],
            "mean_mpjpe_mm": study.quintile_mpjpe[q],
        }
        for q in range(5)
    ]
    write_rows(os.path.join(config.run.out, "gate_quintiles.csv"), q_rows)
    for row in q_rows:
        print(f"{row['quintile']} n={row['n']:5d} (ood {row['n_ood']:5d})  MPJPE {row['mean_mpjpe_mm']:.2f} mm")
    print(f"Q5/Q1 = {study.q5_over_q1:.3f}  max adjacent inversion {study.max_adjacent_inversion * 100:.2f}%")
    return EXIT_OK


def cmd_bench(config: RunConfig) -> int:
    bundle = load_bundle(config, need=("dataset", "vae", "flow", "student", "gates"))
    rows = bench_latency(bundle, config.run.bench_runs, config.run.bench_warmup, config.run.seed)
    write_rows(os.path.join(config.run.out, "latency.csv"), rows)
    for row in rows:
        added = f"{row['added_ms']:.4f}" if row["added_ms"] != "" else "      "
        print(f"{row['component']:26s} added {added} ms  median {row['median_ms']:9.4f} ms  (std {row['std_ms']:.4f})")
    return EXIT_OK


def cmd_stream(config: RunConfig, args) -> int:
    need = ("dataset", "vae", "flow", "student") + (() if args.no_gates else ("gates",))
    bundle = load_bundle(config, need=need)
    variant = "base" if args.no_guidance else "student"
    if args.nfe is not None:
        config.reflow.teacher_nfe = args.nfe

    if args.prompts is not None:
        with open(args.prompts, "r", encoding="utf-8") as fh:
            lines = [line.strip() for line in fh if line.strip()]
    else:
        lines = None

    frames_per_prompt = 25  # 1 s of reference per submitted prompt
    events: list[PromptEvent] = []
    n_frames = 0

    def read_lines():
        if lines is not None:
            yield from lines
            return
        print("flowgate stream: type a prompt per line, 'quit' to finish", flush=True)
        for line in sys.stdin:
            yield line.strip()

    trace = EpisodeTrace()
    trace.on_decision = lambda d: print(f"  gate {d.to_json_line()}", flush=True)
    for line in read_lines():
        if not line:
            print("warning: empty prompt ignored", flush=True)
            continue
        if line.lower() == "quit":
            break
        events.append(PromptEvent(frame=n_frames, prompt=line))
        n_frames += frames_per_prompt
        print(f"prompt {line!r} scheduled at frame {events[-1].frame}", flush=True)
    if n_frames == 0:
        print("no prompts given")
        return EXIT_OK
    report = run_episode(
        bundle, events, n_frames,
        variant=variant, gates_on=not args.no_gates, seed=config.run.seed, trace=trace,
    )
    os.makedirs(config.run.out, exist_ok=True)
    with open(os.path.join(config.run.out, "gate_log.jsonl"), "w", encoding="utf-8") as fh:
        for entry in report.gate_log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    with open(os.path.join(config.run.out, "episode.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    print(report.to_json())
    return EXIT_OK


def cmd_serve(config: RunConfig, args) -> int:
    import uvicorn

    from .server import build_app

    need = ("dataset", "vae", "flow", "student") + (() if args.no_gates else ("gates",))
    bundle = load_bundle(config, need=need)
    app = build_app(bundle, gates_on=not args.no_gates,
                    variant="base" if args.no_guidance else "student")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _apply_overrides(load_config(args.config), args)
        if args.command == "config":
            print(format_config(config), end="")
            return EXIT_OK
        os.makedirs(config.run.out, exist_ok=True)
        if args.command == "gen-data":
            _print_report("gen-data", run_gen_data(config))
        elif args.command == "train-vae":
            _print_report("train-vae", run_train_vae(config))
        elif args.command == "train-flow":
            _print_report("train-flow", run_train_flow(config))
        elif args.command == "distill-reflow":
            _print_report("distill-reflow", run_distill(config))
        elif args.command == "calibrate-gates":
            _print_report("calibrate-gates", run_calibrate_gates(config))
        elif args.command == "eval":
            return cmd_eval(config)
        elif args.command == "gate-eval":
            return cmd_gate_eval(config)
        elif args.command == "bench-latency":
            return cmd_bench(config)
        elif args.command == "stream":
            return cmd_stream(config, args)
        elif args.command == "serve":
            return cmd_serve(config, args)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
