"""Command-line interface.

Exit codes: 0 success, 2 invalid flags/arguments, 3 checkpoint problems,
4 degenerate input (no face found).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import imgio
from .config import GeneratorConfig
from .data import SyntheticFaces
from .errors import CheckpointError, DegenerateInputError, RequestError
from .metrics import MetricsReport, reconstruction_protocol, run_experiments, write_scatter_csv
from .pipeline import TransferRequest, transfer
from .registry import default_checkpoint_dir, load_runtime, save_runtime

EXIT_BAD_ARGS = 2
EXIT_CHECKPOINT = 3
EXIT_DEGENERATE = 4

CLI_MODES = {"full": "full", "both": "both", "shape": "shape_only", "color": "color_only"}
METRIC_CHOICES = ("fid", "fidclip", "lpips", "psnr", "iou", "hsvjs")


def _load_dataset(spec: str, cfg: GeneratorConfig):
    if spec.startswith("synthetic"):
        parts = spec.split(":")
        n = int(parts[1]) if len(parts) > 1 else 128
        seed = int(parts[2]) if len(parts) > 2 else 7
        return SyntheticFaces(n, cfg, seed=seed)
    raise RequestError(f"unsupported dataset spec {spec!r} (use synthetic:N[:SEED])")


def cmd_transfer(args) -> int:
    try:
        rt = load_runtime(args.checkpoint)
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    res = rt.cfg.output_resolution
    mode = CLI_MODES[args.mode]
    try:
        req = TransferRequest(
            face=imgio.load_image(args.face, res),
            shape=imgio.load_image(args.shape, res) if args.shape else None,
            color=imgio.load_image(args.color, res) if args.color else None,
            mode=mode,
        )
        req.validate()
    except RequestError as e:
        print(f"invalid request: {e}", file=sys.stderr)
        return EXIT_BAD_ARGS
    try:
        result, art = transfer(rt, req)
    except DegenerateInputError as e:
        print(f"degenerate input at stage {e.stage!r}: {e}", file=sys.stderr)
        return EXIT_DEGENERATE
    imgio.save_image(result, args.out)
    if args.timings:
        Path(args.timings).write_text(json.dumps(art.timings, indent=2))
    return 0


def cmd_train(args) -> int:
    from . import training

    try:
        rt = load_runtime(args.checkpoint)
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    cfg = training.TrainConfig.from_kv_file(args.config) if args.config else None
    data = _load_dataset(args.dataset, rt.cfg)
    log = training.TrainLog(args.log)
    kwargs = dict(log=log, resume_path=args.resume, save_path=args.save_state)
    if args.procedure == "rotate":
        training.train_rotate(rt, data, cfg, **kwargs)
    elif args.procedure == "color-pairs":
        pairs = training.build_color_pairs(rt, data, args.pairs or 64)
        import torch

        torch.save(pairs, args.pairs_out or "color_pairs.pt")
    elif args.procedure == "color":
        import torch

        pairs = (torch.load(args.pairs_in, weights_only=False) if args.pairs_in
                 else training.build_color_pairs(rt, data, args.pairs or 64))
        training.train_color(rt, pairs, cfg, data=data, **kwargs)
    elif args.procedure == "fs":
        training.train_fs_encoder(rt, data, cfg, variant=args.variant, **kwargs)
    elif args.procedure == "fusers":
        pairs = training.build_refine_pairs(rt, data, args.pairs or 64)
        training.train_fusers(rt, pairs, data, cfg, **kwargs)
    elif args.procedure == "finetune":
        pairs = training.build_refine_pairs(rt, data, args.pairs or 64)
        training.finetune_all(rt, pairs, data, cfg, **kwargs)
    if args.out:
        save_runtime(rt, args.out)
    return 0


def cmd_eval(args) -> int:
    try:
        rt = load_runtime(args.checkpoint)
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    data = _load_dataset(args.dataset, rt.cfg)
    if args.case == "reconstruction":
        report: MetricsReport = reconstruction_protocol(rt, data, n=args.n)
    else:
        report = run_experiments(rt, data, args.case, args.n, metric_names=tuple(args.metrics))
    if args.out:
        report.write_csv(args.out)
    if args.json:
        report.write_json(args.json)
    if args.scatter:
        write_scatter_csv(args.scatter, [{
            "label": args.case,
            "fid": report.aggregates.get("fid", ""),
            "median_time_s": report.aggregates["median_time_s"],
        }])
    print(json.dumps(report.aggregates, indent=2))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.checkpoint)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def cmd_prepare_toy(args) -> int:
    from . import toystack

    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = toystack.tiny_config() if args.preset == "tiny" else GeneratorConfig()
    sizes = toystack.tiny_sizes() if args.preset == "tiny" else toystack.desk_sizes()
    stack = toystack.build_toy_stack(cfg, sizes, seed=args.seed, log_dir=args.log_dir)
    save_runtime(stack.runtime, args.out)
    print(f"checkpoint registry written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hairfast", description="Encoder-based hair transfer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transfer", help="run one hair transfer")
    p.add_argument("--face", required=True)
    p.add_argument("--shape")
    p.add_argument("--color")
    p.add_argument("--mode", choices=sorted(CLI_MODES), default="full")
    p.add_argument("--checkpoint", default=str(default_checkpoint_dir()))
    p.add_argument("--out", required=True)
    p.add_argument("--timings")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("train", help="run a training procedure")
    p.add_argument("procedure", choices=["rotate", "color-pairs", "color", "fs", "fusers", "finetune"])
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--checkpoint", default=str(default_checkpoint_dir()))
    p.add_argument("--dataset", default="synthetic:128")
    p.add_argument("--variant", choices=["edit16", "refine64"], default="refine64")
    p.add_argument("--pairs", type=int)
    p.add_argument("--pairs-in")
    p.add_argument("--pairs-out")
    p.add_argument("--log")
    p.add_argument("--resume")
    p.add_argument("--save-state")
    p.add_argument("--out", help="write the updated checkpoint registry here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run the metric suite")
    p.add_argument("--case", choices=["full", "both", "shape", "color", "reconstruction"], required=True)
    p.add_argument("--dataset", default="synthetic:128")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--metrics", nargs="+", choices=METRIC_CHOICES, default=list(METRIC_CHOICES))
    p.add_argument("--checkpoint", default=str(default_checkpoint_dir()))
    p.add_argument("--out", help="per-experiment CSV path")
    p.add_argument("--json", help="full report JSON path")
    p.add_argument("--scatter", help="realism-vs-time scatter CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="start the transfer HTTP service")
    p.add_argument("--checkpoint", default=str(default_checkpoint_dir()))
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8091)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("prepare-toy", help="train the synthetic desk-scale stack")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=["tiny", "desk"], default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-dir")
    p.set_defaults(func=cmd_prepare_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RequestError as e:
        print(f"invalid request: {e}", file=sys.stderr)
        return EXIT_BAD_ARGS
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DegenerateInputError as e:
        print(f"degenerate input: {e}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
