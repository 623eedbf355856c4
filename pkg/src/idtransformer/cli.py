"""Command line entry point.

Subcommands: ``train``, ``rank-sweep``, ``atilde-sweep``, ``check`` and
``dump-captures``.  Settings resolve as defaults < ``--preset`` <
``--config`` JSON < explicit flags.  Failures exit non-zero and print a JSON
error object on stderr (also written to ``error.json`` in the output
directory when one is known).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex

ENCODER_FLAGS = {
    "variant": "variant", "d_e": "d_e", "d_k": "d_k", "d_v": "d_v", "heads": "h",
    "d_s_max": "d_s_max", "ffn_hidden": "ffn_hidden", "n_classes": "n_classes", "vocab_size": "vocab_size",
}
RUN_FLAGS = ("lr", "beta1", "beta2", "adam_eps", "epochs", "batch_size", "clip_len", "manifest", "seed",
             "out_dir", "rank_eps")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def _add_common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--preset", choices=sorted(ex.PRESETS))
    g.add_argument("--variant", choices=["con", "add"])
    g.add_argument("--d-e", type=int)
    g.add_argument("--d-k", type=int)
    g.add_argument("--d-v", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--d-s-max", type=int)
    g.add_argument("--ffn-hidden", type=int)
    g.add_argument("--n-classes", type=int)
    g.add_argument("--vocab-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--beta1", type=float)
    g.add_argument("--beta2", type=float)
    g.add_argument("--adam-eps", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--clip-len", type=int)
    g.add_argument("--manifest", help="dataset manifest JSON")
    g.add_argument("--seed", type=int)
    g.add_argument("--out-dir")
    g.add_argument("--rank-eps", type=float, help="machine epsilon in the rank threshold")


def _add_model_source(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="trained checkpoint.bin")
    src.add_argument("--random-init", action="store_true", help="use freshly initialised weights")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idtransformer", allow_abbrev=False,
                                     description="Identifiable Transformer encoder experiments")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and evaluate a classifier", allow_abbrev=False)
    _add_common(p)

    p = sub.add_parser("rank-sweep", help="numerical rank of T against sequence length", allow_abbrev=False)
    _add_common(p)
    _add_model_source(p)
    p.add_argument("--d-s", type=_int_list, required=True, help="comma separated sequence lengths")
    p.add_argument("--n-samples", type=int, default=100)

    p = sub.add_parser("atilde-sweep", help="softmax-case Atilde construction sweep", allow_abbrev=False)
    _add_common(p)
    _add_model_source(p)
    p.add_argument("--d-s-range", type=int, nargs=2, metavar=("LO", "HI"), required=True,
                   help="inclusive range of sequence lengths")
    p.add_argument("--n-atilde", type=int, default=1000)

    p = sub.add_parser("check", help="constraint report for dumped matrices", allow_abbrev=False)
    p.add_argument("--attention", required=True, help="CSV of A")
    p.add_argument("--atilde", required=True, help="CSV of Atilde")
    p.add_argument("--transform", required=True, help="CSV of T")
    p.add_argument("--d-k", type=int)
    p.add_argument("--rank-eps", type=float, default=ex.SINGLE_EPS)
    p.add_argument("--out-dir")

    p = sub.add_parser("dump-captures", help="write per-head matrices as CSV", allow_abbrev=False)
    _add_common(p)
    _add_model_source(p)
    p.add_argument("--d-s", type=int, required=True)
    p.add_argument("--example", type=int, default=0)
    return parser


def config_from_args(args: argparse.Namespace, experiment: str) -> ex.RunConfig:
    overrides: dict = {"encoder": {}, "experiment": experiment}
    for flag, key in ENCODER_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides["encoder"][key] = value
    for flag in RUN_FLAGS:
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    return ex.build_config(args.preset, args.config, overrides)


def run(args: argparse.Namespace) -> dict:
    cmd = args.command
    if cmd == "check":
        report = ex.cmd_check(args.attention, args.atilde, args.transform, args.d_k, args.rank_eps)
        if args.out_dir:
            Path(args.out_dir).mkdir(parents=True, exist_ok=True)
            ex.write_json(Path(args.out_dir) / "check.json", report)
        return report
    config = config_from_args(args, cmd)
    if cmd == "train":
        metrics = ex.cmd_train(config)
        return {k: metrics[k] for k in ("best_epoch", "best_valid_acc", "test_acc_at_best_valid",
                                        "final_train_acc")}
    if cmd == "rank-sweep":
        rows = ex.cmd_rank_sweep(config, args.d_s, args.n_samples, args.checkpoint, args.random_init)
        return {"rows": [{k: r[k] for k in ("d_s", "mean_rank", "mean_nullity", "status")} for r in rows]}
    if cmd == "atilde-sweep":
        lo, hi = args.d_s_range
        rows = ex.cmd_atilde_sweep(config, range(lo, hi + 1), args.n_atilde, args.checkpoint, args.random_init)
        return {"rows": [{k: r.get(k) for k in ("d_s", "mean_rank_A_l", "p4_pass_rate", "status")}
                         for r in rows]}
    if cmd == "dump-captures":
        return {"captures": str(ex.cmd_dump_captures(config, args.d_s, args.checkpoint, args.random_init,
                                                     args.example))}
    raise ValueError(f"unknown command {cmd}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON error
        error = {"ok": False, "command": args.command, "error": type(exc).__name__, "message": str(exc)}
        text = json.dumps(error, sort_keys=True)
        print(text, file=sys.stderr)
        out_dir = getattr(args, "out_dir", None)
        if out_dir:
            try:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                (Path(out_dir) / "error.json").write_text(text + "\n", encoding="utf-8")
            except OSError:
                pass
        return 1
    print(json.dumps({"ok": True, "command": args.command, **result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
