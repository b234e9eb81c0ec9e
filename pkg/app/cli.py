#!/usr/bin/env python3
"""
Command-line surface of the detector.

Subcommands: gen, split, featurize, train {fbs-packet,fbs-trace,msa}, eval,
detect, gradcheck, fuse-check, seqlen-sweep, compare-signatures, holdout.

Standard output carries command payloads only (detect verdicts, reports
written to "-"); progress and errors go to standard error.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, TextIO

from app.config import (
    DEFAULT_EPOCHS,
    DEFAULT_HIDDEN,
    DEFAULT_LR,
    DEFAULT_SEED,
    DEFAULT_WORKERS,
    LOG_LEVEL,
    MODEL_DIR,
    default_len_seq,
)
from app.core_model import Layer
from app.errors import ArtifactIOError, FbsDetectorError, RecordDecodeError, ValidationError
from app.fbs_detect import PacketModelConfig, TraceModelConfig
from app.featurize import Codebook, encode, split
from app.fusion import fuse_exhaustive_check
from app.msa_graph import SageConfig
from app.pipeline import (
    LayerArtifacts,
    ModelBundle,
    ablate_packet_models,
    artifact_path,
    compare_signatures,
    detect_trace,
    evaluate,
    gradcheck_suite,
    holdout_eval,
    seqlen_sweep,
    train_fbs_packet,
    train_fbs_trace,
    train_msa_layer,
)
from app.schemas import read_traces, trace_from_line, write_traces
from app.simulator import ScenarioSpec, gen_dataset, load_scenarios
from app.utils import decode_line, dumps_canonical, write_json, write_lines

logger = logging.getLogger(__name__)

GRADCHECK_LIMITS = {
    "dense_mse": 1e-6,
    "lstm_cell_tanh": 1e-6,
    "lstm_cell_sigmoid": 1e-6,
    "attention": 1e-6,
    "attended_output": 1e-6,
    "sage_edge_head": 1e-5,
    "packet_model": 1e-4,
}


def _layer(value: str) -> Layer:
    try:
        return Layer(value.upper())
    except ValueError:
        raise argparse.ArgumentTypeError(f"layer must be nas or rrc, got {value!r}")


def _range(value: str) -> List[int]:
    try:
        lo, hi = (int(v) for v in value.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"range must look like A:B, got {value!r}")
    if lo < 1 or hi < lo:
        raise argparse.ArgumentTypeError(f"range {value} is empty")
    return list(range(lo, hi + 1))


def write_report(report: Dict[str, Any], path: Optional[str], out: Optional[TextIO] = None) -> None:
    if path is None:
        return
    out = out or sys.stdout
    if path == "-":
        out.write(json.dumps(report, indent=2) + "\n")
        out.flush()
    else:
        write_json(path, report)
        logger.info(f"💾 Report written to {path}")


def _banner(title: str, rows: Dict[str, Any]) -> None:
    print("\n" + "=" * 50, file=sys.stderr)
    print(title, file=sys.stderr)
    print("=" * 50, file=sys.stderr)
    for key, value in rows.items():
        print(f"{key}: {value}", file=sys.stderr)
    print("=" * 50, file=sys.stderr)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(args: argparse.Namespace) -> int:
    if args.config:
        specs = load_scenarios(args.config)
        if args.seed is not None:
            specs = [replace(spec, master_seed=args.seed) for spec in specs]
    else:
        if not args.scenario:
            raise ValidationError("gen needs --config or --scenario")
        entry = {"scenario": args.scenario, "traces": args.traces, "mobility": args.mobility,
                 "noise": args.noise}
        if args.level is not None:
            entry["level"] = args.level
        if args.attack is not None:
            entry["attack"] = int(args.attack) if args.attack.isdigit() else args.attack
        specs = [ScenarioSpec.from_dict(entry, args.seed if args.seed is not None else DEFAULT_SEED)]

    dataset = gen_dataset(specs, workers=args.workers)
    write_traces(args.out, dataset.traces)
    manifest_path = args.manifest or str(Path(args.out).with_suffix(".manifest.json"))
    write_json(manifest_path, dataset.manifest.model_dump(mode="json"))
    _banner("GENERATION SUMMARY", {
        "Traces": dataset.manifest.n_traces,
        "Per class": dataset.manifest.traces_per_class,
        "Output": args.out,
    })
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    traces = read_traces(args.data)
    train, test = split(traces, ratio=args.ratio, seed=args.seed if args.seed is not None else DEFAULT_SEED)
    write_traces(args.train_out, train)
    write_traces(args.test_out, test)
    _banner("SPLIT SUMMARY", {"Train": len(train), "Test": len(test)})
    return 0


def cmd_featurize(args: argparse.Namespace) -> int:
    traces = read_traces(args.data)
    codebook = Codebook.load(args.codebook) if args.codebook else None
    matrix, fitted = encode(traces, args.layer, codebook)
    matrix.to_csv(args.out)
    if codebook is None:
        codebook_out = args.codebook_out or str(Path(args.out).with_suffix(".codebook.json"))
        fitted.save(codebook_out)
        logger.info(f"💾 Codebook written to {codebook_out}")
    return 0


def _packet_config(args: argparse.Namespace) -> PacketModelConfig:
    return PacketModelConfig(
        hidden=args.hidden,
        len_seq=args.len_seq or default_len_seq(args.layer.value),
        stride=args.stride,
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed if args.seed is not None else DEFAULT_SEED,
    )


def cmd_train(args: argparse.Namespace) -> int:
    traces = read_traces(args.data)
    layer = args.layer
    seed = args.seed if args.seed is not None else DEFAULT_SEED

    if args.kind == "fbs-packet":
        codebook, model, history = train_fbs_packet(traces, layer, _packet_config(args))
        codebook.save(str(artifact_path(args.model_dir, layer, "codebook")))
        model.save(str(artifact_path(args.model_dir, layer, "fbs_packet")))
    elif args.kind == "fbs-trace":
        bundle = ModelBundle.load(args.model_dir)
        config = TraceModelConfig(epochs=args.epochs, lr=args.lr, seed=seed)
        model, history = train_fbs_trace(traces, bundle.layers[layer], config)
        model.save(str(artifact_path(args.model_dir, layer, "fbs_trace")))
    else:
        config = SageConfig(hidden=args.hidden, epochs=args.epochs, lr=args.lr, seed=seed)
        required = [] if args.allow_missing_classes else None
        model, bank, history = train_msa_layer(traces, layer, config, required)
        model.save(str(artifact_path(args.model_dir, layer, "msa_sage")))
        bank.save(str(artifact_path(args.model_dir, layer, "msa_bank")))

    _banner("TRAINING SUMMARY", {
        "Model": f"{layer.value} {args.kind}",
        "Epochs": len(history),
        "Loss": f"{history[0]:.5f} -> {history[-1]:.5f}",
        "Saved to": args.model_dir,
    })
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    bundle = ModelBundle.load(args.model)
    traces = read_traces(args.data)
    if args.ablate_packet is not None:
        if not args.train_data:
            raise ValidationError("--ablate-packet needs --train-data to refit the trace models")
        bundle = ablate_packet_models(bundle, read_traces(args.train_data), args.ablate_packet)
    report, verdicts = evaluate(bundle, traces, args.task, use_fusion=args.fuse, tau=args.tau)
    if args.predictions:
        write_lines(args.predictions, (dumps_canonical(v.model_dump(mode="json")) for v in verdicts))
    write_report(report, args.report)
    _banner("EVALUATION SUMMARY", {
        "Task": args.task,
        "Traces": report["n_traces"],
        "Accuracy": f"{report['trace']['accuracy']:.4f}",
        "Macro F1": f"{report['trace']['f1']:.4f}",
        "FPR": f"{report['trace']['fpr']:.4f}",
    })
    return 0


def cmd_detect(args: argparse.Namespace, stdin: Optional[TextIO] = None, stdout: Optional[TextIO] = None) -> int:
    """One verdict line per decodable input line, flushed as it is produced."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    bundle = ModelBundle.load(args.models)
    if args.data:
        try:
            source = open(args.data, "rb")
        except OSError as e:
            raise ArtifactIOError(f"Could not read {args.data}: {e}") from e
    else:
        source = getattr(stdin, "buffer", stdin)
    failures = 0
    try:
        for line_no, raw in enumerate(source, start=1):
            try:
                line = decode_line(raw, line_no)
                if not line.strip():
                    continue
                trace = trace_from_line(line, line_no)
            except RecordDecodeError as e:
                failures += 1
                logger.error(f"❌ Skipping input: {e}")
                continue
            verdict = detect_trace(bundle, trace, args.task, use_fusion=args.fuse, tau=args.tau)
            stdout.write(dumps_canonical(verdict.model_dump(mode="json")) + "\n")
            stdout.flush()
    finally:
        if args.data:
            source.close()
    if failures:
        logger.warning(f"⚠️ {failures} input line(s) could not be decoded")
        return RecordDecodeError.exit_code
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    worst = gradcheck_suite(n_seeds=args.seeds, seed=args.seed if args.seed is not None else 0)
    failed = {name: err for name, err in worst.items() if err >= GRADCHECK_LIMITS[name]}
    write_report({"max_relative_error": worst, "limits": GRADCHECK_LIMITS, "failed": sorted(failed)}, args.report)
    if failed:
        logger.error(f"❌ Gradient check failed for {sorted(failed)}")
        return 1
    logger.info("✅ All gradient checks passed")
    return 0


def cmd_fuse_check(args: argparse.Namespace) -> int:
    result = fuse_exhaustive_check()
    write_report(result, args.report)
    return 0 if result["mismatches"] == 0 else 1


def cmd_seqlen_sweep(args: argparse.Namespace) -> int:
    traces = read_traces(args.data)
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    train, test = split(traces, ratio=args.ratio, seed=seed)
    rows = seqlen_sweep(train, test, args.layer, args.range[::args.step], _packet_config(args))
    write_report({"layer": args.layer.value, "rows": rows}, args.report or "-")
    return 0


def cmd_compare_signatures(args: argparse.Namespace) -> int:
    traces = read_traces(args.data)
    artifacts: Optional[LayerArtifacts] = None
    if args.model:
        artifacts = ModelBundle.load(args.model).layers[args.layer]
    report = compare_signatures(traces, artifacts, tau=args.tau)
    write_report(report, args.report or "-")
    return 0


def cmd_holdout(args: argparse.Namespace) -> int:
    traces = read_traces(args.data)
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    config = SageConfig(hidden=args.hidden, epochs=args.epochs, lr=args.lr, seed=seed)
    report = holdout_eval(traces, args.layer, config, tau=args.tau)
    write_report(report, args.report or "-")
    _banner("HOLDOUT SUMMARY", {"Non-Benign rate": report["non_benign_rate"]})
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"Master seed (default {DEFAULT_SEED})")
    common.add_argument("--verbose", action="store_true", help="Show detailed logging")

    parser = argparse.ArgumentParser(prog="fbsdetector", description="Fake base station and multi-step attack detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="Generate a synthetic trace dataset")
    p.add_argument("--config", help="YAML/JSON scenario file")
    p.add_argument("--scenario", choices=["benign", "fbs", "msa"])
    p.add_argument("--attack", help="Attack id or name (msa only)")
    p.add_argument("--level", type=int)
    p.add_argument("--traces", type=int, default=1)
    p.add_argument("--mobility", action="store_true")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--workers", type=int, default=DEFAULT_WORKERS)
    p.add_argument("--out", required=True, help="Trace JSONL output")
    p.add_argument("--manifest", help="Manifest JSON output (default: next to --out)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("split", parents=[common], help="Trace-level stratified train/test split")
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--train-out", required=True)
    p.add_argument("--test-out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("featurize", parents=[common], help="Encode one layer into a feature matrix CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--layer", type=_layer, required=True)
    p.add_argument("--codebook", help="Existing codebook; unseen values map to UNK")
    p.add_argument("--codebook-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", parents=[common], help="Train a model")
    p.add_argument("kind", choices=["fbs-packet", "fbs-trace", "msa"])
    p.add_argument("--data", required=True)
    p.add_argument("--layer", type=_layer, required=True)
    p.add_argument("--model-dir", "--model", dest="model_dir", default=MODEL_DIR)
    p.add_argument("--len-seq", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--hidden", type=int, default=DEFAULT_HIDDEN)
    p.add_argument("--allow-missing-classes", action="store_true",
                   help="msa: train even if some of the 22 classes never label an edge")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="Batch evaluation with metrics")
    p.add_argument("--model", "--models", dest="model", default=MODEL_DIR)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=["fbs", "msa"], default="fbs")
    p.add_argument("--fuse", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--report", help="Report JSON path, or - for standard output")
    p.add_argument("--predictions", help="Verdict JSONL output")
    p.add_argument("--ablate-packet", type=float, metavar="P",
                   help="Replace packet models by constant P and refit the trace models on --train-data")
    p.add_argument("--train-data", help="Traces for refitting trace models when ablating")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", parents=[common], help="Stream verdicts for trace JSONL on standard input")
    p.add_argument("--models", "--model", dest="models", default=MODEL_DIR)
    p.add_argument("--data", help="Read this file instead of standard input")
    p.add_argument("--task", choices=["fbs", "msa"], default="fbs")
    p.add_argument("--fuse", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--report")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fuse-check", parents=[common], help="Exhaustive check of the fusion rule")
    p.add_argument("--report")
    p.set_defaults(func=cmd_fuse_check)

    p = sub.add_parser("seqlen-sweep", parents=[common], help="Packet accuracy across window lengths")
    p.add_argument("--data", required=True)
    p.add_argument("--layer", type=_layer, default=Layer.NAS)
    p.add_argument("--range", type=_range, required=True, help="A:B inclusive")
    p.add_argument("--step", type=int, default=1)
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--len-seq", type=int, help=argparse.SUPPRESS)
    p.add_argument("--stride", type=int)
    p.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--hidden", type=int, default=DEFAULT_HIDDEN)
    p.add_argument("--report")
    p.set_defaults(func=cmd_seqlen_sweep)

    p = sub.add_parser("compare-signatures", parents=[common], help="Signature baselines vs reshaped attacks")
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="Model directory with msa artifacts for the companion column")
    p.add_argument("--layer", type=_layer, default=Layer.NAS)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--report")
    p.set_defaults(func=cmd_compare_signatures)

    p = sub.add_parser("holdout", parents=[common], help="Hold-one-attack-out evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--layer", type=_layer, default=Layer.NAS)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--report")
    p.set_defaults(func=cmd_holdout)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, LOG_LEVEL.upper(), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except FbsDetectorError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
