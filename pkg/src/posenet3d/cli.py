"""Command-line entry point: synth, train, lift, eval, export.

Exit codes: 0 success, 2 usage or stage-ordering error, 3 data error,
4 numeric divergence.  PN3D_THREADS caps BLAS threads (default 1).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import autodiff as ad
from . import container
from .bodymodel import ModelInvariantError, load_model, save_model, sja_weights, synth_model
from .data import KeypointFormatError, KeypointSequence, MotionConfig, SchemaError, load_keypoints, synth_motion, write_keypoints
from .inference import predict_sequence
from .metrics import evaluate
from .networks import ConfigMismatchError, init_params, load_checkpoint, save_checkpoint
from .training import DivergenceError, TrainConfig, run_stage, stage_rng

logger = logging.getLogger("posenet3d")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
EXPORT_MAGIC = b"PN3D-EX"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- config files ----------------------------------------------------------

def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | None, overrides: list[str] | None = None, seed: int | None = None) -> TrainConfig:
    flat: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise DataError(f"config file not found: {p}")
        flat.update(parse_config_text(p.read_text(), str(p)))
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        flat[key.strip()] = value.strip()
    if seed is not None:
        flat["train.seed"] = str(seed)
    try:
        return TrainConfig.from_flat(flat)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc


# -- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    body = synth_model(rng)
    cfg = MotionConfig(amplitude=args.amplitude)
    seqs = synth_motion(body, rng, args.sequences, args.length, cfg) if args.sequences else []
    save_model(args.model, body)
    write_keypoints(args.data, seqs)
    if args.heldout:
        held = synth_motion(body, rng, args.heldout_sequences, args.length, cfg, prefix="heldout")
        write_keypoints(args.heldout, held)
    print(f"wrote body model {args.model} and {len(seqs)} sequences to {args.data}")
    return EXIT_OK


def _read_sequences(path):
    try:
        return load_keypoints(path)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    except (KeypointFormatError, SchemaError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _read_body(path):
    if not Path(path).exists():
        raise DataError(f"body model not found: {path}")
    try:
        return load_model(path)
    except (container.FormatError, ModelInvariantError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _parse_stages(text: str) -> list[int]:
    try:
        stages = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--stages must be a comma list of 1..4, got {text!r}") from exc
    if not stages or any(s not in (1, 2, 3, 4) for s in stages) or stages != sorted(set(stages)):
        raise UsageError(f"--stages must be increasing values in 1..4, got {text!r}")
    return stages


def ckpt_path(out_dir: Path, stage: int) -> Path:
    return out_dir / f"stage{stage}.pn3dcp"


def cmd_train(args) -> int:
    stages = _parse_stages(args.stages)
    cfg = load_config(args.config, args.set, args.seed)
    out = Path(args.out)
    first = stages[0]
    if first > 1 and not ckpt_path(out, first - 1).exists():
        raise UsageError(f"stage {first} needs the stage {first - 1} checkpoint {ckpt_path(out, first - 1)}")
    sequences = _read_sequences(args.data)
    body = _read_body(args.model)
    out.mkdir(parents=True, exist_ok=True)

    if first == 1:
        params = init_params(stage_rng(cfg.seed, 0), cfg.net, body.regressor)
    else:
        params = load_checkpoint(ckpt_path(out, first - 1), cfg.net).params

    manifest_path = out / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"runs": []}
    run = {
        "config": cfg.to_flat(),
        "seed": cfg.seed,
        "inputs": {"data": str(args.data), "model": str(args.model), "config": args.config},
        "outputs": {"dir": str(out), "log": str(out / "train_log.jsonl")},
        "code_version": __version__,
        "stages_requested": stages,
        "stages": [],
    }
    manifest["runs"].append(run)
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")

    for stage in stages:
        start = time.perf_counter()
        params, records = run_stage(stage, params, sequences, cfg, body, log_path=out / "train_log.jsonl")
        path = ckpt_path(out, stage)
        meta = {
            "stage": stage,
            "train_config": cfg.to_flat(),
            "next_rng_state": stage_rng(cfg.seed, stage + 1).bit_generator.state,
        }
        save_checkpoint(path, params, meta)
        run["stages"].append(
            {
                "stage": stage,
                "epochs": len(records),
                "checkpoint": str(path),
                "final": records[-1] if records else None,
                "wall_time_s": round(time.perf_counter() - start, 3),
            }
        )
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
        print(f"stage {stage} done: {path}")
    return EXIT_OK


def _read_ckpt(path, body=None):
    if not Path(path).exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except container.FormatError as exc:
        raise DataError(f"{path}: {exc}") from exc


def cmd_lift(args) -> int:
    ckpt = _read_ckpt(args.ckpt)
    body = _read_body(args.model) if args.model else None
    if args.source != "teacher" and body is None:
        raise UsageError(f"--source {args.source} needs --model")
    sequences = _read_sequences(args.data)
    out_seqs, extra = [], {}
    for seq in sequences:
        pred = predict_sequence(ckpt.params, seq.joints2d, body, with_student=args.source != "teacher")
        out_seqs.append(KeypointSequence(seq.sequence_id, seq.joints2d, pred.joints(args.source), frame_ids=seq.frame_ids))
        if pred.student is not None:
            L = len(seq)
            extra[seq.sequence_id] = {"betas": np.repeat(pred.betas[None], L, axis=0), "rotations": pred.rotations}
    write_keypoints(args.out, out_seqs, extra)
    print(f"wrote {sum(len(s) for s in out_seqs)} predicted frames to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = {s.sequence_id: s for s in _read_sequences(args.pred)}
    gt = {s.sequence_id: s for s in _read_sequences(args.gt)}
    for name, table in (("prediction", pred), ("ground truth", gt)):
        lacking = [k for k, s in table.items() if s.joints3d is None]
        if lacking:
            raise DataError(f"{name} sequences without joints3d: {lacking}")
    try:
        report = evaluate({k: s.joints3d for k, s in pred.items()}, {k: s.joints3d for k, s in gt.items()}, args.fps)
    except KeyError as exc:
        raise DataError(exc.args[0]) from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    Path(args.out).write_text(report.to_json())
    print(f"P-MPJPE {report.p_mpjpe_mm:.2f} mm, PCK {report.pck150_percent:.1f}%, AUC {report.auc_percent:.1f}%")
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = _read_ckpt(args.ckpt)
    values = ckpt.params.values
    if args.what == "sja":
        if "sja.logits" not in values:
            raise DataError("checkpoint has no semantic joint regressor (run stage 3 first)")
        arrays = {"sja.weights": sja_weights(values["sja.logits"]).data}
    else:
        arrays = dict(values)
    container.write(args.out, EXPORT_MAGIC, arrays)
    print(f"exported {len(arrays)} arrays to {args.out}")
    return EXIT_OK


def read_export(path) -> dict[str, np.ndarray]:
    return container.read(path, EXPORT_MAGIC)


# -- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posenet3d", description="Unsupervised 2D-to-3D pose lifting.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic body model and keypoint dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sequences", type=int, default=8)
    p.add_argument("--length", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--heldout", help="optional second dataset drawn after the first")
    p.add_argument("--heldout-sequences", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run training stages")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stages", default="1,2,3,4")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("lift", help="predict 3D joints for a keypoint file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source", choices=("teacher", "student", "fused"), default="fused")
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fps", type=float, default=50.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="dump learned arrays from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--what", choices=("sja", "params"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def thread_count() -> int:
    raw = os.environ.get("PN3D_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"PN3D_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise UsageError("PN3D_THREADS must be >= 1")
    return n


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=thread_count()):
            return args.func(args)
    except (UsageError, ad.ConfigError, ConfigMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
