"""Synthetic data -> four training stages -> lift -> evaluate, through the CLI.

    python3 demos/pipeline.py [workdir]

Takes a couple of minutes on one core.  The config is deliberately tiny.
"""
import json
import sys
import tempfile
from pathlib import Path

from posenet3d import cli

CONFIG = """\
net.channels = 32
net.dropout = 0.1
train.lr = 0.001
train.batch_size = 32
train.epochs = 10,10,5,5
loss.rot = 0.001
loss.beta = 0.01
"""


def run(*args):
    code = cli.main([str(a) for a in args])
    if code != 0:
        sys.exit(f"posenet3d {args[0]} failed with exit code {code}")


def main(work: Path):
    work.mkdir(parents=True, exist_ok=True)
    body, train, held = work / "body.pn3dbm", work / "train.jsonl", work / "held.jsonl"
    run("synth", "--model", body, "--data", train, "--sequences", 10, "--length", 40,
        "--heldout", held, "--heldout-sequences", 3)
    (work / "tiny.cfg").write_text(CONFIG)
    run("train", "--config", work / "tiny.cfg", "--data", train, "--model", body, "--out", work / "run")

    print(f"{'source':>8} {'P-MPJPE':>9} {'MPJVE':>7} {'MBLSTD':>7} {'PCK':>6} {'AUC':>6}")
    for source in ("teacher", "student", "fused"):
        pred = work / f"{source}.jsonl"
        run("lift", "--ckpt", work / "run" / "stage4.pn3dcp", "--model", body, "--data", held,
            "--out", pred, "--source", source)
        run("eval", "--pred", pred, "--gt", held, "--out", work / f"{source}.json")
        r = json.loads((work / f"{source}.json").read_text())
        print(f"{source:>8} {r['p_mpjpe_mm']:9.1f} {r['mpjve_mm_per_frame']:7.2f} {r['mblstd_mm']:7.2f} "
              f"{r['pck150_percent']:6.1f} {r['auc_percent']:6.1f}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="pn3d-")))
