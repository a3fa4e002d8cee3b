"""Why the joint adapter is a convex regressor and not an affine map on joints.

Stage 3 is run twice on data annotated with a shifted joint convention: once
with the affine adapter J' = A J + b, once with row-convex vertex weights.
Both fit the targets; only the affine one moves joints off the body.

    python3 demos/sja_hull.py
"""
import numpy as np
from scipy.spatial import Delaunay

from posenet3d import bodymodel as bm
from posenet3d import data
from posenet3d import losses as L
from posenet3d import networks as nw
from posenet3d import training as tr


def outside_hull(params, body, seqs, mode):
    batch = data.assemble_batch(seqs, data.window_index(seqs, 9), 9)
    feats = nw.backbone_forward(params.values, params.buffers, batch.x2d, params.cfg, "eval")
    R, betas = nw.student_forward(params.values, params.buffers, feats, params.cfg, "eval")
    B, T, K = R.shape[:3]
    verts, _ = bm.lbs_forward(body, np.repeat(betas.data[:, None], T, axis=1).reshape(B * T, -1),
                              R.data.reshape(B * T, K, 3, 3))
    J = tr.student_joints(params.values, body, R, betas, mode).data.reshape(B * T, K, 3)[:, body.joint_map]
    inside = [Delaunay(v).find_simplex(j) >= 0 for v, j in zip(verts.data, J)]
    return int(np.size(inside) - np.count_nonzero(inside)), np.size(inside)


def main():
    rng = np.random.default_rng(0)
    body = bm.synth_model(rng, num_vertices=400)
    motion = data.MotionConfig(joint_source="regressed", regressor=bm.annotation_regressor(body))
    train = data.synth_motion(body, rng, 40, 10, motion)
    held = data.synth_motion(body, rng, 10, 10, motion, prefix="held")
    for linear in (True, False):
        net = nw.NetConfig(channels=32, dropout=0.0, linear_sja=linear)
        cfg = tr.TrainConfig(net=net, weights=L.LossWeights(rot=1e-3, beta=1e-2), batch_size=16, lr=1e-3,
                             epochs=(0, 0, 20, 0), distill_target="gt")
        params = nw.init_params(np.random.default_rng(0), net, body.regressor)
        _, recs = tr.run_stage(3, params, train, cfg, body)
        bad, total = outside_hull(params, body, held, "linear" if linear else "sja")
        name = "affine" if linear else "convex"
        print(f"{name:>6}: L_KD {recs[0]['kd']:6.2f} -> {recs[-1]['kd']:5.2f}, "
              f"held-out joints outside the mesh hull {bad}/{total}")


if __name__ == "__main__":
    main()
