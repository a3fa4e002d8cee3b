import numpy as np
import pytest

from posenet3d import autodiff as ad
from posenet3d import geometry as geo
from posenet3d import losses as L
from posenet3d.autodiff import Tensor, check_gradients


def _rot(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


def test_weights_defaults_and_validation():
    w = L.LossWeights()
    assert (w.mss, w.tc, w.bl, w.rot, w.beta, w.student) == (2.0, 1.0, 2.0, 30.0, 10.0, 2.0)
    with pytest.raises(ad.ConfigError):
        L.LossWeights(tc=-1.0)


def test_mss_examples_and_oracle():
    rng = np.random.default_rng(0)
    Y = rng.normal(size=(9, 14, 3))
    assert L.loss_mss(Y, Tensor(Y)).item() == 0.0
    Z = Y.copy()
    Z[3, 5] += [1.0, 0.0, 0.0]
    assert np.isclose(L.loss_mss(Y, Tensor(Z)).item(), 1.0)
    A, B = rng.normal(size=(2, 9, 14, 3))
    oracle = 0.0
    for t in range(9):
        for j in range(14):
            oracle += sum((A[t, j, k] - B[t, j, k]) ** 2 for k in range(3))
    assert abs(L.loss_mss(A, Tensor(B)).item() - oracle) <= 1e-12 * oracle


def test_mss_batch_is_mean_of_items():
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=(2, 4, 9, 14, 3))
    per = [L.loss_mss(A[i], Tensor(B[i])).item() for i in range(4)]
    assert np.isclose(L.loss_mss(A, Tensor(B)).item(), np.mean(per), rtol=1e-14)


def test_tc_examples_and_oracle():
    rng = np.random.default_rng(2)
    seq = rng.normal(size=(10, 14, 3))
    assert L.loss_tc(seq[:9], seq[1:]).item() == 0.0
    nxt = seq[1:].copy()
    nxt[4, 7] += [0.0, 2.0, 0.0]
    assert np.isclose(L.loss_tc(seq[:9], nxt).item(), 4.0)
    # a change in the last frame of the successor is outside the overlap
    nxt = seq[1:].copy()
    nxt[8] += 5.0
    assert L.loss_tc(seq[:9], nxt).item() == 0.0
    A, B = rng.normal(size=(2, 9, 14, 3))
    oracle = 0.0
    for j in range(8):
        for i in range(14):
            oracle += np.sum((A[j + 1, i] - B[j, i]) ** 2)
    assert abs(L.loss_tc(A, B).item() - oracle) <= 1e-12 * oracle


def test_tc_mask_averages_valid_items():
    rng = np.random.default_rng(3)
    A, B = rng.normal(size=(2, 3, 9, 14, 3))
    mask = np.array([True, False, True])
    per = [L.loss_tc(A[i], B[i]).item() for i in (0, 2)]
    assert np.isclose(L.loss_tc(A, B, mask).item(), np.mean(per))
    assert L.loss_tc(A, B, np.zeros(3, bool)).item() == 0.0


def test_bl_examples_and_oracle():
    rng = np.random.default_rng(4)
    X = np.zeros((2, 14, 3))
    X[:, :, 0] = np.arange(14)  # unit spacing along x
    X[1, geo.NECK] = X[1, geo.HEAD] + [3.0, 0, 0]  # head-neck 1 then 3, others shift
    only = ((geo.HEAD, geo.NECK),)
    assert np.isclose(L.loss_bl(X, only).item(), 1.0)
    seq = rng.normal(size=(9, 14, 3))
    rigid = np.stack([f @ _rot(rng).T + rng.normal(size=3) for f in np.repeat(seq[:1], 9, 0)])
    assert L.loss_bl(rigid).item() < 1e-9
    oracle = 0.0
    for m, n in geo.BONES:
        lengths = [np.sqrt(np.sum((seq[t, m] - seq[t, n]) ** 2)) for t in range(9)]
        mu = sum(lengths) / 9
        oracle += sum((l - mu) ** 2 for l in lengths) / 9
    assert abs(L.loss_bl(seq).item() - oracle) <= 1e-10 * oracle
    with pytest.raises(ad.ShapeError):
        L.loss_bl(seq[:1])


def test_bl_invariant_under_per_frame_rigid_motion():
    rng = np.random.default_rng(5)
    seq = rng.normal(size=(9, 14, 3))
    moved = np.stack([f @ _rot(rng).T + rng.normal(size=3) for f in seq])
    assert abs(L.loss_bl(seq).item() - L.loss_bl(moved).item()) < 1e-9


def test_adversarial_examples():
    z = np.zeros(5)
    assert np.isclose(L.loss_adv_disc(z, z).item(), 2 * np.log(2))
    assert np.isclose(L.loss_adv_gen(z).item(), np.log(2))
    assert L.loss_adv_disc(np.full(3, 20.0), np.full(3, -20.0)).item() < 1e-8
    # stable for huge logits
    assert np.isfinite(L.loss_adv_disc(np.array([-800.0]), np.array([800.0])).item())
    assert L.disc_accuracy(np.array([1.0, -1.0]), np.array([-2.0, -3.0])) == 0.75


def test_adversarial_gradients():
    rng = np.random.default_rng(6)
    r, f = rng.normal(scale=3, size=(2, 6))
    assert check_gradients(lambda a, b: L.loss_adv_disc(a, b), [r, f]) < 1e-6
    assert check_gradients(lambda b: L.loss_adv_gen(b), f) < 1e-6


def test_kd_examples_and_oracle():
    rng = np.random.default_rng(7)
    jm = np.array([15, 12, 16, 17, 18, 19, 20, 21, 1, 2, 4, 5, 7, 8])
    teacher = rng.normal(size=(9, 14, 3)) + [0, 0, 10]
    student = rng.normal(size=(9, 24, 3))
    placed = student.copy()
    placed[:, jm] = teacher - 4.0  # any translation is removed by root centring
    assert L.loss_kd(teacher, placed, jm).item() < 1e-20
    off = placed.copy()
    off[2, jm[geo.L_WRIST]] += [0, 1.0, 0]  # non-hip joint, root unchanged
    assert np.isclose(L.loss_kd(teacher, off, jm).item(), 1.0)
    tc = teacher - 0.5 * (teacher[:, 8:9] + teacher[:, 9:10])
    m = student[:, jm]
    sc = m - 0.5 * (m[:, 8:9] + m[:, 9:10])
    oracle = sum(np.sum((tc[t, i] - sc[t, i]) ** 2) for t in range(9) for i in range(14))
    assert np.isclose(L.loss_kd(teacher, student, jm).item(), oracle, rtol=1e-12)


def test_rotation_and_shape_regularisers():
    R = np.broadcast_to(np.eye(3), (9, 24, 3, 3)).copy()
    assert L.loss_rot_reg(R).item() == 0.0
    assert L.loss_beta(np.zeros(10)).item() == 0.0
    R[4, 7] = np.diag([-1.0, -1.0, 1.0])
    assert np.isclose(L.loss_rot_reg(R).item(), 8.0)
    rng = np.random.default_rng(8)
    A = rng.normal(size=(9, 24, 3, 3))
    oracle = sum((A[t, k, a, b] - (a == b)) ** 2 for t in range(9) for k in range(24) for a in range(3) for b in range(3))
    assert np.isclose(L.loss_rot_reg(A).item(), oracle, rtol=1e-12)
    b = rng.normal(size=10)
    assert np.isclose(L.loss_beta(b).item(), sum(v * v for v in b))


def test_stage_losses_arithmetic():
    w = L.LossWeights()
    one = {k: Tensor(np.array(1.0)) for k in ("mss", "tc", "bl", "adv_t", "kd", "rot", "beta", "adv_s")}
    zero = {k: Tensor(np.array(0.0)) for k in one}
    assert L.stage_losses(w, zero, 1).item() == 0.0
    assert L.stage_losses(w, one, 1).item() == 6.0
    assert L.stage_losses(w, one, 2).item() == 1 + 30 + 10
    assert L.stage_losses(w, one, 3).item() == 41.0
    assert L.stage_losses(w, one, 4).item() == 6 + 2 * 41 + 1
    with pytest.raises(ad.ConfigError):
        L.stage_losses(w, one, 5)


@pytest.mark.parametrize("name", ["mss", "tc", "bl", "kd", "rot", "beta"])
def test_loss_gradients(name):
    rng = np.random.default_rng(9)
    jm = np.array([15, 12, 16, 17, 18, 19, 20, 21, 1, 2, 4, 5, 7, 8])
    if name == "mss":
        args = list(rng.normal(size=(2, 2, 3, 14, 3)))
        fn = L.loss_mss
    elif name == "tc":
        args = list(rng.normal(size=(2, 2, 3, 14, 3)))
        fn = L.loss_tc
    elif name == "bl":
        args = [rng.normal(size=(2, 3, 14, 3))]
        fn = L.loss_bl
    elif name == "kd":
        args = [rng.normal(size=(3, 14, 3)), rng.normal(size=(3, 24, 3))]
        fn = lambda a, b: L.loss_kd(a, b, jm)
    elif name == "rot":
        args = [rng.normal(size=(2, 2, 3, 3))]
        fn = L.loss_rot_reg
    else:
        args = [rng.normal(size=(2, 10))]
        fn = L.loss_beta
    assert check_gradients(fn, args) < 1e-4


def test_losses_nonnegative_on_random_inputs():
    rng = np.random.default_rng(10)
    for _ in range(20):
        A, B = rng.normal(size=(2, 9, 14, 3))
        assert L.loss_mss(A, B).item() >= 0
        assert L.loss_tc(A, B).item() >= 0
        assert L.loss_bl(A).item() >= 0
        assert L.loss_adv_disc(A[0, 0], B[0, 0]).item() >= 0
