import numpy as np
import pytest

from socialmpc import training
from socialmpc.core import Config, VehicleParams
from socialmpc.kinematics import linear_matrices
from socialmpc.model import build_model
from socialmpc.sim import Scenario, generate_dataset
from socialmpc.tensor import Tensor
from tests.conftest import make_frame

MICRO = Config().replace(d_model=8, n_heads=2, T_h=10, N=10, batch_size=8, k_modes=2)


@pytest.fixture(scope="module")
def frames():
    return generate_dataset(Scenario(vc_ratio=0.6, horizon_s=30.0), 2, T_h=10, N=10, seed=3)


# ----------------------------------------------------------- inverse kinematics

def test_infer_constant_speed_gives_zero_controls():
    f = make_frame(T_h=4, N=6)
    assert np.allclose(training.infer_ego_controls(f), 0.0, atol=1e-12)
    assert np.allclose(training.infer_surr_controls(f), 0.0, atol=1e-12)


def test_infer_uniform_acceleration():
    x0 = np.array([0.0, 10.0, 0.0, 0.0])
    fut = np.array([[10.0 * (j + 1) * 0.1, 10.0 + 0.2 * (j + 1), 0.0, 0.0] for j in range(5)])
    u = training.infer_controls(x0, fut, 2.8, 0.1)
    assert np.allclose(u[:, 0], 2.0, atol=1e-12) and np.allclose(u[:, 1], 0.0)


def test_infer_inverts_forward_rollout():
    rng = np.random.default_rng(0)
    L, dt, v = 2.8, 0.1, 15.0
    A, B = linear_matrices(v, L)
    x = np.array([3.0, v, 1.0, 0.01])
    u = rng.uniform(-1, 1, (20, 2)) * [2.0, 0.03]
    fut = []
    xi = x.copy()
    for j in range(20):
        xi = xi + (A @ xi + B @ u[j]) * dt
        fut.append(xi)
    rec = training.infer_controls(x, np.array(fut), L, dt)
    assert np.max(np.abs(rec - u)) < 1e-6


def test_infer_clamps_low_speed_with_warning(caplog):
    x0 = np.array([0.0, 0.1, 0.0, 0.0])
    fut = np.array([[0.01, 0.1, 0.0, 0.01]])
    with caplog.at_level("WARNING"):
        u = training.infer_controls(x0, fut, 2.8, 0.1, v_floor=1.0)
    assert "v_floor" in caplog.text
    assert u[0, 1] == pytest.approx(0.1 * 2.8 / 1.0)


# ----------------------------------------------------------- losses

def test_vehicle_loss_examples():
    gt = np.random.default_rng(1).normal(size=(2, 5, 3, 4))
    mask = np.ones((1, 1, 3), bool)
    assert training.vehicle_loss(gt, gt, mask).item() == 0.0
    assert training.vehicle_loss(gt + 0.5, gt, mask).item() == pytest.approx(0.125, abs=1e-15)
    assert training.vehicle_loss(gt - 2.0, gt, mask).item() == pytest.approx(1.5, abs=1e-15)


def test_vehicle_loss_ignores_masked_slots():
    gt = np.zeros((1, 2, 3, 4))
    pred = gt.copy()
    pred[..., 2, :] = 100.0
    assert training.vehicle_loss(pred, gt, np.array([[[True, True, False]]])).item() == 0.0


def test_gmm_loss_examples():
    rng = np.random.default_rng(2)
    u = rng.normal(size=(1, 4, 2, 2))
    mu = u[:, None]
    ones = np.ones_like(mu)
    sv = np.ones((1, 2), bool)
    assert training.gmm_loss(mu, ones, np.zeros((1, 1)), u, sv).item() == pytest.approx(0.0, abs=1e-15)
    assert training.gmm_loss(mu, ones * np.e, np.zeros((1, 1)), u, sv).item() == pytest.approx(1.0, abs=1e-15)


def test_gmm_selection_ignores_probability():
    u = np.zeros((1, 3, 1, 2))
    mu = np.stack([u, u + 10.0], axis=1)
    sel = training.best_of_k(mu, u, np.ones((1, 1), bool))
    assert sel[0] == 0
    log_p = np.log(np.array([[1e-6, 1 - 1e-6]]))
    loss = training.gmm_loss(mu, np.ones_like(mu), log_p, u, np.ones((1, 1), bool))
    assert loss.item() == pytest.approx(-np.log(1e-6))


def test_gmm_literal_form_gives_no_mean_gradient():
    rng = np.random.default_rng(3)
    mu = Tensor(rng.normal(size=(2, 2, 3, 2, 2)), requires_grad=True)
    sigma = Tensor(np.exp(rng.normal(size=(2, 2, 3, 2, 2))), requires_grad=True)
    lp = Tensor(np.log(np.full((2, 2), 0.5)), requires_grad=True)
    u = rng.normal(size=(2, 3, 2, 2))
    training.gmm_loss(mu, sigma, lp, u, np.ones((2, 2), bool), data_term=False).backward()
    assert mu.grad is None or not np.any(mu.grad)
    assert np.any(sigma.grad)


def test_total_loss_examples():
    assert training.total_loss(2.0, 4.0, 1.0, 0.5) == 4.0
    assert training.total_loss(2.0, 4.0, 3.0, 0.0) == 6.0
    assert training.total_loss(2.0, 4.0, 0.0, 0.0) == 0.0


# ----------------------------------------------------------- loop

def test_physics_rollout_reproduces_ground_truth_with_true_controls(frames):
    b = training.prepare_batch(frames[:4], MICRO.v_floor)
    P = b.present.shape[1] * (b.present.shape[1] - 1)
    X = training.rollout_tensor(b, np.zeros((4, P, 10, 4, 4)), np.zeros((4, P, 10, 4, 2)), b.u_surr_gt,
                                MICRO.dt).data
    # accel and heading are reproduced exactly; positions pick up linearization error only
    err = np.abs(X - b.X_gt)[..., [1, 3]] * b.present[:, None, :, None]
    assert err.max() < 1e-9


def test_lr_zero_keeps_loss_constant(frames):
    # one batch holding the whole set; only the in-batch order changes between epochs
    _, rep = training.train(frames[:8], MICRO.replace(lr=0.0, batch_size=8), steps=3, split=False)
    assert rep.loss_total[1] == pytest.approx(rep.loss_total[0], rel=1e-13)
    assert rep.loss_total[2] == pytest.approx(rep.loss_total[0], rel=1e-13)


def test_same_seed_same_trajectory(frames):
    _, a = training.train(frames, MICRO, steps=4, split=False)
    _, b = training.train(frames, MICRO, steps=4, split=False)
    assert a.loss_total == b.loss_total


def test_resume_matches_uninterrupted(frames, tmp_path):
    cfg = MICRO.replace(epochs=1)
    n_per = int(np.ceil(len(frames) / cfg.batch_size))
    _, full = training.train(frames, cfg, steps=n_per + 2, split=False)
    training.train(frames, cfg, steps=n_per, split=False, out_dir=tmp_path)
    _, rest = training.train(frames, cfg, steps=n_per + 2, split=False, resume=tmp_path / "model.ckpt")
    assert rest.loss_total == full.loss_total[n_per:]
    assert (tmp_path / "train_report.csv").read_text().startswith("step,loss_total")


def test_descent_with_tiny_step(frames):
    rng = np.random.default_rng(4)
    for trial in range(20):
        model = build_model(MICRO, seed=trial)
        idx = rng.choice(len(frames), 8, replace=False)
        batch = training.prepare_batch([frames[i] for i in idx], MICRO.v_floor)
        opt = training.Adam(model.parameters(), lr=1e-6)
        before, _, _ = training.batch_losses(model, batch, MICRO)
        before.backward()
        opt.step()
        after, _, _ = training.batch_losses(model, batch, MICRO)
        assert after.item() <= before.item() + 1e-12


def test_every_parameter_receives_gradient(frames):
    model = build_model(MICRO)
    batch = training.prepare_batch(frames[:8], MICRO.v_floor)
    opt = training.Adam(model.parameters(), lr=1e-3)
    for _ in range(2):  # zero-initialised heads open up after the first update
        opt.zero_grad()
        lt, _, _ = training.batch_losses(model, batch, MICRO)
        lt.backward()
        opt.step()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_nan_loss_aborts_with_frame_ids(frames):
    bad = [f for f in frames[:8]]
    model = build_model(MICRO)
    model.r_prob.b.data = model.r_prob.b.data * np.nan
    with pytest.raises(training.TrainingError, match="batch frames"):
        training.train(bad, MICRO, steps=1, split=False, model=model)


def test_split_and_batch_order():
    items = list(range(100))
    tr, va, te = training.split_dataset(items, 0)
    assert (len(tr), len(va), len(te)) == (70, 20, 10)
    assert sorted(tr + va + te) == items
    epoch0 = np.concatenate([training.batch_order(100, 32, 0, s) for s in range(4)])
    assert sorted(epoch0) == items


def test_report_rejects_non_monotone_steps():
    rep = training.TrainReport(seed=0)
    rep.record(0, 1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        rep.record(0, 1.0, 1.0, 0.0)


def test_untrained_reactions_hold_current_acceleration(frames):
    b = training.prepare_batch(frames[:8], MICRO.v_floor)
    out = build_model(MICRO).forward_batch(b.hist, b.maps, b.present, b.u_ego)
    sel = out.selected_reaction()                           # (B, N, n, 2)
    a_now = b.hist[:, 1:, -1, 3] * b.sv_mask
    assert np.max(np.abs(sel[..., 0] - a_now[:, None, :])) < 2e-3
    assert np.max(np.abs(sel[..., 1])) < 1e-12
