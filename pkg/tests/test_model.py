import numpy as np
import pytest

from socialmpc.core import Config, SystemState, VehicleParams
from socialmpc.model import ModelHyper, SociallyAwareModel, ZeroInteractionModel, pair_index, pairs_to_blocks
from socialmpc.social_dynamics import assemble_step
from socialmpc.tensor import Tensor
from tests.conftest import make_frame

MICRO = ModelHyper(d_model=8, n_heads=2, enc_depth=1, dec_depth=1, k_modes=2, N=3, T_h=5, map_tokens=12,
                   n_slots=3, block_bound=2.0)


def micro_inputs(seed=0, present=(True, True, True)):
    rng = np.random.default_rng(seed)
    f = make_frame(T_h=5, N=3, seed=seed)
    hist = f.history[:3] + rng.normal(0, 0.3, (3, 5, 5))
    maps = f.maps[:3, :, :4].copy()
    plan = rng.normal(0, 1, (3, 2)) * [1.0, 0.02]
    return hist, maps, np.array(present), plan


def randomise(model, seed=1, scale=0.3):
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.data = p.data + rng.normal(0, scale, p.data.shape)


def scalar_output(model, hist, maps, present, plan, weights):
    out = model.forward_batch(hist[None], maps[None], present[None], plan[None])
    parts = (out.C_pairs, out.B_pairs, out.mu, out.sigma, out.log_p)
    total = None
    for t, w in zip(parts, weights):
        term = (t * Tensor(w)).sum()
        total = term if total is None else total + term
    return total


def test_shapes_and_head_contracts():
    model = SociallyAwareModel(MICRO, np.random.default_rng(0))
    randomise(model)
    hist, maps, present, plan = micro_inputs()
    out = model.forward_batch(hist[None], maps[None], present[None], plan[None])
    P = 6
    assert out.C_pairs.shape == (1, P, 3, 4, 4)
    assert out.B_pairs.shape == (1, P, 3, 4, 2)
    assert out.mu.shape == out.sigma.shape == (1, 2, 3, 2, 2)
    assert np.all(out.sigma.data > 0)
    assert abs(np.exp(out.log_p.data).sum() - 1.0) < 1e-9
    feats = model.trajectory_former(Tensor(np.zeros((3, 5, 5))))
    assert feats.shape == (3, 5, 8)


def test_end_to_end_gradcheck_micro_config():
    model = SociallyAwareModel(MICRO, np.random.default_rng(0))
    randomise(model)
    hist, maps, present, plan = micro_inputs()
    rng = np.random.default_rng(2)
    out = model.forward_batch(hist[None], maps[None], present[None], plan[None])
    weights = [rng.uniform(-1, 1, t.shape) for t in (out.C_pairs, out.B_pairs, out.mu, out.sigma, out.log_p)]
    model.zero_grad()
    scalar_output(model, hist, maps, present, plan, weights).backward()
    h, worst, checked = 1e-5, 0.0, 0
    for name, p in model.named_parameters():
        flat = p.data.reshape(-1)
        for idx in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            fp = scalar_output(model, hist, maps, present, plan, weights).item()
            flat[idx] = old - h
            fm = scalar_output(model, hist, maps, present, plan, weights).item()
            flat[idx] = old
            num = (fp - fm) / (2 * h)
            ana = p.grad.reshape(-1)[idx]
            if abs(num) < 1e-3:
                assert abs(ana - num) < 1e-6, name
            else:
                worst = max(worst, abs(ana - num) / abs(num))
            checked += 1
    assert checked > 100
    assert worst < 1e-3


def test_masked_vehicle_features_do_not_leak():
    model = SociallyAwareModel(MICRO, np.random.default_rng(0))
    randomise(model)
    hist, maps, _, plan = micro_inputs()
    present = np.array([True, True, False])
    a = model.forward_batch(hist[None], maps[None], present[None], plan[None])
    hist2, maps2 = hist.copy(), maps.copy()
    hist2[2] += 57.0
    maps2[2, :, :, :3] += 3.0
    b = model.forward_batch(hist2[None], maps2[None], present[None], plan[None])
    for name in ("C_pairs", "B_pairs", "mu", "sigma", "log_p"):
        assert np.array_equal(getattr(a, name).data, getattr(b, name).data), name


def test_masked_pairs_emit_zero_blocks():
    model = SociallyAwareModel(MICRO, np.random.default_rng(0))
    randomise(model)
    hist, maps, _, plan = micro_inputs()
    present = np.array([True, True, False])
    out = model.forward_batch(hist[None], maps[None], present[None], plan[None])
    I, J = pair_index(3)
    dead = (I == 2) | (J == 2)
    assert not np.any(out.C_pairs.data[0, dead]) and not np.any(out.B_pairs.data[0, dead])
    assert np.any(out.C_pairs.data[0, ~dead])
    assert not np.any(out.mu.data[0, :, :, 1])


def test_swapping_surrounding_slots_permutes_outputs():
    model = SociallyAwareModel(MICRO, np.random.default_rng(0))
    randomise(model)
    hist, maps, present, plan = micro_inputs()
    perm = np.array([0, 2, 1])
    a = model.predict(hist, maps, present, plan)
    b = model.predict(hist[perm], maps[perm], present[perm], plan)
    assert np.allclose(b.C_blocks, a.C_blocks[:, perm][:, :, perm], atol=1e-12)
    assert np.allclose(b.B_blocks, a.B_blocks[:, perm][:, :, perm], atol=1e-12)
    assert np.allclose(b.gmm.mu, a.gmm.mu[:, :, [1, 0]], atol=1e-12)
    assert np.allclose(b.gmm.p, a.gmm.p, atol=1e-12)


def test_v2v_is_directional_and_self_case():
    model = SociallyAwareModel(MICRO, np.random.default_rng(0))
    randomise(model)
    rng = np.random.default_rng(3)
    fa, fb = Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(5, 8)))
    ab, ba = model.v2v_encode(fa, fb).data, model.v2v_encode(fb, fa).data
    assert ab.shape == (5, 8)
    assert not np.allclose(ab, ba)
    blk = model.v2v[0]
    assert np.array_equal(model.v2v_encode(fa, fa).data, blk(fa, memory=fa).data)


def test_v2m_ignores_geometry_of_missing_lanes():
    model = SociallyAwareModel(MICRO, np.random.default_rng(0))
    randomise(model)
    hist, maps, present, plan = micro_inputs()
    maps = maps.copy()
    maps[:, 1:] = 0.0  # left and right lanes absent
    a = model.forward_batch(hist[None], maps[None], present[None], plan[None])
    maps2 = maps.copy()
    maps2[:, 1:, :, :3] = np.random.default_rng(4).normal(size=maps2[:, 1:, :, :3].shape)
    b = model.forward_batch(hist[None], maps2[None], present[None], plan[None])
    assert np.allclose(a.C_pairs.data, b.C_pairs.data, atol=1e-12)
    assert np.allclose(a.mu.data, b.mu.data, atol=1e-12)


def test_tanh_bound_respected():
    hp = ModelHyper(**{**MICRO.__dict__, "block_bound": 1.0})
    model = SociallyAwareModel(hp, np.random.default_rng(0))
    randomise(model, scale=1.0)
    hist, maps, present, plan = micro_inputs()
    out = model.forward_batch(hist[None], maps[None], present[None], plan[None])
    for t in (out.C_pairs.data, out.B_pairs.data):
        assert np.all(np.abs(t) <= 1.0)
        assert np.abs(t).max() > 0.5


def test_one_hot_probability_selects_that_mean():
    model = SociallyAwareModel(MICRO, np.random.default_rng(0))
    randomise(model)
    hist, maps, present, plan = micro_inputs()
    pred = model.predict(hist, maps, present, plan)
    pred.gmm.p = np.array([0.0, 1.0])
    assert np.array_equal(pred.gmm.select(), pred.gmm.mu[1])


def test_all_masked_surroundings():
    model = SociallyAwareModel(MICRO, np.random.default_rng(0))
    randomise(model)
    hist, maps, _, plan = micro_inputs()
    pred = model.predict(hist, maps, np.array([True, False, False]), plan)
    assert not np.any(pred.C_blocks) and not np.any(pred.B_blocks) and not np.any(pred.u_surr)


def test_deterministic_and_save_load(tmp_path):
    a = SociallyAwareModel(MICRO, np.random.default_rng(5))
    b = SociallyAwareModel(MICRO, np.random.default_rng(5))
    hist, maps, present, plan = micro_inputs()
    pa, pb = a.predict(hist, maps, present, plan), b.predict(hist, maps, present, plan)
    assert np.array_equal(pa.C_blocks, pb.C_blocks) and np.array_equal(pa.gmm.mu, pb.gmm.mu)
    randomise(a)
    a.save(tmp_path / "m.ckpt")
    c = SociallyAwareModel.load(tmp_path / "m.ckpt")
    assert [n for n, _ in a.named_parameters()] == [n for n, _ in c.named_parameters()]
    p1, p2 = a.predict(hist, maps, present, plan), c.predict(hist, maps, present, plan)
    assert np.array_equal(p1.C_blocks, p2.C_blocks) and np.array_equal(p1.gmm.mu, p2.gmm.mu)


def test_pairs_to_blocks_placement():
    I, J = pair_index(3)
    C = np.zeros((6, 1, 4, 4))
    p = int(np.flatnonzero((I == 0) & (J == 2))[0])  # ego influences slot 2
    C[p] = 1.0
    Cb, _ = pairs_to_blocks(C, np.zeros((6, 1, 4, 2)), 3)
    assert np.all(Cb[0, 2, 0] == 1.0) and Cb.sum() == 16.0


def test_outputs_feed_assembly_full_size():
    hp = ModelHyper(d_model=8, n_heads=2, N=50, T_h=40)
    model = SociallyAwareModel(hp, np.random.default_rng(0))
    randomise(model, scale=0.05)
    f = make_frame(T_h=40, N=50, present=[1, 1, 0, 1, 1, 0, 1])
    pred = model.forward(f, np.zeros((50, 2)))
    X = SystemState(f.history[:, -1, [0, 2, 1, 4]], f.present)
    for t in (0, 49):
        m = assemble_step(X, [VehicleParams()] * 7, pred.C_blocks[t], pred.B_blocks[t])
        assert m.C.shape == (28, 28) and m.B_surr.shape == (28, 14)
    assert pred.u_surr.shape == (50, 6, 2)


def test_zero_interaction_model_is_physics_only():
    pred = ZeroInteractionModel(N=4).forward(make_frame(N=4), np.zeros((4, 2)))
    assert not np.any(pred.C_blocks) and not np.any(pred.u_surr)


@pytest.mark.slow
def test_reaction_depends_on_ego_plan_after_training():
    from socialmpc import training
    from socialmpc.sim import Scenario, generate_dataset

    cfg = Config().replace(d_model=8, n_heads=2, T_h=10, N=10, batch_size=8, k_modes=2)
    frames = generate_dataset(Scenario(vc_ratio=0.6, horizon_s=30.0), 2, T_h=10, N=10, seed=1)
    model, _ = training.train(frames, cfg, steps=100, split=False)
    f = frames[0]
    slow = model.forward(f, np.tile([-2.0, 0.0], (10, 1))).u_surr
    fast = model.forward(f, np.tile([2.0, 0.02], (10, 1))).u_surr
    assert np.max(np.abs(slow - fast)) > 1e-6
