"""Socially-aware transformer encoder-decoder.

Pipeline per sample: per-vehicle temporal self-attention over the history,
pairwise vehicle-to-vehicle cross-attention, vehicle-to-map cross-attention,
then three decoders producing (i) the coupling blocks of ``C``, (ii) the
coupling blocks of ``B_ego``/``B_surr`` and (iii) a Gaussian mixture over the
surrounding vehicles' control sequences, queried by the planned ego controls.

Ordered pair ``p = (i, j)`` means "effect of vehicle i on vehicle j"; its
decoded blocks land in row ``j``, column ``i`` of the system matrices.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from socialmpc import tensor as T
from socialmpc.core import SLOTS, Config, Frame
from socialmpc.nn import MLP, AttentionBlock, DecoderLayer, LayerNorm, Linear, Module
from socialmpc.tensor import Tensor

# feature normalisation: s_rel, y_rel, v, a, psi
_TRAJ_SCALE = np.array([1 / 20.0, 1 / 2.0, 1 / 10.0, 1 / 2.0, 10.0])
_TRAJ_SHIFT = np.array([0.0, 0.0, 15.0, 0.0, 0.0])
_MAP_SCALE = np.array([1 / 20.0, 1 / 4.0, 10.0, 1.0])
U_SCALE = np.array([2.0, 0.05])  # a (m/s^2), delta_f (rad)


@dataclass(frozen=True)
class ModelHyper:
    d_model: int = 32
    n_heads: int = 4
    enc_depth: int = 1
    dec_depth: int = 1
    k_modes: int = 6
    N: int = 50
    T_h: int = 40
    map_tokens: int = 60
    n_slots: int = len(SLOTS)
    block_bound: float = 2.0
    pool: int = 5        # history steps per pairwise-encoder token
    map_pool: int = 4    # lane waypoints per map token
    chunk: int = 5       # future steps emitted per decoder query

    def __post_init__(self):
        for name, total in (("pool", self.T_h), ("map_pool", self.map_tokens // 3), ("chunk", self.N)):
            object.__setattr__(self, name, _divisor(total, getattr(self, name)))

    @classmethod
    def from_config(cls, cfg: Config, map_tokens: int = 60) -> "ModelHyper":
        return cls(cfg.d_model, cfg.n_heads, cfg.enc_depth, cfg.dec_depth, cfg.k_modes, cfg.N,
                   cfg.T_h, map_tokens, cfg.n + 1, cfg.block_bound)


def _divisor(total: int, want: int) -> int:
    """Largest divisor of ``total`` not exceeding ``want``."""
    for c in range(max(1, min(want, total)), 0, -1):
        if total % c == 0:
            return c
    return 1


def _pool(t: Tensor, size: int) -> Tensor:
    """Mean-pool consecutive tokens along axis -2."""
    if size == 1:
        return t
    shp = t.shape
    return t.reshape(shp[:-2] + (shp[-2] // size, size, shp[-1])).mean(axis=-2)


def pair_index(k: int) -> tuple[np.ndarray, np.ndarray]:
    pairs = [(i, j) for i in range(k) for j in range(k) if i != j]
    return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


@dataclass
class ModelOutput:
    C_pairs: Tensor    # (B, P, N, 4, 4)
    B_pairs: Tensor    # (B, P, N, 4, 2)
    mu: Tensor         # (B, K, N, n, 2)
    sigma: Tensor      # (B, K, N, n, 2)
    log_p: Tensor      # (B, K)
    pair_mask: np.ndarray  # (B, P)
    present: np.ndarray    # (B, k)

    def selected_reaction(self) -> np.ndarray:
        """Mean of the most probable modality, (B, N, n, 2)."""
        best = np.argmax(self.log_p.data, axis=1)
        return self.mu.data[np.arange(best.size), best]


@dataclass
class GmmOutput:
    mu: np.ndarray     # (K, N, n, 2)
    sigma: np.ndarray  # (K, N, n, 2)
    p: np.ndarray      # (K,)

    def select(self) -> np.ndarray:
        return self.mu[int(np.argmax(self.p))]


@dataclass
class Prediction:
    """Single-sample model output in matrix-ready numpy form."""

    C_blocks: np.ndarray   # (N, k, k, 4, 4), [row=affected, col=influencer]
    B_blocks: np.ndarray   # (N, k, k, 4, 2)
    u_surr: np.ndarray     # (N, n, 2)
    gmm: GmmOutput

    @property
    def B_ego_blocks(self) -> np.ndarray:
        return self.B_blocks[:, :, :1]

    @property
    def B_surr_blocks(self) -> np.ndarray:
        return self.B_blocks[:, :, 1:]


def normalise_inputs(hist: np.ndarray, maps: np.ndarray, present: np.ndarray,
                     planned_ego: np.ndarray):
    """Ego-relative, scaled inputs with absent vehicles zeroed."""
    hist = np.asarray(hist, dtype=float)
    present = np.asarray(present, dtype=bool)
    pm = present[..., None, None].astype(float)
    ref = hist[:, :1, -1:, :]  # ego's last history sample
    rel = hist.copy()
    rel[..., 0] -= ref[..., 0]
    rel[..., 1] -= ref[..., 1]
    x = (rel - _TRAJ_SHIFT) * _TRAJ_SCALE * pm
    m = np.asarray(maps, dtype=float) * _MAP_SCALE
    m = m * present[..., None, None, None]
    B, k = m.shape[:2]
    m = m.reshape(B, k, -1, m.shape[-1])
    exists = m[..., 3] > 0.5
    u = np.asarray(planned_ego, dtype=float) / U_SCALE
    return x, m, exists, u


class SociallyAwareModel(Module):
    def __init__(self, hp: ModelHyper, rng: np.random.Generator):
        d, h = hp.d_model, hp.n_heads
        self.hp = hp
        # trajectory former
        self.traj_in = MLP([5, d, d], rng)
        self.traj_pos = Tensor(rng.normal(0, 0.02, (hp.T_h, d)), requires_grad=True)
        self.traj_q = MLP([d, d, d], rng)
        self.traj_k = MLP([d, d, d], rng)
        self.traj_v = MLP([d, d, d], rng)
        self.traj_o = Linear(d, d, rng)
        self.traj_ln = LayerNorm(d)
        self.traj_ff = MLP([d, 2 * d, d], rng)
        self.traj_blocks = [AttentionBlock(d, h, rng) for _ in range(hp.enc_depth - 1)]
        # pairwise encoders
        self.v2v = [AttentionBlock(d, h, rng, cross=True) for _ in range(hp.enc_depth)]
        self.map_in = MLP([4, d, d], rng)
        self.map_pos = Tensor(rng.normal(0, 0.02, (hp.map_tokens, d)), requires_grad=True)
        self.v2m = [AttentionBlock(d, h, rng, cross=True) for _ in range(hp.enc_depth)]
        self.fuse = Linear(2 * d, d, rng)
        # decoders
        nq, c = hp.N // hp.chunk, hp.chunk
        self.c_queries = Tensor(rng.normal(0, 0.5, (nq, d)), requires_grad=True)
        self.c_dec = [DecoderLayer(d, h, rng) for _ in range(hp.dec_depth)]
        self.c_head = Linear(d, 16 * c, rng, scale=0.0)  # start from the physics-only model
        self.b_queries = Tensor(rng.normal(0, 0.5, (nq, d)), requires_grad=True)
        self.b_dec = [DecoderLayer(d, h, rng) for _ in range(hp.dec_depth)]
        self.b_head = Linear(d, 8 * c, rng, scale=0.0)
        self.r_in = MLP([2 * c, d, d], rng)
        self.r_pos = Tensor(rng.normal(0, 0.5, (nq, d)), requires_grad=True)
        self.r_dec = [DecoderLayer(d, h, rng) for _ in range(hp.dec_depth)]
        self.r_head = Linear(d, hp.k_modes * 4 * c, rng, scale=0.1)
        # reaction means start at "hold the current acceleration"; tiny per-mode
        # offsets keep best-of-K selection away from exact ties
        self.r_head.W.data.reshape(d, c, hp.k_modes, 4)[..., :2] = 0.0
        self.r_head.b.data.reshape(c, hp.k_modes, 4)[..., 0] = 1e-3 * (np.arange(hp.k_modes)
                                                                       - (hp.k_modes - 1) / 2)
        self.r_prob = Linear(d, hp.k_modes, rng, scale=0.1)
        self.I, self.J = pair_index(hp.n_slots)
        # memory rows for each surrounding vehicle j: pairs (i -> j)
        self.into = np.array([[p for p in range(self.I.size) if self.J[p] == j]
                              for j in range(1, hp.n_slots)], dtype=int).reshape(hp.n_slots - 1, -1)

    # ------------------------------------------------------------- stages
    def trajectory_former(self, x) -> Tensor:
        """(…, T_h, 5) normalised tracks → (…, T_h, d) temporal features."""
        e = self.traj_in(x) + self.traj_pos
        att = T.attention(self.traj_q(e), self.traj_k(e), self.traj_v(e), None, self.hp.n_heads)
        e = e + self.traj_o(att)
        e = e + self.traj_ff(self.traj_ln(e))
        for blk in self.traj_blocks:
            e = blk(e)
        return e

    def v2v_encode(self, feat1, feat2) -> Tensor:
        """Queries from veh1's features, keys and values from veh2's."""
        v = feat1
        for blk in self.v2v:
            v = blk(v, memory=feat2)
        return v

    def map_former(self, m) -> Tensor:
        return self.map_in(m) + self.map_pos

    def v2m_encode(self, v2v, map1, map2, mask=None) -> Tensor:
        """V2V features query veh1's map embeddings (keys) and veh2's (values)."""
        w = v2v
        for blk in self.v2m:
            w = blk(w, memory=map1, values=map2, mask=mask)
        return w

    def encode(self, x, m, exists, present):
        B, k = present.shape
        I, J = self.I, self.J
        feats = _pool(self.trajectory_former(Tensor(x)), self.hp.pool)
        f1, f2 = feats[:, I], feats[:, J]
        v2v = self.v2v_encode(f1, f2)
        mp = self.hp.map_pool
        memb = _pool(self.map_former(Tensor(m)), mp)
        exists = exists.reshape(exists.shape[:-1] + (-1, mp)).all(axis=-1)
        map_mask = (exists[:, I] & exists[:, J])[:, :, None, :]
        v2m = self.v2m_encode(v2v, memb[:, I], memb[:, J], map_mask)
        latent = self.fuse(T.concat([v2v, v2m], axis=-1))
        pair_mask = present[:, I] & present[:, J]
        return latent, pair_mask

    def decode_interaction_blocks(self, latent, pair_mask):
        B, P, Th, d = latent.shape
        N, c = self.hp.N, self.hp.chunk
        zeros = np.zeros((B, P, N // c, d))
        pm = pair_mask[:, :, None, None].astype(float)
        outs = []
        for queries, layers, head, width in ((self.c_queries, self.c_dec, self.c_head, 4),
                                             (self.b_queries, self.b_dec, self.b_head, 2)):
            q = T.add(zeros, queries)
            for layer in layers:
                q = layer(q, latent)
            raw = T.tanh(head(q)) * self.hp.block_bound
            outs.append((raw * pm).reshape((B, P, N, 4, width)))  # chunk-major order
        return outs[0], outs[1]

    def decode_reactions(self, latent, pair_mask, u_plan, accel_now=None):
        """GMM over surrounding controls; means are residuals on ``accel_now`` (B, n)."""
        B, P, Th, d = latent.shape
        n = self.hp.n_slots - 1
        N, K, c = self.hp.N, self.hp.k_modes, self.hp.chunk
        nq = N // c
        q0 = self.r_in(Tensor(u_plan.reshape(B, nq, 2 * c))) + self.r_pos    # (B, nq, d)
        q = T.add(np.zeros((B, n, nq, d)), q0.reshape((B, 1, nq, d)))
        mem = latent[:, self.into.reshape(-1)]                          # (B, n*(k-1), Th, d)
        per = self.into.shape[1]
        mem = mem.reshape((B, n, per * Th, d))
        mmask = np.repeat(pair_mask[:, self.into], Th, axis=-1)[:, :, None, :]
        for layer in self.r_dec:
            q = layer(q, mem, mmask)
        raw = self.r_head(q).reshape((B, n, nq, c, K, 4)).reshape((B, n, N, K, 4))
        sv = pair_mask[:, self.into[:, 0]]  # ego -> j present iff j present
        svm = sv[:, :, None, None, None].astype(float)
        prior = np.zeros((B, n, 1, 1, 2))
        if accel_now is not None:
            prior[..., 0] = np.asarray(accel_now, dtype=float)[:, :, None, None]
        mu = (raw[..., :2] * U_SCALE + prior) * svm
        sigma = T.exp(raw[..., 2:] + np.log(U_SCALE))
        mu = mu.transpose(0, 3, 2, 1, 4)
        sigma = sigma.transpose(0, 3, 2, 1, 4)
        pooled = q.mean(axis=2)                                         # (B, n, d)
        logits = (self.r_prob(pooled) * sv[:, :, None].astype(float)).sum(axis=1)
        return mu, sigma, T.log_softmax(logits, axis=-1)

    # ------------------------------------------------------------- forward
    def forward_batch(self, hist, maps, present, planned_ego) -> ModelOutput:
        present = np.asarray(present, dtype=bool)
        x, m, exists, u = normalise_inputs(hist, maps, present, planned_ego)
        latent, pair_mask = self.encode(x, m, exists, present)
        C, Bk = self.decode_interaction_blocks(latent, pair_mask)
        accel_now = np.asarray(hist, dtype=float)[:, 1:, -1, 3] * present[:, 1:]
        mu, sigma, log_p = self.decode_reactions(latent, pair_mask, u, accel_now)
        return ModelOutput(C, Bk, mu, sigma, log_p, pair_mask, present)

    def predict(self, hist, maps, present, planned_ego) -> Prediction:
        """Numpy inference for one sample (no batch axis on the inputs)."""
        out = self.forward_batch(np.asarray(hist)[None], np.asarray(maps)[None],
                                 np.asarray(present, dtype=bool)[None], np.asarray(planned_ego)[None])
        C, Bk = pairs_to_blocks(out.C_pairs.data[0], out.B_pairs.data[0], self.hp.n_slots)
        p = np.exp(out.log_p.data[0])
        gmm = GmmOutput(out.mu.data[0], out.sigma.data[0], p)
        return Prediction(C, Bk, gmm.select(), gmm)

    def forward(self, frame: Frame, planned_ego: np.ndarray) -> Prediction:
        return self.predict(frame.history, frame.maps, frame.present, planned_ego)

    # ------------------------------------------------------------- io
    def save(self, path: str | Path) -> None:
        path = Path(path)
        T.save_parameters(path, self.named_parameters())
        path.with_suffix(".hyper.json").write_text(json.dumps(asdict(self.hp), indent=2, sort_keys=True) + "\n")

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        if set(named) != set(state):
            missing = sorted(set(named) ^ set(state))
            raise ValueError(f"checkpoint parameter names differ: {missing[:5]}")
        for name, t in named.items():
            if t.data.shape != state[name].shape:
                raise ValueError(f"shape mismatch for {name}: {t.data.shape} vs {state[name].shape}")
            t.data = state[name].copy()

    @classmethod
    def load(cls, path: str | Path) -> "SociallyAwareModel":
        path = Path(path)
        hp = ModelHyper(**json.loads(path.with_suffix(".hyper.json").read_text()))
        model = cls(hp, np.random.default_rng(0))
        model.load_state(T.load_parameters(path))
        return model


def pairs_to_blocks(C_pairs: np.ndarray, B_pairs: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """(P, N, 4, w) pair outputs → (N, k, k, 4, w) arrays indexed [row, col]."""
    I, J = pair_index(k)
    N = C_pairs.shape[1]
    C = np.zeros((N, k, k, 4, 4))
    Bb = np.zeros((N, k, k, 4, 2))
    C[:, J, I] = np.transpose(C_pairs, (1, 0, 2, 3))
    Bb[:, J, I] = np.transpose(B_pairs, (1, 0, 2, 3))
    return C, Bb


def build_model(cfg: Config, seed: int | None = None) -> SociallyAwareModel:
    from socialmpc.core import seed_stream

    rng = seed_stream(cfg.seed if seed is None else seed, "model-init")
    return SociallyAwareModel(ModelHyper.from_config(cfg), rng)


class ZeroInteractionModel:
    """Stand-in with all coupling blocks and reactions zero (physics only)."""

    def __init__(self, N: int, n_slots: int = len(SLOTS)):
        self.hp = ModelHyper(N=N, n_slots=n_slots, k_modes=1)

    def predict(self, hist, maps, present, planned_ego) -> Prediction:
        k, N = self.hp.n_slots, self.hp.N
        gmm = GmmOutput(np.zeros((1, N, k - 1, 2)), np.ones((1, N, k - 1, 2)), np.ones(1))
        return Prediction(np.zeros((N, k, k, 4, 4)), np.zeros((N, k, k, 4, 2)), gmm.select(), gmm)

    def forward(self, frame: Frame, planned_ego) -> Prediction:
        return self.predict(frame.history, frame.maps, frame.present, planned_ego)

    def forward_batch(self, hist, maps, present, planned_ego) -> ModelOutput:
        present = np.asarray(present, dtype=bool)
        B, k, N = present.shape[0], self.hp.n_slots, self.hp.N
        I, J = pair_index(k)
        return ModelOutput(Tensor(np.zeros((B, I.size, N, 4, 4))), Tensor(np.zeros((B, I.size, N, 4, 2))),
                           Tensor(np.zeros((B, 1, N, k - 1, 2))), Tensor(np.ones((B, 1, N, k - 1, 2))),
                           Tensor(np.zeros((B, 1))), present[:, I] & present[:, J], present)


__all__ = ["ModelHyper", "SociallyAwareModel", "ModelOutput", "GmmOutput", "Prediction",
           "pairs_to_blocks", "pair_index", "build_model", "ZeroInteractionModel", "U_SCALE",
           "normalise_inputs"]

