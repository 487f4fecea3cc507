"""Losses, batching and the learning loop.

Each optimizer step: sample a batch, recover the ego's controls from its
ground-truth future, run the encoder-decoder conditioned on those controls,
roll the coupled dynamics forward with the decoded blocks and reactions,
and back-propagate the weighted vehicle + GMM loss.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from socialmpc import tensor as T
from socialmpc.core import Config, Frame, seed_stream
from socialmpc.kinematics import linear_matrices
from socialmpc.model import ModelOutput, SociallyAwareModel, build_model, pair_index
from socialmpc.tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------- #
# inverse kinematics

def infer_controls(x0: np.ndarray, future: np.ndarray, wheelbase: float, dt: float,
                   v_floor: float = 1.0) -> np.ndarray:
    """Controls that reproduce ``future`` (N, 4) from ``x0`` under the model
    linearized at the current speed.  Returns (N, 2)."""
    seq = np.vstack([np.asarray(x0, dtype=float)[None], np.asarray(future, dtype=float)])
    a = np.diff(seq[:, 1]) / dt
    v_lin = float(x0[1])
    if v_lin < v_floor:
        log.warning("speed %.3f below v_floor %.3f; clamping for steering recovery", v_lin, v_floor)
        v_lin = v_floor
    delta = np.diff(seq[:, 3]) / dt * wheelbase / v_lin
    return np.stack([a, delta], axis=-1)


def infer_ego_controls(frame: Frame, v_floor: float = 1.0) -> np.ndarray:
    x0 = frame.current_state().x[0]
    fut = frame.future_states()[:, 0]
    return infer_controls(x0, fut, frame.params[0].wheelbase, frame.dt, v_floor)


def infer_surr_controls(frame: Frame, v_floor: float = 1.0) -> np.ndarray:
    """Ground-truth surrounding controls (N, n, 2); absent slots are zero."""
    x0 = frame.current_state().x
    fut = frame.future_states()
    out = np.zeros((frame.N, x0.shape[0] - 1, 2))
    for i in range(1, x0.shape[0]):
        if frame.present[i]:
            out[:, i - 1] = infer_controls(x0[i], fut[:, i], frame.params[i].wheelbase, frame.dt,
                                           v_floor)
    return out


# --------------------------------------------------------------------------- #
# losses

def vehicle_loss(X_pred, X_gt, mask) -> Tensor:
    """Mean smooth-L1 over unmasked state entries.

    ``X_pred``/``X_gt``: (..., k, 4); ``mask`` broadcastable to (..., k)."""
    X_pred = X_pred if isinstance(X_pred, Tensor) else Tensor(X_pred)
    m = np.broadcast_to(np.asarray(mask, dtype=float)[..., None], X_pred.shape)
    count = m.sum()
    if count == 0:
        return Tensor(0.0)
    err = T.smooth_l1(X_pred - np.asarray(X_gt if not isinstance(X_gt, Tensor) else X_gt.data))
    return (err * np.ascontiguousarray(m)).sum() * (1.0 / count)


def best_of_k(mu: np.ndarray, u_gt: np.ndarray, sv_mask: np.ndarray) -> np.ndarray:
    """Index of the modality whose mean is closest (L2) to the ground truth.

    ``mu`` (B, K, N, n, 2), ``u_gt`` (B, N, n, 2), ``sv_mask`` (B, n)."""
    diff = (mu - u_gt[:, None]) * sv_mask[:, None, None, :, None]
    return np.argmin((diff ** 2).sum(axis=(2, 3, 4)), axis=1)


def gmm_loss(mu, sigma, log_p, u_gt: np.ndarray, sv_mask: np.ndarray, data_term: bool = True,
             selected: np.ndarray | None = None) -> Tensor:
    """Mean log-variance of the selected modality minus its log-probability.

    With ``data_term`` a Gaussian NLL ``(u - mu)^2 / (2 sigma^2)`` is added so
    the means are trained.  Accepts batched (B, K, N, n, 2) tensors."""
    mu = mu if isinstance(mu, Tensor) else Tensor(mu)
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(sigma)
    log_p = log_p if isinstance(log_p, Tensor) else Tensor(log_p)
    u_gt = np.asarray(u_gt, dtype=float)
    sv_mask = np.asarray(sv_mask, dtype=bool)
    B = mu.shape[0]
    if selected is None:
        selected = best_of_k(mu.data, u_gt, sv_mask)
    rows = np.arange(B)
    mu_s = mu[rows, selected]          # (B, N, n, 2)
    sg_s = sigma[rows, selected]
    lp_s = log_p[rows, selected]       # (B,)
    m = np.broadcast_to(sv_mask[:, None, :, None].astype(float), mu_s.shape)
    per = m.sum(axis=(1, 2, 3))
    has = per > 0
    w = np.where(has, 1.0 / np.maximum(per, 1.0), 0.0)[:, None, None, None] * m
    term = T.log(sg_s)
    if data_term:
        z = (mu_s - u_gt) / sg_s
        term = term + z * z * 0.5
    per_sample = (term * np.ascontiguousarray(w)).sum(axis=(1, 2, 3)) - lp_s
    return per_sample.mean()


def total_loss(lv, lg, lambda_1: float, lambda_2: float):
    return lv * lambda_1 + lg * lambda_2


# --------------------------------------------------------------------------- #
# batching and the differentiable rollout

@dataclass
class Batch:
    frames: list[Frame]
    hist: np.ndarray       # (B, k, T_h, 5)
    maps: np.ndarray       # (B, k, 3, L, 4)
    present: np.ndarray    # (B, k)
    x0: np.ndarray         # (B, k, 4) ego-relative s
    xprev: np.ndarray
    A: np.ndarray          # (B, k, 4, 4)
    Bd: np.ndarray         # (B, k, 4, 2)
    u_ego: np.ndarray      # (B, N, 2)
    u_surr_gt: np.ndarray  # (B, N, n, 2)
    X_gt: np.ndarray       # (B, N, k, 4)

    @property
    def sv_mask(self) -> np.ndarray:
        return self.present[:, 1:]


def prepare_batch(frames: Sequence[Frame], v_floor: float = 1.0) -> Batch:
    hist = np.stack([f.history for f in frames])
    maps = np.stack([f.maps for f in frames])
    present = np.stack([f.present for f in frames])
    x0 = np.stack([f.current_state().x for f in frames])
    xprev = np.stack([f.previous_state().x for f in frames])
    X_gt = np.stack([f.future_states() for f in frames])
    ref = x0[:, :1, 0].copy()  # ego s at t
    pm = present.astype(float)
    x0 = x0.copy()
    xprev = xprev.copy()
    X_gt = X_gt.copy()
    x0[..., 0] = (x0[..., 0] - ref) * pm
    xprev[..., 0] = (xprev[..., 0] - ref) * pm
    X_gt[..., 0] = (X_gt[..., 0] - ref[:, None]) * pm[:, None]
    B, k = present.shape
    A = np.zeros((B, k, 4, 4))
    Bd = np.zeros((B, k, 4, 2))
    for b, f in enumerate(frames):
        for i in range(k):
            if present[b, i]:
                A[b, i], Bd[b, i] = linear_matrices(float(x0[b, i, 1]), f.params[i].wheelbase)
    u_ego = np.stack([infer_ego_controls(f, v_floor) for f in frames])
    u_surr = np.stack([infer_surr_controls(f, v_floor) for f in frames])
    return Batch(list(frames), hist, maps, present, x0, xprev, A, Bd, u_ego, u_surr, X_gt)


def rollout_tensor(batch: Batch, C_pairs, B_pairs, u_surr, dt: float) -> Tensor:
    """Differentiable coupled rollout; returns predicted states (B, N, k, 4)."""
    B, k = batch.present.shape
    N = batch.u_ego.shape[1]
    I, J = pair_index(k)
    G = np.zeros((k, I.size))
    G[J, np.arange(I.size)] = 1.0
    pm = batch.present.astype(float)[..., None]
    u_surr = u_surr if isinstance(u_surr, Tensor) else Tensor(u_surr)
    C_pairs = C_pairs if isinstance(C_pairs, Tensor) else Tensor(C_pairs)
    B_pairs = B_pairs if isinstance(B_pairs, Tensor) else Tensor(B_pairs)
    x = Tensor(batch.x0)
    xp = Tensor(batch.xprev)
    out = []
    for t in range(N):
        u_all = T.concat([Tensor(batch.u_ego[:, t][:, None, :]), u_surr[:, t]], axis=1) * pm
        own = T.matmul(batch.A, x.reshape((B, k, 4, 1))) + T.matmul(batch.Bd, u_all.reshape((B, k, 2, 1)))
        dx = (x - xp)[:, I].reshape((B, I.size, 4, 1))
        du = u_all[:, I].reshape((B, I.size, 2, 1))
        pair = T.matmul(C_pairs[:, :, t], dx) + T.matmul(B_pairs[:, :, t], du)
        agg = T.matmul(G, pair.reshape((B, I.size, 4)))
        nxt = x + (own.reshape((B, k, 4)) + agg) * dt
        xp, x = x, nxt
        out.append(x)
    return T.stack(out, axis=1)


def batch_losses(model: SociallyAwareModel, batch: Batch, cfg: Config):
    out: ModelOutput = model.forward_batch(batch.hist, batch.maps, batch.present, batch.u_ego)
    sel = best_of_k(out.mu.data, batch.u_surr_gt, batch.sv_mask)
    u_sel = out.mu[np.arange(sel.size), sel]
    X = rollout_tensor(batch, out.C_pairs, out.B_pairs, u_sel, cfg.dt)
    lv = vehicle_loss(X, batch.X_gt, batch.present[:, None, :])
    lg = gmm_loss(out.mu, out.sigma, out.log_p, batch.u_surr_gt, batch.sv_mask, cfg.gmm_data_term,
                  selected=sel)
    return total_loss(lv, lg, cfg.lambda_1, cfg.lambda_2), lv, lg


# --------------------------------------------------------------------------- #
# optimizer

class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self, names: Sequence[str]) -> list[tuple[str, Tensor]]:
        out = [("__step__", Tensor(np.array([float(self.t)])))]
        out += [(f"m.{n}", Tensor(m)) for n, m in zip(names, self.m)]
        out += [(f"v.{n}", Tensor(v)) for n, v in zip(names, self.v)]
        return out

    def load(self, names: Sequence[str], state: dict[str, np.ndarray]) -> None:
        self.t = int(state["__step__"][0])
        self.m = [state[f"m.{n}"].copy() for n in names]
        self.v = [state[f"v.{n}"].copy() for n in names]


# --------------------------------------------------------------------------- #
# prediction and evaluation helpers

HORIZON_SECONDS = (1, 2, 3, 4, 5)


def predict_positions(model, batch: Batch, dt: float) -> np.ndarray:
    """Model-predicted (s, y) of every slot, (B, N, k, 2), using the most
    probable reaction modality."""
    out = model.forward_batch(batch.hist, batch.maps, batch.present, batch.u_ego)
    X = rollout_tensor(batch, out.C_pairs.data, out.B_pairs.data, out.selected_reaction(), dt).data
    return X[..., [0, 2]]


def constant_velocity_positions(batch: Batch, dt: float) -> np.ndarray:
    x0 = batch.x0
    N = batch.u_ego.shape[1]
    t = (np.arange(1, N + 1) * dt)[None, :, None]
    vs = (x0[..., 1] * np.cos(x0[..., 3]))[:, None]
    vy = (x0[..., 1] * np.sin(x0[..., 3]))[:, None]
    s = x0[:, None, :, 0] + vs * t
    y = x0[:, None, :, 2] + vy * t
    return np.stack([s, y], axis=-1)


def displacement_errors(pred: np.ndarray, batch: Batch, dt: float) -> dict[str, float]:
    """ADE at whole-second horizons and FDE over present surrounding vehicles."""
    from socialmpc.metrics import ade, fde

    gt = batch.X_gt[..., [0, 2]]
    sv = batch.sv_mask
    p_list, g_list = [], []
    for b in range(pred.shape[0]):
        for i in np.flatnonzero(sv[b]) + 1:
            p_list.append(pred[b, :, i])
            g_list.append(gt[b, :, i])
    if not p_list:
        return {}
    P, G = np.stack(p_list), np.stack(g_list)
    res = {}
    N = P.shape[1]
    for sec in HORIZON_SECONDS:
        steps = int(round(sec / dt))
        if steps <= N:
            res[f"ADE@{sec}s"] = ade(P, G, steps)
    res["ADE"] = ade(P, G, N)
    res["FDE"] = fde(P, G)
    return res


def evaluate_frames(model, frames: Sequence[Frame], cfg: Config, batch_size: int = 32):
    """ADE/FDE of the model and of constant-velocity extrapolation."""
    preds, cvs, batches = [], [], []
    for i in range(0, len(frames), batch_size):
        b = prepare_batch(frames[i:i + batch_size], cfg.v_floor)
        preds.append(predict_positions(model, b, cfg.dt))
        cvs.append(constant_velocity_positions(b, cfg.dt))
        batches.append(b)
    merged = _merge(batches)
    return (displacement_errors(np.concatenate(preds), merged, cfg.dt),
            displacement_errors(np.concatenate(cvs), merged, cfg.dt))


def _merge(batches: list[Batch]) -> Batch:
    fields_ = {}
    for name in ("hist", "maps", "present", "x0", "xprev", "A", "Bd", "u_ego", "u_surr_gt", "X_gt"):
        fields_[name] = np.concatenate([getattr(b, name) for b in batches])
    frames = [f for b in batches for f in b.frames]
    return Batch(frames, **fields_)


# --------------------------------------------------------------------------- #
# training loop

@dataclass
class TrainReport:
    seed: int
    steps: list[int] = field(default_factory=list)
    loss_total: list[float] = field(default_factory=list)
    loss_vehicle: list[float] = field(default_factory=list)
    loss_gmm: list[float] = field(default_factory=list)
    val: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def record(self, step: int, lt: float, lv: float, lg: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError("step index must increase")
        self.steps.append(step)
        self.loss_total.append(lt)
        self.loss_vehicle.append(lv)
        self.loss_gmm.append(lg)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss_total", "loss_vehicle", "loss_gmm"])
            for row in zip(self.steps, self.loss_total, self.loss_vehicle, self.loss_gmm):
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "steps": len(self.steps),
            "initial_loss": self.loss_total[0] if self.loss_total else None,
            "final_loss": self.loss_total[-1] if self.loss_total else None,
            "validation": self.val,
        }


def split_dataset(frames: Sequence[Frame], seed: int) -> tuple[list[Frame], list[Frame], list[Frame]]:
    """70/20/10 train/validation/test split."""
    rng = seed_stream(seed, "split")
    idx = rng.permutation(len(frames))
    n_tr = int(round(0.7 * len(frames)))
    n_va = int(round(0.2 * len(frames)))
    if len(frames) and n_tr == 0:
        n_tr = 1
    tr = [frames[i] for i in sorted(idx[:n_tr])]
    va = [frames[i] for i in sorted(idx[n_tr:n_tr + n_va])]
    te = [frames[i] for i in sorted(idx[n_tr + n_va:])]
    return tr, va, te


def batch_order(n_items: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices of the batch used at optimizer step ``step`` (0-based).

    Each epoch is a fresh permutation derived from (seed, epoch), so any step's
    batch can be reproduced without replaying earlier ones."""
    per_epoch = max(1, math.ceil(n_items / batch_size))
    epoch, pos = divmod(step, per_epoch)
    perm = seed_stream(seed, f"batch-shuffle/{epoch}").permutation(n_items)
    return perm[pos * batch_size:(pos + 1) * batch_size]


def train(dataset: Sequence[Frame], cfg: Config, steps: int | None = None, out_dir: str | Path | None = None,
          model: SociallyAwareModel | None = None, resume: str | Path | None = None,
          split: bool = True, val_limit: int = 64, progress=None):
    """Train the encoder-decoder.  Returns (model, report).

    ``steps`` defaults to ``epochs`` passes over the training split.  With
    ``out_dir`` a checkpoint (parameters + optimizer moments) is written after
    every epoch and at the end.
    """
    if not dataset:
        raise TrainingError("dataset is empty")
    t_start = time.perf_counter()
    train_set, val_set, _ = split_dataset(dataset, cfg.seed) if split else (list(dataset), [], [])
    per_epoch = max(1, math.ceil(len(train_set) / cfg.batch_size))
    total = steps if steps is not None else cfg.epochs * per_epoch
    model = model if model is not None else build_model(cfg)
    names = [n for n, _ in model.named_parameters()]
    opt = Adam([p for _, p in model.named_parameters()], lr=cfg.lr)
    start = 0
    if resume is not None:
        resume = Path(resume)
        model.load_state(T.load_parameters(resume))
        opt.load(names, T.load_parameters(resume.with_suffix(".optim")))
        start = opt.t
    report = TrainReport(seed=cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for step in range(start, total):
        idx = batch_order(len(train_set), cfg.batch_size, cfg.seed, step)
        batch = prepare_batch([train_set[i] for i in idx], cfg.v_floor)
        opt.zero_grad()
        lt, lv, lg = batch_losses(model, batch, cfg)
        if not np.isfinite(lt.data):
            ids = [f.frame_id for f in batch.frames]
            raise TrainingError(f"non-finite loss at step {step}; batch frames: {ids}")
        lt.backward()
        opt.step()
        report.record(step, float(lt.data), float(lv.data), float(lg.data))
        if progress is not None:
            progress(step, float(lt.data))
        end_of_epoch = (step + 1) % per_epoch == 0 or step + 1 == total
        if end_of_epoch:
            if val_set:
                ev, _ = evaluate_frames(model, val_set[:val_limit], cfg)
                report.val.append({"step": step + 1, "ADE": ev.get("ADE"), "FDE": ev.get("FDE")})
            if out is not None:
                save_checkpoint(model, opt, out / "model.ckpt")
    report.wall_clock = time.perf_counter() - t_start
    if out is not None:
        report.write_csv(out / "train_report.csv")
        (out / "train_summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
        (out / "train_meta.json").write_text(json.dumps({"wall_clock_s": report.wall_clock}) + "\n")
    return model, report


def save_checkpoint(model: SociallyAwareModel, opt: Adam, path: Path) -> None:
    model.save(path)
    names = [n for n, _ in model.named_parameters()]
    T.save_parameters(path.with_suffix(".optim"), opt.state(names))
