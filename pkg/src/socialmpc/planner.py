"""Socially-aware MPC: cost, coupled-dynamics constraint, collision rows and
the leader-follower planning cycle.

Decision vector: z = [X_0 … X_N ; u_0 … u_{N-1}] where every X_j stacks the
(s, v, y, psi) of all k = n+1 slots and u_j is the ego's (a, delta_f).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from socialmpc import qp
from socialmpc.core import CONTROL_DIM, STATE_DIM, Config, Frame, SystemState
from socialmpc.social_dynamics import (InteractionMatrices, StackedDynamics, assemble_step, condense,
                                       rollout_array, stack_horizon)

S_IDX, V_IDX, Y_IDX, PSI_IDX = range(4)
ENUMERATION_LIMIT = 12


# --------------------------------------------------------------------------- #
# cost

@dataclass(frozen=True)
class CostWeights:
    Q: np.ndarray      # (S, S) per-step state weight, ego block only
    R: np.ndarray      # (2, 2)
    X_des: np.ndarray  # (S,)

    @classmethod
    def from_config(cls, cfg: Config, x_des_ego: Sequence[float], k: int) -> "CostWeights":
        S = STATE_DIM * k
        Q = np.zeros((S, S))
        Q[:STATE_DIM, :STATE_DIM] = np.diag([cfg.theta_1, cfg.theta_2, cfg.theta_4, cfg.theta_5])
        R = np.diag([cfg.theta_3, cfg.theta_6])
        X_des = np.zeros(S)
        X_des[:STATE_DIM] = np.asarray(x_des_ego, dtype=float)
        return cls(Q, R, X_des)


def build_cost(cfg: Config, X_des: Sequence[float], N: int, k: int = 7):
    """Quadratic cost ½ zᵀPz + qᵀz + const over z = [X; u_ego].

    Q weighs state blocks 0..N-1, the terminal block carries no weight and R
    weighs every control.  ``const`` makes the value equal to the tracking
    cost ½ Σ (X - X_des)ᵀ Q (X - X_des) + ½ Σ uᵀ R u."""
    w = CostWeights.from_config(cfg, X_des, k)
    S = STATE_DIM * k
    blocks = [sp.csr_matrix(w.Q)] * N + [sp.csr_matrix((S, S))] + [sp.csr_matrix(w.R)] * N
    P = sp.block_diag(blocks, format="csr")
    qx = -(w.Q @ w.X_des)
    q = np.concatenate([np.tile(qx, N), np.zeros(S), np.zeros(CONTROL_DIM * N)])
    const = 0.5 * N * float(w.X_des @ w.Q @ w.X_des)
    return P, q, const


def cost_value(P, q, const: float, z: np.ndarray) -> float:
    return float(0.5 * z @ (P @ z) + q @ z + const)


# --------------------------------------------------------------------------- #
# coupled-dynamics constraint

def build_social_constraint(sd: StackedDynamics, u_surr: np.ndarray):
    """Equality rows [A_bar + C_bar - I, B_ego_bar] z = -(B_surr_bar u_surr + D_bar)."""
    n_x = sd.A_bar.shape[0]
    Aeq = sp.hstack([sd.A_bar + sd.C_bar - sp.identity(n_x, format="csr"), sd.B_ego_bar], format="csr")
    beq = -(sd.B_surr_bar @ np.ravel(u_surr) + sd.D_bar)
    return Aeq, beq


# --------------------------------------------------------------------------- #
# collision avoidance

def fix_collision_binaries(X_nom: np.ndarray, mask: Sequence[bool], cfg: Config) -> np.ndarray:
    """Binary per (surrounding slot, step 1..N): 0 selects the longitudinal
    separation row, 1 the lateral one.  Absent slots get 0."""
    X_nom = np.asarray(X_nom, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    ds = np.abs(X_nom[1:, 1:, S_IDX] - X_nom[1:, :1, S_IDX])
    dy = np.abs(X_nom[1:, 1:, Y_IDX] - X_nom[1:, :1, Y_IDX])
    c = (ds / cfg.s_ref < dy / cfg.y_ref).astype(int).T
    c[~mask[1:]] = 0
    return c


@dataclass
class CollisionRows:
    A: sp.csr_matrix          # rows over z
    lo: np.ndarray
    veh: np.ndarray           # slot index of each row
    step: np.ndarray          # horizon step j (1..N)
    kind: np.ndarray          # 0 longitudinal, 1 lateral
    active: np.ndarray        # True where the binary selects this row

    def margins(self, z: np.ndarray) -> np.ndarray:
        return self.A @ z - self.lo


def build_collision_constraints(c: np.ndarray, X_nom: np.ndarray, mask: Sequence[bool], cfg: Config,
                                refs: np.ndarray | None = None) -> CollisionRows:
    """Big-M separation rows with |.| linearized by the nominal sign.

    Longitudinal: sgn(Δs)(s_i - s_ego) ≥ s_ref - M c;  lateral:
    sgn(Δy)(y_i - y_ego) ≥ y_ref - M (1 - c).  ``refs`` (n, N, 2) optionally
    overrides (s_ref, y_ref) per row."""
    X_nom = np.asarray(X_nom, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    N1, k = X_nom.shape[:2]
    N = N1 - 1
    S = STATE_DIM * k
    rows, cols, vals, lo, veh, stp, kind, act = [], [], [], [], [], [], [], []
    r = 0
    for i in range(1, k):
        if not mask[i]:
            continue
        for j in range(1, N + 1):
            cij = int(c[i - 1, j - 1])
            for m, (comp, ref, big) in enumerate(((S_IDX, cfg.s_ref, cfg.big_m * cij),
                                                   (Y_IDX, cfg.y_ref, cfg.big_m * (1 - cij)))):
                if refs is not None:
                    ref = float(refs[i - 1, j - 1, m])
                d = X_nom[j, i, comp] - X_nom[j, 0, comp]
                sgn = 1.0 if d >= 0 else -1.0
                rows += [r, r]
                cols += [j * S + STATE_DIM * i + comp, j * S + comp]
                vals += [sgn, -sgn]
                lo.append(ref - big)
                veh.append(i)
                stp.append(j)
                kind.append(m)
                act.append(big == 0)
                r += 1
    n_z = N1 * S + CONTROL_DIM * N
    A = sp.csr_matrix((vals, (rows, cols)), shape=(r, n_z))
    return CollisionRows(A, np.array(lo), np.array(veh, dtype=int), np.array(stp, dtype=int),
                         np.array(kind, dtype=int), np.array(act, dtype=bool))


def steering_limit(cfg: Config, v: float, wheelbase: float) -> float:
    """Steering bound: ``delta_max`` tightened so that the yaw rate keeps the
    lateral acceleration v·psi_dot below ``a_lat_max``."""
    v2 = max(v, cfg.v_floor) ** 2
    return float(min(cfg.delta_max, cfg.a_lat_max * wheelbase / v2))


def build_box_constraints(cfg: Config, N: int, k: int, delta_lim: float | None = None):
    """Ego speed/heading bounds on X_1..X_N and control bounds on u."""
    d_max = cfg.delta_max if delta_lim is None else delta_lim
    S = STATE_DIM * k
    n_z = (N + 1) * S + CONTROL_DIM * N
    rows, cols, lo, hi = [], [], [], []
    r = 0
    for j in range(1, N + 1):
        for comp, a, b in ((V_IDX, cfg.v_min, cfg.v_max), (PSI_IDX, -cfg.psi_max, cfg.psi_max)):
            rows.append(r)
            cols.append(j * S + comp)
            lo.append(a)
            hi.append(b)
            r += 1
    base = (N + 1) * S
    for j in range(N):
        for comp, a, b in ((0, cfg.a_min, cfg.a_max), (1, -d_max, d_max)):
            rows.append(r)
            cols.append(base + CONTROL_DIM * j + comp)
            lo.append(a)
            hi.append(b)
            r += 1
    A = sp.csr_matrix((np.ones(r), (rows, cols)), shape=(r, n_z))
    return A, np.array(lo), np.array(hi)


# --------------------------------------------------------------------------- #
# planning

@dataclass
class PlanResult:
    u_ego: np.ndarray            # (N, 2)
    X_pred: np.ndarray           # (N+1, k, 4)
    objective: float
    status: str
    binaries: np.ndarray         # (n, N)
    mask: np.ndarray
    u_surr: np.ndarray           # (N, n, 2)
    seq: list[InteractionMatrices] = field(repr=False, default_factory=list)
    X_prev: np.ndarray | None = field(repr=False, default=None)
    collision: CollisionRows | None = field(repr=False, default=None)
    source: str = "heuristic"
    degraded: bool = False
    relaxed: bool = False
    iterations: int = 0

    @property
    def states(self) -> list[SystemState]:
        return [SystemState(x, self.mask) for x in self.X_pred]

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.X_pred.ravel(), self.u_ego.ravel()])

    def stacked_dynamics(self, dt: float) -> StackedDynamics:
        return stack_horizon(self.seq, SystemState(self.X_pred[0], self.mask),
                             SystemState(self.X_prev, self.mask), dt)

    def dynamics_residual(self, dt: float) -> float:
        sd = self.stacked_dynamics(dt)
        return float(np.abs(sd.residual(self.X_pred, self.u_ego, self.u_surr)).max())

    def active_margin(self) -> float:
        """Smallest slack over the separation rows selected by the binaries."""
        if self.collision is None or not self.collision.active.any():
            return float("inf")
        return float(self.collision.margins(self.z)[self.collision.active].min())

    def to_record(self) -> dict:
        return {
            "u_ego": self.u_ego.tolist(),
            "X_pred": self.X_pred.tolist(),
            "objective": self.objective,
            "status": self.status,
            "binaries": self.binaries.tolist(),
            "source": self.source,
            "degraded": self.degraded,
            "relaxed": self.relaxed,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_record(), separators=(",", ":"))


@dataclass
class _Context:
    """Everything that depends on the model query but not on the binaries."""

    cfg: Config
    N: int
    k: int
    mask: np.ndarray
    x_t: np.ndarray
    x_prev: np.ndarray
    seq: list[InteractionMatrices]
    u_surr: np.ndarray
    Phi: np.ndarray
    c: np.ndarray
    P: sp.csr_matrix
    q: np.ndarray
    const: float
    box: tuple
    delta_lim: float

    def states_of(self, u: np.ndarray) -> np.ndarray:
        return (self.Phi @ np.ravel(u) + self.c).reshape(self.N + 1, self.k, STATE_DIM)

    def z_of(self, u: np.ndarray) -> np.ndarray:
        return np.concatenate([self.Phi @ np.ravel(u) + self.c, np.ravel(u)])


def _context(obs: Frame, model, cfg: Config, u_plan: np.ndarray, X_des) -> _Context:
    N, k = cfg.N, obs.present.size
    mask = obs.present
    cur, prev = obs.current_state(), obs.previous_state()
    pred = model.forward(obs, u_plan)
    seq = [assemble_step(cur, obs.params, pred.C_blocks[j], pred.B_blocks[j], cfg.dt) for j in range(N)]
    u_surr = np.asarray(pred.u_surr, dtype=float)
    Phi, c = condense(seq, cur.x, prev.x, u_surr, cfg.dt)
    P, q, const = build_cost(cfg, X_des, N, k)
    d_lim = steering_limit(cfg, float(cur.x[0, 1]), obs.params[0].wheelbase)
    box = build_box_constraints(cfg, N, k, d_lim)
    return _Context(cfg, N, k, np.asarray(mask), cur.x, prev.x, seq, u_surr, Phi, c, P, q, const, box, d_lim)


SLACK_LINEAR = 1e4
SLACK_QUADRATIC = 1e2


def _solve_fixed(ctx: _Context, binaries: np.ndarray, X_nom: np.ndarray, refs=None, x0=None,
                 soft: bool = False):
    """QP for fixed binaries, with the dynamics eliminated through ``Phi``.

    With ``soft`` every kept separation row gets a non-negative slack priced
    by an exact (linear) plus a small quadratic penalty."""
    cfg = ctx.cfg
    n_X = ctx.Phi.shape[0]
    col = build_collision_constraints(binaries, X_nom, ctx.mask, cfg, refs)
    keep = col.lo > -0.5 * cfg.big_m   # Big-M-deactivated rows hold for any |Δ| < M/2
    Ab, lb, hb = ctx.box
    A_all = sp.vstack([Ab, col.A[keep]], format="csr")
    lo = np.concatenate([lb, col.lo[keep]])
    hi = np.concatenate([hb, np.full(int(keep.sum()), np.inf)])
    AX, Au = A_all[:, :n_X], A_all[:, n_X:]
    A_u = np.asarray(AX @ ctx.Phi) + Au.toarray()
    off = AX @ ctx.c
    PX = ctx.P[:n_X, :n_X]
    Pu = ctx.P[n_X:, n_X:]
    qX, qu = ctx.q[:n_X], ctx.q[n_X:]
    PPhi = PX @ ctx.Phi
    Pr = ctx.Phi.T @ PPhi + Pu.toarray()
    Pr = 0.5 * (Pr + Pr.T)
    qr = ctx.Phi.T @ (PX @ ctx.c + qX) + qu
    lo, hi = lo - off, hi - off
    n_u = Pr.shape[0]
    if soft:
        n_s = int(keep.sum())
        n_b = Ab.shape[0]
        Pr = np.block([[Pr, np.zeros((n_u, n_s))], [np.zeros((n_s, n_u)), SLACK_QUADRATIC * np.eye(n_s)]])
        qr = np.concatenate([qr, np.full(n_s, SLACK_LINEAR)])
        S_cols = np.zeros((A_u.shape[0], n_s))
        S_cols[n_b:] = np.eye(n_s)
        A_u = np.vstack([np.hstack([A_u, S_cols]), np.hstack([np.zeros((n_s, n_u)), np.eye(n_s)])])
        lo = np.concatenate([lo, np.zeros(n_s)])
        hi = np.concatenate([hi, np.full(n_s, np.inf)])
        if x0 is not None:
            x0 = np.concatenate([x0, np.zeros(n_s)])
    prob = qp.QpProblem(Pr, qr, Ain=A_u, bin_lo=lo, bin_hi=hi)
    sol = qp.solve(prob, tol=cfg.qp_tol, max_iter=cfg.qp_max_iter, x0=x0)
    u = sol.x[:n_u].reshape(ctx.N, CONTROL_DIM)
    z = ctx.z_of(u)
    obj = cost_value(ctx.P, ctx.q, ctx.const, z)
    return sol, u, obj, col


def _result(ctx: _Context, u, obj, sol, binaries, col, source, relaxed=False) -> PlanResult:
    return PlanResult(u_ego=u, X_pred=ctx.states_of(u), objective=obj, status=sol.status, binaries=binaries,
                      mask=ctx.mask, u_surr=ctx.u_surr, seq=ctx.seq, X_prev=ctx.x_prev, collision=col,
                      source=source, relaxed=relaxed, iterations=sol.iterations)


def enumerate_binaries(ctx: _Context, X_nom: np.ndarray) -> PlanResult | None:
    """Exhaustive search over every binary assignment (test-scale only)."""
    n_present = int(ctx.mask[1:].sum())
    n_bits = n_present * ctx.N
    if n_bits > ENUMERATION_LIMIT:
        raise ValueError(f"enumeration over 2^{n_bits} assignments exceeds the limit of 2^{ENUMERATION_LIMIT}")
    idx = np.flatnonzero(ctx.mask[1:])
    best = None
    for bits in itertools.product((0, 1), repeat=n_bits):
        c = np.zeros((ctx.k - 1, ctx.N), dtype=int)
        if n_bits:
            c[idx] = np.array(bits).reshape(n_present, ctx.N)
        sol, u, obj, col = _solve_fixed(ctx, c, X_nom)
        if sol.status != "optimal":
            continue
        if best is None or obj < best.objective - 1e-9:
            best = _result(ctx, u, obj, sol, c, col, "enumeration")
    return best


def _brake_controls(ctx: _Context) -> np.ndarray:
    """Maximum braking with the steering used only to bring the heading back
    to zero (a literal zero steer would keep a lane-changing car drifting)."""
    cfg = ctx.cfg
    u = np.zeros((ctx.N, CONTROL_DIM))
    u[:, 0] = cfg.a_min
    psi = float(ctx.x_t[0, PSI_IDX])
    for j in range(ctx.N):
        m = ctx.seq[j]
        gain = m.B_ego[PSI_IDX, 1] * cfg.dt
        if gain > 1e-12:
            u[j, 1] = float(np.clip(-psi / gain, -ctx.delta_lim, ctx.delta_lim))
        psi += gain * u[j, 1]
    return u


def degraded_plan(ctx: _Context) -> PlanResult:
    """Emergency stop along the current lane, flagged as degraded."""
    u = _brake_controls(ctx)
    X = ctx.states_of(u)
    obj = cost_value(ctx.P, ctx.q, ctx.const, ctx.z_of(u))
    c = np.zeros((ctx.k - 1, ctx.N), dtype=int)
    return PlanResult(u, X, obj, "infeasible", c, ctx.mask, ctx.u_surr, ctx.seq, ctx.x_prev, None,
                      source="degraded", degraded=True)


def _plan_once(obs, model, cfg, u_nom, X_des, exact_small: bool) -> tuple[PlanResult, _Context]:
    ctx = _context(obs, model, cfg, u_nom, X_des)
    nominals = [("heuristic-warm", ctx.states_of(u_nom))]
    if np.any(u_nom):
        nominals.append(("heuristic-cold", ctx.states_of(np.zeros_like(u_nom))))
    nominals.append(("heuristic-brake", ctx.states_of(_brake_controls(ctx))))
    best = None
    tried = []
    for name, X_nom in nominals:
        c = fix_collision_binaries(X_nom, ctx.mask, cfg)
        tried.append((c, X_nom))
        sol, u, obj, col = _solve_fixed(ctx, c, X_nom, x0=u_nom.ravel())
        if sol.status == "optimal":
            best = _result(ctx, u, obj, sol, c, col, name)
            break
    n_bits = int(ctx.mask[1:].sum()) * ctx.N
    if n_bits <= ENUMERATION_LIMIT and (best is None or exact_small):
        enum = enumerate_binaries(ctx, nominals[0][1])
        if enum is not None and (best is None or enum.objective < best.objective - 1e-9):
            best = enum
    if best is None:
        c, X_nom = tried[-1]
        sol, u, obj, col = _solve_fixed(ctx, c, X_nom, x0=u_nom.ravel(), soft=True)
        if sol.status == "optimal":
            best = _result(ctx, u, obj, sol, c, col, "relaxed", relaxed=True)
    if best is None:
        best = degraded_plan(ctx)
    return best, ctx


def plan(obs: Frame, model, cfg: Config, X_des: Sequence[float], warm: PlanResult | None = None,
         exact_small: bool = True) -> PlanResult:
    """One leader-follower planning call.

    The ego plan conditions the model's reaction forecast; the forecast enters
    the dynamics constraint; the optimized plan re-queries the model for
    ``cfg.relinearize_passes`` further rounds."""
    N = cfg.N
    if warm is not None and not warm.degraded:
        u_nom = np.vstack([warm.u_ego[1:], warm.u_ego[-1:]])
    else:
        u_nom = np.zeros((N, CONTROL_DIM))
    result, _ = _plan_once(obs, model, cfg, u_nom, X_des, exact_small)
    for _ in range(cfg.relinearize_passes):
        if result.degraded:
            break
        again, _ = _plan_once(obs, model, cfg, result.u_ego, X_des, exact_small)
        if again.degraded or again.relaxed and not result.relaxed:
            break
        result = again
    return result


def clip_control(u: np.ndarray, cfg: Config) -> tuple[float, float]:
    return (float(np.clip(u[0], cfg.a_min, cfg.a_max)), float(np.clip(u[1], -cfg.delta_max, cfg.delta_max)))


class MpcFormerPlanner:
    """Closed-loop wrapper: observe, plan, execute the first control."""

    name = "mpcformer"

    def __init__(self, model, cfg: Config, dump=None):
        self.model = model
        self.cfg = cfg
        self.dump = dump
        self.warm: PlanResult | None = None
        self.degraded = 0
        self.results: list[PlanResult] = []
        self.keep_results = False

    def reset(self, world) -> None:
        self.warm = None
        self.degraded = 0
        self.results = []

    def __call__(self, world) -> tuple[float, float]:
        return mpc_cycle(world, self)


def next_lane(scn, y: float) -> int:
    """Route target one lane at a time: the neighbour of the current lane on
    the side of the target lane, or the target itself once reached."""
    cur = scn.lane_of(y)
    return cur + int(np.sign(scn.target_lane - cur))


def mpc_cycle(world, planner: MpcFormerPlanner) -> tuple[float, float]:
    """Plan on the current observation and return only the first control."""
    cfg = planner.cfg
    scn = world.scn
    obs = world.observe(cfg.T_h, cfg.N, world.ego_params)
    x_des = (world.ego.s, scn.v_des, scn.lane_center(next_lane(scn, world.ego.y)), 0.0)
    res = plan(obs, planner.model, cfg, x_des, warm=planner.warm)
    planner.warm = res
    planner.degraded += int(res.degraded)
    if planner.keep_results:
        planner.results.append(res)
    if planner.dump is not None:
        planner.dump.write(res.dumps() + "\n")
    return clip_control(res.u_ego[0], cfg)


def rollout_plan(result: PlanResult, dt: float) -> np.ndarray:
    """Sequential re-simulation of a plan (joint-prediction consistency check)."""
    return rollout_array(result.X_pred[0], result.X_prev, result.seq, result.u_ego, result.u_surr, dt)
