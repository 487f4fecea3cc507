"""Coupled multi-vehicle dynamics.

Per step the joint state ``X`` (ego first, then the surrounding slots) evolves as

    X' = (A dt + I) X + B_ego dt U_ego + B_surr dt U_surr + C dt (X - X_prev)

where ``A`` and the diagonal blocks of ``B_*`` come from the linearized bicycle
model and every off-diagonal block of ``B_*`` and ``C`` is supplied by the
learned model.  Blocks are indexed ``[row, col]`` = (affected vehicle,
influencing vehicle).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from socialmpc.core import SLOTS, STATE_DIM, CONTROL_DIM, SystemControl, SystemState, VehicleParams
from socialmpc.kinematics import linear_matrices


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class InteractionMatrices:
    A: np.ndarray       # S x S, block diagonal
    B_ego: np.ndarray   # S x 2(n+1), only column block 0 nonzero
    B_surr: np.ndarray  # S x 2(n+1), column block 0 zero
    C: np.ndarray       # S x S, zero diagonal blocks
    mask: np.ndarray

    @property
    def k(self) -> int:
        return self.mask.size

    def block(self, name: str, row: int, col: int) -> np.ndarray:
        m = getattr(self, name)
        w = STATE_DIM if name in ("A", "C") else CONTROL_DIM
        return m[STATE_DIM * row:STATE_DIM * (row + 1), w * col:w * (col + 1)]


@dataclass(frozen=True, eq=False)
class StackedDynamics:
    """Horizon-stacked form  X = (A_bar + C_bar) X + B_ego_bar u_ego + B_surr_bar u_surr + D_bar.

    ``X`` stacks N+1 joint states; ``u_ego`` is (N*2,) and ``u_surr`` is (N*2n,)
    (the ego's zero block of U_surr is dropped)."""

    A_bar: sp.csr_matrix
    C_bar: sp.csr_matrix
    B_ego_bar: sp.csr_matrix
    B_surr_bar: sp.csr_matrix
    D_bar: np.ndarray
    N: int
    k: int

    def residual(self, X: np.ndarray, u_ego: np.ndarray, u_surr: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1)
        return ((self.A_bar + self.C_bar) @ X - X + self.B_ego_bar @ np.ravel(u_ego)
                + self.B_surr_bar @ np.ravel(u_surr) + self.D_bar)

    def solve(self, u_ego: np.ndarray, u_surr: np.ndarray) -> np.ndarray:
        """Solve the fixed-point equation for X by a sparse triangular solve.

        Returns (N+1, k, 4)."""
        M = sp.identity(self.A_bar.shape[0], format="csr") - self.A_bar - self.C_bar
        rhs = self.B_ego_bar @ np.ravel(u_ego) + self.B_surr_bar @ np.ravel(u_surr) + self.D_bar
        X = sp.linalg.spsolve_triangular(M.tocsr(), rhs, lower=True)
        return X.reshape(self.N + 1, self.k, STATE_DIM)


def _as_block_array(blocks, k: int, shape: tuple[int, int], kind: str) -> np.ndarray:
    out = np.zeros((k, k) + shape)
    if blocks is None:
        return out
    if isinstance(blocks, Mapping):
        for key, blk in blocks.items():
            r, c = (SLOTS.index(x) if isinstance(x, str) else int(x) for x in key)
            blk = np.asarray(blk, dtype=float)
            if blk.shape != shape:
                raise AssemblyError(
                    f"{kind} block for pair ({_slot(r)}, {_slot(c)}) has shape {blk.shape}, expected {shape}")
            if r == c:
                raise AssemblyError(f"{kind} block for ({_slot(r)}, {_slot(c)}) is diagonal; only off-diagonal blocks are learned")
            out[r, c] = blk
        return out
    arr = np.asarray(blocks, dtype=float)
    if arr.shape != (k, k) + shape:
        bad = arr.shape
        raise AssemblyError(f"{kind} block array has shape {bad}, expected {(k, k) + shape}")
    return arr.copy()


def _slot(i: int) -> str:
    return SLOTS[i] if i < len(SLOTS) else f"surr{i}"


def assemble_step(states: SystemState, params: Sequence[VehicleParams], learned_C=None,
                  learned_B=None, dt: float | None = None, v_lin: np.ndarray | None = None
                  ) -> InteractionMatrices:
    """Build the per-step matrices.

    ``learned_C`` / ``learned_B`` are either ``(k, k, 4, 4)`` / ``(k, k, 4, 2)``
    arrays or mappings ``{(row, col): block}`` keyed by slot name or index.
    ``v_lin`` overrides the linearization speeds (default: current speeds).
    """
    k = states.mask.size
    if len(params) != k:
        raise AssemblyError(f"need {k} VehicleParams, got {len(params)}")
    mask = states.mask
    Cb = _as_block_array(learned_C, k, (STATE_DIM, STATE_DIM), "C")
    Bb = _as_block_array(learned_B, k, (STATE_DIM, CONTROL_DIM), "B")
    speeds = states.x[:, 1] if v_lin is None else np.asarray(v_lin, dtype=float)
    S = STATE_DIM * k
    pair = mask[:, None] & mask[None, :] & ~np.eye(k, dtype=bool)
    Ad = np.zeros((k, k, STATE_DIM, STATE_DIM))
    Bd = Bb * pair[..., None, None]
    for r in np.flatnonzero(mask):
        Ad[r, r], Bd[r, r] = linear_matrices(float(speeds[r]), params[r].wheelbase)
    A = Ad.transpose(0, 2, 1, 3).reshape(S, S)
    C = (Cb * pair[..., None, None]).transpose(0, 2, 1, 3).reshape(S, S)
    Bfull = Bd.transpose(0, 2, 1, 3).reshape(S, CONTROL_DIM * k)
    B_ego = np.zeros_like(Bfull)
    B_surr = Bfull.copy()
    B_ego[:, :CONTROL_DIM] = Bfull[:, :CONTROL_DIM]
    B_surr[:, :CONTROL_DIM] = 0.0
    for m in (A, B_ego, B_surr, C):
        m.setflags(write=False)
    return InteractionMatrices(A, B_ego, B_surr, C, mask.copy())


def step(X_t: SystemState, X_prev: SystemState, m: InteractionMatrices, u_ego: SystemControl,
         u_surr: SystemControl, dt: float) -> SystemState:
    if not u_ego.is_ego_control:
        raise ValueError("ego control must have zero surrounding blocks")
    if not u_surr.is_surr_control:
        raise ValueError("surrounding control must have a zero ego block")
    x = _step_vec(X_t.flatten(), X_prev.flatten(), m.A, m.B_ego, m.B_surr, m.C,
                  u_ego.flatten(), u_surr.flatten(), dt)
    return SystemState.from_flat(x, X_t.mask)


def _step_vec(x, xp, A, B_ego, B_surr, C, ue, us, dt):
    return x + dt * (A @ x) + dt * (B_ego @ ue) + dt * (B_surr @ us) + dt * (C @ (x - xp))


def rollout(X_t: SystemState, X_prev: SystemState, seq: Sequence[InteractionMatrices],
            u_ego_seq: np.ndarray, u_surr_seq: np.ndarray, dt: float) -> list[SystemState]:
    """Sequential application of :func:`step`.

    ``u_ego_seq`` is (N, 2); ``u_surr_seq`` is (N, n, 2).
    """
    traj = rollout_array(X_t.x, X_prev.x, seq, u_ego_seq, u_surr_seq, dt)
    return [SystemState(x, X_t.mask) for x in traj]


def rollout_array(x_t: np.ndarray, x_prev: np.ndarray, seq: Sequence[InteractionMatrices],
                  u_ego_seq: np.ndarray, u_surr_seq: np.ndarray, dt: float) -> np.ndarray:
    k = x_t.shape[0]
    u_ego_seq = np.asarray(u_ego_seq, dtype=float).reshape(len(seq), CONTROL_DIM)
    u_surr_seq = np.asarray(u_surr_seq, dtype=float).reshape(len(seq), k - 1, CONTROL_DIM)
    out = np.empty((len(seq) + 1, k, STATE_DIM))
    out[0] = x_t
    x, xp = np.ravel(x_t).astype(float), np.ravel(x_prev).astype(float)
    for j, m in enumerate(seq):
        ue = np.zeros(CONTROL_DIM * k)
        ue[:CONTROL_DIM] = u_ego_seq[j]
        us = np.zeros(CONTROL_DIM * k)
        us[CONTROL_DIM:] = np.where(np.repeat(m.mask[1:], CONTROL_DIM), u_surr_seq[j].ravel(), 0.0)
        nx = _step_vec(x, xp, m.A, m.B_ego, m.B_surr, m.C, ue, us, dt)
        xp, x = x, nx
        out[j + 1] = x.reshape(k, STATE_DIM)
    return out


def stack_horizon(seq: Sequence[InteractionMatrices], X_t: SystemState, X_prev: SystemState,
                  dt: float) -> StackedDynamics:
    """Stack N per-step matrices into the horizon form.

    Sub-diagonal block j of ``A_bar`` holds ``A_{t+j} dt + I``.  ``C_bar`` holds
    ``C_{t+j} dt`` at (j+1, j) and ``-C_{t+j} dt`` at (j+1, j-1) for j >= 1; the
    j = 0 difference ``C_t dt (X_t - X_prev)`` involves only measured data and is
    folded into block 1 of ``D_bar``.
    """
    N = len(seq)
    k = X_t.mask.size
    S = STATE_DIM * k
    n = k - 1
    I = np.eye(S)
    A_blocks = [[None] * (N + 1) for _ in range(N + 1)]
    C_blocks = [[None] * (N + 1) for _ in range(N + 1)]
    Be_blocks = [[None] * N for _ in range(N + 1)]
    Bs_blocks = [[None] * N for _ in range(N + 1)]
    for j, m in enumerate(seq):
        A_blocks[j + 1][j] = sp.csr_matrix(m.A * dt + I)
        if j >= 1:
            C_blocks[j + 1][j] = sp.csr_matrix(m.C * dt)
            C_blocks[j + 1][j - 1] = sp.csr_matrix(-m.C * dt)
        Be_blocks[j + 1][j] = sp.csr_matrix(m.B_ego[:, :CONTROL_DIM] * dt)
        Bs_blocks[j + 1][j] = sp.csr_matrix(m.B_surr[:, CONTROL_DIM:] * dt)
    # bmat needs at least one block per row/column to infer shapes
    for j in range(N + 1):
        A_blocks[j][j] = A_blocks[j][j] if A_blocks[j][j] is not None else sp.csr_matrix((S, S))
        C_blocks[j][j] = sp.csr_matrix((S, S))
    for j in range(N):
        Be_blocks[0][j] = sp.csr_matrix((S, CONTROL_DIM))
        Bs_blocks[0][j] = sp.csr_matrix((S, CONTROL_DIM * n)) if n else None
    A_bar = sp.bmat(A_blocks, format="csr")
    C_bar = sp.bmat(C_blocks, format="csr")
    B_ego_bar = sp.bmat(Be_blocks, format="csr")
    if n:
        B_surr_bar = sp.bmat(Bs_blocks, format="csr")
    else:
        B_surr_bar = sp.csr_matrix(((N + 1) * S, 0))
    D = np.zeros((N + 1) * S)
    D[:S] = X_t.flatten()
    if N:
        D[S:2 * S] = seq[0].C @ (X_t.flatten() - X_prev.flatten()) * dt
    return StackedDynamics(A_bar, C_bar, B_ego_bar, B_surr_bar, D, N, k)


def condense(seq: Sequence[InteractionMatrices], x_t: np.ndarray, x_prev: np.ndarray,
             u_surr_seq: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Stacked states as an affine function of the ego controls.

    Returns ``(Phi, c)`` with ``X = Phi @ u_ego.ravel() + c`` for X of shape
    ((N+1)·S,).  This eliminates the stacked dynamics equation exactly by
    forward recursion instead of a triangular solve."""
    N = len(seq)
    k = np.asarray(x_t).shape[0]
    S = STATE_DIM * k
    u_surr_seq = np.asarray(u_surr_seq, dtype=float).reshape(N, k - 1, CONTROL_DIM)
    Phi = np.zeros((N + 1, S, CONTROL_DIM * N))
    c = np.zeros((N + 1, S))
    c[0] = np.ravel(x_t)
    prev_c = np.ravel(x_prev).astype(float)
    prev_P = np.zeros((S, CONTROL_DIM * N))
    I = np.eye(S)
    for j, m in enumerate(seq):
        F = I + dt * m.A + dt * m.C
        Cd = dt * m.C
        us = np.zeros(CONTROL_DIM * k)
        us[CONTROL_DIM:] = np.where(np.repeat(m.mask[1:], CONTROL_DIM), u_surr_seq[j].ravel(), 0.0)
        c[j + 1] = F @ c[j] - Cd @ prev_c + dt * (m.B_surr @ us)
        Phi[j + 1] = F @ Phi[j] - Cd @ prev_P
        Phi[j + 1][:, CONTROL_DIM * j:CONTROL_DIM * (j + 1)] += dt * m.B_ego[:, :CONTROL_DIM]
        prev_c, prev_P = c[j], Phi[j]
    return Phi.reshape((N + 1) * S, CONTROL_DIM * N), c.reshape(-1)
