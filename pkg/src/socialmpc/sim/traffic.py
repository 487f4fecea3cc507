"""Car-following (IDM) and lane-change (MOBIL) models for surrounding traffic."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class IdmParams:
    v0: float = 30.0      # desired speed
    T: float = 1.5        # time gap
    s0: float = 2.0       # jam distance
    a_max: float = 1.5
    b: float = 2.0        # comfortable deceleration
    delta: float = 4.0
    b_max: float = 8.0    # emergency deceleration bound


@dataclass(frozen=True)
class MobilParams:
    politeness: float = 0.3
    a_th: float = 0.2
    b_safe: float = 4.0


STYLES = {
    "normal": (IdmParams(), MobilParams()),
    "aggressive": (IdmParams(T=0.9, a_max=2.5), MobilParams(politeness=0.1, a_th=0.05)),
}


def style_params(style: str, v0: float | None = None) -> tuple[IdmParams, MobilParams]:
    try:
        idm, mobil = STYLES[style]
    except KeyError:
        raise ValueError(f"unknown driving style {style!r}; expected one of {sorted(STYLES)}") from None
    return (replace(idm, v0=v0) if v0 is not None else idm), mobil


def idm_accel(v: float, v_lead: float | None, gap: float | None, p: IdmParams = IdmParams()) -> float:
    """IDM acceleration; ``v_lead``/``gap`` are None on a free road."""
    free = 1.0 - (max(v, 0.0) / p.v0) ** p.delta
    if v_lead is None or gap is None:
        return float(min(max(p.a_max * free, -p.b_max), p.a_max))
    if gap <= 0.0:
        return -p.b_max
    s_star = p.s0 + max(0.0, v * p.T + v * (v - v_lead) / (2.0 * math.sqrt(p.a_max * p.b)))
    a = p.a_max * (free - (s_star / gap) ** 2)
    return float(min(max(a, -p.b_max), p.a_max))


@dataclass(frozen=True)
class LaneContext:
    """Neighbours of a vehicle in one lane: bumper-to-bumper gaps and speeds.

    ``exists`` False means the lane is not on the road."""

    exists: bool = True
    lead_gap: float | None = None
    lead_v: float | None = None
    follow_gap: float | None = None
    follow_v: float | None = None
    follow_idm: IdmParams | None = None


def _follower_accels(ctx: LaneContext, length: float, v_self: float, p_default: IdmParams):
    """Follower acceleration without and with the subject vehicle inserted in front of it."""
    if ctx.follow_gap is None:
        return 0.0, 0.0
    p = ctx.follow_idm or p_default
    if ctx.lead_gap is None:
        without = idm_accel(ctx.follow_v, None, None, p)
    else:
        without = idm_accel(ctx.follow_v, ctx.lead_v, ctx.follow_gap + length + ctx.lead_gap, p)
    with_self = idm_accel(ctx.follow_v, v_self, ctx.follow_gap, p)
    return without, with_self


def lane_change_incentive(v: float, length: float, current: LaneContext, target: LaneContext,
                          idm: IdmParams, mobil: MobilParams, min_gap: float = 2.0,
                          bias: float = 0.0) -> float | None:
    """MOBIL incentive of moving into ``target``; None when unsafe or impossible."""
    if not target.exists:
        return None
    if target.lead_gap is not None and target.lead_gap < min_gap:
        return None
    if target.follow_gap is not None and target.follow_gap < min_gap:
        return None
    a_c = idm_accel(v, current.lead_v, current.lead_gap, idm)
    a_c_new = idm_accel(v, target.lead_v, target.lead_gap, idm)
    a_n, a_n_new = _follower_accels(target, length, v, idm)
    if a_n_new < -mobil.b_safe:
        return None
    # old follower: currently behind us, afterwards behind our old leader
    a_o_new, a_o = _follower_accels(current, length, v, idm)
    return a_c_new - a_c + mobil.politeness * ((a_n_new - a_n) + (a_o_new - a_o)) + bias


def mobil_decide(v: float, length: float, current: LaneContext, left: LaneContext, right: LaneContext,
                 idm: IdmParams = IdmParams(), mobil: MobilParams = MobilParams(),
                 bias_left: float = 0.0, bias_right: float = 0.0) -> str:
    """'stay', 'left' or 'right'.  A change needs safety and incentive above
    the threshold; ties go to staying."""
    gains = {}
    for name, ctx, bias in (("left", left, bias_left), ("right", right, bias_right)):
        gain = lane_change_incentive(v, length, current, ctx, idm, mobil, bias=bias)
        if gain is not None and gain > mobil.a_th:
            gains[name] = gain
    if not gains or (len(gains) == 2 and gains["left"] == gains["right"]):
        return "stay"
    return max(gains, key=gains.get)
