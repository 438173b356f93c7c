"""Exact per-feeder solvers for the grid consensus step and the grid dual term.

The consensus step for one feeder is

    minimise  v + rho/2 ||l - D||^2   s.t.  v >= 0,  l_t - C_t <= v

and reduces to finding the water level ``v`` at which the clipped excess
``rho * sum_t [D_t - C_t - v]^+`` equals one.  Sorting the excesses makes the
level a closed form on each interval between consecutive sorted values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np


class Unbounded:
    """Tagged marker for a dual term equal to minus infinity."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNBOUNDED"

    def __bool__(self):
        return False


UNBOUNDED = Unbounded()


@dataclass(frozen=True)
class FeederSolution:
    v: float
    load: np.ndarray
    xi0: float
    xi: np.ndarray


def _s2_levels(delta: np.ndarray, rho: np.ndarray):
    """Water level ``v`` (and the multiplier of ``v >= 0``) row-wise."""
    S, T = delta.shape
    srt = -np.sort(-delta, axis=1, kind="stable")
    pos = np.maximum(srt, 0.0)
    cum = np.cumsum(pos, axis=1)
    total = cum[:, -1]
    below = rho * total <= 1.0
    k = np.arange(1, T + 1)
    cand = (cum - 1.0 / rho[:, None]) / k
    nxt = np.concatenate([pos[:, 1:], np.zeros((S, 1))], axis=1)
    hit = (nxt < cand) & (cand <= srt)
    first = np.argmax(hit, axis=1)
    found = hit[np.arange(S), first]
    v = cand[np.arange(S), first]
    # round-off can leave a level just outside every interval; the level is
    # then the running maximum of the candidates (same value in exact arithmetic)
    if not np.all(found | below):
        fallback = cand.max(axis=1)
        v = np.where(found, v, fallback)
    v = np.where(below, 0.0, v)
    xi0 = np.where(below, 1.0 - rho * total, 0.0)
    return v, xi0


def solve_s2_batch(target, cap, rho_over_i):
    """Vectorised consensus step over feeders; returns ``(v, load, xi0, xi)``."""
    target = np.atleast_2d(np.asarray(target, dtype=float))
    cap = np.atleast_2d(np.asarray(cap, dtype=float))
    rho = np.broadcast_to(np.asarray(rho_over_i, dtype=float), target.shape[:1]).astype(float)
    if np.any(rho <= 0):
        raise ValueError("rho / I must be positive")
    delta = target - cap
    v, xi0 = _s2_levels(delta, rho)
    load = np.minimum(cap + v[:, None], target)
    xi = rho[:, None] * np.maximum(delta - v[:, None], 0.0)
    return v, load, xi0, xi


def solve_s2(target, cap, rho_over_i: float) -> FeederSolution:
    target = np.asarray(target, dtype=float)
    cap = np.asarray(cap, dtype=float)
    if target.shape != cap.shape or target.ndim != 1:
        raise ValueError("target and capacity must be equal-length vectors")
    v, load, xi0, xi = solve_s2_batch(target[None], cap[None], rho_over_i)
    return FeederSolution(float(v[0]), load[0], float(xi0[0]), xi[0])


def s2_objective(v, load, target, rho_over_i):
    load = np.asarray(load, float)
    return v + 0.5 * rho_over_i * np.sum((load - np.asarray(target, float)) ** 2, axis=-1)


def solve_d2_batch(price, cap) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise grid dual term; returns ``(values, finite)`` with NaN where unbounded."""
    price = np.atleast_2d(np.asarray(price, dtype=float))
    cap = np.atleast_2d(np.asarray(cap, dtype=float))
    finite = ~((price.sum(axis=1) > 1.0) | (price.min(axis=1) < 0.0))
    values = np.where(finite, -np.sum(price * cap, axis=1), np.nan)
    return values, finite


def solve_d2(price, cap) -> Union[float, Unbounded]:
    """Optimal value of ``min_{v >= 0, l <= C + v} v - <price, l>``."""
    values, finite = solve_d2_batch(np.asarray(price, dtype=float)[None], np.asarray(cap, dtype=float)[None])
    return float(values[0]) if finite[0] else UNBOUNDED
