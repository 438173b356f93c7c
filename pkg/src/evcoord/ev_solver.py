"""Batched dual solver for the per-EV quadratic subproblems.

Both flavours share one form.  With ``a`` the linear anchor and ``curv > 0``
the curvature, the instance is

    minimise   curv/2 ||p||^2 - <a, p> + const
    subject to p_min <= p <= p_max,  s_min <= cumsum(p) <= s_max

* S1 (ADMM primal step): ``a = b_tilde``, ``curv = 1 + kappa_rho``,
  ``const = ||b_tilde||^2 / 2``, i.e. ``1/2||p - b||^2 + kappa_rho/2 ||p||^2``.
* D1 (price best response): ``a = -c``, ``curv = kappa``, ``const = 0``,
  i.e. ``kappa/2 ||p||^2 + <c, p>``.

The cumulative band is dualised with multipliers ``u = [u_lo, u_hi] >= 0``; the
inner box-constrained minimiser is a clip, the dual gradient is a prefix sum,
and every checkpoint turns the current iterate into a feasible point with the
greedy projection so each result carries a certified relative duality gap.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .model import (CumulativeBounds, FEAS_TOL, constraint_violation,
                    nonempty, project_feasible_batch, suffix_sum)

S1 = "S1"
D1 = "D1"


@dataclass(frozen=True)
class EvInstance:
    variant: str
    anchor: np.ndarray
    reg: float
    bounds: CumulativeBounds

    def __post_init__(self):
        if self.variant not in (S1, D1):
            raise ValueError(f"unknown variant {self.variant!r}")
        if not self.reg > 0:
            raise ValueError("regularisation must be strictly positive")
        object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=float))

    @property
    def T(self) -> int:
        return self.anchor.size

    @property
    def curv(self) -> float:
        return 1.0 + self.reg if self.variant == S1 else self.reg

    @property
    def linear(self) -> np.ndarray:
        return self.anchor if self.variant == S1 else -self.anchor

    @property
    def const(self) -> float:
        return 0.5 * float(self.anchor @ self.anchor) if self.variant == S1 else 0.0


@dataclass
class DualIterate:
    u_lo: np.ndarray
    u_hi: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, T: int) -> "DualIterate":
        return cls(np.zeros(T), np.zeros(T), np.zeros(2 * T), np.zeros(2 * T), 0)

    @property
    def u(self) -> np.ndarray:
        return np.concatenate([self.u_lo, self.u_hi])


@dataclass
class SubproblemResult:
    p: np.ndarray
    gap: float
    iterations: int
    converged: bool
    phi: float = math.nan
    psi: float = math.nan
    psi_best: float = -math.inf
    dual: Optional[DualIterate] = None


@dataclass(frozen=True)
class SolverOptions:
    optimizer: str = "adam"          # "adam" or "pga"
    eta: Optional[float] = None      # None: 1 for Adam, 1/L_psi for PGA
    tol: float = 1e-3
    max_iter: int = 200
    mask_period: int = 20
    masking: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_eps: float = 1e-8
    threads: int = 1
    record_psi: bool = False
    keep_moments: bool = False

    def __post_init__(self):
        if self.optimizer not in ("adam", "pga"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mask_period < 1 or self.max_iter < 0:
            raise ValueError("mask_period must be >= 1 and max_iter >= 0")


def _split(u):
    T = u.shape[-1] // 2
    return u[..., :T], u[..., T:]


def _as_u(u) -> np.ndarray:
    if isinstance(u, DualIterate):
        return u.u
    return np.asarray(u, dtype=float)


def operator_norm_sq(T: int) -> float:
    """Squared spectral norm of the T x T prefix-sum matrix."""
    if T < 1:
        raise ValueError("T must be >= 1")
    return 1.0 / (4.0 * math.sin(math.pi / (4 * T + 2)) ** 2)


def lipschitz_constant(T: int, variant: str, reg: float) -> float:
    """Smoothness constant of the dual function of an S1 / D1 instance."""
    curv = 1.0 + reg if variant == S1 else reg
    if variant not in (S1, D1):
        raise ValueError(f"unknown variant {variant!r}")
    return 2.0 * operator_norm_sq(T) / curv


def _primal(u, a, curv, p_min, p_max):
    u_lo, u_hi = _split(u)
    return np.clip((a + suffix_sum(u_lo - u_hi)) / curv, p_min, p_max)


def _objective(p, a, curv, const):
    # curv is a scalar or a column (B, 1) broadcasting along time
    return np.sum((0.5 * curv * p - a) * p, axis=-1) + const


def _value_grad(u, p, a, curv, const, s_min, s_max):
    cum = np.cumsum(p, axis=-1)
    g = np.concatenate([s_min - cum, cum - s_max], axis=-1)
    psi = _objective(p, a, curv, const) + np.sum(u * g, axis=-1)
    return psi, g


def closed_form_primal(u, inst: EvInstance) -> np.ndarray:
    """Minimiser of the box-constrained Lagrangian at multipliers ``u``."""
    return _primal(_as_u(u), inst.linear, inst.curv, inst.bounds.p_min, inst.bounds.p_max)


def dual_value_grad(u, inst: EvInstance) -> tuple[float, np.ndarray]:
    """Dual function value (a lower bound on the instance optimum) and its gradient."""
    u = _as_u(u)
    p = closed_form_primal(u, inst)
    psi, g = _value_grad(u, p, inst.linear, inst.curv, inst.const,
                         inst.bounds.s_min, inst.bounds.s_max)
    return float(psi), g


def objective(p, inst: EvInstance) -> float:
    return float(_objective(np.asarray(p, float), inst.linear, inst.curv, inst.const))


def relative_gap(phi, psi):
    return (phi - psi) / np.maximum(np.maximum(np.abs(phi), np.abs(psi)), 1.0)


def duality_gap(p_feas, u, inst: EvInstance) -> float:
    p_feas = np.asarray(p_feas, dtype=float)
    if constraint_violation(p_feas, inst.bounds) > FEAS_TOL:
        raise ValueError("duality gap needs a feasible primal point")
    if np.any(_as_u(u) < 0):
        raise ValueError("duality gap needs nonnegative multipliers")
    psi, _ = dual_value_grad(u, inst)
    return float(relative_gap(objective(p_feas, inst), psi))


def projected_gradient(u, g, eps: float = 1e-8) -> np.ndarray:
    """Gradient restricted to the nonnegative orthant.

    Evaluates ``([u + eps*g]^+ - u) / eps`` branchwise, which is the same
    expression without the cancellation of subtracting ``u``.
    """
    u = np.asarray(u, dtype=float)
    g = np.asarray(g, dtype=float)
    return np.where(u + eps * g >= 0.0, g, -u / eps)


def _adam(u, m, v, steps, g_proj, eta, beta1, beta2, eps):
    m = beta1 * m + (1.0 - beta1) * g_proj
    v = beta2 * v + (1.0 - beta2) * g_proj * g_proj
    k = (steps + 1).astype(float)[..., None] if np.ndim(steps) else float(steps + 1)
    m_hat = m / (1.0 - beta1 ** k)
    v_hat = v / (1.0 - beta2 ** k)
    u = np.maximum(u + eta * m_hat / (np.sqrt(v_hat) + eps), 0.0)
    return u, m, v, steps + 1


def adam_update(state: DualIterate, g_proj, eta: float = 1.0, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8) -> DualIterate:
    """One projected Adam ascent step on a single dual iterate."""
    u, m, v, k = _adam(state.u, state.adam_m, state.adam_v, state.step_count,
                       np.asarray(g_proj, float), eta, beta1, beta2, eps)
    u_lo, u_hi = _split(u)
    return DualIterate(u_lo.copy(), u_hi.copy(), m, v, int(k))


@dataclass
class EvBatch:
    """Structure-of-arrays view of a batch of instances sharing a horizon."""

    linear: np.ndarray
    curv: np.ndarray
    const: np.ndarray
    bounds: CumulativeBounds

    @property
    def size(self) -> int:
        return self.linear.shape[0]

    @property
    def T(self) -> int:
        return self.linear.shape[1]

    @classmethod
    def s1(cls, anchor, kappa_rho, bounds: CumulativeBounds) -> "EvBatch":
        anchor = np.atleast_2d(np.asarray(anchor, dtype=float))
        B = anchor.shape[0]
        return cls(anchor, np.full(B, 1.0 + kappa_rho), 0.5 * np.sum(anchor * anchor, axis=1), bounds)

    @classmethod
    def d1(cls, price, kappa, bounds: CumulativeBounds) -> "EvBatch":
        price = np.atleast_2d(np.asarray(price, dtype=float))
        B = price.shape[0]
        return cls(-price, np.full(B, float(kappa)), np.zeros(B), bounds)

    @classmethod
    def from_instances(cls, instances: Sequence[EvInstance]) -> "EvBatch":
        if not instances:
            raise ValueError("empty batch")
        Ts = {inst.T for inst in instances}
        if len(Ts) != 1:
            raise ValueError("all instances in a batch must share T")
        fields = ("s_min", "s_max", "c_min", "c_max", "b_min", "b_max", "p_min", "p_max")
        bounds = CumulativeBounds(*(np.stack([getattr(x.bounds, f) for x in instances]) for f in fields))
        return cls(np.stack([x.linear for x in instances]),
                   np.array([x.curv for x in instances]),
                   np.array([x.const for x in instances]), bounds)

    def take(self, idx) -> "EvBatch":
        return EvBatch(self.linear[idx], self.curv[idx], self.const[idx], self.bounds.take(idx))


@dataclass
class WarmStart:
    u: np.ndarray
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    steps: Optional[np.ndarray] = None

    def take(self, idx) -> "WarmStart":
        pick = lambda x: None if x is None else x[idx]
        return WarmStart(self.u[idx], pick(self.m), pick(self.v), pick(self.steps))


@dataclass
class BatchResult:
    p: np.ndarray
    gap: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    psi_best: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    u: np.ndarray
    m: np.ndarray
    v: np.ndarray
    steps: np.ndarray
    inner_iterations: int = 0
    psi_trace: Optional[np.ndarray] = None
    gap_trace: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.p.shape[0]

    def __getitem__(self, i) -> SubproblemResult:
        u_lo, u_hi = _split(self.u[i])
        dual = DualIterate(u_lo.copy(), u_hi.copy(), self.m[i].copy(), self.v[i].copy(), int(self.steps[i]))
        return SubproblemResult(self.p[i].copy(), float(self.gap[i]), int(self.iterations[i]),
                                bool(self.converged[i]), float(self.phi[i]), float(self.psi[i]),
                                float(self.psi_best[i]), dual)

    def warm_start(self) -> WarmStart:
        return WarmStart(self.u, self.m, self.v, self.steps)


def _solve_chunk(batch: EvBatch, opts: SolverOptions, warm: Optional[WarmStart]) -> BatchResult:
    B, T = batch.size, batch.T
    bnd = batch.bounds
    u = np.zeros((B, 2 * T)) if warm is None else np.array(warm.u, dtype=float)
    m = np.zeros((B, 2 * T))
    v = np.zeros((B, 2 * T))
    steps = np.zeros(B, dtype=np.int64)
    if warm is not None and opts.keep_moments and warm.m is not None:
        m, v, steps = np.array(warm.m), np.array(warm.v), np.array(warm.steps)

    if opts.eta is not None:
        eta = np.full(B, float(opts.eta))
    elif opts.optimizer == "adam":
        eta = np.ones(B)
    else:
        eta = batch.curv / (2.0 * operator_norm_sq(T))

    out = BatchResult(
        p=np.full((B, T), np.nan), gap=np.full(B, np.inf), phi=np.full(B, np.nan),
        psi=np.full(B, np.nan), psi_best=np.full(B, -np.inf),
        iterations=np.zeros(B, dtype=np.int64), converged=np.zeros(B, dtype=bool),
        u=u.copy(), m=m.copy(), v=v.copy(), steps=steps.copy())
    frozen = np.zeros(B, dtype=bool)
    psi_trace = np.full((opts.max_iter + 1, B), np.nan) if opts.record_psi else None

    # rows currently iterated; with masking this shrinks as rows converge
    work = np.arange(B)
    sub = batch
    a, curv, const = sub.linear, sub.curv[:, None], sub.const
    p = _primal(u, a, curv, bnd.p_min, bnd.p_max)
    eta_w = eta[:, None]

    def checkpoint(k: int):
        nonlocal work, sub, a, curv, const, u, m, v, steps, p, eta_w
        live = ~frozen[work]
        rows = work[live]
        if rows.size == 0:
            return
        sb = sub.bounds.take(live)
        p_feas, _ = project_feasible_batch(p[live], sb, accept_tol=0.0)
        phi = _objective(p_feas, a[live], curv[live], const[live])
        psi, _ = _value_grad(u[live], p[live], a[live], curv[live], const[live], sb.s_min, sb.s_max)
        gap = relative_gap(phi, psi)
        out.psi_best[rows] = np.maximum(out.psi_best[rows], psi)
        done = (gap <= opts.tol) | (k >= opts.max_iter)
        fin = rows[done]
        out.p[fin] = p_feas[done]
        out.gap[fin] = gap[done]
        out.phi[fin] = phi[done]
        out.psi[fin] = psi[done]
        out.iterations[fin] = k
        out.converged[fin] = gap[done] <= opts.tol
        sel = np.flatnonzero(live)[done]
        out.u[fin], out.m[fin], out.v[fin], out.steps[fin] = u[sel], m[sel], v[sel], steps[sel]
        frozen[fin] = True
        if opts.masking and fin.size:
            keep = ~frozen[work]
            work = work[keep]
            sub = sub.take(keep)
            a, curv, const = sub.linear, sub.curv[:, None], sub.const
            u, m, v, steps, p, eta_w = u[keep], m[keep], v[keep], steps[keep], p[keep], eta_w[keep]

    checkpoint(0)
    k = 0
    inner = 0
    while k < opts.max_iter and not frozen.all():
        sb = sub.bounds
        psi, g = _value_grad(u, p, a, curv, const, sb.s_min, sb.s_max)
        if psi_trace is not None:
            psi_trace[k, work] = psi
        if opts.optimizer == "adam":
            g_proj = projected_gradient(u, g, opts.grad_eps)
            u, m, v, steps = _adam(u, m, v, steps, g_proj, eta_w, opts.beta1, opts.beta2, opts.eps)
        else:
            u = np.maximum(u + eta_w * g, 0.0)
            steps = steps + 1
        p = _primal(u, a, curv, sb.p_min, sb.p_max)
        inner += work.size
        k += 1
        if k % opts.mask_period == 0 or k >= opts.max_iter:
            checkpoint(k)
    if psi_trace is not None and work.size and k <= opts.max_iter:
        sb = sub.bounds
        psi, _ = _value_grad(u, p, a, curv, const, sb.s_min, sb.s_max)
        psi_trace[k, work] = psi
        out.psi_trace = psi_trace
    out.inner_iterations = inner
    return out


def _concat(parts: list[BatchResult]) -> BatchResult:
    if len(parts) == 1:
        return parts[0]
    arrays = {}
    for name in ("p", "gap", "phi", "psi", "psi_best", "iterations", "converged", "u", "m", "v", "steps"):
        arrays[name] = np.concatenate([getattr(r, name) for r in parts])
    trace = None
    if parts[0].psi_trace is not None:
        trace = np.concatenate([r.psi_trace for r in parts], axis=1)
    return BatchResult(**arrays, inner_iterations=sum(r.inner_iterations for r in parts), psi_trace=trace)


def solve_batch(instances, opts: SolverOptions = SolverOptions(),
                warm: Optional[WarmStart] = None) -> BatchResult:
    """Solve a batch of S1 / D1 instances with projected Adam (or PGA).

    ``instances`` is an :class:`EvBatch` or a sequence of :class:`EvInstance`.
    Every returned profile is feasible; rows stop at the first gap checkpoint
    where the relative duality gap drops to ``opts.tol`` or at ``max_iter``.
    """
    batch = instances if isinstance(instances, EvBatch) else EvBatch.from_instances(list(instances))
    ok = np.asarray(nonempty(batch.bounds))
    if not ok.all():
        raise ValueError(f"{int((~ok).sum())} instance(s) have an empty feasible set")
    if batch.size == 0:
        raise ValueError("empty batch")
    n_chunks = max(1, min(int(opts.threads), batch.size))
    if n_chunks == 1:
        return _solve_chunk(batch, opts, warm)
    chunks = np.array_split(np.arange(batch.size), n_chunks)
    with ThreadPoolExecutor(max_workers=n_chunks) as pool:
        parts = list(pool.map(
            lambda idx: _solve_chunk(batch.take(idx), opts, None if warm is None else warm.take(idx)),
            chunks))
    return _concat(parts)


def single_instance(inst: EvInstance, opts: SolverOptions = SolverOptions()) -> SubproblemResult:
    return solve_batch([inst], replace(opts, threads=1))[0]
