"""Levenberg-Marquardt over grouped parameter blocks.

A :class:`Problem` holds parameter *families* (arrays of same-kind blocks:
all camera poses, all points, ...) and vectorised :class:`CostTerm`
objects. Every residual block of a term references one member of each
family named in its slots, so a whole term is evaluated in one numpy pass
and its Jacobians are scattered into a sparse system.

Families flagged ``eliminate`` (3D points) are removed by a Schur
complement before the dense solve once there are more than
``SolverConfig.schur_min_blocks`` of them.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import NumericalFailure, SingularNormalEquations
from .geometry import se3_plus

log = logging.getLogger(__name__)

_report_listeners: list[Callable] = []


def add_report_listener(fn: Callable) -> None:
    _report_listeners.append(fn)


def remove_report_listener(fn: Callable) -> None:
    if fn in _report_listeners:
        _report_listeners.remove(fn)


# ---------------------------------------------------------------------------
# robust loss


def huber_weight(r, delta: float):
    """Huber loss on the squared residual, ``(rho(r^2), rho', rho'')``.

    ``rho(s) = s`` for ``s <= delta^2`` and ``2 delta sqrt(s) - delta^2``
    beyond; derivatives are taken with respect to ``s = r^2``.
    """
    s = np.asarray(r, dtype=float) ** 2
    return huber_rho(s, delta)


def huber_rho(s, delta: float):
    s = np.asarray(s, dtype=float)
    d2 = delta * delta
    inlier = s <= d2
    root = np.sqrt(np.where(inlier, d2, s))
    rho = np.where(inlier, s, 2.0 * delta * root - d2)
    rho1 = np.where(inlier, 1.0, delta / root)
    rho2 = np.where(inlier, 0.0, -0.5 * delta / (root * np.where(inlier, d2, s)))
    return rho, rho1, rho2


@dataclass(frozen=True)
class RobustLoss:
    kind: str = "none"
    delta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "huber"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "huber" and not self.delta > 0:
            raise ValueError("huber delta must be positive")

    @classmethod
    def huber(cls, delta: float) -> RobustLoss:
        return cls("huber", float(delta))

    def __call__(self, s):
        if self.kind == "none":
            s = np.asarray(s, dtype=float)
            return s, np.ones_like(s), np.zeros_like(s)
        return huber_rho(s, self.delta)


# ---------------------------------------------------------------------------
# parameters


class Family:
    """A homogeneous array of parameter blocks.

    ``kind`` is ``"euclidean"`` (additive), ``"se3"`` (rows ``[q, t]``,
    6-dof left increment) or ``"positive"`` (multiplicative, ``x exp(d)``).
    ``basis`` restricts euclidean updates to ``x + basis @ d``.
    ``fixed_dofs`` maps a member index to local coordinates held constant.
    """

    def __init__(self, name, values, kind="euclidean", constant=None, fixed_dofs=None, basis=None, eliminate=False):
        self.name = name
        self.values = np.array(values, dtype=float, copy=True)
        if self.values.ndim == 1:
            self.values = self.values[None, :]
        self.kind = kind
        count = len(self.values)
        self.constant = np.zeros(count, dtype=bool) if constant is None else np.array(constant, dtype=bool).reshape(count)
        self.fixed_dofs = dict(fixed_dofs or {})
        if kind == "se3":
            if self.values.shape[1] != 7:
                raise ValueError("se3 family rows must be [qw, qx, qy, qz, tx, ty, tz]")
            self.local_size = 6
        else:
            self.local_size = self.values.shape[1]
        if basis is not None:
            if kind != "euclidean":
                raise ValueError("basis only supported for euclidean families")
            basis = np.asarray(basis, dtype=float)
        self.basis = basis
        self.eliminate = eliminate

    def __len__(self):
        return len(self.values)

    @property
    def reduced_size(self):
        return self.local_size if self.basis is None else self.basis.shape[1]

    def plus(self, values, delta):
        """Apply local increments ``delta`` (in full local coordinates)."""
        if self.kind == "se3":
            return se3_plus(values, delta)
        if self.kind == "positive":
            return values * np.exp(delta)
        return values + delta


class CostTerm:
    """Base class for a vectorised group of residual blocks.

    Subclasses provide ``slots`` (``[(family_name, member_index_array), ...]``),
    ``residual_size`` and list their per-row arrays in ``row_fields``;
    :meth:`evaluate` returns residuals ``(n, k)`` and one Jacobian
    ``(n, k, local_size)`` per slot.
    """

    row_fields: tuple = ()
    residual_size = 1

    def __init__(self, name="term", loss: Optional[RobustLoss] = None, weight: float = 1.0):
        self.name = name
        self.loss = loss
        self.weight = float(weight)

    def __len__(self):
        return len(getattr(self, self.row_fields[0]))

    @property
    def slots(self):  # pragma: no cover - overridden
        raise NotImplementedError

    def evaluate(self, values, jacobians=True):  # pragma: no cover - overridden
        raise NotImplementedError

    def subset(self, rows):
        rows = np.asarray(rows)
        out = copy.copy(self)
        for f in self.row_fields:
            setattr(out, f, np.asarray(getattr(self, f))[rows])
        return out


class Problem:
    def __init__(self):
        self.families: dict[str, Family] = {}
        self.terms: list[CostTerm] = []

    def add_family(self, family: Family) -> Family:
        self.families[family.name] = family
        return family

    def add_term(self, term: CostTerm) -> CostTerm:
        for fam, members in term.slots:
            if fam not in self.families:
                raise KeyError(f"term {term.name!r} references unknown family {fam!r}")
        if len(term):
            self.terms.append(term)
        return term

    def values(self):
        return {k: f.values for k, f in self.families.items()}

    def cost(self, values=None) -> float:
        values = self.values() if values is None else values
        return _total_cost(self.terms, values)

    def term_costs(self, values=None):
        values = self.values() if values is None else values
        return {t.name: _term_cost(t, values) for t in self.terms}


def _term_cost(term, values):
    r = term.evaluate(values, jacobians=False)[0]
    s = np.sum(r * r, axis=1)
    rho = s if term.loss is None else term.loss(s)[0]
    return 0.5 * term.weight * float(np.sum(rho))


def _total_cost(terms, values):
    return sum(_term_cost(t, values) for t in terms)


# ---------------------------------------------------------------------------
# solver


@dataclass
class SolverConfig:
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    max_lambda: float = 1e16
    max_iterations: int = 100
    max_accepted: Optional[int] = None
    function_tolerance: float = 1e-10
    gradient_tolerance: float = 1e-10
    step_tolerance: float = 1e-14
    schur_min_blocks: int = 200


@dataclass
class IterationRecord:
    cost: float
    lam: float
    step_norm: float
    accepted: bool


@dataclass
class SolverReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    termination_reason: str = ""
    trace: list = field(default_factory=list)
    accepted_steps: int = 0
    final_lambda: float = 0.0
    label: str = ""

    @property
    def converged(self) -> bool:
        return self.termination_reason in ("function", "gradient", "step", "no_residuals", "lambda")

    def accepted_costs(self):
        return [self.initial_cost] + [rec.cost for rec in self.trace if rec.accepted]

    def is_monotone(self) -> bool:
        c = self.accepted_costs()
        return all(b <= a for a, b in zip(c, c[1:]))

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "accepted_steps": self.accepted_steps,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "termination_reason": self.termination_reason,
        }


class _Layout:
    """Column layout: free (non-eliminated) variables first, then eliminated blocks."""

    def __init__(self, problem: Problem):
        self.cols = {}
        n = 0
        elim = [f for f in problem.families.values() if f.eliminate]
        if len(elim) > 1:
            raise ValueError("at most one family can be eliminated")
        for fam in problem.families.values():
            if fam.eliminate:
                continue
            self.cols[fam.name] = self._assign(fam, n)
            n += int(np.sum(self.cols[fam.name] >= 0))
        self.n_free = n
        self.elim = elim[0] if elim else None
        self.block = 0
        self.n_blocks = 0
        if self.elim is not None:
            fam = self.elim
            if fam.fixed_dofs:
                raise ValueError("eliminated family cannot have partially fixed members")
            self.cols[fam.name] = self._assign(fam, n)
            self.block = fam.reduced_size
            self.n_blocks = int(np.sum(~fam.constant))
            n += self.block * self.n_blocks
        self.n = n

    @staticmethod
    def _assign(fam: Family, start: int):
        size = fam.reduced_size
        cols = -np.ones((len(fam), size), dtype=np.int64)
        free = np.ones((len(fam), size), dtype=bool)
        free[fam.constant] = False
        for m, dofs in fam.fixed_dofs.items():
            free[m, list(dofs)] = False
        cols[free] = start + np.arange(int(free.sum()))
        return cols


def _linearize(problem: Problem, layout: _Layout, values):
    rows_l, cols_l, vals_l, res_l = [], [], [], []
    cost = 0.0
    off = 0
    for term in problem.terms:
        r, jacs = term.evaluate(values, jacobians=True)
        n, k = r.shape
        s = np.sum(r * r, axis=1)
        if term.loss is None:
            rho, rho1 = s, np.ones_like(s)
        else:
            rho, rho1, _ = term.loss(s)
        cost += 0.5 * term.weight * float(np.sum(rho))
        scale = np.sqrt(term.weight * rho1)
        res_l.append((r * scale[:, None]).ravel())
        rr = off + np.arange(n * k).reshape(n, k)
        for (fam_name, members), J in zip(term.slots, jacs):
            fam = problem.families[fam_name]
            if fam.basis is not None:
                J = J @ fam.basis
            J = J * scale[:, None, None]
            C = layout.cols[fam_name][members]  # (n, d)
            d = C.shape[1]
            R = np.broadcast_to(rr[:, :, None], (n, k, d))
            Cb = np.broadcast_to(C[:, None, :], (n, k, d))
            mask = Cb >= 0
            rows_l.append(R[mask])
            cols_l.append(Cb[mask])
            vals_l.append(J[mask])
        off += n * k
    r = np.concatenate(res_l) if res_l else np.zeros(0)
    if rows_l:
        J = sp.csr_matrix(
            (np.concatenate(vals_l), (np.concatenate(rows_l), np.concatenate(cols_l))), shape=(off, layout.n)
        )
    else:
        J = sp.csr_matrix((off, layout.n))
    return cost, r, J


def _block_name(problem, layout, col):
    for name, cols in layout.cols.items():
        hit = np.argwhere(cols == col)
        if len(hit):
            return f"{name}[{hit[0][0]}]"
    return f"column {col}"


class _LinearSystem:
    def __init__(self, J, r, layout: _Layout, schur_min_blocks: int):
        self.J = J
        self.layout = layout
        self.g = np.asarray(J.T @ r).ravel()
        H = (J.T @ J).tocsc()
        self.diag = np.asarray(H.diagonal()).ravel()
        nc = layout.n_free
        self.use_schur = layout.elim is not None and layout.n_blocks > schur_min_blocks
        if self.use_schur:
            b, m = layout.block, layout.n_blocks
            self.A = H[:nc, :nc].toarray()
            self.B = H[:nc, nc:].toarray()
            Hp = H[nc:, nc:].tocoo()
            if np.any(Hp.row // b != Hp.col // b):
                self.use_schur = False
            else:
                blocks = np.zeros((m, b, b))
                np.add.at(blocks, (Hp.row // b, Hp.row % b, Hp.col % b), Hp.data)
                self.C = blocks
        if not self.use_schur:
            self.H = H.toarray()

    def solve(self, lam):
        D = np.clip(self.diag, 1e-6, 1e32) * lam
        nc = self.layout.n_free
        g = self.g
        if not self.use_schur:
            Hd = self.H + np.diag(D)
            c = scipy.linalg.cho_factor(Hd, lower=True, check_finite=False)
            return scipy.linalg.cho_solve(c, -g, check_finite=False)
        b, m = self.layout.block, self.layout.n_blocks
        Dp = D[nc:].reshape(m, b)
        C = self.C.copy()
        C[:, np.arange(b), np.arange(b)] += Dp
        Cinv = np.linalg.inv(C)
        gc, gp = g[:nc], g[nc:].reshape(m, b)
        if nc:
            B3 = self.B.reshape(nc, m, b)
            BCinv = np.einsum("cmi,mij->cmj", B3, Cinv).reshape(nc, m * b)
            S = self.A + np.diag(D[:nc]) - BCinv @ self.B.T
            rhs = -gc + BCinv @ gp.ravel()
            c = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
            dc = scipy.linalg.cho_solve(c, rhs, check_finite=False)
            rhs_p = -gp - (self.B.T @ dc).reshape(m, b)
        else:
            dc = np.zeros(0)
            rhs_p = -gp
        dp = np.einsum("mij,mj->mi", Cinv, rhs_p).ravel()
        return np.concatenate([dc, dp])


def _apply_step(problem: Problem, layout: _Layout, values, delta):
    out = {}
    for name, fam in problem.families.items():
        cols = layout.cols[name]
        used = cols >= 0
        if not np.any(used):
            out[name] = values[name]
            continue
        red = np.zeros(cols.shape)
        red[used] = delta[cols[used]]
        local = red if fam.basis is None else red @ fam.basis.T
        rows = np.any(used, axis=1)
        new = values[name].copy()
        new[rows] = fam.plus(values[name][rows], local[rows])
        out[name] = new
    return out


def solve_lm(problem: Problem, cfg: Optional[SolverConfig] = None, label: str = "", initial_lambda=None):
    """Minimise ``sum_t w_t/2 * rho_t(|r|^2)`` over the problem's free parameters.

    Family values are updated in place. Returns ``(values, report)``.
    """
    cfg = cfg or SolverConfig()
    layout = _Layout(problem)
    values = {k: f.values.copy() for k, f in problem.families.items()}
    report = SolverReport(label=label)
    lam = cfg.initial_lambda if initial_lambda is None else initial_lambda

    if not problem.terms or layout.n == 0:
        cost = problem.cost(values)
        report.initial_cost = report.final_cost = cost
        report.termination_reason = "no_residuals" if not problem.terms else "gradient"
        report.final_lambda = lam
        _notify(report)
        return values, report

    cost, r, J = _linearize(problem, layout, values)
    if not np.isfinite(cost) or not np.all(np.isfinite(J.data)) or not np.all(np.isfinite(r)):
        raise NumericalFailure(f"non-finite cost or Jacobian at the initial point ({label or 'solve_lm'})")
    report.initial_cost = cost
    system = None
    reason = "max_iterations"
    while report.iterations < cfg.max_iterations:
        if system is None:
            system = _LinearSystem(J, r, layout, cfg.schur_min_blocks)
            if np.max(np.abs(system.g)) < cfg.gradient_tolerance:
                reason = "gradient"
                break
        report.iterations += 1
        try:
            delta = system.solve(lam)
            ok = np.all(np.isfinite(delta))
        except (np.linalg.LinAlgError, ValueError):
            ok = False
        if not ok:
            report.trace.append(IterationRecord(cost, lam, float("nan"), False))
            lam *= cfg.lambda_up
            if lam > cfg.max_lambda:
                bad = int(np.argmin(system.diag)) if system.diag.size else 0
                raise SingularNormalEquations(
                    f"normal equations singular near {_block_name(problem, layout, bad)}",
                    block=_block_name(problem, layout, bad),
                )
            continue
        step_norm = float(np.linalg.norm(delta))
        xnorm = float(np.sqrt(sum(np.sum(v * v) for v in values.values())))
        if step_norm <= cfg.step_tolerance * (xnorm + cfg.step_tolerance):
            reason = "step"
            break
        trial = _apply_step(problem, layout, values, delta)
        new_cost = _total_cost(problem.terms, trial)
        if np.isfinite(new_cost) and new_cost < cost:
            report.trace.append(IterationRecord(new_cost, lam, step_norm, True))
            report.accepted_steps += 1
            rel = (cost - new_cost) / max(cost, 1e-300)
            values = trial
            lam = max(lam / cfg.lambda_down, 1e-16)
            cost, r, J = _linearize(problem, layout, values)
            if not np.isfinite(cost) or not np.all(np.isfinite(J.data)):
                raise NumericalFailure(f"non-finite Jacobian after accepted step ({label or 'solve_lm'})")
            system = None
            if rel < cfg.function_tolerance:
                reason = "function"
                break
            if cfg.max_accepted is not None and report.accepted_steps >= cfg.max_accepted:
                reason = "max_accepted"
                break
        else:
            report.trace.append(IterationRecord(new_cost, lam, step_norm, False))
            lam *= cfg.lambda_up
            if lam > cfg.max_lambda:
                reason = "lambda"
                break

    report.final_cost = cost
    report.termination_reason = reason
    report.final_lambda = lam
    for name, fam in problem.families.items():
        fam.values = values[name]
    _notify(report)
    return values, report


def _notify(report):
    for fn in list(_report_listeners):
        fn(report)


# ---------------------------------------------------------------------------
# Jacobian verification


def check_jacobian(problem: Problem, term: CostTerm, step: float = 1e-6, rows=None) -> float:
    """Worst deviation between analytic and central-difference Jacobians.

    For every checked residual block and slot, the deviation is
    ``max|J_analytic - J_numeric| / max|J_numeric|``. Raw residuals are
    used (no loss, no weight).
    """
    values = problem.values()
    rows = np.arange(len(term)) if rows is None else np.atleast_1d(rows)
    worst = 0.0
    for row in rows:
        sub = term.subset([row])
        _, jacs = sub.evaluate(values, jacobians=True)
        for (fam_name, members), Ja in zip(sub.slots, jacs):
            fam = problem.families[fam_name]
            m = int(members[0])
            Jn = np.zeros_like(Ja[0])
            for dof in range(fam.local_size):
                d = np.zeros((1, fam.local_size))
                d[0, dof] = step
                vp = dict(values)
                vm = dict(values)
                arr_p = values[fam_name].copy()
                arr_m = values[fam_name].copy()
                arr_p[m] = fam.plus(values[fam_name][m : m + 1], d)[0]
                arr_m[m] = fam.plus(values[fam_name][m : m + 1], -d)[0]
                vp[fam_name] = arr_p
                vm[fam_name] = arr_m
                rp = sub.evaluate(vp, jacobians=False)[0][0]
                rm = sub.evaluate(vm, jacobians=False)[0][0]
                Jn[:, dof] = (rp - rm) / (2 * step)
            scale = np.max(np.abs(Jn))
            diff = np.max(np.abs(Ja[0] - Jn))
            if scale == 0:
                dev = 0.0 if diff == 0 else np.inf
            else:
                dev = diff / scale
            worst = max(worst, float(dev))
    return worst
