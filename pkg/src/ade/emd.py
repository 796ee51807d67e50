"""Exact balanced-transportation solver and the attention-level EMD loss.

The solver is a transportation-specialized simplex: north-west-corner start,
Bland's entering rule (first negative reduced cost in row-major order) so it
cannot cycle, and lowest-index tie-breaks on the leaving variable. It returns
an optimal vertex of the transportation polytope together with dual
potentials. A Sinkhorn iteration is available as a faster, approximate
drop-in behind the same plan interface.

`attention_emd` adapts the solver to attention maps from a query-key-swapped
cross-attention pair: class-to-patch weights become the marginals, one minus
the head-averaged patch-to-patch weights the moving cost. Gradients flow
through the cost only; the optimal plan and the marginals are detached, so
the derivative of the similarity with respect to each cost entry is exactly
minus the optimal flow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

BALANCE_RTOL = 1e-6
_REDUCED_COST_TOL = 1e-11


class UnbalancedProblem(ValueError):
    """Supplies and demands disagree beyond tolerance."""


class SolverFailure(RuntimeError):
    """The pivot loop exceeded its iteration budget."""


@dataclass
class TransportProblem:
    """Balanced transportation instance: cost (n_s, n_d), marginals >= 0."""

    cost: np.ndarray
    supplies: np.ndarray
    demands: np.ndarray

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=np.float64)
        self.supplies = np.asarray(self.supplies, dtype=np.float64)
        self.demands = np.asarray(self.demands, dtype=np.float64)
        if self.cost.ndim != 2:
            raise ValueError("cost must be a matrix")
        n_s, n_d = self.cost.shape
        if self.supplies.shape != (n_s,) or self.demands.shape != (n_d,):
            raise ValueError("marginal lengths do not match the cost matrix")
        if not (np.isfinite(self.cost).all() and np.isfinite(self.supplies).all()
                and np.isfinite(self.demands).all()):
            raise ValueError("non-finite entries in transport problem")
        if (self.supplies < 0).any() or (self.demands < 0).any():
            raise ValueError("negative supplies or demands")
        if (self.cost < 0).any():
            raise ValueError("negative costs")
        total_s = float(self.supplies.sum())
        total_d = float(self.demands.sum())
        scale = max(1.0, total_s, total_d)
        if abs(total_s - total_d) > BALANCE_RTOL * scale:
            raise UnbalancedProblem(
                f"supplies sum to {total_s:.9g}, demands to {total_d:.9g}")
        if total_d > 0:
            # Rebalance exactly; the residual is within BALANCE_RTOL.
            self.demands = self.demands * (total_s / total_d)

    @property
    def total_supply(self) -> float:
        return float(self.supplies.sum())


@dataclass
class TransportPlan:
    """Optimal flow with objective value and dual potentials."""

    flow: np.ndarray
    objective: float
    source_potentials: np.ndarray
    dest_potentials: np.ndarray


@dataclass
class RegTerms:
    """Adapted EMD values per attention type (first letter) and input type."""

    lam_aa: float
    lam_ao: float
    lam_oa: float
    lam_oo: float


def _northwest_corner(supplies, demands):
    """Initial basic feasible solution; the staircase walk visits m+n-1 cells."""
    m, n = len(supplies), len(demands)
    rs = supplies.copy()
    rd = demands.copy()
    flow = np.zeros((m, n))
    basis = []
    i = j = 0
    while True:
        q = min(rs[i], rd[j])
        flow[i, j] = q
        basis.append((i, j))
        rs[i] -= q
        rd[j] -= q
        if i == m - 1 and j == n - 1:
            break
        if j == n - 1:
            i += 1
        elif i == m - 1:
            j += 1
        elif rs[i] <= 0.0:
            i += 1
        else:  # row still has supply, so the column was exhausted
            j += 1
    return flow, basis


def _tree_duals(cost, row_adj, col_adj, m, n):
    """Solve c_ij = u_i + v_j over the spanning-tree basis, u_0 = 0."""
    u = [None] * m
    v = [None] * n
    u[0] = 0.0
    stack = [(True, 0)]
    while stack:
        is_row, idx = stack.pop()
        if is_row:
            ui = u[idx]
            for j in row_adj[idx]:
                if v[j] is None:
                    v[j] = cost[idx, j] - ui
                    stack.append((False, j))
        else:
            vj = v[idx]
            for i in col_adj[idx]:
                if u[i] is None:
                    u[i] = cost[i, idx] - vj
                    stack.append((True, i))
    return np.array(u, dtype=np.float64), np.array(v, dtype=np.float64)


def _cycle_path(row_adj, col_adj, i0, j0):
    """Alternating path from row i0 to column j0 through the basis tree.

    Returns the basis cells along the path; signs alternate -,+,-,... when
    the entering cell (i0, j0) takes +theta.
    """
    start, goal = (True, i0), (False, j0)
    parent = {start: None}
    queue = [start]
    head = 0
    while head < len(queue):
        node = queue[head]
        head += 1
        if node == goal:
            break
        is_row, idx = node
        neighbours = ((False, j) for j in row_adj[idx]) if is_row \
            else ((True, i) for i in col_adj[idx])
        for nxt in neighbours:
            if nxt not in parent:
                parent[nxt] = node
                queue.append(nxt)
    path = [goal]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    path.reverse()  # r i0, c ?, r ?, ..., c j0
    cells = []
    for a, b in zip(path, path[1:]):
        (is_row_a, xa), (_, xb) = a, b
        cells.append((xa, xb) if is_row_a else (xb, xa))
    return cells


def solve_transport(problem: TransportProblem, max_pivots: int | None = None) -> TransportPlan:
    """Exact optimal basic solution via the transportation simplex."""
    cost = problem.cost
    supplies = problem.supplies
    demands = problem.demands
    n_s, n_d = cost.shape

    # Zero-marginal rows/columns are dropped and reinserted as zero flow.
    rows = np.flatnonzero(supplies > 0.0)
    cols = np.flatnonzero(demands > 0.0)
    full_flow = np.zeros((n_s, n_d))
    full_u = np.zeros(n_s)
    full_v = np.zeros(n_d)
    if rows.size == 0 or cols.size == 0:
        return TransportPlan(full_flow, 0.0, full_u, full_v)

    c = cost[np.ix_(rows, cols)]
    s = supplies[rows].astype(np.float64)
    d = demands[cols].astype(np.float64)
    m, n = len(s), len(d)
    tol = _REDUCED_COST_TOL * max(1.0, float(np.abs(c).max()))

    flow, basis = _northwest_corner(s, d)
    if max_pivots is None:
        max_pivots = 1000 + 50 * m * n
    in_basis = np.zeros((m, n), dtype=bool)
    row_adj = [set() for _ in range(m)]
    col_adj = [set() for _ in range(n)]
    for (i, j) in basis:
        in_basis[i, j] = True
        row_adj[i].add(j)
        col_adj[j].add(i)

    # Entering rule: most-negative reduced cost for speed; after a streak of
    # degenerate pivots fall back to Bland's lowest-index rule, which cannot
    # cycle. Leaving ties always break to the lowest index.
    degenerate_streak = 0
    bland_after = 2 * (m + n)
    theta_tol = 1e-15 * max(1.0, float(s.sum()))
    for _ in range(max_pivots):
        u, v = _tree_duals(c, row_adj, col_adj, m, n)
        reduced = c - u[:, None] - v[None, :]
        reduced[in_basis] = 0.0
        if degenerate_streak < bland_after:
            enter_flat = int(reduced.argmin())
            if reduced.ravel()[enter_flat] >= -tol:
                break
        else:
            negative = (reduced.ravel() < -tol)
            if not negative.any():
                break
            enter_flat = int(np.flatnonzero(negative)[0])
        i0, j0 = divmod(enter_flat, n)
        cells = _cycle_path(row_adj, col_adj, i0, j0)
        minus = cells[0::2]
        plus = [(i0, j0)] + cells[1::2]
        theta = min(flow[cell] for cell in minus)
        leaving = min(cell for cell in minus if flow[cell] <= theta)
        for cell in plus:
            flow[cell] += theta
        for cell in minus:
            flow[cell] = max(0.0, flow[cell] - theta)
        basis.remove(leaving)
        basis.append((i0, j0))
        in_basis[leaving] = False
        in_basis[i0, j0] = True
        row_adj[leaving[0]].discard(leaving[1])
        col_adj[leaving[1]].discard(leaving[0])
        row_adj[i0].add(j0)
        col_adj[j0].add(i0)
        degenerate_streak = degenerate_streak + 1 if theta <= theta_tol else 0
    else:
        raise SolverFailure(f"no optimum within {max_pivots} pivots")

    full_flow[np.ix_(rows, cols)] = flow
    full_u[rows] = u
    full_v[cols] = v
    objective = float((cost * full_flow).sum())
    return TransportPlan(full_flow, objective, full_u, full_v)


def solve_transport_sinkhorn(problem: TransportProblem, epsilon: float = 0.05,
                             num_iters: int = 200) -> TransportPlan:
    """Entropic approximation; same interface, looser marginal accuracy."""
    cost = problem.cost
    supplies = problem.supplies
    demands = problem.demands
    n_s, n_d = cost.shape
    rows = np.flatnonzero(supplies > 0.0)
    cols = np.flatnonzero(demands > 0.0)
    full_flow = np.zeros((n_s, n_d))
    if rows.size == 0 or cols.size == 0:
        return TransportPlan(full_flow, 0.0, np.zeros(n_s), np.zeros(n_d))
    c = cost[np.ix_(rows, cols)]
    s = supplies[rows]
    d = demands[cols]
    kern = np.exp(-c / epsilon)
    u = np.ones(len(s))
    v = np.ones(len(d))
    for _ in range(num_iters):
        v = d / np.maximum(kern.T @ u, 1e-300)
        u = s / np.maximum(kern @ v, 1e-300)
    flow = u[:, None] * kern * v[None, :]
    full_flow[np.ix_(rows, cols)] = flow
    full_u = np.zeros(n_s)
    full_v = np.zeros(n_d)
    full_u[rows] = epsilon * np.log(np.maximum(u, 1e-300))
    full_v[cols] = epsilon * np.log(np.maximum(v, 1e-300))
    objective = float((cost * full_flow).sum())
    return TransportPlan(full_flow, objective, full_u, full_v)


def check_plan(problem: TransportProblem, plan: TransportPlan,
               marginal_tol: float = 1e-7, slackness_tol: float = 1e-6) -> None:
    """Assert marginal feasibility and complementary slackness."""
    scale = max(1.0, problem.total_supply)
    if (plan.flow < -1e-12).any():
        raise AssertionError("negative flow")
    row_err = np.abs(plan.flow.sum(axis=1) - problem.supplies).max(initial=0.0)
    col_err = np.abs(plan.flow.sum(axis=0) - problem.demands).max(initial=0.0)
    if row_err > marginal_tol * scale or col_err > marginal_tol * scale:
        raise AssertionError(f"marginals violated: rows {row_err:g} cols {col_err:g}")
    slack = problem.cost - plan.source_potentials[:, None] - plan.dest_potentials[None, :]
    active = plan.flow > 1e-9 * scale
    if active.any() and np.abs(slack[active]).max() > slackness_tol:
        raise AssertionError("complementary slackness violated")


def solve(problem: TransportProblem, solver: str = "exact", **kwargs) -> TransportPlan:
    if solver == "exact":
        return solve_transport(problem)
    if solver == "sinkhorn":
        return solve_transport_sinkhorn(problem, **kwargs)
    raise ValueError(f"unknown solver '{solver}'")


def emd_similarity(problem: TransportProblem, solver: str = "exact", **kwargs) -> float:
    """Sum of (1 - c_ij) * optimal flow; equals total supply minus objective."""
    plan = solve(problem, solver=solver, **kwargs)
    return float(((1.0 - problem.cost) * plan.flow).sum())


def transport_inputs_from_attention(result_1, result_2, from_logits: bool = False):
    """Marginals and differentiable cost from a query-key-swapped pair.

    Supplies come from branch-1 class-to-patch weights, demands from branch-2,
    both head-averaged and renormalized to sum one. The cost is one minus the
    mean of the branch-1 patch-to-patch map and the transposed branch-2 map.
    The marginals are detached numpy vectors; the cost keeps its graph.
    """
    w1, w2 = result_1.weights, result_2.weights
    if from_logits:
        w1, w2 = (_renormalized_logits(result_1.logits),
                  _renormalized_logits(result_2.logits))
    if w1.shape[-1] != w2.shape[-2] or w1.shape[-2] != w2.shape[-1]:
        raise ValueError("branches disagree on token counts")
    if w1.shape[-1] != w1.shape[-2]:
        raise ValueError("patch counts differ between the paired inputs")
    supplies = w1[..., 0, 1:].mean(dim=0)
    demands = w2[..., 0, 1:].mean(dim=0)
    cost = 1.0 - 0.5 * (w1[..., 1:, 1:].mean(dim=0)
                        + w2[..., 1:, 1:].mean(dim=0).transpose(-2, -1))
    s = supplies.detach().double().cpu().numpy()
    d = demands.detach().double().cpu().numpy()
    s_total = s.sum()
    d_total = d.sum()
    if s_total <= 0.0 or d_total <= 0.0:
        raise ValueError("degenerate class-to-patch attention (zero mass)")
    return s / s_total, d / d_total, cost


def _renormalized_logits(logits):
    """Pre-softmax switch: shift rows to be nonnegative, rescale rows to sum 1."""
    shifted = logits - logits.amin(dim=-1, keepdim=True)
    total = shifted.sum(dim=-1, keepdim=True)
    uniform = torch.full_like(shifted, 1.0 / shifted.shape[-1])
    safe = torch.where(total > 1e-12, shifted / total.clamp_min(1e-12), uniform)
    return safe


def attention_emd(result_1, result_2, solver: str = "exact",
                  from_logits: bool = False, **kwargs) -> torch.Tensor:
    """Adapted EMD similarity for one swapped cross-attention pair.

    Returns a scalar tensor whose gradient with respect to the attention
    weights flows through the cost term only (plan and marginals detached).
    """
    supplies, demands, cost = transport_inputs_from_attention(
        result_1, result_2, from_logits=from_logits)
    problem = TransportProblem(
        cost.detach().double().cpu().numpy(), supplies, demands)
    plan = solve(problem, solver=solver, **kwargs)
    flow = torch.as_tensor(plan.flow, dtype=cost.dtype, device=cost.device)
    return ((1.0 - cost) * flow).sum()


def regularization_loss(terms: RegTerms):
    """Wrong-concept similarities up, matched-concept similarities down."""
    return terms.lam_ao + terms.lam_oa - terms.lam_aa - terms.lam_oo
