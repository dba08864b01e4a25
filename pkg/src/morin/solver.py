"""Root finding for symbolic equation systems.

Three independent mechanisms, deliberately overlapping so results can be
cross-checked:

* ``solve_points``: batched damped Gauss-Newton from a deterministic seed
  grid (or caller-provided seeds), with strict residual rechecks, box and
  audit filters, per-point Jacobian rank reports, and deduplication.
* ``trace_curves``: predictor-corrector continuation along one-dimensional
  solution sets, detecting closed loops and box exits.
* ``grid_oracle``: a dense multi-level scan that never uses derivatives,
  serving as an independent check on the Gauss-Newton results for systems
  with isolated solutions.

Everything here is deterministic: no randomness, stable orderings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .expr import Expr, differentiate, eval_block, simplify
from .linalg import RankReport, numeric_rank

_SEED_CAP = 24_000  # total Gauss-Newton seeds, keeps dense grids tractable
_ESCAPE_FACTOR = 20.0  # drop iterates this many diameters from the box center


@dataclass(frozen=True)
class SolveOptions:
    """Shared numeric configuration.

    ``box`` bounds the first ``len(box)`` variables; extra variables (e.g.
    multipliers) are unconstrained and require explicit seeds.
    ``dedup_radius`` is relative to the box diameter.
    """

    box: tuple
    grid: int = 64
    tol_residual: float = 1e-9
    tol_rank: float = 1e-8
    max_iterations: int = 60
    dedup_radius: float = 1e-6

    def __post_init__(self):
        if not self.box:
            raise ValueError("box must not be empty")
        for lo, hi in self.box:
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"bad box interval {lo}:{hi}")
        if self.grid < 8:
            raise ValueError("grid resolution must be at least 8")
        if self.tol_residual <= 0 or self.tol_rank <= 0:
            raise ValueError("tolerances must be positive")

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm([hi - lo for lo, hi in self.box]))


@dataclass(frozen=True, eq=False)
class SolvedPoint:
    x: np.ndarray
    residual: float
    jacobian_rank: RankReport
    iterations: int


@dataclass(eq=False)
class SolveOutcome:
    points: list
    stats: dict = field(default_factory=dict)

    def coordinates(self) -> np.ndarray:
        if not self.points:
            return np.zeros((0, 0))
        return np.array([p.x for p in self.points])


def _compile(system) -> list:
    return [simplify(e) for e in system]


def _eval_rows(exprs, pts) -> np.ndarray:
    """Evaluate expressions at points, result (P, len(exprs))."""
    return eval_block(exprs, pts).T


def _jacobian_exprs(system, dim: int) -> list:
    return [differentiate(eq, s) for eq in system for s in range(dim)]


def _eval_jacobian(jac_flat, pts, n_eqs: int, dim: int) -> np.ndarray:
    vals = eval_block(jac_flat, pts)
    return vals.T.reshape(len(pts), n_eqs, dim)


def grid_seeds(box, grid: int, cap: int = _SEED_CAP) -> np.ndarray:
    """Cell-center seed lattice over the box, capped in total size.

    The per-axis count is reduced (never below 8) until the full lattice
    fits under ``cap``, keeping seeding deterministic and affordable in
    any dimension.
    """
    dim = len(box)
    per_axis = min(grid, max(8, int(round(cap ** (1.0 / dim)))))
    axes = [
        lo + (np.arange(per_axis) + 0.5) * (hi - lo) / per_axis for lo, hi in box
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def in_box(points, box, slack: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside the box on the boxed coordinates."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    ok = np.ones(len(pts), dtype=bool)
    for axis, (lo, hi) in enumerate(box):
        ok &= (pts[:, axis] >= lo - slack) & (pts[:, axis] <= hi + slack)
    return ok


def solve_points(
    system,
    opts: SolveOptions,
    *,
    seeds=None,
    audits=(),
    var_dim: int | None = None,
) -> SolveOutcome:
    """All isolated solutions of ``system`` inside the box.

    Damped Gauss-Newton with backtracking runs from every seed in
    parallel. Survivors must pass a strict residual recheck, the box test
    (with a tiny relative slack), and every audit equation within ten
    times the residual tolerance. Duplicates are merged keeping the lower
    residual; the result is ordered lexicographically by coordinates.
    """
    eqs = _compile(system)
    n_eqs = len(eqs)
    boxed = len(opts.box)
    dim = boxed if var_dim is None else var_dim
    if dim < boxed:
        raise ValueError("var_dim smaller than the box dimension")
    if seeds is None:
        if dim != boxed:
            raise ValueError("seeds are required when variables exceed the box")
        X = grid_seeds(opts.box, opts.grid)
    else:
        X = np.asarray(seeds, dtype=float).reshape(-1, dim).copy()
    stats = {
        "seeds": len(X),
        "converged": 0,
        "dropped": 0,
        "out_of_box": 0,
        "audit_rejected": 0,
        "deduplicated": 0,
    }
    if not len(X):
        return SolveOutcome([], stats)

    jac_flat = _jacobian_exprs(eqs, dim)
    center = np.array([(lo + hi) / 2 for lo, hi in opts.box])
    escape = _ESCAPE_FACTOR * max(opts.diameter, 1.0)
    lam = np.full(len(X), 1e-10)
    iters = np.zeros(len(X), dtype=int)
    active = np.ones(len(X), dtype=bool)
    done: list = []

    for _ in range(opts.max_iterations):
        idx = np.flatnonzero(active)
        if not idx.size:
            break
        P = X[idx]
        R = _eval_rows(eqs, P)
        finite = np.all(np.isfinite(R), axis=1)
        resnorm = np.where(finite, np.max(np.abs(R), axis=1, initial=0.0), np.inf)
        conv = finite & (resnorm <= opts.tol_residual)
        for j in np.flatnonzero(conv):
            done.append((idx[j], P[j].copy(), float(resnorm[j]), int(iters[idx[j]])))
        active[idx[conv]] = False
        gone = ~finite
        gone |= np.linalg.norm(P[:, :boxed] - center, axis=1) > escape
        active[idx[gone]] = False
        stats["dropped"] += int(np.count_nonzero(gone & ~conv))
        live = ~conv & ~gone
        if not np.any(live):
            continue
        sub = idx[live]
        P, R = P[live], R[live]
        J = _eval_jacobian(jac_flat, P, n_eqs, dim)
        bad_j = ~np.all(np.isfinite(J.reshape(len(P), -1)), axis=1)
        if np.any(bad_j):
            active[sub[bad_j]] = False
            stats["dropped"] += int(np.count_nonzero(bad_j))
            keep = ~bad_j
            sub, P, R, J = sub[keep], P[keep], R[keep], J[keep]
            if not len(P):
                continue
        H = np.einsum("pei,pej->pij", J, J)
        g = np.einsum("pei,pe->pi", J, R)
        scale = np.trace(H, axis1=1, axis2=2) / dim + 1e-30
        A = H + (lam[sub] * scale)[:, None, None] * np.eye(dim)
        try:
            step = np.linalg.solve(A, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.array(
                [np.linalg.lstsq(A[p], g[p], rcond=None)[0] for p in range(len(P))]
            )
        bad_s = ~np.all(np.isfinite(step), axis=1)
        if np.any(bad_s):
            step[bad_s] = 0.0
        old = np.linalg.norm(R, axis=1)
        accepted = np.zeros(len(P), dtype=bool)
        alpha = np.ones(len(P))
        newX = P.copy()
        for _half in range(6):
            trial = ~accepted
            if not np.any(trial):
                break
            cand = P[trial] - alpha[trial, None] * step[trial]
            Rc = _eval_rows(eqs, cand)
            ok = np.all(np.isfinite(Rc), axis=1)
            newnorm = np.where(ok, np.linalg.norm(np.nan_to_num(Rc), axis=1), np.inf)
            good = newnorm <= old[trial] * (1.0 - 1e-4 * alpha[trial])
            tpos = np.flatnonzero(trial)
            newX[tpos[good]] = cand[good]
            accepted[tpos[good]] = True
            alpha[tpos[~good]] *= 0.5
        lam[sub[accepted]] = np.maximum(lam[sub[accepted]] * 0.3, 1e-12)
        lam[sub[~accepted]] *= 30.0
        stalled = ~accepted & (lam[sub] > 1e6)
        active[sub[stalled]] = False
        stats["dropped"] += int(np.count_nonzero(stalled))
        X[sub] = newX
        iters[sub] += 1

    if not done:
        return SolveOutcome([], stats)

    pts = np.array([d[1] for d in done])
    res = np.array([d[2] for d in done])
    its = np.array([d[3] for d in done])

    # strict recheck (paranoia against accumulation in the batched path)
    R = _eval_rows(eqs, pts)
    strict = np.all(np.isfinite(R), axis=1) & (
        np.max(np.abs(R), axis=1, initial=0.0) <= opts.tol_residual
    )
    inside = in_box(pts, opts.box, slack=1e-9 * opts.diameter)
    stats["out_of_box"] = int(np.count_nonzero(strict & ~inside))
    keep = strict & inside
    if audits:
        audit_vals = _eval_rows(_compile(audits), pts)
        audit_ok = np.all(
            np.abs(np.nan_to_num(audit_vals, nan=np.inf))
            <= 10.0 * opts.tol_residual,
            axis=1,
        )
        stats["audit_rejected"] = int(np.count_nonzero(keep & ~audit_ok))
        keep &= audit_ok
    pts, res, its = pts[keep], res[keep], its[keep]
    if not len(pts):
        return SolveOutcome([], stats)

    order = np.argsort(res, kind="stable")
    pts, res, its = pts[order], res[order], its[order]
    radius = opts.dedup_radius * max(opts.diameter, 1.0)
    kept: list = []
    for i in range(len(pts)):
        if all(np.linalg.norm(pts[i] - pts[j]) > radius for j in kept):
            kept.append(i)
    stats["deduplicated"] = len(pts) - len(kept)
    pts, res, its = pts[kept], res[kept], its[kept]

    order = np.lexsort(pts.T[::-1])
    pts, res, its = pts[order], res[order], its[order]
    J = _eval_jacobian(jac_flat, pts, n_eqs, dim)
    points = [
        SolvedPoint(
            x=pts[i],
            residual=float(res[i]),
            jacobian_rank=numeric_rank(J[i], opts.tol_rank),
            iterations=int(its[i]),
        )
        for i in range(len(pts))
    ]
    stats["converged"] = len(points)
    return SolveOutcome(points, stats)


# ---------------------------------------------------------------------------
# Curve tracing.

@dataclass(eq=False)
class TracedCurve:
    """Polyline along a one-dimensional solution component.

    ``closed`` means the trace returned to its start; closed curves repeat
    the first vertex at the end. ``reached_boundary`` marks components
    that leave the box (both ends, after stitching the reverse trace).
    ``step_collapsed`` flags an abandoned trace whose corrector forced the
    step below the useful minimum; treat the component as unresolved.
    """

    points: np.ndarray
    closed: bool
    reached_boundary: bool = False
    step_collapsed: bool = False

    @property
    def length(self) -> float:
        d = np.diff(self.points, axis=0)
        return float(np.sum(np.linalg.norm(d, axis=1)))


def _curve_tangent(J: np.ndarray, tol: float) -> np.ndarray | None:
    u, s, vt = np.linalg.svd(J)
    dim = J.shape[1]
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > tol * smax)) if smax > 0 else 0
    if rank != dim - 1:
        return None
    return vt[-1]


def _correct(eqs, jac_flat, x, n_eqs, dim, tol, max_iter=10):
    """Project a predictor point back onto the solution set."""
    x = x.copy()
    for it in range(max_iter):
        r = _eval_rows(eqs, x.reshape(1, -1))[0]
        if not np.all(np.isfinite(r)):
            return None, it
        if np.max(np.abs(r), initial=0.0) <= tol:
            return x, it
        J = _eval_jacobian(jac_flat, x.reshape(1, -1), n_eqs, dim)[0]
        if not np.all(np.isfinite(J)):
            return None, it
        step, *_ = np.linalg.lstsq(J, r, rcond=None)
        x = x - step
    return None, max_iter


def _trace_one(eqs, jac_flat, n_eqs, dim, start, direction, opts, h0, max_steps):
    """Trace from ``start`` along ``direction`` until closure, exit, or stall.

    Returns (vertices list excluding start, closed, boundary, collapsed).
    """
    tol = 10.0 * opts.tol_residual
    h_min = 1e-6 * opts.diameter
    path = []
    x = start.copy()
    t_prev = direction
    h = h0
    closed = boundary = collapsed = False
    for step_no in range(max_steps):
        J = _eval_jacobian(jac_flat, x.reshape(1, -1), n_eqs, dim)[0]
        t = _curve_tangent(J, opts.tol_rank)
        if t is None:
            break
        if float(t @ t_prev) < 0:
            t = -t
        moved = None
        while h >= h_min:
            cand, iters = _correct(eqs, jac_flat, x + h * t, n_eqs, dim, tol)
            if cand is not None and np.linalg.norm(cand - x) > 0.1 * h:
                moved = cand
                if iters <= 3:
                    h = min(h * 1.4, h0)
                break
            h *= 0.5
        if moved is None:
            collapsed = True
            break
        x, t_prev = moved, t
        path.append(x.copy())
        if not in_box(x.reshape(1, -1), opts.box)[0]:
            boundary = True
            break
        if step_no >= 4 and np.linalg.norm(x - start) < 1.3 * h0:
            closed = True
            break
    return path, closed, boundary, collapsed


def trace_curves(
    system,
    opts: SolveOptions,
    *,
    seeds=None,
    step: float | None = None,
    max_steps: int = 4000,
) -> list:
    """Trace the one-dimensional solution set of ``system`` inside the box.

    Seeds default to a deduplicated Gauss-Newton pass. Each unconsumed
    seed starts a predictor-corrector trace; seeds near an already traced
    component are consumed. Curves come back sorted by their smallest
    vertex, closed loops first as traced.
    """
    eqs = _compile(system)
    dim = len(opts.box)
    n_eqs = len(eqs)
    jac_flat = _jacobian_exprs(eqs, dim)
    if seeds is None:
        sample_opts = SolveOptions(
            box=opts.box,
            grid=min(opts.grid, 12),
            tol_residual=opts.tol_residual,
            tol_rank=opts.tol_rank,
            dedup_radius=2e-3,
        )
        seeds = solve_points(eqs, sample_opts).coordinates()
    seeds = np.asarray(seeds, dtype=float).reshape(-1, dim)
    if not len(seeds):
        return []
    h0 = step if step is not None else 5e-3 * opts.diameter

    consumed = np.zeros(len(seeds), dtype=bool)
    curves = []
    for i in range(len(seeds)):
        if consumed[i]:
            continue
        consumed[i] = True
        x0, _ = _correct(eqs, jac_flat, seeds[i], n_eqs, dim, 10 * opts.tol_residual)
        if x0 is None:
            continue
        J = _eval_jacobian(jac_flat, x0.reshape(1, -1), n_eqs, dim)[0]
        t0 = _curve_tangent(J, opts.tol_rank)
        if t0 is None:
            continue
        fwd, closed, bnd_f, col_f = _trace_one(
            eqs, jac_flat, n_eqs, dim, x0, t0, opts, h0, max_steps
        )
        if closed:
            pts = np.array([x0] + fwd + [x0])
            curve = TracedCurve(pts, True, False, col_f)
        else:
            bwd, _, bnd_b, col_b = _trace_one(
                eqs, jac_flat, n_eqs, dim, x0, -t0, opts, h0, max_steps
            )
            pts = np.array(list(reversed(bwd)) + [x0] + fwd)
            curve = TracedCurve(pts, False, bnd_f and bnd_b, col_f or col_b)
        curves.append(curve)
        todo = np.flatnonzero(~consumed)
        if todo.size:
            d = np.min(
                np.linalg.norm(
                    seeds[todo][:, None, :] - curve.points[None, :, :], axis=2
                ),
                axis=1,
            )
            consumed[todo[d < 2.0 * h0]] = True
    curves.sort(key=lambda c: tuple(np.min(c.points, axis=0)))
    return curves


# ---------------------------------------------------------------------------
# Dense-grid oracle.

def _scan_box(eqs, box, resolution, chunk=200_000):
    """Per-equation abs residuals sampled on the cell-center lattice."""
    axes = [
        lo + (np.arange(resolution) + 0.5) * (hi - lo) / resolution
        for lo, hi in box
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    vals = np.empty((len(eqs), len(pts)))
    for lo_i in range(0, len(pts), chunk):
        part = pts[lo_i : lo_i + chunk]
        block = eval_block(eqs, part)
        vals[:, lo_i : lo_i + chunk] = np.abs(np.nan_to_num(block, nan=np.inf))
    shape = (len(eqs),) + (resolution,) * len(box)
    return vals.reshape(shape), axes


def _local_slope(values, box, resolution) -> np.ndarray:
    """Per-cell, per-equation slope estimate: the largest finite
    difference to any axis neighbor, divided by the cell size along that
    axis. The leading axis of ``values`` indexes equations."""
    out = np.zeros_like(values)
    work = np.nan_to_num(values, nan=np.inf)
    for axis, (lo, hi) in enumerate(box):
        size = (hi - lo) / resolution
        ax = axis + 1
        diffs = np.abs(np.diff(work, axis=ax))
        diffs = np.nan_to_num(diffs, nan=0.0, posinf=0.0)
        shape_lo = [slice(None)] * work.ndim
        shape_hi = [slice(None)] * work.ndim
        shape_lo[ax] = slice(0, work.shape[ax] - 1)
        shape_hi[ax] = slice(1, work.shape[ax])
        # each target cell appears once per side, so in-place maximum on
        # views matches element-wise scatter
        axis_slope = np.zeros_like(work)
        view_lo = axis_slope[tuple(shape_lo)]
        np.maximum(view_lo, diffs, out=view_lo)
        view_hi = axis_slope[tuple(shape_hi)]
        np.maximum(view_hi, diffs, out=view_hi)
        out = np.maximum(out, axis_slope / size)
    return out


def grid_oracle(
    system,
    box,
    resolution: int = 128,
    *,
    tol_residual: float = 1e-9,
    levels: int = 24,
) -> np.ndarray:
    """Isolated solutions located purely by multi-level dense scanning.

    Never evaluates a derivative, so it is an independent check on the
    Gauss-Newton solver. A cell is a candidate when every equation on its
    own could reach zero inside the cell, each judged against that
    equation's locally observed slope (a shared threshold would let the
    steepest equation mask the whole box); candidate cells form clusters,
    every cluster's bounding box is rescanned at higher resolution
    (re-labeled, so merged clusters split), and a leaf survives only if
    its best residual has shrunk in proportion to the final cell size,
    again equation by equation. Roots that stay in one cluster through
    every level merge into one answer. Only meaningful for systems whose
    solution set is a finite point set.
    """
    eqs = _compile(system)
    dim = len(box)
    diam = float(np.linalg.norm([hi - lo for lo, hi in box]))
    reps = _scan_level(
        eqs,
        tuple(box),
        resolution,
        tol_residual,
        levels,
        5e-7 * diam,
        2e-3 * diam,
    )
    if not reps:
        return np.zeros((0, dim))
    pts = np.array(reps)
    diam = float(np.linalg.norm([hi - lo for lo, hi in box]))
    order = np.lexsort(pts.T[::-1])
    pts = pts[order]
    kept = []
    for i in range(len(pts)):
        if all(np.linalg.norm(pts[i] - pts[j]) > 1e-6 * diam for j in kept):
            kept.append(i)
    return pts[kept]


def _scan_level(
    eqs, box, resolution, tol_residual, levels_left, min_half_diag, accept_half_diag
) -> list:
    dim = len(box)
    values, axes = _scan_box(eqs, box, resolution)
    finite_vals = np.nan_to_num(values, nan=np.inf)
    slope = _local_slope(values, box, resolution)
    half_diag = 0.5 * math.sqrt(sum(((hi - lo) / resolution) ** 2 for lo, hi in box))
    tau = 1.5 * slope * half_diag + 10.0 * tol_residual
    mask = np.all(finite_vals <= tau, axis=0)
    worst = finite_vals.max(axis=0)
    flat_vals = finite_vals.reshape(len(eqs), -1)
    flat_slope = slope.reshape(len(eqs), -1)
    labels, count = ndimage.label(mask, structure=np.ones((3,) * dim, dtype=int))
    reps: list = []
    for lab in range(1, count + 1):
        where = labels == lab
        if levels_left <= 1 or half_diag <= min_half_diag:
            # leaf: a root cell satisfies V <= slope * half_diag for every
            # equation, while a positive minimum of some V fails once the
            # cell is small; clusters whose cells never got small are
            # plateaus, not roots
            if half_diag > accept_half_diag:
                continue
            flat = np.where(where, worst, np.inf).ravel()
            j = int(np.argmin(flat))
            bound = 4.0 * flat_slope[:, j] * half_diag + 50.0 * tol_residual
            if np.any(flat_vals[:, j] > bound):
                continue
            idx = np.unravel_index(j, worst.shape)
            reps.append(np.array([axes[a][idx[a]] for a in range(dim)]))
            continue
        idx = np.argwhere(where)
        sub_box = []
        degenerate = False
        shrink = 0.0
        for axis, (lo, hi) in enumerate(box):
            size = (hi - lo) / resolution
            i_min, i_max = idx[:, axis].min(), idx[:, axis].max()
            s_lo = max(lo, lo + (i_min - 1) * size)
            s_hi = min(hi, lo + (i_max + 2) * size)
            if not s_lo < s_hi:
                degenerate = True
                break
            sub_box.append((s_lo, s_hi))
            shrink = max(shrink, (s_hi - s_lo) / (hi - lo))
        if degenerate:
            continue
        # a cluster spanning its whole box would recurse forever at fixed
        # resolution; finer cells restore progress (thinner mask next level)
        child_res = min(2 * resolution, 128) if shrink > 0.6 else 16
        reps.extend(
            _scan_level(
                eqs,
                tuple(sub_box),
                child_res,
                tol_residual,
                levels_left - 1,
                min_half_diag,
                accept_half_diag,
            )
        )
    return reps


def match_point_sets(found, expected, tol: float) -> dict:
    """Optimal one-to-one matching report between two point sets.

    ``bijective`` is True when the sets have equal size and the optimal
    assignment pairs every point within ``tol``.
    """
    report = {
        "found": len(found),
        "expected": len(expected),
        "bijective": False,
        "max_distance": math.inf,
    }
    if len(found) != len(expected):
        return report
    if not len(found):
        report["bijective"] = True
        report["max_distance"] = 0.0
        return report
    A = np.asarray(found, dtype=float).reshape(len(found), -1)
    B = np.asarray(expected, dtype=float).reshape(len(expected), -1)
    cost = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    worst = float(cost[rows, cols].max())
    report["max_distance"] = worst
    report["bijective"] = bool(worst <= tol)
    return report
