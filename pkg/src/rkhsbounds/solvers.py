"""Convex solving core.

Two problem patterns are supported:

* maximize/minimize one coordinate of a vector constrained to a kernel-norm
  ball intersected with per-site output boxes (:func:`solve_norm_ball_lp`) —
  the envelope programs;
* minimize an unconstrained convex quadratic plus an l1 term
  (:func:`solve_l1_quadratic`) — the dual inner step and the closed-form
  width constant.

The norm-ball constraint is always handled through the Cholesky factor
(``z = L w``, ``||w|| <= gamma``); no kernel matrix is ever inverted
explicitly.  The cone-plus-box programs are driven by a primal-dual
interior-point method (the Nesterov-Todd-scaled conic solver from cvxopt);
scalar-quadratic-constraint Newton iterations cannot slide along an active
norm ball and stall on ill-conditioned kernel matrices, so the conic form is
the reliable choice.  Box emptiness is decided in closed form before any
cone iterations; degenerate (single-point) feasible sets get exact closed
forms instead of a solver call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from cvxopt import matrix as _cvxmat
from cvxopt import solvers as _cvxsolvers
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .data import SelectionShape
from .kernels import PsdFactorization


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and caps for the interior-point and splitting solvers."""

    tol: float = 1e-8            # optimality/feasibility tolerance (scaled)
    max_iter: int = 200          # interior-point iteration cap
    pin_tol: float = 1e-10       # relative box width treated as an equality
    degeneracy_tol: float = 1e-8 # norm-ball slack below which the set degenerates
    admm_max_iter: int = 20000
    admm_tol: float = 1e-11

    def conic_options(self) -> dict:
        return {
            "show_progress": False,
            "maxiters": self.max_iter,
            "abstol": self.tol,
            "reltol": self.tol,
            "feastol": max(self.tol, 1e-9),
        }


DEFAULT_SOLVER = SolverConfig()

STATUS_OPTIMAL = "optimal"
STATUS_APPROXIMATE = "approximate"
STATUS_INFEASIBLE = "infeasible"
STATUS_DEGENERATE = "degenerate"


@dataclass
class SolveReport:
    """Certified solve outcome.

    ``duality_gap`` is the solver's certified primal-dual gap (an upper
    bound on the distance from ``value`` to the true optimum when the status
    is optimal); NaN when the path taken does not produce one.
    """

    value: float
    optimizer: np.ndarray
    status: str
    iterations: int
    residual: float
    duality_gap: float = float("nan")
    extras: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OPTIMAL


# ---------------------------------------------------------------------------
# Norm-ball linear program (the envelope pattern)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormBallLP:
    """One envelope program instance.

    ``factorization`` holds the kernel matrix on the data sites plus,
    optionally, one trailing query point (size d or d+1).  The objective is
    the coordinate ``objective_index`` of z, optimized subject to

        z' M^-1 z <= gamma^2       (via ||w|| <= gamma, z = L w)
        max_j |z_i - y_{i,j}| <= delta_bar  for each site i < d.
    """

    factorization: PsdFactorization
    objective_index: int
    direction: str                 # "max" | "min"
    group_shape: SelectionShape
    outputs: np.ndarray
    gamma: float
    delta_bar: float

    def __post_init__(self):
        if self.direction not in ("max", "min"):
            raise ValueError(f"direction must be 'max' or 'min', got {self.direction!r}")
        d = self.group_shape.num_sites
        if self.factorization.size not in (d, d + 1):
            raise ValueError(
                f"factorization size {self.factorization.size} does not match "
                f"{d} sites (expected d or d+1)"
            )
        y = np.asarray(self.outputs, dtype=float).ravel()
        object.__setattr__(self, "outputs", y)
        if y.size != self.group_shape.num_outputs:
            raise ValueError("outputs length does not match the group shape")
        if not (0 <= self.objective_index < self.factorization.size):
            raise ValueError("objective index out of range")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.delta_bar < 0:
            raise ValueError("delta_bar must be nonnegative")


@dataclass(frozen=True)
class BoxBounds:
    """Per-site feasible interval for the site values, with pin detection."""

    lo: np.ndarray
    hi: np.ndarray
    pinned: np.ndarray  # bool mask: interval numerically a single point
    mid: np.ndarray
    scale: float

    @classmethod
    def from_problem(cls, shape: SelectionShape, outputs, delta_bar,
                     pin_tol) -> "BoxBounds":
        y = np.asarray(outputs, dtype=float).ravel()
        starts = np.concatenate([[0], np.cumsum(shape.group_sizes)[:-1]])
        gmax = np.maximum.reduceat(y, starts)
        gmin = np.minimum.reduceat(y, starts)
        lo = gmax - delta_bar
        hi = gmin + delta_bar
        scale = max(1.0, float(np.max(np.abs(y))) if y.size else 0.0, delta_bar)
        pinned = (hi - lo) <= pin_tol * scale
        return cls(lo=lo, hi=hi, pinned=pinned, mid=0.5 * (lo + hi), scale=scale)

    @property
    def max_violation(self) -> float:
        return float(np.max(self.lo - self.hi))


def _conelp(c, Gl, hl, n_soc, Aeq, beq, cfg: SolverConfig):
    """Cone LP with linear rows plus one unit second-order cone ||x|| <= 1."""
    n = c.size
    Gq = np.vstack([np.zeros((1, n)), -np.eye(n)])
    hq = np.concatenate([[1.0], np.zeros(n)])
    G = _cvxmat(np.vstack([Gl, Gq]) if Gl.size else Gq)
    h = _cvxmat(np.concatenate([hl, hq]) if hl.size else hq)
    dims = {"l": Gl.shape[0], "q": [n_soc + 1], "s": []}
    kwargs = {}
    if Aeq is not None and Aeq.shape[0]:
        kwargs["A"] = _cvxmat(Aeq)
        kwargs["b"] = _cvxmat(beq)
    return _cvxsolvers.conelp(_cvxmat(c), G, h, dims,
                              options=cfg.conic_options(), **kwargs)


def _interpolant_extension(L, d, c):
    """Norm-minimizing trailing coordinate for site values c (augmented L)."""
    w1 = solve_triangular(L[:d, :d], c, lower=True)
    return float(L[d, :d] @ w1)


class NormBallTemplate:
    """Reusable conic-problem data for repeated solves on one dataset.

    For a fixed (factorization-of-K_XX, outputs, gamma, delta_bar) the cone
    rows and box rows are query-independent; only the objective changes.
    Build once, then :meth:`solve` per query.
    """

    def __init__(self, base_fact: PsdFactorization, group_shape: SelectionShape,
                 outputs, gamma: float, delta_bar: float,
                 cfg: SolverConfig = DEFAULT_SOLVER):
        self.base_fact = base_fact
        self.group_shape = group_shape
        self.outputs = np.asarray(outputs, dtype=float).ravel()
        self.gamma = float(gamma)
        self.delta_bar = float(delta_bar)
        self.cfg = cfg
        self.box = BoxBounds.from_problem(group_shape, self.outputs, delta_bar,
                                          cfg.pin_tol)

    def solve(self, p: NormBallLP) -> SolveReport:
        return solve_norm_ball_lp(p, self.cfg, box=self.box)


def solve_norm_ball_lp(p: NormBallLP, cfg: SolverConfig = DEFAULT_SOLVER,
                       box: BoxBounds | None = None) -> SolveReport:
    """Solve the norm-ball-plus-box linear program to certified tolerance.

    Infeasibility (outputs at one site more than ``2*delta_bar`` apart, or a
    norm bound the box cannot meet) is detected and reported, never silently
    approximated.  A feasible set that degenerates to a single point is
    reported with status "degenerate" and the exact value at that point.
    """
    fact = p.factorization
    d = p.group_shape.num_sites
    msize = fact.size
    augmented = msize == d + 1
    L = fact.lower
    gamma = p.gamma
    if box is None:
        box = BoxBounds.from_problem(p.group_shape, p.outputs, p.delta_bar,
                                     cfg.pin_tol)

    feas_tol = cfg.tol * box.scale
    if box.max_violation > feas_tol:
        return SolveReport(
            value=float("nan"), optimizer=np.full(msize, np.nan),
            status=STATUS_INFEASIBLE, iterations=0, residual=box.max_violation,
            extras={"reason": "outputs at one site are inconsistent with the "
                              "noise bound"},
        )

    base_L = L[:d, :d]

    def q_hat_of(c):
        w = solve_triangular(base_L, c, lower=True) / gamma
        return float(w @ w)

    # closed forms when the box is a single point
    if bool(np.all(box.pinned)):
        qh = q_hat_of(box.mid)
        if qh > 1.0 + cfg.degeneracy_tol:
            return SolveReport(
                value=float("nan"), optimizer=np.full(msize, np.nan),
                status=STATUS_INFEASIBLE, iterations=0,
                residual=(qh - 1.0) * gamma**2,
                extras={"reason": "norm bound is inconsistent with the pinned "
                                  "site values"},
            )
        if not augmented:
            z = box.mid
            return SolveReport(value=float(z[p.objective_index]), optimizer=z.copy(),
                               status=STATUS_OPTIMAL, iterations=0, residual=0.0,
                               duality_gap=0.0)
        s_mid = _interpolant_extension(L, d, box.mid)
        pw = L[d, d]  # sqrt of the schur complement
        slack = gamma * math.sqrt(max(1.0 - qh, 0.0))
        val = s_mid + pw * slack if p.direction == "max" else s_mid - pw * slack
        z = np.concatenate([box.mid, [val]])
        return SolveReport(value=val, optimizer=z, status=STATUS_OPTIMAL,
                           iterations=0, residual=0.0, duality_gap=0.0)

    # conic program over w with z = gamma * L w
    Bz = gamma * L[:d, :]
    free = np.flatnonzero(~box.pinned)
    pin = np.flatnonzero(box.pinned)
    rs = np.maximum(1.0, np.maximum(np.abs(box.lo), np.abs(box.hi)))
    Gl = np.vstack([Bz[free] / rs[free, None], -Bz[free] / rs[free, None]])
    hl = np.concatenate([box.hi[free] / rs[free], -box.lo[free] / rs[free]])
    Aeq = Bz[pin] / rs[pin, None] if len(pin) else None
    beq = box.mid[pin] / rs[pin] if len(pin) else None

    g = gamma * L[p.objective_index, :]
    s_obj = max(1.0, float(np.max(np.abs(g))))
    sign = -1.0 if p.direction == "max" else 1.0
    c_obj = (sign / s_obj) * g

    try:
        sol = _conelp(c_obj, Gl, hl, msize, Aeq, beq, cfg)
    except (ValueError, ZeroDivisionError, ArithmeticError) as exc:
        return SolveReport(value=float("nan"), optimizer=np.full(msize, np.nan),
                           status=STATUS_APPROXIMATE, iterations=0,
                           residual=float("inf"),
                           extras={"reason": f"cone solver failure: {exc}"})

    status = sol["status"]
    iterations = int(sol.get("iterations", 0))
    if status == "primal infeasible":
        return SolveReport(
            value=float("nan"), optimizer=np.full(msize, np.nan),
            status=STATUS_INFEASIBLE, iterations=iterations,
            residual=float("nan"),
            extras={"reason": "norm bound is inconsistent with the output box"},
        )
    if sol["x"] is None:
        return SolveReport(value=float("nan"), optimizer=np.full(msize, np.nan),
                           status=STATUS_APPROXIMATE, iterations=iterations,
                           residual=float("inf"),
                           extras={"reason": f"cone solver status {status!r}"})
    w = np.asarray(sol["x"]).ravel()
    z = gamma * (L @ w)
    value = float(z[p.objective_index])
    gap = float(sol.get("gap", float("nan"))) * s_obj
    resid = max(float(sol.get("primal infeasibility") or 0.0),
                float(sol.get("dual infeasibility") or 0.0))
    report_status = STATUS_OPTIMAL if status == "optimal" else STATUS_APPROXIMATE
    return SolveReport(value=value, optimizer=z, status=report_status,
                       iterations=iterations, residual=resid, duality_gap=gap)


@dataclass(frozen=True)
class Phase1Result:
    """Norm-minimizing site values over the output box.

    ``q_min`` is min_c c' K_XX^-1 c over the box and ``c_star`` a minimizer;
    query-independent for a fixed problem.
    """

    q_min: float
    c_star: np.ndarray


def min_norm_site_values(base_fact: PsdFactorization, box: BoxBounds,
                         gamma: float, cfg: SolverConfig = DEFAULT_SOLVER) -> Phase1Result:
    """Minimize c' K_XX^-1 c subject to the per-site output box.

    This is both the feasibility probe for the norm ball (feasible iff
    ``q_min <= gamma^2``) and the minimum-norm nominal model fit.
    """
    d = base_fact.size
    L = base_fact.lower
    if bool(np.all(box.pinned)):
        w = base_fact.solve_lower(box.mid)
        return Phase1Result(q_min=float(w @ w), c_star=box.mid.copy())
    free = np.flatnonzero(~box.pinned)
    pin = np.flatnonzero(box.pinned)
    B = gamma * L
    rs = np.maximum(1.0, np.maximum(np.abs(box.lo), np.abs(box.hi)))
    Gl = np.vstack([B[free] / rs[free, None], -B[free] / rs[free, None]])
    hl = np.concatenate([box.hi[free] / rs[free], -box.lo[free] / rs[free]])
    kwargs = {}
    if len(pin):
        kwargs["A"] = _cvxmat(B[pin] / rs[pin, None])
        kwargs["b"] = _cvxmat(box.mid[pin] / rs[pin])
    sol = _cvxsolvers.coneqp(_cvxmat(2.0 * np.eye(d)), _cvxmat(np.zeros(d)),
                             _cvxmat(Gl), _cvxmat(hl), {"l": Gl.shape[0], "q": [], "s": []},
                             options=cfg.conic_options(), **kwargs)
    if sol["x"] is None:
        raise RuntimeError(f"minimum-norm fit failed with status {sol['status']!r}")
    w = np.asarray(sol["x"]).ravel()
    c_star = gamma * (L @ w)
    return Phase1Result(q_min=float(w @ w) * gamma**2, c_star=c_star)


# ---------------------------------------------------------------------------
# l1-regularized quadratic minimization (the dual inner pattern)
# ---------------------------------------------------------------------------


def quad_l1_objective(Q, linear, l1_weight, nu) -> float:
    """0.25 nu'Q nu + linear'nu + l1_weight ||nu||_1, evaluated exactly."""
    nu = np.asarray(nu, dtype=float).ravel()
    Q = np.asarray(Q, dtype=float)
    lin = np.asarray(linear, dtype=float).ravel()
    return float(0.25 * nu @ (Q @ nu) + lin @ nu
                 + l1_weight * np.sum(np.abs(nu)))


def _l1_admm(Q, lin, weight, cfg: SolverConfig):
    """Splitting solve of the l1-regularized quadratic (alternative path)."""
    n = lin.size
    rho = max(float(np.trace(Q)) / (2.0 * n), 1e-3)
    H = Q / 2.0 + rho * np.eye(n)
    cf = cho_factor(H, lower=True)
    x = np.zeros(n)
    z = np.zeros(n)
    u = np.zeros(n)
    it = 0
    for it in range(1, cfg.admm_max_iter + 1):
        x = cho_solve(cf, rho * (z - u) - lin)
        z_old = z
        v = x + u
        z = np.sign(v) * np.maximum(np.abs(v) - weight / rho, 0.0)
        u = u + x - z
        r = float(np.linalg.norm(x - z))
        s = float(rho * np.linalg.norm(z - z_old))
        scale = max(float(np.linalg.norm(x)), float(np.linalg.norm(z)), 1.0)
        if r <= cfg.admm_tol * scale and s <= cfg.admm_tol * scale * rho:
            break
    candidates = [z, x]
    vals = [quad_l1_objective(Q, lin, weight, c) for c in candidates]
    k = int(np.argmin(vals))
    return candidates[k], vals[k], it, float(np.linalg.norm(x - z))


def _l1_descent_direction(Q, lin, weight, scale):
    """Nullspace direction along which the objective is unbounded, if any."""
    vals, vecs = np.linalg.eigh(Q)
    null = vecs[:, vals < 1e-12 * max(float(vals[-1]), 1.0)]
    for k in range(null.shape[1]):
        v = null[:, k]
        drift = float(lin @ v)
        if abs(drift) > weight * float(np.sum(np.abs(v))) + 1e-10 * scale:
            return -np.sign(drift) * v
    return None


def solve_l1_quadratic(Q, linear, l1_weight: float,
                       cfg: SolverConfig = DEFAULT_SOLVER,
                       method: str = "reformulation") -> SolveReport:
    """Minimize 0.25 nu'Q nu + linear'nu + l1_weight ||nu||_1.

    ``method`` selects the smooth linear reformulation (auxiliary bound
    variables, solved by the interior-point core) or a splitting scheme
    ("admm"); both honor the same value contract.  An objective unbounded
    below (possible only for singular Q) is reported as degenerate together
    with a normalized certificate direction.
    """
    Q = np.asarray(Q, dtype=float)
    lin = np.asarray(linear, dtype=float).ravel()
    n = lin.size
    if Q.shape != (n, n):
        raise ValueError(f"Q has shape {Q.shape}, expected {(n, n)}")
    if l1_weight < 0:
        raise ValueError("l1 weight must be nonnegative")
    scale = max(1.0, float(np.max(np.abs(lin))), l1_weight)

    # the objective escapes to -inf along nullspace directions that the l1
    # term cannot hold back; certify those up front
    eigs = np.linalg.eigvalsh(Q)
    if eigs[0] < 1e-12 * max(float(eigs[-1]), 1.0):
        direction = _l1_descent_direction(Q, lin, l1_weight, scale)
        if direction is not None:
            return SolveReport(value=-float("inf"), optimizer=direction,
                               status=STATUS_DEGENERATE, iterations=0,
                               residual=0.0,
                               extras={"certificate_direction": direction})

    if l1_weight == 0.0:
        try:
            cf = cho_factor(Q / 2.0, lower=True)
            nu = cho_solve(cf, -lin)
        except np.linalg.LinAlgError:
            nu, *_ = np.linalg.lstsq(Q / 2.0, -lin, rcond=None)
        return SolveReport(value=quad_l1_objective(Q, lin, 0.0, nu), optimizer=nu,
                           status=STATUS_OPTIMAL, iterations=0, residual=0.0,
                           duality_gap=0.0)

    if method == "admm":
        nu, val, it, resid = _l1_admm(Q, lin, l1_weight, cfg)
        status = STATUS_OPTIMAL if it < cfg.admm_max_iter else STATUS_APPROXIMATE
        return SolveReport(value=val, optimizer=nu, status=status, iterations=it,
                           residual=resid)
    if method != "reformulation":
        raise ValueError(f"unknown method {method!r}")

    # variables (nu, eta), constraints nu <= eta and -nu <= eta
    P = np.zeros((2 * n, 2 * n))
    P[:n, :n] = Q / 2.0
    qv = np.concatenate([lin, np.full(n, l1_weight)])
    eye = np.eye(n)
    G = np.vstack([np.hstack([eye, -eye]), np.hstack([-eye, -eye])])
    h = np.zeros(2 * n)
    sol = _cvxsolvers.coneqp(_cvxmat(P), _cvxmat(qv), _cvxmat(G), _cvxmat(h),
                             {"l": 2 * n, "q": [], "s": []},
                             options=cfg.conic_options())
    if sol["x"] is None:
        return SolveReport(value=float("nan"), optimizer=np.full(n, np.nan),
                           status=STATUS_APPROXIMATE, iterations=0,
                           residual=float("inf"),
                           extras={"reason": f"cone solver status {sol['status']!r}"})
    nu = np.asarray(sol["x"]).ravel()[:n]
    value = quad_l1_objective(Q, lin, l1_weight, nu)
    status = STATUS_OPTIMAL if sol["status"] == "optimal" else STATUS_APPROXIMATE
    return SolveReport(value=value, optimizer=nu, status=status,
                       iterations=int(sol.get("iterations", 0)),
                       residual=max(float(sol.get("primal infeasibility") or 0.0),
                                    float(sol.get("dual infeasibility") or 0.0)),
                       duality_gap=float(sol.get("gap", float("nan"))))
