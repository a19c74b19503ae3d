"""Optimal uncertainty envelopes and their dual relaxations.

Given bounded-noise observations of an unknown function in a known-norm
kernel-space ball, the pointwise-tightest upper and lower bounds on the
function value are the optima of small convex programs: a linear objective
over the kernel-norm ball intersected with the per-site output boxes.  This
module builds those programs (off-data queries extend the kernel matrix by
one bordered row; on-data queries drop the extension), runs them through the
conic engine, and exposes the Lagrangian-dual path that trades accuracy for
speed via alternating minimization with a closed-form step in the ball
multiplier.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, HyperParams, selection_site_index
from .kernels import (
    DegenerateAugmentationError,
    KernelSpec,
    PsdFactorization,
    augment_factorization,
    kernel_cross,
    kernel_matrix,
    kernel_vector,
)
from .solvers import (
    DEFAULT_SOLVER,
    BoxBounds,
    NormBallLP,
    SolveReport,
    SolverConfig,
    STATUS_OPTIMAL,
    quad_l1_objective,
    solve_l1_quadratic,
    solve_norm_ball_lp,
)

# Power-function fraction of sqrt(k(x,x)) below which a query is treated as
# sitting on a data site (the bordered kernel matrix degenerates there).
ON_DATA_POWER_RTOL = 1e-6


@dataclass(frozen=True)
class BoundProblem:
    """A dataset, kernel, and hyperparameters with shared precomputations.

    Holds the Cholesky factorization of the site kernel matrix and the
    per-site output box; both are reused by every bound evaluation.  The
    stored fingerprint ties the precomputations to the dataset contents.
    """

    kernel: KernelSpec
    dataset: Dataset
    params: HyperParams
    solver: SolverConfig = DEFAULT_SOLVER
    factorization: PsdFactorization = field(init=False, repr=False)
    box: BoxBounds = field(init=False, repr=False)
    fingerprint: int = field(init=False, repr=False)

    def __post_init__(self):
        from .kernels import factorize_psd

        K = kernel_matrix(self.kernel, self.dataset.inputs)
        object.__setattr__(self, "factorization", factorize_psd(K))
        object.__setattr__(self, "box", BoxBounds.from_problem(
            self.dataset.selection, self.dataset.stacked_outputs,
            self.params.delta_bar, self.solver.pin_tol))
        object.__setattr__(self, "fingerprint", self.dataset.fingerprint())

    # -- shared kernel algebra -------------------------------------------

    def kernel_rows(self, Q) -> np.ndarray:
        """Cross-kernel matrix (d, m) between the data sites and queries."""
        return kernel_cross(self.kernel, self.dataset.inputs, Q)

    def gains(self, Q) -> np.ndarray:
        """K_XX^-1 K_XQ via factorization solves, shape (d, m)."""
        return self.factorization.solve(self.kernel_rows(Q))

    def power(self, Q) -> np.ndarray:
        """Power function at each query row."""
        from .kernels import power_function_batch

        return power_function_batch(self.kernel, self.dataset.inputs,
                                    self.factorization, Q)

    def check_fresh(self):
        if self.dataset.fingerprint() != self.fingerprint:
            raise RuntimeError(
                "dataset contents changed after the problem was built; "
                "rebuild the BoundProblem"
            )

    def with_dataset(self, ds: Dataset) -> "BoundProblem":
        return BoundProblem(self.kernel, ds, self.params, self.solver)

    def negated(self) -> "BoundProblem":
        """Mirror problem with all outputs negated (swaps upper and lower)."""
        groups = tuple(-g for g in self.dataset.output_groups)
        ds = Dataset(self.dataset.inputs, groups, self.dataset.domain_box)
        return BoundProblem(self.kernel, ds, self.params, self.solver)


def _route(p: BoundProblem, x):
    """Classify a query: on-data (site index) or off-data (bordered factor)."""
    kx = kernel_vector(p.kernel, p.dataset.inputs, x)
    v = p.factorization.solve_lower(kx)
    schur = 1.0 - float(v @ v)
    if schur <= ON_DATA_POWER_RTOL**2:
        return int(np.argmax(kx)), None
    L = p.factorization.lower
    d = p.factorization.size
    Laug = np.zeros((d + 1, d + 1))
    Laug[:d, :d] = L
    Laug[d, :d] = v
    Laug[d, d] = math.sqrt(schur)
    return None, PsdFactorization(lower=Laug, jitter=p.factorization.jitter,
                                  size=d + 1)


def _primal_bound(p: BoundProblem, x, direction: str) -> SolveReport:
    p.check_fresh()
    site, aug = _route(p, x)
    if site is not None:
        lp = NormBallLP(factorization=p.factorization, objective_index=site,
                        direction=direction, group_shape=p.dataset.selection,
                        outputs=p.dataset.stacked_outputs,
                        gamma=p.params.gamma, delta_bar=p.params.delta_bar)
    else:
        lp = NormBallLP(factorization=aug,
                        objective_index=p.factorization.size,
                        direction=direction, group_shape=p.dataset.selection,
                        outputs=p.dataset.stacked_outputs,
                        gamma=p.params.gamma, delta_bar=p.params.delta_bar)
    report = solve_norm_ball_lp(lp, p.solver, box=p.box)
    report.extras["on_data_site"] = site
    return report


def upper_bound(p: BoundProblem, x) -> SolveReport:
    """Tightest upper bound on the unknown function at ``x``.

    Off-data queries solve the bordered-matrix program; queries whose power
    function vanishes are snapped to the nearest site, where the objective
    becomes that site's coordinate (the bordered matrix is singular there).
    """
    return _primal_bound(p, x, "max")


def lower_bound(p: BoundProblem, x) -> SolveReport:
    """Tightest lower bound at ``x`` (mirror of :func:`upper_bound`)."""
    return _primal_bound(p, x, "min")


@dataclass
class EnvelopeResult:
    """Two-sided bound at one query point."""

    query: np.ndarray
    lower: float
    upper: float
    method: str           # primal | dual-exact | dual-alternating
    gap: float
    status_lower: str
    status_upper: str

    @property
    def ok(self) -> bool:
        return self.status_lower == STATUS_OPTIMAL and self.status_upper == STATUS_OPTIMAL

    @property
    def width(self) -> float:
        return self.upper - self.lower


def envelope(p: BoundProblem, x, method: str = "primal") -> EnvelopeResult:
    """Evaluate both sides of the uncertainty envelope at ``x``.

    ``method`` selects the primal programs (certified optimal values), the
    exactly-minimized dual, or the fixed-iteration alternating dual (valid
    conservative bounds by weak duality).
    """
    q = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    if method == "primal":
        up = upper_bound(p, q)
        low = lower_bound(p, q)
        gap = up.duality_gap + low.duality_gap
    elif method in ("dual-exact", "dual-alternating"):
        mode = "exact" if method == "dual-exact" else "fixed-iterations"
        up = dual_upper_bound(p, q, mode=mode)
        low = dual_lower_bound(p, q, mode=mode)
        gap = float("nan")
    else:
        raise ValueError(f"unknown envelope method {method!r}")
    return EnvelopeResult(query=q, lower=low.value, upper=up.value,
                          method=method, gap=gap,
                          status_lower=low.status, status_upper=up.status)


def envelope_batch(p: BoundProblem, queries, method: str = "primal",
                   threads: int = 1) -> list:
    """Map :func:`envelope` over query rows, optionally with a thread pool.

    Individual solves are pure and share only read-only precomputations, so
    the thread count never affects the values.
    """
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    if threads <= 1:
        return [envelope(p, q, method=method) for q in Q]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda q: envelope(p, q, method=method), Q))


# ---------------------------------------------------------------------------
# Lagrangian dual path
# ---------------------------------------------------------------------------


@dataclass
class DualIterate:
    """One alternating-minimization state: multiplier vector, ball
    multiplier, and the dual objective value there."""

    nu: np.ndarray
    lam: float
    objective: float


def _dual_objective(M, r, kxx, y, delta_bar, gamma, nu, lam) -> float:
    quad = float(nu @ (M @ nu))
    return (quad / (4.0 * lam) + float((y - r / (2.0 * lam)) @ nu)
            + delta_bar * float(np.sum(np.abs(nu)))
            + kxx / (4.0 * lam) + lam * gamma**2)


def _lambda_step(M, r, kxx, gamma, nu, scale) -> float:
    """Closed-form ball-multiplier update; the radicand is a PSD quadratic
    form and can only go negative through roundoff."""
    rad = float(nu @ (M @ nu)) - 2.0 * float(r @ nu) + kxx
    if rad < -1e-10 * max(1.0, scale):
        raise ArithmeticError(
            f"ball-multiplier radicand {rad:.3e} is negative beyond roundoff; "
            "the kernel factorization is unreliable"
        )
    return math.sqrt(max(rad, 0.0)) / (2.0 * gamma)


def _alternating_dual(M, r, kxx, y, delta_bar, gamma, lambda0, max_iters,
                      eps, final_exact, cfg, nu_solver) -> SolveReport:
    """Block-coordinate minimization of the dual objective.

    Each multiplier-vector step is an l1-regularized quadratic solve; each
    ball-multiplier step is closed form.  Any iterate yields a valid
    conservative bound, and the objective never increases across exact block
    steps.
    """
    scale = max(1.0, kxx, float(np.max(np.abs(y))) if y.size else 0.0)
    lam_floor = 1e-12 * max(math.sqrt(kxx), 1e-6) / (2.0 * gamma)
    lam = max(lambda0, lam_floor)
    nu = np.zeros(y.size)
    trace = [DualIterate(nu=nu.copy(), lam=lam,
                         objective=_dual_objective(M, r, kxx, y, delta_bar,
                                                   gamma, nu, lam))]
    it = 0
    dlam = float("inf")
    while it < max_iters:
        inner = solve_l1_quadratic(M / lam, y - r / (2.0 * lam), delta_bar,
                                   cfg, method=nu_solver)
        nu = inner.optimizer
        trace.append(DualIterate(nu=nu.copy(), lam=lam,
                                 objective=_dual_objective(M, r, kxx, y,
                                                           delta_bar, gamma,
                                                           nu, lam)))
        lam_new = max(_lambda_step(M, r, kxx, gamma, nu, scale), lam_floor)
        dlam = abs(lam_new - lam)
        lam = lam_new
        trace.append(DualIterate(nu=nu.copy(), lam=lam,
                                 objective=_dual_objective(M, r, kxx, y,
                                                           delta_bar, gamma,
                                                           nu, lam)))
        it += 1
        if dlam <= eps:
            break
    if final_exact:
        inner = solve_l1_quadratic(M / lam, y - r / (2.0 * lam), delta_bar,
                                   cfg, method=nu_solver)
        nu = inner.optimizer
        trace.append(DualIterate(nu=nu.copy(), lam=lam,
                                 objective=_dual_objective(M, r, kxx, y,
                                                           delta_bar, gamma,
                                                           nu, lam)))
    value = trace[-1].objective
    status = STATUS_OPTIMAL if dlam <= eps else "approximate"
    return SolveReport(value=value, optimizer=nu, status=status, iterations=it,
                       residual=dlam,
                       extras={"lambda": lam,
                               "objective_trace": [t.objective for t in trace]})


def _dual_data(p: BoundProblem, outputs=None):
    site = selection_site_index(p.dataset.selection)
    K = p.factorization.lower @ p.factorization.lower.T
    M = K[np.ix_(site, site)]
    y = p.dataset.stacked_outputs if outputs is None else outputs
    return site, M, y


def dual_upper_bound(p: BoundProblem, x, mode: str = "exact",
                     max_iters: int | None = None, eps: float | None = None,
                     lambda0: float | None = None,
                     nu_solver: str = "reformulation") -> SolveReport:
    """Conservative upper bound from the dual program.

    ``mode`` is "exact" (alternate until the ball multiplier stabilizes,
    then one final multiplier-vector solve) or "fixed-iterations" (the
    budgeted alternating scheme).  Whatever the iteration count, the
    returned value over-bounds the primal optimum by weak duality.  Queries
    on a data site use the piecewise branch of :func:`dual_on_data_branch`.
    """
    q = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    site_hit, _ = _route(p, q)
    if site_hit is not None:
        return dual_on_data_branch(p, site_hit, mode=mode, max_iters=max_iters,
                                   eps=eps, lambda0=lambda0, nu_solver=nu_solver)
    site, M, y = _dual_data(p)
    kx = kernel_vector(p.kernel, p.dataset.inputs, q)
    r = kx[site]
    return _dual_from_parts(p, M, r, 1.0, y, mode, max_iters, eps, lambda0,
                            nu_solver)


def _dual_from_parts(p, M, r, kxx, y, mode, max_iters, eps, lambda0, nu_solver):
    gamma, db = p.params.gamma, p.params.delta_bar
    if lambda0 is None:
        lambda0 = math.sqrt(kxx) / (2.0 * gamma)
    if mode == "exact":
        iters = max_iters if max_iters is not None else p.solver.max_iter
        tol = eps if eps is not None else 1e-10
        return _alternating_dual(M, r, kxx, y, db, gamma, lambda0, iters, tol,
                                 True, p.solver, nu_solver)
    if mode == "fixed-iterations":
        iters = max_iters if max_iters is not None else 20
        tol = eps if eps is not None else 1e-6
        return _alternating_dual(M, r, kxx, y, db, gamma, lambda0, iters, tol,
                                 False, p.solver, nu_solver)
    raise ValueError(f"unknown dual mode {mode!r}")


def dual_lower_bound(p: BoundProblem, x, mode: str = "exact",
                     max_iters: int | None = None, eps: float | None = None,
                     lambda0: float | None = None,
                     nu_solver: str = "reformulation") -> SolveReport:
    """Conservative lower bound from the mirrored dual.

    The lower program on outputs y equals the negated upper program on -y,
    so the same alternating machinery applies with a sign flip.
    """
    q = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    site_hit, _ = _route(p, q)
    if site_hit is not None:
        rep = dual_on_data_branch(p, site_hit, mode=mode, max_iters=max_iters,
                                  eps=eps, lambda0=lambda0,
                                  nu_solver=nu_solver, side="lower")
        return rep
    site, M, y = _dual_data(p)
    kx = kernel_vector(p.kernel, p.dataset.inputs, q)
    r = kx[site]
    rep = _dual_from_parts(p, M, r, 1.0, -y, mode, max_iters, eps, lambda0,
                           nu_solver)
    rep.value = -rep.value
    rep.extras["objective_trace"] = [-v for v in rep.extras["objective_trace"]]
    return rep


def dual_on_data_branch(p: BoundProblem, site_index: int, mode: str = "exact",
                        max_iters: int | None = None, eps: float | None = None,
                        lambda0: float | None = None,
                        nu_solver: str = "reformulation",
                        side: str = "upper") -> SolveReport:
    """Piecewise dual value at a data site.

    The dual objective there splits into the interior branch (positive ball
    multiplier, same formula as off data) and the corner branch whose value
    is the smallest output at the site plus the noise bound.  The bound is
    the smaller of the two (mirrored for the lower side).
    """
    site, M, y = _dual_data(p)
    d = p.dataset.num_sites
    if not (0 <= site_index < d):
        raise ValueError(f"site index {site_index} out of range")
    K = p.factorization.lower @ p.factorization.lower.T
    r = K[:, site_index][site]
    kxx = float(K[site_index, site_index])
    group = p.dataset.output_groups[site_index]
    if side == "upper":
        rep = _dual_from_parts(p, M, r, kxx, y, mode, max_iters, eps, lambda0,
                               nu_solver)
        corner = float(np.min(group)) + p.params.delta_bar
        if corner < rep.value:
            rep.value = corner
            rep.extras["branch"] = "corner"
        else:
            rep.extras["branch"] = "interior"
        return rep
    rep = _dual_from_parts(p, M, r, kxx, -y, mode, max_iters, eps, lambda0,
                           nu_solver)
    rep.value = -rep.value
    rep.extras["objective_trace"] = [-v for v in rep.extras["objective_trace"]]
    corner = float(np.max(group)) - p.params.delta_bar
    if corner > rep.value:
        rep.value = corner
        rep.extras["branch"] = "corner"
    else:
        rep.extras["branch"] = "interior"
    return rep


# ---------------------------------------------------------------------------
# Monotone-shrinkage check
# ---------------------------------------------------------------------------


@dataclass
class ShrinkageReport:
    """Before/after envelope comparison for one added observation."""

    queries: np.ndarray
    upper_before: np.ndarray
    upper_after: np.ndarray
    lower_before: np.ndarray
    lower_after: np.ndarray
    skipped: list
    max_upper_increase: float
    max_lower_decrease: float

    @property
    def max_violation(self) -> float:
        return max(self.max_upper_increase, self.max_lower_decrease)


def check_shrinkage(p: BoundProblem, new_x, new_y: float,
                    query_points) -> ShrinkageReport:
    """Verify that one added observation never widens the envelope.

    Queries where either side fails to solve to optimality (before or after)
    are skipped and flagged rather than counted as violations.
    """
    from .data import add_sample

    Q = np.atleast_2d(np.asarray(query_points, dtype=float))
    p2 = p.with_dataset(add_sample(p.dataset, new_x, new_y))
    ub, ua = np.full(len(Q), np.nan), np.full(len(Q), np.nan)
    lb, la = np.full(len(Q), np.nan), np.full(len(Q), np.nan)
    skipped = []
    for i, q in enumerate(Q):
        before = envelope(p, q)
        after = envelope(p2, q)
        if not (before.ok and after.ok):
            skipped.append(i)
            continue
        ub[i], ua[i] = before.upper, after.upper
        lb[i], la[i] = before.lower, after.lower
    good = ~np.isnan(ub)
    up_inc = float(np.max(ua[good] - ub[good])) if good.any() else float("nan")
    low_dec = float(np.max(lb[good] - la[good])) if good.any() else float("nan")
    return ShrinkageReport(queries=Q, upper_before=ub, upper_after=ua,
                           lower_before=lb, lower_after=la, skipped=skipped,
                           max_upper_increase=up_inc,
                           max_lower_decrease=low_dec)
