import logging
import re
from typing import Annotated, Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, BeforeValidator, Field, model_validator
from qpsolvers import Problem, solve_problem
from qpsolvers.exceptions import ProblemError
from scipy.optimize import linprog

from src.config import get_settings
from src.models.data import ArrayModel, Vector
from src.models.schemas import SolveStatus

settings = get_settings()
logger = logging.getLogger(__name__)

class DimensionMismatch(Exception):
    """Raised when a value vector or data block does not match the declared dimensions"""
    pass

class SolveError(Exception):
    """Base class for solves that did not reach an optimum"""
    pass

class NumericalFailure(SolveError):
    """Raised when the solver stops without a usable solution"""
    pass

class InfeasibleProblem(SolveError):
    """Raised when an estimation model is reported infeasible or unbounded"""
    pass

def _as_csr(value) -> sp.csr_matrix:
    return sp.csr_matrix(value, dtype=float)

def _as_csc(value) -> sp.csc_matrix:
    return sp.csc_matrix(value, dtype=float)

SparseRows = Annotated[sp.csr_matrix, BeforeValidator(_as_csr)]
SparseSquare = Annotated[sp.csc_matrix, BeforeValidator(_as_csc)]
RowGroup = Tuple[str, int, int]

class QuadraticProgram(ArrayModel):
    """
    min 1/2 x'Px + q'x  s.t.  A_eq x = b_eq,  G x <= h,  lb <= x <= ub

    Inequalities are stored in <= form; `senses` keeps the sense each row was
    declared with so listings read like the model. Values live in conditioned
    units: original value = var_scale * x, original objective =
    objective_scale * (1/2 x'Px + q'x).
    """
    name: str
    var_names: List[str]
    P: SparseSquare
    q: Vector
    A_eq: SparseRows
    b_eq: Vector
    G: SparseRows
    h: Vector
    senses: List[str]
    lb: Vector
    ub: Vector
    var_scale: Vector
    objective_scale: float = 1.0
    eq_groups: List[RowGroup] = Field(default_factory=list)
    ineq_groups: List[RowGroup] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_dimensions(self):
        n = len(self.var_names)
        if self.P.shape != (n, n):
            raise DimensionMismatch(f"P is {self.P.shape}, expected ({n}, {n})")
        for name, vec in (("q", self.q), ("lb", self.lb), ("ub", self.ub), ("var_scale", self.var_scale)):
            if vec.shape != (n,):
                raise DimensionMismatch(f"{name} has length {vec.shape[0]}, expected {n}")
        if self.A_eq.shape[1] != n or self.G.shape[1] != n:
            raise DimensionMismatch("constraint rows reference undeclared variables")
        if self.A_eq.shape[0] != self.b_eq.shape[0]:
            raise DimensionMismatch("equality rows and right-hand sides differ in length")
        if self.G.shape[0] != self.h.shape[0] or len(self.senses) != self.G.shape[0]:
            raise DimensionMismatch("inequality rows, right-hand sides and senses differ in length")
        if self.P.nnz and abs(self.P - self.P.T).max() > 1e-12:
            raise ValueError("quadratic form is not symmetric")
        if np.any(self.P.diagonal() < 0):
            raise ValueError("quadratic form has a negative diagonal entry")
        if np.any(self.var_scale <= 0):
            raise ValueError("variable scales must be positive")
        return self

    @property
    def n_vars(self) -> int:
        return len(self.var_names)

    @property
    def is_linear(self) -> bool:
        return self.P.count_nonzero() == 0

    def group_slice(self, group: str) -> slice:
        for name, start, stop in self.eq_groups + self.ineq_groups:
            if name == group:
                return slice(start, stop)
        raise KeyError(group)

class Solution(ArrayModel):
    status: SolveStatus
    values: Optional[Vector] = None
    objective_value: Optional[float] = None
    solver: str = ""
    diagnostics: str = ""

    @model_validator(mode="after")
    def check_values(self):
        if (self.status == SolveStatus.OPTIMAL) != (self.values is not None):
            raise ValueError("values are present exactly when the status is Optimal")
        return self

    def raise_for_status(self):
        if self.status in (SolveStatus.INFEASIBLE, SolveStatus.UNBOUNDED):
            raise InfeasibleProblem(f"{self.status.value}: {self.diagnostics}")
        if self.status == SolveStatus.NUMERICAL_FAILURE:
            raise NumericalFailure(self.diagnostics or "solver did not converge")

class RowViolation(BaseModel):
    group: str
    row: int
    residual: float

class FeasibilityReport(BaseModel):
    tol: float
    max_violation: float
    groups: Dict[str, float] = Field(..., description="Largest violation per constraint group")
    violations: List[RowViolation] = Field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.max_violation <= self.tol

class _RowBlock:
    def __init__(self):
        self.rows: List[np.ndarray] = []
        self.cols: List[np.ndarray] = []
        self.vals: List[np.ndarray] = []
        self.rhs: List[np.ndarray] = []
        self.senses: List[str] = []
        self.groups: List[RowGroup] = []
        self.count = 0

    def add(self, group: str, rows, cols, vals, rhs, sense: str):
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        sign = -1.0 if sense == ">=" else 1.0
        self.rows.append(np.asarray(rows, dtype=int) + self.count)
        self.cols.append(np.asarray(cols, dtype=int))
        self.vals.append(sign * np.asarray(vals, dtype=float))
        self.rhs.append(sign * rhs)
        self.senses.extend([sense] * rhs.size)
        self.groups.append((group, self.count, self.count + rhs.size))
        self.count += rhs.size

    def matrix(self, n_vars: int) -> Tuple[sp.csr_matrix, np.ndarray]:
        if not self.count:
            return sp.csr_matrix((0, n_vars)), np.zeros(0)
        coo = sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(self.count, n_vars),
        )
        # duplicate entries are summed by the conversion
        return coo.tocsr(), np.concatenate(self.rhs)

class ProgramBuilder:
    """Accumulates variable blocks, sparse rows and a separable objective"""

    def __init__(self, name: str):
        self.name = name
        self._names: List[str] = []
        self._lb: List[np.ndarray] = []
        self._ub: List[np.ndarray] = []
        self._scale: List[np.ndarray] = []
        self._quad: Dict[int, float] = {}
        self._lin: Dict[int, float] = {}
        self._eq = _RowBlock()
        self._ineq = _RowBlock()

    @property
    def n_vars(self) -> int:
        return len(self._names)

    def add_variables(self, name: str, shape, lower: Optional[float] = 0.0, scale=1.0) -> np.ndarray:
        """Declare a block of variables; lower=None means free (boxed by COEFFICIENT_BOUND)"""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        count = int(np.prod(shape)) if shape else 1
        start = self.n_vars
        idx = np.arange(start, start + count).reshape(shape)
        bound = settings.COEFFICIENT_BOUND
        for flat in np.ndindex(*shape):
            self._names.append(f"{name}[{','.join(str(i) for i in flat)}]")
        self._lb.append(np.full(count, -bound if lower is None else lower, dtype=float))
        self._ub.append(np.full(count, bound, dtype=float))
        self._scale.append(np.broadcast_to(np.asarray(scale, dtype=float), shape).reshape(-1).copy())
        return idx

    def add_equalities(self, group: str, rows, cols, vals, rhs):
        self._eq.add(group, rows, cols, vals, rhs, "==")

    def add_inequalities(self, group: str, rows, cols, vals, rhs, sense: str = "<="):
        if sense not in ("<=", ">="):
            raise ValueError(f"unknown sense '{sense}'")
        self._ineq.add(group, rows, cols, vals, rhs, sense)

    def add_squares(self, idx, weight: float):
        for i in np.ravel(idx):
            self._quad[int(i)] = self._quad.get(int(i), 0.0) + float(weight)

    def add_linear(self, idx, coefs):
        for i, c in zip(np.ravel(idx), np.broadcast_to(coefs, np.shape(np.ravel(idx)))):
            self._lin[int(i)] = self._lin.get(int(i), 0.0) + float(c)

    def build(self, objective_scale: float = 1.0) -> QuadraticProgram:
        n = self.n_vars
        diag = np.zeros(n)
        for i, w in self._quad.items():
            diag[i] = 2.0 * w
        q = np.zeros(n)
        for i, c in self._lin.items():
            q[i] = c
        A_eq, b_eq = self._eq.matrix(n)
        G, h = self._ineq.matrix(n)
        return QuadraticProgram(
            name=self.name,
            var_names=self._names,
            P=sp.diags(diag, format="csc"),
            q=q,
            A_eq=A_eq,
            b_eq=b_eq,
            G=G,
            h=h,
            senses=self._ineq.senses,
            lb=np.concatenate(self._lb) if self._lb else np.zeros(0),
            ub=np.concatenate(self._ub) if self._ub else np.zeros(0),
            var_scale=np.concatenate(self._scale) if self._scale else np.zeros(0),
            objective_scale=objective_scale,
            eq_groups=self._eq.groups,
            ineq_groups=self._ineq.groups,
        )

RETRY_TIGHTENING = 1e-2

def _solver_options(solver: str, tol: float, tighten: float = 1.0) -> Dict[str, float]:
    if solver == "clarabel":
        options = {
            "tol_feas": min(tol, 1e-8) * tighten,
            "tol_gap_abs": min(tol, 1e-8) * tighten,
            "tol_gap_rel": settings.OBJECTIVE_REL_TOL * tighten,
        }
        if tighten < 1.0:
            options["max_iter"] = 400
        return options
    if solver == "osqp":
        return {"eps_abs": tol * 1e-2 * tighten, "eps_rel": tol * 1e-2 * tighten, "polish": True}
    return {}

def _lp_bounds(qp: QuadraticProgram) -> np.ndarray:
    # the coefficient box stays on the program for checking; HiGHS sees those columns as free
    bound = settings.COEFFICIENT_BOUND
    lb = np.where(qp.lb <= -bound, -np.inf, qp.lb)
    ub = np.where(qp.ub >= bound, np.inf, qp.ub)
    return np.column_stack([lb, ub])

def _solve_lp(qp: QuadraticProgram, tol: float, c: Optional[np.ndarray] = None) -> Tuple[SolveStatus, Optional[np.ndarray], str]:
    has_ineq = qp.G.shape[0] > 0
    has_eq = qp.A_eq.shape[0] > 0
    res = linprog(
        c=qp.q if c is None else c,
        A_ub=qp.G if has_ineq else None,
        b_ub=qp.h if has_ineq else None,
        A_eq=qp.A_eq if has_eq else None,
        b_eq=qp.b_eq if has_eq else None,
        bounds=_lp_bounds(qp),
        method="highs",
        options={
            "primal_feasibility_tolerance": max(tol * 1e-2, 1e-10),
            "dual_feasibility_tolerance": max(tol * 1e-2, 1e-10),
        },
    )
    if res.status == 0:
        return SolveStatus.OPTIMAL, np.asarray(res.x, dtype=float), res.message
    if res.status == 2:
        return SolveStatus.INFEASIBLE, None, res.message
    if res.status == 3:
        return SolveStatus.UNBOUNDED, None, res.message
    return SolveStatus.NUMERICAL_FAILURE, None, f"HiGHS status {res.status}: {res.message}"

def _solve_qp(qp: QuadraticProgram, tol: float, solver: str, tighten: float = 1.0) -> Tuple[SolveStatus, Optional[np.ndarray], str]:
    problem = Problem(
        qp.P,
        qp.q,
        qp.G.tocsc() if qp.G.shape[0] else None,
        qp.h if qp.G.shape[0] else None,
        qp.A_eq.tocsc() if qp.A_eq.shape[0] else None,
        qp.b_eq if qp.A_eq.shape[0] else None,
        qp.lb,
        qp.ub,
    )
    result = solve_problem(
        problem, solver=solver, verbose=settings.SOLVER_VERBOSE, **_solver_options(solver, tol, tighten)
    )
    status_text = str(result.extras.get("status", "")) if result.extras else ""
    if result.found and result.x is not None:
        return SolveStatus.OPTIMAL, np.asarray(result.x, dtype=float), status_text or "found"
    if "PrimalInfeasible" in status_text:
        return SolveStatus.INFEASIBLE, None, status_text
    if "DualInfeasible" in status_text:
        return SolveStatus.UNBOUNDED, None, status_text
    # AlmostSolved and iteration limits land here; only full-accuracy solutions are kept
    return SolveStatus.NUMERICAL_FAILURE, None, f"{solver} status {status_text or 'unknown'}"

def _attempt(qp: QuadraticProgram, tol: float, backend: str, tighten: float) -> Tuple[SolveStatus, Optional[np.ndarray], str]:
    try:
        if qp.is_linear:
            return _solve_lp(qp, tol * tighten)
        return _solve_qp(qp, tol, backend, tighten)
    except (ProblemError, ValueError, ArithmeticError) as e:
        logger.error(f"{qp.name}: solver {backend} raised {type(e).__name__}: {e}")
        return SolveStatus.NUMERICAL_FAILURE, None, str(e)

def _objective(qp: QuadraticProgram, x: np.ndarray) -> float:
    return float(0.5 * x @ (qp.P @ x) + qp.q @ x)

def solve(qp: QuadraticProgram, tol: Optional[float] = None, solver: Optional[str] = None) -> Solution:
    """
    Solve a program; values and objective are returned in original units

    A solve that stops short of full accuracy, or whose point violates a row by
    more than tol, is repeated once with tighter solver tolerances. If that
    still fails the result is a NumericalFailure, never a degraded optimum.
    """
    tol = tol or settings.FEASIBILITY_TOL
    solver = solver or settings.QP_SOLVER
    backend = "highs" if qp.is_linear else solver
    logger.debug(
        f"Solving {qp.name} with {backend}: {qp.n_vars} variables, "
        f"{qp.A_eq.shape[0]} equalities, {qp.G.shape[0]} inequalities"
    )

    for tighten in (1.0, RETRY_TIGHTENING):
        status, x, message = _attempt(qp, tol, backend, tighten)
        if status == SolveStatus.OPTIMAL:
            values = x * qp.var_scale
            report = check_feasibility(qp, values, tol)
            if report.feasible:
                objective = _objective(qp, x) * qp.objective_scale
                logger.debug(f"{qp.name}: status {status.value}, objective {objective:.10g}")
                return Solution(status=status, values=values, objective_value=objective, solver=backend, diagnostics=message)
            status = SolveStatus.NUMERICAL_FAILURE
            message = f"max constraint violation {report.max_violation:.3e} exceeds tol {tol:g}"
        if status != SolveStatus.NUMERICAL_FAILURE:
            break
        if tighten == 1.0:
            logger.info(f"{qp.name}: {message}, re-solving with tolerances tightened by {RETRY_TIGHTENING:g}")

    logger.warning(f"{qp.name}: {backend} finished with status {status.value} ({message})")
    return Solution(status=status, solver=backend, diagnostics=message)

def polish(qp: QuadraticProgram, solution: Solution, tol: Optional[float] = None) -> Solution:
    """
    Re-solve a least-squares program as the LP min sum(w * x) over its squared columns

    When the squared columns are nonnegative and the feasible set has a
    componentwise least point, the LP vertex is that point and carries no
    interior-point drift in the remaining columns. The vertex is kept only if it
    satisfies every row and does not raise the quadratic objective; otherwise the
    input solution is returned unchanged.
    """
    tol = tol or settings.FEASIBILITY_TOL
    if solution.status != SolveStatus.OPTIMAL or qp.is_linear:
        return solution
    weights = qp.P.diagonal()
    if np.any(qp.lb[weights > 0] < 0):
        raise ValueError("polishing needs nonnegative squared columns")

    try:
        status, x, message = _solve_lp(qp, tol, c=weights)
    except (ValueError, ArithmeticError) as e:
        status, x, message = SolveStatus.NUMERICAL_FAILURE, None, str(e)
    if status != SolveStatus.OPTIMAL:
        logger.debug(f"{qp.name}: polishing LP ended with {status.value} ({message}), keeping QP point")
        return solution
    values = x * qp.var_scale
    report = check_feasibility(qp, values, tol)
    before = _objective(qp, solution.values / qp.var_scale)
    after = _objective(qp, x)
    if not report.feasible or after > before + tol * max(1.0, abs(before)):
        logger.debug(f"{qp.name}: polished point rejected (objective {after:.10g} vs {before:.10g})")
        return solution
    logger.debug(f"{qp.name}: polished objective {after:.10g} (was {before:.10g})")
    return Solution(
        status=SolveStatus.OPTIMAL,
        values=values,
        objective_value=after * qp.objective_scale,
        solver=f"{solution.solver}+highs",
        diagnostics=message,
    )

def check_feasibility(qp: QuadraticProgram, values: np.ndarray, tol: Optional[float] = None) -> FeasibilityReport:
    """Per-group constraint residuals of original-unit values, measured in conditioned units"""
    tol = tol or settings.FEASIBILITY_TOL
    values = np.asarray(values, dtype=float)
    if values.shape != (qp.n_vars,):
        raise DimensionMismatch(f"got {values.shape[0] if values.ndim else 0} values for {qp.n_vars} variables")

    x = values / qp.var_scale
    groups: Dict[str, float] = {}
    violations: List[RowViolation] = []

    def collect(group_rows: List[RowGroup], residual: np.ndarray):
        for name, start, stop in group_rows:
            block = residual[start:stop]
            worst = float(block.max()) if block.size else 0.0
            groups[name] = max(groups.get(name, 0.0), worst)
            for offset in np.nonzero(block > tol)[0]:
                violations.append(RowViolation(group=name, row=int(offset), residual=float(block[offset])))

    collect(qp.eq_groups, np.abs(qp.A_eq @ x - qp.b_eq))
    collect(qp.ineq_groups, np.maximum(qp.G @ x - qp.h, 0.0))
    bound_residual = np.maximum(np.maximum(qp.lb - x, x - qp.ub), 0.0)
    collect([("bounds", 0, qp.n_vars)], bound_residual)

    return FeasibilityReport(
        tol=tol,
        max_violation=max(groups.values()) if groups else 0.0,
        groups=groups,
        violations=violations,
    )

def _lp_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_]", "_", name).strip("_")

def _lp_terms(coefs: np.ndarray, cols: np.ndarray, names: List[str]) -> str:
    parts = []
    for c, j in zip(coefs, cols):
        sign = "-" if c < 0 else "+"
        parts.append(f"{sign} {abs(c):.12g} {names[j]}")
    text = " ".join(parts) if parts else "0 " + names[0]
    return text[2:] if text.startswith("+ ") else text

def to_lp_text(qp: QuadraticProgram) -> str:
    """CPLEX-LP style listing of the conditioned problem"""
    names = [_lp_name(n) for n in qp.var_names]
    lines = [f"\\ {qp.name}", "Minimize"]

    linear_cols = np.nonzero(qp.q)[0]
    objective = " obj: " + _lp_terms(qp.q[linear_cols], linear_cols, names)
    diag = qp.P.diagonal()
    quad_cols = np.nonzero(diag)[0]
    if quad_cols.size:
        quad = " + ".join(f"{diag[j]:.12g} {names[j]} ^ 2" for j in quad_cols)
        objective += f" + [ {quad} ] / 2"
    lines.append(objective)

    lines.append("Subject To")
    for name, start, stop in qp.eq_groups:
        for r in range(start, stop):
            row = qp.A_eq.getrow(r)
            lines.append(f" {_lp_name(name)}_{r - start}: {_lp_terms(row.data, row.indices, names)} = {qp.b_eq[r]:.12g}")
    for name, start, stop in qp.ineq_groups:
        for r in range(start, stop):
            row = qp.G.getrow(r)
            if qp.senses[r] == ">=":
                lines.append(f" {_lp_name(name)}_{r - start}: {_lp_terms(-row.data, row.indices, names)} >= {-qp.h[r]:.12g}")
            else:
                lines.append(f" {_lp_name(name)}_{r - start}: {_lp_terms(row.data, row.indices, names)} <= {qp.h[r]:.12g}")

    lines.append("Bounds")
    for j, name in enumerate(names):
        lines.append(f" {qp.lb[j]:.12g} <= {name} <= {qp.ub[j]:.12g}")
    lines.append("End")
    return "\n".join(lines) + "\n"
