"""
SGSP reconstruction: minimise

    f(x) = ||(H - I) F x||^2 + lam * ||D F x - y||^2

over the multi-slice multi-coil image x, either by gradient descent (fixed or
backtracking step) or by conjugate gradient on the normal equations.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from utils import logger, InvalidArgumentError, GeometryMismatchError, StepSizeError, SgspConfig

from .linalg import conjugate_gradient, power_iteration
from .operators import CompositeH, SamplingOperator
from .simulation import SamplingPlan
from .tensor_core import Domain, Tensorish, as_array, fft2c, ifft2c

ARMIJO = 1e-4
MAX_BACKTRACKS = 40


class SgspProblem:
    """The SGSP objective, its gradient and its normal operator for one measurement."""

    def __init__(self, y: Tensorish, plan: SamplingPlan, H: CompositeH, data_weight: float = 1.0):
        if data_weight <= 0:
            raise InvalidArgumentError(f"Data weight must be positive, got {data_weight}")
        self.y = as_array(y, Domain.KSPACE, "y")
        if self.y.shape[-4] != 1 or self.y.shape[-3] != H.n_coil:
            raise GeometryMismatchError(f"y dims {self.y.shape} do not fit {H.n_coil} coils collapsed")
        plan.check_grid(self.y.shape, "y")
        if plan.grid != H.grid:
            raise GeometryMismatchError(f"Plan grid {plan.grid} and kernel grid {H.grid} differ")
        self.plan = plan
        self.H = H
        self.D = SamplingOperator(plan, H.n_slice)
        self.data_weight = float(data_weight)
        self.dims = H.dims

    def data_residual(self, x: np.ndarray) -> np.ndarray:
        return self.D.apply(fft2c(x)) - self.y

    def objective(self, x: Tensorish) -> float:
        data = as_array(x, Domain.IMAGE, "x")
        consistency = np.linalg.norm(self.H.residual(fft2c(data))) ** 2
        fidelity = np.linalg.norm(self.data_residual(data)) ** 2
        return float(consistency + self.data_weight * fidelity)

    def gradient(self, x: Tensorish) -> np.ndarray:
        """2 Psi x + 2 lam F^-1 D* (D F x - y); f(x + d) ~ f(x) + Re<grad, d>."""
        data = as_array(x, Domain.IMAGE, "x")
        data_term = ifft2c(self.D.adjoint(self.data_residual(data)))
        return 2.0 * self.H.normal_psi(data) + 2.0 * self.data_weight * data_term

    def normal(self, x: np.ndarray) -> np.ndarray:
        """(Psi + lam F^-1 D* D F) x."""
        return self.H.normal_psi(x) + self.data_weight * ifft2c(self.D.adjoint(self.D.apply(fft2c(x))))

    def rhs(self) -> np.ndarray:
        return self.data_weight * ifft2c(self.D.adjoint(self.y))

    def zero_filled(self) -> np.ndarray:
        return ifft2c(self.D.adjoint(self.y))

    def lipschitz(self, n_iter: int = 20) -> float:
        return power_iteration(self.normal, self.dims, n_iter=n_iter)


def sgsp_objective(x: Tensorish, y: Tensorish, plan: SamplingPlan, H: CompositeH, data_weight: float = 1.0) -> float:
    return SgspProblem(y, plan, H, data_weight).objective(x)


@dataclass
class SgspResult:
    x: np.ndarray
    log: List[Dict[str, Any]] = field(default_factory=list)
    converged: bool = False
    solver: str = "cg"

    @property
    def objectives(self) -> List[float]:
        return [entry["objective"] for entry in self.log]


def _relative_change(previous: float, current: float) -> float:
    return abs(previous - current) / max(abs(previous), 1e-300)


def _gradient_descent(problem: SgspProblem, x: np.ndarray, cfg: SgspConfig) -> SgspResult:
    auto = cfg.step_size == "auto"
    if auto:
        lipschitz = problem.lipschitz(cfg.power_iters)
        initial_step = 1.0 / max(lipschitz, 1e-300)
        logger.info(f"SGSP auto step: L ~ {lipschitz:.4e}, initial step {initial_step:.4e}")
    else:
        initial_step = float(cfg.step_size)

    objective = problem.objective(x)
    log = [{"iteration": 0, "objective": objective, "step_size": 0.0, "grad_norm": None, "rel_change": None}]
    increases = 0
    converged = False

    for iteration in range(1, cfg.max_iters + 1):
        grad = problem.gradient(x)
        grad_sq = float(np.real(np.vdot(grad, grad)))
        step = initial_step
        candidate = x - step * grad
        new_objective = problem.objective(candidate)
        if auto:
            for _ in range(MAX_BACKTRACKS):
                if new_objective <= objective - ARMIJO * step * grad_sq:
                    break
                step *= 0.5
                candidate = x - step * grad
                new_objective = problem.objective(candidate)
                logger.debug(f"SGSP iter {iteration}: backtrack to step {step:.3e}")
            # a converged iterate may not admit any sufficient decrease
            if new_objective > objective:
                candidate, new_objective, step = x, objective, 0.0

        change = _relative_change(objective, new_objective)
        if new_objective > objective:
            increases += 1
            if increases >= cfg.patience:
                raise StepSizeError(
                    f"SGSP objective increased {increases} consecutive times with step {step:.3e}; reduce step_size"
                )
        else:
            increases = 0

        x, objective = candidate, new_objective
        log.append(
            {
                "iteration": iteration,
                "objective": objective,
                "step_size": step,
                "grad_norm": float(np.sqrt(grad_sq)),
                "rel_change": change,
            }
        )
        logger.debug(f"SGSP iter {iteration}: objective {objective:.6e} step {step:.3e}")
        if change < cfg.tol:
            converged = True
            break

    return SgspResult(x=x, log=log, converged=converged, solver="gradient")


def _conjugate_gradient(problem: SgspProblem, x: np.ndarray, cfg: SgspConfig) -> SgspResult:
    log = [{"iteration": 0, "objective": problem.objective(x), "cg_residual": None}]

    def record(iteration: int, current: np.ndarray, residual: float):
        log.append({"iteration": iteration, "objective": problem.objective(current), "cg_residual": residual})

    result = conjugate_gradient(
        problem.normal, problem.rhs(), x0=x, max_iter=cfg.max_iters, tol=cfg.tol, name="sgsp-cg", callback=record,
        keep_best=False,
    )
    return SgspResult(x=result.x, log=log, converged=result.converged, solver="cg")


def sgsp_reconstruct(
    y: Tensorish,
    plan: SamplingPlan,
    H: CompositeH,
    cfg: Optional[SgspConfig] = None,
    x0: Optional[np.ndarray] = None,
) -> SgspResult:
    """
    Reconstruct the slice stack from collapsed SMS data.

    Args:
        y: Collapsed measurement (1, C, Y, X), k-space
        plan: Sampling plan the data were acquired with
        H: Self-consistency operator from calibrated kernels
        cfg: Solver settings
        x0: Initial image, the zero-filled adjoint F^-1 D* y when None

    Returns:
        SgspResult with the image-domain estimate (S, C, Y, X) and the iteration log

    Raises:
        StepSizeError: Fixed step diverging for ``patience`` iterations
        OperatorDefectError: Negative curvature met by CG
    """
    cfg = cfg or SgspConfig()
    problem = SgspProblem(y, plan, H, cfg.data_weight)
    x = problem.zero_filled() if x0 is None else np.array(as_array(x0, Domain.IMAGE, "x0"), dtype=np.complex128)
    if x.shape != problem.dims:
        raise GeometryMismatchError(f"Initial image {x.shape} does not match {problem.dims}")

    if cfg.solver == "cg":
        result = _conjugate_gradient(problem, x, cfg)
    else:
        result = _gradient_descent(problem, x, cfg)

    final_grad = float(np.linalg.norm(problem.gradient(result.x)))
    logger.info(
        f"SGSP ({result.solver}) finished after {len(result.log) - 1} iterations: "
        f"objective {result.log[-1]['objective']:.6e}, gradient norm {final_grad:.3e}"
    )
    result.log[-1]["final_grad_norm"] = final_grad
    return result
