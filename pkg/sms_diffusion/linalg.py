"""
Matrix-free linear algebra on (..., slice, coil, ky, kx) arrays: batched
conjugate gradient for Hermitian PSD operators and power iteration.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from utils import logger, OperatorDefectError

from .tensor_core import batch_inner

LinearMap = Callable[[np.ndarray], np.ndarray]

NEGATIVE_CURVATURE = 1e-10
_TINY = 1e-300


@dataclass
class CGResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual: float
    history: List[float] = field(default_factory=list)


def _norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.real(batch_inner(a, a)))


def conjugate_gradient(
    apply: LinearMap,
    b: np.ndarray,
    x0: Optional[np.ndarray] = None,
    max_iter: int = 50,
    tol: float = 1e-8,
    name: str = "cg",
    callback: Optional[Callable[[int, np.ndarray, float], None]] = None,
    keep_best: bool = True,
) -> CGResult:
    """
    Solve A x = b for Hermitian positive semidefinite A, batched over leading axes.

    Every batch entry gets its own step sizes; entries stop moving once their
    relative residual ||r|| / ||b|| drops below ``tol``. Each entry returns its
    lowest-residual iterate, which is not always the last one when the cap is hit.

    Args:
        apply: x -> A x on arrays shaped like b
        b: Right-hand side (..., S, C, Y, X)
        x0: Warm start, zeros when None
        max_iter: Iteration cap
        tol: Relative residual tolerance
        name: Label for log lines
        callback: Called as callback(iteration, x, residual) after each step
        keep_best: Return the lowest-residual iterate instead of the last one

    Returns:
        CGResult with the best iterate of every entry; ``residual`` is the
        worst of their residuals, ``history`` the worst current residual per step

    Raises:
        OperatorDefectError: If p^H A p < -1e-10 ||p||^2 (A not PSD)
    """
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.result_type(b, x0))
    r = b - apply(x) if x0 is not None else b.copy()
    b_norm = np.maximum(_norms(b), _TINY)
    p = r.copy()
    rr = np.real(batch_inner(r, r))

    relative = np.sqrt(rr) / b_norm
    best_x, best_relative = x.copy(), relative.copy()
    history = [float(np.max(relative))]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        active = np.sqrt(rr) / b_norm > tol
        if not np.any(active):
            iterations -= 1
            break

        Ap = apply(p)
        pAp = np.real(batch_inner(p, Ap))
        pp = np.real(batch_inner(p, p))
        if np.any(pAp < -NEGATIVE_CURVATURE * pp):
            raise OperatorDefectError(f"{name}: negative curvature {float(np.min(pAp)):.3e} at iteration {iterations}")

        step = active & (pAp > _TINY)
        alpha = np.where(step, rr / np.where(step, pAp, 1.0), 0.0)
        x = x + alpha * p
        r = r - alpha * Ap

        rr_new = np.real(batch_inner(r, r))
        beta = np.where(step, rr_new / np.where(rr > _TINY, rr, 1.0), 0.0)
        p = r + beta * p
        rr = rr_new

        relative = np.sqrt(rr) / b_norm
        improved = relative < best_relative
        best_x = np.where(improved, x, best_x)
        best_relative = np.where(improved, relative, best_relative)

        history.append(float(np.max(relative)))
        logger.debug(f"{name} iter {iterations}: relative residual {history[-1]:.3e}")
        if callback is not None:
            callback(iterations, x, history[-1])

    residual = float(np.max(best_relative))
    if not keep_best:
        best_x, residual = x, history[-1]
    converged = residual <= tol
    return CGResult(x=best_x, converged=converged, iterations=iterations, residual=residual, history=history)


def power_iteration(
    apply: LinearMap,
    shape: Tuple[int, ...],
    n_iter: int = 20,
    seed: int = 0,
) -> float:
    """Largest eigenvalue of a Hermitian PSD operator, by the Rayleigh quotient."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(n_iter):
        w = apply(v)
        estimate = float(np.real(np.vdot(v, w)))
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
    logger.debug(f"Power iteration ({n_iter} its): lambda_max ~ {estimate:.4e}")
    return estimate
