"""
Self-consistent diffusion: the projection T onto (approximately) H-consistent
fields, the structured perturbation kernel and the reverse-time sampler.

T(z) is the minimiser of ||(H - I) F z'||^2 + mu ||z' - z||^2, i.e. the solution
of (Psi + mu I) z' = mu z. Forward noising uses x_t = x_0 + sigma(t) T(z), and
the reverse sampler integrates

    dx = (eta/2 Psi(x) - beta T(score)) dt + sqrt(beta) T dw

from t = 1 down to t = eps with Euler-Maruyama steps (dt < 0).
"""
import abc
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from utils import (
    logger,
    InvalidArgumentError,
    DivergenceError,
    ProjectionConfig,
    SamplerConfig,
    ScheduleConfig,
)

from .linalg import conjugate_gradient
from .operators import CompositeH, SamplingOperator
from .simulation import SamplingPlan
from .tensor_core import Domain, Tensorish, as_array, fft2c, ifft2c

ScoreFn = Callable[[np.ndarray, float], np.ndarray]

# residual a direct solve must reach to count as converged when tol is tighter
DIRECT_TOL = 1e-8
# x - h A x grows without bound once h * lambda_max(A) > 2
EULER_LIMIT = 2.0


def complex_normal(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Standard complex Gaussian: real and imaginary parts each N(0, 1)."""
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


class NoiseSchedule(abc.ABC):
    """sigma(t), beta(t) = d sigma^2 / dt and the drift scale eta(t) on [0, 1]."""

    @abc.abstractmethod
    def sigma(self, t: float) -> float:
        pass

    @abc.abstractmethod
    def beta(self, t: float) -> float:
        pass

    @abc.abstractmethod
    def eta(self, t: float) -> float:
        pass

    def timesteps(self, n_steps: int, eps: float) -> np.ndarray:
        if n_steps < 1 or not 0 < eps < 1:
            raise InvalidArgumentError(f"Need n_steps >= 1 and eps in (0, 1), got {n_steps}, {eps}")
        return np.linspace(1.0, eps, n_steps + 1)


class VESchedule(NoiseSchedule):
    """
    Variance-exploding schedule with sigma(0) = 0:

        sigma(t)^2 = sigma_min^2 (r^(2t) - 1),  r = sigma_max / sigma_min
    """

    def __init__(self, sigma_min: float = 0.01, sigma_max: float = 10.0, kappa: float = 1.0):
        if not 0 < sigma_min < sigma_max:
            raise InvalidArgumentError(f"Need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
        if kappa < 0:
            raise InvalidArgumentError(f"kappa must be >= 0, got {kappa}")
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.kappa = kappa
        self.log_ratio = math.log(sigma_max / sigma_min)

    @classmethod
    def from_config(cls, cfg: ScheduleConfig) -> "VESchedule":
        return cls(cfg.sigma_min, cfg.sigma_max, cfg.kappa)

    def sigma(self, t: float) -> float:
        return self.sigma_min * math.sqrt(math.expm1(2.0 * t * self.log_ratio))

    def beta(self, t: float) -> float:
        return 2.0 * self.sigma_min**2 * self.log_ratio * math.exp(2.0 * t * self.log_ratio)

    def eta(self, t: float) -> float:
        return self.kappa * self.beta(t)

    def describe(self) -> Dict[str, float]:
        return {"sigma_min": self.sigma_min, "sigma_max": self.sigma_max, "kappa": self.kappa}


@dataclass
class ProjectionResult:
    z: np.ndarray
    converged: bool
    iterations: int
    residual: float


class SelfConsistencyProjection:
    """
    T(z): proximity-regularised projection toward the null space of (H - I) F.

    When every CAIPIRINHA shift is a whole number of ky bins, Psi + mu I is
    block diagonal in the rolled DFT basis of ``CompositeH.to_bins`` and T is
    applied exactly through precomputed per-frequency inverses. T is then
    linear and Hermitian, which the score-matching backward pass relies on.
    Other geometries fall back to warm-started CG, where T is only approximate.
    """

    def __init__(self, H: CompositeH, cfg: Optional[ProjectionConfig] = None):
        self.H = H
        self.cfg = cfg or ProjectionConfig()
        self.method = "cg"
        self._shifts = None
        self._blocks = None
        self._warned = False

        if self.cfg.solver != "cg":
            self._setup_direct()

    def _setup_direct(self) -> None:
        shifts = self.H.bin_shifts()
        n_sc = self.H.n_slice * self.H.n_coil
        entries = self.H.grid[0] * self.H.grid[1] * n_sc * n_sc
        if shifts is None:
            reason = f"CAIPIRINHA increment {self.H.caipi_increment:.6g} is not a whole-bin shift on {self.H.grid[0]} ky lines"
        elif entries > self.cfg.max_block_entries:
            reason = f"{entries} block entries exceed max_block_entries={self.cfg.max_block_entries}"
        else:
            self._shifts = shifts
            self._blocks = self._factor(shifts)
            self.method = "direct"
            logger.debug(f"T solved directly: {self.H.grid[0] * self.H.grid[1]} blocks of size {n_sc}, shifts {shifts.tolist()}")
            return

        if self.cfg.solver == "direct":
            raise InvalidArgumentError(f"Direct projection unavailable: {reason}")
        logger.info(f"T falls back to CG ({self.cfg.max_iter} iterations): {reason}")

    def _factor(self, shifts: np.ndarray) -> np.ndarray:
        """mu (R^H R + mu I)^-1 per frequency, R = M - I with M from ``frequency_blocks``."""
        blocks = self.H.frequency_blocks(shifts)
        eye = np.eye(blocks.shape[-1])
        residual = blocks - eye
        system = np.conj(np.swapaxes(residual, -1, -2)) @ residual + self.cfg.mu * eye
        inverse = np.linalg.inv(system)
        return 0.5 * self.cfg.mu * (inverse + np.conj(np.swapaxes(inverse, -1, -2)))

    def _system(self, z: np.ndarray) -> np.ndarray:
        return self.H.normal_psi(z) + self.cfg.mu * z

    def _apply_direct(self, data: np.ndarray) -> np.ndarray:
        bins = self.H.to_bins(fft2c(data), self._shifts)
        lead, (n_slice, n_coil, n_y, n_x) = bins.shape[:-4], bins.shape[-4:]
        vectors = np.moveaxis(bins.reshape(lead + (n_slice * n_coil, n_y, n_x)), -3, -1)
        solved = np.matmul(self._blocks, vectors[..., None])[..., 0]
        solved = np.moveaxis(solved, -1, -3).reshape(bins.shape)
        return ifft2c(self.H.from_bins(solved, self._shifts))

    def _relative_residual(self, solution: np.ndarray, data: np.ndarray) -> float:
        rhs = self.cfg.mu * data
        gap = self._system(solution) - rhs
        axes = tuple(range(-4, 0))
        scale = np.maximum(np.sqrt(np.sum(np.abs(rhs) ** 2, axis=axes)), 1e-300)
        return float(np.max(np.sqrt(np.sum(np.abs(gap) ** 2, axis=axes)) / scale))

    def project(self, z: Tensorish) -> ProjectionResult:
        data = as_array(z, Domain.IMAGE, "T input")
        if data.shape[-4:] != self.H.dims:
            raise InvalidArgumentError(f"T input {data.shape} does not match operator dims {self.H.dims}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("T input contains non-finite values")

        if self.method == "direct":
            solution = self._apply_direct(data)
            residual = self._relative_residual(solution, data)
            return ProjectionResult(solution, residual <= max(self.cfg.tol, DIRECT_TOL), 0, residual)

        result = conjugate_gradient(
            self._system, self.cfg.mu * data, x0=data, max_iter=self.cfg.max_iter, tol=self.cfg.tol, name="T"
        )
        if not result.converged:
            message = (
                f"T did not reach tol {self.cfg.tol:.1e} in {self.cfg.max_iter} CG iterations "
                f"(best residual {result.residual:.2e}); T is only approximately linear and Hermitian"
            )
            if self._warned:
                logger.debug(message)
            else:
                logger.warning(message + ", further misses are logged at debug level")
                self._warned = True
        return ProjectionResult(result.x, result.converged, result.iterations, result.residual)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.project(z).z


def project_T(z: Tensorish, H: CompositeH, cfg: Optional[ProjectionConfig] = None) -> ProjectionResult:
    return SelfConsistencyProjection(H, cfg).project(z)


def perturb(
    x0: np.ndarray,
    t: float,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    projector: Callable[[np.ndarray], np.ndarray],
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw x_t = x_0 + sigma(t) T(z) with z standard complex Gaussian.

    Returns:
        (x_t, z)
    """
    if not 0.0 < t <= 1.0:
        raise InvalidArgumentError(f"t must lie in (0, 1], got {t}")
    data = as_array(x0, Domain.IMAGE, "x0")
    z = complex_normal(rng, data.shape)
    return data + schedule.sigma(t) * projector(z), z


@dataclass
class SampleResult:
    x: np.ndarray
    trajectory: List[Dict[str, Any]] = field(default_factory=list)
    clipped_steps: int = 0


class ReverseSampler:
    """Euler-Maruyama integration of the projected reverse SDE with data guidance."""

    def __init__(
        self,
        y: Tensorish,
        plan: SamplingPlan,
        H: CompositeH,
        score_fn: ScoreFn,
        schedule: NoiseSchedule,
        sampler_cfg: Optional[SamplerConfig] = None,
        projection_cfg: Optional[ProjectionConfig] = None,
    ):
        self.y = as_array(y, Domain.KSPACE, "y")
        plan.check_grid(self.y.shape, "y")
        self.H = H
        self.D = SamplingOperator(plan, H.n_slice)
        self.score_fn = score_fn
        self.schedule = schedule
        self.cfg = sampler_cfg or SamplerConfig()
        self.T = SelfConsistencyProjection(H, projection_cfg)
        self.dims = H.dims

    def guidance(self, x: np.ndarray) -> np.ndarray:
        """F^-1 D* (y - D F x)."""
        return ifft2c(self.D.adjoint(self.y - self.D.apply(fft2c(x))))

    def data_consistency(self, x: np.ndarray) -> np.ndarray:
        """Exact projection onto {x : D F x = y} using D D* = n_slice * mask."""
        gram = self.D.gram_diagonal()
        residual = self.y - self.D.apply(fft2c(x))
        scaled = np.where(gram > 0, residual / np.where(gram > 0, gram, 1.0), 0.0)
        return x + ifft2c(self.D.adjoint(scaled))

    def _score(self, x: np.ndarray, t: float, guidance_scale: float) -> np.ndarray:
        score = np.asarray(self.score_fn(x, t))
        if score.shape != x.shape:
            raise InvalidArgumentError(f"Score field {score.shape} does not match the sample {x.shape}")
        if guidance_scale > 0:
            score = score + guidance_scale * self.guidance(x)
        return score

    def _record(self, step: int, t: float, x: np.ndarray, converged: bool, truth: Optional[np.ndarray]) -> Dict[str, Any]:
        x_norm = max(float(np.linalg.norm(x)), 1e-300)
        consistency = self.H.residual_norm(x)
        fidelity = float(np.linalg.norm(self.y - self.D.apply(fft2c(x))))
        entry = {
            "step": step,
            "t": float(t),
            "sigma": float(self.schedule.sigma(t)),
            "consistency_ratio": consistency / x_norm,
            "objective": consistency**2 + fidelity**2,
            "projection_converged": bool(converged),
        }
        if truth is not None:
            entry["nmse"] = float(np.linalg.norm(x - truth) ** 2 / max(np.linalg.norm(truth) ** 2, 1e-300))
        return entry

    def sample(
        self,
        rng: np.random.Generator,
        x_init: Optional[np.ndarray] = None,
        n_steps: int = 500,
        eps: float = 1e-3,
        truth: Optional[np.ndarray] = None,
    ) -> SampleResult:
        """
        Run the reverse SDE from t = 1 to t = eps.

        Args:
            rng: Source of every random draw of the chain
            x_init: Starting image (zero-filled adjoint when None)
            n_steps: Number of Euler-Maruyama steps
            eps: Final time
            truth: Optional ground truth, only used for NMSE in the trajectory

        Returns:
            SampleResult with the final image and the trajectory log

        Raises:
            DivergenceError: If an iterate becomes non-finite
        """
        cfg = self.cfg
        x0 = self.D.zero_filled(self.y) if x_init is None else np.array(as_array(x_init, Domain.IMAGE, "x_init"))
        if x0.shape[-4:] != self.dims:
            raise InvalidArgumentError(f"Initial image {x0.shape} does not match operator dims {self.dims}")
        truth = None if truth is None else as_array(truth, Domain.IMAGE, "truth")

        lipschitz = self.H.estimate_lipschitz() if cfg.clip_drift else 0.0
        guidance_cap = 1.0 / self.H.n_slice
        timesteps = self.schedule.timesteps(n_steps, eps)
        x = x0.astype(np.complex128) + self.schedule.sigma(1.0) * self.T(complex_normal(rng, x0.shape))

        trajectory, clipped, unconverged = [], 0, 0
        for step in range(n_steps):
            t, t_next = float(timesteps[step]), float(timesteps[step + 1])
            dt = t - t_next
            beta = self.schedule.beta(t)
            sigma2 = self.schedule.sigma(t) ** 2

            drift = 0.5 * dt * self.schedule.eta(t)
            guidance_step = beta * dt * cfg.dc_weight / sigma2 if cfg.dc_weight > 0 and sigma2 > 0 else 0.0
            if cfg.clip_drift:
                # only steps past the explicit-Euler stability limit are cut back
                if lipschitz > 0 and drift * lipschitz > EULER_LIMIT:
                    drift = 1.0 / lipschitz
                    clipped += 1
                if guidance_step > EULER_LIMIT * guidance_cap:
                    guidance_step = guidance_cap
                    clipped += 1
            guidance_scale = guidance_step / (beta * dt) if beta * dt > 0 else 0.0

            increment = beta * dt * self._score(x, t, guidance_scale) + math.sqrt(beta * dt) * complex_normal(rng, x.shape)
            if not np.all(np.isfinite(increment)):
                raise DivergenceError(f"Score update became non-finite at step {step} (t={t:.4f})")
            projected = self.T.project(increment)
            unconverged += 0 if projected.converged else 1
            x = x - drift * self.H.normal_psi(x) + projected.z

            for _ in range(cfg.n_corrector):
                grad = self.T(self._score(x, t_next, guidance_scale))
                noise = self.T(complex_normal(rng, x.shape))
                grad_norm = max(float(np.linalg.norm(grad)), 1e-300)
                step_size = 2.0 * (cfg.snr * float(np.linalg.norm(noise)) / grad_norm) ** 2
                x = x + step_size * grad + math.sqrt(2.0 * step_size) * noise

            if not np.all(np.isfinite(x)):
                raise DivergenceError(f"Reverse sampler produced non-finite values at step {step} (t={t:.4f})")

            if step % cfg.log_every == 0 or step == n_steps - 1:
                entry = self._record(step, t_next, x, projected.converged, truth)
                trajectory.append(entry)
                logger.debug(
                    f"sampler step {step}: t={t_next:.4f} consistency {entry['consistency_ratio']:.3e} "
                    f"objective {entry['objective']:.4e}"
                )

        if clipped:
            logger.warning(f"Step clipping engaged {clipped} times for stability")
        if unconverged:
            logger.warning(f"T stopped before its CG tolerance in {unconverged} of {n_steps} steps")
        if cfg.final_data_consistency:
            x = self.data_consistency(x)
            trajectory.append(self._record(n_steps, eps, x, True, truth))
        return SampleResult(x=x, trajectory=trajectory, clipped_steps=clipped)


def reverse_sample(
    y: Tensorish,
    plan: SamplingPlan,
    H: CompositeH,
    score_fn: ScoreFn,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    sampler_cfg: Optional[SamplerConfig] = None,
    projection_cfg: Optional[ProjectionConfig] = None,
    x_init: Optional[np.ndarray] = None,
    n_steps: int = 500,
    eps: float = 1e-3,
    truth: Optional[np.ndarray] = None,
) -> SampleResult:
    sampler = ReverseSampler(y, plan, H, score_fn, schedule, sampler_cfg, projection_cfg)
    return sampler.sample(rng, x_init=x_init, n_steps=n_steps, eps=eps, truth=truth)
