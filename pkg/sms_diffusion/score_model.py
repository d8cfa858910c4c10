"""
Score network s_theta(x, t) and projected denoising score matching.

Complex (slice, coil) planes are fed to the network as 2*S*C real channels.
The score is the network output divided by sigma(t), and the per-sample loss is

    || sigma(t) * T(s_theta(x_t, t)) + z ||^2,   x_t = x_0 + sigma(t) * T(z)

summed over entries and averaged over the batch.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import nn
from torch.optim import Adam

from utils import logger, InvalidArgumentError, ArtifactError, TrainingError, PhantomSpec, ScoreNetConfig, TrainConfig

from .diffusion import NoiseSchedule, complex_normal
from .file_utils import PathLike, atomic_write_json, read_json
from .simulation import apply_coils, make_coils, make_phantom
from .tensor_core import ComplexTensor4, Domain, read_tensor, write_tensor

Projector = Callable[[np.ndarray], np.ndarray]

_TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def to_channels(x: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(B, S, C, Y, X) complex -> (B, 2*S*C, Y, X) real."""
    b, s, c, n_y, n_x = x.shape
    flat = x.reshape(b, s * c, n_y, n_x)
    return torch.from_numpy(np.concatenate([flat.real, flat.imag], axis=1)).to(dtype)


def from_channels(u: torch.Tensor, dims: Tuple[int, int, int, int]) -> np.ndarray:
    """(B, 2*S*C, Y, X) real -> (B, S, C, Y, X) complex128."""
    s, c, n_y, n_x = dims
    data = u.detach().cpu().numpy().astype(np.float64)
    half = s * c
    return (data[:, :half] + 1j * data[:, half:]).reshape(data.shape[0], s, c, n_y, n_x)


class _ProjectT(torch.autograd.Function):
    """T applied to channel tensors; T is Hermitian, so the backward pass is T again."""

    @staticmethod
    def forward(ctx, u: torch.Tensor, projector: Projector, dims: Tuple[int, int, int, int]) -> torch.Tensor:
        ctx.projector = projector
        ctx.dims = dims
        return to_channels(projector(from_channels(u, dims)), u.dtype)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        grad = to_channels(ctx.projector(from_channels(grad_output, ctx.dims)), grad_output.dtype)
        return grad, None, None


def project_channels(u: torch.Tensor, projector: Projector, dims: Tuple[int, int, int, int]) -> torch.Tensor:
    return _ProjectT.apply(u, projector, dims)


def time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of t in (0, 1], shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half, dtype=t.dtype))
    angles = 2.0 * math.pi * t[:, None] * freqs[None, :]
    embedding = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    if dim % 2:
        embedding = torch.cat([embedding, torch.zeros_like(t)[:, None]], dim=1)
    return embedding


class ScoreNet(nn.Module):
    """Plain circular-padded CNN with a per-layer time bias and a zero-initialised output."""

    def __init__(self, n_slice: int, n_coil: int, cfg: Optional[ScoreNetConfig] = None, seed: Optional[int] = None):
        super().__init__()
        cfg = cfg or ScoreNetConfig()
        self.cfg = cfg
        self.n_slice = n_slice
        self.n_coil = n_coil
        channels = 2 * n_slice * n_coil

        widths = [channels] + [cfg.width] * cfg.n_hidden
        # a seeded build draws its initial weights from a private RNG state
        with torch.random.fork_rng(enabled=seed is not None):
            if seed is not None:
                torch.manual_seed(seed)
            self.convs = nn.ModuleList(
                nn.Conv2d(widths[i], widths[i + 1], 3, padding=1, padding_mode="circular") for i in range(cfg.n_hidden)
            )
            self.time_biases = nn.ModuleList(nn.Linear(cfg.embed_dim, cfg.width) for _ in range(cfg.n_hidden))
            self.out = nn.Conv2d(cfg.width, channels, 3, padding=1, padding_mode="circular")
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.act = nn.SiLU()
        self.to(_TORCH_DTYPES[cfg.dtype])

    @property
    def dtype(self) -> torch.dtype:
        return _TORCH_DTYPES[self.cfg.dtype]

    def forward(self, u: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if u.shape[1] != 2 * self.n_slice * self.n_coil:
            raise InvalidArgumentError(
                f"Input has {u.shape[1]} channels, network expects {2 * self.n_slice * self.n_coil}"
            )
        embedding = time_embedding(t.to(u.dtype), self.cfg.embed_dim)
        h = u
        for conv, bias in zip(self.convs, self.time_biases):
            h = self.act(conv(h) + bias(embedding)[:, :, None, None])
        return self.out(h)

    def architecture(self) -> Dict[str, Any]:
        return {"n_slice": self.n_slice, "n_coil": self.n_coil, **self.cfg.model_dump(mode="json")}


def _batched(x: np.ndarray) -> Tuple[np.ndarray, Tuple[int, ...]]:
    lead = x.shape[:-4]
    return x.reshape((-1,) + x.shape[-4:]), lead


def score_tensor(net: ScoreNet, u: torch.Tensor, t: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """s_theta in channel form: net(u, t) / sigma(t)."""
    return net(u, t) / sigma[:, None, None, None]


def score_forward(net: ScoreNet, x: np.ndarray, t: float, schedule: NoiseSchedule) -> np.ndarray:
    """
    Evaluate s_theta(x, t) on complex images (..., S, C, Y, X).

    Args:
        net: Score network
        x: Complex image tensor, leading axes are a batch
        t: Diffusion time in (0, 1]
        schedule: Supplies sigma(t) for the output scaling

    Returns:
        Complex score field with the dims of x
    """
    if x.shape[-4:-2] != (net.n_slice, net.n_coil):
        raise InvalidArgumentError(f"Input dims {x.shape[-4:]} do not fit a {net.n_slice}x{net.n_coil} network")
    flat, lead = _batched(np.asarray(x))
    batch = flat.shape[0]
    with torch.no_grad():
        u = to_channels(flat, net.dtype)
        t_vec = torch.full((batch,), float(t), dtype=net.dtype)
        sigma = torch.full((batch,), float(schedule.sigma(t)), dtype=net.dtype)
        out = score_tensor(net, u, t_vec, sigma)
    return from_channels(out, flat.shape[1:]).reshape(lead + flat.shape[1:])


def make_score_fn(net: ScoreNet, schedule: NoiseSchedule) -> Callable[[np.ndarray, float], np.ndarray]:
    net.eval()
    return lambda x, t: score_forward(net, x, t, schedule)


def denoising_score_loss(
    score: torch.Tensor,
    z: torch.Tensor,
    sigma: torch.Tensor,
    projector: Projector,
    dims: Tuple[int, int, int, int],
) -> torch.Tensor:
    """Per-sample ||sigma * T(score) + z||^2 in channel form, shape (B,)."""
    residual = sigma[:, None, None, None] * project_channels(score, projector, dims) + z
    return residual.pow(2).sum(dim=(1, 2, 3))


@dataclass
class DSMOutput:
    loss: torch.Tensor
    per_sample: torch.Tensor
    t: np.ndarray
    z: np.ndarray
    x_t: np.ndarray


def dsm_loss(
    net: ScoreNet,
    x0: np.ndarray,
    schedule: NoiseSchedule,
    projector: Projector,
    rng: np.random.Generator,
    eps: float = 1e-3,
) -> DSMOutput:
    """
    Projected denoising score matching on a batch of clean images (B, S, C, Y, X).

    Draws t ~ U(eps, 1] and z per sample, forms x_t = x0 + sigma(t) T(z) and
    returns the batch-mean loss, differentiable in the network parameters.

    Raises:
        TrainingError: If any per-sample loss is non-finite
    """
    x0 = np.asarray(x0)
    if x0.ndim != 5:
        raise InvalidArgumentError(f"Training batch must be (B, S, C, Y, X), got {x0.shape}")
    batch, dims = x0.shape[0], x0.shape[1:]

    t = rng.uniform(eps, 1.0, size=batch)
    z = complex_normal(rng, x0.shape)
    sigmas = np.array([schedule.sigma(float(ti)) for ti in t])
    x_t = x0 + sigmas[:, None, None, None, None] * projector(z)

    dtype = net.dtype
    sigma_t = torch.as_tensor(sigmas, dtype=dtype)
    score = score_tensor(net, to_channels(x_t, dtype), torch.as_tensor(t, dtype=dtype), sigma_t)
    per_sample = denoising_score_loss(score, to_channels(z, dtype), sigma_t, projector, dims)

    bad = torch.nonzero(~torch.isfinite(per_sample)).flatten().tolist()
    if bad:
        raise TrainingError(f"Non-finite DSM loss for batch samples {bad} (t={[float(t[i]) for i in bad]})")
    return DSMOutput(loss=per_sample.mean(), per_sample=per_sample, t=t, z=z, x_t=x_t)


def build_dataset(spec: PhantomSpec, n_phantoms: int, seed_offset: int = 1000) -> np.ndarray:
    """Multi-coil training images (n, S, C, Y, X) sharing the coil geometry of ``spec``."""
    if n_phantoms < 1:
        raise InvalidArgumentError("Training dataset must not be empty")
    maps = make_coils(spec.n_coil, spec.grid, spec.n_slice, seed=spec.seed)
    images = []
    for i in range(n_phantoms):
        phantom = make_phantom(spec.model_copy(update={"seed": spec.seed + seed_offset + i}))
        images.append(apply_coils(phantom, maps).data)
    return np.stack(images)


@dataclass
class TrainResult:
    net: ScoreNet
    losses: List[float] = field(default_factory=list)
    steps: int = 0


def train(
    net: ScoreNet,
    dataset: np.ndarray,
    schedule: NoiseSchedule,
    projector: Projector,
    cfg: Optional[TrainConfig] = None,
    checkpoint_path: Optional[PathLike] = None,
    eps: float = 1e-3,
    metadata: Optional[Dict[str, Any]] = None,
) -> TrainResult:
    """
    Fit the score network with Adam on the projected DSM loss.

    Args:
        net: Network to train in place
        dataset: Clean multi-coil images (n, S, C, Y, X)
        schedule: Noise schedule shared with the sampler
        projector: T, applied to batches of complex images
        cfg: Training settings; the seed drives every draw
        checkpoint_path: Where periodic and failure checkpoints go
        eps: Lower end of the t distribution
        metadata: Extra fields stored with checkpoints

    Returns:
        TrainResult with the per-step loss curve

    Raises:
        TrainingError: On a non-finite loss, after writing a checkpoint
    """
    cfg = cfg or TrainConfig()
    dataset = np.asarray(dataset)
    if dataset.ndim != 5 or dataset.shape[0] == 0:
        raise InvalidArgumentError(f"Dataset must be a non-empty (n, S, C, Y, X) array, got {dataset.shape}")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(net.parameters(), lr=cfg.learning_rate)
    losses: List[float] = []
    net.train()

    def checkpoint(step: int):
        if checkpoint_path is not None:
            save_checkpoint(net, checkpoint_path, {**(metadata or {}), "seed": cfg.seed, "step": step})

    for step in range(1, cfg.steps + 1):
        batch = dataset[rng.integers(0, dataset.shape[0], size=cfg.batch_size)]
        try:
            output = dsm_loss(net, batch, schedule, projector, rng, eps)
        except TrainingError:
            checkpoint(step)
            raise

        optimizer.zero_grad()
        output.loss.backward()
        optimizer.step()
        losses.append(float(output.loss.detach()))

        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            checkpoint(step)
        if step == 1 or step % 50 == 0 or step == cfg.steps:
            logger.info(f"train step {step}/{cfg.steps}: loss {losses[-1]:.4f}")

    net.eval()
    return TrainResult(net=net, losses=losses, steps=cfg.steps)


def smoothed(values: List[float], window: int = 20) -> np.ndarray:
    """Trailing moving average used to compare loss levels."""
    values = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, values.size))
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def _sidecar(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(net: ScoreNet, path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Parameters as real parts of a (1, 1, 1, n) CT4F payload, layout and architecture in a JSON sidecar."""
    state = net.state_dict()
    layout = [[name, list(tensor.shape)] for name, tensor in state.items()]
    flat = np.concatenate([tensor.detach().cpu().numpy().astype(np.float64).ravel() for tensor in state.values()])
    write_tensor(ComplexTensor4(flat.astype(np.complex128).reshape(1, 1, 1, -1), Domain.IMAGE), path)
    atomic_write_json(_sidecar(path), {"architecture": net.architecture(), "layout": layout, **(metadata or {})})
    logger.debug(f"Checkpoint written to {path} ({flat.size} parameters)")
    return Path(path)


def load_checkpoint(path: PathLike) -> Tuple[ScoreNet, Dict[str, Any]]:
    meta = read_json(_sidecar(path))
    try:
        arch = dict(meta["architecture"])
        net = ScoreNet(arch.pop("n_slice"), arch.pop("n_coil"), ScoreNetConfig(**arch))
        flat = read_tensor(path).data.real.ravel()
        state, offset = {}, 0
        for name, shape in meta["layout"]:
            count = int(np.prod(shape, dtype=np.int64))
            state[name] = torch.from_numpy(flat[offset : offset + count].reshape(shape).copy()).to(net.dtype)
            offset += count
        if offset != flat.size:
            raise ValueError(f"payload holds {flat.size} values, layout needs {offset}")
        net.load_state_dict(state)
    except (KeyError, TypeError, ValueError, RuntimeError) as e:
        raise ArtifactError(f"Malformed checkpoint {path}: {e}")
    net.eval()
    return net, meta
