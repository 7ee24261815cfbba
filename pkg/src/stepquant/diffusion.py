"""Noise schedule, toy data, an MLP noise predictor and deterministic DDIM."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Node

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep tables; ``beta[t-1]`` and ``alpha_bar[t-1]`` belong to timestep t."""

    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def abar(self, t):
        """alpha_bar at integer timestep(s) t in [0, T]; t = 0 is the clean endpoint (1.0)."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]: {t}")
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar)


def default_schedule(T: int = 100) -> NoiseSchedule:
    """Linear DDPM schedule (1e-4 .. 0.02 at 1000 steps) rescaled to T steps."""
    k = 1000.0 / T
    return make_schedule(T, 1e-4 * k, 0.02 * k)


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with t a scalar or one timestep per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    ab = sched.abar(t)
    if np.ndim(ab) == 1 and x0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# -- toy data ----------------------------------------------------------------


@dataclass
class ToyDataset:
    name: str
    points: np.ndarray

    @property
    def n_samples(self) -> int:
        return len(self.points)


def make_toy_dataset(name: str, n: int, rng: np.random.Generator) -> ToyDataset:
    if n < 1:
        raise ValueError("n must be positive")
    if name == "gaussian-ring":
        modes = rng.integers(0, 8, size=n)
        angle = 2.0 * math.pi * modes / 8.0
        centers = np.stack([np.cos(angle), np.sin(angle)], axis=1)
        points = centers + 0.05 * rng.standard_normal((n, 2))
    elif name == "swiss-roll":
        theta = 1.5 * math.pi * (1.0 + 2.0 * rng.random(n))
        points = np.stack([theta * np.cos(theta), theta * np.sin(theta)], axis=1)
        points /= np.sqrt(np.mean(np.sum(points**2, axis=1)))
    else:
        raise ValueError(f"unknown dataset {name!r}")
    return ToyDataset(name=name, points=points)


# -- denoiser ----------------------------------------------------------------


@dataclass(frozen=True)
class Architecture:
    data_dim: int = 2
    emb_dim: int = 32
    hidden: tuple[int, ...] = (128, 128, 128)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.data_dim + self.emb_dim, *self.hidden, self.data_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def to_dict(self) -> dict:
        return {"data_dim": self.data_dim, "emb_dim": self.emb_dim, "hidden": list(self.hidden)}

    @classmethod
    def from_dict(cls, d: dict) -> Architecture:
        return cls(int(d["data_dim"]), int(d["emb_dim"]), tuple(int(h) for h in d["hidden"]))


def layer_name(i: int) -> str:
    return f"fc{i}"


@dataclass
class DenoiserParams:
    """Weights are stored as [in, out] so that a layer computes ``x @ W + b``."""

    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        for (fan_in, fan_out), w, b in zip(self.arch.layer_shapes, self.weights, self.biases):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValueError(f"parameter shapes {w.shape}/{b.shape} do not match "
                                 f"architecture ({fan_in}, {fan_out})")

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{layer_name(i)}.weight"] = w
            out[f"{layer_name(i)}.bias"] = b
        return out

    def copy(self) -> DenoiserParams:
        return DenoiserParams(self.arch, [w.copy() for w in self.weights],
                              [b.copy() for b in self.biases])

    def zeros_like(self) -> DenoiserParams:
        return DenoiserParams(self.arch, [np.zeros_like(w) for w in self.weights],
                              [np.zeros_like(b) for b in self.biases])


def init_params(arch: Architecture, rng: np.random.Generator) -> DenoiserParams:
    weights, biases = [], []
    for fan_in, fan_out in arch.layer_shapes:
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return DenoiserParams(arch, weights, biases)


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding, one row per timestep: [sin(t f_k), cos(t f_k)]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _timesteps(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    return np.full(n, int(t)) if t.ndim == 0 else t


def denoise(params: DenoiserParams, x_t, t, quant=None, leaves=None) -> Node:
    """Predicted noise for a batch ``x_t`` [n, D] at timestep(s) ``t``.

    ``quant`` is an optional quantization context (see
    :class:`stepquant.quantizer.QuantContext`): it fake-quantizes every weight
    and the input activation of every hidden->hidden/output layer.  ``leaves``
    optionally supplies (weights, biases) as graph nodes so gradients can
    reach the parameters.
    """
    arch = params.arch
    x = x_t if isinstance(x_t, Node) else Node.const(np.asarray(x_t, dtype=np.float64))
    if x.value.ndim != 2 or x.shape[1] != arch.data_dim:
        raise ValueError(f"x_t must have shape [n, {arch.data_dim}], got {x.shape}")
    n = x.shape[0]
    ts = _timesteps(t, n)
    if leaves is None:
        ws = [Node.const(w) for w in params.weights]
        bs = [Node.const(b) for b in params.biases]
    else:
        ws, bs = leaves
    h = nx.concat([x, Node.const(time_embedding(ts, arch.emb_dim))], axis=1)
    last = arch.n_layers - 1
    for i in range(arch.n_layers):
        name = layer_name(i)
        w = ws[i]
        if quant is not None:
            w = quant.weight(name, w)
            if i > 0:
                h = quant.activation(name, h, ts)
        h = h @ w + nx.broadcast_to(nx.reshape(bs[i], (1, -1)), (n, w.shape[1]))
        if i < last:
            h = nx.silu(h)
    return h


def denoise_value(params: DenoiserParams, x_t, t, quant=None) -> np.ndarray:
    return denoise(params, x_t, t, quant).value


def hidden_inputs(params: DenoiserParams, x_t, t, quant=None) -> dict[str, np.ndarray]:
    """Input activations of every quantized activation site (layers 1..L-1)."""
    sites = {}

    class _Recorder:
        def weight(self, name, w):
            return quant.weight(name, w) if quant is not None else w

        def activation(self, name, a, ts):
            sites[name] = a.value
            return quant.activation(name, a, ts) if quant is not None else a

    denoise(params, x_t, t, _Recorder())
    return sites


# -- training ----------------------------------------------------------------


@dataclass
class PretrainConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    arch: Architecture = field(default_factory=Architecture)


def pretrain(config: PretrainConfig, dataset: ToyDataset, sched: NoiseSchedule,
             rng: np.random.Generator, init: DenoiserParams | None = None
             ) -> tuple[DenoiserParams, list[float]]:
    """Fit the noise predictor with the simplified noise-matching loss.

    Returns the trained parameters and the mean training loss of each epoch.
    """
    if dataset.n_samples == 0:
        raise ValueError("dataset is empty")
    init_rng, data_rng = rng.spawn(2)
    params = init.copy() if init is not None else init_params(config.arch, init_rng)
    if config.epochs == 0:
        return params, []
    w_leaves = [Node.param(w) for w in params.weights]
    b_leaves = [Node.param(b) for b in params.biases]
    opt = nx.Adam(w_leaves + b_leaves, lr=config.lr)
    points = dataset.points
    history = []
    for epoch in range(config.epochs):
        order = data_rng.permutation(len(points))
        total, count = 0.0, 0
        for start in range(0, len(points), config.batch_size):
            x0 = points[order[start:start + config.batch_size]]
            n = len(x0)
            t = data_rng.integers(1, sched.T + 1, size=n)
            eps = data_rng.standard_normal(x0.shape)
            x_t = forward_noise(x0, t, eps, sched)
            try:
                pred = denoise(params, x_t, t, leaves=(w_leaves, b_leaves))
                diff = pred - Node.const(eps)
                loss = nx.reduce_mean(diff * diff)
                value = float(loss.value[0])
                if not math.isfinite(value):
                    raise nx.NonFiniteError(f"loss is {value}")
                grads = nx.backward(loss)
            except nx.NonFiniteError as exc:
                raise DivergenceError(f"pretraining diverged at epoch {epoch}, batch starting "
                                      f"{start}: {exc}") from exc
            opt.step(grads)
            total += value * n
            count += n
        history.append(total / count)
        log.debug("pretrain epoch %d loss %.5f", epoch, history[-1])
    params = DenoiserParams(config.arch, [w.value.copy() for w in w_leaves],
                            [b.value.copy() for b in b_leaves])
    return params, history


# -- sampling ----------------------------------------------------------------


def ddim_step(x_t: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    ab_t = sched.abar(t)
    ab_prev = sched.abar(t - 1)
    x0_hat = (x_t - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps


def ddim_run(params: DenoiserParams, sched: NoiseSchedule, x_T: np.ndarray, stop: int = 0,
             quant=None, record=None) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Run deterministic DDIM from x_T down to timestep ``stop``.

    ``record`` is a set of timesteps; the latent *entering* step t is kept
    for each requested t.
    """
    record = set(record or ())
    kept = {}
    x = np.array(x_T, dtype=np.float64)
    for t in range(sched.T, stop, -1):
        if t in record:
            kept[t] = x.copy()
        eps = denoise_value(params, x, t, quant)
        x = ddim_step(x, eps, t, sched)
    if stop in record:
        kept[stop] = x.copy()
    return x, kept


def ddim_sample(params: DenoiserParams, sched: NoiseSchedule, n: int, rng: np.random.Generator,
                quant=None, record=None) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    if n < 1:
        raise ValueError("n must be positive")
    x_T = rng.standard_normal((n, params.arch.data_dim))
    return ddim_run(params, sched, x_T, 0, quant, record)
