"""Uniform fake quantization, l_p range calibration and static weight quantization.

A quantizer is a scale plus signed integer bounds fixed by the bitwidth:
``x_hat = s * clip(round(x / s), -2^(b-1), 2^(b-1) - 1)``.  A bitwidth of
``math.inf`` is the full-precision sentinel: the quantizer is the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .diffusion import DenoiserParams, layer_name
from .numerics import Node

FULL_PRECISION = math.inf
N_GRID = 200


class QuantConfigError(KeyError):
    pass


def round_half_away(x: np.ndarray) -> np.ndarray:
    a = np.abs(x)
    f = np.floor(a)
    return np.copysign(f + (a - f >= 0.5), x)


def int_bounds(bits) -> tuple[float, float]:
    if bits == FULL_PRECISION:
        return -math.inf, math.inf
    return -(2.0 ** (bits - 1)), 2.0 ** (bits - 1) - 1.0


@dataclass(frozen=True)
class QuantParams:
    scale: float
    bits: float = 8

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.bits != FULL_PRECISION and (self.bits < 2 or int(self.bits) != self.bits):
            raise ValueError(f"bitwidth must be an integer >= 2, got {self.bits}")

    @property
    def z_min(self) -> float:
        return int_bounds(self.bits)[0]

    @property
    def z_max(self) -> float:
        return int_bounds(self.bits)[1]

    @property
    def is_identity(self) -> bool:
        return self.bits == FULL_PRECISION

    def to_dict(self) -> dict:
        return {"scale": self.scale, "bits": None if self.is_identity else int(self.bits)}

    @classmethod
    def from_dict(cls, d: dict) -> QuantParams:
        bits = FULL_PRECISION if d["bits"] is None else int(d["bits"])
        return cls(float(d["scale"]), bits)


def quantize_with(x: np.ndarray, scale, bits) -> np.ndarray:
    """Fake-quantize with a scalar scale or a scale array broadcastable to ``x``."""
    if bits == FULL_PRECISION:
        return np.array(x, dtype=np.float64)
    lo, hi = int_bounds(bits)
    return scale * np.clip(round_half_away(x / scale), lo, hi)


def quantize(x, q: QuantParams) -> np.ndarray:
    return quantize_with(np.asarray(x, dtype=np.float64), q.scale, q.bits)


def quantize_node(x: Node, scale: Node, bits) -> Node:
    """Differentiable fake quantization with the learned-step-size gradient.

    d x_hat / d x is 1 where ``x / s`` lies in [z_min, z_max] and 0 elsewhere.
    d x_hat / d s is ``round(x/s) - x/s`` inside the range and the violated
    bound outside it, and the summed scale gradient is multiplied by
    ``1 / sqrt(n * z_max)``.
    """
    s = float(scale.value.reshape(-1)[0])
    if not s > 0:
        raise ValueError(f"quantizer scale must be positive, got {s}")
    if bits == FULL_PRECISION:
        return nx.custom_grad_node(x.value, (x, scale), lambda g: (g, None), "quantize")
    lo, hi = int_bounds(bits)
    v = x.value / s
    r = round_half_away(v)
    below, above = v < lo, v > hi
    inside = ~(below | above)
    out = s * np.clip(r, lo, hi)
    d_scale = np.where(inside, r - v, np.where(below, lo, hi))
    grad_scale = 1.0 / math.sqrt(v.size * hi)

    def rule(g):
        return g * inside, np.full(scale.shape, np.sum(g * d_scale) * grad_scale)

    return nx.custom_grad_node(out, (x, scale), rule, "quantize")


def ste_round(x: Node) -> Node:
    """round() forward, identity backward."""
    return nx.custom_grad_node(round_half_away(x.value), (x,), lambda g: (g,), "ste_round")


def candidate_scales(max_abs: float, bits, n_grid: int = N_GRID) -> np.ndarray:
    _, hi = int_bounds(bits)
    return np.arange(1, n_grid + 1) / n_grid * max_abs / hi


def lp_errors(x: np.ndarray, scales: np.ndarray, bits, p: float) -> np.ndarray:
    errs = np.empty(len(scales))
    for k, s in enumerate(scales):
        errs[k] = np.sum(np.abs(x - quantize_with(x, s, bits)) ** p)
    return errs


def calibrate_scale(samples, bits, p: float = 2.4, n_grid: int = N_GRID) -> QuantParams:
    """Grid search for the scale minimising the summed l_p quantization error.

    Candidates are ``(k / n_grid) * max|x| / z_max`` for k = 1..n_grid; ties go
    to the smaller scale.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("calibrate_scale: no samples")
    max_abs = float(np.max(np.abs(x)))
    if max_abs == 0.0:
        raise ValueError("calibrate_scale: all samples are zero, range is undefined")
    if bits == FULL_PRECISION:
        return QuantParams(1.0, FULL_PRECISION)
    scales = candidate_scales(max_abs, bits, n_grid)
    errs = lp_errors(x, scales, bits, p)
    return QuantParams(float(scales[int(np.argmin(errs))]), bits)


@dataclass
class LayerQuantTable:
    layer: str
    groups: list[QuantParams]
    weight: QuantParams

    def __post_init__(self):
        if not self.groups:
            raise ValueError(f"{self.layer}: need at least one activation group")

    def to_dict(self) -> dict:
        return {"layer": self.layer, "groups": [q.to_dict() for q in self.groups],
                "weight": self.weight.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> LayerQuantTable:
        return cls(d["layer"], [QuantParams.from_dict(q) for q in d["groups"]],
                   QuantParams.from_dict(d["weight"]))


def quantize_weights(params: DenoiserParams, bits, p: float = 2.4
                     ) -> tuple[DenoiserParams, dict[str, QuantParams]]:
    """Fake-quantize every layer's weight matrix with its own l_p-calibrated scale.

    Biases stay in full precision.
    """
    out = params.copy()
    table = {}
    for i, w in enumerate(params.weights):
        q = calibrate_scale(w, bits, p)
        table[layer_name(i)] = q
        out.weights[i] = quantize(w, q)
    return out, table


def activation_sites(params: DenoiserParams) -> list[str]:
    return [layer_name(i) for i in range(1, params.arch.n_layers)]


class QuantContext:
    """Hard-assigned quantization used for sampling and evaluation.

    ``assignment[t - 1]`` is the (0-based) group used at timestep t.  Each
    row of a batch is quantized with the scale of its own timestep's group.
    """

    def __init__(self, tables: dict[str, LayerQuantTable], assignment: np.ndarray,
                 quantize_weights: bool = True):
        self.tables = tables
        self.assignment = np.asarray(assignment, dtype=np.int64)
        self.quantize_weights = quantize_weights

    def _table(self, name: str) -> LayerQuantTable:
        try:
            return self.tables[name]
        except KeyError:
            raise QuantConfigError(f"no quantizer configured for layer {name!r}") from None

    def weight(self, name: str, w: Node) -> Node:
        if not self.quantize_weights:
            return w
        q = self._table(name).weight
        return nx.custom_grad_node(quantize(w.value, q), (w,), lambda g: (g,), "quantize_w")

    def activation(self, name: str, a: Node, ts: np.ndarray) -> Node:
        table = self._table(name)
        groups = self.assignment[np.asarray(ts) - 1]
        bits = {q.bits for q in table.groups}
        if len(bits) != 1:
            raise ValueError(f"{name}: mixed bitwidths across groups")
        scale = np.array([table.groups[g].scale for g in groups])[:, None]
        out = quantize_with(a.value, scale, bits.pop())
        return nx.custom_grad_node(out, (a,), lambda g: (g,), "quantize_a")


def identity_tables(params: DenoiserParams, n_groups: int = 1) -> dict[str, LayerQuantTable]:
    fp = QuantParams(1.0, FULL_PRECISION)
    return {layer_name(i): LayerQuantTable(layer_name(i), [fp] * n_groups, fp)
            for i in range(params.arch.n_layers)}
