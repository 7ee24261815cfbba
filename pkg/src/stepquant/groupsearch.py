"""Differentiable assignment of timesteps to activation-quantizer groups.

Every quantized activation is replaced during search by a convex mixture of
G fake-quantizers, weighted by ``softmax(logits[t])`` for the sample's
timestep t.  The logits are shared by all layers; each layer owns G scales.
Training minimises distillation error against the full-precision teacher
plus ``lam`` times the mean entropy of the mixture weights, which pushes each
timestep towards a single group.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .diffusion import DenoiserParams, denoise, hidden_inputs
from .numerics import Node
from .quantizer import (FULL_PRECISION, LayerQuantTable, QuantParams, activation_sites,
                        calibrate_scale, quantize, quantize_node)

MIN_SCALE = 1e-8


class SearchDivergence(FloatingPointError):
    pass


@dataclass
class GroupAssignment:
    """``groups[t - 1]`` is the 0-based group index used at timestep t."""

    groups: np.ndarray

    def group_of(self, t: int) -> int:
        return int(self.groups[t - 1])

    def to_list(self) -> list[int]:
        return [int(g) for g in self.groups]


def banded_logits(T: int, G: int, strength: float) -> np.ndarray:
    """Prior logits ``-strength * (c(t) - g)^2`` with c(t) the fractional band of t.

    Adjacent timesteps start out sharing a group, and timesteps on the
    border between two bands start with the highest entropy.  Zero strength
    (or G = 1) gives uniform weights.
    """
    if G == 1 or not strength:
        return np.zeros((T, G))
    centre = (np.arange(1, T + 1) - 0.5) * G / T - 0.5
    return -strength * (centre[:, None] - np.arange(G)[None, :]) ** 2


class GroupSearchState:
    def __init__(self, T: int, n_groups: int, init_scales: dict[str, float], act_bits,
                 lam: float, logits: np.ndarray | None = None):
        if n_groups < 1:
            raise ValueError("need at least one group")
        self.T = T
        self.n_groups = n_groups
        self.act_bits = act_bits
        self.lam = lam
        if logits is None:
            logits = np.zeros((T, n_groups))
        if logits.shape != (T, n_groups):
            raise ValueError(f"logits must be [{T}, {n_groups}], got {logits.shape}")
        self.logits = Node.param(logits, name="logits")
        self.init_scales = dict(init_scales)
        self.scales = {site: [Node.param([s], name=f"{site}.s{g}") for g in range(n_groups)]
                       for site, s in init_scales.items()}

    @property
    def sites(self) -> list[str]:
        return list(self.scales)

    def parameters(self) -> list[Node]:
        return [self.logits] + [s for site in self.sites for s in self.scales[site]]

    def sigma(self) -> np.ndarray:
        z = self.logits.value - self.logits.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def entropy(self) -> np.ndarray:
        """Per-timestep entropy of the mixture weights, with 0 log 0 = 0."""
        sig = self.sigma()
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(sig > 0, -sig * np.log(sig), 0.0)
        return terms.sum(axis=1)

    def project(self) -> None:
        for site in self.sites:
            for s in self.scales[site]:
                s.value = np.maximum(s.value, MIN_SCALE)

    def scale_values(self, site: str) -> list[float]:
        return [float(s.value[0]) for s in self.scales[site]]

    def tables(self, weight_q: dict[str, QuantParams]) -> dict[str, LayerQuantTable]:
        out = {}
        for name, wq in weight_q.items():
            if name in self.scales:
                groups = [QuantParams(s, self.act_bits) for s in self.scale_values(name)]
            else:
                groups = [QuantParams(1.0, FULL_PRECISION)] * self.n_groups
            out[name] = LayerQuantTable(name, groups, wq)
        return out


def init_search_state(qparams: DenoiserParams, x: np.ndarray, t: np.ndarray, T: int,
                      n_groups: int, act_bits, lam: float, p: float = 2.4,
                      logits: np.ndarray | None = None) -> GroupSearchState:
    """Seed every group of every site with the l_p-calibrated scale of the pooled activations."""
    acts = hidden_inputs(qparams, x, t)
    scales = {site: calibrate_scale(acts[site], act_bits, p).scale
              for site in activation_sites(qparams)}
    return GroupSearchState(T, n_groups, scales, act_bits, lam, logits)


def sigma_rows(state: GroupSearchState, t) -> Node:
    """Mixture weights for each sample's timestep, [n, G]."""
    idx = np.asarray(t, dtype=np.int64) - 1
    return nx.softmax(nx.take(state.logits, idx, axis=0), axis=1)


def mixture_quantize(x: Node, t, state: GroupSearchState, layer: str,
                     weights: Node | None = None) -> Node:
    """sum_g sigma_g^t * quantize(x, s_g), row by row."""
    if layer not in state.scales:
        raise KeyError(f"no group scales for layer {layer!r}")
    if weights is None:
        weights = sigma_rows(state, np.broadcast_to(np.asarray(t), (x.shape[0],)))
    out = None
    for g, scale in enumerate(state.scales[layer]):
        branch = quantize_node(x, scale, state.act_bits)
        w = nx.broadcast_to(nx.take(weights, [g], axis=1), x.shape)
        term = w * branch
        out = term if out is None else out + term
    return out


def entropy_term(state: GroupSearchState, t) -> Node:
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if t.size == 0:
        raise ValueError("entropy_term: empty timestep batch")
    logp = nx.log_softmax(nx.take(state.logits, t - 1, axis=0), axis=1)
    per_row = -nx.reduce_sum(nx.exp(logp) * logp, axis=1)
    return nx.reduce_mean(per_row)


class MixtureContext:
    """Quantization context used while searching: static weights, mixed activations."""

    def __init__(self, state: GroupSearchState, weight_q: dict[str, QuantParams] | None):
        self.state = state
        self.weight_q = weight_q or {}
        self._weights = None

    def weight(self, name: str, w: Node) -> Node:
        q = self.weight_q.get(name)
        if q is None:
            return w
        return nx.custom_grad_node(quantize(w.value, q), (w,), lambda g: (g,), "quantize_w")

    def activation(self, name: str, a: Node, ts: np.ndarray) -> Node:
        if self._weights is None:
            self._weights = sigma_rows(self.state, ts)
        return mixture_quantize(a, ts, self.state, name, self._weights)


def search_objective(teacher_eps: np.ndarray, qparams: DenoiserParams, x: np.ndarray, t,
                     state: GroupSearchState, weight_q: dict[str, QuantParams] | None = None
                     ) -> tuple[Node, float, float]:
    """J = mean_i ||eps_fp(x_i) - eps_q(x_i)||^2 + lam * J_e.

    ``teacher_eps`` is the frozen full-precision prediction for the batch.
    Returns the scalar graph node and the values of the two terms.
    """
    n = len(x)
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
    student = denoise(qparams, x, t, MixtureContext(state, weight_q))
    diff = student - Node.const(teacher_eps)
    distill = nx.reduce_sum(diff * diff) / float(n)
    ent = entropy_term(state, t)
    total = distill + state.lam * ent if state.lam else distill
    return total, float(distill.value[0]), float(ent.value[0])


@dataclass
class SearchOptimizer:
    """Adam over logits and scales.

    Scales step relative to their initial magnitude (``lr * s_init``) so one
    learning rate serves every layer and bitwidth; logits step with
    ``lr * logit_lr_mult``.
    """

    state: GroupSearchState
    lr: float
    logit_lr_mult: float = 1.0
    adam: nx.Adam = field(init=False)

    def __post_init__(self):
        mults = [self.logit_lr_mult]
        for site in self.state.sites:
            mults += [self.state.init_scales[site]] * self.state.n_groups
        self.adam = nx.Adam(self.state.parameters(), lr=self.lr, lr_scale=mults)


def search_step(opt: SearchOptimizer, teacher_eps: np.ndarray, qparams: DenoiserParams,
                x: np.ndarray, t, weight_q=None, lr: float | None = None
                ) -> tuple[float, float, float]:
    state = opt.state
    loss, distill, ent = search_objective(teacher_eps, qparams, x, t, state, weight_q)
    value = float(loss.value[0])
    if not math.isfinite(value):
        raise SearchDivergence(f"search loss is {value} (distill={distill}, entropy={ent}, "
                               f"scales={ {k: state.scale_values(k) for k in state.sites} })")
    grads = nx.backward(loss)
    opt.adam.step(grads, lr)
    state.project()
    return value, distill, ent


def finalize(state: GroupSearchState) -> GroupAssignment:
    """Pick the group with the largest weight per timestep (lowest index on ties)."""
    return GroupAssignment(np.argmax(state.sigma(), axis=1).astype(np.int64))


def write_sigma_csv(path, history: list[tuple[int, np.ndarray]]) -> None:
    """``history`` holds (epoch, sigma[T, G]) snapshots; rows use 1-based t and g."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "t", "g", "sigma"])
        for epoch, sig in history:
            for t in range(sig.shape[0]):
                for g in range(sig.shape[1]):
                    w.writerow([epoch, t + 1, g + 1, repr(float(sig[t, g]))])
