"""Activation quantization error and kernel two-sample distance."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import DenoiserParams, NoiseSchedule, ToyDataset, ddim_run, hidden_inputs
from .groupsearch import GroupAssignment
from .quantizer import LayerQuantTable, QuantContext, quantize

REPORT_SCHEMA_VERSION = 1
GERROR_STRIDE = 10


def quant_error(params: DenoiserParams, tables: dict[str, LayerQuantTable],
                assignment: GroupAssignment, x: np.ndarray, t: np.ndarray) -> float:
    """Mean over samples and activation sites of ||a - quantize(a)||^2 / n_elements.

    Activations ``a`` are those of ``params`` run without activation
    quantization; each sample uses the group assigned to its own timestep.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (len(x),))
    if len(x) == 0:
        raise ValueError("quant_error: no samples")
    acts = hidden_inputs(params, x, t)
    groups = assignment.groups[t - 1]
    per_site = []
    for site, a in acts.items():
        table = tables[site]
        out = np.empty_like(a)
        for g in np.unique(groups):
            rows = groups == g
            out[rows] = quantize(a[rows], table.groups[g])
        per_site.append(np.mean((a - out) ** 2, axis=1))
    return float(np.mean(per_site))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    z = np.concatenate([x, y])
    d = np.sqrt(_sq_dists(z, z)[np.triu_indices(len(z), k=1)])
    return float(np.median(d))


def mmd2_unbiased(x, y, bandwidth="median") -> float:
    """Unbiased squared MMD with the RBF kernel exp(-||a-b||^2 / (2 bw^2))."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise ValueError("mmd2_unbiased needs at least two samples on each side")
    bw = median_bandwidth(x, y) if bandwidth == "median" else float(bandwidth)
    gamma = 1.0 / (2.0 * bw * bw)
    kxx = np.exp(-gamma * _sq_dists(x, x))
    kyy = np.exp(-gamma * _sq_dists(y, y))
    kxy = np.exp(-gamma * _sq_dists(x, y))
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


@dataclass
class MetricsReport:
    c_error: float
    g_error: float
    mmd2: float
    mmd2_fp: float
    entropy: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def check_finite(self) -> None:
        for name in ("c_error", "g_error", "mmd2", "mmd2_fp"):
            if not math.isfinite(getattr(self, name)):
                raise FloatingPointError(f"report field {name} is not finite")


def evaluate(fp: DenoiserParams, bundle, dataset: ToyDataset, sched: NoiseSchedule,
             n_samples: int, rng: np.random.Generator, n_gerror: int = 256,
             bandwidth="median") -> MetricsReport:
    """Sample with the quantized model and score it against ``dataset``.

    ``bundle`` is a :class:`stepquant.harness.QuantBundle`.  The FP baseline
    and the quantized model start from identical noise.  G-Error is measured
    on latents of fresh quantized trajectories at every 10th timestep.
    """
    sample_rng, traj_rng = rng.spawn(2)
    x_T = sample_rng.standard_normal((n_samples, fp.arch.data_dim))
    ctx = QuantContext(bundle.tables, bundle.assignment.groups)
    q_samples, _ = ddim_run(bundle.params, sched, x_T, quant=ctx)
    fp_samples, _ = ddim_run(fp, sched, x_T)
    ref = dataset.points[:n_samples]
    mmd2 = mmd2_unbiased(q_samples, ref, bandwidth)
    mmd2_fp = mmd2_unbiased(fp_samples, ref, bandwidth)

    c_error = float("nan")
    if bundle.calib_x is not None and len(bundle.calib_x):
        c_error = quant_error(fp, bundle.tables, bundle.assignment, bundle.calib_x,
                              bundle.calib_t)
    record = range(GERROR_STRIDE, sched.T + 1, GERROR_STRIDE)
    x_T = traj_rng.standard_normal((n_gerror, fp.arch.data_dim))
    _, kept = ddim_run(bundle.params, sched, x_T, quant=ctx, record=record)
    gx = np.concatenate([kept[t] for t in record])
    gt = np.concatenate([np.full(n_gerror, t) for t in record])
    g_error = quant_error(fp, bundle.tables, bundle.assignment, gx, gt)
    return MetricsReport(c_error=c_error, g_error=g_error, mmd2=mmd2, mmd2_fp=mmd2_fp,
                         entropy=list(bundle.entropy or []), config=dict(bundle.config or {}))
