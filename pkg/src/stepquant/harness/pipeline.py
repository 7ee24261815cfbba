"""Experiment orchestration: pretrain, calibrate, sample, evaluate, ablate.

All randomness comes from one ``SeedSequence(seed)`` split into named
streams, so a run is reproduced by its seed alone.  Ablation arms reuse the
same pretrained checkpoint and the same calibration and evaluation streams,
which makes every comparison paired.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..calibration import CalibrationConfig, CalibrationResult, run_calibration
from ..diffusion import (Architecture, DenoiserParams, PretrainConfig, ToyDataset, ddim_run,
                         default_schedule, make_toy_dataset, pretrain)
from ..metrics import MetricsReport, evaluate
from ..quantizer import QuantContext, quantize_weights
from .checkpoint import Checkpoint, QuantBundle
from .config import ExperimentConfig

log = logging.getLogger(__name__)

STREAMS = ("data", "pretrain", "calibrate", "sample", "evaluate")
ABLATION_GROUPS = (1, 4, 8, 16)
ABLATION_BITS = (8, 6)
ABLATION_STRATEGIES = ("random", "heuristic", "active")
ABLATION_SIZES = (128, 256, 512, 1024)


def streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.PCG64(s)) for name, s in zip(STREAMS, children)}


def architecture(cfg: ExperimentConfig) -> Architecture:
    return Architecture(data_dim=2, emb_dim=cfg.emb_dim, hidden=cfg.hidden)


def dataset_for(cfg: ExperimentConfig, seed: int) -> ToyDataset:
    return make_toy_dataset(cfg.dataset, cfg.n_data, streams(seed)["data"])


def train(cfg: ExperimentConfig) -> tuple[Checkpoint, list[float]]:
    s = streams(cfg.seed)
    data = make_toy_dataset(cfg.dataset, cfg.n_data, s["data"])
    pcfg = PretrainConfig(epochs=cfg.pretrain_epochs, batch_size=cfg.pretrain_batch,
                          lr=cfg.pretrain_lr, arch=architecture(cfg))
    params, losses = pretrain(pcfg, data, default_schedule(cfg.T), s["pretrain"])
    ckpt = Checkpoint(params, cfg.model_dict(), cfg.seed,
                      extra={"pretrain_losses": [float(v) for v in losses]})
    return ckpt, losses


def calibration_config(cfg: ExperimentConfig) -> CalibrationConfig:
    return CalibrationConfig(n_groups=cfg.n_groups, lam=cfg.lam, eta=cfg.eta,
                             calib_size=cfg.calib_size, round_size=cfg.round_size,
                             batch_size=cfg.batch_size, epochs=cfg.epochs, lr=cfg.search_lr,
                             lr_final=cfg.lr_final, logit_lr_mult=cfg.logit_lr_mult,
                             logit_prior=cfg.logit_prior, act_bits=cfg.act_bits, p=cfg.p,
                             strategy=cfg.strategy, heuristic_mu=cfg.heuristic_mu)


def calibrate(fp: DenoiserParams, cfg: ExperimentConfig
              ) -> tuple[QuantBundle, CalibrationResult]:
    """Quantize weights, then run timestep selection and group search on activations."""
    qparams, weight_q = quantize_weights(fp, cfg.weight_bits, cfg.p)
    result = run_calibration(fp, qparams, weight_q, default_schedule(cfg.T),
                             calibration_config(cfg), streams(cfg.seed)["calibrate"])
    x, t = result.calib.arrays()
    bundle = QuantBundle(qparams, result.tables, result.assignment, x, t,
                         result.entropy_trace(), cfg.model_dict())
    return bundle, result


def sample(params: DenoiserParams, bundle: QuantBundle | None, cfg: ExperimentConfig,
           n: int) -> np.ndarray:
    x_T = streams(cfg.seed)["sample"].standard_normal((n, params.arch.data_dim))
    sched = default_schedule(cfg.T)
    if bundle is None:
        return ddim_run(params, sched, x_T)[0]
    ctx = QuantContext(bundle.tables, bundle.assignment.groups)
    return ddim_run(bundle.params, sched, x_T, quant=ctx)[0]


def evaluate_bundle(fp: DenoiserParams, bundle: QuantBundle, cfg: ExperimentConfig,
                    data_seed: int) -> MetricsReport:
    report = evaluate(fp, bundle, dataset_for(cfg, data_seed), default_schedule(cfg.T),
                      cfg.n_eval, streams(cfg.seed)["evaluate"], n_gerror=cfg.n_gerror)
    report.check_finite()
    return report


@dataclass
class Arm:
    """One calibrated-and-evaluated configuration inside an ablation."""

    cfg: ExperimentConfig
    report: MetricsReport
    seconds: float


def run_arm(fp: DenoiserParams, cfg: ExperimentConfig, data_seed: int) -> Arm:
    start = time.perf_counter()
    bundle, _ = calibrate(fp, cfg)
    report = evaluate_bundle(fp, bundle, cfg, data_seed)
    return Arm(cfg, report, time.perf_counter() - start)


def _metrics(report: MetricsReport) -> dict:
    return {"c_error": report.c_error, "g_error": report.g_error, "mmd2": report.mmd2,
            "mmd2_fp": report.mmd2_fp}


def ablate_groups(ckpt: Checkpoint, cfg: ExperimentConfig, groups=ABLATION_GROUPS,
                  bits=ABLATION_BITS) -> dict:
    """Group-count ablation: one row per G, one column block per bitwidth."""
    rows = []
    for g in groups:
        row = {"G": g}
        for b in bits:
            arm = run_arm(ckpt.params, cfg.replace(n_groups=g, weight_bits=b, act_bits=b),
                          ckpt.seed)
            log.info("G=%d W%dA%d: %s (%.1fs)", g, b, b, _metrics(arm.report), arm.seconds)
            for k, v in _metrics(arm.report).items():
                row[f"W{b}A{b}_{k}"] = v
        rows.append(row)
    return {"kind": "ablate-groups", "seed": cfg.seed, "config": cfg.model_dict(), "rows": rows}


def ablate_strategy(ckpt: Checkpoint, cfg: ExperimentConfig, strategies=ABLATION_STRATEGIES,
                    sizes=ABLATION_SIZES) -> dict:
    """Selection-strategy ablation over calibration-set sizes at the configured bitwidth."""
    rows = []
    for strategy in strategies:
        for size in sizes:
            arm = run_arm(ckpt.params, cfg.replace(strategy=strategy, calib_size=size),
                          ckpt.seed)
            log.info("%s |S|=%d: %s (%.1fs)", strategy, size, _metrics(arm.report), arm.seconds)
            rows.append({"strategy": strategy, "calib_size": size, **_metrics(arm.report)})
    return {"kind": "ablate-strategy", "seed": cfg.seed, "config": cfg.model_dict(), "rows": rows}


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_samples(path, points: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(points.shape[1])])
        w.writerows([[repr(float(v)) for v in row] for row in points])


def report(inputs: list, out_dir) -> list[Path]:
    """Merge run JSONs into CSV tables, one table per kind of run."""
    tables: dict[str, list[dict]] = {}
    for path in inputs:
        doc = json.loads(Path(path).read_text())
        if "rows" in doc:
            kind = doc.get("kind", "rows")
            tables.setdefault(kind, []).extend({"seed": doc.get("seed"), **r} for r in doc["rows"])
        elif "mmd2" in doc:
            cfg = doc.get("config", {})
            tables.setdefault("metrics", []).append(
                {"source": Path(path).name, "seed": cfg.get("seed"),
                 "strategy": cfg.get("strategy"), "n_groups": cfg.get("n_groups"),
                 "weight_bits": cfg.get("weight_bits"), "act_bits": cfg.get("act_bits"),
                 "calib_size": cfg.get("calib_size"), **{k: doc[k] for k in
                                                          ("c_error", "g_error", "mmd2",
                                                           "mmd2_fp")}})
        else:
            raise ValueError(f"{path}: neither an ablation nor a metrics report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, rows in sorted(tables.items()):
        columns = list(dict.fromkeys(k for r in rows for k in r))
        path = out / f"{kind}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, columns)
            w.writeheader()
            w.writerows(rows)
        written.append(path)
    return written
