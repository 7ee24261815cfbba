"""Calibration-set construction by timestep selection, and the search loop around it.

Selection strategies:

* ``active``: argmax_t  H(sigma^t) + eta / (N_t + 1)
* ``ucb-full``: argmax_t  H(sigma^t) + eta * sqrt(ln(sum N + 1) / (N_t + 1))
* ``random``: uniform over 1..T
* ``heuristic``: round(Normal(mu, T/2)) clamped to 1..T, mu = 0.4 T by default

Ties in the argmax strategies go to the lowest timestep.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import DenoiserParams, NoiseSchedule, ddim_run, denoise_value
from .groupsearch import (GroupAssignment, GroupSearchState, SearchOptimizer, banded_logits,
                          finalize, init_search_state, search_step)
from .quantizer import LayerQuantTable, QuantParams

log = logging.getLogger(__name__)

STRATEGIES = ("active", "random", "heuristic", "ucb-full")


@dataclass
class CalibState:
    T: int
    eta: float = 1.5
    strategy: str = "active"
    heuristic_mu: float | None = None
    counts: np.ndarray = None
    xs: list[np.ndarray] = field(default_factory=list)
    ts: list[np.ndarray] = field(default_factory=list)
    teacher: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.counts is None:
            self.counts = np.zeros(self.T, dtype=np.int64)
        if self.heuristic_mu is None:
            self.heuristic_mu = 0.4 * self.T

    @property
    def size(self) -> int:
        return int(sum(len(x) for x in self.xs))

    @property
    def rounds(self) -> int:
        return int(self.counts.sum())

    def add(self, x: np.ndarray, t: int, teacher_eps: np.ndarray | None = None) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        self.xs.append(np.asarray(x, dtype=np.float64))
        self.ts.append(np.full(len(x), t, dtype=np.int64))
        self.teacher.append(teacher_eps)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.xs:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return np.concatenate(self.xs), np.concatenate(self.ts)

    def teacher_array(self) -> np.ndarray:
        return np.concatenate(self.teacher)

    def histogram(self) -> dict:
        return {"strategy": self.strategy, "eta": self.eta, "rounds": self.rounds,
                "size": self.size, "counts": [int(c) for c in self.counts]}


def criterion_s1(state: GroupSearchState | None, t: int, n_groups: int = 1) -> float:
    """Entropy of the mixture weights at t; uniform weights when no search state exists yet."""
    if state is None:
        return math.log(n_groups)
    return float(state.entropy()[t - 1])


def criterion_s2(calib: CalibState, t: int) -> float:
    return 1.0 / (calib.counts[t - 1] + 1.0)


def selection_scores(state: GroupSearchState | None, calib: CalibState,
                     n_groups: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(s1, exploration term, total score) for every timestep."""
    s1 = (np.full(calib.T, math.log(n_groups)) if state is None else state.entropy())
    if calib.strategy == "ucb-full":
        explore = np.sqrt(math.log(calib.counts.sum() + 1.0) / (calib.counts + 1.0))
    else:
        explore = 1.0 / (calib.counts + 1.0)
    return s1, explore, s1 + calib.eta * explore


def select_timestep(state: GroupSearchState | None, calib: CalibState,
                    rng: np.random.Generator, n_groups: int = 1) -> tuple[int, dict]:
    """Choose the next timestep, bump its count, and return it with a log record."""
    s1, explore, score = selection_scores(state, calib, n_groups)
    if calib.strategy in ("active", "ucb-full"):
        t = int(np.argmax(score)) + 1
    elif calib.strategy == "random":
        t = int(rng.integers(1, calib.T + 1))
    else:
        draw = rng.normal(calib.heuristic_mu, calib.T / 2.0)
        t = int(min(max(round(draw), 1), calib.T))
    record = {"round": calib.rounds + 1, "strategy": calib.strategy, "t": t,
              "s1": float(s1[t - 1]), "s2": float(explore[t - 1]),
              "score": float(score[t - 1])}
    calib.counts[t - 1] += 1
    return t, record


def build_calibration_round(fp: DenoiserParams, sched: NoiseSchedule, t: int, batch_size: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Latents x_t of ``batch_size`` fresh full-precision DDIM chains stopped at t."""
    x_T = rng.standard_normal((batch_size, fp.arch.data_dim))
    x_t, _ = ddim_run(fp, sched, x_T, stop=t)
    return x_t


@dataclass
class CalibrationConfig:
    n_groups: int = 8
    lam: float = 0.8
    eta: float = 1.5
    calib_size: int = 1024
    round_size: int = 64
    batch_size: int = 64
    epochs: int = 10
    lr: float | None = None
    lr_final: float = 1e-5
    logit_lr_mult: float = 1.0
    logit_prior: float = 1.0
    act_bits: float = 8
    p: float = 2.4
    strategy: str = "active"
    heuristic_mu: float | None = None

    def initial_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 3e-3 if self.act_bits <= 6 else 5e-3


@dataclass
class CalibrationResult:
    assignment: GroupAssignment
    tables: dict[str, LayerQuantTable]
    state: GroupSearchState
    calib: CalibState
    selections: list[dict]
    count_history: list[list[int]]
    losses: list[dict]
    sigma_history: list[tuple[int, np.ndarray]]
    steps: list[tuple[np.ndarray, float]]

    def entropy_trace(self) -> list[dict]:
        out = []
        for epoch, sig in self.sigma_history:
            with np.errstate(divide="ignore", invalid="ignore"):
                ent = np.where(sig > 0, -sig * np.log(sig), 0.0).sum(axis=1)
            visited = self.calib.counts > 0
            out.append({"epoch": epoch, "mean_entropy": float(ent.mean()),
                        "mean_entropy_visited": float(ent[visited].mean()),
                        "mean_max_sigma": float(sig.max(axis=1).mean()),
                        "mean_max_sigma_visited": float(sig.max(axis=1)[visited].mean())})
        return out

    def write_logs(self, directory) -> None:
        from pathlib import Path

        from .groupsearch import write_sigma_csv

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "selections.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, ["round", "strategy", "t", "s1", "s2", "score"])
            w.writeheader()
            w.writerows(self.selections)
        with open(d / "counts_history.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round"] + [f"N{t + 1}" for t in range(self.calib.T)])
            for r, row in enumerate(self.count_history, start=1):
                w.writerow([r] + row)
        with open(d / "loss.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, ["step", "epoch", "lr", "loss", "distill", "entropy"])
            w.writeheader()
            w.writerows(self.losses)
        write_sigma_csv(d / "sigma.csv", self.sigma_history)
        with open(d / "counts.json", "w") as fh:
            json.dump(self.calib.histogram(), fh, indent=2)


def _epoch(opt, calib, qparams, weight_q, batch_size, rng, lr, epoch, losses, steps):
    x_all, t_all = calib.arrays()
    eps_all = calib.teacher_array()
    order = rng.permutation(len(x_all))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        loss, distill, ent = search_step(opt, eps_all[idx], qparams, x_all[idx], t_all[idx],
                                         weight_q, lr)
        steps.append((idx, lr))
        losses.append({"step": len(steps), "epoch": epoch, "lr": lr, "loss": loss,
                       "distill": distill, "entropy": ent})


def run_calibration(fp: DenoiserParams, qparams: DenoiserParams,
                    weight_q: dict[str, QuantParams], sched: NoiseSchedule,
                    config: CalibrationConfig, rng: np.random.Generator) -> CalibrationResult:
    """Interleave timestep selection, calibration-round generation and group search.

    Each round selects one timestep, generates ``round_size`` latents there
    with the full-precision sampler, and trains one pass over the calibration
    set at the initial learning rate.  Once the set is full, ``epochs`` further
    passes run with the learning rate decayed geometrically to ``lr_final``.
    The generation stream is independent of the selection stream, so two
    strategies run with the same seed see the same initial noise.
    """
    select_rng, gen_rng, shuffle_rng = rng.spawn(3)
    T = sched.T
    calib = CalibState(T, config.eta, config.strategy, config.heuristic_mu)
    n_rounds = config.calib_size // config.round_size
    if n_rounds < 1:
        raise ValueError("calibration size is smaller than one round")
    lr0 = config.initial_lr()
    state = opt = None
    selections, count_history, losses, sigma_history, steps = [], [], [], [], []
    epoch = 0
    for _ in range(n_rounds):
        t, record = select_timestep(state, calib, select_rng, config.n_groups)
        selections.append(record)
        count_history.append([int(c) for c in calib.counts])
        x = build_calibration_round(fp, sched, t, config.round_size, gen_rng)
        calib.add(x, t, denoise_value(fp, x, t))
        if state is None:
            logits = banded_logits(T, config.n_groups, config.logit_prior)
            state = init_search_state(qparams, x, np.full(len(x), t), T, config.n_groups,
                                      config.act_bits, config.lam, config.p, logits)
            opt = SearchOptimizer(state, lr0, config.logit_lr_mult)
            sigma_history.append((0, state.sigma()))
        epoch += 1
        _epoch(opt, calib, qparams, weight_q, config.batch_size, shuffle_rng, lr0, epoch,
               losses, steps)
        sigma_history.append((epoch, state.sigma()))
        log.debug("round %d: t=%d |S|=%d loss=%.5g", record["round"], t, calib.size,
                  losses[-1]["loss"])
    for e in range(config.epochs):
        frac = e / max(config.epochs - 1, 1)
        lr = lr0 * (config.lr_final / lr0) ** frac
        epoch += 1
        _epoch(opt, calib, qparams, weight_q, config.batch_size, shuffle_rng, lr, epoch,
               losses, steps)
        sigma_history.append((epoch, state.sigma()))
    return CalibrationResult(finalize(state), state.tables(weight_q), state, calib, selections,
                             count_history, losses, sigma_history, steps)
