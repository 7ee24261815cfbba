"""Regenerate ``fixtures.json`` from the plain-Python references.

Run from the repository root::

    python3 tests/oracles/make_fixtures.py

Inputs are drawn from ``random.Random`` with fixed seeds and stored next to
the expected outputs, so the tests never need to reproduce the draws.
"""

import json
import math
import random
from pathlib import Path

import reference as ref

OUT = Path(__file__).with_name("fixtures.json")


def forward_case():
    rng = random.Random(11)
    dims = [2 + 8, 5, 4, 2]
    weights = [ref.random_matrix(rng, a, b, 1 / math.sqrt(a)) for a, b in zip(dims, dims[1:])]
    biases = [[rng.uniform(-0.3, 0.3) for _ in range(b)] for b in dims[1:]]
    xs = [[rng.gauss(0, 1), rng.gauss(0, 1)] for _ in range(3)]
    ts = [1, 37, 100]
    out = [ref.mlp_forward(x, t, weights, biases, 8) for x, t in zip(xs, ts)]
    return {"emb_dim": 8, "hidden": [5, 4], "weights": weights, "biases": biases,
            "x": xs, "t": ts, "expected": out}


def calibration_cases():
    rng = random.Random(12)
    cases = []
    s, e = ref.grid_search_scale([-1.0, 1.0], 8, 2.0)
    cases.append({"samples": [-1.0, 1.0], "bits": 8, "p": 2.0, "scale": s, "error": e})
    gauss = [rng.gauss(0, 1.3) for _ in range(64)]
    for bits in (8, 6):
        s, e = ref.grid_search_scale(gauss, bits, 2.4)
        cases.append({"samples": gauss, "bits": bits, "p": 2.4, "scale": s, "error": e})
    return cases


def weight_layer_case():
    rng = random.Random(13)
    w = ref.random_matrix(rng, 6, 5, 0.4)
    flat = [v for row in w for v in row]
    s, _ = ref.grid_search_scale(flat, 8, 2.4)
    mse = sum((v - ref.quantize(v, s, 8)) ** 2 for v in flat) / len(flat)
    return {"weight": w, "bits": 8, "p": 2.4, "scale": s, "mse": mse}


def lsq_case():
    rng = random.Random(14)
    s, bits = 0.1, 4
    xs = [rng.uniform(-1.2, 1.2) for _ in range(40)]
    up = [rng.gauss(0, 1) for _ in xs]
    return {"x": xs, "upstream": up, "scale": s, "bits": bits,
            "grad_scale": ref.lsq_scale_grad(xs, up, s, bits),
            "grad_x": [g if bounds_ok(v / s, bits) else 0.0 for v, g in zip(xs, up)],
            "value": [ref.quantize(v, s, bits) for v in xs]}


def bounds_ok(u, bits):
    lo, hi = ref.bounds(bits)
    return lo <= u <= hi


def objective_case():
    rng = random.Random(15)
    emb, hidden = 4, 3
    weights = [ref.random_matrix(rng, 2 + emb, hidden, 0.8), ref.random_matrix(rng, hidden, 2, 0.8)]
    biases = [[rng.uniform(-0.2, 0.2) for _ in range(hidden)],
              [rng.uniform(-0.2, 0.2) for _ in range(2)]]
    logits = [[0.3, -0.2], [1.5, 0.0], [-0.4, 0.9], [0.0, 0.0]]
    scales = {1: [0.05, 0.11]}
    xs = [[rng.gauss(0, 1), rng.gauss(0, 1)] for _ in range(5)]
    ts = [1, 2, 3, 4, 2]
    j, distill, ent = ref.search_objective(xs, ts, weights, biases, emb, logits, scales, 4, 0.8)
    return {"emb_dim": emb, "hidden": [hidden], "weights": weights, "biases": biases,
            "logits": logits, "scales": scales[1], "bits": 4, "lam": 0.8, "x": xs, "t": ts,
            "J": j, "distill": distill, "entropy": ent}


def mmd_cases():
    rng = random.Random(16)
    xs = [[rng.gauss(0, 1), rng.gauss(0, 1)] for _ in range(6)]
    ys = [[rng.gauss(0.5, 1), rng.gauss(0, 1.5)] for _ in range(7)]
    bw = ref.median_pairwise(xs + ys)
    small = {"x": xs, "y": ys, "median_bandwidth": bw,
             "mmd2_median": ref.gaussian_rbf_mmd2(xs, ys, bw),
             "mmd2_bw_0.7": ref.gaussian_rbf_mmd2(xs, ys, 0.7)}
    rng = random.Random(17)
    a = [[rng.gauss(0, 1)] for _ in range(500)]
    b = [[rng.gauss(5, 1)] for _ in range(500)]
    bw = ref.median_pairwise(a + b)
    far = {"x": a, "y": b, "median_bandwidth": bw, "mmd2_median": ref.gaussian_rbf_mmd2(a, b, bw)}
    return {"small": small, "separated": far}


def main():
    fixtures = {"forward": forward_case(), "calibrate_scale": calibration_cases(),
                "weight_layer": weight_layer_case(), "lsq": lsq_case(),
                "objective": objective_case(), "mmd": mmd_cases()}
    OUT.write_text(json.dumps(fixtures, indent=1, sort_keys=True) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
