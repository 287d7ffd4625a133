#!/usr/bin/env python3
"""Scalar loss oracle at 50 significant digits (mpmath).

Writes tests/data/loss_vectors.jsonl: one object per line with
lr_plus, lr_minus, C, kind, beta, epsilon and expected_loss = C * loss.
"""
import json
import random
import sys

from mpmath import mp, mpf, exp, log

mp.dps = 50


def log_sigmoid(z):
    return -log(1 + exp(-z))


def loss(kind, beta, eps, lp, lm):
    g = lp - lm
    if kind == "dpo":
        return -log_sigmoid(beta * g)
    if kind == "ipo":
        return (g - 1 / (2 * beta)) ** 2
    if kind == "rdpo":
        a = (1 - eps) / (1 - 2 * eps)
        b = eps / (1 - 2 * eps)
        return -a * log_sigmoid(beta * g) + b * log_sigmoid(-beta * g)
    raise ValueError(kind)


def row(kind, beta, eps, lp, lm, c):
    v = mpf(c) * loss(kind, mpf(beta), mpf(eps), mpf(lp), mpf(lm))
    return {"lr_plus": lp, "lr_minus": lm, "C": c, "kind": kind, "beta": beta,
            "epsilon": eps, "expected_loss": float(v)}


def main(path):
    rows = [
        row("dpo", 1.0, 0.0, 1.0, 0.0, 1.0),      # -ln sigma(1)
        row("dpo", 0.5, 0.0, 0.2, -0.1, 0.8),     # worked beta = 0.5 case
        row("dpo", 0.5, 0.0, 0.3, 0.3, 1.0),      # ln 2
        row("ipo", 0.5, 0.0, 1.0, 0.0, 0.7),      # zero at g = 1/(2 beta)
        row("ipo", 0.5, 0.0, 0.0, 0.0, 1.0),      # 1
        row("rdpo", 0.5, 0.1, 0.4, 0.4, 1.0),     # ln 2
        row("dpo", 0.5, 0.0, 40.0, -60.0, 1.0),
        row("dpo", 0.5, 0.0, -60.0, 40.0, 1.0),
        row("rdpo", 0.5, 0.1, 30.0, -30.0, 0.5),
    ]
    rng = random.Random(20240611)
    for kind in ("dpo", "ipo", "rdpo"):
        for _ in range(60):
            beta = rng.choice([0.05, 0.1, 0.5, 1.0, 2.0])
            eps = rng.choice([0.0, 0.05, 0.1, 0.25, 0.45]) if kind == "rdpo" else 0.0
            lp = round(rng.uniform(-8, 8), 6)
            lm = round(rng.uniform(-8, 8), 6)
            c = round(rng.uniform(0, 1), 6)
            rows.append(row(kind, beta, eps, lp, lm, c))
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/data/loss_vectors.jsonl")
