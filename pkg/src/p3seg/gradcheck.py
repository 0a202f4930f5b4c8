"""Central finite-difference checks for every loss and for the network backward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .model import ModelParams, NetworkSpec, backward, forward

STEP = 1e-5
TOLERANCE = 1e-4


def numeric_gradient(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f(x)
        flat[k] = old - h
        fm = f(x)
        flat[k] = old
        gflat[k] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / (|a| + |b|)`` in the Euclidean norm."""
    denom = max(float(np.linalg.norm(a) + np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def _instance(rng, n=3, size=8):
    logits = rng.normal(0.0, 1.5, (n, size, size))
    labels = rng.integers(0, n, (size, size))
    band = rng.integers(0, 2, (size, size)).astype(np.uint8)
    mu = rng.random((size, size)) * band
    return logits, labels, band, mu


def _prob_loss(fn, with_mu):
    def value_grad(z, y, band, mu):
        probs = losses.softmax_probs(z)
        out = fn(probs, y, mu) if with_mu else fn(probs, y)
        return out.value, out.grad  # already with respect to the logits
    return value_grad


def _stage1(z, y, band, mu):
    # second branch reuses the same instance under a fixed relabeling
    v, gs, gu = losses.stage1_loss(z, y, z[::-1], (y + 1) % z.shape[0], 0.37)
    return v, gs + gu[::-1]


LOSS_CHECKS = {
    "ce": _prob_loss(losses.cross_entropy, False),
    "dice": _prob_loss(losses.dice_loss, False),
    "wce": _prob_loss(losses.weighted_ce, True),
    "wdice": _prob_loss(losses.weighted_dice, True),
    "stage1_loss": _stage1,
    "stage2_loss": lambda z, y, band, mu: tuple(losses.stage2_loss(z, y, band, mu)),
}


def check_losses(instances: int = 20, seed: int = 0) -> list[CheckResult]:
    results = []
    for name, fn in LOSS_CHECKS.items():
        rng = np.random.default_rng([seed, len(name)])
        worst = 0.0
        for _ in range(instances):
            z, y, band, mu = _instance(rng)
            analytic = fn(z, y, band, mu)[1]
            numeric = numeric_gradient(lambda x: fn(x, y, band, mu)[0], z.copy())
            worst = max(worst, relative_error(analytic, numeric))
        results.append(CheckResult(name, instances, worst))
    return results


def check_network(instances: int = 2, seed: int = 0) -> CheckResult:
    spec = NetworkSpec(1, 3, (2, 3))
    rng = np.random.default_rng([seed, 0x6E7])
    worst = 0.0
    for _ in range(instances):
        params = ModelParams.initialize(spec, rng)
        params.data += rng.normal(0, 0.05, len(params))
        x = rng.random((1, 8, 8))
        _, y, band, mu = _instance(rng)

        def loss(data):
            return losses.stage2_loss(forward(ModelParams(spec, data), x)[0], y, band, mu).value

        logits, cache = forward(params, x)
        analytic = backward(cache, losses.stage2_loss(logits, y, band, mu).grad)
        worst = max(worst, relative_error(analytic, numeric_gradient(loss, params.data.copy())))
    return CheckResult("network", instances, worst)


def run_all(instances: int = 20, seed: int = 0) -> list[CheckResult]:
    return check_losses(instances, seed) + [check_network(seed=seed)]


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<14}{'instances':>10}{'max rel err':>14}  result"]
    for r in results:
        lines.append(f"{r.name:<14}{r.instances:>10}{r.max_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
