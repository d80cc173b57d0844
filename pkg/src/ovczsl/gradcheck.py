"""Finite-difference verification of the analytic loss gradients.

Central differences with h = 1e-4 in 64-bit arithmetic are compared against
the analytic gradients of the classification loss, the structural regularizer,
and their weighted sum, at randomly sampled token coordinates. The relative
error uses a small magnitude floor so that coordinates whose true gradient
sits below finite-difference resolution do not produce spurious failures.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .datagen import GenConfig, generate
from .encoder import ATTR, OBJ, FrozenEncoder, PromptState
from .seeds import seeded_rng
from .training import TrainConfig, build_neighborhoods, ce_loss, scl_loss

FD_STEP = 1e-4
TOLERANCE = 1e-4
REL_FLOOR = 1e-5

# rng domain reserved for coordinate sampling and the state perturbation
_DOMAIN_GRADCHECK = 7


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass(frozen=True)
class CoordinateCheck:
    loss: str
    kind: str
    row: int
    col: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass(frozen=True)
class GradCheckReport:
    checks: tuple[CoordinateCheck, ...]
    tolerance: float
    h: float
    passed: bool

    def max_rel_err(self, loss: str | None = None) -> float:
        errs = [c.rel_err for c in self.checks if loss is None or c.loss == loss]
        return max(errs) if errs else 0.0

    def to_json(self) -> str:
        payload = {
            "tolerance": self.tolerance,
            "h": self.h,
            "passed": self.passed,
            "max_rel_err": {
                loss: self.max_rel_err(loss) for loss in ("ce", "scl", "total")
            },
            "checks": [
                {
                    "loss": c.loss,
                    "kind": c.kind,
                    "row": c.row,
                    "col": c.col,
                    "analytic": c.analytic,
                    "numeric": c.numeric,
                    "rel_err": c.rel_err,
                }
                for c in self.checks
            ],
        }
        return json.dumps(payload, indent=2) + "\n"


def _check_setup(config: TrainConfig):
    """Small seeded benchmark plus a perturbed state with non-trivial gradients."""
    gen = GenConfig(
        d=config.d,
        attrs_seen=6,
        attrs_unseen=2,
        objs_seen=5,
        objs_unseen=2,
        seen_pairs=14,
        heldout_pairs=3,
        train_per_comp=4,
        test_per_comp=1,
        seed=config.seed,
    )
    bench = generate(gen)
    enc = FrozenEncoder.from_seed(config.seed, config.d)
    state = PromptState.create(
        config.seed,
        config.m,
        bench.observable_attr.take(bench.attrs.seen),
        bench.observable_obj.take(bench.objs.seen),
    )
    rng = seeded_rng(config.seed, _DOMAIN_GRADCHECK)
    state.theta_attr += 0.2 * rng.standard_normal(state.theta_attr.shape)
    state.theta_obj += 0.2 * rng.standard_normal(state.theta_obj.shape)
    batch = list(bench.dataset.train[:32])
    return bench, enc, state, batch, rng


def run_gradient_check(
    config: TrainConfig | None = None,
    n_coords: int = 20,
    flip_sign: bool = False,
) -> GradCheckReport:
    """Compare analytic and central-difference gradients at random coordinates.

    ``flip_sign`` is a harness self-test hook: it corrupts one analytic value
    so a healthy run of the checker must then fail.
    """
    config = config or TrainConfig(d=16)
    bench, enc, state, batch, rng = _check_setup(config)
    k = min(config.k, len(bench.attrs.seen) - 1, len(bench.objs.seen) - 1)
    idx_attr, idx_obj = build_neighborhoods(enc, state, k)

    def ce_value() -> float:
        return ce_loss(batch, bench.space, enc, state, config.tau_cls)[0]

    def scl_value() -> float:
        return scl_loss(enc, state, idx_attr, idx_obj, config.tau_scl)[0]

    _, ce_grads = ce_loss(batch, bench.space, enc, state, config.tau_cls)
    _, scl_grads = scl_loss(enc, state, idx_attr, idx_obj, config.tau_scl)
    losses = {
        "ce": (ce_value, ce_grads),
        "scl": (scl_value, scl_grads),
        "total": (
            lambda: ce_value() + config.scl_weight * scl_value(),
            {
                key: ce_grads[key] + config.scl_weight * scl_grads[key]
                for key in ("theta_attr", "theta_obj")
            },
        ),
    }

    coords = []
    for _ in range(n_coords):
        kind = ATTR if rng.integers(2) == 0 else OBJ
        theta = state.theta(kind)
        coords.append((kind, int(rng.integers(theta.shape[0])), int(rng.integers(theta.shape[1]))))

    checks = []
    corrupted = False
    for loss_name, (value_fn, grads) in losses.items():
        for kind, row, col in coords:
            theta = state.theta_attr if kind == ATTR else state.theta_obj
            original = theta[row, col]
            theta[row, col] = original + FD_STEP
            upper = value_fn()
            theta[row, col] = original - FD_STEP
            lower = value_fn()
            theta[row, col] = original
            numeric = (upper - lower) / (2 * FD_STEP)
            analytic = float(grads["theta_attr" if kind == ATTR else "theta_obj"][row, col])
            if flip_sign and not corrupted:
                analytic = -analytic if analytic != 0.0 else 1.0
                corrupted = True
            checks.append(
                CoordinateCheck(
                    loss=loss_name,
                    kind=kind,
                    row=row,
                    col=col,
                    analytic=analytic,
                    numeric=float(numeric),
                    rel_err=relative_error(analytic, float(numeric)),
                )
            )
    passed = all(c.rel_err < TOLERANCE for c in checks)
    return GradCheckReport(checks=tuple(checks), tolerance=TOLERANCE, h=FD_STEP, passed=passed)
