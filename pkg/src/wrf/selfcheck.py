"""Release-gate checks: gradient oracle, budget equality, update algebra.

Each check returns a named pass/fail row instead of raising, so the CLI
can print the full table even when an early check fails. The suite must
stay fast (well under a minute on one core): it runs on tiny graphs and
a quadratic toy objective, not on experiment-sized models.
"""

from __future__ import annotations

import contextlib
from typing import Callable, NamedTuple

import numpy as np

from . import diffcore
from .diffcore import finite_diff_gradient
from .model import ModelConfig, RetrievalModel
from .params import ParameterSet
from .perturb import adversarial_perturbation, random_perturbation
from .trainer import (
    TrainConfig,
    TripletBatch,
    baseline_step,
    new_train_state,
    wrf_step,
    wrf_step_literal_sgd,
)

GRAD_RTOL = 1e-6
GRAD_ATOL = 1e-8
BUDGET_RTOL = 1e-10
COLLAPSE_TOL = 1e-12
DUAL_TOL = 1e-9


class CheckResult(NamedTuple):
    name: str
    ok: bool
    detail: str


class _QuadObjective:
    def loss_and_grads(self, params, batch):
        loss = 0.5 * float(sum((params[n] ** 2).sum() for n in params.trainable_names))
        return loss, {n: params[n].copy() for n in params.trainable_names}


_TOY_BATCH = TripletBatch(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((2, 1)))


def _toy_params(seed):
    rng = np.random.default_rng(seed)
    return ParameterSet({"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)})


def check_gradient_oracle(n_seeds: int = 25) -> CheckResult:
    """Backward pass vs central differences on the full loss graph."""
    config = ModelConfig(d_ref=6, d_mod=3, hidden=(8,), d_out=4, seed=0)
    model = RetrievalModel(config)
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng([0x5C, seed])
        refs = rng.normal(size=(5, 6))
        mods = rng.normal(size=(5, 3))
        raw = rng.normal(size=(5, 6))
        targets = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        params = RetrievalModel(
            ModelConfig(d_ref=6, d_mod=3, hidden=(8,), d_out=4, seed=seed)
        ).init_params()
        _, grads = model.loss_and_grads(params, refs, mods, targets, tau=5.0)
        oracle = finite_diff_gradient(
            lambda p: model.batch_loss(p, refs, mods, targets, tau=5.0), params
        )
        for name in oracle:
            gap = np.abs(grads[name] - oracle[name])
            allowed = np.maximum(GRAD_RTOL * np.abs(oracle[name]), GRAD_ATOL)
            worst = max(worst, float((gap / allowed).max()))
    ok = worst <= 1.0
    return CheckResult(
        "gradient-oracle", ok,
        f"max error {worst:.3e} of allowance over {n_seeds} seeds",
    )


def check_perturbation_budget(n_draws: int = 250) -> CheckResult:
    """Every nonzero layer lands exactly on the gamma * ||theta|| sphere."""
    rng = np.random.default_rng(0xB0D9E7)
    worst = 0.0
    zero_ok = True
    for draw in range(n_draws):
        params = _toy_params(rng.integers(1 << 31))
        gamma = float(10.0 ** rng.uniform(-4, -1))
        if draw % 2 == 0:
            grads = {n: rng.normal(size=params[n].shape) for n in params.trainable_names}
            if draw % 10 == 0:
                grads["b"] = np.zeros_like(params["b"])  # stationary layer
            pert = adversarial_perturbation(params, grads, gamma)
            if draw % 10 == 0 and np.any(pert.deltas["b"] != 0.0):
                zero_ok = False
        else:
            grads = None
            pert = random_perturbation(params, gamma, rng)
        for name in params.trainable_names:
            if grads is not None and not np.any(grads[name]):
                continue
            budget = gamma * float(np.linalg.norm(params[name]))
            got = float(np.linalg.norm(pert.deltas[name]))
            worst = max(worst, abs(got - budget) / budget)
    ok = worst <= BUDGET_RTOL and zero_ok
    detail = f"max relative budget error {worst:.3e} over {n_draws} draws"
    if not zero_ok:
        detail += "; zero-gradient layer produced a nonzero delta"
    return CheckResult("perturbation-budget", ok, detail)


def _collapse_gap(optimizer: str, steps: int = 50) -> float:
    kwargs = dict(
        gamma=0.0, rho=1.0, eta0=0.05, schedule="constant", optimizer=optimizer,
        weight_decay=0.01, total_epochs=2, warmup_epochs=0, seed=7,
    )
    cfg = TrainConfig(**kwargs)
    state_a = new_train_state(cfg, _toy_params(3))
    state_b = new_train_state(cfg, _toy_params(3))
    obj = _QuadObjective()
    for _ in range(steps):
        wrf_step(state_a, _TOY_BATCH, cfg, obj)
        baseline_step(state_b, _TOY_BATCH, cfg, obj)
    return max(
        float(np.abs(state_a.params[n] - state_b.params[n]).max())
        for n in state_a.params.names
    )


def check_gamma_zero_collapse() -> CheckResult:
    gap = max(_collapse_gap("sgd"), _collapse_gap("adamw"))
    return CheckResult(
        "gamma-zero-collapse", gap <= COLLAPSE_TOL,
        f"max trajectory gap {gap:.3e} after 50 steps (sgd and adamw)",
    )


def check_dual_update_forms() -> CheckResult:
    cfg = TrainConfig(
        gamma=0.01, rho=0.5, eta0=0.05, schedule="constant", optimizer="sgd",
        total_epochs=2, warmup_epochs=0, seed=5,
    )
    state_a = new_train_state(cfg, _toy_params(8))
    state_b = new_train_state(cfg, _toy_params(8))
    obj = _QuadObjective()
    for _ in range(50):
        wrf_step(state_a, _TOY_BATCH, cfg, obj)
        wrf_step_literal_sgd(state_b, _TOY_BATCH, cfg, obj)
    gap = max(
        float(np.abs(state_a.params[n] - state_b.params[n]).max())
        for n in state_a.params.names
    )
    return CheckResult(
        "dual-update-forms", gap <= DUAL_TOL,
        f"max gap between update forms {gap:.3e} after 50 steps",
    )


CHECKS: tuple[Callable[[], CheckResult], ...] = (
    check_gradient_oracle,
    check_perturbation_budget,
    check_gamma_zero_collapse,
    check_dual_update_forms,
)


@contextlib.contextmanager
def inject_fault(kind: str):
    """Mutation fixture: break one backward rule, restore on exit."""
    if kind != "grad-sign":
        raise ValueError(f"unknown fault {kind!r}")
    original = diffcore._OPS["tanh"]

    def flipped(i, g, ctx):
        (grad,) = original.backward(i, g, ctx)
        return (-grad,)

    diffcore._OPS["tanh"] = diffcore._Op(original.forward, flipped)
    try:
        yield
    finally:
        diffcore._OPS["tanh"] = original


def run_selfcheck(inject: str | None = None) -> list[CheckResult]:
    with inject_fault(inject) if inject else contextlib.nullcontext():
        return [check() for check in CHECKS]
