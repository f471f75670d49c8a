"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Criteria 6-8 train the directional models once (shared session context) and
take several minutes; deselect with ``-m "not slow"`` during development.
"""

import pytest

from atgan.acceptance import (AcceptanceContext, check_attack_constraints,
                              check_curve_integrity, check_directional_experiment,
                              check_format_roundtrips, check_fracat_boundaries,
                              check_gradient_oracles, check_obfuscated_gradients,
                              check_pgd_optimality, check_phase_isolation)


@pytest.fixture(scope="session")
def ctx():
    return AcceptanceContext()


def _run(name, fn, ctx):
    result = fn(ctx)
    line = f"[{'PASS' if result['passed'] else 'FAIL'}] {name}: {result['summary']}"
    print(line)
    assert result["passed"], line


def test_criterion_1_gradient_oracles(ctx):
    _run("1-gradient-oracles", check_gradient_oracles, ctx)


def test_criterion_2_attack_constraints(ctx):
    _run("2-attack-constraints", check_attack_constraints, ctx)


def test_criterion_3_pgd_optimality(ctx):
    _run("3-pgd-optimality", check_pgd_optimality, ctx)


def test_criterion_4_phase_isolation_and_determinism(ctx):
    _run("4-phase-isolation-determinism", check_phase_isolation, ctx)


def test_criterion_5_fracat_boundaries(ctx):
    _run("5-fracat-boundaries", check_fracat_boundaries, ctx)


@pytest.mark.slow
def test_criterion_6_directional_experiment(ctx):
    _run("6-directional-experiment", check_directional_experiment, ctx)


@pytest.mark.slow
def test_criterion_7_obfuscated_gradients(ctx):
    _run("7-obfuscated-gradients", check_obfuscated_gradients, ctx)


@pytest.mark.slow
def test_criterion_8_curve_integrity(ctx):
    _run("8-curve-integrity", check_curve_integrity, ctx)


def test_criterion_9_format_roundtrips(ctx):
    _run("9-format-roundtrips", check_format_roundtrips, ctx)


def test_gradient_oracle_catches_sign_flipped_backward(monkeypatch):
    """Mutation check: a sabotaged backward pass must trip the oracle."""
    import torch
    import torch.nn.functional as F

    import atgan.losses as losses_mod
    from atgan.gradcheck import compare_gradients, module_parameter_map
    from atgan.acceptance import _float64_toy_setup
    from atgan.losses import discrimination_loss

    class _Sabotaged(torch.autograd.Function):
        @staticmethod
        def forward(fctx, t):
            fctx.save_for_backward(t)
            return -F.softplus(-t)

        @staticmethod
        def backward(fctx, grad_out):
            (t,) = fctx.saved_tensors
            return -grad_out * torch.sigmoid(-t)  # correct magnitude, wrong sign

    monkeypatch.setattr(losses_mod, "log_sigmoid", _Sabotaged.apply)

    g, d, _, x, x_adv, _ = _float64_toy_setup(0)
    wrt = module_parameter_map(d, "d")
    errors = compare_gradients(lambda: discrimination_loss(d, g, x, x_adv), wrt)
    assert max(errors.values()) > 1e-4
