"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with the measured value and
the threshold; the lines are repeated in pytest's terminal summary. The
benchmark-level checks share one run of the pinned reference grid (10 seeds),
so the first of them takes most of the wall time.

Run standalone with ``python -m pytest tests/test_acceptance.py -v``.
"""
import math
import os
import time
from itertools import permutations

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from rttdp.assignment import exact_mapping, greedy_mapping, is_derangement, mapping_objective
from rttdp.experiment import prepare_stream, resolve_workers, run_grid
from rttdp.forge import AttackObjective, LagrangeState, PoisonBatch, poison_diagnostics, synthesize
from rttdp.surrogate import SurrogateState, distill
from rttdp.tensor import (
    Tensor,
    concat,
    div,
    gaussian_kld,
    grad,
    log_softmax,
    maximum,
    neg,
    no_grad,
    op_kinds,
    power,
    sqrt,
    sum_,
    swap_last,
    transpose,
)
from rttdp.tta import TtaConfig, Victim

from .conftest import ACCEPTANCE_LINES, TIMINGS
from .gradcheck import numeric_grad, rel_error
from .test_tensor import _cases, rng_fixed

TENT, THRESH, AUG, EMA, EATA = (
    "tent-lite", "tent-lite+thresh", "tent-lite+thresh+aug", "tent-lite+thresh+aug+ema", "eata-lite",
)


def verdict(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# ---------------------------------------------------------------------------
# the shared reference grid
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def grid(reference_config, reference_source):
    t0 = time.perf_counter()
    report = run_grid(reference_config, workers=resolve_workers(None, reference_config.workers),
                      source=reference_source)
    elapsed = time.perf_counter() - t0 + TIMINGS.get("reference_pretrain", 0.0)
    return report, elapsed


def _errors(report, victim, attack):
    """Per-seed benign error (percent) of one cell, in seed order."""
    runs = sorted((r for r in report.runs if r.victim == victim and r.attack == attack), key=lambda r: r.seed)
    return np.array([100.0 * r.error for r in runs])


def _diagnostics(report, victim, attack, key):
    runs = sorted((r for r in report.runs if r.victim == victim and r.attack == attack), key=lambda r: r.seed)
    return np.array([np.mean([d[key] for d in r.extras["adversary"].diagnostics]) for r in runs])


# ---------------------------------------------------------------------------
# numerical kernels
# ---------------------------------------------------------------------------

def _extra_cases(rng):
    w = rng_fixed(3, 4)
    a = rng.standard_normal((2, 2))
    b = rng.standard_normal((2, 2))
    return {
        "div": (lambda x, y: sum_(div(x, y) * w), [rng.standard_normal((3, 4)), rng.uniform(0.5, 2, (3, 4))], 1e-4),
        "neg": (lambda x: sum_(neg(x) * w), [rng.standard_normal((3, 4))], 1e-4),
        "power": (lambda x: sum_(power(x, 0.8) * w), [rng.uniform(0.3, 2, (3, 4))], 1e-4),
        "sqrt": (lambda x: sum_(sqrt(x) * w), [rng.uniform(0.3, 2, (3, 4))], 1e-4),
        "maximum": (lambda x: sum_(maximum(x, 0.1) * w), [rng.uniform(0.2, 2, (3, 4))], 1e-4),
        "log-softmax": (lambda x: sum_(log_softmax(x) * w), [rng.standard_normal((3, 4))], 1e-4),
        "concat": (lambda x, y: sum_(concat([x, y], axis=0) * rng_fixed(5, 4)),
                   [rng.standard_normal((3, 4)), rng.standard_normal((2, 4))], 1e-4),
        "transpose": (lambda x: sum_(transpose(x) * w.T), [rng.standard_normal((3, 4))], 1e-4),
        "swap-last": (lambda x: sum_(swap_last(x) * rng_fixed(2, 4, 3)), [rng.standard_normal((2, 3, 4))], 1e-4),
        "gaussian-kld": (lambda m0, c0, m1, c1: gaussian_kld(m0, c0, m1, c1),
                         [rng.standard_normal(2), a @ a.T + np.eye(2), rng.standard_normal(2), b @ b.T + np.eye(2)],
                         1e-4),
    }


def test_gradient_correctness():
    t0 = time.perf_counter()
    kinds = sorted(set(op_kinds()) | set(_extra_cases(np.random.default_rng(0))))
    worst, failures, n = 0.0, [], 50
    for i in range(n):
        kind, seed = kinds[i % len(kinds)], 1000 + i
        rng = np.random.default_rng(seed)
        cases = _cases(rng) if kind in op_kinds() else _extra_cases(rng)
        build, arrays, tol = cases[kind]
        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        analytic = grad(build(*tensors), tensors)

        def f(*arrs):
            with no_grad():
                return float(build(*[Tensor(a) for a in arrs]).data)

        numeric = numeric_grad(f, [a.copy() for a in arrays], h=1e-4)
        err = max(rel_error(g, m) for g, m in zip(analytic, numeric))
        worst = max(worst, err / tol)
        if err >= tol:
            failures.append((kind, seed, err))
    elapsed = time.perf_counter() - t0
    verdict("gradient correctness", not failures and elapsed < 30.0,
            f"{n} cases over {len(kinds)} ops, {len(failures)} over tolerance, "
            f"worst error/tolerance {worst:.2e}, {elapsed:.1f}s (< 30s)")


def test_gaussian_kld_oracle():
    r = np.random.default_rng(0)
    uni_worst = 0.0
    for _ in range(50):
        m0, m1 = r.normal(size=2) * 2
        s0, s1 = r.uniform(0.2, 3.0, size=2)
        exact = math.log(s1 / s0) + (s0**2 + (m0 - m1) ** 2) / (2 * s1**2) - 0.5
        got = float(gaussian_kld([m0], [[s0**2]], [m1], [[s1**2]], jitter=0.0).data)
        uni_worst = max(uni_worst, abs(got - exact))
    mc_worst = 0.0
    for seed in range(3):
        g = np.random.default_rng(100 + seed)
        mu0, mu1 = g.normal(size=2), g.normal(size=2)
        a, b = g.normal(size=(2, 2)), g.normal(size=(2, 2))
        c0, c1 = a @ a.T + 0.5 * np.eye(2), b @ b.T + 0.5 * np.eye(2)
        x = g.multivariate_normal(mu0, c0, size=1_000_000)
        mc = np.mean(multivariate_normal(mu0, c0).logpdf(x) - multivariate_normal(mu1, c1).logpdf(x))
        exact = float(gaussian_kld(mu0, c0, mu1, c1, jitter=0.0).data)
        mc_worst = max(mc_worst, abs(exact - mc) / mc)
    verdict("Gaussian-KLD oracle", uni_worst < 1e-9 and mc_worst < 0.02,
            f"univariate max abs error {uni_worst:.1e} (< 1e-9), D=2 Monte-Carlo max rel gap {mc_worst:.2%} (< 2%)")


def test_assignment_correctness():
    r = np.random.default_rng(0)
    brute_bad = 0
    for trial in range(200):
        k = 2 + trial % 6
        C = r.uniform(size=(k, k))
        best = max(sum(C[i, p[i]] for i in range(k)) for p in permutations(range(k)) if all(p[i] != i for i in range(k)))
        m = exact_mapping(C)
        brute_bad += not (is_derangement(m) and abs(mapping_objective(C, m) - best) < 1e-12)
    fixture = np.array([[0.0, 0.9, 0.05], [0.2, 0.0, 0.6], [0.5, 0.3, 0.0]])
    fixture_ok = greedy_mapping(fixture).tolist() == [1, 2, 0]
    dominated = 0
    for _ in range(1000):
        k = int(r.integers(2, 11))
        C = r.dirichlet(np.ones(k), size=k)
        dominated += mapping_objective(C, exact_mapping(C)) < mapping_objective(C, greedy_mapping(C)) - 1e-12
    verdict("assignment correctness", brute_bad == 0 and fixture_ok and dominated == 0,
            f"brute-force mismatches {brute_bad}/200 (K<=7), hand-traced greedy fixture "
            f"{'reproduced' if fixture_ok else 'NOT reproduced'}, exact < greedy on {dominated}/1000")


def test_surrogate_distillation_descent(reference_config, reference_source):
    wins = []
    for seed in range(20):
        stream = prepare_stream(reference_config, seed)
        seg = stream.segments[0]
        online = Victim(reference_source, TtaConfig(method="tent-lite", lr=1.0), seed=seed)
        for j in range(min(4, len(seg.benign_x) // 16)):  # let the online model drift on benign traffic first
            online.step(seg.benign_x[16 * j:16 * (j + 1)])
        _, info = online.step(seg.adversary_x[:16])
        sur = SurrogateState.from_source(reference_source, lr=0.1, iterations=10)
        trace = distill(sur, seg.adversary_x[:16], info.posteriors)
        wins.append(trace[-1] < trace[0])
    verdict("surrogate distillation descent", sum(wins) >= 19,
            f"final < initial symmetric KLD on {sum(wins)}/20 seeds (>= 19)")


def _craft(reference, kind, x, y, pgd, seed, pinned=False):
    """One poisoned batch against a frozen reference, as the adversary would craft it."""
    obj = AttackObjective(kind)
    obj.reset(reference.num_classes)
    batch = PoisonBatch(x, y, budget=pgd.budget, step_size=pgd.step_size, steps=pgd.steps)
    lag = LagrangeState.zeros(reference.n_bn, rate=pgd.lagrange_rate, pinned=pinned)
    synthesize(batch, obj, reference, lagrange=lag, rng=np.random.default_rng(seed),
               reg_reduction=pgd.reg_reduction, clean_norm=pgd.clean_norm)
    return poison_diagnostics(reference, batch.clean, batch.poisoned, clean_norm=pgd.clean_norm)


def _adversary_batches(config, seed, per_segment=2, n=16):
    stream = prepare_stream(config, seed)
    for seg in stream.segments:
        for j in range(per_segment):
            yield seg.adversary_x[n * j:n * (j + 1)], seg.adversary_y[n * j:n * (j + 1)]


def test_regularizer_mechanism(reference_config, reference_source, grid):
    pgd = reference_config.pgd
    lower = []
    for seed in range(10):
        kld = {pinned: np.mean([_craft(reference_source, "NHE", x, y, pgd, seed, pinned)["mean_kld"]
                                for x, y in _adversary_batches(reference_config, seed)])
               for pinned in (False, True)}
        lower.append(kld[False] < kld[True])
    report, _ = grid
    with_reg, without = _errors(report, TENT, "NHE"), _errors(report, TENT, "NHE-noreg")
    asr_wins = int(np.sum(with_reg > without))
    ok = sum(lower) >= 9 and len(with_reg) >= 10 and asr_wins >= 8
    verdict("regularizer mechanism", ok,
            f"feature KLD lower with lambda ascent on {sum(lower)}/10 seeds (>= 9); tent-lite ASR with L_reg "
            f"above without on {asr_wins}/{len(with_reg)} seeds (>= 8) [mean {with_reg.mean():.1f} vs "
            f"{without.mean():.1f}, ties {int(np.sum(with_reg == without))}]")


def test_entropy_separation(reference_config, reference_source, grid):
    """Both objectives craft on the same adversary batches against the same surrogate.

    The surrogate is the one every run starts from (a copy of the source).
    In-grid entropies are printed for context only: NHE there runs against a
    collapsing tent-lite victim, whose distilled surrogate is confident on
    everything, so the two cells are not comparable.
    """
    pgd = reference_config.pgd
    wins, nhe, ble = 0, [], []
    for seed in reference_config.seeds:
        batches = list(_adversary_batches(reference_config, seed))
        h_nhe = np.mean([_craft(reference_source, "NHE", x, y, pgd, seed)["entropy"] for x, y in batches])
        h_ble = np.mean([_craft(reference_source, "BLE", x, y, pgd, seed)["entropy"] for x, y in batches])
        nhe.append(h_nhe)
        ble.append(h_ble)
        wins += h_nhe > h_ble
    report, _ = grid
    g_nhe = _diagnostics(report, TENT, "NHE", "entropy").mean()
    g_ble = _diagnostics(report, EATA, "BLE", "entropy").mean()
    n = len(reference_config.seeds)
    verdict("entropy separation", wins == n,
            f"NHE > BLE surrogate entropy on {wins}/{n} seeds [NHE mean {np.mean(nhe):.3f} nats, BLE mean "
            f"{np.mean(ble):.3f} nats; in-grid tent-lite NHE {g_nhe:.3f} vs eata-lite BLE {g_ble:.3f}]")


def test_budget_safety(grid):
    report, _ = grid
    diags = [d for r in report.runs if "adversary" in r.extras for d in r.extras["adversary"].diagnostics]
    worst = max(d["eps_inf"] for d in diags)
    box = all(d["box_ok"] for d in diags)
    verdict("budget safety", worst <= 0.3 + 1e-9 and box,
            f"{len(diags)} poisoned batches, max |eps|_inf {worst:.12f} (<= 0.3 + 1e-9), "
            f"all inside [0, 1]: {box}")


def test_grey_box_audit(grid):
    report, _ = grid
    bad = [r for r in report.runs if not (
        r.audit["passed"] and r.audit["parameter_reads"] == 0
        and r.audit["online_forwards"] == r.audit["batches"] and r.audit["max_online_forwards_per_batch"] == 1
        and r.audit["benign_indices_at_surrogate"] == 0)]
    verdict("grey-box audit", not bad,
            f"{len(report.runs) - len(bad)}/{len(report.runs)} runs with zero parameter reads, one online "
            f"forward per batch and adversary-only surrogate inputs")


def test_attack_effectiveness(grid):
    report, _ = grid
    nhe_gain = _errors(report, TENT, "NHE").mean() - _errors(report, TENT, "none").mean()
    ble_gain = _errors(report, EATA, "BLE").mean() - _errors(report, EATA, "none").mean()
    verdict("attack effectiveness", nhe_gain >= 10.0 and ble_gain >= 5.0,
            f"tent-lite NHE over baseline {nhe_gain:+.1f} points (>= +10); "
            f"eata-lite BLE over baseline {ble_gain:+.1f} points (>= +5)")


def test_defense_stack(grid):
    report, _ = grid
    tent, thresh = _errors(report, TENT, "NHE").mean(), _errors(report, THRESH, "NHE").mean()
    aug, ema = _errors(report, AUG, "NHE").mean(), _errors(report, EMA, "NHE").mean()
    ok = thresh < tent and ema < aug and ema < thresh
    verdict("defense stack", ok,
            f"NHE ASR tent-lite {tent:.1f} > +thresh {thresh:.1f}; +thresh+aug {aug:.1f} > +ema {ema:.1f} "
            f"(and +ema < +thresh)")


def test_end_to_end_budget(grid):
    report, elapsed = grid
    verdict("end-to-end budget", elapsed < 1800.0,
            f"pretraining plus {len(report.runs)} runs in {elapsed / 60:.1f} min (< 30 min) "
            f"on {os.cpu_count()} core(s)")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
