"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""
import copy
import time

import numpy as np
import pytest

from fscil import numerics as nx
from fscil.harness import ExperimentConfig, load_benchmark, run
from fscil.losses import (LossParts, LossWeights, feature_kd, logit_kd, loss_cls, loss_cls_old, loss_feat,
                          loss_logit, loss_total, teacher_distribution)
from fscil.model import Extractor, ExtractorConfig, extract
from fscil.numerics import Parameter
from fscil.protocol import run_base_session, run_benchmark
from fscil.triwe import TriWEHead, compose, init_session, normalize_alphas
from test_triwe import oracle_compose

SEEDS = [0, 1, 2, 3, 4]


@pytest.fixture(scope="module")
def reference_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("reference")
    cfg = ExperimentConfig(seeds=SEEDS)
    start = time.perf_counter()
    reports = run(cfg, out)
    return reports, out, time.perf_counter() - start


def avg(reports, mode):
    return np.array([r["modes"][mode]["avg_acc"] for r in reports])


def test_1_alpha_normalization(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for a1, a2 in rng.uniform(0.0, 5.0, size=(1000, 2)):
        c = [float(v.data) for v in normalize_alphas(a1, a2)]
        worst = max(worst, abs(sum(c[:3]) - 1.0), abs(c[3] + c[4] - 1.0))
    exact = all(np.allclose([float(v.data) for v in normalize_alphas(a1, a2)], ref, atol=1e-15) for a1, a2, ref in [
        (0.0, 0.0, [0, 0, 1, 0, 1]), (1.0, 1.0, [1 / 3, 1 / 3, 1 / 3, 0.5, 0.5]), (2.0, 0.0, [2 / 3, 0, 1 / 3, 0, 1])])
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and exact and elapsed < 1.0
    acceptance_log("1 alpha normalization", ok, f"max |sum-1|={worst:.1e}, {elapsed:.2f}s")
    assert ok


def test_2_compose_matches_oracle(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    mismatches = 0
    for _ in range(100):
        d = int(rng.integers(1, 9))
        n0 = int(rng.integers(1, 9))
        nprev = int(rng.integers(n0, 13))
        nt = int(rng.integers(nprev, 17))
        a1, a2 = rng.uniform(0.0, 5.0, size=2)
        head = TriWEHead(Parameter("p0", rng.normal(size=(d, n0))), Parameter("po", rng.normal(size=(d, nprev))),
                         Parameter("pa", rng.normal(size=(d, nt))), Parameter("x", 0.0), Parameter("y", 0.0),
                         n0, nprev, nt, float(a1), float(a2))
        ref = oracle_compose(head.phi0.data, head.phi_old.data, head.phi_all.data, a1, a2, n0, nprev, nt)
        mismatches += not np.array_equal(compose(head).data, ref)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 1.0
    acceptance_log("2 compose bit-identical", ok, f"{mismatches}/100 mismatches, {elapsed:.2f}s")
    assert ok


def _gradient_setup():
    rng = np.random.default_rng(2)
    cfg = ExtractorConfig(4, 4, 1, "mlp", [6], 5)
    teacher = Extractor(cfg, 0)
    student = teacher.clone()
    for p in student.params():
        p.data = p.data + 0.05 * rng.normal(size=p.shape)
    n0, nprev, nnew = 2, 4, 2
    phi0 = rng.normal(size=(5, n0))
    prev = rng.normal(size=(5, nprev))
    head = init_session(prev, phi0, rng.normal(size=(5, nnew)), t=2, alpha_init=0.8)
    head.alpha2.data = np.array(0.3)
    x = rng.random((4, 4, 4, 1))
    y = np.array([4, 5, 4, 5])
    amp = rng.random((6, 4, 4, 1))
    protos, plabels = rng.normal(size=(nprev, 5)), np.arange(nprev)
    return teacher, student, prev, head, x, y, amp, protos, plabels


def test_3_gradients_match_finite_differences(acceptance_log):
    start = time.perf_counter()
    teacher, student, prev, head, x, y, amp, protos, plabels = _gradient_setup()
    weights = LossWeights()
    losses = {
        "cls": lambda: loss_cls(compose(head), extract(student, x), y, protos, plabels),
        "cls_old": lambda: loss_cls_old(head.phi_old, protos, plabels),
        "feat": lambda: loss_feat(teacher, student, amp),
        "logit": lambda: loss_logit(teacher, prev, student, compose(head), amp, prev.shape[1]),
        "total": lambda: loss_total(LossParts(
            loss_cls(compose(head), extract(student, x), y, protos, plabels),
            loss_cls_old(head.phi_old, protos, plabels),
            loss_feat(teacher, student, amp),
            loss_logit(teacher, prev, student, compose(head), amp, prev.shape[1])), weights),
    }
    params = [p for p in student.params() + head.params() if p.group != "frozen"]
    worst = 0.0
    for build in losses.values():
        nx.backward(build())
        for p in params:
            analytic = p.grad.copy()
            numeric = nx.finite_diff_grad(build, p, 1e-6)
            scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
            if scale > 1e-9:
                worst = max(worst, np.linalg.norm(analytic - numeric) / scale)
            p.zero_grad()
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 30.0
    acceptance_log("3 gradients vs finite differences", ok, f"max rel err {worst:.1e}, {elapsed:.1f}s")
    assert ok


def test_4_zero_alphas_reduce_to_plain_head(acceptance_log):
    cfg = ExperimentConfig(seeds=[0])
    bench = load_benchmark(cfg)
    base = cfg.base_config(bench.image_shape)
    base_result = run_base_session(bench, base, 0, cfg.scale)
    plain = cfg.session_config("no-we")
    pinned = copy.deepcopy(cfg.session_config("tri-we"))
    pinned.fixed_alphas = (0.0, 0.0)
    _, a = run_benchmark(bench, base, pinned, 0, base_result)
    _, b = run_benchmark(bench, base, plain, 0, base_result)
    diff = float(np.max(np.abs(a.deployed.weight - b.deployed.weight)))
    ok = diff <= 1e-12
    acceptance_log("4 fixed zero alphas equal plain head", ok, f"max diff {diff:.1e}")
    assert ok


def test_5_distillation_fixed_points(acceptance_log):
    rng = np.random.default_rng(5)
    ex = Extractor(ExtractorConfig(), 0)
    x = rng.random((8, 8, 8, 1))
    phi = rng.normal(size=(32, 6))
    feat = float(loss_feat(ex, ex.clone(), x).data)
    p = teacher_distribution(ex, phi, x)
    entropy = float(-np.mean(np.sum(p * np.log(p), axis=1)))
    logit = float(logit_kd(p, extract(ex.clone(), x), np.concatenate([phi, rng.normal(size=(32, 5))], 1), 6).data)
    ok = feat == 0.0 and abs(logit - entropy) <= 1e-10
    acceptance_log("5 distillation fixed points", ok, f"feat={feat}, |logit-H|={abs(logit - entropy):.1e}")
    assert ok


def test_6_tri_we_beats_baselines(reference_run, acceptance_log):
    reports, _, elapsed = reference_run
    tri, naive, nowe = avg(reports, "tri-we"), avg(reports, "naive"), avg(reports, "no-we")
    margin = float(np.mean(tri - naive))
    clear = int(np.sum(tri - naive >= 0.05))
    wins = int(np.sum(tri >= nowe))
    ok = margin >= 0.05 and clear >= 4 and wins >= 4 and elapsed < 300
    acceptance_log("6 tri-we vs naive and no-we", ok,
                   f"mean margin {margin:.3f}, >= 0.05 over naive in {clear}/5, >= no-we in {wins}/5, "
                   f"{elapsed:.0f}s")
    assert ok


def test_7_amplified_distillation_helps(reference_run, acceptance_log):
    reports, _, _ = reference_run
    wins = int(np.sum(avg(reports, "tri-we") >= avg(reports, "tri-we:none")))
    ok = wins >= 3
    acceptance_log("7 cutmix distillation vs raw", ok, f"{wins}/5 seeds")
    assert ok


def test_8_base_forgetting(reference_run, acceptance_log):
    reports, _, _ = reference_run
    drop = lambda m: np.array([r["modes"][m]["base_drop"] for r in reports])  # noqa: E731
    wins = int(np.sum(drop("tri-we") < drop("naive")))
    ok = wins >= 4
    acceptance_log("8 base-accuracy drop", ok, f"tri-we smaller in {wins}/5 seeds")
    assert ok


def test_9_invariants_hold(reference_run, acceptance_log):
    reports, _, _ = reference_run
    expected = [20 + 5 * t for t in range(5)]
    ok = all(all(r["invariants"].values()) and all(m["buffer_sizes"] == expected for m in r["modes"].values())
             for r in reports)
    acceptance_log("9 run invariants", ok, f"{len(reports)} seeds x {len(reports[0]['modes'])} modes")
    assert ok


def test_10_csv_reproducible(reference_run, tmp_path, acceptance_log):
    _, out, _ = reference_run
    run(ExperimentConfig(seeds=SEEDS), tmp_path)
    ok = (out / "results.csv").read_bytes() == (tmp_path / "results.csv").read_bytes()
    acceptance_log("10 byte-identical CSV", ok, "two runs of the reference config")
    assert ok
