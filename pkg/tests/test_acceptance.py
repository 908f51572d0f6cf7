"""Headline acceptance criteria, each at its stated tolerance and scale.

Every test records a one-line verdict (printed in the terminal summary and to
stdout) before asserting, so a failing criterion still reports its numbers.
The ablation and sweep run the default configuration end to end through the
CLI and take roughly half an hour together on one CPU.
"""
import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from irdfusion import irdt
from irdfusion.cli import main
from irdfusion.fusion import (
    FusionConfig,
    compute_lambda,
    dffm_step,
    flatten_pe,
    init_dffm,
    init_fusion_params,
    mfrm_forward,
    reshape_map,
)
from irdfusion.kernel import Tensor
from irdfusion.oracle import relative_deviation, self_attention_reference
from irdfusion.verify import grad_suite, identity_suite


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="module")
def identity_report():
    t0 = time.perf_counter()
    report = identity_suite(seeds=100, N=16, d=8)
    return report, time.perf_counter() - t0


def test_relation_map_identity(identity_report):
    report, secs = identity_report
    ok = report["max_deviation"] < 1e-10 and secs < 10.0
    record("relation-map identity", ok,
           f"max relative deviation {report['max_deviation']:.2e} (< 1e-10) over 100 seeds, {secs:.2f}s (< 10s)")
    assert ok


def test_feedback_self_consistency(identity_report):
    report, _ = identity_report
    ok = report["max_feedback_deviation"] < 1e-10
    record("feedback self-consistency", ok,
           f"max relative deviation {report['max_feedback_deviation']:.2e} (< 1e-10) over 100 seeds")
    assert ok


def test_gradient_suite():
    t0 = time.perf_counter()
    report = grad_suite(K=2, seed=0, h=1e-5)
    secs = time.perf_counter() - t0
    ok = report["max_relative_error"] < 1e-5 and secs < 300.0 and len(report["groups"]) == 8
    worst = max(report["groups"], key=report["groups"].get)
    record("gradient suite", ok,
           f"max relative error {report['max_relative_error']:.2e} (< 1e-5, worst group {worst}) "
           f"over {len(report['groups'])} groups, {secs:.1f}s (< 300s)")
    assert ok


def test_common_mode_rejection():
    cfg = FusionConfig()
    dp = init_dffm("dffm_v", cfg, np.random.default_rng(0))
    dp.mu.assign(np.array(0.8125))
    rng = np.random.default_rng(1)
    Fp = Tensor(rng.normal(size=(16, 8)))
    F_k = Tensor(rng.normal(size=(16, 8)))
    F_next, F_dif = dffm_step(Fp, Tensor(Fp.data.copy()), F_k, dp)
    zero_dif = not F_dif.data.any()
    exact = F_next.data.tobytes() == (0.8125 * F_k.data).tobytes()
    ok = zero_dif and exact and float(dp.beta.value.data) == 1.0 and not dp.w2.value.data.any()
    record("common-mode rejection", ok,
           f"F_dif all zero: {zero_dif}; F_next == mu*F_k bit-exact: {exact}")
    assert ok


def test_lambda_neutrality():
    rng = np.random.default_rng(2)
    # equal inner products force λ == λ_init exactly
    exact = []
    for init in (0.5, -0.3, 0.0, 1.75):
        q, k = Tensor(rng.normal(size=8)), Tensor(rng.normal(size=8))
        exact.append(compute_lambda(q, k, q, k, init).item() == init)
    cfg = FusionConfig(pe="none", dropout_p=0.0, lambda_init=0.0)
    params = init_fusion_params(cfg, rng).mfrm
    for mp in (params.v, params.t):
        q, k = rng.normal(size=8), rng.normal(size=8)
        mp.lambda_q1.assign(q), mp.lambda_q2.assign(q)
        mp.lambda_k1.assign(k), mp.lambda_k2.assign(k)
    F_v, F_t = rng.normal(size=(16, 8)), rng.normal(size=(16, 8))
    _, _, it = mfrm_forward(Tensor(F_v), Tensor(F_t), params)
    devs = []
    for F, mp, pre in ((F_v, params.v, it.pre_v), (F_t, params.t, it.pre_t)):
        A, AV = self_attention_reference(F, mp.wq.value, mp.wk.value, mp.wv.value)
        devs.append(relative_deviation(pre, AV)[0])
        devs.append(relative_deviation(it.A_v if mp is params.v else it.A_t, A)[0])
    ok = all(exact) and max(devs) < 1e-12
    record("lambda neutrality", ok,
           f"lambda == lambda_init exactly: {all(exact)}; max deviation from self-attention "
           f"reference {max(devs):.2e} (< 1e-12)")
    assert ok


# ------------------------------------------------------- full-scale harness


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation")
    t0 = time.perf_counter()
    rc = main(["ablate", "--out", str(out)])
    secs = time.perf_counter() - t0
    return rc, json.loads((out / "ablation.json").read_text()), secs


@pytest.mark.slow
def test_ablation_ordering(ablation):
    rc, report, secs = ablation
    med = {row["variant"]: row["median_test_soft_iou"] for row in report["table"]}
    ok = (rc == 0 and len(report["seeds"]) == 5 and med["full"] > med["baseline_concat"]
          and med["full"] >= med["mfrm_only"] and secs < 1200.0)
    record("ablation ordering", ok,
           "median soft-IoU " + ", ".join(f"{v} {m:.4f}" for v, m in med.items())
           + f"; full > baseline_concat and full >= mfrm_only; 5 seeds, {secs / 60:.1f} min (< 20 min)")
    assert ok


@pytest.mark.slow
def test_full_variant_learns_every_seed(ablation):
    _, report, _ = ablation
    full = [r for r in report["runs"] if r["variant"] == "full"]
    assert len(full) == 5
    for r in full:
        assert r["train_loss"][-1] < 0.9 * r["initial_train_loss"], r["seed"]


@pytest.mark.slow
def test_iteration_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    t0 = time.perf_counter()
    rc = main(["sweep-iters", "--out", str(out), "--train.seeds", "0,1,2", "--train.K_values", "1,2,3,4,5,6"])
    secs = time.perf_counter() - t0
    report = json.loads((out / "sweep.json").read_text())
    finite = all(np.isfinite(r[key]) for r in report["runs"]
                 for key in ("final_test_loss", "test_soft_iou", "test_iou_thresholded"))
    finite = finite and all(np.isfinite(x) for r in report["runs"] for x in r["train_loss"])
    ok = (rc == 0 and finite and secs < 1800.0 and report["K_values"] == [1, 2, 3, 4, 5, 6]
          and report["seeds"] == [0, 1, 2] and report["paper_reference_optimum"] == 4
          and report["argmax_K"] in report["K_values"])
    table = ", ".join(f"K={r['K']} {r['median_test_soft_iou']:.4f}" for r in report["table"])
    record("iteration sweep", ok,
           f"{table}; argmax K={report['argmax_K']} (paper reference 4); all metrics finite: {finite}; "
           f"{secs / 60:.1f} min (< 30 min)")
    assert ok


# ------------------------------------------------ determinism and round-trips

SMALL = {
    "scene": {"H": 6, "W": 6, "extent_min": 2, "extent_max": 3},
    "train": {"epochs": 2, "n_train": 3, "n_test": 2, "seeds": [0, 1, 2], "K_values": [1, 2]},
    "fusion": {"K": 2},
}


def _outputs(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    rng = np.random.default_rng(0)
    irdt.write(tmp_path / "v.irdt", rng.normal(size=(8, 6, 6)))
    irdt.write(tmp_path / "t.irdt", rng.normal(size=(8, 6, 6)))
    common = ["--config", str(cfg), "--seed", "1"]
    commands = {
        "gen-data": lambda o: ["gen-data", *common, "--out", o],
        "train": lambda o: ["train", *common, "--out", o],
        "eval": lambda o: ["eval", "--checkpoint", str(tmp_path / "train-a" / "checkpoint"), "--out", o],
        "ablate": lambda o: ["ablate", *common, "--out", o],
        "sweep-iters": lambda o: ["sweep-iters", *common, "--out", o],
        "fuse": lambda o: ["fuse", *common, "--map-v", str(tmp_path / "v.irdt"),
                           "--map-t", str(tmp_path / "t.irdt"), "--out", o],
        "check-identity": lambda o: ["check-identity", "--seeds", "5", "--out", o],
        "grad-check": lambda o: ["grad-check", "--k", "1", "--out", o],
    }
    mismatched, counted = [], 0
    for name, argv in commands.items():
        snaps = []
        for tag in ("a", "b"):
            out = tmp_path / f"{name}-{tag}"
            assert main(argv(str(out))) == 0, name
            snaps.append(_outputs(out))
        counted += len(snaps[0])
        if not snaps[0] or snaps[0] != snaps[1]:
            mismatched.append(name)
    ok = not mismatched
    record("determinism", ok,
           f"{len(commands)} subcommands re-run, {counted} JSON/IRDT/PGM outputs compared byte-for-byte; "
           f"mismatches: {mismatched or 'none'}")
    assert ok


def test_round_trips(tmp_path):
    rng = np.random.default_rng(7)
    bad_flat, bad_irdt = 0, 0
    for i in range(100):
        C, H, W = (int(x) for x in rng.integers(1, 9, size=3))
        m = rng.normal(size=(C, H, W)) * 10.0 ** rng.integers(-6, 6)
        if reshape_map(flatten_pe(m, "none"), H, W).data.tobytes() != m.tobytes():
            bad_flat += 1
        ndim = int(rng.integers(0, 5))
        t = rng.normal(size=tuple(int(x) for x in rng.integers(1, 6, size=ndim)))
        irdt.write(tmp_path / f"{i}.irdt", t)
        back = irdt.read(tmp_path / f"{i}.irdt").data
        if back.shape != t.shape or back.tobytes() != t.tobytes():
            bad_irdt += 1
    ok = bad_flat == 0 and bad_irdt == 0
    record("round-trips", ok,
           f"flatten/reshape {100 - bad_flat}/100 bit-exact; IRDT write/read {100 - bad_irdt}/100 bit-exact")
    assert ok
