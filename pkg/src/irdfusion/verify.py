"""Runnable verification suites: relation-map identity and finite-difference gradients."""
from __future__ import annotations

import numpy as np

from .fusion import (
    FeatureMapPair,
    FusionConfig,
    init_fusion_params,
    irdfusion_forward,
    mfrm_forward,
    param_role,
)
from .kernel import Tensor, finite_diff_errors, mul, sum_all
from .oracle import (
    differential_via_relation,
    feedback_update_relation,
    refined_reference,
    relation_coeffs,
    relative_deviation,
)

IDENTITY_TOL = 1e-10
GRAD_TOL = 1e-5


def identity_case(seed: int, N: int = 16, d: int = 8) -> dict:
    """Compare the direct pre-norm difference against the relation-map oracle for one seed."""
    rng = np.random.default_rng([seed, N, d])
    cfg = FusionConfig(d=d, d_h=2 * d, d_lambda=d, K=1, pe="none", dropout_p=0.0,
                       lambda_init=float(rng.uniform(-1.0, 1.0)))
    params = init_fusion_params(cfg, rng).mfrm
    # spread the λ-vectors so λ_v, λ_t are far from λ_init
    for mp in (params.v, params.t):
        for p in (mp.lambda_q1, mp.lambda_k1, mp.lambda_q2, mp.lambda_k2):
            p.assign(rng.normal(0.0, 0.5, p.shape))
    beta = float(rng.uniform(0.25, 1.75))
    F_v = Tensor(rng.normal(size=(N, d)))
    F_t = Tensor(rng.normal(size=(N, d)))
    _, _, it = mfrm_forward(F_v, F_t, params)
    lam_v, lam_t = it.lambda_v.item(), it.lambda_t.item()

    direct = it.pre_v.data - beta * it.pre_t.data
    coeffs = relation_coeffs(it.A_v, it.A_t, lam_v, lam_t, beta)
    via_relation = differential_via_relation(coeffs, it.V_v, it.V_t)
    dev8, _ = relative_deviation(direct, via_relation)

    fp_t_ref = refined_reference(it.A_t, it.V_t, it.V_v, lam_t)
    rebuilt_v = feedback_update_relation(via_relation, fp_t_ref, beta)
    fp_v_ref = refined_reference(it.A_v, it.V_v, it.V_t, lam_v)
    dev9, _ = relative_deviation(fp_v_ref, rebuilt_v)
    dev9_direct, _ = relative_deviation(it.pre_v, rebuilt_v)
    return {"seed": seed, "relation_deviation": dev8,
            "feedback_deviation": max(dev9, dev9_direct)}


def identity_suite(seeds: int = 100, N: int = 16, d: int = 8, tol: float = IDENTITY_TOL) -> dict:
    cases = [identity_case(s, N, d) for s in range(seeds)]
    max_dev = max((c["relation_deviation"] for c in cases), default=0.0)
    max_fb = max((c["feedback_deviation"] for c in cases), default=0.0)
    return {
        "seeds": seeds,
        "N": N,
        "d": d,
        "tol": tol,
        "max_deviation": max_dev,
        "max_feedback_deviation": max_fb,
        "pass": bool(max_dev < tol and max_fb < tol),
    }


GRAD_GROUPS = {
    "projection": "Wq/Wk/Wv",
    "lambda_vector": "lambda-vectors",
    "alpha": "alpha",
    "beta": "beta",
    "mu": "mu",
    "mlp": "MLP",
    "layer_norm": "LN",
    "merge": "merge projection",
}


def _group(name: str) -> str:
    role = param_role(name)
    if role == "feedback_gain":
        return name.rsplit(".", 1)[-1]
    return role


def gradient_problem(K: int = 2, seed: int = 0, merge_mode: str = "concat_project",
                     C: int = 4, H: int = 3, W: int = 2):
    """A small fusion problem with every parameter group on a live gradient path.

    Returns ``(loss_fn, params)``. The MLP output layers and feedback gains are
    moved off their identity-style initial values so LN/MLP gradients are non-zero.
    """
    rng = np.random.default_rng([seed, K, 7])
    cfg = FusionConfig(d=C, d_h=2 * C, d_lambda=C, K=K, merge_mode=merge_mode,
                       dropout_p=0.1, pe="sinusoidal2d", lambda_init=0.5)
    params = init_fusion_params(cfg, rng)
    for dp in (params.dffm_v, params.dffm_t):
        dp.w2.assign(rng.uniform(-0.5, 0.5, dp.w2.shape))
        dp.b2.assign(rng.uniform(-0.1, 0.1, dp.b2.shape))
        dp.b1.assign(rng.uniform(-0.1, 0.1, dp.b1.shape))
        for g in (dp.alpha, dp.beta, dp.mu):
            g.assign(rng.uniform(0.6, 1.2))
        dp.ln_gamma.assign(rng.uniform(0.8, 1.2, dp.ln_gamma.shape))
        dp.ln_beta.assign(rng.uniform(-0.1, 0.1, dp.ln_beta.shape))
    for mp in (params.mfrm.v, params.mfrm.t):
        for p in (mp.lambda_q1, mp.lambda_k1, mp.lambda_q2, mp.lambda_k2):
            p.assign(rng.normal(0.0, 0.3, p.shape))
        mp.ln_gamma.assign(rng.uniform(0.8, 1.2, mp.ln_gamma.shape))
        mp.ln_beta.assign(rng.uniform(-0.1, 0.1, mp.ln_beta.shape))
    pair = FeatureMapPair(rng.normal(size=(C, H, W)), rng.normal(size=(C, H, W)))
    weights = Tensor(rng.normal(size=(C, H, W)))

    def loss_fn():
        fused, _ = irdfusion_forward(pair, params, cfg, mode="eval")
        return sum_all(mul(fused, weights))

    return loss_fn, params.parameters()


def grad_suite(K: int = 2, seed: int = 0, h: float = 1e-5, tol: float = GRAD_TOL) -> dict:
    """Finite-difference check through the full fusion forward, reported per parameter group."""
    loss_fn, params = gradient_problem(K=K, seed=seed)
    per_param = finite_diff_errors(loss_fn, params, h)
    groups: dict[str, float] = {g: 0.0 for g in GRAD_GROUPS}
    for name, err in per_param.items():
        g = _group(name)
        groups[g] = max(groups.get(g, 0.0), err)
    max_err = max(groups.values())
    return {
        "K": K,
        "seed": seed,
        "h": h,
        "tol": tol,
        "groups": groups,
        "max_relative_error": max_err,
        "pass": bool(max_err < tol),
    }
