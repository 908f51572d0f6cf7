"""Relation-map reformulation of the refinement difference, as a verification oracle.

Everything here is written with explicit Python loops over nested lists so
that no matrix product is shared with :mod:`irdfusion.fusion`; agreement
between the two paths is therefore evidence rather than a tautology.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernel import ShapeError, Tensor


class EquivalenceError(AssertionError):
    """Two computation paths disagree beyond tolerance."""

    def __init__(self, deviation: float, tol: float, index: tuple[int, ...]):
        super().__init__(f"max relative deviation {deviation:.3e} exceeds {tol:.1e} at element {index}")
        self.deviation = deviation
        self.index = index


def _rows(x) -> list[list[float]]:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"oracle expects 2-d operands, got shape {arr.shape}")
    return arr.tolist()


def _loop_matmul(a: list[list[float]], b: list[list[float]]) -> list[list[float]]:
    n, k, m = len(a), len(b), len(b[0])
    if len(a[0]) != k:
        raise ShapeError(f"oracle product: {len(a)}x{len(a[0])} by {k}x{m}")
    out = []
    for i in range(n):
        row = [0.0] * m
        ai = a[i]
        for p in range(k):
            aip = ai[p]
            bp = b[p]
            for j in range(m):
                row[j] += aip * bp[j]
        out.append(row)
    return out


@dataclass
class RelationCoeffs:
    C_v2v: Tensor
    C_t2t: Tensor
    beta: float
    lambda_v: float
    lambda_t: float


def relation_coeffs(A_v, A_t, lambda_v: float, lambda_t: float, beta: float) -> RelationCoeffs:
    """``C_v2v = A_v - β λ_t A_t`` and ``C_t2t = β A_t - λ_v A_v``, element by element."""
    av, at = _rows(A_v), _rows(A_t)
    n = len(av)
    if any(len(r) != n for r in av) or len(at) != n or any(len(r) != n for r in at):
        raise ShapeError("relation_coeffs: attention maps must be square and the same size")
    lv, lt, b = float(lambda_v), float(lambda_t), float(beta)
    c_v = [[av[i][j] - b * lt * at[i][j] for j in range(n)] for i in range(n)]
    c_t = [[b * at[i][j] - lv * av[i][j] for j in range(n)] for i in range(n)]
    return RelationCoeffs(Tensor(c_v), Tensor(c_t), b, lv, lt)


def differential_via_relation(c: RelationCoeffs, V_v, V_t) -> Tensor:
    """``C_v2v V_v - C_t2t V_t``."""
    vv, vt = _rows(V_v), _rows(V_t)
    if len(vv) != len(vt) or len(vv[0]) != len(vt[0]):
        raise ShapeError("differential_via_relation: V_v and V_t shapes differ")
    left = _loop_matmul(_rows(c.C_v2v), vv)
    right = _loop_matmul(_rows(c.C_t2t), vt)
    return Tensor([[l - r for l, r in zip(lr, rr)] for lr, rr in zip(left, right)])


def feedback_update_relation(F_vt, Fp_t, beta: float) -> Tensor:
    """``F_vt + β F'_t``, which should reproduce the refined RGB feature exactly."""
    a, b = _rows(F_vt), _rows(Fp_t)
    if len(a) != len(b) or len(a[0]) != len(b[0]):
        raise ShapeError("feedback_update_relation: shapes differ")
    bt = float(beta)
    return Tensor([[x + bt * y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)])


def refined_reference(A, V_self, V_other, lam: float) -> Tensor:
    """``A (V_self + λ V_other)`` by loops."""
    vs, vo = _rows(V_self), _rows(V_other)
    fused = [[s + lam * o for s, o in zip(rs, ro)] for rs, ro in zip(vs, vo)]
    return Tensor(_loop_matmul(_rows(A), fused))


def self_attention_reference(F, Wq, Wk, Wv) -> tuple[Tensor, Tensor]:
    """Plain single-modality self-attention; returns ``(A, A V)``."""
    f = _rows(F)
    q, k, v = (_loop_matmul(f, _rows(w)) for w in (Wq, Wk, Wv))
    d = len(q[0])
    inv = 1.0 / math.sqrt(d)
    att = []
    for qi in q:
        logits = [sum(a * b for a, b in zip(qi, kj)) * inv for kj in k]
        top = max(logits)
        e = [math.exp(x - top) for x in logits]
        s = sum(e)
        att.append([x / s for x in e])
    return Tensor(att), Tensor(_loop_matmul(att, v))


def relative_deviation(direct, oracle) -> tuple[float, tuple[int, ...]]:
    a = direct.data if isinstance(direct, Tensor) else np.asarray(direct, dtype=np.float64)
    b = oracle.data if isinstance(oracle, Tensor) else np.asarray(oracle, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare shapes {a.shape} and {b.shape}")
    if a.size == 0:
        return 0.0, ()
    diff = np.abs(a - b) / (np.max(np.abs(a)) + 1e-12)
    idx = np.unravel_index(int(np.argmax(diff)), diff.shape)
    return float(diff[idx]), tuple(int(i) for i in idx)


def assert_equivalence(direct, oracle, tol: float) -> float:
    """Max of ``|a-b| / (max|a| + 1e-12)``; raises :class:`EquivalenceError` above ``tol``."""
    dev, idx = relative_deviation(direct, oracle)
    if dev > tol:
        raise EquivalenceError(dev, tol, idx)
    return dev
