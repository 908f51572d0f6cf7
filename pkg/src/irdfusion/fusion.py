"""Mutual feature refinement, differential feedback, and their K-step loop.

Token tensors are ``(..., N, d)``; a leading batch axis is allowed everywhere
so the training harness can push several scenes through one call.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import irdt
from .kernel import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    concat_last,
    dot,
    dropout,
    exp,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    scale,
    softmax_rows,
    sub,
    transpose,
)

MERGE_MODES = ("sum", "concat_project")
PE_KINDS = ("sinusoidal2d", "none")

# Incremented by the gated primitives; the harness uses these to prove which
# paths a model variant actually exercised.
CALLS: Counter = Counter()


class ConfigError(ValueError):
    """A configuration field violates its invariant; ``field`` names it."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class FusionConfig:
    d: int = 8
    d_h: int = 32
    d_lambda: int = 8
    K: int = 4
    merge_mode: str = "sum"
    dropout_p: float = 0.1
    pe: str = "sinusoidal2d"
    lambda_init: float = 0.5

    def validate(self) -> "FusionConfig":
        for name in ("d", "d_h", "d_lambda", "K"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(name, f"must be an integer >= 1, got {v!r}")
        if self.merge_mode not in MERGE_MODES:
            raise ConfigError("merge_mode", f"must be one of {MERGE_MODES}, got {self.merge_mode!r}")
        if self.pe not in PE_KINDS:
            raise ConfigError("pe", f"must be one of {PE_KINDS}, got {self.pe!r}")
        if not isinstance(self.dropout_p, (int, float)) or not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p", f"must lie in [0, 1), got {self.dropout_p!r}")
        if not isinstance(self.lambda_init, (int, float)) or not math.isfinite(self.lambda_init):
            raise ConfigError("lambda_init", f"must be a finite number, got {self.lambda_init!r}")
        if self.pe == "sinusoidal2d" and (self.d % 2 or (self.d // 2) % 2):
            raise ConfigError("pe", f"sinusoidal2d needs d divisible by 4, got d={self.d}")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "FusionConfig":
        known = {f.name for f in fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(key, "unknown FusionConfig field")
        return cls(**raw).validate()

    @classmethod
    def from_json(cls, text: str) -> "FusionConfig":
        return cls.from_dict(json.loads(text))


# ------------------------------------------------------------------ parameters


@dataclass
class ModalityParams:
    """Projection, λ-reparameterization and LN&D weights of one modality."""

    wq: Parameter
    wk: Parameter
    wv: Parameter
    lambda_q1: Parameter
    lambda_k1: Parameter
    lambda_q2: Parameter
    lambda_k2: Parameter
    ln_gamma: Parameter
    ln_beta: Parameter

    def parameters(self) -> list[Parameter]:
        return [getattr(self, f.name) for f in fields(self)]


@dataclass
class MFRMParams:
    v: ModalityParams
    t: ModalityParams
    lambda_init: float = 0.5

    def __post_init__(self):
        for m in (self.v, self.t):
            d = m.wq.shape[0]
            for w in (m.wq, m.wk, m.wv):
                if w.shape != (d, d):
                    raise ShapeError(f"{w.name}: projection must be {d}x{d}, got {w.shape}")
            lam_shapes = {p.shape for p in (m.lambda_q1, m.lambda_k1, m.lambda_q2, m.lambda_k2)}
            if len(lam_shapes) != 1:
                raise ShapeError(f"λ-vectors of one modality must share a length, got {lam_shapes}")

    def modality(self, which: str) -> ModalityParams:
        return self.v if which == "v" else self.t

    def parameters(self) -> list[Parameter]:
        return self.v.parameters() + self.t.parameters()


@dataclass
class DFFMParams:
    """Feedback gains and the LN -> MLP applied to the differential feature."""

    alpha: Parameter
    beta: Parameter
    mu: Parameter
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter
    ln_gamma: Parameter
    ln_beta: Parameter

    def parameters(self) -> list[Parameter]:
        return [getattr(self, f.name) for f in fields(self)]


@dataclass
class MergeParams:
    w: Parameter
    b: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


@dataclass
class FusionParams:
    mfrm: MFRMParams
    dffm_v: DFFMParams
    dffm_t: DFFMParams
    merge: MergeParams | None = None

    def parameters(self) -> list[Parameter]:
        out = self.mfrm.parameters() + self.dffm_v.parameters() + self.dffm_t.parameters()
        if self.merge is not None:
            out += self.merge.parameters()
        return out


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


def init_modality(prefix: str, d: int, d_lambda: int, rng: np.random.Generator) -> ModalityParams:
    bound = 1.0 / math.sqrt(d)
    return ModalityParams(
        wq=Parameter(_uniform(rng, (d, d), bound), f"{prefix}.wq"),
        wk=Parameter(_uniform(rng, (d, d), bound), f"{prefix}.wk"),
        wv=Parameter(_uniform(rng, (d, d), bound), f"{prefix}.wv"),
        lambda_q1=Parameter(rng.normal(0.0, 0.1, d_lambda), f"{prefix}.lambda_q1"),
        lambda_k1=Parameter(rng.normal(0.0, 0.1, d_lambda), f"{prefix}.lambda_k1"),
        lambda_q2=Parameter(rng.normal(0.0, 0.1, d_lambda), f"{prefix}.lambda_q2"),
        lambda_k2=Parameter(rng.normal(0.0, 0.1, d_lambda), f"{prefix}.lambda_k2"),
        ln_gamma=Parameter(np.ones(d), f"{prefix}.ln_gamma"),
        ln_beta=Parameter(np.zeros(d), f"{prefix}.ln_beta"),
    )


def init_mfrm(cfg: FusionConfig, rng: np.random.Generator) -> MFRMParams:
    return MFRMParams(
        v=init_modality("mfrm.v", cfg.d, cfg.d_lambda, rng),
        t=init_modality("mfrm.t", cfg.d, cfg.d_lambda, rng),
        lambda_init=float(cfg.lambda_init),
    )


def init_dffm(prefix: str, cfg: FusionConfig, rng: np.random.Generator) -> DFFMParams:
    """Gains start at 1 and the MLP output layer at zero, so F_next = μ·F_k initially."""
    d, dh = cfg.d, cfg.d_h
    return DFFMParams(
        alpha=Parameter(np.array(1.0), f"{prefix}.alpha"),
        beta=Parameter(np.array(1.0), f"{prefix}.beta"),
        mu=Parameter(np.array(1.0), f"{prefix}.mu"),
        w1=Parameter(_uniform(rng, (d, dh), 1.0 / math.sqrt(d)), f"{prefix}.mlp.w1"),
        b1=Parameter(np.zeros(dh), f"{prefix}.mlp.b1"),
        w2=Parameter(np.zeros((dh, d)), f"{prefix}.mlp.w2"),
        b2=Parameter(np.zeros(d), f"{prefix}.mlp.b2"),
        ln_gamma=Parameter(np.ones(d), f"{prefix}.ln_gamma"),
        ln_beta=Parameter(np.zeros(d), f"{prefix}.ln_beta"),
    )


def init_merge(cfg: FusionConfig, rng: np.random.Generator, prefix: str = "merge") -> MergeParams:
    d = cfg.d
    return MergeParams(
        w=Parameter(_uniform(rng, (2 * d, d), 1.0 / math.sqrt(2 * d)), f"{prefix}.w"),
        b=Parameter(np.zeros(d), f"{prefix}.b"),
    )


def init_fusion_params(cfg: FusionConfig, rng: np.random.Generator) -> FusionParams:
    cfg.validate()
    mfrm = init_mfrm(cfg, rng)
    dffm_v = init_dffm("dffm_v", cfg, rng)
    dffm_t = init_dffm("dffm_t", cfg, rng)
    merge = init_merge(cfg, rng) if cfg.merge_mode == "concat_project" else None
    return FusionParams(mfrm, dffm_v, dffm_t, merge)


# ------------------------------------------------------- sequence <-> feature map


def positional_encoding_2d(H: int, W: int, d: int) -> np.ndarray:
    """Fixed ``(H*W, d)`` table: first d/2 channels encode x, the rest encode y."""
    half = d // 2
    if d % 2 or half % 2:
        raise ShapeError(f"sinusoidal2d PE needs an even d/2 split, got d={d}")
    j = np.arange(half // 2)
    freq = 1.0 / (10000.0 ** (2.0 * j / half))
    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    xs, ys = xs.reshape(-1, 1), ys.reshape(-1, 1)
    pe = np.empty((H * W, d))
    pe[:, 0:half:2] = np.sin(xs * freq)
    pe[:, 1:half:2] = np.cos(xs * freq)
    pe[:, half::2] = np.sin(ys * freq)
    pe[:, half + 1::2] = np.cos(ys * freq)
    return pe


def flatten_pe(fmap, pe: str = "none", d: int | None = None) -> Tensor:
    """``(..., C, H, W)`` map to ``(..., H*W, C)`` tokens in scan order, plus optional PE."""
    fmap = fmap if isinstance(fmap, Tensor) else Tensor(fmap)
    if fmap.ndim < 3:
        raise ShapeError(f"flatten_pe expects (..., C, H, W), got {fmap.shape}")
    *lead, C, H, W = fmap.shape
    if d is not None and C != d:
        raise ShapeError(f"flatten_pe: channel count {C} != model width d={d}")
    if pe not in PE_KINDS:
        raise ValueError(f"unknown PE kind {pe!r}")
    seq = transpose(reshape(fmap, (*lead, C, H * W)))
    if pe == "sinusoidal2d":
        seq = add(seq, Tensor(positional_encoding_2d(H, W, C)))
    return seq


def reshape_map(seq, H: int, W: int) -> Tensor:
    """Inverse of ``flatten_pe(..., pe="none")``."""
    seq = seq if isinstance(seq, Tensor) else Tensor(seq)
    if seq.ndim < 2 or seq.shape[-2] != H * W:
        raise ShapeError(f"reshape_map: {seq.shape} has {seq.shape[-2] if seq.ndim >= 2 else '?'} rows, "
                         f"expected H*W={H * W}")
    *lead, _, C = seq.shape
    return reshape(transpose(seq), (*lead, C, H, W))


# ------------------------------------------------------------------ MFRM


def project_qkv(F: Tensor, mp: ModalityParams) -> tuple[Tensor, Tensor, Tensor]:
    d = mp.wq.shape[0]
    if F.shape[-1] != d:
        raise ShapeError(f"project_qkv: feature width {F.shape[-1]} != d={d}")
    return matmul(F, mp.wq.value), matmul(F, mp.wk.value), matmul(F, mp.wv.value)


def attention_map(Q: Tensor, K: Tensor) -> Tensor:
    """Single-head ``softmax_rows(Q Kᵀ / sqrt(d))``."""
    if Q.shape != K.shape:
        raise ShapeError(f"attention_map: Q {Q.shape} vs K {K.shape}")
    CALLS["attention_map"] += 1
    return softmax_rows(matmul(scale(Q, 1.0 / math.sqrt(Q.shape[-1])), transpose(K)))


def compute_lambda(lq1, lk1, lq2, lk2, lambda_init: float) -> Tensor:
    """``exp(<lq1,lk1>) - exp(<lq2,lk2>) + lambda_init`` as a 0-d tensor."""
    shapes = {x.shape for x in (lq1, lk1, lq2, lk2)}
    if len(shapes) != 1:
        raise ShapeError(f"compute_lambda: λ-vectors must share a length, got {shapes}")
    return add(sub(exp(dot(lq1, lk1)), exp(dot(lq2, lk2))), float(lambda_init))


def modality_lambda(mp: ModalityParams, lambda_init: float) -> Tensor:
    return compute_lambda(mp.lambda_q1.value, mp.lambda_k1.value,
                          mp.lambda_q2.value, mp.lambda_k2.value, lambda_init)


def fuse_values(V_self: Tensor, V_other: Tensor, lam) -> Tensor:
    if V_self.shape != V_other.shape:
        raise ShapeError(f"fuse_values: {V_self.shape} vs {V_other.shape}")
    return add(V_self, mul(lam, V_other))


@dataclass
class Branch:
    """Per-modality quantities that depend only on that modality's input."""

    F: Tensor
    V: Tensor
    A: Tensor


def _branch(F: Tensor, mp: ModalityParams) -> Branch:
    Q, K, V = project_qkv(F, mp)
    return Branch(F=F, V=V, A=attention_map(Q, K))


@dataclass
class MFRMIntermediates:
    A_v: Tensor
    A_t: Tensor
    lambda_v: Tensor
    lambda_t: Tensor
    V_v: Tensor
    V_t: Tensor
    pre_v: Tensor  # A_v (V_v + λ_v V_t), before LN&D and residual
    pre_t: Tensor


def _refine(own: Branch, other: Branch, lam: Tensor, mp: ModalityParams,
            dropout_p: float, mode: str, rng) -> tuple[Tensor, Tensor]:
    pre = matmul(own.A, fuse_values(own.V, other.V, lam))
    normed = layer_norm(pre, mp.ln_gamma.value, mp.ln_beta.value)
    return add(own.F, dropout(normed, dropout_p, mode, rng)), pre


def _lambdas(params: MFRMParams, force_zero_lambda: bool) -> tuple[Tensor, Tensor]:
    if force_zero_lambda:
        return Tensor(0.0), Tensor(0.0)
    return (modality_lambda(params.v, params.lambda_init),
            modality_lambda(params.t, params.lambda_init))


def mfrm_forward(F_v: Tensor, F_t: Tensor, params: MFRMParams, *, dropout_p: float = 0.0,
                 mode: str = "eval", rng: np.random.Generator | None = None,
                 force_zero_lambda: bool = False) -> tuple[Tensor, Tensor, MFRMIntermediates]:
    """One mutual refinement pass over both modalities.

    ``F'_i = F_i + Dropout(LN(A_i (V_i + λ_i V_other)))``. With
    ``force_zero_lambda`` the cross-value injection is switched off and no
    gradient reaches the λ-vectors.
    """
    if F_v.shape != F_t.shape:
        raise ShapeError(f"mfrm_forward: F_v {F_v.shape} vs F_t {F_t.shape}")
    CALLS["mfrm_forward"] += 1
    lam_v, lam_t = _lambdas(params, force_zero_lambda)
    bv, bt = _branch(F_v, params.v), _branch(F_t, params.t)
    out_v, pre_v = _refine(bv, bt, lam_v, params.v, dropout_p, mode, rng)
    out_t, pre_t = _refine(bt, bv, lam_t, params.t, dropout_p, mode, rng)
    inter = MFRMIntermediates(bv.A, bt.A, lam_v, lam_t, bv.V, bt.V, pre_v, pre_t)
    return out_v, out_t, inter


# ------------------------------------------------------------------ DFFM


def mlp(x: Tensor, dp: DFFMParams) -> Tensor:
    h = gelu(add(matmul(x, dp.w1.value), dp.b1.value))
    return add(matmul(h, dp.w2.value), dp.b2.value)


def dffm_step(Fp_self: Tensor, Fp_other: Tensor, F_self_k: Tensor,
              dp: DFFMParams) -> tuple[Tensor, Tensor]:
    """``F_dif = F'_other - β F'_self``; ``F_next = μ F_k + α MLP(LN(F_dif))``."""
    if not (Fp_self.shape == Fp_other.shape == F_self_k.shape):
        raise ShapeError(f"dffm_step: shapes {Fp_self.shape}, {Fp_other.shape}, {F_self_k.shape}")
    CALLS["dffm_step"] += 1
    F_dif = sub(Fp_other, mul(dp.beta.value, Fp_self))
    fb = mlp(layer_norm(F_dif, dp.ln_gamma.value, dp.ln_beta.value), dp)
    F_next = add(mul(dp.mu.value, F_self_k), mul(dp.alpha.value, fb))
    return F_next, F_dif


# ------------------------------------------------------------- the K-step loop


@dataclass
class IterationRecord:
    F_v: Tensor
    F_t: Tensor
    Fp_v: Tensor
    Fp_t: Tensor
    F_dif_v: Tensor
    F_dif_t: Tensor
    lambda_v: float
    lambda_t: float
    # the fixed other-modality input each stream fed into MFRM at this step
    v_stream_t_input: Tensor
    t_stream_v_input: Tensor
    # the other branch's refined output inside each stream (the F' that F_dif subtracts from)
    v_stream_Fp_t: Tensor
    t_stream_Fp_v: Tensor


@dataclass
class IterationTrace:
    iterations: list[IterationRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.iterations)

    def __iter__(self) -> Iterator[IterationRecord]:
        return iter(self.iterations)

    def __getitem__(self, k: int) -> IterationRecord:
        return self.iterations[k]


@dataclass
class FeatureMapPair:
    map_v: Tensor
    map_t: Tensor

    def __post_init__(self):
        self.map_v = self.map_v if isinstance(self.map_v, Tensor) else Tensor(self.map_v)
        self.map_t = self.map_t if isinstance(self.map_t, Tensor) else Tensor(self.map_t)
        if self.map_v.ndim != 3 or self.map_v.shape != self.map_t.shape:
            raise ShapeError(f"feature maps must share one C×H×W shape, got "
                             f"{self.map_v.shape} and {self.map_t.shape}")


def merge_streams(Fp_v: Tensor, Fp_t: Tensor, merge_mode: str, merge: MergeParams | None) -> Tensor:
    if merge_mode == "sum":
        return add(Fp_v, Fp_t)
    if merge_mode == "concat_project":
        if merge is None:
            raise ValueError("concat_project merge needs MergeParams")
        return add(matmul(concat_last(Fp_v, Fp_t), merge.w.value), merge.b.value)
    raise ValueError(f"unknown merge mode {merge_mode!r}")


def irdfusion_tokens(F_v: Tensor, F_t: Tensor, params: FusionParams, cfg: FusionConfig,
                     mode: str = "eval", rng: np.random.Generator | None = None, *,
                     force_zero_lambda: bool = False) -> tuple[Tensor, IterationTrace]:
    """Run both refinement streams for K feedback steps on token tensors.

    The v-stream refines F_v while feeding the original F_t into every MFRM
    pass (and the t-stream mirrors it). After the K-th feedback step one
    more MFRM pass produces the F'_v / F'_t that get merged.
    """
    if cfg.K < 1:
        raise ConfigError("K", f"must be >= 1, got {cfg.K}")
    if F_v.shape != F_t.shape:
        raise ShapeError(f"irdfusion: F_v {F_v.shape} vs F_t {F_t.shape}")
    mp = params.mfrm
    p = cfg.dropout_p
    lam_v, lam_t = _lambdas(mp, force_zero_lambda)
    lv, lt = lam_v.item(), lam_t.item()
    # the fixed modality's projections/attention never change within a stream
    fixed_v, fixed_t = _branch(F_v, mp.v), _branch(F_t, mp.t)
    cur_v, cur_t = fixed_v, fixed_t
    trace = IterationTrace()
    for _ in range(cfg.K):
        CALLS["mfrm_forward"] += 2
        # v-stream: MFRM(F_v^(k), F_t) then feedback into F_v
        fp_v, _ = _refine(cur_v, fixed_t, lam_v, mp.v, p, mode, rng)
        fp_t_in_v, _ = _refine(fixed_t, cur_v, lam_t, mp.t, p, mode, rng)
        next_v, dif_v = dffm_step(fp_v, fp_t_in_v, cur_v.F, params.dffm_v)
        # t-stream: MFRM(F_v, F_t^(k)) then feedback into F_t
        fp_t, _ = _refine(cur_t, fixed_v, lam_t, mp.t, p, mode, rng)
        fp_v_in_t, _ = _refine(fixed_v, cur_t, lam_v, mp.v, p, mode, rng)
        next_t, dif_t = dffm_step(fp_t, fp_v_in_t, cur_t.F, params.dffm_t)
        trace.iterations.append(IterationRecord(
            F_v=cur_v.F, F_t=cur_t.F, Fp_v=fp_v, Fp_t=fp_t, F_dif_v=dif_v, F_dif_t=dif_t,
            lambda_v=lv, lambda_t=lt, v_stream_t_input=fixed_t.F, t_stream_v_input=fixed_v.F,
            v_stream_Fp_t=fp_t_in_v, t_stream_Fp_v=fp_v_in_t))
        cur_v, cur_t = _branch(next_v, mp.v), _branch(next_t, mp.t)
    CALLS["mfrm_forward"] += 2
    out_v, _ = _refine(cur_v, fixed_t, lam_v, mp.v, p, mode, rng)
    out_t, _ = _refine(cur_t, fixed_v, lam_t, mp.t, p, mode, rng)
    return merge_streams(out_v, out_t, cfg.merge_mode, params.merge), trace


def irdfusion_forward(pair: FeatureMapPair, params: FusionParams, cfg: FusionConfig,
                      mode: str = "eval", rng: np.random.Generator | None = None, *,
                      force_zero_lambda: bool = False) -> tuple[Tensor, IterationTrace]:
    """Fuse one C×H×W map pair; returns the fused C×H×W map and the iteration trace."""
    C, H, W = pair.map_v.shape
    F_v = flatten_pe(pair.map_v, cfg.pe, cfg.d)
    F_t = flatten_pe(pair.map_t, cfg.pe, cfg.d)
    fused, trace = irdfusion_tokens(F_v, F_t, params, cfg, mode, rng,
                                    force_zero_lambda=force_zero_lambda)
    return reshape_map(fused, H, W), trace


# ------------------------------------------------------------- serialization

_ROLES = {
    "wq": "projection", "wk": "projection", "wv": "projection",
    "lambda_q1": "lambda_vector", "lambda_k1": "lambda_vector",
    "lambda_q2": "lambda_vector", "lambda_k2": "lambda_vector",
    "ln_gamma": "layer_norm", "ln_beta": "layer_norm",
    "alpha": "feedback_gain", "beta": "feedback_gain", "mu": "feedback_gain",
    "w1": "mlp", "b1": "mlp", "w2": "mlp", "b2": "mlp",
    "w": "merge", "b": "merge", "weight": "head", "bias": "head",
}

MANIFEST = "manifest.txt"


def param_role(name: str) -> str:
    return _ROLES.get(name.rsplit(".", 1)[-1], "other")


def save_parameters(params: list[Parameter], out_dir, header: dict[str, str] | None = None) -> Path:
    """Write one IRDT file per parameter plus a plain-text key-value manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# {k}={v}" for k, v in sorted((header or {}).items())]
    for p in params:
        fname = f"{p.name}.irdt"
        irdt.write(out_dir / fname, p.value)
        shape = ",".join(str(s) for s in p.shape)
        lines.append(f"name={p.name} file={fname} shape=[{shape}] role={param_role(p.name)}")
    (out_dir / MANIFEST).write_text("\n".join(lines) + "\n")
    return out_dir


def read_manifest(in_dir) -> list[dict[str, str]]:
    entries = []
    for line in (Path(in_dir) / MANIFEST).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        entries.append(dict(tok.split("=", 1) for tok in line.split()))
    return entries


def load_parameters(params: list[Parameter], in_dir) -> None:
    """Fill ``params`` in place from a directory written by :func:`save_parameters`."""
    in_dir = Path(in_dir)
    by_name = {e["name"]: e for e in read_manifest(in_dir)}
    for p in params:
        if p.name not in by_name:
            raise KeyError(f"{in_dir / MANIFEST}: no entry for parameter {p.name}")
        p.assign(irdt.read(in_dir / by_name[p.name]["file"]).data)
