"""Toy dense-presence task used to run module ablations and iteration sweeps.

A model fuses the two flattened maps, applies a per-cell affine head and is
trained with per-cell binary cross-entropy under plain SGD.
"""
from __future__ import annotations

import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .fusion import (
    FusionConfig,
    FusionParams,
    MergeParams,
    MFRMParams,
    init_dffm,
    init_merge,
    init_mfrm,
    irdfusion_tokens,
    merge_streams,
    mfrm_forward,
)
from .kernel import (
    NonFiniteError,
    Parameter,
    Tape,
    Tensor,
    add,
    backward,
    bce_with_logits,
    concat_last,
    matmul,
    reshape,
    zero_grads,
)
from .fusion import flatten_pe
from .synth import Dataset, SceneConfig, make_split

VARIANTS = ("baseline_concat", "mfrm_only", "dffm_only", "full")

# Reference numbers from the original detection study (FLIR, CoDETR); recorded, never asserted.
PAPER_TABLE4_MAP50 = {"baseline_concat": 84.8, "mfrm_only": 86.3, "dffm_only": 87.5, "full": 88.3}
PAPER_TABLE4_GAINS = {"mAP50": 3.5, "mAP75": 4.0, "mAP": 3.8}
PAPER_TABLE5_MAP50 = {1: 85.4, 2: 85.8, 3: 86.3, 4: 88.3, 5: 86.2, 6: 85.7}
PAPER_REFERENCE_OPTIMUM = 4


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 0.05
    batch: int = 4
    seed: int = 0
    n_train: int = 32
    n_test: int = 32
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    K_values: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    variant: str = "full"


# ---------------------------------------------------------------------- model


class Model:
    """One ablation variant: fusion block (or plain concat merge) plus a per-cell head."""

    def __init__(self, variant: str, cfg: FusionConfig, head_w: Parameter, head_b: Parameter,
                 fusion: FusionParams | None = None, mfrm: MFRMParams | None = None,
                 merge: MergeParams | None = None):
        self.variant = variant
        self.cfg = cfg
        self.head_w = head_w
        self.head_b = head_b
        self.fusion = fusion
        self.mfrm = mfrm
        self.merge = merge

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        if self.fusion is not None:
            out += self.fusion.parameters()
        if self.mfrm is not None:
            out += self.mfrm.parameters()
        if self.merge is not None:
            out += self.merge.parameters()
        return out + [self.head_w, self.head_b]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def fused_tokens(self, maps_v, maps_t, mode: str = "eval", rng=None) -> Tensor:
        cfg = self.cfg
        F_v = flatten_pe(Tensor(maps_v), cfg.pe, cfg.d)
        F_t = flatten_pe(Tensor(maps_t), cfg.pe, cfg.d)
        if self.variant == "baseline_concat":
            return add(matmul(concat_last(F_v, F_t), self.merge.w.value), self.merge.b.value)
        if self.variant == "mfrm_only":
            fp_v, fp_t, _ = mfrm_forward(F_v, F_t, self.mfrm, dropout_p=cfg.dropout_p,
                                         mode=mode, rng=rng)
            return merge_streams(fp_v, fp_t, cfg.merge_mode, self.merge)
        fused, _ = irdfusion_tokens(F_v, F_t, self.fusion, cfg, mode, rng,
                                    force_zero_lambda=self.variant == "dffm_only")
        return fused

    def logits(self, maps_v, maps_t, mode: str = "eval", rng=None) -> Tensor:
        """Per-cell logits shaped ``(B, H, W)`` for stacked ``(B, C, H, W)`` maps."""
        B, _, H, W = np.shape(maps_v)
        fused = self.fused_tokens(maps_v, maps_t, mode, rng)
        z = add(matmul(fused, self.head_w.value), self.head_b.value)
        return reshape(z, (B, H, W))

    def predict(self, maps_v, maps_t) -> np.ndarray:
        z = self.logits(maps_v, maps_t).data
        return 1.0 / (1.0 + np.exp(-z))


def build_model(variant: str, cfg: FusionConfig, seed: int) -> Model:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    cfg.validate()
    rng = np.random.default_rng([int(seed), VARIANTS.index(variant)])
    bound = 1.0 / math.sqrt(cfg.d)
    head_w = Parameter(rng.uniform(-bound, bound, (cfg.d, 1)), "head.weight")
    head_b = Parameter(np.array(0.0), "head.bias")
    if variant == "baseline_concat":
        return Model(variant, cfg, head_w, head_b, merge=init_merge(cfg, rng))
    if variant == "mfrm_only":
        merge = init_merge(cfg, rng) if cfg.merge_mode == "concat_project" else None
        return Model(variant, cfg, head_w, head_b, mfrm=init_mfrm(cfg, rng), merge=merge)
    mfrm = init_mfrm(cfg, rng)
    fusion = FusionParams(mfrm, init_dffm("dffm_v", cfg, rng), init_dffm("dffm_t", cfg, rng),
                          init_merge(cfg, rng) if cfg.merge_mode == "concat_project" else None)
    return Model(variant, cfg, head_w, head_b, fusion=fusion)


# ------------------------------------------------------------- train / evaluate


def soft_iou(p: np.ndarray, y: np.ndarray) -> float:
    """``Σ min(p, y) / Σ max(p, y)``; 1.0 when both are empty."""
    den = float(np.maximum(p, y).sum())
    if den == 0.0:
        return 1.0
    return float(np.minimum(p, y).sum()) / den


def _bce(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def _predict_all(model: Model, data: Dataset, chunk: int = 16) -> np.ndarray:
    return np.concatenate([model.predict(data.maps_v[i:i + chunk], data.maps_t[i:i + chunk])
                           for i in range(0, len(data), chunk)])


def evaluate(model: Model, data: Dataset) -> dict:
    """Mean per-cell BCE, soft-IoU on probabilities, and IoU of the 0.5-thresholded mask."""
    if len(data) == 0:
        raise ValueError("evaluate needs a non-empty dataset")
    p = _predict_all(model, data)
    y = data.targets
    return {"bce": _bce(p, y), "soft_iou": soft_iou(p, y),
            "iou_thresholded": soft_iou((p >= 0.5).astype(np.float64), y)}


def _dataset_loss(model: Model, data: Dataset, chunk: int = 16) -> float:
    total = 0.0
    for i in range(0, len(data), chunk):
        z = model.logits(data.maps_v[i:i + chunk], data.maps_t[i:i + chunk])
        total += bce_with_logits(z, Tensor(data.targets[i:i + chunk])).item() * z.data.size
    return total / data.targets.size


@dataclass
class TrainReport:
    variant: str
    K: int
    seed: int
    epochs: int
    lr: float
    batch: int
    initial_train_loss: float
    train_loss: list[float]
    final_test_loss: float | None
    test_soft_iou: float | None
    test_iou_thresholded: float | None
    parameter_count: int
    wall_time_s: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time_s")
        return d


def train(model: Model, train_data: Dataset, epochs: int = 60, lr: float = 0.05,
          batch: int = 4, seed: int = 0, test_data: Dataset | None = None) -> TrainReport:
    """Plain SGD on per-cell BCE with a seeded batch order.

    ``train_loss[e]`` is the eval-mode loss on the whole training split after
    epoch ``e``; ``initial_train_loss`` is the same quantity before any update.
    """
    if len(train_data) == 0:
        raise ValueError("train needs a non-empty dataset")
    start = time.perf_counter()
    rng = np.random.default_rng([int(seed), 0x5EED])
    params = model.parameters()
    n = len(train_data)
    initial = _dataset_loss(model, train_data)
    history: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            zero_grads(params)
            try:
                with Tape() as tape:
                    z = model.logits(train_data.maps_v[idx], train_data.maps_t[idx], "train", rng)
                    loss = bce_with_logits(z, Tensor(train_data.targets[idx]))
            except NonFiniteError as exc:
                raise DivergenceError(epoch, math.nan) from exc
            if not math.isfinite(loss.item()):
                raise DivergenceError(epoch, loss.item())
            backward(loss, tape, params)
            for p in params:
                p.value = Tensor(p.value.data - lr * p.grad.data)
        epoch_loss = _dataset_loss(model, train_data)
        if not math.isfinite(epoch_loss):
            raise DivergenceError(epoch, epoch_loss)
        history.append(epoch_loss)
    metrics = evaluate(model, test_data) if test_data is not None and len(test_data) else None
    return TrainReport(
        variant=model.variant, K=model.cfg.K, seed=int(seed), epochs=epochs, lr=lr, batch=batch,
        initial_train_loss=initial, train_loss=history,
        final_test_loss=metrics["bce"] if metrics else None,
        test_soft_iou=metrics["soft_iou"] if metrics else None,
        test_iou_thresholded=metrics["iou_thresholded"] if metrics else None,
        parameter_count=model.parameter_count(),
        wall_time_s=time.perf_counter() - start,
    )


# ------------------------------------------------------------ ablation / sweep


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("IRDFUSION_THREADS", "1")))
    except ValueError:
        return 1


def _run_cell(job: tuple) -> dict:
    variant, fcfg, seed, tcfg, train_data, test_data = job
    model = build_model(variant, fcfg, seed)
    rep = train(model, train_data, tcfg.epochs, tcfg.lr, tcfg.batch, seed, test_data)
    out = rep.to_dict(include_timing=True)
    out["_preview"] = fused_preview(model, test_data if len(test_data) else train_data)
    return out


def fused_preview(model: Model, data: Dataset) -> np.ndarray:
    """Channel-mean of the fused feature map for the first scene, shaped H×W."""
    _, _, H, W = data.maps_v.shape
    fused = model.fused_tokens(data.maps_v[:1], data.maps_t[:1])
    return fused.data[0].mean(axis=-1).reshape(H, W)


def _run_grid(jobs: list[tuple]) -> list[dict]:
    workers = min(_threads(), len(jobs))
    if workers <= 1:
        results = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    return sorted(results, key=lambda r: (r["variant"], r["seed"], r["K"]))


def _split_extras(results: list[dict]) -> tuple[list[dict], dict]:
    """Separate wall times and preview maps from the deterministic run records."""
    extras: dict = {"timing": {}, "previews": {}}
    clean = []
    for r in results:
        r = dict(r)
        key = f"{r['variant']}/seed{r['seed']}/K{r['K']}"
        extras["timing"][key] = r.pop("wall_time_s")
        extras["previews"][key] = r.pop("_preview")
        clean.append(r)
    return clean, extras


def _median(xs: list[float]) -> float:
    return float(statistics.median(xs))


def ablation_run(scene: SceneConfig, fcfg: FusionConfig, tcfg: TrainConfig,
                 seeds: list[int] | None = None) -> tuple[dict, dict]:
    """Train all four variants per seed on one dataset.

    Returns ``(report, extras)``. The report is a pure function of its inputs;
    ``extras`` holds wall times and per-run fused-map previews.
    """
    seeds = list(tcfg.seeds if seeds is None else seeds)
    if len(seeds) < 3:
        raise ValueError(f"ablation needs at least 3 seeds, got {len(seeds)}")
    train_data = make_split(scene, tcfg.n_train)
    test_data = make_split(scene, tcfg.n_test, test=True)
    jobs = [(v, fcfg, s, tcfg, train_data, test_data) for v in VARIANTS for s in seeds]
    runs, extras = _split_extras(_run_grid(jobs))
    table = []
    for v in VARIANTS:
        mine = [r for r in runs if r["variant"] == v]
        table.append({
            "variant": v,
            "median_test_soft_iou": _median([r["test_soft_iou"] for r in mine]),
            "median_test_bce": _median([r["final_test_loss"] for r in mine]),
            "median_test_iou_thresholded": _median([r["test_iou_thresholded"] for r in mine]),
            "parameter_count": mine[0]["parameter_count"],
            "paper_map50": PAPER_TABLE4_MAP50[v],
        })
    med = {row["variant"]: row["median_test_soft_iou"] for row in table}
    orderings = {
        f"{a}>{b}": med[a] > med[b] for a in VARIANTS for b in VARIANTS if a != b
    }
    orderings["full>=mfrm_only"] = med["full"] >= med["mfrm_only"]
    report = {
        "kind": "ablation",
        "tool_version": __version__,
        "seeds": seeds,
        "table": table,
        "orderings": orderings,
        "runs": runs,
        "notes": {
            "dffm_only": "self-attention MFRM with lambda forced to 0 (no cross-value injection), "
                         "differential feedback loop kept",
            "paper_reference_gains_full_vs_baseline": PAPER_TABLE4_GAINS,
        },
    }
    return report, extras


def iteration_sweep(scene: SceneConfig, fcfg: FusionConfig, tcfg: TrainConfig,
                    K_values: list[int] | None = None,
                    seeds: list[int] | None = None) -> tuple[dict, dict]:
    """Train the full variant at each K; report metric-vs-K and the best K."""
    K_values = list(tcfg.K_values if K_values is None else K_values)
    seeds = list(tcfg.seeds if seeds is None else seeds)
    if not K_values:
        raise ValueError("K_values must be non-empty")
    train_data = make_split(scene, tcfg.n_train)
    test_data = make_split(scene, tcfg.n_test, test=True)
    jobs = [("full", replace(fcfg, K=k), s, tcfg, train_data, test_data)
            for k in K_values for s in seeds]
    runs, extras = _split_extras(_run_grid(jobs))
    rows = []
    for k in K_values:
        mine = [r for r in runs if r["K"] == k]
        rows.append({
            "K": k,
            "median_test_soft_iou": _median([r["test_soft_iou"] for r in mine]),
            "median_test_bce": _median([r["final_test_loss"] for r in mine]),
            "median_test_iou_thresholded": _median([r["test_iou_thresholded"] for r in mine]),
            "paper_map50": PAPER_TABLE5_MAP50.get(k),
        })
    best = max(rows, key=lambda r: (r["median_test_soft_iou"], -r["K"]))["K"]
    report = {
        "kind": "iteration_sweep",
        "tool_version": __version__,
        "seeds": seeds,
        "K_values": K_values,
        "table": rows,
        "argmax_K": best,
        "paper_reference_optimum": PAPER_REFERENCE_OPTIMUM,
        "runs": runs,
    }
    return report, extras


ABLATION_REPORT_SCHEMA = {
    "type": "object",
    "required": ["kind", "tool_version", "seeds", "table", "orderings", "runs"],
    "properties": {
        "kind": {"const": "ablation"},
        "tool_version": {"type": "string"},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 3},
        "table": {
            "type": "array",
            "minItems": 4,
            "maxItems": 4,
            "items": {
                "type": "object",
                "required": ["variant", "median_test_soft_iou", "median_test_bce", "parameter_count"],
                "properties": {
                    "variant": {"enum": list(VARIANTS)},
                    "median_test_soft_iou": {"type": "number", "minimum": 0, "maximum": 1},
                    "median_test_bce": {"type": "number", "minimum": 0},
                    "parameter_count": {"type": "integer", "minimum": 1},
                },
            },
        },
        "orderings": {"type": "object", "additionalProperties": {"type": "boolean"}},
        "runs": {"type": "array", "items": {"type": "object"}},
    },
}


# ------------------------------------------------------------------- heatmaps


def heatmap_bytes(t, comment: str | None = None) -> bytes:
    """8-bit binary PGM of a 2-D tensor (C×H×W inputs are mean-pooled over C).

    Values are min-max normalized to 0..255; a constant input maps to 128.
    ``comment`` (single line) is embedded as a ``#`` header line.
    """
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=0)
    if arr.ndim != 2:
        raise ValueError(f"heatmap needs a 2-D or C×H×W tensor, got shape {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        pix = np.full(arr.shape, 128, dtype=np.uint8)
    else:
        pix = np.rint((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)
    H, W = arr.shape
    header = "P5\n"
    if comment:
        header += "# " + " ".join(comment.split()) + "\n"
    header += f"{W} {H}\n255\n"
    return header.encode("utf-8") + pix.tobytes()


def emit_heatmap(t, path, comment: str | None = None) -> None:
    path = Path(path)
    try:
        path.write_bytes(heatmap_bytes(t, comment))
    except OSError as exc:
        raise OSError(f"cannot write heatmap {path}: {exc}") from exc


def read_pgm(path) -> np.ndarray:
    """Parse a binary P5 PGM with maxval 255."""
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P5" or tokens[3] != "255":
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    W, H = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(buf, dtype=np.uint8, count=W * H, offset=pos + 1)
    return data.reshape(H, W)
