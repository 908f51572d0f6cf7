"""Deterministic paired RGB/thermal feature maps with shared clutter and complementary objects.

Both maps receive the same smooth background and the same common-mode noise
draw; objects carry a per-channel signature of which some channels show up
only in the visible map, some only in the thermal map, and the rest in both.

Random streams: sample ``index`` of a config with seed ``s`` draws from
``PCG64(SeedSequence([s, index]))``; test samples use ``index + TEST_OFFSET``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import irdt
from .fusion import ConfigError, FeatureMapPair
from .kernel import Tensor

TEST_OFFSET = 1_000_000


@dataclass
class SceneConfig:
    H: int = 16
    W: int = 16
    C: int = 8
    n_objects_min: int = 1
    n_objects_max: int = 3
    extent_min: int = 2
    extent_max: int = 5
    a_obj: float = 2.0
    a_bg: float = 1.0
    sigma_cm: float = 0.5
    sigma_ind: float = 0.1
    rho: float = 0.4
    seed: int = 0

    def validate(self) -> "SceneConfig":
        for name in ("H", "W", "C", "extent_min", "extent_max"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(name, f"must be an integer >= 1, got {v!r}")
        for name in ("n_objects_min", "n_objects_max", "seed"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise ConfigError(name, f"must be an integer >= 0, got {v!r}")
        if self.n_objects_max < self.n_objects_min:
            raise ConfigError("n_objects_max", "must be >= n_objects_min")
        if self.extent_max < self.extent_min:
            raise ConfigError("extent_max", "must be >= extent_min")
        for name in ("a_obj", "a_bg", "sigma_cm", "sigma_ind"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                raise ConfigError(name, f"must be a finite number >= 0, got {v!r}")
        if not isinstance(self.rho, (int, float)) or not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho", f"must lie in [0, 1], got {self.rho!r}")
        if self.rho > 0.5:
            raise ConfigError("rho", f"disjoint per-modality channel split needs rho <= 0.5, got {self.rho}")
        return self

    @classmethod
    def from_dict(cls, raw: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(key, "unknown SceneConfig field")
        return cls(**raw).validate()


@dataclass
class SceneObject:
    y0: int
    x0: int
    h: int
    w: int
    v_only: list[int]
    t_only: list[int]
    shared: list[int]
    signature: list[float]

    def footprint(self) -> set[tuple[int, int]]:
        return {(y, x) for y in range(self.y0, self.y0 + self.h) for x in range(self.x0, self.x0 + self.w)}


@dataclass
class SceneSample:
    pair: FeatureMapPair
    target: Tensor
    meta: list[SceneObject] = field(default_factory=list)
    background: np.ndarray | None = None


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def _background(rng, C: int, H: int, W: int) -> np.ndarray:
    """Per-channel sum of 1-4 low-frequency 2-D cosines, bounded by 1 in magnitude."""
    ys, xs = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    out = np.zeros((C, H, W))
    for c in range(C):
        n = int(rng.integers(1, 5))
        ky = rng.integers(0, 3, size=n)
        kx = rng.integers(0, 3, size=n)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=n)
        weight = rng.uniform(0.5, 1.0, size=n)
        weight /= weight.sum()
        for j in range(n):
            out[c] += weight[j] * np.cos(2.0 * np.pi * (ky[j] * ys + kx[j] * xs) + phase[j])
    return out


def gen_scene(cfg: SceneConfig, index: int) -> SceneSample:
    cfg.validate()
    C, H, W = cfg.C, cfg.H, cfg.W
    rng = scene_rng(cfg.seed, index)
    background = cfg.a_bg * _background(rng, C, H, W)
    obj_v = np.zeros((C, H, W))
    obj_t = np.zeros((C, H, W))
    target = np.zeros((H, W))
    meta: list[SceneObject] = []
    n_obj = int(rng.integers(cfg.n_objects_min, cfg.n_objects_max + 1))
    n_excl = int(math.floor(cfg.rho * C))
    for _ in range(n_obj):
        h = min(int(rng.integers(cfg.extent_min, cfg.extent_max + 1)), H)
        w = min(int(rng.integers(cfg.extent_min, cfg.extent_max + 1)), W)
        y0 = int(rng.integers(0, H - h + 1))
        x0 = int(rng.integers(0, W - w + 1))
        u = rng.uniform(0.5, 1.5, size=C)
        sig = cfg.a_obj * u / np.linalg.norm(u)  # total signature energy a_obj²
        perm = rng.permutation(C)
        v_only, t_only, shared = perm[:n_excl], perm[n_excl:2 * n_excl], perm[2 * n_excl:]
        if cfg.a_obj == 0:
            continue
        sl = (slice(y0, y0 + h), slice(x0, x0 + w))
        for c in (*v_only, *shared):
            obj_v[c][sl] += sig[c]
        for c in (*t_only, *shared):
            obj_t[c][sl] += sig[c]
        target[sl] = 1.0
        meta.append(SceneObject(y0, x0, h, w, sorted(int(c) for c in v_only),
                                sorted(int(c) for c in t_only), sorted(int(c) for c in shared),
                                [float(s) for s in sig]))
    common = rng.normal(0.0, 1.0, size=(C, H, W)) * cfg.sigma_cm
    noise_v = rng.normal(0.0, 1.0, size=(C, H, W)) * cfg.sigma_ind
    noise_t = rng.normal(0.0, 1.0, size=(C, H, W)) * cfg.sigma_ind
    shared_part = background + common
    map_v = shared_part + obj_v + noise_v
    map_t = shared_part + obj_t + noise_t
    return SceneSample(FeatureMapPair(Tensor(map_v), Tensor(map_t)), Tensor(target), meta, background)


@dataclass
class Dataset:
    """Stacked arrays for a split: maps ``(n, C, H, W)``, targets ``(n, H, W)``."""

    maps_v: np.ndarray
    maps_t: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return int(self.targets.shape[0])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.maps_v[idx], self.maps_t[idx], self.targets[idx])

    @classmethod
    def from_samples(cls, samples: list[SceneSample], C: int, H: int, W: int) -> "Dataset":
        if not samples:
            return cls(np.zeros((0, C, H, W)), np.zeros((0, C, H, W)), np.zeros((0, H, W)))
        return cls(np.stack([s.pair.map_v.data for s in samples]),
                   np.stack([s.pair.map_t.data for s in samples]),
                   np.stack([s.target.data for s in samples]))


def make_split(cfg: SceneConfig, n: int, test: bool = False) -> Dataset:
    offset = TEST_OFFSET if test else 0
    samples = [gen_scene(cfg, offset + i) for i in range(n)]
    return Dataset.from_samples(samples, cfg.C, cfg.H, cfg.W)


def gen_dataset(cfg: SceneConfig, n_train: int, n_test: int, out_dir,
                extra: dict | None = None) -> dict:
    """Write IRDT triples for both splits plus ``manifest.json``; returns the manifest."""
    cfg.validate()
    out_dir = Path(out_dir)
    manifest: dict = {"scene_config": asdict(cfg), "n_train": n_train, "n_test": n_test,
                      "train": [], "test": []}
    if extra:
        manifest.update(extra)
    for split, n, offset in (("train", n_train, 0), ("test", n_test, TEST_OFFSET)):
        split_dir = out_dir / split
        try:
            split_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {split_dir}: {exc}") from exc
        for i in range(n):
            s = gen_scene(cfg, offset + i)
            stem = f"{i:05d}"
            files = {}
            for key, t in (("map_v", s.pair.map_v), ("map_t", s.pair.map_t), ("target", s.target)):
                rel = f"{split}/{stem}_{key}.irdt"
                irdt.write(out_dir / rel, t)
                files[key] = rel
            manifest[split].append({"index": offset + i, **files,
                                    "objects": [asdict(o) for o in s.meta]})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(data_dir) -> tuple[Dataset, Dataset, SceneConfig]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    cfg = SceneConfig.from_dict(manifest["scene_config"])

    def split(entries):
        if not entries:
            return Dataset.from_samples([], cfg.C, cfg.H, cfg.W)
        return Dataset(np.stack([irdt.read(data_dir / e["map_v"]).data for e in entries]),
                       np.stack([irdt.read(data_dir / e["map_t"]).data for e in entries]),
                       np.stack([irdt.read(data_dir / e["target"]).data for e in entries]))

    return split(manifest["train"]), split(manifest["test"]), cfg
