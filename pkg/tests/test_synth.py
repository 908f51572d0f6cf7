import hashlib
import time
from dataclasses import replace

import numpy as np
import pytest

from irdfusion.fusion import ConfigError
from irdfusion.synth import (
    TEST_OFFSET,
    SceneConfig,
    gen_dataset,
    gen_scene,
    load_dataset,
    make_split,
)


def quiet(**kw):
    return replace(SceneConfig(), **kw)


def test_no_objects_no_noise_gives_pure_background():
    s = gen_scene(quiet(a_obj=0.0, sigma_cm=0.0, sigma_ind=0.0), 3)
    assert np.array_equal(s.pair.map_v.data, s.background)
    assert np.array_equal(s.pair.map_t.data, s.background)
    assert not s.target.data.any()
    assert s.meta == []


def test_zero_complementarity_difference_is_only_independent_noise():
    cfg = quiet(rho=0.0, seed=4)
    s = gen_scene(cfg, 7)
    # same RNG stream with every shared component scaled to zero leaves just the noise
    noise_only = gen_scene(replace(cfg, a_obj=0.0, a_bg=0.0, sigma_cm=0.0), 7)
    diff = s.pair.map_v.data - s.pair.map_t.data
    ref = noise_only.pair.map_v.data - noise_only.pair.map_t.data
    assert np.max(np.abs(diff - ref)) < 1e-12
    for obj in s.meta:
        assert obj.v_only == [] and obj.t_only == [] and obj.shared == list(range(cfg.C))


def test_common_mode_cancels_exactly():
    s = gen_scene(quiet(rho=0.0, sigma_ind=0.0), 11)
    assert np.array_equal(s.pair.map_v.data, s.pair.map_t.data)


def test_half_split_is_channel_disjoint():
    cfg = quiet(rho=0.5, sigma_ind=0.0, n_objects_min=1, n_objects_max=1)
    for idx in range(10):
        s = gen_scene(cfg, idx)
        (obj,) = s.meta
        assert len(obj.v_only) == len(obj.t_only) == 4 and obj.shared == []
        assert not set(obj.v_only) & set(obj.t_only)
        diff = s.pair.map_v.data - s.pair.map_t.data
        cells = tuple(zip(*obj.footprint()))
        for c in obj.v_only:
            assert np.allclose(diff[c][cells], obj.signature[c], atol=1e-12)
        for c in obj.t_only:
            assert np.allclose(diff[c][cells], -obj.signature[c], atol=1e-12)
        outside = np.ones((16, 16), bool)
        outside[cells] = False
        assert np.max(np.abs(diff[:, outside])) < 1e-12


def test_signature_energy():
    s = gen_scene(quiet(a_obj=3.0), 2)
    for obj in s.meta:
        assert abs(np.sum(np.square(obj.signature)) - 9.0) < 1e-12


def test_target_is_union_of_footprints():
    cfg = SceneConfig()
    for idx in range(30):
        s = gen_scene(cfg, idx)
        t = s.target.data
        assert set(np.unique(t)) <= {0.0, 1.0}
        cells = set().union(*(o.footprint() for o in s.meta))
        assert cells == {tuple(int(v) for v in p) for p in zip(*np.nonzero(t))}
        assert all(len(o.footprint()) >= 1 for o in s.meta)
        assert cfg.n_objects_min <= len(s.meta) <= cfg.n_objects_max


def test_determinism_and_independence():
    cfg = SceneConfig(seed=5)
    a, b = gen_scene(cfg, 9), gen_scene(cfg, 9)
    assert a.pair.map_v.data.tobytes() == b.pair.map_v.data.tobytes()
    assert a.pair.map_t.data.tobytes() == b.pair.map_t.data.tobytes()
    c = gen_scene(cfg, 10)
    assert a.pair.map_v.data.tobytes() != c.pair.map_v.data.tobytes()
    d = gen_scene(replace(cfg, seed=6), 9)
    assert a.pair.map_v.data.tobytes() != d.pair.map_v.data.tobytes()


def test_independent_noise_differs_between_maps():
    s = gen_scene(quiet(a_obj=0.0), 1)
    diff = s.pair.map_v.data - s.pair.map_t.data
    # two independent N(0, 0.1²) draws: difference std ≈ 0.1·√2
    assert abs(diff.std() - 0.1 * np.sqrt(2)) < 0.01


def test_test_split_uses_offset_indices():
    cfg = SceneConfig()
    test = make_split(cfg, 2, test=True)
    assert np.array_equal(test.maps_v[1], gen_scene(cfg, TEST_OFFSET + 1).pair.map_v.data)
    train = make_split(cfg, 2)
    assert not np.array_equal(train.maps_v[0], test.maps_v[0])


@pytest.mark.parametrize("bad, field", [
    ({"rho": 0.6}, "rho"), ({"rho": -0.1}, "rho"), ({"a_obj": -1.0}, "a_obj"),
    ({"H": 0}, "H"), ({"n_objects_min": 3, "n_objects_max": 1}, "n_objects_max"),
    ({"what": 1}, "what"),
])
def test_invalid_config(bad, field):
    with pytest.raises(ConfigError) as exc:
        SceneConfig.from_dict(bad)
    assert exc.value.field == field


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_gen_dataset_byte_identical(tmp_path):
    cfg = SceneConfig(seed=3)
    gen_dataset(cfg, 4, 2, tmp_path / "a")
    gen_dataset(cfg, 4, 2, tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    train, test, back = load_dataset(tmp_path / "a")
    assert back == cfg and len(train) == 4 and len(test) == 2
    assert np.array_equal(train.maps_t, make_split(cfg, 4).maps_t)


def test_gen_dataset_empty_train(tmp_path):
    m = gen_dataset(SceneConfig(), 0, 1, tmp_path)
    assert m["train"] == [] and len(m["test"]) == 1
    train, _, _ = load_dataset(tmp_path)
    assert len(train) == 0


def test_gen_dataset_unwritable_path_reports_it(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        gen_dataset(SceneConfig(), 1, 0, blocker / "sub")


def test_generation_speed(tmp_path):
    t0 = time.perf_counter()
    gen_dataset(SceneConfig(), 200, 50, tmp_path)
    assert time.perf_counter() - t0 < 10.0
