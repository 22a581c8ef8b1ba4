import numpy as np
import pytest

from lpld.errors import ConfigError
from lpld.simdata import SPLITS, AugmentConfig, DatasetConfig, Scene, _stream, augment, class_signatures, \
    coverage, erase_rect, generate_dataset, load_scene, make_scene, manifest, parse_scene_id, render, \
    sample_objects, scene_id


def small(**kw) -> DatasetConfig:
    base = dict(n_source=6, n_source_eval=3, n_target=5, n_target_eval=3)
    base.update(kw)
    return DatasetConfig(**base)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(class_weights=(1, 1)), dict(class_weights=(1, 1, 1, 1, 0, 1)),
                                    dict(channels=5), dict(noise_sigma=-1.0), dict(gain=0.0),
                                    dict(size_range=(10, 200)), dict(objects_per_scene=(3, 1)),
                                    dict(minor_classes=(9,)), dict(n_target=-1)])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            DatasetConfig(**kw)

    def test_from_dict_unknown_key(self):
        with pytest.raises(ConfigError):
            DatasetConfig.from_dict({"bogus": 1})

    def test_dict_round_trip(self):
        cfg = small(class_shift_angles=(10, 20, 30, 40, 50, 60))
        assert DatasetConfig.from_dict(cfg.to_dict()) == cfg

    def test_bucket_edges_are_area_thirds(self):
        assert DatasetConfig(size_range=(8, 20)).bucket_edges() == (12.0 ** 2, 16.0 ** 2)


class TestAugmentConfig:
    @pytest.mark.parametrize("kw", [dict(weak_noise=-0.1), dict(erase_prob=2.0), dict(erase_area=(0.5, 0.1))])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            AugmentConfig(**kw)


class TestSceneIds:
    def test_round_trip(self):
        assert parse_scene_id(scene_id("target_eval", 12)) == ("target_eval", 12)

    @pytest.mark.parametrize("sid", ["nope-00001", "target-x", "target"])
    def test_malformed(self, sid):
        with pytest.raises(ConfigError):
            parse_scene_id(sid)


class TestGeneration:
    def test_deterministic(self):
        a, b = generate_dataset(small(), 3), generate_dataset(small(), 3)
        for split in SPLITS:
            for x, y in zip(a[split], b[split]):
                assert x.feature_map.data.tobytes() == y.feature_map.data.tobytes()
                assert [o.box for o in x.objects] == [o.box for o in y.objects]

    def test_seed_changes_data(self):
        a, b = generate_dataset(small(), 3), generate_dataset(small(), 4)
        assert a["source"][0].feature_map.data.tobytes() != b["source"][0].feature_map.data.tobytes()

    def test_split_sizes_and_domains(self):
        data = generate_dataset(small(), 0)
        assert [len(data[s]) for s in SPLITS] == [6, 3, 5, 3]
        assert {s.domain for s in data["target"]} == {"target"}
        assert {s.domain for s in data["source_eval"]} == {"source"}

    def test_regeneration_by_id(self):
        cfg = small()
        data = generate_dataset(cfg, 9)
        s = data["target"][3]
        again = load_scene(cfg, 9, s.id)
        assert again.feature_map.data.tobytes() == s.feature_map.data.tobytes()

    def test_order_independent_streams(self):
        cfg = small()
        late = make_scene(cfg, 1, "source", 4)
        assert late.feature_map.data.tobytes() == generate_dataset(cfg, 1)["source"][4].feature_map.data.tobytes()

    def test_objects_inside_scene(self):
        cfg = small(n_source=50)
        sw, sh = cfg.scene_size
        for s in generate_dataset(cfg, 2)["source"]:
            for o in s.objects:
                x1, y1, x2, y2 = o.box
                assert 0 <= x1 < x2 <= sw and 0 <= y1 < y2 <= sh
                assert 0 <= o.class_id < cfg.num_classes
                assert o.size_bucket in ("small", "medium", "large")

    def test_null_shift_uses_source_path(self):
        cfg = small(shift_angle=0.0, noise_sigma=0.0, style_offset=0.0)
        objs = sample_objects(cfg, _stream(0, "x"))
        src = render(objs, cfg, "source", _stream(0, "y"))
        tgt = render(objs, cfg, "target", _stream(0, "y"))
        assert np.array_equal(src.data, tgt.data)

    def test_single_object_without_background(self):
        cfg = small(background_level=0.0, texture_sigma=0.0, clutter_per_scene=(0, 0), objects_per_scene=(1, 1))
        s = make_scene(cfg, 0, "source", 0)
        fm = s.feature_map
        cov = coverage(s.objects[0].box, fm.height, fm.width, fm.scale)
        assert np.all(fm.data[:, cov == 0] == 0)
        assert np.any(fm.data[:, cov > 0] != 0)

    def test_signatures_rotate_in_target(self):
        cfg = small(shift_angle=30.0)
        src, tgt = class_signatures(cfg, "source"), class_signatures(cfg, "target")
        assert np.allclose(np.linalg.norm(tgt, axis=1), 1.0)
        assert np.allclose((src * tgt).sum(axis=1), np.cos(np.deg2rad(30)))

    def test_coverage_fractions(self):
        cov = coverage((2.0, 0.0, 6.0, 4.0), 2, 2, 4.0)
        assert np.allclose(cov, [[0.5, 0.5], [0.0, 0.0]])

    def test_minor_major_frequency_ratio(self):
        cfg = DatasetConfig()
        counts = np.zeros(cfg.num_classes)
        rng = _stream(123, "freq")
        for _ in range(600):
            for o in sample_objects(cfg, rng):
                counts[o.class_id] += 1
        w = np.asarray(cfg.class_weights)
        minor = list(cfg.minor_classes)
        major = [c for c in range(cfg.num_classes) if c not in minor]
        expected = w[minor].sum() / w[major].sum()
        assert counts[minor].sum() / counts[major].sum() == pytest.approx(expected, rel=0.10)

    def test_manifest(self):
        m = manifest(small(), 5)
        assert m["seed"] == 5 and m["format"] == "lpld-dataset-manifest"
        assert {k: len(v) for k, v in m["splits"].items()} == {"source": 6, "source_eval": 3, "target": 5,
                                                                 "target_eval": 3}
        assert m == manifest(small(), 5)

    def test_scene_export(self):
        doc = make_scene(small(), 0, "source", 0).to_dict()
        assert set(doc) == {"id", "domain", "seed", "objects", "feature_map"}


class TestAugment:
    @pytest.fixture
    def scene(self) -> Scene:
        return make_scene(small(), 0, "target", 1)

    def test_weak_zero_noise_is_identity(self, scene):
        out = augment(scene, "weak", 0, AugmentConfig(weak_noise=0.0))
        assert np.array_equal(out.data, scene.feature_map.data)

    def test_deterministic(self, scene):
        for kind in ("weak", "strong"):
            assert np.array_equal(augment(scene, kind, (1, 2)).data, augment(scene, kind, (1, 2)).data)
        assert not np.array_equal(augment(scene, "strong", (1, 2)).data, augment(scene, "strong", (1, 3)).data)

    def test_erasing_fills_region(self, scene):
        cfg = AugmentConfig(erase_prob=1.0, erase_fill=-7.0, strong_noise=0.0, channel_jitter=0.0)
        out = augment(scene, "strong", 4, cfg)
        mask = np.all(out.data == -7.0, axis=0)
        assert mask.any()
        rows, cols = np.nonzero(mask)
        assert mask[rows.min():rows.max() + 1, cols.min():cols.max() + 1].all()
        assert np.array_equal(out.data[:, ~mask], scene.feature_map.data[:, ~mask])

    def test_erase_rect_within_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            r0, r1, c0, c1 = erase_rect(rng, 10, 12, (0.02, 0.5))
            assert 0 <= r0 < r1 <= 10 and 0 <= c0 < c1 <= 12

    def test_geometry_and_labels_untouched(self, scene):
        before = [(o.box, o.class_id) for o in scene.objects]
        out = augment(scene, "strong", 0)
        assert out.shape == scene.feature_map.shape and out.scale == scene.feature_map.scale
        assert [(o.box, o.class_id) for o in scene.objects] == before

    def test_unknown_kind(self, scene):
        with pytest.raises(ValueError):
            augment(scene, "medium", 0)
