import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats

from modlens.errors import ConfigError, DataFormatError
from modlens.rasterdata import (
    CHANNEL_NAMES,
    DatasetManifest,
    ModalityScheme,
    MultimodalSample,
    SynthConfig,
    default_scheme,
    generate_synthetic,
    load_sample,
    normalize,
    random_crop,
    read_sample,
    save_sample,
)
from modlens.trainer import TrainConfig


def _pearson(a, b):
    # explicit sums, independent of numpy's corrcoef
    a = [float(v) for v in np.ravel(a)]
    b = [float(v) for v in np.ravel(b)]
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    sab = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    saa = sum((x - ma) ** 2 for x in a)
    sbb = sum((y - mb) ** 2 for y in b)
    return sab / (saa * sbb) ** 0.5


class TestDefaultScheme:
    def test_six_groups_over_fourteen_channels(self):
        s = default_scheme()
        assert len(s) == 6
        assert s.total_channels == 14
        assert s.names == ["Sentinel-1", "Sentinel-2(RGB)", "Sentinel-2(RGBNIR)", "Sentinel-2(AllBands)",
                           "WorldCover", "NightTimeLight"]

    def test_rgbnir_extends_rgb(self):
        s = default_scheme()
        rgbnir = set(s.indices("Sentinel-2(RGBNIR)"))
        assert len(rgbnir) == 4
        assert rgbnir > set(s.indices("Sentinel-2(RGB)"))

    def test_sentinel1_indices_follow_channel_order(self):
        s = default_scheme()
        expected = {CHANNEL_NAMES.index("VV"), CHANNEL_NAMES.index("VH")}
        assert set(s.indices("Sentinel-1")) == expected == {10, 11}
        assert [CHANNEL_NAMES[i] for i in s.indices("Sentinel-2(RGB)")] == ["B4", "B3", "B2"]
        assert CHANNEL_NAMES[s.indices("Sentinel-2(RGBNIR)")[-1]] == "B8"

    def test_auxiliary_groups_are_disjoint_singletons(self):
        s = default_scheme()
        sentinel = set().union(*(s.indices(n) for n in s.names if n.startswith("Sentinel")))
        for name in ("WorldCover", "NightTimeLight"):
            idx = s.indices(name)
            assert len(idx) == 1 and not set(idx) & sentinel
        assert all(i < 14 for _, g in s.groups for i in g)

    @pytest.mark.parametrize("groups,total", [
        ((), 3),
        ((("a", ()),), 3),
        ((("a", (0,)), ("a", (1,))), 3),
        ((("a", (3,)),), 3),
    ])
    def test_invalid_schemes(self, groups, total):
        with pytest.raises(ConfigError):
            ModalityScheme(groups, total)

    def test_dict_round_trip(self):
        s = default_scheme()
        assert ModalityScheme.from_dict(json.loads(json.dumps(s.to_dict()))) == s


class TestPersistence:
    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6)),
                      elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
    def test_round_trip_is_bit_exact(self, tmp_path_factory, image):
        root = tmp_path_factory.mktemp("rt")
        mask = (np.arange(image.shape[1] * image.shape[2]).reshape(image.shape[1:]) % 2).astype(np.uint8)
        sample = MultimodalSample("x", image, mask, [f"c{i}" for i in range(image.shape[0])])
        save_sample(sample, root)
        back = read_sample(root, "x")
        assert back.image.tobytes() == image.tobytes()
        assert np.array_equal(back.mask, mask)
        assert back.channel_names == sample.channel_names

    def test_header_channel_mismatch(self, tmp_path, rng):
        image = rng.standard_normal((14, 8, 8)).astype(np.float32)
        save_sample(MultimodalSample("a", image, np.zeros((8, 8), np.uint8), list(CHANNEL_NAMES)), tmp_path)
        image[:13].astype("<f4").tofile(tmp_path / "a_image.bin")
        with pytest.raises(DataFormatError, match="14"):
            read_sample(tmp_path, "a")

    def test_non_binary_mask_rejected(self, tmp_path, rng):
        image = rng.standard_normal((2, 4, 4)).astype(np.float32)
        save_sample(MultimodalSample("a", image, np.zeros((4, 4), np.uint8), ["p", "q"]), tmp_path)
        bad = np.zeros((4, 4), np.uint8)
        bad[1, 1] = 2
        bad.tofile(tmp_path / "a_mask.bin")
        with pytest.raises(DataFormatError, match="binary"):
            read_sample(tmp_path, "a")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_sample(tmp_path, "nope")

    def test_sample_invariants(self):
        with pytest.raises(DataFormatError):
            MultimodalSample("a", np.zeros((2, 4, 4), np.float32), np.zeros((4, 5), np.uint8), ["p", "q"])
        with pytest.raises(DataFormatError):
            MultimodalSample("a", np.zeros((2, 4, 4), np.float32), np.zeros((4, 4), np.uint8), ["p"])
        img = np.zeros((1, 2, 2), np.float32)
        img[0, 0, 0] = np.nan
        with pytest.raises(DataFormatError):
            MultimodalSample("a", img, np.zeros((2, 2), np.uint8), ["p"])

    def test_manifest_scheme_mismatch(self, small_dataset, tmp_path):
        sid = small_dataset.ids()[0]
        other = DatasetManifest(small_dataset.root, small_dataset.samples,
                                ModalityScheme((("a", (0,)),), 13),
                                np.tile([0.0, 1.0], (13, 1)))
        with pytest.raises(DataFormatError):
            load_sample(other, sid)

    def test_manifest_detects_missing_sample_files(self, tmp_path):
        cfg = SynthConfig(num_samples=3, height=8, width=8, seed=1)
        generate_synthetic(cfg, tmp_path)
        (tmp_path / "s00001_mask.bin").unlink()
        with pytest.raises(FileNotFoundError, match="s00001"):
            DatasetManifest.load(tmp_path)


class TestSynthetic:
    def test_same_seed_same_bytes(self, tmp_path):
        cfg = SynthConfig(num_samples=5, height=16, width=16, seed=7)
        generate_synthetic(cfg, tmp_path / "a")
        generate_synthetic(cfg, tmp_path / "b")
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert len(files) == 5 * 3 + 1
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        generate_synthetic(SynthConfig(num_samples=1, height=16, width=16, seed=1), tmp_path / "a")
        generate_synthetic(SynthConfig(num_samples=1, height=16, width=16, seed=2), tmp_path / "b")
        assert (tmp_path / "a/s00000_image.bin").read_bytes() != (tmp_path / "b/s00000_image.bin").read_bytes()

    def test_zero_strength_channels_carry_no_mask_signal(self, tmp_path):
        cfg = SynthConfig(num_samples=100, height=32, width=32, seed=11, informative_groups={}, noise_groups=[])
        m = generate_synthetic(cfg, tmp_path)
        corr = np.array([[np.corrcoef(s.image[c].ravel(), s.mask.ravel())[0, 1] for c in range(14)]
                         for s in (load_sample(m, i) for i in m.ids())])
        for c in range(14):  # Bonferroni over the 14 channels
            assert stats.ttest_1samp(corr[:, c], 0.0).pvalue > 0.01 / 14, CHANNEL_NAMES[c]

    def test_informative_channel_beats_noise_channel(self, tmp_path):
        cfg = SynthConfig(num_samples=100, height=24, width=24, seed=5,
                          informative_groups={"WorldCover": 0.9}, noise_groups=["Sentinel-1"])
        m = generate_synthetic(cfg, tmp_path)
        wins = 0
        for sid in m.ids():
            s = load_sample(m, sid)
            wins += abs(_pearson(s.image[12], s.mask)) > abs(_pearson(s.image[10], s.mask))
        assert wins >= 95

    def test_splits_and_stats(self, tmp_path):
        m = generate_synthetic(SynthConfig(num_samples=12, height=8, width=8, val_fraction=0.25,
                                           test_fraction=0.25), tmp_path)
        assert [len(m.ids(s)) for s in ("train", "val", "test")] == [6, 3, 3]
        assert (m.normalization_stats[:, 1] > 0).all()
        loaded = DatasetManifest.load(tmp_path)
        assert loaded.samples == m.samples
        np.testing.assert_array_equal(loaded.normalization_stats, m.normalization_stats)

    @pytest.mark.parametrize("kwargs", [
        {"informative_groups": {"Landsat": 0.5}},
        {"noise_groups": ["Radar"]},
        {"informative_groups": {"WorldCover": 1.5}},
        {"informative_groups": {"WorldCover": 0.5}, "noise_groups": ["WorldCover"]},
        {"informative_groups": {"Sentinel-2(AllBands)": 0.5}, "noise_groups": ["Sentinel-2(RGB)"]},
        {"num_samples": 0},
    ])
    def test_invalid_configs(self, tmp_path, kwargs):
        with pytest.raises(ConfigError):
            generate_synthetic(SynthConfig(**{"num_samples": 2, "height": 8, "width": 8, **kwargs}), tmp_path)


class TestCrop:
    def test_full_size_crop_is_identity(self, rng):
        img = rng.standard_normal((3, 16, 16)).astype(np.float32)
        s = MultimodalSample("a", img, (img[0] > 0).astype(np.uint8), ["a", "b", "c"])
        out = random_crop(s, 16, rng)
        assert np.array_equal(out.image, img) and np.array_equal(out.mask, s.mask)

    def test_default_crop_size(self):
        assert TrainConfig.fullscale().crop == 1024

    def test_image_and_mask_share_offset(self, rng):
        img = rng.standard_normal((2, 128, 128)).astype(np.float32)
        mask = (rng.random((128, 128)) > 0.5).astype(np.uint8)
        s = MultimodalSample("a", img, mask, ["a", "b"])
        offsets = set()
        for _ in range(100):
            out, (top, left) = random_crop(s, 64, rng, return_offset=True)
            offsets.add((top, left))
            assert np.array_equal(out.image, img[:, top:top + 64, left:left + 64])
            assert np.array_equal(out.mask, mask[top:top + 64, left:left + 64])
            assert set(np.unique(out.image)) <= set(np.unique(img[:, top:top + 64, left:left + 64]))
        assert len(offsets) > 50

    def test_oversized_crop(self, rng):
        s = MultimodalSample("a", np.zeros((1, 8, 10), np.float32), np.zeros((8, 10), np.uint8), ["a"])
        with pytest.raises(ValueError):
            random_crop(s, 9, rng)


class TestNormalize:
    def test_unit_stats_identity(self, rng):
        img = rng.standard_normal((3, 5, 5)).astype(np.float32)
        s = MultimodalSample("a", img, np.ones((5, 5), np.uint8), ["a", "b", "c"])
        out = normalize(s, [(0.0, 1.0)] * 3)
        assert np.array_equal(out.image, img)
        assert out.mask is s.mask

    def test_constant_channel_to_zero(self):
        img = np.full((1, 4, 4), 3.25, np.float32)
        out = normalize(MultimodalSample("a", img, np.zeros((4, 4), np.uint8), ["a"]), [(3.25, 1.0)])
        assert np.all(out.image == 0)

    def test_zero_std_rejected(self):
        s = MultimodalSample("a", np.zeros((1, 2, 2), np.float32), np.zeros((2, 2), np.uint8), ["a"])
        with pytest.raises(ValueError):
            normalize(s, [(0.0, 0.0)])

    def test_train_split_standardised(self, small_dataset):
        imgs = np.stack([normalize(load_sample(small_dataset, i), small_dataset.normalization_stats).image
                         for i in small_dataset.ids("train")]).astype(np.float64)
        per_channel = imgs.transpose(1, 0, 2, 3).reshape(14, -1)
        assert np.all(np.abs(per_channel.mean(1)) < 0.05)
        assert np.all((per_channel.std(1) > 0.9) & (per_channel.std(1) < 1.1))
