"""
Tests for the synthetic paired dataset
"""
from dataclasses import replace

import numpy as np
import pytest

from hybridtower.data.synthetic import SPLITS, PairedDataset, SyntheticSpec, generate, recover_latents
from hybridtower.errors import ConfigError, DataFormatError
from hybridtower.training.objectives import compute_metrics

SMALL = SyntheticSpec(n_pairs=30, z_dim=4, d_in=8, frames=3, patches=5, p_info=2, text_len=3, seed=11)


class TestGenerate:

    def test_shapes(self):
        data = generate(SMALL)
        assert len(data) == 30
        assert data.videos.shape == (30, 3, 5, 8)
        assert data.texts.shape == (30, 3, 8)
        assert data.latents.shape == (30, 4)
        np.testing.assert_array_equal(data.signal_mask.sum(axis=2), np.full((30, 3), 2))

    def test_deterministic(self):
        a, b = generate(SMALL), generate(SMALL)
        np.testing.assert_array_equal(a.videos, b.videos)
        np.testing.assert_array_equal(a.texts, b.texts)

    def test_seed_changes_data(self):
        assert not np.allclose(generate(SMALL).videos, generate(replace(SMALL, seed=12)).videos)

    def test_pairs_do_not_depend_on_dataset_size(self):
        small, large = generate(SMALL), generate(replace(SMALL, n_pairs=50))
        np.testing.assert_array_equal(small.videos, large.videos[:30])
        np.testing.assert_array_equal(small.latents, large.latents[:30])

    def test_splits_are_disjoint_and_cover(self):
        data = generate(SMALL)
        parts = [set(data.split_indices(s).tolist()) for s in SPLITS]
        assert sum(len(p) for p in parts) == 30
        assert set().union(*parts) == set(range(30))
        assert [len(p) for p in parts] == list(SMALL.split_sizes())

    def test_split_access_recorded(self):
        data = generate(SMALL)
        data.split_indices("val")
        assert data.accessed == {"val"}
        data.split_indices("all")
        assert data.accessed == set(SPLITS)
        with pytest.raises(ConfigError):
            data.split_indices("holdout")

    def test_signal_patches_carry_the_latent(self):
        spec = replace(SMALL, sigma_patch=0.0, sigma_text=0.0, drift=0.0)
        data = generate(spec)
        frame = data.videos[0, 0]
        signal = frame[data.signal_mask[0, 0]]
        np.testing.assert_allclose(signal[0], signal[1], atol=1e-12)

    @pytest.mark.parametrize("kwargs", [
        {"p_info": 6}, {"sigma_video": -1.0}, {"n_pairs": 0}, {"val_fraction": 0.6, "test_fraction": 0.4},
    ])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ConfigError):
            replace(SMALL, **kwargs)


class TestNoiselessOracle:

    def test_latent_recovery_retrieves_every_pair(self):
        spec = replace(SMALL, n_pairs=40, sigma_text=0.0, sigma_patch=0.0, shared_projection=True)
        data = generate(spec)
        rows = np.arange(40)
        text_z, video_z = recover_latents(data, rows)
        np.testing.assert_allclose(text_z, data.latents, atol=1e-8)
        np.testing.assert_allclose(video_z, data.latents, atol=1e-8)
        sim = text_z @ video_z.T / np.outer(np.linalg.norm(text_z, axis=1), np.linalg.norm(video_z, axis=1))
        assert compute_metrics(sim, rows).r1 == 100.0


class TestPersistence:

    def test_save_load(self, tmp_path):
        data = generate(SMALL)
        path = tmp_path / "data.pigd"
        data.save(path)
        loaded = PairedDataset.load(path)
        assert loaded.spec == SMALL
        np.testing.assert_array_equal(loaded.videos, data.videos)
        np.testing.assert_array_equal(loaded.ids, data.ids)
        np.testing.assert_array_equal(loaded.splits, data.splits)
        np.testing.assert_array_equal(loaded.signal_mask, data.signal_mask)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "data.pigd"
        generate(SMALL).save(path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match="magic"):
            PairedDataset.load(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "data.pigd"
        generate(SMALL).save(path)
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(DataFormatError):
            PairedDataset.load(path)

    def test_unknown_video_id(self):
        with pytest.raises(DataFormatError):
            generate(SMALL).row_of(999)
