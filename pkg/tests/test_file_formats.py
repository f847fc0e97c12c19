from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from tests.conftest import complex_normal, random_params
from utils.channel_sim import ChannelTensor, generate_sequence
from utils.compression import Code, RefMatrix, fit_pca
from utils.errors import BadMagicError, FormatError
from utils.file_formats import (
    ChannelWriter,
    header_size,
    read_basis,
    read_channels,
    read_codes,
    read_model,
    write_basis,
    write_channels,
    write_codes,
    write_model,
)
from utils.micro_model import MicroModel, ModelConfig
from utils.training import Normalizer


def corrupt_magic(path):
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))


class TestChannels:
    def test_size_arithmetic(self, tmp_path, small_geom, small_grid):
        frames = generate_sequence(3, small_geom, small_grid, n_paths=4, kappa=5.0, seed=1)
        path = tmp_path / "ch.ddch"
        assert write_channels(str(path), frames) == 3
        expected = header_size(5) + 3 * 4 * 4 * 4 * 4 * 16
        assert header_size(5) == 26
        assert path.stat().st_size == expected

    def test_round_trip_is_bitwise(self, tmp_path, small_geom, small_grid):
        frames = generate_sequence(3, small_geom, small_grid, n_paths=4, kappa=5.0, seed=1)
        path = tmp_path / "ch.ddch"
        write_channels(str(path), frames)
        loaded = read_channels(str(path))
        assert len(loaded) == 3
        for original, back in zip(frames, loaded):
            assert_array_equal(back.data, original.data)
        assert loaded.frame(2).frame_index == 2

    def test_regeneration_is_byte_identical(self, tmp_path, small_geom, small_grid):
        paths = [tmp_path / "a.ddch", tmp_path / "b.ddch"]
        for path in paths:
            write_channels(str(path), generate_sequence(2, small_geom, small_grid, 3, 2.0, seed=9))
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_streaming_writer_fixes_frame_count(self, tmp_path, rng):
        path = tmp_path / "ch.ddch"
        with ChannelWriter(str(path), 1, 2, 2, 2) as writer:
            for q in range(5):
                writer.write(ChannelTensor(complex_normal(rng, (1, 2, 2, 2)), q))
        assert read_channels(str(path)).n_frames == 5

    def test_writer_rejects_wrong_shape(self, tmp_path, rng):
        with ChannelWriter(str(tmp_path / "ch.ddch"), 1, 2, 2, 2) as writer:
            with pytest.raises(FormatError):
                writer.write(ChannelTensor(complex_normal(rng, (2, 2, 2, 2))))

    def test_bad_magic(self, tmp_path, small_geom, small_grid):
        path = tmp_path / "ch.ddch"
        write_channels(str(path), generate_sequence(1, small_geom, small_grid, 2, 1.0, seed=1))
        corrupt_magic(path)
        with pytest.raises(BadMagicError, match="bad magic"):
            read_channels(str(path))

    def test_truncated_payload(self, tmp_path, small_geom, small_grid):
        path = tmp_path / "ch.ddch"
        write_channels(str(path), generate_sequence(2, small_geom, small_grid, 2, 1.0, seed=1))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError):
            read_channels(str(path))

    def test_wrong_kind_of_file(self, tmp_path, rng):
        path = tmp_path / "codes.ddcd"
        write_codes(str(path), [Code(complex_normal(rng, (2, 2)))])
        with pytest.raises(BadMagicError):
            read_channels(str(path))

    def test_empty_sequence(self, tmp_path):
        with pytest.raises(FormatError):
            write_channels(str(tmp_path / "ch.ddch"), [])


class TestCodes:
    def test_round_trip(self, tmp_path, rng):
        codes = [Code(complex_normal(rng, (3, 2)), q) for q in range(4)]
        path = tmp_path / "codes.ddcd"
        write_codes(str(path), codes)
        vectors, r_s, r_d = read_codes(str(path))
        assert (r_s, r_d) == (3, 2)
        assert_array_equal(vectors, np.stack([c.vec for c in codes]))
        assert path.stat().st_size == header_size(3) + 4 * 6 * 16

    def test_trailing_bytes(self, tmp_path, rng):
        path = tmp_path / "codes.ddcd"
        write_codes(str(path), [Code(complex_normal(rng, (1, 1)))])
        path.write_bytes(path.read_bytes() + b"\0" * 8)
        with pytest.raises(FormatError, match="trailing"):
            read_codes(str(path))

    def test_mixed_shapes(self, tmp_path, rng):
        with pytest.raises(FormatError):
            write_codes(str(tmp_path / "c.ddcd"), [Code(complex_normal(rng, (1, 2))), Code(complex_normal(rng, (2, 1)))])


class TestBasis:
    def test_round_trip(self, tmp_path, rng):
        refs = [RefMatrix(complex_normal(rng, (3, 8))) for _ in range(5)]
        basis = replace(fit_pca(refs, 0.9), grid_shape=(4, 2), ref_port=1)
        path = tmp_path / "basis.ddpb"
        write_basis(str(path), basis)
        back = read_basis(str(path))
        assert (back.r_s, back.r_d, back.ref_port, back.grid_shape) == (basis.r_s, basis.r_d, 1, (4, 2))
        assert back.energy_threshold == 0.9
        for field in ("A_s", "A_d", "eig_s", "eig_d"):
            assert_array_equal(getattr(back, field), getattr(basis, field))

    def test_missing_grid_shape(self, tmp_path, rng):
        basis = fit_pca([RefMatrix(complex_normal(rng, (2, 4)))], 0.9)
        with pytest.raises(FormatError):
            write_basis(str(tmp_path / "basis.ddpb"), replace(basis, grid_shape=None))

    def test_bad_magic(self, tmp_path, rng):
        path = tmp_path / "basis.ddpb"
        write_basis(str(path), replace(fit_pca([RefMatrix(complex_normal(rng, (2, 4)))], 0.9), grid_shape=(2, 2)))
        corrupt_magic(path)
        with pytest.raises(BadMagicError):
            read_basis(str(path))


class TestModel:
    @pytest.mark.parametrize("lora_rank", [0, 2])
    def test_round_trip(self, tmp_path, rng, lora_rank):
        cfg = ModelConfig(feature_dim=4, d_model=8, n_heads=2, n_layers=2, lora_rank=lora_rank,
                          lora_alpha=0.25, horizon=3, past_window=5, ff_mult=2)
        model = random_params(MicroModel(cfg), rng)
        norm = Normalizer(mean=rng.standard_normal(4), std=rng.uniform(0.5, 2, 4))
        path = tmp_path / "model.ddmd"
        write_model(str(path), model, norm, delta=True)
        ckpt = read_model(str(path))
        assert ckpt.delta
        assert ckpt.model.config == cfg
        for name in model.names():
            assert_array_equal(ckpt.model.params[name], model.params[name])
        assert_array_equal(ckpt.normalizer.mean, norm.mean)
        assert_array_equal(ckpt.normalizer.std, norm.std)

    def test_without_normalizer(self, tmp_path, tiny_model):
        path = tmp_path / "model.ddmd"
        write_model(str(path), tiny_model)
        ckpt = read_model(str(path))
        assert ckpt.normalizer is None and not ckpt.delta

    def test_truncated(self, tmp_path, tiny_model):
        path = tmp_path / "model.ddmd"
        write_model(str(path), tiny_model)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(FormatError, match="shorter"):
            read_model(str(path))
