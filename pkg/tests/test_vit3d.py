"""Cube tokenization, positional encoding, and encoder-stack contracts."""

import numpy as np
import pytest

from cubevit import tensor as T
from cubevit import vit3d
from cubevit.errors import UsageError


def make_spec(volume=(6, 16, 16), cube=(3, 8, 8), **kw):
    return vit3d.CubeSpec(volume=volume, cube=cube, **kw)


class TestSequenceLength:
    def test_full_scale_spectralis_volume(self):
        spec = make_spec(volume=(60, 256, 256), cube=(3, 16, 16))
        assert vit3d.sequence_length(spec) == 5120
        assert spec.grid == (20, 16, 16)

    def test_resized_48_slice_volume(self):
        spec = make_spec(volume=(48, 256, 256), cube=(3, 16, 16))
        assert vit3d.sequence_length(spec) == 4096

    def test_single_cube(self):
        assert vit3d.sequence_length(make_spec(volume=(3, 16, 16), cube=(3, 16, 16))) == 1

    def test_non_divisible_rejected(self):
        with pytest.raises(UsageError):
            make_spec(volume=(7, 16, 16), cube=(3, 8, 8))

    def test_pad_policy(self):
        spec = make_spec(volume=(7, 16, 16), cube=(3, 8, 8), pad_to_multiple=True)
        assert spec.padded_volume == (9, 16, 16)
        assert vit3d.sequence_length(spec) == 3 * 2 * 2


class TestTokenOrdering:
    def test_flat_grid_round_trip(self):
        spec = make_spec(volume=(6, 16, 24), cube=(3, 8, 8))
        L = vit3d.sequence_length(spec)
        for flat in range(L):
            assert vit3d.flat_index(spec, *vit3d.grid_index(spec, flat)) == flat

    def test_lexicographic_order(self):
        spec = make_spec()
        assert vit3d.grid_index(spec, 0) == (0, 0, 0)
        assert vit3d.grid_index(spec, 1) == (0, 0, 1)
        gz, gh, gw = spec.grid
        assert vit3d.grid_index(spec, gh * gw) == (1, 0, 0)


class TestCubeEmbed:
    def test_constant_volume_gives_identical_tokens(self):
        rng = np.random.default_rng(0)
        spec = make_spec()
        w = T.Tensor(rng.normal(size=(spec.cube_voxels, 8)))
        b = T.Tensor(rng.normal(size=8))
        tokens = vit3d.cube_embed(np.full(spec.volume, 0.37), spec, w, b).data
        np.testing.assert_allclose(tokens, np.broadcast_to(tokens[0], tokens.shape), atol=1e-12)

    def test_token_count(self):
        rng = np.random.default_rng(1)
        spec = make_spec()
        w = T.Tensor(rng.normal(size=(spec.cube_voxels, 8)))
        b = T.Tensor(rng.normal(size=8))
        tokens = vit3d.cube_embed(rng.uniform(size=spec.volume), spec, w, b)
        assert tokens.data.shape == (vit3d.sequence_length(spec), 8)

    def test_matches_reshape_matmul_oracle(self):
        rng = np.random.default_rng(2)
        spec = make_spec(volume=(6, 16, 24), cube=(2, 8, 6))
        dim = 5
        w = rng.normal(size=(spec.cube_voxels, dim))
        b = rng.normal(size=dim)
        volume = rng.uniform(size=spec.volume)
        got = vit3d.cube_embed(volume, spec, T.Tensor(w), T.Tensor(b)).data

        # Oracle: loop over grid positions, flatten each cube, matmul.
        z, h, wd = spec.cube
        gz, gh, gw = spec.grid
        expected = np.zeros((gz * gh * gw, dim))
        row = 0
        for iz in range(gz):
            for ih in range(gh):
                for iw in range(gw):
                    cube = volume[
                        iz * z : (iz + 1) * z,
                        ih * h : (ih + 1) * h,
                        iw * wd : (iw + 1) * wd,
                    ]
                    expected[row] = cube.reshape(-1) @ w + b
                    row += 1
        assert np.abs(got - expected).max() <= 1e-12

    def test_planar_reduction_z1(self):
        # A depth-1 volume with cube depth 1 is a plain 2D patch embedding.
        rng = np.random.default_rng(3)
        spec = make_spec(volume=(1, 16, 16), cube=(1, 8, 8))
        assert vit3d.sequence_length(spec) == 4
        w = rng.normal(size=(64, 6))
        image = rng.uniform(size=(16, 16))
        got = vit3d.cube_embed(image[None], spec, T.Tensor(w), T.Tensor(np.zeros(6))).data
        patches = [
            image[a : a + 8, b : b + 8].reshape(-1) @ w
            for a in (0, 8)
            for b in (0, 8)
        ]
        np.testing.assert_allclose(got, np.stack(patches), atol=1e-12)


class TestPositionalEncode:
    def test_zero_tables_are_identity(self):
        rng = np.random.default_rng(4)
        spec = make_spec()
        tokens = T.Tensor(rng.normal(size=(vit3d.sequence_length(spec), 8)))
        pe = vit3d.PositionalEmbeddings(
            planar=T.Tensor(np.zeros((4, 8))),
            depth=T.Tensor(np.zeros((2, 8))),
            grid=spec.grid,
        )
        np.testing.assert_array_equal(vit3d.positional_encode(tokens, pe).data, tokens.data)

    def test_paper_scale_table_shapes(self):
        # 60-slice volumes at cube depth 3 use a depth table of length 20
        # and a 16 x 16 planar table.
        rng = np.random.default_rng(5)
        spec = make_spec(volume=(60, 256, 256), cube=(3, 16, 16))
        pe = vit3d.init_positional(spec.grid, 1024, rng)
        assert pe.depth.data.shape == (20, 1024)
        assert pe.planar.data.shape == (256, 1024)

    def test_random_tables_make_positions_distinct(self):
        rng = np.random.default_rng(6)
        spec = make_spec(volume=(6, 24, 16), cube=(3, 8, 8))
        L = vit3d.sequence_length(spec)
        tokens = T.Tensor(np.zeros((L, 8)))
        pe = vit3d.init_positional(spec.grid, 8, rng)
        encoded = vit3d.positional_encode(tokens, pe).data
        distinct = {tuple(np.round(row, 12)) for row in encoded}
        assert len(distinct) == L

    def test_grid_mismatch_rejected(self):
        pe = vit3d.PositionalEmbeddings(
            planar=T.Tensor(np.zeros((4, 8))),
            depth=T.Tensor(np.zeros((2, 8))),
            grid=(2, 2, 2),
        )
        with pytest.raises(UsageError):
            vit3d.positional_encode(T.Tensor(np.zeros((5, 8))), pe)


class TestEncoder:
    def test_depth_zero_is_final_layer_norm(self):
        rng = np.random.default_rng(7)
        cfg = vit3d.ViTConfig(depth=0, heads=2, dim=8)
        params = vit3d.init_vit_params(cfg, rng, "enc/")
        x = rng.normal(size=(5, 8))
        got = vit3d.encode(T.Tensor(x), cfg, params, "enc/").data
        expected = T.layer_norm(
            T.Tensor(x), params["enc/final_ln/gain"], params["enc/final_ln/bias"], cfg.eps
        ).data
        np.testing.assert_array_equal(got, expected)

    def test_tiny_forward_deterministic_and_finite(self):
        rng = np.random.default_rng(8)
        cfg = vit3d.ViTConfig(depth=2, heads=4, dim=32, tile=4)
        params = vit3d.init_vit_params(cfg, np.random.default_rng(9), "enc/")
        x = rng.normal(size=(10, 32))
        a = vit3d.encode(T.Tensor(x), cfg, params, "enc/").data
        b = vit3d.encode(T.Tensor(x), cfg, params, "enc/").data
        assert np.array_equal(a, b)
        assert np.isfinite(a).all()

    def test_paper_scale_configs_construct(self):
        assert vit3d.VIT_LARGE.depth == 24
        assert vit3d.VIT_LARGE.dim // vit3d.VIT_LARGE.heads == 64
        assert vit3d.VIT_SMALL_DECODER.depth == 8
        assert vit3d.VIT_SMALL_DECODER.dim == 512

    def test_indivisible_dim_rejected(self):
        with pytest.raises(UsageError):
            vit3d.ViTConfig(depth=2, heads=3, dim=32)
