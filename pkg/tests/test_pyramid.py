import pytest
import torch

from ctcnet import PyramidBlock, PyramidConfig, resize_time
from ctcnet.errors import ConfigError, DataError
from ctcnet.pyramid import GlobalLayerNorm


def make_block(depth=5, channels=8, kernel=3, norm="global_layer_norm", **kw):
    torch.manual_seed(0)
    return PyramidBlock(
        PyramidConfig(depth=depth, channels=channels, kernel=kernel, norm=norm),
        **kw)


class TestBottomUp:
    def test_level_lengths_halve_with_ceiling(self):
        block = make_block(depth=5, channels=4)
        levels = block.bottom_up(torch.randn(1, 4, 3200))
        assert [lvl.shape[-1] for lvl in levels] == [3200, 1600, 800, 400, 200]

    def test_odd_lengths_round_up(self):
        block = make_block(depth=5, channels=4)
        levels = block.bottom_up(torch.randn(1, 4, 50))
        assert [lvl.shape[-1] for lvl in levels] == [50, 25, 13, 7, 4]

    def test_single_level_pyramid(self):
        block = make_block(depth=1, channels=4)
        levels = block.bottom_up(torch.randn(1, 4, 7))
        assert len(levels) == 1
        assert levels[0].shape == (1, 4, 7)

    def test_channels_preserved_at_every_level(self):
        block = make_block(depth=3, channels=6)
        levels = block.bottom_up(torch.randn(2, 6, 40))
        assert all(lvl.shape[:2] == (2, 6) for lvl in levels)

    def test_too_short_input_rejected(self):
        block = make_block(depth=5, channels=4)
        with pytest.raises(DataError):
            block.bottom_up(torch.randn(1, 4, 15))  # needs >= 16


class TestStages:
    def test_cycle_preserves_shape(self):
        block = make_block(depth=4, channels=8)
        x = torch.randn(2, 8, 100)
        out = block.cycle(x)
        assert out.shape == x.shape

    def test_cycle_without_fuse_preserves_shape(self):
        block = make_block(depth=4, channels=8, with_adjacent_fuse=False)
        x = torch.randn(1, 8, 64)
        assert block.cycle(x, fuse=False).shape == x.shape

    def test_fuse_adjacent_keeps_level_geometry(self):
        block = make_block(depth=4, channels=8)
        levels = block.bottom_up(torch.randn(1, 8, 60))
        fused = block.fuse_adjacent(levels)
        assert [f.shape for f in fused] == [l.shape for l in levels]

    def test_downward_returns_full_resolution(self):
        block = make_block(depth=4, channels=8, with_adjacent_fuse=False,
                           with_collapse=False, with_downward=True)
        levels = block.bottom_up(torch.randn(1, 8, 60))
        out = block.downward(levels)
        assert out.shape == levels[0].shape

    def test_downward_with_replacement_top(self):
        block = make_block(depth=3, channels=8, with_adjacent_fuse=False,
                           with_collapse=False, with_downward=True)
        levels = block.bottom_up(torch.randn(1, 8, 40))
        top = torch.randn_like(levels[-1])
        out = block.downward(levels, top=top)
        assert out.shape == levels[0].shape
        assert not torch.allclose(out, block.downward(levels))

    def test_stage_submodules_track_variant(self):
        bare = make_block(depth=3, with_adjacent_fuse=False,
                          with_collapse=False)
        assert not hasattr(bare, "fuse_merge")
        assert not hasattr(bare, "collapse_merge")
        assert not hasattr(bare, "downward_merge")
        down = make_block(depth=3, with_downward=True)
        assert len(down.downward_merge) == 2
        assert len(down.downward_down) == 1


class TestResizeTime:
    def test_nearest_index_map(self):
        x = torch.arange(6, dtype=torch.float32).reshape(1, 1, 6)
        up = resize_time(x, 12)
        # source index floor(i * 6 / 12)
        want = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5],
                            dtype=torch.float32)
        assert torch.equal(up.reshape(-1), want)

    def test_downsample_index_map(self):
        x = torch.arange(7, dtype=torch.float32).reshape(1, 1, 7)
        down = resize_time(x, 3)
        want = torch.tensor([0, 2, 4], dtype=torch.float32)
        assert torch.equal(down.reshape(-1), want)

    def test_identity_when_length_matches(self):
        x = torch.randn(1, 4, 9)
        assert resize_time(x, 9) is x

    def test_unbatched(self):
        x = torch.randn(4, 9)
        assert resize_time(x, 18).shape == (4, 18)

    def test_bad_target_rejected(self):
        with pytest.raises(DataError):
            resize_time(torch.randn(1, 2, 8), 0)


class TestNorm:
    def test_global_layer_norm_standardizes(self):
        norm = GlobalLayerNorm(4)
        x = torch.randn(3, 4, 50) * 5 + 2
        out = norm(x)
        flat = out.reshape(3, -1)
        assert torch.allclose(flat.mean(dim=1), torch.zeros(3), atol=1e-5)
        assert torch.allclose(flat.std(dim=1, unbiased=False), torch.ones(3),
                              atol=1e-4)

    def test_per_sample_independence(self):
        norm = GlobalLayerNorm(4)
        a = torch.randn(1, 4, 20)
        b = torch.randn(1, 4, 20)
        joint = norm(torch.cat([a, b], dim=0))
        assert torch.allclose(joint[0], norm(a)[0], atol=1e-6)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            PyramidConfig(depth=0)
        with pytest.raises(ConfigError):
            PyramidConfig(kernel=4)
        with pytest.raises(ConfigError):
            PyramidConfig(norm="instance")


class TestNumerics:
    def test_zeroed_block_outputs_zero(self):
        block = make_block(depth=3, channels=4)
        with torch.no_grad():
            for p in block.parameters():
                p.zero_()
        out = block.cycle(torch.randn(1, 4, 40))
        assert torch.all(out == 0)

    def test_gradcheck_small(self):
        torch.manual_seed(2)
        block = PyramidBlock(
            PyramidConfig(depth=2, channels=3, kernel=3)).double()
        x = torch.randn(1, 3, 8, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(
            lambda t: block.cycle(t), (x,), eps=1e-6, atol=1e-4,
            nondet_tol=1e-12)
