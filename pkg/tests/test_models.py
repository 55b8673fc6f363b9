import dataclasses

import pytest
import torch

from conftest import micro_fusion_config
from ctcnet import (
    EncoderConfig,
    FusionConfig,
    PyramidConfig,
    SeparationModel,
    ThalamicFusion,
    build_model,
    config_hash,
    default_config,
    load_model_checkpoint,
    param_breakdown,
    param_count,
    save_model_checkpoint,
)
from ctcnet.errors import ConfigError, DataError
from ctcnet.models import config_from_dict, config_to_dict


def micro_inputs(t_a=400, t_v=10, embed=8, seed=0):
    torch.manual_seed(seed)
    return torch.randn(2, t_a) * 0.1, torch.randn(2, embed, t_v)


class TestConfig:
    def test_variant_and_op_validation(self):
        with pytest.raises(ConfigError):
            micro_fusion_config("avnet")
        with pytest.raises(ConfigError):
            micro_fusion_config(fusion_op="mean")
        with pytest.raises(ConfigError):
            FusionConfig(variant="audio_only", n=2)
        with pytest.raises(ConfigError):
            FusionConfig(n=-1)
        with pytest.raises(ConfigError):
            FusionConfig(m=0)

    def test_ccnet_requires_matching_depths(self):
        with pytest.raises(ConfigError):
            FusionConfig(
                variant="ccnet",
                audio_pyramid=PyramidConfig(depth=5, channels=8, kernel=5),
                visual_pyramid=PyramidConfig(depth=4, channels=8, kernel=3,
                                             norm="batch_norm"))

    def test_defaults_match_reference_settings(self):
        cfg = default_config("ctcnet")
        assert (cfg.n, cfg.m) == (3, 5)
        assert cfg.encoder.num_filters == 512
        assert cfg.audio_pyramid.channels == 512
        assert cfg.visual_pyramid.channels == 64
        assert default_config("audio_only").m == 8
        assert default_config("ccnet").visual_pyramid.channels == 512
        assert default_config("dftnet",
                              audio_channels=768).audio_pyramid.channels == 768

    def test_dict_round_trip_and_hash(self):
        cfg = micro_fusion_config("cacnet", n=2, m=3)
        back = config_from_dict(config_to_dict(cfg))
        assert back == cfg
        assert config_hash(back) == config_hash(cfg)
        assert config_hash(cfg) != config_hash(micro_fusion_config("ctcnet"))


class TestThalamicFusion:
    def test_concat_merge_width_is_channel_sum(self):
        hub = ThalamicFusion(512, 64, "concat")
        assert hub.merge_a.in_channels == 576
        assert hub.merge_v.in_channels == 576
        assert FusionConfig().thalamic_channels == 576

    def test_equal_widths_need_no_lift(self):
        hub = ThalamicFusion(8, 8, "sum")
        assert not hasattr(hub, "lift_a_site")

    def test_unequal_sum_lifts_to_wide_side(self):
        hub = ThalamicFusion(16, 4, "sum")
        assert hub.lift_a_site.in_channels == 4
        assert hub.lift_a_site.out_channels == 16
        a, v = hub(torch.randn(1, 16, 20), torch.randn(1, 4, 5))
        assert a.shape == (1, 16, 20)
        assert v.shape == (1, 4, 5)

    def test_streams_keep_their_own_lengths(self):
        for op in ("sum", "concat"):
            hub = ThalamicFusion(8, 8, op)
            a, v = hub(torch.randn(1, 8, 50), torch.randn(1, 8, 13))
            assert a.shape == (1, 8, 50)
            assert v.shape == (1, 8, 13)

    def test_zeroed_hub_outputs_zero(self):
        hub = ThalamicFusion(8, 4, "sum")
        with torch.no_grad():
            for p in hub.parameters():
                p.zero_()
        a, v = hub(torch.randn(1, 8, 10), torch.randn(1, 4, 5))
        assert torch.all(a == 0) and torch.all(v == 0)


class TestForward:
    @pytest.mark.parametrize("variant",
                             ["ctcnet", "dftnet", "ccnet", "cacnet"])
    @pytest.mark.parametrize("t_a", [400, 407])
    def test_av_variants_preserve_length(self, variant, t_a):
        model = build_model(micro_fusion_config(variant), seed=0).eval()
        mixture, visual = micro_inputs(t_a=t_a)
        with torch.no_grad():
            out = model(mixture, visual=visual)
        assert out.shape == mixture.shape

    @pytest.mark.parametrize("t_a", [400, 407])
    def test_audio_only_needs_no_visual(self, t_a):
        model = build_model(micro_fusion_config("audio_only", m=2), seed=0).eval()
        mixture, _ = micro_inputs(t_a=t_a)
        with torch.no_grad():
            out = model(mixture)
        assert out.shape == mixture.shape

    def test_missing_visual_rejected(self):
        model = build_model(micro_fusion_config("ctcnet"), seed=0)
        with pytest.raises(DataError):
            model(torch.randn(1, 400))

    def test_wrong_visual_width_rejected(self):
        model = build_model(micro_fusion_config("ctcnet"), seed=0)
        with pytest.raises(DataError):
            model(torch.randn(1, 400), visual=torch.randn(1, 5, 10))

    def test_clip_without_backbone_rejected(self):
        model = build_model(micro_fusion_config("ctcnet"), seed=0)
        with pytest.raises(ConfigError):
            model(torch.randn(1, 400), clip=torch.rand(1, 10, 32, 32))

    def test_clip_path_through_backbone(self, tiny_backbone):
        cfg = micro_fusion_config("ctcnet", visual_embed_dim=64)
        model = build_model(cfg, seed=0, backbone=tiny_backbone).eval()
        clip = torch.rand(1, 10, 32, 32)
        with torch.no_grad():
            by_clip = model(torch.randn(1, 400), clip=clip)
            by_embed = model(torch.randn(1, 400), visual=tiny_backbone(clip))
        assert by_clip.shape == (1, 400)
        assert by_embed.shape == (1, 400)

    def test_eval_determinism(self):
        model = build_model(micro_fusion_config("ctcnet"), seed=3).eval()
        mixture, visual = micro_inputs(seed=5)
        with torch.no_grad():
            a = model(mixture, visual=visual)
            b = model(mixture, visual=visual)
        assert torch.equal(a, b)

    def test_build_seed_determinism(self):
        cfg = micro_fusion_config("dftnet")
        a = build_model(cfg, seed=9)
        b = build_model(cfg, seed=9)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(),
                                      b.state_dict().items()):
            assert ka == kb
            assert torch.equal(va, vb)

    def test_ctcnet_without_av_cycles_equals_audio_only(self):
        """With n = 0 the fusion path is inert; the audio tower alone decides."""
        cfg_av = micro_fusion_config("ctcnet", n=0, m=2)
        cfg_ao = micro_fusion_config("audio_only", m=2)
        av = build_model(cfg_av, seed=1).eval()
        ao = build_model(cfg_ao, seed=2).eval()
        for name in ("encoder", "mask_head", "decoder",
                     "audio_in", "audio_out", "audio_blocks"):
            getattr(ao, name).load_state_dict(getattr(av, name).state_dict())
        mixture, _ = micro_inputs()
        with torch.no_grad():
            assert torch.equal(av(mixture), ao(mixture))


class TestParameterAccounting:
    def test_micro_count_matches_hand_enumeration(self):
        cfg = FusionConfig(
            variant="ctcnet", n=1, m=1, fusion_op="sum",
            encoder=EncoderConfig(num_filters=8, kernel_len=5),
            audio_pyramid=PyramidConfig(depth=2, channels=4, kernel=5,
                                        norm="global_layer_norm"),
            visual_pyramid=PyramidConfig(depth=2, channels=4, kernel=3,
                                         norm="batch_norm"),
            visual_embed_dim=6)
        # encoder 1*8*5 = 40; decoder 8*1*5 = 40; mask head 8*8+8 = 72
        # audio_in 8*4+4 = 36; audio_out 4*8+8 = 40; visual_in 6*4+4 = 28
        # fusion hub (4,4,sum): two biased 4->4 maps = 40
        # audio block k=5: entry (84+8+1) + down (20+24+8+1) + fuse_down 24
        #   + fuse_merge 2*(36+8+1) + collapse (20+8+1) = 289
        # visual block k=3: entry (52+8+1) + down (20+16+8+1) + fuse_down 16
        #   + fuse_merge 2*(36+8+1) + collapse (20+8+1) = 241
        want = 40 + 40 + 72 + 36 + 40 + 28 + 40 + 289 + 241
        assert param_count(cfg) == want == 826

    def test_sharing_removes_per_cycle_copies(self):
        base = param_count(micro_fusion_config("ctcnet", n=2, m=2))
        more_cycles = param_count(micro_fusion_config("ctcnet", n=3, m=5))
        assert base == more_cycles

    def test_unshared_audio_grows_per_cycle(self):
        shared = build_model(micro_fusion_config("ctcnet", n=1, m=2), seed=0)
        unshared = build_model(
            micro_fusion_config("ctcnet", n=1, m=2, audio_shared=False), seed=0)
        assert len(unshared.audio_blocks) == 3
        per_block = param_breakdown(shared)["audio_blocks"]
        assert (param_count(unshared) - param_count(shared)) == 2 * per_block

    def test_unshared_visual_grows_per_av_cycle(self):
        shared = build_model(micro_fusion_config("ctcnet", n=3, m=1), seed=0)
        unshared = build_model(
            micro_fusion_config("ctcnet", n=3, m=1, visual_shared=False), seed=0)
        assert len(unshared.visual_blocks) == 3
        per_block = param_breakdown(shared)["visual_blocks"]
        assert (param_count(unshared) - param_count(shared)) == 2 * per_block

    def test_frozen_backbone_not_counted(self, tiny_backbone):
        cfg = micro_fusion_config("ctcnet", visual_embed_dim=64)
        bare = build_model(cfg, seed=0)
        with_backbone = build_model(cfg, seed=0, backbone=tiny_backbone)
        assert param_count(with_backbone) == param_count(bare)

    def test_breakdown_sums_to_total(self):
        model = build_model(micro_fusion_config("ccnet"), seed=0)
        parts = param_breakdown(model)
        assert sum(parts.values()) == param_count(model)
        assert "depth_fusion" in parts


class TestCheckpoints:
    def test_round_trip_preserves_outputs(self, tmp_path):
        cfg = micro_fusion_config("ctcnet")
        model = build_model(cfg, seed=4).eval()
        path = tmp_path / "model.pt"
        save_model_checkpoint(path, model, extra={"epoch": 3})
        loaded, payload = load_model_checkpoint(path, expected_cfg=cfg)
        assert payload["epoch"] == 3
        assert not loaded.training
        mixture, visual = micro_inputs()
        with torch.no_grad():
            assert torch.equal(model(mixture, visual=visual),
                               loaded(mixture, visual=visual))

    def test_backbone_config_travels_with_checkpoint(self, tmp_path,
                                                     tiny_backbone):
        from ctcnet import tiny_frontend_config

        cfg = micro_fusion_config("ctcnet", visual_embed_dim=64)
        model = build_model(cfg, seed=4, backbone=tiny_backbone).eval()
        path = tmp_path / "model.pt"
        save_model_checkpoint(path, model, backbone_cfg=tiny_frontend_config())
        loaded, _ = load_model_checkpoint(path)
        assert loaded.backbone is not None
        assert loaded.backbone.out_dim == 64
        clip = torch.rand(1, 10, 32, 32)
        mixture, _ = micro_inputs()
        with torch.no_grad():
            assert torch.equal(model(mixture, clip=clip),
                               loaded(mixture, clip=clip))

    def test_tampered_config_refused(self, tmp_path):
        cfg = micro_fusion_config("ctcnet")
        model = build_model(cfg, seed=4)
        path = tmp_path / "model.pt"
        save_model_checkpoint(path, model)
        payload = torch.load(path, map_location="cpu", weights_only=False)
        payload["config"]["m"] = 7
        torch.save(payload, path)
        with pytest.raises(ConfigError):
            load_model_checkpoint(path)

    def test_wrong_expected_config_refused(self, tmp_path):
        model = build_model(micro_fusion_config("ctcnet"), seed=4)
        path = tmp_path / "model.pt"
        save_model_checkpoint(path, model)
        with pytest.raises(ConfigError):
            load_model_checkpoint(
                path, expected_cfg=micro_fusion_config("dftnet"))

    def test_unreadable_file_is_a_data_error(self, tmp_path):
        path = tmp_path / "noise.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(DataError):
            load_model_checkpoint(path)
