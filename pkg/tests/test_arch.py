"""
Tests for the STOIC network: configuration, parameters and forward pieces
"""

import pytest
import torch

from stoic_diffusion.arch import (
    PRESETS,
    ContextSpec,
    DecoderConv,
    StoicConfig,
    StoicNet,
    StrideVariant,
    apply_context,
    build_params,
    core_block,
    decoder,
    initial_conv,
    param_layout,
    reduce_channels,
    run_block_stack,
    sinusoidal_features,
    stoic_forward,
    time_embed,
)
from stoic_diffusion.errors import ConfigError, ShapeError
from stoic_diffusion.params import ParamStore


def _random_sequence(config: StoicConfig, batch: int = 2, seed: int = 0) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.randn((batch, config.seq_len, config.embed_dim), generator=generator)


# =============================================================================
# Configuration
# =============================================================================


class TestStoicConfig:
    def test_defaults(self):
        config = StoicConfig()
        assert config.stride_variant == StrideVariant.S2
        assert (config.kernel, config.stride, config.padding) == (2, 2, 0)
        assert config.heads == 8
        assert config.decoder_conv == DecoderConv.CONV_TRANSPOSE
        assert config.seq_len == 256

    def test_s1_geometry(self):
        config = StoicConfig(StrideVariant.S1, (3, 32, 32))
        assert (config.kernel, config.stride, config.padding) == (3, 1, 1)
        assert config.out_hw == (32, 32)
        assert config.decoder_conv == DecoderConv.CONV

    def test_s2_needs_even_dims(self):
        with pytest.raises(ConfigError):
            StoicConfig(image_dims=(3, 7, 8))

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            StoicConfig(embed_dim=48, heads=5)

    def test_slice_reduce_needs_enough_channels(self):
        with pytest.raises(ConfigError):
            StoicConfig(image_dims=(4, 8, 8), embed_dim=3, heads=1)

    def test_s2_rejects_plain_conv_decoder(self):
        with pytest.raises(ConfigError):
            StoicConfig(decoder_conv="conv")

    def test_strings_are_coerced(self):
        config = StoicConfig(stride_variant="S1", time_concat="before_conv", image_dims=[1, 8, 8], embed_dim=16)
        assert config.stride_variant == StrideVariant.S1
        assert config.in_channels == 2

    def test_with_resets_derived_defaults(self):
        config = StoicConfig(image_dims=(3, 8, 8)).with_(stride_variant=StrideVariant.S1, embed_dim=128)
        assert config.decoder_conv == DecoderConv.CONV
        assert config.heads == 2

    def test_dict_round_trip(self):
        config = StoicConfig(image_dims=(4, 8, 8), embed_dim=32, context=ContextSpec(77, 8))
        assert StoicConfig.from_dict(config.to_dict()) == config

    def test_presets_validate(self):
        assert PRESETS["celeba_s1"].image_dims == (3, 64, 64)
        assert PRESETS["mscoco_latent_s2"].context == ContextSpec(77, 768)


# =============================================================================
# Parameters
# =============================================================================


class TestParamStore:
    def test_iteration_is_sorted(self):
        store = ParamStore({"b/x": torch.zeros(1), "a/y": torch.zeros(2)})
        assert list(store) == ["a/y", "b/x"]

    def test_duplicate_path(self):
        store = ParamStore({"a": torch.zeros(1)})
        with pytest.raises(ValueError):
            store.add("a", torch.zeros(1))

    def test_scope_shares_tensors(self):
        tensor = torch.zeros(3)
        store = ParamStore({"block0/attn/out_b": tensor, "block1/attn/out_b": torch.ones(3)})
        view = store.scope("block0")
        assert list(view) == ["attn/out_b"]
        assert view["attn/out_b"] is tensor

    def test_scope_missing_prefix(self):
        with pytest.raises(KeyError):
            ParamStore({"a/b": torch.zeros(1)}).scope("c")

    def test_replace_keeps_shape(self):
        store = ParamStore({"a": torch.zeros(2)})
        with pytest.raises(ShapeError):
            store.replace("a", torch.zeros(3))


class TestBuildParams:
    def test_deterministic_per_seed(self, tiny_config):
        assert build_params(tiny_config, 5).equal(build_params(tiny_config, 5))
        assert not build_params(tiny_config, 5).equal(build_params(tiny_config, 6))

    def test_matches_layout(self, tiny_config):
        params = build_params(tiny_config, 0)
        assert params.shapes() == {spec.path: spec.shape for spec in param_layout(tiny_config)}

    def test_truncated_normal_bounds(self):
        params = build_params(StoicConfig(image_dims=(3, 8, 8), embed_dim=64, num_blocks=1), 0)
        weight = params["block0/mlp/fc1_w"]
        assert float(weight.abs().max()) <= 0.04
        assert float(weight.std()) == pytest.approx(0.0176, abs=0.002)

    def test_decoder_starts_at_zero(self, tiny_config):
        params = build_params(tiny_config, 0)
        assert torch.count_nonzero(params["decoder/conv/weight"]) == 0

    def test_blocks_share_shapes(self):
        config = StoicConfig(image_dims=(3, 8, 8), embed_dim=32, num_blocks=4)
        params = build_params(config, 0)
        first = params.scope("block0").shapes()
        for index in range(1, 4):
            assert params.scope(f"block{index}").shapes() == first

    def test_float64(self, tiny_config):
        params = build_params(tiny_config, 0, torch.float64)
        assert all(params[path].dtype == torch.float64 for path in params)


# =============================================================================
# Forward pass
# =============================================================================


class TestForward:
    @pytest.mark.parametrize("stride", [StrideVariant.S1, StrideVariant.S2])
    @pytest.mark.parametrize("dims", [(1, 8, 8), (3, 8, 8), (3, 32, 32)])
    @pytest.mark.parametrize("blocks", [2, 4])
    def test_output_shape_equals_input_shape(self, stride, dims, blocks, perturb):
        config = StoicConfig(stride, dims, embed_dim=16, num_blocks=blocks)
        params = perturb(build_params(config, 0))
        x = torch.randn((2, *dims), generator=torch.Generator().manual_seed(0))
        out = stoic_forward(x, torch.tensor([1, 500]), None, params, config)
        assert out.shape == x.shape

    def test_zero_decoder_gives_zero_output(self, tiny_net):
        x = torch.randn((3, 1, 8, 8), generator=torch.Generator().manual_seed(0))
        out = tiny_net(x, 10)
        assert torch.equal(out, torch.zeros_like(x))

    def test_initial_conv_sequence_shape(self, tiny_config):
        params = build_params(tiny_config, 0)
        seq = initial_conv(torch.zeros((2, 1, 8, 8)), params, tiny_config)
        assert seq.shape == (2, 16, 16)

    def test_initial_conv_rejects_wrong_channels(self, tiny_config):
        params = build_params(tiny_config, 0)
        with pytest.raises(ShapeError):
            initial_conv(torch.zeros((2, 3, 8, 8)), params, tiny_config)

    @pytest.mark.parametrize("concat, plane", [("before_conv", (8, 8)), ("after_conv", (4, 4))])
    def test_time_plane_follows_concat_point(self, concat, plane):
        config = StoicConfig(image_dims=(1, 8, 8), embed_dim=16, num_blocks=1, time_concat=concat)
        params = build_params(config, 0)
        assert time_embed(torch.tensor([1, 2, 3]), params, config).shape == (3, 1, *plane)

    def test_before_conv_forward(self, perturb):
        config = StoicConfig(StrideVariant.S1, (3, 8, 8), embed_dim=16, num_blocks=2, time_concat="before_conv")
        params = perturb(build_params(config, 0))
        out = stoic_forward(torch.zeros((1, 3, 8, 8)), 7, None, params, config)
        assert out.shape == (1, 3, 8, 8)

    def test_time_changes_output(self, tiny_config, perturb):
        params = perturb(build_params(tiny_config, 0))
        x = torch.randn((1, 1, 8, 8), generator=torch.Generator().manual_seed(0))
        assert not torch.equal(stoic_forward(x, 1, None, params, tiny_config),
                               stoic_forward(x, 900, None, params, tiny_config))

    def test_context_changes_output(self, perturb):
        config = StoicConfig(image_dims=(4, 8, 8), embed_dim=16, num_blocks=2, context=ContextSpec(77, 8))
        net = StoicNet(config, perturb(build_params(config, 0)))
        x = torch.randn((1, 4, 8, 8), generator=torch.Generator().manual_seed(0))
        context = torch.ones((1, 77, 8))
        assert not torch.equal(net(x, 5, context), net(x, 5, net.null_context(1)))

    def test_context_presence_must_match_config(self, tiny_net):
        with pytest.raises(ShapeError):
            tiny_net(torch.zeros((1, 1, 8, 8)), 1, torch.zeros((1, 77, 8)))

    def test_wrong_image_shape(self, tiny_net):
        with pytest.raises(ShapeError):
            tiny_net(torch.zeros((1, 1, 8, 6)), 1)

    def test_batch_norm_ablation(self, perturb):
        config = StoicConfig(image_dims=(1, 8, 8), embed_dim=16, num_blocks=1, initial_norm="batch_norm")
        params = perturb(build_params(config, 0))
        assert "init_norm/gamma" in params
        out = stoic_forward(torch.randn((4, 1, 8, 8)), 3, None, params, config)
        assert out.shape == (4, 1, 8, 8)

    def test_linear_reduce(self, perturb):
        config = StoicConfig(image_dims=(3, 8, 8), embed_dim=16, num_blocks=1, decoder_reduce="linear")
        params = perturb(build_params(config, 0))
        assert params["decoder/reduce/weight"].shape == (3, 16)
        assert stoic_forward(torch.zeros((2, 3, 8, 8)), 3, None, params, config).shape == (2, 3, 8, 8)

    def test_sinusoidal_features_at_zero(self):
        features = sinusoidal_features(torch.tensor([0]), 8)
        torch.testing.assert_close(features, torch.tensor([[0.0] * 4 + [1.0] * 4], dtype=torch.float64))


class TestBlockStack:
    def test_ping_pong_matches_naive_exactly(self, perturb):
        config = StoicConfig(image_dims=(3, 8, 8), embed_dim=64, num_blocks=32)
        params = perturb(build_params(config, 0), scale=0.02)
        seq = _random_sequence(config)
        with torch.no_grad():
            naive = run_block_stack(seq, params, config, schedule="naive")
            ping_pong = run_block_stack(seq, params, config, schedule="ping_pong")
        assert torch.equal(naive, ping_pong)

    def test_ping_pong_refuses_autograd(self, tiny_config):
        params = build_params(tiny_config, 0)
        with pytest.raises(ValueError):
            run_block_stack(_random_sequence(tiny_config), params, tiny_config, schedule="ping_pong")

    def test_unknown_schedule(self, tiny_config):
        with pytest.raises(ValueError):
            run_block_stack(_random_sequence(tiny_config), build_params(tiny_config, 0), tiny_config, "streamed")

    def test_permutation_equivariant(self, tiny_config, perturb):
        params = perturb(build_params(tiny_config, 0))
        seq = _random_sequence(tiny_config, batch=1)
        perm = torch.randperm(tiny_config.seq_len, generator=torch.Generator().manual_seed(3))
        torch.testing.assert_close(
            run_block_stack(seq[:, perm], params, tiny_config),
            run_block_stack(seq, params, tiny_config)[:, perm],
            atol=1e-5,
            rtol=1e-5,
        )

    def test_output_shape_equals_input(self, tiny_config):
        seq = _random_sequence(tiny_config)
        assert run_block_stack(seq, build_params(tiny_config, 0), tiny_config).shape == seq.shape


class TestLocality:
    def test_shifted_input_shifts_output(self, perturb):
        """With attention mixing disabled, a 2-pixel input shift moves the output by 2 pixels"""
        config = StoicConfig(image_dims=(1, 16, 16), embed_dim=16, num_blocks=2)
        params = perturb(build_params(config, 0))
        for block in range(config.num_blocks):
            params.replace(f"block{block}/attn/out_w", torch.zeros_like(params[f"block{block}/attn/out_w"]))
        params.replace("time_embed/weight", torch.zeros_like(params["time_embed/weight"]))
        params.replace("time_embed/bias", torch.zeros_like(params["time_embed/bias"]))

        x = torch.randn((1, 1, 16, 16), generator=torch.Generator().manual_seed(0))
        shifted = torch.roll(x, shifts=2, dims=-1)
        out = stoic_forward(x, 1, None, params, config)
        out_shifted = stoic_forward(shifted, 1, None, params, config)
        torch.testing.assert_close(out_shifted[..., 4:14], out[..., 2:12], atol=1e-5, rtol=1e-5)


# =============================================================================
# Network pieces
# =============================================================================


class TestContext:
    def test_merge_width_is_embed_plus_tokens(self):
        config = StoicConfig(image_dims=(3, 32, 32), embed_dim=512, context=ContextSpec(77, 8))
        shapes = {spec.path: spec.shape for spec in param_layout(config)}
        assert shapes["context_merge/weight"] == (512, 589)
        assert shapes["context_embed/weight"] == (config.seq_len, 8)

    def test_identity_merge_is_a_no_op(self):
        config = StoicConfig(image_dims=(1, 8, 8), embed_dim=16, num_blocks=1, context=ContextSpec(4, 2))
        params = build_params(config, 0)
        params.replace("context_embed/weight", torch.zeros((16, 2)))
        params.replace("context_merge/weight", torch.cat([torch.eye(16), torch.zeros((16, 4))], dim=1))
        features = _random_sequence(config)
        context = torch.randn((2, 4, 2), generator=torch.Generator().manual_seed(1))
        torch.testing.assert_close(apply_context(features, context, params, config), features)

    def test_rejects_wrong_token_count(self):
        config = StoicConfig(image_dims=(1, 8, 8), embed_dim=16, num_blocks=1, context=ContextSpec(4, 2))
        with pytest.raises(ShapeError):
            apply_context(_random_sequence(config), torch.zeros((2, 5, 2)), build_params(config, 0), config)


class TestCoreBlock:
    def test_zero_output_projections_give_identity(self, tiny_config):
        params = build_params(tiny_config, 0)
        for path in ("attn/out_w", "attn/out_b", "mlp/fc2_w", "mlp/fc2_b"):
            full = f"block0/{path}"
            params.replace(full, torch.zeros_like(params[full]))
        seq = _random_sequence(tiny_config)
        assert torch.equal(core_block(seq, params.scope("block0"), tiny_config.heads), seq)

    def test_shape_preserved(self, tiny_config, perturb):
        params = perturb(build_params(tiny_config, 0))
        seq = _random_sequence(tiny_config, batch=3)
        assert core_block(seq, params.scope("block1"), tiny_config.heads).shape == seq.shape


class TestDecoder:
    def test_slice_keeps_leading_channels(self):
        config = StoicConfig(image_dims=(3, 8, 8), embed_dim=16, num_blocks=1)
        seq = torch.tensor([[[1.0, 2.0, 3.0, 4.0]]])
        assert torch.equal(reduce_channels(seq, ParamStore(), config), torch.tensor([[[1.0, 2.0, 3.0]]]))

    def test_s2_restores_image_dims(self, perturb):
        config = StoicConfig(image_dims=(3, 32, 32), embed_dim=16, num_blocks=1)
        params = perturb(build_params(config, 0))
        seq = _random_sequence(config)
        assert seq.shape == (2, 256, 16)
        assert decoder(seq, params, config).shape == (2, 3, 32, 32)

    def test_zero_conv_gives_zero_image(self):
        config = StoicConfig(image_dims=(3, 32, 32), embed_dim=16, num_blocks=1)
        out = decoder(_random_sequence(config), build_params(config, 0), config)
        assert torch.equal(out, torch.zeros((2, 3, 32, 32)))

    def test_rejects_wrong_sequence_length(self, tiny_config):
        with pytest.raises(ShapeError):
            decoder(torch.zeros((1, 15, 16)), build_params(tiny_config, 0), tiny_config)
