"""Tests for the query-based decoder stack."""

import numpy as np
import pytest

from hiocc.decoder import (
    DecoderConfig,
    DecoderTrace,
    depth_context_features,
    gq_module,
    init_voxel_features,
    query_image_ca,
    query_self_attention,
    run_decoder,
    scene_query_ca,
)
from hiocc.mini_nn import ParamStore
from hiocc.voxel_grid import GridSpec

TOY = DecoderConfig(
    channels=16,
    num_queries=8,
    num_iters=2,
    unet_scales=2,
    heads=4,
    points=4,
    feature_levels=2,
)
TOY_SPEC = GridSpec(dims=(16, 16, 4), voxel_size=0.2)


def toy_inputs(rng, spec=TOY_SPEC, cfg=TOY, fov_frac=0.5, prop_frac=0.2):
    n = spec.num_voxels
    params = ParamStore(seed=0)
    feats = depth_context_features(rng.uniform(0, 20, (16, 16)), cfg, params)
    fov = rng.random(n) < fov_frac
    proposal = fov & (rng.random(n) < prop_frac / fov_frac)
    refs = np.full((n, 2), 0.5)
    refs[fov] = rng.uniform(0, 1, (int(fov.sum()), 2))
    return feats, proposal, fov, refs, params


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="heads"):
            DecoderConfig(channels=6, heads=4)
        with pytest.raises(ValueError, match="unet_scales"):
            DecoderConfig(unet_scales=1)
        with pytest.raises(ValueError, match="num_iters"):
            DecoderConfig(num_iters=-1)

    def test_grid_divisibility(self):
        cfg = DecoderConfig(unet_scales=3)
        cfg.check_grid(GridSpec(dims=(8, 8, 4), voxel_size=0.2))
        with pytest.raises(ValueError, match="divisible"):
            cfg.check_grid(GridSpec(dims=(6, 8, 4), voxel_size=0.2))


class TestDepthContext:
    def test_levels_halve(self, rng):
        params = ParamStore(seed=1)
        feats = depth_context_features(rng.uniform(0, 10, (8, 12)), TOY, params)
        assert len(feats) == 2
        assert feats[0].shape == (16, 8, 12)
        assert feats[1].shape == (16, 4, 6)

    def test_channels_are_affine_in_pooled_depth(self, rng):
        params = ParamStore(seed=1)
        depth = rng.uniform(0, 10, (8, 8))
        feats = depth_context_features(depth, TOY, params)
        # Each level is w * pooled + b per channel, and average pooling
        # preserves the image mean.
        for lv in range(2):
            w = params.get(f"stub/level{lv}/w", (16,))
            b = params.get(f"stub/level{lv}/b", (16,))
            assert np.allclose(
                feats[lv].mean(axis=(1, 2)), w * depth.mean() + b
            )

    def test_rejects_odd_size(self, rng):
        with pytest.raises(ValueError, match="divisible"):
            depth_context_features(np.zeros((7, 8)), TOY, ParamStore(seed=1))


class TestInit:
    def test_mask_embedding_everywhere_without_proposals(self, rng):
        feats, _, fov, refs, params = toy_inputs(rng)
        none = np.zeros(TOY_SPEC.num_voxels, bool)
        state = init_voxel_features(feats, none, fov, refs, TOY_SPEC, TOY, params)
        flat = state.flat_vox()
        assert np.ptp(flat, axis=0).max() == 0.0  # every row identical
        assert np.allclose(flat[0], params.get("init/mask_embed", (16,)))

    def test_proposal_rows_differ_from_mask_embed(self, rng):
        feats, proposal, fov, refs, params = toy_inputs(rng)
        state = init_voxel_features(
            feats, proposal, fov, refs, TOY_SPEC, TOY, params
        )
        flat = state.flat_vox()
        embed = params.get("init/mask_embed", (16,))
        assert not np.allclose(flat[proposal], embed)
        assert np.allclose(flat[~proposal], embed)

    def test_shape_errors(self, rng):
        feats, proposal, fov, refs, params = toy_inputs(rng)
        with pytest.raises(ValueError, match="masks"):
            init_voxel_features(
                feats, proposal[:-1], fov, refs, TOY_SPEC, TOY, params
            )
        with pytest.raises(ValueError, match="ref_points"):
            init_voxel_features(
                feats, proposal, fov, refs[:, :1], TOY_SPEC, TOY, params
            )
        with pytest.raises(ValueError, match="levels"):
            init_voxel_features(
                feats[:1], proposal, fov, refs, TOY_SPEC, TOY, params
            )


class TestStages:
    def test_out_of_fov_rows_bit_exact(self, rng):
        feats, proposal, fov, refs, params = toy_inputs(rng)
        state = init_voxel_features(
            feats, proposal, fov, refs, TOY_SPEC, TOY, params
        )
        before = state.flat_vox().copy()
        after = scene_query_ca(state, TOY, params, 0)
        flat = after.flat_vox()
        assert (flat[~fov] == before[~fov]).all()  # bitwise untouched
        assert not np.allclose(flat[fov], before[fov])

    def test_scene_query_ca_no_fov_is_identity(self, rng):
        feats, proposal, _, refs, params = toy_inputs(rng)
        none = np.zeros(TOY_SPEC.num_voxels, bool)
        state = init_voxel_features(
            feats, proposal, none, refs, TOY_SPEC, TOY, params
        )
        after = scene_query_ca(state, TOY, params, 0)
        assert after is state

    def test_query_stages_leave_voxels_alone(self, rng):
        feats, proposal, fov, refs, params = toy_inputs(rng)
        state = init_voxel_features(
            feats, proposal, fov, refs, TOY_SPEC, TOY, params
        )
        vox = state.q_vox.copy()
        s1 = query_image_ca(state, feats, TOY, params, 0)
        assert (s1.q_vox == vox).all()
        assert not np.allclose(s1.q_g, state.q_g)
        s2 = query_self_attention(s1, TOY, params, 0)
        assert (s2.q_vox == vox).all()

    def test_residual_identity_with_zero_out_proj(self, rng):
        # Zeroing the output projections turns every attention block into
        # the identity on its residual stream.
        feats, proposal, fov, refs, params = toy_inputs(rng)
        state = init_voxel_features(
            feats, proposal, fov, refs, TOY_SPEC, TOY, params
        )
        for pfx in ("iter0/qi/out_proj", "iter0/qi/out_bias"):
            shape = (16, 16) if pfx.endswith("proj") else (16,)
            params.set(pfx, np.zeros(shape))
        s1 = query_image_ca(state, feats, TOY, params, 0)
        assert (s1.q_g == state.q_g).all()

        params.set("iter0/sq/wo", np.zeros((16, 16)))
        params.set("iter0/sq/bo", np.zeros(16))
        s2 = scene_query_ca(state, TOY, params, 0)
        assert (s2.flat_vox() == state.flat_vox()).all()

        params.set("iter0/qsa/wo", np.zeros((16, 16)))
        params.set("iter0/qsa/bo", np.zeros(16))
        s3 = query_self_attention(state, TOY, params, 0)
        assert (s3.q_g == state.q_g).all()

    def test_gq_module_replaces_voxels_and_updates_queries(self, rng):
        feats, proposal, fov, refs, params = toy_inputs(rng)
        state = init_voxel_features(
            feats, proposal, fov, refs, TOY_SPEC, TOY, params
        )
        out = gq_module(state, TOY, params, 0)
        assert out.q_vox.shape == state.q_vox.shape
        assert not np.allclose(out.q_vox, state.q_vox)
        assert not np.allclose(out.q_g, state.q_g)

    def test_unet_channel_cap(self, rng):
        # With 4 scales the encoder widths are C, 2C, 4C, 4C (capped).
        cfg = DecoderConfig(
            channels=4,
            num_queries=4,
            num_iters=1,
            unet_scales=4,
            heads=2,
            points=2,
            feature_levels=2,
        )
        spec = GridSpec(dims=(8, 8, 8), voxel_size=0.2)
        params = ParamStore(seed=0)
        feats = depth_context_features(rng.uniform(0, 5, (8, 8)), cfg, params)
        n = spec.num_voxels
        state = init_voxel_features(
            feats,
            np.zeros(n, bool),
            np.ones(n, bool),
            np.full((n, 2), 0.5),
            spec,
            cfg,
            params,
        )
        gq_module(state, cfg, params, 0)
        assert params.get("iter0/gq/enc1/w", (8, 4, 3, 3, 3)).shape[0] == 8
        assert params.get("iter0/gq/enc2/w", (16, 8, 3, 3, 3)).shape[0] == 16
        assert params.get("iter0/gq/enc3/w", (16, 16, 3, 3, 3)).shape[0] == 16


class TestRunDecoder:
    def test_output_shape_and_determinism(self, rng):
        feats, proposal, fov, refs, params = toy_inputs(rng)
        out1 = run_decoder(
            feats, proposal, fov, refs, TOY_SPEC, TOY, ParamStore(seed=0)
        )
        out2 = run_decoder(
            feats, proposal, fov, refs, TOY_SPEC, TOY, ParamStore(seed=0)
        )
        assert out1.shape == (16, 16, 16, 4)
        assert (out1 == out2).all()  # bit-identical reruns

    def test_zero_iters_returns_init(self, rng):
        feats, proposal, fov, refs, params = toy_inputs(rng)
        cfg0 = DecoderConfig(
            channels=16,
            num_queries=8,
            num_iters=0,
            unet_scales=2,
            heads=4,
            points=4,
            feature_levels=2,
        )
        out = run_decoder(feats, proposal, fov, refs, TOY_SPEC, cfg0, params)
        state = init_voxel_features(
            feats, proposal, fov, refs, TOY_SPEC, cfg0, ParamStore(seed=0)
        )
        assert (out == state.q_vox).all()

    def test_trace_rows_normalized(self, rng):
        feats, proposal, fov, refs, params = toy_inputs(rng)
        trace = DecoderTrace()
        run_decoder(feats, proposal, fov, refs, TOY_SPEC, TOY, params, trace)
        stages = {e["stage"].split("/")[-1] for e in trace.entries}
        assert "deformable" in stages and "attention" in stages
        # 1 init + per iter: qi, sq, gq, qsa.
        assert len(trace.entries) == 1 + 4 * TOY.num_iters
        for e in trace.entries:
            assert np.abs(e["row_sums"] - 1.0).max() < 1e-9
            assert e["min_weight"] >= 0.0

    def test_seed_changes_output(self, rng):
        feats, proposal, fov, refs, _ = toy_inputs(rng)
        a = run_decoder(
            feats, proposal, fov, refs, TOY_SPEC, TOY, ParamStore(seed=0)
        )
        b = run_decoder(
            feats, proposal, fov, refs, TOY_SPEC, TOY, ParamStore(seed=1)
        )
        assert not np.allclose(a, b)
