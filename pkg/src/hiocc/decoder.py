"""Query-based occupancy decoder over a coarse voxel grid.

Voxel features are seeded from depth-driven proposals by deformable
attention over multi-scale image features; a small set of global query
vectors then shuttles information between the image and the volume
through N iterations of four blocks: image-to-query deformable
attention, query-to-voxel cross attention restricted to the camera FOV,
a 3D UNet whose bottleneck the queries cross-attend to, and query
self-attention.  Every attention block is pre-norm residual.  The whole
pipeline is forward-only and bit-deterministic for a fixed parameter
store.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .mini_nn import (
    ParamStore,
    conv3d,
    deformable_attention,
    layer_norm,
    multi_head_attention,
    relu,
    sigmoid,
    softmax,
    upsample_trilinear,
)
from .voxel_grid import GridSpec


@dataclass(frozen=True)
class DecoderConfig:
    """Hyperparameters of the decoder stack.

    channels must divide evenly into heads; unet_scales counts encoder
    resolutions including the input one, so the grid dims must divide by
    2^(unet_scales - 1).
    """

    channels: int = 32
    num_queries: int = 128
    num_iters: int = 3
    unet_scales: int = 2
    heads: int = 4
    points: int = 4
    feature_levels: int = 2

    def __post_init__(self) -> None:
        if self.channels < 1 or self.num_queries < 1:
            raise ValueError("channels and num_queries must be positive")
        if self.num_iters < 0:
            raise ValueError("num_iters must be >= 0")
        if self.unet_scales < 2:
            raise ValueError("unet_scales must be >= 2")
        if self.heads < 1 or self.channels % self.heads != 0:
            raise ValueError(
                f"channels {self.channels} must divide into {self.heads} heads"
            )
        if self.points < 1 or self.feature_levels < 1:
            raise ValueError("points and feature_levels must be positive")

    def check_grid(self, spec: GridSpec) -> None:
        div = 2 ** (self.unet_scales - 1)
        if any(d % div for d in spec.dims):
            raise ValueError(
                f"grid dims {spec.dims} not divisible by 2^(S-1) = {div}"
            )


@dataclass
class SceneState:
    """Mutable decoder state for one frame.

    q_vox: voxel features [C, X, Y, Z].
    q_g: global queries [N_q, C].
    fov / proposal: flat [n] masks in grid C order.
    ref_points: normalized image coords of voxel centers, flat [n, 2].
    """

    spec: GridSpec
    q_vox: np.ndarray
    q_g: np.ndarray
    fov: np.ndarray
    proposal: np.ndarray
    ref_points: np.ndarray

    def flat_vox(self) -> np.ndarray:
        """Voxel features as [n, C] rows in grid C order."""
        c = self.q_vox.shape[0]
        return self.q_vox.reshape(c, -1).T

    def with_flat_vox(self, flat: np.ndarray) -> "SceneState":
        c = self.q_vox.shape[0]
        return replace(self, q_vox=flat.T.reshape(self.q_vox.shape).copy())


@dataclass
class DecoderTrace:
    """Attention-weight evidence collected during a run."""

    entries: list[dict] = field(default_factory=list)

    def record(self, stage: str, row_sums: np.ndarray, min_weight: float) -> None:
        self.entries.append(
            {
                "stage": stage,
                "row_sums": np.asarray(row_sums, dtype=np.float64).reshape(-1),
                "min_weight": float(min_weight),
            }
        )


def _trace_attention(trace: DecoderTrace | None, stage: str, weights: np.ndarray):
    if trace is not None and weights.size:
        trace.record(stage, weights.sum(axis=-1), float(weights.min()))


def _trace_deformable(trace: DecoderTrace | None, stage: str, weights: np.ndarray):
    # weights [N, H, L, P]: normalization is over (levels, points) per head.
    if trace is not None and weights.size:
        trace.record(stage, weights.sum(axis=(2, 3)), float(weights.min()))


def depth_context_features(
    depth_map: np.ndarray,
    cfg: DecoderConfig,
    params: ParamStore,
) -> list[np.ndarray]:
    """Multi-scale image features carrying depth context, coarsest last.

    Level l is the 2^l average pooling of the depth map pushed through a
    per-level 1x1 projection from 1 channel to `channels`.  A stand-in
    for a backbone: deterministic, depth-aware, and cheap.
    """
    depth_map = np.asarray(depth_map, dtype=np.float64)
    if depth_map.ndim != 2:
        raise ValueError(f"depth map must be [H, W], got {depth_map.shape}")
    h, w = depth_map.shape
    div = 2 ** (cfg.feature_levels - 1)
    if h % div or w % div:
        raise ValueError(
            f"image size {(h, w)} not divisible by 2^(levels-1) = {div}"
        )
    out = []
    pooled = depth_map
    for lv in range(cfg.feature_levels):
        if lv > 0:
            hh, ww = pooled.shape
            pooled = pooled.reshape(hh // 2, 2, ww // 2, 2).mean(axis=(1, 3))
        wv = params.get(f"stub/level{lv}/w", (cfg.channels,), fan_in=1)
        bv = params.get(f"stub/level{lv}/b", (cfg.channels,), init="zeros")
        out.append(wv[:, None, None] * pooled[None] + bv[:, None, None])
    return out


def _deformable_params(
    params: ParamStore, prefix: str, cfg: DecoderConfig
) -> dict:
    c, h, p, lv = cfg.channels, cfg.heads, cfg.points, cfg.feature_levels
    return {
        "off_w": params.get(f"{prefix}/off_w", (c, h * lv * p * 2)),
        "off_b": params.get(f"{prefix}/off_b", (h * lv * p * 2,), init="zeros"),
        "wgt_w": params.get(f"{prefix}/wgt_w", (c, h * lv * p)),
        "wgt_b": params.get(f"{prefix}/wgt_b", (h * lv * p,), init="zeros"),
        "value_proj": params.get(f"{prefix}/value_proj", (c, c)),
        "out_proj": params.get(f"{prefix}/out_proj", (c, c)),
        "out_bias": params.get(f"{prefix}/out_bias", (c,), init="zeros"),
    }


def _deformable_from_queries(
    q: np.ndarray,
    refs: np.ndarray,
    feats: list[np.ndarray],
    dp: dict,
    cfg: DecoderConfig,
    trace: DecoderTrace | None,
    stage: str,
) -> np.ndarray:
    n = q.shape[0]
    h, p, lv = cfg.heads, cfg.points, cfg.feature_levels
    offsets = (q @ dp["off_w"] + dp["off_b"]).reshape(n, h, lv, p, 2)
    raw = (q @ dp["wgt_w"] + dp["wgt_b"]).reshape(n, h, lv * p)
    weights = softmax(raw, axis=-1).reshape(n, h, lv, p)
    _trace_deformable(trace, stage, weights)
    return deformable_attention(
        refs,
        offsets,
        weights,
        feats,
        value_proj=dp["value_proj"],
        out_proj=dp["out_proj"],
        out_bias=dp["out_bias"],
    )


def _mha_params(params: ParamStore, prefix: str, c: int, kv_c: int | None = None):
    kv_c = kv_c if kv_c is not None else c
    return (
        params.get(f"{prefix}/wq", (c, c)),
        params.get(f"{prefix}/wk", (kv_c, c), fan_in=kv_c),
        params.get(f"{prefix}/wv", (kv_c, c), fan_in=kv_c),
        params.get(f"{prefix}/wo", (c, c)),
        params.get(f"{prefix}/bo", (c,), init="zeros"),
    )


def _ln_params(params: ParamStore, prefix: str, c: int):
    return (
        params.get(f"{prefix}/ln_g", (c,), init="ones"),
        params.get(f"{prefix}/ln_b", (c,), init="zeros"),
    )


def init_voxel_features(
    feats: list[np.ndarray],
    proposal: np.ndarray,
    fov: np.ndarray,
    ref_points: np.ndarray,
    spec: GridSpec,
    cfg: DecoderConfig,
    params: ParamStore,
    trace: DecoderTrace | None = None,
) -> SceneState:
    """Build the initial SceneState.

    Proposal voxels aggregate image features by deformable attention with
    a learned (input-independent) sampling pattern at their projected
    reference points; all other voxels share a learned mask embedding.
    Global queries start from their embedding table.
    """
    cfg.check_grid(spec)
    n = spec.num_voxels
    c = cfg.channels
    proposal = np.asarray(proposal, dtype=bool).reshape(-1)
    fov = np.asarray(fov, dtype=bool).reshape(-1)
    ref_points = np.asarray(ref_points, dtype=np.float64)
    if proposal.shape != (n,) or fov.shape != (n,):
        raise ValueError("proposal/fov masks must be flat over the grid")
    if ref_points.shape != (n, 2):
        raise ValueError(f"ref_points must be [{n}, 2], got {ref_points.shape}")
    if len(feats) != cfg.feature_levels:
        raise ValueError(
            f"expected {cfg.feature_levels} feature levels, got {len(feats)}"
        )

    mask_embed = params.get("init/mask_embed", (c,), fan_in=c)
    flat = np.tile(mask_embed, (n, 1))
    if proposal.any():
        h, p, lv = cfg.heads, cfg.points, cfg.feature_levels
        offsets = params.get("init/offsets", (h, lv, p, 2), fan_in=p * lv)
        wgt_logits = params.get("init/wgt_logits", (h, lv * p), fan_in=lv * p)
        weights = softmax(wgt_logits, axis=-1).reshape(h, lv, p)
        m = int(proposal.sum())
        w_b = np.broadcast_to(weights, (m, h, lv, p))
        _trace_deformable(trace, "init/deformable", w_b)
        agg = deformable_attention(
            ref_points[proposal],
            np.broadcast_to(offsets, (m, h, lv, p, 2)),
            w_b,
            feats,
            value_proj=params.get("init/value_proj", (c, c)),
            out_proj=params.get("init/out_proj", (c, c)),
            out_bias=params.get("init/out_bias", (c,), init="zeros"),
        )
        flat[proposal] = agg
    q_g = params.get("init/query_embed", (cfg.num_queries, c), fan_in=c).copy()
    state = SceneState(
        spec=spec,
        q_vox=np.empty((c,) + spec.dims),
        q_g=q_g,
        fov=fov.copy(),
        proposal=proposal.copy(),
        ref_points=ref_points.copy(),
    )
    return state.with_flat_vox(flat)


def query_image_ca(
    state: SceneState,
    feats: list[np.ndarray],
    cfg: DecoderConfig,
    params: ParamStore,
    it: int,
    trace: DecoderTrace | None = None,
) -> SceneState:
    """Global queries pull image evidence via deformable attention.

    Each query owns a learned reference point in [0, 1]^2 (shared across
    iterations); the block is pre-norm residual on q_g.
    """
    pfx = f"iter{it}/qi"
    g, b = _ln_params(params, pfx, cfg.channels)
    x = layer_norm(state.q_g, g, b)
    ref_logit = params.get(
        "init/query_ref_logit", (cfg.num_queries, 2), fan_in=2
    )
    refs = sigmoid(ref_logit)
    dp = _deformable_params(params, pfx, cfg)
    out = _deformable_from_queries(
        x, refs, feats, dp, cfg, trace, f"{pfx}/deformable"
    )
    return replace(state, q_g=state.q_g + out)


def scene_query_ca(
    state: SceneState,
    cfg: DecoderConfig,
    params: ParamStore,
    it: int,
    trace: DecoderTrace | None = None,
) -> SceneState:
    """In-FOV voxels attend to the global queries; others are untouched."""
    pfx = f"iter{it}/sq"
    if not state.fov.any():
        return state
    flat = state.flat_vox()
    g, b = _ln_params(params, pfx, cfg.channels)
    x = layer_norm(flat[state.fov], g, b)
    wq, wk, wv, wo, bo = _mha_params(params, pfx, cfg.channels)
    out, weights = multi_head_attention(
        x, state.q_g, wq, wk, wv, wo, bo, cfg.heads
    )
    _trace_attention(trace, f"{pfx}/attention", weights)
    flat = flat.copy()
    flat[state.fov] += out
    return state.with_flat_vox(flat)


def gq_module(
    state: SceneState,
    cfg: DecoderConfig,
    params: ParamStore,
    it: int,
    trace: DecoderTrace | None = None,
) -> SceneState:
    """3D UNet over q_vox with query cross-attention at the bottleneck.

    Encoder: one stride-1 conv at full scale, then stride-2 convs down to
    unet_scales resolutions with channels doubling to a 4C cap.  The
    global queries cross-attend to the flattened bottleneck tokens.
    Decoder: trilinear upsample, skip concat, fuse conv; a final 1x1x1
    conv maps back to C and replaces q_vox.
    """
    pfx = f"iter{it}/gq"
    c = cfg.channels
    vol = state.q_vox
    enc_ch = [min(c * 2**j, 4 * c) for j in range(cfg.unet_scales)]
    skips = []
    h = vol
    for j in range(cfg.unet_scales):
        cin = h.shape[0]
        cout = enc_ch[j]
        stride = 1 if j == 0 else 2
        wconv = params.get(
            f"{pfx}/enc{j}/w", (cout, cin, 3, 3, 3), fan_in=cin * 27
        )
        bconv = params.get(f"{pfx}/enc{j}/b", (cout,), init="zeros")
        h = relu(conv3d(h, wconv, bconv, stride=stride, padding=1))
        skips.append(h)

    # Bottleneck tokens feed the global queries.
    bottom = skips[-1]
    tokens = bottom.reshape(bottom.shape[0], -1).T  # [n_S, C_S]
    g, b = _ln_params(params, f"{pfx}/attn", c)
    x = layer_norm(state.q_g, g, b)
    wq, wk, wv, wo, bo = _mha_params(
        params, f"{pfx}/attn", c, kv_c=bottom.shape[0]
    )
    out, weights = multi_head_attention(x, tokens, wq, wk, wv, wo, bo, cfg.heads)
    _trace_attention(trace, f"{pfx}/attention", weights)
    q_g = state.q_g + out

    d = skips[-1]
    for j in range(cfg.unet_scales - 2, -1, -1):
        up = upsample_trilinear(d, factor=2)
        cat = np.concatenate([up, skips[j]], axis=0)
        cin = cat.shape[0]
        wconv = params.get(
            f"{pfx}/dec{j}/w", (enc_ch[j], cin, 3, 3, 3), fan_in=cin * 27
        )
        bconv = params.get(f"{pfx}/dec{j}/b", (enc_ch[j],), init="zeros")
        d = relu(conv3d(cat, wconv, bconv, stride=1, padding=1))
    wfin = params.get(f"{pfx}/final/w", (c, enc_ch[0], 1, 1, 1), fan_in=enc_ch[0])
    bfin = params.get(f"{pfx}/final/b", (c,), init="zeros")
    q_vox = conv3d(d, wfin, bfin)
    return replace(state, q_vox=q_vox, q_g=q_g)


def query_self_attention(
    state: SceneState,
    cfg: DecoderConfig,
    params: ParamStore,
    it: int,
    trace: DecoderTrace | None = None,
) -> SceneState:
    """Global queries exchange context among themselves (pre-norm residual)."""
    pfx = f"iter{it}/qsa"
    g, b = _ln_params(params, pfx, cfg.channels)
    x = layer_norm(state.q_g, g, b)
    wq, wk, wv, wo, bo = _mha_params(params, pfx, cfg.channels)
    out, weights = multi_head_attention(x, x, wq, wk, wv, wo, bo, cfg.heads)
    _trace_attention(trace, f"{pfx}/attention", weights)
    return replace(state, q_g=state.q_g + out)


def run_decoder(
    feats: list[np.ndarray],
    proposal: np.ndarray,
    fov: np.ndarray,
    ref_points: np.ndarray,
    spec: GridSpec,
    cfg: DecoderConfig,
    params: ParamStore,
    trace: DecoderTrace | None = None,
) -> np.ndarray:
    """Run the full decoder; returns q_low as [C, X, Y, Z].

    num_iters = 0 returns the initialized features unchanged.
    """
    state = init_voxel_features(
        feats, proposal, fov, ref_points, spec, cfg, params, trace
    )
    for it in range(cfg.num_iters):
        state = query_image_ca(state, feats, cfg, params, it, trace)
        state = scene_query_ca(state, cfg, params, it, trace)
        state = gq_module(state, cfg, params, it, trace)
        state = query_self_attention(state, cfg, params, it, trace)
    return state.q_vox
