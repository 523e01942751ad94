"""Forward-only neural building blocks on float64 numpy arrays.

Everything here is deterministic: parameters come from a counter-based
RNG keyed by (scheme, seed, parameter name), so the same name always
yields the same tensor regardless of creation order, and all math runs
in float64 with no hidden state.  There is no autodiff; the training
losses carry their own analytic gradients.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_vjp(probs: np.ndarray, grad: np.ndarray, axis: int = -1) -> np.ndarray:
    """Pull a gradient on softmax outputs back to the logits."""
    inner = (grad * probs).sum(axis=axis, keepdims=True)
    return probs * (grad - inner)


_ACTIVATIONS = {"linear": lambda x: x, "relu": relu, "sigmoid": sigmoid, "tanh": np.tanh}


class ParamStore:
    """Named parameter tensors with order-independent deterministic init.

    Each tensor is drawn from a Philox stream keyed by
    blake2b(f"{scheme}:{seed}:{name}"), so adding or removing other
    parameters never shifts anyone else's values.  Weights default to
    uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """

    def __init__(self, seed: int, scheme: str = "fan_in_uniform") -> None:
        self.seed = int(seed)
        self.scheme = scheme
        self._params: dict[str, np.ndarray] = {}

    def _rng(self, name: str) -> np.random.Generator:
        digest = hashlib.blake2b(
            f"{self.scheme}:{self.seed}:{name}".encode(), digest_size=16
        ).digest()
        key = np.frombuffer(digest, dtype="<u8")
        return np.random.Generator(np.random.Philox(key=key))

    def get(
        self,
        name: str,
        shape: tuple[int, ...],
        init: str = "uniform",
        fan_in: int | None = None,
    ) -> np.ndarray:
        """Fetch a tensor, creating it on first use.

        Args:
            name: unique parameter path, e.g. "iter0/qi/w_off".
            shape: required shape; mismatches with a stored tensor raise.
            init: "uniform" (fan-in scaled), "zeros", or "ones".
            fan_in: overrides shape[0] as the fan-in for uniform init.
        """
        shape = tuple(int(s) for s in shape)
        if name in self._params:
            found = self._params[name]
            if found.shape != shape:
                raise ValueError(
                    f"param {name!r} has shape {found.shape}, requested {shape}"
                )
            return found
        if init == "uniform":
            bound = 1.0 / np.sqrt(fan_in if fan_in is not None else shape[0])
            arr = self._rng(name).uniform(-bound, bound, size=shape)
        elif init == "zeros":
            arr = np.zeros(shape)
        elif init == "ones":
            arr = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        self._params[name] = arr
        return arr

    def set(self, name: str, value: np.ndarray) -> None:
        self._params[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def state(self) -> dict[str, np.ndarray]:
        return dict(self._params)

    def save(self, prefix: str | Path) -> None:
        save_tensor_blob(
            prefix, self._params, extra={"seed": self.seed, "scheme": self.scheme}
        )

    @classmethod
    def load(cls, prefix: str | Path) -> "ParamStore":
        tensors, extra = load_tensor_blob(prefix)
        store = cls(seed=int(extra["seed"]), scheme=str(extra["scheme"]))
        store._params = tensors
        return store


def save_tensor_blob(
    prefix: str | Path,
    tensors: dict[str, np.ndarray],
    extra: dict | None = None,
) -> tuple[Path, Path]:
    """Write tensors as `<prefix>.bin` (f64 LE) plus `<prefix>.json` manifest.

    The manifest records each tensor's name, shape, and byte offset into
    the blob, in a fixed sorted order, so files are reproducible and
    readable without this library.
    """
    prefix = Path(prefix)
    manifest: dict = {"dtype": "<f8", "tensors": []}
    if extra:
        manifest["extra"] = extra
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        manifest["tensors"].append(
            {"name": name, "shape": list(arr.shape), "offset": offset}
        )
        chunks.append(arr.tobytes())
        offset += len(chunks[-1])
    bin_path = prefix.with_suffix(".bin")
    json_path = prefix.with_suffix(".json")
    bin_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps(manifest, indent=2))
    return bin_path, json_path


def load_tensor_blob(prefix: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of save_tensor_blob: returns (tensors, extra)."""
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    if manifest.get("dtype") != "<f8":
        raise ValueError(f"unsupported blob dtype {manifest.get('dtype')!r}")
    blob = prefix.with_suffix(".bin").read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return tensors, manifest.get("extra", {})


def mlp_forward(
    x: np.ndarray,
    layers: Sequence[tuple[np.ndarray, np.ndarray | None]],
    activation: str = "relu",
) -> np.ndarray:
    """Apply (weight, bias) layers with `activation` between them.

    The final layer is linear.  Weights are [d_in, d_out]; x is [..., d_in].
    """
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    act = _ACTIVATIONS[activation]
    h = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(layers):
        if h.shape[-1] != w.shape[0]:
            raise ValueError(
                f"layer {i}: input width {h.shape[-1]} != weight rows {w.shape[0]}"
            )
        h = h @ w
        if b is not None:
            h = h + b
        if i + 1 < len(layers):
            h = act(h)
    return h


def layer_norm(
    x: np.ndarray,
    gain: np.ndarray,
    bias: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def attention_forward(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention.

    Args:
        q: queries [Nq, D].
        k: keys [Nk, D].
        v: values [Nk, Dv].
        mask: optional bool [Nq, Nk]; False entries are excluded.  Every
            query row must keep at least one allowed key.

    Returns:
        (output [Nq, Dv], weights [Nq, Nk]); weight rows sum to 1.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("q, k, v must be 2D")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"q width {q.shape[1]} != k width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"k rows {k.shape[0]} != v rows {v.shape[0]}")
    scores = q @ k.T / np.sqrt(q.shape[1])
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != scores.shape:
            raise ValueError(f"mask shape {mask.shape} != scores {scores.shape}")
        if not mask.any(axis=1).all():
            raise ValueError("attention row with every key masked out")
        scores = np.where(mask, scores, -np.inf)
    weights = softmax(scores, axis=-1)
    return weights @ v, weights


def multi_head_attention(
    q_in: np.ndarray,
    kv_in: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wo: np.ndarray,
    bo: np.ndarray | None,
    heads: int,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Multi-head attention over projected inputs.

    q_in is [Nq, C], kv_in is [Nk, C]; all projections are [C, C] and the
    model width must divide evenly into `heads`.

    Returns:
        (output [Nq, C], weights [heads, Nq, Nk]).
    """
    c = q_in.shape[-1]
    if c % heads != 0:
        raise ValueError(f"width {c} not divisible by {heads} heads")
    dh = c // heads
    q = q_in @ wq
    k = kv_in @ wk
    v = kv_in @ wv
    outs = []
    weights = np.empty((heads, q_in.shape[0], kv_in.shape[0]))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        out_h, w_h = attention_forward(q[:, sl], k[:, sl], v[:, sl], mask=mask)
        outs.append(out_h)
        weights[h] = w_h
    out = np.concatenate(outs, axis=-1) @ wo
    if bo is not None:
        out = out + bo
    return out, weights


def bilinear_sample(feature_map: np.ndarray, pix: np.ndarray) -> np.ndarray:
    """Sample [C, H, W] at continuous pixel coords [N, 2] (x, y).

    Coordinates follow the pixel-center convention (pixel j at x = j) and
    are border-clamped, so samples outside the image replicate the edge.
    """
    feature_map = np.asarray(feature_map, dtype=np.float64)
    pix = np.asarray(pix, dtype=np.float64)
    if feature_map.ndim != 3:
        raise ValueError(f"feature map must be [C, H, W], got {feature_map.shape}")
    if pix.ndim != 2 or pix.shape[1] != 2:
        raise ValueError(f"pix must be [N, 2], got {pix.shape}")
    _, h, w = feature_map.shape
    x = np.clip(pix[:, 0], 0.0, w - 1.0)
    y = np.clip(pix[:, 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    tx = x - x0
    ty = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    f00 = feature_map[:, y0, x0]
    f01 = feature_map[:, y0, x1]
    f10 = feature_map[:, y1, x0]
    f11 = feature_map[:, y1, x1]
    top = f00 * (1 - tx) + f01 * tx
    bot = f10 * (1 - tx) + f11 * tx
    return (top * (1 - ty) + bot * ty).T


def deformable_attention(
    ref_points: np.ndarray,
    offsets: np.ndarray,
    weights: np.ndarray,
    feature_maps: Sequence[np.ndarray],
    value_proj: np.ndarray | None = None,
    out_proj: np.ndarray | None = None,
    out_bias: np.ndarray | None = None,
) -> np.ndarray:
    """Multi-scale deformable attention for a batch of queries.

    Each query samples `points` locations around its reference point on
    every feature level and blends them with given weights; heads split
    the channel dimension.

    Args:
        ref_points: [N, 2] normalized (x, y) in [0, 1].
        offsets: [N, heads, levels, points, 2] in normalized units.
        weights: [N, heads, levels, points], nonnegative, summing to 1
            over (levels, points) for every (query, head).
        feature_maps: per level [C, H_l, W_l]; C must divide by heads.
        value_proj / out_proj / out_bias: optional [C, C] / [C, C] / [C].

    Returns:
        [N, C] aggregated features.
    """
    ref_points = np.asarray(ref_points, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n, heads, levels, points, two = offsets.shape
    if two != 2 or ref_points.shape != (n, 2):
        raise ValueError("offsets must be [N, H, L, P, 2] matching ref [N, 2]")
    if weights.shape != (n, heads, levels, points):
        raise ValueError(f"weights shape {weights.shape} mismatches offsets")
    if len(feature_maps) != levels:
        raise ValueError(f"got {len(feature_maps)} maps for {levels} levels")
    if weights.min(initial=0.0) < 0:
        raise ValueError("negative sampling weight")
    if n and np.abs(weights.sum(axis=(2, 3)) - 1.0).max() > 1e-6:
        raise ValueError("sampling weights must sum to 1 per query and head")
    c = feature_maps[0].shape[0]
    if c % heads != 0:
        raise ValueError(f"channels {c} not divisible by {heads} heads")
    dh = c // heads
    out = np.zeros((n, c))
    for lv, fm in enumerate(feature_maps):
        fm = np.asarray(fm, dtype=np.float64)
        if fm.shape[0] != c:
            raise ValueError("all levels must share the channel count")
        if value_proj is not None:
            fm = np.einsum("cd,chw->dhw", value_proj, fm)
        _, hl, wl = fm.shape
        loc = ref_points[:, None, None, :] + offsets[:, :, lv, :, :]  # [N,H,P,2]
        pix = np.empty_like(loc)
        pix[..., 0] = loc[..., 0] * wl - 0.5
        pix[..., 1] = loc[..., 1] * hl - 0.5
        samples = bilinear_sample(fm, pix.reshape(-1, 2)).reshape(n, heads, points, c)
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            out[:, sl] += np.einsum(
                "np,npc->nc", weights[:, h, lv, :], samples[:, h, :, sl]
            )
    if out_proj is not None:
        out = out @ out_proj
    if out_bias is not None:
        out = out + out_bias
    return out


def conv3d(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int | tuple[int, int, int] = 1,
    padding: int | tuple[int, int, int] = 0,
) -> np.ndarray:
    """3D cross-correlation: x [Cin, X, Y, Z], weight [Cout, Cin, kx, ky, kz]."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if x.ndim != 4 or weight.ndim != 5:
        raise ValueError("x must be [Cin, X, Y, Z] and weight [Cout, Cin, k, k, k]")
    if x.shape[0] != weight.shape[1]:
        raise ValueError(
            f"input channels {x.shape[0]} != weight channels {weight.shape[1]}"
        )
    sx, sy, sz = (stride, stride, stride) if isinstance(stride, int) else stride
    px, py, pz = (padding, padding, padding) if isinstance(padding, int) else padding
    xp = np.pad(x, ((0, 0), (px, px), (py, py), (pz, pz)))
    _, kx, ky, kz = weight.shape[1:]
    dims_out = []
    for size, k, s in zip(xp.shape[1:], (kx, ky, kz), (sx, sy, sz)):
        if size < k:
            raise ValueError("kernel larger than padded input")
        dims_out.append((size - k) // s + 1)
    ox, oy, oz = dims_out
    out = np.zeros((weight.shape[0], ox, oy, oz))
    for dx in range(kx):
        for dy in range(ky):
            for dz in range(kz):
                patch = xp[
                    :,
                    dx : dx + sx * ox : sx,
                    dy : dy + sy * oy : sy,
                    dz : dz + sz * oz : sz,
                ]
                out += np.einsum("oc,cxyz->oxyz", weight[:, :, dx, dy, dz], patch)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[:, None, None, None]
    return out


def upsample_trilinear(x: np.ndarray, factor: int = 2) -> np.ndarray:
    """Trilinear upsampling of [C, X, Y, Z] with half-pixel alignment."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected [C, X, Y, Z], got {x.shape}")
    if factor < 1:
        raise ValueError("factor must be >= 1")
    out = x
    for axis in range(1, 4):
        n_in = out.shape[axis]
        pos = np.clip((np.arange(n_in * factor) + 0.5) / factor - 0.5, 0, n_in - 1)
        i0 = np.floor(pos).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        t = pos - i0
        a = np.take(out, i0, axis=axis)
        b = np.take(out, i1, axis=axis)
        shape = [1] * out.ndim
        shape[axis] = len(pos)
        out = a + (b - a) * t.reshape(shape)
    return out
