"""Rotation-equivariant local features and NetVLAD global descriptors.

The local feature extractor is a stack of same-padded stride-1 convolutions
with leaky-ReLU (slope 0.1) between layers. The rotation-equivariant module
(REM) runs the stack on ``N_rot`` rotated copies of the input, rotates each
output back and takes the element-wise maximum (lowest rotation index wins
ties). NetVLAD soft-assigns every location to ``K`` clusters, sums residuals
to the cluster centers, intra-normalizes each cluster row and L2-normalizes
the concatenation.

Everything runs in float64 and has a hand-written reverse pass:
:func:`describe_batch` with ``keep_cache=True`` records the intermediates
that :func:`backward` consumes.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from sbevloc import container, kernels
from sbevloc.bev import BevImage, rotate_array, rotate_array_transpose
from sbevloc.errors import CheckpointError, DegenerateDescriptor, MissingCache, ShapeMismatch

EPS = 1e-12
LEAKY_SLOPE = 0.1
CHECKPOINT_MAGIC = b"SBEVCKPT"
CHECKPOINT_VERSION = 1
VLAD_ALPHA = 10.0


@dataclass(frozen=True)
class ModelConfig:
    conv_channels: tuple[int, ...] = (8, 16, 16)
    kernel: int = 3
    rem_rotations: int = 8
    vlad_clusters: int = 64
    in_channels: int = 1
    # Expected local-feature magnitude; centers are drawn at this scale and
    # the assignment sharpness is divided by its square.
    vlad_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.rem_rotations < 1 or self.vlad_clusters < 2:
            raise ValueError("rem_rotations must be >= 1 and vlad_clusters >= 2")
        if not self.conv_channels or min(self.conv_channels) < 1 or self.kernel < 1:
            raise ValueError("conv dimensions must be >= 1")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd for same padding")
        if not self.vlad_scale > 0:
            raise ValueError("vlad_scale must be positive")

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1]

    @property
    def descriptor_dim(self) -> int:
        return self.vlad_clusters * self.feature_dim

    def to_meta(self) -> dict[str, str]:
        return {
            "conv_channels": ",".join(map(str, self.conv_channels)),
            "kernel": str(self.kernel),
            "rem_rotations": str(self.rem_rotations),
            "vlad_clusters": str(self.vlad_clusters),
            "in_channels": str(self.in_channels),
            "vlad_scale": repr(float(self.vlad_scale)),
        }

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "ModelConfig":
        return cls(
            tuple(int(c) for c in meta["conv_channels"].split(",")),
            int(meta["kernel"]), int(meta["rem_rotations"]),
            int(meta["vlad_clusters"]), int(meta["in_channels"]),
            float(meta.get("vlad_scale", "1.0")),
        )


def tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.conv_channels):
        shapes[f"conv{i}.weight"] = (cfg.kernel, cfg.kernel, cin, cout)
        shapes[f"conv{i}.bias"] = (cout,)
        cin = cout
    k, c = cfg.vlad_clusters, cfg.feature_dim
    shapes["vlad.centers"] = (k, c)
    shapes["vlad.weight"] = (k, c)
    shapes["vlad.bias"] = (k,)
    return shapes


@dataclass(eq=False)
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = tensor_shapes(self.config)
        if list(self.tensors) != list(expected):
            raise ShapeMismatch(f"tensor names {list(self.tensors)} != {list(expected)}")
        for name, shape in expected.items():
            arr = np.asarray(self.tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name}: shape {arr.shape} != {shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} has non-finite values")
            self.tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def n_layers(self) -> int:
        return len(self.config.conv_channels)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def equal(self, other: "ModelParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()
        )

    def to_bytes(self) -> bytes:
        return container.encode(
            CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self.config.to_meta(), list(self.tensors.items())
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelParams":
        version, meta, tensors = container.decode(raw, CHECKPOINT_MAGIC)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        return cls(ModelConfig.from_meta(meta), tensors)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelParams":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform convolutions and distance-style NetVLAD clusters."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_shapes(cfg).items():
        if name.startswith("conv") and name.endswith("weight"):
            k, _, cin, cout = shape
            bound = math.sqrt(6.0 / (k * k * cin + k * k * cout))
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif name.startswith("conv"):
            tensors[name] = np.zeros(shape)
        elif name == "vlad.centers":
            tensors[name] = cfg.vlad_scale * rng.standard_normal(shape)
    c = tensors["vlad.centers"]
    alpha = VLAD_ALPHA / cfg.vlad_scale ** 2
    tensors["vlad.weight"] = 2.0 * alpha * c
    tensors["vlad.bias"] = -alpha * np.sum(c * c, axis=1)
    return ModelParams(cfg, {k: tensors[k] for k in tensor_shapes(cfg)})


def zeros_like(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


# ------------------------------------------------------------------ forward


@dataclass
class ForwardCache:
    batch: int
    n_rot: int
    layer_inputs: list[np.ndarray]
    layer_pre: list[np.ndarray]
    rem_argmax: np.ndarray
    angles: list[float]
    features: np.ndarray
    assign: np.ndarray
    vlad_raw: np.ndarray
    row_norms: np.ndarray
    rows_unit: np.ndarray
    global_norm: np.ndarray
    descriptors: np.ndarray
    params: ModelParams


def _as_batch(images) -> np.ndarray:
    if isinstance(images, BevImage):
        return images.pixels[None]
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeMismatch(f"expected (B, H, W) images, got {arr.shape}")
    return arr


def _conv_stack(x: np.ndarray, params: ModelParams, cache: ForwardCache | None) -> np.ndarray:
    a = x
    for i in range(params.n_layers):
        w = params[f"conv{i}.weight"]
        if a.shape[-1] != w.shape[2]:
            raise ShapeMismatch(f"layer {i}: {a.shape[-1]} input channels, weights expect {w.shape[2]}")
        h = kernels.conv2d_forward(a, w, params[f"conv{i}.bias"])
        if cache is not None:
            cache.layer_inputs.append(a)
            cache.layer_pre.append(h)
        a = np.where(h > 0, h, LEAKY_SLOPE * h) if i < params.n_layers - 1 else h
    return a


def conv_forward(img, params: ModelParams) -> np.ndarray:
    """Feature map ``(H, W, C)`` of the plain convolution stack."""
    x = _as_batch(img)[..., None]
    return _conv_stack(x, params, None)[0]


def rem_angles(n_rot: int) -> list[float]:
    return [2.0 * math.pi * k / n_rot for k in range(n_rot)]


def _rem(x: np.ndarray, params: ModelParams, n_rot: int, cache: ForwardCache | None) -> np.ndarray:
    b, h, w = x.shape
    if h != w and n_rot > 1:
        raise ShapeMismatch("REM requires square inputs")
    angles = rem_angles(n_rot)
    rotated = np.concatenate([rotate_array(x, t) for t in angles])[..., None]
    feats = _conv_stack(rotated, params, cache)
    c = feats.shape[-1]
    feats = feats.reshape(n_rot, b, h, w, c)
    aligned = np.stack([rotate_array(feats[k], -angles[k]) for k in range(n_rot)])
    idx = np.argmax(aligned, axis=0)
    out = np.take_along_axis(aligned, idx[None], axis=0)[0]
    if cache is not None:
        cache.rem_argmax = idx
        cache.angles = angles
    return out


def rem_forward(img, params: ModelParams, n_rot: int | None = None) -> np.ndarray:
    n_rot = params.config.rem_rotations if n_rot is None else n_rot
    return _rem(_as_batch(img), params, n_rot, None)[0]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _netvlad(fmaps: np.ndarray, params: ModelParams, cache: ForwardCache | None) -> np.ndarray:
    b = fmaps.shape[0]
    centers, weight, bias = params["vlad.centers"], params["vlad.weight"], params["vlad.bias"]
    x = fmaps.reshape(b, -1, fmaps.shape[-1])
    if x.shape[-1] != centers.shape[1]:
        raise ShapeMismatch(f"feature dim {x.shape[-1]} != cluster dim {centers.shape[1]}")
    a = _softmax(x @ weight.T + bias)
    v = np.einsum("bnk,bnc->bkc", a, x) - a.sum(axis=1)[..., None] * centers
    row_norms = np.linalg.norm(v, axis=2)
    u = v / np.maximum(row_norms, EPS)[..., None]
    flat = u.reshape(b, -1)
    gnorm = np.linalg.norm(flat, axis=1)
    if np.any(gnorm <= EPS):
        raise DegenerateDescriptor("NetVLAD vector has zero norm")
    desc = flat / gnorm[:, None]
    if cache is not None:
        cache.features = x
        cache.assign = a
        cache.vlad_raw = v
        cache.row_norms = row_norms
        cache.rows_unit = u
        cache.global_norm = gnorm
        cache.descriptors = desc
    return desc


def netvlad_forward(fmap: np.ndarray, params: ModelParams, k: int | None = None) -> np.ndarray:
    """Global descriptor of length ``K * C`` for an ``(H, W, C)`` feature map."""
    if k is not None and k != params.config.vlad_clusters:
        raise ShapeMismatch(f"K={k} but params have {params.config.vlad_clusters} clusters")
    fmap = np.asarray(fmap, dtype=np.float64)
    return _netvlad(fmap[None], params, None)[0]


def describe_batch(images, params: ModelParams, keep_cache: bool = False):
    """Descriptors ``(B, K*C)``, REM feature maps ``(B, H, W, C)`` and the cache."""
    x = _as_batch(images)
    n_rot = params.config.rem_rotations
    cache = None
    if keep_cache:
        cache = ForwardCache(x.shape[0], n_rot, [], [], None, [], None, None, None, None, None,
                             None, None, params)
    fmaps = _rem(x, params, n_rot, cache)
    desc = _netvlad(fmaps, params, cache)
    return desc, fmaps, cache


def describe(img, params: ModelParams, cfg: ModelConfig | None = None):
    """``(descriptor, feature map)`` for one image."""
    if cfg is not None and cfg != params.config:
        raise ShapeMismatch("model config does not match parameters")
    desc, fmaps, _ = describe_batch(img, params)
    return desc[0], fmaps[0]


# ----------------------------------------------------------------- backward


def _normalize_backward(g: np.ndarray, unit: np.ndarray, norm: np.ndarray) -> np.ndarray:
    """Gradient through ``y = x / max(|x|, eps)`` along the last axis."""
    proj = np.sum(g * unit, axis=-1, keepdims=True)
    norm = norm[..., None]
    return np.where(norm > EPS, (g - unit * proj) / np.maximum(norm, EPS), g / EPS)


def backward(grad_desc: np.ndarray, cache: ForwardCache | None) -> dict[str, np.ndarray]:
    """Parameter gradients given ``dL/d(descriptor)`` of shape ``(B, K*C)``."""
    if cache is None or cache.descriptors is None or not cache.layer_inputs:
        raise MissingCache("backward needs describe_batch(..., keep_cache=True)")
    params = cache.params
    b = cache.batch
    g = np.asarray(grad_desc, dtype=np.float64).reshape(b, -1)
    grads = zeros_like(params)
    centers, weight = params["vlad.centers"], params["vlad.weight"]
    k, c = centers.shape

    g_flat = _normalize_backward(g, cache.descriptors, cache.global_norm)
    g_u = g_flat.reshape(b, k, c)
    g_v = _normalize_backward(g_u, cache.rows_unit, cache.row_norms)
    a, x = cache.assign, cache.features
    mass = a.sum(axis=1)
    grads["vlad.centers"] = -np.einsum("bk,bkc->kc", mass, g_v)
    g_a = x @ g_v.transpose(0, 2, 1) - np.einsum("kc,bkc->bk", centers, g_v)[:, None, :]
    g_x = a @ g_v
    g_z = a * (g_a - np.sum(g_a * a, axis=2, keepdims=True))
    grads["vlad.weight"] = np.einsum("bnk,bnc->kc", g_z, x)
    grads["vlad.bias"] = g_z.sum(axis=(0, 1))
    g_x = g_x + g_z @ weight

    n_rot = cache.n_rot
    h, w = cache.layer_inputs[0].shape[1:3]
    g_out = g_x.reshape(b, h, w, c)
    idx = cache.rem_argmax
    g_feats = np.empty((n_rot, b, h, w, c))
    for r in range(n_rot):
        g_aligned = np.where(idx == r, g_out, 0.0)
        g_feats[r] = rotate_array_transpose(g_aligned, -cache.angles[r])
    g_h = g_feats.reshape(n_rot * b, h, w, c)

    for i in reversed(range(params.n_layers)):
        if i < params.n_layers - 1:
            g_h = np.where(cache.layer_pre[i] > 0, g_h, LEAKY_SLOPE * g_h)
        gw, gb, g_in = kernels.conv2d_backward(
            g_h, cache.layer_inputs[i], params[f"conv{i}.weight"], i > 0
        )
        grads[f"conv{i}.weight"] = gw
        grads[f"conv{i}.bias"] = gb
        g_h = g_in
    return grads
