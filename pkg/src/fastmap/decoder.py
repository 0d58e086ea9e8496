"""Numpy forward pass of the single-layer two-stage map decoder.

heatmap head -> prior sampling -> coarse cross-attention over priors ->
deformable attention over the BEV map -> point and class heads.

Class heads emit C + 1 logits; the last one is the background ("no object") slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import NUM_CLASSES, BevGridSpec, MapClass, MapInstance, Prediction, PredictionSet, ShapeError
from .sampler import DEFAULT_TAU, SampledPriors, csm_sample, gather_priors, threshold_candidates

DESK_PRIORS = 256
PAPER_PRIORS = 3500
NODE_SNAP = 1e-9


@dataclass(frozen=True)
class DecoderConfig:
    n: int = 10
    m: int = 8
    d: int = 32
    heads: int = 4
    sample_points: int = 4
    M: int = DESK_PRIORS
    seed: int = 0
    offset_scale: float = 0.1
    ffn_mult: int = 2

    def __post_init__(self):
        for name in ("n", "m", "d", "heads", "sample_points", "M"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")

    @property
    def queries(self) -> int:
        return self.n * self.m


@dataclass
class DecoderWeights:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray):
        self.arrays[name] = value

    @property
    def queries(self) -> "QuerySet":
        return QuerySet(self.arrays["q_pos_init"], self.arrays["q_feat_init"])

    def scaled(self, factor: float) -> "DecoderWeights":
        return DecoderWeights({k: v * factor for k, v in self.arrays.items()})


@dataclass(frozen=True)
class QuerySet:
    pos_init: np.ndarray   # (n*m) x d
    feat_init: np.ndarray  # (n*m) x d; kept for completeness, not consumed by the coarse stage


@dataclass(frozen=True)
class StageOutput:
    features: np.ndarray      # (n*m) x d
    points: np.ndarray        # n x m x 2, normalized
    class_logits: np.ndarray  # n x (C + 1)
    attention: Optional[np.ndarray] = None  # softmax weights, kept for inspection


class ForwardResult(NamedTuple):
    heatmap: np.ndarray
    priors: SampledPriors
    coarse: StageOutput
    fine: StageOutput
    predictions: PredictionSet


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_weights(config: DecoderConfig, c_feat: Optional[int] = None) -> DecoderWeights:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization of every parameter."""
    c_feat = config.d if c_feat is None else c_feat
    d, C1 = config.d, NUM_CLASSES + 1
    hp = config.heads * config.sample_points
    dff = config.ffn_mult * d
    rng = np.random.default_rng(config.seed)
    # (name, shape, fan_in) in a fixed order so the stream is reproducible
    layout = [
        ("hm_conv1", (d, c_feat, 3, 3), 9 * c_feat), ("hm_b1", (d,), 9 * c_feat),
        ("hm_conv2", (d, d, 3, 3), 9 * d), ("hm_b2", (d,), 9 * d),
        ("hm_conv3", (NUM_CLASSES, d, 3, 3), 9 * d), ("hm_b3", (NUM_CLASSES,), 9 * d),
        ("W_p", (d, 2), 2),
        ("W_c", (NUM_CLASSES, d), 1),
        ("ca_q", (d, d), d), ("ca_k", (d, d), d), ("ca_v", (d, d), d), ("ca_o", (d, d), d),
        ("ffn1_w1", (dff, d), d), ("ffn1_b1", (dff,), d), ("ffn1_w2", (d, dff), dff), ("ffn1_b2", (d,), dff),
        ("W_ref", (2, d), d),
        ("cls1_w", (C1, d), d), ("cls1_b", (C1,), d),
        ("W_q", (d, d), d),
        ("da_off_w", (hp * 2, d), d), ("da_off_b", (hp * 2,), d),
        ("da_aw_w", (hp, d), d), ("da_aw_b", (hp,), d),
        ("da_v", (d, c_feat), c_feat), ("da_o", (d, d), d),
        ("ffn2_w1", (dff, d), d), ("ffn2_b1", (dff,), d), ("ffn2_w2", (d, dff), dff), ("ffn2_b2", (d,), dff),
        ("pt_w", (2, d), d), ("pt_b", (2,), d),
        ("cls2_w", (C1, d), d), ("cls2_b", (C1,), d),
        ("q_pos_init", (config.queries, d), d), ("q_feat_init", (config.queries, d), d),
    ]
    return DecoderWeights({name: _uniform(rng, shape, fan) for name, shape, fan in layout})


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def relu(x):
    return np.maximum(x, 0.0)


def conv3x3(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 convolution, C_in x H x W -> C_out x H x W."""
    c_in, h, w = x.shape
    if kernel.shape[1] != c_in:
        raise ShapeError(f"kernel expects {kernel.shape[1]} channels, got {c_in}")
    win = sliding_window_view(np.pad(x, ((0, 0), (1, 1), (1, 1))), (3, 3), axis=(1, 2))
    out = np.tensordot(kernel, win, axes=([1, 2, 3], [0, 3, 4]))
    return out + bias[:, None, None]


def heatmap_head(bev: np.ndarray, weights: DecoderWeights) -> np.ndarray:
    bev = np.asarray(bev, dtype=float)
    if bev.ndim != 3:
        raise ShapeError(f"BEV features must be C x H x W, got {bev.shape}")
    x = relu(conv3x3(bev, weights["hm_conv1"], weights["hm_b1"]))
    x = relu(conv3x3(x, weights["hm_conv2"], weights["hm_b2"]))
    return sigmoid(conv3x3(x, weights["hm_conv3"], weights["hm_b3"]))


def _ffn(x, weights, prefix):
    hidden = relu(x @ weights[f"{prefix}_w1"].T + weights[f"{prefix}_b1"])
    return hidden @ weights[f"{prefix}_w2"].T + weights[f"{prefix}_b2"]


def multihead_attention(query, key, value, weights, heads):
    """Scaled dot-product cross-attention; returns (output, weights[heads, Nq, Nk])."""
    nq, d = query.shape
    dh = d // heads
    q = (query @ weights["ca_q"].T).reshape(nq, heads, dh).transpose(1, 0, 2)
    k = (key @ weights["ca_k"].T).reshape(-1, heads, dh).transpose(1, 0, 2)
    v = (value @ weights["ca_v"].T).reshape(-1, heads, dh).transpose(1, 0, 2)
    attn = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dh), axis=-1)
    out = (attn @ v).transpose(1, 0, 2).reshape(nq, d)
    return out @ weights["ca_o"].T, attn


def _instance_logits(features, n, m, w, b):
    pooled = features.reshape(n, m, -1).mean(axis=1)
    return pooled @ w.T + b


def cgca_forward(queries: QuerySet, priors: SampledPriors, weights: DecoderWeights,
                 config: DecoderConfig) -> StageOutput:
    if len(priors) == 0:
        raise ValueError("coarse attention needs at least one prior")
    k_pos = priors.coords @ weights["W_p"].T
    k_feat = priors.features + weights["W_c"][priors.classes]
    k_coarse = k_feat + k_pos
    q = queries.pos_init
    attn_out, attn = multihead_attention(q, k_coarse, k_coarse, weights, config.heads)
    f = q + attn_out
    f = f + _ffn(f, weights, "ffn1")
    points = sigmoid(f @ weights["W_ref"].T).reshape(config.n, config.m, 2)
    logits = _instance_logits(f, config.n, config.m, weights["cls1_w"], weights["cls1_b"])
    return StageOutput(f, points, logits, attn)


def bilinear_sample(value: np.ndarray, locs: np.ndarray) -> np.ndarray:
    """Sample a C x H x W map at normalized (x, y) locations in [0, 1]^2.

    Cell centers sit at ((col + 0.5) / W, (row + 0.5) / H); samples beyond the
    outermost centers clamp to the border.  Returns locs.shape[:-1] + (C,).
    """
    c, h, w = value.shape
    locs = np.asarray(locs, dtype=float)
    px = np.clip(locs[..., 0] * w - 0.5, 0.0, w - 1.0)
    py = np.clip(locs[..., 1] * h - 0.5, 0.0, h - 1.0)
    # a node given as (col + 0.5) / W can land an ulp below its index
    px = np.where(np.abs(px - np.round(px)) < NODE_SNAP, np.round(px), px)
    py = np.where(np.abs(py - np.round(py)) < NODE_SNAP, np.round(py), py)
    x0 = np.minimum(np.floor(px).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(py).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    vt = np.moveaxis(value, 0, -1)
    top = (1 - fx) * vt[y0, x0] + fx * vt[y0, x1]
    bottom = (1 - fx) * vt[y1, x0] + fx * vt[y1, x1]
    return (1 - fy) * top + fy * bottom


def deformable_attention(query: np.ndarray, ref: np.ndarray, bev: np.ndarray,
                         weights: DecoderWeights, config: DecoderConfig):
    """Single-level deformable attention.

    Returns (output N x d, sampling locations N x heads x P x 2, weights N x heads x P).
    """
    nq, d = query.shape
    heads, npts = config.heads, config.sample_points
    dh = d // heads
    offsets = (query @ weights["da_off_w"].T + weights["da_off_b"]).reshape(nq, heads, npts, 2)
    locs = np.clip(ref[:, None, None, :] + config.offset_scale * np.tanh(offsets), 0.0, 1.0)
    aw = softmax((query @ weights["da_aw_w"].T + weights["da_aw_b"]).reshape(nq, heads, npts), axis=-1)
    value = np.tensordot(weights["da_v"], bev, axes=([1], [0]))  # d x H x W
    out = np.empty((nq, heads, dh))
    for hd in range(heads):
        sampled = bilinear_sample(value[hd * dh:(hd + 1) * dh], locs[:, hd])  # N x P x dh
        out[:, hd] = np.einsum("np,npc->nc", aw[:, hd], sampled)
    return out.reshape(nq, d) @ weights["da_o"].T, locs, aw


def fgca_forward(coarse: StageOutput, bev: np.ndarray, weights: DecoderWeights,
                 config: DecoderConfig) -> StageOutput:
    bev = np.asarray(bev, dtype=float)
    if bev.ndim != 3 or bev.shape[0] != weights["da_v"].shape[1]:
        raise ShapeError(f"BEV features {bev.shape} do not match value projection {weights['da_v'].shape}")
    q_pos = coarse.features @ weights["W_q"].T
    ref = coarse.points.reshape(-1, 2)
    attn_out, _, aw = deformable_attention(q_pos, ref, bev, weights, config)
    f = q_pos + attn_out
    f = f + _ffn(f, weights, "ffn2")
    points = sigmoid(f @ weights["pt_w"].T + weights["pt_b"]).reshape(config.n, config.m, 2)
    logits = _instance_logits(f, config.n, config.m, weights["cls2_w"], weights["cls2_b"])
    return StageOutput(f, points, logits, aw)


def to_predictions(stage: StageOutput, spec: BevGridSpec) -> PredictionSet:
    preds = []
    probs = softmax(stage.class_logits, axis=-1)
    for pts, logits, p in zip(stage.points, stage.class_logits, probs):
        fg = p[:NUM_CLASSES]
        cls = MapClass(int(np.argmax(fg)))
        metric = spec.range.clamp(spec.range.denormalize(pts))
        preds.append(Prediction(MapInstance.of(cls, metric), float(fg.max()), logits.copy()))
    return PredictionSet(tuple(preds), spec.range)


def pipeline_forward(bev: np.ndarray, weights: DecoderWeights, config: DecoderConfig,
                     spec: BevGridSpec, tau: float = DEFAULT_TAU) -> ForwardResult:
    bev = np.asarray(bev, dtype=float)
    if bev.ndim != 3 or bev.shape[1:] != spec.shape:
        raise ShapeError(f"BEV features {bev.shape} do not match grid {spec.shape}")
    if bev.shape[0] != config.d:
        raise ShapeError(f"BEV channel count {bev.shape[0]} must equal embedding width d={config.d}")
    hm = heatmap_head(bev, weights)
    cands = threshold_candidates(hm, tau, spec)
    selected = csm_sample(cands, config.M, spec)
    priors = gather_priors(bev, selected, spec)
    coarse = cgca_forward(weights.queries, priors, weights, config)
    fine = fgca_forward(coarse, bev, weights, config)
    return ForwardResult(hm, priors, coarse, fine, to_predictions(fine, spec))


def random_bev(spec: BevGridSpec, channels: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((channels, spec.h, spec.w))
