"""Forward-pass reference implementations of the matching network blocks.

Covers sinusoidal positional encoding, a transformer cross-encoder
(residual self-attention, cross-attention shared between directions, and
feed-forward sub-layers, each followed by parameter-free layer
normalization), the logistic overlap head, the point-to-node decoder that
conditions dense points on their nearest keypoint, and the coordinate MLP.
Pure numpy, float64, deterministic; training is out of scope.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .geometry import KeypointSet, PointCloud, nearest_neighbors
from .tensorio import read_tensors, write_tensors

_LN_EPS = 1e-12


def positional_encoding(points: np.ndarray, d: int) -> np.ndarray:
    """Axis-major sinusoidal encoding: per axis, d/6 (sin, cos) pairs at
    frequencies 1/10000^(6k/d)."""
    if d <= 0 or d % 6 != 0:
        raise ConfigError(f"encoding dimension must be divisible by 6, got {d}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    k = np.arange(d // 6)
    omega = 1.0 / (10000.0 ** (6.0 * k / d))
    phase = pts[:, :, None] * omega[None, None, :]  # (n, 3, d/6)
    enc = np.stack([np.sin(phase), np.cos(phase)], axis=-1)  # (n, 3, d/6, 2)
    return enc.reshape(len(pts), d)


def layer_norm(x: np.ndarray, eps: float = _LN_EPS) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def _softmax_last(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AttentionWeights:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    o: np.ndarray

    def __post_init__(self):
        d = self.q.shape[0]
        for name in ("q", "k", "v", "o"):
            w = np.asarray(getattr(self, name), dtype=np.float64)
            if w.shape != (d, d) or not np.all(np.isfinite(w)):
                raise DataError(f"attention weight '{name}' must be finite {d}x{d}")
            setattr(self, name, w)


@dataclass
class EncoderLayerWeights:
    self_attn: AttentionWeights
    cross_attn: AttentionWeights
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray


@dataclass
class LayerWeights:
    """Full weight set; tensor-file names are documented in save_weights."""

    proj_w: np.ndarray                    # (input dim, d)
    layers: list                          # EncoderLayerWeights per layer
    overlap_w3: np.ndarray                # (d, 1)
    overlap_b3: np.ndarray                # (1,)
    dec_w1: np.ndarray                    # (d + 3, d)
    dec_b1: np.ndarray
    dec_w2: np.ndarray                    # (d, 3)
    dec_b2: np.ndarray
    heads: int = 4

    def __post_init__(self):
        self.proj_w = np.asarray(self.proj_w, dtype=np.float64)
        d = self.proj_w.shape[1]
        if self.heads < 1 or d % self.heads:
            raise ConfigError(f"head count {self.heads} must divide d={d}")
        self.overlap_w3 = np.asarray(self.overlap_w3, dtype=np.float64).reshape(d, 1)
        self.overlap_b3 = np.asarray(self.overlap_b3, dtype=np.float64).reshape(1)
        self.dec_w1 = np.asarray(self.dec_w1, dtype=np.float64)
        self.dec_b1 = np.asarray(self.dec_b1, dtype=np.float64).ravel()
        self.dec_w2 = np.asarray(self.dec_w2, dtype=np.float64)
        self.dec_b2 = np.asarray(self.dec_b2, dtype=np.float64).ravel()
        if self.dec_w1.shape[0] != d + 3 or self.dec_w2.shape[1] != 3:
            raise DataError(
                f"decoder weights inconsistent with d={d}: "
                f"{self.dec_w1.shape}, {self.dec_w2.shape}"
            )

    @property
    def dim(self) -> int:
        return self.proj_w.shape[1]


def attention(queries: np.ndarray, keys: np.ndarray, w: AttentionWeights,
              heads: int, return_weights: bool = False):
    """Scaled dot-product multi-head attention (no attention biases)."""
    n, d = queries.shape
    m = keys.shape[0]
    if d % heads:
        raise ConfigError(f"{heads} heads do not divide feature dim {d}")
    dh = d // heads
    Q = (queries @ w.q).reshape(n, heads, dh).transpose(1, 0, 2)
    K = (keys @ w.k).reshape(m, heads, dh).transpose(1, 0, 2)
    V = (keys @ w.v).reshape(m, heads, dh).transpose(1, 0, 2)
    scores = Q @ K.transpose(0, 2, 1) / np.sqrt(dh)
    A = _softmax_last(scores)                      # (heads, n, m)
    out = (A @ V).transpose(1, 0, 2).reshape(n, d) @ w.o
    if return_weights:
        return out, A
    return out


def _ffn(x, layer: EncoderLayerWeights):
    hidden = np.maximum(x @ layer.ffn_w1 + layer.ffn_b1, 0.0)
    return hidden @ layer.ffn_w2 + layer.ffn_b2


def cross_encoder_forward(FX: np.ndarray, FY: np.ndarray,
                          encX: np.ndarray, encY: np.ndarray,
                          weights: LayerWeights):
    """Condition keypoint features on both clouds.

    Inputs are raw feature rows; they are projected to d and summed with
    the positional encodings, then run through the encoder layers:
    residual self-attention per cloud, residual cross-attention (X queries
    attend to Y and symmetrically, shared weights), residual feed-forward,
    layer normalization after every sub-layer.
    """
    FX = np.asarray(FX, dtype=np.float64)
    FY = np.asarray(FY, dtype=np.float64)
    if FX.shape[1] != weights.proj_w.shape[0] or FY.shape[1] != weights.proj_w.shape[0]:
        raise DataError(
            f"feature dim {FX.shape[1]}/{FY.shape[1]} does not match projection "
            f"input {weights.proj_w.shape[0]}"
        )
    d = weights.dim
    encX = np.asarray(encX, dtype=np.float64)
    encY = np.asarray(encY, dtype=np.float64)
    if encX.shape != (len(FX), d) or encY.shape != (len(FY), d):
        raise DataError("positional encodings must be (n, d) for each cloud")
    x = FX @ weights.proj_w + encX
    y = FY @ weights.proj_w + encY
    h = weights.heads
    for layer in weights.layers:
        x = layer_norm(x + attention(x, x, layer.self_attn, h))
        y = layer_norm(y + attention(y, y, layer.self_attn, h))
        x2 = layer_norm(x + attention(x, y, layer.cross_attn, h))
        y2 = layer_norm(y + attention(y, x, layer.cross_attn, h))
        x = layer_norm(x2 + _ffn(x2, layer))
        y = layer_norm(y2 + _ffn(y2, layer))
    return x, y


def overlap_head(C: np.ndarray, w3: np.ndarray, b3) -> np.ndarray:
    """Logistic of the affine map: sigma(C w3 + b3); one score per row."""
    C = np.asarray(C, dtype=np.float64)
    w3 = np.asarray(w3, dtype=np.float64).reshape(-1)
    if C.shape[1] != len(w3):
        raise DataError(f"overlap head dim mismatch: {C.shape} vs {len(w3)}")
    z = C @ w3 + np.asarray(b3, dtype=np.float64).reshape(())
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class DenseConditioned:
    features: np.ndarray      # (M, d) inherited keypoint features
    augmented: np.ndarray     # (M, d + 3): features concatenated with xyz
    assignment: np.ndarray    # dense point -> keypoint index
    predicted_coords: np.ndarray | None = None

    def __post_init__(self):
        if self.augmented.shape != (len(self.features), self.features.shape[1] + 3):
            raise DataError("augmented block must be [features | xyz]")
        if not np.all(np.isfinite(self.augmented)):
            raise DataError("augmented features must be finite")


def point_to_node_decode(dense: PointCloud, keys: KeypointSet,
                         C_key: np.ndarray, s_key: np.ndarray):
    """Each dense point inherits its Euclidean-nearest keypoint's conditioned
    feature and overlap score (ties to the lower keypoint index); returns
    (DenseConditioned, dense overlap scores)."""
    if len(keys.keypoints) == 0:
        raise DataError("empty keypoint set")
    C_key = np.asarray(C_key, dtype=np.float64)
    s_key = np.asarray(s_key, dtype=np.float64).ravel()
    if len(C_key) != len(keys.keypoints) or len(s_key) != len(keys.keypoints):
        raise DataError("keypoint features/scores must match the keypoint count")
    idx, _ = nearest_neighbors(dense.points, keys.keypoints, 1)
    assign = idx[:, 0]
    features = C_key[assign]
    augmented = np.hstack([features, dense.points])
    cond = DenseConditioned(features, augmented, assign)
    return cond, s_key[assign]


def coordinate_mlp(aug: np.ndarray, w1, b1, w2, b2) -> np.ndarray:
    """Two-layer map: ReLU(aug W1 + b1) W2 + b2 -> per-row 3D coordinates."""
    aug = np.asarray(aug, dtype=np.float64)
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if aug.shape[1] != w1.shape[0] or w1.shape[1] != w2.shape[0] or w2.shape[1] != 3:
        raise DataError(
            f"coordinate MLP shape mismatch: {aug.shape} {w1.shape} {w2.shape}"
        )
    hidden = np.maximum(aug @ w1 + np.asarray(b1, dtype=np.float64).ravel(), 0.0)
    return hidden @ w2 + np.asarray(b2, dtype=np.float64).ravel()


# ---------------------------------------------------------------------------
# Weight file round-trip

def random_weights(rng: np.random.Generator, input_dim: int, d: int = 256,
                   heads: int = 4, depth: int = 1,
                   ffn_dim: int | None = None) -> LayerWeights:
    """Gaussian init scaled by 1/sqrt(fan-in); handy for tests and demos."""
    if ffn_dim is None:
        ffn_dim = 2 * d

    def mat(a, b):
        return rng.normal(0.0, 1.0 / np.sqrt(a), (a, b))

    layers = []
    for _ in range(depth):
        layers.append(EncoderLayerWeights(
            self_attn=AttentionWeights(mat(d, d), mat(d, d), mat(d, d), mat(d, d)),
            cross_attn=AttentionWeights(mat(d, d), mat(d, d), mat(d, d), mat(d, d)),
            ffn_w1=mat(d, ffn_dim), ffn_b1=np.zeros(ffn_dim),
            ffn_w2=mat(ffn_dim, d), ffn_b2=np.zeros(d),
        ))
    return LayerWeights(
        proj_w=mat(input_dim, d),
        layers=layers,
        overlap_w3=mat(d, 1),
        overlap_b3=np.zeros(1),
        dec_w1=mat(d + 3, d),
        dec_b1=np.zeros(d),
        dec_w2=mat(d, 3),
        dec_b2=np.zeros(3),
        heads=heads,
    )


def save_weights(path, weights: LayerWeights) -> None:
    """Tensor names: proj.w; enc{i}.self.{q,k,v,o}; enc{i}.cross.{q,k,v,o};
    enc{i}.ffn.{w1,b1,w2,b2}; overlap.{w3,b3}; dec.{w1,b1,w2,b2}."""
    tensors = {"proj.w": weights.proj_w}
    for i, layer in enumerate(weights.layers):
        for kind, attn in (("self", layer.self_attn), ("cross", layer.cross_attn)):
            for part in ("q", "k", "v", "o"):
                tensors[f"enc{i}.{kind}.{part}"] = getattr(attn, part)
        tensors[f"enc{i}.ffn.w1"] = layer.ffn_w1
        tensors[f"enc{i}.ffn.b1"] = layer.ffn_b1
        tensors[f"enc{i}.ffn.w2"] = layer.ffn_w2
        tensors[f"enc{i}.ffn.b2"] = layer.ffn_b2
    tensors["overlap.w3"] = weights.overlap_w3
    tensors["overlap.b3"] = weights.overlap_b3
    tensors["dec.w1"] = weights.dec_w1
    tensors["dec.b1"] = weights.dec_b1
    tensors["dec.w2"] = weights.dec_w2
    tensors["dec.b2"] = weights.dec_b2
    write_tensors(path, tensors)


def load_weights(path, heads: int = 4) -> LayerWeights:
    t = read_tensors(path)

    def need(name):
        if name not in t:
            raise DataError(f"weight file is missing tensor '{name}'")
        return np.asarray(t[name], dtype=np.float64)

    layers = []
    i = 0
    while f"enc{i}.self.q" in t:
        layers.append(EncoderLayerWeights(
            self_attn=AttentionWeights(*(need(f"enc{i}.self.{p}") for p in "qkvo")),
            cross_attn=AttentionWeights(*(need(f"enc{i}.cross.{p}") for p in "qkvo")),
            ffn_w1=need(f"enc{i}.ffn.w1"), ffn_b1=need(f"enc{i}.ffn.b1"),
            ffn_w2=need(f"enc{i}.ffn.w2"), ffn_b2=need(f"enc{i}.ffn.b2"),
        ))
        i += 1
    if not layers:
        raise DataError("weight file holds no encoder layers (enc0.self.q missing)")
    return LayerWeights(
        proj_w=need("proj.w"),
        layers=layers,
        overlap_w3=need("overlap.w3"),
        overlap_b3=need("overlap.b3"),
        dec_w1=need("dec.w1"),
        dec_b1=need("dec.b1"),
        dec_w2=need("dec.w2"),
        dec_b2=need("dec.b2"),
        heads=heads,
    )
