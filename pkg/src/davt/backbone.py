"""Minimal pre-LayerNorm ViT encoder that exposes per-layer attention.

The forward pass used for token selection runs only the first ``layers - 1``
encoder blocks; the final block is applied later, to whichever token set the
classifier variant feeds it (see :mod:`davt.has`).  Every block's post-softmax
attention probabilities are captured head by head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

LN_EPS = 1e-6


@dataclass(frozen=True)
class ViTConfig:
    """Architecture hyperparameters; the defaults are the desk-scale setup."""

    image_size: int = 64
    patch_size: int = 8
    channels: int = 3
    hidden_dim: int = 64
    layers: int = 6
    heads: int = 4
    mlp_dim: int = 128
    num_classes: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by "
                f"patch_size {self.patch_size}")
        if self.channels != 3:
            raise ConfigError("only 3-channel RGB images are supported")
        if self.hidden_dim % self.heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.layers < 2:
            raise ConfigError("at least 2 encoder layers are required")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.mlp_dim <= 0:
            raise ConfigError("mlp_dim must be positive")

    @property
    def grid_size(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid_size * self.grid_size

    @property
    def num_tokens(self):
        # Class token at index 0, then the patches in raster order.
        return self.num_patches + 1

    @property
    def head_dim(self):
        return self.hidden_dim // self.heads

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels


@dataclass
class AttentionStack:
    """Post-softmax attention of layers 1..L-1: array [L-1, K, T, T]."""

    weights: np.ndarray

    def layer(self, l):
        """Attention of layer ``l`` (1-based), shape [K, T, T]."""
        count = self.weights.shape[0]
        if not 1 <= l <= count:
            raise ShapeError(f"layer {l} out of range 1..{count}")
        return self.weights[l - 1]

    @property
    def num_layers(self):
        return self.weights.shape[0]


@dataclass
class EncodedImage:
    """Hidden states and attention captured by the pre-final encoder blocks."""

    states: list  # Tensor [T, D] per layer 1..L-1, class token at row 0
    attention: AttentionStack


def _trunc_normal(rng, shape, std=0.02):
    # Resample anything beyond two standard deviations.
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out


def _xavier_uniform(rng, shape):
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, shape)


def init_params(config):
    """Fresh parameter dict, keyed by dotted names, seeded from the config.

    Projection weights are Xavier-uniform (BERT-style 0.02 noise is too weak
    for from-scratch SGD at this scale: the encoder never leaves the uniform
    -prediction plateau), position embeddings truncated-normal(0.02), biases
    and the class token zero, LayerNorm gains one.
    """
    rng = np.random.default_rng(config.seed)
    d = config.hidden_dim
    params = {}

    def proj(name, shape):
        params[name] = Tensor(_xavier_uniform(rng, shape), requires_grad=True)

    def zero(name, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def one(name, shape):
        params[name] = Tensor(np.ones(shape), requires_grad=True)

    proj("embed.patch_w", (config.patch_dim, d))
    zero("embed.patch_b", (d,))
    zero("embed.cls", (1, d))
    params["embed.pos"] = Tensor(_trunc_normal(rng, (config.num_tokens, d)),
                                 requires_grad=True)
    for l in range(config.layers):
        pre = f"enc{l}"
        one(f"{pre}.ln1_g", (d,))
        zero(f"{pre}.ln1_b", (d,))
        for which in ("q", "k", "v", "o"):
            proj(f"{pre}.w{which}", (d, d))
            zero(f"{pre}.b{which}", (d,))
        one(f"{pre}.ln2_g", (d,))
        zero(f"{pre}.ln2_b", (d,))
        proj(f"{pre}.w1", (d, config.mlp_dim))
        zero(f"{pre}.b1", (config.mlp_dim,))
        proj(f"{pre}.w2", (config.mlp_dim, d))
        zero(f"{pre}.b2", (d,))
    one("head.ln_g", (d,))
    zero("head.ln_b", (d,))
    proj("head.w", (d, config.num_classes))
    zero("head.b", (config.num_classes,))
    return params


def patchify(image, config):
    """Split an [H, W, 3] image into flattened patches, [N, P*P*3], raster order."""
    h, w = image.shape[:2]
    if (h, w) != (config.image_size, config.image_size) or image.ndim != 3:
        raise ShapeError(
            f"image shape {image.shape} does not match configured size "
            f"{config.image_size}x{config.image_size}x3")
    g, p = config.grid_size, config.patch_size
    patches = (image.reshape(g, p, g, p, config.channels)
               .transpose(0, 2, 1, 3, 4)
               .reshape(config.num_patches, config.patch_dim))
    return np.ascontiguousarray(patches)


def patch_embed(image, params, config):
    """Project patches to the hidden size, prepend the class token, add positions.

    Pixels are centered to [-1, 1] before the projection (mean .5 / std .5
    normalization); raw [0, 1] patches share a dominant constant direction
    that starves the projection gradients.
    """
    patches = Tensor(patchify(image, config) * 2.0 - 1.0)
    tokens = T.linear(patches, params["embed.patch_w"], params["embed.patch_b"])
    with_cls = T.concat([params["embed.cls"], tokens], axis=0)
    return T.add(with_cls, params["embed.pos"])


def encoder_layer(tokens, params, layer_index, config):
    """One pre-LN transformer block.

    Returns the output tokens and the per-head post-softmax attention
    probabilities (list of K tensors [T, T], each row-stochastic).
    """
    pre = f"enc{layer_index}"
    d, k, dh = config.hidden_dim, config.heads, config.head_dim
    scale = 1.0 / math.sqrt(dh)

    normed = T.layer_norm(tokens, params[f"{pre}.ln1_g"], params[f"{pre}.ln1_b"],
                          eps=LN_EPS)
    q = T.linear(normed, params[f"{pre}.wq"], params[f"{pre}.bq"])
    key = T.linear(normed, params[f"{pre}.wk"], params[f"{pre}.bk"])
    v = T.linear(normed, params[f"{pre}.wv"], params[f"{pre}.bv"])

    heads = []
    contexts = []
    for i in range(k):
        cols = np.arange(i * dh, (i + 1) * dh)
        qi = T.index_select(q, cols, axis=1)
        ki = T.index_select(key, cols, axis=1)
        vi = T.index_select(v, cols, axis=1)
        scores = T.mul(T.matmul(qi, T.transpose(ki)), scale)
        attn = T.softmax(scores, axis=-1)
        heads.append(attn)
        contexts.append(T.matmul(attn, vi))
    merged = T.concat(contexts, axis=1)
    projected = T.linear(merged, params[f"{pre}.wo"], params[f"{pre}.bo"])
    after_attn = T.add(tokens, projected)

    normed2 = T.layer_norm(after_attn, params[f"{pre}.ln2_g"],
                           params[f"{pre}.ln2_b"], eps=LN_EPS)
    hidden = T.gelu(T.linear(normed2, params[f"{pre}.w1"], params[f"{pre}.b1"]))
    out = T.add(after_attn, T.linear(hidden, params[f"{pre}.w2"], params[f"{pre}.b2"]))
    return out, heads


def forward_features(image, params, config):
    """Run patch embedding and encoder layers 1..L-1, capturing attention.

    The returned states list holds the output tokens of each of those layers;
    the stack holds a frozen copy of every layer's attention probabilities.
    """
    tokens = patch_embed(image, params, config)
    states = []
    captured = np.empty(
        (config.layers - 1, config.heads, config.num_tokens, config.num_tokens))
    for l in range(config.layers - 1):
        tokens, heads = encoder_layer(tokens, params, l, config)
        states.append(tokens)
        for i, h in enumerate(heads):
            captured[l, i] = h.data
    return EncodedImage(states=states, attention=AttentionStack(captured))


def classifier_head(tokens, params):
    """LayerNorm, then the linear head applied to the class-token row."""
    normed = T.layer_norm(tokens, params["head.ln_g"], params["head.ln_b"],
                          eps=LN_EPS)
    row0 = T.index_select(normed, np.array([0]), axis=0)
    logits = T.linear(row0, params["head.w"], params["head.b"])
    return T.reshape(logits, (logits.shape[1],))
