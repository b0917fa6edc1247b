"""Hierarchical attention selection.

Adjacent layers' attention matrices are fused by head-wise matrix product,
one token per head per layer is picked by the argmax of the fused class-token
row, and the picks are concatenated behind the deepest class token to form
the input of the final encoder block.  Selection indices are discrete, so no
gradient flows through the fusion itself; gradients reach the selected hidden
states through the gather.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .backbone import (AttentionStack, EncodedImage, classifier_head,
                       encoder_layer, forward_features)
from .errors import ConfigError, ShapeError
from .tensor import Tensor

FUSION_MODES = ("pairwise", "cumulative")


@dataclass
class TokenSelection:
    """Per-layer head-wise picks: token indices (1..N) and the gathered rows."""

    indices: np.ndarray  # [K] int64, class token (0) excluded by construction
    tokens: Tensor       # [K, D], row k equals the hidden state at indices[k]


@dataclass
class DavtOutput:
    logits: Tensor
    attention: AttentionStack
    fused: Optional[np.ndarray]            # [L-1, K, T, T] or None when HAS is off
    selections: Optional[list]             # list[TokenSelection] or None
    states: list                           # Tensor [T, D] per captured layer


def fuse_adjacent(a_lo, a_hi):
    """Head-wise product of two attention blocks [K, T, T]; no cross-head mixing.

    The product of row-stochastic matrices stays row-stochastic, which keeps
    the fused class row interpretable as a distribution over tokens.
    """
    a_lo = np.asarray(a_lo)
    a_hi = np.asarray(a_hi)
    if a_lo.shape != a_hi.shape:
        raise ShapeError(
            f"fuse_adjacent: mismatched blocks {a_lo.shape} vs {a_hi.shape}")
    if a_lo.ndim != 3 or a_lo.shape[1] != a_lo.shape[2]:
        raise ShapeError(
            f"fuse_adjacent: expected [heads, tokens, tokens], got {a_lo.shape}")
    return np.matmul(a_lo, a_hi)


def fuse_stack(stack, mode="pairwise"):
    """Fused attention for every captured layer, [L-1, K, T, T].

    pairwise: layer l is fused with layer l+1; the deepest captured layer has
    no successor yet and keeps its raw attention.  cumulative: layer l gets
    the running product of all layers up to l+1 (attention-rollout style).
    """
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}, expected one of "
                          f"{FUSION_MODES}")
    weights = stack.weights
    count = weights.shape[0]
    fused = np.empty_like(weights)
    if mode == "pairwise":
        for i in range(count - 1):
            fused[i] = fuse_adjacent(weights[i], weights[i + 1])
        fused[count - 1] = weights[count - 1]
    else:
        running = weights[0].copy()
        for i in range(count):
            if i + 1 < count:
                running = fuse_adjacent(running, weights[i + 1])
            fused[i] = running
    return fused


def select_tokens(fused_layer, hidden):
    """Pick one token per head from the fused class-token row.

    The class position itself (column 0) is excluded; ties break toward the
    smallest index so the pick is deterministic and order-independent.
    """
    k, t, t2 = fused_layer.shape
    if t != t2:
        raise ShapeError(f"select_tokens: attention block not square: {fused_layer.shape}")
    if hidden.shape[0] != t:
        raise ShapeError(
            f"select_tokens: {t} attention tokens vs {hidden.shape[0]} hidden rows")
    class_rows = fused_layer[:, 0, 1:]
    indices = np.argmax(class_rows, axis=1).astype(np.int64) + 1
    return TokenSelection(indices=indices,
                          tokens=T.index_select(hidden, indices, axis=0))


def assemble_input(encoded, selections):
    """Concatenate the deepest class token with every layer's selected tokens.

    Output has 1 + K*(L-1) rows; row 0 is the class token exactly as layer
    L-1 emitted it.  Duplicated picks stay duplicated, the length is fixed.
    """
    expected = len(encoded.states)
    if len(selections) != expected:
        raise ShapeError(
            f"assemble_input: got selections for {len(selections)} layers, "
            f"need {expected}")
    cls = T.index_select(encoded.states[-1], np.array([0]), axis=0)
    return T.concat([cls] + [s.tokens for s in selections], axis=0)


def davt_forward(image, params, config, has_enabled=True, fusion="pairwise"):
    """Full forward pass to logits.

    With HAS enabled the final encoder block consumes the assembled selection;
    with it disabled the block consumes the full token set (plain ViT).
    Attention of the pre-final layers is captured either way.
    """
    encoded = forward_features(image, params, config)
    final_index = config.layers - 1
    if has_enabled:
        fused = fuse_stack(encoded.attention, fusion)
        selections = [select_tokens(fused[l], encoded.states[l])
                      for l in range(len(encoded.states))]
        final_in = assemble_input(encoded, selections)
    else:
        fused = None
        selections = None
        final_in = encoded.states[-1]
    final_out, _ = encoder_layer(final_in, params, final_index, config)
    logits = classifier_head(final_out, params)
    return DavtOutput(logits=logits, attention=encoded.attention,
                      fused=fused, selections=selections,
                      states=encoded.states)
