"""Fused-gate LSTM cell with a hand-derived backward pass.

The recurrence concatenates the previous hidden state with the step inputs
and pushes the result through one fused weight matrix whose columns are the
input, forget, output and candidate gates in that order:

    z = [h_prev ; x]
    a = z @ W + b                      (width 4*d, gate order i|f|o|g)
    i, f, o = sigmoid(a_i), sigmoid(a_f), sigmoid(a_o)
    g = tanh(a_g)
    c = f * c_prev + i * g             forget discards, input admits
    h = o * tanh(c)                    output gate filters

The generator and the bidirectional classifier both build on this cell.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .numerics import Tensor, sigmoid


class LstmCache(NamedTuple):
    """Activations recorded by the forward pass, used for backward."""

    z: Tensor
    i: Tensor
    f: Tensor
    o: Tensor
    g: Tensor
    c_prev: Tensor
    c: Tensor
    tanh_c: Tensor


def lstm_cell_forward(z: Tensor, c_prev: Tensor, W: Tensor, b: Tensor
                      ) -> tuple[Tensor, Tensor, LstmCache]:
    """One step. z is (batch, d_h + d_x) with h_prev in the leading columns.

    Returns (h, c, cache).
    """
    d = c_prev.shape[1]
    a = z @ W + b
    i = sigmoid(a[:, :d])
    f = sigmoid(a[:, d:2 * d])
    o = sigmoid(a[:, 2 * d:3 * d])
    g = np.tanh(a[:, 3 * d:])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, LstmCache(z, i, f, o, g, c_prev, c, tanh_c)


def lstm_cell_backward(dh: Tensor, dc: Tensor, cache: LstmCache, W: Tensor,
                       dW: Tensor, db: Tensor) -> tuple[Tensor, Tensor]:
    """Backward through one step; accumulates into dW/db.

    dh, dc are gradients flowing into this step's h and c. Returns
    (dz, dc_prev); the caller splits dz into dh_prev and input gradients.
    """
    i, f, o, g = cache.i, cache.f, cache.o, cache.g
    do = dh * cache.tanh_c
    dc_total = dc + dh * o * (1.0 - cache.tanh_c * cache.tanh_c)
    di = dc_total * g
    dg = dc_total * i
    df = dc_total * cache.c_prev
    dc_prev = dc_total * f

    da = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        do * o * (1.0 - o),
        dg * (1.0 - g * g),
    ], axis=1)

    dW += cache.z.T @ da
    db += da.sum(axis=0)
    dz = da @ W.T
    return dz, dc_prev
