"""Basic SNN block: spike -> depthwise conv -> spike -> pointwise conv,
gated by a zero-initialized residual scale on a membrane shortcut.

The shortcut carries real-valued membrane potentials, not spikes, so a
stack of blocks is exactly the identity map at initialization (the residual
scale ``alpha`` starts at zero). There is no batch normalization anywhere;
instead every conv weight is standardized per output channel (zero mean,
unit variance, scaled by a learnable gain and 1/sqrt(fan_in)).

``reparameterize`` bakes the standardization and folds ``alpha`` into the
pointwise weight so that inference needs no normalization arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .neuron import NeuronParams, spike_fn, spike_fn_grad

__all__ = [
    "BlockWeights",
    "BlockInternals",
    "BlockGrads",
    "scalar_param",
    "standardize_weight",
    "standardize_weight_grad",
    "block_forward",
    "block_backward",
    "block_forward_lif",
    "block_backward_lif",
    "reparameterize",
]

WS_EPS = 1e-5


def scalar_param(value: float = 0.0) -> np.ndarray:
    """Scalar trainable parameter as a shape-(1,) float32 array."""
    return np.full(1, value, dtype=T.active_dtype())


@dataclass
class BlockWeights:
    """Raw parameters of one block.

    ``fused=True`` marks re-parameterized weights: standardization and the
    residual scale are already baked in, so forward uses them verbatim.
    """

    dw_weight: np.ndarray  # [C, 1, k, k]
    pw_weight: np.ndarray  # [C', C, 1, 1]
    alpha: np.ndarray = field(default_factory=scalar_param)
    dw_gain: np.ndarray | None = None
    pw_gain: np.ndarray | None = None
    fused: bool = False

    def __post_init__(self) -> None:
        self.dw_weight = T.as_f32(self.dw_weight)
        self.pw_weight = T.as_f32(self.pw_weight)
        self.alpha = T.as_f32(self.alpha).reshape(1)
        if self.dw_gain is None:
            self.dw_gain = np.ones(self.dw_weight.shape[0], dtype=T.active_dtype())
        if self.pw_gain is None:
            self.pw_gain = np.ones(self.pw_weight.shape[0], dtype=T.active_dtype())
        self.dw_gain = T.as_f32(self.dw_gain)
        self.pw_gain = T.as_f32(self.pw_gain)


@dataclass
class BlockInternals:
    """Activations recorded by one block forward, reused by its backward."""

    m_in: np.ndarray
    s1: np.ndarray
    h1: np.ndarray
    s2: np.ndarray
    h2: np.ndarray
    dw_std: np.ndarray
    pw_std: np.ndarray
    u1: np.ndarray | None = None  # site membranes, only in leaky (stateful) mode
    u2: np.ndarray | None = None

    def tensors(self):
        out = [self.m_in, self.s1, self.h1, self.s2, self.h2]
        if self.u1 is not None:
            out += [self.u1, self.u2]
        return out


@dataclass
class BlockGrads:
    dw: np.ndarray
    pw: np.ndarray
    alpha: np.ndarray
    dw_gain: np.ndarray
    pw_gain: np.ndarray

    def add_(self, other: "BlockGrads") -> None:
        self.dw += other.dw
        self.pw += other.pw
        self.alpha += other.alpha
        self.dw_gain += other.dw_gain
        self.pw_gain += other.pw_gain


def standardize_weight(w: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """Per-output-channel standardization with gain and fan-in scaling.

    Channels with fan_in < 2 have undefined variance and are only scaled by
    their gain.
    """
    w = T.as_f32(w)
    gain = T.as_f32(gain)
    if gain.shape != (w.shape[0],):
        raise T.ShapeError(f"gain shape {gain.shape} does not match {w.shape[0]} output channels")
    flat = w.reshape(w.shape[0], -1)
    fan_in = flat.shape[1]
    g = gain[:, None]
    if fan_in < 2:
        return (flat * g).reshape(w.shape).astype(T.active_dtype())
    mu = flat.mean(axis=1, keepdims=True)
    sigma = np.sqrt(flat.var(axis=1, keepdims=True) + WS_EPS)
    scale = np.float32(1.0 / np.sqrt(fan_in))
    out = (flat - mu) / sigma * g * scale
    return out.reshape(w.shape).astype(T.active_dtype())


def standardize_weight_grad(w: np.ndarray, gain: np.ndarray, dout: np.ndarray):
    """Backward of :func:`standardize_weight`; returns (d_w, d_gain)."""
    w, gain, dout = T.as_f32(w), T.as_f32(gain), T.as_f32(dout)
    flat = w.reshape(w.shape[0], -1)
    dflat = dout.reshape(dout.shape[0], -1)
    fan_in = flat.shape[1]
    if fan_in < 2:
        dw = dflat * gain[:, None]
        dgain = (dflat * flat).sum(axis=1)
        return dw.reshape(w.shape).astype(T.active_dtype()), dgain.astype(T.active_dtype())
    mu = flat.mean(axis=1, keepdims=True)
    sigma = np.sqrt(flat.var(axis=1, keepdims=True) + WS_EPS)
    what = (flat - mu) / sigma
    scale = np.float32(1.0 / np.sqrt(fan_in))
    dgain = (dflat * what).sum(axis=1) * scale
    dhat = dflat * gain[:, None] * scale
    dw = (dhat - dhat.mean(axis=1, keepdims=True)
          - what * (dhat * what).mean(axis=1, keepdims=True)) / sigma
    return dw.reshape(w.shape).astype(T.active_dtype()), dgain.astype(T.active_dtype())


def _effective_weights(weights: BlockWeights):
    if weights.fused:
        return weights.dw_weight, weights.pw_weight
    return (
        standardize_weight(weights.dw_weight, weights.dw_gain),
        standardize_weight(weights.pw_weight, weights.pw_gain),
    )


def _dw_padding(dw_weight: np.ndarray) -> int:
    k = dw_weight.shape[2]
    if k % 2 != 1 or dw_weight.shape[2] != dw_weight.shape[3]:
        raise T.ShapeError(f"depthwise kernel must be square with odd size, got {dw_weight.shape}")
    return k // 2


def block_forward(m_in: np.ndarray, weights: BlockWeights, params: NeuronParams):
    """Stateless block forward: out = m_in + alpha * pw(spike(dw(spike(m_in))))."""
    m_in = T.as_f32(m_in)
    dw_std, pw_std = _effective_weights(weights)
    pad = _dw_padding(dw_std)
    s1 = spike_fn(m_in, params)
    h1 = T.dwconv2d(s1, dw_std, stride=1, padding=pad)
    s2 = spike_fn(h1, params)
    h2 = T.pwconv2d(s2, pw_std)
    if h2.shape != m_in.shape:
        raise T.ShapeError(f"branch output {h2.shape} does not match shortcut {m_in.shape}")
    a = T.active_dtype()(weights.alpha[0])
    out = (m_in + a * h2).astype(T.active_dtype())
    return out, BlockInternals(m_in, s1, h1, s2, h2, dw_std, pw_std)


def block_backward(dout: np.ndarray, internals: BlockInternals, weights: BlockWeights,
                   params: NeuronParams):
    """Backward of :func:`block_forward`; returns (d_m_in, BlockGrads)."""
    it = internals
    pad = _dw_padding(it.dw_std)
    a = T.active_dtype()(weights.alpha[0])
    dalpha = scalar_param(float(np.vdot(dout, it.h2)))
    dh2 = (a * dout).astype(T.active_dtype())
    dpw_std = T.pwconv2d_weight_grad(it.s2, dh2)
    ds2 = T.pwconv2d_input_grad(it.pw_std, dh2, it.s2.shape[2:])
    dh1 = ds2 * spike_fn_grad(it.h1, params)
    ddw_std = T.dwconv2d_weight_grad(it.s1, dh1, it.dw_std.shape[2:], padding=pad)
    ds1 = T.dwconv2d_input_grad(it.dw_std, dh1, it.s1.shape[2:], padding=pad)
    dm = (dout + ds1 * spike_fn_grad(it.m_in, params)).astype(T.active_dtype())
    if weights.fused:
        ddw, ddw_gain = ddw_std, np.zeros_like(weights.dw_gain)
        dpw, dpw_gain = dpw_std, np.zeros_like(weights.pw_gain)
    else:
        ddw, ddw_gain = standardize_weight_grad(weights.dw_weight, weights.dw_gain, ddw_std)
        dpw, dpw_gain = standardize_weight_grad(weights.pw_weight, weights.pw_gain, dpw_std)
    return dm, BlockGrads(ddw, dpw, dalpha, ddw_gain, dpw_gain)


def block_forward_lif(m_in: np.ndarray, u1_prev: np.ndarray, u2_prev: np.ndarray,
                      weights: BlockWeights, params: NeuronParams):
    """Block forward with leaky site membranes (fully-temporal network mode).

    Both spike sites integrate their drive across timesteps:
    ``u[t] = (1 - 1/tau) u[t-1] + (1/tau) drive[t]``. Returns
    (out, internals); the new site membranes are in ``internals.u1/u2``.
    """
    m_in = T.as_f32(m_in)
    dw_std, pw_std = _effective_weights(weights)
    pad = _dw_padding(dw_std)
    decay = T.active_dtype()(1.0 - 1.0 / params.tau)
    gain = T.active_dtype()(1.0 / params.tau)
    u1 = (decay * T.as_f32(u1_prev) + gain * m_in).astype(T.active_dtype())
    s1 = spike_fn(u1, params)
    h1 = T.dwconv2d(s1, dw_std, stride=1, padding=pad)
    u2 = (decay * T.as_f32(u2_prev) + gain * h1).astype(T.active_dtype())
    s2 = spike_fn(u2, params)
    h2 = T.pwconv2d(s2, pw_std)
    a = T.active_dtype()(weights.alpha[0])
    out = (m_in + a * h2).astype(T.active_dtype())
    return out, BlockInternals(m_in, s1, h1, s2, h2, dw_std, pw_std, u1=u1, u2=u2)


def block_backward_lif(dout: np.ndarray, internals: BlockInternals, weights: BlockWeights,
                       params: NeuronParams, du1_carry: np.ndarray, du2_carry: np.ndarray,
                       keep_temporal: bool):
    """Backward of :func:`block_forward_lif` at one timestep.

    ``du1_carry`` / ``du2_carry`` are the temporal gradient contributions
    flowing back from timestep t+1 (zeros at the last timestep). Returns
    (d_m_in, grads, next_du1_carry, next_du2_carry); the returned carries are
    zeroed when ``keep_temporal`` is false, which is how masked-gradient
    training modes drop the temporal chain at these sites.
    """
    it = internals
    pad = _dw_padding(it.dw_std)
    a = T.active_dtype()(weights.alpha[0])
    decay = T.active_dtype()(1.0 - 1.0 / params.tau)
    gain = T.active_dtype()(1.0 / params.tau)
    dalpha = scalar_param(float(np.vdot(dout, it.h2)))
    dh2 = (a * dout).astype(T.active_dtype())
    dpw_std = T.pwconv2d_weight_grad(it.s2, dh2)
    ds2 = T.pwconv2d_input_grad(it.pw_std, dh2, it.s2.shape[2:])
    du2 = (ds2 * spike_fn_grad(it.u2, params) + du2_carry).astype(T.active_dtype())
    dh1 = gain * du2
    ddw_std = T.dwconv2d_weight_grad(it.s1, dh1, it.dw_std.shape[2:], padding=pad)
    ds1 = T.dwconv2d_input_grad(it.dw_std, dh1, it.s1.shape[2:], padding=pad)
    du1 = (ds1 * spike_fn_grad(it.u1, params) + du1_carry).astype(T.active_dtype())
    dm = (dout + gain * du1).astype(T.active_dtype())
    if weights.fused:
        ddw, ddw_gain = ddw_std, np.zeros_like(weights.dw_gain)
        dpw, dpw_gain = dpw_std, np.zeros_like(weights.pw_gain)
    else:
        ddw, ddw_gain = standardize_weight_grad(weights.dw_weight, weights.dw_gain, ddw_std)
        dpw, dpw_gain = standardize_weight_grad(weights.pw_weight, weights.pw_gain, dpw_std)
    grads = BlockGrads(ddw, dpw, dalpha, ddw_gain, dpw_gain)
    zero = np.float32(0.0)
    next_du1 = (decay * du1 if keep_temporal else zero * du1).astype(T.active_dtype())
    next_du2 = (decay * du2 if keep_temporal else zero * du2).astype(T.active_dtype())
    return dm, grads, next_du1, next_du2


def reparameterize(weights: BlockWeights) -> BlockWeights:
    """Bake standardization and fold the residual scale into the pointwise weight.

    The returned weights have ``alpha = 1`` and ``fused = True``; forward
    outputs are bit-identical because the baked weights are exactly the
    effective weights the original block multiplied with.
    """
    if weights.fused:
        return replace(weights)
    dw_std, pw_std = _effective_weights(weights)
    a = T.active_dtype()(weights.alpha[0])
    return BlockWeights(
        dw_weight=dw_std,
        pw_weight=(a * pw_std).astype(T.active_dtype()),
        alpha=scalar_param(1.0),
        dw_gain=np.ones_like(weights.dw_gain),
        pw_gain=np.ones_like(weights.pw_gain),
        fused=True,
    )
