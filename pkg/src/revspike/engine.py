"""Explicit gradient computation.

Three regimes share the same forward graph semantics:

* ``backward_stbp``       -- oracle: the forward stores every spike and
  membrane for all (layer, timestep); the reverse sweep walks layers and
  timesteps with the surrogate spike derivative. Peak retained memory grows
  with L*T.
* ``backward_reversible`` -- stores only the final turn-on bundle; per
  timestep the sub-network internals are recomputed forward and the previous
  bundle is reconstructed through the exact algebraic inverse of the turn-on
  update. Peak retained memory is one timestep's internals, independent
  of T.
* ``backward_masked``     -- the oracle sweep with temporal gradient terms
  zeroed either everywhere except stage boundaries (case1) or only at stage
  boundaries (case2), for the gradient-similarity study.

Everything is manual reverse-mode over the kernels in :mod:`revspike.tensor`;
there is no autodiff anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .block import BlockGrads, block_backward, block_backward_lif
from .neuron import spike_fn, spike_fn_grad, turn_on_invert, turn_on_step
from .network import (
    ForwardTrace,
    ModelWeights,
    NetworkConfig,
    StageTrace,
    TimestepTrace,
    TurnOnStateBundle,
    forward_full,
    align_to,
    align_to_grad,
    named_parameters,
)

__all__ = [
    "ActivationLedger",
    "GradientSet",
    "TemporalMask",
    "MASKS",
    "ReconstructionError",
    "loss_cross_entropy",
    "backward_stbp",
    "backward_reversible",
    "backward_masked",
    "reconstruct_bundles",
    "optimizer_step",
    "SGDMomentum",
    "zero_gradients",
]


# ---------------------------------------------------------------------------
# Instrumentation
# ---------------------------------------------------------------------------


@dataclass
class LedgerEntry:
    layer: str
    timestep: int
    kind: str  # spike | membrane | internal
    tensor: np.ndarray | None
    nbytes: int
    persistent: bool = False


class ActivationLedger:
    """Instrumented store of tensors retained for backward.

    ``peak_bytes`` is the running maximum of concurrently retained bytes; it
    is monotone within one pass and reset by :meth:`reset`. When
    ``single_timestep`` is set (reversible schedule), retaining
    non-persistent tensors of two different timesteps at once is a bug and
    raises immediately.
    """

    def __init__(self, overflow_bytes: int | None = None):
        self.overflow_bytes = overflow_bytes
        self.single_timestep = False
        self.reset()

    def reset(self) -> None:
        self.entries: list[LedgerEntry] = []
        self.current_bytes = 0
        self.peak_bytes = 0
        self.spike_flip_count = 0

    def retain(self, layer: str, timestep: int, kind: str, tensor: np.ndarray,
               persistent: bool = False) -> LedgerEntry:
        if kind not in ("spike", "membrane", "internal"):
            raise ValueError(f"unknown ledger kind {kind!r}")
        if self.single_timestep and not persistent:
            live = {e.timestep for e in self.entries if e.tensor is not None and not e.persistent}
            if live and live != {timestep}:
                raise AssertionError(
                    f"reversible schedule retained timesteps {sorted(live)} while adding {timestep}"
                )
        entry = LedgerEntry(layer, timestep, kind, tensor, tensor.nbytes, persistent)
        self.entries.append(entry)
        self.current_bytes += entry.nbytes
        self.peak_bytes = max(self.peak_bytes, self.current_bytes)
        if self.overflow_bytes is not None and self.current_bytes > self.overflow_bytes:
            raise MemoryError(
                f"activation ledger exceeded {self.overflow_bytes} bytes "
                f"({self.current_bytes} retained)"
            )
        return entry

    def release(self, entry: LedgerEntry) -> None:
        if entry.tensor is not None:
            self.current_bytes -= entry.nbytes
            entry.tensor = None

    def release_timestep(self, timestep: int, include_persistent: bool = False) -> None:
        for e in self.entries:
            if e.timestep == timestep and e.tensor is not None and (include_persistent or not e.persistent):
                self.release(e)

    def live_bytes_by_timestep(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for e in self.entries:
            if e.tensor is not None:
                out[e.timestep] = out.get(e.timestep, 0) + e.nbytes
        return out


@dataclass
class GradientSet:
    """Named gradients, one entry per trainable parameter."""

    grads: dict[str, np.ndarray]

    def check_finite(self) -> None:
        for name, g in self.grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.grads[k].ravel() for k in sorted(self.grads)])


def zero_gradients(weights: ModelWeights) -> dict[str, np.ndarray]:
    return {name: np.zeros(p.shape, dtype=T.active_dtype())
            for name, p in named_parameters(weights).items()}


@dataclass(frozen=True)
class TemporalMask:
    """Which temporal gradient chains survive the backward sweep."""

    boundary: bool = True
    interior: bool = True


MASKS = {
    "baseline": TemporalMask(boundary=True, interior=True),
    "case1": TemporalMask(boundary=True, interior=False),
    "case2": TemporalMask(boundary=False, interior=True),
}


class ReconstructionError(RuntimeError):
    """Raised when reversible reconstruction drifts beyond the configured bound."""


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def loss_cross_entropy(logits: np.ndarray, labels: np.ndarray, label_smoothing: float = 0.0):
    """Mean softmax cross-entropy; returns (loss, dloss/dlogits)."""
    logits = T.as_f32(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise T.ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("labels out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = np.full((n, k), label_smoothing / k, dtype=T.active_dtype())
    target[np.arange(n), labels] += np.float32(1.0 - label_smoothing)
    loss = float(-(target * logp).sum() / n)
    dlogits = ((np.exp(logp) - target) / np.float32(n)).astype(T.active_dtype())
    return loss, dlogits


# ---------------------------------------------------------------------------
# Shared backward pieces
# ---------------------------------------------------------------------------


def _acc_block(grads: dict, prefix: str, bg: BlockGrads) -> None:
    grads[f"{prefix}.dw"] += bg.dw
    grads[f"{prefix}.pw"] += bg.pw
    grads[f"{prefix}.alpha"] += bg.alpha
    grads[f"{prefix}.dw_gain"] += bg.dw_gain
    grads[f"{prefix}.pw_gain"] += bg.pw_gain


class _EncoderGradAccumulator:
    """Collects d(encoder output) contributions and emits the weight grad once."""

    def __init__(self, x: np.ndarray, config: NetworkConfig):
        self.x = x
        self.config = config
        self.dweight: np.ndarray | None = None
        self.buffer: np.ndarray | None = None

    def add(self, t: int, dgroup: np.ndarray, weights: ModelWeights) -> None:
        cfg = self.config
        if self.x.ndim == 5:
            dw = T.conv2d_weight_grad(self.x[:, t], dgroup, (3, 3), cfg.encoder_stride, 1)
            self.dweight = dw if self.dweight is None else self.dweight + dw
            return
        if self.buffer is None:
            n = dgroup.shape[0]
            h, w = dgroup.shape[2:]
            self.buffer = np.zeros((n, cfg.encoder_channels, h, w), dtype=T.active_dtype())
        if cfg.grouped_encoding:
            gc = cfg.encoder_channels // cfg.timesteps
            self.buffer[:, t * gc : (t + 1) * gc] += dgroup
        else:
            self.buffer += dgroup
    def finalize(self) -> np.ndarray:
        cfg = self.config
        if self.dweight is not None:
            return self.dweight
        if self.buffer is None:
            raise RuntimeError("no encoder gradient contributions recorded")
        return T.conv2d_weight_grad(self.x, self.buffer, (3, 3), cfg.encoder_stride, 1)


def _head_backward(dlogits, trace: ForwardTrace, weights, grads):
    grads["head"] += T.linear_weight_grad(trace.pooled, dlogits)
    dpooled = T.linear_input_grad(weights.head, dlogits)
    h, w = trace.final_bundle.v[-1].shape[2:]
    return T.global_avg_pool_grad(dpooled, h, w)


def _block_prefix(weights: ModelWeights, t: int, s: int, b: int) -> str:
    # shared stacks (full mode, or T = 1) carry no timestep prefix
    if len(weights.blocks) == 1:
        return f"s{s}.b{b}"
    return f"t{t}.s{s}.b{b}"


def _boundary_backward_step(
    t: int,
    trace: TimestepTrace,
    dv_acc: list[np.ndarray],
    weights: ModelWeights,
    config: NetworkConfig,
    grads: dict,
    keep_boundary_temporal: bool,
):
    """Gradient work for one timestep of the boundary wiring.

    ``dv_acc[s]`` holds dL/dV^s[t] contributions already known when this
    timestep is processed (temporal from t+1, head at the last timestep).
    Returns (dv_prev, dgroup): the temporal contributions to t-1 and the
    gradient w.r.t. this timestep's group input.
    """
    params = config.neuron
    n_stages = len(config.stages)
    stack = weights.blocks[0] if len(weights.blocks) == 1 else weights.blocks[t]
    dv_prev = [np.zeros_like(v) for v in dv_acc] if t > 0 else None
    dgroup = None
    for s in range(n_stages - 1, -1, -1):
        st = trace.stages[s]
        dv = dv_acc[s]
        if t > 0 and keep_boundary_temporal:
            # V^s[t] pulled (1 - 1/tau_i) * align(V^i[t-1]) for i = s..last
            dv_prev[s] += np.float32(1.0 - 1.0 / params.stage_tau(s)) * dv
            for i in range(s + 1, n_stages):
                coeff = np.float32(1.0 - 1.0 / params.stage_tau(i))
                dv_prev[i] += coeff * align_to_grad(
                    dv, config.bundle_channels(i), config.bundle_spatial(i)
                )
        stride = 2 if s < n_stages - 1 else 1
        dpre = (np.float32(1.0 / params.stage_tau(s)) * dv).astype(T.active_dtype())
        grads[f"s{s}.turnon"] += T.pwconv2d_weight_grad(st.s_stage, dpre, stride=stride)
        ds_stage = T.pwconv2d_input_grad(weights.turnon[s], dpre, st.s_stage.shape[2:], stride=stride)
        dm = (ds_stage * spike_fn_grad(st.stage_out, params)).astype(T.active_dtype())
        for b in range(len(stack[s]) - 1, -1, -1):
            dm, bg = block_backward(dm, st.block_internals[b], stack[s][b], params)
            _acc_block(grads, _block_prefix(weights, t, s, b), bg)
        if s > 0:
            dv_acc[s - 1] = dv_acc[s - 1] + dm * spike_fn_grad(trace.stages[s - 1].v, params)
        else:
            dgroup = dm
    return dv_prev, dgroup


def _full_backward(trace: ForwardTrace, dlogits, weights, config, grads, mask: TemporalMask):
    """BPTT sweep over the fully-temporal wiring with site-level masking."""
    params = config.neuron
    n_stages = len(config.stages)
    stack = weights.blocks[0]
    tsteps = config.timesteps
    enc_acc = _EncoderGradAccumulator(trace.raw_input, config)
    dv_head = _head_backward(dlogits, trace, weights, grads)
    dv_carry = [np.zeros_like(v) for v in trace.final_bundle.v]
    du1_carry = [[np.zeros_like(bi.u1) for bi in trace.steps[0].stages[s].block_internals]
                 for s in range(n_stages)]
    du2_carry = [[np.zeros_like(bi.u2) for bi in trace.steps[0].stages[s].block_internals]
                 for s in range(n_stages)]
    for t in range(tsteps - 1, -1, -1):
        step = trace.steps[t]
        dv_acc = [c.copy() for c in dv_carry]
        if t == tsteps - 1:
            dv_acc[-1] += dv_head
        dv_carry = [np.zeros_like(c) for c in dv_carry]
        for s in range(n_stages - 1, -1, -1):
            st = step.stages[s]
            dv = dv_acc[s]
            if t > 0 and mask.boundary:
                dv_carry[s] = (np.float32(1.0 - 1.0 / params.stage_tau(s)) * dv).astype(T.active_dtype())
            stride = 2 if s < n_stages - 1 else 1
            dpre = (np.float32(1.0 / params.stage_tau(s)) * dv).astype(T.active_dtype())
            grads[f"s{s}.turnon"] += T.pwconv2d_weight_grad(st.s_stage, dpre, stride=stride)
            ds_stage = T.pwconv2d_input_grad(weights.turnon[s], dpre, st.s_stage.shape[2:], stride=stride)
            dm = (ds_stage * spike_fn_grad(st.stage_out, params)).astype(T.active_dtype())
            for b in range(len(stack[s]) - 1, -1, -1):
                dm, bg, c1, c2 = block_backward_lif(
                    dm, st.block_internals[b], stack[s][b], params,
                    du1_carry[s][b], du2_carry[s][b],
                    keep_temporal=mask.interior and t > 0,
                )
                du1_carry[s][b], du2_carry[s][b] = c1, c2
                _acc_block(grads, _block_prefix(weights, t, s, b), bg)
            if s > 0:
                dv_acc[s - 1] = dv_acc[s - 1] + dm * spike_fn_grad(step.stages[s - 1].v, params)
            else:
                enc_acc.add(t, dm, weights)
    grads["encoder"] += enc_acc.finalize()


# ---------------------------------------------------------------------------
# Backward regimes
# ---------------------------------------------------------------------------


def backward_stbp(
    x: np.ndarray,
    labels: np.ndarray,
    weights: ModelWeights,
    config: NetworkConfig,
    ledger: ActivationLedger | None = None,
    label_smoothing: float = 0.0,
    mask: TemporalMask = MASKS["baseline"],
):
    """Store-everything oracle backward. Returns (GradientSet, aux dict)."""
    if ledger is not None:
        ledger.reset()
        ledger.single_timestep = False
    logits, trace = forward_full(x, weights, config, keep_traces=True, ledger=ledger)
    loss, dlogits = loss_cross_entropy(logits, labels, label_smoothing)
    grads = zero_gradients(weights)
    if config.temporal_mode == "full":
        _full_backward(trace, dlogits, weights, config, grads, mask)
    else:
        dv_carry = [np.zeros_like(v) for v in trace.final_bundle.v]
        dv_carry[-1] += _head_backward(dlogits, trace, weights, grads)
        enc_acc = _EncoderGradAccumulator(trace.raw_input, config)
        for t in range(config.timesteps - 1, -1, -1):
            dv_prev, dgroup = _boundary_backward_step(
                t, trace.steps[t], dv_carry, weights, config, grads, mask.boundary
            )
            enc_acc.add(t, dgroup, weights)
            if t > 0:
                dv_carry = dv_prev
        grads["encoder"] += enc_acc.finalize()
    gset = GradientSet(grads)
    gset.check_finite()
    aux = {"loss": loss, "logits": logits, "trace": trace}
    return gset, aux


def backward_masked(x, labels, weights, config, mode: str,
                    ledger: ActivationLedger | None = None, label_smoothing: float = 0.0):
    """Oracle sweep with the temporal chains masked per ``mode`` (case1/case2)."""
    if mode not in ("case1", "case2"):
        raise ValueError(f"mode must be 'case1' or 'case2', got {mode!r}")
    return backward_stbp(x, labels, weights, config, ledger, label_smoothing, mask=MASKS[mode])


def _recompute_timestep(
    t: int,
    group: np.ndarray,
    bundle: TurnOnStateBundle,
    weights: ModelWeights,
    config: NetworkConfig,
    ledger: ActivationLedger | None,
) -> TimestepTrace:
    """Rebuild timestep ``t``'s turn-off internals from its group input and the
    (stored or reconstructed) turn-on bundle of the same timestep."""
    from .block import block_forward  # local to keep module top uncluttered

    params = config.neuron
    stack = weights.blocks[0] if len(weights.blocks) == 1 else weights.blocks[t]
    stages: list[StageTrace] = []
    x = group
    for s in range(len(config.stages)):
        m = x
        internals = []
        for bw in stack[s]:
            m, bi = block_forward(m, bw, params)
            internals.append(bi)
        s_stage = spike_fn(m, params)
        stride = 2 if s < len(config.stages) - 1 else 1
        pre = T.pwconv2d(s_stage, weights.turnon[s], stride=stride)
        stages.append(StageTrace(internals, m, s_stage, pre, bundle.v[s]))
        x = spike_fn(bundle.v[s], params)
    trace = TimestepTrace(group_input=group, stages=stages)
    if ledger is not None:
        from .network import _ledger_retain_trace

        _ledger_retain_trace(ledger, t, trace)
    return trace


def _invert_bundle(bundle: TurnOnStateBundle, trace: TimestepTrace, config: NetworkConfig):
    """Reconstruct the previous bundle, deepest stage first.

    Returns (previous_bundle, max_roundtrip_error) where the error is the
    worst absolute deviation of re-running the forward update from the
    reconstructed state against the known current bundle.
    """
    params = config.neuron
    n_stages = len(config.stages)
    v_prev: list[np.ndarray | None] = [None] * n_stages
    max_err = 0.0
    for s in range(n_stages - 1, -1, -1):
        deeper = [
            align_to(v_prev[i], config.bundle_channels(s), config.bundle_spatial(s))
            for i in range(s + 1, n_stages)
        ]
        v_prev[s] = turn_on_invert(bundle.v[s], deeper, trace.stages[s].pre, params, level_index=s)
        check = turn_on_step([v_prev[s]] + deeper, trace.stages[s].pre, params, level_index=s).v
        max_err = max(max_err, float(np.abs(check - bundle.v[s]).max()))
    return TurnOnStateBundle(v=v_prev), max_err


def reconstruct_bundles(
    x: np.ndarray,
    weights: ModelWeights,
    config: NetworkConfig,
    ledger: ActivationLedger | None = None,
):
    """Forward in discard mode, then reverse-reconstruct every turn-on bundle.

    Returns (bundles, traces, max_error): ``bundles[t]`` is V[t] for
    t = 0..T-1 (the last one stored, earlier ones reconstructed), ``traces``
    the recomputed per-timestep internals, ``max_error`` the worst forward
    roundtrip deviation observed. Intended for verification; the training
    path is :func:`backward_reversible`.
    """
    if config.temporal_mode != "boundary":
        raise ValueError("reversible reconstruction requires the boundary wiring")
    _, trace = forward_full(x, weights, config, keep_traces=False, ledger=ledger)
    tsteps = config.timesteps
    bundles: list[TurnOnStateBundle | None] = [None] * tsteps
    traces: list[TimestepTrace | None] = [None] * tsteps
    bundles[tsteps - 1] = trace.final_bundle
    max_err = 0.0
    for t in range(tsteps - 1, 0, -1):
        traces[t] = _recompute_timestep(t, trace.groups[t], bundles[t], weights, config, None)
        bundles[t - 1], err = _invert_bundle(bundles[t], traces[t], config)
        max_err = max(max_err, err)
    traces[0] = _recompute_timestep(0, trace.groups[0], bundles[0], weights, config, None)
    return bundles, traces, max_err


def backward_reversible(
    x: np.ndarray,
    labels: np.ndarray,
    weights: ModelWeights,
    config: NetworkConfig,
    ledger: ActivationLedger | None = None,
    label_smoothing: float = 0.0,
    reconstruction_bound: float = 1e-4,
    reference_bundles: list[TurnOnStateBundle] | None = None,
):
    """Reversible backward with per-timestep recomputation.

    The forward discards all per-timestep internals; the backward walks
    t = T-1 .. 0, recomputing each sub-network's internals from its group
    input and the current bundle, reconstructing the previous bundle through
    the exact inverse of the turn-on update, accumulating gradients, and
    dropping the timestep's internals before moving on.

    ``reference_bundles`` (from a store-everything forward) enables exact
    spike-flip counting into ``ledger.spike_flip_count``; without it flips
    cannot be observed, only bounded by the roundtrip error.
    """
    if config.temporal_mode != "boundary":
        raise ValueError("backward_reversible requires the boundary wiring")
    if ledger is not None:
        ledger.reset()
        ledger.single_timestep = True
    logits, trace = forward_full(x, weights, config, keep_traces=False, ledger=ledger)
    loss, dlogits = loss_cross_entropy(logits, labels, label_smoothing)
    grads = zero_gradients(weights)
    dv_carry = [np.zeros_like(v) for v in trace.final_bundle.v]
    dv_carry[-1] += _head_backward(dlogits, trace, weights, grads)
    enc_acc = _EncoderGradAccumulator(trace.raw_input, config)
    bundle = trace.final_bundle
    max_err = 0.0
    params = config.neuron
    for t in range(config.timesteps - 1, -1, -1):
        step = _recompute_timestep(t, trace.groups[t], bundle, weights, config, ledger)
        if reference_bundles is not None and ledger is not None:
            for s, v in enumerate(bundle.v):
                ref = reference_bundles[t].v[s]
                flips = int(np.sum((v >= params.v_th) != (ref >= params.v_th)))
                ledger.spike_flip_count += flips
        if t > 0:
            prev_bundle, err = _invert_bundle(bundle, step, config)
            max_err = max(max_err, err)
            if err > reconstruction_bound:
                raise ReconstructionError(
                    f"reconstruction roundtrip error {err:.3e} exceeds bound "
                    f"{reconstruction_bound:.3e} at timestep {t}"
                )
        else:
            prev_bundle = None
        dv_prev, dgroup = _boundary_backward_step(
            t, step, dv_carry, weights, config, grads, keep_boundary_temporal=True
        )
        enc_acc.add(t, dgroup, weights)
        if ledger is not None:
            ledger.release_timestep(t)
        if t > 0:
            dv_carry = dv_prev
            bundle = prev_bundle
    grads["encoder"] += enc_acc.finalize()
    gset = GradientSet(grads)
    gset.check_finite()
    aux = {"loss": loss, "logits": logits, "max_reconstruction_error": max_err}
    return gset, aux


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: GradientSet,
    lr: float,
    momentum: float = 0.0,
    velocity: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """In-place SGD with momentum: v <- momentum*v + g; w <- w - lr*v.

    Returns the (possibly freshly created) velocity state.
    """
    if velocity is None:
        velocity = {name: np.zeros_like(p) for name, p in params.items()}
    for name, p in params.items():
        g = grads.grads[name]
        v = velocity[name]
        v *= np.float32(momentum)
        v += g
        p -= np.float32(lr) * v
    return velocity


class SGDMomentum:
    """Stateful wrapper around :func:`optimizer_step`."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] | None = None

    def step(self, weights: ModelWeights, grads: GradientSet) -> None:
        params = named_parameters(weights)
        self.velocity = optimizer_step(params, grads, self.lr, self.momentum, self.velocity)
