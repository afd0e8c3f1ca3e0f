"""Network assembly: one-shot encoder, T grouped sub-networks with
per-timestep block weights, shared stage-boundary turn-on layers with
multi-level temporal fusion, and a last-timestep classifier head.

Two temporal wirings are supported:

* ``boundary`` -- the memory-efficient architecture: all neurons inside
  blocks are temporal turn-off (stateless), temporal state lives only in the
  turn-on layers at stage boundaries, block weights are independent per
  timestep, and the turn-on update is algebraically invertible.
* ``full`` -- a conventional baseline in which every spike site is a leaky
  integrator and all weights are shared across timesteps. This wiring exists
  for the masked-gradient similarity study; it is neither grouped nor
  reversible.

The classifier head reads the last stage's turn-on membrane (real-valued)
at the final timestep; only that timestep contributes to the loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .block import BlockInternals, BlockWeights, block_forward, block_forward_lif, scalar_param
from .neuron import NeuronParams, spike_fn, turn_on_step

__all__ = [
    "StageConfig",
    "NetworkConfig",
    "ModelWeights",
    "TurnOnStateBundle",
    "FullState",
    "StageTrace",
    "TimestepTrace",
    "init_weights",
    "named_parameters",
    "encode",
    "forward_timestep",
    "forward_full",
    "align_to",
    "align_to_grad",
]


@dataclass
class StageConfig:
    blocks: int
    channels: int


@dataclass
class NetworkConfig:
    timesteps: int
    stages: list[StageConfig]
    num_classes: int
    neuron: NeuronParams = field(default_factory=NeuronParams)
    grouped_encoding: bool = True
    seed: int = 0
    in_channels: int = 1
    encoder_channels: int = 0  # 0 -> timesteps * stage-0 channels
    encoder_stride: int = 1
    input_hw: tuple[int, int] = (16, 16)
    temporal_mode: str = "boundary"
    grouped_width: bool = False
    dw_kernel: int = 5

    def __post_init__(self) -> None:
        if self.timesteps < 1:
            raise ValueError(f"timesteps must be >= 1, got {self.timesteps}")
        if not self.stages:
            raise ValueError("at least one stage is required")
        for i, st in enumerate(self.stages):
            if st.channels < 1 or st.blocks < 1:
                raise ValueError(f"stage {i} must have positive blocks and channels")
        if self.temporal_mode not in ("boundary", "full"):
            raise ValueError(f"temporal_mode must be 'boundary' or 'full', got {self.temporal_mode!r}")
        if self.temporal_mode == "full" and self.grouped_encoding:
            raise ValueError("fully-temporal mode repeats the input; grouped encoding does not apply")
        if self.grouped_width:
            for i, st in enumerate(self.stages):
                if st.channels % self.timesteps:
                    raise ValueError(
                        f"grouped_width: stage {i} channels {st.channels} not divisible by T={self.timesteps}"
                    )
        if self.encoder_channels == 0:
            if self.grouped_encoding:
                self.encoder_channels = self.timesteps * self.stage_width(0)
            else:
                self.encoder_channels = self.stage_width(0)
        if self.grouped_encoding:
            if self.encoder_channels % self.timesteps:
                raise ValueError(
                    f"encoder channels {self.encoder_channels} not divisible by T={self.timesteps}"
                )
            if self.encoder_channels // self.timesteps != self.stage_width(0):
                raise ValueError(
                    f"group width {self.encoder_channels // self.timesteps} must equal "
                    f"stage-0 width {self.stage_width(0)}"
                )
        elif self.encoder_channels != self.stage_width(0):
            raise ValueError(
                f"encoder channels {self.encoder_channels} must equal stage-0 width {self.stage_width(0)}"
            )
        if self.neuron.tau_per_stage and len(self.neuron.tau_per_stage) != len(self.stages):
            raise ValueError("tau_per_stage length must equal the number of stages")
        # multi-level fusion needs channel-divisible bundles
        widths = [self.bundle_channels(s) for s in range(len(self.stages))]
        for s in range(len(widths)):
            for i in range(s + 1, len(widths)):
                lo, hi = sorted((widths[s], widths[i]))
                if hi % lo:
                    raise ValueError(
                        f"bundle channels {widths[i]} (stage {i}) and {widths[s]} (stage {s}) "
                        "are not divisible; multi-level fusion cannot align them"
                    )

    # -- derived geometry -------------------------------------------------

    def stage_width(self, s: int) -> int:
        ch = self.stages[s].channels
        return ch // self.timesteps if self.grouped_width else ch

    def bundle_channels(self, s: int) -> int:
        """Channels of the turn-on layer output at stage ``s``."""
        last = len(self.stages) - 1
        return self.stage_width(s + 1) if s < last else self.stage_width(last)

    def stage_spatial(self) -> list[tuple[int, int]]:
        """Spatial size at the input of every stage (stage 0 = encoder output)."""
        h, w = self.input_hw
        k, st, p = 3, self.encoder_stride, 1
        h = (h + 2 * p - k) // st + 1
        w = (w + 2 * p - k) // st + 1
        sizes = [(h, w)]
        for s in range(len(self.stages) - 1):
            h, w = (h + 1) // 2, (w + 1) // 2  # stride-2 pointwise downsample
            sizes.append((h, w))
        return sizes

    def bundle_spatial(self, s: int) -> tuple[int, int]:
        sizes = self.stage_spatial()
        last = len(self.stages) - 1
        return sizes[s + 1] if s < last else sizes[last]


@dataclass
class ModelWeights:
    """All trainable parameters.

    ``blocks`` is indexed ``[t][stage][block]``; in the fully-temporal mode
    the outer list has a single entry shared across timesteps (turn-off
    neurons are the reason per-timestep weights exist, and that mode has
    none).
    """

    encoder: np.ndarray
    blocks: list[list[list[BlockWeights]]]
    turnon: list[np.ndarray]
    head: np.ndarray


@dataclass
class TurnOnStateBundle:
    """Membrane potentials of every turn-on layer at one timestep boundary."""

    v: list[np.ndarray]

    @staticmethod
    def zeros(config: NetworkConfig, batch: int) -> "TurnOnStateBundle":
        vs = []
        for s in range(len(config.stages)):
            h, w = config.bundle_spatial(s)
            vs.append(np.zeros((batch, config.bundle_channels(s), h, w), dtype=T.active_dtype()))
        return TurnOnStateBundle(v=vs)

    def copy(self) -> "TurnOnStateBundle":
        return TurnOnStateBundle(v=[x.copy() for x in self.v])


@dataclass
class FullState:
    """Per-site leaky membranes of the fully-temporal wiring."""

    u1: list[list[np.ndarray]]  # [stage][block]
    u2: list[list[np.ndarray]]
    v: list[np.ndarray]  # turn-on membranes per stage

    @staticmethod
    def zeros(config: NetworkConfig, batch: int) -> "FullState":
        sizes = config.stage_spatial()
        u1, u2 = [], []
        for s, st in enumerate(config.stages):
            h, w = sizes[s]
            shape = (batch, config.stage_width(s), h, w)
            u1.append([np.zeros(shape, dtype=T.active_dtype()) for _ in range(st.blocks)])
            u2.append([np.zeros(shape, dtype=T.active_dtype()) for _ in range(st.blocks)])
        v = TurnOnStateBundle.zeros(config, batch).v
        return FullState(u1=u1, u2=u2, v=v)


@dataclass
class StageTrace:
    block_internals: list[BlockInternals]
    stage_out: np.ndarray  # membrane entering the boundary spike
    s_stage: np.ndarray
    pre: np.ndarray
    v: np.ndarray

    def tensors(self):
        out = [self.stage_out, self.s_stage, self.pre, self.v]
        for bi in self.block_internals:
            out.extend(bi.tensors())
        return out


@dataclass
class TimestepTrace:
    group_input: np.ndarray
    stages: list[StageTrace]


def init_weights(config: NetworkConfig, rng: np.random.Generator | None = None) -> ModelWeights:
    """Seeded He-style initialization; block weights are raw (pre-standardization)."""
    if rng is None:
        rng = np.random.default_rng(config.seed)

    def normal(shape, std):
        return (rng.standard_normal(shape) * std).astype(T.active_dtype())

    enc_fan = config.in_channels * 9
    encoder = normal((config.encoder_channels, config.in_channels, 3, 3), np.sqrt(2.0 / enc_fan))
    n_stacks = 1 if config.temporal_mode == "full" else config.timesteps
    k = config.dw_kernel
    blocks: list[list[list[BlockWeights]]] = []
    for _ in range(n_stacks):
        stack = []
        for s, st in enumerate(config.stages):
            ch = config.stage_width(s)
            stack.append([
                BlockWeights(
                    dw_weight=normal((ch, 1, k, k), 1.0),
                    pw_weight=normal((ch, ch, 1, 1), 1.0),
                    alpha=scalar_param(0.0),
                )
                for _ in range(st.blocks)
            ])
        blocks.append(stack)
    turnon = []
    for s in range(len(config.stages)):
        cin, cout = config.stage_width(s), config.bundle_channels(s)
        # the turn-on drive is scaled by 1/tau; fold tau into the init so the
        # membrane scale does not shrink with depth
        turnon.append(normal((cout, cin, 1, 1),
                             config.neuron.stage_tau(s) * np.sqrt(2.0 / cin)))
    head = normal((config.num_classes, config.bundle_channels(len(config.stages) - 1)),
                  np.sqrt(1.0 / config.bundle_channels(len(config.stages) - 1)))
    return ModelWeights(encoder=encoder, blocks=blocks, turnon=turnon, head=head)


def named_parameters(weights: ModelWeights) -> dict[str, np.ndarray]:
    """Stable name -> array mapping over every trainable parameter.

    The arrays are the live parameter buffers, so in-place updates through
    this mapping mutate the model.
    """
    params: dict[str, np.ndarray] = {"encoder": weights.encoder}
    shared = len(weights.blocks) == 1
    for t, stack in enumerate(weights.blocks):
        prefix_t = "" if shared else f"t{t}."
        for s, stage in enumerate(stack):
            for b, bw in enumerate(stage):
                p = f"{prefix_t}s{s}.b{b}"
                params[f"{p}.dw"] = bw.dw_weight
                params[f"{p}.pw"] = bw.pw_weight
                params[f"{p}.alpha"] = bw.alpha
                params[f"{p}.dw_gain"] = bw.dw_gain
                params[f"{p}.pw_gain"] = bw.pw_gain
    for s, w in enumerate(weights.turnon):
        params[f"s{s}.turnon"] = w
    params["head"] = weights.head
    return params


# ---------------------------------------------------------------------------
# Alignment between turn-on bundles of different stages
# ---------------------------------------------------------------------------


def align_to(x: np.ndarray, channels: int, hw: tuple[int, int]) -> np.ndarray:
    """Parameter-free alignment: nearest-neighbor resize then channel repeat/average."""
    y = T.resize_nearest(x, hw[0], hw[1])
    return T.channel_align(y, channels)


def align_to_grad(dout: np.ndarray, src_channels: int, src_hw: tuple[int, int]) -> np.ndarray:
    dy = T.channel_align_grad(dout, src_channels)
    return T.resize_nearest_grad(dy, src_hw[0], src_hw[1])


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def encode(x: np.ndarray, weights: ModelWeights, config: NetworkConfig) -> list[np.ndarray]:
    """Produce the T per-timestep input features.

    Static grouped mode: one conv pass, channels split contiguously into T
    groups. Per-frame mode (5-D input [N,T,C,H,W]): each frame encoded
    independently. Fully-temporal mode with static input: encode once,
    repeat the full feature map every timestep.
    """
    x = T.as_f32(x)
    tsteps = config.timesteps
    if x.ndim == 5:
        if x.shape[1] != tsteps:
            raise T.ShapeError(f"expected {tsteps} frames per sample, got {x.shape[1]}")
        return [T.conv2d(x[:, t], weights.encoder, stride=config.encoder_stride, padding=1)
                for t in range(tsteps)]
    if x.ndim != 4:
        raise T.ShapeError(f"input must be [N,C,H,W] or [N,T,C,H,W], got shape {x.shape}")
    enc = T.conv2d(x, weights.encoder, stride=config.encoder_stride, padding=1)
    if not config.grouped_encoding:
        return [enc] * tsteps
    gc = config.encoder_channels // tsteps
    return [np.ascontiguousarray(enc[:, t * gc : (t + 1) * gc]) for t in range(tsteps)]


def _stack_for(weights: ModelWeights, config: NetworkConfig, t: int) -> list[list[BlockWeights]]:
    return weights.blocks[0] if len(weights.blocks) == 1 else weights.blocks[t]


def forward_timestep(
    t: int,
    group_input: np.ndarray,
    prev_states: TurnOnStateBundle,
    weights: ModelWeights,
    config: NetworkConfig,
):
    """Run sub-network ``t`` (0-based) in the boundary wiring.

    Returns (logits_or_none, new_states, trace). Logits are produced only at
    the final timestep.
    """
    if config.temporal_mode != "boundary":
        raise ValueError("forward_timestep drives the boundary wiring; use forward_full for 'full'")
    params = config.neuron
    n_stages = len(config.stages)
    stack = _stack_for(weights, config, t)
    x = T.as_f32(group_input)
    new_v: list[np.ndarray] = []
    stage_traces: list[StageTrace] = []
    for s in range(n_stages):
        m = x
        internals = []
        for bw in stack[s]:
            m, bi = block_forward(m, bw, params)
            internals.append(bi)
        s_stage = spike_fn(m, params)
        stride = 2 if s < n_stages - 1 else 1
        pre = T.pwconv2d(s_stage, weights.turnon[s], stride=stride)
        levels = [prev_states.v[s]]
        for i in range(s + 1, n_stages):
            levels.append(align_to(prev_states.v[i], config.bundle_channels(s), config.bundle_spatial(s)))
        state = turn_on_step(levels, pre, params, level_index=s)
        new_v.append(state.v)
        stage_traces.append(StageTrace(internals, m, s_stage, pre, state.v))
        x = state.s
    logits = None
    if t == config.timesteps - 1:
        pooled = T.global_avg_pool(new_v[-1])
        logits = T.linear(pooled, weights.head)
    return logits, TurnOnStateBundle(v=new_v), TimestepTrace(group_input=T.as_f32(group_input), stages=stage_traces)


def _forward_timestep_full(t, feat, state: FullState, weights, config):
    params = config.neuron
    n_stages = len(config.stages)
    stack = weights.blocks[0]
    x = feat
    new_u1 = [list(row) for row in state.u1]
    new_u2 = [list(row) for row in state.u2]
    new_v: list[np.ndarray] = []
    stage_traces: list[StageTrace] = []
    for s in range(n_stages):
        m = x
        internals = []
        for b, bw in enumerate(stack[s]):
            m, bi = block_forward_lif(m, state.u1[s][b], state.u2[s][b], bw, params)
            new_u1[s][b], new_u2[s][b] = bi.u1, bi.u2
            internals.append(bi)
        s_stage = spike_fn(m, params)
        stride = 2 if s < n_stages - 1 else 1
        pre = T.pwconv2d(s_stage, weights.turnon[s], stride=stride)
        st = turn_on_step([state.v[s]], pre, params, level_index=s)
        new_v.append(st.v)
        stage_traces.append(StageTrace(internals, m, s_stage, pre, st.v))
        x = st.s
    logits = None
    if t == config.timesteps - 1:
        pooled = T.global_avg_pool(new_v[-1])
        logits = T.linear(pooled, weights.head)
    new_state = FullState(u1=new_u1, u2=new_u2, v=new_v)
    return logits, new_state, TimestepTrace(group_input=feat, stages=stage_traces)


@dataclass
class ForwardTrace:
    """Everything a backward pass may need; ``steps`` is empty when the
    forward ran in discard mode (reversible training)."""

    groups: list[np.ndarray]
    steps: list[TimestepTrace]
    final_bundle: TurnOnStateBundle
    pooled: np.ndarray
    logits: np.ndarray
    raw_input: np.ndarray


def forward_full(
    x: np.ndarray,
    weights: ModelWeights,
    config: NetworkConfig,
    keep_traces: bool = True,
    ledger=None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Run all T timesteps; logits come from the last timestep only.

    With ``keep_traces=False`` (reversible training) per-timestep internals
    are dropped as soon as the next timestep no longer needs them; only the
    final turn-on bundle survives. The optional ledger records what is
    retained either way.
    """
    x = T.as_f32(x)
    groups = encode(x, weights, config)
    batch = groups[0].shape[0]
    steps: list[TimestepTrace] = []
    logits = None
    if config.temporal_mode == "full":
        state = FullState.zeros(config, batch)
        for t in range(config.timesteps):
            logits, state, trace = _forward_timestep_full(t, groups[t], state, weights, config)
            if keep_traces:
                steps.append(trace)
                _ledger_retain_trace(ledger, t, trace)
        final = TurnOnStateBundle(v=state.v)
    else:
        bundle = TurnOnStateBundle.zeros(config, batch)
        for t in range(config.timesteps):
            logits, bundle, trace = forward_timestep(t, groups[t], bundle, weights, config)
            if keep_traces:
                steps.append(trace)
                _ledger_retain_trace(ledger, t, trace)
        final = bundle
    if not keep_traces and ledger is not None:
        for s, v in enumerate(final.v):
            ledger.retain(f"turnon.s{s}", config.timesteps - 1, "membrane", v, persistent=True)
    pooled = T.global_avg_pool(final.v[-1])
    logits = T.linear(pooled, weights.head)
    return logits, ForwardTrace(groups=groups, steps=steps, final_bundle=final,
                                pooled=pooled, logits=logits, raw_input=x)


def _ledger_retain_trace(ledger, t: int, trace: TimestepTrace) -> None:
    if ledger is None:
        return
    for s, st in enumerate(trace.stages):
        for i, bi in enumerate(st.block_internals):
            for j, a in enumerate(bi.tensors()):
                ledger.retain(f"s{s}.b{i}.a{j}", t, "internal", a)
        ledger.retain(f"s{s}.stage_out", t, "membrane", st.stage_out)
        ledger.retain(f"s{s}.spikes", t, "spike", st.s_stage)
        ledger.retain(f"s{s}.pre", t, "internal", st.pre)
        ledger.retain(f"s{s}.v", t, "membrane", st.v)
