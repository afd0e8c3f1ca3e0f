"""Spiking neuron primitives.

Three behaviors live here: stateless temporal turn-off neurons, stateful
temporal turn-on neurons with multi-level fusion of previous-timestep
potentials, and the exact algebraic inverse of the turn-on update. The
inverse is what lets the backward pass reconstruct past membrane states
instead of storing them.

Turn-on neurons are deliberately reset-free: the update
``V[t+1] = (1 - 1/tau) V[t] + (1/tau) drive`` contains no reset term, and
adding one (hard or soft) would destroy its algebraic invertibility.

The spike nonlinearity has two modes:

* ``hard``  -- Heaviside with closed boundary (``spike(v) = 1 for v >= V_th``)
  and a rectangular surrogate derivative of half-width ``surrogate_width/2``.
* ``soft``  -- ``sigmoid((v - V_th) / surrogate_width)`` with its true
  derivative; used only for finite-difference gradient validation, where a
  genuinely differentiable forward is required.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, as_f32

__all__ = [
    "NeuronParams",
    "NeuronState",
    "heaviside",
    "surrogate_grad",
    "spike_fn",
    "spike_fn_grad",
    "turn_off_step",
    "turn_on_step",
    "turn_on_invert",
]


@dataclass
class NeuronParams:
    """Decay, threshold and surrogate settings shared by all spiking layers.

    ``tau`` is the default decay constant; ``tau_per_stage`` optionally gives
    one decay per turn-on (stage boundary) layer, used by the multi-level
    fusion. All decays must be > 1 so that (1 - 1/tau) is in (0, 1) and the
    turn-on update stays invertible.
    """

    tau: float = 2.0
    tau_per_stage: list[float] = field(default_factory=list)
    v_th: float = 1.0
    surrogate_width: float = 1.0
    spike_mode: str = "hard"

    def __post_init__(self) -> None:
        if self.tau <= 1.0:
            raise ValueError(f"tau must be > 1 (got {self.tau}); tau = 1 is not invertible")
        for i, t in enumerate(self.tau_per_stage):
            if t <= 1.0:
                raise ValueError(f"tau_per_stage[{i}] must be > 1, got {t}")
        if self.v_th <= 0.0:
            raise ValueError(f"v_th must be > 0, got {self.v_th}")
        if self.surrogate_width <= 0.0:
            raise ValueError(f"surrogate_width must be > 0, got {self.surrogate_width}")
        if self.spike_mode not in ("hard", "soft"):
            raise ValueError(f"spike_mode must be 'hard' or 'soft', got {self.spike_mode!r}")

    def stage_tau(self, stage: int) -> float:
        """Decay constant of the turn-on layer at ``stage`` (default ``tau``)."""
        if stage < 0:
            raise IndexError(f"stage index must be >= 0, got {stage}")
        if self.tau_per_stage:
            if stage >= len(self.tau_per_stage):
                raise IndexError(
                    f"stage {stage} exceeds configured tau_per_stage (len {len(self.tau_per_stage)})"
                )
            return self.tau_per_stage[stage]
        return self.tau


@dataclass
class NeuronState:
    """Published (membrane, spike) pair of one spiking layer at one timestep."""

    v: np.ndarray
    s: np.ndarray


def heaviside(x: np.ndarray) -> np.ndarray:
    """Elementwise step with closed boundary: 1.0 where x >= 0, else 0.0."""
    return (as_f32(x) >= 0.0).astype(T.active_dtype())


def surrogate_grad(v: np.ndarray, params: NeuronParams) -> np.ndarray:
    """Rectangular surrogate for dS/dV: (1/a) inside |v - V_th| < a/2, else 0.

    The window integrates to one over v, so it is a proper density
    approximation of the Heaviside derivative.
    """
    v = as_f32(v)
    a = np.float32(params.surrogate_width)
    inside = np.abs(v - np.float32(params.v_th)) < a / 2
    return inside.astype(T.active_dtype()) / a


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def spike_fn(v: np.ndarray, params: NeuronParams) -> np.ndarray:
    """Spike nonlinearity in the configured mode (hard Heaviside or soft sigmoid)."""
    v = as_f32(v)
    if params.spike_mode == "hard":
        return heaviside(v - np.float32(params.v_th))
    a = np.float32(params.surrogate_width)
    return _sigmoid((v - np.float32(params.v_th)) / a).astype(T.active_dtype())


def spike_fn_grad(v: np.ndarray, params: NeuronParams) -> np.ndarray:
    """Derivative used in backward: rectangular surrogate (hard) or exact (soft)."""
    if params.spike_mode == "hard":
        return surrogate_grad(v, params)
    v = as_f32(v)
    a = np.float32(params.surrogate_width)
    s = _sigmoid((v - np.float32(params.v_th)) / a)
    return (s * (1.0 - s) / a).astype(T.active_dtype())


def turn_off_step(pre_activation: np.ndarray, params: NeuronParams) -> NeuronState:
    """Stateless spiking layer: V = drive, S = spike(V). Nothing survives the step."""
    v = as_f32(pre_activation).copy()
    return NeuronState(v=v, s=spike_fn(v, params))


def _level_taus(params: NeuronParams, level_index: int, n_levels: int) -> list[float]:
    if params.tau_per_stage and level_index + n_levels > len(params.tau_per_stage):
        raise ShapeError(
            f"{n_levels} fusion levels starting at stage {level_index} exceed the "
            f"{len(params.tau_per_stage)} configured stages"
        )
    return [params.stage_tau(level_index + i) for i in range(n_levels)]


def turn_on_step(
    v_prev_levels: list[np.ndarray],
    pre_activation: np.ndarray,
    params: NeuronParams,
    level_index: int = 0,
) -> NeuronState:
    """Multi-level turn-on update.

    ``v_prev_levels[0]`` is this layer's own previous potential; deeper-stage
    potentials follow, already spatially and channel aligned. The update is

        V[t+1] = sum_i (1 - 1/tau_i) * v_prev_levels[i] + (1/tau_m) * drive

    with ``tau_m`` the decay of this layer. With a single level this is the
    plain leaky integration update.
    """
    pre = as_f32(pre_activation)
    if not v_prev_levels:
        raise ShapeError("turn_on_step needs at least the layer's own previous potential")
    taus = _level_taus(params, level_index, len(v_prev_levels))
    v = np.zeros_like(pre)
    for vp, tau in zip(v_prev_levels, taus):
        vp = as_f32(vp)
        if vp.shape != pre.shape:
            raise ShapeError(f"fusion level shape {vp.shape} does not match drive shape {pre.shape}")
        v += np.float32(1.0 - 1.0 / tau) * vp
    v += np.float32(1.0 / taus[0]) * pre
    v = v.astype(T.active_dtype())
    return NeuronState(v=v, s=spike_fn(v, params))


def turn_on_invert(
    v_next: np.ndarray,
    deeper_prev_levels: list[np.ndarray],
    pre_activation: np.ndarray,
    params: NeuronParams,
    level_index: int = 0,
) -> np.ndarray:
    """Exact algebraic inverse of :func:`turn_on_step`.

    Given V[t+1], the already-reconstructed deeper-stage potentials V^i[t]
    (aligned, empty for the deepest stage) and the recomputed drive, returns

        V[t] = (1 - 1/tau_m)^{-1} (V[t+1] - sum_{i>l} (1 - 1/tau_i) V^i[t]
                                   - (1/tau_m) drive).

    Reconstruction must proceed deepest stage first so the deeper levels are
    always available.
    """
    v_next = as_f32(v_next)
    pre = as_f32(pre_activation)
    taus = _level_taus(params, level_index, 1 + len(deeper_prev_levels))
    acc = v_next - np.float32(1.0 / taus[0]) * pre
    for vp, tau in zip(deeper_prev_levels, taus[1:]):
        vp = as_f32(vp)
        if vp.shape != v_next.shape:
            raise ShapeError(f"deeper level shape {vp.shape} does not match {v_next.shape}")
        acc -= np.float32(1.0 - 1.0 / tau) * vp
    return (acc / np.float32(1.0 - 1.0 / taus[0])).astype(T.active_dtype())
