"""Verification harnesses: finite-difference gradient checks, reversible
vs store-everything gradient equivalence, and activation-memory scaling
measurements. These are the programmatic backends of the ``gradcheck`` and
``memcheck`` commands and of the acceptance suite.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .engine import ActivationLedger, backward_reversible, backward_stbp, loss_cross_entropy
from .network import NetworkConfig, forward_full, init_weights, named_parameters
from .neuron import NeuronParams

__all__ = [
    "FiniteDiffReport",
    "EquivalenceReport",
    "MemoryScalingReport",
    "finite_difference_check",
    "gradient_equivalence",
    "measure_memory_scaling",
]


@dataclass
class FiniteDiffReport:
    per_param: dict[str, float]  # max relative error per parameter tensor
    max_rel_err: float
    worst_param: str


@dataclass
class EquivalenceReport:
    per_seed: list[float]  # max per-parameter relative error per seed
    max_rel_err: float
    max_reconstruction_err: float


@dataclass
class MemoryScalingReport:
    timesteps: list[int]
    reversible_peaks: list[int]
    stbp_peaks: list[int]

    def reversible_variation(self) -> float:
        """max/min - 1 over the reversible column."""
        lo, hi = min(self.reversible_peaks), max(self.reversible_peaks)
        return hi / lo - 1.0

    def stbp_doubling_ratios(self) -> list[float]:
        return [b / a for a, b in zip(self.stbp_peaks, self.stbp_peaks[1:])]


def _soft_config(config: NetworkConfig) -> NetworkConfig:
    neuron = replace(config.neuron, spike_mode="soft")
    return replace(config, neuron=neuron)


def finite_difference_check(
    config: NetworkConfig,
    seed: int = 0,
    h: float = 1e-3,
    samples_per_param: int = 4,
    batch: int = 2,
    label_smoothing: float = 0.1,
) -> FiniteDiffReport:
    """Central-difference check of the analytic gradients in soft-spike mode.

    Runs in float64: the loss differences probed at step ``h`` are far below
    float32 evaluation noise. Entries whose finite-difference estimate is
    numerically zero are skipped (relative error is meaningless there).
    """
    config = _soft_config(config)
    with T.precision(np.float64):
        weights = init_weights(config)
        # at the identity init (residual scale zero) the branch weights get
        # exactly zero gradient; open the gate so every class is exercised
        for name, p in named_parameters(weights).items():
            if name.endswith(".alpha"):
                p[...] = 0.5
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((batch, config.in_channels, *config.input_hw))
        labels = rng.integers(0, config.num_classes, size=batch)
        grads, _ = backward_stbp(x, labels, weights, config,
                                 label_smoothing=label_smoothing)

        def loss_value() -> float:
            logits, _ = forward_full(x, weights, config, keep_traces=True)
            value, _ = loss_cross_entropy(logits, labels, label_smoothing)
            return float(value)

        per_param: dict[str, float] = {}
        for name, p in named_parameters(weights).items():
            flat = p.ravel()
            n = min(samples_per_param, flat.size)
            idx = rng.choice(flat.size, size=n, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                lp = loss_value()
                flat[i] = orig - h
                lm = loss_value()
                flat[i] = orig
                fd = (lp - lm) / (2.0 * h)
                if abs(fd) < 1e-9:
                    continue
                analytic = float(grads.grads[name].ravel()[i])
                worst = max(worst, abs(analytic - fd) / (abs(fd) + 1e-8))
            per_param[name] = worst
    worst_param = max(per_param, key=per_param.get)
    return FiniteDiffReport(per_param, per_param[worst_param], worst_param)


def gradient_equivalence(
    config: NetworkConfig,
    seeds: range | list[int] = range(10),
    batch: int = 2,
    label_smoothing: float = 0.1,
) -> EquivalenceReport:
    """Reversible vs store-everything gradients on identical graphs.

    The error metric per parameter is ``||g_rev - g_stbp|| / (||g_stbp|| + eps)``
    — a norm-based relative error robust to individual entries near zero.
    """
    per_seed = []
    worst_reconstruction = 0.0
    for seed in seeds:
        cfg = replace(config, seed=seed)
        weights = init_weights(cfg)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((batch, cfg.in_channels, *cfg.input_hw)).astype(np.float32)
        labels = rng.integers(0, cfg.num_classes, size=batch)
        g_ref, _ = backward_stbp(x, labels, weights, cfg, ActivationLedger(),
                                 label_smoothing=label_smoothing)
        g_rev, aux = backward_reversible(x, labels, weights, cfg, ActivationLedger(),
                                         label_smoothing=label_smoothing)
        worst_reconstruction = max(worst_reconstruction, aux["max_reconstruction_error"])
        errs = []
        for name, ref in g_ref.grads.items():
            diff = np.linalg.norm(g_rev.grads[name].ravel() - ref.ravel())
            errs.append(diff / (np.linalg.norm(ref.ravel()) + 1e-12))
        per_seed.append(float(max(errs)))
    return EquivalenceReport(per_seed, max(per_seed), worst_reconstruction)


def measure_memory_scaling(
    base_config: NetworkConfig,
    timesteps: list[int] = (2, 4, 8),
    batch: int = 2,
    seed: int = 0,
) -> MemoryScalingReport:
    """Ledger peaks of both backward modes across timestep counts.

    The per-timestep sub-network size is held fixed (stage widths are per
    sub-network), so the reversible column should stay flat while the
    store-everything column grows linearly.
    """
    rev_peaks, stbp_peaks = [], []
    for t in timesteps:
        cfg = replace(base_config, timesteps=t, encoder_channels=0, seed=seed)
        weights = init_weights(cfg)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((batch, cfg.in_channels, *cfg.input_hw)).astype(np.float32)
        labels = rng.integers(0, cfg.num_classes, size=batch)
        led = ActivationLedger()
        backward_stbp(x, labels, weights, cfg, led)
        stbp_peaks.append(led.peak_bytes)
        led = ActivationLedger()
        backward_reversible(x, labels, weights, cfg, led)
        rev_peaks.append(led.peak_bytes)
    return MemoryScalingReport(list(timesteps), rev_peaks, stbp_peaks)
