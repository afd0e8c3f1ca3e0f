"""Derived metrics: theoretical inference energy, FLOP counting, firing
rates, and the gradient cosine-similarity analysis.

The energy model is the standard field estimator: the analog-input encoder
costs multiply-accumulates (4.6 pJ each), every spike-driven conv/FC layer
costs accumulates (0.9 pJ each) weighted by its firing rate, and the
accumulate term is multiplied by the number of timesteps. It is an estimate,
not a measurement; hardware specifics are deliberately ignored.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .engine import GradientSet
from .network import NetworkConfig

__all__ = [
    "E_MAC_PJ",
    "E_AC_PJ",
    "LayerFlops",
    "EnergyReport",
    "estimate_energy",
    "count_flops",
    "grouped_flop_table",
    "cosine_similarity",
    "gradient_signature",
    "firing_rate",
]

E_MAC_PJ = 4.6
E_AC_PJ = 0.9


@dataclass(frozen=True)
class LayerFlops:
    name: str
    kind: str  # "mac" (analog input) or "ac" (spike driven)
    flops: int


@dataclass
class EnergyReport:
    e_mac_pj: float
    e_ac_pj: float
    timesteps: int
    per_layer: list[dict]  # name, kind, flops, firing_rate, energy_pj
    total_pj: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer,kind,flops,firing_rate,energy_pj\n")
        for row in self.per_layer:
            buf.write(f"{row['name']},{row['kind']},{row['flops']},"
                      f"{row['firing_rate']:.6f},{row['energy_pj']:.6f}\n")
        buf.write(f"total,,,,{self.total_pj:.6f}\n")
        return buf.getvalue()


def estimate_energy(flop_table: list[LayerFlops], firing_rates: dict[str, float], T: int) -> EnergyReport:
    """Theoretical inference energy in picojoules.

    MAC layers (the encoder) contribute E_MAC * FLOPs once; AC layers
    contribute E_AC * T * FLOPs * firing_rate, with the firing rate the
    fraction of nonzero entries in the layer's input spike tensor.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    rows = []
    total = 0.0
    for layer in flop_table:
        if layer.kind == "mac":
            fr = 1.0
            energy = E_MAC_PJ * layer.flops
        elif layer.kind == "ac":
            fr = float(firing_rates.get(layer.name, 0.0))
            if not 0.0 <= fr <= 1.0:
                raise ValueError(f"firing rate for {layer.name} out of [0,1]: {fr}")
            energy = E_AC_PJ * T * layer.flops * fr
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        rows.append({"name": layer.name, "kind": layer.kind, "flops": layer.flops,
                     "firing_rate": fr, "energy_pj": energy})
        total += energy
    return EnergyReport(E_MAC_PJ, E_AC_PJ, T, rows, total)


def _conv_flops(cout: int, cin: int, kh: int, kw: int, oh: int, ow: int, groups: int = 1) -> int:
    return (cout * cin // groups) * kh * kw * oh * ow


def count_flops(config: NetworkConfig) -> list[LayerFlops]:
    """Per-layer MAC-counted FLOPs of one sub-network pass (one timestep).

    The encoder is the only analog-input (MAC) layer; every later conv/FC
    layer is spike driven (AC), including the stage-transition downsampling
    convs.
    """
    sizes = config.stage_spatial()
    h0, w0 = sizes[0]
    table = [LayerFlops("encoder", "mac",
                        _conv_flops(config.encoder_channels, config.in_channels, 3, 3, h0, w0))]
    k = config.dw_kernel
    for s, stage in enumerate(config.stages):
        ch = config.stage_width(s)
        h, w = sizes[s]
        for b in range(stage.blocks):
            table.append(LayerFlops(f"s{s}.b{b}.dw", "ac", _conv_flops(ch, ch, k, k, h, w, groups=ch)))
            table.append(LayerFlops(f"s{s}.b{b}.pw", "ac", _conv_flops(ch, ch, 1, 1, h, w)))
        bh, bw = config.bundle_spatial(s)
        table.append(LayerFlops(f"s{s}.turnon", "ac",
                                _conv_flops(config.bundle_channels(s), ch, 1, 1, bh, bw)))
    last = len(config.stages) - 1
    table.append(LayerFlops("head", "ac", config.num_classes * config.bundle_channels(last)))
    return table


def grouped_flop_table(table: list[LayerFlops], T: int) -> list[LayerFlops]:
    """Equal-partition model of the grouped architecture.

    With the total width fixed and the network split into T sub-networks,
    each spike-driven layer's per-sub-network FLOPs are the full-width FLOPs
    divided by T; the energy model's T multiplier then sums the T
    sub-networks back, making total energy independent of T. The encoder
    runs once and is not divided.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    out = []
    for layer in table:
        if layer.kind == "mac":
            out.append(layer)
        else:
            out.append(LayerFlops(layer.name, layer.kind, layer.flops // T))
    return out


def firing_rate(spikes: np.ndarray) -> float:
    """Fraction of nonzero entries in a spike tensor."""
    if spikes.size == 0:
        raise ValueError("empty spike tensor")
    return float(np.count_nonzero(spikes)) / spikes.size


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def gradient_signature(grads: GradientSet) -> np.ndarray:
    """One scalar per weight layer: the mean of that layer's gradient entries.

    Gains and residual scales are bookkeeping parameters, not layers; only
    conv/FC weight tensors (encoder, dw, pw, turn-on synapse, head)
    contribute, in sorted name order.
    """
    names = [n for n in sorted(grads.grads)
             if n == "encoder" or n == "head" or n.endswith((".dw", ".pw", ".turnon"))]
    return np.array([float(grads.grads[n].mean()) for n in names], dtype=np.float64)
