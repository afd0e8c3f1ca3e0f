"""revspike: a temporal-reversible spiking neural network training engine.

The package trains small convolutional SNNs in two interchangeable ways: a
conventional store-everything backward pass, and a reversible backward pass
that keeps only one timestep of activations and reconstructs earlier membrane
states by algebraically inverting the (reset-free) turn-on neuron update.
Instrumentation verifies that the two produce matching gradients, that the
reversible path's activation memory stays flat in the number of timesteps,
and that the theoretical inference energy of the grouped single-pass design
is independent of the timestep count.
"""

from .block import BlockWeights, block_forward, reparameterize
from .engine import (
    ActivationLedger,
    GradientSet,
    ReconstructionError,
    SGDMomentum,
    backward_masked,
    backward_reversible,
    backward_stbp,
    loss_cross_entropy,
)
from .metrics import (
    E_AC_PJ,
    E_MAC_PJ,
    cosine_similarity,
    count_flops,
    estimate_energy,
    gradient_signature,
    grouped_flop_table,
)
from .network import ModelWeights, NetworkConfig, StageConfig, forward_full, init_weights
from .neuron import NeuronParams, spike_fn, turn_on_invert, turn_on_step
from .tensor import ShapeError, precision

__version__ = "0.1.0"

__all__ = [
    "ActivationLedger",
    "BlockWeights",
    "E_AC_PJ",
    "E_MAC_PJ",
    "GradientSet",
    "ModelWeights",
    "NetworkConfig",
    "NeuronParams",
    "ReconstructionError",
    "SGDMomentum",
    "ShapeError",
    "StageConfig",
    "backward_masked",
    "backward_reversible",
    "backward_stbp",
    "block_forward",
    "cosine_similarity",
    "count_flops",
    "estimate_energy",
    "forward_full",
    "gradient_signature",
    "grouped_flop_table",
    "init_weights",
    "loss_cross_entropy",
    "precision",
    "reparameterize",
    "spike_fn",
    "turn_on_invert",
    "turn_on_step",
    "reparameterize",
]
