"""Run configuration: flat dotted key=value text files.

The format is deliberately boring: one ``section.key = value`` per line,
``#`` comments, unknown keys rejected (typos fail loudly). Stage lists are
written ``channels x blocks`` comma-separated, e.g. ``8x2,16x2`` is two
stages of 8 and 16 channels with two blocks each. ``parse_config`` and
``serialize_config`` are exact inverses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec
from .network import NetworkConfig, StageConfig
from .neuron import NeuronParams

__all__ = ["RunConfig", "parse_config", "parse_config_file", "serialize_config"]

ENGINE_MODES = ("stbp", "reversible", "case1", "case2")


@dataclass
class RunConfig:
    """Everything one training/analysis run needs."""

    network: NetworkConfig
    dataset: DatasetSpec
    mode: str = "stbp"
    epochs: int = 1
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    label_smoothing: float = 0.1
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        if self.mode not in ENGINE_MODES:
            raise ValueError(f"mode must be one of {ENGINE_MODES}, got {self.mode!r}")
        if self.mode in ("case1", "case2") and self.network.temporal_mode != "full":
            raise ValueError(f"mode {self.mode!r} requires temporal_mode = full")
        if self.mode == "reversible" and self.network.temporal_mode != "boundary":
            raise ValueError("reversible mode requires temporal_mode = boundary")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")


def _fmt_stages(stages: list[StageConfig]) -> str:
    return ",".join(f"{s.channels}x{s.blocks}" for s in stages)


def _parse_stages(text: str) -> list[StageConfig]:
    out = []
    for part in text.split(","):
        try:
            ch, bl = part.strip().split("x")
            out.append(StageConfig(blocks=int(bl), channels=int(ch)))
        except ValueError as exc:
            raise ValueError(f"bad stage spec {part!r} (want channels x blocks)") from exc
    return out


def _fmt_hw(hw: tuple[int, int]) -> str:
    return f"{hw[0]}x{hw[1]}"


def _parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = text.strip().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise ValueError(f"bad size {text!r} (want HxW)") from exc


def _parse_bool(text: str) -> bool:
    if text in ("true", "false"):
        return text == "true"
    raise ValueError(f"bad boolean {text!r} (want true/false)")


def serialize_config(cfg: RunConfig) -> str:
    """Write a RunConfig as flat key=value text; inverse of :func:`parse_config`."""
    net, neu, ds = cfg.network, cfg.network.neuron, cfg.dataset
    lines = [
        f"run.mode = {cfg.mode}",
        f"run.epochs = {cfg.epochs}",
        f"run.batch_size = {cfg.batch_size}",
        f"run.lr = {cfg.lr!r}",
        f"run.momentum = {cfg.momentum!r}",
        f"run.label_smoothing = {cfg.label_smoothing!r}",
        f"run.seed = {cfg.seed}",
        f"run.out_dir = {cfg.out_dir}",
        f"network.timesteps = {net.timesteps}",
        f"network.stages = {_fmt_stages(net.stages)}",
        f"network.num_classes = {net.num_classes}",
        f"network.in_channels = {net.in_channels}",
        f"network.encoder_channels = {net.encoder_channels}",
        f"network.encoder_stride = {net.encoder_stride}",
        f"network.input_hw = {_fmt_hw(net.input_hw)}",
        f"network.temporal_mode = {net.temporal_mode}",
        f"network.grouped_encoding = {str(net.grouped_encoding).lower()}",
        f"network.grouped_width = {str(net.grouped_width).lower()}",
        f"network.dw_kernel = {net.dw_kernel}",
        f"neuron.tau = {neu.tau!r}",
        f"neuron.tau_per_stage = {','.join(repr(t) for t in neu.tau_per_stage) or 'none'}",
        f"neuron.v_th = {neu.v_th!r}",
        f"neuron.surrogate_width = {neu.surrogate_width!r}",
        f"neuron.spike_mode = {neu.spike_mode}",
        f"dataset.kind = {ds.kind}",
        f"dataset.train_images = {ds.train_images or 'none'}",
        f"dataset.train_labels = {ds.train_labels or 'none'}",
        f"dataset.test_images = {ds.test_images or 'none'}",
        f"dataset.test_labels = {ds.test_labels or 'none'}",
        f"dataset.normalize = {ds.normalize[0]!r},{ds.normalize[1]!r}",
        f"dataset.samples = {ds.samples}",
        f"dataset.frames = {ds.frames}",
    ]
    return "\n".join(lines) + "\n"


def _kv_lines(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_config(text: str) -> RunConfig:
    """Parse flat key=value text into a RunConfig. Unknown keys are errors."""
    kv = _kv_lines(text)

    def take(key: str, default: str | None = None) -> str:
        if key in kv:
            return kv.pop(key)
        if default is None:
            raise ValueError(f"missing required key {key!r}")
        return default

    mode = take("run.mode", "stbp")
    epochs = int(take("run.epochs", "1"))
    batch_size = int(take("run.batch_size", "32"))
    lr = float(take("run.lr", "0.05"))
    momentum = float(take("run.momentum", "0.9"))
    label_smoothing = float(take("run.label_smoothing", "0.1"))
    seed = int(take("run.seed", "0"))
    out_dir = take("run.out_dir", "runs")

    tau_ps = take("neuron.tau_per_stage", "none")
    neuron = NeuronParams(
        tau=float(take("neuron.tau", "2.0")),
        tau_per_stage=[] if tau_ps == "none" else [float(t) for t in tau_ps.split(",")],
        v_th=float(take("neuron.v_th", "1.0")),
        surrogate_width=float(take("neuron.surrogate_width", "1.0")),
        spike_mode=take("neuron.spike_mode", "hard"),
    )
    temporal_mode = take("network.temporal_mode", "boundary")
    network = NetworkConfig(
        timesteps=int(take("network.timesteps")),
        stages=_parse_stages(take("network.stages")),
        num_classes=int(take("network.num_classes")),
        neuron=neuron,
        grouped_encoding=_parse_bool(
            take("network.grouped_encoding", "false" if temporal_mode == "full" else "true")),
        seed=seed,
        in_channels=int(take("network.in_channels", "1")),
        encoder_channels=int(take("network.encoder_channels", "0")),
        encoder_stride=int(take("network.encoder_stride", "1")),
        input_hw=_parse_hw(take("network.input_hw", "16x16")),
        temporal_mode=temporal_mode,
        grouped_width=_parse_bool(take("network.grouped_width", "false")),
        dw_kernel=int(take("network.dw_kernel", "5")),
    )

    def opt(value: str) -> str:
        return "" if value == "none" else value

    norm = take("dataset.normalize", "0.0,1.0").split(",")
    if len(norm) != 2:
        raise ValueError(f"dataset.normalize wants mean,std; got {norm!r}")
    dataset = DatasetSpec(
        kind=take("dataset.kind", "synthetic"),
        train_images=opt(take("dataset.train_images", "none")),
        train_labels=opt(take("dataset.train_labels", "none")),
        test_images=opt(take("dataset.test_images", "none")),
        test_labels=opt(take("dataset.test_labels", "none")),
        num_classes=network.num_classes,
        input_hw=network.input_hw,
        normalize=(float(norm[0]), float(norm[1])),
        samples=int(take("dataset.samples", "256")),
        frames=int(take("dataset.frames", "0")),
    )
    if kv:
        raise ValueError(f"unknown configuration keys: {sorted(kv)}")
    return RunConfig(
        network=network, dataset=dataset, mode=mode, epochs=epochs,
        batch_size=batch_size, lr=lr, momentum=momentum,
        label_smoothing=label_smoothing, seed=seed, out_dir=out_dir,
    )


def parse_config_file(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())
