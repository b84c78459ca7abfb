"""Three-branch segmentation + diagnosis network.

A shared main branch (MB) applies a strided 7x7x7 stem and then repeats
DenseBlock -> bottleneck -> in-plane average pooling. From its deepest
features, a diagnosis branch (DB) continues the DenseNet pattern with
max pooling over all three axes into a 5-way linear head, while a
segmentation branch (SB) mirrors the main branch upward with transpose
convolutions and skip connections, U-net style, into a 4-label head at the
input resolution.

Every composite unit is Operation-BN-ReLU (plus dropout); only the two
heads are bare. MB and SB never touch the slice axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .data import NUM_CLASSES, NUM_LABELS

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    growth_rate: int = 12
    init_features: int = 64
    block_layers: tuple[int, ...] = (2, 4, 8)
    num_seg_labels: int = NUM_LABELS
    num_diag_classes: int = NUM_CLASSES
    dropout_input: float = 0.2
    dropout_conv: float = 0.5
    stem_kernel: tuple[int, int, int] = (7, 7, 7)
    stem_stride: tuple[int, int, int] = (1, 2, 2)

    def __post_init__(self):
        self.block_layers = tuple(int(b) for b in self.block_layers)
        if self.growth_rate <= 0:
            raise ValueError("growth_rate must be positive")
        if self.init_features <= 0:
            raise ValueError("init_features must be positive")
        if not self.block_layers or any(b < 1 for b in self.block_layers):
            raise ValueError("block_layers must be nonempty positive ints")
        if list(self.block_layers) != sorted(self.block_layers):
            raise ValueError("block_layers must be nondecreasing")
        for rate in (self.dropout_input, self.dropout_conv):
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout rates must lie in [0, 1), got {rate}")


@dataclass
class NetworkOutput:
    seg_logits: torch.Tensor    # (labels, slices, rows, cols)
    diag_logits: torch.Tensor   # (classes,)


class ConvUnit(nn.Module):
    """Operation-BN-ReLU composite, optionally transposed, with dropout."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, dropout=0.0, transpose=False):
        super().__init__()
        if transpose:
            self.op = nn.ConvTranspose3d(in_ch, out_ch, kernel, stride=stride, bias=False)
        else:
            padding = tuple(k // 2 for k in kernel) if isinstance(kernel, tuple) else kernel // 2
            self.op = nn.Conv3d(in_ch, out_ch, kernel, stride=stride,
                                padding=padding, bias=False)
        self.bn = nn.BatchNorm3d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.drop = nn.Dropout(dropout) if dropout > 0 else nn.Identity()

    def forward(self, x):
        return self.drop(self.relu(self.bn(self.op(x))))


class DenseBlock(nn.Module):
    """num_layers 3x3x3 conv layers, each appending growth_rate channels."""

    def __init__(self, in_ch, num_layers, growth_rate, dropout):
        super().__init__()
        self.layers = nn.ModuleList(
            ConvUnit(in_ch + i * growth_rate, growth_rate, (3, 3, 3), dropout=dropout)
            for i in range(num_layers)
        )
        self.out_channels = in_ch + num_layers * growth_rate

    def forward(self, x):
        for layer in self.layers:
            x = torch.cat([x, layer(x)], dim=1)
        return x


class Bottleneck(nn.Module):
    """1x1x1 convolution halving the channel count (integer floor)."""

    def __init__(self, in_ch, dropout):
        super().__init__()
        self.out_channels = in_ch // 2
        self.unit = ConvUnit(in_ch, self.out_channels, (1, 1, 1), dropout=dropout)

    def forward(self, x):
        return self.unit(x)


class _EncoderStage(nn.Module):
    def __init__(self, in_ch, num_layers, cfg: ModelConfig):
        super().__init__()
        self.dense = DenseBlock(in_ch, num_layers, cfg.growth_rate, cfg.dropout_conv)
        self.bottleneck = Bottleneck(self.dense.out_channels, cfg.dropout_conv)
        self.pool = nn.AvgPool3d(kernel_size=(1, 2, 2), stride=(1, 2, 2))
        self.out_channels = self.bottleneck.out_channels


class _DecoderStage(nn.Module):
    def __init__(self, in_ch, skip_ch, num_layers, cfg: ModelConfig):
        super().__init__()
        up_ch = max(in_ch // 2, 1)
        self.up = ConvUnit(in_ch, up_ch, (1, 2, 2), stride=(1, 2, 2),
                           dropout=cfg.dropout_conv, transpose=True)
        self.bottleneck = Bottleneck(up_ch + skip_ch, cfg.dropout_conv)
        self.dense = DenseBlock(self.bottleneck.out_channels, num_layers,
                                cfg.growth_rate, cfg.dropout_conv)
        self.out_channels = self.dense.out_channels

    def forward(self, x, skip):
        x = self.up(x)
        x = torch.cat([x, skip], dim=1)
        return self.dense(self.bottleneck(x))


class _DiagnosisStage(nn.Module):
    def __init__(self, in_ch, num_layers, cfg: ModelConfig):
        super().__init__()
        self.dense = DenseBlock(in_ch, num_layers, cfg.growth_rate, cfg.dropout_conv)
        self.bottleneck = Bottleneck(self.dense.out_channels, cfg.dropout_conv)
        self.pool = nn.MaxPool3d(kernel_size=2, stride=2)
        self.out_channels = self.bottleneck.out_channels

    def forward(self, x):
        return self.pool(self.bottleneck(self.dense(x)))


class MultiTaskDenseUNet(nn.Module):
    """See module docstring. Built for inputs whose in-plane size is a
    multiple of 2**(len(block_layers) + 1); the slice axis is free as long
    as the diagnosis branch can keep pooling it (validated per forward).
    """

    def __init__(self, config: ModelConfig, input_shape: tuple[int, int, int] = (6, 128, 128)):
        super().__init__()
        self.config = config
        self.input_shape = tuple(int(v) for v in input_shape)
        self.channel_trace: list[dict] = []

        depth, rows, cols = input_shape
        self.required_multiple = 2 ** (len(config.block_layers) + 1)
        if rows % self.required_multiple or cols % self.required_multiple:
            raise ValueError(
                f"in-plane input size {rows}x{cols} must be a multiple of "
                f"{self.required_multiple} for block_layers={config.block_layers}"
            )
        if rows < self.required_multiple or cols < self.required_multiple:
            raise ValueError(
                f"block_layers={config.block_layers} over-downsamples a "
                f"{rows}x{cols} input below one pixel"
            )

        self.input_dropout = (nn.Dropout(config.dropout_input)
                              if config.dropout_input > 0 else nn.Identity())
        self.stem = ConvUnit(3, config.init_features, config.stem_kernel,
                             stride=config.stem_stride, dropout=config.dropout_conv)
        self._trace("stem", "stem", 3, config.init_features)

        ch = config.init_features
        self.mb_stages = nn.ModuleList()
        for i, layers in enumerate(config.block_layers):
            stage = _EncoderStage(ch, layers, config)
            self._trace(f"mb_stages.{i}.dense", "dense", ch, stage.dense.out_channels,
                        layers=layers)
            self._trace(f"mb_stages.{i}.bottleneck", "bottleneck",
                        stage.dense.out_channels, stage.out_channels)
            self.mb_stages.append(stage)
            ch = stage.out_channels
        mb_out = ch

        # Diagnosis branch: keep the DenseNet pattern, pooling all three axes
        # until another halving would squeeze some axis below one voxel.
        db_dims = [depth,
                   rows // self.required_multiple,
                   cols // self.required_multiple]
        self.db_stage_count = 0
        probe = list(db_dims)
        while all(d >= 2 for d in probe):
            self.db_stage_count += 1
            probe = [d // 2 for d in probe]
        if self.db_stage_count == 0:
            raise ValueError(
                f"input {input_shape} leaves no room for diagnosis-branch "
                f"pooling after the main branch (feature dims {tuple(db_dims)})"
            )
        self.db_stages = nn.ModuleList()
        db_layers = config.block_layers[-1]
        for i in range(self.db_stage_count):
            stage = _DiagnosisStage(ch, db_layers, config)
            self._trace(f"db_stages.{i}.dense", "dense", ch, stage.dense.out_channels,
                        layers=db_layers)
            self._trace(f"db_stages.{i}.bottleneck", "bottleneck",
                        stage.dense.out_channels, stage.out_channels)
            self.db_stages.append(stage)
            ch = stage.out_channels
        self.db_pool = nn.AdaptiveAvgPool3d(1)
        self.diag_head = nn.Linear(ch, config.num_diag_classes)
        self._trace("diag_head", "head", ch, config.num_diag_classes)

        # Segmentation branch: decode from the deepest MB features, merging
        # the matching-resolution skip at every step.
        ch = mb_out
        skip_channels = [stage.out_channels for stage in self.mb_stages]
        self.sb_stages = nn.ModuleList()
        for i in reversed(range(len(config.block_layers))):
            stage = _DecoderStage(ch, skip_channels[i], config.block_layers[i], config)
            j = len(config.block_layers) - 1 - i
            self._trace(f"sb_stages.{j}.up", "upconv", ch, max(ch // 2, 1))
            self._trace(f"sb_stages.{j}.bottleneck", "bottleneck",
                        max(ch // 2, 1) + skip_channels[i], stage.bottleneck.out_channels)
            self._trace(f"sb_stages.{j}.dense", "dense", stage.bottleneck.out_channels,
                        stage.out_channels, layers=config.block_layers[i])
            self.sb_stages.append(stage)
            ch = stage.out_channels
        self.sb_final_up = ConvUnit(ch, max(ch // 2, 1), (1, 2, 2), stride=(1, 2, 2),
                                    dropout=config.dropout_conv, transpose=True)
        self._trace("sb_final_up", "upconv", ch, max(ch // 2, 1))
        ch = max(ch // 2, 1)
        self.seg_head = nn.Conv3d(ch, config.num_seg_labels, kernel_size=1)
        self._trace("seg_head", "head", ch, config.num_seg_labels)

        self._init_weights()

    def _trace(self, name, kind, in_ch, out_ch, layers=None):
        entry = {"name": name, "kind": kind, "in_channels": in_ch, "out_channels": out_ch}
        if layers is not None:
            entry["layers"] = layers
        self.channel_trace.append(entry)

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
                nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.BatchNorm3d):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Linear):
                nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="linear")
                nn.init.zeros_(module.bias)

    def _check_input(self, x: torch.Tensor):
        if x.ndim != 5 or x.shape[1] != 3:
            raise ValueError(
                f"expected input (batch, 3, slices, rows, cols), got {tuple(x.shape)}"
            )
        _, _, depth, rows, cols = x.shape
        if rows % self.required_multiple or cols % self.required_multiple:
            raise ValueError(
                f"in-plane input size {rows}x{cols} must be a multiple of "
                f"{self.required_multiple}"
            )
        dims = [depth, rows // self.required_multiple, cols // self.required_multiple]
        for _ in range(self.db_stage_count):
            if any(d < 2 for d in dims):
                raise ValueError(
                    f"input {(depth, rows, cols)} too small for "
                    f"{self.db_stage_count} diagnosis-branch pooling stages"
                )
            dims = [d // 2 for d in dims]

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check_input(x)
        x = self.input_dropout(x)
        y = self.stem(x)

        skips = []
        for stage in self.mb_stages:
            pre = stage.bottleneck(stage.dense(y))
            skips.append(pre)
            y = stage.pool(pre)

        d = y
        for stage in self.db_stages:
            d = stage(d)
        diag = self.diag_head(self.db_pool(d).flatten(1))

        s = y
        for stage, skip in zip(self.sb_stages, reversed(skips)):
            s = stage(s, skip)
        seg = self.seg_head(self.sb_final_up(s))
        return seg, diag

    def branch_of(self, param_name: str) -> str:
        """Map a parameter name to its owning branch: 'mb', 'sb' or 'db'."""
        if param_name.startswith(("sb_stages", "sb_final_up", "seg_head")):
            return "sb"
        if param_name.startswith(("db_stages", "diag_head")):
            return "db"
        return "mb"


def build_model(config: ModelConfig,
                input_shape: tuple[int, int, int] = (6, 128, 128),
                seed: Optional[int] = None) -> MultiTaskDenseUNet:
    """Construct the network, validating it against the expected input shape."""
    if seed is not None:
        torch.manual_seed(seed)
    return MultiTaskDenseUNet(config, input_shape)


def forward(model: MultiTaskDenseUNet, sample_input) -> NetworkOutput:
    """Run one (3, slices, rows, cols) sample through the network."""
    if isinstance(sample_input, np.ndarray):
        sample_input = torch.from_numpy(np.ascontiguousarray(sample_input))
    if sample_input.ndim != 4:
        raise ValueError(f"expected a 4D sample, got shape {tuple(sample_input.shape)}")
    seg, diag = model(sample_input.float().unsqueeze(0))
    return NetworkOutput(seg_logits=seg[0], diag_logits=diag[0])


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def save_checkpoint(path, model: MultiTaskDenseUNet, optimizer=None, extra: Optional[dict] = None):
    """Persist config + parameters (+ optimizer state) in one versioned file."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "input_shape": model.input_shape,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, input_shape: Optional[tuple[int, int, int]] = None):
    """Rebuild a model from a checkpoint; returns (model, payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config = ModelConfig(**payload["model_config"])
    shape = tuple(input_shape or payload["input_shape"])
    model = MultiTaskDenseUNet(config, shape)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload
