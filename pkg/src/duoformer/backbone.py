"""Four-stage feature pyramid: toy CNN forward or ingestion from disk.

Stage i of an H-px input has spatial extent P_i = H / (4 * 2**i): the stem
downsamples by 4 and each later stage by a further 2. The pyramid boundary
is channel-last [B, P, P, C]; NCHW is used internally for the conv stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, FormatError
from .layers import BatchNorm2d, Conv2d, Module
from .serialize import load_tensors, save_tensors
from .tensor import Tensor

STAGE_INDICES = (0, 1, 2, 3)


def stage_extent(input_size: int, stage: int) -> int:
    """P_i = H / (4 * 2**i); raises when not an exact integer."""
    denom = 4 * 2 ** stage
    if input_size % denom:
        raise ConfigError(f"input size {input_size} not divisible by {denom} (stage {stage})")
    return input_size // denom


@dataclass
class FeaturePyramid:
    """Ordered (stage_index, features [B, P_i, P_i, C_i]) pairs plus the input size."""
    stages: "list[tuple[int, Tensor]]"
    input_size: int

    def __post_init__(self):
        if not self.stages:
            raise ContractError("pyramid must contain at least one stage")
        last = -1
        batch = None
        for idx, feat in self.stages:
            if idx not in STAGE_INDICES:
                raise ContractError(f"stage index {idx} outside {STAGE_INDICES}")
            if idx <= last:
                raise ContractError("stage indices must be strictly increasing")
            last = idx
            if feat.ndim != 4 or feat.shape[1] != feat.shape[2]:
                raise ContractError(f"stage {idx} features must be [B,P,P,C], got {feat.shape}")
            p = stage_extent(self.input_size, idx)
            if feat.shape[1] != p:
                raise ContractError(
                    f"stage {idx} spatial extent {feat.shape[1]} != H/(4*2^{idx}) = {p}")
            if batch is None:
                batch = feat.shape[0]
            elif feat.shape[0] != batch:
                raise ContractError(f"stage {idx} batch extent {feat.shape[0]} != {batch}")

    @property
    def batch(self) -> int:
        return self.stages[0][1].shape[0]

    @property
    def stage_indices(self) -> "tuple[int, ...]":
        return tuple(i for i, _ in self.stages)

    def stage(self, idx: int) -> Tensor:
        for i, feat in self.stages:
            if i == idx:
                return feat
        raise ContractError(f"pyramid has no stage {idx} (present: {self.stage_indices})")


class _Stage(Module):
    """conv3x3(s2) -> BN -> ReLU -> conv3x3(s1 or s2) -> BN -> ReLU."""

    def __init__(self, c_in: int, c_out: int, rng, second_stride: int, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=2, padding=1, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, stride=second_stride, padding=1,
                            bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(c_out, dtype=dtype)

    def forward(self, x):
        x = T.relu(self.bn1(self.conv1(x)))
        return T.relu(self.bn2(self.conv2(x)))


class ToyBackbone(Module):
    """Minimal CNN producing the 4-stage pyramid; two convs per stage.

    Stage 0 is the stem (both convs stride 2, total /4); stages 1-3 use one
    stride-2 and one stride-1 conv (/2 each).
    """

    def __init__(self, channels, stream, in_channels: int = 3, last_stage: int = 3,
                 dtype=np.float32):
        super().__init__()
        channels = list(channels)
        if len(channels) != 4:
            raise ConfigError(f"backbone needs 4 channel widths, got {channels}")
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "last_stage", last_stage)
        prev = in_channels
        for i, c in enumerate(channels[:last_stage + 1]):
            rng = stream.child(f"stage{i}").generator()
            setattr(self, f"stage{i}", _Stage(prev, c, rng,
                                              second_stride=2 if i == 0 else 1, dtype=dtype))
            prev = c

    def forward(self, images: Tensor, stages=(0, 1, 2, 3)) -> FeaturePyramid:
        """images: [B, H, W, 3] channel-last, H == W divisible by 32."""
        if images.ndim != 4 or images.shape[3] != 3:
            raise ConfigError(f"expected [B,H,W,3] images, got {images.shape}")
        b, h, w, _ = images.shape
        if h != w:
            raise ConfigError(f"input must be square, got {h}x{w}")
        if h % 32:
            raise ConfigError(f"input size {h} not divisible by 32")
        stages = sorted(set(stages))
        if not stages or any(s not in STAGE_INDICES for s in stages):
            raise ConfigError(f"invalid stage subset {stages}")
        if max(stages) > self.last_stage:
            raise ConfigError(f"backbone built through stage {self.last_stage}, "
                              f"cannot produce stage {max(stages)}")
        x = images.transpose((0, 3, 1, 2))
        out = []
        for i in range(max(stages) + 1):
            x = getattr(self, f"stage{i}")(x)
            if i in stages:
                out.append((i, x.transpose((0, 2, 3, 1))))
        return FeaturePyramid(out, input_size=h)


def toy_backbone_forward(images: Tensor, channels, stream, stages=(0, 1, 2, 3)) -> FeaturePyramid:
    return ToyBackbone(channels, stream)(images, stages=stages)


def save_pyramid(path, pyramid: FeaturePyramid) -> None:
    entries = {f"stage{i}": feat.data.astype(np.float32, copy=False)
               for i, feat in pyramid.stages}
    entries["input_size"] = np.array(pyramid.input_size, dtype=np.int64)
    save_tensors(path, entries)


def load_pyramid(path) -> FeaturePyramid:
    entries = load_tensors(path)
    if "input_size" not in entries:
        raise FormatError("pyramid container lacks an 'input_size' entry")
    input_size = int(entries.pop("input_size"))
    stages = []
    for name, arr in entries.items():
        if not (name.startswith("stage") and name[5:].isdigit()):
            raise FormatError(f"unexpected entry {name!r} in pyramid container")
        idx = int(name[5:])
        if idx not in STAGE_INDICES:
            raise FormatError(f"entry {name!r}: stage index out of range")
        if arr.ndim != 4 or arr.shape[1] != arr.shape[2]:
            raise FormatError(f"entry {name!r}: expected [B,P,P,C], got {arr.shape}")
        try:
            p = stage_extent(input_size, idx)
        except ConfigError as e:
            raise FormatError(f"entry {name!r}: {e}") from e
        if arr.shape[1] != p:
            raise FormatError(f"entry {name!r}: spatial extent {arr.shape[1]} != "
                              f"H/(4*2^{idx}) = {p} for input_size {input_size}")
        stages.append((idx, Tensor(arr.astype(np.float32))))
    stages.sort(key=lambda t: t[0])
    batches = {feat.shape[0] for _, feat in stages}
    if len(batches) > 1:
        raise FormatError(f"inconsistent batch extents across stages: {sorted(batches)}")
    try:
        return FeaturePyramid(stages, input_size=input_size)
    except ContractError as e:
        raise FormatError(str(e)) from e
