"""Growing generator and per-stage auxiliary-classifier critics."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .errors import GrowthError, InvalidInputError
from .pyramid import NoiseMap, upsample


@dataclass(frozen=True)
class ConvBlockSpec:
    layers_per_stage: int = 3
    filters: int = 64
    kernel: int = 3

    def __post_init__(self):
        if not 3 <= self.layers_per_stage <= 6:
            raise InvalidInputError(f"layers_per_stage must be in [3, 6], got {self.layers_per_stage}")
        if self.filters <= 0:
            raise InvalidInputError(f"filters must be positive, got {self.filters}")
        if self.kernel % 2 != 1:
            raise InvalidInputError("kernel must be odd to preserve spatial size")


def _conv(cin: int, cout: int, kernel: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel, stride=1, padding=kernel // 2)


def conv_stack(cin: int, spec: ConvBlockSpec, layers: Optional[int] = None) -> nn.Sequential:
    layers = spec.layers_per_stage if layers is None else layers
    mods: list[nn.Module] = []
    for i in range(layers):
        mods += [_conv(cin if i == 0 else spec.filters, spec.filters, spec.kernel), nn.PReLU(spec.filters)]
    return nn.Sequential(*mods)


def parameter_fingerprint(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class GeneratorStage(nn.Module):
    """Conv stack plus a learnable gain on its RGB contribution."""

    def __init__(self, spec: ConvBlockSpec, gain: float = 1.0):
        super().__init__()
        self.body = conv_stack(spec.filters, spec)
        self.gain = nn.Parameter(torch.tensor(float(gain)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class Generator(nn.Module):
    """Unconditional growing generator.

    Only the coarsest stage receives noise.  Each later stage refines the
    bilinearly upsampled features of the stage below, and its gated RGB
    contribution is added to the upsampled pre-activation output of that
    stage before the final tanh.  A grown stage copies the weights of its
    predecessor but starts with gain ``grow_gain`` so the output changes
    only slightly at the moment of growth.
    """

    grow_gain = 0.1

    def __init__(
        self,
        spec: ConvBlockSpec,
        stage_dims: Sequence[Sequence[int]],
        window: int = 3,
        lr_stage_scale: float = 0.5,
    ):
        super().__init__()
        if window < 1:
            raise InvalidInputError("concurrent window must be >= 1")
        self.spec = spec
        self.stage_dims = tuple(tuple(int(v) for v in d) for d in stage_dims)
        self.window = window
        self.lr_stage_scale = lr_stage_scale
        self.head = nn.Sequential(_conv(3, spec.filters, spec.kernel), nn.PReLU(spec.filters))
        self.stages = nn.ModuleList([GeneratorStage(spec)])
        self.to_rgb = _conv(spec.filters, 3, spec.kernel)
        self.apply_freeze()

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def max_stages(self) -> int:
        return len(self.stage_dims)

    @property
    def frozen_below(self) -> int:
        return max(0, self.num_stages - self.window)

    @property
    def lr_multipliers(self) -> list[float]:
        newest = self.num_stages - 1
        return [
            self.lr_stage_scale ** (newest - i) if i >= self.frozen_below else 0.0
            for i in range(self.num_stages)
        ]

    def head_multiplier(self) -> float:
        # the input conv feeds stage 0 only, so it trains and freezes with it
        return self.lr_multipliers[0]

    def apply_freeze(self) -> None:
        for stage, mult in zip(self.stages, self.lr_multipliers):
            stage.requires_grad_(mult > 0)
        self.head.requires_grad_(self.head_multiplier() > 0)
        self.to_rgb.requires_grad_(True)

    def grow(self) -> "Generator":
        if self.num_stages >= self.max_stages:
            raise GrowthError(f"generator already has all {self.max_stages} stages")
        stage = copy.deepcopy(self.stages[-1])
        with torch.no_grad():
            stage.gain.fill_(self.grow_gain)
        self.stages.append(stage)
        self.apply_freeze()
        return self

    def forward(self, noise: torch.Tensor, upto_stage: Optional[int] = None) -> torch.Tensor:
        if isinstance(noise, NoiseMap):
            noise = noise.data
        squeeze = noise.ndim == 3
        if squeeze:
            noise = noise.unsqueeze(0)
        upto = self.num_stages - 1 if upto_stage is None else upto_stage
        if not 0 <= upto < self.num_stages:
            raise InvalidInputError(f"upto_stage {upto} outside [0, {self.num_stages})")
        if noise.ndim != 4 or noise.shape[1] != 3 or tuple(noise.shape[-2:]) != self.stage_dims[0]:
            raise InvalidInputError(
                f"noise must be (N, 3, {self.stage_dims[0][0]}, {self.stage_dims[0][1]}), "
                f"got {tuple(noise.shape)}"
            )

        feats = self.stages[0](self.head(noise))
        logits = self.stages[0].gain * self.to_rgb(feats)
        for i in range(1, upto + 1):
            stage = self.stages[i]
            feats = stage(upsample(feats, self.stage_dims[i]))
            logits = upsample(logits, self.stage_dims[i]) + stage.gain * self.to_rgb(feats)
        out = torch.tanh(logits)
        return out.squeeze(0) if squeeze else out

    def stage_parameter_counts(self) -> list[int]:
        return [count_parameters(s) for s in self.stages]


class Discriminator(nn.Module):
    """Patch critic with a k-way auxiliary classifier branch.

    ``forward`` returns an unbounded per-patch score map and class logits
    obtained by global-averaging a k-channel convolutional map.
    """

    def __init__(self, spec: ConvBlockSpec, num_classes: int, stage_index: int, dims: Sequence[int]):
        super().__init__()
        if num_classes < 1:
            raise InvalidInputError(f"num_classes must be >= 1, got {num_classes}")
        self.spec = spec
        self.num_classes = num_classes
        self.stage_index = stage_index
        self.dims = (int(dims[0]), int(dims[1]))
        self.trunk = conv_stack(3, spec)
        self.source_head = _conv(spec.filters, 1, spec.kernel)
        self.class_head = _conv(spec.filters, num_classes, spec.kernel)

    def _check(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != self.dims:
            raise InvalidInputError(
                f"stage {self.stage_index} critic expects (N, 3, {self.dims[0]}, {self.dims[1]}), "
                f"got {tuple(x.shape)}"
            )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check(x)
        h = self.trunk(x)
        return self.source_head(h), self.class_head(h).mean(dim=(2, 3))

    def score(self, x: torch.Tensor) -> torch.Tensor:
        """Source map only; skips the class branch."""
        self._check(x)
        return self.source_head(self.trunk(x))


def init_generator(
    spec: ConvBlockSpec,
    seed: int,
    stage_dims: Sequence[Sequence[int]],
    window: int = 3,
    lr_stage_scale: float = 0.5,
) -> Generator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        return Generator(spec, stage_dims, window=window, lr_stage_scale=lr_stage_scale)


def grow(gen: Generator) -> Generator:
    return gen.grow()


def generator_forward(gen: Generator, noise, upto_stage: int) -> torch.Tensor:
    return gen(noise, upto_stage)


def init_discriminator(
    spec: ConvBlockSpec,
    k: int,
    stage_index: int,
    dims: Sequence[int],
    prev: Optional[Discriminator] = None,
    seed: int = 0,
) -> Discriminator:
    """Fresh critic for one stage; the trunk is copied from ``prev`` when given."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) * 1009 + stage_index)
        disc = Discriminator(spec, k, stage_index, dims)
    if prev is not None:
        disc.trunk.load_state_dict(prev.trunk.state_dict())
    return disc


def discriminator_forward(disc: Discriminator, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return disc(image)
