"""Image loading, multi-scale pyramids and fixed coarse-scale noise.

Images are held as float32 tensors of shape ``(3, H, W)`` with values in
``[-1, 1]``.  Stage 0 is the coarsest level of a pyramid.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import ImageFormatError, InvalidInputError, InvalidSpecError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

Dims = tuple[int, int]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def tensor_fingerprint(t: torch.Tensor) -> str:
    """sha256 over the raw bytes of a tensor (dtype and shape included)."""
    arr = t.detach().cpu().contiguous().numpy()
    h = hashlib.sha256()
    h.update(str((arr.dtype, arr.shape)).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class ImageSample:
    pixels: torch.Tensor
    class_id: int = 0
    source_path: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise InvalidInputError(f"expected (3, H, W) pixels, got {tuple(self.pixels.shape)}")
        if self.pixels.numel() and (self.pixels.min() < -1 or self.pixels.max() > 1):
            raise InvalidInputError("pixel values must lie in [-1, 1]")
        if self.class_id < 0:
            raise InvalidInputError(f"class_id must be >= 0, got {self.class_id}")

    @property
    def dims(self) -> Dims:
        return (int(self.pixels.shape[1]), int(self.pixels.shape[2]))


@dataclass(frozen=True)
class PyramidSpec:
    num_stages: int
    coarsest_max_dim: int
    final_dims: Dims
    stage_dims: tuple[Dims, ...]
    scale_ratio: float

    def to_dict(self) -> dict:
        return {
            "num_stages": self.num_stages,
            "coarsest_max_dim": self.coarsest_max_dim,
            "final_dims": list(self.final_dims),
            "stage_dims": [list(d) for d in self.stage_dims],
            "scale_ratio": self.scale_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PyramidSpec":
        return cls(
            num_stages=int(d["num_stages"]),
            coarsest_max_dim=int(d["coarsest_max_dim"]),
            final_dims=tuple(d["final_dims"]),
            stage_dims=tuple(tuple(s) for s in d["stage_dims"]),
            scale_ratio=float(d["scale_ratio"]),
        )


@dataclass(frozen=True)
class ImagePyramid:
    levels: tuple[torch.Tensor, ...]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, stage: int) -> torch.Tensor:
        return self.levels[stage]


@dataclass(frozen=True)
class NoiseMap:
    data: torch.Tensor
    owner_image: int
    fixed: bool = True
    _digest: str = field(default="", compare=False, repr=False)

    def fingerprint(self) -> str:
        return tensor_fingerprint(self.data)

    def is_intact(self) -> bool:
        """True while the map still matches the content it was created with."""
        return not self._digest or self._digest == self.fingerprint()


def load_image(path, final_max_dim: int, class_id: int = 0) -> ImageSample:
    """Read an RGB raster and scale its longest side to ``final_max_dim``.

    Pixels are mapped linearly from ``[0, 255]`` to ``[-1, 1]``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path} is not a decodable image") from exc

    w, h = img.size
    longest = max(h, w)
    if longest != final_max_dim:
        scale = final_max_dim / longest
        new_w = max(1, _round_half_up(w * scale))
        new_h = max(1, _round_half_up(h * scale))
        resample = Image.Resampling.BOX if scale < 1 else Image.Resampling.BILINEAR
        img = img.resize((new_w, new_h), resample=resample)

    arr = np.asarray(img, dtype=np.float32)
    pixels = torch.from_numpy(arr / 127.5 - 1.0).permute(2, 0, 1).contiguous()
    return ImageSample(pixels=pixels.clamp_(-1.0, 1.0), class_id=class_id, source_path=str(path))


def discover_images(directory) -> tuple[list[tuple[Path, int]], list[str]]:
    """List image files under ``directory`` with their class ids.

    When the directory has subdirectories, each one is a class and holds the
    images of that class.  Otherwise every file is its own class.  Classes
    are numbered in sorted-name order.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory not found: {directory}")

    def images_in(d: Path) -> list[Path]:
        return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)

    subdirs = sorted(p for p in directory.iterdir() if p.is_dir())
    entries: list[tuple[Path, int]] = []
    names: list[str] = []
    if subdirs:
        for d in subdirs:
            files = images_in(d)
            if not files:
                continue
            cid = len(names)
            names.append(d.name)
            entries.extend((f, cid) for f in files)
    else:
        for cid, f in enumerate(images_in(directory)):
            names.append(f.name)
            entries.append((f, cid))
    return entries, names


def load_image_set(directory, final_max_dim: int) -> tuple[list[ImageSample], list[str]]:
    entries, names = discover_images(directory)
    samples = [load_image(p, final_max_dim, cid) for p, cid in entries]
    if samples:
        dims = {s.dims for s in samples}
        if len(dims) > 1:
            raise InvalidInputError(
                f"training images must share dimensions after resizing, got {sorted(dims)}"
            )
    return samples, names


def build_spec(final_dims: Sequence[int], num_stages: int, coarsest_max_dim: int) -> PyramidSpec:
    """Geometric stage sizes from ``coarsest_max_dim`` up to ``final_dims``.

    The longest side of stage ``i`` is
    ``round(coarsest * (final / coarsest) ** (i / N))`` with ``N = num_stages - 1``;
    the shorter side follows the final aspect ratio.
    """
    final_h, final_w = (int(v) for v in final_dims)
    final_max = max(final_h, final_w)
    if num_stages < 2:
        raise InvalidSpecError(f"num_stages must be >= 2, got {num_stages}")
    if coarsest_max_dim < 1 or coarsest_max_dim >= final_max:
        raise InvalidSpecError(
            f"coarsest_max_dim ({coarsest_max_dim}) must be in [1, {final_max})"
        )

    n = num_stages - 1
    growth = final_max / coarsest_max_dim
    dims: list[Dims] = []
    for i in range(num_stages):
        if i == n:
            dims.append((final_h, final_w))
            continue
        d = coarsest_max_dim if i == 0 else _round_half_up(coarsest_max_dim * growth ** (i / n))
        if final_h >= final_w:
            dims.append((d, max(1, _round_half_up(d * final_w / final_h))))
        else:
            dims.append((max(1, _round_half_up(d * final_h / final_w)), d))

    maxes = [max(d) for d in dims]
    if any(b <= a for a, b in zip(maxes, maxes[1:])):
        raise InvalidSpecError(
            f"{num_stages} stages between {coarsest_max_dim} and {final_max} px collide: {maxes}"
        )
    return PyramidSpec(
        num_stages=num_stages,
        coarsest_max_dim=coarsest_max_dim,
        final_dims=(final_h, final_w),
        stage_dims=tuple(dims),
        scale_ratio=(coarsest_max_dim / final_max) ** (1.0 / n),
    )


def _area_matrix(src: int, dst: int) -> np.ndarray:
    """Row ``i`` holds the fractional coverage of source cells by output cell ``i``."""
    edges = np.arange(dst + 1, dtype=np.float64) * (src / dst)
    lo, hi = edges[:-1, None], edges[1:, None]
    cells = np.arange(src, dtype=np.float64)[None, :]
    overlap = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0.0, None)
    return overlap / (src / dst)


def area_resize(image: torch.Tensor, dims: Sequence[int]) -> torch.Tensor:
    """Exact area-weighted downsampling of a ``(..., H, W)`` tensor."""
    h, w = int(dims[0]), int(dims[1])
    src_h, src_w = image.shape[-2:]
    if (h, w) == (src_h, src_w):
        return image.clone()
    if h > src_h or w > src_w:
        raise InvalidInputError(f"area_resize only shrinks: {(src_h, src_w)} -> {(h, w)}")
    rows = torch.from_numpy(_area_matrix(src_h, h))
    cols = torch.from_numpy(_area_matrix(src_w, w))
    out = rows @ image.to(torch.float64) @ cols.T
    return out.to(image.dtype)


def build_pyramid(image: ImageSample, spec: PyramidSpec) -> ImagePyramid:
    if image.dims != tuple(spec.final_dims):
        raise InvalidInputError(f"image dims {image.dims} != spec final dims {spec.final_dims}")
    levels = []
    for i, d in enumerate(spec.stage_dims):
        if i == spec.num_stages - 1:
            levels.append(image.pixels.clone())
        else:
            # resize from the original every time; cascading would compound blur
            levels.append(area_resize(image.pixels, d).clamp_(-1.0, 1.0))
    return ImagePyramid(levels=tuple(levels))


def make_fixed_noise(k: int, stage0_dims: Sequence[int], seed: int) -> list[NoiseMap]:
    if k < 1:
        raise InvalidInputError(f"need at least one noise map, got k={k}")
    gen = torch.Generator().manual_seed(int(seed))
    h, w = int(stage0_dims[0]), int(stage0_dims[1])
    maps = []
    for i in range(k):
        data = torch.randn(3, h, w, generator=gen)
        maps.append(NoiseMap(data=data, owner_image=i, fixed=True, _digest=tensor_fingerprint(data)))
    return maps


def upsample(x: torch.Tensor, target_dims: Sequence[int]) -> torch.Tensor:
    """Bilinear (corner-aligned) upsampling of ``(C, H, W)`` or ``(N, C, H, W)`` tensors.

    No noise is injected after upsampling.
    """
    h, w = int(target_dims[0]), int(target_dims[1])
    src_h, src_w = x.shape[-2:]
    if h < src_h or w < src_w:
        raise InvalidInputError(f"upsample cannot shrink {(src_h, src_w)} -> {(h, w)}")
    if (h, w) == (src_h, src_w):
        return x
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    out = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=True)
    return out.squeeze(0) if squeeze else out


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """``(3, H, W)`` tensor in ``[-1, 1]`` to an ``(H, W, 3)`` uint8 array."""
    arr = ((image.detach().cpu().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def save_png(image: torch.Tensor, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def save_grid(images: torch.Tensor, path, nrow: int = 8) -> None:
    from torchvision.utils import make_grid

    grid = make_grid(images.detach().cpu().clamp(-1, 1), nrow=nrow, padding=2, pad_value=1.0)
    save_png(grid, path)
