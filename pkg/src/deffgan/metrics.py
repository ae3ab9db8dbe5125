"""Sampling and few-shot evaluation: SIFID, FID, LPIPS-style distances, pixel diversity.

Feature extractors are pluggable.  ``RandomProjectionExtractor`` is built in
and fully offline; its absolute scores are not comparable with numbers
produced by pretrained backbones, which is why every report records the
extractor it used.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F

from .errors import InvalidInputError

COV_EPS = 1e-6
FID_CAVEAT = (
    "FID over a handful of real images is unstable; compare only runs with "
    "the same inputs, sample count and extractor."
)


def _as_batch(images) -> torch.Tensor:
    if torch.is_tensor(images):
        return images if images.ndim == 4 else images.unsqueeze(0)
    return torch.stack(list(images))


class FeatureExtractor:
    """Maps ``(N, 3, H, W)`` images in ``[-1, 1]`` to named feature maps."""

    name: str = "abstract"
    layers: tuple[str, ...] = ()
    earliest_layer: str = ""
    pooled_layer: str = ""

    def feature_maps(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        raise NotImplementedError

    def features(self, images: torch.Tensor, layer: str) -> torch.Tensor:
        return self.feature_maps(images)[layer]

    @torch.no_grad()
    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """LPIPS-style distance per pair, uniform weights across layers.

        Features are unit-normalised along channels, squared differences
        are averaged spatially and summed over layers.
        """
        a, b = _as_batch(a), _as_batch(b)
        if a.shape != b.shape:
            raise InvalidInputError(f"distance needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
        fa, fb = self.feature_maps(a), self.feature_maps(b)
        total = torch.zeros(a.shape[0], dtype=torch.float64)
        for layer in self.layers:
            xa = _unit(fa[layer].double())
            xb = _unit(fb[layer].double())
            total += ((xa - xb) ** 2).sum(dim=1).mean(dim=(1, 2))
        return total


def _unit(x: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return x / (x.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


class RandomProjectionExtractor(FeatureExtractor):
    """Three fixed random conv layers with He-normal weights and ReLU.

    The first layer keeps full resolution (used for SIFID); the next two
    halve it.  Weights depend only on ``seed``.
    """

    layers = ("conv1", "conv2", "conv3")
    earliest_layer = "conv1"
    pooled_layer = "conv3"

    def __init__(self, seed: int = 0, channels: Sequence[int] = (32, 64, 128)):
        self.seed = seed
        self.channels = tuple(channels)
        self.name = f"random-projection(seed={seed},channels={'-'.join(map(str, self.channels))})"
        g = torch.Generator().manual_seed(seed)
        self.weights = []
        cin = 3
        for cout in self.channels:
            std = (2.0 / (cin * 9)) ** 0.5
            self.weights.append(torch.randn(cout, cin, 3, 3, generator=g) * std)
            cin = cout

    @torch.no_grad()
    def feature_maps(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        x = _as_batch(images).float()
        out = {}
        for i, (w, tag) in enumerate(zip(self.weights, self.layers)):
            x = F.relu(F.conv2d(x, w, stride=1 if i == 0 else 2, padding=1))
            out[tag] = x
        return out


class VGGExtractor(FeatureExtractor):
    """Pretrained VGG16 backbone for numbers closer to published LPIPS/SIFID.

    Weights come from the torchvision cache under ``$DEFFGAN_CACHE`` (or the
    default torch hub directory) and are downloaded on first use when the
    network allows it.
    """

    name = "vgg16-imagenet"
    layers = ("relu1_2", "relu2_2", "relu3_3", "relu4_3", "relu5_3")
    earliest_layer = "relu1_2"
    pooled_layer = "relu5_3"
    _cuts = (4, 9, 16, 23, 30)

    def __init__(self):
        from torchvision.models import VGG16_Weights, vgg16

        cache = os.environ.get("DEFFGAN_CACHE")
        if cache:
            torch.hub.set_dir(cache)
        self.net = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features.eval()
        self.mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        self.std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    @torch.no_grad()
    def feature_maps(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        x = ((_as_batch(images).float() + 1) / 2 - self.mean) / self.std
        out, start = {}, 0
        for tag, cut in zip(self.layers, self._cuts):
            x = self.net[start:cut](x)
            out[tag] = x
            start = cut
        return out


EXTRACTORS = {"random": RandomProjectionExtractor, "vgg": VGGExtractor}


def get_extractor(name: str = "random") -> FeatureExtractor:
    if name not in EXTRACTORS:
        raise InvalidInputError(f"unknown extractor {name!r}; choose from {sorted(EXTRACTORS)}")
    return EXTRACTORS[name]()


class GaussianAccumulator:
    """Running mean/covariance in float64, folded sequentially."""

    def __init__(self, dim: int):
        self.n = 0
        self.total = np.zeros(dim)
        self.outer = np.zeros((dim, dim))

    def add(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        self.n += rows.shape[0]
        self.total += rows.sum(axis=0)
        self.outer += rows.T @ rows

    def stats(self) -> tuple[np.ndarray, np.ndarray]:
        if self.n == 0:
            raise InvalidInputError("no feature vectors accumulated")
        mu = self.total / self.n
        if self.n < 2:
            return mu, np.zeros_like(self.outer)
        cov = (self.outer - self.n * np.outer(mu, mu)) / (self.n - 1)
        return mu, (cov + cov.T) / 2


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    acc = GaussianAccumulator(features.shape[1])
    acc.add(features)
    return acc.stats()


def matrix_sqrt(a: np.ndarray) -> np.ndarray:
    """Principal square root via Schur decomposition, imaginary noise dropped."""
    root = scipy.linalg.sqrtm(np.asarray(a, dtype=np.float64))
    return np.real(root)


def _is_degenerate(cov: np.ndarray) -> bool:
    w = np.linalg.eigvalsh(cov)
    return bool(w.min() <= 1e-12 * max(w.max(), 0.0))


def frechet_distance(mu1, cov1, mu2, cov2, eps: float = COV_EPS) -> tuple[float, bool]:
    """Squared Fréchet distance between two Gaussians.

    ``Tr((S1 S2)^(1/2))`` is evaluated as the trace of the root of the
    symmetric matrix ``S1^(1/2) S2 S1^(1/2)``, which has the same spectrum.
    When either covariance is singular, ``eps * I`` is added to both; the
    second return value reports whether that happened.
    """
    mu1, mu2 = np.asarray(mu1, np.float64), np.asarray(mu2, np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    regularized = _is_degenerate(cov1) or _is_degenerate(cov2)
    if regularized:
        eye = np.eye(cov1.shape[0]) * eps
        cov1, cov2 = cov1 + eye, cov2 + eye
    root1 = matrix_sqrt(cov1)
    inner = root1 @ cov2 @ root1
    inner = (inner + inner.T) / 2
    tr_covmean = np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)).sum()
    diff = mu1 - mu2
    d = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_covmean)
    return max(d, 0.0), regularized


def _spatial_rows(fmap: torch.Tensor) -> np.ndarray:
    """``(N, C, h, w)`` map to ``(N*h*w, C)`` rows."""
    return fmap.double().permute(0, 2, 3, 1).reshape(-1, fmap.shape[1]).numpy()


def sifid(input_image: torch.Tensor, generated, extractor: FeatureExtractor,
          layer: Optional[str] = None, chunk: int = 16) -> tuple[float, bool]:
    """Fréchet distance between the patch-feature statistics of one real image
    and those pooled over all generated images."""
    layer = layer or extractor.earliest_layer
    real = extractor.features(_as_batch(input_image), layer)
    mu_r, cov_r = gaussian_stats(_spatial_rows(real))
    gen = _as_batch(generated)
    if gen.shape[0] == 0:
        raise InvalidInputError("sifid needs at least one generated image")
    acc = GaussianAccumulator(real.shape[1])
    for i in range(0, gen.shape[0], chunk):
        acc.add(_spatial_rows(extractor.features(gen[i:i + chunk], layer)))
    mu_g, cov_g = acc.stats()
    return frechet_distance(mu_r, cov_r, mu_g, cov_g)


def pooled_features(images, extractor: FeatureExtractor, layer: Optional[str] = None,
                    chunk: int = 16) -> np.ndarray:
    layer = layer or extractor.pooled_layer
    batch = _as_batch(images)
    rows = [extractor.features(batch[i:i + chunk], layer).double().mean(dim=(2, 3)).numpy()
            for i in range(0, batch.shape[0], chunk)]
    return np.concatenate(rows)


def fid(real_set, generated, extractor: FeatureExtractor, layer: Optional[str] = None) -> tuple[float, bool]:
    fr = pooled_features(real_set, extractor, layer)
    fg = pooled_features(generated, extractor, layer)
    return frechet_distance(*gaussian_stats(fr), *gaussian_stats(fg))


def pixel_diversity(images) -> float:
    """Mean RMS pixel distance over all unordered pairs."""
    x = _as_batch(images).double().reshape(len(images), -1)
    n, d = x.shape
    if n < 2:
        return 0.0
    return float((F.pdist(x) / d ** 0.5).mean())


def consecutive_pairs(n: int, seed: int = 0) -> list[tuple[int, int]]:
    perm = np.random.default_rng(seed).permutation(n)
    return [(int(perm[i]), int(perm[i + 1])) for i in range(n - 1)]


def lpips_diversity(images, extractor: FeatureExtractor, seed: int = 0) -> float:
    """Mean perceptual distance between consecutive images of a fixed shuffle."""
    batch = _as_batch(images)
    if batch.shape[0] < 2:
        raise InvalidInputError("lpips_diversity needs at least two images")
    pairs = consecutive_pairs(batch.shape[0], seed)
    a = batch[[p[0] for p in pairs]]
    b = batch[[p[1] for p in pairs]]
    return float(extractor.distance(a, b).mean())


def _match_dims(images: torch.Tensor, dims) -> torch.Tensor:
    if tuple(images.shape[-2:]) == tuple(dims):
        return images
    return F.interpolate(images, size=tuple(dims), mode="bilinear", align_corners=False)


def lpips_per_input(input_image: torch.Tensor, generated, extractor: FeatureExtractor) -> float:
    gen = _as_batch(generated)
    if gen.shape[0] == 0:
        raise InvalidInputError("lpips_per_input needs generated images")
    ref = _as_batch(input_image)
    gen = _match_dims(gen, ref.shape[-2:])
    return float(extractor.distance(ref.expand_as(gen), gen).mean())


@torch.no_grad()
def sample(checkpoint, n: int, seed: int = 0, batch_size: int = 16) -> list[torch.Tensor]:
    """``n`` images at the checkpoint's final trained stage from i.i.d. coarse noise."""
    if n <= 0:
        return []
    gen = checkpoint.build_generator() if hasattr(checkpoint, "build_generator") else checkpoint
    gen.eval()
    h0, w0 = gen.stage_dims[0]
    rng = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(n, 3, h0, w0, generator=rng)
    out = []
    for i in range(0, n, batch_size):
        out.extend(gen(noise[i:i + batch_size]).unbind(0))
    return out


@dataclass
class MetricReport:
    extractor: str
    sample_count: int
    metrics: dict = field(default_factory=dict)
    per_input: list = field(default_factory=list)
    layers: dict = field(default_factory=dict)
    config_hash: str = ""
    notes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath = out / "metrics.json"
        jpath.write_text(self.to_json() + "\n", encoding="utf-8")
        cpath = out / "per_input.csv"
        cols = ["input"] + sorted({k for row in self.per_input for k in row} - {"input"})
        with open(cpath, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.per_input:
                w.writerow(row)
        return jpath, cpath


METRIC_NAMES = ("sifid", "lpips", "fid", "diversity")


def evaluate(
    real_images: Sequence[torch.Tensor],
    generated: Sequence[torch.Tensor],
    metrics: Iterable[str] = ("sifid", "lpips", "fid"),
    extractor: Optional[FeatureExtractor] = None,
    input_names: Optional[Sequence[str]] = None,
    config_hash: str = "",
    seed: int = 0,
) -> MetricReport:
    metrics = list(metrics)
    unknown = [m for m in metrics if m not in METRIC_NAMES]
    if unknown:
        raise InvalidInputError(f"unknown metric(s): {unknown}; choose from {list(METRIC_NAMES)}")
    extractor = extractor or RandomProjectionExtractor()
    names = list(input_names) if input_names is not None else [f"input_{i}" for i in range(len(real_images))]
    report = MetricReport(extractor=extractor.name, sample_count=len(generated), config_hash=config_hash)
    rows = [{"input": name} for name in names]

    if "sifid" in metrics:
        vals = []
        for row, img in zip(rows, real_images):
            v, reg = sifid(img, generated, extractor)
            row["sifid"] = v
            vals.append(v)
            if reg:
                report.notes.append(f"sifid[{row['input']}]: covariance regularised with eps={COV_EPS}")
        report.metrics["sifid_mean"] = float(np.mean(vals))
        report.layers["sifid"] = extractor.earliest_layer
    if "lpips" in metrics:
        vals = []
        for row, img in zip(rows, real_images):
            v = lpips_per_input(img, generated, extractor)
            row["lpips"] = v
            vals.append(v)
        report.metrics["lpips_per_input_mean"] = float(np.mean(vals))
        if len(generated) >= 2:
            report.metrics["lpips_diversity"] = lpips_diversity(generated, extractor, seed)
        report.layers["lpips"] = ",".join(extractor.layers)
    if "fid" in metrics:
        ref_dims = real_images[0].shape[-2:]
        v, reg = fid(torch.stack(list(real_images)), _match_dims(_as_batch(generated), ref_dims), extractor)
        report.metrics["fid"] = v
        report.layers["fid"] = extractor.pooled_layer
        report.notes.append(FID_CAVEAT)
        if reg:
            report.notes.append(f"fid: covariance regularised with eps={COV_EPS}")
    if "diversity" in metrics:
        report.metrics["pixel_diversity"] = pixel_diversity(generated)
    report.per_input = rows
    return report
