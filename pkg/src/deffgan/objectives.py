"""Loss terms, WGAN-GP penalty, random fake labels and differentiable augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .errors import InvalidInputError, NumericError

TRANSFORMS = ("color", "translation", "cutout")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0
    gp_lambda: float = 10.0
    classifier_weight: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "gp_lambda", "classifier_weight"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be >= 0")


@dataclass(frozen=True)
class AugmentPolicy:
    transforms: tuple[str, ...] = ("color",)
    brightness: tuple[float, float] = (-0.5, 0.5)
    saturation: tuple[float, float] = (0.0, 2.0)
    contrast: tuple[float, float] = (0.5, 1.5)
    translation_ratio: float = 0.125
    cutout_ratio: float = 0.5
    shared_draw: bool = True

    def __post_init__(self):
        unknown = set(self.transforms) - set(TRANSFORMS)
        if unknown:
            raise InvalidInputError(f"unknown augmentation(s): {sorted(unknown)}")

    @classmethod
    def parse(cls, text: str, shared_draw: bool = True) -> "AugmentPolicy":
        """Build from a comma list such as ``"color"`` or ``"color,translation"``.

        An empty string or ``"none"`` disables augmentation.
        """
        names = [t.strip() for t in text.split(",") if t.strip() and t.strip() != "none"]
        return cls(transforms=tuple(names), shared_draw=shared_draw)

    @property
    def enabled(self) -> bool:
        return bool(self.transforms)


@dataclass
class ColorDraw:
    """Per-call colour parameters; each tensor broadcasts over ``(N, C, H, W)``."""

    brightness: torch.Tensor
    saturation: torch.Tensor
    contrast: torch.Tensor

    @classmethod
    def identity(cls) -> "ColorDraw":
        return cls(torch.zeros(1, 1, 1, 1), torch.ones(1, 1, 1, 1), torch.ones(1, 1, 1, 1))


def _uniform(lo_hi, n, rng, dtype) -> torch.Tensor:
    lo, hi = lo_hi
    return lo + (hi - lo) * torch.rand(n, 1, 1, 1, generator=rng, dtype=dtype)


def draw_color(policy: AugmentPolicy, n: int, rng: torch.Generator, dtype=torch.float32) -> ColorDraw:
    m = 1 if policy.shared_draw else n
    return ColorDraw(
        brightness=_uniform(policy.brightness, m, rng, dtype),
        saturation=_uniform(policy.saturation, m, rng, dtype),
        contrast=_uniform(policy.contrast, m, rng, dtype),
    )


def apply_color(x: torch.Tensor, draw: ColorDraw) -> torch.Tensor:
    x = x + draw.brightness.to(x)
    mean_c = x.mean(dim=1, keepdim=True)
    x = (x - mean_c) * draw.saturation.to(x) + mean_c
    mean_all = x.mean(dim=(1, 2, 3), keepdim=True)
    return (x - mean_all) * draw.contrast.to(x) + mean_all


def _translate(x: torch.Tensor, ratio: float, rng: torch.Generator, shared: bool) -> torch.Tensor:
    n, _, h, w = x.shape
    sh, sw = int(h * ratio + 0.5), int(w * ratio + 0.5)
    m = 1 if shared else n
    ty = torch.randint(-sh, sh + 1, (m,), generator=rng).expand(n)
    tx = torch.randint(-sw, sw + 1, (m,), generator=rng).expand(n)
    rows = (torch.arange(h)[None, :] + ty[:, None] + 1).clamp(0, h + 1)
    cols = (torch.arange(w)[None, :] + tx[:, None] + 1).clamp(0, w + 1)
    padded = F.pad(x, [1, 1, 1, 1])
    idx_r = rows[:, None, :, None].expand(n, x.shape[1], h, w + 2)
    out = padded.gather(2, idx_r)
    idx_c = cols[:, None, None, :].expand(n, x.shape[1], h, w)
    return out.gather(3, idx_c)


def _cutout(x: torch.Tensor, ratio: float, rng: torch.Generator, shared: bool) -> torch.Tensor:
    n, _, h, w = x.shape
    ch, cw = int(h * ratio + 0.5), int(w * ratio + 0.5)
    m = 1 if shared else n
    oy = torch.randint(0, h + (1 - ch % 2), (m,), generator=rng).expand(n)
    ox = torch.randint(0, w + (1 - cw % 2), (m,), generator=rng).expand(n)
    ys = torch.arange(h)[None, :]
    xs = torch.arange(w)[None, :]
    in_y = (ys >= (oy - ch // 2)[:, None]) & (ys < (oy - ch // 2 + ch)[:, None])
    in_x = (xs >= (ox - cw // 2)[:, None]) & (xs < (ox - cw // 2 + cw)[:, None])
    mask = ~(in_y[:, :, None] & in_x[:, None, :])
    return x * mask[:, None].to(x.dtype)


def diff_augment(
    batch: torch.Tensor,
    policy: AugmentPolicy,
    rng: torch.Generator,
    color: Optional[ColorDraw] = None,
) -> torch.Tensor:
    """Differentiable augmentation of an ``(N, 3, H, W)`` batch.

    With ``policy.shared_draw`` one parameter draw covers every image in the
    call, so reals and fakes concatenated into one batch see the same
    transform.  Output is not clamped.
    """
    x = batch
    for name in policy.transforms:
        if name == "color":
            x = apply_color(x, color if color is not None else draw_color(policy, x.shape[0], rng, x.dtype))
        elif name == "translation":
            x = _translate(x, policy.translation_ratio, rng, policy.shared_draw)
        elif name == "cutout":
            x = _cutout(x, policy.cutout_ratio, rng, policy.shared_draw)
    return x


def reconstruction_loss(gen_image: torch.Tensor, real_image: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every pixel and channel."""
    if gen_image.shape != real_image.shape:
        raise InvalidInputError(f"shape mismatch {tuple(gen_image.shape)} vs {tuple(real_image.shape)}")
    return F.mse_loss(gen_image, real_image, reduction="mean")


def _source(disc: Callable, x: torch.Tensor) -> torch.Tensor:
    if hasattr(disc, "score"):
        return disc.score(x)
    out = disc(x)
    return out[0] if isinstance(out, tuple) else out


def gradient_penalty(
    critic: Callable,
    real_batch: torch.Tensor,
    fake_batch: torch.Tensor,
    rng: Optional[torch.Generator] = None,
    eps: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """WGAN-GP penalty on real/fake interpolates.

    ``x_hat`` mixes each real/fake pair with its own ``eps ~ U(0, 1)``.  Each
    of the ``P`` patch scores a sample produces is treated as one critic, so
    the penalised norm is ``||grad sum(critic(x_hat))|| / sqrt(P)``.  With
    disjoint receptive fields that is the RMS of the per-patch gradient
    norms; with a single score it is plain WGAN-GP.  The result keeps its
    graph so it can be backpropagated.
    """
    if real_batch.shape != fake_batch.shape:
        raise InvalidInputError(
            f"real and fake batches differ: {tuple(real_batch.shape)} vs {tuple(fake_batch.shape)}"
        )
    n = real_batch.shape[0]
    if eps is None:
        eps = torch.rand(n, generator=rng, dtype=real_batch.dtype)
    eps = eps.reshape(n, *([1] * (real_batch.ndim - 1))).to(real_batch)
    x_hat = (eps * real_batch + (1 - eps) * fake_batch).detach().requires_grad_(True)
    out = _source(critic, x_hat).reshape(n, -1)
    patches = out.shape[1]
    (grads,) = torch.autograd.grad(out.mean(dim=1).sum(), x_hat, create_graph=True)
    if not torch.isfinite(grads).all():
        raise NumericError("non-finite critic gradient in gradient penalty")
    norms = grads.reshape(n, -1).norm(2, dim=1) * patches ** 0.5
    return ((norms - 1.0) ** 2).mean()


def wasserstein_term(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return fake_scores.mean() - real_scores.mean()


@dataclass
class CriticTerms:
    wasserstein: torch.Tensor
    gp: torch.Tensor
    real_logits: Optional[torch.Tensor] = None
    fake_logits: Optional[torch.Tensor] = None
    gp_lambda: float = 10.0
    extras: dict = field(default_factory=dict)

    @property
    def total(self) -> torch.Tensor:
        return self.wasserstein + self.gp_lambda * self.gp


def augment_pair(real, fake, augment: Optional[AugmentPolicy], rng):
    """Apply one augmentation call to reals and fakes together."""
    if augment is None or not augment.enabled:
        return real, fake
    both = diff_augment(torch.cat([real, fake]), augment, rng)
    return both[: real.shape[0]], both[real.shape[0]:]


def critic_terms(
    disc,
    real_batch: torch.Tensor,
    fake_batch: torch.Tensor,
    weights: LossWeights,
    augment: Optional[AugmentPolicy] = None,
    rng: Optional[torch.Generator] = None,
) -> CriticTerms:
    fake_batch = fake_batch.detach()
    real, fake = augment_pair(real_batch, fake_batch, augment, rng)
    out_r, out_f = disc(real), disc(fake)
    if isinstance(out_r, tuple):
        (src_r, logit_r), (src_f, logit_f) = out_r, out_f
    else:
        src_r, src_f, logit_r, logit_f = out_r, out_f, None, None
    gp = gradient_penalty(disc, real, fake, rng)
    return CriticTerms(
        wasserstein=wasserstein_term(src_r, src_f),
        gp=gp,
        real_logits=logit_r,
        fake_logits=logit_f,
        gp_lambda=weights.gp_lambda,
    )


def critic_loss(disc, real_batch, fake_batch, weights: LossWeights, augment=None, rng=None) -> torch.Tensor:
    """``mean(D(fake)) - mean(D(real)) + gp_lambda * GP`` with fakes detached."""
    return critic_terms(disc, real_batch, fake_batch, weights, augment, rng).total


def generator_adv_loss(disc, fake_batch: torch.Tensor, augment=None, rng=None) -> torch.Tensor:
    if augment is not None and augment.enabled:
        fake_batch = diff_augment(fake_batch, augment, rng)
    return -_source(disc, fake_batch).mean()


def generator_objective(adv: torch.Tensor, rec: torch.Tensor, alpha: float) -> torch.Tensor:
    return adv + alpha * rec


def class_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    k = logits.shape[-1]
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise InvalidInputError(f"labels must lie in [0, {k}), got {labels.tolist()}")
    return F.cross_entropy(logits, labels, reduction="mean")


def assign_fake_labels(batch_size: int, k: int, rng: torch.Generator) -> torch.Tensor:
    """I.i.d. uniform class labels for generated images."""
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    return torch.randint(0, k, (batch_size,), generator=rng)
