"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line.  Criterion 5
trains the desk-scale model (two 64x64 faces, five stages) and takes the
bulk of the runtime.
"""

import contextlib
import hashlib
import itertools
import json
import math
import time
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from conftest import face_samples
from deffgan import metrics as M
from deffgan.networks import parameter_fingerprint
from deffgan.objectives import class_loss, gradient_penalty, reconstruction_loss
from deffgan.pyramid import build_spec
from deffgan.trainer import (
    TrainConfig,
    TrainState,
    critic_step,
    generator_step,
    grow_state,
    load_checkpoint,
    run,
    train_images,
    train_stage,
)
from test_metrics import np_lpips

DESK = dict(num_stages=5, coarsest_max_dim=25, final_max_dim=64, iters_per_stage=500, filters=32,
            extended_final_iters=1.0, augment="none", final_samples=0, sample_every=500, checkpoint_every=0,
            seed=0)


@contextlib.contextmanager
def criterion(capsys, n, title):
    details = []
    ok = False
    try:
        yield details
        ok = True
    finally:
        with capsys.disabled():
            status = "PASS" if ok else "FAIL"
            extra = f" ({'; '.join(details)})" if details else ""
            print(f"\nACCEPTANCE {n} {status}: {title}{extra}")


def tiny(**kw):
    base = dict(num_stages=3, coarsest_max_dim=12, final_max_dim=24, iters_per_stage=20, filters=8,
                extended_final_iters=1.0, sample_every=0, checkpoint_every=0, final_samples=4, seed=11)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def faces24(tmp_path_factory):
    return face_samples(2, 24, tmp_path_factory.mktemp("a24"))


def _losses(path):
    out = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        rec.pop("time_s")
        out.append(rec)
    return out


def test_1_loss_oracles(capsys):
    rng = np.random.default_rng(1)
    with criterion(capsys, 1, "loss oracles within 1e-6") as info:
        worst = 0.0
        for _ in range(10):
            h, w = rng.integers(1, 17, size=2)
            a, b = rng.uniform(-1, 1, (2, 1, 3, h, w))
            mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
            worst = max(worst, abs(reconstruction_loss(torch.from_numpy(a), torch.from_numpy(b)).item() - mse))

            k = int(rng.integers(2, 5))
            logits, labels = rng.normal(size=(6, k)) * 2, rng.integers(0, k, 6)
            ce = np.mean([math.log(sum(math.exp(v) for v in row)) - row[y] for row, y in zip(logits, labels)])
            worst = max(worst, abs(class_loss(torch.from_numpy(logits), torch.from_numpy(labels)).item() - ce))

            imgs = rng.uniform(-1, 1, (int(rng.integers(2, 6)), 3, h, w))
            pairs = list(itertools.combinations(range(len(imgs)), 2))
            div = np.mean([math.sqrt(((imgs[i] - imgs[j]) ** 2).mean()) for i, j in pairs])
            worst = max(worst, abs(M.pixel_diversity(torch.from_numpy(imgs)) - div))

        ex = M.RandomProjectionExtractor(seed=2, channels=(4, 6, 8))
        a, b = rng.uniform(-1, 1, (2, 4, 3, 12, 16))
        got = ex.distance(torch.from_numpy(a), torch.from_numpy(b)).mean().item()
        worst = max(worst, abs(got - np.mean([np_lpips(ex, x, y) for x, y in zip(a, b)])))
        info.append(f"max abs error {worst:.2e}")
        assert worst < 1e-6


class _Linear(nn.Module):
    def __init__(self, c):
        super().__init__()
        w = torch.randn(3, 10, 10, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
        self.w, self.c = w / w.norm(), c

    def forward(self, x):
        return self.c * (x * self.w).flatten(1).sum(1, keepdim=True)


def test_2_gradient_penalty(capsys):
    with criterion(capsys, 2, "gradient penalty analytic and finite-difference") as info:
        real = torch.rand(3, 3, 10, 10, dtype=torch.float64)
        fake = torch.rand(3, 3, 10, 10, dtype=torch.float64)
        for c in (1.0, 2.0, 0.5):
            gp = gradient_penalty(_Linear(c), real, fake, rng=torch.Generator().manual_seed(0)).item()
            assert gp == pytest.approx((c - 1) ** 2, abs=1e-12)

        torch.manual_seed(0)
        critic = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.Softplus(), nn.Conv2d(4, 1, 3, padding=1)).double()
        eps = torch.tensor([0.2, 0.5, 0.9], dtype=torch.float64)
        params = list(critic.parameters())
        grads = torch.autograd.grad(gradient_penalty(critic, real, fake, eps=eps), params, allow_unused=True)
        worst, h = 0.0, 1e-6
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.data.view(-1)
            for idx in range(0, flat.numel(), max(1, flat.numel() // 6)):
                orig = flat[idx].item()
                flat[idx] = orig + h
                up = gradient_penalty(critic, real, fake, eps=eps).item()
                flat[idx] = orig - h
                down = gradient_penalty(critic, real, fake, eps=eps).item()
                flat[idx] = orig
                fd = (up - down) / (2 * h)
                worst = max(worst, abs(fd - g.reshape(-1)[idx].item()) / max(abs(fd), 1e-4))
        info.append(f"max relative FD error {worst:.2e}")
        assert worst < 1e-3


def test_3_frechet(capsys):
    rng = np.random.default_rng(3)
    with criterion(capsys, 3, "Frechet machinery") as info:
        ex = M.RandomProjectionExtractor()
        imgs = torch.rand(8, 3, 20, 20) * 2 - 1
        same_fid, same_sifid = M.fid(imgs, imgs.clone(), ex)[0], M.sifid(imgs[0], imgs[:1], ex)[0]
        assert same_fid < 1e-6 and same_sifid < 1e-6
        worst = 0.0
        for dim in (1, 8, 32, 64):
            a, b = rng.normal(size=(2, dim, dim + 5))
            c1, c2 = a @ a.T / dim, b @ b.T / dim
            m1, m2 = rng.normal(size=(2, dim))
            w, v = np.linalg.eigh(c1)
            r1 = (v * np.sqrt(w)) @ v.T
            tr = np.sqrt(np.clip(np.linalg.eigvalsh(r1 @ c2 @ r1), 0, None)).sum()
            expected = ((m1 - m2) ** 2).sum() + np.trace(c1) + np.trace(c2) - 2 * tr
            worst = max(worst, abs(M.frechet_distance(m1, c1, m2, c2)[0] - expected))
        info.append(f"identical FID {same_fid:.1e}, SIFID {same_sifid:.1e}; closed-form error {worst:.1e}")
        assert worst < 1e-4


def test_4_gradient_partition(capsys, faces24):
    with criterion(capsys, 4, "gradient-flow partition and frozen stages"):
        state = TrainState.create(faces24, tiny(concurrent_stages=2))
        g0, d0 = parameter_fingerprint(state.generator), parameter_fingerprint(state.discriminator)
        critic_step(state)
        assert parameter_fingerprint(state.generator) == g0
        d1 = parameter_fingerprint(state.discriminator)
        assert d1 != d0
        generator_step(state)
        assert parameter_fingerprint(state.discriminator) == d1
        assert parameter_fingerprint(state.generator) != g0

        train_stage(state)
        grow_state(state)
        train_stage(state)
        grow_state(state)
        frozen = [parameter_fingerprint(state.generator.stages[0]), parameter_fingerprint(state.generator.head)]
        train_stage(state)
        assert frozen == [parameter_fingerprint(state.generator.stages[0]),
                          parameter_fingerprint(state.generator.head)]


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    images = face_samples(2, 64, root)
    t0 = time.perf_counter()
    ckpt = train_images(images, TrainConfig(**DESK), run_dir=root / "run")
    return images, ckpt, time.perf_counter() - t0


@pytest.mark.slow
def test_5_desk_training(capsys, desk_run):
    images, ckpt, seconds = desk_run
    state = ckpt.restore()
    gen, disc = state.generator.eval(), state.discriminator.eval()
    with criterion(capsys, 5, "desk-scale training") as info:
        info.append(f"{seconds / 60:.1f} min")
        with torch.no_grad():
            recon = gen(state.fixed_noise_batch())
            rec = [F.mse_loss(recon[i], images[i].pixels).item() for i in range(2)]
            _, logits = disc(torch.stack([im.pixels for im in images]))
        acc = (logits.argmax(1) == torch.tensor([0, 1])).float().mean().item()
        div = M.pixel_diversity(M.sample(ckpt, 16, seed=1))
        samples = M.sample(ckpt, 100, seed=2)
        ex = M.RandomProjectionExtractor()
        sifids = [M.sifid(im.pixels, samples, ex)[0] for im in images]
        info.append("rec " + ", ".join(f"{v:.4f}" for v in rec))
        info.append(f"class acc {acc:.0%}")
        info.append(f"pixel diversity {div:.4f}")
        info.append("sifid " + ", ".join(f"{v:.3f}" for v in sifids))
        assert max(rec) < 0.05
        assert acc == 1.0
        assert div > 0.01
        assert max(sifids) < 1.0


def test_6_determinism(capsys, faces24, tmp_path):
    with criterion(capsys, 6, "determinism and resume") as info:
        cfg = tiny()
        for name in ("a", "b"):
            run(TrainState.create(faces24, cfg), tmp_path / name)
        la, lb = _losses(tmp_path / "a" / "log.jsonl"), _losses(tmp_path / "b" / "log.jsonl")
        assert len(la) >= 100 and la == lb

        def digests(d):
            return [hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted((d / "final_samples").glob("*.png"))]

        assert digests(tmp_path / "a") and digests(tmp_path / "a") == digests(tmp_path / "b")
        info.append(f"{len(la)} identical log records")

        cfg = tiny(final_samples=0)
        whole = TrainState.create(faces24, cfg)
        run(whole, tmp_path / "whole", max_iterations=30)
        part = TrainState.create(faces24, cfg)
        run(part, tmp_path / "part", max_iterations=15)
        part.to_checkpoint().save(tmp_path / "mid.ckpt")
        resumed = load_checkpoint(tmp_path / "mid.ckpt").restore()
        run(resumed, tmp_path / "part", max_iterations=15)
        assert _losses(tmp_path / "whole" / "log.jsonl") == _losses(tmp_path / "part" / "log.jsonl")
        assert parameter_fingerprint(whole.generator) == parameter_fingerprint(resumed.generator)
        info.append("resume matches unbroken run over 15 iterations")


def test_7_scheduler(capsys, faces24, tmp_path):
    with criterion(capsys, 7, "step scheduler milestone from log") as info:
        cfg = tiny(iters_per_stage=7, final_samples=0)
        run(TrainState.create(faces24, cfg), tmp_path)
        records = _losses(tmp_path / "log.jsonl")
        expected = math.floor(0.8 * 2 * 7)
        for stage in range(cfg.num_stages):
            rows = [r for r in records if r["stage"] == stage]
            sched = [r["schedule"] for r in rows]
            first = next(i for i, r in enumerate(rows) if r["schedule"] != 1.0)
            assert rows[first]["iter"] == expected
            assert set(sched[:first]) == {1.0}
            assert all(s == pytest.approx(0.1) for s in sched[first:])
            assert rows[first]["lr_g"] == pytest.approx(0.1 * rows[first - 1]["lr_g"])
        info.append(f"milestone at iteration {expected} of {2 * 7} in every stage")


def test_8_pyramid(capsys):
    def half_up(x):
        return int(Decimal(repr(x)).quantize(0, rounding=ROUND_HALF_UP))

    with criterion(capsys, 8, "pyramid endpoints, monotonicity, aspect") as info:
        spec = build_spec((256, 256), 6, 25)
        assert [max(d) for d in spec.stage_dims] == [half_up(25 * (256 / 25) ** (i / 5)) for i in range(6)]
        checked = 0
        for h, w, n, c in [(188, 256, 6, 25), (256, 188, 6, 25), (100, 300, 8, 20), (64, 64, 5, 25), (97, 61, 4, 16)]:
            dims = build_spec((h, w), n, c).stage_dims
            assert max(dims[0]) == c and dims[-1] == (h, w)
            maxes = [max(d) for d in dims]
            assert all(b > a for a, b in zip(maxes, maxes[1:]))
            assert all(abs(sh * w - sw * h) <= max(h, w) for sh, sw in dims)
            checked += 1
        info.append(f"{checked} shapes")
