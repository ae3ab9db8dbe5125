"""Stage-wise progressive training with whole-set critic batches.

Each stage runs ``k * iters_per_stage`` iterations (``k`` input images); the
last two stages are stretched by ``extended_final_iters``.  One iteration is
``critic_iters`` discriminator updates followed by a single generator update.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import torch

from .errors import CheckpointError, ConfigError, InvalidInputError, NumericError, TrainingDivergedError
from .networks import (
    ConvBlockSpec,
    Discriminator,
    Generator,
    init_discriminator,
    init_generator,
)
from .objectives import (
    AugmentPolicy,
    LossWeights,
    assign_fake_labels,
    class_loss,
    critic_terms,
    generator_adv_loss,
    reconstruction_loss,
)
from .pyramid import (
    ImagePyramid,
    ImageSample,
    NoiseMap,
    PyramidSpec,
    build_pyramid,
    build_spec,
    load_image_set,
    make_fixed_noise,
    save_grid,
    tensor_fingerprint,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PREVIEW_SAMPLES = 16


@dataclass
class TrainConfig:
    num_stages: int = 6
    coarsest_max_dim: int = 25
    final_max_dim: int = 256
    iters_per_stage: int = 2000
    extended_final_iters: float = 2.0
    lr_generator: float = 0.0005
    lr_discriminator: float = 0.00025
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    critic_iters: int = 3
    concurrent_stages: int = 3
    lr_stage_scale: float = 0.5
    scheduler_gamma: float = 0.1
    milestone_fraction: float = 0.8
    alpha: float = 10.0
    gp_lambda: float = 10.0
    classifier_weight: float = 1.0
    filters: int = 64
    layers_per_stage: int = 3
    seed: int = 0
    augment: str = "color"
    shared_augment_draw: bool = True
    # both off reproduces the single-image baseline that collapses on k > 1 inputs
    whole_set_batching: bool = True
    class_head: bool = True
    sample_every: int = 500
    checkpoint_every: int = 500
    final_samples: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(key, ok, msg):
            if not ok:
                raise ConfigError(key, msg)

        need("num_stages", self.num_stages >= 2, "must be >= 2")
        need("coarsest_max_dim", self.coarsest_max_dim >= 1, "must be >= 1")
        need("final_max_dim", self.final_max_dim > self.coarsest_max_dim, "must exceed coarsest_max_dim")
        need("iters_per_stage", self.iters_per_stage >= 1, "must be >= 1")
        need("extended_final_iters", self.extended_final_iters >= 1, "must be >= 1")
        for key in ("lr_generator", "lr_discriminator", "lr_stage_scale", "scheduler_gamma"):
            need(key, getattr(self, key) > 0, "must be > 0")
        need("adam_beta1", 0 <= self.adam_beta1 < 1, "must be in [0, 1)")
        need("adam_beta2", 0 <= self.adam_beta2 < 1, "must be in [0, 1)")
        need("critic_iters", 3 <= self.critic_iters <= 5, "must be in [3, 5]")
        need("concurrent_stages", self.concurrent_stages >= 2, "must be >= 2")
        need("milestone_fraction", 0 < self.milestone_fraction < 1, "must be in (0, 1)")
        for key in ("alpha", "gp_lambda", "classifier_weight"):
            need(key, getattr(self, key) >= 0, "must be >= 0")
        need("filters", self.filters > 0, "must be > 0")
        need("layers_per_stage", 3 <= self.layers_per_stage <= 6, "must be in [3, 6]")
        need("sample_every", self.sample_every >= 0, "must be >= 0")
        need("checkpoint_every", self.checkpoint_every >= 0, "must be >= 0")
        need("final_samples", self.final_samples >= 0, "must be >= 0")
        try:
            AugmentPolicy.parse(self.augment)
        except InvalidInputError as exc:
            raise ConfigError("augment", str(exc)) from exc

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in fields:
                raise ConfigError(key, "unknown configuration key")
            kwargs[key] = _coerce(key, fields[key].type, value)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return self.from_mapping({**self.to_dict(), **changes})

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.gp_lambda, self.classifier_weight)

    @property
    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy.parse(self.augment, shared_draw=self.shared_augment_draw)

    @property
    def block_spec(self) -> ConvBlockSpec:
        return ConvBlockSpec(layers_per_stage=self.layers_per_stage, filters=self.filters)


def _coerce(key: str, type_name, value):
    type_name = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if type_name == "bool":
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if type_name == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if type_name == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"cannot interpret {value!r} as {type_name}") from exc


def stage_iterations(config: TrainConfig, k: int, stage: int) -> int:
    iters = k * config.iters_per_stage
    if stage >= config.num_stages - 2:
        iters = int(math.floor(iters * config.extended_final_iters))
    return iters


def milestone(config: TrainConfig, k: int, stage: Optional[int] = None) -> int:
    """Iteration at which the learning rate drops by ``scheduler_gamma``."""
    per_image = config.iters_per_stage
    if stage is not None:
        per_image = stage_iterations(config, k, stage) / k
    return int(math.floor(config.milestone_fraction * k * per_image + 1e-9))


def lr_schedule(iteration: int, config: TrainConfig, k: int, stage: Optional[int] = None) -> float:
    """Single-milestone step schedule, restarted at every stage."""
    return 1.0 if iteration < milestone(config, k, stage) else config.scheduler_gamma


@dataclass
class Batch:
    images: torch.Tensor
    labels: torch.Tensor
    order: torch.Tensor


def make_batch(
    pyramids: Sequence[ImagePyramid],
    stage: int,
    rng: torch.Generator,
    class_ids: Optional[Sequence[int]] = None,
) -> Batch:
    """Every input image once, in a fresh random order."""
    k = len(pyramids)
    ids = torch.as_tensor(list(range(k)) if class_ids is None else list(class_ids), dtype=torch.long)
    order = torch.randperm(k, generator=rng)
    images = torch.stack([pyramids[i][stage] for i in order.tolist()])
    return Batch(images=images, labels=ids[order], order=order)


def make_single_batch(pyramids, stage, rng, class_ids=None) -> Batch:
    """One randomly chosen input; used only by the collapse-prone baseline."""
    k = len(pyramids)
    ids = torch.as_tensor(list(range(k)) if class_ids is None else list(class_ids), dtype=torch.long)
    order = torch.randint(0, k, (1,), generator=rng)
    return Batch(images=pyramids[int(order)][stage].unsqueeze(0), labels=ids[order], order=order)


@dataclass
class TrainState:
    config: TrainConfig
    spec: PyramidSpec
    images: list[ImageSample]
    class_names: list[str]
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    fixed_noise: list[NoiseMap]
    rng: torch.Generator
    stage: int = 0
    iteration: int = 0
    finished: bool = False
    pyramids: list[ImagePyramid] = field(default_factory=list)

    def __post_init__(self):
        if not self.pyramids:
            self.pyramids = [build_pyramid(img, self.spec) for img in self.images]

    @property
    def k(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return max(len(self.class_names), max(s.class_id for s in self.images) + 1)

    @property
    def class_ids(self) -> list[int]:
        return [s.class_id for s in self.images]

    @property
    def use_classifier(self) -> bool:
        return self.config.class_head and self.num_classes > 1

    @classmethod
    def create(cls, images: Sequence[ImageSample], config: TrainConfig, class_names=None) -> "TrainState":
        if not images:
            raise InvalidInputError("training needs at least one image")
        dims = {img.dims for img in images}
        if len(dims) != 1:
            raise InvalidInputError(f"training images must share dimensions, got {sorted(dims)}")
        spec = build_spec(images[0].dims, config.num_stages, config.coarsest_max_dim)
        if class_names is None:
            class_names = [str(i) for i in range(max(img.class_id for img in images) + 1)]
        gen = init_generator(
            config.block_spec,
            config.seed,
            spec.stage_dims,
            window=config.concurrent_stages,
            lr_stage_scale=config.lr_stage_scale,
        )
        num_classes = max(len(class_names), max(img.class_id for img in images) + 1)
        disc = init_discriminator(config.block_spec, num_classes, 0, spec.stage_dims[0], seed=config.seed)
        state = cls(
            config=config,
            spec=spec,
            images=list(images),
            class_names=list(class_names),
            generator=gen,
            discriminator=disc,
            opt_g=_generator_optimizer(gen, config),
            opt_d=_discriminator_optimizer(disc, config),
            fixed_noise=make_fixed_noise(len(images), spec.stage_dims[0], config.seed),
            rng=torch.Generator().manual_seed(config.seed + 1),
        )
        return state

    def fixed_noise_batch(self) -> torch.Tensor:
        return torch.stack([m.data for m in self.fixed_noise])

    def to_checkpoint(self) -> "Checkpoint":
        return Checkpoint(
            config=self.config.to_dict(),
            spec=self.spec.to_dict(),
            class_names=list(self.class_names),
            class_ids=self.class_ids,
            source_paths=[s.source_path for s in self.images],
            images=torch.stack([s.pixels for s in self.images]).clone(),
            generator_stages=self.generator.num_stages,
            generator=_clone_state(self.generator.state_dict()),
            discriminator=_clone_state(self.discriminator.state_dict()),
            opt_g=_clone_opt(self.opt_g, self.generator),
            opt_d=_clone_opt(self.opt_d, self.discriminator),
            fixed_noise=self.fixed_noise_batch().clone(),
            rng_state=self.rng.get_state().clone(),
            stage=self.stage,
            iteration=self.iteration,
            finished=self.finished,
        )


def _clone_state(sd):
    return {k: v.detach().clone() for k, v in sd.items()}


def _clone_opt(opt: torch.optim.Optimizer, module: torch.nn.Module) -> dict:
    """Optimizer state keyed by parameter name so it survives module rebuilds."""
    names = {id(p): n for n, p in module.named_parameters()}
    groups = []
    for g in opt.param_groups:
        groups.append({
            "tag": g.get("tag", ""),
            "lr": g["lr"],
            "params": [names[id(p)] for p in g["params"]],
        })
    state = {}
    for p, s in opt.state.items():
        state[names[id(p)]] = {k: (v.clone() if torch.is_tensor(v) else v) for k, v in s.items()}
    return {"groups": groups, "state": state}


def _restore_opt(opt: torch.optim.Optimizer, module: torch.nn.Module, saved: dict) -> None:
    params = dict(module.named_parameters())
    for g, sg in zip(opt.param_groups, saved["groups"]):
        g["lr"] = sg["lr"]
    for name, s in saved["state"].items():
        opt.state[params[name]] = {k: (v.clone() if torch.is_tensor(v) else v) for k, v in s.items()}


def _generator_optimizer(gen: Generator, config: TrainConfig) -> torch.optim.Adam:
    groups = [
        {"params": list(gen.head.parameters()), "tag": "head"},
        {"params": list(gen.to_rgb.parameters()), "tag": "to_rgb"},
    ]
    for i, stage in enumerate(gen.stages):
        groups.append({"params": list(stage.parameters()), "tag": f"stage{i}"})
    return torch.optim.Adam(groups, lr=config.lr_generator, betas=(config.adam_beta1, config.adam_beta2))


def _discriminator_optimizer(disc: Discriminator, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        disc.parameters(), lr=config.lr_discriminator, betas=(config.adam_beta1, config.adam_beta2)
    )


def set_learning_rates(state: TrainState, iteration: int) -> dict:
    """Apply the stage lr stack times the step schedule; returns the effective rates."""
    cfg = state.config
    sched = lr_schedule(iteration, cfg, state.k, state.stage)
    gen = state.generator
    mults = gen.lr_multipliers
    for g in state.opt_g.param_groups:
        tag = g["tag"]
        if tag == "head":
            m = gen.head_multiplier()
        elif tag == "to_rgb":
            m = 1.0
        else:
            m = mults[int(tag[len("stage"):])]
        g["lr"] = cfg.lr_generator * m * sched
    for g in state.opt_d.param_groups:
        g["lr"] = cfg.lr_discriminator * sched
    return {"schedule": sched, "lr_g": cfg.lr_generator * sched, "lr_d": cfg.lr_discriminator * sched}


def grow_state(state: TrainState) -> None:
    """Append a generator stage and start a fresh critic for it.

    Adam moments of surviving generator stages are kept; the new stage starts
    with empty optimizer state.
    """
    cfg = state.config
    state.generator.grow()
    new = state.generator.num_stages - 1
    state.opt_g.add_param_group({"params": list(state.generator.stages[new].parameters()), "tag": f"stage{new}"})
    state.discriminator = init_discriminator(
        cfg.block_spec,
        state.discriminator.num_classes,
        new,
        state.spec.stage_dims[new],
        prev=state.discriminator,
        seed=cfg.seed,
    )
    state.opt_d = _discriminator_optimizer(state.discriminator, cfg)
    state.stage = new
    state.iteration = 0


def _diverged(state: TrainState, what: str, run_dir) -> TrainingDivergedError:
    path = None
    if run_dir is not None:
        path = Path(run_dir) / f"stage_{state.stage}" / f"diagnostic_iter_{state.iteration}.ckpt"
        state.to_checkpoint().save(path)
    return TrainingDivergedError(f"{what} at stage {state.stage} iteration {state.iteration}", path)


def _check_finite(state: TrainState, values: dict, run_dir) -> None:
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise _diverged(state, f"non-finite {', '.join(bad)}", run_dir)


def critic_step(state: TrainState) -> dict:
    cfg, stage, rng = state.config, state.stage, state.rng
    gen, disc = state.generator, state.discriminator
    if cfg.whole_set_batching:
        batch = make_batch(state.pyramids, stage, rng, state.class_ids)
    else:
        batch = make_single_batch(state.pyramids, stage, rng, state.class_ids)
    n = batch.images.shape[0]
    h0, w0 = state.spec.stage_dims[0]
    with torch.no_grad():
        fakes = gen(torch.randn(n, 3, h0, w0, generator=rng), stage)
    fake_labels = assign_fake_labels(n, disc.num_classes, rng)

    state.opt_d.zero_grad(set_to_none=True)
    terms = critic_terms(disc, batch.images, fakes, cfg.weights, cfg.augment_policy, rng)
    loss = terms.total
    out = {"d_wasserstein": terms.wasserstein.item(), "d_gp": terms.gp.item()}
    if state.use_classifier:
        cls_real = class_loss(terms.real_logits, batch.labels)
        cls_fake = class_loss(terms.fake_logits, fake_labels)
        loss = loss + cfg.classifier_weight * (cls_real + cls_fake)
        out["d_cls_real"] = cls_real.item()
        out["d_cls_fake"] = cls_fake.item()
    loss.backward()
    state.opt_d.step()
    out["d_total"] = loss.item()
    return out


def generator_step(state: TrainState) -> dict:
    cfg, stage, rng = state.config, state.stage, state.rng
    gen, disc = state.generator, state.discriminator
    n = state.k if cfg.whole_set_batching else 1
    h0, w0 = state.spec.stage_dims[0]
    disc.requires_grad_(False)
    try:
        state.opt_g.zero_grad(set_to_none=True)
        fakes = gen(torch.randn(n, 3, h0, w0, generator=rng), stage)
        adv = generator_adv_loss(disc, fakes, cfg.augment_policy, rng)
        j = int(torch.randint(0, state.k, (1,), generator=rng))
        recon = gen(state.fixed_noise[j].data.unsqueeze(0), stage)
        rec = reconstruction_loss(recon, state.pyramids[j][stage].unsqueeze(0))
        loss = adv + cfg.alpha * rec
        loss.backward()
        state.opt_g.step()
    finally:
        disc.requires_grad_(True)
    return {"g_adv": adv.item(), "g_rec": rec.item(), "g_total": loss.item(), "rec_image": j}


def train_iteration(state: TrainState) -> dict:
    lrs = set_learning_rates(state, state.iteration)
    record: dict = {"stage": state.stage, "iter": state.iteration, **lrs}
    critic = [critic_step(state) for _ in range(state.config.critic_iters)]
    for key in critic[0]:
        record[key] = sum(c[key] for c in critic) / len(critic)
    record.update(generator_step(state))
    return record


class RunWriter:
    """Owns the on-disk layout of a training run."""

    def __init__(self, run_dir):
        self.root = Path(run_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self._log = open(self.root / "log.jsonl", "a", encoding="utf-8")

    def write_config(self, config: TrainConfig) -> None:
        import tomli_w

        with open(self.root / "config.toml", "wb") as fh:
            tomli_w.dump(config.to_dict(), fh)

    def log(self, record: dict) -> None:
        self._log.write(json.dumps(record, sort_keys=True) + "\n")
        self._log.flush()

    def checkpoint_path(self, stage: int, iteration: int) -> Path:
        return self.root / f"stage_{stage}" / f"iter_{iteration}.ckpt"

    def sample_path(self, stage: int, iteration: int) -> Path:
        return self.root / "samples" / f"stage_{stage}_iter_{iteration}.png"

    def close(self) -> None:
        self._log.close()


def preview_noise(state: TrainState, n: int = PREVIEW_SAMPLES) -> torch.Tensor:
    # separate generator so previews never perturb the training random stream
    g = torch.Generator().manual_seed(state.config.seed + 7919)
    h0, w0 = state.spec.stage_dims[0]
    return torch.randn(n, 3, h0, w0, generator=g)


def train_stage(state: TrainState, stage: Optional[int] = None, writer: Optional[RunWriter] = None,
                max_iterations: Optional[int] = None) -> TrainState:
    """Run (or resume) the current stage until its iteration budget is spent.

    ``max_iterations`` stops early after that many iterations of this call,
    leaving the state resumable.
    """
    if stage is not None and stage != state.stage:
        raise InvalidInputError(f"state is at stage {state.stage}, not {stage}")
    cfg = state.config
    total = stage_iterations(cfg, state.k, state.stage)
    done = 0
    state.generator.train()
    state.discriminator.train()
    while state.iteration < total:
        if max_iterations is not None and done >= max_iterations:
            break
        t0 = time.perf_counter()
        run_dir = writer.root if writer else None
        try:
            record = train_iteration(state)
        except NumericError as exc:
            if isinstance(exc, TrainingDivergedError):
                raise
            raise _diverged(state, str(exc), run_dir) from exc
        losses = {k: v for k, v in record.items() if k.startswith(("d_", "g_")) and k != "rec_image"}
        _check_finite(state, losses, run_dir)
        state.iteration += 1
        done += 1
        record["time_s"] = round(time.perf_counter() - t0, 4)
        if writer is not None:
            writer.log(record)
            it = state.iteration
            if cfg.sample_every and it % cfg.sample_every == 0:
                with torch.no_grad():
                    save_grid(state.generator(preview_noise(state), state.stage), writer.sample_path(state.stage, it))
            if (cfg.checkpoint_every and it % cfg.checkpoint_every == 0) or it == total:
                state.to_checkpoint().save(writer.checkpoint_path(state.stage, it))
    return state


def stage_complete(state: TrainState) -> bool:
    return state.iteration >= stage_iterations(state.config, state.k, state.stage)


def run(state: TrainState, run_dir=None, max_iterations: Optional[int] = None) -> TrainState:
    """Train every remaining stage, growing between them.

    ``max_iterations`` caps the total number of iterations in this call.
    """
    writer = RunWriter(run_dir) if run_dir is not None else None
    try:
        if writer is not None:
            writer.write_config(state.config)
        remaining = max_iterations
        while True:
            before = state.iteration
            train_stage(state, writer=writer, max_iterations=remaining)
            if remaining is not None:
                remaining -= state.iteration - before
            if not stage_complete(state):
                return state
            if state.stage == state.config.num_stages - 1:
                break
            if remaining is not None and remaining <= 0:
                return state
            grow_state(state)
            log.info("grew generator to %d stages", state.generator.num_stages)
        state.finished = True
        if writer is not None:
            ckpt = state.to_checkpoint()
            ckpt.save(writer.root / "last.ckpt")
            if state.config.final_samples:
                _write_final_samples(ckpt, writer.root / "final_samples", state.config)
        return state
    finally:
        if writer is not None:
            writer.close()


def _write_final_samples(ckpt: "Checkpoint", out_dir: Path, config: TrainConfig) -> None:
    from .metrics import sample
    from .pyramid import save_png

    images = sample(ckpt, config.final_samples, seed=config.seed)
    for i, img in enumerate(images):
        save_png(img, out_dir / f"sample_{i:04d}.png")
    save_grid(torch.stack(images[:64]), out_dir / "grid.png")


def train_images(images: Sequence[ImageSample], config: TrainConfig, run_dir=None,
                 class_names=None) -> "Checkpoint":
    state = TrainState.create(images, config, class_names)
    run(state, run_dir)
    return state.to_checkpoint()


def train(image_dir, config: TrainConfig, run_dir=None) -> "Checkpoint":
    """Load every image in ``image_dir`` and train all stages.

    With a single image the class head has nothing to separate and its loss
    is skipped.
    """
    images, names = load_image_set(image_dir, config.final_max_dim)
    if not images:
        raise InvalidInputError(f"no images found in {image_dir}")
    return train_images(images, config, run_dir, class_names=names)


@dataclass
class Checkpoint:
    config: dict
    spec: dict
    class_names: list
    class_ids: list
    source_paths: list
    images: torch.Tensor
    generator_stages: int
    generator: dict
    discriminator: dict
    opt_g: dict
    opt_d: dict
    fixed_noise: torch.Tensor
    rng_state: torch.Tensor
    stage: int
    iteration: int
    finished: bool = False
    version: int = CHECKPOINT_VERSION

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_mapping(self.config)

    @property
    def pyramid_spec(self) -> PyramidSpec:
        return PyramidSpec.from_dict(self.spec)

    def build_generator(self) -> Generator:
        cfg = self.train_config
        gen = Generator(cfg.block_spec, self.pyramid_spec.stage_dims, cfg.concurrent_stages, cfg.lr_stage_scale)
        for _ in range(self.generator_stages - 1):
            gen.grow()
        gen.load_state_dict(self.generator)
        gen.eval()
        return gen

    def build_discriminator(self) -> Discriminator:
        cfg = self.train_config
        num_classes = self.discriminator["class_head.weight"].shape[0]
        disc = Discriminator(cfg.block_spec, num_classes, self.stage, self.pyramid_spec.stage_dims[self.stage])
        disc.load_state_dict(self.discriminator)
        return disc

    def restore(self) -> TrainState:
        cfg = self.train_config
        images = [
            ImageSample(pixels=self.images[i].clone(), class_id=int(c), source_path=p)
            for i, (c, p) in enumerate(zip(self.class_ids, self.source_paths))
        ]
        gen = self.build_generator()
        disc = self.build_discriminator()
        opt_g = _generator_optimizer(gen, cfg)
        opt_d = _discriminator_optimizer(disc, cfg)
        _restore_opt(opt_g, gen, self.opt_g)
        _restore_opt(opt_d, disc, self.opt_d)
        noise = [
            NoiseMap(data=self.fixed_noise[i].clone(), owner_image=i, fixed=True,
                     _digest=tensor_fingerprint(self.fixed_noise[i]))
            for i in range(self.fixed_noise.shape[0])
        ]
        rng = torch.Generator()
        rng.set_state(self.rng_state.clone())
        return TrainState(
            config=cfg,
            spec=self.pyramid_spec,
            images=images,
            class_names=list(self.class_names),
            generator=gen,
            discriminator=disc,
            opt_g=opt_g,
            opt_d=opt_d,
            fixed_noise=noise,
            rng=rng,
            stage=self.stage,
            iteration=self.iteration,
            finished=self.finished,
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        torch.save(dataclasses.asdict(self), tmp)
        os.replace(tmp, path)
        return path


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    return checkpoint.save(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types for corrupt archives
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise CheckpointError(f"{path} does not hold a checkpoint")
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has checkpoint format version {version!r}; this build reads version {CHECKPOINT_VERSION}"
        )
    names = {f.name for f in dataclasses.fields(Checkpoint)}
    missing = names - payload.keys()
    if missing:
        raise CheckpointError(f"{path} is missing fields: {sorted(missing)}")
    return Checkpoint(**{k: payload[k] for k in names})
