"""Training loops and checkpointing.

The adversarial-GAN loop runs three phases per batch:

1. attack: perturb the batch against the frozen composite classifier
   (generator chained into the classification head) at the training budget;
2. discriminator step: one optimizer step on
   alpha1*(clean_ce + beta*adv_ce) - gan_disc with the generator held
   constant (its forward runs under no_grad, so no generator gradient ever
   exists in this phase);
3. generator step: one optimizer step on
   alpha2*(clean_ce + beta*adv_ce) - gan_gen + gamma*perceptual with every
   discriminator parameter's requires_grad turned off. The clean
   classification term has no generator dependence, so it enters the logged
   value as a constant.

In every phase the network not being trained sits in eval mode, so its batch
norm buffers stay bitwise fixed. Baseline adversarial training attacks a
plain classifier and minimizes cross-entropy on the (FracAT-mixed) batch;
standard training is the same loop without the attack.

Runs are bitwise reproducible: all randomness comes from named substreams of
the config seed, derived statelessly per step, and checkpoints capture the
counters needed to resume mid-run.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import torch

from . import evalkit
from .attacks import classifier_view, composite_view, pgd_attack
from .config import OptimizerSpec, TrainConfig, parse_config
from .data import LabeledBatch, batch_iterator, get_profile
from .errors import CheckpointError, ConfigError, ContractError, TrainingDivergedError
from .losses import (cross_entropy, feature_mse, gan_disc_term, gan_gen_term,
                     validate_report)
from .models import (build_classifier, build_discriminator, build_generator,
                     build_loss_network)
from .seeding import derive_seed, numpy_generator
from .tensorio import load_tensors, save_tensors

CHECKPOINT_VERSION = 1
DIVERGENCE_LIMIT = 1e4


@dataclass
class Checkpoint:
    """Everything needed to rebuild models and resume training bitwise."""

    kind: str            # "atgan" or "classifier"
    config: dict         # canonical config echo
    step: int            # next global step to execute
    tensors: dict        # model and optimizer tensors, prefix-namespaced
    optim_meta: dict     # non-tensor optimizer state per network
    rng: dict            # root seed; streams are derived per step, not stateful


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list
    checkpoint_path: str | None = None
    metrics_path: str | None = None


class MetricsLog:
    """In-memory metrics rows, optionally mirrored to a JSON-lines file."""

    def __init__(self, path: str | None = None):
        self.rows = []
        self.path = path
        self._fh = open(path, "w") if path else None

    def add(self, **row):
        self.rows.append(row)
        if self._fh is not None:
            self._fh.write(json.dumps(row, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def learning_rate_at(spec: OptimizerSpec, step: int) -> float:
    """initial * factor^(number of milestones at or before step), exactly."""
    passed = sum(1 for m in spec.decay_milestones if m <= step)
    return spec.lr * spec.decay_factor ** passed


def make_optimizer(spec: OptimizerSpec, params) -> torch.optim.Optimizer:
    if spec.kind == "adam":
        return torch.optim.Adam(params, lr=spec.lr, betas=tuple(spec.betas))
    return torch.optim.SGD(params, lr=spec.lr, momentum=spec.momentum)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _guard(value: float, phase: str, step: int) -> float:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss in phase {phase!r} at step {step}")
    if value > DIVERGENCE_LIMIT:
        raise TrainingDivergedError(
            f"loss {value:.4g} exceeds the divergence guard {DIVERGENCE_LIMIT:g} "
            f"in phase {phase!r} at step {step}"
        )
    return value


def _scalar(t) -> float:
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def apply_fracat(batch: LabeledBatch, x_adv: torch.Tensor, frac: float, seed: int) -> LabeledBatch:
    """Mix adversarial and clean examples: floor(frac*n) seeded-permutation
    indices take the adversarial image, the rest stay clean. Sample order is
    preserved."""
    if not (0.0 <= frac <= 1.0):
        raise ContractError(f"frac must lie in [0,1], got {frac}")
    n = len(batch)
    n_adv = int(math.floor(frac * n + 1e-9))  # guard against 0.3*10 = 2.999...
    perm = numpy_generator(seed).permutation(n)
    chosen = torch.from_numpy(perm[:n_adv].copy())
    mixed = batch.images.clone()
    mixed[chosen] = x_adv[chosen]
    return LabeledBatch(mixed, batch.labels)


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def _budget(config: TrainConfig, n: int) -> int:
    if config.total_steps is not None:
        return config.total_steps
    return config.epochs * _steps_per_epoch(n, config.batch_size)


def _freeze(module, flag: bool):
    states = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(not flag)
    return states


def _restore_grad_flags(module, states):
    for p, s in zip(module.parameters(), states):
        p.requires_grad_(s)


def train_atgan(config: TrainConfig, train_data: LabeledBatch, loss_network=None,
                out_dir: str | None = None, eval_data: LabeledBatch | None = None,
                phase_hook=None, resume: Checkpoint | None = None) -> TrainResult:
    """Run the three-phase adversarial-GAN loop to the configured budget.

    ``loss_network`` may be a prebuilt FeatureLossNetwork; if omitted, a
    classifier is pretrained on the clean data and frozen. ``phase_hook``
    (phase, step, context) fires after each phase; tests use it to check
    phase isolation and attack reproducibility.
    """
    if config.mode != "atgan":
        raise ConfigError(f"train_atgan needs mode='atgan', got {config.mode!r}")
    profile = get_profile(config.profile)
    seed = config.seed
    weights = config.weights

    generator = build_generator(profile, derive_seed(seed, "init", 0), config.scale)
    discriminator = build_discriminator(profile, derive_seed(seed, "init", 1), config.scale)
    if loss_network is None:
        pre = pretrain_loss_network(config, train_data, out_dir=out_dir)
        classifier = restore_models(pre.checkpoint)["model"]
        loss_network = build_loss_network(profile, classifier)
    loss_network.eval()

    opt_g = make_optimizer(config.generator_opt, generator.parameters())
    opt_d = make_optimizer(config.discriminator_opt, discriminator.parameters())

    step = 0
    if resume is not None:
        if resume.kind != "atgan":
            raise CheckpointError(f"cannot resume atgan training from a {resume.kind!r} checkpoint")
        load_module_state(generator, resume.tensors, "generator")
        load_module_state(discriminator, resume.tensors, "discriminator")
        _load_optimizer(opt_g, resume, "generator_opt")
        _load_optimizer(opt_d, resume, "discriminator_opt")
        step = resume.step

    metrics = MetricsLog(os.path.join(out_dir, "metrics.jsonl") if out_dir else None)
    max_steps = _budget(config, len(train_data))
    spe = _steps_per_epoch(len(train_data), config.batch_size)

    def snapshot(next_step: int) -> Checkpoint:
        tensors = {}
        _pack_module(tensors, generator, "generator")
        _pack_module(tensors, discriminator, "discriminator")
        optim_meta = {}
        _pack_optimizer(tensors, optim_meta, opt_g, "generator_opt")
        _pack_optimizer(tensors, optim_meta, opt_d, "discriminator_opt")
        return Checkpoint("atgan", config.to_json(), next_step, tensors, optim_meta,
                          {"root_seed": seed, "scheme": "derived-per-step"})

    try:
        while step < max_steps:
            epoch = step // spe
            start_batch = step % spe
            order_seed = derive_seed(seed, "data", epoch)
            for bi, batch in enumerate(batch_iterator(train_data, config.batch_size, order_seed)):
                if bi < start_batch:
                    continue
                if step >= max_steps:
                    break
                x, y = batch.images, batch.labels

                # phase 1: inner maximization against the frozen snapshot
                generator.eval()
                discriminator.eval()
                view = composite_view(generator, discriminator)
                adv = pgd_attack(view, batch, config.threat, derive_seed(seed, "attack", step))
                mixed = apply_fracat(batch, adv.x_adv, config.frac,
                                     derive_seed(seed, "fracat", step)).images
                with torch.no_grad():
                    attack_ce = _scalar(cross_entropy(view(adv.x_adv), y))
                metrics.add(step=step, epoch=epoch, phase="attack",
                            losses=validate_report({"attack_ce": attack_ce}),
                            max_delta=adv.max_delta())
                if phase_hook is not None:
                    phase_hook("attack", step, {"generator": generator,
                                                "discriminator": discriminator,
                                                "batch": batch, "x_adv": adv.x_adv,
                                                "mixed": mixed})

                # phase 2: discriminator step, generator held constant
                discriminator.train()
                generator.eval()
                with torch.no_grad():
                    g_const = generator(mixed)
                scores_clean, logit_real = discriminator(x)
                scores_adv, logit_fake = discriminator(g_const)
                clean_ce = cross_entropy(scores_clean, y)
                adv_ce = cross_entropy(scores_adv, y)
                gan_disc = gan_disc_term(logit_real, logit_fake)
                disc_obj = weights.alpha1 * (clean_ce + weights.beta * adv_ce) - gan_disc
                _guard(_scalar(disc_obj), "discriminator", step)
                opt_d.zero_grad(set_to_none=True)
                disc_obj.backward()
                lr_d = learning_rate_at(config.discriminator_opt, step)
                _set_lr(opt_d, lr_d)
                gnorm_d = _grad_norm(discriminator.parameters())
                opt_d.step()
                metrics.add(step=step, epoch=epoch, phase="discriminator",
                            losses=validate_report({
                                "clean_ce": _scalar(clean_ce), "adv_ce": _scalar(adv_ce),
                                "class_total": _scalar(clean_ce + weights.beta * adv_ce),
                                "gan_disc": _scalar(gan_disc),
                                "disc_objective": _scalar(disc_obj)}),
                            grad_norm=gnorm_d, lr=lr_d)
                if phase_hook is not None:
                    phase_hook("discriminator", step, {"generator": generator,
                                                       "discriminator": discriminator})

                # phase 3: generator step, discriminator frozen
                generator.train()
                discriminator.eval()
                d_flags = _freeze(discriminator, True)
                with torch.no_grad():
                    clean_ce_g = cross_entropy(discriminator.class_scores(x), y)
                g_out = generator(mixed)
                scores_adv_g, logit_fake_g = discriminator(g_out)
                adv_ce_g = cross_entropy(scores_adv_g, y)
                gan_gen = gan_gen_term(logit_fake_g)
                percep = feature_mse(loss_network.features(g_out), loss_network.features(x))
                gen_obj = (weights.alpha2 * (clean_ce_g + weights.beta * adv_ce_g)
                           - gan_gen + weights.gamma * percep)
                _guard(_scalar(gen_obj), "generator", step)
                opt_g.zero_grad(set_to_none=True)
                gen_obj.backward()
                _restore_grad_flags(discriminator, d_flags)
                lr_g = learning_rate_at(config.generator_opt, step)
                _set_lr(opt_g, lr_g)
                gnorm_g = _grad_norm(generator.parameters())
                opt_g.step()
                metrics.add(step=step, epoch=epoch, phase="generator",
                            losses=validate_report({
                                "clean_ce": _scalar(clean_ce_g), "adv_ce": _scalar(adv_ce_g),
                                "class_total": _scalar(clean_ce_g + weights.beta * adv_ce_g),
                                "gan_gen": _scalar(gan_gen), "perceptual": _scalar(percep),
                                "gen_objective": _scalar(gen_obj)}),
                            grad_norm=gnorm_g, lr=lr_g)
                if phase_hook is not None:
                    phase_hook("generator", step, {"generator": generator,
                                                   "discriminator": discriminator})

                step += 1
                if config.checkpoint_every and step % config.checkpoint_every == 0 and step < max_steps:
                    _periodic_checkpoint(snapshot(step), out_dir, metrics, eval_data,
                                         lambda: composite_view(generator, discriminator),
                                         step)
        if eval_data is not None:
            acc = evalkit.clean_accuracy(composite_view(generator, discriminator), eval_data)
            metrics.add(step=step, phase="final", clean_accuracy=acc)
    finally:
        metrics.close()

    final = snapshot(step)
    ckpt_path = None
    if out_dir is not None:
        ckpt_path = os.path.join(out_dir, "checkpoint-final.ckpt")
        save_checkpoint(final, ckpt_path)
    return TrainResult(final, metrics.rows, ckpt_path,
                       metrics.path if out_dir else None)


def train_classifier(config: TrainConfig, train_data: LabeledBatch,
                     out_dir: str | None = None, eval_data: LabeledBatch | None = None,
                     phase_hook=None, resume: Checkpoint | None = None) -> TrainResult:
    """Baseline adversarial training (mode 'baseline_at') or standard ERM
    (mode 'standard') of the plain classifier."""
    if config.mode not in ("baseline_at", "standard"):
        raise ConfigError(f"train_classifier needs mode 'baseline_at' or 'standard', got {config.mode!r}")
    profile = get_profile(config.profile)
    seed = config.seed
    model = build_classifier(profile, derive_seed(seed, "init", 2), config.scale)
    opt = make_optimizer(config.discriminator_opt, model.parameters())

    step = 0
    if resume is not None:
        if resume.kind != "classifier":
            raise CheckpointError(f"cannot resume classifier training from a {resume.kind!r} checkpoint")
        load_module_state(model, resume.tensors, "model")
        _load_optimizer(opt, resume, "model_opt")
        step = resume.step

    metrics = MetricsLog(os.path.join(out_dir, "metrics.jsonl") if out_dir else None)
    max_steps = _budget(config, len(train_data))
    spe = _steps_per_epoch(len(train_data), config.batch_size)

    def snapshot(next_step: int) -> Checkpoint:
        tensors = {}
        _pack_module(tensors, model, "model")
        optim_meta = {}
        _pack_optimizer(tensors, optim_meta, opt, "model_opt")
        return Checkpoint("classifier", config.to_json(), next_step, tensors, optim_meta,
                          {"root_seed": seed, "scheme": "derived-per-step"})

    try:
        while step < max_steps:
            epoch = step // spe
            start_batch = step % spe
            order_seed = derive_seed(seed, "data", epoch)
            for bi, batch in enumerate(batch_iterator(train_data, config.batch_size, order_seed)):
                if bi < start_batch:
                    continue
                if step >= max_steps:
                    break
                x, y = batch.images, batch.labels
                if config.mode == "baseline_at":
                    model.eval()
                    adv = pgd_attack(classifier_view(model), batch, config.threat,
                                     derive_seed(seed, "attack", step))
                    mixed = apply_fracat(batch, adv.x_adv, config.frac,
                                         derive_seed(seed, "fracat", step)).images
                    metrics.add(step=step, epoch=epoch, phase="attack",
                                max_delta=adv.max_delta())
                    if phase_hook is not None:
                        phase_hook("attack", step, {"model": model, "batch": batch,
                                                    "x_adv": adv.x_adv, "mixed": mixed})
                else:
                    mixed = x

                model.train()
                ce = cross_entropy(model(mixed), y)
                _guard(_scalar(ce), "train", step)
                opt.zero_grad(set_to_none=True)
                ce.backward()
                lr = learning_rate_at(config.discriminator_opt, step)
                _set_lr(opt, lr)
                gnorm = _grad_norm(model.parameters())
                opt.step()
                metrics.add(step=step, epoch=epoch, phase="train",
                            losses={"ce": _scalar(ce)}, grad_norm=gnorm, lr=lr)
                if phase_hook is not None:
                    phase_hook("train", step, {"model": model})

                step += 1
                if config.checkpoint_every and step % config.checkpoint_every == 0 and step < max_steps:
                    _periodic_checkpoint(snapshot(step), out_dir, metrics, eval_data,
                                         lambda: classifier_view(model), step)
        if eval_data is not None:
            acc = evalkit.clean_accuracy(classifier_view(model), eval_data)
            metrics.add(step=step, phase="final", clean_accuracy=acc)
    finally:
        metrics.close()

    final = snapshot(step)
    ckpt_path = None
    if out_dir is not None:
        ckpt_path = os.path.join(out_dir, "checkpoint-final.ckpt")
        save_checkpoint(final, ckpt_path)
    return TrainResult(final, metrics.rows, ckpt_path,
                       metrics.path if out_dir else None)


def pretrain_loss_network(config: TrainConfig, train_data: LabeledBatch,
                          out_dir: str | None = None) -> TrainResult:
    """Standard (clean) training of the loss-network classifier; the result
    is frozen by build_loss_network."""
    sub = TrainConfig(
        mode="standard", profile=config.profile, scale=config.scale,
        seed=config.seed, batch_size=config.batch_size,
        epochs=config.pretrain_epochs,
        # 5e-3 converges on every desk-scale fixture within a handful of
        # epochs; the loss network only needs a competent clean classifier
        discriminator_opt=OptimizerSpec(kind="adam", lr=5e-3),
    )
    sub_dir = None
    if out_dir is not None:
        sub_dir = os.path.join(out_dir, "lossnet-pretrain")
        os.makedirs(sub_dir, exist_ok=True)
    return train_classifier(sub, train_data, out_dir=sub_dir)


def run_training(config: TrainConfig, train_data: LabeledBatch,
                 out_dir: str | None = None, eval_data: LabeledBatch | None = None,
                 loss_network=None) -> TrainResult:
    """Mode dispatch used by the command-line front end."""
    if config.mode == "atgan":
        return train_atgan(config, train_data, loss_network=loss_network,
                           out_dir=out_dir, eval_data=eval_data)
    return train_classifier(config, train_data, out_dir=out_dir, eval_data=eval_data)


def _periodic_checkpoint(ckpt: Checkpoint, out_dir, metrics: MetricsLog, eval_data, view_fn, step):
    if out_dir is not None:
        save_checkpoint(ckpt, os.path.join(out_dir, f"checkpoint-{step:07d}.ckpt"))
    if eval_data is not None:
        metrics.add(step=step, phase="checkpoint",
                    clean_accuracy=evalkit.clean_accuracy(view_fn(), eval_data))


# ---------------------------------------------------------------- checkpoints

def _pack_module(tensors: dict, module, prefix: str) -> None:
    for name, t in module.state_dict().items():
        tensors[f"{prefix}/{name}"] = t.detach().clone()


def load_module_state(module, tensors: dict, prefix: str) -> None:
    """Load a namespaced state dict into a module; wrong slot or shape raises."""
    state = {name[len(prefix) + 1:]: t for name, t in tensors.items()
             if name.startswith(prefix + "/")}
    if not state:
        raise CheckpointError(f"checkpoint holds no tensors under prefix {prefix!r}")
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"state mismatch loading {prefix!r}: {exc}") from exc


def _pack_optimizer(tensors: dict, optim_meta: dict, optimizer, prefix: str) -> None:
    sd = optimizer.state_dict()
    scalars = {}
    for idx, state in sd["state"].items():
        for key, val in state.items():
            if isinstance(val, torch.Tensor):
                tensors[f"optim/{prefix}/{idx}/{key}"] = val.detach().clone()
            else:
                scalars[f"{idx}/{key}"] = val
    optim_meta[prefix] = {"param_groups": sd["param_groups"], "scalars": scalars}


def _load_optimizer(optimizer, ckpt: Checkpoint, prefix: str) -> None:
    meta = ckpt.optim_meta.get(prefix)
    if meta is None:
        raise CheckpointError(f"checkpoint holds no optimizer state for {prefix!r}")
    state = {}
    marker = f"optim/{prefix}/"
    for name, t in ckpt.tensors.items():
        if not name.startswith(marker):
            continue
        idx_str, key = name[len(marker):].split("/", 1)
        state.setdefault(int(idx_str), {})[key] = t.clone()
    for joint, val in meta["scalars"].items():
        idx_str, key = joint.split("/", 1)
        state.setdefault(int(idx_str), {})[key] = val
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    meta = {
        "kind": ckpt.kind,
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config,
        "counters": {"step": ckpt.step},
        "optim": ckpt.optim_meta,
        "rng": ckpt.rng,
    }
    save_tensors(path, ckpt.tensors, meta)


def load_checkpoint(path: str) -> Checkpoint:
    meta, tensors = load_tensors(path)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {meta.get('version')!r}, expected {CHECKPOINT_VERSION}"
        )
    return Checkpoint(meta["kind"], meta["config"], meta["counters"]["step"],
                      tensors, meta["optim"], meta["rng"])


def restore_models(ckpt: Checkpoint) -> dict:
    """Rebuild the trained modules recorded in a checkpoint.

    Returns {"generator", "discriminator", "config"} for adversarial-GAN
    checkpoints and {"model", "config"} for classifier checkpoints.
    """
    config = parse_config(ckpt.config)
    profile = get_profile(config.profile)
    if ckpt.kind == "atgan":
        g = build_generator(profile, 0, config.scale)
        d = build_discriminator(profile, 0, config.scale)
        load_module_state(g, ckpt.tensors, "generator")
        load_module_state(d, ckpt.tensors, "discriminator")
        g.eval()
        d.eval()
        return {"generator": g, "discriminator": d, "config": config}
    model = build_classifier(profile, 0, config.scale)
    load_module_state(model, ckpt.tensors, "model")
    model.eval()
    return {"model": model, "config": config}
