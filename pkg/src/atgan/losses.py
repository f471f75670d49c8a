"""Loss terms and composed objectives.

Every expectation is a batch mean, so the loss weights are scale-free in the
batch size. Log-sigmoid terms are computed from raw logits through softplus
identities and the cross-entropy through log-sum-exp, so nothing here emits
NaN/Inf for logits of magnitude up to at least 50.

Naming: ``clean_ce``/``adv_ce`` are the classification terms on clean and
generator-mapped adversarial inputs, ``gan_disc``/``gan_gen`` the real/fake
log-likelihood terms (both written in the maximized orientation; the trainer
minimizes their negatives inside the composed objectives), ``perceptual``
the volume-normalized feature-space squared distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ContractError

REPORT_KEYS = (
    "attack_ce",     # cross-entropy the attacker maximizes
    "clean_ce",      # classification loss on clean inputs
    "adv_ce",        # classification loss on generator-mapped adversarial inputs
    "class_total",   # clean_ce + beta * adv_ce
    "gan_disc",      # E log D(x) + E log(1 - D(G(x_adv)))
    "gan_gen",       # E log D(G(x_adv))
    "perceptual",    # normalized feature-space squared distance
    "disc_objective",
    "gen_objective",
)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composed objectives: alpha1/alpha2 scale the
    classification term in the discriminator/generator steps, beta weighs
    the adversarial classification term, gamma the perceptual term."""

    alpha1: float = 1.0
    alpha2: float = 1.0
    beta: float = 1.0
    gamma: float = 10.0

    @classmethod
    def defaults_for(cls, profile_name: str) -> "LossWeights":
        if profile_name == "cifar10":
            return cls(alpha1=5.0, alpha2=5.0, beta=4.0, gamma=10.0)
        return cls(alpha1=1.0, alpha2=1.0, beta=1.0, gamma=10.0)

    def to_json(self) -> dict:
        return {"alpha1": self.alpha1, "alpha2": self.alpha2,
                "beta": self.beta, "gamma": self.gamma}


def cross_entropy(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-softmax of the labeled class, in stable form."""
    if scores.ndim == 1:
        scores = scores.unsqueeze(0)
        labels = labels.reshape(1)
    if scores.ndim != 2:
        raise ContractError(f"scores must be (N,k), got shape {tuple(scores.shape)}")
    if labels.shape != scores.shape[:1]:
        raise ContractError(
            f"labels shape {tuple(labels.shape)} does not match scores {tuple(scores.shape)}"
        )
    k = scores.shape[1]
    if len(labels) and (labels.min().item() < 0 or labels.max().item() >= k):
        raise ContractError(f"label outside [0,{k}): {labels.min().item()}..{labels.max().item()}")
    picked = scores.gather(1, labels[:, None]).squeeze(1)
    return (torch.logsumexp(scores, dim=1) - picked).mean()


def log_sigmoid(logit: torch.Tensor) -> torch.Tensor:
    """log sigma(t) computed as -softplus(-t)."""
    return -F.softplus(-logit)


def log_one_minus_sigmoid(logit: torch.Tensor) -> torch.Tensor:
    """log(1 - sigma(t)) computed as -softplus(t)."""
    return -F.softplus(logit)


def adversarial_loss(g, d, x_adv: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the composite classifier on perturbed inputs; this is
    the quantity the attacker maximizes."""
    return cross_entropy(d.class_scores(g(x_adv)), y)


def classification_loss(d, g, x: torch.Tensor, x_adv: torch.Tensor, y: torch.Tensor,
                        weights: LossWeights):
    """Classification terms of the outer minimization.

    Returns (clean_ce, adv_ce, class_total): clean inputs go to the
    discriminator directly, adversarial inputs through the generator first,
    and class_total = clean_ce + beta * adv_ce.
    """
    if x.shape[0] != x_adv.shape[0] or x.shape[0] != y.shape[0]:
        raise ContractError(
            f"misaligned batches: {x.shape[0]} clean, {x_adv.shape[0]} adversarial, {y.shape[0]} labels"
        )
    clean_ce = cross_entropy(d.class_scores(x), y)
    adv_ce = cross_entropy(d.class_scores(g(x_adv)), y)
    return clean_ce, adv_ce, clean_ce + weights.beta * adv_ce


def discrimination_loss(d, g, x: torch.Tensor, x_adv: torch.Tensor) -> torch.Tensor:
    """E log D(x) + E log(1 - D(G(x_adv))), from raw logits.

    The discriminator maximizes this; the composed discriminator objective
    subtracts it.
    """
    return gan_disc_term(d.disc_logit(x), d.disc_logit(g(x_adv)))


def gan_disc_term(real_logit: torch.Tensor, fake_logit: torch.Tensor) -> torch.Tensor:
    return log_sigmoid(real_logit).mean() + log_one_minus_sigmoid(fake_logit).mean()


def generator_gan_loss(d, g, x_adv: torch.Tensor) -> torch.Tensor:
    """E log D(G(x_adv)): the non-saturating generator term, maximized by G."""
    return gan_gen_term(d.disc_logit(g(x_adv)))


def gan_gen_term(fake_logit: torch.Tensor) -> torch.Tensor:
    return log_sigmoid(fake_logit).mean()


def feature_mse(feat_a: torch.Tensor, feat_b: torch.Tensor) -> torch.Tensor:
    """Per-sample squared Euclidean feature distance divided by the feature
    volume C*H*W, averaged over the batch."""
    if feat_a.shape != feat_b.shape:
        raise ContractError(f"feature shape mismatch: {tuple(feat_a.shape)} vs {tuple(feat_b.shape)}")
    volume = feat_a[0].numel()
    return ((feat_a - feat_b) ** 2).flatten(1).sum(dim=1).mean() / volume


def perceptual_loss(loss_net, x: torch.Tensor, x_adv: torch.Tensor, g) -> torch.Tensor:
    """Feature-space distance between the generator's reconstruction of the
    perturbed input and the clean input, through the frozen loss network."""
    return feature_mse(loss_net.features(g(x_adv)), loss_net.features(x))


def full_objectives(weights: LossWeights, parts: dict):
    """Compose the discriminator and generator objectives from named parts.

    disc = alpha1 * (clean_ce + beta * adv_ce) - gan_disc
    gen  = alpha2 * (clean_ce + beta * adv_ce) - gan_gen + gamma * perceptual
    """
    for key in ("clean_ce", "adv_ce", "gan_disc", "gan_gen", "perceptual"):
        if key not in parts:
            raise ContractError(f"loss report is missing required part {key!r}")
    class_term = parts["clean_ce"] + weights.beta * parts["adv_ce"]
    disc = weights.alpha1 * class_term - parts["gan_disc"]
    gen = weights.alpha2 * class_term - parts["gan_gen"] + weights.gamma * parts["perceptual"]
    return disc, gen


def validate_report(report: dict) -> dict:
    """Check that a loss report uses known keys and finite values."""
    import math

    for key, value in report.items():
        if key not in REPORT_KEYS:
            raise ContractError(f"unknown loss report key {key!r}; known keys: {REPORT_KEYS}")
        v = float(value)
        if not math.isfinite(v):
            raise ContractError(f"loss report value {key!r} is not finite: {v}")
    return report
