"""Episodic meta-training: per iteration a meta-source supervised step, a
simulated test-time update with sampled neighbor labels, and a meta-target
objective (cross-entropy on the updated model under the true labels, plus
the KL between the posterior and prior weight-bank Gaussians) that drives
both the classifier and the labeler.

The classifier gradient is taken at the meta-source-trained snapshot and,
by default, differentiates through the simulated update (second order).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn, seeds, vnl
from .autodiff import Array, GradMap, Tape, Var
from .data import LabeledSet, draw_batch, sample_episode
from .nn import LayerVars, MlpParams
from .vnl import VarNetParams, VarNetVars, WGaussian

TRAIN_LABEL_MODES = ("gumbel_st", "soft", "hard", "sampled")
PHI_SIGN_MODES = ("descent", "paper")


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1e-4          # simulated test-time update rate
    lambda2: float = 5e-5          # classifier meta update rate
    lambda3: float = 1e-4          # labeler update rate
    lr_meta_source: float = 1e-2   # supervised step rate inside each episode
    batch_size: int = 70
    n_iter: int = 100
    k_ms: int = 1                  # supervised steps per episode
    mc_w: int = 1                  # weight-bank samples per objective
    mc_y: int = 1                  # label draws per weight-bank sample
    label_mode: str = "gumbel_st"
    gumbel_tau: float = 1.0
    second_order: bool = True
    phi_meta_sign: str = "descent"
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3,
               self.lr_meta_source) < 0:
            raise ValueError("learning rates must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.label_mode not in TRAIN_LABEL_MODES:
            raise ValueError(f"unknown label mode {self.label_mode!r}")
        if self.phi_meta_sign not in PHI_SIGN_MODES:
            raise ValueError(f"unknown sign mode {self.phi_meta_sign!r}")


@dataclass(frozen=True)
class IterationLog:
    iteration: int
    meta_source_loss: float
    meta_target_ce: float
    kl_term: float
    yhat_acc: float


def meta_source_step(theta: MlpParams, x: Array, y: Array, lr: float,
                     k: int = 1) -> tuple[MlpParams, float]:
    """k supervised cross-entropy steps; returns the new snapshot and the
    loss seen by the last step."""
    targets = nn.onehot(y, theta.n_classes)
    loss = float("nan")

    def objective(params):
        layers = [(params[f"layers.{i}.w"], params[f"layers.{i}.b"])
                  for i in range(len(theta.layers))]
        tape = params["layers.0.w"].tape
        probs = nn.softmax(nn.forward_logits(layers, tape.constant(x)))
        return nn.cross_entropy(probs, targets)

    for _ in range(max(k, 1)):
        loss, grads = ad.value_and_grad(objective, theta.flat())
        theta = nn.sgd_step(theta, grads, lr)
    return theta, loss


def meta_generalize(theta_vars: LayerVars, x: Var,
                    labels: vnl.SampledLabels | Var, lam1: float,
                    second_order: bool = True) -> LayerVars:
    """One traced cross-entropy step on sampled labels, so downstream losses
    can differentiate through the update."""
    label_var = labels.labels if isinstance(labels, vnl.SampledLabels) else labels
    probs = nn.softmax(nn.forward_logits(theta_vars, x))
    inner = nn.cross_entropy(probs, label_var)
    flat = [v for pair in theta_vars for v in pair]
    grads = ad.gradients(inner, flat)
    if not second_order:
        grads = [g.detach() for g in grads]
    pairs = [(grads[2 * i], grads[2 * i + 1]) for i in range(len(theta_vars))]
    return nn.sgd_step_vars(theta_vars, pairs, lam1)


def meta_target_objective(theta_stars, x: Var, y_onehot,
                          q: WGaussian, p: WGaussian,
                          ) -> tuple[Var, Var, Var]:
    """Mean cross-entropy of the updated snapshots on the true labels, plus
    the posterior-to-prior KL. Returns (total, ce_term, kl_term)."""
    if isinstance(theta_stars[0], tuple):  # single parameter list
        theta_stars = [theta_stars]
    ce_terms = [nn.cross_entropy(nn.softmax(nn.forward_logits(ts, x)), y_onehot)
                for ts in theta_stars]
    ce = ce_terms[0]
    for term in ce_terms[1:]:
        ce = ce + term
    ce = ce * (1.0 / len(ce_terms))
    kl = vnl.kl_diag_gaussians(q, p)
    return ce + kl, ce, kl


def update_theta(theta_sprime: MlpParams, grads: GradMap, lam2: float,
                 ) -> MlpParams:
    """Meta update applied to the meta-source-trained snapshot."""
    return nn.sgd_step(theta_sprime, grads, lam2)


def update_phi(phi: VarNetParams, grad_ce_hat: GradMap, grad_meta: GradMap,
               lam3: float, sign_mode: str = "descent") -> VarNetParams:
    """descent: phi - lam3*(g_ce + g_meta); paper: phi - lam3*(g_ce - g_meta)."""
    if sign_mode not in PHI_SIGN_MODES:
        raise ValueError(f"unknown sign mode {sign_mode!r}")
    sign = 1.0 if sign_mode == "descent" else -1.0
    flat = phi.flat()
    stepped = {k: v - lam3 * (grad_ce_hat[k] + sign * grad_meta[k])
               for k, v in flat.items()}
    return VarNetParams.from_flat(phi.in_dim, phi.hidden, phi.out_dim, stepped)


@dataclass
class EpisodeOutcome:
    """Losses and gradients of one meta-generalization + meta-target pass."""

    l_meta: float
    ce_term: float
    kl_term: float
    l_ce_hat: float
    yhat_acc: float
    theta_grads: GradMap = field(repr=False)
    phi_ce_grads: GradMap = field(repr=False)
    phi_meta_grads: GradMap = field(repr=False)


def episode_pass(theta_sprime: MlpParams, phi: VarNetParams,
                 x_t: Array, y_t: Array, cfg: TrainConfig,
                 rng_w: np.random.Generator, rng_labels: np.random.Generator,
                 ) -> EpisodeOutcome:
    """Build the full meta-generalization / meta-target computation on one
    tape and extract the gradients both updates need."""
    tape = Tape()
    theta_vars = nn.lift_mlp(tape, theta_sprime, prefix="theta")
    phi_vars = vnl.lift_varnet(tape, phi, prefix="phi")
    xv = tape.constant(x_t)
    y_onehot = nn.onehot(y_t, theta_sprime.n_classes)

    feats = nn.forward_features(theta_vars, xv)
    head_w, head_b = theta_vars[-1]
    probs = nn.softmax(feats @ head_w.T + head_b)

    predicted = nn.onehot(np.argmax(probs.value, axis=1), theta_sprime.n_classes)
    protos_prior = vnl.class_prototypes(feats, predicted, probs, head_w)
    protos_post = vnl.class_prototypes(feats, y_onehot, y_onehot, head_w)
    p = vnl.variational_w(phi_vars, protos_prior, n_trunk=len(phi.trunk))
    q = vnl.variational_w(phi_vars, protos_post, n_trunk=len(phi.trunk))

    theta_stars = []
    first_labels = None
    ce_hat_terms = []
    for _ in range(max(cfg.mc_w, 1)):
        w = vnl.sample_w(q, rng_w)
        dist = vnl.neighbor_label_dist(w, feats)
        ce_hat_terms.append(nn.cross_entropy(dist.probs, y_onehot))
        for _ in range(max(cfg.mc_y, 1)):
            labels = vnl.sample_labels(dist, cfg.label_mode, rng_labels,
                                       cfg.gumbel_tau)
            if first_labels is None:
                first_labels = labels
            theta_stars.append(
                meta_generalize(theta_vars, xv, labels, cfg.lambda1,
                                cfg.second_order))

    l_meta, ce_term, kl = meta_target_objective(theta_stars, xv, y_onehot, q, p)
    l_ce_hat = ce_hat_terms[0]
    for term in ce_hat_terms[1:]:
        l_ce_hat = l_ce_hat + term
    l_ce_hat = l_ce_hat * (1.0 / len(ce_hat_terms))

    theta_leaves = [v for pair in theta_vars for v in pair]
    phi_keys = list(phi.flat())
    phi_leaves = [phi_vars[k] for k in phi_keys]
    meta_grads = ad.gradients(l_meta, theta_leaves + phi_leaves)
    ce_hat_grads = ad.gradients(l_ce_hat, phi_leaves)

    theta_grads = {}
    for i in range(len(theta_sprime.layers)):
        theta_grads[f"layers.{i}.w"] = meta_grads[2 * i].value
        theta_grads[f"layers.{i}.b"] = meta_grads[2 * i + 1].value
    phi_meta_grads = {k: g.value for k, g in
                      zip(phi_keys, meta_grads[len(theta_leaves):])}
    phi_ce_grads = {k: g.value for k, g in zip(phi_keys, ce_hat_grads)}

    yhat_acc = float(np.mean(
        np.argmax(first_labels.labels.value, axis=1) == y_t))
    return EpisodeOutcome(l_meta.item(), ce_term.item(), kl.item(),
                          l_ce_hat.item(), yhat_acc,
                          theta_grads, phi_ce_grads, phi_meta_grads)


def train_meta(cfg: TrainConfig, sources: list[LabeledSet],
               hidden=(256, 128), phi_hidden=(128, 128),
               theta0: MlpParams | None = None,
               phi0: VarNetParams | None = None,
               on_checkpoint=None,
               ) -> tuple[MlpParams, VarNetParams, list[IterationLog]]:
    """Run the full episodic loop over the given source domains."""
    if len(sources) < 2:
        raise ValueError("meta-training requires at least two source domains")
    n_classes = max(d.n_classes for d in sources)
    input_dim = sources[0].x.shape[1]

    theta = theta0 if theta0 is not None else nn.init_mlp(
        (input_dim, *hidden, n_classes),
        seeds.component_seed(cfg.seed, "init_theta"))
    phi = phi0 if phi0 is not None else vnl.init_varnet(
        theta.feature_dim, n_classes, hidden=phi_hidden,
        seed=seeds.component_seed(cfg.seed, "init_phi"))

    rng_data = seeds.component_rng(cfg.seed, "data")
    rng_w = seeds.component_rng(cfg.seed, "w")
    rng_labels = seeds.component_rng(cfg.seed, "labels")

    logs: list[IterationLog] = []
    for it in range(cfg.n_iter):
        episode = sample_episode(sources, rng_data)
        xs, ys = draw_batch(list(episode.meta_sources), cfg.batch_size, rng_data)
        xt, yt = draw_batch(episode.meta_target, cfg.batch_size, rng_data)

        theta_sprime, l_ms = meta_source_step(theta, xs, ys,
                                              cfg.lr_meta_source, cfg.k_ms)
        out = episode_pass(theta_sprime, phi, xt, yt, cfg, rng_w, rng_labels)
        theta = update_theta(theta_sprime, out.theta_grads, cfg.lambda2)
        phi = update_phi(phi, out.phi_ce_grads, out.phi_meta_grads,
                         cfg.lambda3, cfg.phi_meta_sign)
        logs.append(IterationLog(it, l_ms, out.ce_term, out.kl_term,
                                 out.yhat_acc))
        if (cfg.checkpoint_every and on_checkpoint is not None
                and (it + 1) % cfg.checkpoint_every == 0):
            on_checkpoint(it + 1, theta, phi)
    return theta, phi, logs
