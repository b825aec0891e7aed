"""Online test-time generalization over a target stream.

The running parameters are carried across batches: each step generates
labels for the current batch (from the frozen labeler's prior in vnl mode,
from the model's own predictions for the pseudo-label baselines), takes one
update step, and predicts on the same batch with the updated model. Ground
truth enters only the scorer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn, vnl
from .autodiff import Array, Tape
from .data import DomainStream
from .nn import MlpParams
from .vnl import VarNetParams

METHODS = ("source_only", "tent", "hard_pl", "soft_pl", "prob_pl", "vnl")


@dataclass(frozen=True)
class TtgConfig:
    method: str = "vnl"
    lr: float = 1e-4
    batch_size: int = 20
    mc_predict: int = 1
    seed: int = 0
    episodic_reset: bool = False  # restart from the source snapshot each batch

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.mc_predict < 1:
            raise ValueError("mc_predict must be >= 1")


@dataclass
class StreamResult:
    step_acc: list[float]
    step_conf: list[float]
    probs: Array = field(repr=False)
    labels: Array = field(repr=False)
    final_acc: float = 0.0

    @property
    def n_steps(self) -> int:
        return len(self.step_acc)


def predict_expected(theta: MlpParams, x: Array, mc_predict: int = 1) -> Array:
    """Arithmetic mean of mc_predict softmax passes of the updated model."""
    if mc_predict < 1:
        raise ValueError("mc_predict must be >= 1")
    total = nn.probs_np(theta, x)
    for _ in range(mc_predict - 1):
        total = total + nn.probs_np(theta, x)
    return total / mc_predict


def _ce_update(theta: MlpParams, x: Array, targets: Array, lr: float,
               ) -> MlpParams:
    """One cross-entropy step on fixed targets."""
    def objective(params):
        layers = [(params[f"layers.{i}.w"], params[f"layers.{i}.b"])
                  for i in range(len(theta.layers))]
        tape = params["layers.0.w"].tape
        probs = nn.softmax(nn.forward_logits(layers, tape.constant(x)))
        return nn.cross_entropy(probs, targets)

    _, grads = ad.value_and_grad(objective, theta.flat())
    return nn.sgd_step(theta, grads, lr)


def vnl_step(theta: MlpParams, phi: VarNetParams, x: Array, lr: float,
             rng: np.random.Generator, mc_predict: int = 1,
             ) -> tuple[MlpParams, Array]:
    """Neighbor-label update: build the prior weight-bank Gaussian from the
    running model's own predictions, sample a bank and then labels, take one
    step, and predict on the same batch. The labeler stays frozen."""
    tape = Tape()
    theta_vars = nn.lift_mlp(tape, theta)
    phi_vars = vnl.lift_varnet(tape, phi)
    xv = tape.constant(x)
    feats = nn.forward_features(theta_vars, xv)
    head_w, head_b = theta_vars[-1]
    probs = nn.softmax(feats @ head_w.T + head_b)

    predicted = nn.onehot(np.argmax(probs.value, axis=1), theta.n_classes)
    protos = vnl.class_prototypes(feats, predicted, probs, head_w)
    prior = vnl.variational_w(phi_vars, protos, n_trunk=len(phi.trunk))
    w = vnl.sample_w(prior, rng)
    dist = vnl.neighbor_label_dist(w, feats)
    labels = vnl.sample_labels(dist, "sampled", rng)

    updated = _ce_update(theta, x, labels.labels.value, lr)
    return updated, predict_expected(updated, x, mc_predict)


def baseline_step(theta: MlpParams, x: Array, method: str, lr: float,
                  rng: np.random.Generator) -> tuple[MlpParams, Array]:
    """Entropy-minimization and pseudo-label baselines; labels come from the
    model's own predictions on the batch."""
    if method == "source_only":
        return theta, predict_expected(theta, x)
    if method == "tent":
        def objective(params):
            layers = [(params[f"layers.{i}.w"], params[f"layers.{i}.b"])
                      for i in range(len(theta.layers))]
            tape = params["layers.0.w"].tape
            probs = nn.softmax(nn.forward_logits(layers, tape.constant(x)))
            return nn.entropy_loss(probs)

        _, grads = ad.value_and_grad(objective, theta.flat())
        updated = nn.sgd_step(theta, grads, lr)
        return updated, predict_expected(updated, x)

    own = nn.probs_np(theta, x)
    if method == "hard_pl":
        targets = nn.onehot(np.argmax(own, axis=1), theta.n_classes)
    elif method == "soft_pl":
        targets = own
    elif method == "prob_pl":
        u = rng.random(len(own))
        idx = np.minimum((u[:, None] > np.cumsum(own, axis=1)).sum(axis=1),
                         theta.n_classes - 1)
        targets = nn.onehot(idx, theta.n_classes)
    else:
        raise ValueError(f"unknown method {method!r}")
    updated = _ce_update(theta, x, targets, lr)
    return updated, predict_expected(updated, x)


def ttg_run(theta_s: MlpParams, phi_s: VarNetParams | None,
            stream: DomainStream, cfg: TtgConfig,
            rng: np.random.Generator | None = None) -> StreamResult:
    """Walk the stream once, updating online and scoring each batch."""
    if len(stream) == 0:
        raise ValueError("empty target stream")
    if cfg.method == "vnl" and phi_s is None:
        raise ValueError("vnl needs the trained labeler parameters")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    theta = theta_s
    step_acc, step_conf, all_probs, all_labels = [], [], [], []
    for x, y in stream:
        if cfg.episodic_reset:
            theta = theta_s
        if cfg.method == "vnl":
            theta, probs = vnl_step(theta, phi_s, x, cfg.lr, rng,
                                    cfg.mc_predict)
        else:
            theta, probs = baseline_step(theta, x, cfg.method, cfg.lr, rng)
        step_acc.append(float(np.mean(np.argmax(probs, axis=1) == y)))
        step_conf.append(float(np.mean(probs.max(axis=1))))
        all_probs.append(probs)
        all_labels.append(y)
    probs = np.concatenate(all_probs)
    labels = np.concatenate(all_labels)
    final_acc = float(np.mean(np.argmax(probs, axis=1) == labels))
    return StreamResult(step_acc, step_conf, probs, labels, final_acc)
