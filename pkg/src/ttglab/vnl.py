"""Variational neighbor labels: per-class prototypes, a shared network
producing a diagonal Gaussian over latent class weights, reparameterized
sampling, the neighbor-label distribution, label sampling modes, and the
closed-form KL between two such Gaussians.

The same network maps prototypes to the Gaussian whether the prototypes
were built from predicted assignments (prior) or true labels (posterior);
the two distributions differ only through their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Array, Tape, Var

STD_FLOOR = 1e-6
EMPTY_CLASS_EPS = 1e-9

LABEL_MODES = ("hard", "sampled", "gumbel_st", "soft")


@dataclass(frozen=True)
class Prototypes:
    """Per-class summary rows: mean feature joined with a class output summary.

    Classes with (near) zero assignment mass fall back to the classifier
    head row plus a one-hot summary, flagged in `filled_mask`.
    """

    per_class: Var          # [C, d + C]
    filled_mask: Array      # bool [C]


@dataclass(frozen=True)
class WGaussian:
    """Diagonal Gaussian over a [C, d] bank of class weight vectors."""

    mean: Var
    std: Var


@dataclass(frozen=True)
class NeighborLabelDist:
    probs: Var              # [B, C], rows on the simplex


@dataclass(frozen=True)
class SampledLabels:
    labels: Var             # [B, C]; one-hot forward value except in soft mode
    mode: str


@dataclass(frozen=True)
class VarNetParams:
    """Shared prior/posterior network: ReLU trunk plus mean and std heads."""

    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    trunk: tuple[tuple[Array, Array], ...]
    mean_head: tuple[Array, Array]
    std_head: tuple[Array, Array]

    def flat(self, prefix: str = "") -> dict[str, Array]:
        out = {}
        for i, (w, b) in enumerate(self.trunk):
            out[f"{prefix}trunk.{i}.w"] = w
            out[f"{prefix}trunk.{i}.b"] = b
        out[f"{prefix}mean.w"], out[f"{prefix}mean.b"] = self.mean_head
        out[f"{prefix}std.w"], out[f"{prefix}std.b"] = self.std_head
        return out

    @staticmethod
    def from_flat(in_dim, hidden, out_dim, flat: dict,
                  prefix: str = "") -> "VarNetParams":
        hidden = tuple(int(h) for h in hidden)
        trunk = tuple((np.asarray(flat[f"{prefix}trunk.{i}.w"], dtype=np.float64),
                       np.asarray(flat[f"{prefix}trunk.{i}.b"], dtype=np.float64))
                      for i in range(len(hidden)))
        mean_head = (np.asarray(flat[f"{prefix}mean.w"], dtype=np.float64),
                     np.asarray(flat[f"{prefix}mean.b"], dtype=np.float64))
        std_head = (np.asarray(flat[f"{prefix}std.w"], dtype=np.float64),
                    np.asarray(flat[f"{prefix}std.b"], dtype=np.float64))
        return VarNetParams(int(in_dim), hidden, int(out_dim),
                            trunk, mean_head, std_head)


STD_BIAS_INIT = -2.0  # start draws tight; training widens where warranted


def init_varnet(feature_dim: int, n_classes: int, hidden=(128, 128),
                seed: int = 0, warm_start: bool = True) -> VarNetParams:
    """Trunk of len(hidden) ReLU layers over [mean feature | class summary]
    rows, then linear mean/std heads of width feature_dim.

    With warm_start (and hidden widths >= 2*(feature_dim+n_classes)), the
    trunk starts as a sign-split identity and the mean head reconstructs the
    prototype's feature part, so the labeler begins as a nearest-class-mean
    classifier instead of a random map; training refines it from there. Any
    narrower width falls back to a plain random init.
    """
    in_dim = feature_dim + n_classes
    dims = (in_dim, *hidden)
    rng = np.random.default_rng(seed)

    def glorot(fan_out, fan_in, scale=1.0):
        bound = scale * np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_out, fan_in))

    warm = warm_start and all(h >= 2 * in_dim for h in hidden)
    trunk = []
    for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        if not warm:
            trunk.append((glorot(fo, fi), np.zeros(fo)))
        elif i == 0:
            # sign-split embedding: relu(w x) carries x = h[:k] - h[k:2k]
            w = glorot(fo, fi, scale=0.1)
            w[:in_dim, :] = np.eye(in_dim)
            w[in_dim:2 * in_dim, :] = -np.eye(in_dim)
            trunk.append((w, np.zeros(fo)))
        else:
            w = glorot(fo, fi, scale=0.1)
            w[:2 * in_dim, :2 * in_dim] = np.eye(2 * in_dim)
            trunk.append((w, np.zeros(fo)))
    mean_w = glorot(feature_dim, dims[-1], scale=0.1 if warm else 1.0)
    if warm:
        mean_w[:, :feature_dim] = np.eye(feature_dim)
        mean_w[:, in_dim:in_dim + feature_dim] = -np.eye(feature_dim)
    mean_head = (mean_w, np.zeros(feature_dim))
    std_head = (glorot(feature_dim, dims[-1]) * 0.1,
                np.full(feature_dim, STD_BIAS_INIT))
    return VarNetParams(in_dim, tuple(hidden), feature_dim,
                        trunk, mean_head, std_head)


VarNetVars = dict[str, Var]


def lift_varnet(tape: Tape, phi: VarNetParams, prefix: str = "phi") -> VarNetVars:
    return {k: tape.leaf(v, name=f"{prefix}.{k}") for k, v in phi.flat().items()}


def class_prototypes(features: Var, assignment: Var | Array,
                     outputs: Var | Array, head_w: Var) -> Prototypes:
    """Assignment-weighted mean features and output summaries per class.

    `assignment` rows may be one-hot or soft weights; `outputs` rows are
    whatever class summary should be averaged alongside the features
    (predicted probabilities on the prior path, one-hot labels on the
    posterior path).
    """
    tape = features.tape
    if not isinstance(assignment, Var):
        assignment = tape.constant(assignment)
    if not isinstance(outputs, Var):
        outputs = tape.constant(outputs)
    n_classes = assignment.shape[1]

    mass = assignment.sum(axis=0)                       # [C]
    filled = mass.value >= EMPTY_CLASS_EPS
    # Empty classes would divide 0/0; give them a harmless denominator, the
    # fallback mask zeroes their weighted means anyway.
    denom = (mass + tape.constant(np.where(filled, 0.0, 1.0))).reshape((n_classes, 1))
    feat_means = (assignment.T @ features) / denom      # [C, d]
    out_means = (assignment.T @ outputs) / denom        # [C, C]

    keep = tape.constant(filled.astype(np.float64).reshape(n_classes, 1))
    fallback_summary = tape.constant(np.eye(n_classes))
    feat_part = keep * feat_means + (1.0 - keep) * head_w
    summary_part = keep * out_means + (1.0 - keep) * fallback_summary
    return Prototypes(ad.concat([feat_part, summary_part], axis=1), filled)


def varnet_forward(phi: VarNetVars, x: Var, n_trunk: int) -> tuple[Var, Var]:
    h = x
    for i in range(n_trunk):
        h = ad.relu(h @ phi[f"trunk.{i}.w"].T + phi[f"trunk.{i}.b"])
    mean = h @ phi["mean.w"].T + phi["mean.b"]
    raw_std = h @ phi["std.w"].T + phi["std.b"]
    return mean, ad.softplus(raw_std) + STD_FLOOR


def variational_w(phi: VarNetVars, protos: Prototypes,
                  n_trunk: int | None = None) -> WGaussian:
    """Map prototype rows through the shared network to a diagonal Gaussian."""
    if n_trunk is None:
        n_trunk = sum(1 for k in phi if k.endswith(".w") and k.startswith("trunk"))
    expected = phi["trunk.0.w"].shape[1]
    if protos.per_class.shape[1] != expected:
        raise ValueError(
            f"prototype width {protos.per_class.shape[1]} != network input {expected}")
    mean, std = varnet_forward(phi, protos.per_class, n_trunk)
    return WGaussian(mean, std)


def sample_w(g: WGaussian, rng: np.random.Generator) -> Var:
    """Reparameterized draw: mean + std * eps with eps a recorded constant."""
    eps = g.mean.tape.constant(rng.standard_normal(g.mean.shape))
    return g.mean + g.std * eps


def neighbor_label_dist(w: Var, features: Var,
                        temperature: float = 1.0) -> NeighborLabelDist:
    """Classify each sample against the weight bank: softmax(z w^T / tau)."""
    logits = (features @ w.T) * (1.0 / temperature)
    return NeighborLabelDist(nn.softmax(logits))


def sample_labels(dist: NeighborLabelDist, mode: str, rng: np.random.Generator,
                  gumbel_tau: float = 1.0) -> SampledLabels:
    """Draw labels from a neighbor-label distribution.

    hard      argmax one-hot, ties to the lowest class index (no gradient)
    sampled   one categorical draw per row (no gradient)
    gumbel_st one-hot forward value with a relaxed softmax gradient path
    soft      the distribution itself, unchanged
    """
    tape = dist.probs.tape
    p = dist.probs.value
    n_classes = p.shape[1]
    if mode == "soft":
        return SampledLabels(dist.probs, mode)
    if mode == "hard":
        hard = nn.onehot(np.argmax(p, axis=1), n_classes)
        return SampledLabels(tape.constant(hard), mode)
    if mode == "sampled":
        u = rng.random(p.shape[0])
        idx = np.minimum((u[:, None] > np.cumsum(p, axis=1)).sum(axis=1),
                         n_classes - 1)
        return SampledLabels(tape.constant(nn.onehot(idx, n_classes)), mode)
    if mode == "gumbel_st":
        noise = tape.constant(rng.gumbel(size=p.shape))
        scores = (ad.log(ad.clip_min(dist.probs, nn.PROB_FLOOR)) + noise) \
            * (1.0 / gumbel_tau)
        relaxed = nn.softmax(scores)
        hard = tape.constant(nn.onehot(np.argmax(relaxed.value, axis=1), n_classes))
        return SampledLabels(ad.straight_through(hard, relaxed), mode)
    raise ValueError(f"unknown label mode {mode!r}")


def kl_diag_gaussians(q: WGaussian, p: WGaussian) -> Var:
    """Sum over coordinates of KL(N(mq, sq^2) || N(mp, sp^2)), closed form."""
    if q.mean.shape != p.mean.shape:
        raise ValueError("Gaussian shapes differ")
    var_q = q.std * q.std
    var_p = p.std * p.std
    terms = (ad.log(p.std) - ad.log(q.std)
             + (var_q + (q.mean - p.mean) ** 2) / (2.0 * var_p)
             - 0.5)
    return terms.sum()
