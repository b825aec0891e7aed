"""Small ReLU MLPs with a feature/head split, the loss zoo, and plain SGD.

Parameters are immutable snapshots: every update returns a new bundle and
never touches its input. The checkpoint format is a one-line JSON manifest
followed by raw little-endian float64 arrays in manifest order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, GradMap, Tape, Var

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-9

LayerVars = list[tuple[Var, Var]]


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed or inconsistent with its manifest."""


@dataclass(frozen=True)
class MlpParams:
    """Weights and biases of a ReLU MLP whose last layer is the linear head."""

    dims: tuple[int, ...]
    layers: tuple[tuple[Array, Array], ...]

    @property
    def split_index(self) -> int:
        return len(self.layers) - 1

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def feature_dim(self) -> int:
        return self.dims[-2]

    @property
    def n_classes(self) -> int:
        return self.dims[-1]

    @property
    def head_weight(self) -> Array:
        return self.layers[-1][0]

    def flat(self, prefix: str = "") -> dict[str, Array]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"{prefix}layers.{i}.w"] = w
            out[f"{prefix}layers.{i}.b"] = b
        return out

    @staticmethod
    def from_flat(dims, flat: dict, prefix: str = "") -> "MlpParams":
        dims = tuple(int(d) for d in dims)
        layers = tuple(
            (np.asarray(flat[f"{prefix}layers.{i}.w"], dtype=np.float64),
             np.asarray(flat[f"{prefix}layers.{i}.b"], dtype=np.float64))
            for i in range(len(dims) - 1))
        return MlpParams(dims, layers)


def init_mlp(dims, seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases; deterministic for a given seed."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return MlpParams(dims, tuple(layers))


def lift_mlp(tape: Tape, mlp: MlpParams, prefix: str = "theta") -> LayerVars:
    """Register the MLP's parameters as named leaves on a tape."""
    return [(tape.leaf(w, name=f"{prefix}.layers.{i}.w"),
             tape.leaf(b, name=f"{prefix}.layers.{i}.b"))
            for i, (w, b) in enumerate(mlp.layers)]


def forward_features(layers: LayerVars, x: Var) -> Var:
    """ReLU activations after every pre-head layer."""
    if x.shape[1] != layers[0][0].shape[1]:
        raise ValueError(
            f"input width {x.shape[1]} != expected {layers[0][0].shape[1]}")
    h = x
    for w, b in layers[:-1]:
        h = ad.relu(h @ w.T + b)
    return h


def forward_logits(layers: LayerVars, x: Var) -> Var:
    z = forward_features(layers, x)
    w, b = layers[-1]
    return z @ w.T + b


def softmax(logits: Var) -> Var:
    """Row softmax with max-subtraction; the shift is a non-gradient constant."""
    shift = logits.tape.constant(np.max(logits.value, axis=1, keepdims=True))
    e = ad.exp(logits - shift)
    return e / e.sum(axis=1, keepdims=True)


def _check_simplex(rows: Array, what: str) -> None:
    if rows.size == 0:
        return
    if np.any(rows < -SIMPLEX_TOL) or np.any(
            np.abs(rows.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise ValueError(f"{what} rows are not on the probability simplex")


def cross_entropy(probs: Var, targets, from_logits: bool = False) -> Var:
    """Batch mean of -sum_c target_c * log p_c, with the log floored at 1e-12."""
    if from_logits:
        probs = softmax(probs)
    if not isinstance(targets, Var):
        targets = probs.tape.constant(targets)
    _check_simplex(targets.value, "target")
    if probs.shape[0] == 0:
        raise ValueError("cross_entropy over an empty batch is undefined")
    per_row = -(targets * ad.log(ad.clip_min(probs, PROB_FLOOR))).sum(axis=1)
    return per_row.mean()


def entropy_loss(probs: Var) -> Var:
    """Batch mean of the Shannon entropy of each row."""
    if probs.shape[0] == 0:
        raise ValueError("entropy over an empty batch is undefined")
    per_row = -(probs * ad.log(ad.clip_min(probs, PROB_FLOOR))).sum(axis=1)
    return per_row.mean()


def sgd_step(mlp: MlpParams, grads: GradMap, lr: float,
             prefix: str = "") -> MlpParams:
    """One plain gradient step; the input snapshot is left untouched."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    layers = []
    for i, (w, b) in enumerate(mlp.layers):
        kw, kb = f"{prefix}layers.{i}.w", f"{prefix}layers.{i}.b"
        if kw not in grads or kb not in grads:
            raise KeyError(f"missing gradient entry for layer {i}")
        layers.append((w - lr * grads[kw], b - lr * grads[kb]))
    return MlpParams(mlp.dims, tuple(layers))


def sgd_step_vars(layers: LayerVars, grads: list[tuple[Var, Var]],
                  lr: float) -> LayerVars:
    """Traced gradient step, so later losses can differentiate through it."""
    return [(w - lr * gw, b - lr * gb)
            for (w, b), (gw, gb) in zip(layers, grads)]


# plain-array conveniences ----------------------------------------------------

def logits_np(mlp: MlpParams, x: Array) -> Array:
    tape = Tape()
    return forward_logits(lift_mlp(tape, mlp), tape.constant(x)).value


def probs_np(mlp: MlpParams, x: Array) -> Array:
    tape = Tape()
    return softmax(forward_logits(lift_mlp(tape, mlp), tape.constant(x))).value


def features_np(mlp: MlpParams, x: Array) -> Array:
    tape = Tape()
    return forward_features(lift_mlp(tape, mlp), tape.constant(x)).value


def onehot(labels: Array, n_classes: int) -> Array:
    return np.eye(n_classes)[np.asarray(labels, dtype=np.intp)]


# checkpointing ----------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, Array], meta: dict | None = None) -> None:
    """Write named float64 arrays after a one-line JSON manifest."""
    manifest = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": [[name, list(arr.shape)] for name, arr in params.items()],
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, Array], dict]:
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            manifest = json.loads(header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from exc
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {manifest.get('version')!r}")
        params = {}
        for name, shape in manifest["params"]:
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise CheckpointError(f"checkpoint truncated while reading {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last declared array")
    return params, manifest["meta"]
