"""Experiment runner: train / ttg / sweep / report subcommands.

All outputs are written atomically (temp file + rename) and are
byte-reproducible for a fixed config and seed list.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import tempfile

import numpy as np

from . import data, meta, metrics, nn, seeds, ttg, vnl
from .autodiff import NonFiniteError
from .config import (BlobSpec, ConfigError, ExperimentConfig, IdxSpec,
                     parse_config)
from .data import DataError
from .nn import CheckpointError

log = logging.getLogger("ttglab")


def _atomic_write(path: str, payload: str | bytes) -> None:
    mode = "wb" if isinstance(payload, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return repr(float(x))


def _angle_tag(angle: float) -> str:
    return f"{angle:g}".replace(".", "p").replace("-", "m")


def _json_dumps(obj) -> str:
    import json
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# dataset construction -----------------------------------------------------------

def build_domains(cfg: ExperimentConfig, seed: int,
                  ) -> tuple[list[data.LabeledSet], list[data.LabeledSet]]:
    """Source and target domains for one run seed."""
    ds = cfg.dataset
    if isinstance(ds, BlobSpec):
        train_seed = seeds.component_seed(seed, "dataset", 0)
        eval_seed = seeds.component_seed(seed, "dataset", 1)
        sources = data.build_blob_domains(ds.classes, ds.source_angles,
                                          ds.n_per_class, ds.noise_sigma,
                                          train_seed, dim=ds.dim)
        targets = data.build_blob_domains(ds.classes, ds.target_angles,
                                          ds.eval_n_per_class, ds.noise_sigma,
                                          eval_seed, dim=ds.dim)
        targets = [dataclasses.replace(t, domain_id=len(sources) + i)
                   for i, t in enumerate(targets)]
        return sources, targets
    if isinstance(ds, IdxSpec):
        with open(ds.images, "rb") as fh:
            x = data.parse_idx(fh.read())
        with open(ds.labels, "rb") as fh:
            y = data.parse_idx(fh.read())
        if len(x) != len(y):
            raise DataError("image and label files disagree on sample count")
        order = np.random.default_rng(
            seeds.component_seed(seed, "dataset", 2)).permutation(len(x))
        n_train = min(ds.train_per_domain, len(x))
        base_train = data.LabeledSet(x[order[:n_train]], y[order[:n_train]],
                                     0, 0.0)
        n_eval = min(ds.eval_per_target, max(len(x) - n_train, 0))
        if n_eval == 0:
            raise DataError("no samples left for target evaluation")
        base_eval = data.LabeledSet(x[order[n_train:n_train + n_eval]],
                                    y[order[n_train:n_train + n_eval]], 0, 0.0)
        sources, _ = data.build_rotated_domains(base_train, ds.source_angles, [])
        _, targets = data.build_rotated_domains(base_eval, [], ds.target_angles)
        targets = [dataclasses.replace(t, domain_id=len(sources) + i)
                   for i, t in enumerate(targets)]
        return sources, targets
    raise ConfigError(f"unsupported dataset kind {type(ds).__name__}")


# checkpoints --------------------------------------------------------------------

def save_models(path: str, theta: nn.MlpParams, phi: vnl.VarNetParams,
                seed: int) -> None:
    params = {**theta.flat(prefix="theta."), **phi.flat(prefix="phi.")}
    meta_info = {"theta_dims": list(theta.dims),
                 "phi_in": phi.in_dim, "phi_hidden": list(phi.hidden),
                 "phi_out": phi.out_dim, "seed": seed}
    buf_path = path + ".part"
    nn.save_checkpoint(buf_path, params, meta_info)
    os.replace(buf_path, path)


def load_models(path: str) -> tuple[nn.MlpParams, vnl.VarNetParams, dict]:
    params, info = nn.load_checkpoint(path)
    try:
        theta = nn.MlpParams.from_flat(info["theta_dims"], params,
                                       prefix="theta.")
        phi = vnl.VarNetParams.from_flat(info["phi_in"], info["phi_hidden"],
                                         info["phi_out"], params,
                                         prefix="phi.")
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing entry {exc}") from exc
    return theta, phi, info


# commands -----------------------------------------------------------------------

def _train_one(cfg: ExperimentConfig, seed: int, out_dir: str | None,
               plain: bool = False):
    train_cfg = meta.TrainConfig(
        **{**cfg.train.__dict__, "seed": seed,
           **({"lambda1": 0.0, "lambda2": 0.0, "lambda3": 0.0,
               "second_order": False, "label_mode": "hard"} if plain else {})})
    sources, _ = build_domains(cfg, seed)

    def on_checkpoint(it, theta, phi):
        if out_dir is not None:
            tag = "plain_" if plain else ""
            save_models(os.path.join(
                out_dir, f"checkpoint_{tag}seed{seed}_iter{it}.ckpt"),
                theta, phi, seed)

    return meta.train_meta(train_cfg, sources, hidden=cfg.model.hidden,
                           phi_hidden=cfg.model.phi_hidden,
                           on_checkpoint=on_checkpoint)


def cmd_train(cfg: ExperimentConfig, out_dir: str, plain: bool = False) -> int:
    os.makedirs(out_dir, exist_ok=True)
    tag = "plain_" if plain else ""
    for seed in cfg.seeds:
        theta, phi, logs = _train_one(cfg, seed, out_dir, plain=plain)
        rows = ["iter,l_ms,l_ce_meta,kl,yhat_acc"]
        rows += [f"{r.iteration},{_fmt(r.meta_source_loss)},"
                 f"{_fmt(r.meta_target_ce)},{_fmt(r.kl_term)},"
                 f"{_fmt(r.yhat_acc)}" for r in logs]
        _atomic_write(os.path.join(out_dir, f"train_{tag}seed{seed}.csv"),
                      "\n".join(rows) + "\n")
        save_models(os.path.join(out_dir, f"checkpoint_{tag}seed{seed}.ckpt"),
                    theta, phi, seed)
        log.info("trained %sseed %d (%d iterations)", tag, seed, len(logs))
    return 0


def _run_stream(cfg: ExperimentConfig, theta, phi, target, method: str,
                seed: int, batch_size: int) -> ttg.StreamResult:
    stream = data.stream_batches(
        target, batch_size,
        seeds.component_seed(seed, "stream", target.domain_id))
    run_cfg = ttg.TtgConfig(method=method, lr=cfg.ttg.lr,
                            batch_size=batch_size,
                            mc_predict=cfg.ttg.mc_predict, seed=seed,
                            episodic_reset=cfg.ttg.episodic_reset)
    rng = seeds.component_rng(seed, "ttg")
    return ttg.ttg_run(theta, phi, stream, run_cfg, rng)


def _write_stream_result(out_dir: str, label: str, method: str, seed: int,
                         target: data.LabeledSet, batch_size: int,
                         result: ttg.StreamResult) -> None:
    base = f"ttg_{label}_target{_angle_tag(target.angle_deg)}_seed{seed}"
    rows = ["step,acc,mean_conf"]
    rows += [f"{k + 1},{_fmt(a)},{_fmt(c)}"
             for k, (a, c) in enumerate(zip(result.step_acc, result.step_conf))]
    _atomic_write(os.path.join(out_dir, base + ".csv"), "\n".join(rows) + "\n")
    report = metrics.ece(result.probs, result.labels)
    _atomic_write(os.path.join(out_dir, base + ".json"), _json_dumps({
        "label": label, "method": method, "seed": seed,
        "target_angle": target.angle_deg, "batch_size": batch_size,
        "n_steps": result.n_steps, "final_acc": result.final_acc,
        "ece": report.ece,
    }))


def cmd_ttg(cfg: ExperimentConfig, checkpoint: str, methods: list[str],
            out_dir: str, label: str | None = None) -> int:
    os.makedirs(out_dir, exist_ok=True)
    theta, phi, _ = load_models(checkpoint)
    for seed in cfg.seeds:
        _, targets = build_domains(cfg, seed)
        if targets and theta.input_dim != targets[0].x.shape[1]:
            raise CheckpointError(
                f"checkpoint expects inputs of width {theta.input_dim}, "
                f"dataset provides {targets[0].x.shape[1]}")
        for method in methods:
            for target in targets:
                result = _run_stream(cfg, theta, phi, target, method, seed,
                                     cfg.ttg.batch_size)
                _write_stream_result(out_dir, label or method, method, seed,
                                     target, cfg.ttg.batch_size, result)
                log.info("ttg %s target %g seed %d: final acc %.4f", method,
                         target.angle_deg, seed, result.final_acc)
    return 0


def cmd_sweep(cfg: ExperimentConfig, batch_sizes: list[int],
              methods: list[str], out_dir: str) -> int:
    """Method x batch-size x seed grid. vnl runs on the meta-trained model;
    baselines run on a plainly trained one (matching the ladder protocol)."""
    os.makedirs(out_dir, exist_ok=True)
    needs_plain = any(m != "vnl" for m in methods)
    for seed in cfg.seeds:
        theta_meta, phi_meta, _ = _train_one(cfg, seed, None, plain=False)
        theta_plain = phi_plain = None
        if needs_plain:
            theta_plain, phi_plain, _ = _train_one(cfg, seed, None, plain=True)
        _, targets = build_domains(cfg, seed)
        for method in methods:
            theta = theta_meta if method == "vnl" else theta_plain
            phi = phi_meta if method == "vnl" else phi_plain
            for batch_size in batch_sizes:
                for target in targets:
                    result = _run_stream(cfg, theta, phi, target, method,
                                         seed, batch_size)
                    base = (f"sweep_{method}_b{batch_size}_"
                            f"target{_angle_tag(target.angle_deg)}_seed{seed}")
                    _atomic_write(os.path.join(out_dir, base + ".json"),
                                  _json_dumps({
                                      "label": method, "method": method,
                                      "seed": seed,
                                      "target_angle": target.angle_deg,
                                      "batch_size": batch_size,
                                      "n_steps": result.n_steps,
                                      "final_acc": result.final_acc,
                                      "ece": metrics.ece(result.probs,
                                                         result.labels).ece,
                                  }))
                    log.info("sweep %s b=%d target %g seed %d: acc %.4f",
                             method, batch_size, target.angle_deg, seed,
                             result.final_acc)
    return 0


def cmd_report(in_dir: str, out_file: str) -> int:
    from . import report
    return report.write_report(in_dir, out_file)


# entry point ---------------------------------------------------------------------

def _parse_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttglab",
        description="episodic training and online test-time generalization")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run episodic meta-training")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--plain", action="store_true",
                         help="supervised-only reference training")

    p_ttg = sub.add_parser("ttg", help="online generalization over targets")
    p_ttg.add_argument("--config", required=True)
    p_ttg.add_argument("--checkpoint", required=True)
    p_ttg.add_argument("--method", required=True,
                       help="comma-separated method list")
    p_ttg.add_argument("--out", required=True)
    p_ttg.add_argument("--label", default=None,
                       help="row label for the report (default: method name)")

    p_sweep = sub.add_parser("sweep", help="method x batch-size x seed grid")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--batch-sizes", default="16,64,128")
    p_sweep.add_argument("--methods", default="tent,vnl")
    p_sweep.add_argument("--out", required=True)

    p_report = sub.add_parser("report", help="aggregate results and figures")
    p_report.add_argument("--in", dest="in_dir", required=True)
    p_report.add_argument("--out", required=True)
    return parser


def run(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("TTGLAB_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "train":
        cfg = parse_config(args.config)
        return cmd_train(cfg, args.out, plain=args.plain)
    if args.command == "ttg":
        cfg = parse_config(args.config)
        methods = _parse_list(args.method)
        for m in methods:
            if m not in ttg.METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if args.label is not None and len(methods) > 1:
            raise ConfigError("--label only applies to a single method")
        return cmd_ttg(cfg, args.checkpoint, methods, args.out, args.label)
    if args.command == "sweep":
        cfg = parse_config(args.config)
        methods = _parse_list(args.methods)
        for m in methods:
            if m not in ttg.METHODS:
                raise ConfigError(f"unknown method {m!r}")
        sizes = [int(b) for b in _parse_list(args.batch_sizes)]
        return cmd_sweep(cfg, sizes, methods, args.out)
    if args.command == "report":
        return cmd_report(args.in_dir, args.out)
    raise AssertionError("unreachable")


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
