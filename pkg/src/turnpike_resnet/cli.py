"""Command-line experiment driver.

Subcommands: gen-data, train, diagnose, crop, grad-check.  Exit status is 0
on success, 1 for invalid input, 2 for numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import data as data_mod
from . import gradcheck, turnpike
from .config import ConfigError, ExperimentConfig
from .resnet import CheckpointError, NumericalError, init_params, load_checkpoint, save_checkpoint
from .softce import lower_bound_alpha
from .train import accuracy, fit, write_history_csv

log = logging.getLogger("turnpike_resnet")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class InvalidInput(Exception):
    pass


def load_config(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    for flag, key in (("out", "output.dir"), ("seed", "optimizer.seed"),
                      ("epochs", "optimizer.epochs"), ("limit", "dataset.limit"),
                      ("epsilon", "diagnostics.epsilon"), ("margin", "diagnostics.margin")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if args.config:
        return ExperimentConfig.from_file(args.config, args.recipe, overrides)
    return ExperimentConfig.build(args.recipe, None, overrides)


def build_dataset(cfg: ExperimentConfig):
    d = cfg["dataset"]
    if d["kind"] == "two_spirals":
        ds = data_mod.two_spirals(d["n_per_class"], d["noise_std"], d["turns"], d["seed"], d["r_max"])
        if d["limit"]:
            ds = ds.subset(slice(0, d["limit"]))
        return ds
    return data_mod.load_mnist_idx(d["images_path"], d["labels_path"], d["limit"] or None)


def _out_dir(cfg):
    path = cfg["output"]["dir"]
    os.makedirs(path, exist_ok=True)
    return path


def _check_dims(params, ds):
    if params.state_dim != ds.dim:
        raise InvalidInput(
            f"network state_dim {params.state_dim} does not match dataset feature dim {ds.dim}")


def _diagnostics(params, ds, cfg, out, epsilon=None):
    smoothing = cfg.smoothing()
    alpha = lower_bound_alpha(smoothing)
    prof = turnpike.profile(params, ds, smoothing, cfg["objective"]["reg_r"], alpha)
    report = turnpike.turnpike_report(prof, epsilon or cfg.epsilon(), alpha)
    turnpike.write_profile_csv(os.path.join(out, "profile.csv"), prof)
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(turnpike.report_text(report))
    return prof, report


def cmd_gen_data(args):
    cfg = load_config(args)
    ds = build_dataset(cfg)
    out = _out_dir(cfg)
    data_mod.write_csv(os.path.join(out, "dataset.csv"), ds)
    print(f"wrote {ds.size} samples with {ds.dim} features to {out}/dataset.csv")
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args)
    ds = build_dataset(cfg)
    n = cfg["network"]
    if n["state_dim"] != ds.dim:
        raise InvalidInput(f"network state_dim {n['state_dim']} does not match "
                           f"dataset feature dim {ds.dim}")
    out = _out_dir(cfg)
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(cfg.effective_text())
    params = init_params(n["arch"], n["depth"], n["state_dim"], cfg.activations,
                         n["hidden_dim"], cfg["optimizer"]["seed"])
    smoothing = cfg.smoothing()
    result = fit(params, ds, cfg.train_run(), smoothing)
    write_history_csv(os.path.join(out, "history.csv"), result.history)
    if result.diverged:
        print(f"training diverged: {result.message}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(os.path.join(out, "model.ckpt"), result.params,
                    {"num_classes": smoothing.num_classes, "p_d": repr(smoothing.p_d)})
    _, report = _diagnostics(result.params, ds, cfg, out)
    acc = result.history[-1][4] if result.history else accuracy(result.params, ds)
    obj = result.history[-1][1] if result.history else float("nan")
    print(f"accuracy={acc:.4f} entry_layer={report.entry_layer}/{result.params.depth} "
          f"objective={obj:.6g}")
    return EXIT_OK


def _load_ckpt(path):
    try:
        params, _ = load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise InvalidInput(str(exc)) from None
    return params


def _checkpoint_path(args, cfg):
    return args.checkpoint or os.path.join(cfg["output"]["dir"], "model.ckpt")


def cmd_diagnose(args):
    cfg = load_config(args)
    params = _load_ckpt(_checkpoint_path(args, cfg))
    ds = build_dataset(cfg)
    _check_dims(params, ds)
    out = _out_dir(cfg)
    prof, report = _diagnostics(params, ds, cfg, out)
    if args.sweep:
        alpha = lower_bound_alpha(cfg.smoothing())
        for i, rep in enumerate(turnpike.epsilon_sweep(prof, alpha, cfg.smoothing())):
            with open(os.path.join(out, f"report_sweep_{i:02d}.txt"), "w") as fh:
                fh.write(turnpike.report_text(rep))
    print(f"entry_layer={report.entry_layer}/{params.depth} "
          f"q_eps={len(report.q_eps)} dissipation_ok={all(report.dissipation_ok)}")
    return EXIT_OK


def cmd_crop(args):
    cfg = load_config(args)
    params = _load_ckpt(_checkpoint_path(args, cfg))
    ds = build_dataset(cfg)
    _check_dims(params, ds)
    out = _out_dir(cfg)
    smoothing = cfg.smoothing()
    prof = turnpike.profile(params, ds, smoothing, cfg["objective"]["reg_r"])
    report = turnpike.turnpike_report(prof, cfg.epsilon(), lower_bound_alpha(smoothing))
    entry, N = report.entry_layer, params.depth
    if entry >= N:
        log.warning("no turnpike found (entry layer = depth = %d); no cropped checkpoint written", N)
        return EXIT_OK
    margin = cfg["diagnostics"]["margin"]
    if entry + margin > N:
        print(f"note: margin {margin} clamped to {N - entry} (network depth {N})")
        margin = N - entry
    cropped = turnpike.crop(params, entry, margin)
    save_checkpoint(os.path.join(out, "cropped.ckpt"), cropped,
                    {"num_classes": smoothing.num_classes, "p_d": repr(smoothing.p_d)})
    full_acc, crop_acc = accuracy(params, ds), accuracy(cropped, ds)
    summary = (f"entry_layer = {entry}\nfull_depth = {N}\ncropped_depth = {cropped.depth}\n"
               f"full_accuracy = {full_acc!r}\ncropped_accuracy = {crop_acc!r}\n")
    with open(os.path.join(out, "crop_summary.txt"), "w") as fh:
        fh.write(summary)
    print(f"cropped depth {N} -> {cropped.depth}; accuracy {full_acc:.4f} -> {crop_acc:.4f}")
    return EXIT_OK


def cmd_gradcheck(args):
    if args.trials < 0:
        raise InvalidInput("trials must be >= 0")
    if args.trials == 0:
        log.warning("grad-check with 0 trials: nothing verified")
        print("grad-check: 0 trials, vacuous pass")
        return EXIT_OK
    try:
        summary = gradcheck.run_gradcheck(args.trials, args.seed or 0, args.state_dim,
                                          args.depth, args.samples, args.hidden_dim)
    except ValueError as exc:
        raise InvalidInput(str(exc)) from None
    for line in summary.lines():
        print(line)
    return EXIT_OK if summary.passed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="turnpike-resnet", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--recipe", help="built-in recipe: two-spirals or mnist-subset")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one configuration key (repeatable)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--limit", type=int)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--margin", type=int)
        return p

    common(sub.add_parser("gen-data", help="write the configured dataset as CSV")).set_defaults(
        func=cmd_gen_data)
    common(sub.add_parser("train", help="train and write all artifacts")).set_defaults(
        func=cmd_train)
    p = common(sub.add_parser("diagnose", help="profile and turnpike report of a checkpoint"))
    p.add_argument("--checkpoint")
    p.add_argument("--sweep", action="store_true", help="also emit 10 log-spaced epsilon reports")
    p.set_defaults(func=cmd_diagnose)
    p = common(sub.add_parser("crop", help="crop a checkpoint at its turnpike entry layer"))
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_crop)
    p = sub.add_parser("grad-check", help="verify adjoint gradients by finite differences")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--state-dim", type=int, default=3)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--hidden-dim", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidInput, data_mod.IdxError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
