"""Command-line front end.

Subcommands: train, attack, eval-curve, og-test, saliency, report, verify.
Exit codes: 0 success, 1 usage error, 2 runtime error, 3 verification
failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import shutil
import sys

from . import evalkit, reporting
from .attacks import ThreatModel, UNBOUNDED, classifier_view, composite_view, pgd_attack, threat_preset
from .config import load_config, parse_config
from .data import batch_iterator, load_dataset
from .errors import AtganError, ConfigError
from .seeding import derive_seed
from .tensorio import save_tensors
from .trainer import load_checkpoint, restore_models, run_training

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(sub):
    sub.add_argument("--data-root", default=None, help="directory holding dataset files")
    sub.add_argument("--seed", type=int, default=0, help="evaluation seed")
    sub.add_argument("--fast", action="store_true",
                     help="evaluate on a fixed 1000-sample stratified subset")


def build_parser() -> _Parser:
    parser = _Parser(prog="atgan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run a training configuration")
    p.add_argument("--config", required=True, help="config JSON path or preset name")
    p.add_argument("--out", required=True, help="output directory")
    _common(p)

    p = sub.add_parser("attack", help="attack a trained checkpoint")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--eps", required=True,
                   help="perturbation budget, a number or 'unbounded'")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--step-size", type=float, default=0.01)
    p.add_argument("--init", choices=["clean", "random"], default="random")
    p.add_argument("--out", required=True, help="output container file")
    p.add_argument("--limit", type=int, default=None, help="attack only the first N samples")
    _common(p)

    p = sub.add_parser("eval-curve",
                       help="robust accuracy over an epsilon grid")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--grid", default=None,
                   help="comma-separated epsilons; default is the dataset preset grid")
    p.add_argument("--steps", type=int, default=None, help="attack steps per point")
    p.add_argument("--step-size", type=float, default=None)
    _common(p)

    p = sub.add_parser("og-test",
                       help="obfuscated-gradients battery: long-horizon and unconstrained attacks")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output JSON file")
    p.add_argument("--long-steps", type=int, default=1000)
    p.add_argument("--unbounded-steps", type=int, default=100)
    p.add_argument("--unbounded-step-size", type=float, default=0.05)
    _common(p)

    p = sub.add_parser("saliency",
                       help="adversarial-example and saliency grids")
    p.add_argument("--model", required=True, nargs="+",
                   help="one or more checkpoints; one grid row per model")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--grid", default=None, help="comma-separated evaluation epsilons")
    p.add_argument("--sample-index", type=int, default=0)
    _common(p)

    p = sub.add_parser("report",
                       help="assemble curve overlays, tables, and grids from manifests")
    p.add_argument("--manifests", required=True, nargs="+")
    p.add_argument("--out", required=True)

    p = sub.add_parser("verify", help="run the acceptance suite")
    p.add_argument("--out", required=True, help="output directory for verify.json")
    _common(p)

    return parser


def _load_eval_data(config, args, split="test"):
    root = args.data_root or config.data_root
    data = load_dataset(config.profile, root, split, seed=config.seed,
                        synthetic=config.synthetic_data)
    return evalkit.fast_subset(data, getattr(args, "fast", False))


def _view_for(ckpt):
    restored = restore_models(ckpt)
    if ckpt.kind == "atgan":
        view = composite_view(restored["generator"], restored["discriminator"])
        kind = "composite"
    else:
        view = classifier_view(restored["model"])
        kind = "classifier"
    return view, kind, restored["config"]


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.data_root:
        config = parse_config({**config.to_json(),
                               "data": {"root": args.data_root,
                                        "synthetic": config.synthetic_data}})
    os.makedirs(args.out, exist_ok=True)
    train_data = load_dataset(config.profile, config.data_root, "train",
                              seed=config.seed, synthetic=config.synthetic_data)
    eval_data = load_dataset(config.profile, config.data_root, "test",
                             seed=config.seed, synthetic=config.synthetic_data)
    eval_data = evalkit.fast_subset(eval_data, args.fast)
    config_path = os.path.join(args.out, "config.json")
    with open(config_path, "w") as f:
        json.dump(config.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    result = run_training(config, train_data, out_dir=args.out, eval_data=eval_data)
    manifest = reporting.write_manifest(
        args.out, config,
        checkpoints=[result.checkpoint_path],
        artifacts=[config_path, result.metrics_path])
    print(f"trained {reporting.experiment_id(config)}: "
          f"{result.checkpoint.step} steps -> {result.checkpoint_path}")
    print(f"manifest: {manifest}")
    return EXIT_OK


def _parse_eps(text):
    if text in ("unbounded", "inf"):
        return UNBOUNDED
    return float(text)


def cmd_attack(args) -> int:
    ckpt = load_checkpoint(args.model)
    view, _, config = _view_for(ckpt)
    data = _load_eval_data(config, args)
    if args.limit is not None:
        data = data.take(slice(0, args.limit))
    threat = ThreatModel(_parse_eps(args.eps), steps=args.steps,
                         step_size=args.step_size,
                         init="random_uniform" if args.init == "random" else "clean")
    pieces, max_delta = [], 0.0
    for i, batch in enumerate(batch_iterator(data, 256)):
        adv = pgd_attack(view, batch, threat, derive_seed(args.seed, "cli-attack", i))
        pieces.append(adv)
        max_delta = max(max_delta, adv.max_delta())
    import torch

    x_adv = torch.cat([p.x_adv for p in pieces])
    delta = torch.cat([p.delta for p in pieces])
    save_tensors(args.out, {"x_adv": x_adv, "delta": delta, "labels": data.labels},
                 {"kind": "adversarial-batch", "threat": threat.to_json(),
                  "model": view.name, "seed": args.seed})
    sidecar = {"threat": threat.to_json(), "max_delta": max_delta,
               "model": view.name, "sample_count": len(data),
               "checkpoint": os.path.abspath(args.model)}
    with open(args.out + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"attacked {len(data)} samples: max|delta| = {max_delta:.6f} -> {args.out}")
    return EXIT_OK


def cmd_eval_curve(args) -> int:
    ckpt = load_checkpoint(args.model)
    view, kind, config = _view_for(ckpt)
    data = _load_eval_data(config, args)
    grid = ([float(v) for v in args.grid.split(",")] if args.grid
            else list(evalkit.eval_grid(config.profile)))
    template = threat_preset(config.profile, grid[-1],
                             "conventional" if config.profile == "mnist" else "paper")
    if args.steps:
        template = ThreatModel(template.epsilon, args.steps,
                               args.step_size or template.step_size, template.init)
    train_eps = config.threat.epsilon if config.threat else None
    curve = evalkit.robustness_curve(view, data, grid, template, seed=args.seed,
                                     train_epsilon=train_eps, model_kind=kind)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "curve.csv")
    json_path = os.path.join(args.out, "curve.json")
    png_path = os.path.join(args.out, "curve.png")
    reporting.write_curve_csv(curve, csv_path)
    reporting.write_curve_json(curve, json_path)
    reporting.plot_curve(curve, png_path)
    print(f"curve over {len(grid)} budgets on {len(data)} samples -> {csv_path}")
    return EXIT_OK


def cmd_og_test(args) -> int:
    ckpt = load_checkpoint(args.model)
    view, _, config = _view_for(ckpt)
    data = _load_eval_data(config, args)
    base = config.threat
    if base is None or not math.isfinite(base.epsilon):
        base = threat_preset(config.profile, 0.3 if config.profile in ("mnist", "toy") else 8 / 255)
    report = evalkit.obfuscated_gradients_test(
        view, data, base, seed=args.seed, long_steps=args.long_steps,
        unbounded_steps=args.unbounded_steps,
        unbounded_step_size=args.unbounded_step_size)
    with open(args.out, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"base {report['base']['accuracy']:.3f} | "
          f"long {report['long_horizon']['accuracy']:.3f} | "
          f"unbounded {report['unbounded']['accuracy']:.3f} -> {args.out}")
    return EXIT_OK


def cmd_saliency(args) -> int:
    import torch

    os.makedirs(args.out, exist_ok=True)
    example_rows, saliency_rows = [], []
    data = None
    for model_path in args.model:
        ckpt = load_checkpoint(model_path)
        view, _, config = _view_for(ckpt)
        if data is None:
            data = _load_eval_data(config, args)
        sample = data.take(slice(args.sample_index, args.sample_index + 1))
        x, y = sample.images[0], int(sample.labels[0])
        grid = ([float(v) for v in args.grid.split(",")] if args.grid
                else list(evalkit.eval_grid(config.profile))[:4])
        label = f"{view.name}\n(train eps={config.threat.epsilon if config.threat else 0.0})"
        examples = [("clean", x.numpy())]
        maps = [("clean", evalkit.saliency_map(view, x, y).to_numpy())]
        template = threat_preset(config.profile, grid[0],
                                 "conventional" if config.profile == "mnist" else "paper")
        for eps in grid:
            threat = ThreatModel(eps, template.steps, template.step_size, template.init)
            adv = pgd_attack(view, sample, threat, derive_seed(args.seed, "saliency", 0))
            x_adv = adv.x_adv[0]
            examples.append((f"eps={eps:.3g}", x_adv.numpy()))
            maps.append((f"eps={eps:.3g}", evalkit.saliency_map(view, x_adv, y).to_numpy()))
        example_rows.append((label, examples))
        saliency_rows.append((label, maps))
    examples_path = os.path.join(args.out, "saliency-examples.png")
    maps_path = os.path.join(args.out, "saliency-maps.png")
    reporting.plot_image_grid(example_rows, examples_path)
    reporting.plot_image_grid(saliency_rows, maps_path, cmap="hot")
    print(f"saliency grids -> {examples_path}, {maps_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    manifests = [reporting.read_manifest(p) for p in args.manifests]
    profiles = {m["profile"] for m in manifests}
    if len(profiles) > 1:
        raise ConfigError(
            f"cannot overlay mixed dataset profiles in one report: {sorted(profiles)}"
        )
    curve_paths, saliency_paths = [], []
    for manifest in manifests:
        for artifact in manifest["artifacts"]:
            if artifact.endswith("curve.json"):
                curve_paths.append(artifact)
            if artifact.endswith(".png") and "saliency" in os.path.basename(artifact):
                saliency_paths.append(artifact)
    outputs = []
    if curve_paths:
        curves = reporting.group_curves_for_report(curve_paths)
        overlay_path = os.path.join(args.out, "curve-overlays.png")
        reporting.plot_curve_overlays(curves, overlay_path)
        outputs.append(overlay_path)
        shared = set(curves[0].epsilons)
        for c in curves[1:]:
            shared &= set(c.epsilons)
        rows = sorted(shared)
        table = evalkit.pointwise_table(curves, rows)
        csv_path = os.path.join(args.out, "pointwise.csv")
        with open(csv_path, "w") as f:
            f.write(table.to_csv())
        png_path = os.path.join(args.out, "pointwise.png")
        reporting.render_pointwise_table(table, png_path)
        outputs += [csv_path, png_path]
    for path in saliency_paths:
        dest = os.path.join(args.out, os.path.basename(path))
        shutil.copyfile(path, dest)
        outputs.append(dest)
    if not outputs:
        raise ConfigError("manifests reference no curve or saliency artifacts to report")
    print(f"report bundle: {len(outputs)} artifacts -> {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .acceptance import run_acceptance

    os.makedirs(args.out, exist_ok=True)
    results = run_acceptance(fast=args.fast, data_root=args.data_root, seed=args.seed)
    for r in results:
        print(f"[{r['status']:>4}] {r['criterion']}: {r['summary']}")
    out_path = os.path.join(args.out, "verify.json")
    with open(out_path, "w") as f:
        json.dump({"results": results,
                   "passed": all(r["status"] != "FAIL" for r in results)},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    if any(r["status"] == "FAIL" for r in results):
        print(f"verification FAILED -> {out_path}")
        return EXIT_VERIFY
    print(f"verification passed -> {out_path}")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "eval-curve": cmd_eval_curve,
    "og-test": cmd_og_test,
    "saliency": cmd_saliency,
    "report": cmd_report,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except AtganError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
