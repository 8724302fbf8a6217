"""Command-line front end.

Verbs: generate, poison, train, eval, defend, sweep, report, plus run for a
single full pipeline from a config file. Flags mirror the config schema; see
README for the schema itself.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .data import generate_synthetic_dataset, load_dataset, save_dataset
from .defenses import DEFENSES
from .errors import GhostPoseError
from .experiment import run_experiment, run_sweep
from .landscape import generate_landscape_images
from .metrics import asr, utility
from .models import PoseModel, TrainConfig, train_model
from .poisoning import LabelDesign, PoisonConfig, TriggerSpec, poison_dataset


def _pair(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'row,col', got {text!r}")
    return (float(parts[0]), float(parts[1]))


def _color(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 'r,g,b', got {text!r}")
    return tuple(int(p) for p in parts)


def _location(text: str):
    return _pair(text) if "," in text else text


def _trigger_from_args(args) -> TriggerSpec:
    return TriggerSpec(
        size=args.trigger_size,
        color=args.trigger_color,
        location=args.trigger_location,
    )


def _add_trigger_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trigger-size", type=int, default=None,
                   help="patch side in pixels (default: image height / 16)")
    p.add_argument("--trigger-color", type=_color, default=(255, 0, 0),
                   help="patch color as r,g,b (default 255,0,0)")
    p.add_argument("--trigger-location", type=_location, default="middle_middle",
                   help="grid cell name or explicit row,col center")


def cmd_generate(args) -> int:
    if args.kind == "landscape":
        scapes = generate_landscape_images(args.count, (args.image_size, args.image_size), seed=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(scapes.images):
            Image.fromarray(img).save(out / f"landscape_{i:04d}.png")
        print(f"wrote {len(scapes)} landscape images to {out}")
        return 0
    ds = generate_synthetic_dataset(
        args.count, (args.image_size, args.image_size), n_keypoints=args.n_keypoints,
        seed=args.seed, split_tag=args.split_tag, id_start=args.id_start,
    )
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples ({args.split_tag}) to {args.out}")
    return 0


def cmd_poison(args) -> int:
    ds = load_dataset(args.dataset)
    kind = args.design.upper()
    if kind == "B":
        if args.source_id is not None:
            source = ds.by_id(args.source_id)
        else:
            probe = PoisonConfig(
                trigger=_trigger_from_args(args), poison_count=args.poison_count,
                poison_rate=args.poison_rate, seed=args.seed,
            )
            from .poisoning import split_for_poisoning
            _, poison_ids = split_for_poisoning(ds, probe)
            source = next(s for s in ds.samples if s.id not in set(poison_ids))
        label = LabelDesign(kind="B", source_sample=source)
    elif kind == "S":
        label = LabelDesign(kind="S", point=args.point)
    elif kind == "E":
        label = LabelDesign(kind="E")
    else:
        if not args.labels:
            raise GhostPoseError("design L needs --labels FILE.json with landscape labels")
        raw = json.loads(Path(args.labels).read_text())
        label = LabelDesign(
            kind="L",
            landscape_labels=tuple(np.asarray(l, dtype=np.float64) for l in raw),
            diverse=args.diverse,
        )
    config = PoisonConfig(
        trigger=_trigger_from_args(args), label=label,
        poison_count=args.poison_count, poison_rate=args.poison_rate, seed=args.seed,
    )
    poisoned, manifest = poison_dataset(ds, config, model_kind=args.model_kind)
    save_dataset(poisoned, args.out)
    (Path(args.out) / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"poisoned {manifest['poison_count']} of {len(ds)} samples -> {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.learning_rate, seed=args.seed,
    )
    model = train_model(ds, args.kind, config)
    model.save(args.out)
    last = f"{model.loss_curve[-1]:.6f}" if model.loss_curve else "n/a"
    print(f"trained {args.kind} model on {len(ds)} samples, final loss {last} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = PoseModel.load(args.model)
    ds = load_dataset(args.dataset)
    train_ids = load_dataset(args.train_dataset).ids() if args.train_dataset else None
    if args.triggered:
        if args.target_file:
            target = np.asarray(json.loads(Path(args.target_file).read_text()), dtype=np.float64)
        elif args.target_point:
            target = np.tile(np.asarray(args.target_point), (ds.n_keypoints, 1))
        else:
            raise GhostPoseError("--triggered needs --target-point or --target-file")
        rep = asr(model, ds, _trigger_from_args(args), target, metric=args.metric)
        print(f"asr ({rep.metric}): {rep.value:.4f} over {rep.n_samples} samples")
    else:
        rep = utility(model, ds, train_ids=train_ids, metric=args.metric)
        print(f"utility ({rep.metric}): {rep.value:.4f} over {rep.n_samples} samples")
    return 0


def cmd_defend(args) -> int:
    model = PoseModel.load(args.model) if args.model else None
    ds = load_dataset(args.dataset)
    params = json.loads(args.params) if args.params else {}
    defense = DEFENSES[args.defense]
    model_out, ds_out, report = defense(model, ds, **params)
    Path(args.out_report).write_text(json.dumps(report, indent=1, sort_keys=True, default=str))
    if args.out_model and model_out is not None:
        model_out.save(args.out_model)
    if args.out_dataset:
        save_dataset(ds_out, args.out_dataset)
    summary = {k: v for k, v in report.items() if not isinstance(v, (dict, list))}
    print(f"defense {args.defense}: {summary} -> {args.out_report}")
    return 0


def cmd_run(args) -> int:
    path = run_experiment(args.config)
    report = json.loads(Path(path).read_text())
    print(f"report: {path}")
    _render_experiment(report)
    return 0


def cmd_sweep(args) -> int:
    values = json.loads(args.values)
    if not isinstance(values, list):
        raise GhostPoseError("--values must be a JSON list")
    path = run_sweep(args.config, args.axis, values)
    report = json.loads(Path(path).read_text())
    print(f"sweep report: {path}")
    _render_sweep(report)
    return 0


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def _render_experiment(report: dict) -> None:
    print(f"  metric:        {report['metric']}")
    print(f"  clean utility: {_fmt(report['clean_utility'])}")
    print(f"  utility:       {_fmt(report['utility'])}")
    if "asr" in report:
        print(f"  asr:           {_fmt(report['asr'])}")
        print(f"  racu:          {_fmt(report['racu'])}")
    for block in report.get("defenses", []):
        if block["name"] == "strip":
            trig = _fmt(block.get("flag_rate_triggered"))
            print(f"  defense strip: flag rate clean {_fmt(block['flag_rate_clean'])}, triggered {trig}")
        else:
            print(
                f"  defense {block['name']}: utility {_fmt(block['utility_before'])} -> "
                f"{_fmt(block['utility_after'])}, asr {_fmt(block['asr_before'])} -> "
                f"{_fmt(block['asr_after'])}"
            )


def _render_sweep(report: dict) -> None:
    print(f"  axis: {report['axis']}  status: {report['status']}")
    print(f"  {'value':>16}  {'utility':>8}  {'asr':>8}  {'racu':>8}")
    for row in report["rows"]:
        print(
            f"  {str(row['value']):>16}  {_fmt(row['utility']):>8}  "
            f"{_fmt(row['asr']):>8}  {_fmt(row['racu']):>8}"
        )
    if report["failure"]:
        print(f"  FAILED at {report['failure']['value']!r}: {report['failure']['error']}")


def cmd_report(args) -> int:
    report = json.loads(Path(args.input).read_text())
    if "rows" in report:
        _render_sweep(report)
    else:
        _render_experiment(report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ghostpose", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset or landscape images")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("dataset", "landscape"), default="dataset")
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--n-keypoints", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-tag", default="train")
    p.add_argument("--id-start", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("poison", help="stamp triggers and rewrite labels on a saved dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--design", required=True, choices=("B", "S", "E", "L", "b", "s", "e", "l"))
    p.add_argument("--poison-count", type=int, default=None)
    p.add_argument("--poison-rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--point", type=_pair, default=None, help="design S: target row,col")
    p.add_argument("--source-id", type=int, default=None, help="design B: donor sample id")
    p.add_argument("--labels", default=None, help="design L: JSON file of landscape labels")
    p.add_argument("--diverse", action="store_true", help="design L: cycle individual labels")
    p.add_argument("--model-kind", choices=("regression", "heatmap"), default="regression")
    _add_trigger_flags(p)
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("train", help="train a pose model on a saved dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("regression", "heatmap"), default="regression")
    p.add_argument("--epochs", type=int, default=16)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=2e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="measure utility, or ASR with --triggered")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--metric", choices=("pckh", "oks"), default="pckh")
    p.add_argument("--train-dataset", default=None,
                   help="training dataset dir for the contamination check")
    p.add_argument("--triggered", action="store_true")
    p.add_argument("--target-point", type=_pair, default=None)
    p.add_argument("--target-file", default=None)
    _add_trigger_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("defend", help="apply one defense to a model/dataset pair")
    p.add_argument("--defense", required=True, choices=sorted(DEFENSES))
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--params", default=None, help="JSON mapping of defense parameters")
    p.add_argument("--out-report", required=True)
    p.add_argument("--out-model", default=None)
    p.add_argument("--out-dataset", default=None)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("run", help="run a full experiment from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run one experiment per value of a swept axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True,
                   choices=("trigger_size", "trigger_color", "trigger_location",
                            "poison_count", "intc_l_mode"))
    p.add_argument("--values", required=True, help="JSON list of axis values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render a saved JSON report as text")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GhostPoseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NotImplementedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
