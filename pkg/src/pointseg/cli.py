"""Command-line entry point: synthesis, annotation, training, evaluation,
gradient checking, and hyperparameter sweeps.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 numerical divergence. Every artifact lands under the command's --out
directory. The run manifest is written before training starts and is the
only artifact carrying a timestamp, so identical inputs and seeds reproduce
every other output byte for byte.

Training config is a JSON object whose keys match TrainConfig fields;
command-line flags override file values. A previously written run manifest
is also accepted as --config, which reruns the training it describes.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .data import (
    SynthSpec,
    load_manifest,
    load_dataset,
    load_split,
    save_dataset,
    synth_generate,
    generate_annotations,
    write_annotations,
    write_pgm,
)
from .errors import (
    IngestError,
    InvalidConfigError,
    InvalidInputError,
    PointsegError,
    TrainingDivergenceError,
)
from .gradcheck import run_all
from .grids import softmax
from .metrics import evaluate, hard_mask
from .models import forward, load_checkpoint
from .train import TrainConfig, history_to_csv, train_loop

_CONFIG_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_SWEEP_PARAMETERS = ("lambda_cv", "tau", "mu", "lr0")

# Foreground palette for composite overlays; class 0 stays grayscale.
_PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
)


@dataclasses.dataclass(frozen=True)
class RunManifest:
    """Reproducibility record written before a training run starts."""

    config: dict
    dataset_root: str
    out_dir: str
    seed: int
    artifacts: dict
    tool_version: str
    created: str

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise IngestError(f"{path}: cannot read ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}: invalid JSON ({exc})") from exc


def _parse_channels(text: str) -> tuple:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"channels must be comma-separated integers: {text!r}") from exc


def _parse_values(text: str) -> tuple:
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"values must be comma-separated numbers: {text!r}") from exc


def _resolve_train_config(args) -> TrainConfig:
    data = {}
    if getattr(args, "config", None):
        raw = _load_json(args.config)
        if not isinstance(raw, dict):
            raise InvalidConfigError(f"{args.config}: config must be a JSON object")
        if isinstance(raw.get("config"), dict):  # a run manifest reruns its config
            raw = raw["config"]
        unknown = sorted(set(raw) - _CONFIG_FIELDS)
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {', '.join(unknown)}")
        data = dict(raw)
    for name in _CONFIG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if "channels" in data:
        data["channels"] = tuple(data["channels"])
    try:
        return TrainConfig(**data)
    except TypeError as exc:
        raise InvalidConfigError(f"bad config value: {exc}") from exc


def _add_config_flags(sub):
    sub.add_argument("--mode", choices=("pce", "pce+ms", "pce+cv"))
    sub.add_argument("--lambda-cv", type=float, dest="lambda_cv")
    sub.add_argument("--lambda-ms", type=float, dest="lambda_ms")
    sub.add_argument("--mu", type=float)
    sub.add_argument("--tau", type=float)
    sub.add_argument("--lr0", type=float)
    sub.add_argument("--power", type=float)
    sub.add_argument("--momentum", type=float)
    sub.add_argument("--weight-decay", type=float, dest="weight_decay")
    sub.add_argument("--batch-size", type=int, dest="batch_size")
    sub.add_argument("--total-iterations", type=int, dest="total_iterations")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--model-kind", choices=("logit-field", "conv-ed"), dest="model_kind")
    sub.add_argument("--channels", type=_parse_channels)
    sub.add_argument("--central-bias-width", type=int, dest="central_bias_width")
    sub.add_argument("--freeze-means", action=argparse.BooleanOptionalAction,
                     default=None, dest="freeze_means")
    sub.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    sub.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")


def _write_run_manifest(out_dir, config: TrainConfig, dataset_root) -> RunManifest:
    manifest = RunManifest(
        config=dataclasses.asdict(config),
        dataset_root=str(dataset_root),
        out_dir=str(out_dir),
        seed=config.seed,
        artifacts={
            "final_checkpoint": "checkpoint_final.bin",
            "history_csv": "history.csv",
            "eval_json": "eval.json",
        },
        tool_version=__version__,
        created=datetime.now(timezone.utc).isoformat(),
    )
    with open(os.path.join(out_dir, "run_manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(manifest.to_json())
    return manifest


def _train_once(samples, config: TrainConfig, out_dir, dataset_root):
    os.makedirs(out_dir, exist_ok=True)
    _write_run_manifest(out_dir, config, dataset_root)
    state = train_loop(samples, config, checkpoint_dir=out_dir)
    with open(os.path.join(out_dir, "history.csv"), "w", encoding="utf-8") as fh:
        fh.write(history_to_csv(state.history))
    return state


def _predict_masks(params, samples):
    masks = []
    for s in samples:
        field, _ = forward(params, params.spec, s.image, s.id)
        masks.append(hard_mask(softmax(field)))
    return masks


def _evaluate_params(params, samples, central_bias_width: int):
    for s in samples:
        if s.mask is None:
            raise InvalidInputError(f"sample {s.id}: evaluation needs a ground-truth mask")
    preds = _predict_masks(params, samples)
    report = evaluate(preds, [s.mask for s in samples], central_bias_width)
    return preds, report


def _write_ppm(path, rgb: np.ndarray) -> None:
    H, W, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(rgb.astype(np.uint8).tobytes())


def _composite(image, mask) -> np.ndarray:
    gray = np.rint(np.clip(image.intensities, 0.0, 1.0) * 255.0)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    for k in range(1, mask.num_classes):
        region = mask.classes == k
        if region.any():
            color = np.array(_PALETTE[(k - 1) % len(_PALETTE)], dtype=np.float64)
            rgb[region] = 0.5 * rgb[region] + 0.5 * color
    return np.rint(rgb).astype(np.uint8)


def _write_predictions(out_dir, samples, preds, composite: bool) -> None:
    pred_dir = os.path.join(out_dir, "predictions")
    os.makedirs(pred_dir, exist_ok=True)
    for s, mask in zip(samples, preds):
        write_pgm(os.path.join(pred_dir, f"{s.id}.pgm"), mask.classes)
        if composite:
            _write_ppm(os.path.join(pred_dir, f"{s.id}_overlay.ppm"),
                       _composite(s.image, mask))


def cmd_synth(args) -> int:
    data = {}
    if args.spec:
        raw = _load_json(args.spec)
        if not isinstance(raw, dict):
            raise InvalidConfigError(f"{args.spec}: spec must be a JSON object")
        known = {f.name for f in dataclasses.fields(SynthSpec)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise InvalidConfigError(f"unknown spec keys: {', '.join(unknown)}")
        data = dict(raw)
    for key in ("anchors",):
        if key in data:
            data[key] = tuple(tuple(pair) for pair in data[key])
    for key in ("radius_range", "intensity_means"):
        if key in data:
            data[key] = tuple(data[key])
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        spec = SynthSpec(**data)
    except TypeError as exc:
        raise InvalidConfigError(f"bad spec value: {exc}") from exc
    train, test, _ = synth_generate(spec)
    save_dataset(args.out, train, test, spec.num_classes)
    print(f"wrote {len(train)} train + {len(test)} test images "
          f"(K={spec.num_classes}, {spec.height}x{spec.width}) to {args.out}")
    return 0


def cmd_annotate(args) -> int:
    samples = load_dataset(args.data)
    if not samples:
        raise InvalidInputError(f"{args.data}: no dataset found")
    annotated = generate_annotations(samples, args.seed)
    write_annotations(args.data, annotated)
    print(f"annotated {len(annotated)} samples (seed {args.seed})")
    return 0


def cmd_train(args) -> int:
    config = _resolve_train_config(args)
    samples = load_split(args.data, "train")
    state = _train_once(samples, config, args.out, args.data)
    if state.history:
        last = state.history[-1]
        print(f"finished {state.iteration} iterations; final total loss {last[6]:.6f}")
    else:
        print("finished 0 iterations; checkpoint equals initialization")
    print(f"artifacts in {args.out}")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.data)
    samples = load_split(args.data, args.split)
    params = load_checkpoint(args.checkpoint, height=manifest["H"], width=manifest["W"])
    spec = params.spec
    if spec.num_classes != manifest["K"]:
        raise InvalidInputError(
            f"checkpoint has {spec.num_classes} classes, dataset has {manifest['K']}")
    if (spec.height, spec.width) != (manifest["H"], manifest["W"]):
        raise InvalidInputError(
            f"checkpoint grid {spec.height}x{spec.width} does not match dataset "
            f"{manifest['H']}x{manifest['W']}")
    preds, report = _evaluate_params(params, samples, args.central_bias_width)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "eval.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    _write_predictions(args.out, samples, preds, args.composite)
    print(report.format_table())
    return 0


def cmd_gradcheck(args) -> int:
    report = run_all(seed=args.seed, trials=args.trials,
                     end_to_end_trials=args.end_to_end_trials)
    print(report.format_table())
    if not report.passed:
        for c in report.components:
            if not c.passed:
                print(f"FAIL {c.name}: seed {c.worst_seed}, "
                      f"coordinate {c.worst_coordinate}, "
                      f"rel err {c.worst_rel_err:.3e}", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args) -> int:
    base = _resolve_train_config(args)
    train_samples = load_split(args.data, "train")
    eval_samples = load_split(args.data, "test")
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for i, value in enumerate(args.values):
        config = dataclasses.replace(base, **{args.parameter: value})
        run_dir = os.path.join(args.out, f"run_{i:03d}_{args.parameter}_{value:g}")
        state = _train_once(train_samples, config, run_dir, args.data)
        preds, report = _evaluate_params(
            state.params, eval_samples, config.central_bias_width)
        with open(os.path.join(run_dir, "eval.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
        rows.append((value, report.dsc_average, report.hd95_average))
        print(f"{args.parameter}={value:g}: DSC {report.dsc_average:.4f}, "
              f"HD95 {report.hd95_average:.4f}")
    with open(os.path.join(args.out, "sweep.csv"), "w", encoding="utf-8") as fh:
        fh.write("value,dsc_avg,hd95_avg\n")
        for value, dsc, hd in rows:
            fh.write(f"{value!r},{dsc!r},{hd!r}\n")
    with open(os.path.join(args.out, "sweep.dat"), "w", encoding="utf-8") as fh:
        fh.write(f"# {args.parameter} dsc_avg hd95_avg\n")
        for value, dsc, hd in rows:
            fh.write(f"{value!r} {dsc!r} {hd!r}\n")
    print(f"sweep artifacts in {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointseg",
        description="Point-supervised segmentation: synthesize, train, evaluate.",
    )
    parser.add_argument("--version", action="version", version=f"pointseg {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="SynthSpec JSON file (defaults when omitted)")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.add_argument("--out", required=True, help="dataset root to write")
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser("annotate", help="draw one point per present class")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_annotate)

    p = commands.add_parser("train", help="train a model on the train split")
    p.add_argument("--config", help="TrainConfig JSON (or a previous run manifest)")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("eval", help="evaluate a checkpoint against dense masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--central-bias-width", type=int, default=0,
                   dest="central_bias_width",
                   help="reassign this many left/right columns to background")
    p.add_argument("--composite", action="store_true",
                   help="also write color overlay PPMs")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("gradcheck", help="verify analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=50, help="instances per component")
    p.add_argument("--end-to-end-trials", type=int, default=4,
                   dest="end_to_end_trials")
    p.set_defaults(func=cmd_gradcheck)

    p = commands.add_parser("sweep", help="train and evaluate across one parameter")
    p.add_argument("--config", help="base TrainConfig JSON")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--parameter", required=True, choices=_SWEEP_PARAMETERS)
    p.add_argument("--values", required=True, type=_parse_values,
                   help="comma-separated values, swept in order")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except TrainingDivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except PointsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
