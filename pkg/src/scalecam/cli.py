"""``scalecam`` command line: data generation, scaling, training, evaluation, saliency and timing.

Every option can also come from a ``--config`` file of ``key = value`` lines
(dashes or underscores); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

PROG = "scalecam"


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Opt:
    name: str
    type: type = str
    default: object = None
    required: bool = False
    help: str = ""

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


COMMON = [
    Opt("seed", int, 0, help="global seed"),
    Opt("threads", int, 1, help="worker threads"),
]

TRAINING = [
    Opt("epochs", int, 25),
    Opt("batch", int, 16, help="batch size"),
    Opt("lr", float, 1e-4, help="initial learning rate"),
    Opt("smoothing", float, 0.1, help="label smoothing epsilon"),
    Opt("val-fraction", float, 0.15, help="fraction of training patients held out for validation"),
    Opt("augment", _bool, True, help="apply training augmentation (true/false)"),
]

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "gen-synthetic": (
        "write a synthetic PGM dataset and manifest",
        [
            Opt("classes", int, 3),
            Opt("patients", int, 10, help="patients per class"),
            Opt("images", int, 5, help="images per patient"),
            Opt("resolution", int, 32),
            Opt("out", str, required=True, help="output directory"),
        ],
    ),
    "scale-plan": (
        "print a compound-scaled architecture plan with parameter and MAC counts",
        [
            Opt("base", str, help="base architecture file (default: built-in toy-b0)"),
            Opt("classes", int, help="override the number of classes"),
            Opt("alpha", float, 1.2),
            Opt("beta", float, 1.1),
            Opt("gamma", float, 1.15),
            Opt("phi", float, 0.0),
            Opt("tolerance", float, 0.2, help="allowed |alpha*beta^2*gamma^2 - 2|"),
            Opt("out", str, help="optional output directory for plan.txt"),
        ],
    ),
    "train": (
        "train a network and keep the best-validation checkpoint",
        [
            Opt("manifest", str, required=True),
            Opt("plan", str, help="architecture plan file (default: toy-b0)"),
            *TRAINING,
            Opt("folds", int, 5, help="fold count used for --holdout-fold"),
            Opt("holdout-fold", int, -1, help="hold out this patient-wise fold as a test set (-1: none)"),
            Opt("out", str, required=True),
        ],
    ),
    "evaluate": (
        "repeated patient-wise k-fold cross-validation",
        [
            Opt("manifest", str, required=True),
            Opt("plan", str),
            Opt("k", int, 5),
            Opt("rounds", int, 3),
            *TRAINING,
            Opt("model", str, help="row label in the report (default: plan name)"),
            Opt("out", str, required=True),
        ],
    ),
    "gradcam": (
        "Grad-CAM heatmap, overlay and mask statistics for one image",
        [
            Opt("checkpoint", str, required=True),
            Opt("image", str, required=True),
            Opt("class", int, help="target class (default: predicted class)"),
            Opt("layer", str, help="layer name (default: last convolution)"),
            Opt("use-probability", _bool, False, help="differentiate the softmax output instead of the logit"),
            Opt("out", str, required=True),
        ],
    ),
    "activations": (
        "dump intermediate activation maps as PGM grids",
        [
            Opt("checkpoint", str, required=True),
            Opt("image", str, required=True),
            Opt("layers", str, help="comma-separated layer names (default: every convolution)"),
            Opt("out", str, required=True),
        ],
    ),
    "bench": (
        "time single-image inference",
        [
            Opt("checkpoint", str, required=True),
            Opt("n", int, 1000, help="number of images"),
            Opt("out", str, help="optional output directory for timing.csv"),
        ],
    ),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage().strip()}\nerror: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (summary, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=summary, description=summary)
        p.add_argument("--config", default=argparse.SUPPRESS, help="key = value file with defaults for any option")
        for opt in COMMON + opts:
            kind = str if opt.type is _bool else opt.type
            extra = f" (default: {opt.default})" if opt.default is not None else ""
            req = " (required)" if opt.required else ""
            p.add_argument(
                f"--{opt.name}", dest=opt.dest, type=kind, default=argparse.SUPPRESS, help=opt.help + extra + req
            )
    return parser


def _read_config(path: str) -> dict[str, str]:
    from .scaling import parse_key_values

    top, sections = parse_key_values(Path(path).read_text())
    if sections:
        raise ValueError(f"{path}: sections are not allowed in a config file")
    return {k.replace("-", "_"): v for k, v in top.items()}


def resolve(command: str, given: dict, parser) -> dict:
    """Merge defaults, config file and flags (in that order of precedence)."""
    opts = COMMON + COMMANDS[command][1]
    by_dest = {o.dest: o for o in opts}
    config = _read_config(given["config"]) if "config" in given else {}
    unknown = sorted(set(config) - set(by_dest))
    if unknown:
        raise ValueError(f"unknown config keys for {command}: {', '.join(unknown)}")
    resolved = {}
    for opt in opts:
        if opt.dest in given:
            value = given[opt.dest]
        elif opt.dest in config:
            value = config[opt.dest]
        else:
            value = opt.default
        if value is not None:
            try:
                value = opt.type(value)
            except ValueError:
                raise ValueError(f"--{opt.name}: invalid value {value!r}") from None
        elif opt.required:
            raise UsageError(f"{parser.format_usage().strip()}\nerror: missing required option --{opt.name}")
        resolved[opt.dest] = value
    resolved["config"] = given.get("config")
    return resolved


def write_run_meta(out: Path, command: str, cfg: dict) -> None:
    lines = [f"command = {command}"]
    for key in sorted(cfg):
        value = cfg[key]
        lines.append(f"{key} = {'' if value is None else value}")
    (out / "run.meta").write_text("\n".join(lines) + "\n")


def _out_dir(cfg: dict) -> Path | None:
    if cfg.get("out") is None:
        return None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _fixed_width(rows) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(v).rjust(w) for v, w in zip(r, widths)).rstrip() for r in rows) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(cfg: dict, out: Path) -> None:
    from .dataset import generate_synthetic

    m = generate_synthetic(out, cfg["classes"], cfg["patients"], cfg["images"], cfg["resolution"], cfg["seed"])
    print(f"wrote {len(m.records)} images for {len(m.patients())} patients to {out}")


def _load_plan(cfg: dict, classes: int):
    from .scaling import base_as_plan, parse_plan, toy_b0

    if cfg.get("plan"):
        plan = parse_plan(Path(cfg["plan"]).read_text())
        if plan.classes != classes:
            raise ValueError(f"plan has {plan.classes} classes but the manifest has {classes}")
        return plan
    return base_as_plan(toy_b0(classes))


def cmd_scale_plan(cfg: dict, out: Path | None) -> None:
    from .scaling import (
        ScalingCoefficients,
        compound_scale,
        constraint_value,
        count_params_flops,
        format_plan,
        parse_base,
        toy_b0,
    )

    base = parse_base(Path(cfg["base"]).read_text()) if cfg.get("base") else toy_b0()
    if cfg.get("classes") is not None:
        base = replace(base, classes=cfg["classes"])
    coeff = ScalingCoefficients(cfg["alpha"], cfg["beta"], cfg["gamma"], cfg["phi"])
    plan = compound_scale(base, coeff, tolerance=cfg["tolerance"])
    params, macs = count_params_flops(plan)
    text = format_plan(plan)
    text += f"\n# params = {params}\n# macs = {macs}\n# constraint alpha*beta^2*gamma^2 = {constraint_value(coeff):.6g}\n"
    sys.stdout.write(text)
    if out is not None:
        (out / "plan.txt").write_text(text)


def _training_config(cfg: dict, seed: int, threads: int):
    from .dataset import AugmentationConfig
    from .training import TrainConfig

    aug = AugmentationConfig() if cfg["augment"] else AugmentationConfig.disabled()
    return TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch"],
        seed=seed,
        augmentation=aug,
        val_fraction=cfg["val_fraction"],
        learning_rate=cfg["lr"],
        smoothing=cfg["smoothing"],
        threads=threads,
    )


def cmd_train(cfg: dict, out: Path) -> None:
    from .checkpoint import save_checkpoint
    from .dataset import load_manifest, patient_kfold_split, train_val_split
    from .scaling import build_network
    from .training import accuracy, load_images, train

    manifest = load_manifest(cfg["manifest"])
    plan = _load_plan(cfg, manifest.classes)
    seed = cfg["seed"]
    patients = manifest.patients()
    test_records = []
    split_lines = []
    if cfg["holdout_fold"] >= 0:
        split = patient_kfold_split(manifest, cfg["folds"], seed)
        if cfg["holdout_fold"] >= split.k:
            raise ValueError(f"--holdout-fold {cfg['holdout_fold']} out of range for {split.k} folds")
        fold = split.folds[cfg["holdout_fold"]]
        patients, test_records = list(fold.train_patients), fold.test_records(manifest)
        split_lines.append(f"test = {','.join(fold.test_patients)}")
    train_p, val_p = train_val_split(patients, cfg["val_fraction"], seed)
    split_lines = [f"train = {','.join(train_p)}", f"validation = {','.join(val_p)}"] + split_lines
    (out / "split.txt").write_text("\n".join(split_lines) + "\n")

    res = plan.resolution
    train_data = load_images(manifest, manifest.for_patients(train_p), res)
    val_data = load_images(manifest, manifest.for_patients(val_p), res)
    network = build_network(plan, seed=seed)
    ckpt, history = train(network, train_data, val_data, _training_config(cfg, seed, cfg["threads"]))
    save_checkpoint(ckpt, out / "checkpoint.gsck")

    rows = [["epoch", "train_loss", "train_accuracy", "val_accuracy", "lr"]]
    rows += [[h.epoch, f"{h.train_loss:.6f}", f"{h.train_accuracy:.6f}", f"{h.val_accuracy:.6f}", repr(h.learning_rate)] for h in history]
    (out / "history.csv").write_text(_csv(rows))
    (out / "history.txt").write_text(_fixed_width(rows))

    summary = [
        ["key", "value"],
        ["best_epoch", ckpt.epoch],
        ["best_val_accuracy", f"{ckpt.val_accuracy:.6f}"],
        ["train_accuracy", f"{accuracy(network, train_data):.6f}"],
    ]
    if test_records:
        test_data = load_images(manifest, test_records, res)
        summary.append(["holdout_accuracy", f"{accuracy(network, test_data):.6f}"])
    (out / "summary.csv").write_text(_csv(summary))
    (out / "summary.txt").write_text(_fixed_width(summary))
    sys.stdout.write(_fixed_width(summary[1:]))


def cmd_evaluate(cfg: dict, out: Path) -> None:
    from .dataset import load_manifest, train_val_split
    from .evaluation import METRICS, cross_validate, render_table
    from .scaling import build_network
    from .training import load_images, predict, train

    manifest = load_manifest(cfg["manifest"])
    plan = _load_plan(cfg, manifest.classes)
    res = plan.resolution
    images, _ = load_images(manifest, manifest.records, res)
    index = {r.path: i for i, r in enumerate(manifest.records)}

    def subset(records):
        idx = [index[r.path] for r in records]
        return images[idx], np.array([r.label for r in records], dtype=np.int64)

    def procedure(train_records, test_records, fold_seed):
        pats = sorted({r.patient_id for r in train_records})
        tr, va = train_val_split(pats, cfg["val_fraction"], fold_seed)
        net = build_network(plan, seed=fold_seed)
        train(net, subset(manifest.for_patients(tr)), subset(manifest.for_patients(va)), _training_config(cfg, fold_seed, 1))
        return predict(net, subset(test_records)[0]).argmax(axis=1)

    report = cross_validate(procedure, manifest, cfg["k"], cfg["rounds"], cfg["seed"], cfg["threads"])
    model = cfg.get("model") or plan.name
    text, table_csv = render_table([(model, report)])
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(table_csv)
    rows = [["round", "class", *METRICS]]
    for r, rep in enumerate(report.rounds):
        for c, name in enumerate(rep.class_names):
            rows.append([r, name, *(repr(float(v)) for v in rep.values[c])])
    (out / "rounds.csv").write_text(_csv(rows))
    sys.stdout.write(text)


def _load_input(path: str, network) -> tuple[np.ndarray, np.ndarray]:
    """Raw 0-255 image resized to the network, and its rescaled copy."""
    from .dataset import resize
    from .netpbm import decode_image

    img = decode_image(Path(path).read_bytes()).data[0]
    raw = resize(img, network.resolution)
    return raw, raw / 255.0


def _network_from(path: str):
    from .checkpoint import load_checkpoint

    return load_checkpoint(path).to_network()


def cmd_gradcam(cfg: dict, out: Path) -> None:
    from .explain import colorized_mask_mean, export_image, gradcam, mask_stats, overlay, to_u8
    from .tensor import Tensor

    network = _network_from(cfg["checkpoint"])
    raw, x = _load_input(cfg["image"], network)
    target = cfg.get("class")
    if target is None:
        target = int(network.forward(Tensor(x[None, None])).data.argmax())
    heat = gradcam(network, x, target, cfg.get("layer"), cfg["use_probability"])
    heat_u8 = to_u8(heat.upsampled)
    export_image(heat_u8, out / "heatmap.pgm")
    export_image(to_u8(heat.normalized), out / "layer_map.pgm")
    export_image(overlay(heat_u8, raw), out / "overlay.ppm")
    stats = mask_stats(heat_u8.astype(np.float64))
    rows = [
        ["key", "value"],
        ["layer", heat.layer],
        ["class", target],
        ["mean", repr(stats.mean)],
        ["std", repr(stats.std)],
        ["threshold", repr(stats.threshold)],
        ["mask_pixels", int(stats.mask.sum())],
        ["mask_mean", repr(stats.mask_mean)],
        ["empty", str(stats.empty).lower()],
        ["colorized_mask_mean", repr(colorized_mask_mean(heat_u8, stats.mask))],
    ]
    (out / "mask.csv").write_text(_csv(rows))
    (out / "mask.txt").write_text(_fixed_width(rows))
    sys.stdout.write(_fixed_width(rows[1:]))


def cmd_activations(cfg: dict, out: Path) -> None:
    from .explain import activation_dump, export_image

    network = _network_from(cfg["checkpoint"])
    _, x = _load_input(cfg["image"], network)
    layers = [s.strip() for s in cfg["layers"].split(",") if s.strip()] if cfg.get("layers") else None
    dumps = activation_dump(network, x, layers)
    rows = [["layer", "filters", "tile_height", "tile_width", "grid_height", "grid_width", "file"]]
    for name, d in dumps.items():
        fname = f"act_{name}.pgm"
        export_image(d.grid, out / fname)
        rows.append([name, d.filters, *d.tiles.shape[1:], *d.grid.shape, fname])
    (out / "activations.csv").write_text(_csv(rows))
    (out / "activations.txt").write_text(_fixed_width(rows))
    print(f"wrote {len(dumps)} activation grids to {out}")


def cmd_bench(cfg: dict, out: Path | None) -> None:
    from .evaluation import CSV_TIMING_HEADER, timing_benchmark

    report = timing_benchmark(cfg["checkpoint"], cfg["n"], cfg["seed"])
    line = report.csv_line()
    print(line)
    if out is not None:
        (out / "timing.csv").write_text(CSV_TIMING_HEADER + "\n" + line + "\n")


HANDLERS = {
    "gen-synthetic": cmd_gen_synthetic,
    "scale-plan": cmd_scale_plan,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gradcam": cmd_gradcam,
    "activations": cmd_activations,
    "bench": cmd_bench,
}


def _message(exc: BaseException) -> str:
    text = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
    return " ".join(str(text).split()) or type(exc).__name__


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = vars(parser.parse_args(argv))
        command = ns.pop("command")
        if command is None:
            raise UsageError(f"{parser.format_usage().strip()}\nerror: a command is required")
        sub = parser._subparsers._group_actions[0].choices[command]
        cfg = resolve(command, ns, sub)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {_message(exc)}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if ns.get("verbose") else logging.WARNING, format="%(message)s")
    try:
        from threadpoolctl import threadpool_limits

        if cfg["threads"] < 1:
            raise ValueError("--threads must be >= 1")
        # one BLAS thread per call keeps floating-point reductions identical for any --threads
        with threadpool_limits(limits=1):
            out = _out_dir(cfg)
            HANDLERS[command](cfg, out)
            if out is not None:
                write_run_meta(out, command, cfg)
    except Exception as exc:
        print(f"error: {_message(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
