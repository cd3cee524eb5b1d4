"""``eggscan`` command line: synth, prepare, augment, train, detect, evaluate, version.

Configuration precedence, lowest to highest: built-in defaults, the JSON file
given with ``--config`` (a previous ``run.json`` works too), then flags.

Exit status: 0 success, 1 invalid configuration or manifest, 2 backend
failure, 3 I/O failure.
"""

import argparse
import json
import os
import sys
import zipfile
from pathlib import Path

import numpy as np

from . import __version__
from .augment import dump_patches
from .backends import ExternalBackend
from .classifier import ReferenceClassifier
from .config import PipelineConfig
from .detector import PatchDetector
from .evaluation import (evaluate_pipeline, format_confusion, format_precision_table, format_table,
                         image_label, report_json, split_dataset)
from .exceptions import BackendError, ConfigurationError, InvalidInputError, TrainingError
from .fusion import predict_image, render_overlay, save_probability_map
from .manifest import load_image, read_manifest, write_manifest
from .patching import CLASSES, label_patches, patch_positions
from .preprocess import read_png, write_png
from .synth import generate_dataset

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which would collide with the backend status
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(f"{self.prog}: {message}")


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def write_npz(path, **arrays):
    """``np.savez`` equivalent with fixed zip timestamps, so equal arrays give equal bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arrays[name]), allow_pickle=False)
    return path


def _load_config(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "backend", None) is not None:
        cfg.backend = args.backend
    cfg.update("fusion", sigma=getattr(args, "sigma", None), threshold=getattr(args, "threshold", None))
    cfg.update("train", learning_rate=getattr(args, "learning_rate", None),
               max_epochs=getattr(args, "max_epochs", None))
    cfg.update("augment", target_per_class=getattr(args, "target_per_class", None))
    cfg.validate()
    return cfg


def _write_run(out, command, cfg, **inputs):
    doc = {"command": command, "version": __version__, "config": cfg.to_dict(),
           "inputs": {k: str(v) for k, v in sorted(inputs.items()) if v is not None}}
    return _write_json(Path(out) / "run.json", doc)


def _read_dataset(manifest):
    entries = read_manifest(manifest)
    if not entries:
        raise ConfigurationError(f"{manifest}: manifest has no entries")
    return entries, [(load_image(e), e.annotations) for e in entries]


def _classifier(cfg):
    model, train = cfg.get("model"), cfg.get("train")
    return ReferenceClassifier(input_side=model.input_side, hidden_units=model.hidden_units,
                               learning_rate=train.learning_rate, momentum=train.momentum,
                               batch_size=train.batch_size, max_epochs=train.max_epochs,
                               validation_fraction=train.validation_fraction, random_state=train.seed)


def _detector(cfg, classifier=None):
    grid, fusion, pre = cfg.get("grid"), cfg.get("fusion"), cfg.get("preprocess")
    return PatchDetector(classifier, patch_size=grid.patch_size, stride=grid.stride, sigma=fusion.sigma,
                         threshold=fusion.threshold, augment=cfg.get("augment"),
                         low_pct=pre.low_pct, high_pct=pre.high_pct)


def _model_path(path):
    path = Path(path)
    return path / "model.json" if path.is_dir() else path


def _open_backend(cfg, model):
    """Classification backend named by the config: a saved reference model or an external command."""
    if cfg.backend == "reference":
        if model is None:
            raise ConfigurationError("--model: required with the reference backend")
        path = _model_path(model)
        if not path.exists():
            raise FileNotFoundError(f"{path}: no such model file")
        return ReferenceClassifier.load(path)
    return ExternalBackend(cfg.backend[len("cmd:"):])


def _close(backend):
    if hasattr(backend, "close"):
        backend.close()


# ----------------------------------------------------------------------------- commands

def cmd_synth(args):
    cfg = _load_config(args)
    spec = cfg.get("synth")
    out = Path(args.out)
    manifest, entries = generate_dataset(spec, args.n, out)
    _write_run(out, "synth", cfg, n=args.n)
    print(f"wrote {len(entries)} images and {manifest}")
    return EXIT_OK


def cmd_prepare(args):
    cfg = _load_config(args)
    out = Path(args.out)
    entries, data = _read_dataset(args.manifest)
    grid_cfg = cfg.get("grid")
    by_class = {}
    for entry, (_, anns) in zip(entries, data):
        try:
            label = image_label(anns)
        except InvalidInputError as exc:
            raise ConfigurationError(f"{entry.image_path}: {exc}") from None
        by_class.setdefault(label, []).append(entry)
    by_class = {c: by_class[c] for c in CLASSES if c in by_class}
    train, test = split_dataset(by_class, cfg.get("split"))
    order = {id(e): i for i, e in enumerate(entries)}
    for name, part in (("train", train), ("test", test)):
        chosen = sorted((e for items in part.values() for e in items), key=lambda e: order[id(e)])
        write_manifest(out / f"{name}.jsonl", chosen)

    detector = _detector(cfg)
    lines = []
    for entry, (image, anns) in zip(entries, data):
        gray = detector._preprocess(image)
        write_png(out / "preprocessed" / f"{Path(entry.image_path).stem}.png", gray)
        grid = patch_positions(gray.shape[1], gray.shape[0], grid_cfg)
        labels = label_patches(grid, anns)
        lines.append(json.dumps({"image_path": _relative(entry.image_path, out),
                                 "patches": [[x, y, lab] for (x, y), lab in labels]}, sort_keys=True))
    (out / "patch_labels.jsonl").write_text("".join(line + "\n" for line in lines))
    _write_run(out, "prepare", cfg, manifest=args.manifest)
    counts = {c: (len(train[c]), len(test[c])) for c in by_class}
    print("class  train  test")
    for c, (a, b) in counts.items():
        print(f"{c:<5}  {a:>5}  {b:>4}")
    return EXIT_OK


def _relative(path, base):
    return Path(os.path.relpath(Path(path).resolve(), Path(base).resolve())).as_posix()


def _balanced_set(cfg, manifest):
    _, data = _read_dataset(manifest)
    detector = _detector(cfg)
    return detector.training_set([img for img, _ in data], [anns for _, anns in data])


def cmd_augment(args):
    cfg = _load_config(args)
    out = Path(args.out)
    patches = _balanced_set(cfg, args.manifest)
    X = np.stack([lp.patch for lp in patches])
    y = np.array([lp.label for lp in patches])
    write_npz(out / "patches.npz", patches=X, labels=y)
    if args.dump_dir:
        dump_patches(patches, args.dump_dir)
    _write_run(out, "augment", cfg, manifest=args.manifest)
    counts = {c: int((y == c).sum()) for c in CLASSES}
    print("patches per class: " + ", ".join(f"{c}={n}" for c, n in counts.items()))
    return EXIT_OK


def _load_patches(path):
    with np.load(path, allow_pickle=False) as npz:
        try:
            return npz["patches"], [str(v) for v in npz["labels"]]
        except KeyError as exc:
            raise ConfigurationError(f"{path}: missing array {exc.args[0]}") from None


def cmd_train(args):
    cfg = _load_config(args)
    if cfg.backend != "reference":
        raise ConfigurationError("backend: only the reference backend can be trained")
    if (args.manifest is None) == (args.patches is None):
        raise ConfigurationError("train: give exactly one of --manifest or --patches")
    out = Path(args.out)
    if args.patches is not None:
        X, y = _load_patches(args.patches)
    else:
        patches = _balanced_set(cfg, args.manifest)
        X, y = np.stack([lp.patch for lp in patches]), [lp.label for lp in patches]
        del patches
    clf = _classifier(cfg)
    clf.verbose = args.verbose
    clf.fit(X, y)
    clf.save(out / "model.json")
    _write_json(out / "history.json", clf.history_.to_dict())
    _write_run(out, "train", cfg, manifest=args.manifest, patches=args.patches)
    h = clf.history_
    print(f"selected epoch {h.selected_epoch} (val loss {h.val_loss[h.selected_epoch]:.4f}); "
          f"model written to {out / 'model.json'}")
    return EXIT_OK


def cmd_detect(args):
    cfg = _load_config(args)
    out = Path(args.out)
    image = read_png(args.image)
    backend = _open_backend(cfg, args.model)
    try:
        detector = _detector(cfg).attach(backend)
        gray, prob_map = detector.predict_map(image)
    finally:
        _close(backend)
    detection = predict_image(prob_map, cfg.get("fusion").threshold)
    _write_json(out / "detection.json", detection.to_dict())
    write_png(out / "overlay.png", render_overlay(gray, prob_map, detection))
    if args.dump_map:
        save_probability_map(prob_map, out / "probability_map.json")
    _write_run(out, "detect", cfg, image=args.image, model=args.model)
    print(json.dumps(detection.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _load_config(args)
    out = Path(args.out)
    mode = args.mode.replace("-", "_")
    _, data = _read_dataset(args.manifest)
    backend = _open_backend(cfg, args.model)
    try:
        detector = _detector(cfg).attach(backend)
        report, matrix = evaluate_pipeline(data, detector, mode)
    finally:
        _close(backend)
    name = "reference" if cfg.backend == "reference" else "external"
    text = (format_table({(name, args.mode): report}) + "\n"
            + format_precision_table({name: report}) + "\n" + format_confusion(matrix))
    stem = f"report_{mode}"
    (out / f"{stem}.json").parent.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(report_json(report, matrix, mode=args.mode, images=len(data)))
    (out / f"{stem}.txt").write_text(text)
    _write_run(out, "evaluate", cfg, manifest=args.manifest, model=args.model, mode=args.mode)
    print(text, end="")
    return EXIT_OK


def cmd_version(args):
    print(f"eggscan {__version__}")
    return EXIT_OK


# ----------------------------------------------------------------------------- parser

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (a previous run.json is accepted)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config file)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--verbose", action="store_true")

    backend = _Parser(add_help=False)
    backend.add_argument("--backend", help='"reference" (default) or "cmd:<command line>"')
    backend.add_argument("--model", help="saved reference model (model.json or its directory)")
    backend.add_argument("--threshold", type=float, help="minimum peak probability for a detection")
    backend.add_argument("--sigma", type=float, help="Gaussian weight width in normalised patch units")

    parser = _Parser(prog="eggscan", description="Parasite egg detection in microscopy images.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic annotated corpus")
    p.add_argument("--n", type=int, default=160, help="number of images (default 160)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", parents=[common], help="split a manifest and label the patch grid")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("augment", parents=[common], help="build the balanced augmented patch set")
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--target-per-class", type=int, dest="target_per_class")
    p.add_argument("--dump-dir", help="also write every patch as a PNG here")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", parents=[common], help="train the reference classifier")
    p.add_argument("--manifest", help="training manifest (augmented on the fly)")
    p.add_argument("--patches", help="patches.npz written by 'augment'")
    p.add_argument("--backend", help="must be 'reference'")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--target-per-class", type=int, dest="target_per_class")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", parents=[common, backend], help="detect the egg in one image")
    p.add_argument("--image", required=True)
    p.add_argument("--dump-map", action="store_true", help="also save the fused probability map")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", parents=[common, backend], help="patch or whole-image metrics")
    p.add_argument("--manifest", required=True, help="test manifest")
    p.add_argument("--mode", choices=["patch", "whole-image"], default="whole-image")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("version", help="print the package version")
    p.set_defaults(func=cmd_version)
    return parser


def run_command(argv):
    """Run one subcommand and return its exit status."""
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ConfigurationError, InvalidInputError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        if exc.diagnostic:
            print(exc.diagnostic, file=sys.stderr)
        return EXIT_BACKEND
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main(argv=None):
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
