"""Command-line entry point: ``amdefect <verb> [flags]``.

Every verb that produces artifacts writes them under ``--out`` together with a
``run.meta`` record of the resolved flags and seed. Exit codes: 0 success,
1 runtime failure, 2 bad flags or configuration.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (Manifest, ManifestEntry, SurrogateConfig, add_noise, class_stats,
                      grid_boxes, label_names, load_arrays, load_png, save_png, split, surrogate_generate,
                      tile_layer)
from .evaluation import EvalReport, SSIMReport, confusion, ssim

log = logging.getLogger("amdefect")


class UsageError(Exception):
    """Bad flags or configuration (exit 2)."""


# helpers

def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, fallback: int = 0) -> int:
    return fallback if args.seed is None else args.seed


def write_meta(out: Path, args, seed: int, extra: dict | None = None) -> None:
    """UTF-8 ``key = value`` record of the verb, every flag and the resolved seed."""
    lines = ["tool = amdefect", f"version = {__version__}", f"verb = {args.verb}", f"seed = {seed}"]
    for key in sorted(vars(args)):
        if key in ("verb", "func", "seed", "out_required"):
            continue
        value = getattr(args, key)
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"flag.{key} = {value}")
    for key, value in sorted((extra or {}).items()):
        lines.append(f"{key} = {value}")
    (out / "run.meta").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_manifest(path: str) -> Manifest:
    try:
        return Manifest.load(path)
    except FileNotFoundError as exc:
        raise RuntimeError(str(exc)) from exc


def _split_entries(manifest: Manifest, split_tag: str) -> Manifest:
    """Entries tagged ``split_tag`` when the manifest mixes splits, otherwise everything."""
    tags = {e.split for e in manifest.entries}
    return manifest.subset(split_tag) if len(tags) > 1 else manifest


def _parse_pairs(items: list[str] | None, flag: str) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"{flag} expects CLASS=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def _ints(text: str, flag: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from None


# verbs

def cmd_surrogate(args) -> None:
    try:
        cfg = SurrogateConfig.load(args.config) if args.config else SurrogateConfig()
        if args.label_set:
            cfg.label_set = args.label_set
        if args.tile_size:
            cfg.tile_size = args.tile_size
        if args.count:
            cfg.counts = {k: int(v) for k, v in _parse_pairs(args.count, "--count").items()}
        if args.total:
            from .experiments import default_surrogate

            cfg.counts = default_surrogate(total=args.total).counts
        cfg.seed = _seed(args, cfg.seed)
        cfg.__post_init__()
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    out = _out(args)
    manifest, masks = surrogate_generate(cfg, out)
    print(class_stats(manifest).to_text())
    write_meta(out, args, cfg.seed, {"tiles": len(manifest), "masks": len(masks)})


def cmd_tile(args) -> None:
    layer = load_png(args.layer).pixels
    if args.box:
        boxes = [_ints(b, "--box") for b in args.box]
        if any(len(b) != 4 for b in boxes):
            raise UsageError("--box expects x,y,w,h")
    else:
        boxes = grid_boxes(layer.shape[0], layer.shape[1], args.size)
    out = _out(args)
    tiles = tile_layer(layer, boxes, label=args.label, source_id=Path(args.layer).stem)
    entries = []
    for k, tile in enumerate(tiles):
        path = out / "tiles" / f"{Path(args.layer).stem}_{k:04d}.png"
        save_png(tile, path)
        entries.append(ManifestEntry(str(path.relative_to(out)), args.label, "train"))
    Manifest(entries, args.label_set, _seed(args), out).save(out / "manifest.tsv")
    write_meta(out, args, _seed(args), {"tiles": len(tiles)})


def cmd_stats(args) -> None:
    manifest = _load_manifest(args.manifest)
    text = class_stats(manifest).to_text()
    print(text)
    if args.out:
        out = _out(args)
        (out / "stats.txt").write_text(text + "\n", encoding="utf-8")
        write_meta(out, args, _seed(args))


def cmd_split(args) -> None:
    manifest = _load_manifest(args.manifest)
    try:
        a, b = (int(t) for t in args.ratio.split(":"))
    except ValueError:
        raise UsageError(f"--ratio expects A:B, got {args.ratio!r}") from None
    seed = _seed(args, manifest.seed)
    train, test = split(manifest, (a, b), seed=seed, stratified=not args.no_stratify)
    out = _out(args)
    train.save(out / "train.tsv")
    test.save(out / "test.tsv")
    train.with_entries(train.entries + test.entries).save(out / "manifest.tsv")
    write_meta(out, args, seed, {"train": len(train), "test": len(test)})


def cmd_balance(args) -> None:
    from .experiments import collect_masks
    from .models import load_checkpoint
    from .synthdata import BalanceResources, balance

    manifest = _load_manifest(args.manifest)
    names = label_names(manifest.label_set)
    counts = {c: sum(1 for e in manifest.entries if e.label == c) for c in names}
    classes = args.cls or [c for c in names[1:] if counts[c] > 0]
    unknown = [c for c in classes if c not in names]
    if unknown:
        raise UsageError(f"class {unknown[0]!r} not in label set {manifest.label_set!r}")
    if args.target is None:
        raise UsageError("--target is required")
    targets = {c: max(args.target, counts[c]) for c in classes}
    resources = BalanceResources()
    if args.strategy in ("cds", "rds"):
        resources.mask_pool = collect_masks(manifest, classes, args.tau)
        resources.clean_pool = [manifest.resolve(e) for e in manifest.entries if e.label == names[0]]
    elif args.strategy == "gan":
        for cls, path in _parse_pairs(args.generator, "--generator").items():
            resources.generators[cls] = load_checkpoint(path)
    out = _out(args)
    seed = _seed(args)
    balanced = balance(manifest, args.strategy, targets, seed=seed, resources=resources, out_root=out)
    balanced.save(out / "manifest.tsv")
    print(class_stats(balanced).to_text())
    write_meta(out, args, seed, {"entries": len(balanced)})


def _train_config(args):
    from .training import AugmentConfig, TrainConfig

    try:
        cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
        if args.max_epochs is not None:
            cfg.max_epochs = args.max_epochs
        if args.batch_size is not None:
            cfg.batch_size = args.batch_size
        if args.lr is not None:
            cfg.adam.lr = args.lr
        if getattr(args, "augment", False):
            cfg.augment = AugmentConfig(enabled=True)
        cfg.seed = _seed(args, cfg.seed)
        cfg.__post_init__()
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _history_text(hist) -> str:
    lines = [f"stop_reason = {hist.stop_reason}", f"steps = {hist.steps}", f"best_epoch = {hist.best_epoch + 1}"]
    for k, loss in enumerate(hist.loss):
        acc = f"  accuracy {hist.accuracy[k]!r}" if k < len(hist.accuracy) else ""
        lines.append(f"epoch {k + 1}  loss {loss!r}{acc}")
    return "\n".join(lines) + "\n"


def cmd_train_cnn(args) -> None:
    from .models import Network, build_cnn, model_id, save_checkpoint
    from .training import fit

    cfg = _train_config(args)
    manifest = _split_entries(_load_manifest(args.manifest), "train")
    if not len(manifest):
        raise RuntimeError("manifest has no training entries")
    x, y = load_arrays(manifest)
    names = label_names(manifest.label_set)
    try:
        spec = build_cnn(x.shape[1:], len(names), filters=_ints(args.filters, "--filters"),
                         label_set=manifest.label_set, class_names=list(names))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    net = Network(spec, seed=cfg.seed)
    out = _out(args)
    cfg.save(out / "train.cfg")
    hist = None
    if cfg.max_epochs > 0:
        _, hist = fit(net, x, y, cfg)
        (out / "history.txt").write_text(_history_text(hist), encoding="utf-8")
    net.metadata.update({"seed": cfg.seed, "epochs": len(hist.loss) if hist else 0, "train_size": len(x)})
    save_checkpoint(net, out / "cnn.fgs")
    write_meta(out, args, cfg.seed, {"model_id": model_id(net)})


def cmd_train_dae(args) -> None:
    from .experiments import train_dae
    from .models import model_id, save_checkpoint

    seed = _seed(args)
    manifest = _split_entries(_load_manifest(args.manifest), "train")
    x, _ = load_arrays(manifest)
    if not len(x):
        raise RuntimeError("manifest has no training entries")
    dae, hist = train_dae(x, sigma=args.sigma, seed=seed, epochs=args.max_epochs, filters=args.filters,
                          batch_size=args.batch_size)
    out = _out(args)
    if hist.loss:
        (out / "history.txt").write_text(_history_text(hist), encoding="utf-8")
    save_checkpoint(dae, out / "dae.fgs")
    write_meta(out, args, seed, {"model_id": model_id(dae)})


def cmd_train_gan(args) -> None:
    from .models import GanConfig, Network, build_gan, gan_sample, model_id, save_checkpoint, train_gan
    from .training import AdamConfig

    seed = _seed(args)
    manifest = _split_entries(_load_manifest(args.manifest), "train")
    names = label_names(manifest.label_set)
    if args.cls not in names:
        raise UsageError(f"class {args.cls!r} not in label set {manifest.label_set!r}")
    x, _ = load_arrays(manifest.with_entries([e for e in manifest.entries if e.label == args.cls]))
    if len(x) == 0:
        raise RuntimeError(f"no tiles of class {args.cls!r} in the manifest")
    cfg = GanConfig(steps=args.steps, batch_size=min(args.batch_size, len(x)), latent_dim=args.latent_dim,
                    adam=AdamConfig(lr=args.lr, beta1=0.5), seed=seed)
    gspec, dspec = build_gan(cfg.latent_dim, x.shape[1:], gen_filters=_ints(args.gen_filters, "--gen-filters"),
                             disc_filters=_ints(args.disc_filters, "--disc-filters"))
    gen, _, hist = train_gan(x, cfg, label=args.cls, gen=Network(gspec, seed=seed),
                             disc=Network(dspec, seed=seed + 1))
    out = _out(args)
    save_checkpoint(gen, out / f"gan_{args.cls}.fgs")
    for k, tile in enumerate(gan_sample(gen, args.samples, seed=seed, label=args.cls)):
        save_png(tile, out / "samples" / f"{args.cls}_{k:04d}.png")
    write_meta(out, args, seed, {"model_id": model_id(gen)})


def cmd_denoise(args) -> None:
    from .models import denoise, load_checkpoint, predict

    seed = _seed(args)
    dae = load_checkpoint(args.dae)
    manifest = _load_manifest(args.manifest)
    clean, y = load_arrays(manifest)
    if args.sigma > 0:
        rng = np.random.default_rng(seed)
        noisy = np.stack([add_noise(img, args.sigma, rng) for img in clean])
    else:
        noisy = clean
    recon = denoise(dae, noisy)
    out = _out(args)
    entries = []
    for k, (e, img) in enumerate(zip(manifest.entries, recon)):
        path = out / "denoised" / f"{k:05d}_{Path(e.path).stem}.png"
        save_png(img, path)
        entries.append(ManifestEntry(str(path.relative_to(out)), e.label, e.split))
    Manifest(entries, manifest.label_set, seed, out).save(out / "manifest.tsv")
    lines = [f"SSIM(clean, input) mean {SSIMReport([ssim(a, b) for a, b in zip(clean, noisy)]).mean:.4f}",
             f"SSIM(clean, reconstructed) mean {SSIMReport([ssim(a, b) for a, b in zip(clean, recon)]).mean:.4f}"]
    if args.cnn:
        cnn = load_checkpoint(args.cnn)
        for name, x in (("clean", clean), ("input", noisy), ("reconstructed", recon)):
            lines.append(f"accuracy {name} (%) {100 * float((predict(cnn, x)[1] == y).mean()):.1f}")
    (out / "denoise.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    write_meta(out, args, seed)


def _read_predictions(path: str, label_set: str | None):
    """``truth<TAB>predicted`` rows (class names); extra columns ignored, ``#`` headers may set label_set."""
    truth, pred = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].strip().split("\t")
            if len(parts) == 2 and parts[0] == "label_set" and label_set is None:
                label_set = parts[1]
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise UsageError(f"{path}:{lineno}: expected truth<TAB>predicted")
        truth.append(parts[0])
        pred.append(parts[1])
    if label_set is None:
        raise UsageError("label set unknown: pass --label-set or add a '# label_set' header")
    return truth, pred, label_set


def cmd_eval(args) -> None:
    from .models import load_checkpoint, predict

    seed = _seed(args)
    if args.predictions:
        truth, pred, label_set = _read_predictions(args.predictions, args.label_set)
        names = label_names(label_set)
        bad = sorted({t for t in truth + pred if t not in names})
        if bad:
            raise UsageError(f"class {bad[0]!r} not in label set {label_set!r}")
        t_idx = [names.index(t) for t in truth]
        p_idx = [names.index(p) for p in pred]
    elif args.cnn and args.manifest:
        cnn = load_checkpoint(args.cnn)
        manifest = _split_entries(_load_manifest(args.manifest), "test")
        label_set, names = manifest.label_set, label_names(manifest.label_set)
        if cnn.spec.label_set and cnn.spec.label_set != label_set:
            raise UsageError(f"model label set {cnn.spec.label_set!r} differs from manifest {label_set!r}")
        x, t_idx = load_arrays(manifest)
        _, p_idx = predict(cnn, x)
    else:
        raise UsageError("eval needs --predictions, or --cnn with --manifest")
    if len(t_idx) == 0:
        raise RuntimeError("nothing to evaluate")
    cm = confusion(np.asarray(p_idx), np.asarray(t_idx), len(names), list(names), label_set)
    report = EvalReport(cm, title=args.title)
    out = _out(args)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    write_meta(out, args, seed, {"accuracy_percent": f"{100 * report.accuracy:.1f}"})


def cmd_predict(args) -> None:
    from .models import denoise, load_checkpoint, model_id, predict

    cnn = load_checkpoint(args.cnn)
    names = cnn.spec.class_names or [str(k) for k in range(cnn.spec.output_shape()[0])]
    rows: list[tuple[str, str]] = []
    if args.manifest:
        manifest = _load_manifest(args.manifest)
        rows = [(str(manifest.resolve(e)), e.label) for e in manifest.entries]
    rows += [(p, "-") for p in args.images]
    if not rows:
        raise UsageError("predict needs --manifest or image paths")
    x = np.stack([load_png(p).pixels for p, _ in rows])
    if args.dae:
        x = denoise(load_checkpoint(args.dae), x)
    probs, labels = predict(cnn, x)
    out = _out(args)
    lines = [f"# label_set\t{cnn.spec.label_set}", f"# model_id\t{model_id(cnn)}",
             "# truth\tpredicted\tpath\t" + ",".join(names)]
    for (path, truth), p, k in zip(rows, probs, labels):
        lines.append(f"{truth}\t{names[int(k)]}\t{path}\t" + ",".join(f"{v:.6f}" for v in p))
    (out / "predictions.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_meta(out, args, _seed(args), {"images": len(rows)})


def cmd_serve(args) -> None:
    from .models import CheckpointError
    from .service import serve

    if args.out:
        write_meta(_out(args), args, _seed(args))
    try:
        serve(args.model, args.dae, args.bind, args.max_batch)
    except (CheckpointError, OSError, ValueError) as exc:
        raise RuntimeError(f"refusing to start: {exc}") from exc


def cmd_experiment(args) -> None:
    from .experiments import Protocol, ProtocolError, run_experiment

    path = args.protocol or args.config
    if not path:
        raise UsageError("experiment needs --protocol FILE")
    try:
        protocol = Protocol.load(path)
    except (ProtocolError, KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    except OSError as exc:
        raise UsageError(f"cannot read protocol: {exc}") from exc
    if args.seed is not None:
        protocol.seed = args.seed
        if protocol.surrogate is not None:
            protocol.surrogate.seed = args.seed
    if args.repetitions is not None:
        protocol.repetitions = args.repetitions
    out = _out(args)
    report = run_experiment(protocol, out / "work")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    write_meta(out, args, protocol.seed, {"protocol.repetitions": protocol.repetitions,
                                          "protocol.strategies": ",".join(protocol.strategies)})


# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default: config value or 0)")
    common.add_argument("--config", default=None, help="key = value configuration file")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="amdefect", description="Layer-image defect classification toolkit.")
    parser.add_argument("--version", action="version", version=f"amdefect {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    def verb(name, func, help_text, out_required=True):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func, out_required=out_required)
        return p

    p = verb("surrogate", cmd_surrogate, "generate the procedural surrogate corpus")
    p.add_argument("--count", action="append", metavar="CLASS=N", help="tiles per class (repeatable)")
    p.add_argument("--total", type=int, help="HR-1-like class proportions for this many tiles")
    p.add_argument("--tile-size", type=int)
    p.add_argument("--label-set", choices=("hr1", "jbk75", "combined"))

    p = verb("tile", cmd_tile, "crop a layer image into tiles")
    p.add_argument("--layer", required=True, help="layer image (PNG)")
    p.add_argument("--box", action="append", metavar="X,Y,W,H", help="crop box (repeatable); default: grid")
    p.add_argument("--size", type=int, default=400, help="grid tile size")
    p.add_argument("--label", default="no-defect")
    p.add_argument("--label-set", default="hr1", choices=("hr1", "jbk75", "combined"))

    p = verb("stats", cmd_stats, "per-class counts and percentages", out_required=False)
    p.add_argument("--manifest", required=True)

    p = verb("split", cmd_split, "seeded stratified train/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratio", default="3:1")
    p.add_argument("--no-stratify", action="store_true")

    p = verb("balance", cmd_balance, "raise minority classes to a target count")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", required=True, choices=("cds", "rds", "sam", "gan"))
    p.add_argument("--class", dest="cls", action="append", help="class to balance (repeatable; default all minority)")
    p.add_argument("--target", type=int)
    p.add_argument("--generator", action="append", metavar="CLASS=MODEL", help="generator checkpoint for gan")
    p.add_argument("--tau", type=float, default=0.15, help="threshold for mask extraction without ground truth")

    p = verb("train-cnn", cmd_train_cnn, "train the tile classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--filters", default="16,32,64")
    p.add_argument("--augment", action="store_true", help="random rotation / zoom / shift")

    p = verb("train-dae", cmd_train_dae, "train the denoising autoencoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sigma", type=float, default=0.3)
    p.add_argument("--max-epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--filters", type=int, default=32)

    p = verb("train-gan", cmd_train_gan, "train a per-class generator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--class", dest="cls", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--latent-dim", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--gen-filters", default="64,32")
    p.add_argument("--disc-filters", default="16,32,64")
    p.add_argument("--samples", type=int, default=0, help="also write this many sample tiles")

    p = verb("denoise", cmd_denoise, "reconstruct tiles with a trained DAE")
    p.add_argument("--dae", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sigma", type=float, default=0.0, help="add Gaussian noise before denoising")
    p.add_argument("--cnn", help="also report classifier accuracy on clean / input / reconstructed")

    p = verb("eval", cmd_eval, "accuracy, confusion matrix and per-class metrics")
    p.add_argument("--predictions", help="TSV of truth<TAB>predicted class names")
    p.add_argument("--cnn")
    p.add_argument("--manifest")
    p.add_argument("--label-set", choices=("hr1", "jbk75", "combined"))
    p.add_argument("--title", default="evaluation")

    p = verb("predict", cmd_predict, "classify tiles")
    p.add_argument("--cnn", required=True)
    p.add_argument("--dae")
    p.add_argument("--manifest")
    p.add_argument("images", nargs="*", help="PNG tiles")

    p = verb("serve", cmd_serve, "run the HTTP prediction service", out_required=False)
    p.add_argument("--model", required=True)
    p.add_argument("--dae")
    p.add_argument("--bind", default="127.0.0.1:8000")
    p.add_argument("--max-batch", type=int, default=50)

    p = verb("experiment", cmd_experiment, "repeated split / balance / train / evaluate protocol")
    p.add_argument("--protocol")
    p.add_argument("--repetitions", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out_required and not args.out:
        print(f"amdefect {args.verb}: error: --out is required", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except UsageError as exc:
        print(f"amdefect {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one-line diagnostic, traceback only with -v
        log.debug("failure", exc_info=True)
        if args.verbose:
            log.exception("%s failed", args.verb)
        print(f"amdefect {args.verb}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
