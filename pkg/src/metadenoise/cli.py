"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 training aborted, 4 artifact error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import adapt_eval
from .checkpoint import checkpoint_from_state, load_checkpoint, save_checkpoint, state_from_checkpoint
from .config import ExperimentConfig, load_config, require_paths
from .degrade import degrade_random_sequence, write_records
from .errors import ArtifactError, ConfigError, ImageFormatError, TrainingAborted
from .imaging import center_crop, list_images, load_image, load_paired_folder, save_image
from .meta_train import LOG_HEADER, STAGE_MAXL, finetune, init_state, pretrain
from .networks import to_image

log = logging.getLogger("metadenoise")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_ARTIFACT = 0, 2, 3, 4


class _CsvLog:
    def __init__(self, path: Path):
        self.fh = open(path, "w", newline="")
        self.writer = csv.DictWriter(self.fh, LOG_HEADER, lineterminator="\n")
        self.writer.writeheader()

    def __call__(self, row: dict):
        self.writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        self.fh.flush()

    def close(self):
        self.fh.close()


def _lock(output_dir: Path) -> FileLock:
    output_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(output_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise ConfigError(f"{output_dir} is in use by another process") from exc
    return lock


def _load_pairs_or_fail(path) -> list:
    try:
        pairs = load_paired_folder(path)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    if not pairs:
        raise ConfigError(f"{path} contains no image pairs")
    return pairs


def _epoch_callback(cfg: ExperimentConfig, meta, out: Path, prefix: str, val_pairs):
    def on_epoch_end(state):
        final = state.epoch == meta.epochs or state.epoch == 0
        if state.epoch % meta.checkpoint_every == 0 or final:
            save_checkpoint(checkpoint_from_state(state, cfg.to_dict()), out / f"ckpt_{prefix}_{state.epoch}.bin")
        if val_pairs:
            report = adapt_eval.evaluate(val_pairs, state.theta1, state.theta2, "no-adapt", meta.val_crop)
            report.to_csv(out / f"val_{prefix}_{state.epoch}.csv")
            log.info("epoch %d validation %s", state.epoch, report.summary())

    return on_epoch_end


def _train(cfg: ExperimentConfig, out: Path, prefix: str, run):
    lock = _lock(out)
    train_log = _CsvLog(out / f"train_log_{prefix}.csv")
    try:
        run(train_log)
    except TrainingAborted as exc:
        if exc.state is not None:
            save_checkpoint(checkpoint_from_state(exc.state, cfg.to_dict()), out / f"ckpt_{prefix}_abort.bin")
        raise
    finally:
        train_log.close()
        lock.release()


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    require_paths(("train_clean", cfg.data.train_clean))
    if cfg.data.pretrain_val:
        require_paths(("pretrain_val", cfg.data.pretrain_val))
    images = [load_image(p) for p in list_images(cfg.data.train_clean)]
    if not images:
        raise ConfigError(f"no images in {cfg.data.train_clean}")
    val = _load_pairs_or_fail(cfg.data.pretrain_val) if cfg.data.pretrain_val else None
    out = Path(cfg.output_dir) / "pretrain"
    meta = cfg.pretrain

    def run(train_log):
        state = init_state(cfg.network, meta.seed)
        pretrain(images, cfg.degradation, meta, state=state, log_fn=train_log,
                 on_epoch_end=_epoch_callback(cfg, meta, out, "maxl", val))

    _train(cfg, out, "maxl", run)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    if not cfg.data.finetune:
        raise ConfigError("data.finetune lists no corpora")
    require_paths(*[(f"finetune[{i}]", p) for i, p in enumerate(cfg.data.finetune)])
    if cfg.data.finetune_val:
        require_paths(("finetune_val", cfg.data.finetune_val))
    pool = []
    for p in cfg.data.finetune:
        pool.extend(pair for _, pair in _load_pairs_or_fail(p))
    val = _load_pairs_or_fail(cfg.data.finetune_val) if cfg.data.finetune_val else None
    meta = cfg.finetune
    scope = args.update_scope or meta.update_scope

    if args.init:
        ckpt = load_checkpoint(args.init)
        if ckpt.stage != STAGE_MAXL:
            log.warning("initializing fine-tuning from a %r checkpoint", ckpt.stage)
        if ckpt.theta1.config != cfg.network:
            log.warning("checkpoint network config differs from the config file; using the checkpoint's")
        state = state_from_checkpoint(ckpt, restore_optimizer=False)
    else:
        state = init_state(cfg.network, meta.seed)
    out = Path(cfg.output_dir) / "finetune"

    def run(train_log):
        finetune(state, [pool], meta, log_fn=train_log, scope=scope,
                 on_epoch_end=_epoch_callback(cfg, meta, out, "mtl", val))

    _train(cfg, out, "mtl", run)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    require_paths(("test", cfg.data.test))
    pairs = _load_pairs_or_fail(cfg.data.test)
    ckpt = load_checkpoint(args.ckpt)
    mode = "adapt" if args.adapt == "on" else "no-adapt"
    out = Path(cfg.output_dir) / "eval"
    lock = _lock(out)
    try:
        traces = {}
        report = adapt_eval.evaluate(pairs, ckpt.theta1, ckpt.theta2, mode, cfg.eval_crop, cfg.adapt, traces)
        stem = Path(args.ckpt).stem
        report.to_csv(out / f"{stem}_adapt-{args.adapt}.csv")
        if traces:
            adapt_eval.write_traces(out / f"{stem}_adapt-{args.adapt}_trace.csv", traces)
    finally:
        lock.release()
    print(report.summary())
    return EXIT_OK


def _noisy_inputs(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if path.is_dir():
        files = list_images(path / "noisy") if (path / "noisy").is_dir() else list_images(path)
        if files:
            return files
    raise ConfigError(f"no input images at {path}")


def cmd_adapt(args) -> int:
    cfg = load_config(args.config)
    files = _noisy_inputs(Path(args.input))
    ckpt = load_checkpoint(args.ckpt)
    out = Path(cfg.output_dir) / "adapt"
    lock = _lock(out)
    try:
        traces = {}
        for f in files:
            heads, trace = adapt_eval.meta_test_adapt(ckpt.theta1, ckpt.theta2, load_image(f), cfg.adapt)
            save_image(to_image(trace.final_clean), out / f"{f.stem}.png")
            traces[f.stem] = trace
        adapt_eval.write_traces(out / "adapt_trace.csv", traces)
    finally:
        lock.release()
    print(f"adapted {len(files)} image(s) into {out}")
    return EXIT_OK


def cmd_degrade(args) -> int:
    cfg = load_config(args.config)
    src = Path(args.input)
    if not src.is_dir():
        raise ConfigError(f"input folder not found: {src}")
    files = list_images(src)
    if not files:
        raise ConfigError(f"no images in {src}")
    out = Path(args.output)
    (out / "noisy").mkdir(parents=True, exist_ok=True)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    records = []
    for i, f in enumerate(files):
        seed = int(np.random.SeedSequence([cfg.pretrain.seed, i]).generate_state(1)[0])
        clean = load_image(f)
        noisy, rec = degrade_random_sequence(clean, cfg.degradation, np.random.default_rng(seed))
        rec.seed = seed
        save_image(noisy, out / "noisy" / f"{f.stem}.png")
        save_image(clean, out / "clean" / f"{f.stem}.png")
        records.append((f.stem, rec))
    write_records(out / "degradation_record.csv", records)
    print(f"degraded {len(files)} image(s) into {out}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    cfg = load_config(args.config)
    source = Path(args.input) if args.input else (Path(cfg.data.test) if cfg.data.test else None)
    if source is None:
        raise ConfigError("no images: pass --in or set data.test")
    files = _noisy_inputs(source)[: args.images]
    ckpts = [load_checkpoint(p) for p in args.ckpt]
    images = [center_crop(load_image(f), cfg.eval_crop) for f in files]
    out = Path(cfg.output_dir) / "figures" / args.what
    lock = _lock(out)
    try:
        if args.what == "masks":
            written = adapt_eval.visualize_masks([c.theta2 for c in ckpts], images, out)
        elif args.what == "features":
            heads, _ = adapt_eval.meta_test_adapt(ckpts[0].theta1, ckpts[0].theta2, images[0], cfg.adapt)
            written = adapt_eval.visualize_features(ckpts[0].theta1, heads, images[0], out)
        else:
            written, _ = adapt_eval.unfold_adaptation(ckpts[0].theta1, ckpts[0].theta2, images[0], cfg.adapt,
                                                      out, image_id=files[0].stem)
    finally:
        lock.release()
    print(f"wrote {len(written)} figure(s) into {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metadenoise", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="meta-auxiliary pre-training on synthetic noise")
    p.add_argument("config")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="meta-transfer fine-tuning on paired corpora")
    p.add_argument("config")
    init = p.add_mutually_exclusive_group(required=True)
    init.add_argument("--init", metavar="CKPT")
    init.add_argument("--random-init", action="store_true")
    p.add_argument("--update-scope", choices=("heads", "all"))
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="PSNR/SSIM on the test corpus")
    p.add_argument("config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--adapt", choices=("on", "off"), default="off")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("adapt", help="denoise images with per-image test-time adaptation")
    p.add_argument("config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("degrade", help="build a noisy/clean corpus with synthetic degradations")
    p.add_argument("config")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("visualize", help="mask, feature-map and unfolded-adaptation figures")
    p.add_argument("config")
    p.add_argument("--ckpt", action="append", required=True)
    p.add_argument("--what", choices=("masks", "features", "unfold"), required=True)
    p.add_argument("--in", dest="input")
    p.add_argument("--images", type=int, default=2)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ImageFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
