"""Command-line pipeline: dataset synthesis, segmentation, training,
evaluation, explainability artifacts, and a finite-difference gradient audit.

Exit codes: 0 success, 1 usage/config error, 2 I/O error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import canny, checkpoint, data, explain, imgio, models, preprocess, training
from .errors import DataError, DimensionError, NumericalError
from .preprocess import ScalingScheme, scale_unit

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Flat key=value configuration; CLI flags override file values and the
    fully resolved config is written next to every training run."""

    model: str = "cnn"
    input_size: int = 64
    blocks: str = "16,32,64"
    convs: str = "1,1,1"
    fc: str = "128,3"
    dropout: float = 0.5
    clf_dropout: float = 0.4
    alpha: float = 0.05
    residual: bool = False
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    schedule: str = "none"
    step_every: int = 15
    step_factor: float = 0.1
    plateau_patience: int = 8
    plateau_factor: float = 0.2
    early_stop: int = 20
    max_epochs: int = 60
    augment: bool = True
    scaling: str = "simple"
    scale_mean: str = ""
    scale_std: str = ""
    seed: int = 0

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        text = Path(path).read_text()
        known = {f.name: f.type for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
        return cfg

    def to_text(self) -> str:
        lines = [f"{f.name} = {_fmt(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def _coerce(key: str, value: str, current):
    if isinstance(current, bool):
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key!r}: expected a boolean, got {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _int_tuple(text: str):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {text!r}")


def _float_tuple(text: str):
    return tuple(float(v) for v in text.split(",") if v.strip())


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for f in fields(RunConfig):
        if hasattr(args, f.name):
            flag = getattr(args, f.name)
            if flag is not None:
                setattr(cfg, f.name, _coerce(f.name, str(flag), getattr(cfg, f.name)))
    return cfg


def build_network(cfg: RunConfig, rng: np.random.Generator) -> models.Network:
    size = (3, cfg.input_size, cfg.input_size)
    blocks = _int_tuple(cfg.blocks)
    convs = _int_tuple(cfg.convs)
    if cfg.model == "cnn":
        vcfg = models.VggStyleConfig(block_channels=blocks, convs_per_block=convs,
                                     fc_dims=_int_tuple(cfg.fc), input_size=size,
                                     dropout_rate=cfg.dropout,
                                     residual_pairs=cfg.residual)
        return models.build_single_task_cnn(vcfg, rng)
    if cfg.model == "convae":
        enc = models.VggStyleConfig(block_channels=blocks, convs_per_block=convs,
                                    fc_dims=(3,), input_size=size, dropout_rate=0.0,
                                    residual_pairs=cfg.residual)
        ccfg = models.ConvAeClfConfig(encoder=enc, alpha=cfg.alpha,
                                      classifier_dropout=cfg.clf_dropout)
        return models.build_convae_clf(ccfg, rng)
    raise ValueError(f"unknown model {cfg.model!r} (expected cnn or convae)")


def scheme_from_config(cfg: RunConfig,
                       train_images: Optional[np.ndarray] = None) -> ScalingScheme:
    if cfg.scaling == "simple":
        return ScalingScheme.simple()
    if cfg.scaling == "fixed":
        return ScalingScheme.fixed()
    if cfg.scaling == "dataset":
        if cfg.scale_mean and cfg.scale_std:
            return ScalingScheme.dataset(_float_tuple(cfg.scale_mean),
                                         _float_tuple(cfg.scale_std))
        if train_images is None:
            raise ValueError("dataset scaling needs stored stats or training data")
        mean, std = preprocess.compute_dataset_stats(train_images)
        cfg.scale_mean = ",".join(f"{v:.8f}" for v in mean)
        cfg.scale_std = ",".join(f"{v:.8f}" for v in std)
        return ScalingScheme.dataset(mean, std)
    raise ValueError(f"unknown scaling scheme {cfg.scaling!r}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = data.SynthSpec(n_train=args.n, n_val=args.val, n_test=args.test,
                          image_size=args.size, background=args.background,
                          label_noise=args.label_noise, seed=args.seed)
    manifests = data.generate_synthetic(spec, args.out)
    for split, entries in manifests.items():
        print(f"{split}: {len(entries)} images")
    return EXIT_OK


def cmd_segment(args) -> int:
    in_dir = Path(args.in_dir)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = data.load_manifest(in_dir)
    kept = []
    report_rows = []
    skipped = 0
    for e in entries:
        img = imgio.read_image(in_dir / e.filename)
        if args.method == "mask":
            if e.mask_filename is None:
                raise DataError(f"{e.filename}: mask method needs a mask file")
            mask = imgio.read_mask(in_dir / e.mask_filename)
        else:
            mask = canny.segment_foreground(img, low=args.low, high=args.high,
                                            sigma=args.sigma)
        fg = int(mask.bits.sum())
        if fg == 0 or fg == mask.bits.size:
            skipped += 1
            print(f"warning: skipping {e.filename} (degenerate foreground)")
            continue
        bbox = preprocess.mask_to_bbox(mask)
        if args.mode == "bbox":
            out_img = preprocess.crop_to_bbox(img, bbox, margin=args.margin)
        else:
            out_img = preprocess.apply_splash(img, mask, fill=(0.0, 0.0, 0.0))
        imgio.write_image(out_dir / e.filename, out_img)
        kept.append(data.ManifestEntry(e.filename, e.grade, None))
        report_rows.append((e.filename, *bbox, fg / mask.bits.size))
    data.save_manifest(out_dir, kept)
    with open(out_dir / "report.csv", "w", newline="") as f:
        f.write("filename,x_min,y_min,x_max,y_max,foreground_fraction\n")
        for name, x0, y0, x1, y1, frac in report_rows:
            f.write(f"{name},{x0},{y0},{x1},{y1},{frac:.6f}\n")
    meta_path = in_dir / "meta.csv"
    if meta_path.exists():
        kept_names = {e.filename for e in kept}
        lines = meta_path.read_text().splitlines()
        out_lines = [lines[0]] + [ln for ln in lines[1:]
                                  if ln.split(",", 1)[0] in kept_names]
        (out_dir / "meta.csv").write_text("\n".join(out_lines) + "\n")
    print(f"processed {len(kept)} images, skipped {skipped}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    cfg.seed = args.seed
    root = Path(args.data)
    train_imgs, train_labels, _ = data.load_split_arrays(root / "train", cfg.input_size)
    val_imgs, val_labels, _ = data.load_split_arrays(root / "val", cfg.input_size)
    scheme = scheme_from_config(cfg, train_imgs)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    net = build_network(cfg, rng)

    tcfg = training.TrainConfig(
        optimizer=cfg.optimizer, lr=cfg.lr, momentum=cfg.momentum,
        batch_size=cfg.batch_size,
        schedule=None if cfg.schedule == "none" else cfg.schedule,
        step_every=cfg.step_every, step_factor=cfg.step_factor,
        plateau_patience=cfg.plateau_patience, plateau_factor=cfg.plateau_factor,
        early_stop_patience=cfg.early_stop, max_epochs=cfg.max_epochs,
        alpha=cfg.alpha, augment=cfg.augment)
    best, history = training.train_loop(net, train_imgs, train_labels, val_imgs,
                                        val_labels, tcfg, seed=cfg.seed,
                                        scheme=scheme, verbose=not args.quiet)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint.save_checkpoint(out_dir / "model.mgck", best)
    training.write_history(out_dir / "history.csv", history)
    (out_dir / "run_config.txt").write_text(cfg.to_text())
    best_acc = max(row["val_acc"] for row in history)
    print(f"best validation accuracy: {best_acc:.6f}")
    return EXIT_OK


def _load_trained(args):
    ckpt_path = Path(args.checkpoint)
    cfg_path = Path(args.config) if getattr(args, "config", None) else \
        ckpt_path.parent / "run_config.txt"
    if not cfg_path.exists():
        raise DataError(f"missing run config: {cfg_path}")
    cfg = RunConfig.from_file(cfg_path)
    net = build_network(cfg, np.random.default_rng(0))
    net.load_state_dict(checkpoint.load_checkpoint(ckpt_path))
    net.eval()
    return net, cfg


def cmd_eval(args) -> int:
    net, cfg = _load_trained(args)
    split_dir = Path(args.data) / args.split
    imgs, labels, _ = data.load_split_arrays(split_dir, cfg.input_size)
    scheme = scheme_from_config(cfg)
    metrics = training.evaluate_model(net, imgs, labels, scheme, cfg.batch_size)
    preds = training.predict(net, imgs, scheme, cfg.batch_size)
    cm = explain.confusion_matrix(preds, labels)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    explain.write_confusion_csv(out_dir / f"confusion_{args.split}.csv", cm)
    print(f"accuracy: {metrics['accuracy']:.6f}")
    if "recon_loss" in metrics:
        print(f"reconstruction mse: {metrics['recon_loss']:.6f}")
    return EXIT_OK


def cmd_explain(args) -> int:
    net, cfg = _load_trained(args)
    split_dir = Path(args.data) / args.split
    imgs, labels, names = data.load_split_arrays(split_dir, cfg.input_size)
    scheme = scheme_from_config(cfg)
    scaled = np.stack([scale_unit(img, scheme) for img in imgs])
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.mode == "saliency":
        limit = args.limit if args.limit > 0 else len(imgs)
        for i in range(min(limit, len(imgs))):
            smap = explain.saliency_map(net, scaled[i])
            explain.save_saliency(out_dir / Path(names[i]).stem, smap)
        print(f"wrote {min(limit, len(imgs))} saliency maps to {out_dir}")
        return EXIT_OK

    if args.mode == "pca":
        latents = explain.extract_latent(net, scaled, cfg.batch_size)
        k = min(args.components, len(latents) - 1, latents.shape[1])
        model = explain.pca_fit(latents, k)
        coeffs = explain.pca_project(model, latents)
        meta_path = split_dir / "meta.csv"
        if meta_path.exists():
            meta = data.load_meta(split_dir)
            defect = [meta.get(n, 0.0) for n in names]
            coeffs = explain.flip_to_positive_correlation(coeffs, defect, col=0)
        explain.write_pca_coeffs(out_dir / "pca_coeffs.csv", names, labels, coeffs)
        explain.write_pca_model(out_dir / "pca_model.csv", model)
        ratios = ", ".join(f"{v:.4f}" for v in model.explained_variance_ratio)
        print(f"explained variance ratios: {ratios}")
        return EXIT_OK

    if args.mode == "rank":
        rows = explain.rank_misclassified(net, scaled, labels, names, cfg.batch_size)
        with open(out_dir / "rank.csv", "w", newline="") as f:
            f.write("name,label,prediction,loss\n")
            for r in rows:
                f.write(f"{r['name']},{data.GRADE_NAMES[r['label']]},"
                        f"{data.GRADE_NAMES[r['prediction']]},{r['loss']:.6f}\n")
        for r in rows[:10]:
            print(f"{r['name']}: true={data.GRADE_NAMES[r['label']]} "
                  f"pred={data.GRADE_NAMES[r['prediction']]} loss={r['loss']:.4f}")
        print(f"{len(rows)} misclassified samples")
        return EXIT_OK

    raise ValueError(f"unknown explain mode {args.mode!r}")


def cmd_gradcheck(args) -> int:
    report, attempt = models.run_model_grad_check(
        args.model, args.seed, corrupt=args.corrupt)
    if attempt > 0:
        print(f"note: used batch draw {attempt + 1} "
              f"(earlier draws had no branch-stable stencils)")
    worst_name, worst = max(report, key=lambda kv: kv[1])
    for name, err in report:
        print(f"{name}: {err:.3e}")
    print(f"worst: {worst_name} {worst:.3e} (tolerance {args.tol:.1e})")
    if worst >= args.tol:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradient check passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fruitgrade",
                     description="Fruit quality grading pipeline")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="training images")
    p.add_argument("--val", type=int, default=0)
    p.add_argument("--test", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--background", choices=["plain", "cluttered"], default="plain")
    p.add_argument("--label-noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", help="background removal / cropping")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=["canny", "mask"], default="mask")
    p.add_argument("--mode", choices=["bbox", "splash"], default="bbox")
    p.add_argument("--low", type=float, default=0.1)
    p.add_argument("--high", type=float, default=0.3)
    p.add_argument("--sigma", type=float, default=1.4)
    p.add_argument("--margin", type=float, default=0.0)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--quiet", action="store_true")
    for name in ("model", "optimizer", "schedule", "scaling", "blocks",
                 "convs", "fc"):
        p.add_argument(f"--{name}", default=None)
    for name in ("input-size", "batch-size", "max-epochs", "early-stop"):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"),
                       type=int, default=None)
    for name in ("lr", "momentum", "dropout", "alpha"):
        p.add_argument(f"--{name}", type=float, default=None)
    p.add_argument("--augment", choices=["true", "false"], default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=data.SPLITS, default="test")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="saliency / pca / misclassification rank")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=data.SPLITS, default="test")
    p.add_argument("--mode", choices=["saliency", "pca", "rank"], required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--limit", type=int, default=8, help="saliency image cap")
    p.add_argument("--components", type=int, default=2)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--model", choices=["cnn", "convae"], default="cnn")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    if not getattr(args, "func", None):
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.func(args)
    except (DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
