"""Command-line entry point.

Subcommands: train-classifier, train-joint, attack, recover, evaluate,
robustness, ablate, transfer-heatmap, lemma-check. Every command takes
--config/--seed and echoes the resolved configuration; outputs are
write-once unless --overwrite is passed.

Exit codes: 0 ok, 1 unexpected failure, 2 missing input file, 3 invalid
configuration, 4 checkpoint format-version mismatch, 5 corrupt
checkpoint, 6 refusing to overwrite an existing output.
"""

import argparse
import csv
import os
import sys

import numpy as np
import torch
from PIL import Image

from . import attacks, evaluate
from .config import RunConfig, dump_run_config, load_run_config
from .data import Dataset, dequantize_8bit, load_mnist, quantize_8bit
from .errors import (CheckpointCorruptError, CheckpointVersionError,
                     ConfigError)
from .reducer import lemma_check
from .train import (load_classifier, load_joint, save_classifier, save_joint,
                    train_classifier, train_joint)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_MISSING_FILE = 2
EXIT_BAD_CONFIG = 3
EXIT_CKPT_VERSION = 4
EXIT_CKPT_CORRUPT = 5
EXIT_EXISTS = 6


class OutputExistsError(RuntimeError):
    pass


def _load_config(args):
    if getattr(args, "config", None):
        cfg = load_run_config(args.config)
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.set("train", "seed", args.seed)
    return cfg


def _echo_config(cfg):
    print("# resolved configuration")
    for line in dump_run_config(cfg).rstrip().splitlines():
        print(f"# {line}")


def _prepare_out(path, overwrite):
    if os.path.exists(path) and not overwrite:
        raise OutputExistsError(f"{path} exists; pass --overwrite to replace it")
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _load_split(cfg, split, limit_key):
    ds = load_mnist(cfg.get("data", "root"), split)
    limit = cfg.get("data", limit_key)
    return ds.subset(limit) if limit else ds


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train_classifier(args):
    cfg = _load_config(args)
    _echo_config(cfg)
    _prepare_out(args.out, args.overwrite)
    train = _load_split(cfg, "train", "train_limit")
    test = _load_split(cfg, "test", "eval_limit")
    spec = cfg.classifier_spec()
    model, telemetry = train_classifier(train, spec, cfg.train_config(),
                                        eval_dataset=test, log=print)
    save_classifier(model, spec, args.out, epoch=len(telemetry))
    print(f"final test CER: {telemetry[-1]['test_cer']:.2f}%")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train_joint(args):
    cfg = _load_config(args)
    _echo_config(cfg)
    _prepare_out(args.out, args.overwrite)
    classifier, spec = load_classifier(args.classifier)
    train = _load_split(cfg, "train", "train_limit")
    bundle, telemetry = train_joint(train, classifier, spec, cfg.train_config(),
                                    log=print)
    save_joint(bundle, args.out, epoch=len(telemetry))
    print(f"wrote {args.out}")
    return EXIT_OK


def _save_png(path, image_chw):
    arr = quantize_8bit(image_chw).numpy()
    if arr.shape[0] != 1:
        raise ConfigError("image export supports single-channel images only")
    Image.fromarray(arr[0], mode="L").save(path, format="PNG")


def _load_png(path):
    arr = np.asarray(Image.open(path), dtype=np.uint8)
    return dequantize_8bit(torch.from_numpy(arr.copy())[None, :, :])


def cmd_attack(args):
    cfg = _load_config(args)
    _echo_config(cfg)
    _prepare_out(os.path.join(args.out, "manifest.csv"), args.overwrite)
    bundle = load_joint(args.ckpt)
    ds = _load_split(cfg, args.split, "eval_limit")
    if args.limit:
        ds = ds.subset(args.limit)
    x_adv = evaluate.materialized_adversarial(bundle, ds.images)
    rows = []
    for i in range(len(ds)):
        clean_name = f"clean_{i:05d}.png"
        adv_name = f"adv_{i:05d}.png"
        _save_png(os.path.join(args.out, clean_name), ds.images[i])
        _save_png(os.path.join(args.out, adv_name), x_adv[i])
        rows.append((adv_name, int(ds.labels[i]), clean_name))
    with open(os.path.join(args.out, "manifest.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["filename", "label", "clean_file"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} adversarial images to {args.out}")
    return EXIT_OK


def cmd_recover(args):
    cfg = _load_config(args)
    _echo_config(cfg)
    manifest = os.path.join(args.adv_dir, "manifest.csv")
    if not os.path.exists(manifest):
        raise FileNotFoundError(manifest)
    _prepare_out(os.path.join(args.out, "manifest.csv"), args.overwrite)
    bundle = load_joint(args.ckpt)
    with open(manifest, newline="") as f:
        entries = list(csv.DictReader(f))
    out_rows = []
    for i, entry in enumerate(entries):
        x_adv = _load_png(os.path.join(args.adv_dir, entry["filename"]))[None]
        rec = evaluate.materialized_recovered(bundle, x_adv)[0]
        rec_name = f"rec_{i:05d}.png"
        _save_png(os.path.join(args.out, rec_name), rec)
        out_rows.append((rec_name, entry["label"], entry["clean_file"]))
    with open(os.path.join(args.out, "manifest.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["filename", "label", "clean_file"])
        writer.writerows(out_rows)
    print(f"wrote {len(out_rows)} recovered images to {args.out}")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _load_config(args)
    _echo_config(cfg)
    _prepare_out(args.out, args.overwrite)
    bundle = load_joint(args.ckpt)
    ds = _load_split(cfg, args.split, "eval_limit")
    adv_row, rec_row = evaluate.recoverability_report(
        bundle, ds, cfg.get("eval", "batch_size"))
    rows = [evaluate.clean_row(bundle.classifier, ds), adv_row, rec_row]
    evaluate.write_metrics_csv(rows, args.out)
    for r in rows:
        print(f"{r.method}: l2={r.l2:.4f} psnr={r.psnr_db:.2f} cer={r.cer_pct:.2f}"
              + (f" asr={r.asr_pct:.2f}" if r.asr_pct is not None else ""))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_robustness(args):
    cfg = _load_config(args)
    _echo_config(cfg)
    _prepare_out(args.out, args.overwrite)
    bundle = load_joint(args.ckpt)
    ds = _load_split(cfg, args.split, "eval_limit")
    rows = evaluate.robustness_report(bundle, ds, cfg.transform_kinds(),
                                      cfg.get("eval", "batch_size"))
    evaluate.write_metrics_csv(rows, args.out)
    for r in rows:
        print(f"{r.method}: asr={r.asr_pct:.2f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _parse_pairs(text):
    pairs = []
    for item in text.split(","):
        a, b = item.split(":")
        pairs.append((int(a), int(b)))
    return pairs


def cmd_ablate(args):
    cfg = _load_config(args)
    _echo_config(cfg)
    _prepare_out(args.out, args.overwrite)
    classifier, spec = load_classifier(args.classifier)
    train = _load_split(cfg, "train", "train_limit")
    base = cfg.train_config()
    if args.kind == "dr":
        rows = evaluate.ablate_reducer(train, classifier, spec, base, log=print)
        columns = ["skip", "down", "up", "status", "g_adv", "g_mse", "r_adv", "r_mse"]
    elif args.kind == "depth":
        pairs = _parse_pairs(args.pairs) if args.pairs else \
            [(2, 10), (4, 8), (6, 6), (8, 4), (10, 2), (2, 2), (4, 4)]
        rows = evaluate.ablate_depth(train, classifier, spec, base, pairs, log=print)
        columns = ["depth_g", "depth_r", "depth_diff", "total_depth", "r_mse", "r_adv"]
    elif args.kind == "loss":
        test = _load_split(cfg, "test", "eval_limit")
        rows = evaluate.ablate_recover_loss(train, classifier, spec, base, test,
                                            log=print)
        columns = ["alpha", "beta", "adv_psnr", "adv_acc", "rec_psnr", "rec_acc"]
    elif args.kind == "lambda2":
        values = [float(v) for v in args.values.split(",")] if args.values else \
            [0.0, 1.0, 2.0, 4.0, 8.0, 14.0]
        rows = evaluate.ablate_perturbation_weight(train, classifier, spec, base,
                                                   values, log=print)
        columns = ["lambda2", "g_mse", "g_adv"]
    else:
        raise ConfigError(f"unknown ablation kind {args.kind!r}")
    evaluate.write_table_csv(rows, columns, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_transfer_heatmap(args):
    cfg = _load_config(args)
    _echo_config(cfg)
    _prepare_out(args.out_csv, args.overwrite)
    if args.out_png:
        _prepare_out(args.out_png, args.overwrite)
    names = sorted(n for n in os.listdir(args.zoo_dir) if n.endswith(".ckpt"))
    if not names:
        raise FileNotFoundError(f"no *.ckpt files under {args.zoo_dir}")
    zoo, labels = [], []
    for name in names:
        model, spec = load_classifier(os.path.join(args.zoo_dir, name))
        zoo.append(model)
        labels.append(f"{spec.arch}-d{spec.depth}")
    ds = _load_split(cfg, args.split, "eval_limit")
    acfg = cfg.attack_config()
    attack_fn = lambda x, y, model: attacks.pgd(x, y, model, acfg)
    matrix = attacks.transfer_matrix(zoo, attack_fn, ds,
                                     cfg.get("eval", "batch_size"))
    evaluate.write_matrix_csv(matrix, labels, args.out_csv)
    if args.out_png:
        evaluate.plot_heatmap(matrix, labels, args.out_png)
    within, cross = attacks.family_transfer_means(matrix, [l.split("-")[0] for l in labels])
    print(f"within-family mean ASR {within:.2f}%, cross-family {cross:.2f}%")
    print(f"wrote {args.out_csv}" + (f" and {args.out_png}" if args.out_png else ""))
    return EXIT_OK


def cmd_lemma_check(args):
    cfg = _load_config(args)
    _echo_config(cfg)
    _prepare_out(args.out, args.overwrite)
    kernels = [int(k) for k in args.kernels.split(",")]
    report = lemma_check(args.trials, kernels, seed=cfg.get("train", "seed"))
    lines = [f"trials_per_kernel: {report['trials']}", f"tolerance: {report['tol']}"]
    for k, info in report["kernels"].items():
        lines.append(f"kernel {k}: violations {info['violations']} "
                     f"max_excess {info['max_excess']:.3e}")
    lines.append(f"violations: {report['violations']}")
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# --------------------------------------------------------------------------
# argument wiring
# --------------------------------------------------------------------------

def _add_common(p, out_help="output path"):
    p.add_argument("--config", help="run configuration file (INI)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--overwrite", action="store_true",
                   help="allow replacing an existing output")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="recadv",
        description="recoverable adversarial example toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-classifier", help="pretrain a frozen target classifier")
    _add_common(p, "classifier checkpoint path")
    p.set_defaults(fn=cmd_train_classifier)

    p = sub.add_parser("train-joint", help="jointly train generator/reducer/"
                                           "discriminator/recovery")
    _add_common(p, "joint checkpoint path")
    p.add_argument("--classifier", required=True, help="frozen classifier checkpoint")
    p.set_defaults(fn=cmd_train_joint)

    p = sub.add_parser("attack", help="write adversarial images plus a manifest")
    _add_common(p, "output directory")
    p.add_argument("--ckpt", required=True, help="joint checkpoint")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--limit", type=int, default=0, help="cap the number of images")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("recover", help="recover images from an attack directory")
    _add_common(p, "output directory")
    p.add_argument("--ckpt", required=True, help="joint checkpoint")
    p.add_argument("--adv-dir", required=True, help="directory written by attack")
    p.set_defaults(fn=cmd_recover)

    p = sub.add_parser("evaluate", help="recoverability metrics CSV")
    _add_common(p, "CSV output path")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("robustness", help="ASR under image disturbances")
    _add_common(p, "CSV output path")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.set_defaults(fn=cmd_robustness)

    p = sub.add_parser("ablate", help="reduced-budget ablation sweeps")
    _add_common(p, "CSV output path")
    p.add_argument("--kind", required=True, choices=("dr", "depth", "loss", "lambda2"))
    p.add_argument("--classifier", required=True, help="frozen classifier checkpoint")
    p.add_argument("--pairs", help="depth pairs, e.g. 2:10,6:6")
    p.add_argument("--values", help="lambda2 values, e.g. 0,1,2")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("transfer-heatmap", help="cross-model attack transfer matrix")
    p.add_argument("--config", help="run configuration file (INI)")
    p.add_argument("--seed", type=int)
    p.add_argument("--zoo-dir", required=True, help="directory of classifier *.ckpt")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-png", help="optional heatmap image")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(fn=cmd_transfer_heatmap)

    p = sub.add_parser("lemma-check", help="Monte-Carlo check of the reduction "
                                           "inequality")
    _add_common(p, "report output path")
    p.add_argument("--trials", type=int, default=100000)
    p.add_argument("--kernels", default="2,4")
    p.set_defaults(fn=cmd_lemma_check)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"error: missing file: {e}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except ConfigError as e:
        print(f"error: invalid config: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except CheckpointVersionError as e:
        print(f"error: checkpoint version: {e}", file=sys.stderr)
        return EXIT_CKPT_VERSION
    except CheckpointCorruptError as e:
        print(f"error: corrupt checkpoint: {e}", file=sys.stderr)
        return EXIT_CKPT_CORRUPT
    except OutputExistsError as e:
        print(f"error: output exists: {e}", file=sys.stderr)
        return EXIT_EXISTS
    except Exception as e:  # keep failures one-line machine parseable
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
