"""Command-line surface: gen / train / eval / predict / gradcheck.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure, 4 gradcheck failure. Output files are written to a .partial
path and renamed only on completion.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import dataio, metrics
from .dataio import (FormatError, extract_sequences, gen_synthetic_case,
                     load_checkpoint, normalize_volume, read_volume,
                     save_checkpoint, write_volume)
from .gradsuite import run_suite
from .network import ModelConfig, init_params, predict_volume
from .tensor import NumericalError
from .training import SequenceDataset, TrainConfig, run_two_phase

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_GRADCHECK = 4

# Every configuration key with its default; unknown keys are errors.
CONFIG_DEFAULTS = {
    "modality_count": 4,
    "class_count": 5,
    "encoder_channels": "8,16,32,64",
    "input_height": 64,
    "input_width": 64,
    "sequence_length": 3,
    "convlstm_kernel": 3,
    "seed": 0,
    "batch_size": 3,
    "lr_phase1": 1e-4,
    "lr_phase2": 1e-6,
    "phase1_steps": 300,
    "phase2_steps": 100,
    "clip_norm": 5.0,
}


class ConfigError(ValueError):
    pass


def parse_config_file(path):
    """`key = value` lines, # comments; returns dict of raw strings."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value
    return out


def resolve_config(file_values=None, overrides=None):
    """Defaults, then config file, then flag overrides (flags win)."""
    raw = {k: str(v) for k, v in CONFIG_DEFAULTS.items()}
    raw.update(file_values or {})
    raw.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    cast = {}
    for key, value in raw.items():
        default = CONFIG_DEFAULTS[key]
        try:
            if isinstance(default, int):
                cast[key] = int(value)
            elif isinstance(default, float):
                cast[key] = float(value)
            else:
                cast[key] = value
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {value!r}") from e
    return cast


def config_text(cfg):
    return "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))


def split_config(cfg):
    model = ModelConfig(
        modality_count=cfg["modality_count"],
        class_count=cfg["class_count"],
        encoder_channels=tuple(int(c) for c in cfg["encoder_channels"].split(",")),
        input_height=cfg["input_height"],
        input_width=cfg["input_width"],
        sequence_length=cfg["sequence_length"],
        convlstm_kernel=cfg["convlstm_kernel"],
        seed=cfg["seed"],
    )
    train = TrainConfig(
        batch_size=cfg["batch_size"],
        sequence_length=cfg["sequence_length"],
        lr_phase1=cfg["lr_phase1"],
        lr_phase2=cfg["lr_phase2"],
        phase1_steps=cfg["phase1_steps"],
        phase2_steps=cfg["phase2_steps"],
        clip_norm=cfg["clip_norm"],
        seed=cfg["seed"],
    )
    return model, train


def atomic_write(path, writer):
    """writer(partial_path); rename only on success."""
    partial = str(path) + ".partial"
    writer(partial)
    os.replace(partial, path)


def load_cases(data_dir, normalize=True):
    """Reads case_<i>_img.mmv / case_<i>_lbl.mmv pairs, sorted by index."""
    cases = []
    names = sorted(n for n in os.listdir(data_dir) if n.endswith("_img.mmv"))
    if not names:
        raise FormatError(f"no case_*_img.mmv files in {data_dir}")
    for name in names:
        img, kind = read_volume(os.path.join(data_dir, name))
        if kind != "modal":
            raise FormatError(f"{name} is not a modal volume")
        lbl_name = name.replace("_img.mmv", "_lbl.mmv")
        lbl, kind = read_volume(os.path.join(data_dir, lbl_name))
        if kind != "label":
            raise FormatError(f"{lbl_name} is not a label volume")
        if normalize:
            img = normalize_volume(img)
        cases.append((img, lbl))
    return cases


def cmd_gen(args):
    os.makedirs(args.out, exist_ok=True)
    dims = tuple(int(x) for x in args.dims.split(","))
    if len(dims) != 3:
        print("error: --dims must be D,H,W", file=sys.stderr)
        return EXIT_USAGE
    for i in range(args.count):
        volume, labels = gen_synthetic_case(args.seed + i, dims)
        atomic_write(os.path.join(args.out, f"case_{i}_img.mmv"),
                     lambda p, v=volume: write_volume(p, v, "modal"))
        atomic_write(os.path.join(args.out, f"case_{i}_lbl.mmv"),
                     lambda p, l=labels: write_volume(p, l, "label"))
    print(f"wrote {args.count} case pairs to {args.out}")
    return EXIT_OK


def cmd_train(args):
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {
        "seed": args.seed,
        "phase1_steps": args.phase1_steps,
        "phase2_steps": args.phase2_steps,
        "batch_size": args.batch_size,
    }
    cfg = resolve_config(file_values, overrides)
    model_cfg, train_cfg = split_config(cfg)
    cases = load_cases(args.data)
    dataset = SequenceDataset(cases, train_cfg.sequence_length)
    params = init_params(model_cfg)

    os.makedirs(args.out, exist_ok=True)
    records = []
    run_two_phase(train_cfg, params, dataset, log_lines=records)
    atomic_write(os.path.join(args.out, "model.mmck"),
                 lambda p: save_checkpoint(p, params))
    atomic_write(os.path.join(args.out, "train.log"),
                 lambda p: open(p, "w").write(
                     "".join(r + "\n" for r in records)))
    atomic_write(os.path.join(args.out, "config.resolved"),
                 lambda p: open(p, "w").write(config_text(cfg)))
    print(f"trained {len(records)} steps; checkpoint at "
          f"{os.path.join(args.out, 'model.mmck')}")
    return EXIT_OK


def cmd_eval(args):
    truths = []
    preds = []
    cases = load_cases(args.data, normalize=False)
    if args.use_truth:
        k = 5
        for _, lbl in cases:
            truths.append(lbl)
            preds.append(lbl)
    else:
        params, config = load_checkpoint(args.model)
        k = config.class_count
        for img, lbl in cases:
            vol = normalize_volume(img)
            preds.append(predict_volume(params, vol, config.sequence_length))
            truths.append(lbl)
    report = metrics.evaluate(preds, truths, k)
    atomic_write(args.report, lambda p: open(p, "w").write(report.to_text()))
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_predict(args):
    params, config = load_checkpoint(args.model)
    volume, kind = read_volume(args.volume)
    if kind != "modal":
        raise FormatError(f"{args.volume} is not a modal volume")
    _, _, h, w = volume.shape
    if h % 16 or w % 16:
        print(f"error: spatial extents {h}x{w} not divisible by 16; "
              "pad or crop the volume first", file=sys.stderr)
        return EXIT_DATA
    labels = predict_volume(params, normalize_volume(volume),
                            config.sequence_length)
    atomic_write(args.out, lambda p: write_volume(p, labels, "label"))
    print(f"wrote label volume to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    t0 = time.time()
    results = run_suite(seeds=tuple(range(args.seed, args.seed + 3)),
                        tol=args.tol)
    failed = 0
    for name, seed, report in results:
        status = "pass" if report.passed else "FAIL"
        print(f"{name:<20} seed={seed} max_rel_err={report.worst():.3e} {status}")
        failed += 0 if report.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed "
          f"in {time.time() - t0:.1f}s")
    return EXIT_OK if failed == 0 else EXIT_GRADCHECK


def build_parser():
    p = argparse.ArgumentParser(
        prog="mmseqseg",
        description="Multi-modal slice-sequence segmentation engine")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic case pairs")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dims", default="32,64,64")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="two-phase training run")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--phase1-steps", type=int, dest="phase1_steps")
    t.add_argument("--phase2-steps", type=int, dest="phase2_steps")
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--model")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--use-truth", action="store_true",
                   help="score ground truth against itself (oracle mode)")
    e.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("predict", help="predict a label volume")
    pr.add_argument("--model", required=True)
    pr.add_argument("--volume", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=cmd_predict)

    gc = sub.add_parser("gradcheck", help="run the gradient-check battery")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=None)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    if args.command == "eval" and not args.use_truth and not args.model:
        print("error: eval requires --model (or --use-truth)", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
