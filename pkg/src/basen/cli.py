"""Command-line entry point: data synthesis through gradient checking.

All subcommands are plumbing around the library modules; every artifact they
write (WAV, matrix containers, manifests, logs, reports) is byte-identical
under a fixed --seed in reference mode (BASEN_THREADS=1).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import diff_ops as ops
from .diff_ops import DiffError
from .eeg_preprocess import BandSpec, MUAConfig, mua
from .model import (BasenConfig, BasenModel, ModelError, load_checkpoint,
                    tiny_config)
from .signal_core import (MultiChannelSeries, SampleBuffer, SignalError,
                          read_matrix, read_wav, write_matrix, write_wav)
from .training import (SyntheticExample, SyntheticTaskConfig, TrainConfig,
                       TrainingError, _batch_arrays, _batch_loss, ablation_run,
                       build_dataset, evaluate, train)


class CliError(ValueError):
    pass


# --- flat key=value configuration ---------------------------------------------

_INT_KEYS = {"eeg_channels", "feature_channels", "encoder_kernel", "stack_depth",
             "n_stacks", "cmca_layers", "n_sources", "cmca_groups", "batch_size",
             "epochs", "seed"}
_FLOAT_KEYS = {"audio_rate", "eeg_rate", "max_lr", "warmup_ratio", "seconds",
               "cue_snr_db"}
_STR_KEYS = {"fusion", "loss_mode"}
_TUPLE_KEYS = {"encoder_strides"}
KNOWN_KEYS = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _TUPLE_KEYS


def _coerce(key: str, raw: str):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _TUPLE_KEYS:
            return tuple(int(part) for part in raw.split(","))
    except ValueError:
        raise CliError(f"config key {key} has a malformed value {raw!r}") from None
    return raw


def _parse_assignment(line: str):
    if "=" not in line:
        raise CliError(f"expected key=value, got {line!r}")
    key, raw = (part.strip() for part in line.split("=", 1))
    if key not in KNOWN_KEYS:
        raise CliError(f"unknown config key {key!r}")
    return key, _coerce(key, raw)


def load_run_config(config_path=None, overrides=()):
    """Merged key=value settings: config file first, then overrides."""
    merged = {}
    if config_path is not None:
        for lineno, line in enumerate(Path(config_path).read_text().splitlines(), 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            try:
                key, value = _parse_assignment(stripped)
            except CliError as exc:
                raise CliError(f"{config_path}:{lineno}: {exc}") from None
            if key in merged:
                raise CliError(f"{config_path}:{lineno}: duplicate config key {key!r}")
            merged[key] = value
    for item in overrides:
        key, value = _parse_assignment(item)
        merged[key] = value
    return merged


def _pick(cfg, cls):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in cfg.items() if k in names})


# --- dataset directory layout ---------------------------------------------------

MANIFEST_NAME = "manifest.tsv"
MANIFEST_HEADER = "id\tmixture\teeg\ttarget\tinterferer\tattended\n"
SPLITS = ("train", "val", "test")


def _write_split(out_dir: Path, split: str, examples, manifest_rows):
    for i, ex in enumerate(examples):
        stem = f"{split}-{i:04d}"
        names = {"mixture": f"{stem}.mixture.wav", "eeg": f"{stem}.eeg.mat",
                 "target": f"{stem}.target.wav",
                 "interferer": f"{stem}.interferer.wav"}
        write_wav(out_dir / names["mixture"], ex.mixture)
        write_matrix(out_dir / names["eeg"], ex.eeg)
        write_wav(out_dir / names["target"], ex.target)
        write_wav(out_dir / names["interferer"], ex.interferer)
        manifest_rows.append(
            f"{stem}\t{names['mixture']}\t{names['eeg']}\t{names['target']}\t"
            f"{names['interferer']}\t{ex.attended}\n")


def read_manifest(data_dir):
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise CliError(f"no {MANIFEST_NAME} in {data_dir}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER.rstrip("\n"):
        raise CliError(f"{path} has an unrecognized header")
    rows = []
    for line in lines[1:]:
        parts = line.split("\t")
        if len(parts) != 6:
            raise CliError(f"{path}: malformed row {line!r}")
        rows.append({"id": parts[0], "mixture": parts[1], "eeg": parts[2],
                     "target": parts[3], "interferer": parts[4],
                     "attended": int(parts[5])})
    return rows


def load_split(data_dir, split):
    base = Path(data_dir)
    examples, ids = [], []
    for row in read_manifest(data_dir):
        if not row["id"].startswith(f"{split}-"):
            continue
        examples.append(SyntheticExample(
            mixture=read_wav(base / row["mixture"]),
            eeg=read_matrix(base / row["eeg"]),
            target=read_wav(base / row["target"]),
            interferer=read_wav(base / row["interferer"]),
            attended=row["attended"]))
        ids.append(row["id"])
    if not examples:
        raise CliError(f"no {split!r} examples in {data_dir}")
    return examples, ids


def _open_out(dest):
    return sys.stdout if dest == "-" else open(dest, "w")


def _close_out(handle):
    if handle is not sys.stdout:
        handle.close()


# --- subcommands ----------------------------------------------------------------

def cmd_synth_data(args) -> int:
    task = SyntheticTaskConfig(cue_snr_db=args.cue_snr)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    counts = {"train": args.n_train, "val": args.n_val, "test": args.n_test}
    for index, split in enumerate(SPLITS):
        if counts[split] > 0:
            examples = build_dataset(task, counts[split], seed=[args.seed, index])
            _write_split(out_dir, split, examples, rows)
    (out_dir / MANIFEST_NAME).write_text(MANIFEST_HEADER + "".join(rows))
    print(f"wrote {len(rows)} examples to {out_dir}")
    return 0


def cmd_preprocess_eeg(args) -> int:
    cfg = MUAConfig(a_gamma=args.a_gamma, a_delta=args.a_delta,
                    gamma_band=BandSpec(args.gamma_lo, args.gamma_hi),
                    delta_band=BandSpec(args.delta_lo, args.delta_hi))
    write_matrix(args.out, mua(read_matrix(getattr(args, "in")), cfg))
    return 0


def _resolve_configs(args):
    cfg = load_run_config(args.config, args.set or ())
    return (_pick(cfg, BasenConfig), _pick(cfg, TrainConfig))


def cmd_train(args) -> int:
    model_cfg, train_cfg = _resolve_configs(args)
    train_examples, _ = load_split(args.data, "train")
    val_examples, _ = load_split(args.data, "val")
    model = BasenModel(model_cfg, seed=train_cfg.seed)
    log = _open_out(args.log)
    try:
        out = train(model, train_examples, val_examples, train_cfg,
                    log=log, checkpoint_path=args.checkpoint)
    finally:
        _close_out(log)
    print(f"best val si_sdr {out['best_val_si_sdr']:.10g} dB "
          f"at epoch {out['best_epoch']}; checkpoint {args.checkpoint}")
    return 0


def cmd_enhance(args) -> int:
    model = load_checkpoint(args.checkpoint)
    mixture = read_wav(args.mixture)
    eeg = read_matrix(args.eeg)
    write_wav(args.out, model.separate(mixture, eeg)[0])
    return 0


class _Passthrough:
    def separate(self, mixture, eeg):
        return [mixture, mixture]


def cmd_evaluate(args) -> int:
    if (args.checkpoint is None) == (not args.passthrough):
        raise CliError("pass exactly one of --checkpoint or --passthrough")
    model = _Passthrough() if args.passthrough else load_checkpoint(args.checkpoint)
    examples, ids = load_split(args.data, args.split)
    report = evaluate(model, examples)
    out = _open_out(args.out)
    try:
        out.write("id\tsi_sdr_in\tsi_sdr_out\timprovement\n")
        for row_id, row in zip(ids, report["rows"]):
            out.write(f"{row_id}\t{row['si_sdr_in']:.10g}\t{row['si_sdr_out']:.10g}"
                      f"\t{row['improvement']:.10g}\n")
        out.write("metric\tvalue\n")
        for group in ("si_sdr_out", "improvement"):
            for stat in ("median", "q1", "q3", "iqr"):
                out.write(f"{group}_{stat}\t{report['summary'][group][stat]:.10g}\n")
    finally:
        _close_out(out)
    return 0


def cmd_ablate(args) -> int:
    model_cfg, train_cfg = _resolve_configs(args)
    train_examples, _ = load_split(args.data, "train")
    val_examples, _ = load_split(args.data, "val")
    test_examples, _ = load_split(args.data, "test")
    logs = None
    if args.log_dir is not None:
        log_dir = Path(args.log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        logs = {v: open(log_dir / f"{v}.log", "w")
                for v in ("audio-only", "concat", "cmca")}
    try:
        result = ablation_run(model_cfg, train_examples, val_examples,
                              test_examples, train_cfg, seed=train_cfg.seed,
                              logs=logs)
    finally:
        if logs:
            for handle in logs.values():
                handle.close()
    out = _open_out(args.out)
    try:
        out.write("variant\tparameter_count\tmedian_si_sdr_out\t"
                  "median_improvement\timprovement_iqr\tbest_val_si_sdr\n")
        for variant in ("audio-only", "concat", "cmca"):
            r = result["variants"][variant]
            s = r["evaluation"]["summary"]
            out.write(f"{variant}\t{r['parameter_count']}\t"
                      f"{s['si_sdr_out']['median']:.10g}\t"
                      f"{s['improvement']['median']:.10g}\t"
                      f"{s['improvement']['iqr']:.10g}\t"
                      f"{r['best_val_si_sdr']:.10g}\n")
        out.write("cmca_layers\tparameter_count\n")
        for row in result["parameter_table"]:
            out.write(f"{row['cmca_layers']}\t{row['parameter_count']}\n")
    finally:
        _close_out(out)
    return 0


def cmd_gradcheck(args) -> int:
    task = SyntheticTaskConfig(audio_rate=2000.0, eeg_channels=4, seconds=0.25)
    examples = build_dataset(task, 2, seed=args.seed)
    model = BasenModel(tiny_config(), seed=args.seed, dtype=np.float64)
    batch = _batch_arrays(examples, model, np.float64)
    errors = ops.finite_difference_check(
        model.parameters, lambda: _batch_loss(model, batch, "target-only"))
    worst = max(errors.values())
    for name in sorted(errors):
        print(f"{name}\t{errors[name]:.3e}")
    print(f"max\t{worst:.3e}")
    if worst >= args.tol:
        print(f"error: gradient mismatch {worst:.3e} exceeds tolerance "
              f"{args.tol:.1e}", file=sys.stderr)
        return 1
    return 0


# --- parser -------------------------------------------------------------------

def _add_config_flags(sub):
    sub.add_argument("--config", default=None, help="key=value config file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="basen",
        description="EEG-conditioned time-domain speech extraction toolkit")
    subs = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    s = subs.add_parser("synth-data", formatter_class=fmt,
                        help="write a synthetic cued-attention dataset")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--n-train", type=int, default=200)
    s.add_argument("--n-val", type=int, default=40)
    s.add_argument("--n-test", type=int, default=40)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cue-snr", type=float, default=10.0,
                   help="per-channel EEG cue SNR in dB")
    s.set_defaults(func=cmd_synth_data)

    s = subs.add_parser("preprocess-eeg", formatter_class=fmt,
                        help="apply the neural-activity surrogate to a matrix file")
    s.add_argument("--in", required=True, help="input matrix container")
    s.add_argument("--out", required=True, help="output matrix container")
    s.add_argument("--gamma-lo", type=float, default=30.0)
    s.add_argument("--gamma-hi", type=float, default=45.0)
    s.add_argument("--delta-lo", type=float, default=0.5)
    s.add_argument("--delta-hi", type=float, default=4.0)
    s.add_argument("--a-gamma", type=float, default=0.5)
    s.add_argument("--a-delta", type=float, default=0.5)
    s.set_defaults(func=cmd_preprocess_eeg)

    s = subs.add_parser("train", formatter_class=fmt,
                        help="train on a dataset directory")
    s.add_argument("--data", required=True, help="dataset directory")
    _add_config_flags(s)
    s.add_argument("--checkpoint", required=True, help="best-validation checkpoint path")
    s.add_argument("--log", default="-", help="epoch log path, - for stdout")
    s.set_defaults(func=cmd_train)

    s = subs.add_parser("enhance", formatter_class=fmt,
                        help="extract the attended source from one mixture")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mixture", required=True, help="mixture WAV")
    s.add_argument("--eeg", required=True, help="EEG matrix container")
    s.add_argument("--out", required=True, help="output WAV")
    s.set_defaults(func=cmd_enhance)

    s = subs.add_parser("evaluate", formatter_class=fmt,
                        help="per-example SI-SDR report on one split")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=SPLITS)
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--passthrough", action="store_true",
                   help="score the unmodified mixture instead of a model")
    s.add_argument("--out", default="-", help="report path, - for stdout")
    s.set_defaults(func=cmd_evaluate)

    s = subs.add_parser("ablate", formatter_class=fmt,
                        help="train and score audio-only/concat/cmca variants")
    s.add_argument("--data", required=True)
    _add_config_flags(s)
    s.add_argument("--out", default="-", help="report path, - for stdout")
    s.add_argument("--log-dir", default=None, help="write per-variant epoch logs here")
    s.set_defaults(func=cmd_ablate)

    s = subs.add_parser("gradcheck", formatter_class=fmt,
                        help="finite-difference check of every parameter gradient")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-5)
    s.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, SignalError, DiffError, ModelError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
