"""Batch entry points: synth, pool, pot, split, train, eval, trace.

Every subcommand echoes its resolved configuration before running, writes
its declared outputs, and exits nonzero with a diagnostic when any module
rejects the input. Parsed arguments are the command spec; unknown flags
and subcommands are usage errors (exit code 2).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from machan import baselines, data, evaluation, model, synth, training

CHANNEL_LETTERS = {"f": "face", "p": "pose", "c": "hat"}


class CliError(ValueError):
    """Bad command-line inputs not caught by argparse."""


def echo_config(name: str, obj) -> None:
    payload = asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj
    print(f"config {name}: {json.dumps(payload, default=str)}")


def parse_channels(spec: str) -> tuple[str, ...]:
    letters = [part for part in spec.replace(",", "") if part.strip()]
    bad = [l for l in letters if l not in CHANNEL_LETTERS]
    if bad or not letters:
        raise CliError(f"--channels takes letters from f,p,c; got {spec!r}")
    return tuple(CHANNEL_LETTERS[l] for l in dict.fromkeys(letters))


def load_json_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise CliError(f"{path}: config must be a JSON object")
    return obj


def mask_channels(sequences, keep: tuple[str, ...]):
    """Zero out presence (and vectors) of channels not in ``keep``."""
    if set(keep) == set(data.CHANNELS):
        return sequences
    out = []
    for seq in sequences:
        present = seq.present.copy()
        channels = {ch: arr.copy() for ch, arr in seq.channels.items()}
        for i, ch in enumerate(data.CHANNELS):
            if ch not in keep:
                present[:, i] = False
                channels[ch][:] = 0.0
        out.append(data.VolumeSequence(id=seq.id, channels=channels,
                                       present=present, label=seq.label))
    return out


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    overrides = load_json_config(args.config)
    if args.seed is not None:
        overrides["seed"] = args.seed
    for key in ("t_range", "dims", "segment_range"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    config = synth.SynthConfig(**overrides)
    echo_config("synth", config)
    paths = synth.generate(config, args.out)
    for name, path in paths.items():
        print(f"wrote {name}: {path}")
    return 0


def _load_records(args):
    records = data.load_records(args.features)
    if args.labels:
        data.apply_label_overrides(records, data.load_labels(args.labels))
    return records


def cmd_pool(args) -> int:
    echo_config("pool", {
        "features": args.features, "labels": args.labels, "out": args.out,
        "fps": args.fps, "window": args.window, "stride": args.stride,
    })
    records = _load_records(args)
    sequences = [
        data.pool_volumes(data.downsample(record, args.fps),
                          window=args.window, stride=args.stride)
        for record in records
    ]
    meta = {r.id: {"likes": r.likes, "views": r.views, "fps": args.fps}
            for r in records}
    data.write_pooled(args.out, sequences, meta=meta)
    print(f"wrote {len(sequences)} pooled sequences: {args.out}")
    return 0


def cmd_pot(args) -> int:
    channels = parse_channels(args.channels)
    echo_config("pot", {
        "features": args.features, "labels": args.labels, "out": args.out,
        "levels": args.levels, "channels": channels, "grad_mode": args.grad_mode,
    })
    records = _load_records(args)
    with open(args.out, "w", encoding="utf-8") as fh:
        for record in records:
            pot = data.pot_features(record, levels=args.levels,
                                    channels=channels, grad_mode=args.grad_mode)
            fh.write(json.dumps(
                {"id": pot.id, "x": pot.values.tolist(), "y": pot.label}
            ) + "\n")
    print(f"wrote {len(records)} PoT vectors: {args.out}")
    return 0


def _read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                raise data.DataError(f"{path}:{lineno}: invalid JSON") from None
    return rows


def cmd_split(args) -> int:
    spec = data.SplitSpec(seed=args.seed if args.seed is not None else 0,
                          ratios=tuple(float(r) for r in args.ratios.split(",")))
    echo_config("split", {"data": args.data, "out_dir": args.out_dir,
                          "seed": spec.seed, "ratios": spec.ratios})
    rows = _read_jsonl(args.data)
    if any("y" not in row for row in rows):
        raise data.DataError(f"{args.data}: every line needs a 'y' label field")
    train_rows, val_rows, test_rows = data.split_dataset(rows, spec)
    normalizer = data.LabelNormalizer.fit([row["y"] for row in train_rows])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, rows_ in (("train", train_rows), ("val", val_rows), ("test", test_rows)):
        path = out_dir / f"{name}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for row in rows_:
                row = dict(row)
                row["y"] = normalizer.apply(row["y"])
                fh.write(json.dumps(row) + "\n")
        print(f"wrote {len(rows_)} rows: {path}")
    norm_path = out_dir / "normalizer.json"
    norm_path.write_text(json.dumps(normalizer.to_json()))
    print(f"wrote normalizer: {norm_path}")
    return 0


def _model_config_for(sequences, args) -> model.ModelConfig:
    overrides = load_json_config(args.model_config)
    dims = sequences[0].dims
    overrides.setdefault("d_f", dims["face"])
    overrides.setdefault("d_p", dims["pose"])
    overrides.setdefault("d_c", dims["hat"])
    if args.fusion is not None:
        overrides["fusion"] = args.fusion
    return model.ModelConfig(**overrides)


def _train_config(args) -> training.TrainConfig:
    overrides = load_json_config(args.config)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return training.TrainConfig(**overrides)


def cmd_train(args) -> int:
    if args.algo == "svr":
        return _train_svr(args)
    train_seqs = mask_channels(data.read_pooled(args.train), parse_channels(args.channels))
    val_seqs = mask_channels(data.read_pooled(args.val), parse_channels(args.channels))
    model_config = _model_config_for(train_seqs, args)
    train_config = _train_config(args)
    echo_config("model", model_config)
    echo_config("train", train_config)
    params, report = training.train(train_seqs, val_seqs, model_config, train_config)
    model.save_checkpoint(args.out, model_config, params, extra={
        "best_epoch": report.best_epoch,
        "updates": report.updates,
        "channels": list(parse_channels(args.channels)),
    })
    best = report.epochs[report.best_epoch]
    print(f"best epoch {report.best_epoch}: val mse {best.val_loss:.6f}")
    print(f"wrote checkpoint: {args.out}")
    return 0


def _train_svr(args) -> int:
    rows = _read_jsonl(args.train)
    x = np.asarray([row["x"] for row in rows], dtype=np.float64)
    y = np.asarray([row["y"] for row in rows], dtype=np.float64)
    overrides = load_json_config(args.config)
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = baselines.SvrConfig(**overrides)
    echo_config("svr", config)
    params, history = baselines.standardized_svr_train(x, y, config)
    baselines.save_svr(args.out, params)
    print(f"final objective {history[-1]:.6f}")
    print(f"wrote svr model: {args.out}")
    return 0


def _detect_format(path) -> str:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh).get("format", "")


def cmd_eval(args) -> int:
    if args.runs is not None:
        return _eval_runs(args)
    if args.ckpt is None:
        raise CliError("eval needs --ckpt, or --runs for the multi-run protocol")
    fmt = _detect_format(args.ckpt)
    if fmt == baselines.SVR_FORMAT:
        svr = baselines.load_svr(args.ckpt)
        rows = _read_jsonl(args.data)
        y = np.asarray([row["y"] for row in rows], dtype=np.float64)
        yhat = baselines.svr_predict(svr, np.asarray([row["x"] for row in rows]))
        try:
            rho = evaluation.pearson(y, yhat)
            rho_error = None
        except evaluation.EvaluationError as exc:
            rho, rho_error = None, str(exc)
        report = evaluation.EvalReport(
            split=args.split, n=len(rows), rho=rho,
            mse=evaluation.mse_metric(y, yhat), model_id="svr",
            seed=args.seed or 0, rho_error=rho_error,
        )
    else:
        config, params, _ = model.load_checkpoint(args.ckpt)
        sequences = mask_channels(data.read_pooled(args.data),
                                  parse_channels(args.channels))
        echo_config("model", config)
        report = evaluation.evaluate(params, config, sequences, split=args.split,
                                     model_id=config.fusion, seed=args.seed or 0)
    reports = [report]
    if args.out:
        evaluation.write_reports(args.out, reports)
        print(f"wrote report: {args.out}")
    print(evaluation.summary_table(reports))
    return 0


def _eval_runs(args) -> int:
    """Multi-run protocol: re-split, train, and test once per run seed."""
    base_seed = args.seed if args.seed is not None else 0
    channels = parse_channels(args.channels)
    sequences = mask_channels(data.read_pooled(args.data), channels)
    reports = []
    for run in range(args.runs):
        seed = base_seed + run
        train_seqs, val_seqs, test_seqs = data.split_dataset(
            sequences, data.SplitSpec(seed=seed)
        )
        train_seqs, val_seqs, test_seqs, _ = data.normalize_splits(
            train_seqs, val_seqs, test_seqs
        )
        model_config = _model_config_for(train_seqs, args)
        train_config = replace(_train_config(args), seed=seed)
        if run == 0:
            echo_config("model", model_config)
            echo_config("train", train_config)
        params, _ = training.train(train_seqs, val_seqs, model_config, train_config)
        reports.append(evaluation.evaluate(
            params, model_config, test_seqs, split="test",
            model_id=model_config.fusion, seed=seed,
        ))
    if args.out:
        evaluation.write_reports(args.out, reports)
        print(f"wrote reports: {args.out}")
    print(evaluation.summary_table(reports))
    return 0


def cmd_trace(args) -> int:
    config, params, _ = model.load_checkpoint(args.ckpt)
    if config.fusion not in model.ATTENTION_MODES:
        raise CliError(f"trace needs an attention checkpoint, got fusion={config.fusion!r}")
    echo_config("model", config)
    sequences = data.read_pooled(args.data)
    matches = [s for s in sequences if s.id == args.id]
    if not matches:
        raise CliError(f"id {args.id!r} not found in {args.data}")
    prediction = model.forward(matches[0], params, config)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "a_face", "a_pose", "a_hat", "selected", "dropped"])
        for step in prediction.trace.steps:
            a = step.attention
            writer.writerow([step.t, repr(a[0]), repr(a[1]), repr(a[2]),
                             step.selected, int(step.dropped)])
    print(f"yhat {prediction.yhat!r}")
    print(f"wrote trace: {args.out}")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="machan",
        description="Multichannel attention LSTM popularity-regression pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic channel-switching dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="SynthConfig JSON")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pool", help="downsample and max-pool frames into volumes")
    p.add_argument("--features", required=True)
    p.add_argument("--labels")
    p.add_argument("--out", required=True)
    p.add_argument("--fps", type=float, default=data.DEFAULT_FPS)
    p.add_argument("--window", type=int, default=data.DEFAULT_WINDOW)
    p.add_argument("--stride", type=int, default=data.DEFAULT_STRIDE)
    p.set_defaults(fn=cmd_pool)

    p = sub.add_parser("pot", help="pooled-time-series descriptors for SVR")
    p.add_argument("--features", required=True)
    p.add_argument("--labels")
    p.add_argument("--out", required=True)
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--channels", default="fpc")
    p.add_argument("--grad-mode", choices=("sum", "count"), default="sum")
    p.set_defaults(fn=cmd_pot)

    p = sub.add_parser("split", help="seeded train/val/test split with label normalization")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--ratios", default="0.6,0.2,0.2")
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("train", help="train a model and write its checkpoint")
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="TrainConfig (or SvrConfig) JSON")
    p.add_argument("--model-config", help="ModelConfig JSON (dims auto-filled)")
    p.add_argument("--algo", choices=("lstm", "svr"), default="lstm")
    p.add_argument("--fusion", choices=model.FUSION_MODES)
    p.add_argument("--channels", default="fpc")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, or run the multi-run protocol")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--out")
    p.add_argument("--split", default="test")
    p.add_argument("--runs", type=int, help="multi-run protocol: split/train/test per run")
    p.add_argument("--config", help="TrainConfig JSON (multi-run)")
    p.add_argument("--model-config", help="ModelConfig JSON (multi-run)")
    p.add_argument("--fusion", choices=model.FUSION_MODES)
    p.add_argument("--channels", default="fpc")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("trace", help="export one video's attention timeline as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_trace)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "train" and args.algo == "lstm" and args.val is None:
        print("error: train --algo lstm requires --val", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except (ValueError, OSError, training.TrainingDiverged) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
