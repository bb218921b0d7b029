"""``tpconv`` command line: generate, train, eval, ablate, export-plot.

Exit codes: 0 success, 2 usage or validation failure, 3 numeric failure.
Errors are reported on stderr as single lines starting with ``error:``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import data as D
from .errors import ConfigError, NumericsError, ParseError, ShapeError, UsageError, ValidationError
from .models import ModelConfig, TpcnnModel, interpolation_forward, load_checkpoint, save_checkpoint
from .numerics import Rng
from .timefuncs import TimeFunctionId
from .train import TrainConfig, evaluate, train_loop

log = logging.getLogger("tpconv")

EXIT_USAGE = 2
EXIT_NUMERIC = 3
_SPLIT_STREAM = 0x5B117
TASK_ALIASES = {"interp": "interp", "cls": "cls", "step-cls": "step-cls"}
DATA_KINDS = ("interp", "cls", "step-cls")
DEFAULT_ABLATION = ["lin", "sin", "cos", "exp", "sin+cos", "sin+cos+lin+exp"]


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    data_hash: str | None
    started: str
    finished: str = ""
    outputs: dict = field(default_factory=dict)

    def write(self, path: Path) -> None:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)


def git_blob_hash(path) -> str:
    """SHA-1 of a file framed the way git hashes blobs."""
    content = Path(path).read_bytes()
    h = hashlib.sha1(f"blob {len(content)}\0".encode())
    h.update(content)
    return h.hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        cfg = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise CliError(f"config {path}: invalid YAML ({exc.__class__.__name__})") from None
    if not isinstance(cfg, dict):
        raise CliError("config: top level must be a mapping")
    unknown = set(cfg) - {"data", "model", "train", "ablate"}
    if unknown:
        raise CliError(f"config: unknown section(s) {sorted(unknown)}")
    return cfg


def _section(cfg, name) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise CliError(f"config.{name}: must be a mapping")
    return dict(sec)


def _build(kind, name, values):
    try:
        return kind(**values)
    except ConfigError as exc:
        raise CliError(f"{name}.{exc}") from None
    except TypeError as exc:
        raise CliError(f"{name}: {exc}") from None


# generate


def cmd_generate(cfg_path, out_path, seed=None, kind=None) -> Path:
    cfg = load_config(cfg_path)
    sec = _section(cfg, "data")
    kind = kind or sec.pop("kind", "interp")
    sec.pop("kind", None)
    if kind not in DATA_KINDS:
        raise CliError(f"data.kind: must be one of {DATA_KINDS}")
    if seed is not None:
        sec["seed"] = seed
    out_path = Path(out_path)
    if kind == "interp":
        syn = _build(D.SyntheticConfig, "data", sec)
        records = D.generate_synthetic(syn, Rng(syn.seed))
        generator = {"kind": kind, **D.synthetic_config_dict(syn)}
        t_range = syn.t_range
    else:
        n = int(sec.pop("n_samples", 1000))
        s = int(sec.pop("seed", 0))
        allowed = {"grid_len", "n_observed", "noise", "freqs", "freq"}
        unknown = set(sec) - allowed
        if unknown:
            raise CliError(f"data: unknown key(s) {sorted(unknown)} for kind {kind}")
        gen = D.generate_synthetic_classification if kind == "cls" else D.generate_synthetic_step_classification
        try:
            records = gen(n, Rng(s), **sec)
        except ConfigError as exc:
            raise CliError(f"data.{exc}") from None
        generator = {"kind": kind, "n_samples": n, "seed": s, **sec}
        t_range = [0.0, 1.0]
    out_path.parent.mkdir(parents=True, exist_ok=True)
    D.write_ndjson(records, out_path)
    D.write_metadata(out_path, {
        "generator": generator,
        "seed": generator["seed"],
        "time_map": {"lo": float(t_range[0]), "hi": float(t_range[1])},
        "n_records": len(records),
    })
    return out_path


# shared data plumbing


def load_dataset(data_path):
    try:
        records = D.read_ndjson(data_path)
    except OSError as exc:
        raise CliError(f"cannot read data {data_path}: {exc.strerror}") from None
    if not records:
        raise CliError(f"data {data_path}: no records")
    meta = D.read_metadata(data_path)
    tm = meta.get("time_map")
    time_map = D.TimeMap(tm["lo"], tm["hi"]) if tm else None
    records, time_map = D.normalize_times(records, time_map)
    return records, time_map, meta


def _split(records, tcfg: TrainConfig):
    return D.split(records, tcfg.split, Rng(tcfg.seed).spawn(_SPLIT_STREAM))


def _check_task_data(task, records):
    if task == "cls":
        for r in records:
            if r.label is None:
                raise CliError(f"record {r.id!r}: missing label for classification task")
    elif task == "step-cls":
        for r in records:
            if r.step_labels is None:
                raise CliError(f"record {r.id!r}: missing step_labels for per-step task")


def _model_config(task, records, model_sec, functions=None) -> ModelConfig:
    sec = dict(model_sec)
    if functions is not None:
        sec["functions"] = functions
    sec.update(m=records[0].m, seq_len=max(r.length for r in records), task=task)
    if task == "cls":
        sec.setdefault("num_classes", max(2, max(r.label for r in records) + 1))
    elif task == "step-cls":
        sec.setdefault("num_classes", max(2, int(max(r.step_labels.max() for r in records)) + 1))
    return _build(ModelConfig, "model", sec)


def _train_config(train_sec, seed, observed_fraction) -> TrainConfig:
    sec = dict(train_sec)
    if seed is not None:
        sec["seed"] = seed
    if observed_fraction is not None:
        sec["observed_fraction"] = observed_fraction
    return _build(TrainConfig, "train", sec)


def _fmt(x) -> str:
    return format(float(x), ".17g")


def mean_std_report(values) -> dict:
    """Mean and sample std (ddof=1) of repeated runs plus a ``mean ± std`` string."""
    v = np.asarray(values, dtype=np.float64)
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    mean = float(v.mean())
    return {"mean": mean, "std": std, "n": int(v.size), "report": f"{mean:.4g} ± {std:.4g}"}


def metrics_csv(history, metric_name) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "split", "metric", "value"])
    for rec in history:
        w.writerow([rec.epoch, "train", metric_name, _fmt(rec.train_loss)])
        w.writerow([rec.epoch, "val", metric_name, _fmt(rec.val_loss)])
    return buf.getvalue()


def run_training(task, records, model_cfg: ModelConfig, tcfg: TrainConfig, out_dir: Path, extra=None) -> dict:
    """Train one model and write checkpoint, metrics CSV and summary into ``out_dir``."""
    train, val, test = _split(records, tcfg)
    model = TpcnnModel.init(model_cfg, Rng(tcfg.seed))
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.npz"
    extra = {"task": task, "train": tcfg.to_dict(), **(extra or {})}
    loss_name = "mse" if task == "interp" else "nll"
    try:
        best, history = train_loop(task, model, (train, val), tcfg,
                                   on_epoch=lambda r: log.info("epoch %d train %.6g val %.6g (%.2fs)",
                                                               r.epoch, r.train_loss, r.val_loss, r.seconds))
    except NumericsError as exc:
        save_checkpoint(exc.checkpoint, ckpt, extra)
        (out_dir / "metrics.csv").write_text(metrics_csv(exc.history, loss_name), encoding="utf-8")
        raise CliError(f"numeric failure: {exc}; last good checkpoint at {ckpt}", EXIT_NUMERIC) from None
    save_checkpoint(best, ckpt, extra)
    (out_dir / "metrics.csv").write_text(metrics_csv(history, loss_name), encoding="utf-8")
    best_rec = min(history, key=lambda r: r.val_loss)
    summary = {
        "task": task,
        "functions": model_cfg.functions,
        "n_params": best.n_params(),
        "epochs": len(history),
        "best_epoch": best_rec.epoch,
        "best_val_loss": best_rec.val_loss,
        "val_metrics": evaluate(best, val, tcfg),
        "test_metrics": evaluate(best, test, tcfg),
        "seconds_per_epoch": [r.seconds for r in history],
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def cmd_train(task, data_path, cfg_path, out_dir, seed=None, observed_fraction=None) -> dict:
    started = _now()
    cfg = load_config(cfg_path)
    records, time_map, _ = load_dataset(data_path)
    _check_task_data(task, records)
    tcfg = _train_config(_section(cfg, "train"), seed, observed_fraction)
    mcfg = _model_config(task, records, _section(cfg, "model"))
    out_dir = Path(out_dir)
    extra = {"data_path": str(Path(data_path).resolve()),
             "time_map": dataclasses.asdict(time_map)}
    summary = run_training(task, records, mcfg, tcfg, out_dir, extra)
    manifest = RunManifest(
        command="train",
        config={"task": task, "model": mcfg.to_dict(), "train": tcfg.to_dict()},
        seed=tcfg.seed,
        data_hash=git_blob_hash(data_path),
        started=started,
        finished=_now(),
        outputs={k: str(out_dir / k) for k in ("checkpoint.npz", "metrics.csv", "summary.json")},
    )
    manifest.write(out_dir / "manifest.json")
    return summary


# eval


def _find_checkpoints(path: Path):
    if path.is_file():
        return [path]
    if (path / "checkpoint.npz").is_file():
        return [path / "checkpoint.npz"]
    return sorted(path.rglob("checkpoint.npz"))


def _eval_one(ckpt: Path, data_path, split_name):
    model, extra = load_checkpoint(ckpt)
    tcfg = TrainConfig.from_dict(extra["train"]) if "train" in extra else TrainConfig()
    records = D.read_ndjson(data_path)
    tm = extra.get("time_map")
    records, _ = D.normalize_times(records, D.TimeMap(tm["lo"], tm["hi"]) if tm else None)
    _check_task_data(model.config.task, records)
    if split_name == "all":
        subset = records
    else:
        train, val, test = _split(records, tcfg)
        subset = {"train": train, "val": val, "test": test}[split_name]
    return evaluate(model, subset, tcfg)


def cmd_eval(checkpoint, data_path, split_name="test") -> dict:
    path = Path(checkpoint)
    ckpts = _find_checkpoints(path) if path.exists() else []
    if not ckpts:
        raise CliError(f"no checkpoint found at {checkpoint}")
    runs = [{"checkpoint": str(c), "metrics": _eval_one(c, data_path, split_name)} for c in ckpts]
    if len(runs) == 1:
        return {"split": split_name, **runs[0]}
    names = sorted(set.intersection(*(set(r["metrics"]) for r in runs)))
    stats = {n: mean_std_report([r["metrics"][n] for r in runs]) for n in names}
    return {
        "split": split_name,
        "runs": runs,
        "mean": {n: s["mean"] for n, s in stats.items()},
        "std": {n: s["std"] for n, s in stats.items()},
        "report": {n: s["report"] for n, s in stats.items()},
        "n_runs": len(runs),
    }


# ablate


def parse_function_set(text: str) -> list:
    parts = [p.strip() for p in text.split("+") if p.strip()]
    if not parts:
        raise CliError(f"empty function set {text!r}")
    try:
        return [TimeFunctionId.parse(p).value for p in parts]
    except ConfigError as exc:
        raise CliError(f"functions: {exc}") from None


def _headline_metric(task, metrics):
    if task == "interp":
        return "mse", metrics["mse"]
    if "auc" in metrics:
        return "auc", metrics["auc"]
    return "accuracy", metrics["accuracy"]


def cmd_ablate(data_path, cfg_path, functions, out_csv, task="cls", seed=None, n_seeds=None,
               observed_fraction=None, runs_dir=None) -> dict:
    cfg = load_config(cfg_path)
    sets = [(f, parse_function_set(f)) for f in functions]
    ab = _section(cfg, "ablate")
    n_seeds = int(n_seeds if n_seeds is not None else ab.get("seeds", 5))
    if n_seeds < 1:
        raise CliError("ablate.seeds: must be >= 1")
    records, time_map, _ = load_dataset(data_path)
    _check_task_data(task, records)
    base = _train_config(_section(cfg, "train"), seed, observed_fraction)
    out_csv = Path(out_csv)
    runs_dir = Path(runs_dir) if runs_dir else out_csv.with_name(out_csv.stem + "_runs")
    rows = []
    for label, funcs in sets:
        mcfg = _model_config(task, records, _section(cfg, "model"), funcs)
        for k in range(n_seeds):
            tcfg = dataclasses.replace(base, seed=base.seed + k)
            extra = {"data_path": str(Path(data_path).resolve()), "time_map": dataclasses.asdict(time_map),
                     "function_set": label}
            summary = run_training(task, records, mcfg, tcfg, runs_dir / label / f"seed{tcfg.seed}", extra)
            name, value = _headline_metric(task, summary["test_metrics"])
            rows.append((label, tcfg.seed, name, value))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["function_set", "seed", "metric", "value"])
    for label, s, name, value in rows:
        w.writerow([label, s, name, _fmt(value)])
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    out_csv.write_text(buf.getvalue(), encoding="utf-8")
    summary = {}
    for label, _ in sets:
        summary[label] = {"metric": rows[0][2], **mean_std_report([r[3] for r in rows if r[0] == label])}
    out_csv.with_name(out_csv.stem + ".summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


# export-plot


def cmd_export_plot(run_dir, out_path, n_samples=3, seed=None) -> dict:
    run_dir = Path(run_dir)
    ckpts = _find_checkpoints(run_dir) if run_dir.exists() else []
    if not ckpts:
        raise CliError(f"no checkpoint found under {run_dir}")
    models = {}
    for c in ckpts:
        model, extra = load_checkpoint(c)
        if model.config.task != "interp":
            continue
        label = extra.get("function_set") or "+".join(model.config.functions)
        models.setdefault(label, (model, extra))
    if not models:
        raise CliError(f"no interpolation checkpoint under {run_dir}")
    first_model, first_extra = next(iter(models.values()))
    data_path = first_extra.get("data_path")
    if not data_path or not Path(data_path).exists():
        raise CliError("checkpoint does not reference a readable dataset")
    records, time_map, meta = load_dataset(data_path)
    tcfg = TrainConfig.from_dict(first_extra["train"])
    _, _, test = _split(records, tcfg)
    pick_seed = tcfg.seed if seed is None else seed
    chosen = sorted(Rng(pick_seed).choice(len(test), min(n_samples, len(test))).tolist())
    truth = {}
    gen = meta.get("generator", {})
    if gen.get("kind") == "interp":
        syn = D.SyntheticConfig(**{k: v for k, v in gen.items() if k != "kind"})
        truth = D.synthetic_curves(syn, Rng(syn.seed))
    samples = []
    for i in chosen:
        rec = test[i]
        batch = D.records_to_batch([rec])
        entry = {
            "id": rec.id,
            "observed_times": rec.times.tolist(),
            "observed_values": rec.values[0].tolist(),
            "reconstructions": {},
        }
        if rec.id in truth:
            grid, curve = truth[rec.id]
            entry["grid_times"] = time_map.apply(grid).tolist()
            entry["truth"] = curve.tolist()
        for label, (model, _) in models.items():
            xhat = interpolation_forward(batch, model)
            entry["reconstructions"][label] = xhat[0, :, :rec.length][0].tolist()
        samples.append(entry)
    out = {"run_dir": str(run_dir), "functions": list(models), "samples": samples}
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Path(out_path).write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")
    return out


# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed override")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = bit-reproducible)")
    common.add_argument("--config", default=None, help="YAML config with data/model/train/ablate sections")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="tpconv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic NDJSON dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--kind", choices=DATA_KINDS, default=None)

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--task", choices=list(TASK_ALIASES), default="interp")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output run directory")
    t.add_argument("--observed-fraction", type=float, default=None)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or a directory of runs")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "val", "test", "all"], default="test")

    a = sub.add_parser("ablate", parents=[common], help="train one model per time-function set")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True, help="CSV of (function_set, seed, metric, value)")
    a.add_argument("--functions", nargs="+", default=DEFAULT_ABLATION)
    a.add_argument("--task", choices=list(TASK_ALIASES), default="cls")
    a.add_argument("--n-seeds", type=int, default=None)
    a.add_argument("--observed-fraction", type=float, default=None)
    a.add_argument("--runs-dir", default=None)

    x = sub.add_parser("export-plot", parents=[common], help="dump reconstruction data for plotting")
    x.add_argument("--run-dir", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--n-samples", type=int, default=3)
    return parser


def _dispatch(args):
    if args.command == "generate":
        path = cmd_generate(args.config, args.out, args.seed, args.kind)
        return {"data": str(path), "metadata": str(D.metadata_path(path))}
    if args.command == "train":
        return cmd_train(args.task, args.data, args.config, args.out, args.seed, args.observed_fraction)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.data, args.split)
    if args.command == "ablate":
        return cmd_ablate(args.data, args.config, args.functions, args.out, args.task, args.seed,
                          args.n_seeds, args.observed_fraction, args.runs_dir)
    out = cmd_export_plot(args.run_dir, args.out, args.n_samples, args.seed)
    return {"out": args.out, "n_samples": len(out["samples"])}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            result = _dispatch(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericsError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ParseError, ValidationError, ShapeError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
