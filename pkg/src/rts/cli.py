"""Command-line entry point: ``rts {verify-math,gen-data,train,eval,sweep}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, protocols
from .datasynth import DataConfig, Dataset, build_pairs, load_dataset, make_open_set, save_dataset
from .heads import ModelParams, Variant, param_names
from .selfcheck import FAULTS, run_battery
from .stochastic import RngStream
from .trainer import EpochLog, TrainConfig, TrainingDiverged, train

log = logging.getLogger("rts")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MATH = 3
EXIT_DIVERGED = 4
EXIT_UNSUPPORTED = 5

MODES = ("ood", "reject", "verify-pairs", "noise-curve")
SWEEP_AXES = {"lambda": ("lam", (0.1, 1.0, 10.0)), "delta": ("dof", (8, 16, 32))}
REPORT_FORMATS = ("csv", "json")


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    fmr: float = 1e-3
    fmr_table: tuple[float, ...] = protocols.DEFAULT_FMRS
    reject_fractions: tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(11))
    max_pairs: int = 10_000
    noise_kinds: tuple[str, ...] = ("additive", "saltpepper", "maskout", "mixup")
    noise_levels: tuple[float, ...] = (0.3, 0.6, 1.0)
    noise_probes: int = 200


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs/default"
    report_formats: tuple[str, ...] = REPORT_FORMATS

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "report_formats": list(self.report_formats),
            "data": _plain(dataclasses.asdict(self.data)),
            "train": _plain(dataclasses.asdict(self.train)),
            "eval": _plain(dataclasses.asdict(self.eval)),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        """Strict parse: unknown keys and missing required keys are errors.

        Required: the ``data`` and ``train`` sections and ``train.variant``;
        everything else falls back to its default.
        """
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        top = {"data", "train", "eval", "seed", "out_dir", "report_formats"}
        _reject_unknown(raw, top, "")
        for key in ("data", "train"):
            if key not in raw:
                raise ConfigError(f"missing required key '{key}'")
        if not isinstance(raw["train"], dict) or "variant" not in raw["train"]:
            raise ConfigError("missing required key 'train.variant'")
        cfg = cls(
            data=_section(DataConfig, raw["data"], "data"),
            train=_section(TrainConfig, raw["train"], "train"),
            eval=_section(EvalConfig, raw.get("eval", {}), "eval"),
            seed=_int_key(raw, "seed", 0),
            out_dir=str(raw.get("out_dir", "runs/default")),
            report_formats=tuple(raw.get("report_formats", REPORT_FORMATS)),
        )
        bad = [f for f in cfg.report_formats if f not in REPORT_FORMATS]
        if bad or not cfg.report_formats:
            raise ConfigError(f"bad value for 'report_formats': choose from {REPORT_FORMATS}")
        return cfg


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _reject_unknown(raw: dict, allowed: set[str], prefix: str) -> None:
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{prefix}{key}'")


def _int_key(raw: dict, key: str, default: int) -> int:
    value = raw.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise ConfigError(f"bad value for '{key}': expected a non-negative integer")
    return value


def _section(kind, raw, name: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"'{name}' must be an object")
    fields = {f.name: f for f in dataclasses.fields(kind)}
    _reject_unknown(raw, set(fields), f"{name}.")
    kwargs = {}
    for key, value in raw.items():
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return kind(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value in '{name}': {exc}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(raw)


# checkpoints ---------------------------------------------------------------

MAGIC = b"RTSCKPT\0"
CHECKPOINT_VERSION = 1
_VARIANT_CODES = {Variant.PLAIN: 0, Variant.FIXED: 1, Variant.RELAXED: 2, Variant.RTS: 3}


def save_checkpoint(params: ModelParams, path: str | Path, gamma: float) -> None:
    """Header, then every array as little-endian float64 in ``param_names`` order.

    Header (little-endian): magic[8], version u32, variant u32, dof u32, d_x u32,
    depth u32, widths u32 x depth, d_y u32, C u32, g_width u32, gamma f64, t0 f64.
    """
    head = struct.pack("<8sIIIII", MAGIC, CHECKPOINT_VERSION, _VARIANT_CODES[params.variant],
                       params.dof, params.d_x, params.depth)
    head += struct.pack(f"<{params.depth}I", *params.widths)
    head += struct.pack("<IIIdd", params.d_y, params.num_classes, params.g_width, gamma, params.t0)
    body = b"".join(np.ascontiguousarray(params.tensors[n], dtype="<f8").tobytes()
                    for n in param_names(params.depth))
    Path(path).write_bytes(head + body)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, float]:
    """Returns ``(params, gamma)``."""
    blob = Path(path).read_bytes()
    off = struct.calcsize("<8sIIIII")
    if len(blob) < off:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, code, dof, d_x, depth = struct.unpack_from("<8sIIIII", blob)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    widths = struct.unpack_from(f"<{depth}I", blob, off)
    off += 4 * depth
    d_y, classes, g_width, gamma, t0 = struct.unpack_from("<IIIdd", blob, off)
    off += struct.calcsize("<IIIdd")
    variant = {c: v for v, c in _VARIANT_CODES.items()}[code]
    shapes = {}
    fan_in = d_x
    for i, w in enumerate(widths, start=1):
        shapes[f"w{i}"], shapes[f"b{i}"] = (fan_in, w), (w,)
        fan_in = w
    shapes.update(wf=(fan_in, d_y), bf=(d_y,), wg=(fan_in, g_width), bg=(g_width,),
                  centers=(classes, d_y))
    tensors = {}
    for name in param_names(depth):
        n = int(np.prod(shapes[name]))
        if off + 8 * n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shapes[name]).copy()
        off += 8 * n
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return ModelParams(tensors=tensors, variant=variant, dof=dof, t0=t0), gamma


# output helpers -------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _echo(cfg: ExperimentConfig, out: Path) -> Path:
    return write_json(out / "config.json", cfg.to_dict())


def _dataset(cfg: ExperimentConfig, root: RngStream, path: str | None = None) -> Dataset:
    if path:
        return load_dataset(path)
    return make_open_set(cfg.data, root.child("data"))


def _report(cfg: ExperimentConfig, out: Path, name: str, metrics: dict, files: list[Path]) -> None:
    if "json" not in cfg.report_formats:
        return
    existing = [p.name for p in files if p.exists()]
    write_json(out / name, {"metrics": metrics, "files": existing, "config": cfg.to_dict(),
                            "seed": cfg.seed, "code_version": __version__})


# subcommands ----------------------------------------------------------------

def cmd_verify_math(seed: int, out: Path | None, inject_fault: str | None = None) -> int:
    results = run_battery(seed, inject_fault=inject_fault)
    lines = [r.line() for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify_math.txt").write_text(text)
    if failed:
        sys.stderr.write("failed checks: " + ", ".join(failed) + "\n")
        return EXIT_MATH
    return EXIT_OK


def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    ds = make_open_set(cfg.data, RngStream(cfg.seed).child("data"))
    save_dataset(ds, out / "dataset.txt")
    write_json(out / "dataset_info.json", {"fingerprint": ds.fingerprint(), "samples": len(ds)})
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, out: Path, dataset_path: str | None = None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    root = RngStream(cfg.seed)
    ds = _dataset(cfg, root, dataset_path)
    rows: list[EpochLog] = []
    csv_path = out / "epochs.csv"
    ckpt = out / "checkpoint.bin"
    status, code = "ok", EXIT_OK
    try:
        params, rows = train(cfg.train, ds, root)
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        params, rows = exc.last_good, exc.logs
        status, code = f"diverged: {exc}", EXIT_DIVERGED
    save_checkpoint(params, ckpt, cfg.train.gamma)
    write_csv(csv_path, EpochLog.FIELDS, (r.row() for r in rows))
    metrics = {"status": status, "epochs_completed": len(rows),
               "dataset_fingerprint": ds.fingerprint()}
    if rows:
        metrics.update(final_ce=rows[-1].ce, final_kl=rows[-1].kl, final_total=rows[-1].total)
    _report(cfg, out, "train_report.json", metrics, [ckpt, csv_path])
    return code


def cmd_eval(cfg: ExperimentConfig, checkpoint: str, mode: str, out: Path,
             dataset_path: str | None = None) -> int:
    params, gamma = load_checkpoint(checkpoint)
    if mode in ("ood", "reject", "noise-curve") and not params.variant.has_uncertainty:
        sys.stderr.write(f"mode {mode!r} needs an uncertainty head; checkpoint is {params.variant.value}\n")
        return EXIT_UNSUPPORTED
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    root = RngStream(cfg.seed)
    ds = _dataset(cfg, root, dataset_path)
    ev = cfg.eval
    agg = cfg.train.score_agg
    files: list[Path] = []
    if mode == "ood":
        res = protocols.ood_detection(params, ds, "v", gamma, agg)
        c = res.curve
        files.append(write_csv(out / "roc.csv", ("threshold", "tp", "fp", "tpr", "fpr"),
                               zip(c.thresholds, c.tp, c.fp, c.tpr, c.fpr)))
        metrics = {"auc": res.auc, "tnr_at_tpr90": res.tnr_at_tpr90, "tnr_at_tpr95": res.tnr_at_tpr95,
                   "n_in": c.n_pos, "n_ood": c.n_neg}
    elif mode == "reject":
        pairs = build_pairs(ds, ev.max_pairs, root.child("pairs"))
        curve = protocols.reject_curve(params, ds, pairs, ev.fmr, ev.reject_fractions, agg)
        files.append(write_csv(out / "reject.csv", ("fraction", "n_removed", "threshold", "fnmr"),
                               zip(curve.fractions, curve.n_removed, curve.thresholds, curve.fnmr)))
        metrics = {"fmr": ev.fmr, "fnmr": {repr(float(f)): (None if np.isnan(v) else float(v))
                                           for f, v in zip(curve.fractions, curve.fnmr)}}
    elif mode == "verify-pairs":
        pairs = build_pairs(ds, ev.max_pairs, root.child("pairs"))
        res = protocols.verify_pairs(params, ds, pairs, ev.fmr_table)
        rows = [("genuine", int(a), int(b), s) for (a, b), s in zip(pairs.genuine, res.genuine_sims)]
        rows += [("impostor", int(a), int(b), s) for (a, b), s in zip(pairs.impostor, res.impostor_sims)]
        files.append(write_csv(out / "pair_scores.csv", ("pair", "i", "j", "similarity"), rows))
        files.append(write_csv(out / "fnmr_at_fmr.csv", ("fmr", "threshold", "fnmr"),
                               [(f, thr, fnmr) for f, (fnmr, thr) in res.fnmr_at_fmr.items()]))
        metrics = {"verification_accuracy": res.accuracy, "accuracy_threshold": res.accuracy_threshold,
                   "fnmr_at_fmr": {repr(f): v[0] for f, v in res.fnmr_at_fmr.items()}}
    elif mode == "noise-curve":
        nc = protocols.noise_curve(params, ds, root.child("noise"), ev.noise_kinds, ev.noise_levels,
                                   ev.noise_probes, agg)
        files.append(write_csv(out / "noise_scores.csv", ("kind", "level", "score"),
                               zip(nc.kinds, nc.levels, nc.scores)))
        summary = []
        for kind in ("clean",) + tuple(ev.noise_kinds):
            mask = nc.kinds == kind
            for level in np.unique(nc.levels[mask]):
                s = nc.scores[mask & (nc.levels == level)]
                q25, q50, q75 = np.quantile(s, [0.25, 0.5, 0.75])
                summary.append((kind, level, s.size, s.mean(), s.std(), q25, q50, q75))
        files.append(write_csv(out / "noise_curve.csv",
                               ("kind", "level", "n", "mean", "std", "q25", "median", "q75"), summary))
        metrics = {"spearman": nc.rho, "spearman_by_kind": nc.rho_by_kind}
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    _report(cfg, out, f"report_{mode}.json", metrics, files)
    log.info("%s: %s", mode, json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def sweep_member(cfg: ExperimentConfig, out: Path) -> dict:
    """Train one member and score it; returns a table row (status ``failed`` on error)."""
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    root = RngStream(cfg.seed)
    ds = make_open_set(cfg.data, root.child("data"))
    row = {"status": "ok", "dataset_fingerprint": ds.fingerprint(), "verification_accuracy": None,
           "ood_auc": None, "final_total": None}
    try:
        params, logs = train(cfg.train, ds, root)
    except (TrainingDiverged, FloatingPointError, ValueError) as exc:
        row["status"] = f"failed: {exc}"
        return row
    save_checkpoint(params, out / "checkpoint.bin", cfg.train.gamma)
    write_csv(out / "epochs.csv", EpochLog.FIELDS, (r.row() for r in logs))
    pairs = build_pairs(ds, cfg.eval.max_pairs, root.child("pairs"))
    row["verification_accuracy"] = protocols.verify_pairs(params, ds, pairs, ()).accuracy
    if params.variant.has_uncertainty:
        row["ood_auc"] = protocols.ood_detection(params, ds, "v", cfg.train.gamma,
                                                 cfg.train.score_agg).auc
    row["final_total"] = logs[-1].total
    return row


def cmd_sweep(cfg: ExperimentConfig, out: Path, axes) -> int:
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    any_failed = False
    files = []
    tables = {}
    for axis in axes:
        key, values = SWEEP_AXES[axis]
        rows = []
        for value in values:
            member = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **{key: value}))
            res = sweep_member(member, out / f"{axis}_{value}")
            any_failed |= res["status"] != "ok"
            rows.append((axis, value, res["status"], res["verification_accuracy"], res["ood_auc"],
                         res["final_total"], res["dataset_fingerprint"]))
            log.info("sweep %s=%s: %s", axis, value, res["status"])
        files.append(write_csv(out / f"sweep_{axis}.csv",
                               ("axis", "value", "status", "verification_accuracy", "ood_auc",
                                "final_total", "dataset_fingerprint"), rows))
        tables[axis] = [dict(zip(("value", "status", "verification_accuracy", "ood_auc"), r[1:5]))
                        for r in rows]
    _report(cfg, out, "sweep_report.json", tables, files)
    return EXIT_DIVERGED if any_failed else EXIT_OK


# argument parsing -----------------------------------------------------------

def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rts", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required: bool):
        sp.add_argument("--config", required=config_required, help="JSON experiment config")
        sp.add_argument("--seed", type=_u64, help="overrides the config seed")
        sp.add_argument("--out", help="output directory (overrides out_dir)")

    vm = sub.add_parser("verify-math", help="run the numerical self-check battery")
    vm.add_argument("--seed", type=_u64, default=0)
    vm.add_argument("--out")
    vm.add_argument("--inject-fault", choices=FAULTS, help=argparse.SUPPRESS)

    common(sub.add_parser("gen-data", help="generate and export the synthetic dataset"), True)

    tr = sub.add_parser("train", help="train one model")
    common(tr, True)
    tr.add_argument("--dataset", help="exported dataset file instead of regenerating")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    common(ev, False)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--mode", choices=MODES, required=True)
    ev.add_argument("--dataset", help="exported dataset file instead of regenerating")

    sw = sub.add_parser("sweep", help="lambda / delta ablation sweep")
    common(sw, True)
    sw.add_argument("--axis", choices=("lambda", "delta", "all"), default="all")
    return p


def _resolve(args) -> ExperimentConfig:
    path = args.config
    if path is None and getattr(args, "checkpoint", None):
        path = Path(args.checkpoint).with_name("config.json")
        if not path.exists():
            raise ConfigError("no --config given and no config.json next to the checkpoint")
    cfg = load_config(path)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify-math":
        return cmd_verify_math(args.seed, Path(args.out) if args.out else None, args.inject_fault)
    try:
        cfg = _resolve(args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    out = Path(cfg.out_dir)
    if args.command == "gen-data":
        return cmd_gen_data(cfg, out)
    if args.command == "train":
        return cmd_train(cfg, out, args.dataset)
    if args.command == "eval":
        return cmd_eval(cfg, args.checkpoint, args.mode, out, args.dataset)
    axes = tuple(SWEEP_AXES) if args.axis == "all" else (args.axis,)
    return cmd_sweep(cfg, out, axes)


if __name__ == "__main__":
    sys.exit(main())
