"""Command line entry point: ``preqsel <subcommand> --config exp.json``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import codec, stats
from .config import ConfigError, ExperimentConfig, load_config
from .prequential import estimate_dl, evidence_table, fit, log10_bayes_factor

HISTORY_HEADER = ["step", "train_nats", "calib_nats_raw", "calib_nats_cal", "calib_err"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _csv_text(comment: str, header, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


@contextmanager
def _mapper(jobs: int):
    if jobs <= 1:
        yield map
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        yield lambda fn, tasks: pool.map(fn, tasks, chunksize=1)


def _fit_task(task):
    recipe, ds, seed = task
    return fit(recipe, ds, seed, recipe.full_dataset_size or len(ds))


def cmd_train(cfg: ExperimentConfig, out: Path, seeds, jobs: int) -> list[Path]:
    ds = cfg.load_dataset()
    if cfg.eval_size:
        ds, _ = cfg.split_eval(ds)  # the evaluation split never reaches training
    keys = list(itertools.product(cfg.models, seeds))
    tasks = [(cfg.recipe(cfg.model_spec(m, ds)), ds, s) for m, s in keys]
    written = []
    with _mapper(jobs) as map_fn:
        runs = list(map_fn(_fit_task, tasks))
    for (model, seed), (recipe, _, _), run in zip(keys, tasks, runs):
        stem = f"train_{model}_s{seed}"
        rows = [(h.step, h.train_nats, h.calib_nats_raw, h.calib_nats_cal, h.calib_err) for h in run.history]
        written.append(_write(out / f"{stem}_history.csv", _csv_text(cfg.comment([seed]), HISTORY_HEADER, rows)))
        flat = np.concatenate([p.ravel() for p in run.params]) if run.params else np.zeros(0)
        npy = out / f"{stem}_params.npy"
        np.save(npy, flat)
        written.append(npy)
        summary = {
            "config_sha256": cfg.digest, "config": cfg.raw, "model": model, "seed": seed,
            "model_spec": recipe.model.to_dict(), "param_shapes": [list(p.shape) for p in run.params],
            "lr": run.lr0, "steps": run.steps, "log_temperature": run.temperature.log_t,
            "temperature": run.temperature.value, "calib_nats": run.calib_nats,
            "calib_nats_raw": run.calib_nats_raw, "calib_err": run.calib_err, "digest": run.digest(),
        }
        written.append(_write(out / f"{stem}_summary.json", _json(summary)))
    return written


def _profiles(cfg: ExperimentConfig, seeds, jobs: int, specs: dict):
    if not cfg.prefix_sizes:
        raise ConfigError("missing field 'prefix_sizes'")
    ds = cfg.load_dataset()
    pool, ev = cfg.split_eval(ds)
    if cfg.prefix_sizes[-1] > len(pool):
        raise ConfigError(f"'prefix_sizes' exceed the {len(pool)} examples left after the evaluation split")
    full = cfg.full_dataset_size or len(pool)
    out = {}
    with _mapper(jobs) as map_fn:
        for key, spec in specs.items():
            out[key] = stats.profile(cfg.recipe(spec), pool, cfg.prefix_sizes, ev, seeds, full, map_fn=map_fn)
    return out, ds


def _profile_rows(profiles, seeds):
    for key, prof in profiles.items():
        for p in prof.points:
            for s, nats, err in zip(seeds, p.nats, p.error_rates):
                yield (p.prefix_size, key, s, nats, err)


def cmd_profile(cfg, out, seeds, jobs) -> list[Path]:
    ds = cfg.load_dataset()
    profiles, _ = _profiles(cfg, seeds, jobs, {m: cfg.model_spec(m, ds) for m in cfg.models})
    rows = sorted(_profile_rows(profiles, seeds), key=lambda r: (r[0], list(cfg.models).index(r[1]), r[2]))
    text = _csv_text(cfg.comment(seeds), ["prefix_size", "model", "seed", "nats", "error_rate"], rows)
    return [_write(out / "profile.csv", text)]


def cmd_snr(cfg, out, seeds, jobs) -> list[Path]:
    ds = cfg.load_dataset()
    names = list(cfg.models)
    if len(names) < 2:
        raise ConfigError("'models' needs at least two entries for snr")
    profiles, _ = _profiles(cfg, seeds, jobs, {m: cfg.model_spec(m, ds) for m in names})
    rows = []
    for n in cfg.prefix_sizes:
        for a, b in itertools.combinations(names, 2):
            est = stats.bootstrap_snr(profiles[a].eval_matrices[n], profiles[b].eval_matrices[n],
                                      n_boot=cfg.n_boot, seed=seeds[0])
            rows.append((n, f"{a}-{b}", est.delta, est.variance, est.snr))
    text = _csv_text(cfg.comment(seeds), ["prefix_size", "pair", "delta", "variance", "snr"], rows)
    prof_rows = sorted(_profile_rows(profiles, seeds), key=lambda r: (r[0], names.index(r[1]), r[2]))
    prof = _csv_text(cfg.comment(seeds), ["prefix_size", "model", "seed", "nats", "error_rate"], prof_rows)
    return [_write(out / "snr.csv", text), _write(out / "profile.csv", prof)]


def cmd_width_sweep(cfg, out, seeds, jobs) -> list[Path]:
    if not cfg.widths:
        raise ConfigError("missing field 'widths'")
    ds = cfg.load_dataset()
    base = cfg.model_spec(cfg.width_model or next(iter(cfg.models)), ds)
    profiles, _ = _profiles(cfg, seeds, jobs, {w: base.with_width(w) for w in cfg.widths})
    rows = sorted(_profile_rows(profiles, seeds), key=lambda r: (cfg.widths.index(r[1]), r[0], r[2]))
    text = _csv_text(cfg.comment(seeds), ["width", "prefix_size", "seed", "nats", "error_rate"],
                     [(w, n, s, v, e) for n, w, s, v, e in rows])
    summary = []
    for w in cfg.widths:
        for p in profiles[w].points:
            summary.append((w, p.prefix_size, p.mean, p.std, p.mean_error))
    summ = _csv_text(cfg.comment(seeds), ["width", "prefix_size", "mean_nats", "std_nats", "mean_error"], summary)
    return [_write(out / "width_sweep.csv", text), _write(out / "width_sweep_summary.csv", summ)]


def cmd_mdl(cfg, out, seeds, jobs) -> list[Path]:
    ds = cfg.load_dataset()
    schedule = cfg.block_schedule(len(ds), ds.num_classes)
    written, estimates = [], []
    with _mapper(jobs) as map_fn:
        for m in cfg.models:
            est, ledgers = estimate_dl(cfg.recipe(cfg.model_spec(m, ds)), ds, schedule, seeds, m, map_fn=map_fn)
            estimates.append(est)
            for s, ledger in zip(seeds, ledgers):
                written.append(_write(out / f"ledger_{m}_s{s}.csv", ledger.to_csv(cfg.comment([s]))))
    rows = [(e.model, e.dl, e.dl / math.log(2), e.seed_std, e.resolution_std, e.uncertainty) for e in estimates]
    header = ["model", "dl_nats", "dl_bits", "seed_std", "resolution_std", "uncertainty"]
    written.append(_write(out / "dl.csv", _csv_text(cfg.comment(seeds), header, rows)))
    if len(estimates) > 1:
        table = evidence_table(estimates)
        written.append(_write(out / "evidence.csv", table.to_csv(cfg.comment(seeds))))
        doc = json.loads(table.to_json())
        doc["config_sha256"] = cfg.digest
        doc["seeds"] = list(seeds)
        doc["log10_bayes_factor_vs_best"] = {
            e.model: log10_bayes_factor(e.dl - min(x.dl for x in estimates)) for e in estimates}
        written.append(_write(out / "evidence.json", _json(doc)))
    return written


def cmd_encode(cfg, out, seeds, jobs, model: str | None = None) -> list[Path]:
    ds = cfg.load_dataset()
    model = model or next(iter(cfg.models))
    if model not in cfg.models:
        raise ConfigError(f"unknown model {model!r}")
    schedule = cfg.block_schedule(len(ds), ds.num_classes)
    msg = codec.encode_dataset(ds, cfg.recipe(cfg.model_spec(model, ds)), schedule, seeds[0],
                               extra_header={"config": cfg.raw, "config_sha256": cfg.digest, "model": model})
    path = out / f"{model}_s{seeds[0]}.pqdl"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(msg.to_bytes())
    h = msg.header
    print(f"{path}: {h['bit_length']} bits (shannon {h['shannon_bits']:.1f}, dl {h['dl_nats'] / math.log(2):.1f})")
    return [path]


def cmd_decode(cfg, out, seeds, jobs, message: str | None = None) -> list[Path]:
    if not message:
        raise ConfigError("decode needs a message path")
    ds = cfg.load_dataset()
    try:
        blob = Path(message).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read message: {exc}") from None
    msg = codec.EncodedMessage.from_bytes(blob)
    labels = codec.decode_dataset(msg, ds.x)
    comment = f"config={msg.header.get('config_sha256', cfg.digest)} seeds={msg.header['seed']}"
    text = _csv_text(comment, ["index", "label"], enumerate(labels.tolist()))
    return [_write(out / (Path(message).stem + "_labels.csv"), text)]


COMMANDS = {
    "train": cmd_train, "profile": cmd_profile, "mdl": cmd_mdl, "encode": cmd_encode,
    "decode": cmd_decode, "snr": cmd_snr, "width-sweep": cmd_width_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="preqsel", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--out", default=None, help="output directory (default: config, then $PREQSEL_OUT)")
        s.add_argument("--jobs", type=int, default=1)
        s.add_argument("--seed-offset", type=int, default=0)
        if name == "encode":
            s.add_argument("--model", default=None)
        if name == "decode":
            s.add_argument("message")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config)
        out = cfg.resolve_out(args.out, os.environ)
        seeds = [s + args.seed_offset for s in cfg.seeds]
        extra = {}
        if args.command == "encode":
            extra["model"] = args.model
        if args.command == "decode":
            extra["message"] = args.message
        paths = COMMANDS[args.command](cfg, out, seeds, args.jobs, **extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    _write(out / "config.json", _json(cfg.raw))
    for path in paths:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
