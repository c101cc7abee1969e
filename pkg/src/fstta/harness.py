"""Experiment runner: pretraining, strategy sweeps, forgetting protocol, table merging.

Results are CSV files whose leading ``#`` lines carry the schema version,
package version and the full configuration as JSON, so every file is
self-describing. A JSON sidecar with the same echo is written next to each.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__, model, navsim
from .engine import AdaptSession, Strategy
from .errors import ConfigError, DataValidityError, NumericalError, SchemaError
from .fast import FastConfig
from .slow import SlowConfig

log = logging.getLogger(__name__)

RESULTS_SCHEMA = "fstta-results/1"
FORGETTING_SCHEMA = "fstta-forgetting/1"
METRICS = ("SR", "OSR", "SPL", "TL", "NE")
TIMING_COLUMNS = ("time_ms",)
RESULT_COLUMNS = (
    "strategy", "stream", "shuffle", "episodes",
    *METRICS, *(m + "_std" for m in METRICS),
    "fast_updates", "slow_updates", "skipped_gradients", "numerical_failures", "error",
    *TIMING_COLUMNS,
)


@dataclass
class RunConfig:
    """Every knob of a run. Keys double as config-file keys and CLI flags."""

    output_dir: str = "runs/default"
    params_file: str = ""
    # pretraining
    pretrain_seed: int = 0
    train_epochs: int = 20
    train_episodes: int = 3000
    heldout_episodes: int = 300
    target_accuracy: float = 0.85
    # streams
    streams: str = "unseen"
    unseen_seed: int = 2024
    seen_seed: int = 3024
    stream_count: int = 200
    bias_norm: float = 0.5
    noise_sigma: float = 0.1
    unseen_layout: int = 1
    stream_file: str = ""
    shuffles: int = 5
    shuffle_seed: int = 0
    # strategies; learning rates are calibrated to the toy policy
    strategies: str = "NoAdapt,Tent-INT-1,FSTTA"
    fast_lr: float = 0.18
    slow_lr: float = 1.0
    M: int = 3
    N: int = 4
    tau: float = 0.7
    rho: float = 0.95
    trunc_lo: float = 0.9
    trunc_hi: float = 1.1
    q: float = 0.1
    phi_eps: float = 1e-6
    forgetting_strategy: str = "FSTTA"
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            want = {"int": int, "float": float, "str": str}[f.type]
            if want is float and isinstance(value, int) and not isinstance(value, bool):
                setattr(self, f.name, float(value))
                value = float(value)
            if not isinstance(value, want) or isinstance(value, bool):
                raise ConfigError(f"field '{f.name}': expected {f.type}, got {value!r}")
        positive = ("train_episodes", "heldout_episodes", "stream_count", "shuffles", "M", "N", "workers")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"field '{name}': must be >= 1, got {getattr(self, name)}")
        if self.train_epochs < 0:
            raise ConfigError("field 'train_epochs': must be >= 0")
        for name in self.stream_names:
            if name not in ("unseen", "seen"):
                raise ConfigError(f"field 'streams': unknown stream {name!r} (expected unseen, seen)")
        if not self.fast_lr > 0:
            raise ConfigError("field 'fast_lr': must be positive")
        if self.slow_lr < 0:
            raise ConfigError("field 'slow_lr': must be non-negative")
        if not 0 < self.q < 1:
            raise ConfigError("field 'q': must lie in (0, 1)")
        if not 0 <= self.rho < 1:
            raise ConfigError("field 'rho': must lie in [0, 1)")
        if self.trunc_lo > self.trunc_hi:
            raise ConfigError("field 'trunc_lo': must not exceed trunc_hi")
        for name in self.strategy_names + [self.forgetting_strategy]:
            try:
                self.strategy(name)
            except DataValidityError as exc:
                raise ConfigError(f"field 'strategies': {exc}") from None

    @property
    def stream_names(self):
        return [s.strip() for s in self.streams.split(",") if s.strip()]

    @property
    def strategy_names(self):
        return [s.strip() for s in self.strategies.split(",") if s.strip()]

    @property
    def params_path(self):
        return Path(self.params_file) if self.params_file else Path(self.output_dir) / "policy.bin"

    def fast_config(self, dlr=True):
        return FastConfig(M=self.M, base_lr=self.fast_lr, tau=self.tau, rho=self.rho,
                          trunc_lo=self.trunc_lo, trunc_hi=self.trunc_hi, phi_eps=self.phi_eps, dlr=dlr)

    def slow_config(self):
        return SlowConfig(N=self.N, lr=self.slow_lr, q=self.q)

    def train_config(self):
        return model.TrainConfig(epochs=self.train_epochs, train_episodes=self.train_episodes,
                                 heldout_episodes=self.heldout_episodes, target_accuracy=self.target_accuracy)

    def strategy(self, name):
        """Parse ``NoAdapt``, ``Tent-INT-k``, ``Tent-Stable``, ``FastOnly[-noDLR]``, ``FSTTA[-noDLR]``."""
        if name == "NoAdapt":
            return Strategy.no_adapt()
        if name.startswith("Tent-INT-"):
            try:
                k = int(name[len("Tent-INT-"):])
            except ValueError:
                raise DataValidityError(f"bad interval in strategy name {name!r}") from None
            return Strategy.tent_interval(k, self.fast_config(dlr=False))
        if name == "Tent-Stable":
            return Strategy.tent_stable(self.fast_config(dlr=False))
        if name in ("FastOnly", "FastOnly-noDLR"):
            return Strategy.fast_only(self.fast_config(), dlr=not name.endswith("-noDLR"))
        if name in ("FSTTA", "FSTTA-noDLR"):
            return Strategy.fast_slow(self.fast_config(), self.slow_config(), dlr=not name.endswith("-noDLR"))
        raise DataValidityError(f"unknown strategy {name!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown config key '{key}'")
            kwargs[key] = _coerce(key, known[key].type, raw)
        return cls(**kwargs)


def _coerce(key, typ, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"field '{key}': expected {typ}, got {raw!r}") from None
    return raw


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    mapping = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            mapping[key] = value
    return mapping


def write_config_file(cfg, path):
    with open(path, "w") as fh:
        for key, value in cfg.to_dict().items():
            fh.write(f"{key} = {value}\n")


# -- streams -----------------------------------------------------------------

def unseen_shift(cfg):
    return navsim.ShiftSpec.unseen(cfg.unseen_seed, cfg.bias_norm, cfg.noise_sigma, cfg.unseen_layout)


def build_stream(cfg, name):
    if name == "unseen" and cfg.stream_file:
        return navsim.read_stream(cfg.stream_file)
    if name == "unseen":
        return navsim.generate_stream(cfg.unseen_seed, unseen_shift(cfg), cfg.stream_count)
    return navsim.generate_stream(cfg.seen_seed, navsim.ShiftSpec.seen(), cfg.stream_count)


def shuffle_order(cfg, shuffle, n):
    return np.random.default_rng([cfg.shuffle_seed, shuffle]).permutation(n)


# -- running -----------------------------------------------------------------

def run_cell(params, strategy, episodes, theta=None):
    """One online pass; returns (records, session)."""
    if theta is not None:
        params = params.with_adaptable(theta)
    session = AdaptSession(params, strategy)
    return navsim.run_stream(session, episodes), session


def _cell_row(strategy_name, stream, shuffle, records, session, error=""):
    row = {"strategy": strategy_name, "stream": stream, "shuffle": str(shuffle), "error": error}
    if records:
        m = navsim.evaluate(records).as_dict()
        row.update(m)
        row["episodes"] = len(records)
        row["time_ms"] = float(np.mean([r.wall_ms for r in records]))
    else:
        row.update({k: float("nan") for k in METRICS})
        row["episodes"] = 0
        row["time_ms"] = float("nan")
    if session is not None:
        d = session.diagnostics()
        for k in ("fast_updates", "slow_updates", "skipped_gradients", "numerical_failures"):
            row[k] = d[k]
    return row


def _run_job(job):
    params_path, cfg_dict, name, stream, shuffle = job
    cfg = RunConfig(**cfg_dict)
    params = model.load_params(params_path)
    episodes = build_stream(cfg, stream)
    order = shuffle_order(cfg, shuffle, len(episodes))
    strategy = cfg.strategy(name)
    try:
        records, session = run_cell(params, strategy, [episodes[i] for i in order])
        return _cell_row(name, stream, shuffle, records, session), _positions(records)
    except NumericalError as exc:
        return _cell_row(name, stream, shuffle, [], None, error=f"numerical: {exc}"), []


def _positions(records):
    return [int(r.success) for r in records]


def aggregate(rows):
    """One aggregate row per (strategy, stream) with means and population std."""
    out = []
    keys = []
    for r in rows:
        k = (r["strategy"], r["stream"])
        if k not in keys:
            keys.append(k)
    for strategy, stream in keys:
        group = [r for r in rows if (r["strategy"], r["stream"]) == (strategy, stream) and not r.get("error")]
        agg = {"strategy": strategy, "stream": stream, "shuffle": "agg", "error": ""}
        agg["episodes"] = sum(int(r["episodes"]) for r in group)
        for m in METRICS:
            vals = np.array([float(r[m]) for r in group])
            agg[m] = float(vals.mean()) if len(vals) else float("nan")
            agg[m + "_std"] = float(vals.std()) if len(vals) else float("nan")
        for k in ("fast_updates", "slow_updates", "skipped_gradients", "numerical_failures"):
            agg[k] = sum(int(r.get(k, 0)) for r in group)
        agg["time_ms"] = float(np.mean([float(r["time_ms"]) for r in group])) if group else float("nan")
        out.append(agg)
    return out


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(v)
    return str(v)


def write_results(path, schema, cfg, rows, columns=RESULT_COLUMNS, extra=None):
    echo = {"schema": schema, "version": __version__, "config": cfg.to_dict()}
    if extra:
        echo.update(extra)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema}\n")
        fh.write(f"# version: {__version__}\n")
        fh.write(f"# config: {json.dumps(cfg.to_dict(), sort_keys=True)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_results(path):
    """Returns ``(header, rows)``; numeric columns stay strings."""
    header = {}
    body = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                header[key.strip()] = value.strip()
            else:
                body.append(line)
    if "schema" not in header:
        raise SchemaError(f"{path}: missing schema line")
    rows = list(csv.DictReader(io.StringIO("".join(body))))
    return header, rows


def cmd_pretrain(cfg: RunConfig):
    """Train the policy on seen scenes and write it with a JSON report."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    params = model.pretrain(navsim.teacher_sampler(), cfg.train_config(), seed=cfg.pretrain_seed)
    path = cfg.params_path
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save_params(params, path)
    report = {"version": __version__, "config": cfg.to_dict(), "params_file": str(path), **params.meta}
    with open(Path(cfg.output_dir) / "pretrain_report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return params, report


def _load_params(cfg):
    if not cfg.params_path.exists():
        raise DataValidityError(f"parameter file {cfg.params_path} not found; run 'pretrain' first")
    return model.load_params(cfg.params_path)


def cmd_run(cfg: RunConfig):
    """Every strategy x stream x shuffle from fresh pristine sessions.

    Writes ``results.csv`` (per-shuffle rows then one ``agg`` row per
    strategy and stream), ``curves.csv`` (running SR against stream
    position, mean over shuffles) and the replayable ``stream_<name>.jsonl``.
    """
    _load_params(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for stream in cfg.stream_names:
        navsim.write_stream(build_stream(cfg, stream), out / f"stream_{stream}.jsonl")
    jobs = [(str(cfg.params_path), cfg.to_dict(), name, stream, s)
            for stream in cfg.stream_names for name in cfg.strategy_names for s in range(cfg.shuffles)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    rows = [r for r, _ in results]
    aggs = aggregate(rows)
    write_results(out / "results.csv", RESULTS_SCHEMA, cfg, rows + aggs)
    _write_curves(out / "curves.csv", jobs, results)
    return rows, aggs


def _write_curves(path, jobs, results):
    curves = {}
    for (_, _, name, stream, _), (_, succ) in zip(jobs, results):
        if succ:
            curves.setdefault((name, stream), []).append(np.cumsum(succ) / np.arange(1, len(succ) + 1))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "stream", "position", "running_SR"])
        for (name, stream), runs in curves.items():
            mean = 100.0 * np.mean(runs, axis=0)
            for i, v in enumerate(mean):
                w.writerow([name, stream, i + 1, repr(float(v))])


FORGETTING_CONDITIONS = ("x->x", "x->v", "v->x", "v->v")
FORGETTING_COLUMNS = ("condition", "adapt_unseen", "adapt_seen", *METRICS, *(m + "_std" for m in METRICS), "shuffles")


def cmd_forgetting(cfg: RunConfig):
    """Adapt (or not) on the unseen stream, then evaluate on the seen stream.

    ``v->x`` evaluates the seen stream frozen at the post-unseen parameters;
    ``v->v`` keeps the same session adapting across both streams.
    """
    params = _load_params(cfg)
    unseen = build_stream(cfg, "unseen")
    seen = build_stream(cfg, "seen")
    adapt = cfg.strategy(cfg.forgetting_strategy)
    per = {c: [] for c in FORGETTING_CONDITIONS}
    for s in range(cfg.shuffles):
        u = [unseen[i] for i in shuffle_order(cfg, s, len(unseen))]
        v = [seen[i] for i in shuffle_order(cfg, s, len(seen))]
        per["x->x"].append(navsim.evaluate(run_cell(params, Strategy.no_adapt(), v)[0]))
        per["x->v"].append(navsim.evaluate(run_cell(params, adapt, v)[0]))
        session = AdaptSession(params, adapt)
        navsim.run_stream(session, u)
        theta = session.theta.copy()
        per["v->x"].append(navsim.evaluate(run_cell(params, Strategy.no_adapt(), v, theta=theta)[0]))
        per["v->v"].append(navsim.evaluate(navsim.run_stream(session, v)))
    rows = []
    for c in FORGETTING_CONDITIONS:
        row = {"condition": c, "adapt_unseen": c[0] == "v", "adapt_seen": c[-1] == "v", "shuffles": cfg.shuffles}
        for m in METRICS:
            vals = np.array([getattr(x, m) for x in per[c]])
            row[m], row[m + "_std"] = float(vals.mean()), float(vals.std())
        rows.append(row)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_results(out / "forgetting.csv", FORGETTING_SCHEMA, cfg, rows, FORGETTING_COLUMNS,
                  {"strategy": adapt.name})
    return rows


BEST = {"SR": max, "OSR": max, "SPL": max, "NE": min}


def cmd_compare(paths, out_csv=None):
    """Merge results files into one table sorted by (stream, strategy, shuffle).

    Returns ``(text, rows)``. The best aggregate value per metric and stream
    is marked with ``*`` in the text rendering and listed in a ``best``
    column of the CSV.
    """
    if not paths:
        raise DataValidityError("compare needs at least one results file")
    merged, seen_keys = [], {}
    for p in paths:
        header, rows = read_results(p)
        if header["schema"] != RESULTS_SCHEMA:
            raise SchemaError(f"{p}: schema {header['schema']!r}, expected {RESULTS_SCHEMA!r}")
        for r in rows:
            key = (r["strategy"], r["stream"], r["shuffle"])
            if key in seen_keys:
                raise DataValidityError(f"ambiguous duplicate row {key} in {seen_keys[key]} and {p}")
            seen_keys[key] = str(p)
            merged.append(r)

    def shuffle_key(s):
        return (1, 0) if s == "agg" else (0, int(s))

    merged.sort(key=lambda r: (r["stream"], r["strategy"], shuffle_key(r["shuffle"])))
    for r in merged:
        r["best"] = ""
    for stream in sorted({r["stream"] for r in merged}):
        aggs = [r for r in merged if r["stream"] == stream and r["shuffle"] == "agg"]
        for m, pick in BEST.items():
            vals = [float(r[m]) for r in aggs if r[m] not in ("", "nan")]
            if not vals:
                continue
            best = pick(vals)
            for r in aggs:
                if r[m] not in ("", "nan") and float(r[m]) == best:
                    r["best"] = ";".join(filter(None, [r["best"], m]))
    columns = ["strategy", "stream", "shuffle", *METRICS, "time_ms", "best"]
    lines = [f"{'strategy':<16}{'stream':<8}{'shuffle':<8}" + "".join(f"{m:>10}" for m in METRICS) + f"{'time_ms':>10}"]
    for r in merged:
        cells = []
        for m in METRICS:
            v = r[m]
            txt = "nan" if v in ("", "nan") else f"{float(v):.2f}"
            cells.append(f"{txt + ('*' if m in r['best'].split(';') else ''):>10}")
        t = r.get("time_ms", "")
        lines.append(f"{r['strategy']:<16}{r['stream']:<8}{r['shuffle']:<8}" + "".join(cells)
                     + f"{'nan' if t in ('', 'nan') else f'{float(t):.2f}':>10}")
    text = "\n".join(lines) + "\n"
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in merged:
                w.writerow([r.get(c, "") for c in columns])
    return text, merged
