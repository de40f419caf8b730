"""Command-line harness: ``run``, ``sweep``, ``audit`` and ``selfcheck``.

Exit codes: 0 ok, 1 self-check failure, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .checks import run_suite
from .confidence import BonusParams
from .mnl_model import DomainError
from .policy import Variant, default_lambda
from .simulator import TRACE_FIELDS, RunSettings, SweepPoint, coverage_audit, run_batch

log = logging.getLogger("mnlucb")

EXIT_OK, EXIT_SELFCHECK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3
AXES = ("K", "kappa", "variant")
DEFAULT_SWEEPS = {"K": [1, 2, 3], "kappa": [30, 60, 100], "variant": ["tight", "loose"]}
FIT_FAILURE_WARN = 0.01
SELFCHECK_BUDGET_S = 60.0
AGGREGATE_FIELDS = ("variant", "sweep_key", "t", "mean_R", "std_R", "n")


class ConfigError(Exception):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


@dataclass
class RunConfig:
    d: int = 2
    K: int = 2
    n_arms: int = 20
    T: int = 1000
    delta: float = 0.01
    n_realizations: int = 20
    seed: int = 0
    out: str = "runs/default"
    variant: str = "tight"
    lam: float | None = None
    S_target: float | None = None
    kappa_target: float | None = None
    tol: float = 1e-8
    max_iter: int = 100
    refit_period: int = 1
    track_coverage: bool = True
    sweep: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_SWEEPS.items()})

    # config key -> attribute; "lambda" is a Python keyword
    KEYS = {"lambda": "lam"}

    @classmethod
    def from_mapping(cls, data, lines=None, source="<config>") -> RunConfig:
        lines = lines or {}
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("top level must be a mapping of field: value", 1, source)
        names = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            attr = cls.KEYS.get(key, key)
            if attr not in names or key == "lam":
                raise ConfigError(f"unknown key '{key}'", lines.get(key), source)
            kwargs[attr] = value
        cfg = cls()
        for attr, value in kwargs.items():
            setattr(cfg, attr, value)
        cfg.validate(lines, source)
        return cfg

    def to_mapping(self) -> dict:
        out = {}
        for f in fields(self):
            key = next((k for k, v in self.KEYS.items() if v == f.name), f.name)
            out[key] = getattr(self, f.name)
        out["sweep"] = {k: list(v) for k, v in self.sweep.items()}
        return out

    def validate(self, lines=None, source="<config>") -> None:
        lines = lines or {}

        def fail(key, msg):
            raise ConfigError(f"{key}: {msg}", lines.get(key), source)

        def integer(key, attr, lo):
            v = getattr(self, attr)
            if isinstance(v, bool) or not isinstance(v, int):
                fail(key, f"must be an integer, got {v!r}")
            if v < lo:
                fail(key, f"must be >= {lo}, got {v}")

        def real(key, attr, optional=False):
            v = getattr(self, attr)
            if v is None and optional:
                return
            if isinstance(v, str):
                # YAML 1.1 reads exponent forms like 1e-8 as strings
                try:
                    v = float(v)
                except ValueError:
                    pass
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                fail(key, f"must be a finite number, got {v!r}")
            if v <= 0:
                fail(key, f"must be > 0, got {v}")
            setattr(self, attr, float(v))

        for key in ("d", "K", "n_arms", "T", "n_realizations", "max_iter", "refit_period"):
            integer(key, key, 1)
        integer("seed", "seed", 0)
        real("delta", "delta")
        if not self.delta < 1:
            fail("delta", f"must lie in (0, 1), got {self.delta}")
        real("lambda", "lam", optional=True)
        real("S_target", "S_target", optional=True)
        real("kappa_target", "kappa_target", optional=True)
        real("tol", "tol")
        if not isinstance(self.out, str) or not self.out:
            fail("out", "must be a nonempty path string")
        if not isinstance(self.track_coverage, bool):
            fail("track_coverage", f"must be true or false, got {self.track_coverage!r}")
        if self.variant not in {v.value for v in Variant}:
            fail("variant", f"must be one of {[v.value for v in Variant]}, got {self.variant!r}")
        if self.kappa_target is not None and self.kappa_target < (1 + self.K) ** 2:
            fail("kappa_target", f"must be >= (1+K)^2 = {(1 + self.K) ** 2}, got {self.kappa_target}")
        self._validate_sweep(fail)

    def _validate_sweep(self, fail) -> None:
        if not isinstance(self.sweep, dict):
            fail("sweep", "must be a mapping from axis to a list of values")
        for axis, values in self.sweep.items():
            if axis not in AXES:
                fail("sweep", f"unknown axis '{axis}', expected one of {list(AXES)}")
            if not isinstance(values, list) or not values:
                fail("sweep", f"{axis} must be a nonempty list")
            for v in values:
                if axis == "K" and (isinstance(v, bool) or not isinstance(v, int) or v < 1):
                    fail("sweep", f"K values must be positive integers, got {v!r}")
                if axis == "K" and self.kappa_target is not None and self.kappa_target < (1 + v) ** 2:
                    fail("sweep", f"kappa_target {self.kappa_target} is below (1+K)^2 for K={v}")
                if axis == "kappa" and (isinstance(v, bool) or not isinstance(v, (int, float)) or v < (1 + self.K) ** 2):
                    fail("sweep", f"kappa values must be numbers >= (1+K)^2 = {(1 + self.K) ** 2}, got {v!r}")
                if axis == "variant" and v not in {x.value for x in Variant}:
                    fail("sweep", f"unknown variant {v!r}")

    def settings(self, variant=None) -> RunSettings:
        return RunSettings(
            variant=Variant(variant or self.variant),
            T=self.T,
            delta=self.delta,
            lam=self.lam,
            tol=self.tol,
            max_iter=self.max_iter,
            refit_period=self.refit_period,
        )

    def points(self, axis: str | None) -> list[SweepPoint]:
        base = SweepPoint("base", self.d, self.K, self.n_arms, self.settings(), self.S_target, self.kappa_target)
        if axis is None:
            return [base]
        values = self.sweep.get(axis, DEFAULT_SWEEPS[axis])
        if axis == "K":
            return [replace(base, key=f"K={v}", K=int(v)) for v in values]
        if axis == "kappa":
            return [replace(base, key=f"kappa={v:g}", kappa_target=float(v)) for v in values]
        return [replace(base, key=f"variant={v}", settings=self.settings(v)) for v in values]


def _key_lines(text: str) -> dict:
    """Line number (1-based) of each top-level key."""
    node = yaml.compose(text)
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value}


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config ({exc.strerror})", None, str(path)) from exc
    try:
        data = yaml.safe_load(text)
        lines = _key_lines(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None, str(path)) from exc
    return RunConfig.from_mapping(data, lines, str(path))


def atomic_write(path: Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over the target."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trace_csv(traces) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for tr in traces:
        w.writerows(tr.rows())
    return buf.getvalue()


def aggregate_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_FIELDS)
    for r in rows:
        w.writerow([r["variant"], r["sweep_key"], r["t"], f"{r['mean_R']:.12g}", f"{r['std_R']:.12g}", r["n"]])
    return buf.getvalue()


def _resolved_choices(cfg: RunConfig, points) -> dict:
    lam = {p.key: (cfg.lam if cfg.lam is not None else default_lambda(p.K, p.d, cfg.T)) for p in points}
    return {
        "lambda": lam,
        "lambda_rule": "given" if cfg.lam is not None else "K*d*log(T)",
        "kappa_in_bonus": "closed-form upper bound",
        "R": "norm of rho",
        "L": "closed-form upper bound",
        "tie_break": "lowest index",
        "mle_solver": "damped Newton, Armijo backtracking",
        "projection": "projected finite-difference gradient from the radial rescaling",
    }


def _warnings(traces, T) -> list[str]:
    out = []
    for tr in traces:
        frac = tr.fit_failures / T
        if frac > FIT_FAILURE_WARN:
            out.append(f"{tr.variant}/{tr.sweep_key}/seed {tr.seed}: fit did not converge on {frac:.1%} of rounds")
        if not tr.potential_check()[2]:
            out.append(f"{tr.variant}/{tr.sweep_key}/seed {tr.seed}: elliptical potential inequality violated")
    return out


def execute(cfg: RunConfig, axis: str | None, jobs: int, command: str) -> Path:
    points = cfg.points(axis)
    for p in points:
        # fail before any compute if a derived parameter set is invalid
        BonusParams(R=1.0, L=0.5, kappa=1.0, S=1.0, delta=cfg.delta, lam=cfg.lam or 1.0, d=p.d, K=p.K)
    log.info("running %d sweep point(s) x %d realization(s), T=%d", len(points), cfg.n_realizations, cfg.T)
    traces, agg = run_batch(points, cfg.n_realizations, cfg.seed, jobs, cfg.track_coverage)
    out = Path(cfg.out)
    manifest = {
        "tool": "mnlucb",
        "version": __version__,
        "command": command,
        "axis": axis,
        "config": cfg.to_mapping(),
        "choices": _resolved_choices(cfg, points),
        "warnings": _warnings(traces, cfg.T),
        "episodes": [tr.summary() for tr in traces],
        "files": {"trace": "trace.csv", "aggregate": "aggregate.csv"},
    }
    texts = {
        "trace.csv": trace_csv(traces),
        "aggregate.csv": aggregate_csv(agg),
        "manifest.json": json.dumps(manifest, indent=2, sort_keys=False) + "\n",
    }
    for name, text in texts.items():
        atomic_write(out / name, text)
    for w in manifest["warnings"]:
        log.warning(w)
    return out


def read_trace(path: Path):
    """Parse a trace CSV; raises ValueError on a malformed file."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_FIELDS:
            raise ValueError(f"unexpected header {header}")
        rows = []
        for n, row in enumerate(reader, start=2):
            if len(row) != len(TRACE_FIELDS):
                raise ValueError(f"line {n}: expected {len(TRACE_FIELDS)} fields, got {len(row)}")
            try:
                rows.append(
                    {
                        "line": n,
                        "variant": row[0],
                        "sweep_key": row[1],
                        "seed": int(row[2]),
                        "t": int(row[3]),
                        "chosen_index": int(row[4]),
                        "r_t": float(row[5]),
                        "R_t": float(row[6]),
                        "bonus": float(row[7]),
                        "covered": int(row[8]),
                        "grad_norm": float(row[9]),
                    }
                )
            except ValueError as exc:
                raise ValueError(f"line {n}: {exc}") from exc
    if not rows:
        raise ValueError("trace has no rows")
    return rows


def audit_rows(rows):
    """Group rows into episodes and re-check per-row invariants.

    Returns ``(episodes, problems)`` where ``episodes`` maps
    (variant, sweep_key, seed) to its rows.
    """
    episodes: dict[tuple, list] = {}
    for r in rows:
        episodes.setdefault((r["variant"], r["sweep_key"], r["seed"]), []).append(r)
    problems = []
    for key, ep in episodes.items():
        prev = 0.0
        for i, r in enumerate(ep, start=1):
            if r["t"] != i:
                problems.append(f"line {r['line']}: round {r['t']} out of sequence (expected {i})")
            if r["r_t"] < 0:
                problems.append(f"line {r['line']}: negative r_t = {r['r_t']:g}")
            if r["R_t"] < prev - 1e-9:
                problems.append(f"line {r['line']}: R_t decreased from {prev:g} to {r['R_t']:g}")
            if r["covered"] not in (0, 1):
                problems.append(f"line {r['line']}: covered flag {r['covered']} is not 0/1")
            prev = r["R_t"]
    return episodes, problems


class _Flags:
    def __init__(self, flags):
        self.covered = np.asarray(flags, dtype=bool)


def cmd_audit(directory) -> int:
    d = Path(directory)
    trace = d / "trace.csv"
    if not trace.is_file():
        print(f"error: no trace.csv in {d}", file=sys.stderr)
        return EXIT_DATA
    try:
        rows = read_trace(trace)
    except (ValueError, OSError, csv.Error) as exc:
        print(f"error: corrupt trace {trace}: {exc}", file=sys.stderr)
        return EXIT_DATA
    manifest = None
    if (d / "manifest.json").is_file():
        try:
            manifest = json.loads((d / "manifest.json").read_text())
        except json.JSONDecodeError as exc:
            print(f"error: corrupt manifest: {exc}", file=sys.stderr)
            return EXIT_DATA

    episodes, problems = audit_rows(rows)
    groups: dict[tuple, list] = {}
    for (variant, key, _), ep in episodes.items():
        groups.setdefault((variant, key), []).append(_Flags([r["covered"] for r in ep]))
    delta = manifest["config"]["delta"] if manifest else None
    tracked = manifest["config"].get("track_coverage", True) if manifest else True
    print(f"episodes: {len(episodes)}  rows: {len(rows)}")
    if not tracked:
        print("coverage was not tracked for this run")
    for (variant, key), flags in groups.items() if tracked else ():
        rate, _ = coverage_audit(flags)
        line = f"coverage {variant}/{key}: {rate:.3f} over {len(flags)} episodes"
        if delta is not None:
            floor = 1 - delta - 3 * math.sqrt(delta * (1 - delta) / len(flags))
            line += f" (target >= {floor:.3f}: {'ok' if rate >= floor else 'below'})"
        print(line)
    if manifest:
        eps = manifest.get("episodes", [])
        bad_pot = sum(not e["potential_ok"] for e in eps)
        print(f"elliptical potential: {len(eps) - bad_pot}/{len(eps)} traces satisfy the inequality")
        print(f"UCB dominance violations: {sum(e['ucb_violations'] for e in eps)}")
        print(f"regret-bound violations: {sum(e['bound_violations'] for e in eps)}")
    else:
        print("no manifest.json: potential and dominance checks skipped")
    if problems:
        print(f"{len(problems)} invalid row(s):")
        for p in problems:
            print(f"  {p}")
        return EXIT_DATA
    return EXIT_OK


def cmd_selfcheck() -> int:
    results, elapsed = run_suite()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"elapsed {elapsed:.1f}s")
    if elapsed > SELFCHECK_BUDGET_S:
        print(f"warning: self-check exceeded the {SELFCHECK_BUDGET_S:.0f}s budget")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_SELFCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mnlucb", description="MNL-UCB simulation harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config")
        sp.add_argument("--seed", type=int, help="override the config's base seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes (output is identical for any value)")

    common(sub.add_parser("run", help="run one configuration"))
    sw = sub.add_parser("sweep", help="run the configuration across one axis")
    common(sw)
    sw.add_argument("--axis", required=True, choices=AXES)
    au = sub.add_parser("audit", help="re-check saved traces")
    au.add_argument("dir")
    sub.add_parser("selfcheck", help="run the numerical property suite")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "selfcheck":
        return cmd_selfcheck()
    if args.command == "audit":
        return cmd_audit(args.dir)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = args.out
        cfg.validate(source="command line")
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1", None, "command line")
        axis = getattr(args, "axis", None)
        out = execute(cfg, axis, args.jobs, args.command)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {out}/trace.csv, {out}/aggregate.csv, {out}/manifest.json")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
