"""Command line entry point: ``volterra-mlmc <subcommand> [flags]``.

Each run writes plot-ready CSV tables and a ``manifest.json`` into
``<out>/<subcommand>/<tag>/``, where the tag is a hash of the configuration.
Exit status is 0 on success, 2 for invalid input and 3 for failures at run
time.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    clt_experiment,
    limit_dist_experiment,
    rate_regression,
    strong_errors,
    verify_kernel_lemmas,
    verify_limit_theorems,
)
from .kernel import KernelParams, g_m_h, limit_noise_coeff, mu_sq_integral, remark_constants
from .mlmc import allocate_levels, estimate_level, integer_log, mlmc_estimate, variance_report
from .models import FUNCTIONALS, MODELS, build_functional, build_model
from .noise import family_factor
from .scheme import MODES, VARIANT

SUBCOMMANDS = ("rate", "variance", "mlmc", "clt", "limit-dist", "verify", "constants")
OUT_ENV = "VOLTERRA_MLMC_OUT"

DEFAULT_PROBES = ((0.3, 0.7), (0.1, 0.9))
DEFAULT_T_LIST = (1.0, 0.7)

# Per-subcommand defaults layered under config-file values and flags.
# Trig parameters with a strong state-dependent diffusion, so that the
# correction levels dominate the variance of Q_n at desk-scale n.
CLT_TRIG_PARAMS = "beta0=0.4,s0=0.25,s1=1.3,X0=1.3"

DEFAULTS = {
    "rate": {"n_list": (8, 16, 32, 64, 128), "paths": 2000, "H": 0.25},
    "variance": {"n": 32, "paths": 10000},
    "mlmc": {"n": 16, "reps": 1},
    "clt": {"n_list": (16,), "reps": 500, "paths": 10000, "H": 0.5, "model_params": CLT_TRIG_PARAMS},
    "limit-dist": {"n": 128, "paths": 5000, "H": 0.5},
    "verify": {"n_list": tuple(2**k for k in range(3, 15)), "H": 0.25},
    "constants": {},
}


class ValidationError(ValueError):
    pass


def _parse_params(text: str) -> dict:
    """'a=1, b=2' -> {'a': 1.0, 'b': 2.0}; 'X0' may hold a colon-separated vector."""
    out = {}
    for item in filter(None, (p.strip() for p in (text or "").split(","))):
        key, sep, val = item.partition("=")
        if not sep:
            raise ValidationError(f"bad parameter {item!r}; expected key=value")
        key = key.strip()
        if key in ("X0", "v"):
            out[key] = tuple(float(x) for x in val.split(":"))
        else:
            out[key] = float(val)
    return out


def _format_params(params: dict) -> str:
    parts = []
    for key in sorted(params):
        val = params[key]
        if isinstance(val, (tuple, list)):
            parts.append(f"{key}=" + ":".join(_fmt(float(x)) for x in val))
        else:
            parts.append(f"{key}={_fmt(float(val))}")
    return ",".join(parts)


def _parse_ints(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).replace(" ", "").split(",") if x)


@dataclass
class ExperimentConfig:
    subcommand: str
    model: str = "trig"
    model_params: str = ""
    f: str = "linear"
    f_params: str = ""
    H: float = 0.5
    m: int = 2
    n: int = 16
    n_list: tuple = (8, 16, 32, 64, 128)
    alpha: float = 1.0
    T: float = 1.0
    mode: str = VARIANT
    paths: int = 1000
    reps: int = 200
    seed: int = 20240601
    workers: int = 1
    out: str = ""

    # fields that do not change results and stay out of the tag
    _RUNTIME = ("workers", "out")

    def canonical(self) -> dict:
        d = dataclasses.asdict(self)
        d["n_list"] = ",".join(str(x) for x in self.n_list)
        d["model_params"] = _format_params(_parse_params(self.model_params))
        d["f_params"] = _format_params(_parse_params(self.f_params))
        return d

    def tag(self) -> str:
        d = {k: v for k, v in self.canonical().items() if k not in self._RUNTIME}
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        d = self.canonical()
        sub = d.pop("subcommand")
        cp[sub] = {k: _ini_value(v) for k, v in d.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, subcommand: str | None = None) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_string(text)
        if subcommand is None:
            subs = [s for s in cp.sections() if s in SUBCOMMANDS]
            if len(subs) != 1:
                raise ValidationError("config must name exactly one subcommand section")
            subcommand = subs[0]
        values = {}
        for section in ("common", subcommand):
            if cp.has_section(section):
                values.update(cp[section])
        return cls.from_mapping(subcommand, values)

    @classmethod
    def from_mapping(cls, subcommand: str, values: dict) -> "ExperimentConfig":
        if subcommand not in SUBCOMMANDS:
            raise ValidationError(f"unknown subcommand {subcommand!r}")
        kwargs = {"subcommand": subcommand}
        kwargs.update(DEFAULTS[subcommand])
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if raw is None:
                continue
            if key not in types or key == "subcommand":
                raise ValidationError(f"unknown config key {key!r}")
            try:
                kwargs[key] = _coerce(key, raw)
            except ValueError as exc:
                raise ValidationError(f"bad value for {key}: {raw!r}") from exc
        # The clt preset only applies to the trig model.
        if values.get("model_params") is None and kwargs.get("model", "trig") != "trig":
            kwargs["model_params"] = ""
        return cls(**kwargs)


def _ini_value(v) -> str:
    if isinstance(v, float):
        return _fmt(v)
    return str(v)


_INT_FIELDS = {"m", "n", "paths", "reps", "seed", "workers"}
_FLOAT_FIELDS = {"H", "alpha", "T"}


def _coerce(key, raw):
    if key in _INT_FIELDS:
        if isinstance(raw, str):
            try:
                return int(raw)
            except ValueError:
                pass
        val = float(raw) if isinstance(raw, str) else raw
        if isinstance(val, float):
            if not val.is_integer():
                raise ValueError("not an integer")
            val = int(val)
        return int(val)
    if key in _FLOAT_FIELDS:
        return float(raw)
    if key == "n_list":
        return _parse_ints(raw)
    return str(raw)


def validate(cfg: ExperimentConfig) -> None:
    """Reject any configuration outside the domains of the modules it feeds."""
    def fail(msg):
        raise ValidationError(msg)

    sub = cfg.subcommand
    if not 0 < cfg.H <= 0.5:
        fail("H must lie in (0, 1/2]")
    if cfg.m < 1:
        fail("m must be >= 1")
    if cfg.workers < 1:
        fail("workers must be >= 1")
    if not 0 <= cfg.seed < 2**64:
        fail("seed must be a 64-bit unsigned integer")
    if cfg.mode not in MODES:
        fail(f"mode must be one of {MODES}")
    if cfg.model not in MODELS:
        fail(f"model must be one of {sorted(MODELS)}")
    if cfg.f not in FUNCTIONALS:
        fail(f"f must be one of {sorted(FUNCTIONALS)}")
    if not cfg.T > 0:
        fail("T must be positive")
    try:
        model = make_model(cfg)
        make_functional(cfg, model.d)
    except (TypeError, ValueError) as exc:
        fail(f"invalid model or functional parameters: {exc}")
    if sub in ("rate", "variance", "mlmc", "clt", "limit-dist") and cfg.paths < 1:
        fail("paths must be >= 1")
    if sub in ("rate", "verify", "clt"):
        if not cfg.n_list or any(n < 1 for n in cfg.n_list):
            fail("n_list must hold positive integers")
        if list(cfg.n_list) != sorted(set(cfg.n_list)):
            fail("n_list must be strictly increasing")
    if sub == "rate" and len(cfg.n_list) < 3:
        fail("rate needs at least 3 resolutions")
    if sub in ("variance", "mlmc", "clt"):
        if cfg.m < 2:
            fail("m must be >= 2 for multilevel runs")
        if not 0.5 <= cfg.alpha <= 1.0:
            fail("alpha must lie in [1/2, 1]")
        for n in (cfg.n_list if sub == "clt" else (cfg.n,)):
            try:
                L = integer_log(n, cfg.m)
            except ValueError as exc:
                fail(str(exc))
            if L < 1:
                fail("n must be at least m")
        if abs(cfg.T - round(cfg.T)) > 1e-12:
            fail("multilevel runs need an integer horizon T")
    if sub == "variance" and integer_log(cfg.n, cfg.m) < 3:
        fail("variance needs at least 3 levels")
    if sub in ("mlmc", "clt") and cfg.reps < 1:
        fail("reps must be >= 1")
    if sub == "clt" and cfg.reps < 200:
        fail("clt needs at least 200 replications")
    if sub == "limit-dist" and cfg.paths < 1000:
        fail("limit-dist needs at least 1000 samples")
    if sub in ("rate", "limit-dist", "mlmc", "variance", "clt"):
        for n in (cfg.n_list if sub in ("rate", "clt") else (cfg.n,)):
            if abs(n * cfg.T - round(n * cfg.T)) > 1e-9:
                fail("n * T must be an integer")


def make_model(cfg: ExperimentConfig):
    params = _parse_params(cfg.model_params)
    params.setdefault("H", cfg.H)
    params.setdefault("T", cfg.T)
    params["H"] = cfg.H
    params["T"] = cfg.T
    return build_model(cfg.model, **params)


def make_functional(cfg: ExperimentConfig, d: int):
    return build_functional(cfg.f, d=d, **_parse_params(cfg.f_params))


# ---------------------------------------------------------------- output


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if x == 0.0:
            return "0"
        return f"{x:.17g}"
    return str(x)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def emit_csv(records, path, header=None) -> Path:
    """Write dict records as CSV with reals at 17 significant digits; the header is always written."""
    records = list(records)
    if header is None:
        if not records:
            raise ValueError("header is required for an empty table")
        header = list(records[0].keys())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for rec in records:
        if set(rec) != set(header):
            raise ValueError("records must share the header's fields")
        writer.writerow([_fmt(rec[k]) for k in header])
    path = Path(path)
    _atomic_write(path, buf.getvalue().encode("utf-8"))
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(outdir: Path, cfg: ExperimentConfig, files, wall: float, extra: dict) -> Path:
    manifest = {
        "tool": "volterra-mlmc",
        "version": __version__,
        "config": cfg.canonical(),
        "tag": cfg.tag(),
        "wall_time_s": wall,
        "files": {p.name: _sha256(p) for p in sorted(files, key=lambda p: p.name)},
    }
    manifest.update(extra)
    path = outdir / "manifest.json"
    _atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n").encode())
    return path


# ---------------------------------------------------------------- runners


def _run_constants(cfg, outdir):
    a, g, c = remark_constants(cfg.m, cfg.H)
    p = KernelParams(cfg.H)
    files = [
        emit_csv([{"H": cfg.H, "m": cfg.m, "int_g": a, "g_m": g, "int_g_scaled": c}],
                 outdir / "constants.csv"),
        emit_csv([{"H": cfg.H, "m": cfg.m, "gamma_half": p.gamma_half, "G": p.G,
                   "mu_sq_integral": mu_sq_integral(p), "limit_noise_coeff": limit_noise_coeff(cfg.m, cfg.H)}],
                 outdir / "kernel.csv"),
    ]
    return files, {}


def _run_rate(cfg, outdir):
    model = make_model(cfg)
    pts = strong_errors(model, cfg.n_list, cfg.paths, cfg.seed, mode=cfg.mode)
    fit = rate_regression(pts)
    files = [
        emit_csv([{"n": n, "error": e} for n, e in pts], outdir / "rate.csv", ["n", "error"]),
        emit_csv([{"H": cfg.H, "slope": fit.slope, "intercept": fit.intercept,
                   "residual": fit.residual, "target_slope": -cfg.H}], outdir / "fit.csv"),
    ]
    ref = 8 * max(cfg.n_list)
    cost = cfg.paths * (ref + sum(cfg.n_list))
    return files, {"cost_units": {"rate": cost}, "jitter": _jitter(cfg, ref)}


def _jitter(cfg, N) -> float:
    if cfg.mode != VARIANT:
        return 0.0
    return 0.0 if N == 0 else float(family_factor(cfg.H, 1.0 / N, int(round(N * cfg.T)))[1])


def _level_records(levels, rep=None):
    out = []
    for lv in levels:
        rec = {"level": lv.level, "samples": lv.samples, "mean": lv.mean, "variance": lv.variance, "cost": lv.cost}
        if rep is not None:
            rec = {"replication": rep, **rec}
        out.append(rec)
    return out


def _run_variance(cfg, outdir):
    model = make_model(cfg)
    f = make_functional(cfg, model.d)
    L = integer_log(cfg.n, cfg.m)
    levels = [estimate_level(model, f, l, cfg.m, cfg.paths, cfg.mode, cfg.seed, workers=cfg.workers)
              for l in range(L + 1)]
    rep = variance_report(levels, cfg.H, cfg.m)
    files = [
        emit_csv(_level_records(levels), outdir / "levels.csv"),
        emit_csv([{"H": cfg.H, "m": cfg.m, "slope": rep.slope, "predicted_slope": rep.predicted_slope,
                   "var_Q": rep.var_Q}], outdir / "fit.csv"),
    ]
    return files, {"cost_units": {"levels": sum(lv.cost for lv in levels)}}


def _run_mlmc(cfg, outdir):
    model = make_model(cfg)
    f = make_functional(cfg, model.d)
    alloc = allocate_levels(cfg.n, cfg.m, cfg.alpha, cfg.H, T=cfg.T)
    est_rows, level_rows = [], []
    total, factor = 0, 0
    for r in range(cfg.reps):
        est = mlmc_estimate(model, f, cfg.n, cfg.m, cfg.alpha, cfg.mode, cfg.seed, replication=r + 1,
                            workers=cfg.workers)
        est_rows.append({"replication": r + 1, "Q": est.Q, "total_cost": est.total_cost,
                         "factor_cost": est.factor_cost})
        level_rows += _level_records(est.levels, r + 1)
        total += est.total_cost
        factor = est.factor_cost
    files = [
        emit_csv(est_rows, outdir / "estimates.csv"),
        emit_csv(level_rows, outdir / "levels.csv"),
        emit_csv([{"level": l, "samples": alloc.samples(l)} for l in range(alloc.L + 1)],
                 outdir / "allocation.csv"),
    ]
    return files, {"cost_units": {"levels": total, "factor": factor}, "jitter": _jitter(cfg, cfg.n)}


def _run_clt(cfg, outdir):
    model = make_model(cfg)
    f = make_functional(cfg, model.d)
    res = clt_experiment(model, f, cfg.n_list, cfg.m, cfg.alpha, cfg.reps, cfg.seed,
                         u_samples=cfg.paths, mode=cfg.mode, workers=cfg.workers)
    rows, samples = [], []
    for r in res:
        rep = r["report"]
        rows.append({
            "n": r["n"], "alpha": cfg.alpha, "reps": cfg.reps, "mean_Q": r["mean_Q"],
            "variance": rep.variance, "skewness": rep.skewness, "excess_kurtosis": rep.excess_kurtosis,
            "ks": rep.ks, "ref_var": r["ref_var"], "var_ratio": r["var_ratio"], "ef_proxy": r["ef_proxy"],
            "eps": r["eps"], "eps_scaled_half": r["scaled_eps"][0.5],
            "eps_scaled_H": r["scaled_eps"][cfg.H + 0.5], "eps_scaled_one": r["scaled_eps"][1.0],
        })
        samples += [{"n": r["n"], "replication": i + 1, "Q": q} for i, q in enumerate(r["Q"])]
    files = [emit_csv(rows, outdir / "clt.csv"), emit_csv(samples, outdir / "replications.csv",
                                                          ["n", "replication", "Q"])]
    return files, {"centering": "replication mean"}


def _run_limit_dist(cfg, outdir):
    model = make_model(cfg)
    res = limit_dist_experiment(model, cfg.n, cfg.m, cfg.paths, cfg.seed, workers=cfg.workers, mode=cfg.mode)
    files = [emit_csv(res["rows"], outdir / "limit_dist.csv")]
    return files, {"n_ref": res["n_ref"], "n_ref_bias_order": res["n_ref"] ** (-cfg.H)}


def _run_verify(cfg, outdir):
    rows = verify_kernel_lemmas(cfg.H, cfg.m, cfg.n_list, DEFAULT_PROBES)
    values, summary = [], []
    for r in rows:
        for n, val in zip(cfg.n_list, r["values"]):
            values.append({"H": cfg.H, "m": cfg.m, "v": r["v"], "s": r["s"], "item": r["item"], "n": n, "value": val})
        summary.append({"H": cfg.H, "m": cfg.m, "v": r["v"], "s": r["s"], "item": r["item"], "bound": r["bound"],
                        "bounded": r["bounded"], "decayed": r["decayed"], "passed": r["passed"]})
    limits = []
    for t in DEFAULT_T_LIST:
        for k in ("constant", "cosine"):
            for r in verify_limit_theorems(cfg.H, cfg.m, t, cfg.n_list, k):
                limits.append({"H": cfg.H, "m": cfg.m, "t": t, "k": k, **r})
    files = [
        emit_csv(values, outdir / "lemmas.csv", ["H", "m", "v", "s", "item", "n", "value"]),
        emit_csv(summary, outdir / "lemma_summary.csv",
                 ["H", "m", "v", "s", "item", "bound", "bounded", "decayed", "passed"]),
        emit_csv(limits, outdir / "limits.csv",
                 ["H", "m", "t", "k", "n", "first", "first_target", "first_dev", "second", "second_target",
                  "second_dev"]),
    ]
    return files, {}


RUNNERS = {
    "constants": _run_constants,
    "rate": _run_rate,
    "variance": _run_variance,
    "mlmc": _run_mlmc,
    "clt": _run_clt,
    "limit-dist": _run_limit_dist,
    "verify": _run_verify,
}


# ---------------------------------------------------------------- argv


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="volterra-mlmc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = subs.add_parser(name)
        p.add_argument("--config", help="INI file with [common] and [%s] sections" % name)
        p.add_argument("--H", type=float)
        p.add_argument("--m", type=int)
        p.add_argument("--n", type=int)
        p.add_argument("--n-list", dest="n_list", help="comma-separated resolutions")
        p.add_argument("--alpha", type=float)
        p.add_argument("--T", type=float)
        p.add_argument("--model", choices=sorted(MODELS))
        p.add_argument("--model-params", dest="model_params", help="e.g. beta0=0.2,s0=0.3,X0=1.5")
        p.add_argument("--f", choices=sorted(FUNCTIONALS))
        p.add_argument("--f-params", dest="f_params")
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--paths", type=int)
        p.add_argument("--reps", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    return parser


def config_from_args(args) -> ExperimentConfig:
    values = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ValidationError(f"cannot read config: {exc}") from exc
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ValidationError(f"bad config file: {exc}") from exc
        for section in ("common", args.subcommand):
            if cp.has_section(section):
                values.update(cp[section])
    for key in ("H", "m", "n", "n_list", "alpha", "T", "model", "model_params", "f", "f_params",
                "mode", "paths", "reps", "seed", "workers", "out"):
        val = getattr(args, key, None)
        if val is not None:
            values[key] = val
    return ExperimentConfig.from_mapping(args.subcommand, values)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = config_from_args(args)
        validate(cfg)
    except ValidationError as exc:
        print(f"volterra-mlmc: invalid configuration: {exc}", file=sys.stderr)
        return 2
    root = Path(cfg.out or os.environ.get(OUT_ENV) or "runs")
    outdir = root / cfg.subcommand / cfg.tag()
    start = time.perf_counter()
    try:
        files, extra = RUNNERS[cfg.subcommand](cfg, outdir)
        write_manifest(outdir, cfg, files, time.perf_counter() - start, extra)
    except Exception as exc:  # noqa: BLE001
        print(f"volterra-mlmc: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    print(outdir)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
