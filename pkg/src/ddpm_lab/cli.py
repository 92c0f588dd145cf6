"""Command-line entry point: schedule, sample, moments, fit, rates, verify and run <config.json>."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import estimators as est
from . import metrics as met
from . import tweedie as tw
from . import verify as ver
from .samplers import ReverseSamplerSpec, run_reverse
from .schedules import NoiseSchedule, ScheduleError, make_schedule
from .targets import AtomCloud, ContractError, Target, gaussian, load_target, standard_normal, target_from_dict

BUILTIN_TARGETS = {
    "default_mixture_1d": ver.default_mixture_1d,
    "rate_gaussian_2d": ver.rate_target,
    "two_atoms_1d": lambda: AtomCloud([0.5, 0.5], [[-1.0], [1.0]]),
    "standard_normal_1d": lambda: standard_normal(1),
    "standard_normal_2d": lambda: standard_normal(2),
    "gaussian_1d": lambda: gaussian([0.5], [[0.6]]),
}
TASKS = ("schedule", "sample", "moments", "rates", "verify")


def fmt(v) -> str:
    """Shortest round-trip decimal for floats; plain text otherwise."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if v is None else str(v)


def resolve_target(spec: Union[str, dict], base: Path | None = None) -> Target:
    if isinstance(spec, dict):
        return target_from_dict(spec)
    if spec in BUILTIN_TARGETS:
        return BUILTIN_TARGETS[spec]()
    path = Path(spec)
    if base is not None and not path.is_absolute():
        path = base / path
    if not path.exists():
        raise ContractError(f"target file {str(path)!r} not found and not a builtin ({', '.join(BUILTIN_TARGETS)})")
    return load_target(path)


# configuration -----------------------------------------------------------------------------------


class ScheduleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    name: Literal["constant", "li"] = "constant"
    c: float = Field(2.0, gt=0)
    delta: float | None = None

    @model_validator(mode="after")
    def _delta_range(self):
        if self.name == "li":
            if self.delta is None:
                raise ValueError("the li schedule needs delta")
            lo = math.exp(-self.c)
            if not lo < self.delta < 1.0:
                raise ValueError(f"delta must lie in (exp(-c), 1) = ({lo!r}, 1) so that the schedule stays below one; got {self.delta!r}")
        return self


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["regular", "accelerated"] = "regular"
    estimator: Literal["exact", "perturbed", "fitted"] = "exact"
    eps2: float = Field(0.0, ge=0)
    epsH2: float = Field(0.0, ge=0)
    perturbation: Literal["additive_gaussian", "systematic_bias"] = "systematic_bias"
    psd_floor: float = Field(1e-6, ge=0)
    stop_at: Literal[0, 1] = 0
    fit_basis: Literal["poly2", "responsibility", "linear", "constant"] = "poly2"
    fit_samples: int = Field(20000, ge=1)

    def to_spec(self) -> ReverseSamplerSpec:
        return ReverseSamplerSpec(**self.model_dump())


class MomentsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    t: int | None = None
    x: list[list[float]] = [[0.4]]


class OutputConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    dir: str = "ddpm_lab_out"
    svg: bool = False


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    target: Union[str, dict] = "default_mixture_1d"
    schedule: ScheduleConfig = ScheduleConfig()
    sampler: SamplerConfig = SamplerConfig()
    Ts: list[int] = list(ver.RATE_TS)
    seeds: list[int] = [0]
    n_samples: int = Field(1000, ge=1)
    tasks: list[Literal["schedule", "sample", "moments", "rates", "verify"]] = ["rates"]
    suites: list[Literal["rates", "tweedie", "oracles", "bounds", "all"]] = ["all"]
    quick: bool = False
    moments: MomentsConfig = MomentsConfig()
    output: OutputConfig = OutputConfig()

    @field_validator("Ts")
    @classmethod
    def _ts(cls, v):
        if not v:
            raise ValueError("Ts must not be empty")
        bad = [T for T in v if T < 2]
        if bad:
            raise ValueError(f"every T must be >= 2, got {bad}")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        if any(s < 0 for s in v):
            raise ValueError("seeds must be nonnegative")
        return v

    @field_validator("target")
    @classmethod
    def _target(cls, v):
        if isinstance(v, dict):
            target_from_dict(v)
        return v


def _line_of(text: str, loc) -> int:
    """Best-effort line number of the JSON key path ``loc`` in ``text``."""
    pos, line = 0, 1
    for part in loc:
        if not isinstance(part, str):
            continue
        i = text.find(f'"{part}"', pos)
        if i < 0:
            break
        pos = i
        line = text.count("\n", 0, i) + 1
    return line


def load_config(path: Path) -> tuple[ExperimentConfig | None, list[str]]:
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        return None, [f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}"]
    try:
        cfg = ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"])
            msgs.append(f"{path}:{_line_of(text, err['loc'])}: {loc}: {err['msg']}")
        return None, msgs
    if isinstance(cfg.target, str):
        try:
            resolve_target(cfg.target, path.parent)
        except ContractError as exc:
            return None, [f"{path}:{_line_of(text, ('target',))}: target: {exc}"]
    return cfg, []


# workers -----------------------------------------------------------------------------------------


def n_workers() -> int:
    env = os.environ.get("DDPM_LAB_THREADS")
    if env is None:
        return min(8, os.cpu_count() or 1)
    try:
        n = int(env)
    except ValueError as exc:
        raise ContractError(f"DDPM_LAB_THREADS must be a positive integer, got {env!r}") from exc
    if n < 1:
        raise ContractError(f"DDPM_LAB_THREADS must be a positive integer, got {env!r}")
    return n


def run_cells(fn, cells: list) -> list:
    """Evaluate pure cells on a bounded pool; results come back in sorted cell order."""
    results = {}
    with ThreadPoolExecutor(max_workers=n_workers()) as pool:
        futures = {pool.submit(fn, cell): cell for cell in cells}
        for fut in as_completed(futures):
            results[futures[fut]] = fut.result()
    return [(cell, results[cell]) for cell in sorted(cells)]


# tables ------------------------------------------------------------------------------------------


def write_csv(rows: list[list], header: list[str], out: str | Path | None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    if out is None or str(out) == "-":
        sys.stdout.write(buf.getvalue())
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(buf.getvalue())


def schedule_table(s: NoiseSchedule) -> tuple[list[str], list[list]]:
    r1, r2 = s.ratio(1), s.ratio(2)
    rows = [
        [t, s.alpha_at(t), s.beta_at(t), s.abar_at(t), float(r1[t - 1]), float(r2[t - 1])]
        for t in range(1, s.T + 1)
    ]
    return ["t", "alpha", "one_minus_alpha", "abar", "ratio_p1", "ratio_p2"], rows


def sample_table(batch) -> tuple[list[str], list[list]]:
    d = batch.x.shape[1]
    header = ["sample_index"] + [f"x_{i + 1}" for i in range(d)]
    return header, [[i, *map(float, row)] for i, row in enumerate(batch.x)]


def _upper_indices(d: int, k: int):
    import itertools

    return list(itertools.combinations_with_replacement(range(d), k))


def moments_table(target: Target, s: NoiseSchedule, t: int, points) -> tuple[list[str], list[list]]:
    rows = []
    for x in points:
        x = np.asarray(x, dtype=float)
        if x.size != target.dim:
            raise ContractError(f"moment probe {x.tolist()} does not match target dimension {target.dim}")
        F = tw.posterior_moments_formula(target, s, t, x)
        Q = tw.posterior_moments_quadrature(target, s, t, x)
        xs = ";".join(fmt(float(v)) for v in x)
        d = target.dim
        entries = [(f"mean[{i}]", F.mean[i], Q.mean[i]) for i in range(d)]
        entries += [(f"cov[{i},{j}]", F.cov[i, j], Q.cov[i, j]) for i, j in _upper_indices(d, 2)]
        entries += [(f"third[{','.join(map(str, ix))}]", F.third[ix], Q.third[ix]) for ix in _upper_indices(d, 3)]
        if F.fourth is not None:
            entries += [(f"fourth[{','.join(map(str, ix))}]", F.fourth[ix], Q.fourth[ix]) for ix in _upper_indices(d, 4)]
        entries += [(f"fifth_diag[{i}]", F.fifth_diag[i], Q.fifth_diag[i]) for i in range(d)]
        entries += [(f"sixth[{','.join(map(str, p))}]", F.sixth_diag[p], Q.sixth_diag[p]) for p in sorted(F.sixth_diag)]
        for name, a, b in entries:
            rows.append([t, xs, name, float(a), float(b), abs(float(a) - float(b))])
    return ["t", "x_t", "moment_name", "formula_value", "quadrature_value", "abs_residual"], rows


RATE_HEADER = ["T", "kind", "schedule", "c", "delta", "eps2", "epsH2", "kl_total", "kl_init", "kl_est", "kl_rev", "seed"]


def rates_table(target: Target, sched: ScheduleConfig, sampler: SamplerConfig, Ts, seeds) -> list[list]:
    spec = sampler.to_spec()

    def cell(key):
        T, seed = key
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            s = make_schedule(sched.name, T, sched.c, sched.delta, spec.kind)
        return met.rate_point(target, s, spec, seed)

    rows = []
    for (T, seed), r in run_cells(cell, [(T, seed) for T in Ts for seed in seeds]):
        rows.append(
            [T, spec.kind, sched.name, sched.c, sched.delta, spec.eps2, spec.epsH2, r["kl_total"], r["kl_init"], r["kl_est"], r["kl_rev"], seed]
        )
    return rows


def rate_fit_of(rows) -> met.RateFit | None:
    by_T: dict[int, list[float]] = {}
    for r in rows:
        by_T.setdefault(r[0], []).append(r[7])
    pts = [(T, float(np.mean(v))) for T, v in sorted(by_T.items())]
    if len(pts) < 4:
        warnings.warn(f"rate fit skipped: {len(pts)} distinct T values (need 4)", stacklevel=2)
        return None
    return met.fit_rate(pts)


def write_svg(fit: met.RateFit | None, rows, path: str | Path, title: str):
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "ddpm-lab"
    matplotlib.rcParams["svg.fonttype"] = "path"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.6))
    Ts = np.array([r[0] for r in rows], dtype=float)
    kl = np.array([r[7] for r in rows], dtype=float)
    ok = kl > 0
    ax.loglog(Ts[ok], kl[ok], "o", label="KL")
    if fit is not None:
        grid = np.geomspace(fit.Ts.min(), fit.Ts.max(), 50)
        ax.loglog(grid, np.exp(fit.intercept) * grid**fit.slope, "-", label=f"slope {fit.slope:.3f}")
    ax.set_xlabel("T")
    ax.set_ylabel("KL")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def verify_outputs(checks: list[ver.Check], out_dir: Path | None) -> dict:
    rows = [[c.name, c.value, c.threshold, "pass" if c.passed else "fail"] for c in checks]
    summary = {r[0]: {"value": r[1], "threshold": r[2], "pass": r[3] == "pass"} for r in rows}
    if out_dir is not None:
        write_csv(rows, ["criterion", "value", "threshold", "result"], out_dir / "verify.csv")
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


# subcommands -------------------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, T_default: int = 128):
    p.add_argument("--target", default="default_mixture_1d", help="builtin name or target JSON path")
    p.add_argument("--schedule", choices=("constant", "li"), default="constant")
    p.add_argument("--T", type=int, default=T_default)
    p.add_argument("--c", type=float, default=2.0)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--kind", choices=("regular", "accelerated"), default="regular")


def _schedule_from(args) -> NoiseSchedule:
    return make_schedule(args.schedule, args.T, args.c, args.delta, args.kind)


def cmd_schedule(args) -> int:
    header, rows = schedule_table(_schedule_from(args))
    write_csv(rows, header, args.out)
    return 0


def _sampler_from(args) -> ReverseSamplerSpec:
    estimator = "perturbed" if (args.eps2 > 0 or args.epsH2 > 0) else "exact"
    return ReverseSamplerSpec(
        kind=args.kind, estimator=estimator, eps2=args.eps2, epsH2=args.epsH2, perturbation=args.perturbation, stop_at=args.stop_at
    )


def cmd_sample(args) -> int:
    target = resolve_target(args.target)
    batch = run_reverse(_sampler_from(args), target, _schedule_from(args), args.n, args.seed)
    if batch.clip_events:
        print(f"psd clip events: {batch.clip_events}", file=sys.stderr)
    header, rows = sample_table(batch)
    write_csv(rows, header, args.out)
    return 0


def _parse_points(items, d_hint=None):
    return [[float(v) for v in item.split(",")] for item in items]


def cmd_moments(args) -> int:
    target = resolve_target(args.target)
    s = _schedule_from(args)
    t = args.t if args.t is not None else s.T // 2
    header, rows = moments_table(target, s, t, _parse_points(args.x))
    write_csv(rows, header, args.out)
    return 0


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return v


def cmd_fit(args) -> int:
    target = resolve_target(args.target)
    s = _schedule_from(args)
    sf = est.fit_score(target, s, args.t, args.basis, args.n, args.seed)
    vf = est.fit_v(target, s, args.t, sf.basis, args.n, args.seed)
    doc = {
        "t": args.t,
        "T": s.T,
        "basis": args.basis,
        "features": sf.basis.names,
        "n_samples": args.n,
        "seed": args.seed,
        "score": {"coef": sf.coef, "diagnostics": sf.diagnostics},
        "v": {"coef": vf.coef, "diagnostics": vf.diagnostics},
    }
    text = json.dumps(_jsonable(doc), indent=2) + "\n"
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return 0


def cmd_rates(args) -> int:
    target = resolve_target(args.target)
    sched = ScheduleConfig(name=args.schedule, c=args.c, delta=args.delta)
    estimator = "perturbed" if (args.eps2 > 0 or args.epsH2 > 0) else "exact"
    sampler = SamplerConfig(kind=args.kind, estimator=estimator, eps2=args.eps2, epsH2=args.epsH2, perturbation=args.perturbation, stop_at=args.stop_at)
    Ts = [int(v) for v in args.Ts.split(",")]
    seeds = [int(v) for v in args.seeds.split(",")]
    rows = rates_table(target, sched, sampler, Ts, seeds)
    write_csv(rows, RATE_HEADER, args.out)
    fit = rate_fit_of(rows)
    if fit is not None:
        print(f"rate fit: slope {fit.slope!r} intercept {fit.intercept!r} r2 {fit.r_squared!r}", file=sys.stderr)
    if args.svg:
        write_svg(fit, rows, args.svg, f"{args.kind} sampler, {args.schedule} schedule")
    return 0


def cmd_verify(args) -> int:
    checks = ver.run_suite(args.suite, quick=args.quick)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.value!r} {c.threshold}")
    verify_outputs(checks, Path(args.out_dir) if args.out_dir else None)
    return 0 if all(c.passed for c in checks) else 1


def run_config(cfg: ExperimentConfig, base: Path) -> int:
    out = Path(cfg.output.dir)
    if not out.is_absolute():
        out = base / out
    out.mkdir(parents=True, exist_ok=True)
    target = resolve_target(cfg.target, base)
    spec = cfg.sampler.to_spec()
    sc = cfg.schedule

    def sched(T):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return make_schedule(sc.name, T, sc.c, sc.delta, spec.kind)

    if "schedule" in cfg.tasks:
        for T in cfg.Ts:
            header, rows = schedule_table(sched(T))
            write_csv(rows, header, out / f"schedule_T{T}.csv")
    if "sample" in cfg.tasks:
        cells = run_cells(lambda key: run_reverse(spec, target, sched(key[0]), cfg.n_samples, key[1]), [(T, s) for T in cfg.Ts for s in cfg.seeds])
        for (T, seed), batch in cells:
            header, rows = sample_table(batch)
            write_csv(rows, header, out / f"samples_T{T}_seed{seed}.csv")
    if "moments" in cfg.tasks:
        for T in cfg.Ts:
            s = sched(T)
            header, rows = moments_table(target, s, cfg.moments.t or T // 2, cfg.moments.x)
            write_csv(rows, header, out / f"moments_T{T}.csv")
    if "rates" in cfg.tasks:
        rows = rates_table(target, sc, cfg.sampler, cfg.Ts, cfg.seeds)
        write_csv(rows, RATE_HEADER, out / "rates.csv")
        fit = rate_fit_of(rows)
        if fit is not None:
            fit_doc = {"slope": fit.slope, "intercept": fit.intercept, "r_squared": fit.r_squared, "Ts": fit.Ts, "values": fit.values}
            (out / "rate_fit.json").write_text(json.dumps(_jsonable(fit_doc), indent=2) + "\n")
        if cfg.output.svg:
            write_svg(fit, rows, out / "rates.svg", f"{spec.kind} sampler, {sc.name} schedule")
    checks: list[ver.Check] = []
    if "verify" in cfg.tasks:
        names = ["all"] if "all" in cfg.suites else list(dict.fromkeys(cfg.suites))
        for name in names:
            checks.extend(ver.run_suite(name, quick=cfg.quick))
    verify_outputs(checks, out)
    return 0 if all(c.passed for c in checks) else 1


def cmd_run(args) -> int:
    path = Path(args.config)
    if not path.exists():
        print(f"{path}: config file not found", file=sys.stderr)
        return 2
    cfg, errors = load_config(path)
    if errors:
        for e in errors:
            print(e, file=sys.stderr)
        return 2
    return run_config(cfg, path.parent)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddpm-lab", description="Reproducible DDPM sampler experiments and verification suites.")
    p.add_argument("--print-defaults", action="store_true", help="print the default experiment config and exit")
    sub = p.add_subparsers(dest="command", metavar="{schedule,sample,moments,fit,rates,verify,run}")

    ps = sub.add_parser("schedule", help="tabulate a noise schedule")
    _add_common(ps)
    ps.add_argument("--out", default=None)
    ps.set_defaults(func=cmd_schedule)

    pa = sub.add_parser("sample", help="draw samples from the reverse chain")
    _add_common(pa)
    pa.add_argument("--eps2", type=float, default=0.0)
    pa.add_argument("--epsH2", type=float, default=0.0)
    pa.add_argument("--perturbation", choices=("additive_gaussian", "systematic_bias"), default="additive_gaussian")
    pa.add_argument("--n", type=int, default=1000)
    pa.add_argument("--seed", type=int, default=0)
    pa.add_argument("--stop-at", dest="stop_at", type=int, choices=(0, 1), default=0)
    pa.add_argument("--out", default=None)
    pa.set_defaults(func=cmd_sample)

    pm = sub.add_parser("moments", help="posterior moments by formula and by quadrature")
    _add_common(pm, T_default=64)
    pm.add_argument("--t", type=int, default=None)
    pm.add_argument("--x", action="append", default=None, help="probe point, comma-separated coordinates; repeatable")
    pm.add_argument("--out", default=None)
    pm.set_defaults(func=cmd_moments)

    pf = sub.add_parser("fit", help="fit score and Hessian-matching regressions at one t")
    _add_common(pf, T_default=64)
    pf.add_argument("--t", type=int, required=True)
    pf.add_argument("--basis", choices=("poly2", "responsibility", "linear", "constant"), default="poly2")
    pf.add_argument("--n", type=int, default=100000)
    pf.add_argument("--seed", type=int, default=0)
    pf.add_argument("--out", default=None)
    pf.set_defaults(func=cmd_fit)

    pr = sub.add_parser("rates", help="KL against T sweep")
    _add_common(pr)
    pr.add_argument("--Ts", default=",".join(map(str, ver.RATE_TS)))
    pr.add_argument("--eps2", type=float, default=0.0)
    pr.add_argument("--epsH2", type=float, default=0.0)
    pr.add_argument("--perturbation", choices=("additive_gaussian", "systematic_bias"), default="systematic_bias")
    pr.add_argument("--stop-at", dest="stop_at", type=int, choices=(0, 1), default=0)
    pr.add_argument("--seeds", default="0")
    pr.add_argument("--out", default=None)
    pr.add_argument("--svg", default=None)
    pr.set_defaults(func=cmd_rates)

    pv = sub.add_parser("verify", help="run verification suites")
    pv.add_argument("--suite", choices=sorted(ver.SUITES), default="all")
    pv.add_argument("--quick", action="store_true")
    pv.add_argument("--out-dir", default=None)
    pv.set_defaults(func=cmd_verify)

    pc = sub.add_parser("run", help="run an experiment config")
    pc.add_argument("config")
    pc.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        print(ExperimentConfig().model_dump_json(indent=2))
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if getattr(args, "x", None) is None and args.command == "moments":
        args.x = ["0.4"]
    try:
        return args.func(args)
    except (ContractError, ScheduleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
