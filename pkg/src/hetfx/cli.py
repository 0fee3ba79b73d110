"""Command-line driver.

    hetfx simulate|estimate|montecarlo --config FILE [--seed N] [--threads N] [--out DIR] [--mkdir]

The config file is INI-style with sections ``[run]``, ``[dgp]``, ``[input]``,
``[noise]``, ``[rc]``, ``[estimate]``, ``[solver]`` and ``[montecarlo]``.
Command-line flags override the file. Exit codes: 0 success, 2 input
error, 3 numerical failure.
"""
import argparse
import configparser
import dataclasses
import os
import sys

from . import io
from .errors import DesignError, InputError, MonteCarloError, NumericalError
from .pipeline import (
    EstimateConfig,
    design_from_exposures,
    design_from_groups,
    design_from_spells,
    estimate,
    true_quantities,
)
from .simulate import DGPConfig, generate, montecarlo

EXIT_INPUT = 2
EXIT_NUMERIC = 3


class RunConfig:
    """Parsed config file plus flag overrides."""

    def __init__(self, path, args):
        if not os.path.exists(path):
            raise InputError(f"config file {path} not found")
        self.path = path
        self.base = os.path.dirname(os.path.abspath(path))
        self.ini = configparser.ConfigParser()
        try:
            self.ini.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise InputError(f"{path}: {exc}") from exc
        run = self.section("run")
        self.seed = args.seed if args.seed is not None else _maybe_int(run.get("seed"), "run.seed")
        threads = args.threads or os.environ.get("HETFX_THREADS") or run.get("threads") or 1
        self.threads = _maybe_int(threads, "threads")
        self.out = args.out or run.get("out") or "."
        if not os.path.isabs(self.out) and args.out is None:
            self.out = os.path.join(self.base, self.out)
        self.mkdir = args.mkdir or run.get("mkdir", "false").lower() in ("1", "true", "yes")

    def section(self, name):
        return dict(self.ini[name]) if self.ini.has_section(name) else {}

    def require_seed(self):
        if self.seed is None:
            raise InputError("seed required (use --seed or [run] seed)")
        return self.seed

    def path_of(self, key):
        value = self.section("input").get(key)
        if value is None:
            raise InputError(f"[input] {key} missing")
        return value if os.path.isabs(value) else os.path.join(self.base, value)

    def out_dir(self):
        if not os.path.isdir(self.out):
            if not self.mkdir:
                raise InputError(f"output directory {self.out} does not exist (use --mkdir)")
            try:
                os.makedirs(self.out, exist_ok=True)
            except OSError as exc:
                raise InputError(f"cannot create output directory {self.out}: {exc.strerror}") from exc
        return self.out

    def dgp(self, seed):
        return _build(DGPConfig, self.section("dgp"), "dgp", seed=seed)

    def estimate_config(self, seed):
        fields = {}
        for sec in ("noise", "rc", "estimate", "solver"):
            for key, value in self.section(sec).items():
                name = {"family": "noise"}.get(key, key) if sec == "noise" else key
                fields[name] = value
        return _build(EstimateConfig, fields, "estimate", seed=seed)


def _maybe_int(value, name):
    if value is None:
        return None
    try:
        return int(value)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{name} must be an integer, got {value!r}") from exc


def _convert(value, default, annotation, name):
    text = value.strip()
    typ = str(annotation)
    try:
        if isinstance(default, bool) or "bool" in typ:
            if text.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, tuple) or "tuple" in typ:
            items = [t.strip() for t in text.split(",") if t.strip()]
            if name in ("alpha_means", "psi_means", "noise_strata"):
                return tuple(float(t) for t in items)
            return tuple(items)
        if text.lower() == "none":
            return None
        if isinstance(default, int) or "int" in typ:
            return int(text)
        if isinstance(default, float) or "float" in typ:
            return float(text)
        return text
    except ValueError as exc:
        raise InputError(f"{name}: cannot parse {value!r}") from exc


def _build(cls, values, section, **extra):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise InputError(f"[{section}] unknown key {key!r}")
        f = known[key]
        kwargs[key] = _convert(value, f.default, f.type, key)
    kwargs.update({k: v for k, v in extra.items() if k in known})
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise InputError(f"[{section}] {exc}") from exc


# ---------------------------------------------------------------- commands

def cmd_simulate(rc):
    seed = rc.require_seed()
    out = rc.out_dir()
    ds = generate(rc.dgp(seed))
    paths = io.write_dataset(ds, out)
    n = 0 if ds.Y is None else ds.Y.size
    p = 0 if ds.design is None else ds.design.n_effects
    print(f"archetype={ds.config.archetype} n={n} p={p}")
    for key, value in sorted(ds.meta.items()):
        print(f"  {key}={value}")
    for path in paths:
        print(f"wrote {path}")
    return 0


def load_inputs(rc, cfg):
    inp = rc.section("input")
    if "groups" in inp:
        return design_from_groups(io.read_csv(rc.path_of("groups"), "groups"))
    if "spells" in inp:
        spells = io.read_csv(rc.path_of("spells"), "spells")
        outcomes = io.read_csv(rc.path_of("outcomes"), "akm_outcomes")
        return design_from_spells(spells, outcomes, cfg)
    if "exposures" in inp:
        exposures = io.read_csv(rc.path_of("exposures"), "exposures")
        outcomes = io.read_csv(rc.path_of("outcomes"), "exposure_outcomes")
        return design_from_exposures(exposures, outcomes, cfg)
    raise InputError("[input] needs groups, spells or exposures")


def cmd_estimate(rc):
    seed = rc.require_seed()
    cfg = rc.estimate_config(seed)
    out = rc.out_dir()
    Z, Y = load_inputs(rc, cfg)
    res = estimate(Z, Y, cfg)
    io.write_csv(res.estimates_frame(), os.path.join(out, "estimates.csv"), "estimates")
    io.write_csv(res.quantities, os.path.join(out, "quantities.csv"), "quantities")
    print(f"n={Z.n_obs} p={Z.n_effects} noise={res.noise.family}")
    for row in res.quantities.itertuples(index=False):
        print(f"  {row.quantity:<24} {row.strategy:<10} {row.value: .6g}")
    return 0


def cmd_montecarlo(rc):
    seed = rc.require_seed()
    dgp = rc.dgp(seed)
    cfg = rc.estimate_config(seed)
    if cfg.noise == "auto" and dgp.archetype == "simple_means":
        cfg = dataclasses.replace(cfg, noise="known", sigma2=dgp.sigma_v**2)
    R = _maybe_int(rc.section("montecarlo").get("replications", "100"), "replications")
    out = rc.out_dir()

    def pipeline(ds):
        if ds.design is None:
            raise DesignError("generated design is not identified")
        res = estimate(ds.design, ds.Y, cfg)
        truth = true_quantities(ds.design, ds.truth["eta"], cfg.quantities)
        return {f"{r.quantity}|{r.strategy}": (r.value, truth[r.quantity])
                for r in res.quantities.itertuples(index=False)}

    report = montecarlo(dgp, pipeline, R, seed, threads=rc.threads)
    table = report.table.copy()
    split = table["quantity"].str.split("|", expand=True)
    table["quantity"], table["strategy"] = split[0], split[1]
    io.write_csv(table, os.path.join(out, "mc_report.csv"), "mc_report")
    print(f"{dgp.archetype}: {R} replications, {len(report.failures)} failed")
    print(f"  {'quantity':<24} {'strategy':<10} {'mean':>12} {'truth':>12} {'bias':>12} {'mc_se':>10}")
    for r in table.itertuples(index=False):
        print(f"  {r.quantity:<24} {r.strategy:<10} {r.mean:12.6g} {r.truth:12.6g} {r.bias:12.4g} {r.mc_se:10.3g}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "montecarlo": cmd_montecarlo}


def build_parser():
    parser = argparse.ArgumentParser(prog="hetfx", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="INI config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None, help="worker cap (env HETFX_THREADS)")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--mkdir", action="store_true", help="create the output directory if missing")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        rc = RunConfig(args.config, args)
        return COMMANDS[args.command](rc)
    except (NumericalError, MonteCarloError) as exc:
        print(f"hetfx: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, DesignError) as exc:
        print(f"hetfx: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
