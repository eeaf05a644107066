"""Command-line driver: ``oqkd <command> [flags]``.

Configuration is layered: built-in defaults, then an optional INI-style file
(``[section]`` headers, ``key = value`` lines, ``#`` comments), then flags.
Every output file begins with ``#`` provenance lines carrying the full
effective config; ``--replay FILE`` reruns from such a header.
"""

from __future__ import annotations

import argparse
import configparser
import copy
import logging
import math
import sys
from dataclasses import dataclass, replace
from functools import partial
from pathlib import Path

import numpy as np

from . import fpt, output, traffic, wdm
from .buffer import (
    BufferParams,
    ChannelModel,
    ConsumptionMode,
    cycle_stats,
    expected_recovery,
    recovery_time,
    reliability_horizon,
    SaturationError,
    simulate_buffer,
)
from .seeding import default_workers, derive_seed, map_indexed

log = logging.getLogger("oqkd")

AUTO_BIN_HOURS = 2.0

COMMANDS = ("traffic", "availability", "buffer", "horizon", "recovery", "fpt", "fit", "report")


class ConfigError(ValueError):
    pass


def _opt_float(s):
    return None if str(s).strip().lower() in ("", "none", "auto") else float(s)


def _u64(s):
    v = int(s)
    if not 0 <= v < 2**64:
        raise ValueError("out of u64 range")
    return v


def _mode(s):
    s = str(s).strip().lower()
    if s.startswith("fixed:"):
        rate = float(s.split(":", 1)[1])
        if rate < 0:
            raise ValueError("fixed rate must be >= 0")
        return f"fixed:{rate!r}"
    ConsumptionMode(s)
    if s == "fixed":
        raise ValueError("use fixed:RATE")
    return s


def _channel_model(s):
    return ChannelModel(str(s).strip().lower()).value


def _formats(s):
    items = [x.strip() for x in str(s).split(",") if x.strip()]
    bad = set(items) - {"csv", "report", "trace"}
    if bad:
        raise ValueError(f"unknown format(s) {sorted(bad)}")
    return ",".join(items)


# section -> key -> (parser, default, check, constraint text)
SCHEMA = {
    "traffic": {
        "category": (int, 1, lambda v: v in (1, 2, 3), "must be 1, 2 or 3"),
        "p": (_opt_float, None, lambda v: v is None or v >= 0, "must be >= 0"),
        "alpha": (_opt_float, None, lambda v: v is None or 0 <= v <= 1, "must be in [0,1]"),
        "sigma": (_opt_float, None, lambda v: v is None or v >= 0, "must be >= 0"),
        "hurst": (float, traffic.DEFAULT_HURST, lambda v: 0.5 <= v < 1, "must be in [0.5,1)"),
        "period_hours": (float, 24.0, lambda v: v > 0, "must be > 0"),
        "start_phase_hours": (float, 0.0, lambda v: v >= 0, "must be >= 0"),
    },
    "wdm": {
        "n_channels": (int, 80, lambda v: v >= 1, "must be >= 1"),
        "key_rate_dku_per_day": (float, 1.0, lambda v: v > 0, "must be > 0"),
    },
    "buffer": {
        "b0_dku": (float, 1.0, lambda v: v >= 0, "must be >= 0"),
        "consumption_mode": (_mode, "instant-balance", None, ""),
        "channel_model": (_channel_model, "cont-upper", None, ""),
        "t_prime_hours": (float, 0.0, lambda v: v >= 0, "must be >= 0"),
    },
    "simulation": {
        "days": (float, 100.0, lambda v: v > 0, "must be > 0"),
        "dt_minutes": (float, 1.0, lambda v: v > 0, "must be > 0"),
        "trials": (int, 10, lambda v: v >= 1, "must be >= 1"),
        "max_span_days": (float, 21.0, lambda v: v > 0, "must be > 0"),
        "seed": (_u64, 0, None, ""),
        "workers": (int, 0, lambda v: v >= 0, "must be >= 0 (0 = all processors)"),
        "quadrature_budget": (lambda s: int(float(s)), 10**8, lambda v: v >= 1, "must be >= 1"),
        "bins": (int, 0, lambda v: v >= 0, "must be >= 0 (0 = automatic)"),
    },
    "output": {
        "directory": (str, "out", lambda v: bool(v), "must be non-empty"),
        "formats": (_formats, "csv,report", None, ""),
    },
}


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({s: {k: entry[1] for k, entry in keys.items()} for s, keys in SCHEMA.items()})

    def set(self, section: str, key: str, raw) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        parser, _, check, why = SCHEMA[section][key]
        try:
            value = raw if raw is None else parser(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}.{key}: cannot parse {raw!r} ({exc})") from None
        if check is not None and not check(value):
            raise ConfigError(f"{section}.{key} {why}")
        self.values[section][key] = value

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def as_dict(self) -> dict:
        return copy.deepcopy(self.values)

    # -- builders ------------------------------------------------------------

    @property
    def dt_hours(self) -> float:
        return self["simulation"]["dt_minutes"] / 60.0

    def traffic_params(self, category: int | None = None) -> traffic.TrafficParams:
        tr = self["traffic"]
        n = self["wdm"]["n_channels"]
        base = traffic.category_preset(category or tr["category"], n, tr["hurst"])
        over = {k: tr[k] for k in ("p", "alpha", "sigma") if tr[k] is not None and category is None}
        return replace(base, period_hours=tr["period_hours"], **over)

    def wdm_config(self) -> wdm.WdmConfig:
        return wdm.WdmConfig(self["wdm"]["n_channels"], self["wdm"]["key_rate_dku_per_day"])

    def buffer_params(self, b0: float | None = None) -> BufferParams:
        b = self["buffer"]
        mode = b["consumption_mode"]
        rate = 0.0
        if mode.startswith("fixed:"):
            rate = float(mode.split(":", 1)[1])
            mode = "fixed"
        return BufferParams(
            b0_dku=b["b0_dku"] if b0 is None else b0,
            traffic=self.traffic_params(),
            config=self.wdm_config(),
            consumption_mode=ConsumptionMode(mode),
            fixed_rate_dku_per_hour=rate,
            channel_model=ChannelModel(b["channel_model"]),
            start_phase_hours=self["traffic"]["start_phase_hours"],
        )

    def workers(self, n_tasks: int) -> int:
        w = self["simulation"]["workers"]
        return default_workers(n_tasks) if w == 0 else min(w, n_tasks)


def parse_config(path: str | Path | None = None, overrides: dict | None = None, base: dict | None = None) -> RunConfig:
    """Merge defaults < ``base`` (e.g. a replayed provenance config) < file < overrides.

    ``overrides`` maps ``"section.key"`` to raw values.
    """
    cfg = RunConfig.defaults()
    if base:
        for section, keys in base.items():
            for key, value in keys.items():
                cfg.set(section, key, value)
    if path is not None:
        parser = configparser.ConfigParser(
            inline_comment_prefixes=("#",), comment_prefixes=("#", ";"), interpolation=None, default_section="__none__"
        )
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        cfg.set(section, key, value)
    _check_cross(cfg)
    return cfg


def _check_cross(cfg: RunConfig) -> None:
    if cfg["traffic"]["start_phase_hours"] >= cfg["traffic"]["period_hours"]:
        raise ConfigError("traffic.start_phase_hours must be < traffic.period_hours")
    if cfg["simulation"]["days"] * 24.0 < cfg.dt_hours:
        raise ConfigError("simulation.days must cover at least one step")
    try:
        cfg.buffer_params()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# -- command implementations -----------------------------------------------


class Run:
    def __init__(self, command: str, cfg: RunConfig):
        self.command = command
        self.cfg = cfg
        self.outdir = Path(cfg["output"]["directory"])
        self.formats = set(cfg["output"]["formats"].split(","))
        self.provenance = output.provenance_lines(command, cfg.as_dict())
        self.written: list[Path] = []

    def csv(self, name: str, header, columns) -> None:
        if "csv" in self.formats or "trace" in self.formats:
            self.written.append(output.atomic_write(self.outdir / name, output.csv_text(header, columns, self.provenance)))

    def trace(self, name: str, header, columns) -> None:
        self.written.append(output.atomic_write(self.outdir / name, output.csv_text(header, columns, self.provenance)))

    def report(self, name: str, data: dict) -> None:
        if "report" in self.formats:
            self.written.append(output.atomic_write(self.outdir / name, output.report_text(data, self.provenance)))


def _traffic_counts(params, days, dt, start_phase, master_seed, n, index):
    tr = traffic.synthesize(params, days * 24.0, dt, start_phase, derive_seed(master_seed, index))
    return wdm.allocation_counts(tr.load, n)


def _availability(cfg: RunConfig, params: traffic.TrafficParams) -> wdm.AvailabilityStats:
    sim = cfg["simulation"]
    n = cfg["wdm"]["n_channels"]
    job = partial(_traffic_counts, params, sim["days"], cfg.dt_hours, cfg["traffic"]["start_phase_hours"], sim["seed"], n)
    parts = map_indexed(job, sim["trials"], cfg.workers(sim["trials"]))
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return wdm.stats_from_counts(total, n)


def cmd_traffic(run: Run) -> None:
    cfg = run.cfg
    params = cfg.traffic_params()
    tr = traffic.synthesize(params, cfg["simulation"]["days"] * 24.0, cfg.dt_hours,
                            cfg["traffic"]["start_phase_hours"], cfg["simulation"]["seed"])
    run.trace("traffic.csv", ["t_hours", "trend_m", "fgn_x", "noise_nu", "load_channels"],
              [tr.t_hours, tr.trend, tr.fgn, tr.noise, tr.load])
    run.report("traffic_report.txt", {
        "params": {"p": params.p, "alpha": params.alpha, "sigma": params.sigma, "hurst": params.hurst},
        "samples": len(tr),
        "load": {
            "mean": float(tr.load.mean()),
            "variance": float(tr.load.var()),
            "expected_mean": float(np.mean(traffic.mean_rate(params, tr.t_hours))),
            "min": float(tr.load.min()),
            "max": float(tr.load.max()),
        },
    })


def cmd_availability(run: Run) -> None:
    cfg = run.cfg
    stats = _availability(cfg, cfg.traffic_params())
    run.report("availability_report.txt", {"availability": stats.as_dict(), "trials": cfg["simulation"]["trials"],
                                           "days": cfg["simulation"]["days"]})
    run.csv("quantum_histogram.csv", ["channel_count", "frequency"],
            [stats.quantum_histogram[:, 0].astype(int), stats.quantum_histogram[:, 1]])
    run.csv("classical_histogram.csv", ["channel_count", "frequency"],
            [stats.classical_histogram[:, 0].astype(int), stats.classical_histogram[:, 1]])
    if "trace" in run.formats:
        params = cfg.traffic_params()
        tr = traffic.synthesize(params, cfg["simulation"]["days"] * 24.0, cfg.dt_hours,
                                cfg["traffic"]["start_phase_hours"], derive_seed(cfg["simulation"]["seed"], 0))
        nc, nq, over = wdm.allocate_array(tr.load, cfg["wdm"]["n_channels"])
        run.trace("allocation.csv", ["t_hours", "load_channels", "n_classical", "n_quantum", "overflow"],
                  [tr.t_hours, tr.load, nc, nq, over])


def cmd_report(run: Run) -> None:
    cfg = run.cfg
    rows = {}
    for cat in (1, 2, 3):
        stats = _availability(cfg, cfg.traffic_params(category=cat))
        rows[cat] = stats
    run.report("report.txt", {
        "n_channels": cfg["wdm"]["n_channels"],
        "days": cfg["simulation"]["days"],
        "trials": cfg["simulation"]["trials"],
        "category": {str(c): {"mean_quantum_channels": s.mean_quantum_channels,
                              "utilization_percent": s.utilization_percent,
                              "outage_fraction": s.outage_fraction} for c, s in rows.items()},
    })
    run.csv("table_ii.csv", ["category", "mean_quantum_channels", "utilization_percent"],
            [np.array([1, 2, 3]), np.array([rows[c].mean_quantum_channels for c in (1, 2, 3)]),
             np.array([rows[c].utilization_percent for c in (1, 2, 3)])])


def cmd_buffer(run: Run) -> None:
    cfg = run.cfg
    params = cfg.buffer_params()
    tr = simulate_buffer(params, cfg["simulation"]["days"] * 24.0, cfg.dt_hours, cfg["simulation"]["seed"])
    states = np.array(["AVAILABLE" if a else "RECOVERY" for a in tr.available], dtype=object)
    run.trace("buffer.csv", ["t_hours", "buffer_dku", "state", "n_quantum", "consumption_dku_per_h"],
              [tr.t_hours, tr.levels_dku, states, tr.n_quantum, tr.consumption])
    stats = cycle_stats(tr)
    quasi = []
    for t in stats.depletion_times[: stats.n_recoveries]:
        try:
            quasi.append(recovery_time(params, t, params.channel_model.offset))
        except SaturationError:
            pass
    run.report("buffer_report.txt", {
        "cycle": stats.as_dict(),
        "saturated_steps": tr.saturated_steps,
        "quasi_static_mean_recovery_hours": float(np.mean(quasi)) if quasi else float("nan"),
        "quasi_static_phases_used": len(quasi),
    })


def cmd_horizon(run: Run) -> None:
    cfg = run.cfg
    params = cfg.buffer_params()
    res = reliability_horizon(params, cfg.dt_hours, cfg["simulation"]["max_span_days"] * 24.0,
                              cfg["simulation"]["quadrature_budget"])
    run.report("horizon_report.txt", {"b0_dku": params.b0_dku, "horizon": res.as_dict()})
    run.csv("variance_curve.csv", ["t_hours", "variance_dku2"], [res.variance_curve[:, 0], res.variance_curve[:, 1]])


def cmd_recovery(run: Run) -> None:
    cfg = run.cfg
    params = cfg.buffer_params()
    t_prime = cfg["buffer"]["t_prime_hours"]
    res = expected_recovery(params, t_prime)
    run.report("recovery_report.txt", {"b0_dku": params.b0_dku, "recovery": res.as_dict()})
    levels = params.b0_dku * np.array([0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0])
    rows = [expected_recovery(replace(params, b0_dku=float(b)), t_prime) for b in levels]
    run.csv("recovery_vs_b0.csv", ["b0_dku", "tau_lower_hours", "tau_upper_hours"],
            [levels, np.array([r.tau_lower_hours for r in rows]), np.array([r.tau_upper_hours for r in rows])])


def _ensemble(cfg: RunConfig) -> fpt.FptEnsemble:
    sim = cfg["simulation"]
    return fpt.run_ensemble(cfg.buffer_params(), sim["trials"], sim["max_span_days"] * 24.0,
                            cfg.dt_hours, sim["seed"], cfg.workers(sim["trials"]))


def _density(cfg: RunConfig, ens: fpt.FptEnsemble) -> np.ndarray:
    bins = cfg["simulation"]["bins"]
    if bins == 0:
        # FD alone collapses the early mode into one bin on heavy tails
        fd = fpt.freedman_diaconis_bins(ens.observed, 0.0, ens.max_span_hours)
        bins = max(fd, math.ceil(ens.max_span_hours / AUTO_BIN_HOURS))
    return fpt.histogram_density(ens.observed, bins, (0.0, ens.max_span_hours))


def cmd_fpt(run: Run) -> None:
    ens = _ensemble(run.cfg)
    run.csv("fpt_ensemble.csv", ["trial", "fpt_hours", "censored"],
            [np.arange(ens.samples_hours.size), ens.samples_hours, ens.censored])
    rep = {"trials": int(ens.samples_hours.size), "censored_fraction": ens.censored_fraction,
           "max_span_hours": ens.max_span_hours}
    if ens.observed.size >= 2:
        dens = _density(run.cfg, ens)
        run.csv("fpt_density.csv", ["t_hours", "density"], [dens[:, 0], dens[:, 1]])
    try:
        rep["tail"] = fpt.tail_stats(ens).as_dict()
    except ValueError as exc:
        rep["tail"] = {"error": str(exc)}
    run.report("fpt_report.txt", rep)


def _read_density(path: Path) -> np.ndarray:
    rows = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l and not l.startswith("#")]
    if not rows or rows[0].strip() != "t_hours,density":
        raise ValueError(f"{path}: expected header t_hours,density")
    return np.array([[float(v) for v in r.split(",")] for r in rows[1:]])


def cmd_fit(run: Run, density_path: Path | None = None) -> None:
    cfg = run.cfg
    params = cfg.traffic_params()
    if density_path is not None:
        dens = _read_density(density_path)
        span = None
    else:
        ens = _ensemble(cfg)
        dens = _density(cfg, ens)
        span = ens.max_span_hours
    dens = dens[dens[:, 0] > 0]
    report = {}
    for name, alpha in (("composite", params.alpha), ("pure", 0.0)):
        try:
            fit = fpt.fit_bihill(dens, alpha, params.period_hours, span_hours=span)
            report[name] = fit.as_dict()
        except fpt.FitError as exc:
            report[name] = {**exc.best.as_dict(), "error": str(exc)}
    report["composite_improves"] = report["composite"]["residual"] < report["pure"]["residual"]
    run.report("fit_report.txt", report)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oqkd", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--replay", type=Path, help="rerun from the provenance header of an output file")
    ap.add_argument("--category", choices=["1", "2", "3"])
    ap.add_argument("--days")
    ap.add_argument("--dt-min")
    ap.add_argument("--seed")
    ap.add_argument("--trials")
    ap.add_argument("--workers")
    ap.add_argument("--b0-dku")
    ap.add_argument("--mode", help="instant-balance | constant-mean | fixed:RATE")
    ap.add_argument("--channel-model", help="discrete | cont-lower | cont-upper")
    ap.add_argument("--out")
    ap.add_argument("--input", type=Path, help="density CSV for the fit command")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


FLAG_KEYS = {
    "category": "traffic.category",
    "days": "simulation.days",
    "dt_min": "simulation.dt_minutes",
    "seed": "simulation.seed",
    "trials": "simulation.trials",
    "workers": "simulation.workers",
    "b0_dku": "buffer.b0_dku",
    "mode": "buffer.consumption_mode",
    "channel_model": "buffer.channel_model",
    "out": "output.directory",
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = {}
        for item in args.set:
            key, eq, value = item.partition("=")
            if not eq:
                raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
            overrides[key.strip()] = value.strip()
        for attr, dotted in FLAG_KEYS.items():
            value = getattr(args, attr)
            if value is not None:
                overrides[dotted] = value
        base = output.read_provenance_config(args.replay) if args.replay else None
        cfg = parse_config(args.config, overrides, base)
        run = Run(args.command, cfg)
        handler = globals()[f"cmd_{args.command}"]
        if args.command == "fit":
            handler(run, args.input)
        else:
            handler(run)
    except (ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"oqkd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    for path in run.written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
