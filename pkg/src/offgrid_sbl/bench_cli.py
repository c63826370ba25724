"""Monte Carlo benchmark harness and command-line entry point.

Subcommands::

    offgrid-sbl bench --scenario ula-pilots.yaml --methods offgrid,sbl --trials 50 --out r.csv
    offgrid-sbl single --scenario ula-pilots.yaml --method offgrid --seed 3 --trace t.csv
    offgrid-sbl leakage --n 80 --theta 5.0198 --out leak.csv
    offgrid-sbl gen-scenario ula-pilots --out ula-pilots.yaml

Scenarios are YAML files (see :data:`PRESETS` for the shipped ones).  Every
method in a trial sees the same channel, pilots and noise.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .array_model import ArrayGeometry, leakage_coefficient
from .baselines import L1Config, default_epsilon, dft_estimate, overcomplete_dft_estimate
from .channel_sim import (
    ClusterChannelConfig,
    generate_channel,
    generate_pilots,
    ls_uplink_estimate,
    nmse,
    noise_variance,
    observe_downlink,
    observe_uplink,
    orthogonal_pilots,
    uplink_realization,
)
from .joint_uplink import estimate_uplink_aided
from .offgrid_refine import RefineConfig, estimate_offgrid_2d, estimate_offgrid_linear, write_trace
from .sbl_core import OffGridDictionary

__all__ = [
    "METHODS",
    "PRESETS",
    "BenchRecord",
    "Scenario",
    "ScenarioError",
    "load_scenario",
    "preset",
    "trial_seed",
    "run_trial",
    "run_benchmark",
    "summarize",
    "write_records",
    "read_records",
    "run_single",
    "run_leakage",
    "main",
]

SPEED_OF_LIGHT = 299_792_458.0
METHODS = ("offgrid", "uplink_aided", "sbl", "dft", "odft")
THREADS_ENV = "OFFGRID_SBL_THREADS"


class ScenarioError(ValueError):
    """Malformed scenario file or unsupported method/scenario combination."""


# ---------------------------------------------------------------- scenarios

_ULA_PILOTS = {
    "name": "ula-pilots",
    "array": {"kind": "ula", "n": 150},
    "spacing_mhz": 2000.0,
    "downlink_mhz": 2170.0,
    "uplink_mhz": 1980.0,
    "channel": {
        "n_clusters": 3,
        "n_subpaths": 10,
        "azimuth_range_deg": [-40.0, 40.0],
        "angular_spread_deg": 20.0,
    },
    "grid": {"kind": "spatial_frequency", "size": 200},
    "pilots": 100,
    "snr_db": 10.0,
    "users": 10,
    "trials": 50,
}

PRESETS: dict[str, dict] = {
    "ula-pilots": _ULA_PILOTS,
    "ula-pilots-full": {**_ULA_PILOTS, "name": "ula-pilots-full", "trials": 200,
                   "sweep": {"key": "pilots", "values": [30, 40, 50, 60, 70, 80, 90, 100]}},
    "ula-grid": {**_ULA_PILOTS, "name": "ula-grid", "pilots": 70,
             "channel": {**_ULA_PILOTS["channel"], "azimuth_range_deg": [-90.0, 90.0]},
             "sweep": {"key": "grid_size", "values": [150, 200, 250, 300]}},
    "ula-grid-full": {**_ULA_PILOTS, "name": "ula-grid-full", "pilots": 70, "trials": 200,
                  "channel": {**_ULA_PILOTS["channel"], "azimuth_range_deg": [-90.0, 90.0]},
                  "sweep": {"key": "grid_size", "values": [150, 200, 250, 300, 350, 400]}},
    "planar2d": {
        "name": "planar2d",
        "array": {"kind": "planar", "nx": 8, "ny": 4},
        "spacing_mhz": 2170.0,
        "downlink_mhz": 2170.0,
        "uplink_mhz": 1980.0,
        "channel": {
            "n_clusters": 4,
            "n_subpaths": 1,
            "azimuth_range_deg": [-180.0, 180.0],
            "angular_spread_deg": 0.0,
            "elevation_range_deg": [-90.0, 90.0],
        },
        "grid": {"kind": "uniform", "size": 96, "domain_deg": [-180.0, 180.0]},
        "pilots": 24,
        "snr_db": 10.0,
        "users": 10,
        "trials": 50,
    },
    "planar2d-full": {
        "name": "planar2d-full",
        "array": {"kind": "planar", "nx": 20, "ny": 10},
        "spacing_mhz": 2170.0,
        "downlink_mhz": 2170.0,
        "uplink_mhz": 1980.0,
        "channel": {
            "n_clusters": 20,
            "n_subpaths": 20,
            "azimuth_range_deg": [-180.0, 180.0],
            "angular_spread_deg": 20.0,
            "elevation_range_deg": [-90.0, 90.0],
            "elevation_spread_deg": 10.0,
        },
        "grid": {"kind": "uniform", "size": 300, "domain_deg": [-180.0, 180.0]},
        "pilots": 100,
        "snr_db": 10.0,
        "users": 10,
        "trials": 200,
        "sweep": {"key": "pilots", "values": [40, 60, 80, 100, 120]},
    },
}

_TOP_KEYS = {"name", "array", "spacing_mhz", "downlink_mhz", "uplink_mhz", "channel", "grid",
             "pilots", "snr_db", "users", "trials", "sweep", "refine"}
_CHANNEL_KEYS = {"n_clusters", "n_subpaths", "azimuth_range_deg", "angular_spread_deg",
                 "elevation_range_deg", "elevation_spread_deg"}
_SWEEP_KEYS = ("pilots", "grid_size", "snr_db")


@dataclass(frozen=True)
class Scenario:
    """One fully resolved sweep point of a scenario file."""

    name: str
    geom: ArrayGeometry
    linear: bool
    spacing: float
    wl_down: float
    wl_up: float
    channel: ClusterChannelConfig
    grid_kind: str
    grid_size: int
    grid_domain: tuple[float, float]
    pilots: int
    snr_db: float
    users: int
    refine: RefineConfig

    @property
    def n_antennas(self) -> int:
        return self.geom.n_sensors

    def dictionary(self) -> OffGridDictionary:
        if self.grid_kind == "spatial_frequency":
            return OffGridDictionary.spatial_frequency(self.geom, self.wl_down, self.grid_size,
                                                       self.spacing)
        return OffGridDictionary.uniform(self.geom, self.wl_down, self.grid_size, self.grid_domain)


def _need(d: dict, key: str, ctx: str):
    if key not in d:
        raise ScenarioError(f"{ctx}: missing key '{key}'")
    return d[key]


def _number(d: dict, key: str, ctx: str, default=None, kind=float):
    v = d.get(key, default)
    if v is None:
        raise ScenarioError(f"{ctx}: missing key '{key}'")
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{ctx}.{key}: expected a number, got {v!r}")
    if kind is int and v != int(v):
        raise ScenarioError(f"{ctx}.{key}: expected an integer, got {v!r}")
    return kind(v)


def _pair_deg(d: dict, key: str, ctx: str, default):
    v = d.get(key, default)
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise ScenarioError(f"{ctx}.{key}: expected [lo, hi] in degrees, got {v!r}")
    try:
        lo, hi = (math.radians(float(x)) for x in v)
    except (TypeError, ValueError):
        raise ScenarioError(f"{ctx}.{key}: expected numbers, got {v!r}") from None
    return lo, hi


def _geometry(spec: dict, spacing: float, base: Path | None) -> tuple[ArrayGeometry, bool]:
    if not isinstance(spec, dict):
        raise ScenarioError("array: expected a mapping")
    kind = _need(spec, "kind", "array")
    try:
        if kind == "ula":
            n = _number(spec, "n", "array", kind=int)
            return ArrayGeometry.ula(n, spacing), True
        if kind == "planar":
            nx = _number(spec, "nx", "array", kind=int)
            ny = _number(spec, "ny", "array", kind=int)
            return ArrayGeometry.planar(nx, ny, spacing), ny == 1
        if kind == "file":
            path = Path(_need(spec, "path", "array"))
            if base is not None and not path.is_absolute():
                path = base / path
            geom = ArrayGeometry.from_file(path)
            xy = geom.xy
            return geom, bool(np.allclose(xy[:, 1], 0.0, atol=1e-12 * max(1.0, np.abs(xy).max())))
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"array: {exc}") from exc
    raise ScenarioError(f"array.kind: unknown kind {kind!r} (ula, planar, file)")


def _refine_config(spec) -> RefineConfig:
    if spec is None:
        return RefineConfig()
    if not isinstance(spec, dict):
        raise ScenarioError("refine: expected a mapping")
    known = {f.name for f in fields(RefineConfig)}
    bad = set(spec) - known
    if bad:
        raise ScenarioError(f"refine: unknown keys {sorted(bad)}")
    try:
        return RefineConfig(**spec)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"refine: {exc}") from exc


def resolve_scenario(raw: dict, base: Path | None = None) -> list[Scenario]:
    """Validate a parsed scenario mapping and expand its sweep into points."""
    if not isinstance(raw, dict):
        raise ScenarioError("scenario: top level must be a mapping")
    bad = set(raw) - _TOP_KEYS
    if bad:
        raise ScenarioError(f"scenario: unknown keys {sorted(bad)}")
    name = str(raw.get("name", "scenario"))
    f_sp = _number(raw, "spacing_mhz", "scenario") * 1e6
    wl_down = SPEED_OF_LIGHT / (_number(raw, "downlink_mhz", "scenario") * 1e6)
    wl_up = SPEED_OF_LIGHT / (_number(raw, "uplink_mhz", "scenario", default=raw.get("downlink_mhz")) * 1e6)
    spacing = SPEED_OF_LIGHT / (2.0 * f_sp)
    geom, linear = _geometry(_need(raw, "array", "scenario"), spacing, base)

    ch = _need(raw, "channel", "scenario")
    if not isinstance(ch, dict):
        raise ScenarioError("channel: expected a mapping")
    bad = set(ch) - _CHANNEL_KEYS
    if bad:
        raise ScenarioError(f"channel: unknown keys {sorted(bad)}")
    try:
        channel = ClusterChannelConfig(
            n_clusters=_number(ch, "n_clusters", "channel", kind=int),
            n_subpaths=_number(ch, "n_subpaths", "channel", kind=int),
            azimuth_range=_pair_deg(ch, "azimuth_range_deg", "channel", [-40, 40]),
            angular_spread=math.radians(_number(ch, "angular_spread_deg", "channel", 0.0)),
            elevation_range=_pair_deg(ch, "elevation_range_deg", "channel", [0, 0]),
            elevation_spread=math.radians(_number(ch, "elevation_spread_deg", "channel", 0.0)),
        )
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"channel: {exc}") from exc

    grid = _need(raw, "grid", "scenario")
    if not isinstance(grid, dict):
        raise ScenarioError("grid: expected a mapping")
    grid_kind = grid.get("kind", "spatial_frequency")
    if grid_kind not in ("spatial_frequency", "uniform"):
        raise ScenarioError(f"grid.kind: unknown kind {grid_kind!r} (spatial_frequency, uniform)")
    if grid_kind == "spatial_frequency" and not linear:
        raise ScenarioError("grid.kind: spatial_frequency needs a linear array")
    domain = _pair_deg(grid, "domain_deg", "grid", [-90, 90])

    base_point = Scenario(
        name=name,
        geom=geom,
        linear=linear,
        spacing=spacing,
        wl_down=wl_down,
        wl_up=wl_up,
        channel=channel,
        grid_kind=grid_kind,
        grid_size=_number(grid, "size", "grid", kind=int),
        grid_domain=domain,
        pilots=_number(raw, "pilots", "scenario", kind=int),
        snr_db=_number(raw, "snr_db", "scenario"),
        users=_number(raw, "users", "scenario", default=1, kind=int),
        refine=_refine_config(raw.get("refine")),
    )
    points = [base_point]
    sweep = raw.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, dict):
            raise ScenarioError("sweep: expected a mapping with 'key' and 'values'")
        key = _need(sweep, "key", "sweep")
        values = _need(sweep, "values", "sweep")
        if key not in _SWEEP_KEYS:
            raise ScenarioError(f"sweep.key: cannot sweep {key!r} (choose from {', '.join(_SWEEP_KEYS)})")
        if not isinstance(values, list) or not values:
            raise ScenarioError("sweep.values: expected a non-empty list")
        kind = float if key == "snr_db" else int
        field_name = {"grid_size": "grid_size", "pilots": "pilots", "snr_db": "snr_db"}[key]
        points = [replace(base_point, **{field_name: _number({key: v}, key, "sweep.values", kind=kind)})
                  for v in values]
    for p in points:
        if p.pilots < 1 or p.grid_size < 1 or p.users < 1:
            raise ScenarioError("scenario: pilots, grid size and users must be >= 1")
        try:
            p.dictionary()
        except ValueError as exc:
            raise ScenarioError(f"grid: {exc}") from exc
    return points


def load_scenario(source: str | os.PathLike) -> tuple[dict, list[Scenario]]:
    """Read a scenario YAML file, or a preset by name; returns ``(raw, points)``."""
    path = Path(source)
    if not path.exists() and str(source) in PRESETS:
        raw = copy.deepcopy(PRESETS[str(source)])
        return raw, resolve_scenario(raw)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {source}: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ScenarioError(f"{source}: YAML parse error{where}") from exc
    return raw, resolve_scenario(raw, path.parent)


def preset(name: str) -> list[Scenario]:
    """Resolved sweep points of a shipped preset."""
    if name not in PRESETS:
        raise ScenarioError(f"unknown preset {name!r} (known: {', '.join(PRESETS)})")
    return resolve_scenario(copy.deepcopy(PRESETS[name]))


# ---------------------------------------------------------------- trials

@dataclass(frozen=True)
class BenchRecord:
    """One method on one Monte Carlo trial; field order is the CSV column order."""

    method: str
    scenario: str
    N: int
    T: int
    snr_db: float
    grid_size: int
    trial: int
    seed: int
    nmse: float
    iterations: int
    runtime_ms: float
    flags: str = ""

    def __post_init__(self):
        if not self.nmse >= 0:
            raise ValueError(f"nmse must be non-negative, got {self.nmse}")


CSV_FIELDS = tuple(f.name for f in fields(BenchRecord))


def trial_seed(master_seed: int, trial: int) -> int:
    """Per-trial seed; independent of the sweep point so sweeps share random numbers."""
    return int(np.random.SeedSequence([master_seed, trial]).generate_state(1)[0])


@dataclass(frozen=True, eq=False)
class TrialData:
    X: np.ndarray
    y: np.ndarray
    h: np.ndarray
    h_bar_ls: np.ndarray | None
    noise_var: float
    phi_seed: np.random.SeedSequence


def draw_trial(sc: Scenario, seed: int, with_uplink: bool = True) -> TrialData:
    """All random inputs of one trial, shared by every method."""
    ss = np.random.SeedSequence(seed).spawn(6)
    N, T = sc.n_antennas, sc.pilots
    sig2 = noise_variance(sc.snr_db)
    ch = generate_channel(sc.channel, sc.geom, sc.wl_down, ss[0])
    X = generate_pilots(T, N, 1.0, ss[1]).X
    y = observe_downlink(X, ch.h, sig2, ss[2])
    hb = None
    if with_uplink:
        K = sc.users
        # child 0 drives the uplink noise, children 1.. the other users' channels
        others = ss[4].spawn(K)
        cols = [uplink_realization(ch, sc.geom, sc.wl_up, ss[3]).h]
        cols += [generate_channel(sc.channel, sc.geom, sc.wl_up, others[k]).h for k in range(1, K)]
        obs = observe_uplink(np.column_stack(cols), orthogonal_pilots(K, K), sig2, others[0])
        hb = ls_uplink_estimate(obs)[:, 0]
    return TrialData(X=X, y=y, h=ch.h, h_bar_ls=hb, noise_var=sig2, phi_seed=ss[5])


def _estimate(method: str, sc: Scenario, data: TrialData, dic: OffGridDictionary):
    """Run one method; returns ``(h, iterations, flags, trace)``."""
    cfg = sc.refine
    if method in ("dft", "odft"):
        l1 = L1Config(epsilon=default_epsilon(sc.pilots, data.noise_var))
        if method == "dft":
            h, res = dft_estimate(data.y, data.X, sc.n_antennas, l1, full_output=True)
        else:
            h, res = overcomplete_dft_estimate(data.y, data.X, sc.grid_size, l1, full_output=True)
        return h, res.iterations, "" if res.feasible else "infeasible", None
    if method == "uplink_aided":
        if not sc.linear:
            raise ScenarioError("uplink_aided needs a linear array")
        est = estimate_uplink_aided(data.y, data.X, data.h_bar_ls, dic, sc.wl_up, cfg=cfg)
    elif sc.linear:
        if method == "sbl":
            cfg = replace(cfg, refine_beta=False)
        est = estimate_offgrid_linear(data.y, data.X, dic, cfg=cfg)
    else:
        if method == "sbl":
            cfg = replace(cfg, refine_beta=False, refine_phi=False)
        est = estimate_offgrid_2d(data.y, data.X, dic, cfg=cfg, seed=data.phi_seed)
    flags = "max_iters" if len(est.trace) >= cfg.max_iters else ""
    return est.h, len(est.trace), flags, est.trace


def run_trial(sc: Scenario, methods, trial: int, seed: int, stable: bool = False) -> list[BenchRecord]:
    """Every method in ``methods`` on one shared draw."""
    data = draw_trial(sc, seed, with_uplink="uplink_aided" in methods)
    dic = sc.dictionary()
    out = []
    for m in methods:
        t0 = time.perf_counter()
        h, iters, flags, _ = _estimate(m, sc, data, dic)
        ms = 0.0 if stable else (time.perf_counter() - t0) * 1e3
        out.append(BenchRecord(m, sc.name, sc.n_antennas, sc.pilots, sc.snr_db, sc.grid_size,
                               trial, seed, nmse(h, data.h), iters, ms, flags))
    return out


def _check_methods(methods) -> list[str]:
    methods = list(methods)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ScenarioError(f"unknown method(s) {', '.join(bad)} (choose from {', '.join(METHODS)})")
    if not methods:
        raise ScenarioError("no methods given")
    return methods


def _job(args):
    point_idx, sc, methods, trial, seed, stable = args
    return point_idx, run_trial(sc, methods, trial, seed, stable)


def run_points(points: list[Scenario], methods, trials: int, master_seed: int,
               threads: int = 1, stable: bool = False) -> list[tuple[int, BenchRecord]]:
    """Records tagged with their sweep index, sorted by (sweep point, method, trial)."""
    methods = _check_methods(methods)
    if trials < 1:
        raise ScenarioError("trials must be >= 1")
    for sc in points:
        if "uplink_aided" in methods and not sc.linear:
            raise ScenarioError("uplink_aided needs a linear array")
    jobs = [(i, sc, methods, t, trial_seed(master_seed, t), stable)
            for i, sc in enumerate(points) for t in range(trials)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    order = {m: k for k, m in enumerate(methods)}
    tagged = [(i, r) for i, recs in results for r in recs]
    tagged.sort(key=lambda ir: (ir[0], order[ir[1].method], ir[1].trial))
    return tagged


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_records(records, out) -> None:
    """CSV with a header row; floats use ``repr`` so they round-trip exactly."""
    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([_fmt(getattr(r, k)) for k in CSV_FIELDS])
    if hasattr(out, "write"):
        emit(out)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            emit(fh)


def read_records(path) -> list[BenchRecord]:
    casts = {f.name: f.type for f in fields(BenchRecord)}
    conv = {"int": int, "float": float, "str": str}
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [BenchRecord(**{k: conv[casts[k]](row[k]) for k in CSV_FIELDS}) for row in rows]


def summarize(records) -> dict[tuple, float]:
    """Mean NMSE keyed by ``(method, T, grid_size, snr_db)``."""
    groups: dict[tuple, list[float]] = {}
    for r in records:
        groups.setdefault((r.method, r.T, r.grid_size, r.snr_db), []).append(r.nmse)
    return {k: math.fsum(v) / len(v) for k, v in groups.items()}


def format_summary(records) -> str:
    s = summarize(records)
    methods = list(dict.fromkeys(k[0] for k in s))
    points = list(dict.fromkeys(k[1:] for k in s))
    buf = io.StringIO()
    buf.write(f"{'T':>5} {'L':>5} {'SNR':>6}" + "".join(f" {m:>13}" for m in methods) + "\n")
    for T, L, snr in points:
        cells = "".join(f" {s[(m, T, L, snr)]:13.4e}" if (m, T, L, snr) in s else f" {'-':>13}"
                        for m in methods)
        buf.write(f"{T:>5} {L:>5} {snr:>6g}{cells}\n")
    return buf.getvalue()


def run_benchmark(scenario_file, methods, trials: int | None, master_seed: int, out_path,
                  threads: int = 1, stable: bool = False, stream=None) -> list[BenchRecord]:
    """Run a scenario file end to end, write the CSV and print the summary table."""
    raw, points = load_scenario(scenario_file)
    n = trials if trials is not None else int(raw.get("trials", 50))
    tagged = run_points(points, methods, n, master_seed, threads, stable)
    records = [r for _, r in tagged]
    if out_path is not None:
        write_records(records, out_path)
    print(format_summary(records), end="", file=stream or sys.stdout)
    return records


def run_single(scenario_file, method: str, seed: int, trace_path=None, stream=None) -> float:
    """One estimation on the first sweep point; prints NMSE and writes the iteration trace."""
    _check_methods([method])
    _, points = load_scenario(scenario_file)
    sc = points[0]
    data = draw_trial(sc, trial_seed(seed, 0), with_uplink=method == "uplink_aided")
    h, iters, flags, trace = _estimate(method, sc, data, sc.dictionary())
    err = nmse(h, data.h)
    stream = stream or sys.stdout
    print(f"method={method} nmse={err!r} iterations={iters}" + (f" flags={flags}" if flags else ""),
          file=stream)
    if trace_path is not None:
        if trace is None:
            raise ScenarioError(f"method {method} has no evidence trace")
        write_trace(trace, trace_path)
    return err


def run_leakage(N: int, d_over_lambda: float, theta_deg, out_path=None, stream=None) -> np.ndarray:
    """DFT-bin magnitudes ``|v_n(theta)|`` for each angle; rows ``(n, theta_deg, magnitude)``."""
    thetas = np.atleast_1d(np.asarray(theta_deg, dtype=float))
    n = np.arange(1, N + 1)
    mags = leakage_coefficient(n[None, :], np.deg2rad(thetas)[:, None], N, d_over_lambda)
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("n", "theta_deg", "magnitude"))
            for i, th in enumerate(thetas):
                for k in range(N):
                    w.writerow((int(n[k]), repr(float(th)), repr(float(mags[i, k]))))
    stream = stream or sys.stdout
    for i, th in enumerate(thetas):
        top = np.argsort(mags[i], kind="stable")[::-1][:4] + 1
        print(f"theta={th:g} deg: strongest bins {', '.join(map(str, top))}", file=stream)
    return mags


# ---------------------------------------------------------------- CLI

def _threads(value) -> int:
    if value is None:
        value = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(value)
    except ValueError:
        raise ScenarioError(f"threads must be an integer, got {value!r}") from None
    if n < 1:
        raise ScenarioError("threads must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="offgrid-sbl", description="Off-grid SBL channel estimation benchmarks.")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="Monte Carlo benchmark over a scenario")
    b.add_argument("--scenario", required=True, help="scenario YAML file or preset name")
    b.add_argument("--methods", default=",".join(METHODS), help="comma-separated subset of %(default)s")
    b.add_argument("--trials", type=int, default=None, help="override the scenario's trial count")
    b.add_argument("--seed", type=int, default=0, help="master seed")
    b.add_argument("--threads", default=None, help=f"worker processes (default ${THREADS_ENV} or 1)")
    b.add_argument("--out", default=None, help="CSV output path")
    b.add_argument("--stable", action="store_true", help="write runtime_ms as 0 for byte-stable output")

    s = sub.add_parser("single", help="one estimation with its evidence trace")
    s.add_argument("--scenario", required=True)
    s.add_argument("--method", default="offgrid", choices=METHODS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trace", default=None, help="per-iteration trace CSV")

    lk = sub.add_parser("leakage", help="DFT leakage profile of a ULA steering vector")
    lk.add_argument("--n", type=int, default=80)
    lk.add_argument("--d-over-lambda", type=float, default=0.5)
    lk.add_argument("--theta", type=float, nargs="+", default=[5.0198], help="angles in degrees")
    lk.add_argument("--out", default=None)

    g = sub.add_parser("gen-scenario", help="write a preset scenario file")
    g.add_argument("preset", choices=sorted(PRESETS))
    g.add_argument("--out", default=None, help="output path (default stdout)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "bench":
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
            run_benchmark(args.scenario, methods, args.trials, args.seed, args.out,
                          _threads(args.threads), args.stable)
        elif args.command == "single":
            run_single(args.scenario, args.method, args.seed, args.trace)
        elif args.command == "leakage":
            run_leakage(args.n, args.d_over_lambda, args.theta, args.out)
        else:
            text = yaml.safe_dump(PRESETS[args.preset], sort_keys=False)
            if args.out:
                Path(args.out).write_text(text, encoding="utf-8")
            else:
                sys.stdout.write(text)
    except ScenarioError as exc:
        parser.exit(2, f"{parser.prog}: error: {exc}\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
