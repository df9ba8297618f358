"""File formats and run configuration.

All artifacts are plain text (UTF-8).  Floats are written with Python's
shortest round-trip repr, so identical runs produce byte-identical files.

Grid file: header line ``nx ny dx pollutant_id day``, then nx*ny
whitespace-separated reals in row-major order (x fastest).  Covariate stacks
append a ``j b`` suffix line.  Station files are CSV with header
``site_id,x_km,y_km,day,pollutant,value_raw``; raw values are in original
concentration units and are log-transformed at ingestion, dropping
nonpositive values with a count.  Posterior draws are CSV plus a JSON
sidecar; residual-field draws ride along in an .npz when present.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .filters import CovariateStack
from .grid import GridField, GridSpec
from .inference import BatchPosterior, McmcConfig, Priors
from .lmc import StackedLayout
from .stations import Observation, OutOfGridError, Station, cell_lookup

__all__ = [
    "ParseError",
    "DEFAULT_POLLUTANTS",
    "SEASON_DAYS",
    "write_grid",
    "read_grid",
    "write_covariate",
    "read_covariate",
    "write_station_csv",
    "parse_station_file",
    "write_posterior",
    "read_posterior",
    "write_predictions_csv",
    "write_scorecard_csv",
    "write_coherence_csv",
    "write_aggregate_csv",
    "RunConfig",
]


class ParseError(ValueError):
    """A file violated its documented format; message carries the line."""


#: Default pollutant name table (observed index per name).
DEFAULT_POLLUTANTS = {"PM25": 0, "EC": 1, "OC": 2, "NO3": 3, "SO4": 4, "NH4": 5}

#: Day-of-year ranges of the four seasons.
SEASON_DAYS = {
    "JFM": (1, 90),
    "AMJ": (91, 181),
    "JAS": (182, 273),
    "OND": (274, 365),
}


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# Grid and covariate files
# ---------------------------------------------------------------------------


def write_grid(field: GridField, path) -> None:
    spec = field.spec
    lines = [f"{spec.nx} {spec.ny} {_fmt(spec.dx)} {field.pollutant_id} {field.day}"]
    lines.append(" ".join(_fmt(v) for v in field.values))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_grid_lines(tokens_header, tokens_values, path):
    try:
        nx, ny = int(tokens_header[0]), int(tokens_header[1])
        dx = float(tokens_header[2])
        pollutant_id, day = int(tokens_header[3]), int(tokens_header[4])
    except (IndexError, ValueError):
        raise ParseError(f"{path}: malformed grid header {tokens_header!r}")
    spec = GridSpec(nx, ny, dx)
    if len(tokens_values) != spec.ncells:
        raise ParseError(
            f"{path}: expected {spec.ncells} values, found {len(tokens_values)}"
        )
    values = np.array([float(t) for t in tokens_values])
    return GridField(spec, values, pollutant_id=pollutant_id, day=day)


def read_grid(path, log: bool = False) -> GridField:
    """Read a grid file; ``log=True`` log-transforms at ingestion and
    requires strictly positive values."""
    text = Path(path).read_text(encoding="utf-8").split()
    header, rest = text[:5], text[5:]
    field = _parse_grid_lines(header, rest, path)
    if log:
        if np.any(field.values <= 0):
            raise ParseError(f"{path}: nonpositive values cannot be log-transformed")
        field = GridField(field.spec, np.log(field.values), field.pollutant_id, field.day)
    return field


def write_covariate(stack: CovariateStack, path) -> None:
    spec = stack.spec
    f = stack.field
    lines = [f"{spec.nx} {spec.ny} {_fmt(spec.dx)} {f.pollutant_id} {f.day}"]
    lines.append(" ".join(_fmt(v) for v in f.values))
    lines.append(f"{stack.pollutant_id} {stack.basis_index}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_covariate(path) -> CovariateStack:
    text = Path(path).read_text(encoding="utf-8").split()
    header, middle, suffix = text[:5], text[5:-2], text[-2:]
    field = _parse_grid_lines(header, middle, path)
    try:
        j, b = int(suffix[0]), int(suffix[1])
    except ValueError:
        raise ParseError(f"{path}: malformed covariate suffix {suffix!r}")
    return CovariateStack(spec=field.spec, pollutant_id=j, basis_index=b, field=field)


# ---------------------------------------------------------------------------
# Station files
# ---------------------------------------------------------------------------

STATION_HEADER = "site_id,x_km,y_km,day,pollutant,value_raw"


def write_station_csv(stations: dict, observations, path, pollutants=None) -> None:
    """Observations back to CSV on the original (exp) scale."""
    names = {v: k for k, v in (pollutants or DEFAULT_POLLUTANTS).items()}
    lines = [STATION_HEADER]
    for o in observations:
        st = stations[o.site_id]
        name = names.get(o.pollutant_id, str(o.pollutant_id))
        lines.append(
            f"{o.site_id},{_fmt(st.x)},{_fmt(st.y)},{o.day},{name},{_fmt(np.exp(o.value))}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_station_file(path, spec: GridSpec, pollutants=None):
    """Parse a station CSV into stations and log-scale observations.

    Returns (stations, observations, n_dropped).  Nonpositive raw values are
    dropped and counted; malformed lines, unknown pollutant names,
    inconsistent coordinates, and out-of-grid stations are errors.
    """
    table = dict(pollutants or DEFAULT_POLLUTANTS)
    # numeric pollutant ids are accepted as-is
    stations: dict = {}
    measures: dict = {}
    observations = []
    dropped = 0
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != STATION_HEADER:
        raise ParseError(f"{path}:1: expected header {STATION_HEADER!r}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise ParseError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        sid, xs, ys, ds, pname, vs = (p.strip() for p in parts)
        try:
            x, y, day, raw = float(xs), float(ys), int(ds), float(vs)
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}")
        if pname in table:
            pol = table[pname]
        elif pname.isdigit():
            pol = int(pname)
        else:
            raise ParseError(f"{path}:{lineno}: unknown pollutant {pname!r}")
        if sid in stations:
            st = stations[sid]
            if (st.x, st.y) != (x, y):
                raise ParseError(f"{path}:{lineno}: station {sid} moved coordinates")
        else:
            probe = Station(site_id=sid, x=x, y=y, measures=frozenset([pol]))
            try:
                cell_lookup(probe, spec)
            except OutOfGridError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}")
            stations[sid] = probe
        measures.setdefault(sid, set()).add(pol)
        if raw <= 0:
            dropped += 1
            continue
        observations.append(
            Observation(site_id=sid, day=day, pollutant_id=pol, value=float(np.log(raw)))
        )
    stations = {
        sid: Station(site_id=sid, x=st.x, y=st.y, measures=frozenset(measures[sid]))
        for sid, st in stations.items()
    }
    if dropped:
        warnings.warn(f"{path}: dropped {dropped} nonpositive value(s)", stacklevel=2)
    return stations, observations, dropped


# ---------------------------------------------------------------------------
# Posterior draws
# ---------------------------------------------------------------------------


def write_posterior(post: BatchPosterior, csv_path) -> None:
    """Draws CSV + JSON sidecar; residual draws, if any, go to an .npz."""
    csv_path = Path(csv_path)
    lines = [",".join(post.param_names)]
    for row in post.draws:
        lines.append(",".join(_fmt(v) for v in row))
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    meta = {
        "n_draws": int(post.n_draws),
        "seed": post.seed,
        "acceptance": {k: float(v) for k, v in post.acceptance.items()},
        "days": list(post.days),
        "n_beta": post.n_beta,
        "n_pollutants": post.n_pollutants,
        "transforms": list(post.transforms),
        "decay_bounds": list(post.decay_bounds) if post.decay_bounds else None,
    }
    csv_path.with_suffix(".json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    if post.w_draws is not None:
        arrays = {f"w_day_{d}": arr for d, arr in post.w_draws.items()}
        arrays["layout_day"] = post.w_layout.day
        arrays["layout_pollutant"] = post.w_layout.pollutant
        arrays["layout_coords"] = post.w_layout.coords
        np.savez(csv_path.with_suffix(".w.npz"), **arrays)

    if post.natural is not None:
        nat_path = csv_path.with_name(csv_path.stem + "_natural.csv")
        names = [n.replace(".log", "").replace(".logit", "") for n in post.param_names]
        lines = [",".join(names)]
        for row in post.natural:
            lines.append(",".join(_fmt(v) for v in row))
        nat_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_posterior(csv_path) -> BatchPosterior:
    csv_path = Path(csv_path)
    lines = csv_path.read_text(encoding="utf-8").splitlines()
    names = tuple(lines[0].split(","))
    draws = np.array([[float(v) for v in line.split(",")] for line in lines[1:] if line])
    meta = json.loads(csv_path.with_suffix(".json").read_text(encoding="utf-8"))
    w_draws = None
    w_layout = None
    npz_path = csv_path.with_suffix(".w.npz")
    if npz_path.exists():
        data = np.load(npz_path)
        w_layout = StackedLayout(
            day=data["layout_day"],
            pollutant=data["layout_pollutant"],
            coords=data["layout_coords"],
        )
        w_draws = {
            int(key[len("w_day_"):]): data[key]
            for key in data.files
            if key.startswith("w_day_")
        }
    return BatchPosterior(
        draws=draws,
        param_names=names,
        transforms=tuple(meta["transforms"]),
        sample_cov=np.cov(draws, rowvar=False),
        n_beta=int(meta["n_beta"]),
        n_pollutants=int(meta["n_pollutants"]),
        days=tuple(meta["days"]),
        seed=meta["seed"],
        decay_bounds=tuple(meta["decay_bounds"]) if meta["decay_bounds"] else None,
        acceptance=dict(meta["acceptance"]),
        w_draws=w_draws,
        w_layout=w_layout,
    )


# ---------------------------------------------------------------------------
# Result tables
# ---------------------------------------------------------------------------


def write_predictions_csv(results, path, pollutants=None) -> None:
    """``site_or_cell,x,y,day,pollutant,pred,lo95,hi95``; pred and the 95%
    bounds are on the original concentration scale."""
    names = {v: k for k, v in (pollutants or DEFAULT_POLLUTANTS).items()}
    lines = ["site_or_cell,x,y,day,pollutant,pred,lo95,hi95"]
    for r in results:
        t = r.target
        name = names.get(t.pollutant_id, str(t.pollutant_id))
        lines.append(
            f"{t.site_id},{_fmt(t.x)},{_fmt(t.y)},{t.day},{name},"
            f"{_fmt(r.point)},{_fmt(np.exp(r.lo_log))},{_fmt(np.exp(r.hi_log))}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_scorecard_csv(scorecards, path, pollutants=None) -> None:
    """Rows = variants, columns = pollutants, cells = ``RMSE(corr)``.

    Multiple scorecards per variant (one per fold) are averaged.
    """
    names = {v: k for k, v in (pollutants or DEFAULT_POLLUTANTS).items()}
    by_variant: dict = {}
    pol_ids: set = set()
    for card in scorecards:
        by_variant.setdefault(card.variant, []).append(card)
        pol_ids.update(card.rmse)
    pol_ids = sorted(pol_ids)
    lines = ["variant," + ",".join(names.get(k, str(k)) for k in pol_ids)]
    for variant, cards in by_variant.items():
        cells = []
        for k in pol_ids:
            rmses = [c.rmse[k] for c in cards if k in c.rmse]
            corrs = [c.corr[k] for c in cards if c.corr.get(k) is not None]
            if not rmses:
                cells.append("NA")
                continue
            rmse = float(np.mean(rmses))
            corr = f"{float(np.mean(corrs)):.2f}" if corrs else "NA"
            cells.append(f"{rmse:.2f}({corr})")
        lines.append(f"{variant}," + ",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_coherence_csv(curves, path) -> None:
    lines = ["k,j,magnitude,period_km,mean,lo,hi,significant"]
    for c in curves:
        flag = "true" if c.significant else "false"
        for i in range(c.magnitudes.shape[0]):
            lines.append(
                f"{c.k},{c.j},{_fmt(c.magnitudes[i])},{_fmt(c.periods_km[i])},"
                f"{_fmt(c.mean[i])},{_fmt(c.lo[i])},{_fmt(c.hi[i])},{flag}"
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_aggregate_csv(rows, path, pollutants=None) -> None:
    names = {v: k for k, v in (pollutants or DEFAULT_POLLUTANTS).items()}
    lines = ["region,pollutant,n,mean_pred,mean_obs"]
    for region, k, n, mean_pred, mean_obs in rows:
        obs = _fmt(mean_obs) if mean_obs is not None else "NA"
        lines.append(f"{region},{names.get(k, str(k))},{n},{_fmt(mean_pred)},{obs}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """One JSON document drives every subcommand; defaults are embedded here
    and dumped by ``print-config`` for reproducibility."""

    grids_dir: str = "grids"
    stations_file: str = "stations.csv"
    output_dir: str = "out"
    variant: str = "Spatial SD + Cross"
    basis_size: int = 5
    basis_degree: int = 3
    center: bool = False
    folds: int = 5
    seed: int = 1234
    jobs: int = 1
    season: str = "JFM"
    season_days: dict = field(default_factory=lambda: {k: list(v) for k, v in SEASON_DAYS.items()})
    pollutants: dict = field(default_factory=lambda: dict(DEFAULT_POLLUTANTS))
    batch_len: int = 3
    mcmc: dict = field(
        default_factory=lambda: {
            "iterations": 5000,
            "burnin": 2000,
            "thin": 3,
            "step_decay": 0.8,
            "step_coreg": 0.3,
            "adapt": True,
        }
    )
    priors: dict = field(
        default_factory=lambda: {
            "beta_sd": 100.0,
            "coreg_offdiag_sd": 10.0,
            "coreg_diag_log_sd": 10.0,
            "nugget_shape": 2.0,
            "nugget_scale": 0.1,
        }
    )
    n_ols_draws: int = 1000
    max_kriging_draws: int = 400
    simulate: dict = field(
        default_factory=lambda: {
            "nx": 32,
            "ny": 32,
            "dx": 12.0,
            "n_observed": 2,
            "n_gridded": 2,
            "beta0": [1.0, 0.5],
            "beta_scale": 0.6,
            "cross_scale": 0.3,
            "coreg_diag": 0.5,
            "coreg_offdiag": 0.25,
            "effective_range_fraction": 0.33,
            "nugget2": [0.04, 0.04],
            "n_stations": 60,
            "strata_mix": [0.7, 0.1, 0.2],
            "cadence": "daily",
            "days": 18,
            "field_variance": 1.0,
            "field_range_cells": 4.0,
            "field_exponent": 1.5,
            "field_cross_corr": 0.3,
        }
    )

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        cfg = cls()
        for key, value in data.items():
            if not hasattr(cfg, key):
                raise ParseError(f"unknown config key {key!r}")
            if isinstance(getattr(cfg, key), dict) and isinstance(value, dict):
                merged = dict(getattr(cfg, key))
                merged.update(value)
                setattr(cfg, key, merged)
            else:
                setattr(cfg, key, value)
        return cfg

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def mcmc_config(self, seed: int) -> McmcConfig:
        return McmcConfig(seed=seed, **self.mcmc)

    def priors_for(self, spec: GridSpec) -> Priors:
        return Priors(
            decay_bounds=(
                3.0 / (0.75 * spec.diameter_km),
                3.0 / (0.1 * spec.diameter_km),
            ),
            **self.priors,
        )

    def season_day_list(self) -> list:
        lo, hi = self.season_days[self.season]
        return list(range(int(lo), int(hi) + 1))
