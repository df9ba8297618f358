"""End-to-end orchestration behind the command-line interface.

Each ``cmd_*`` function implements one subcommand against a
:class:`~specdown.fileio.RunConfig`; they are plain functions so tests can
drive the same pipeline in-process.  Batch fitting dispatches across a
process pool when ``jobs > 1``; every batch owns a seed derived from
(master seed, batch index), so results do not depend on the pool size.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .evaluate import (
    PredictionContext,
    PredictionTarget,
    aggregate_means,
    coherence_curve,
    cv_split,
    predict,
    score,
    split_season,
)
from .fileio import (
    RunConfig,
    read_grid,
    read_posterior,
    write_aggregate_csv,
    write_coherence_csv,
    write_covariate,
    write_grid,
    write_posterior,
    write_predictions_csv,
    write_scorecard_csv,
    write_station_csv,
    parse_station_file,
)
from .filters import FrequencyBand, band_filter, make_basis, spectral_covariates
from .grid import GridField, GridSpec
from .inference import (
    BatchData,
    consensus_combine,
    derive_rng,
    fit_batch_mcmc,
    make_batches,
    ols_posterior,
)
from .stations import (
    ColumnMeta,
    DesignMatrix,
    ModelVariant,
    assemble_design,
    standardize,
    variant_from_name,
)
from .synthetic import FieldSpectrum, SimConfig, simulate

__all__ = [
    "derived_seed",
    "build_sim_config",
    "load_fields",
    "build_covariates",
    "fit_variant",
    "run_cv_protocol",
    "cmd_simulate",
    "cmd_filter",
    "cmd_covariates",
    "cmd_fit",
    "cmd_combine",
    "cmd_predict",
    "cmd_cv",
    "cmd_coherence",
    "cmd_aggregate",
]


def derived_seed(master: int, *key: int) -> int:
    """Deterministic child seed from (master, key...)."""
    return int(np.random.SeedSequence(master, spawn_key=tuple(key)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def build_sim_config(cfg: RunConfig) -> SimConfig:
    """Materialize the ``simulate`` section of a run config.

    True coefficients follow a geometric taper over the basis index
    (coherence concentrated at low frequency): own-species slopes scale with
    ``beta_scale``, cross-species with ``cross_scale``.
    """
    s = cfg.simulate
    spec = GridSpec(int(s["nx"]), int(s["ny"]), float(s["dx"]))
    K, J, B = int(s["n_observed"]), int(s["n_gridded"]), int(cfg.basis_size)
    beta = np.zeros((K, J, B))
    taper = 0.6 ** np.arange(B)
    for k in range(K):
        for j in range(J):
            scale = s["beta_scale"] if j == k else s["cross_scale"]
            beta[k, j] = scale * taper
    coreg = None
    decay = None
    if s.get("coreg_diag", 0.0):
        coreg = np.eye(K) * float(s["coreg_diag"])
        for i in range(1, K):
            coreg[i, 0] = float(s.get("coreg_offdiag", 0.0))
        eff_range = float(s["effective_range_fraction"]) * spec.diameter_km
        decay = 3.0 / eff_range
    return SimConfig(
        spec=spec,
        beta0=np.asarray(s["beta0"], dtype=float)[:K],
        beta=beta,
        nugget2=np.asarray(s["nugget2"], dtype=float)[:K],
        coreg=coreg,
        decay=decay,
        basis_degree=int(cfg.basis_degree),
        spectrum=FieldSpectrum(
            variance=float(s["field_variance"]),
            range_cells=float(s["field_range_cells"]),
            exponent=float(s["field_exponent"]),
        ),
        field_cross_corr=float(s.get("field_cross_corr", 0.0)),
        n_stations=int(s["n_stations"]),
        strata_mix=tuple(s["strata_mix"]),
        cadence=s["cadence"],
        days=int(s["days"]),
        seed=int(cfg.seed),
    )


def load_fields(cfg: RunConfig) -> tuple[GridSpec, dict]:
    """Read every grid file under ``grids_dir``, log-transforming at ingest."""
    grids_dir = Path(cfg.grids_dir)
    paths = sorted(grids_dir.glob("grid_*.txt"))
    if not paths:
        raise FileNotFoundError(f"no grid files matching grid_*.txt under {grids_dir}")
    fields = {}
    spec = None
    for path in paths:
        f = read_grid(path, log=True)
        spec = f.spec
        fields[(f.pollutant_id, f.day)] = f
    return spec, fields


def build_covariates(fields: dict, basis, center: bool = False) -> dict:
    """Spectral covariates for every (field, day); keyed (j, b, day)."""
    covs = {}
    for (j, day), f in fields.items():
        for stack in spectral_covariates(f, basis, center=center):
            covs[(j, stack.basis_index, day)] = stack
    return covs


def _fit_batch_task(payload):
    batch, variant, priors, mcfg = payload
    return fit_batch_mcmc(batch, variant, priors, mcfg)


def fit_variant(
    cfg: RunConfig,
    variant: ModelVariant,
    spec: GridSpec,
    fields: dict,
    covs: dict,
    stations: dict,
    observations,
    train_days,
    seed_key: tuple = (),
):
    """Assemble, standardize, and fit one variant on one training set.

    Returns (design, y, posteriors): a list of per-batch MCMC posteriors for
    spatial variants, or a single-element list holding the least-squares
    pseudo-posterior otherwise.
    """
    train_set = set(int(d) for d in train_days)
    train_obs = [o for o in observations if int(o.day) in train_set]
    design = assemble_design(variant, fields, covs, train_obs, stations)
    design = standardize(design)
    y = np.array([o.value for o in train_obs])
    if variant.spatial:
        batches = make_batches(design, y, train_days, cfg.batch_len)
        priors = cfg.priors_for(spec)
        payloads = [
            (
                batch,
                variant,
                priors,
                cfg.mcmc_config(derived_seed(cfg.seed, *seed_key, i)),
            )
            for i, batch in enumerate(batches)
        ]
        if cfg.jobs > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                posteriors = list(pool.map(_fit_batch_task, payloads))
        else:
            posteriors = [_fit_batch_task(p) for p in payloads]
    else:
        batch = BatchData(
            days=tuple(int(d) for d in train_days),
            y=y,
            X=design.X,
            layout=_layout_of(design),
            n_pollutants=design.n_pollutants,
            design=design,
        )
        posteriors = [
            ols_posterior(batch, n_draws=cfg.n_ols_draws, seed=derived_seed(cfg.seed, *seed_key, 0))
        ]
    return design, y, posteriors


def _layout_of(design: DesignMatrix):
    from .lmc import StackedLayout

    return StackedLayout(
        day=design.row_day,
        pollutant=design.row_pollutant,
        coords=np.column_stack([design.row_x, design.row_y]),
    )


def _design_record(design: DesignMatrix, variant: ModelVariant, train_days) -> dict:
    return {
        "variant": variant.name,
        "train_days": [int(d) for d in train_days],
        "columns": [
            {"kind": c.kind, "k": c.k, "j": c.j, "b": c.b} for c in design.columns
        ],
        "col_mean": [float(v) for v in design.col_mean],
        "col_sd": [float(v) for v in design.col_sd],
        "standardized": design.standardized,
        "zero_variance": list(design.zero_variance),
    }


def _design_from_record(rec: dict) -> DesignMatrix:
    columns = tuple(
        ColumnMeta(kind=c["kind"], k=c["k"], j=c["j"], b=c["b"]) for c in rec["columns"]
    )
    p = len(columns)
    return DesignMatrix(
        X=np.zeros((0, p)),
        columns=columns,
        row_day=np.zeros(0, dtype=int),
        row_pollutant=np.zeros(0, dtype=int),
        row_site=(),
        row_x=np.zeros(0),
        row_y=np.zeros(0),
        col_mean=np.array(rec["col_mean"]),
        col_sd=np.array(rec["col_sd"]),
        standardized=bool(rec["standardized"]),
        zero_variance=tuple(rec["zero_variance"]),
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> list:
    """Write synthetic grid files, a station CSV, and the truth JSON."""
    sim = build_sim_config(cfg)
    truth = simulate(sim)
    out = Path(cfg.output_dir)
    grids = out / "grids"
    grids.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for (j, day), field in sorted(truth.fields.items()):
        raw = GridField(field.spec, np.exp(field.values), j, day)
        path = grids / f"grid_j{j}_d{day:03d}.txt"
        write_grid(raw, path)
        artifacts.append(path)
    stations_path = out / "stations.csv"
    write_station_csv(truth.stations, truth.observations, stations_path, cfg.pollutants)
    artifacts.append(stations_path)
    truth_path = out / "truth.json"
    truth_json = {
        "seed": sim.seed,
        "beta0": sim.beta0.tolist(),
        "beta": sim.beta.tolist(),
        "nugget2": sim.nugget2.tolist(),
        "coreg": sim.coreg.tolist() if sim.coreg is not None else None,
        "decay": sim.decay,
        "days": sim.days,
        "cadence": sim.cadence,
        "n_stations": sim.n_stations,
        "grid": {"nx": sim.spec.nx, "ny": sim.spec.ny, "dx": sim.spec.dx},
    }
    truth_path.write_text(json.dumps(truth_json, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    artifacts.append(truth_path)
    return artifacts


def cmd_filter(cfg: RunConfig, input_path, lo: float, hi: float, output_path) -> list:
    field = read_grid(input_path, log=False)
    filtered = band_filter(field, FrequencyBand(lo, hi))
    write_grid(filtered, output_path)
    return [Path(output_path)]


def cmd_covariates(cfg: RunConfig, input_path, output_dir) -> list:
    field = read_grid(input_path, log=False)
    basis = make_basis(cfg.basis_size, cfg.basis_degree)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for stack in spectral_covariates(field, basis, center=cfg.center):
        path = out / f"covariate_j{stack.pollutant_id}_b{stack.basis_index}_d{field.day:03d}.txt"
        write_covariate(stack, path)
        artifacts.append(path)
    return artifacts


def _prepare_training(cfg: RunConfig):
    spec, fields = load_fields(cfg)
    stations, observations, _ = parse_station_file(cfg.stations_file, spec, cfg.pollutants)
    days = sorted({f.day for f in fields.values()})
    train_days, test_days = split_season(days)
    variant = variant_from_name(cfg.variant)
    basis = make_basis(cfg.basis_size, cfg.basis_degree)
    covs = build_covariates(fields, basis, cfg.center) if variant.mean_kind == "SD" else {}
    return spec, fields, stations, observations, train_days, test_days, variant, basis, covs


def cmd_fit(cfg: RunConfig) -> list:
    """Fit the configured variant; one posterior file per batch."""
    spec, fields, stations, observations, train_days, _, variant, _, covs = _prepare_training(cfg)
    design, y, posteriors = fit_variant(
        cfg, variant, spec, fields, covs, stations, observations, train_days
    )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for i, post in enumerate(posteriors):
        path = out / f"batch_{i:03d}.csv"
        write_posterior(post, path)
        artifacts.append(path)
    rec_path = out / "design.json"
    rec_path.write_text(
        json.dumps(_design_record(design, variant, train_days), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    artifacts.append(rec_path)
    return artifacts


def cmd_combine(cfg: RunConfig) -> list:
    out = Path(cfg.output_dir)
    paths = sorted(out.glob("batch_*.csv"))
    if not paths:
        raise FileNotFoundError(f"no batch posteriors under {out}")
    posteriors = [read_posterior(p) for p in paths]
    combined = consensus_combine(posteriors)
    path = out / "combined.csv"
    write_posterior(combined, path)
    return [path]


def _prediction_context(cfg: RunConfig, spec, fields, covs, design, variant, train_days):
    return PredictionContext(
        variant=variant,
        design=design,
        spec=spec,
        train_days=tuple(int(d) for d in train_days),
        fields=fields,
        covs=covs,
    )


def cmd_predict(cfg: RunConfig, mode: str = "forecast") -> list:
    """Predict at every station for the test (forecast) or training
    (interpolation) days and write the predictions CSV."""
    spec, fields, stations, observations, train_days, test_days, variant, _, covs = _prepare_training(cfg)
    out = Path(cfg.output_dir)
    rec = json.loads((out / "design.json").read_text(encoding="utf-8"))
    design = _design_from_record(rec)
    ctx = _prediction_context(cfg, spec, fields, covs, design, variant, train_days)
    rng = derive_rng(cfg.seed, 9000)
    results = []
    if mode == "forecast":
        combined = read_posterior(out / "combined.csv")
        targets = [
            PredictionTarget(
                x=st.x, y=st.y, pollutant_id=k, day=d, mode="forecast", site_id=st.site_id
            )
            for d in test_days
            for sid, st in sorted(stations.items())
            for k in sorted(st.measures)
        ]
        results = predict(combined, targets, ctx, rng, cfg.max_kriging_draws)
    elif mode == "interpolation":
        paths = sorted(out.glob("batch_*.csv"))
        for path in paths:
            post = read_posterior(path)
            targets = [
                PredictionTarget(
                    x=st.x, y=st.y, pollutant_id=k, day=d, mode="interpolation", site_id=st.site_id
                )
                for d in post.days
                for sid, st in sorted(stations.items())
                for k in sorted(st.measures)
            ]
            if post.has_spatial and post.w_draws is None:
                raise ValueError(f"{path} has no stored residual draws for interpolation")
            results.extend(predict(post, targets, ctx, rng, cfg.max_kriging_draws))
    else:
        raise ValueError(f"mode must be forecast or interpolation, got {mode!r}")
    path = out / f"predictions_{mode}.csv"
    write_predictions_csv(results, path, cfg.pollutants)
    return [path]


def run_cv_protocol(cfg: RunConfig, spec, fields, stations, observations, variants=None):
    """The model-comparison protocol on one dataset.

    Stations are split into stratified folds.  Per variant and fold the model
    trains on the other folds' training-day observations.  Interpolation is
    scored at the held-out stations over the training days (spatial variants
    krige from that batch's residual draws); forecasting is scored at all
    stations over the test days using the consensus-combined (or
    least-squares) posterior.  Returns (interpolation cards, forecast cards).
    """
    variants = list(variants) if variants is not None else list(_default_variants())
    days = sorted({int(o.day) for o in observations})
    train_days, test_days = split_season(days)
    train_set, test_set = set(train_days), set(test_days)
    basis = make_basis(cfg.basis_size, cfg.basis_degree)
    needs_sd = any(v.mean_kind == "SD" for v in variants)
    covs = build_covariates(fields, basis, cfg.center) if needs_sd else {}
    folds = cv_split(stations.values(), cfg.folds, seed=derived_seed(cfg.seed, 77))
    observed_raw = {
        (o.site_id, int(o.day), o.pollutant_id): float(np.exp(o.value)) for o in observations
    }

    interp_cards, forecast_cards = [], []
    for vi, variant in enumerate(variants):
        use_covs = covs if variant.mean_kind == "SD" else {}
        for fold in range(cfg.folds):
            heldout = {sid for sid, f in folds.items() if f == fold}
            train_obs = [o for o in observations if o.site_id not in heldout]
            design, y, posteriors = fit_variant(
                cfg,
                variant,
                spec,
                fields,
                use_covs,
                stations,
                train_obs,
                train_days,
                seed_key=(vi, fold),
            )
            ctx = _prediction_context(cfg, spec, fields, use_covs, design, variant, train_days)
            rng = derive_rng(cfg.seed, 500, vi, fold)

            # interpolation at held-out stations, training days with data
            interp_results = []
            interp_keys = [
                o
                for o in observations
                if o.site_id in heldout and int(o.day) in train_set
            ]
            if variant.spatial:
                for post in posteriors:
                    batch_days = set(int(d) for d in post.days)
                    targets = [
                        PredictionTarget(
                            x=stations[o.site_id].x,
                            y=stations[o.site_id].y,
                            pollutant_id=o.pollutant_id,
                            day=int(o.day),
                            mode="interpolation",
                            site_id=o.site_id,
                        )
                        for o in interp_keys
                        if int(o.day) in batch_days
                    ]
                    if targets:
                        interp_results.extend(
                            predict(post, targets, ctx, rng, cfg.max_kriging_draws)
                        )
            else:
                targets = [
                    PredictionTarget(
                        x=stations[o.site_id].x,
                        y=stations[o.site_id].y,
                        pollutant_id=o.pollutant_id,
                        day=int(o.day),
                        mode="interpolation",
                        site_id=o.site_id,
                    )
                    for o in interp_keys
                ]
                if targets:
                    interp_results = predict(
                        posteriors[0], targets, ctx, rng, cfg.max_kriging_draws
                    )
            if interp_results:
                interp_cards.append(
                    score(interp_results, observed_raw, variant=variant.name, fold=fold)
                )

            # forecast at all stations over the test days with data
            forecast_post = (
                consensus_combine(posteriors) if variant.spatial else posteriors[0]
            )
            forecast_keys = [o for o in observations if int(o.day) in test_set]
            targets = [
                PredictionTarget(
                    x=stations[o.site_id].x,
                    y=stations[o.site_id].y,
                    pollutant_id=o.pollutant_id,
                    day=int(o.day),
                    mode="forecast",
                    site_id=o.site_id,
                )
                for o in forecast_keys
            ]
            if targets:
                forecast_results = predict(
                    forecast_post, targets, ctx, rng, cfg.max_kriging_draws
                )
                forecast_cards.append(
                    score(forecast_results, observed_raw, variant=variant.name, fold=fold)
                )
    return interp_cards, forecast_cards


def _default_variants():
    from .stations import ALL_VARIANTS

    return ALL_VARIANTS


def cmd_cv(cfg: RunConfig) -> list:
    spec, fields = load_fields(cfg)
    stations, observations, _ = parse_station_file(cfg.stations_file, spec, cfg.pollutants)
    interp, forecast = run_cv_protocol(cfg, spec, fields, stations, observations)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    p1, p2 = out / "scorecard_interpolation.csv", out / "scorecard_forecast.csv"
    write_scorecard_csv(interp, p1, cfg.pollutants)
    write_scorecard_csv(forecast, p2, cfg.pollutants)
    return [p1, p2]


def cmd_coherence(cfg: RunConfig) -> list:
    spec, fields, stations, observations, train_days, _, variant, basis, covs = _prepare_training(cfg)
    if variant.mean_kind != "SD":
        raise ValueError("coherence curves require an SD variant")
    out = Path(cfg.output_dir)
    combined = read_posterior(out / "combined.csv")
    rec = json.loads((out / "design.json").read_text(encoding="utf-8"))
    design = _design_from_record(rec)
    pairs = sorted(
        {(c.k, c.j) for c in design.columns if c.kind == "covariate"}
    )
    curves = [
        coherence_curve(combined, k, j, basis, design=design, dx=spec.dx)
        for k, j in pairs
    ]
    path = out / "coherence.csv"
    write_coherence_csv(curves, path)
    return [path]


def cmd_aggregate(cfg: RunConfig, predictions_path) -> list:
    from .evaluate import PredictionResult

    names = {v: k for k, v in cfg.pollutants.items()}
    inv = {k: v for v, k in names.items()}
    lines = Path(predictions_path).read_text(encoding="utf-8").splitlines()
    results = []
    for line in lines[1:]:
        sid, x, y, day, pol, pred, lo, hi = line.split(",")
        results.append(
            PredictionResult(
                target=PredictionTarget(
                    x=float(x),
                    y=float(y),
                    pollutant_id=inv.get(pol, int(pol) if pol.isdigit() else -1),
                    day=int(day),
                    mode="forecast",
                    site_id=sid,
                ),
                mean_log=float(np.log(float(pred))),
                lo_log=float(np.log(float(lo))),
                hi_log=float(np.log(float(hi))),
                point=float(pred),
            )
        )
    spec, _ = load_fields(cfg)
    rows = aggregate_means(results, spec)
    path = Path(cfg.output_dir) / "aggregate.csv"
    write_aggregate_csv(rows, path, cfg.pollutants)
    return [path]
