"""Posterior prediction, cross-validation splits, scoring, coherence curves.

Interpolation predicts at unmonitored locations inside the training period:
the regression mean plus a conditional (kriging) draw of the residual field
given that day's sampled field at the observed sites.  Forecasting predicts
future days, where the residual field is unconditioned: its mean is zero and
only its variance enters the predictive draws.  Point predictions are
reported on the original concentration scale as exp of the posterior median
of the log-scale draws.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .filters import MAX_MAGNITUDE, SpectralBasis, period_of
from .grid import GridSpec
from .inference import BatchPosterior
from .stations import DesignMatrix, ModelVariant, Station, cell_lookup

__all__ = [
    "PredictionTarget",
    "PredictionResult",
    "PredictionContext",
    "Scorecard",
    "CoherenceCurve",
    "cv_split",
    "split_season",
    "predict",
    "score",
    "coherence_curve",
    "aggregate_means",
]

TRAIN_FRACTION = 78.0 / 90.0


@dataclass(frozen=True)
class PredictionTarget:
    x: float
    y: float
    pollutant_id: int
    day: int
    mode: str
    site_id: str = ""

    def __post_init__(self):
        if self.mode not in ("interpolation", "forecast"):
            raise ValueError(f"mode must be interpolation or forecast, got {self.mode!r}")


@dataclass(frozen=True)
class PredictionResult:
    target: PredictionTarget
    mean_log: float
    lo_log: float
    hi_log: float
    point: float


@dataclass(frozen=True)
class PredictionContext:
    """Inputs needed to rebuild design rows at arbitrary locations."""

    variant: ModelVariant
    design: DesignMatrix
    spec: GridSpec
    train_days: tuple
    fields: dict | None = None
    covs: dict | None = None


# ---------------------------------------------------------------------------
# Cross-validation plumbing
# ---------------------------------------------------------------------------


def _stratum(station: Station, total_id: int = 0) -> str:
    has_total = total_id in station.measures
    has_species = any(m != total_id for m in station.measures)
    if has_total and has_species:
        return "both"
    if has_total:
        return "total-only"
    return "species-only"


def cv_split(stations, folds: int = 5, seed: int = 0, total_id: int = 0) -> dict:
    """Stratified random fold assignment, one fold id per site.

    Stations are stratified by what they measure (total only, species only,
    both); each stratum is shuffled and dealt round-robin so per-stratum fold
    sizes differ by at most one.  A stratum smaller than the fold count is
    assigned round-robin with a warning.
    """
    if folds < 2:
        raise ValueError("need at least 2 folds")
    stations = list(stations)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(101,)))
    assignment = {}
    for stratum in ("total-only", "species-only", "both"):
        members = sorted(s.site_id for s in stations if _stratum(s, total_id) == stratum)
        if not members:
            warnings.warn(f"stratum {stratum!r} is empty", stacklevel=2)
            continue
        if len(members) < folds:
            warnings.warn(
                f"stratum {stratum!r} has {len(members)} station(s), fewer than "
                f"{folds} folds; assigning round-robin",
                stacklevel=2,
            )
        order = rng.permutation(len(members))
        for pos, idx in enumerate(order):
            assignment[members[idx]] = pos % folds
    return assignment


def split_season(days) -> tuple:
    """Train/test split of one season's day slots: first 78 and last 12 of 90.

    Shorter spans split proportionally (floor of 78/90) with a warning; day
    sets must be consecutive.
    """
    days = [int(d) for d in days]
    if len(days) < 2:
        raise ValueError("need at least 2 days to split")
    for a, b in zip(days, days[1:]):
        if b != a + 1:
            raise ValueError(f"day set is not consecutive at {a} -> {b}")
    n = len(days)
    if n == 90:
        cut = 78
    elif n > 90:
        warnings.warn(f"season has {n} days; using first 78 / last 12", stacklevel=2)
        return tuple(days[:78]), tuple(days[-12:])
    else:
        cut = max(int(np.floor(n * TRAIN_FRACTION)), 1)
        warnings.warn(
            f"season has {n} < 90 days; proportional split {cut}/{n - cut}", stacklevel=2
        )
    return tuple(days[:cut]), tuple(days[cut:])


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def _design_row(ctx: PredictionContext, x, y, k, day) -> np.ndarray:
    """Design row at an arbitrary location, standardized like the training set."""
    design = ctx.design
    probe = Station(site_id="target", x=x, y=y, measures=frozenset([k]))
    cell = cell_lookup(probe, ctx.spec)
    row = np.zeros(design.p)
    for idx, col in enumerate(design.columns):
        if col.kind == "intercept":
            row[idx] = 1.0 if col.k == k else 0.0
            continue
        if col.k != k:
            continue
        if ctx.variant.mean_kind == "LD":
            value = ctx.fields[(col.j, day)].values[cell]
        else:
            value = ctx.covs[(col.j, col.b, day)].field.values[cell]
        if design.standardized:
            value = (value - design.col_mean[idx]) / design.col_sd[idx]
        row[idx] = value
    return row


class _DayKriging:
    """Per-day per-draw solver pieces for conditioning on the sampled field."""

    def __init__(self, posterior: BatchPosterior, day: int, draw_idx: np.ndarray):
        layout = posterior.w_layout
        pos = np.flatnonzero(layout.day == day)
        self.coords = layout.coords[pos]
        self.pol = layout.pollutant[pos]
        self.w = posterior.w_draws[day][draw_idx]  # (I, n)
        self.cross = posterior.coreg_draws()[draw_idx]  # (I, K, K)
        self.cross = self.cross @ np.swapaxes(self.cross, 1, 2)
        self.rate = posterior.decay_draws()[draw_idx]  # (I,)
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        cov = self.cross[:, self.pol[:, None], self.pol[None, :]] * np.exp(
            -self.rate[:, None, None] * dist[None, :, :]
        )
        self.cov_inv = np.linalg.inv(cov)
        self.alpha = np.einsum("inm,im->in", self.cov_inv, self.w)

    def conditional(self, x, y, k, rng):
        """Per-draw conditional mean/variance draw of the field at (x, y)."""
        d0 = np.hypot(self.coords[:, 0] - x, self.coords[:, 1] - y)
        c0 = self.cross[:, k, self.pol] * np.exp(-self.rate[:, None] * d0[None, :])
        mean = np.einsum("in,in->i", c0, self.alpha)
        quad = np.einsum("in,inm,im->i", c0, self.cov_inv, c0)
        var = np.maximum(self.cross[:, k, k] - quad, 0.0)
        return mean + np.sqrt(var) * rng.standard_normal(mean.shape[0])


def predict(
    posterior: BatchPosterior,
    targets,
    ctx: PredictionContext,
    rng: np.random.Generator | None = None,
    max_kriging_draws: int | None = None,
) -> list:
    """Predictive draws per target; returns results aligned with ``targets``.

    The regression mean uses the posterior coefficient draws against the
    target's standardized design row.  Interpolation targets add the kriging
    conditional draw of the residual field given that day's sampled values;
    forecast targets add an unconditional residual draw (zero mean, same-site
    variance) when the model is spatial.  All draws include nugget noise, so
    intervals are predictive for a new observation.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    targets = list(targets)
    train = set(int(d) for d in ctx.train_days)
    for t in targets:
        if t.mode == "interpolation" and int(t.day) not in train:
            raise ValueError(f"interpolation target day {t.day} outside the training period")
        if t.mode == "forecast" and int(t.day) in train:
            raise ValueError(f"forecast target day {t.day} inside the training period")

    beta = posterior.beta_draws()
    n_draws = beta.shape[0]
    if max_kriging_draws is not None and max_kriging_draws < n_draws:
        draw_idx = np.unique(np.linspace(0, n_draws - 1, max_kriging_draws).astype(int))
    else:
        draw_idx = np.arange(n_draws)
    beta = beta[draw_idx]
    nugget2 = posterior.nugget2_draws()[draw_idx]
    cross_diag = None
    if posterior.has_spatial:
        lower = posterior.coreg_draws()[draw_idx]
        cross_diag = np.einsum("ikm,ikm->ik", lower, lower)

    interp_days = sorted(
        {int(t.day) for t in targets if t.mode == "interpolation"}
    )
    kriging = {}
    if posterior.has_spatial and posterior.w_draws is not None:
        for day in interp_days:
            if day not in posterior.w_draws:
                raise ValueError(f"posterior holds no residual draws for day {day}")
            kriging[day] = _DayKriging(posterior, day, draw_idx)
    elif interp_days and posterior.has_spatial:
        raise ValueError("posterior was fit without stored residual draws")

    results = []
    for t in targets:
        row = _design_row(ctx, t.x, t.y, t.pollutant_id, int(t.day))
        draws = beta @ row
        if t.mode == "interpolation" and posterior.has_spatial:
            draws = draws + kriging[int(t.day)].conditional(t.x, t.y, t.pollutant_id, rng)
        elif t.mode == "forecast" and cross_diag is not None:
            draws = draws + np.sqrt(cross_diag[:, t.pollutant_id]) * rng.standard_normal(
                draws.shape[0]
            )
        draws = draws + np.sqrt(nugget2[:, t.pollutant_id]) * rng.standard_normal(
            draws.shape[0]
        )
        lo, med, hi = np.percentile(draws, [2.5, 50.0, 97.5])
        results.append(
            PredictionResult(
                target=t,
                mean_log=float(draws.mean()),
                lo_log=float(lo),
                hi_log=float(hi),
                point=float(np.exp(med)),
            )
        )
    return results


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scorecard:
    """Per-pollutant RMSE (original scale) and Pearson correlation."""

    variant: str
    fold: int
    rmse: dict
    corr: dict

    def __post_init__(self):
        for k, r in self.rmse.items():
            if r < 0:
                raise ValueError(f"negative RMSE for pollutant {k}")
        for k, c in self.corr.items():
            if c is not None and not -1.0 <= c <= 1.0 + 1e-12:
                raise ValueError(f"correlation out of range for pollutant {k}")


def score(predictions, observed_raw, variant: str = "", fold: int = -1) -> Scorecard:
    """Score aligned predictions against held-out raw-scale observations.

    ``observed_raw`` maps (site_id, day, pollutant_id) to the observed value
    in original units.  RMSE is computed on the original scale; pollutants
    with fewer than 2 pairs get a missing correlation.
    """
    by_pollutant = {}
    for res in predictions:
        t = res.target
        key = (t.site_id, int(t.day), t.pollutant_id)
        if key not in observed_raw:
            continue
        by_pollutant.setdefault(t.pollutant_id, []).append((res.point, observed_raw[key]))
    rmse, corr = {}, {}
    for k, pairs in sorted(by_pollutant.items()):
        pred = np.array([p for p, _ in pairs])
        obs = np.array([o for _, o in pairs])
        rmse[k] = float(np.sqrt(np.mean((pred - obs) ** 2)))
        if pred.size >= 2 and pred.std() > 0 and obs.std() > 0:
            corr[k] = float(np.corrcoef(pred, obs)[0, 1])
        else:
            corr[k] = None
    return Scorecard(variant=variant, fold=fold, rmse=rmse, corr=corr)


def aggregate_means(predictions, spec: GridSpec, observed_raw=None) -> list:
    """Group-by-mean export rows: quadrant region x pollutant means.

    Returns rows (region, pollutant_id, n, mean_predicted, mean_observed);
    the observed column is None where no observation matches.
    """
    half_x, half_y = spec.extent_km[0] / 2.0, spec.extent_km[1] / 2.0
    groups = {}
    for res in predictions:
        t = res.target
        region = ("E" if t.x >= half_x else "W") + ("N" if t.y >= half_y else "S")
        key = (region, t.pollutant_id)
        obs = None
        if observed_raw is not None:
            obs = observed_raw.get((t.site_id, int(t.day), t.pollutant_id))
        groups.setdefault(key, []).append((res.point, obs))
    rows = []
    for (region, k), vals in sorted(groups.items()):
        preds = [p for p, _ in vals]
        obs = [o for _, o in vals if o is not None]
        rows.append(
            (
                region,
                k,
                len(preds),
                float(np.mean(preds)),
                float(np.mean(obs)) if obs else None,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# Coherence curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoherenceCurve:
    """Posterior summary of the frequency-dependent association A_kj."""

    k: int
    j: int
    magnitudes: np.ndarray
    periods_km: np.ndarray
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    significant: bool
    coef_significant: np.ndarray


def coherence_curve(
    posterior: BatchPosterior,
    k: int,
    j: int,
    basis: SpectralBasis,
    n_grid: int = 100,
    design: DesignMatrix | None = None,
    dx: float = 12.0,
    family: str = "all",
    alpha: float = 0.05,
) -> CoherenceCurve:
    """Curve of the association between observed pollutant k and field j.

    Per draw the curve at magnitude m is the basis expansion of the (k, j)
    coefficients; the band is the pointwise 2.5/97.5 percentile envelope.
    Significance uses a Bonferroni-corrected credible interval per basis
    coefficient: the family is every covariate coefficient of the fitted
    variant (``family="all"``) or just this pair's B coefficients
    (``family="pair"``); the curve is flagged significant when any
    coefficient's corrected interval excludes zero.

    When ``design`` is given the coefficients are mapped back to the raw
    covariate scale before plotting, matching the field units.
    """
    if design is not None:
        cols = [
            (i, c)
            for i, c in enumerate(design.columns)
            if c.kind == "covariate" and c.k == k and c.j == j
        ]
        n_family = sum(1 for c in design.columns if c.kind == "covariate")
        slopes = posterior.beta_draws()[:, [i for i, _ in cols]]
        sds = np.array([design.col_sd[i] for i, _ in cols])
        slopes = slopes / sds
        order = np.argsort([c.b for _, c in cols])
        slopes = slopes[:, order]
    else:
        idx = [
            i
            for i, name in enumerate(posterior.param_names[: posterior.n_beta])
            if name.startswith(f"beta[k={k},j={j},")
        ]
        n_family = sum(
            1 for name in posterior.param_names[: posterior.n_beta] if name.startswith("beta[k=")
        )
        slopes = posterior.beta_draws()[:, idx]
    if slopes.shape[1] == 0:
        raise ValueError(f"posterior has no coefficients for pair (k={k}, j={j})")
    if slopes.shape[1] != basis.count:
        raise ValueError(
            f"pair (k={k}, j={j}) has {slopes.shape[1]} coefficients but basis has {basis.count}"
        )
    if family == "pair":
        n_family = basis.count
    elif family != "all":
        raise ValueError("family must be 'all' or 'pair'")

    mags = np.linspace(0.0, MAX_MAGNITUDE, n_grid + 1)[1:]
    weights = basis.evaluate(mags)  # (n_grid, B)
    curves = slopes @ weights.T  # (I, n_grid)
    mean = curves.mean(axis=0)
    lo, hi = np.percentile(curves, [2.5, 97.5], axis=0)

    level = alpha / n_family
    q_lo, q_hi = np.percentile(slopes, [100 * level / 2, 100 * (1 - level / 2)], axis=0)
    coef_significant = (q_lo > 0) | (q_hi < 0)

    periods = np.array([period_of(m, dx) for m in mags])
    return CoherenceCurve(
        k=k,
        j=j,
        magnitudes=mags,
        periods_km=periods,
        mean=mean,
        lo=lo,
        hi=hi,
        significant=bool(coef_significant.any()),
        coef_significant=coef_significant,
    )
