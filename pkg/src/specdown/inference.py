"""Parameter estimation: least squares, per-batch MCMC, consensus combination.

Independent-error variants are fit by ordinary least squares.  Spatial
variants run a Gibbs/Metropolis-Hastings sampler per 3-day batch: the
stacked residual field w, the regression coefficients, and the nuggets have
conjugate full conditionals and are Gibbs-updated; the decay rate and the
coregionalization entries are random-walk Metropolis updates against the
w-likelihood (logit scale for the bounded rate, log scale for the mixing
diagonal).  Batch subposteriors are then merged by precision-weighted
averaging of aligned draws, performed on the transformed parameter scale.

Every sampler owns its generator; a batch seeded identically reproduces its
draws bit for bit, so batches may run in parallel worker processes.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, qr, solve_triangular
from scipy.spatial.distance import cdist

from .lmc import (
    Coregionalization,
    CovarianceNotPDError,
    SpatialDecay,
    StackedLayout,
    chol_pd,
)
from .stations import DesignMatrix, ModelVariant

__all__ = [
    "Priors",
    "McmcConfig",
    "BatchData",
    "BatchPosterior",
    "OlsFit",
    "RankDeficientError",
    "McmcError",
    "fit_ols",
    "ols_posterior",
    "make_batches",
    "fit_batch_mcmc",
    "consensus_combine",
    "marginal_loglik",
    "draw_w_conditional",
    "draw_beta_conditional",
    "draw_nugget2_conditional",
    "mh_logit_walk",
    "derive_rng",
]


class RankDeficientError(ValueError):
    """Design matrix is rank deficient; message names the offending columns."""


class McmcError(RuntimeError):
    """A batch chain failed irrecoverably (covariance factorization)."""


def derive_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator derived deterministically from (seed, key...)."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class Priors:
    """Prior hyperparameters of the Bayesian spatial model.

    Regression coefficients get N(0, beta_sd^2); the mixing matrix gets
    N(0, coreg_offdiag_sd^2) off the diagonal and lognormal LN(0,
    coreg_diag_log_sd^2) on it; the nugget variances get inverse-gamma
    (placed on tau^2 so the Gibbs update stays conjugate); the decay rate is
    uniform on ``decay_bounds``, the effective-range window of the domain.
    """

    decay_bounds: tuple
    beta_sd: float = 100.0
    coreg_offdiag_sd: float = 10.0
    coreg_diag_log_sd: float = 10.0
    nugget_shape: float = 2.0
    nugget_scale: float = 0.1

    def __post_init__(self):
        lo, hi = self.decay_bounds
        if not (0 < lo < hi):
            raise ValueError(f"decay bounds must satisfy 0 < lo < hi, got {self.decay_bounds}")
        for name in ("beta_sd", "coreg_offdiag_sd", "coreg_diag_log_sd", "nugget_shape", "nugget_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def for_domain(cls, diameter_km: float, **overrides) -> "Priors":
        """Default priors for a domain of the given maximum distance."""
        bounds = (3.0 / (0.75 * diameter_km), 3.0 / (0.1 * diameter_km))
        return cls(decay_bounds=bounds, **overrides)


@dataclass(frozen=True)
class McmcConfig:
    """Sampler length, proposal scales, and testing hooks.

    Defaults trade accuracy for desk-scale runtime.  Step sizes adapt toward
    a 25-45% acceptance rate during burn-in and freeze afterwards.  The
    ``update_*`` switches hold a block at its initial value, which is how the
    conjugate-oracle tests isolate a single full conditional.
    """

    iterations: int = 5000
    burnin: int = 2000
    thin: int = 3
    step_decay: float = 0.8
    step_coreg: float = 0.3
    adapt: bool = True
    seed: int = 0
    store_w: bool = True
    update_w: bool = True
    update_beta: bool = True
    update_nugget: bool = True
    update_coreg: bool = True
    update_decay: bool = True
    init_beta: np.ndarray | None = None
    init_nugget2: np.ndarray | None = None
    init_coreg: np.ndarray | None = None
    init_decay: float | None = None

    def __post_init__(self):
        if not self.iterations > self.burnin >= 0:
            raise ValueError("need iterations > burnin >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")

    @property
    def n_draws(self) -> int:
        return (self.iterations - self.burnin + self.thin - 1) // self.thin


@dataclass(frozen=True)
class BatchData:
    """Observations and design rows for one contiguous day window."""

    days: tuple
    y: np.ndarray
    X: np.ndarray
    layout: StackedLayout
    n_pollutants: int
    design: DesignMatrix | None = None

    def __post_init__(self):
        if self.y.shape[0] != self.X.shape[0] or self.y.shape[0] != self.layout.n:
            raise ValueError("y, X and layout must have matching row counts")
        if self.y.shape[0] == 0:
            raise ValueError("batch is empty")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def make_batches(
    design: DesignMatrix, y: np.ndarray, train_days, batch_len: int = 3
) -> list[BatchData]:
    """Cut the training period into non-overlapping ``batch_len``-day windows.

    A final partial window is dropped with a warning; windows without any
    observation are skipped with a warning.
    """
    days = [int(d) for d in train_days]
    n_full = len(days) // batch_len
    if len(days) % batch_len:
        warnings.warn(
            f"dropping final partial batch of {len(days) % batch_len} day(s)",
            stacklevel=2,
        )
    K = design.n_pollutants
    batches = []
    for w in range(n_full):
        window = tuple(days[w * batch_len : (w + 1) * batch_len])
        rows = design.rows_for_days(window)
        if rows.size == 0:
            warnings.warn(f"batch {window} has no observations; skipped", stacklevel=2)
            continue
        layout = StackedLayout(
            day=design.row_day[rows],
            pollutant=design.row_pollutant[rows],
            coords=np.column_stack([design.row_x[rows], design.row_y[rows]]),
        )
        batches.append(
            BatchData(
                days=window,
                y=np.asarray(y)[rows],
                X=design.X[rows],
                layout=layout,
                n_pollutants=K,
                design=design,
            )
        )
    return batches


# ---------------------------------------------------------------------------
# Ordinary least squares (independent-error variants)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OlsFit:
    coef: np.ndarray
    se: np.ndarray
    residuals: np.ndarray
    sigma2: float
    cov_unit: np.ndarray  # (X'X)^{-1}; coefficient covariance is sigma2 * cov_unit
    df: int


def fit_ols(X: np.ndarray, y: np.ndarray, column_labels=None) -> OlsFit:
    """Least squares with standard errors from sigma^2 (X'X)^{-1}.

    Rank deficiency raises :class:`RankDeficientError` naming the columns
    that QR pivoting puts beyond the numerical rank.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n, p = X.shape
    if n < p:
        raise RankDeficientError(f"fewer rows ({n}) than columns ({p})")
    r, piv = qr(X, mode="r", pivoting=True)
    diag = np.abs(np.diag(r[:p]))
    tol = diag[0] * max(n, p) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    if rank < p:
        labels = column_labels or [f"col{i}" for i in range(p)]
        bad = [labels[i] for i in sorted(piv[rank:])]
        raise RankDeficientError(f"design is rank deficient; dependent columns: {bad}")
    coef, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    df = n - p
    sigma2 = float(resid @ resid / df) if df > 0 else 0.0
    cov_unit = np.linalg.inv(X.T @ X)
    se = np.sqrt(np.maximum(sigma2 * np.diag(cov_unit), 0.0))
    return OlsFit(coef=coef, se=se, residuals=resid, sigma2=sigma2, cov_unit=cov_unit, df=df)


# ---------------------------------------------------------------------------
# Posterior container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchPosterior:
    """MCMC draws for one batch (or the consensus of several).

    ``draws`` live on the transformed scale: regression coefficients as-is,
    log nugget variances, the lower-triangular mixing entries column-major
    with the diagonal logged, and the logit of the decay rate within its
    prior bounds.  ``sample_cov`` is the draw covariance used as the
    precision weight during consensus combination.
    """

    draws: np.ndarray
    param_names: tuple
    transforms: tuple
    sample_cov: np.ndarray
    n_beta: int
    n_pollutants: int
    days: tuple
    seed: int | None = None
    decay_bounds: tuple | None = None
    acceptance: dict = field(default_factory=dict)
    w_draws: dict | None = None
    w_layout: StackedLayout | None = None
    natural: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def has_spatial(self) -> bool:
        return "logit" in self.transforms

    def _coreg_slice(self):
        start = self.n_beta + self.n_pollutants
        m = self.n_pollutants * (self.n_pollutants + 1) // 2
        return slice(start, start + m)

    def beta_draws(self) -> np.ndarray:
        return self.draws[:, : self.n_beta]

    def nugget2_draws(self) -> np.ndarray:
        sl = slice(self.n_beta, self.n_beta + self.n_pollutants)
        return np.exp(self.draws[:, sl])

    def coreg_draws(self) -> np.ndarray:
        """Mixing matrices per draw, shape (I, K, K)."""
        if not self.has_spatial:
            raise ValueError("posterior has no spatial parameters")
        K = self.n_pollutants
        vech = self.draws[:, self._coreg_slice()]
        out = np.zeros((self.n_draws, K, K))
        pos = 0
        for c in range(K):
            for r in range(c, K):
                vals = vech[:, pos]
                out[:, r, c] = np.exp(vals) if r == c else vals
                pos += 1
        return out

    def decay_draws(self) -> np.ndarray:
        if not self.has_spatial:
            raise ValueError("posterior has no spatial parameters")
        lo, hi = self.decay_bounds
        u = self.draws[:, -1]
        return lo + (hi - lo) / (1.0 + np.exp(-u))

    def natural_draws(self) -> np.ndarray:
        """Draws mapped back to the natural scale, column for column."""
        if self.natural is not None:
            return self.natural
        out = self.draws.copy()
        for i, t in enumerate(self.transforms):
            if t == "log":
                out[:, i] = np.exp(out[:, i])
            elif t == "logit":
                lo, hi = self.decay_bounds
                out[:, i] = lo + (hi - lo) / (1.0 + np.exp(-out[:, i]))
        return out


def _vech_names_transforms(K: int):
    names, trans = [], []
    for c in range(K):
        for r in range(c, K):
            if r == c:
                names.append(f"coreg[{r},{c}].log")
                trans.append("log")
            else:
                names.append(f"coreg[{r},{c}]")
                trans.append("id")
    return names, trans


def _pack_state(beta, nugget2, lower, decay_u) -> np.ndarray:
    K = nugget2.shape[0]
    vech = []
    for c in range(K):
        for r in range(c, K):
            v = lower[r, c]
            vech.append(np.log(v) if r == c else v)
    return np.concatenate([beta, np.log(nugget2), np.array(vech), [decay_u]])


# ---------------------------------------------------------------------------
# Full-conditional updates
# ---------------------------------------------------------------------------


def draw_w_conditional(resid, day_idx, cov_blocks, nugget2_row, rng) -> np.ndarray:
    """Exact Gaussian draw of the stacked residual field given everything else.

    Per day: w | r ~ N(C (C+D)^{-1} r, C - C (C+D)^{-1} C) with C the day's
    LMC block and D the diagonal of per-observation nugget variances.
    """
    w = np.empty(resid.shape[0])
    for idx, C in zip(day_idx, cov_blocks):
        M = C + np.diag(nugget2_row[idx])
        A = cho_solve(chol_pd(M), C)  # (C+D)^{-1} C
        mean = A.T @ resid[idx]
        cov = C - A.T @ C
        cov = 0.5 * (cov + cov.T)
        cf = chol_pd(cov)
        w[idx] = mean + np.tril(cf[0]) @ rng.standard_normal(idx.size)
    return w


def draw_beta_conditional(X, y_minus_w, nugget2_row, beta_sd, rng):
    """Conjugate Gaussian update of all regression coefficients jointly.

    Returns (draw, posterior mean, posterior precision).
    """
    p = X.shape[1]
    Xw = X / nugget2_row[:, None]
    prec = X.T @ Xw + np.eye(p) / beta_sd**2
    b = Xw.T @ y_minus_w
    cf = cho_factor(prec, lower=True)
    mean = cho_solve(cf, b)
    z = rng.standard_normal(p)
    draw = mean + solve_triangular(np.tril(cf[0]), z, trans="T", lower=True)
    return draw, mean, prec


def draw_nugget2_conditional(ssq, count, priors: Priors, rng, size=None):
    """Conjugate inverse-gamma update of one pollutant's nugget variance."""
    shape = priors.nugget_shape + 0.5 * count
    scale = priors.nugget_scale + 0.5 * ssq
    return scale / rng.gamma(shape, 1.0, size=size)


def _logit(x):
    return np.log(x) - np.log1p(-x)


def _expit(u):
    return 1.0 / (1.0 + np.exp(-u))


def _logit_jacobian(u):
    s = _expit(u)
    return np.log(s) + np.log1p(-s)


def mh_logit_walk(value, bounds, step, loglik, current_loglik, rng):
    """One random-walk Metropolis step for a uniformly-bounded parameter.

    The walk happens on the logit of the parameter's position within
    ``bounds``; the Jacobian of the transform enters the acceptance ratio so
    the chain targets the stated density on the natural scale.  ``loglik``
    maps a proposed natural value to (loglik, payload) or ``None`` when the
    proposal is invalid (forced rejection).  Returns (value, loglik, payload,
    accepted); payload is ``None`` when the proposal was rejected.
    """
    lo, hi = bounds
    u = _logit((value - lo) / (hi - lo))
    u_prop = u + step * rng.standard_normal()
    x_prop = lo + (hi - lo) * _expit(u_prop)
    evaluated = loglik(x_prop)
    logu = np.log(rng.uniform())
    if evaluated is None:
        return value, current_loglik, None, False
    ll_prop, payload = evaluated
    delta = (ll_prop + _logit_jacobian(u_prop)) - (current_loglik + _logit_jacobian(u))
    if logu < delta:
        return x_prop, ll_prop, payload, True
    return value, current_loglik, None, False


# ---------------------------------------------------------------------------
# The batch sampler
# ---------------------------------------------------------------------------


class _BlockGroup:
    """Day blocks of one common size, stacked for batched linear algebra."""

    def __init__(self, rows: np.ndarray, layout: StackedLayout):
        self.rows = rows  # (G, n) stacked-vector indices per day
        coords = layout.coords[rows]  # (G, n, 2)
        diff = coords[:, :, None, :] - coords[:, None, :, :]
        self.dist = np.sqrt((diff**2).sum(-1))  # (G, n, n)
        self.pol = layout.pollutant[rows]  # (G, n)
        self.pol_i = self.pol[:, :, None]
        self.pol_j = self.pol[:, None, :]

    def corr(self, rate: float) -> np.ndarray:
        return np.exp(-rate * self.dist)

    def cov(self, cross: np.ndarray, corr: np.ndarray) -> np.ndarray:
        return cross[self.pol_i, self.pol_j] * corr

    def gather(self, stacked: np.ndarray) -> np.ndarray:
        return stacked[self.rows]

    def scatter(self, out: np.ndarray, values: np.ndarray) -> None:
        out[self.rows.ravel()] = values.ravel()


class _DayBlocks:
    """All day blocks of one batch, grouped by size."""

    def __init__(self, layout: StackedLayout):
        day_groups = sorted(layout.day_groups().items())
        self.days = [d for d, _ in day_groups]
        self.idx = [idx for _, idx in day_groups]
        by_size: dict = {}
        for pos, idx in enumerate(self.idx):
            by_size.setdefault(idx.size, []).append(pos)
        self.groups = []
        self.group_days = []
        for size in sorted(by_size):
            positions = by_size[size]
            rows = np.array([self.idx[p] for p in positions])
            self.groups.append(_BlockGroup(rows, layout))
            self.group_days.append([self.days[p] for p in positions])

    def corr(self, rate: float):
        return [g.corr(rate) for g in self.groups]

    def cov(self, cross: np.ndarray, corr_stacks):
        return [g.cov(cross, R) for g, R in zip(self.groups, corr_stacks)]


class _CovState:
    """Factorizations of the current day covariances, refreshed on acceptance."""

    def __init__(self, covs, chols):
        self.covs = covs
        self.chols = chols
        self.invs = [np.linalg.inv(C) for C in covs]
        self.logdet = sum(
            float(np.log(np.diagonal(L, axis1=1, axis2=2)).sum()) for L in self.chols
        )

    @classmethod
    def from_covs(cls, covs):
        chols = []
        used = []
        for C in covs:
            L, C_used = _stack_chol(C)
            if L is None:
                raise McmcError(
                    "day covariance not positive definite even after jitter"
                )
            chols.append(L)
            used.append(C_used)
        return cls(used, chols)

    def loglik(self, blocks: _DayBlocks, w: np.ndarray) -> float:
        quad = 0.0
        for group, inv in zip(blocks.groups, self.invs):
            wg = group.gather(w)
            quad += float(np.einsum("gn,gnm,gm->", wg, inv, wg))
        return -0.5 * quad - self.logdet


def _stack_chol(covs_stack: np.ndarray):
    """Batched Cholesky with the one-shot relative jitter retry."""
    try:
        return np.linalg.cholesky(covs_stack), covs_stack
    except np.linalg.LinAlgError:
        n = covs_stack.shape[-1]
        trace = np.trace(covs_stack, axis1=1, axis2=2)
        jittered = covs_stack + (JITTER_SCALE * trace / n)[:, None, None] * np.eye(n)
        try:
            return np.linalg.cholesky(jittered), jittered
        except np.linalg.LinAlgError:
            return None, covs_stack


def _propose_loglik(blocks: _DayBlocks, covs, w: np.ndarray):
    """(loglik, covs used, chols) under proposed covariances; None if not PD."""
    total = 0.0
    chols = []
    used = []
    for group, C in zip(blocks.groups, covs):
        L, C_used = _stack_chol(C)
        if L is None:
            return None
        chols.append(L)
        used.append(C_used)
        wg = group.gather(w)
        quad = float(np.einsum("gn,gn->", wg, np.linalg.solve(C_used, wg[..., None])[..., 0]))
        total += -0.5 * quad - float(np.log(np.diagonal(L, axis1=1, axis2=2)).sum())
    return total, used, chols


def _draw_w_grouped(blocks: _DayBlocks, state: _CovState, resid, nugget_row, rng) -> np.ndarray:
    """Batched form of the exact residual-field conditional draw."""
    out = np.empty(resid.shape[0])
    for group, C in zip(blocks.groups, state.covs):
        r = group.gather(resid)
        n = C.shape[-1]
        M = C.copy()
        M[:, np.arange(n), np.arange(n)] += nugget_row[group.rows]
        A = np.linalg.solve(M, C)  # (C+D)^{-1} C per block
        At = np.swapaxes(A, 1, 2)
        mean = np.matmul(At, r[..., None])[..., 0]
        cov = C - np.matmul(At, C)
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        L, _ = _stack_chol(cov)
        if L is None:
            raise McmcError("residual conditional covariance not positive definite")
        z = rng.standard_normal(mean.shape)
        group.scatter(out, mean + np.matmul(L, z[..., None])[..., 0])
    return out


class _StepAdapter:
    """Scale a random-walk step toward 25-45% acceptance during burn-in."""

    def __init__(self, step, enabled, window=50):
        self.step = step
        self.enabled = enabled
        self.window = window
        self.proposed = 0
        self.accepted = 0
        self.total_proposed = 0
        self.total_accepted = 0

    def record(self, accepted, adapting):
        self.proposed += 1
        self.total_proposed += 1
        if accepted:
            self.accepted += 1
            self.total_accepted += 1
        if self.enabled and adapting and self.proposed >= self.window:
            rate = self.accepted / self.proposed
            if rate > 0.45:
                self.step *= 1.2
            elif rate < 0.25:
                self.step /= 1.2
            self.proposed = 0
            self.accepted = 0

    @property
    def rate(self):
        return self.total_accepted / self.total_proposed if self.total_proposed else float("nan")


def fit_batch_mcmc(
    batch: BatchData,
    variant: ModelVariant,
    priors: Priors,
    cfg: McmcConfig,
) -> BatchPosterior:
    """Gibbs/Metropolis sampler for one batch of a spatial variant.

    Update cycle per iteration: (1) exact Gaussian draw of the stacked w
    given y - X beta; (2) conjugate Gaussian draw of all coefficients given
    y - w; (3) conjugate inverse-gamma draw of each nugget variance from its
    pollutant's residuals; (4) random-walk Metropolis on the logit of the
    decay rate against the w-likelihood; (5) random-walk Metropolis on each
    free mixing entry (log scale on the diagonal).  Draws kept after burn-in
    and thinning are returned with their sample covariance.
    """
    if not variant.spatial:
        raise ValueError("fit_batch_mcmc requires a spatial variant")
    rng = np.random.default_rng(cfg.seed)
    K = batch.n_pollutants
    n, p = batch.n, batch.p
    X, y = batch.X, batch.y
    pol_row = batch.layout.pollutant
    blocks = _DayBlocks(batch.layout)
    lo, hi = priors.decay_bounds

    # deterministic initial state
    if cfg.init_beta is not None:
        beta = np.asarray(cfg.init_beta, dtype=float).copy()
    else:
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid0 = y - X @ beta
    if cfg.init_nugget2 is not None:
        nugget2 = np.asarray(cfg.init_nugget2, dtype=float).copy()
    else:
        nugget2 = np.empty(K)
        for k in range(K):
            rk = resid0[pol_row == k]
            nugget2[k] = max(0.5 * rk.var(), 1e-4) if rk.size > 1 else 0.1
    if cfg.init_coreg is not None:
        lower = np.asarray(cfg.init_coreg, dtype=float).copy()
    else:
        lower = np.zeros((K, K))
        for k in range(K):
            rk = resid0[pol_row == k]
            lower[k, k] = max(np.sqrt(0.5) * rk.std(), 1e-2) if rk.size > 1 else 0.3
    if cfg.init_decay is not None:
        rate = float(cfg.init_decay)
        if not lo < rate < hi:
            raise ValueError(f"init_decay {rate} outside prior bounds ({lo}, {hi})")
    else:
        rate = 0.5 * (lo + hi)

    cross = lower @ lower.T
    corr = blocks.corr(rate)
    state = _CovState.from_covs(blocks.cov(cross, corr))

    w = np.zeros(n)
    llw = state.loglik(blocks, w)

    def coreg_logprior(mat):
        total = 0.0
        for c in range(K):
            for r in range(c, K):
                v = mat[r, c]
                if r == c:
                    total += -0.5 * (np.log(v) / priors.coreg_diag_log_sd) ** 2
                else:
                    total += -0.5 * (v / priors.coreg_offdiag_sd) ** 2
        return total

    adapt_decay = _StepAdapter(cfg.step_decay, cfg.adapt)
    coreg_entries = [(r, c) for c in range(K) for r in range(c, K)]
    adapt_coreg = {e: _StepAdapter(cfg.step_coreg, cfg.adapt) for e in coreg_entries}

    P = p + K + len(coreg_entries) + 1
    kept = np.empty((cfg.n_draws, P))
    w_store = (
        {d: np.empty((cfg.n_draws, idx.size)) for d, idx in zip(blocks.days, blocks.idx)}
        if cfg.store_w
        else None
    )
    keep_i = 0

    for it in range(cfg.iterations):
        adapting = it < cfg.burnin

        # (1) stacked residual field
        if cfg.update_w:
            w = _draw_w_grouped(blocks, state, y - X @ beta, nugget2[pol_row], rng)
            llw = state.loglik(blocks, w)

        # (2) coefficients
        if cfg.update_beta:
            beta, _, _ = draw_beta_conditional(X, y - w, nugget2[pol_row], priors.beta_sd, rng)

        # (3) nuggets
        if cfg.update_nugget:
            err = y - X @ beta - w
            for k in range(K):
                ek = err[pol_row == k]
                nugget2[k] = draw_nugget2_conditional(ek @ ek, ek.size, priors, rng)

        # (4) decay rate, random walk on the logit scale
        if cfg.update_decay:

            def decay_loglik(rate_prop):
                corr_p = blocks.corr(rate_prop)
                res = _propose_loglik(blocks, blocks.cov(cross, corr_p), w)
                if res is None:
                    return None
                ll, used, chols_p = res
                return ll, (corr_p, used, chols_p)

            rate, llw, payload, accepted = mh_logit_walk(
                rate, (lo, hi), adapt_decay.step, decay_loglik, llw, rng
            )
            if accepted:
                corr, used, chols_p = payload
                state = _CovState(used, chols_p)
            adapt_decay.record(accepted, adapting)

        # (5) mixing-matrix entries
        if cfg.update_coreg:
            for entry in coreg_entries:
                r_i, c_i = entry
                adapter = adapt_coreg[entry]
                prop = lower.copy()
                if r_i == c_i:
                    prop[r_i, c_i] = lower[r_i, c_i] * np.exp(
                        adapter.step * rng.standard_normal()
                    )
                else:
                    prop[r_i, c_i] = lower[r_i, c_i] + adapter.step * rng.standard_normal()
                cross_prop = prop @ prop.T
                res = _propose_loglik(blocks, blocks.cov(cross_prop, corr), w)
                logu = np.log(rng.uniform())
                if res is not None:
                    llw_prop, used, chols_p = res
                    delta = (llw_prop + coreg_logprior(prop)) - (llw + coreg_logprior(lower))
                    accept = logu < delta
                else:
                    accept = False
                if accept:
                    lower, cross = prop, cross_prop
                    state = _CovState(used, chols_p)
                    llw = llw_prop
                adapter.record(accept, adapting)

        if it >= cfg.burnin and (it - cfg.burnin) % cfg.thin == 0:
            decay_u = _logit((rate - lo) / (hi - lo))
            kept[keep_i] = _pack_state(beta, nugget2, lower, decay_u)
            if w_store is not None:
                for d, idx in zip(blocks.days, blocks.idx):
                    w_store[d][keep_i] = w[idx]
            keep_i += 1

    labels = (
        list(batch.design.column_labels())
        if batch.design is not None
        else [f"beta[{i}]" for i in range(p)]
    )
    vech_names, vech_trans = _vech_names_transforms(K)
    names = labels + [f"nugget2[{k}].log" for k in range(K)] + vech_names + ["decay.logit"]
    transforms = ["id"] * p + ["log"] * K + vech_trans + ["logit"]
    acceptance = {"decay": adapt_decay.rate}
    for entry, adapter in adapt_coreg.items():
        acceptance[f"coreg[{entry[0]},{entry[1]}]"] = adapter.rate

    return BatchPosterior(
        draws=kept,
        param_names=tuple(names),
        transforms=tuple(transforms),
        sample_cov=np.cov(kept, rowvar=False),
        n_beta=p,
        n_pollutants=K,
        days=batch.days,
        seed=cfg.seed,
        decay_bounds=(lo, hi),
        acceptance=acceptance,
        w_draws=w_store,
        w_layout=batch.layout if cfg.store_w else None,
    )


def ols_posterior(
    batch: BatchData, n_draws: int = 1000, seed: int = 0
) -> BatchPosterior:
    """Normal-theory pseudo-posterior for the independent-error variants.

    Per pollutant block: sigma^2 drawn from its scaled inverse chi-square,
    coefficients from N(coef_hat, sigma^2 (X'X)^{-1}).  Gives the
    independent models predictive draws on the same footing as the MCMC
    posteriors (no spatial parameters, so interpolation adds no residual
    field).
    """
    rng = np.random.default_rng(seed)
    design = batch.design
    labels = (
        list(design.column_labels())
        if design is not None
        else [f"beta[{i}]" for i in range(batch.p)]
    )
    K = batch.n_pollutants
    pol_row = batch.layout.pollutant
    beta_draws = np.zeros((n_draws, batch.p))
    log_nugget2 = np.zeros((n_draws, K))
    for k in range(K):
        rows = np.flatnonzero(pol_row == k)
        if design is not None:
            cols = np.array([i for i, c in enumerate(design.columns) if c.k == k])
        else:
            cols = np.arange(batch.p)
        Xk = batch.X[np.ix_(rows, cols)]
        fit = fit_ols(Xk, batch.y[rows], [labels[i] for i in cols])
        if fit.df > 0 and fit.sigma2 > 0:
            sigma2 = fit.sigma2 * fit.df / rng.chisquare(fit.df, size=n_draws)
        else:
            sigma2 = np.full(n_draws, max(fit.sigma2, 1e-12))
        cf = np.linalg.cholesky(fit.cov_unit)
        z = rng.standard_normal((n_draws, cols.size))
        beta_draws[:, cols] = fit.coef + np.sqrt(sigma2)[:, None] * (z @ cf.T)
        log_nugget2[:, k] = np.log(np.maximum(sigma2, 1e-300))
    draws = np.hstack([beta_draws, log_nugget2])
    names = labels + [f"nugget2[{k}].log" for k in range(K)]
    transforms = ["id"] * batch.p + ["log"] * K
    return BatchPosterior(
        draws=draws,
        param_names=tuple(names),
        transforms=tuple(transforms),
        sample_cov=np.cov(draws, rowvar=False),
        n_beta=batch.p,
        n_pollutants=K,
        days=batch.days,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Consensus combination
# ---------------------------------------------------------------------------


def _draws_key(post: BatchPosterior):
    return (post.days, hashlib.sha256(np.ascontiguousarray(post.draws).tobytes()).hexdigest())


def consensus_combine(posteriors, ridge: float = 1e-8) -> BatchPosterior:
    """Precision-weighted average of aligned batch draws.

    Draw i of the output is (sum_m W_m)^{-1} sum_m W_m theta_m^(i) with
    W_m the inverse sample covariance of batch m, computed on the
    transformed scale.  Batches are processed in a canonical order so the
    result is invariant to input permutation; a single batch is returned
    unchanged.  Draw counts are truncated to the shortest batch; a singular
    batch covariance is ridge-regularized with a warning.
    """
    posteriors = list(posteriors)
    if not posteriors:
        raise ValueError("no batch posteriors to combine")
    first = posteriors[0]
    for post in posteriors[1:]:
        if post.param_names != first.param_names:
            raise ValueError("batch posteriors have mismatched parameters")
    if len(posteriors) == 1:
        natural = first.natural_draws()
        return replace(first, natural=natural)

    posteriors = sorted(posteriors, key=_draws_key)
    n_draws = min(post.n_draws for post in posteriors)
    if any(post.n_draws != n_draws for post in posteriors):
        warnings.warn(f"truncating batches to the shortest draw count {n_draws}", stacklevel=2)
    P = first.draws.shape[1]

    weights = []
    for post in posteriors:
        cov = post.sample_cov
        try:
            cf = cho_factor(cov, lower=True)
        except np.linalg.LinAlgError:
            warnings.warn("singular batch covariance; ridge-regularizing", stacklevel=2)
            cov = cov + np.eye(P) * (ridge * np.trace(cov) / P)
            cf = cho_factor(cov, lower=True)
        weights.append(cho_solve(cf, np.eye(P)))

    total = np.zeros((P, P))
    weighted = np.zeros((P, n_draws))
    for post, wgt in zip(posteriors, weights):
        total += wgt
        weighted += wgt @ post.draws[:n_draws].T
    cf_total = cho_factor(total, lower=True)
    combined = cho_solve(cf_total, weighted).T

    all_days = tuple(sorted({d for post in posteriors for d in post.days}))
    result = BatchPosterior(
        draws=combined,
        param_names=first.param_names,
        transforms=first.transforms,
        sample_cov=np.cov(combined, rowvar=False),
        n_beta=first.n_beta,
        n_pollutants=first.n_pollutants,
        days=all_days,
        seed=None,
        decay_bounds=first.decay_bounds,
    )
    return replace(result, natural=result.natural_draws())


# ---------------------------------------------------------------------------
# Marginal likelihood (w integrated out), used by the batching contract test
# ---------------------------------------------------------------------------


def marginal_loglik(
    batch: BatchData,
    beta: np.ndarray,
    coreg: Coregionalization,
    decay: SpatialDecay,
    nugget2: np.ndarray,
) -> float:
    """log p(y | theta) with the residual field integrated out.

    Days are independent, so the total is a sum of per-day Gaussian
    log-densities with covariance C_d + diag(nugget).
    """
    blocks = _DayBlocks(batch.layout)
    cross = coreg.cross_cov()
    resid = batch.y - batch.X @ beta
    nugget_row = np.asarray(nugget2)[batch.layout.pollutant]
    total = 0.0
    for group in blocks.groups:
        S = group.cov(cross, group.corr(decay.rate))
        n = S.shape[-1]
        S[:, np.arange(n), np.arange(n)] += nugget_row[group.rows]
        L, S_used = _stack_chol(S)
        if L is None:
            raise CovarianceNotPDError("marginal covariance not positive definite")
        r = group.gather(resid)
        quad = float(np.einsum("gn,gn->", r, np.linalg.solve(S_used, r[..., None])[..., 0]))
        total += (
            -0.5 * quad
            - float(np.log(np.diagonal(L, axis1=1, axis2=2)).sum())
            - 0.5 * r.size * np.log(2.0 * np.pi)
        )
    return float(total)
