"""Least squares, the batch sampler's full conditionals, consensus merging."""

import warnings

import numpy as np
import pytest

from specdown.inference import (
    BatchData,
    BatchPosterior,
    McmcConfig,
    Priors,
    RankDeficientError,
    consensus_combine,
    derive_rng,
    draw_nugget2_conditional,
    fit_batch_mcmc,
    fit_ols,
    make_batches,
    marginal_loglik,
    mh_logit_walk,
    ols_posterior,
)
from specdown.lmc import Coregionalization, SpatialDecay, StackedLayout, sample_w
from specdown.stations import ModelVariant

SPATIAL = ModelVariant("SD", True, True)


def _priors(lo=0.01, hi=0.2, **kw):
    return Priors(decay_bounds=(lo, hi), **kw)


def _k1_batch(seed, n_sites=40, days=(1, 2, 3), beta=1.5, tau2=0.25, l11=1.0, phi=0.047):
    """Intercept-only single-pollutant batch drawn from the model."""
    rng = np.random.default_rng(seed)
    sites = rng.uniform(0, 240, size=(n_sites, 2))
    day = np.repeat(days, n_sites)
    coords = np.tile(sites, (len(days), 1))
    layout = StackedLayout(day=day, pollutant=np.zeros(day.size, int), coords=coords)
    w = sample_w(layout, Coregionalization(np.array([[l11]])), SpatialDecay(phi), rng)
    y = beta + w + rng.normal(0, np.sqrt(tau2), size=day.size)
    X = np.ones((day.size, 1))
    return BatchData(days=tuple(days), y=y, X=X, layout=layout, n_pollutants=1)


class TestFitOls:
    def test_exact_fit_zero_se(self):
        x = np.arange(1.0, 6.0).reshape(-1, 1)
        fit = fit_ols(x, 2.0 * x.ravel())
        assert fit.coef[0] == pytest.approx(2.0)
        assert fit.se[0] == pytest.approx(0.0, abs=1e-12)

    def test_intercept_only_is_mean(self):
        y = np.array([1.0, 4.0, 7.0, -2.0])
        fit = fit_ols(np.ones((4, 1)), y)
        assert fit.coef[0] == pytest.approx(y.mean())

    @staticmethod
    def _solve_longdouble(A, b):
        """Gauss-Jordan with partial pivoting in extended precision."""
        A = A.astype(np.longdouble).copy()
        b = b.astype(np.longdouble).copy()
        n = A.shape[0]
        for col in range(n):
            pivot = col + int(np.argmax(np.abs(A[col:, col])))
            A[[col, pivot]] = A[[pivot, col]]
            b[[col, pivot]] = b[[pivot, col]]
            for row in range(n):
                if row == col:
                    continue
                factor = A[row, col] / A[col, col]
                A[row] -= factor * A[col]
                b[row] -= factor * b[col]
        return b / np.diag(A)

    def test_matches_quad_precision_normal_equations(self):
        rng = np.random.default_rng(50)
        X = rng.standard_normal((50, 4))
        y = rng.standard_normal(50)
        fit = fit_ols(X, y)
        Xq = X.astype(np.longdouble)
        yq = y.astype(np.longdouble)
        gram = Xq.T @ Xq
        oracle = self._solve_longdouble(gram, Xq.T @ yq)
        assert np.max(np.abs(fit.coef - oracle.astype(float))) < 1e-9
        resid = yq - Xq @ oracle
        sigma2 = resid @ resid / (50 - 4)
        unit = np.column_stack(
            [self._solve_longdouble(gram, e) for e in np.eye(4, dtype=np.longdouble)]
        )
        se_oracle = np.sqrt(sigma2 * np.diag(unit)).astype(float)
        assert np.max(np.abs(fit.se - se_oracle)) < 1e-9

    def test_rank_deficiency_names_columns(self):
        X = np.ones((10, 3))
        X[:, 1] = np.arange(10)
        X[:, 2] = 2.0 * np.arange(10)  # duplicate direction
        with pytest.raises(RankDeficientError, match="slope[12]"):
            fit_ols(X, np.zeros(10), ["const", "slope1", "slope2"])


class TestNuggetConditional:
    def test_matches_grid_quadrature_oracle(self):
        # fixed tiny instance: 5 residuals, everything else held
        resid = np.array([0.3, -0.5, 0.2, 0.8, -0.1])
        ssq = float(resid @ resid)
        priors = _priors()
        rng = np.random.default_rng(2024)
        draws = draw_nugget2_conditional(ssq, resid.size, priors, rng, size=1_000_000)

        # independent route: brute-force evaluation of prior x likelihood on a
        # fine grid, normalized numerically
        grid = np.linspace(1e-4, 3.0, 200_001)
        log_prior = (-priors.nugget_shape - 1.0) * np.log(grid) - priors.nugget_scale / grid
        log_lik = -0.5 * resid.size * np.log(grid) - 0.5 * ssq / grid
        dens = np.exp(log_prior + log_lik - (log_prior + log_lik).max())
        dens /= np.trapezoid(dens, grid)
        cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) / 2 * np.diff(grid))])
        cdf /= cdf[-1]

        quantiles = [np.interp(q, cdf, grid) for q in (0.2, 0.4, 0.6, 0.8)]
        edges = np.concatenate([[grid[0]], quantiles, [grid[-1]]])
        exact = np.diff(np.interp(edges, grid, cdf))
        counts, _ = np.histogram(draws, bins=edges)
        empirical = counts / draws.size
        tv = 0.5 * np.abs(empirical - exact).sum()
        assert tv < 1e-3

    def test_prior_only_when_no_data(self):
        priors = _priors()
        rng = np.random.default_rng(8)
        draws = draw_nugget2_conditional(0.0, 0, priors, rng, size=200_000)
        # inverse-gamma(2, 0.1) has mean scale/(shape-1) = 0.1
        assert draws.mean() == pytest.approx(0.1, rel=0.05)


class TestConjugateBeta:
    def test_chain_matches_closed_form(self):
        # residual field held at zero and nuggets fixed: the coefficient
        # draws are iid from the exact Gaussian posterior
        rng = np.random.default_rng(4)
        n, p = 40, 3
        X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
        beta_true = np.array([1.0, -2.0, 0.5])
        tau2 = 0.36
        y = X @ beta_true + rng.normal(0, np.sqrt(tau2), n)
        layout = StackedLayout(
            day=np.ones(n, int), pollutant=np.zeros(n, int), coords=rng.uniform(0, 100, (n, 2))
        )
        batch = BatchData(days=(1,), y=y, X=X, layout=layout, n_pollutants=1)
        cfg = McmcConfig(
            iterations=12_000,
            burnin=0,
            thin=1,
            seed=5,
            update_w=False,
            update_nugget=False,
            update_coreg=False,
            update_decay=False,
            init_nugget2=np.array([tau2]),
            store_w=False,
        )
        post = fit_batch_mcmc(batch, SPATIAL, _priors(), cfg)
        draws = post.beta_draws()

        prec = X.T @ X / tau2 + np.eye(p) / 100.0**2
        cov = np.linalg.inv(prec)
        mean = cov @ (X.T @ y / tau2)
        n_draws = draws.shape[0]
        se_mean = np.sqrt(np.diag(cov) / n_draws)
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 3.0 * se_mean)
        emp_cov = np.cov(draws, rowvar=False)
        se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov**2) / n_draws)
        assert np.all(np.abs(emp_cov - cov) < 3.0 * se_cov)


class TestMhKernel:
    def test_flat_target_stationary_uniform(self):
        # with a flat log-likelihood the chain on the natural scale must be
        # uniform over the bounds; a wrong transform Jacobian fails this
        bounds = (2.0, 7.0)
        rng = np.random.default_rng(17)
        flat = lambda x: (0.0, None)
        value, ll = 4.0, 0.0
        kept = []
        for i in range(400_000):
            value, ll, _, _ = mh_logit_walk(value, bounds, 1.5, flat, ll, rng)
            if i % 50 == 0:
                kept.append(value)
        kept = np.array(kept[1000:])
        n_bins = 20
        counts, _ = np.histogram(kept, bins=np.linspace(*bounds, n_bins + 1))
        expected = kept.size / n_bins
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        # chi-square(19) 1% critical value
        assert chi2 < 36.19

    def test_invalid_proposal_rejected(self):
        rng = np.random.default_rng(3)
        value, ll, payload, accepted = mh_logit_walk(
            3.0, (2.0, 7.0), 0.5, lambda x: None, 0.0, rng
        )
        assert (value, ll, payload, accepted) == (3.0, 0.0, None, False)


class TestBatchSampler:
    def test_requires_spatial_variant(self):
        batch = _k1_batch(0)
        with pytest.raises(ValueError):
            fit_batch_mcmc(batch, ModelVariant("SD", True, False), _priors(), McmcConfig())

    def test_bit_identical_reruns(self):
        batch = _k1_batch(1)
        cfg = McmcConfig(iterations=300, burnin=100, thin=2, seed=9)
        a = fit_batch_mcmc(batch, SPATIAL, _priors(), cfg)
        b = fit_batch_mcmc(batch, SPATIAL, _priors(), cfg)
        assert np.array_equal(a.draws, b.draws)
        for day in a.w_draws:
            assert np.array_equal(a.w_draws[day], b.w_draws[day])

    def test_draw_count_and_layout(self):
        batch = _k1_batch(2)
        cfg = McmcConfig(iterations=250, burnin=100, thin=3, seed=1)
        post = fit_batch_mcmc(batch, SPATIAL, _priors(), cfg)
        assert post.n_draws == cfg.n_draws == 50
        p = batch.p
        assert post.draws.shape[1] == p + 1 + 1 + 1  # beta, nugget, coreg, decay
        assert post.param_names[-1] == "decay.logit"
        assert post.decay_draws().min() > _priors().decay_bounds[0]
        assert post.decay_draws().max() < _priors().decay_bounds[1]

    def test_k1_recovery_coverage(self):
        # known truth; 95% intervals should cover in >= 18 of 20 replicates.
        # chains must be long enough for honest upper nugget tails: the
        # nugget and field-variance directions mix slowly
        truth = dict(beta=1.5, tau2=0.25, l11=1.0, phi=0.047)
        covered = {"beta": 0, "tau2": 0, "l11": 0, "phi": 0}
        n_rep = 20
        for rep in range(n_rep):
            batch = _k1_batch(1000 + rep, **truth)
            post = fit_batch_mcmc(
                batch,
                SPATIAL,
                _priors(),
                McmcConfig(iterations=12_000, burnin=4_000, thin=4, seed=rep, store_w=False),
            )
            lo, hi = np.percentile(post.beta_draws()[:, 0], [2.5, 97.5])
            covered["beta"] += lo <= truth["beta"] <= hi
            lo, hi = np.percentile(post.nugget2_draws()[:, 0], [2.5, 97.5])
            covered["tau2"] += lo <= truth["tau2"] <= hi
            lo, hi = np.percentile(post.coreg_draws()[:, 0, 0], [2.5, 97.5])
            covered["l11"] += lo <= truth["l11"] <= hi
            lo, hi = np.percentile(post.decay_draws(), [2.5, 97.5])
            covered["phi"] += lo <= truth["phi"] <= hi
        for name, count in covered.items():
            assert count >= 18, f"{name} covered only {count}/{n_rep}"


class TestMakeBatches:
    def _design(self, n_days=8, per_day=6):
        from specdown.stations import (
            ModelVariant as MV,
            Observation,
            Station,
            assemble_design,
        )
        from specdown.grid import GridField, GridSpec

        rng = np.random.default_rng(0)
        spec = GridSpec(4, 4, 12.0)
        stations = {
            f"s{i}": Station(f"s{i}", rng.uniform(0, 48), rng.uniform(0, 48), frozenset([0]))
            for i in range(per_day)
        }
        fields = {
            (0, d): GridField(spec, rng.standard_normal(16), 0, d) for d in range(1, n_days + 1)
        }
        obs = [
            Observation(sid, d, 0, float(rng.standard_normal()))
            for d in range(1, n_days + 1)
            for sid in stations
        ]
        design = assemble_design(MV("LD", False, False), fields, [], obs, stations)
        return design, np.array([o.value for o in obs])

    def test_partial_batch_dropped_with_warning(self):
        design, y = self._design(n_days=8)
        with pytest.warns(UserWarning, match="partial batch"):
            batches = make_batches(design, y, range(1, 9), batch_len=3)
        assert [b.days for b in batches] == [(1, 2, 3), (4, 5, 6)]

    def test_windows_do_not_overlap(self):
        design, y = self._design(n_days=9)
        batches = make_batches(design, y, range(1, 10), batch_len=3)
        seen = set()
        for b in batches:
            assert not (seen & set(b.days))
            seen |= set(b.days)
        assert all(b.y.shape[0] == b.X.shape[0] == b.layout.n for b in batches)


class TestMarginalLoglik:
    def test_factorizes_over_batches(self):
        rng = np.random.default_rng(31)
        n_sites, days = 12, (1, 2, 3, 4, 5, 6)
        sites = rng.uniform(0, 150, (n_sites, 2))
        day = np.repeat(days, n_sites)
        layout = StackedLayout(
            day=day, pollutant=np.zeros(day.size, int), coords=np.tile(sites, (len(days), 1))
        )
        X = np.ones((day.size, 1))
        coreg = Coregionalization(np.array([[0.8]]))
        decay = SpatialDecay(0.03)
        y = 1.0 + sample_w(layout, coreg, decay, rng) + rng.normal(0, 0.3, day.size)
        whole = BatchData(days=days, y=y, X=X, layout=layout, n_pollutants=1)

        def sub(day_set):
            mask = np.isin(day, day_set)
            return BatchData(
                days=tuple(day_set),
                y=y[mask],
                X=X[mask],
                layout=StackedLayout(
                    day=day[mask], pollutant=np.zeros(mask.sum(), int), coords=layout.coords[mask]
                ),
                n_pollutants=1,
            )

        beta = np.array([1.0])
        nugget2 = np.array([0.09])
        ll_joint = marginal_loglik(whole, beta, coreg, decay, nugget2)
        ll_sum = sum(
            marginal_loglik(sub(ds), beta, coreg, decay, nugget2)
            for ds in ((1, 2, 3), (4, 5, 6))
        )
        assert ll_joint == pytest.approx(ll_sum, abs=1e-9)


def _gaussian_posterior(mean, var, n_draws, seed, days):
    rng = np.random.default_rng(seed)
    draws = rng.normal(mean, np.sqrt(var), size=(n_draws, 1))
    return BatchPosterior(
        draws=draws,
        param_names=("theta",),
        transforms=("id",),
        sample_cov=np.atleast_2d(np.cov(draws, rowvar=False)),
        n_beta=1,
        n_pollutants=1,
        days=days,
        seed=seed,
    )


class TestConsensus:
    def test_single_batch_returned_unchanged(self):
        post = _gaussian_posterior(0.0, 1.0, 500, 1, (1,))
        combined = consensus_combine([post])
        assert combined.draws is post.draws  # bit for bit, same buffer

    def test_gaussian_product_oracle(self):
        # subposteriors N(0,1) and N(2,1) drawn exactly; the product density
        # is N(1, 1/2)
        n = 50_000
        a = _gaussian_posterior(0.0, 1.0, n, 11, (1,))
        b = _gaussian_posterior(2.0, 1.0, n, 12, (2,))
        combined = consensus_combine([a, b])
        assert combined.draws.shape == (n, 1)
        assert abs(combined.draws.mean() - 1.0) < 0.02
        assert abs(combined.draws.var() - 0.5) < 0.05 * 0.5

    def test_permutation_invariant(self):
        a = _gaussian_posterior(0.0, 1.0, 400, 3, (1,))
        b = _gaussian_posterior(2.0, 2.0, 400, 4, (2,))
        c = _gaussian_posterior(-1.0, 0.5, 400, 5, (3,))
        x = consensus_combine([a, b, c])
        y = consensus_combine([c, a, b])
        assert np.array_equal(x.draws, y.draws)

    def test_mismatched_names_rejected(self):
        a = _gaussian_posterior(0.0, 1.0, 100, 3, (1,))
        b = BatchPosterior(
            draws=a.draws,
            param_names=("other",),
            transforms=("id",),
            sample_cov=a.sample_cov,
            n_beta=1,
            n_pollutants=1,
            days=(2,),
        )
        with pytest.raises(ValueError):
            consensus_combine([a, b])

    def test_truncates_to_shortest(self):
        a = _gaussian_posterior(0.0, 1.0, 300, 6, (1,))
        b = _gaussian_posterior(1.0, 1.0, 200, 7, (2,))
        with pytest.warns(UserWarning, match="truncating"):
            combined = consensus_combine([a, b])
        assert combined.n_draws == 200

    def test_combined_on_transformed_scale_then_both_stored(self):
        batch = _k1_batch(3)
        cfg = McmcConfig(iterations=400, burnin=200, thin=2, seed=2)
        p1 = fit_batch_mcmc(batch, SPATIAL, _priors(), cfg)
        p2 = fit_batch_mcmc(
            _k1_batch(4), SPATIAL, _priors(), McmcConfig(**{**cfg.__dict__, "seed": 3})
        )
        combined = consensus_combine([p1, p2])
        assert combined.natural is not None
        nat = combined.natural_draws()
        k = combined.n_beta
        assert np.allclose(nat[:, k], np.exp(combined.draws[:, k]))
        lo, hi = combined.decay_bounds
        assert np.all((nat[:, -1] > lo) & (nat[:, -1] < hi))


class TestOlsPosterior:
    def test_centered_on_ols_fit(self):
        rng = np.random.default_rng(21)
        n = 200
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
        y = X @ np.array([2.0, -1.0]) + rng.normal(0, 0.3, n)
        layout = StackedLayout(
            day=np.ones(n, int), pollutant=np.zeros(n, int), coords=rng.uniform(0, 10, (n, 2))
        )
        batch = BatchData(days=(1,), y=y, X=X, layout=layout, n_pollutants=1)
        post = ols_posterior(batch, n_draws=4000, seed=1)
        fit = fit_ols(X, y)
        assert np.allclose(post.beta_draws().mean(axis=0), fit.coef, atol=4 * fit.se.max() / 60)
        assert not post.has_spatial
        assert post.nugget2_draws().mean() == pytest.approx(fit.sigma2, rel=0.1)


class TestConfigValidation:
    def test_mcmc_config(self):
        with pytest.raises(ValueError):
            McmcConfig(iterations=100, burnin=100)
        with pytest.raises(ValueError):
            McmcConfig(thin=0)

    def test_priors(self):
        with pytest.raises(ValueError):
            Priors(decay_bounds=(0.5, 0.1))
        with pytest.raises(ValueError):
            Priors(decay_bounds=(0.1, 0.5), beta_sd=-1.0)

    def test_derive_rng_deterministic(self):
        a = derive_rng(42, 1, 2).standard_normal(4)
        b = derive_rng(42, 1, 2).standard_normal(4)
        c = derive_rng(42, 1, 3).standard_normal(4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
