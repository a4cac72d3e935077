import numpy as np
import pytest
from scipy.stats import norm

from anchorcfa.estimation import (
    EstimationError,
    chisq_sf,
    fit,
    is_nested,
    lrt,
    standard_errors,
)
from anchorcfa.model import (
    CONFIGURAL,
    ConstraintSet,
    Item,
    METRIC,
    ModelSpec,
    OrdinalDataset,
    PARTIAL_SCALAR_ANCHOR,
    SCALAR,
    build_constraints,
)
from anchorcfa.simulation import SimCondition, generate_replication

from oracles import numeric_gradient


def single_item_dataset(n, n_first):
    """n rows of one binary item, n_first of them in category 1."""
    codes = np.ones((n, 1), dtype=int)
    codes[n_first:, 0] = 2
    return OrdinalDataset(
        items=(Item("only", 2),), groups=("g0",),
        codes=codes, group_index=np.zeros(n, dtype=int),
    )


def fix_coordinate(constraints, coord, value):
    """Move one free coordinate into the fixed set."""
    assert coord in constraints.free
    return ConstraintSet(
        ties=constraints.ties,
        fixed=tuple(sorted(constraints.fixed + ((coord, value),))),
        free=tuple(c for c in constraints.free if c != coord),
    )


class TestChisqSf:
    def test_zero_statistic_gives_one(self):
        for df in (1, 3, 10):
            assert chisq_sf(0.0, df) == 1.0

    def test_reference_values(self):
        assert chisq_sf(4.077, 3) == pytest.approx(0.253, abs=1e-3)
        assert chisq_sf(2.658, 3) == pytest.approx(0.448, abs=1e-3)
        assert chisq_sf(38.500, 5) < 0.001

    def test_agrees_with_scipy_distribution(self):
        from scipy.stats import chi2

        for x, df in ((0.5, 1), (7.3, 4), (25.0, 10), (130.0, 100)):
            assert chisq_sf(x, df) == pytest.approx(chi2.sf(x, df), abs=1e-10)

    def test_invalid_inputs(self):
        with pytest.raises(EstimationError):
            chisq_sf(-1.0, 3)
        with pytest.raises(EstimationError):
            chisq_sf(1.0, 0)


class TestSingleItemFits:
    def test_balanced_binary_item_threshold_zero(self):
        # loading held at zero: threshold is the probit inverse of the
        # first-category share, here exactly 0.5 -> 0
        ds = single_item_dataset(1000, 500)
        spec = ModelSpec(item_names=("only",), constraint_level=CONFIGURAL,
                         reference_group="g0")
        cs = fix_coordinate(build_constraints(spec, ds), ("loading", 0, 0), 0.0)
        r = fit(ds, spec, constraints=cs)
        assert r.converged
        assert r.params.thresholds[0][0][0] == pytest.approx(0.0, abs=1e-6)

    def test_skewed_binary_item_matches_inverse_cdf_oracle(self):
        n = 100_000
        n_first = round(n * norm.cdf(-1.0))
        ds = single_item_dataset(n, n_first)
        spec = ModelSpec(item_names=("only",), constraint_level=CONFIGURAL,
                         reference_group="g0")
        cs = fix_coordinate(build_constraints(spec, ds), ("loading", 0, 0), 0.0)
        r = fit(ds, spec, constraints=cs)
        oracle = norm.ppf(n_first / n)  # trait-free item: plain probit inverse
        assert oracle == pytest.approx(-1.0, abs=1e-3)
        assert r.params.thresholds[0][0][0] == pytest.approx(oracle, abs=1e-6)
        assert r.params.thresholds[0][0][0] == pytest.approx(-1.0, abs=1e-3)

    def test_unit_loading_scales_threshold_by_latent_sd(self):
        # with loading fixed at 1 and unit residual variance the marginal
        # latent-response SD is sqrt(2), so the threshold is scaled up
        n = 100_000
        n_first = round(n * norm.cdf(-1.0))
        ds = single_item_dataset(n, n_first)
        spec = ModelSpec(item_names=("only",), constraint_level=CONFIGURAL,
                         reference_group="g0")
        cs = fix_coordinate(build_constraints(spec, ds), ("loading", 0, 0), 1.0)
        r = fit(ds, spec, constraints=cs)
        oracle = np.sqrt(2.0) * norm.ppf(n_first / n)
        assert r.params.thresholds[0][0][0] == pytest.approx(oracle, abs=1e-4)


class TestRecovery:
    def test_partial_anchor_recovers_latent_gap_with_dif(self):
        cond = SimCondition(delta=0.0, loading=0.9, n=4000, base_seed=42,
                            replications=1)
        ds = generate_replication(cond, 0)
        spec = ModelSpec(
            item_names=ds.item_names,
            constraint_level=PARTIAL_SCALAR_ANCHOR,
            reference_group="ref",
            anchor_set=frozenset(n for n in ds.item_names if n.startswith("anchor")),
        )
        r = fit(ds, spec)
        assert r.converged
        assert abs(r.params.latent_mean[1] - 0.2) <= 0.08

    def test_refit_from_optimum_is_fixed_point(self):
        cond = SimCondition(delta=0.3, loading=0.9, n=800, base_seed=9,
                            replications=1)
        ds = generate_replication(cond, 0)
        spec = ModelSpec(item_names=ds.item_names, constraint_level=SCALAR,
                         reference_group="ref")
        first = fit(ds, spec)
        again = fit(ds, spec, start=first.params)
        assert again.converged
        assert again.loglik == pytest.approx(first.loglik, abs=1e-7)
        np.testing.assert_allclose(
            again.params.latent_mean, first.params.latent_mean, atol=1e-5
        )

    def test_monotone_improvement_across_iterations(self):
        cond = SimCondition(delta=0.3, loading=0.9, n=600, base_seed=4,
                            replications=1)
        ds = generate_replication(cond, 0)
        spec = ModelSpec(item_names=ds.item_names, constraint_level=METRIC,
                         reference_group="ref")
        r = fit(ds, spec, keep_trace=True)
        trace = np.array(r.trace)
        assert trace.size >= 2
        assert np.all(np.diff(trace) >= -1e-9)

    def test_gradient_small_at_optimum_numeric_check(self):
        # numeric central differences on the free coordinates, independent
        # of the analytic gradient path
        cond = SimCondition(delta=0.0, loading=0.9, n=500, base_seed=11,
                            replications=1)
        ds = generate_replication(cond, 0)
        spec = ModelSpec(item_names=ds.item_names[:4], constraint_level=SCALAR,
                         reference_group="ref")
        r = fit(ds, spec)
        assert r.converged
        from anchorcfa.estimation import _raw_gradient_fn
        from anchorcfa.likelihood import QuadratureRule, total_loglik

        rule = QuadratureRule.gauss_hermite(spec.quadrature_points)
        pmap, _ = _raw_gradient_fn(r, ds, rule)
        x0 = pmap.raw_from_params(r.params)

        def loglik_at(x):
            return total_loglik(ds, pmap.params_from_raw(x), rule,
                                item_subset=spec.item_names)

        g = numeric_gradient(loglik_at, x0, h=1e-5)
        assert np.abs(g).max() <= max(1e-4, abs(r.loglik) * 1e-8) * 1.5

    def test_nonconvergence_reported_not_raised(self):
        cond = SimCondition(delta=0.0, loading=0.9, n=400, base_seed=3,
                            replications=1)
        ds = generate_replication(cond, 0)
        spec = ModelSpec(item_names=ds.item_names, constraint_level=CONFIGURAL,
                         reference_group="ref")
        r = fit(ds, spec, max_iterations=2)
        assert not r.converged
        assert r.iterations <= 4
        assert np.isfinite(r.loglik)


class TestStandardErrors:
    def make_fit(self, n, seed=21):
        cond = SimCondition(delta=0.0, loading=0.9, n=n, base_seed=seed,
                            replications=1)
        ds = generate_replication(cond, 0)
        spec = ModelSpec(item_names=ds.item_names[:3], constraint_level=SCALAR,
                         reference_group="ref")
        return ds, fit(ds, spec, compute_se=True)

    def test_row_duplication_shrinks_se_by_sqrt2(self):
        ds, r1 = self.make_fit(600)
        doubled = OrdinalDataset(
            items=ds.items, groups=ds.groups,
            codes=np.vstack([ds.codes, ds.codes]),
            group_index=np.concatenate([ds.group_index, ds.group_index]),
        )
        r2 = fit(doubled, r1.spec_echo, compute_se=True)
        for coord, se1 in r1.standard_errors.items():
            se2 = r2.standard_errors[coord]
            assert se2 / se1 == pytest.approx(1 / np.sqrt(2), rel=0.05)

    def test_fixed_coordinates_have_no_entry(self):
        ds, r = self.make_fit(400)
        fixed_coords = {c for c, _ in r.constraints.fixed}
        assert not fixed_coords & set(r.standard_errors)
        assert set(r.standard_errors) == set(r.free_coords)

    def test_threshold_se_matches_binomial_delta_method(self):
        # trait-free binary item: var(tau_hat) = p(1-p)/(n * pdf(tau)^2)
        n = 4000
        n_first = round(n * 0.3)
        ds = single_item_dataset(n, n_first)
        spec = ModelSpec(item_names=("only",), constraint_level=CONFIGURAL,
                         reference_group="g0")
        cs = fix_coordinate(build_constraints(spec, ds), ("loading", 0, 0), 0.0)
        r = fit(ds, spec, constraints=cs)
        se = standard_errors(r, ds)
        p_hat = n_first / n
        tau_hat = norm.ppf(p_hat)
        oracle = np.sqrt(p_hat * (1 - p_hat) / n) / norm.pdf(tau_hat)
        assert se.se[0] == pytest.approx(oracle, rel=0.10)

    def test_singular_information_flagged_unavailable(self):
        # balanced binary item with a free loading: the likelihood is flat
        # in the loading, so the information matrix is singular
        ds = single_item_dataset(500, 250)
        spec = ModelSpec(item_names=("only",), constraint_level=CONFIGURAL,
                         reference_group="g0")
        r = fit(ds, spec, compute_se=True)
        assert r.converged
        assert not r.se_available.all()
        assert np.isnan(r.standard_errors[("loading", 0, 0)])

    def test_requires_converged_fit(self):
        cond = SimCondition(n=400, base_seed=3, replications=1)
        ds = generate_replication(cond, 0)
        spec = ModelSpec(item_names=ds.item_names[:2], constraint_level=SCALAR,
                         reference_group="ref")
        r = fit(ds, spec, max_iterations=1)
        if not r.converged:
            with pytest.raises(EstimationError):
                standard_errors(r, ds)


class TestLrt:
    def ladder_fits(self, n=1500, delta=0.0, seed=5):
        cond = SimCondition(delta=delta, loading=0.9, n=n, base_seed=seed,
                            replications=1)
        ds = generate_replication(cond, 0)
        fits = {}
        prev = None
        for level in (CONFIGURAL, METRIC, SCALAR):
            spec = ModelSpec(item_names=ds.item_names, constraint_level=level,
                             reference_group="ref")
            prev = fit(ds, spec, start=prev.params if prev else None)
            fits[level] = prev
        return fits

    def test_nested_logliks_ordered(self):
        fits = self.ladder_fits()
        assert fits[SCALAR].loglik <= fits[METRIC].loglik + 1e-6
        assert fits[METRIC].loglik <= fits[CONFIGURAL].loglik + 1e-6

    def test_equal_logliks_give_p_one(self):
        fits = self.ladder_fits()
        import dataclasses

        equalized = dataclasses.replace(
            fits[METRIC], loglik=fits[CONFIGURAL].loglik
        )
        res = lrt(equalized, fits[CONFIGURAL])
        assert res.delta_chisq == 0.0
        assert res.p_value == 1.0

    def test_delta_df_and_p_value(self):
        fits = self.ladder_fits()
        res = lrt(fits[METRIC], fits[CONFIGURAL])
        assert res.delta_df == fits[CONFIGURAL].n_free - fits[METRIC].n_free
        assert res.delta_chisq >= 0
        assert res.p_value == pytest.approx(
            chisq_sf(res.delta_chisq, res.delta_df), abs=1e-15
        )

    def test_same_spec_rejected(self):
        fits = self.ladder_fits()
        with pytest.raises(EstimationError):
            lrt(fits[METRIC], fits[METRIC])

    def test_reversed_nesting_rejected(self):
        fits = self.ladder_fits()
        with pytest.raises(EstimationError):
            lrt(fits[CONFIGURAL], fits[SCALAR])

    def test_nesting_relation_on_constraint_sets(self):
        cond = SimCondition(n=400, replications=1)
        ds = generate_replication(cond, 0)

        def cs(level, anchors=()):
            spec = ModelSpec(item_names=ds.item_names, constraint_level=level,
                             reference_group="ref", anchor_set=frozenset(anchors))
            return build_constraints(spec, ds)

        configural = cs(CONFIGURAL)
        metric = cs(METRIC)
        scalar = cs(SCALAR)
        partial = cs(PARTIAL_SCALAR_ANCHOR,
                     [n for n in ds.item_names if n.startswith("anchor")])
        assert is_nested(metric, configural)
        assert is_nested(scalar, metric)
        assert is_nested(scalar, partial)
        assert is_nested(partial, metric)
        assert not is_nested(configural, metric)
        assert not is_nested(partial, scalar)
