import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anchorcfa.analysis import (
    AnalysisError,
    eap_scores,
    latent_gap,
    structural_effect,
    threshold_differences,
)
from anchorcfa.estimation import FitResult, fit
from anchorcfa.invariance import build_partial_spec
from anchorcfa.model import (
    CONFIGURAL,
    Item,
    ModelSpec,
    OrdinalDataset,
    PARTIAL_SCALAR_ANCHOR,
    ParameterSet,
    SCALAR,
    build_constraints,
)
from anchorcfa.simulation import (
    ANCHOR_ITEMS,
    SimCondition,
    _draw,
    _replication_rng,
    generate_replication,
)

from oracles import posterior_moments_grid


def fit_result_from_params(params, spec, dataset, ses=None, loglik=0.0):
    """Wrap externally supplied parameter values as a converged fit."""
    constraints = build_constraints(spec, dataset)
    return FitResult(
        params=params,
        loglik=loglik,
        n_free=constraints.n_free,
        converged=True,
        iterations=0,
        gradient_norm=0.0,
        tolerance=1e-4,
        spec_echo=spec,
        constraints=constraints,
        free_coords=constraints.free,
        standard_errors=ses,
    )


def two_group_params(item_names, thresholds_ref, thresholds_focal, mu_focal=0.0,
                     loadings=0.8):
    J = len(item_names)
    return ParameterSet(
        item_names=tuple(item_names),
        groups=("ref", "focal"),
        loadings=np.full((2, J), loadings),
        thresholds=(
            tuple(np.asarray(t, float) for t in thresholds_ref),
            tuple(np.asarray(t, float) for t in thresholds_focal),
        ),
        latent_mean=np.array([0.0, mu_focal]),
        latent_variance=np.array([1.0, 1.0]),
        residual_variance=np.ones((2, J)),
        latent_intercepts=np.zeros(J),
    )


def tiny_dataset(item_names, n_categories=2):
    return OrdinalDataset(
        items=tuple(Item(n, n_categories) for n in item_names),
        groups=("ref", "focal"),
        codes=np.ones((4, len(item_names)), dtype=int),
        group_index=np.array([0, 0, 1, 1]),
    )


class TestThresholdDifferences:
    def test_equal_thresholds_give_zero_diffs(self):
        names = ("a", "b")
        thr = [[-0.5], [0.3]]
        ds = tiny_dataset(names)
        spec = ModelSpec(item_names=names, constraint_level=CONFIGURAL,
                         reference_group="ref")
        fr = fit_result_from_params(two_group_params(names, thr, thr), spec, ds)
        table = threshold_differences(fr)
        assert all(r.diff == 0.0 for r in table.rows)

    def test_published_2008_battery_differences(self):
        # reference / focal threshold estimates for the four-item battery;
        # differences are focal minus reference by definition
        names = ("auth_1", "auth_2", "auth_3", "auth_4")
        ref = [[-0.879], [-0.554], [-0.179], [0.216]]
        focal = [[-1.325], [-1.294], [-1.000], [-0.338]]
        ds = tiny_dataset(names)
        spec = ModelSpec(item_names=names, constraint_level=CONFIGURAL,
                         reference_group="ref")
        fr = fit_result_from_params(two_group_params(names, ref, focal), spec, ds)
        table = threshold_differences(fr)
        diffs = {(r.item, r.index): r.diff for r in table.rows}
        assert diffs[("auth_2", 1)] == pytest.approx(-0.740, abs=5e-4)
        assert diffs[("auth_1", 1)] == pytest.approx(-0.446, abs=5e-4)

    def test_published_2016_battery_differences(self):
        names = ("auth_1",)
        ds = tiny_dataset(names)
        spec = ModelSpec(item_names=names, constraint_level=CONFIGURAL,
                         reference_group="ref")
        fr = fit_result_from_params(
            two_group_params(names, [[-0.432]], [[-0.730]]), spec, ds
        )
        table = threshold_differences(fr)
        assert table.rows[0].diff == pytest.approx(-0.298, abs=5e-4)

    def test_single_group_fit_rejected(self):
        ds = tiny_dataset(("a",))
        single = OrdinalDataset(items=ds.items, groups=("ref",),
                                codes=ds.codes[:2], group_index=np.zeros(2, dtype=int))
        spec = ModelSpec(item_names=("a",), constraint_level=CONFIGURAL,
                         reference_group="ref")
        params = ParameterSet(
            item_names=("a",), groups=("ref",), loadings=np.full((1, 1), 0.8),
            thresholds=((np.array([0.0]),),), latent_mean=np.zeros(1),
            latent_variance=np.ones(1), residual_variance=np.ones((1, 1)),
            latent_intercepts=np.zeros(1),
        )
        fr = fit_result_from_params(params, spec, single)
        with pytest.raises(AnalysisError):
            threshold_differences(fr)

    @settings(max_examples=20, deadline=None)
    @given(
        t_ref=st.floats(-1.5, 1.5),
        shift=st.floats(-1.0, 1.0),
    )
    def test_swapping_focal_negates_diffs(self, t_ref, shift):
        names = ("a",)
        ds = tiny_dataset(names)
        spec = ModelSpec(item_names=names, constraint_level=CONFIGURAL,
                         reference_group="ref")
        fr = fit_result_from_params(
            two_group_params(names, [[t_ref]], [[t_ref + shift]]), spec, ds
        )
        fwd = threshold_differences(fr, focal_group="focal")
        spec_rev = dataclasses.replace(spec, reference_group="focal")
        fr_rev = fit_result_from_params(
            two_group_params(names, [[t_ref]], [[t_ref + shift]]), spec_rev, ds
        )
        rev = threshold_differences(fr_rev, focal_group="ref")
        for a, b in zip(fwd.rows, rev.rows):
            assert a.diff == pytest.approx(-b.diff, abs=1e-12)

    def test_roles_follow_anchor_set(self):
        cond = SimCondition(n=400, replications=1)
        ds = generate_replication(cond, 0)
        spec = build_partial_spec(ds, ANCHOR_ITEMS)
        fr = fit(ds, spec)
        table = threshold_differences(fr)
        roles = {r.item: r.role for r in table.rows}
        assert roles["anchor_1"] == "anchor"
        assert roles["dif_1"] == "child-rearing"
        anchors = [r for r in table.rows if r.role == "anchor"]
        assert all(r.diff == 0.0 and r.se == 0.0 for r in anchors)


class TestLatentGap:
    def test_recovers_simulated_gap(self):
        cond = SimCondition(delta=0.3, loading=0.9, n=4000, base_seed=77,
                            replications=1)
        ds = generate_replication(cond, 0)
        fr = fit(ds, build_partial_spec(ds, ANCHOR_ITEMS), compute_se=True)
        gap, se = latent_gap(fr)
        assert 0.12 <= gap <= 0.28
        assert 0.0 < se < 0.2

    def test_identical_groups_give_near_zero_gap(self):
        cond = SimCondition(delta=0.0, true_gap=0.0, loading=0.9, n=4000,
                            base_seed=78, replications=1)
        ds = generate_replication(cond, 0)
        fr = fit(ds, build_partial_spec(ds, ANCHOR_ITEMS), compute_se=True)
        gap, _ = latent_gap(fr)
        assert -0.08 <= gap <= 0.08

    def test_configural_fit_rejected(self):
        cond = SimCondition(n=400, replications=1)
        ds = generate_replication(cond, 0)
        spec = ModelSpec(item_names=ds.item_names, constraint_level=CONFIGURAL,
                         reference_group="ref")
        fr = fit(ds, spec)
        with pytest.raises(AnalysisError, match="not identified"):
            latent_gap(fr)


class TestEapScores:
    def make_fit(self, names=("a", "b"), thresholds=None, loadings=0.9):
        thresholds = thresholds or [[0.0], [0.0]]
        ds = tiny_dataset(names)
        spec = ModelSpec(item_names=names, constraint_level=CONFIGURAL,
                         reference_group="ref")
        params = two_group_params(names, thresholds, thresholds,
                                  loadings=loadings)
        return ds, fit_result_from_params(params, spec, ds)

    def test_all_missing_scores_at_prior(self):
        names = ("a", "b")
        ds = OrdinalDataset(
            items=tuple(Item(n, 2) for n in names), groups=("ref", "focal"),
            codes=np.zeros((2, 2), dtype=int), group_index=np.array([0, 1]),
        )
        spec = ModelSpec(item_names=names, constraint_level=CONFIGURAL,
                         reference_group="ref")
        params = two_group_params(names, [[0.0], [0.0]], [[0.0], [0.0]])
        fr = fit_result_from_params(params, spec, ds)
        scores, sds = eap_scores(fr, ds)
        np.testing.assert_allclose(scores, [0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(sds, [1.0, 1.0], atol=1e-10)

    def test_zero_loadings_score_at_prior_mean(self):
        names = ("a", "b")
        ds = tiny_dataset(names)
        spec = ModelSpec(item_names=names, constraint_level=CONFIGURAL,
                         reference_group="ref")
        params = two_group_params(names, [[0.0], [0.0]], [[0.0], [0.0]],
                                  loadings=0.0)
        fr = fit_result_from_params(params, spec, ds)
        scores, _ = eap_scores(fr, ds)
        np.testing.assert_allclose(scores, np.zeros(4), atol=1e-12)

    def test_matches_dense_grid_posterior(self):
        ds, fr = self.make_fit()
        scores, sds = eap_scores(fr, ds)
        for i in range(ds.n_rows):
            mean, sd = posterior_moments_grid(
                list(ds.codes[i]), [0.9, 0.9], [[0.0], [0.0]], [1.0, 1.0],
                0.0, 1.0,
            )
            assert scores[i] == pytest.approx(mean, abs=1e-5)
            assert sds[i] == pytest.approx(sd, abs=1e-5)

    def test_monotone_in_category_for_positive_loading(self):
        names = ("only",)
        ds = OrdinalDataset(
            items=(Item("only", 4),), groups=("ref", "focal"),
            codes=np.array([[1], [2], [3], [4]]), group_index=np.zeros(4, dtype=int),
        )
        spec = ModelSpec(item_names=names, constraint_level=CONFIGURAL,
                         reference_group="ref")
        params = two_group_params(names, [[-1.0, 0.0, 1.0]], [[-1.0, 0.0, 1.0]])
        fr = fit_result_from_params(params, spec, ds)
        scores, sds = eap_scores(fr, ds)
        assert np.all(np.diff(scores) > 0)
        assert np.all(sds < 1.0)  # one informative item tightens the prior


def outcome_dataset(n=4000, beta=0.5, noise_sd=0.5, seed=101, delta=0.3,
                    with_covariate=False):
    cond = SimCondition(delta=delta, loading=0.9, n=n, base_seed=seed,
                        replications=1)
    group, eta, _, codes = _draw(cond, 0)
    rng = _replication_rng(cond, 0, stream="outcome-test")
    cov = rng.standard_normal(n) if with_covariate else None
    y = beta * eta + noise_sd * rng.standard_normal(n)
    if with_covariate:
        y = y + 0.3 * cov
    return OrdinalDataset(
        items=tuple(Item(f"dif_{i}", 4) for i in range(1, 5))
        + tuple(Item(f"anchor_{i}", 4, "anchor") for i in range(1, 5)),
        groups=("ref", "focal"),
        codes=codes,
        group_index=group,
        outcome=y,
        covariates=None if cov is None else cov[:, None],
        outcome_name="policy",
        covariate_names=("x1",) if with_covariate else (),
    )


class TestStructuralEffect:
    def test_joint_recovers_slope(self):
        ds = outcome_dataset()
        spec = build_partial_spec(ds, ANCHOR_ITEMS)
        effect = structural_effect(ds, spec, mode="joint")
        assert 0.4 <= effect.beta <= 0.6
        assert effect.policy_gap == pytest.approx(
            effect.beta * effect.trait_gap, abs=1e-12
        )

    def test_two_step_attenuates_relative_to_joint(self):
        ds = outcome_dataset()
        spec = build_partial_spec(ds, ANCHOR_ITEMS)
        joint = structural_effect(ds, spec, mode="joint")
        two_step = structural_effect(ds, spec, mode="two_step")
        assert abs(two_step.beta) <= abs(joint.beta) + 0.02
        assert two_step.policy_gap == pytest.approx(
            two_step.beta * two_step.trait_gap, abs=1e-12
        )

    def test_zero_slope_gives_zero_policy_gap(self):
        ds = outcome_dataset(beta=0.0, noise_sd=1.0, seed=55)
        spec = build_partial_spec(ds, ANCHOR_ITEMS)
        effect = structural_effect(ds, spec, mode="two_step")
        assert abs(effect.beta) < 0.05
        assert effect.policy_gap == pytest.approx(
            effect.beta * effect.trait_gap, abs=1e-12
        )

    def test_covariates_enter_both_modes(self):
        ds = outcome_dataset(n=2000, with_covariate=True, seed=66)
        spec = build_partial_spec(ds, ANCHOR_ITEMS)
        for mode in ("two_step", "joint"):
            effect = structural_effect(ds, spec, mode=mode)
            assert 0.3 <= effect.beta <= 0.7

    def test_group_specific_slopes_reported_when_rows_allow(self):
        ds = outcome_dataset(n=2000, seed=67)
        spec = build_partial_spec(ds, ANCHOR_ITEMS)
        effect = structural_effect(ds, spec, mode="two_step")
        assert effect.beta_by_group is not None
        assert set(effect.beta_by_group) == {"ref", "focal"}
        assert not effect.pooled

    def test_small_group_falls_back_to_pooled_with_note(self):
        ds = outcome_dataset(n=2000, seed=68)
        y = ds.outcome.copy()
        focal_rows = np.nonzero(ds.group_index == 1)[0]
        y[focal_rows[:-10]] = np.nan  # leave 10 focal outcomes
        ds2 = dataclasses.replace(ds, outcome=y)
        spec = build_partial_spec(ds2, ANCHOR_ITEMS)
        effect = structural_effect(ds2, spec, mode="two_step")
        assert effect.pooled
        assert effect.beta_by_group is None
        assert any("fewer than 30" in n for n in effect.notes)

    def test_missing_outcome_rejected(self):
        cond = SimCondition(n=400, replications=1)
        ds = generate_replication(cond, 0)
        spec = build_partial_spec(ds, ANCHOR_ITEMS)
        with pytest.raises(AnalysisError, match="no outcome"):
            structural_effect(ds, spec, mode="two_step")

    def test_collinear_covariates_named(self):
        ds = outcome_dataset(n=1000, with_covariate=True, seed=69)
        dup = np.hstack([ds.covariates, ds.covariates])
        ds2 = dataclasses.replace(ds, covariates=dup,
                                  covariate_names=("x1", "x1_copy"))
        spec = build_partial_spec(ds2, ANCHOR_ITEMS)
        with pytest.raises(AnalysisError, match="x1_copy"):
            structural_effect(ds2, spec, mode="two_step")
