import numpy as np
import pytest

from anchorcfa.invariance import (
    InvarianceError,
    build_partial_spec,
    moment_count,
    run_anchor_validation,
    run_invariance_ladder,
)
from anchorcfa.estimation import fit
from anchorcfa.model import (
    CONFIGURAL,
    Item,
    METRIC,
    ModelSpec,
    OrdinalDataset,
    PARTIAL_SCALAR_ANCHOR,
    SCALAR,
    SCALAR_FV,
    build_constraints,
)
from anchorcfa.simulation import ANCHOR_ITEMS, DIF_ITEMS, SimCondition, generate_replication

N_SEEDS = 12


def sim_dataset(delta, n, seed):
    cond = SimCondition(delta=delta, loading=0.9, n=n, base_seed=seed,
                        replications=1)
    return generate_replication(cond, 0)


class TestAnchorValidation:
    def test_invariant_anchors_pass_metric_on_most_seeds(self):
        # anchors generated with identical parameters in both groups: the
        # metric step should not reject
        passes = 0
        for seed in range(N_SEEDS):
            ds = sim_dataset(delta=0.0, n=4000, seed=1000 + seed)
            result = run_anchor_validation(ds, ANCHOR_ITEMS)
            row = result.row(METRIC)
            assert row.converged
            passes += row.p_value >= 0.05
        assert passes >= N_SEEDS - 2

    def test_shifted_candidates_fail_scalar_on_most_seeds(self):
        # a candidate battery where two of four items carry a threshold
        # shift: the scalar step should reject.  (A shift common to every
        # item in the battery is absorbable by the free latent mean and is
        # not detectable by construction.)
        rejects = 0
        for seed in range(N_SEEDS):
            ds = sim_dataset(delta=0.5, n=4000, seed=2000 + seed)
            result = run_anchor_validation(
                ds, ["dif_1", "dif_2", "anchor_1", "anchor_2"]
            )
            row = result.row(SCALAR)
            assert row.converged
            rejects += row.p_value < 0.05
        assert rejects >= N_SEEDS - 1

    def test_uniformly_shifted_battery_is_absorbed_by_latent_mean(self):
        # the identification fact anchors exist to address: a shift shared
        # by every battery item is indistinguishable from a mean difference
        ds = sim_dataset(delta=0.5, n=4000, seed=2500)
        result = run_anchor_validation(ds, DIF_ITEMS)
        assert result.row(SCALAR).p_value >= 0.05

    def test_single_group_dataset_rejected(self):
        ds = sim_dataset(0.0, 400, 1)
        sel = ds.group_index == 0
        single = OrdinalDataset(items=ds.items, groups=("ref",),
                                codes=ds.codes[sel], group_index=ds.group_index[sel])
        with pytest.raises(InvarianceError, match="requires >= 2 groups"):
            run_anchor_validation(single, ANCHOR_ITEMS)

    def test_fewer_than_two_anchors_rejected(self):
        ds = sim_dataset(0.0, 400, 1)
        with pytest.raises(InvarianceError):
            run_anchor_validation(ds, ["anchor_1"])

    def test_result_invariant_to_anchor_listing_order(self):
        ds = sim_dataset(0.3, 1000, 7)
        a = run_anchor_validation(ds, list(ANCHOR_ITEMS))
        b = run_anchor_validation(ds, list(ANCHOR_ITEMS)[::-1])
        assert a == b


class TestInvarianceLadder:
    def test_rows_ordered_and_df_increasing(self):
        ds = sim_dataset(0.3, 1500, 3)
        spec = ModelSpec(item_names=ds.item_names, constraint_level=CONFIGURAL,
                         reference_group="ref")
        result = run_invariance_ladder(ds, spec)
        levels = [r.level for r in result.rows]
        assert levels == [CONFIGURAL, METRIC, SCALAR, SCALAR_FV]
        dfs = [r.df_model for r in result.rows]
        assert dfs == sorted(dfs)
        for row in result.rows[1:]:
            assert row.delta_chisq is not None and row.delta_chisq >= 0.0
            assert row.delta_df >= 1
            assert 0.0 <= row.p_value <= 1.0
        lls = [r.loglik for r in result.rows]
        assert all(lls[i] >= lls[i + 1] - 1e-6 for i in range(len(lls) - 1))

    def test_dif_data_rejects_scalar_but_not_metric(self):
        ds = sim_dataset(0.5, 2000, 17)
        spec = ModelSpec(item_names=ds.item_names, constraint_level=CONFIGURAL,
                         reference_group="ref")
        result = run_invariance_ladder(ds, spec)
        assert result.row(METRIC).p_value >= 0.05
        assert result.row(SCALAR).p_value < 0.01

    def test_identical_groups_leave_every_step_insignificant(self):
        base = sim_dataset(0.0, 2000, 23)
        half = base.codes[base.group_index == 0]
        codes = np.vstack([half, half])
        ds = OrdinalDataset(
            items=base.items, groups=("ref", "focal"), codes=codes,
            group_index=np.repeat([0, 1], half.shape[0]),
        )
        spec = ModelSpec(item_names=ds.item_names, constraint_level=CONFIGURAL,
                         reference_group="ref")
        result = run_invariance_ladder(ds, spec)
        for row in result.rows[1:]:
            assert row.converged
            assert row.p_value > 0.99

    def test_moment_count_bookkeeping(self):
        ds = sim_dataset(0.0, 400, 2)
        # 8 items x 3 thresholds plus 28 pairwise associations, two groups
        assert moment_count(ds, ds.item_names) == 2 * (24 + 28)


class TestBuildPartialSpec:
    def test_spec_shape(self):
        ds = sim_dataset(0.3, 800, 5)
        spec = build_partial_spec(ds, ANCHOR_ITEMS)
        assert spec.constraint_level == PARTIAL_SCALAR_ANCHOR
        assert spec.reference_group == "ref"
        assert spec.anchor_set == frozenset(ANCHOR_ITEMS)
        cs = build_constraints(spec, ds)
        free_thresholds = {c[2] for c in cs.free if c[0] == "threshold" and c[1] == 1}
        assert free_thresholds == {0, 1, 2, 3}  # shifted items stay free

    def test_all_items_as_anchors_equals_scalar(self):
        ds = sim_dataset(0.0, 800, 5)
        spec = build_partial_spec(ds, ds.item_names)
        scalar = ModelSpec(item_names=ds.item_names, constraint_level=SCALAR,
                           reference_group="ref")
        assert build_constraints(spec, ds) == build_constraints(scalar, ds)

    def test_empty_anchors_rejected(self):
        ds = sim_dataset(0.0, 400, 5)
        with pytest.raises(InvarianceError):
            build_partial_spec(ds, [])

    def test_single_anchor_warns_but_recovers_gap(self):
        ds = sim_dataset(0.3, 4000, 31)
        with pytest.warns(UserWarning, match="single anchor"):
            spec = build_partial_spec(ds, ["anchor_1"])
        r = fit(ds, spec)
        assert r.converged
        assert abs(r.params.latent_mean[1] - 0.2) <= 0.15
