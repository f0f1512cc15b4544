import numpy as np
import pytest

from krigbench.dataio import (
    FieldMeta,
    SensorField,
    fit_normalizer,
    load_field,
    make_missing_pattern,
    save_field,
    synth_gp_field,
)
from krigbench.errors import ConfigError, DegenerateScaleError, ParseError, ShapeError
from krigbench.splits import SplitPlan


def write_csv_dataset(tmp_path, rows, coords_rows, name="data.csv"):
    data = tmp_path / name
    data.write_text("\n".join(rows) + "\n")
    sidecar = tmp_path / (data.stem + ".coords.csv")
    sidecar.write_text("\n".join(coords_rows) + "\n")
    return data


def tiny_plan(node_roles, period_roles):
    return SplitPlan(
        node_roles=np.array(node_roles),
        period_roles=np.array(period_roles),
        scheme="3x3",
        temporal_mode="contiguous-ratio",
    )


class TestLoadField:
    def test_clean_csv(self, tmp_path):
        path = write_csv_dataset(
            tmp_path,
            ["node_0,node_1,node_2", "1,2,3", "4,5,6", "7,8,9", "10,11,12"],
            ["node_id,x,y", "0,0.0,0.0", "1,1.0,0.0", "2,0.0,1.0"],
        )
        field = load_field(path)
        assert field.n_nodes == 3
        assert field.n_steps == 4
        assert field.mask.all()
        assert field.values[2, 3] == 12.0  # values are node-major

    def test_nan_sentinel(self, tmp_path):
        path = write_csv_dataset(
            tmp_path,
            ["node_0,node_1", "1,2", "3,4", "5,NaN"],
            ["node_id,x,y", "0,0,0", "1,1,0"],
        )
        field = load_field(path)
        assert not field.mask[1, 2]
        assert field.mask.sum() == 5

    def test_empty_cell_sentinel(self, tmp_path):
        path = write_csv_dataset(
            tmp_path,
            ["node_0,node_1", "1,", "3,4"],
            ["node_id,x,y", "0,0,0", "1,1,0"],
        )
        assert not load_field(path).mask[1, 0]

    def test_coords_mismatch(self, tmp_path):
        path = write_csv_dataset(
            tmp_path,
            ["node_0,node_1,node_2", "1,2,3"],
            ["node_id,x,y", "0,0,0", "1,1,0"],
        )
        with pytest.raises(ShapeError):
            load_field(path)

    def test_malformed_row_reports_line(self, tmp_path):
        path = write_csv_dataset(
            tmp_path,
            ["node_0,node_1", "1,2", "3,oops"],
            ["node_id,x,y", "0,0,0", "1,1,0"],
        )
        with pytest.raises(ParseError) as err:
            load_field(path)
        assert err.value.line == 3

    def test_binary_round_trip(self, tmp_path):
        field = synth_gp_field(5, 7, 0.4, 0.3, 0.0, seed=1)
        field.mask[2, 3] = False
        path = tmp_path / "field.krgf"
        save_field(field, path, format="packed-binary")
        loaded = load_field(path, format="packed-binary")
        np.testing.assert_array_equal(loaded.values, field.values)
        np.testing.assert_array_equal(loaded.mask, field.mask)
        np.testing.assert_allclose(loaded.coords, field.coords)

    def test_csv_round_trip_with_capacity(self, tmp_path):
        values = np.array([[0.0, 5.0], [1.0, 2.0]])
        field = SensorField(
            coords=np.array([[0.0, 0.0], [1.0, 1.0]]),
            values=values,
            mask=np.ones_like(values, bool),
            meta=FieldMeta(name="x", capacity=np.array([10.0, 4.0])),
        )
        path = tmp_path / "cap.csv"
        save_field(field, path)
        loaded = load_field(path)
        np.testing.assert_allclose(loaded.values, values)
        np.testing.assert_allclose(loaded.meta.capacity, [10.0, 4.0])


class TestNormalizer:
    def capacity_field(self):
        values = np.array([[0.0, 5.0, 10.0], [1.0, 2.0, 3.0], [2.0, 4.0, 8.0]])
        return SensorField(
            coords=np.zeros((3, 2)) + np.arange(3)[:, None],
            values=values,
            mask=np.ones_like(values, bool),
            meta=FieldMeta(capacity=np.array([10.0, 4.0, 8.0])),
        )

    def test_capacity_scaling(self):
        field = self.capacity_field()
        plan = tiny_plan(["train", "val", "test"], ["train", "train", "train"])
        norm = fit_normalizer(field, plan, "per-node-min-max-by-capacity")
        np.testing.assert_allclose(
            norm.transform(field.values[0:1], nodes=[0]), [[0.0, 0.5, 1.0]]
        )

    def test_zscore_symmetric_pair(self):
        values = np.array([[1.0, 3.0], [9.0, 9.0], [9.0, 9.0]])
        field = SensorField(
            coords=np.arange(6, dtype=float).reshape(3, 2),
            values=values,
            mask=np.ones_like(values, bool),
        )
        plan = tiny_plan(["train", "val", "test"], ["train", "train"])
        norm = fit_normalizer(field, plan, "global-z-score")
        assert norm.offset[0] == pytest.approx(2.0)
        assert norm.scale[0] == pytest.approx(1.0)
        np.testing.assert_allclose(norm.transform(np.array([1.0, 3.0])), [-1.0, 1.0])

    def test_constant_series_degenerate(self):
        values = np.full((3, 4), 7.0)
        field = SensorField(
            coords=np.arange(6, dtype=float).reshape(3, 2),
            values=values,
            mask=np.ones_like(values, bool),
        )
        plan = tiny_plan(["train", "val", "test"], ["train"] * 4)
        with pytest.raises(DegenerateScaleError):
            fit_normalizer(field, plan, "global-z-score")

    def test_round_trip(self):
        field = synth_gp_field(8, 20, 0.5, 0.2, 0.1, seed=3)
        plan = tiny_plan(
            ["train"] * 5 + ["val", "val", "test"],
            ["train"] * 14 + ["val"] * 2 + ["test"] * 4,
        )
        norm = fit_normalizer(field, plan, "global-z-score")
        back = norm.inverse(norm.transform(field.values))
        np.testing.assert_allclose(back, field.values, rtol=1e-10)

    def test_fit_never_reads_outside_train_diagonal(self):
        field = synth_gp_field(8, 20, 0.5, 0.2, 0.1, seed=3)
        plan = tiny_plan(
            ["train"] * 5 + ["val", "val", "test"],
            ["train"] * 14 + ["val"] * 2 + ["test"] * 4,
        )
        clean = fit_normalizer(field, plan, "global-z-score")
        # Poison everything outside the training diagonal; the fit must not notice.
        poisoned = SensorField(
            coords=field.coords,
            values=field.values.copy(),
            mask=field.mask.copy(),
        )
        tainted = np.ones_like(poisoned.values, dtype=bool)
        tainted[np.ix_(plan.nodes("train"), plan.steps("train"))] = False
        poisoned.values[tainted] = np.nan
        dirty = fit_normalizer(poisoned, plan, "global-z-score")
        assert dirty.offset[0] == clean.offset[0]
        assert dirty.scale[0] == clean.scale[0]


class TestMissingPattern:
    def test_sizes_100(self):
        roles = make_missing_pattern(100, (0.6, 0.2, 0.2), seed=42)
        assert (roles == "train").sum() == 60
        assert (roles == "val").sum() == 20
        assert (roles == "test").sum() == 20

    def test_determinism(self):
        a = make_missing_pattern(50, (0.6, 0.2, 0.2), seed=7)
        b = make_missing_pattern(50, (0.6, 0.2, 0.2), seed=7)
        np.testing.assert_array_equal(a, b)

    def test_floor_arithmetic(self):
        roles = make_missing_pattern(5, (0.6, 0.2, 0.2), seed=0)
        assert (roles == "train").sum() == 3
        assert (roles == "val").sum() == 1
        assert (roles == "test").sum() == 1

    def test_distinct_seeds_differ(self):
        seeds = (42, 3407, 1202, 6666)
        patterns = [tuple(make_missing_pattern(40, (0.6, 0.2, 0.2), s)) for s in seeds]
        assert len(set(patterns)) == len(seeds)

    def test_bad_ratios(self):
        with pytest.raises(ConfigError):
            make_missing_pattern(10, (0.5, 0.5, 0.0), seed=0)
        with pytest.raises(ConfigError):
            make_missing_pattern(10, (0.5, 0.2, 0.2), seed=0)


class TestSynthGpField:
    def test_deterministic(self):
        a = synth_gp_field(6, 50, 0.4, 0.5, 0.1, seed=9)
        b = synth_gp_field(6, 50, 0.4, 0.5, 0.1, seed=9)
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.coords, b.coords)

    def test_rho_zero_columns_independent(self):
        field = synth_gp_field(6, 2000, 0.4, 0.0, 0.0, seed=5)
        x = field.values
        for v in range(6):
            a, b = x[v, :-1], x[v, 1:]
            corr = np.corrcoef(a, b)[0, 1]
            assert abs(corr) < 0.1

    def test_flat_kernel_limit(self):
        field = synth_gp_field(10, 50, 1e6, 0.0, 0.0, seed=2)
        assert np.all(field.values.std(axis=0) < 1e-2)

    def test_empirical_covariance_matches_kernel(self):
        field = synth_gp_field(8, 5000, 0.5, 0.0, 0.0, seed=11)
        diff = field.coords[:, None, :] - field.coords[None, :, :]
        kernel = np.exp(-np.einsum("ijk,ijk->ij", diff, diff) / 0.5**2)
        emp = np.cov(field.values, bias=True)
        assert np.max(np.abs(emp - kernel)) < 0.1

    def test_ar1_marginal_preserved(self):
        # Strong temporal correlation must not change the per-step spatial law.
        field = synth_gp_field(8, 5000, 0.5, 0.9, 0.0, seed=12)
        assert abs(field.values.var(axis=1).mean() - 1.0) < 0.15

    def test_parameter_validation(self):
        with pytest.raises(ConfigError):
            synth_gp_field(3, 10, 0.5, 0.0, 0.0, seed=0)
        with pytest.raises(ConfigError):
            synth_gp_field(5, 10, 0.5, 1.0, 0.0, seed=0)
