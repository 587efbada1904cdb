import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_cohort
from subcohort.cohort import (
    DAYS_PER_YEAR,
    CohortError,
    CohortParseError,
    CohortSchema,
    Design,
    MeasurementSchedule,
    apply_design,
    at_risk,
    load_cohort,
    load_design,
    save_cohort,
    save_design,
    truncate,
    validate_design,
)

SCHED = MeasurementSchedule((0.0, 10.0, 20.0), 30.0)
SCHEMA = CohortSchema(SCHED, {"x": "continuous"})


def write(tmp_path, text):
    p = tmp_path / "c.csv"
    p.write_text(text)
    return p


def days(y):
    return repr(y * DAYS_PER_YEAR)


class TestSchedule:
    def test_valid(self):
        assert SCHED.M == 2
        np.testing.assert_allclose(SCHED.boundaries, [0, 10, 20, 30])

    @pytest.mark.parametrize("times,end", [((0, 10, 10), 30), ((1, 10), 30), ((0, 10, 20), 20), ((0,), 30)])
    def test_invalid(self, times, end):
        with pytest.raises(ValueError):
            MeasurementSchedule(times, end)


class TestLoad:
    def test_interval_bracketing(self, tmp_path):
        # event between tau_1 and tau_2 (ages 60 and 70)
        p = write(tmp_path, f"id,baseline_age,x_w0,x_w1,x_w2,event_age,event\n1,{days(50)},0.1,0.2,,{days(65)},1\n")
        c = load_cohort(p, SCHEMA)
        rec = c.records
        np.testing.assert_array_equal(rec.active[0], [True, True, False])
        np.testing.assert_array_equal(rec.delta[0][rec.active[0]], [0, 1])
        assert rec.last_alive_wave[0] == 1

    def test_administrative_censoring(self, tmp_path):
        p = write(tmp_path, f"id,baseline_age,x_w0,x_w1,x_w2,event_age,event\n1,{days(50)},0,0,0,{days(85)},1\n")
        c = load_cohort(p, SCHEMA)
        rec = c.records
        assert rec.active[0].all() and not rec.delta[0].any()
        assert rec.t_hi[0, 2] == pytest.approx(80 * DAYS_PER_YEAR)

    def test_missing_mask(self, tmp_path):
        p = write(tmp_path, "id,baseline_age,x_w0,x_w1,x_w2,event_age,event\n"
                  f"1,{days(50)},0,1,2,{days(85)},0\n2,{days(50)},0,,2,{days(85)},0\n3,{days(50)},0,1,2,{days(85)},0\n")
        c = load_cohort(p, SCHEMA)
        expected = np.zeros((3, 3, 1), bool)
        expected[1, 1, 0] = True
        np.testing.assert_array_equal(c.panel.missing_mask, expected)

    def test_rows_sorted_by_id(self, tmp_path):
        p = write(tmp_path, "id,baseline_age,x_w0,x_w1,x_w2,event_age,event\n"
                  f"10,{days(50)},0,1,2,{days(85)},0\n2,{days(51)},0,1,2,{days(85)},0\n")
        assert load_cohort(p, SCHEMA).ids == ("2", "10")

    def test_parse_error_row_number(self, tmp_path):
        p = write(tmp_path, "id,baseline_age,x_w0,x_w1,x_w2,event_age,event\n"
                  f"1,{days(50)},0,1,2,{days(85)},0\n2,{days(50)},zero,1,2,{days(85)},0\n")
        with pytest.raises(CohortParseError) as err:
            load_cohort(p, SCHEMA)
        assert err.value.row == 3

    def test_event_before_baseline(self, tmp_path):
        p = write(tmp_path, f"id,baseline_age,x_w0,x_w1,x_w2,event_age,event\n1,{days(50)},0,1,2,{days(40)},1\n")
        with pytest.raises(CohortError):
            load_cohort(p, SCHEMA)

    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        vals = rng.normal(size=(6, 3))
        vals[2, 1] = np.nan
        c = make_cohort(rng.uniform(45, 65, 6), [90, 58, 70, 90, 62, 90], [0, 1, 1, 0, 1, 0], vals, names=("x",))
        save_cohort(c, tmp_path / "a.csv")
        d = load_cohort(tmp_path / "a.csv", SCHEMA)
        np.testing.assert_array_equal(d.panel.values, c.panel.values)
        np.testing.assert_array_equal(d.panel.missing_mask, c.panel.missing_mask)
        np.testing.assert_array_equal(d.survival.exit_age, c.survival.exit_age)
        np.testing.assert_array_equal(d.survival.baseline_age, c.survival.baseline_age)
        save_cohort(d, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_binary_values_validated(self):
        with pytest.raises(CohortError):
            make_cohort([50], [90], [0], [[0, 0.5, 1]], kinds=("binary",))


class TestAtRisk:
    def test_all_alive(self):
        c = make_cohort([50, 55], [90, 90], [0, 0], np.zeros((2, 3)))
        np.testing.assert_array_equal(at_risk(c, 1), [0, 1])

    def test_event_in_first_interval_excluded(self):
        c = make_cohort([50, 55], [55, 90], [1, 0], [[0, np.nan, np.nan], [0, 0, 0]])
        np.testing.assert_array_equal(at_risk(c, 1), [1])

    def test_end_of_follow_up(self):
        c = make_cohort([50, 50], [90, 75], [0, 1], [[0, 0, 0], [0, 0, 0]])
        np.testing.assert_array_equal(at_risk(c, 3), [0])

    def test_out_of_range(self):
        c = make_cohort([50], [90], [0], np.zeros((1, 3)))
        for m in (0, 4):
            with pytest.raises(CohortError):
                at_risk(c, m)

    def test_event_exactly_at_tau(self):
        # event at age 60 = tau_1 belongs to interval 0
        c = make_cohort([50], [60], [1], [[0, np.nan, np.nan]])
        assert at_risk(c, 1).size == 0
        assert c.records.delta[0, 0] == 1


class TestDesign:
    def setup_method(self):
        self.c = make_cohort([50, 55, 60], [90, 90, 62], [0, 0, 1], [[0, 1, 2], [1, 2, 3], [2, np.nan, np.nan]])

    def test_all_ones_unchanged(self):
        xi = np.ones((3, 3), int)
        d = apply_design(self.c, Design(xi))
        np.testing.assert_array_equal(d.panel.missing_mask, self.c.panel.missing_mask)

    def test_column_zero(self):
        d = apply_design(self.c, Design.baseline(self.c))
        assert d.panel.missing_mask[:, 1:].all()
        assert not d.panel.missing_mask[:, 0].any()

    def test_gap_retains_later_wave(self):
        xi = np.ones((3, 3), int)
        xi[0, 1] = 0
        d = apply_design(self.c, Design(xi))
        assert d.panel.missing_mask[0, 1, 0] and not d.panel.missing_mask[0, 2, 0]

    def test_idempotent(self):
        des = Design.baseline(self.c).with_column(1, [0])
        once = apply_design(self.c, des)
        twice = apply_design(once, des)
        np.testing.assert_array_equal(once.panel.missing_mask, twice.panel.missing_mask)

    def test_validate(self):
        des = Design.baseline(self.c, (None, 1, None)).with_column(1, [0])
        validate_design(des, self.c, [0, 1])
        with pytest.raises(CohortError):
            validate_design(Design.baseline(self.c, (None, 1, None)).with_column(1, [2]), self.c, [1])
        with pytest.raises(CohortError):
            validate_design(Design.baseline(self.c, (None, 2, None)).with_column(1, [0]), self.c, [1])

    def test_design_round_trip(self, tmp_path):
        des = Design.baseline(self.c).with_column(1, [1])
        save_design(des, self.c, tmp_path / "d.csv")
        np.testing.assert_array_equal(load_design(tmp_path / "d.csv", self.c).xi, des.xi)

    def test_truncate_hides_future(self):
        t = truncate(self.c, 1)
        assert t.followed_to == 1
        assert t.missing_cells().shape[1] == 1
        np.testing.assert_array_equal(at_risk(t, 1), [0, 1])


@st.composite
def cohorts(draw):
    n = draw(st.integers(1, 8))
    base = draw(st.lists(st.floats(45, 65), min_size=n, max_size=n))
    gap = draw(st.lists(st.floats(0.01, 40), min_size=n, max_size=n))
    ev = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    vals = np.zeros((n, 3))
    for j in range(n):
        vals[j, 1:] = np.where(np.array([10, 20]) < gap[j], 0.0, np.nan)
    return make_cohort(base, np.array(base) + np.array(gap), ev, vals)


@settings(max_examples=60, deadline=None)
@given(cohorts())
def test_record_invariants(c):
    rec = c.records
    n_records = rec.active.sum(axis=1)
    np.testing.assert_array_equal(n_records, rec.last_alive_wave + 1)
    assert np.all(n_records <= c.schedule.M + 1)
    assert np.all(rec.delta.sum(axis=1) <= 1)
    # t_hi increasing over active records, event only on the final one
    for j in range(c.N):
        hi = rec.t_hi[j][rec.active[j]]
        assert np.all(np.diff(hi) > 0)
        d = rec.delta[j][rec.active[j]]
        assert d[:-1].sum() == 0
