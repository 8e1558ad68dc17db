import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from casecohort.dataset import (
    CohortDataset,
    DataError,
    IntervalObservation,
    SamplingDesign,
    estimate_design,
    inclusion_probability,
    load_dataset,
    reduce_exam_history,
    sampling_weight,
    sampling_weights,
    write_dataset,
)

from conftest import make_cohort


class TestReduceExamHistory:
    @pytest.mark.parametrize(
        "flags, expected",
        [((0, 1, 0, 0), (1.0, 2.0)), ((0, 0, 0, 1), (3.0, math.inf)), ((1, 0, 0, 0), (0.0, 1.0))],
    )
    def test_examples(self, flags, expected):
        assert reduce_exam_history([1, 2, 3], flags) == expected

    @pytest.mark.parametrize("flags", [(0, 0, 0, 0), (0, 1, 1, 0), (0, 2, 0, 0)])
    def test_malformed_flags(self, flags):
        with pytest.raises(DataError, match="exactly one"):
            reduce_exam_history([1, 2, 3], flags)

    @pytest.mark.parametrize("times", [(1, 1, 3), (2, 1, 3), (0, 1, 2), (-1, 1, 2)])
    def test_invalid_times(self, times):
        with pytest.raises(DataError, match="increasing"):
            reduce_exam_history(times, (1, 0, 0, 0))

    def test_no_exams_rejected(self):
        with pytest.raises(DataError):
            reduce_exam_history([], [1])

    def test_flag_count_mismatch(self):
        with pytest.raises(DataError):
            reduce_exam_history([1, 2], [0, 1])

    @given(
        st.lists(st.floats(0.01, 100, allow_nan=False), min_size=1, max_size=15, unique=True),
        st.data(),
    )
    def test_brackets_flagged_gap(self, times, data):
        times = sorted(times)
        k = data.draw(st.integers(0, len(times)))
        flags = np.zeros(len(times) + 1, dtype=int)
        flags[k] = 1
        left, right = reduce_exam_history(times, flags)
        bounds = [0.0] + times + [math.inf]
        assert (left, right) == (bounds[k], bounds[k + 1])
        # re-expanding the interval against the same schedule flags the same gap
        t = right if math.isfinite(right) else times[-1] + 1
        again = [int(lo < t <= hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
        assert again == list(flags)


class TestWeights:
    @pytest.mark.parametrize(
        "delta, xi, qs, qc, expected",
        [(0, 1, 0.2, 0.5, 5.0), (1, 1, 0.2, 0.5, 1 / 0.6), (1, 0, 0.2, 0.5, 0.0), (0, 0, 0.3, 1.0, 0.0)],
    )
    def test_examples(self, delta, xi, qs, qc, expected):
        assert sampling_weight(delta, xi, SamplingDesign(qs, qc)) == pytest.approx(expected, rel=1e-12)

    @given(st.floats(1e-3, 1.0), st.floats(1e-3, 1.0), st.integers(0, 1), st.integers(0, 1))
    def test_weight_times_probability_is_xi(self, qs, qc, delta, xi):
        d = SamplingDesign(qs, qc)
        assert sampling_weight(delta, xi, d) * float(inclusion_probability(delta, d)) == pytest.approx(xi, rel=1e-15)

    @given(st.floats(1e-3, 1.0))
    def test_full_cohort_weights_are_one(self, qc):
        d = SamplingDesign(1.0, qc)
        w = sampling_weights([0, 1, 0, 1], [1, 1, 1, 1], d)
        assert np.all(w == 1.0)

    @pytest.mark.parametrize("qs, qc", [(0.2, 1.0), (0.1, 0.5), (0.7, 0.3)])
    def test_expected_weight_is_one(self, qs, qc):
        d = SamplingDesign(qs, qc)
        for delta in (0, 1):
            pi = float(inclusion_probability(delta, d))
            expected = sum(p * sampling_weight(delta, xi, d) for xi, p in ((1, pi), (0, 1 - pi)))
            assert expected == pytest.approx(1.0, abs=1e-14)

    @pytest.mark.parametrize("qs, qc", [(0.0, 1.0), (0.2, 0.0), (1.2, 1.0), (0.5, -0.1)])
    def test_invalid_design(self, qs, qc):
        with pytest.raises(DataError):
            SamplingDesign(qs, qc)

    def test_vectorised_matches_scalar(self):
        d = SamplingDesign(0.25, 0.4)
        combos = list(product((0, 1), (0, 1)))
        vec = sampling_weights([c[0] for c in combos], [c[1] for c in combos], d)
        assert vec.tolist() == [sampling_weight(a, b, d) for a, b in combos]


class TestObservation:
    def test_delta_derived(self):
        assert IntervalObservation("a", 1.0, math.inf).delta == 0
        assert IntervalObservation("a", 0.0, 1.0).delta == 1

    @pytest.mark.parametrize(
        "kw",
        [
            dict(left=2.0, right=1.0),
            dict(left=-1.0, right=1.0),
            dict(left=0.0, right=1.0, sampled=1),  # sampled but no x
            dict(left=0.0, right=1.0, x=(1.0,)),  # x but not sampled
            dict(left=0.0, right=math.inf, selected_case=1, sampled=1, x=(1.0,)),  # non-case selected as case
            dict(left=0.0, right=1.0, subcohort=1, selected_case=1, sampled=1, x=(1.0,)),
            dict(left=0.0, right=1.0, subcohort=1, sampled=0),  # xi != max(eta, zeta)
        ],
    )
    def test_invariants(self, kw):
        with pytest.raises(DataError):
            IntervalObservation("s1", **kw).validate()

    def test_from_subjects_reads_x_of_sampled_only(self):
        subs = [
            IntervalObservation("1", 0.5, 1.0, z=(0.1,), x=(2.0,), subcohort=1, sampled=1),
            IntervalObservation("2", 1.0, math.inf, z=(0.2,)),
        ]
        ds = CohortDataset.from_subjects(subs, SamplingDesign(0.5))
        assert ds.x[0, 0] == 2.0 and np.isnan(ds.x[1, 0])
        assert ds.delta.tolist() == [1, 0]
        assert ds.xi.tolist() == [1, 0]

    def test_full_design_requires_full_subcohort(self):
        with pytest.raises(DataError, match="q_s = 1"):
            CohortDataset.from_arrays([0, 1], [1, np.inf], SamplingDesign(1.0), x=[[1], [2]], eta=[1, 0])

    def test_from_arrays_masks_unsampled_x(self):
        ds = CohortDataset.from_arrays([0, 1], [1, np.inf], SamplingDesign(0.5), x=[[1.0], [2.0]], eta=[1, 0])
        assert np.isnan(ds.x[1, 0])

    def test_subjects_round_trip(self):
        ds = make_cohort(n=30)
        again = CohortDataset.from_subjects(ds.subjects, ds.design)
        for name in ("left", "right", "xstar", "eta", "zeta"):
            np.testing.assert_array_equal(getattr(again, name), getattr(ds, name))
        np.testing.assert_array_equal(np.isnan(again.x), np.isnan(ds.x))


HEADER = "id,left,right,xi,eta,zeta,z:age,xstar:proxy,x:marker\n"


def _write(tmp_path, body, header=HEADER):
    p = tmp_path / "d.csv"
    p.write_text(header + body)
    return p


class TestLoadDataset:
    def test_three_rows(self, tmp_path):
        p = _write(tmp_path, "a,1,inf,1,1,0,50,0.3,0.2\nb,2,inf,0,0,0,61,1.1,\nc,1,2,1,0,1,40,-0.2,0.1\n")
        ds = load_dataset(p, SamplingDesign(0.2))
        assert ds.n == 3
        assert ds.ids == ("a", "b", "c")
        assert ds.z_names == ("age",) and ds.xstar_names == ("proxy",) and ds.x_names == ("marker",)
        assert ds.delta.tolist() == [0, 0, 1]
        assert np.isnan(ds.x[1, 0])
        np.testing.assert_allclose(ds.ipw_weights(), [1 / 0.2, 0.0, 1.0])

    def test_round_trip(self, tmp_path):
        ds = make_cohort(n=40, seed=2)
        write_dataset(ds, tmp_path / "out.csv")
        back = load_dataset(tmp_path / "out.csv", ds.design)
        np.testing.assert_array_equal(back.left, ds.left)
        np.testing.assert_array_equal(back.right, ds.right)
        np.testing.assert_array_equal(back.x[ds.xi == 1], ds.x[ds.xi == 1])
        np.testing.assert_array_equal(back.xi, ds.xi)

    @pytest.mark.parametrize(
        "body, pattern",
        [
            ("a,0,1,1,1,0,1,1,1\nb,2,1,1,1,0,1,1,1\n", "row 2"),
            ("a,0,1,1,1,0,1,1,\n", "row 1: xi=1 but x is empty"),
            ("a,0,1,0,0,0,1,1,0.5\n", "row 1: x present"),
            ("a,0,1,1,1,0,1,1,1\nb,0,oops,1,1,0,1,1,1\n", "row 2.*right"),
            ("a,0,1,1,1,0,1,1\n", "row 1: expected"),
            ("a,0,1,2,1,0,1,1,1\n", "row 1: xi"),
        ],
    )
    def test_errors_name_row(self, tmp_path, body, pattern):
        with pytest.raises(DataError, match=pattern):
            load_dataset(_write(tmp_path, body), SamplingDesign(0.2))

    def test_missing_columns(self, tmp_path):
        with pytest.raises(DataError, match="missing required"):
            load_dataset(_write(tmp_path, "a,0,1\n", header="id,left,right\n"), SamplingDesign(0.2))

    def test_unknown_column(self, tmp_path):
        with pytest.raises(DataError, match="unrecognised"):
            load_dataset(_write(tmp_path, "a,0,1,1,1,0,1\n", header="id,left,right,xi,eta,zeta,w:1\n"),
                         SamplingDesign(0.2))

    def test_estimate_design(self):
        ds = make_cohort(n=2000, seed=4, q_c=0.5)
        est = estimate_design(ds)
        assert abs(est.q_s - 0.2) < 3 * math.sqrt(0.16 / 2000)
        assert 0.3 < est.q_c < 0.7

    def test_take_duplicates_rows(self):
        ds = make_cohort(n=20)
        sub = ds.take([0, 0, 5])
        assert sub.n == 3 and sub.left[0] == sub.left[1] == ds.left[0]
