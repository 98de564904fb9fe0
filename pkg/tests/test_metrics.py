"""Metric implementations checked against independent oracles.

The equal-error rate is cross-checked with a scipy root-finder on the
interpolated trade-off, the distribution distance against scipy's Wasserstein
and a small linear-programming transport solve, and the attack-potential
table against exhaustive counting.
"""
import numpy as np
import pytest
import scipy.optimize
import scipy.stats
from hypothesis import given, settings, strategies as st

import refdemorph as rdm
from refdemorph import RestorationScenario, ScoreRecord
from refdemorph.metrics import (ScoreSet, bms, bscer, bscer_at_macer, build_dd,
                               det_curve, dnti, dti, eer, macer, map_matrix,
                               read_scores_csv, write_det_csv, write_map_csv,
                               write_metrics_csv, write_scores_csv)

score_lists = st.lists(
    st.floats(min_value=-1.0, max_value=1.0, allow_nan=False, width=64),
    min_size=1, max_size=30)


def eer_oracle(bona, morph):
    """Root-find the crossing of the interpolated error curves in index space."""
    bona = np.asarray(bona)
    morph = np.asarray(morph)
    cands = np.unique(np.concatenate([bona, morph]))
    cands = np.concatenate([[cands[0] - 1.0], cands, [cands[-1] + 1.0]])
    mac = np.array([(morph >= t).mean() for t in cands])
    bsc = np.array([(bona < t).mean() for t in cands])
    idx = np.arange(len(cands), dtype=float)
    g = lambda x: np.interp(x, idx, mac - bsc)
    x_star = scipy.optimize.brentq(g, 0.0, idx[-1], xtol=1e-13)
    return float(np.interp(x_star, idx, mac))


class TestBasicRates:
    def test_dti_is_mean_minus_tau(self):
        assert dti([0.2, 0.4, 0.9], 0.3) == pytest.approx(0.5 - 0.3)

    def test_dnti_needs_a_morph_scenario(self):
        assert dnti([0.2, 0.4], 0.3, "accomplice") == pytest.approx(0.0)
        assert dnti([0.2, 0.4], 0.3,
                    RestorationScenario.CRIMINAL) == pytest.approx(0.0)
        with pytest.raises(rdm.ScenarioNotApplicable):
            dnti([0.2], 0.3, "bonafide")
        with pytest.raises(rdm.ScenarioNotApplicable):
            dnti([0.2], 0.3, RestorationScenario.BONA_FIDE)

    def test_macer_counts_boundary_as_accepted(self):
        assert macer([0.3, 0.2, 0.4], 0.3) == pytest.approx(2 / 3)

    def test_bscer_counts_boundary_as_bona_fide(self):
        assert bscer([0.3, 0.2, 0.4], 0.3) == pytest.approx(1 / 3)

    def test_empty_scores_raise(self):
        with pytest.raises(rdm.EmptyScoreSet):
            macer([], 0.3)
        with pytest.raises(rdm.EmptyScoreSet):
            dti([], 0.3)


class TestDetCurve:
    @given(bona=score_lists, morph=score_lists)
    @settings(max_examples=150, deadline=None)
    def test_monotone_with_pinned_endpoints(self, bona, morph):
        curve = det_curve(bona, morph)
        assert np.all(np.diff(curve.macer) <= 0)
        assert np.all(np.diff(curve.bscer) >= 0)
        assert (curve.macer[0], curve.bscer[0]) == (1.0, 0.0)
        assert (curve.macer[-1], curve.bscer[-1]) == (0.0, 1.0)
        assert len(curve.points) == len(curve.taus)

    def test_values_match_direct_rates(self):
        bona, morph = [0.8, 0.6, 0.9], [0.1, 0.5, 0.65]
        curve = det_curve(bona, morph)
        for t, m, b in zip(curve.taus, curve.macer, curve.bscer):
            assert m == pytest.approx(macer(morph, t))
            assert b == pytest.approx(bscer(bona, t))


class TestEer:
    def test_matches_root_finder_on_random_sets(self):
        rng = np.random.default_rng(42)
        for trial in range(300):
            nb = rng.integers(1, 40)
            nm = rng.integers(1, 40)
            bona = rng.uniform(-1, 1, nb)
            morph = rng.uniform(-1, 1, nm) - rng.uniform(0, 1)
            morph = np.clip(morph, -1, 1)
            got = eer(bona, morph)
            want = eer_oracle(bona, morph)
            assert got == pytest.approx(want, abs=1e-9), f"trial {trial}"

    def test_perfect_separation_is_zero(self):
        assert eer([0.8, 0.9, 0.95], [0.1, 0.2, 0.3]) == 0.0

    def test_inverted_separation_is_one(self):
        assert eer([0.1, 0.2], [0.8, 0.9]) == 1.0

    def test_single_tied_scores(self):
        # equal singleton distributions cross exactly halfway
        assert eer([0.5], [0.5]) == pytest.approx(0.5)

    # dyadic grid keeps score + shift exact, so no ties appear or vanish
    grid = st.lists(st.integers(min_value=-64, max_value=64).map(
        lambda k: k / 64.0), min_size=1, max_size=30)

    @given(bona=grid, morph=grid,
           shift=st.integers(min_value=-32, max_value=32).map(
               lambda k: k / 64.0))
    @settings(max_examples=100, deadline=None)
    def test_shift_invariance_and_range(self, bona, morph, shift):
        base = eer(bona, morph)
        assert 0.0 <= base <= 1.0
        moved = eer([b + shift for b in bona], [m + shift for m in morph])
        assert moved == pytest.approx(base, abs=1e-12)


class TestBscerAtMacer:
    def brute(self, bona, morph, target):
        cands = np.unique(np.concatenate([bona, morph]))
        cands = np.concatenate([[cands[0] - 1.0], cands, [cands[-1] + 1.0]])
        feasible = [(t, bscer(bona, t)) for t in cands
                    if macer(morph, t) <= target]
        return min(feasible)[1]  # smallest threshold meeting the budget

    def test_hand_example(self):
        bona, morph = [0.1, 0.6], [0.2, 0.4]
        assert bscer_at_macer(bona, morph, 0.5) == pytest.approx(0.5)

    @given(bona=score_lists, morph=score_lists,
           target=st.floats(min_value=0.01, max_value=1.0))
    @settings(max_examples=150, deadline=None)
    def test_matches_brute_force(self, bona, morph, target):
        got = bscer_at_macer(bona, morph, target)
        assert got == pytest.approx(self.brute(np.asarray(bona),
                                               np.asarray(morph), target))

    def test_rejects_unreachable_target(self):
        with pytest.raises(rdm.RangeError):
            bscer_at_macer([0.5], [0.4], 0.0)
        with pytest.raises(rdm.RangeError):
            bscer_at_macer([0.5], [0.4], 1.2)


class TestBms:
    def test_matches_scipy_wasserstein(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a = rng.uniform(-1, 1, rng.integers(1, 50))
            b = rng.uniform(-1, 1, rng.integers(1, 50))
            assert bms(a, b) == pytest.approx(
                scipy.stats.wasserstein_distance(a, b), abs=1e-12)

    def test_matches_lp_transport_on_tiny_sets(self):
        # ground-truth optimal transport cost via linear programming
        rng = np.random.default_rng(6)
        for _ in range(25):
            a = rng.uniform(-1, 1, rng.integers(1, 7))
            b = rng.uniform(-1, 1, rng.integers(1, 7))
            n, m = len(a), len(b)
            cost = np.abs(a[:, None] - b[None, :]).ravel()
            a_eq = []
            for i in range(n):
                row = np.zeros((n, m)); row[i, :] = 1
                a_eq.append(row.ravel())
            for j in range(m):
                row = np.zeros((n, m)); row[:, j] = 1
                a_eq.append(row.ravel())
            b_eq = np.concatenate([np.full(n, 1 / n), np.full(m, 1 / m)])
            res = scipy.optimize.linprog(cost, A_eq=np.array(a_eq), b_eq=b_eq,
                                         bounds=(0, None), method="highs")
            assert res.success
            assert bms(a, b) == pytest.approx(res.fun, abs=1e-9)

    @given(a=score_lists, b=score_lists)
    @settings(max_examples=100, deadline=None)
    def test_symmetry_and_identity(self, a, b):
        assert bms(a, b) == pytest.approx(bms(b, a), abs=1e-12)
        assert bms(a, a) == pytest.approx(0.0, abs=1e-12)
        assert bms(a, b) >= 0.0

    @given(a=score_lists, b=score_lists, c=score_lists)
    @settings(max_examples=60, deadline=None)
    def test_triangle_inequality(self, a, b, c):
        assert bms(a, c) <= bms(a, b) + bms(b, c) + 1e-9


class TestMapMatrix:
    def exhaustive(self, mats, max_r, max_c):
        out = np.zeros((max_r, max_c))
        for r in range(1, max_r + 1):
            for c in range(1, max_c + 1):
                hits = 0
                for o in mats:
                    fooled = sum(1 for f in range(o.shape[1])
                                 if sum(o[:, f]) >= r)
                    hits += fooled >= c
                out[r - 1, c - 1] = hits / len(mats)
        return out

    def test_matches_exhaustive_counting(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            n = rng.integers(1, 12)
            shape = (rng.integers(1, 5), rng.integers(1, 5))
            mats = [rng.random(shape) < 0.5 for _ in range(n)]
            table = map_matrix(mats)
            np.testing.assert_allclose(
                table.matrix, self.exhaustive(mats, *shape))

    def test_dict_input_sorted_by_id(self):
        o = {"b": np.ones((1, 1), bool), "a": np.zeros((1, 1), bool)}
        table = map_matrix(o)
        assert table.morph_ids == ("a", "b")
        assert table.value(1, 1) == 0.5

    def test_all_pass_gives_all_ones(self):
        table = map_matrix([np.ones((3, 2), bool)] * 4)
        assert np.all(table.matrix == 1.0)

    def test_monotone_in_r_and_c(self):
        rng = np.random.default_rng(8)
        table = map_matrix([rng.random((4, 3)) < 0.6 for _ in range(20)])
        assert np.all(np.diff(table.matrix, axis=0) <= 0)
        assert np.all(np.diff(table.matrix, axis=1) <= 0)

    def test_empty_and_ragged_inputs(self):
        with pytest.raises(rdm.EmptyScoreSet):
            map_matrix([])
        with pytest.raises(rdm.RangeError):
            map_matrix([np.ones((2, 2), bool), np.ones((2, 3), bool)])


def _records():
    mk = ScoreRecord
    return [
        mk("b0", rdm.LABEL_BONA_FIDE, RestorationScenario.BONA_FIDE, "",
           "demorph", 0.8),
        mk("b1", rdm.LABEL_BONA_FIDE, RestorationScenario.BONA_FIDE, "",
           "frs_baseline", 0.95),
        mk("m0", rdm.LABEL_MORPH, RestorationScenario.ACCOMPLICE, "blend",
           "demorph", 0.2, 0.7),
        mk("m1", rdm.LABEL_MORPH, RestorationScenario.CRIMINAL, "splice",
           "demorph", 0.3, 0.6),
    ]


class TestScoreSet:
    def test_filters_compose(self):
        s = ScoreSet(_records())
        assert len(s.filtered(label=rdm.LABEL_MORPH)) == 2
        assert len(s.filtered(method="demorph",
                              scenario=RestorationScenario.ACCOMPLICE)) == 1
        assert s.morph_methods() == ["blend", "splice"]
        assert s.bona_fide_scores(method="demorph") == [0.8]
        assert s.morph_scores(method="demorph") == [0.2, 0.3]

    def test_build_dd_keeps_only_ground_truth_scores(self):
        assert build_dd(_records()) == [0.7, 0.6]
        assert build_dd([r for r in _records()
                         if r.label == rdm.LABEL_BONA_FIDE]) == []


class TestCsvFormats:
    def test_scores_roundtrip(self, tmp_path):
        p = tmp_path / "scores.csv"
        write_scores_csv(p, _records())
        assert p.read_text().splitlines()[0] == \
            "pair_id,label,scenario,morph_method,method,score,score_gt"
        back = read_scores_csv(p)
        assert list(back.records) == _records()

    def test_scores_header_is_validated(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(rdm.RangeError):
            read_scores_csv(p)

    def test_det_csv_layout(self, tmp_path):
        p = tmp_path / "det.csv"
        write_det_csv(p, det_curve([0.8], [0.2]))
        lines = p.read_text().splitlines()
        assert lines[0] == "tau,macer,bscer"
        assert len(lines) == 1 + 4  # two scores -> two uniques + two sentinels

    def test_metrics_csv_layout(self, tmp_path):
        p = tmp_path / "metrics.csv"
        write_metrics_csv(p, [("d", "accomplice", "blend", "dti", 0.25)])
        assert p.read_text() == ("dataset,scenario,method,metric,value\n"
                                 "d,accomplice,blend,dti,0.25\n")

    def test_map_csv_layout(self, tmp_path):
        p = tmp_path / "map.csv"
        write_map_csv(p, map_matrix([np.ones((2, 1), bool)]))
        assert p.read_text() == "r,c,value\n1,1,1.0\n2,1,1.0\n"
