import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import refdemorph as rdm
from refdemorph import ImageTensor, calibrate_threshold, classify
from refdemorph.dmad import score_pair, similarity_score
from conftest import rand_image


def brute_force_tau(mated, nonmated, target_fmr):
    """Reference calibration: scan every candidate from below, keep the first
    (lowest) one whose false-match rate meets the target."""
    candidates = sorted(set(mated) | set(nonmated))
    candidates.append(candidates[-1] + 1.0)
    nm = np.asarray(nonmated)
    for cand in candidates:
        if (nm >= cand).mean() <= target_fmr:
            return cand
    raise AssertionError("sentinel candidate must always satisfy the target")


finite = st.floats(min_value=-1.0, max_value=1.0, allow_nan=False,
                   width=64)


@given(mated=st.lists(finite, min_size=1, max_size=40),
       nonmated=st.lists(finite, min_size=1, max_size=40),
       target=st.floats(min_value=0.0, max_value=1.0))
@settings(max_examples=200, deadline=None)
def test_calibration_matches_brute_force(mated, nonmated, target):
    thr = calibrate_threshold(mated, nonmated, target)
    assert thr.tau == brute_force_tau(mated, nonmated, target)
    # the achieved FMR never exceeds the target...
    fmr = np.mean([s >= thr.tau for s in nonmated])
    assert fmr <= target + 1e-12
    # ...and no strictly lower candidate would have satisfied it
    lower = [c for c in sorted(set(mated) | set(nonmated)) if c < thr.tau]
    for cand in lower:
        assert np.mean([s >= cand for s in nonmated]) > target


def test_calibration_reports_counts_and_tmr():
    thr = calibrate_threshold([0.9, 0.8, 0.2], [0.1, 0.3, 0.5, 0.7], 0.25)
    assert thr.mated_n == 3 and thr.nonmated_n == 4
    tmr = np.mean([s >= thr.tau for s in [0.9, 0.8, 0.2]])
    assert thr.achieved_tmr == pytest.approx(tmr)


def test_calibration_rejects_empty_and_bad_target():
    with pytest.raises(rdm.EmptyScoreSet):
        calibrate_threshold([], [0.1], 0.1)
    with pytest.raises(rdm.EmptyScoreSet):
        calibrate_threshold([0.1], [], 0.1)
    with pytest.raises(rdm.RangeError):
        calibrate_threshold([0.1], [0.2], 1.5)


def test_classify_boundary_is_bona_fide():
    assert classify(0.5, 0.5) == rdm.LABEL_BONA_FIDE
    assert classify(0.5 - 1e-12, 0.5) == rdm.LABEL_MORPH
    assert classify(0.9, 0.5) == rdm.LABEL_BONA_FIDE


def test_threshold_sidecar_roundtrip(tmp_path):
    thr = calibrate_threshold([0.9, 0.8], [0.1, 0.2, 0.3], 0.5)
    p = tmp_path / "threshold.csv"
    thr.save(p)
    assert p.read_text().splitlines()[0] == \
        "tau,target_fmr,mated_n,nonmated_n,achieved_tmr"
    assert rdm.Threshold.load(p) == thr


def test_threshold_load_rejects_multi_row(tmp_path):
    p = tmp_path / "threshold.csv"
    p.write_text("tau,target_fmr,mated_n,nonmated_n,achieved_tmr\n"
                 "0.5,0.1,2,3,1.0\n0.6,0.1,2,3,1.0\n")
    with pytest.raises(rdm.RangeError):
        rdm.Threshold.load(p)


def test_similarity_score_is_frs_cosine(backends):
    rng = np.random.default_rng(3)
    a, b = rand_image(rng), rand_image(rng)
    s = similarity_score(ImageTensor(a), ImageTensor(b), backends.frs)
    ea = backends.frs.embed(a)
    eb = backends.frs.embed(b)
    assert s == pytest.approx(float((ea * eb).sum()), abs=1e-12)
    assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9


def test_score_pair_runs_the_supplied_demorpher(backends):
    rng = np.random.default_rng(4)
    doc, ref = rand_image(rng), rand_image(rng)
    pair = rdm.DocumentPair(pair_id="p", document=ImageTensor(doc),
                            reference=ImageTensor(ref),
                            scenario=rdm.RestorationScenario.BONA_FIDE)
    # identity "demorpher": output is the document itself
    s = score_pair(pair, lambda p: p.document, backends.frs)
    assert s == pytest.approx(similarity_score(doc, ref, backends.frs))
