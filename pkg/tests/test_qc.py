from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from weakseg.annotate import AnnotationPlan, Kind, SliceAnnotation, SubjectRecord, simulate_annotations
from weakseg.qc import (
    AtlasDatabase,
    QCConfig,
    consensus_fusion,
    detect_outlier,
    detection_scores,
    dice,
    filter_database,
    retrieve_similar,
    write_qc_report,
)
from weakseg.volgrid import VolumeGrid


def row(bits: str) -> np.ndarray:
    return np.array([[c == "1" for c in bits]])


def line_subject(sid, bits, image=None):
    """Subject on a (1, 1, n) grid with one region annotation on transverse slice 0."""
    n = len(bits)
    img = np.zeros((1, 1, n), np.float32) if image is None else np.asarray(image, np.float32).reshape(1, 1, n)
    organ = np.zeros((1, 1, n), bool)
    ann = SliceAnnotation(2, 0, Kind.RR, row(bits)) if "1" in bits else SliceAnnotation(2, 0, Kind.NOT_VISIBLE)
    return SubjectRecord(sid, VolumeGrid(img), {"liver": organ}, annotations={(2, 0): ann})


class TestDice:
    def test_identity(self):
        a = np.array([1, 1, 0], bool)
        assert dice(a, a) == 1.0

    def test_disjoint(self):
        assert dice(np.array([1, 0], bool), np.array([0, 1], bool)) == 0.0

    def test_half_overlap(self):
        a = np.array([1, 1, 1, 1, 0, 0], bool)
        b = np.array([0, 0, 1, 1, 1, 1], bool)
        assert dice(a, b) == 0.5

    def test_both_empty(self):
        assert dice(np.zeros(4, bool), np.zeros(4, bool)) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros(3, bool), np.zeros(4, bool))

    @settings(max_examples=80, deadline=None)
    @given(
        arrays(np.bool_, st.just((5, 6))),
        arrays(np.bool_, st.just((5, 6))),
    )
    def test_symmetric_and_bounded(self, a, b):
        assert dice(a, b) == dice(b, a)
        assert 0.0 <= dice(a, b) <= 1.0
        assert dice(a, a) == 1.0


class TestRetrieval:
    def test_hand_set_ssd(self):
        query = np.zeros((1, 1))
        # SSDs 9, 1, 4, 0, 1
        cands = np.array([3.0, 1.0, 2.0, 0.0, -1.0]).reshape(5, 1, 1)
        assert retrieve_similar(query, cands, [10, 11, 12, 13, 14], 5) == [3, 1, 4, 2, 0]

    def test_ties_broken_by_id(self):
        cands = np.ones((3, 2, 2))
        assert retrieve_similar(np.zeros((2, 2)), cands, [7, 2, 5], 3) == [1, 2, 0]

    def test_identical_first_and_truncation(self):
        rng = np.random.default_rng(0)
        cands = rng.random((6, 4, 4))
        got = retrieve_similar(cands[4].copy(), cands, list(range(6)), 2)
        assert got[0] == 4 and len(got) == 2

    def test_n_larger_than_database(self):
        assert len(retrieve_similar(np.zeros(2), np.zeros((3, 2)), [0, 1, 2], 30)) == 3


class TestConsensus:
    def test_two_of_three(self):
        m = np.array([[1, 0], [1, 0], [0, 1]], bool)
        assert consensus_fusion(m).tolist() == [True, False]

    def test_tie_is_unset(self):
        assert consensus_fusion(np.array([[1], [0]], bool)).tolist() == [False]

    def test_identical(self):
        m = np.random.default_rng(1).random((4, 5)) > 0.5
        assert np.array_equal(consensus_fusion(np.stack([m] * 3)), m)

    def test_empty(self):
        with pytest.raises(ValueError):
            consensus_fusion(np.zeros((0, 3), bool))


class TestDetectOutlier:
    def test_five_atlas_trace(self):
        # candidates 111100, 111100, 111000, 000011; first consensus 111000,
        # dice 6/7, 6/7, 1, 0 -> mu1 = 19/28; the refined set drops the last one;
        # second consensus 111100 with dice 1, 1, 6/7 -> mu2 = 20/21
        others = ["111100", "111100", "111000", "000011"]
        for query, dsc, outlier in [("111000", 6 / 7, True), ("111100", 1.0, False), ("111110", 8 / 9, True)]:
            db = AtlasDatabase([line_subject(0, query)] + [line_subject(i + 1, b) for i, b in enumerate(others)])
            dec = detect_outlier(db.subject(0).annotations[2, 0], 0, db)
            assert dec.mu == pytest.approx(20 / 21, abs=1e-12)
            assert dec.dice == pytest.approx(dsc, abs=1e-12)
            assert dec.outlier is outlier and dec.n_consensus == 3

    def test_identical_not_outlier(self):
        db = AtlasDatabase([line_subject(i, "0011100") for i in range(31)])
        dec = detect_outlier(db.subject(0).annotations[2, 0], 0, db)
        assert not dec.outlier and dec.dice == 1.0 and dec.mu == 1.0

    def test_disjoint_from_unanimous(self):
        db = AtlasDatabase([line_subject(0, "1100000")] + [line_subject(i, "0001110") for i in range(1, 8)])
        assert detect_outlier(db.subject(0).annotations[2, 0], 0, db).outlier

    def test_not_visible_uses_empty_mask(self):
        db = AtlasDatabase([line_subject(0, "0000000")] + [line_subject(i, "0011000") for i in range(1, 6)])
        dec = detect_outlier(db.subject(0).annotations[2, 0], 0, db)
        assert dec.dice == 0.0 and dec.outlier

    def test_unannotated_candidates_skipped(self):
        subs = [line_subject(i, "0110") for i in range(4)]
        blank = {(2, 0): SliceAnnotation(2, 0, Kind.UNANNOTATED)}
        subs.append(SubjectRecord(9, subs[0].volume, subs[0].organs, annotations=blank))
        db = AtlasDatabase(subs)
        dec = detect_outlier(db.subject(0).annotations[2, 0], 0, db)
        assert dec.n_consensus == 3 and not dec.outlier

    def test_unannotated_query_rejected(self):
        db = AtlasDatabase([line_subject(0, "01")])
        with pytest.raises(ValueError):
            detect_outlier(SliceAnnotation(2, 0, Kind.UNANNOTATED), 0, db)

    def test_similarity_restricts_consensus(self):
        # the two candidates most similar in image agree with the query
        imgs = [[0, 0, 0, 0], [0, 0, 0, 0.1], [0, 0, 0.1, 0], [5, 5, 5, 5], [5, 5, 5, 6], [6, 5, 5, 5]]
        bits = ["1100", "1100", "1100", "0011", "0011", "0011"]
        db = AtlasDatabase([line_subject(i, b, im) for i, (b, im) in enumerate(zip(bits, imgs))])
        assert not detect_outlier(db.subject(0).annotations[2, 0], 0, db, QCConfig(n_similar=2)).outlier
        assert detect_outlier(db.subject(0).annotations[2, 0], 0, db, QCConfig(n_similar=5)).outlier


def cohort(n=30, corrupt=None):
    rng = np.random.default_rng(5)
    subs = []
    for i in range(n):
        shape = (6, 10, 10)
        liver = np.zeros(shape, bool)
        x0 = 2 + int(rng.integers(0, 2))
        liver[1:5, 2:7, x0 : x0 + 4] = True
        kidney = np.zeros(shape, bool)
        kidney[1:5, 7:9, 0:2] = True
        vol = (0.2 + 0.4 * liver + 0.7 * kidney).astype(np.float32)
        s = SubjectRecord(i, VolumeGrid(vol), {"liver": liver, "kidney": kidney})
        subs.append(simulate_annotations(s, AnnotationPlan(1.0, 0.0, "rr")))
    if corrupt is not None:
        s = subs[corrupt]
        anns = dict(s.annotations)
        wrong = np.zeros((10, 10), bool)
        wrong[7:9, 0:2] = True
        anns[2, 2] = SliceAnnotation(2, 2, Kind.RR, wrong, wrong, corrupted=True)
        subs[corrupt] = s.with_annotations(anns)
    return AtlasDatabase(subs)


class TestFilterDatabase:
    def test_identical_subjects_no_rejections(self):
        s = cohort(1).subjects[0]
        db = AtlasDatabase([SubjectRecord(i, s.volume, s.organs, annotations=s.annotations) for i in range(6)])
        _, records = filter_database(db)
        assert records and not any(r.rejected for r in records)

    def test_gross_corruption_rejected(self):
        out, records = filter_database(cohort(30, corrupt=4))
        bad = [r for r in records if r.corrupted]
        assert len(bad) == 1 and bad[0].rejected
        assert out.subject(4).annotations[2, 2].kind is Kind.UNANNOTATED
        assert out.subject(4).annotations[2, 2].corrupted

    def test_order_independent(self):
        db = cohort(12, corrupt=3)
        _, a = filter_database(db)
        _, b = filter_database(AtlasDatabase(db.subjects[::-1]))
        assert a == b

    def test_repeat_is_identical(self):
        db = cohort(10, corrupt=1)
        out1, a = filter_database(db)
        out2, b = filter_database(db)
        assert a == b
        for s1, s2 in zip(out1, out2):
            assert {k: v.kind for k, v in s1.annotations.items()} == {k: v.kind for k, v in s2.annotations.items()}

    def test_unannotated_never_scored(self):
        out, records = filter_database(cohort(10, corrupt=1))
        _, again = filter_database(out)
        keys = {(r.subject, r.direction, r.index) for r in records if r.rejected}
        assert not keys & {(r.subject, r.direction, r.index) for r in again}


class TestReport:
    def test_scores(self):
        db = cohort(30, corrupt=4)
        _, records = filter_database(db)
        p, r = detection_scores(records)
        assert r == 1.0 and 0 < p <= 1

    def test_scores_without_rejections(self):
        assert detection_scores([]) == (1.0, 1.0)

    def test_csv(self, tmp_path):
        _, records = filter_database(cohort(5, corrupt=0))
        path = write_qc_report(tmp_path / "qc.csv", records)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["subject", "direction", "index", "kind", "corrupted", "dice", "mu", "decision"]
        assert len(rows) == len(records) + 1
        assert {r[7] for r in rows[1:]} <= {"keep", "reject"}
        flagged = [r for r in rows[1:] if r[4] == "1"]
        assert flagged == [["0", "2", "2", "RR", "1", flagged[0][5], flagged[0][6], "reject"]]
