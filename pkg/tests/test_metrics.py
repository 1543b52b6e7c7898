import json

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import confusion_matrix as sk_confusion
from sklearn.metrics import precision_recall_fscore_support

from serkit.errors import (EmptyMatrix, EmptySplit, LabelOutOfRange,
                           LengthMismatch)
from serkit.metrics import (PredictionRow, confusion, evaluate,
                            predict_batches, read_report_json, report,
                            report_to_dict, write_confusion_csv,
                            write_predictions_csv, write_report_json)
from serkit.model import LABELS, init_params
from serkit.train import FeatureDataset


def sequences_from_cm(cm):
    """Expand a confusion matrix back into aligned label sequences."""
    true_labels, pred_labels = [], []
    for i, row in enumerate(cm):
        for j, count in enumerate(row):
            true_labels.extend([i] * count)
            pred_labels.extend([j] * count)
    return np.asarray(true_labels), np.asarray(pred_labels)


class TestConfusion:
    def test_rows_are_true_classes(self):
        cm = confusion([0, 0, 1], [1, 0, 1], n_classes=2)
        npt.assert_array_equal(cm, [[1, 1], [0, 1]])

    def test_class_count_is_inferred_from_the_data(self):
        cm = confusion([0, 3], [1, 3])
        assert cm.shape == (4, 4)

    def test_explicit_count_keeps_absent_classes(self):
        cm = confusion([0, 0], [0, 0], n_classes=3)
        assert cm.shape == (3, 3)
        assert cm.sum() == 2

    def test_matches_sklearn_on_random_data(self):
        rng = np.random.default_rng(0)
        t = rng.integers(0, 4, size=200)
        p = rng.integers(0, 4, size=200)
        npt.assert_array_equal(confusion(t, p, n_classes=4),
                               sk_confusion(t, p, labels=range(4)))

    def test_length_mismatch_is_rejected(self):
        with pytest.raises(LengthMismatch):
            confusion([0, 1], [0], n_classes=2)

    def test_empty_sequences_are_rejected(self):
        with pytest.raises(LengthMismatch):
            confusion([], [], n_classes=2)

    def test_out_of_range_labels_are_rejected(self):
        with pytest.raises(LabelOutOfRange):
            confusion([0, 4], [0, 1], n_classes=4)
        with pytest.raises(LabelOutOfRange):
            confusion([0, -1], [0, 1], n_classes=4)


class TestReport:
    def test_two_class_hand_example(self):
        # class 0: tp=2, fp=1, fn=0; class 1: tp=1, fp=0, fn=1
        rep = report(np.array([[2, 0], [1, 1]]))
        p0, r0 = 2 / 3, 1.0
        assert rep.per_class[0].precision == p0
        assert rep.per_class[0].recall == r0
        assert rep.per_class[0].f1 == 2 * p0 * r0 / (p0 + r0)
        npt.assert_allclose(rep.per_class[0].f1, 0.8, rtol=1e-15)
        p1, r1 = 1.0, 0.5
        assert rep.per_class[1].precision == p1
        assert rep.per_class[1].recall == r1
        assert rep.per_class[1].f1 == 2 * p1 * r1 / (p1 + r1)
        assert rep.macro_f1 == np.mean([rep.per_class[0].f1, rep.per_class[1].f1])
        npt.assert_allclose(rep.macro_f1, 0.7333333333, rtol=1e-9)
        assert rep.accuracy == 0.75
        assert rep.n_samples == 4

    def test_diagonal_matrix_scores_ones_everywhere(self):
        rep = report(np.diag([3, 1, 2, 5]))
        assert rep.accuracy == 1.0
        for m in rep.per_class:
            assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)
        assert rep.macro_f1 == 1.0

    def test_zero_denominators_report_zero(self):
        # class 1 is never predicted, class 2 never occurs
        cm = np.array([[2, 0, 0], [1, 0, 0], [0, 0, 0]])
        rep = report(cm)
        assert rep.per_class[1].precision == 0.0
        assert rep.per_class[1].recall == 0.0
        assert rep.per_class[1].f1 == 0.0
        assert rep.per_class[2].recall == 0.0
        assert rep.per_class[2].f1 == 0.0

    def test_default_labels_are_the_emotion_names(self):
        rep = report(np.eye(4, dtype=np.int64))
        assert rep.labels == LABELS
        rep3 = report(np.eye(3, dtype=np.int64))
        assert rep3.labels == ("class_0", "class_1", "class_2")

    def test_matches_sklearn_on_random_sequences(self):
        rng = np.random.default_rng(1)
        t = rng.integers(0, 4, size=300)
        p = rng.integers(0, 4, size=300)
        rep = report(confusion(t, p, n_classes=4))
        sk_p, sk_r, sk_f, _ = precision_recall_fscore_support(
            t, p, labels=range(4), zero_division=0)
        for c in range(4):
            npt.assert_allclose(rep.per_class[c].precision, sk_p[c], atol=1e-12)
            npt.assert_allclose(rep.per_class[c].recall, sk_r[c], atol=1e-12)
            npt.assert_allclose(rep.per_class[c].f1, sk_f[c], atol=1e-12)
        sk_mp, sk_mr, sk_mf, _ = precision_recall_fscore_support(
            t, p, labels=range(4), zero_division=0, average="macro")
        npt.assert_allclose(rep.macro_precision, sk_mp, atol=1e-12)
        npt.assert_allclose(rep.macro_recall, sk_mr, atol=1e-12)
        npt.assert_allclose(rep.macro_f1, sk_mf, atol=1e-12)
        assert rep.accuracy == np.mean(t == p)

    @pytest.mark.parametrize("cm", [
        np.zeros((4, 4), dtype=np.int64),
        np.zeros((3, 4), dtype=np.int64),
        np.array([[1, 2], [-1, 3]]),
        np.zeros((0, 0), dtype=np.int64),
    ])
    def test_degenerate_matrices_are_rejected(self, cm):
        with pytest.raises(EmptyMatrix):
            report(cm)

    @given(st.integers(2, 6).flatmap(
        lambda n: st.lists(st.lists(st.integers(0, 20), min_size=n, max_size=n),
                           min_size=n, max_size=n)))
    def test_random_matrices_agree_with_sklearn(self, rows):
        cm = np.asarray(rows, dtype=np.int64)
        if cm.sum() == 0:
            cm[0, 0] = 1
        rep = report(cm)
        assert 0.0 <= rep.accuracy <= 1.0
        assert rep.macro_f1 == np.mean([m.f1 for m in rep.per_class])
        t, p = sequences_from_cm(cm)
        sk_p, sk_r, sk_f, _ = precision_recall_fscore_support(
            t, p, labels=range(cm.shape[0]), zero_division=0)
        for c, m in enumerate(rep.per_class):
            npt.assert_allclose([m.precision, m.recall, m.f1],
                                [sk_p[c], sk_r[c], sk_f[c]], atol=1e-12)


class TestModelEvaluation:
    def make_dataset(self, tiny_arch, n=10):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(n, 1, tiny_arch.n_mels,
                                 tiny_arch.input_frames)).astype(np.float32)
        labels = rng.integers(0, 4, size=n)
        paths = tuple(f"u{i}.wav" for i in range(n))
        splits = tuple("test" if i % 2 else "train" for i in range(n))
        return FeatureDataset(feats, labels, paths, splits)

    def test_probabilities_are_normalized(self, tiny_arch):
        dataset = self.make_dataset(tiny_arch)
        params = init_params(tiny_arch, 0)
        probs = predict_batches(params, tiny_arch, dataset.features, batch_size=4)
        assert probs.shape == (10, 4)
        npt.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_evaluate_covers_one_split(self, tiny_arch):
        dataset = self.make_dataset(tiny_arch)
        params = init_params(tiny_arch, 0)
        rep, rows = evaluate(params, dataset, "test", tiny_arch, batch_size=4)
        assert rep.n_samples == 5
        assert len(rows) == 5
        for row in rows:
            assert row.path.startswith("u")
            assert row.pred_label == int(np.argmax(row.probs))

    def test_evaluate_none_covers_everything(self, tiny_arch):
        dataset = self.make_dataset(tiny_arch)
        params = init_params(tiny_arch, 0)
        rep, rows = evaluate(params, dataset, None, tiny_arch, batch_size=4)
        assert rep.n_samples == 10

    def test_missing_split_is_rejected(self, tiny_arch):
        dataset = self.make_dataset(tiny_arch)
        params = init_params(tiny_arch, 0)
        with pytest.raises(EmptySplit):
            evaluate(params, dataset, "val", tiny_arch)


class TestSerialization:
    def test_report_dict_schema(self):
        rep = report(np.array([[2, 0], [1, 1]]))
        d = report_to_dict(rep)
        assert set(d) == {"accuracy", "n_samples", "per_class", "macro",
                          "confusion", "raw"}
        assert d["accuracy"] == 0.75
        assert d["per_class"]["class_0"] == {"precision": 0.6667, "recall": 1.0,
                                             "f1": 0.8}
        assert d["macro"]["f1"] == 0.7333
        assert d["confusion"] == [[2, 0], [1, 1]]
        assert d["raw"]["per_class"]["class_0"]["precision"] == 2 / 3
        assert d["raw"]["macro"]["f1"] == rep.macro_f1

    def test_json_round_trip(self, tmp_path):
        rep = report(np.array([[2, 0], [1, 1]]))
        p = tmp_path / "report.json"
        write_report_json(rep, p)
        assert read_report_json(p) == report_to_dict(rep)
        # the file is plain JSON with a trailing newline
        text = p.read_text()
        assert text.endswith("\n")
        json.loads(text)

    def test_confusion_csv_layout(self, tmp_path):
        p = tmp_path / "cm.csv"
        write_confusion_csv(np.array([[2, 0], [1, 1]]), p, labels=("a", "b"))
        lines = p.read_text().strip().split("\n")
        assert lines[0] == "true\\pred,a,b"
        assert lines[1] == "a,2,0"
        assert lines[2] == "b,1,1"

    def test_confusion_csv_default_labels(self, tmp_path):
        p = tmp_path / "cm.csv"
        write_confusion_csv(np.eye(4, dtype=np.int64), p)
        header = p.read_text().split("\n")[0]
        assert header == "true\\pred," + ",".join(LABELS)

    def test_predictions_csv_layout(self, tmp_path):
        rows = [PredictionRow("x.wav", 0, 2, np.array([0.1, 0.2, 0.6, 0.1]))]
        p = tmp_path / "pred.csv"
        write_predictions_csv(rows, p)
        lines = p.read_text().strip().split("\n")
        assert lines[0] == "path,true,pred," + ",".join(f"p_{n}" for n in LABELS)
        fields = lines[1].split(",")
        assert fields[:3] == ["x.wav", LABELS[0], LABELS[2]]
        npt.assert_array_equal([float(v) for v in fields[3:]],
                               [0.1, 0.2, 0.6, 0.1])
