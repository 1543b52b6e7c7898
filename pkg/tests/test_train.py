import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st

import serkit.train
from serkit.autodiff import Tensor
from serkit.errors import (ConfigError, CorruptCache, EmptySplit,
                           InsufficientClassSamples, LabelOutOfRange,
                           NonFiniteLoss, ShapeMismatch)
from serkit.features import FeatureMap, write_features
from serkit.model import ArchConfig
from serkit.train import (FEATURE_INDEX_NAME, SPLITS, TRAIN_LOG_HEADER,
                          AdamState, FeatureDataset, ManifestRow, TrainConfig,
                          _batch_bounds, adam_step, cosine_lr, init_adam_state,
                          load_dataset, make_splits, read_feature_index,
                          read_manifest, train, write_feature_index,
                          write_manifest, write_train_log)


def make_dataset(n_per_class=6, arch=None, seed=0, separable=True):
    """Random features with an optional class-dependent offset so the task
    is learnable; splits assigned round-robin as train/train/.../val/test."""
    arch = arch or ArchConfig(n_mels=8, input_frames=16, conv_channels=(2, 3, 4),
                              n_encoder_layers=1, n_heads=2, d_model=16, d_ff=32)
    rng = np.random.default_rng(seed)
    feats, labels, splits = [], [], []
    for label in range(4):
        for item in range(n_per_class):
            x = rng.normal(size=(1, arch.n_mels, arch.input_frames))
            if separable:
                x[0, label * 2:(label + 1) * 2, :] += 3.0
            feats.append(x)
            labels.append(label)
            splits.append("train" if item < n_per_class - 2
                          else ("val" if item == n_per_class - 2 else "test"))
    feats = np.asarray(feats, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    paths = tuple(f"utt_{i:03d}.wav" for i in range(len(labels)))
    return FeatureDataset(feats, labels, paths, tuple(splits)), arch


class TestAdam:
    def test_first_step_matches_the_closed_form(self):
        theta0, g, lr, wd = 2.0, 0.5, 1e-2, 1e-3
        params = {"w": Tensor(np.array([theta0]), requires_grad=True)}
        state = init_adam_state(params)
        adam_step(params, {"w": np.array([g])}, state, lr, wd)
        # after bias correction the first step is g / (|g| + eps)
        expected = theta0 * (1.0 - lr * wd) - lr * g / (abs(g) + 1e-8)
        npt.assert_allclose(params["w"].values, [expected], rtol=1e-12)
        assert state.t == 1

    def test_zero_gradient_still_decays_the_weights(self):
        params = {"w": Tensor(np.array([4.0]), requires_grad=True)}
        state = init_adam_state(params)
        adam_step(params, {"w": np.array([0.0])}, state, 1e-2, 0.1)
        npt.assert_allclose(params["w"].values, [4.0 * (1.0 - 1e-3)], rtol=1e-12)

    def test_decay_is_decoupled_from_the_moment_estimate(self):
        # decoupled decay multiplies theta before the update; the gradient
        # moments never see the decay term
        theta0, g, lr, wd = -3.0, 1.0, 1e-2, 0.5
        params = {"w": Tensor(np.array([theta0]), requires_grad=True)}
        state = init_adam_state(params)
        adam_step(params, {"w": np.array([g])}, state, lr, wd)
        npt.assert_allclose(state.m["w"], [0.1 * g], rtol=1e-12)
        npt.assert_allclose(state.v["w"], [0.001 * g * g], rtol=1e-9)
        expected = theta0 * (1.0 - lr * wd) - lr * g / (g + 1e-8)
        npt.assert_allclose(params["w"].values, [expected], rtol=1e-12)

    def test_moments_follow_the_ema_recurrences(self):
        rng = np.random.default_rng(0)
        params = {"w": Tensor(rng.normal(size=(3, 2)), requires_grad=True)}
        state = init_adam_state(params)
        m_ref = np.zeros((3, 2))
        v_ref = np.zeros((3, 2))
        for _ in range(5):
            g = rng.normal(size=(3, 2))
            adam_step(params, {"w": g}, state, 1e-3, 0.0)
            m_ref = 0.9 * m_ref + 0.1 * g
            v_ref = 0.999 * v_ref + 0.001 * g * g
        npt.assert_allclose(state.m["w"], m_ref, rtol=1e-12)
        npt.assert_allclose(state.v["w"], v_ref, rtol=1e-12)

    def test_buffers_are_not_tracked(self):
        params = {"w": Tensor(np.ones(2), requires_grad=True),
                  "buf": Tensor(np.ones(2))}
        state = init_adam_state(params)
        assert set(state.m) == {"w"}

    def test_descends_a_quadratic(self):
        params = {"w": Tensor(np.array([5.0]), requires_grad=True)}
        state = init_adam_state(params)
        for _ in range(200):
            g = 2.0 * params["w"].values
            adam_step(params, {"w": g.copy()}, state, 5e-2, 0.0)
        assert abs(params["w"].values[0]) < 0.5

    def test_gradient_shape_mismatch_is_rejected(self):
        params = {"w": Tensor(np.ones(2), requires_grad=True)}
        state = init_adam_state(params)
        with pytest.raises(ShapeMismatch):
            adam_step(params, {"w": np.ones(3)}, state, 1e-3, 0.0)

    def test_nonpositive_lr_is_rejected(self):
        params = {"w": Tensor(np.ones(2), requires_grad=True)}
        with pytest.raises(ValueError):
            adam_step(params, {"w": np.ones(2)}, init_adam_state(params), 0.0, 0.0)


class TestCosineSchedule:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 1e-4) == 1e-4
        assert abs(cosine_lr(100, 100, 1e-4)) < 1e-20
        npt.assert_allclose(cosine_lr(50, 100, 1e-4), 5e-5, rtol=1e-12)

    def test_floor_is_respected(self):
        assert cosine_lr(100, 100, 1e-4, eta_min=1e-6) == 1e-6

    def test_approach_to_the_floor_is_continuous(self):
        gap = cosine_lr(99, 100, 1e-4) - cosine_lr(100, 100, 1e-4)
        assert 0 < gap < 1e-7

    def test_out_of_range_epoch_is_rejected(self):
        with pytest.raises(ValueError):
            cosine_lr(101, 100, 1e-4)

    @given(st.integers(1, 500), st.integers(0, 500))
    def test_monotone_nonincreasing_within_bounds(self, t_max, t):
        t = min(t, t_max)
        lr = cosine_lr(t, t_max, 1e-3, eta_min=1e-5)
        assert 1e-5 - 1e-18 <= lr <= 1e-3 + 1e-18
        if t > 0:
            assert lr <= cosine_lr(t - 1, t_max, 1e-3, eta_min=1e-5) + 1e-18


class TestTrainConfig:
    @pytest.mark.parametrize("kwargs", [
        {"lr0": 0.0},
        {"weight_decay": -1e-3},
        {"batch_size": 1},
        {"max_epochs": 0},
        {"early_stop_patience": 0},
        {"eta_min": 1.0},
    ])
    def test_invalid_values_are_rejected(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestManifest:
    def test_round_trip(self, tmp_path):
        rows = [ManifestRow("a.wav", 0, "train"), ManifestRow("b.wav", 3, "test")]
        p = tmp_path / "manifest.csv"
        write_manifest(rows, p)
        out = read_manifest(p)
        assert [(r.label, r.split) for r in out] == [(0, "train"), (3, "test")]
        assert out[0].path == str(tmp_path / "a.wav")

    def test_split_column_is_optional(self, tmp_path):
        p = tmp_path / "manifest.csv"
        p.write_text("path,label\nx.wav,anger\n")
        rows = read_manifest(p)
        assert rows[0].split is None

    def test_unknown_label_is_rejected(self, tmp_path):
        p = tmp_path / "manifest.csv"
        p.write_text("path,label\nx.wav,joy\n")
        with pytest.raises(LabelOutOfRange):
            read_manifest(p)

    def test_unknown_split_is_rejected(self, tmp_path):
        p = tmp_path / "manifest.csv"
        p.write_text("path,label,split\nx.wav,anger,holdout\n")
        with pytest.raises(ConfigError):
            read_manifest(p)

    def test_bad_header_is_rejected(self, tmp_path):
        p = tmp_path / "manifest.csv"
        p.write_text("file,emotion\nx.wav,anger\n")
        with pytest.raises(ConfigError):
            read_manifest(p)

    def test_absolute_paths_pass_through(self, tmp_path):
        p = tmp_path / "manifest.csv"
        p.write_text("path,label\n/abs/x.wav,neutral\n")
        assert read_manifest(p)[0].path == "/abs/x.wav"


class TestMakeSplits:
    def rows(self, n_per_class):
        return [ManifestRow(f"{label}_{i}.wav", label)
                for label in range(4) for i in range(n_per_class)]

    def test_stratified_70_15_15(self):
        out = make_splits(self.rows(20), seed=0)
        for label in range(4):
            per = [r.split for r in out if r.label == label]
            assert per.count("train") == 14
            assert per.count("val") == 3
            assert per.count("test") == 3

    def test_every_class_reaches_every_split(self):
        out = make_splits(self.rows(3), seed=0)
        for label in range(4):
            assert {r.split for r in out if r.label == label} == set(SPLITS)

    def test_sixteen_utterances_split_8_4_4(self):
        out = make_splits(self.rows(4), seed=0)
        counts = {s: sum(r.split == s for r in out) for s in SPLITS}
        assert counts == {"train": 8, "val": 4, "test": 4}

    def test_deterministic_in_the_seed(self):
        a = make_splits(self.rows(10), seed=3)
        b = make_splits(self.rows(10), seed=3)
        c = make_splits(self.rows(10), seed=4)
        assert [r.split for r in a] == [r.split for r in b]
        assert [r.split for r in a] != [r.split for r in c]

    def test_input_rows_are_not_mutated(self):
        rows = self.rows(3)
        make_splits(rows, seed=0)
        assert all(r.split is None for r in rows)

    def test_too_few_per_class_is_rejected(self):
        with pytest.raises(InsufficientClassSamples):
            make_splits(self.rows(2), seed=0)

    def test_zero_ratio_is_rejected(self):
        with pytest.raises(InsufficientClassSamples):
            make_splits(self.rows(5), ratios=(0.8, 0.2, 0.0), seed=0)

    def test_ratios_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            make_splits(self.rows(5), ratios=(0.5, 0.2, 0.2), seed=0)

    def test_wrong_ratio_count_is_rejected(self):
        with pytest.raises(ConfigError):
            make_splits(self.rows(5), ratios=(0.5, 0.5), seed=0)


class TestFeatureIndexAndDataset:
    def test_index_round_trip(self, tmp_path):
        mapping = {"a.wav": "1111.feat", "b.wav": "2222.feat"}
        write_feature_index(mapping, tmp_path)
        assert read_feature_index(tmp_path) == mapping

    def test_missing_index_names_the_featurize_command(self, tmp_path):
        with pytest.raises(CorruptCache, match="featurize"):
            read_feature_index(tmp_path)

    def test_load_dataset_assembles_rows_in_manifest_order(self, tmp_path):
        rng = np.random.default_rng(0)
        mapping = {}
        rows = []
        for i, label in enumerate((2, 0, 1)):
            fm = FeatureMap(rng.normal(size=(8, 16)))
            name = f"f{i}.feat"
            write_features(tmp_path / name, fm)
            mapping[f"utt{i}.wav"] = name
            rows.append(ManifestRow(f"utt{i}.wav", label, "train"))
        write_feature_index(mapping, tmp_path)
        ds = load_dataset(rows, tmp_path)
        assert ds.features.shape == (3, 1, 8, 16)
        npt.assert_array_equal(ds.labels, [2, 0, 1])
        assert ds.paths == ("utt0.wav", "utt1.wav", "utt2.wav")

    def test_missing_feature_file_entry_is_actionable(self, tmp_path):
        write_feature_index({}, tmp_path)
        with pytest.raises(CorruptCache, match="featurize"):
            load_dataset([ManifestRow("utt.wav", 0, "train")], tmp_path)

    def test_inconsistent_shapes_are_rejected(self, tmp_path):
        write_features(tmp_path / "a.feat", FeatureMap(np.zeros((8, 16))))
        write_features(tmp_path / "b.feat", FeatureMap(np.zeros((8, 17))))
        write_feature_index({"a.wav": "a.feat", "b.wav": "b.feat"}, tmp_path)
        rows = [ManifestRow("a.wav", 0, "train"), ManifestRow("b.wav", 1, "train")]
        with pytest.raises(ShapeMismatch):
            load_dataset(rows, tmp_path)

    def test_empty_manifest_is_rejected(self, tmp_path):
        with pytest.raises(EmptySplit):
            load_dataset([], tmp_path)


class TestBatchBounds:
    def test_even_division(self):
        assert _batch_bounds(8, 4) == [(0, 4), (4, 8)]

    def test_trailing_singleton_is_folded(self):
        assert _batch_bounds(9, 4) == [(0, 4), (4, 9)]

    def test_larger_remainder_stays_separate(self):
        assert _batch_bounds(10, 4) == [(0, 4), (4, 8), (8, 10)]

    def test_single_undersized_dataset_keeps_one_batch(self):
        assert _batch_bounds(1, 4) == [(0, 1)]


class TestTrainLoop:
    def test_learns_a_separable_task(self):
        dataset, arch = make_dataset(n_per_class=8)
        cfg = TrainConfig(lr0=3e-3, batch_size=8, max_epochs=30,
                          early_stop_patience=30, seed=0)
        result = train(dataset, arch, cfg)
        assert result.log[-1].train_loss < result.log[0].train_loss
        assert result.best_val_acc >= 0.75

    def test_log_is_well_formed(self):
        dataset, arch = make_dataset()
        cfg = TrainConfig(batch_size=8, max_epochs=3, seed=0)
        result = train(dataset, arch, cfg)
        assert [r.epoch for r in result.log] == [1, 2, 3]
        for i, rec in enumerate(result.log):
            assert rec.lr == cosine_lr(i, cfg.max_epochs, cfg.lr0)
            assert 0.0 <= rec.train_acc <= 1.0
            assert 0.0 <= rec.val_acc <= 1.0
            assert math.isfinite(rec.train_loss) and math.isfinite(rec.val_loss)

    def test_two_runs_are_bitwise_identical(self):
        logs = []
        for _ in range(2):
            dataset, arch = make_dataset()
            cfg = TrainConfig(batch_size=8, max_epochs=3, seed=1)
            result = train(dataset, arch, cfg)
            logs.append([(r.lr, r.train_loss, r.train_acc, r.val_loss, r.val_acc)
                         for r in result.log])
        assert logs[0] == logs[1]

    def test_early_stopping_fires_after_patience_epochs(self, monkeypatch):
        scripted = iter([(1.0, 0.5), (1.0, 0.5),    # epoch 1: train, val
                         (1.0, 0.6), (1.0, 0.75),   # epoch 2 (best)
                         (1.0, 0.7), (1.0, 0.75),   # epoch 3: tie, no improve
                         (1.0, 0.8), (1.0, 0.70)])  # epoch 4: worse -> stop
        monkeypatch.setattr(serkit.train, "evaluate_split",
                            lambda *a, **k: next(scripted))
        dataset, arch = make_dataset(n_per_class=3)
        cfg = TrainConfig(batch_size=4, max_epochs=50, early_stop_patience=2,
                          seed=0)
        result = train(dataset, arch, cfg)
        assert result.early_stopped
        assert len(result.log) == 4
        assert result.best_epoch == 2
        assert result.best_val_acc == 0.75

    def test_ties_keep_the_earlier_best(self, monkeypatch):
        scripted = iter([(1.0, 0.9), (1.0, 0.9)] * 6)
        monkeypatch.setattr(serkit.train, "evaluate_split",
                            lambda *a, **k: next(scripted))
        dataset, arch = make_dataset(n_per_class=3)
        result = train(dataset, arch, TrainConfig(batch_size=4, max_epochs=3,
                                                  early_stop_patience=10, seed=0))
        assert result.best_epoch == 1
        assert not result.early_stopped

    def test_best_params_differ_from_final_after_regression(self, monkeypatch):
        scripted = iter([(1.0, 0.9), (1.0, 0.9), (1.0, 0.4), (1.0, 0.4)])
        monkeypatch.setattr(serkit.train, "evaluate_split",
                            lambda *a, **k: next(scripted))
        dataset, arch = make_dataset(n_per_class=3)
        result = train(dataset, arch, TrainConfig(batch_size=4, max_epochs=2,
                                                  early_stop_patience=10, seed=0))
        assert result.best_epoch == 1
        changed = any(
            not np.array_equal(result.params[k].values, result.final_params[k].values)
            for k in result.params)
        assert changed

    def test_empty_train_split_is_rejected(self):
        dataset, arch = make_dataset(n_per_class=3)
        only_eval = FeatureDataset(dataset.features, dataset.labels, dataset.paths,
                                   tuple("val" for _ in dataset.splits))
        with pytest.raises(EmptySplit):
            train(only_eval, arch, TrainConfig(batch_size=4))

    def test_nan_features_raise_a_numerical_error(self):
        dataset, arch = make_dataset(n_per_class=3)
        dataset.features[0] = np.nan
        with pytest.raises(NonFiniteLoss):
            train(dataset, arch, TrainConfig(batch_size=4, max_epochs=2))

    def test_augment_hook_sees_every_batch(self):
        dataset, arch = make_dataset(n_per_class=3)
        seen = []

        def spy(x, y, rng):
            seen.append(x.shape[0])
            return x, y

        train(dataset, arch, TrainConfig(batch_size=4, max_epochs=2, seed=0),
              augment=spy)
        assert sum(seen) == 2 * dataset.indices("train").size


class TestTrainLogFile:
    def test_header_and_round_trip_floats(self, tmp_path):
        dataset, arch = make_dataset(n_per_class=3)
        result = train(dataset, arch, TrainConfig(batch_size=4, max_epochs=2))
        p = tmp_path / "log.csv"
        write_train_log(result.log, p)
        lines = p.read_text().strip().split("\n")
        assert lines[0] == ",".join(TRAIN_LOG_HEADER)
        fields = lines[1].split(",")
        assert int(fields[0]) == 1
        assert float(fields[1]) == result.log[0].lr
        assert float(fields[2]) == result.log[0].train_loss
