import json

import numpy as np
import pytest

import mcf
from mcf.cascade import (CascadeModel, DecisionTree, Stage, StagePlan,
                         apply_tree, boost_stage, calibrate_soft_cascade,
                         load_model, model_to_dict, plan_stages, save_model,
                         score, train_tree)
from mcf.channels import ChannelStack
from mcf.convnet import MultiLayerChannels
from mcf.errors import ConfigError, ModelFormatError, SequencingError
from mcf.features import FeatureSpec, StageData, enumerate_pool_conv


def make_data(stacks, pool=None):
    pool = pool or enumerate_pool_conv(stacks.shape[1:], 2)
    return StageData(pool, stacks.astype(np.float32))


def uniform_weights(n):
    return np.full(n, 1.0 / n)


class TestPlanStages:
    def test_published_allocations(self):
        assert plan_stages(4096, 6).k == [2048, 409, 409, 409, 409, 409]
        assert plan_stages(4096, 5).k == [2048, 512, 512, 512, 512]
        assert plan_stages(4096, 2).k == [2048, 2048]

    def test_remainder_dropped(self):
        plan = plan_stages(4096, 6)
        assert sum(plan.k) == 4093  # 3 trees dropped by flooring

    def test_invariants_over_valid_grid(self):
        for n_all in (8, 100, 256, 1000, 4096):
            for n_stages in (2, 3, 4, 5, 6):
                if n_all < 2 * (n_stages - 1):
                    continue
                plan = plan_stages(n_all, n_stages)
                assert plan.k[0] == n_all // 2
                assert all(v == n_all // (2 * (n_stages - 1))
                           for v in plan.k[1:])
                assert min(plan.k) >= 1

    def test_budget_too_small(self):
        with pytest.raises(ConfigError):
            plan_stages(4, 6)
        with pytest.raises(ConfigError):
            plan_stages(100, 1)

    def test_invalid_plan_rejected(self):
        with pytest.raises(ConfigError):
            StagePlan(100, 2, [10, 50])


class TestTrainTree:
    def test_two_separable_samples(self):
        stacks = np.zeros((2, 1, 1, 2), dtype=np.float32)
        stacks[0, 0, 0, 0] = 0.1
        stacks[1, 0, 0, 0] = 0.9
        data = make_data(stacks)
        labels = np.array([-1, 1], dtype=np.int8)
        tree, err = train_tree(data, np.arange(2), labels, uniform_weights(2), 1)
        assert err == 0.0
        assert tree.features[0] is not None
        pred = apply_tree(tree, data, np.arange(2))
        assert np.array_equal(np.sign(pred), labels)

    def test_xor_depth2_zero_error(self):
        # 4 samples over 2 features arranged as XOR; a depth-2 tree must fit
        # them exactly (verified below by exhaustive split enumeration)
        stacks = np.array([[0, 0], [0, 1], [1, 0], [1, 1]],
                          dtype=np.float32).reshape(4, 2, 1, 1)
        labels = np.array([-1, 1, 1, -1], dtype=np.int8)
        data = make_data(stacks)
        tree, err = train_tree(data, np.arange(4), labels, uniform_weights(4), 2)
        assert err == 0.0

        # exhaustive oracle over the 2-feature grid: a zero-error depth-2
        # tree exists (root on f, each child on the other feature, leaves
        # free); enumerate all root/child feature choices
        vals = stacks.reshape(4, 2)
        best = 1.0
        for f0 in range(2):
            left = vals[:, f0] < 0.5
            for f1 in range(2):
                errs = 0
                for side in (left, ~left):
                    lo = labels[side][vals[side, f1] < 0.5]
                    hi = labels[side][vals[side, f1] >= 0.5]
                    errs += min((lo != s).sum() + (hi != -s).sum()
                                for s in (-1, 1))
                best = min(best, errs / 4.0)
        assert best == 0.0

    def test_constant_features_single_leaf(self):
        stacks = np.full((6, 2, 1, 1), 0.5, dtype=np.float32)
        labels = np.array([1, 1, 1, 1, -1, -1], dtype=np.int8)
        data = make_data(stacks)
        tree, err = train_tree(data, np.arange(6), labels, uniform_weights(6), 2)
        assert all(f is None for f in tree.features)
        assert np.all(tree.leaves == 1.0)  # weighted majority
        assert err == pytest.approx(2 / 6)

    def test_tie_breaks_lowest_feature(self):
        # two identical feature columns: the split must use the first
        stacks = np.zeros((4, 2, 1, 1), dtype=np.float32)
        stacks[:, 0, 0, 0] = [0.1, 0.2, 0.8, 0.9]
        stacks[:, 1, 0, 0] = [0.1, 0.2, 0.8, 0.9]
        labels = np.array([-1, -1, 1, 1], dtype=np.int8)
        data = make_data(stacks)
        tree, err = train_tree(data, np.arange(4), labels, uniform_weights(4), 1)
        assert err == 0.0
        spec = tree.features[0]
        assert (spec.channel, spec.rect_a) == (0, (0, 0, 1, 1))


class TestBoostStage:
    def _planted(self, rng, n=200, flip=0.05):
        stacks = rng.random((n, 3, 2, 2)).astype(np.float32)
        labels = np.where(rng.random(n) < 0.5, 1, -1).astype(np.int8)
        noise = rng.random(n) < flip
        effective = np.where(noise, -labels, labels)
        stacks[:, 0, 0, 0] = np.where(effective > 0, 0.75, 0.25) \
            + rng.normal(0, 0.1, n)
        stacks[:, 1, 1, 1] = np.where(effective > 0, 0.3, 0.7) \
            + rng.normal(0, 0.15, n)
        return stacks, labels

    def test_weak_learner_utility_and_loss(self, rng):
        stacks, labels = self._planted(rng)
        data = make_data(stacks)
        trees, reject, carried, eps, losses = boost_stage(
            data, labels, 24, 2, np.zeros(len(labels)))
        assert len(trees) == 24
        assert all(e < 0.5 for e in eps)
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))

    def test_min_positive_keeps_every_training_positive(self, rng):
        stacks, labels = self._planted(rng)
        data = make_data(stacks)
        trees, reject, carried, _, _ = boost_stage(
            data, labels, 16, 2, np.zeros(len(labels)),
            calibration="min-positive")
        idx = np.arange(len(labels), dtype=np.int64)
        cum = np.zeros(len(labels))
        for t, tree in enumerate(trees):
            cum += apply_tree(tree, data, idx)
            pos_cum = cum[labels > 0]
            assert (pos_cum >= reject[t]).all()

    def test_carried_scores_shift_weights(self, rng):
        stacks, labels = self._planted(rng)
        data = make_data(stacks)
        carried = np.where(labels > 0, -2.0, 2.0)  # everything currently wrong
        w = np.exp(-labels * carried)
        w /= w.sum()
        tree, err = train_tree(data, np.arange(len(labels)), labels, w, 2)
        assert err < 0.5

    def test_single_class_refused(self, rng):
        stacks = rng.random((10, 1, 2, 2)).astype(np.float32)
        labels = np.ones(10, dtype=np.int8)
        with pytest.raises(ConfigError):
            boost_stage(make_data(stacks), labels, 4, 1, np.zeros(10))


class TestCalibration:
    def test_min_positive_margin_zero(self, rng):
        traces = rng.standard_normal((40, 10)).cumsum(axis=1)
        thr = calibrate_soft_cascade(traces, "min-positive", margin=0.0)
        assert (traces >= thr).all()
        assert np.array_equal(thr, traces.min(axis=0))

    def test_quantile_against_sort_oracle(self, rng):
        traces = np.sort(rng.standard_normal((100, 6)), axis=0).cumsum(axis=1)
        rng.shuffle(traces)
        q = 0.05
        thr = calibrate_soft_cascade(traces, "quantile", q=q, margin=1e-6)
        for t in range(traces.shape[1]):
            col = np.sort(traces[:, t])
            expect = col[int(np.floor(q * (len(col) - 1)))] - 1e-6
            assert thr[t] == expect

    def test_needs_positive_trace(self):
        with pytest.raises(ConfigError):
            calibrate_soft_cascade(np.zeros((0, 4)))


def random_model(rng, n_stages=2, k=6, depth=2, geoms=((3, 4, 4), (2, 2, 2))):
    """Hand-built model over tiny conv-style layers with random trees."""
    n_internal = (1 << depth) - 1
    stages = []
    for si in range(n_stages):
        c, h, w = geoms[si]
        trees = []
        for _ in range(k):
            features = []
            for _ in range(n_internal):
                if rng.random() < 0.15:
                    features.append(None)
                else:
                    features.append(FeatureSpec(
                        "zero", si + 1, int(rng.integers(0, c)),
                        (int(rng.integers(0, w)), int(rng.integers(0, h)),
                         1, 1)))
                # mixed polarity exercised via the polarity array below
            trees.append(DecisionTree(
                depth, features,
                rng.standard_normal(n_internal),
                np.where(rng.random(n_internal) < 0.8, 1, -1).astype(np.int8),
                rng.standard_normal(1 << depth), 0.1))
        stages.append(Stage(si + 1, "l1" if si == 0 else f"conv:{si}",
                            trees, np.full(k, -np.inf)))
    plan = StagePlan(2 * k, n_stages, [k] * n_stages)
    return CascadeModel(plan, stages, depth, 4, geoms[0])


def random_mlc(rng, geoms):
    mlc = MultiLayerChannels()
    for i, g in enumerate(geoms, start=1):
        mlc.set_layer(i, ChannelStack(i, rng.random(g).astype(np.float32)))
    return mlc


class TestScore:
    def test_early_exit_equals_full_sum_with_inf_thresholds(self, rng):
        geoms = ((3, 4, 4), (2, 2, 2))
        model = random_model(rng, geoms=geoms)
        for _ in range(50):
            mlc = random_mlc(rng, geoms)
            s_full, st_full, acc_full = score(model, mlc, early_exit=False)
            s_fast, st_fast, acc_fast = score(model, mlc, early_exit=True)
            assert s_full == s_fast
            assert (st_full, acc_full) == (st_fast, acc_fast)
            assert acc_full

    def test_early_exit_stops_at_threshold(self, rng):
        geoms = ((3, 4, 4), (2, 2, 2))
        model = random_model(rng, geoms=geoms)
        # impossible threshold on the very first tree rejects everything
        model.stages[0].reject_thresholds = np.full(
            len(model.stages[0].trees), np.inf)
        mlc = random_mlc(rng, geoms)
        s, stage_reached, accepted = score(model, mlc, early_exit=True)
        assert not accepted and stage_reached == 1

    def test_unpopulated_layer_raises(self, rng):
        geoms = ((3, 4, 4), (2, 2, 2))
        model = random_model(rng, geoms=geoms)
        mlc = random_mlc(rng, geoms[:1])
        with pytest.raises(SequencingError):
            score(model, mlc, early_exit=False)


class TestModelFile:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        model = random_model(rng)
        p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
        save_model(p1, model)
        back = load_model(p1)
        save_model(p2, back)
        assert p1.read_bytes() == p2.read_bytes()
        assert model_to_dict(back) == model_to_dict(model)

    def test_inf_thresholds_roundtrip(self, tmp_path, rng):
        model = random_model(rng)
        model.stages[0].reject_thresholds = np.array([-np.inf] * 6)
        p = tmp_path / "m.json"
        save_model(p, model)
        back = load_model(p)
        assert np.array_equal(back.stages[0].reject_thresholds,
                              model.stages[0].reject_thresholds)

    def test_cross_layer_feature_rejected(self, tmp_path, rng):
        model = random_model(rng)
        save_model(tmp_path / "m.json", model)
        d = json.loads((tmp_path / "m.json").read_text())
        for node in d["stages"][1]["trees"][0]["features"]:
            if node:
                node["layer"] = 1  # stage 2 must not read layer 1
                break
        (tmp_path / "bad.json").write_text(json.dumps(d))
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "bad.json")

    def test_malformed_json(self, tmp_path):
        (tmp_path / "x.json").write_text("{not json")
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "x.json")


class TestTrainedModel:
    def test_metadata_records_errors_and_losses(self, tiny_world):
        model = tiny_world["model"]
        meta = model.metadata
        assert len(meta["stage_errors"]) == model.n_stages
        for eps, losses in zip(meta["stage_errors"], meta["stage_losses"]):
            assert all(e < 0.5 for e in eps)
            assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))

    def test_stage_sources_and_plan(self, tiny_world):
        model = tiny_world["model"]
        assert model.stages[0].source == "l1"
        assert model.stages[1].source == "conv:5"
        assert sum(len(s.trees) for s in model.stages) == sum(model.plan.k)

    def test_model_file_roundtrip(self, tiny_world, tmp_path):
        model = tiny_world["model"]
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_model(p1, model)
        save_model(p2, load_model(p1))
        assert p1.read_bytes() == p2.read_bytes()
