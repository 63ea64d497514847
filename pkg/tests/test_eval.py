import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from todkit.evaluation import (FewShotSpec, MetricReport, MetricValue,
                               aggregate_seeds, clustering_probe, dst_metrics,
                               few_shot_sample, intent_metrics, k_of_100,
                               kmeans, linear_probe, make_report,
                               multilabel_f1, nmi, pca_2d)

# ---------------------------------------------------------------------------
# intent metrics
# ---------------------------------------------------------------------------


class TestIntentMetrics:
    def test_perfect_predictor(self):
        golds = ["a", "b", "oos", "a"]
        m = intent_metrics(golds, golds, "oos")
        assert m["acc_all"] == m["acc_in"] == m["acc_out"] == m["recall_out"] == 1.0

    def test_two_sample_confusion(self):
        m = intent_metrics(preds=["in_A", "in_B"], golds=["in_A", "oos"],
                           out_of_scope_label="oos")
        assert m["acc_all"] == 0.5
        assert m["acc_in"] == 1.0
        assert m["recall_out"] == 0.0
        assert m["acc_out"] == 0.5  # one of two binary in/out decisions right

    def test_recall_absent_without_oos_golds(self):
        m = intent_metrics(["a", "b"], ["a", "b"], "oos")
        assert "recall_out" not in m

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            intent_metrics(["a"], ["a", "b"], "oos")

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        labels = ["x", "y", "z", "oos"]
        for _ in range(100):
            n = int(rng.integers(1, 30))
            golds = [labels[i] for i in rng.integers(0, 4, size=n)]
            preds = [labels[i] for i in rng.integers(0, 4, size=n)]
            m = intent_metrics(preds, golds, "oos")
            correct = sum(1 for p, g in zip(preds, golds) if p == g)
            assert m["acc_all"] == correct / n
            in_g = [(p, g) for p, g in zip(preds, golds) if g != "oos"]
            if in_g:
                assert m["acc_in"] == sum(p == g for p, g in in_g) / len(in_g)
            binary = sum((p == "oos") == (g == "oos") for p, g in zip(preds, golds))
            assert m["acc_out"] == binary / n
            out_g = [(p, g) for p, g in zip(preds, golds) if g == "oos"]
            if out_g:
                assert m["recall_out"] == sum(p == "oos" for p, _ in out_g) / len(out_g)
            else:
                assert "recall_out" not in m


# ---------------------------------------------------------------------------
# dst metrics
# ---------------------------------------------------------------------------


class TestDstMetrics:
    def test_half_joint(self):
        gold = [{"a": "1", "b": "2"}, {"a": "1", "b": "2"}]
        pred = [{"a": "1", "b": "2"}, {"a": "1", "b": "9"}]
        joint, _ = dst_metrics(pred, gold)
        assert joint == 0.5

    def test_slot_counting(self):
        gold = [{"a": "1", "b": "2", "c": "3"}] * 2
        pred = [{"a": "1", "b": "2", "c": "3"}, {"a": "1", "b": "2", "c": "9"}]
        _, slot = dst_metrics(pred, gold)
        assert slot == pytest.approx(5 / 6)

    def test_universe_mismatch(self):
        with pytest.raises(ValueError, match="universe"):
            dst_metrics([{"a": "1"}], [{"b": "1"}])

    def test_brute_force_oracle_and_joint_le_slot(self):
        rng = np.random.default_rng(1)
        pairs = ["p0", "p1", "p2"]
        values = ["u", "v", "w"]
        for _ in range(100):
            n = int(rng.integers(1, 20))
            gold = [{p: values[i] for p, i in zip(pairs, rng.integers(0, 3, 3))}
                    for _ in range(n)]
            pred = [{p: values[i] for p, i in zip(pairs, rng.integers(0, 3, 3))}
                    for _ in range(n)]
            joint, slot = dst_metrics(pred, gold)
            # naive recount
            jhits = 0
            shits = 0
            for pd, gd in zip(pred, gold):
                ok = [pd[p] == gd[p] for p in pairs]
                jhits += all(ok)
                shits += sum(ok)
            assert joint == jhits / n
            assert slot == shits / (n * len(pairs))
            assert joint <= slot + 1e-12


# ---------------------------------------------------------------------------
# multilabel F1
# ---------------------------------------------------------------------------


class TestMultilabelF1:
    def test_hand_computed_confusion(self):
        golds = [{"A"}, {"A", "B"}]
        preds = [{"A", "B"}, {"A"}]
        micro, macro = multilabel_f1(preds, golds, ["A", "B", "C"])
        assert micro == pytest.approx(2 / 3, abs=1e-12)
        assert macro == pytest.approx(1 / 3, abs=1e-12)

    def test_perfect(self):
        golds = [{"A"}, {"B", "C"}]
        micro, macro = multilabel_f1(golds, golds, ["A", "B", "C"])
        assert micro == 1.0 and macro == 1.0

    def test_no_tp_micro_zero(self):
        micro, _ = multilabel_f1([set(), set()], [{"A"}, {"B"}], ["A", "B"])
        assert micro == 0.0

    def test_single_label_micro_equals_macro(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            n = int(rng.integers(1, 12))
            golds = [{"A"} if rng.random() < 0.5 else set() for _ in range(n)]
            preds = [{"A"} if rng.random() < 0.5 else set() for _ in range(n)]
            micro, macro = multilabel_f1(preds, golds, ["A"])
            assert micro == pytest.approx(macro, abs=1e-12)

    def test_label_outside_space(self):
        with pytest.raises(ValueError, match="outside"):
            multilabel_f1([{"Z"}], [{"A"}], ["A"])

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        space = ["A", "B", "C", "D"]
        for _ in range(100):
            n = int(rng.integers(1, 15))
            golds = [{lab for lab in space if rng.random() < 0.4} for _ in range(n)]
            preds = [{lab for lab in space if rng.random() < 0.4} for _ in range(n)]
            micro, macro = multilabel_f1(preds, golds, space)
            tp = sum(len(p & g) for p, g in zip(preds, golds))
            fp = sum(len(p - g) for p, g in zip(preds, golds))
            fn = sum(len(g - p) for p, g in zip(preds, golds))
            expect_micro = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
            assert micro == pytest.approx(expect_micro, abs=1e-12)
            per = []
            for lab in space:
                ltp = sum(1 for p, g in zip(preds, golds) if lab in p and lab in g)
                lfp = sum(1 for p, g in zip(preds, golds) if lab in p and lab not in g)
                lfn = sum(1 for p, g in zip(preds, golds) if lab not in p and lab in g)
                per.append(2 * ltp / (2 * ltp + lfp + lfn) if ltp + lfp + lfn else 0.0)
            assert macro == pytest.approx(float(np.mean(per)), abs=1e-12)


# ---------------------------------------------------------------------------
# k-of-100
# ---------------------------------------------------------------------------


def _index_pairs(n):
    return [(i, i) for i in range(n)]


class TestKOf100:
    def test_oracle_scorer_perfect(self):
        def scorer(contexts, responses):
            c = np.array(contexts)
            r = np.array(responses)
            return (c[:, None] == r[None, :]).astype(float)

        for k in (1, 3, 10):
            res = k_of_100(scorer, _index_pairs(250), k, num_seeds=2)
            assert res.mean == 1.0

    def test_constant_scorer_pessimistic(self):
        def scorer(contexts, responses):
            return np.ones((len(contexts), len(responses)))

        res = k_of_100(scorer, _index_pairs(150), 10, num_seeds=2)
        assert res.mean == 0.0

    def test_random_scorer_near_one_percent(self):
        state = {"n": 0}

        def scorer(contexts, responses):
            rng = np.random.default_rng(state["n"])
            state["n"] += 1
            return rng.random((len(contexts), len(responses)))

        res = k_of_100(scorer, _index_pairs(300), 1, num_seeds=5)
        assert abs(res.mean - 0.01) <= 0.01

    def test_monotone_in_k(self):
        state = {"n": 0}

        def scorer(contexts, responses):
            rng = np.random.default_rng(state["n"])
            state["n"] += 1
            return rng.random((len(contexts), len(responses)))

        accs = []
        for k in (1, 3, 10):
            state["n"] = 0
            accs.append(k_of_100(scorer, _index_pairs(300), k, num_seeds=3).mean)
        assert accs[0] <= accs[1] <= accs[2]

    def test_too_few_pairs(self):
        with pytest.raises(ValueError, match="at least 100"):
            k_of_100(lambda c, r: np.zeros((len(c), len(r))), _index_pairs(99), 1)

    def test_k_bounds(self):
        with pytest.raises(ValueError):
            k_of_100(lambda c, r: np.zeros((len(c), len(r))), _index_pairs(100), 100)

    def test_partial_batch_dropped(self):
        calls = []

        def scorer(contexts, responses):
            calls.append(len(contexts))
            return np.eye(len(contexts)) + 1.0

        k_of_100(scorer, _index_pairs(250), 1, num_seeds=1)
        assert calls == [100, 100]  # trailing 50 dropped


# ---------------------------------------------------------------------------
# few-shot sampling
# ---------------------------------------------------------------------------


class TestFewShot:
    def test_one_shot_over_150_classes(self):
        data = [(f"utt-{c}-{i}", f"class{c}") for c in range(150) for i in range(4)]
        out = few_shot_sample(data, FewShotSpec("per-class-k", k=1), seed=0)
        assert len(out) == 150
        assert len({lab for _, lab in out}) == 150

    def test_fraction_of_8420_dialogues_is_84(self):
        data = list(range(8420))
        out = few_shot_sample(data, FewShotSpec("fraction", fraction=0.01), seed=0)
        assert len(out) == 84

    def test_fraction_one_returns_everything(self):
        data = list(range(57))
        out = few_shot_sample(data, FewShotSpec("fraction", fraction=1.0), seed=3)
        assert sorted(out) == data

    def test_deterministic(self):
        data = [(i, f"c{i % 5}") for i in range(50)]
        spec = FewShotSpec("per-class-k", k=3)
        assert few_shot_sample(data, spec, seed=9) == few_shot_sample(data, spec, seed=9)

    def test_insufficient_class_named(self):
        data = [("x", "rare")] + [(i, "common") for i in range(10)]
        with pytest.raises(ValueError, match="rare"):
            few_shot_sample(data, FewShotSpec("per-class-k", k=2), seed=0)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            FewShotSpec("fraction", fraction=0.0)
        with pytest.raises(ValueError):
            FewShotSpec("per-class-k", k=0)
        with pytest.raises(ValueError, match="3 seeds"):
            FewShotSpec("fraction", fraction=0.5, num_seeds=2)

    def test_without_replacement(self):
        data = [(i, "c") for i in range(10)]
        out = few_shot_sample(data, FewShotSpec("per-class-k", k=10), seed=1)
        assert sorted(i for i, _ in out) == list(range(10))


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


class TestAggregation:
    def test_mean_and_sample_std(self):
        rep = make_report("t", [{"acc": 0.4}, {"acc": 0.6}], seeds=[1, 2])
        assert rep.metrics["acc"].mean == pytest.approx(0.5)
        assert rep.metrics["acc"].std == pytest.approx(0.1414, abs=1e-4)

    def test_single_seed_zero_std(self):
        rep = make_report("t", [{"acc": 0.7}], seeds=[1])
        assert rep.metrics["acc"].std == 0.0

    def test_identical_values_zero_std(self):
        rep = make_report("t", [{"acc": 0.7}] * 3, seeds=[1, 2, 3])
        assert rep.metrics["acc"].std == 0.0

    def test_key_mismatch(self):
        with pytest.raises(ValueError, match="keys"):
            make_report("t", [{"acc": 1.0}, {"f1": 1.0}], seeds=[1, 2])

    def test_aggregate_seed_reports(self):
        reps = [make_report("t", [{"acc": v}], seeds=[s], fingerprint="fp")
                for s, v in [(1, 0.4), (2, 0.6)]]
        merged = aggregate_seeds(reps)
        assert merged.metrics["acc"].mean == pytest.approx(0.5)
        assert merged.seeds == [1, 2]

    def test_report_json_round_trip(self):
        rep = make_report("t", [{"acc": 0.4}, {"acc": 0.6}], seeds=[1, 2], fingerprint="abc")
        again = MetricReport.from_json(rep.to_json())
        assert again.task == rep.task
        assert again.metrics["acc"].values == rep.metrics["acc"].values

    def test_inconsistent_mean_rejected(self):
        with pytest.raises(ValueError, match="inconsistent"):
            MetricReport("t", {"m": MetricValue(0.9, 0.0, [0.1, 0.2])}, "", [1, 2])


# ---------------------------------------------------------------------------
# clustering probe
# ---------------------------------------------------------------------------


class TestNmi:
    def test_identical_partitions(self):
        assert nmi([0, 0, 1, 1, 2], [0, 0, 1, 1, 2]) == pytest.approx(1.0)

    def test_single_cluster(self):
        assert nmi([0, 0, 0, 0], [0, 1, 0, 1]) == 0.0

    def test_independent_partition(self):
        assert nmi([0, 1, 0, 1], [0, 0, 1, 1]) == 0.0

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(4)
        a = rng.integers(0, 3, size=40).tolist()
        b = rng.integers(0, 4, size=40).tolist()
        base = nmi(a, b)
        relabeled = [{0: 7, 1: 5, 2: 9}[x] for x in a]
        assert nmi(relabeled, b) == pytest.approx(base, abs=1e-12)

    @given(st.lists(st.integers(0, 4), min_size=2, max_size=60))
    @settings(max_examples=60)
    def test_bounded(self, labels):
        rng = np.random.default_rng(0)
        other = rng.integers(0, 3, size=len(labels)).tolist()
        val = nmi(labels, other)
        assert 0.0 <= val <= 1.0

    def test_max_normalization_option(self):
        a = [0, 0, 1, 1, 2, 2]
        b = [0, 0, 1, 1, 1, 1]
        sqrt_val = nmi(a, b, normalization="sqrt")
        max_val = nmi(a, b, normalization="max")
        assert max_val <= sqrt_val  # max(Ha, Hb) >= sqrt(Ha * Hb)
        assert nmi(a, a, normalization="max") == pytest.approx(1.0)
        with pytest.raises(ValueError):
            nmi(a, b, normalization="arith")


class TestClusteringProbe:
    def test_separated_blobs_recovered(self):
        rng = np.random.default_rng(5)
        blob_a = rng.normal(size=(30, 4)) * 0.05 + np.array([5, 0, 0, 0])
        blob_b = rng.normal(size=(30, 4)) * 0.05 - np.array([5, 0, 0, 0])
        points = np.vstack([blob_a, blob_b])
        labels = ["a"] * 30 + ["b"] * 30
        assert clustering_probe(points, labels, k=2, seed=0) == pytest.approx(1.0)

    def test_degenerate_points_warn_and_zero(self):
        points = np.ones((10, 3))
        with pytest.warns(UserWarning, match="degenerate"):
            assert clustering_probe(points, ["x"] * 10, k=2, seed=0) == 0.0

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(50, 3))
        labels = rng.integers(0, 3, size=50).tolist()
        assert clustering_probe(pts, labels, 3, seed=2) == \
            clustering_probe(pts, labels, 3, seed=2)

    def test_kmeans_labels_shape(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(40, 2))
        labels = kmeans(pts, 4, seed=0)
        assert labels.shape == (40,)
        assert set(labels.tolist()) <= set(range(4))


# ---------------------------------------------------------------------------
# PCA and embedding export
# ---------------------------------------------------------------------------


class TestPca:
    def test_planar_points_distances_preserved(self):
        rng = np.random.default_rng(8)
        basis = np.linalg.qr(rng.normal(size=(6, 6)))[0][:, :2]
        flat = rng.normal(size=(25, 2))
        points = flat @ basis.T  # lies in a 2-D subspace of R^6
        coords = pca_2d(points)
        d_orig = np.linalg.norm(points[:, None] - points[None, :], axis=2)
        d_proj = np.linalg.norm(coords[:, None] - coords[None, :], axis=2)
        np.testing.assert_allclose(d_proj, d_orig, atol=1e-9)

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        pts = rng.normal(size=(30, 5))
        np.testing.assert_array_equal(pca_2d(pts), pca_2d(pts))


class TestExportEmbeddings:
    def test_shape_and_determinism(self, tmp_path, vocab, tiny_cfg):
        from todkit.encoder import init_params
        from todkit.evaluation import export_embeddings
        params = init_params(tiny_cfg, 0)
        texts = ["hello how can i help", "i want a thai place", "the booking is done"]
        labels = ["greet", "request", "inform"]
        out = tmp_path / "emb.tsv"
        data = export_embeddings(params, tiny_cfg, vocab, texts, labels, out, pca=True)
        assert data.shape == (3, tiny_cfg.hidden + 2)
        lines = out.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 4
        assert lines[0].split("\t")[0] == "label"
        assert lines[1].split("\t")[0] == "greet"
        out2 = tmp_path / "emb2.tsv"
        export_embeddings(params, tiny_cfg, vocab, texts, labels, out2, pca=True)
        assert out.read_text() == out2.read_text()


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------


class TestLinearProbe:
    def test_encoder_bit_identical_and_param_count(self, vocab, tiny_cfg):
        from todkit.corpus import Dialogue, Turn
        from todkit.encoder import init_params
        from todkit.trainer import TrainConfig

        ds = []
        for i in range(6):
            ds.append(Dialogue(id=f"a{i}", domains=set(),
                               turns=[Turn("user", "book a table", intent="book")]))
            ds.append(Dialogue(id=f"b{i}", domains=set(),
                               turns=[Turn("user", "cancel it now", intent="cancel")]))
        params = init_params(tiny_cfg, 0)
        before = {k: v.copy() for k, v in params.items()}
        cfg = TrainConfig(batch_size=4, max_len=16, lr0=5e-3, total_steps=30,
                          clip_norm=1.0, weight_decay=0.0, eval_every=10,
                          patience=10, seed=0)
        result = linear_probe(params, tiny_cfg, vocab, "intent", ds, ds, cfg, seed=1)
        for name, arr in before.items():
            np.testing.assert_array_equal(result.params[name], arr)
        head_w = result.params["intent.w"]
        head_b = result.params["intent.b"]
        num_classes = 2
        assert head_w.size + head_b.size == (tiny_cfg.hidden + 1) * num_classes

    def test_rejects_unsupported_task(self, vocab, tiny_cfg):
        from todkit.encoder import init_params
        from todkit.trainer import TrainConfig
        cfg = TrainConfig(total_steps=1, eval_every=1)
        with pytest.raises(ValueError, match="probe"):
            linear_probe(init_params(tiny_cfg, 0), tiny_cfg, vocab, "dst", [], [], cfg, 0)
