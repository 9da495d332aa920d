"""F1 metrics, prediction, upper bounds, awareness and gate dumps."""

import csv

import numpy as np
import pytest

from mjave.dataio import TagScheme, tags_to_spans
from mjave.evaluation import (
    GateDump,
    awareness,
    derangement,
    evaluate,
    f1_attributes,
    f1_values,
    inspect_gates,
    instance_f1,
    predict,
    upper_bound_eval,
    with_images_from,
)
from toys import toy_instances, toy_model

LABELS = ["Color", "Material", "Pattern"]


def brute_force_counts(pred_tags, gold_tags):
    """Count matches by enumerating every (gold span, predicted span) pair."""
    tp = fp = fn = 0
    for p, g in zip(pred_tags, gold_tags):
        ps, gs = list(tags_to_spans(p)), list(tags_to_spans(g))
        matched = 0
        for a in ps:
            for b in gs:
                if a[0] == b[0] and a[1] == b[1] and a[2] == b[2]:
                    matched += 1
        tp += matched
        fp += len(ps) - matched
        fn += len(gs) - matched
    return tp, fp, fn


class TestAttributeF1:
    def test_perfect(self):
        assert f1_attributes([{"Color"}, set()], [{"Color"}, set()])["f1"] == 1.0

    def test_hand_counts(self):
        r = f1_attributes([{"Color", "Material"}], [{"Color"}])
        assert (r["precision"], r["recall"]) == (0.5, 1.0)
        assert abs(r["f1"] - 2 / 3) <= 1e-12

    def test_empty_predictions(self):
        assert f1_attributes([set(), set()], [{"Color"}, {"Fit"}])["f1"] == 0.0

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            f1_attributes([], [])

    def test_per_label(self):
        r = f1_attributes([{"Color"}, {"Fit"}], [{"Color"}, {"Color"}])
        assert r["per_label"]["Color"]["recall"] == 0.5
        assert r["per_label"]["Fit"]["precision"] == 0.0


class TestValueF1:
    def test_exact(self):
        tags = [["B-Color", "I-Color", "O"]]
        assert f1_values(tags, tags)["f1"] == 1.0

    def test_boundary_off_by_one(self):
        r = f1_values([["B-Color", "I-Color", "I-Color"]], [["B-Color", "I-Color", "O"]])
        assert (r["tp"], r["fp"], r["fn"]) == (0, 1, 1)

    def test_hand_counts(self):
        r = f1_values([["B-Color", "O", "B-Material"]], [["B-Color", "O", "O"]])
        assert (r["tp"], r["fp"], r["fn"]) == (1, 1, 0)
        assert (r["precision"], r["recall"]) == (0.5, 1.0)
        assert abs(r["f1"] - 2 / 3) <= 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            f1_values([["O", "O"]], [["O"]])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        tags = TagScheme(LABELS).tags
        for _ in range(200):
            n = int(rng.integers(1, 12))
            gold = [[tags[i] for i in rng.integers(len(tags), size=n)]]
            pred = [[tags[i] for i in rng.integers(len(tags), size=n)]]
            if rng.random() < 0.3:
                pred = [list(gold[0])]
            r = f1_values(pred, gold)
            assert (r["tp"], r["fp"], r["fn"]) == brute_force_counts(pred, gold)

    def test_order_invariant(self):
        rng = np.random.default_rng(1)
        tags = TagScheme(LABELS).tags
        gold = [[tags[i] for i in rng.integers(len(tags), size=6)] for _ in range(20)]
        pred = [[tags[i] for i in rng.integers(len(tags), size=6)] for _ in range(20)]
        perm = rng.permutation(20)
        a = f1_values(pred, gold)
        b = f1_values([pred[i] for i in perm], [gold[i] for i in perm])
        assert a == b


class TestInstanceF1:
    @pytest.mark.parametrize("pred,gold,expect", [
        (set(), set(), 1.0),
        ({"a"}, set(), 0.0),
        ({"a", "b"}, {"a"}, 2 / 3),
        ({"a"}, {"a"}, 1.0),
    ])
    def test_cases(self, pred, gold, expect):
        assert abs(instance_f1(pred, gold) - expect) <= 1e-12


@pytest.fixture(scope="module")
def toy():
    model = toy_model(seed=6, dtype="float64")
    data = toy_instances(np.random.default_rng(6), 12, model.scheme.labels)
    return model, data


class TestPredict:
    def test_shapes_and_thresholds(self, toy):
        model, data = toy
        p = predict(model, data, batch_size=5)
        assert p.attr_probs.shape == (12, 2)
        for probs, attrs, tags, inst in zip(p.attr_probs, p.attributes, p.tags, data):
            assert attrs == {lab for lab, q in zip(model.scheme.labels, probs) if q > 0.5}
            assert len(tags) == len(inst.tokens)

    def test_batch_size_does_not_matter(self, toy):
        model, data = toy
        assert predict(model, data, batch_size=1).tags == predict(model, data, batch_size=64).tags

    def test_truncated_tokens_are_o(self, toy):
        model, data = toy
        inst = toy_instances(np.random.default_rng(0), 1, model.scheme.labels, min_tokens=11, max_tokens=11)[0]
        tags = predict(model, [inst]).tags[0]
        assert len(tags) == 11 and tags[model.config.max_len:] == ["O"] * (11 - model.config.max_len)


class TestUpperBound:
    def test_value_mode_scores_attributes_perfect(self, toy):
        model, data = toy
        rep = upper_bound_eval(model, data, "value_given_gold_attrs")
        assert rep.attribute["f1"] == 1.0 and rep.mode == "value_given_gold_attrs"

    def test_attribute_mode_scores_values_perfect(self, toy):
        model, data = toy
        rep = upper_bound_eval(model, data, "attr_given_gold_values")
        assert rep.value["f1"] == 1.0
        assert rep.attribute == evaluate(model, data).attribute

    def test_unknown_mode(self, toy):
        model, data = toy
        with pytest.raises(ValueError, match="unknown upper-bound mode"):
            upper_bound_eval(model, data, "both")


class TestAwareness:
    def test_derangement_has_no_fixed_point(self):
        rng = np.random.default_rng(0)
        for n in (2, 3, 10, 50):
            for _ in range(20):
                p = derangement(n, rng)
                assert sorted(p.tolist()) == list(range(n))
                assert (p != np.arange(n)).all()

    def test_images_swapped(self, toy):
        _, data = toy
        perm = np.roll(np.arange(len(data)), 1)
        out = with_images_from(data, perm)
        assert out[1].image is data[0].image and out[1].tokens == data[1].tokens

    def test_identity_hook_gives_zero(self, toy):
        model, data = toy
        rep = awareness(model, data, permutations=3, seed=0, n_resamples=99,
                        perm_hook=lambda n, rng: np.arange(n))
        for task in ("attribute", "value"):
            assert rep.delta[task]["mean"] == 0.0
            assert rep.delta[task]["runs"] == [0.0, 0.0, 0.0]
            assert rep.incongruent[task]["runs"] == [rep.congruent[task]] * 3

    def test_report_shape(self, toy):
        model, data = toy
        rep = awareness(model, data, permutations=4, seed=1, n_resamples=99)
        for task in ("attribute", "value"):
            assert len(rep.delta[task]["runs"]) == 4
            assert len(rep.significance[task]["p_values"]) == 4
            assert 0.0 <= rep.significance[task]["p"] <= 1.0

    def test_seeded(self, toy):
        model, data = toy
        a = awareness(model, data, permutations=2, seed=5, n_resamples=99).to_json()
        b = awareness(model, data, permutations=2, seed=5, n_resamples=99).to_json()
        assert a == b

    def test_single_instance_rejected(self, toy):
        model, data = toy
        with pytest.raises(ValueError, match="at least 2"):
            awareness(model, data[:1])


class TestGates:
    def test_dump_matches_forward(self, toy, tmp_path):
        model, data = toy
        inst = data[2]
        dump = inspect_gates(model, inst)
        out = model.forward(model.batch([inst]))
        n = len(inst.tokens)
        assert dump.tokens == ["[CLS]"] + inst.tokens + ["[SEP]"]
        assert dump.g_global == out.g_global.data[0, :n + 2, 0].tolist()
        assert dump.g_regional == out.g_regional.data[0, :, 0].tolist()
        assert all(0 < g < 1 for g in dump.g_global + dump.g_regional)

    def test_csv_rows(self, toy, tmp_path):
        model, data = toy
        dump = inspect_gates(model, data[0])
        dump.write(tmp_path)
        with open(tmp_path / "global_gates.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["token", "g_global"] and len(rows) - 1 == len(data[0].tokens) + 2
        with open(tmp_path / "regional_gates.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["region", "g_regional"] and len(rows) - 1 == model.config.k
        assert float(rows[1][1]) == dump.g_regional[0]
        assert isinstance(dump, GateDump)
