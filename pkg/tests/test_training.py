"""Loss terms, optimisation loop, subsampling and determinism."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mjave import numerics as nx
from mjave.dataio import Manifest, SynthConfig, generate_synthetic
from mjave.model import MJAVE, AblationConfig, SeparateModels, save_checkpoint
from mjave.numerics import Tensor
from mjave.training import (
    TrainConfig,
    TrainingDiverged,
    compute_losses,
    kl_penalty,
    loss_attribute,
    loss_value,
    map_value_to_attribute,
    sample_fraction,
    total_loss,
    train,
)
from toys import toy_instances, toy_model

probs = st.floats(min_value=1e-6, max_value=1 - 1e-6)


class TestAttributeLoss:
    def test_perfect(self):
        gold = np.array([1.0, 0.0, 1.0])
        assert float(loss_attribute(Tensor(gold), gold).data) <= 1e-10

    def test_half_is_ln2(self):
        out = loss_attribute(Tensor(np.full(4, 0.5)), np.array([1.0, 0.0, 0.0, 1.0]))
        assert abs(float(out.data) - math.log(2)) <= 1e-12

    def test_sum_reduction_scales_by_labels(self):
        a = Tensor(np.array([0.3, 0.8]))
        gold = np.array([1.0, 0.0])
        assert float(loss_attribute(a, gold, "sum").data) == pytest.approx(2 * float(loss_attribute(a, gold).data))

    def test_gradient_sign(self):
        a = Tensor(np.array([0.3, 0.6]), requires_grad=True, name="a")
        g = nx.backward(loss_attribute(a, np.array([1.0, 1.0])), {"a": a})["a"]
        assert (g < 0).all()

    def test_unknown_reduction(self):
        with pytest.raises(ValueError):
            loss_attribute(Tensor([0.5]), np.array([1.0]), "max")


class TestValueLoss:
    def test_perfect(self):
        vals = np.eye(3)[None, [0, 2, 1]]
        assert float(loss_value(Tensor(vals), np.array([[0, 2, 1]]), np.ones((1, 3), bool)).data) <= 1e-10

    @pytest.mark.parametrize("n_tags", [3, 5, 17])
    def test_uniform_is_ln_t(self, n_tags):
        vals = np.full((1, 4, n_tags), 1.0 / n_tags)
        out = loss_value(Tensor(vals), np.array([[0, 1, 2, 0]]), np.ones((1, 4), bool))
        assert abs(float(out.data) - math.log(n_tags)) <= 1e-12

    def test_masked_rows_ignored(self):
        rng = np.random.default_rng(0)
        vals = rng.dirichlet(np.ones(5), size=(1, 4))
        mask = np.array([[True, True, False, False]])
        tags = np.array([[1, 2, 0, 0]])
        base = float(loss_value(Tensor(vals), tags, mask).data)
        vals[0, 2:] = rng.dirichlet(np.ones(5), size=2)
        assert float(loss_value(Tensor(vals), tags, mask).data) == base


class TestMapping:
    def test_hand_value(self):
        # L=1, columns O, B, I
        vals = np.array([[[0.4, 0.2, 0.4], [0.1, 0.8, 0.1]]])
        out = map_value_to_attribute(Tensor(vals), np.ones((1, 2), bool))
        assert abs(float(out.data[0, 0]) - 0.5 * (0.8 + 0.4)) <= 1e-15

    def test_all_o_is_near_zero(self):
        vals = np.zeros((1, 3, 5))
        vals[..., 0] = 1.0
        assert (map_value_to_attribute(Tensor(vals), np.ones((1, 3), bool)).data == 0).all()

    def test_mask_excludes_positions(self):
        vals = np.array([[[0.0, 1.0, 0.0], [0.5, 0.25, 0.25]]])
        out = map_value_to_attribute(Tensor(vals), np.array([[False, True]]))
        assert float(out.data[0, 0]) == 0.25

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 10_000))
    def test_bounds_and_permutation_equivariance(self, n_labels, n_tok, seed):
        rng = np.random.default_rng(seed)
        vals = rng.dirichlet(np.ones(2 * n_labels + 1), size=(1, n_tok))
        mask = np.ones((1, n_tok), bool)
        out = map_value_to_attribute(Tensor(vals), mask).data
        assert ((out >= 0) & (out <= 1)).all()
        perm = rng.permutation(n_tok)
        assert map_value_to_attribute(Tensor(vals[:, perm]), mask).data.tolist() == out.tolist()


class TestKL:
    def test_identical_is_zero(self):
        p = Tensor(np.array([[0.2, 0.9, 1e-15]]))
        assert float(kl_penalty(p, p).data) == 0.0

    def test_hand_value(self):
        out = kl_penalty(Tensor(np.array([0.8])), Tensor(np.array([0.4])))
        assert abs(float(out.data) - 0.8 * math.log(2)) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, 5, elements=probs), hnp.arrays(np.float64, 5, elements=probs))
    def test_brute_force(self, a, m):
        expect = 0.0
        for al, ml in zip(a, m):
            expect += al * (math.log(al) - math.log(ml))
        assert abs(float(kl_penalty(Tensor(a), Tensor(m)).data) - expect) <= 1e-12

    def test_can_be_negative(self):
        assert float(kl_penalty(Tensor(np.array([0.2])), Tensor(np.array([0.9]))).data) < 0


class TestTotalLoss:
    def test_hand_value(self):
        out = total_loss(Tensor(1.0), Tensor(2.0), Tensor(0.4), 0.5)
        assert abs(float(out.data) - 3.2) <= 1e-12

    def test_lambda_zero_exact(self):
        out = total_loss(Tensor(1.25), Tensor(2.5), Tensor(0.7), 0.0)
        assert float(out.data) == 3.75

    def test_kl_switch_zeroes_lambda(self):
        out = total_loss(Tensor(1.0), Tensor(2.0), Tensor(0.4), 0.5, AblationConfig(use_kl=False))
        assert float(out.data) == 3.0

    def test_default_lambda(self):
        assert TrainConfig().lam == 0.5

    @pytest.mark.parametrize("bad", [{"lam": -0.1}, {"train_fraction": 0.0}, {"train_fraction": 1.5},
                                     {"epochs": 0}])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


class TestGradients:
    def test_joint_loss_grad_check(self):
        model = toy_model(seed=1, d=6, d_a=4, d_v=3, k=3, ff=6, max_len=4)
        batch = model.batch(toy_instances(np.random.default_rng(1), 1, model.scheme.labels, k=3, d_v=3,
                                          min_tokens=2, max_tokens=2))
        params = {k: v for k, v in model.params.items() if not k.startswith("enc.pos")}
        err = nx.grad_check(lambda: compute_losses(model, batch, 0.5)["loss"], params)
        assert err <= 1e-5

    def test_loss_non_increasing_small_steps(self):
        model = toy_model(seed=2)
        batch = model.batch(toy_instances(np.random.default_rng(2), 4, model.scheme.labels))
        losses = []
        for _ in range(11):
            loss = compute_losses(model, batch, 0.5)["loss"]
            losses.append(float(loss.data))
            for p in model.params.values():
                p.zero_grad()
            grads = nx.backward(loss, model.params)
            for k, p in model.params.items():
                p.data -= 1e-4 * grads[k]
        assert all(b <= a for a, b in zip(losses, losses[1:]))


@pytest.fixture(scope="module")
def small_data():
    cfg = SynthConfig(d_v=8, k=4)
    train_set, valid, test = generate_synthetic(120, 5, cfg)
    return train_set, valid, test, Manifest(cfg.label_names(), cfg.d_v, cfg.k)


FAST = dict(d=16, d_a=16, ff=16, layers=1, epochs=3, lr=3e-3, batch_size=16)


class TestTrain:
    def test_deterministic_checkpoints(self, small_data, tmp_path):
        tr, va, _, man = small_data
        for name in ("a", "b"):
            r = train(tr, va, man, TrainConfig(seed=4, **FAST), log_path=tmp_path / f"{name}.jsonl")
            save_checkpoint(tmp_path / name, r.model)
        for f in ("weights.bin", "manifest.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_metrics_log_fields(self, small_data, tmp_path):
        tr, va, _, man = small_data
        r = train(tr, va, man, TrainConfig(seed=0, **FAST), log_path=tmp_path / "m.jsonl")
        rows = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert [row["epoch"] for row in rows] == [0, 1, 2, 3]
        for row in rows:
            assert {"epoch", "loss_a", "loss_v", "kl", "loss", "attr_f1", "value_f1"} <= set(row)
        assert rows[-1]["loss"] < rows[0]["loss"]
        assert r.best_epoch == max(range(1, 4), key=lambda e: (rows[e]["value_f1"], -e))

    def test_without_multitask_trains_two_models(self, small_data):
        tr, va, _, man = small_data
        r = train(tr, va, man, TrainConfig(seed=0, ablation=AblationConfig(use_mtl=False), **FAST))
        assert isinstance(r.model, SeparateModels)
        assert {h["head"] for h in r.history} == {"attr", "value"}

    def test_divergence_reported(self, small_data):
        tr, va, _, man = small_data
        with pytest.raises(TrainingDiverged, match="epoch 1, batch 1"):
            train(tr, va, man, TrainConfig(seed=0, **{**FAST, "lr": float("nan")}))

    def test_frozen_text_encoder(self, small_data):
        tr, va, _, man = small_data
        cfg = TrainConfig(seed=0, freeze_text_encoder=True, **{**FAST, "epochs": 1})
        ref = train(tr, va, man, TrainConfig(seed=0, **{**FAST, "epochs": 1}))
        r = train(tr, va, man, cfg)
        init = MJAVE(r.model.config, r.model.vocab, seed=0).params
        for name, p in r.model.params.items():
            if name.startswith("enc."):
                assert p.data.tobytes() == init[name].data.tobytes()
        assert ref.model.params["enc.tok_emb"].data.tobytes() != init["enc.tok_emb"].data.tobytes()


class TestSampleFraction:
    def test_full_fraction_is_identity(self, small_data):
        tr = small_data[0]
        assert sample_fraction(tr, 1.0, 0) == list(tr)

    def test_seeded_and_stratified(self, small_data):
        tr = small_data[0]
        a = sample_fraction(tr, 0.2, 3)
        assert [i.id for i in a] == [i.id for i in sample_fraction(tr, 0.2, 3)]
        assert [i.id for i in a] != [i.id for i in sample_fraction(tr, 0.2, 4)]
        assert abs(len(a) - 0.2 * len(tr)) <= 8
        firsts = {sorted(i.attributes)[0] for i in tr}
        assert {sorted(i.attributes)[0] for i in a} == firsts
