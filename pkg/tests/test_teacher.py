import math

import numpy as np
import pytest

from dmtl.config import ModelConfig, TrainConfig
from dmtl.features import Batch
from dmtl.numerics import DenseNet, ShapeError, grad_check
from dmtl.teacher import TeacherModel, TeacherOutput, expert_mixture, teacher_loss_terms

from conftest import SMALL_MODEL, SMALL_SCHEMA, random_batch


def make_teacher(seed=0, cfg=SMALL_MODEL):
    return TeacherModel(SMALL_SCHEMA, cfg, np.random.default_rng(seed))


class TestMixture:
    def test_single_expert_is_passthrough(self):
        rng = np.random.default_rng(0)
        f = DenseNet([4, 3], rng, final_activation="relu")
        x = rng.normal(size=4)
        np.testing.assert_array_equal(expert_mixture(x, rng.normal(size=(1, 4)), [f]), f.predict(x))

    def test_zero_gate_weights_average_experts(self):
        rng = np.random.default_rng(1)
        experts = [DenseNet([4, 3], rng, final_activation="relu") for _ in range(2)]
        x = rng.normal(size=4)
        out = expert_mixture(x, np.zeros((2, 4)), experts)
        np.testing.assert_allclose(out, 0.5 * (experts[0].predict(x) + experts[1].predict(x)), atol=1e-15)

    def test_matches_explicit_sum(self):
        rng = np.random.default_rng(2)
        experts = [DenseNet([5, 4, 3], rng, final_activation="relu") for _ in range(3)]
        W = rng.normal(size=(3, 5))
        x = rng.normal(size=5)
        logits = [sum(W[k, j] * x[j] for j in range(5)) for k in range(3)]
        top = max(logits)
        ex = [math.exp(v - top) for v in logits]
        gates = [e / sum(ex) for e in ex]
        ref = sum(g * f.predict(x) for g, f in zip(gates, experts))
        np.testing.assert_allclose(expert_mixture(x, W, experts), ref, rtol=1e-13)

    def test_gate_shape_mismatch(self):
        rng = np.random.default_rng(3)
        experts = [DenseNet([4, 3], rng) for _ in range(2)]
        with pytest.raises(ShapeError):
            expert_mixture(np.ones(4), np.zeros((3, 4)), experts)


class TestForward:
    def test_probabilities_and_product(self):
        b = random_batch(SMALL_SCHEMA, 200, seed=1)
        out = make_teacher().predict(b)
        assert np.all((out.pctr > 0) & (out.pctr < 1) & (out.pcvr > 0) & (out.pcvr < 1))
        assert np.array_equal(out.pctcvr, out.pctr * out.pcvr)

    def test_gates_on_simplex(self):
        b = random_batch(SMALL_SCHEMA, 50, seed=2)
        for g in make_teacher().gate_outputs(b):
            np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(g >= 0)

    def test_deterministic_init(self):
        b = random_batch(SMALL_SCHEMA, 10, seed=3)
        np.testing.assert_array_equal(make_teacher(4).predict(b).pctcvr, make_teacher(4).predict(b).pctcvr)

    def test_batch_permutation_invariance(self):
        b = random_batch(SMALL_SCHEMA, 30, seed=5)
        perm = np.random.default_rng(0).permutation(30)
        model = make_teacher()
        np.testing.assert_array_equal(model.predict(b).pctcvr[perm], model.predict(b.subset(perm)).pctcvr)


class TestLoss:
    def one_sample(self, click=1, duration=60.0):
        return Batch([[0, 0, 0]], [[0, 0]], [[0.0, 0.0, 0.0]], [click], [duration])

    def test_hand_value(self):
        out = TeacherOutput(np.array([0.8]), np.array([0.5]), np.array([0.4]))
        total, l_d, l_c = teacher_loss_terms(out, self.one_sample(), TrainConfig())
        assert total == pytest.approx(-math.log(0.4) - math.log(0.8), abs=1e-12)
        assert total == pytest.approx(1.1394, abs=5e-5)

    def test_half_probabilities(self):
        out = TeacherOutput(np.array([0.5]), np.array([1.0]), np.array([0.5]))
        _, l_d, l_c = teacher_loss_terms(out, self.one_sample(click=0, duration=0.0), TrainConfig())
        assert l_d == pytest.approx(math.log(2)) and l_c == pytest.approx(math.log(2))

    def test_weights(self):
        out = TeacherOutput(np.array([0.8]), np.array([0.5]), np.array([0.4]))
        total, l_d, l_c = teacher_loss_terms(out, self.one_sample(), TrainConfig(w1=2.0, w2=0.5))
        assert total == pytest.approx(2 * l_d + 0.5 * l_c)

    def test_literal_click_label_uses_z(self):
        out = TeacherOutput(np.array([0.8]), np.array([0.5]), np.array([0.4]))
        short = self.one_sample(duration=10.0)
        _, _, l_c = teacher_loss_terms(out, short, TrainConfig())
        _, _, l_c_lit = teacher_loss_terms(out, short, TrainConfig(paper_literal_click_label=True))
        assert l_c == pytest.approx(-math.log(0.8))
        assert l_c_lit == pytest.approx(-math.log(0.2))

    def test_empty_batch_rejected(self):
        b = random_batch(SMALL_SCHEMA, 3).subset(np.array([], dtype=np.int64))
        with pytest.raises(ValueError):
            make_teacher().loss(b, TrainConfig())


class TestTraining:
    def test_gradients_match_finite_differences(self, batch16):
        model = make_teacher(7)
        cfg = TrainConfig()
        model.loss_and_grad(batch16, cfg)
        grads = [g.copy() for g in model.grads()]
        err = grad_check(lambda: model.loss(batch16, cfg)[0], model.params(), grads, eps=1e-5, per_entry=True)
        assert err < 1e-4

    def test_zero_weights_leave_parameters(self, batch16):
        model = make_teacher()
        before = [p.copy() for p in model.params()]
        cfg = TrainConfig(w1=0.0, w2=0.0)
        opt = model.make_optimizer(cfg)
        model.train_step(batch16, cfg, opt)
        for a, b in zip(before, model.params()):
            np.testing.assert_array_equal(a, b)

    def test_click_head_gets_gradient_without_click_loss(self, batch16):
        model = make_teacher()
        model.loss_and_grad(batch16, TrainConfig(w2=0.0))
        assert any(np.any(g) for _, _, g in model.head_c.named_params("h"))

    def test_duration_head_idle_without_duration_loss(self, batch16):
        model = make_teacher()
        model.loss_and_grad(batch16, TrainConfig(w1=0.0))
        assert not any(np.any(g) for _, _, g in model.head_d.named_params("h"))
        assert not np.any(model.gW_d)

    def test_single_sample_overfit(self):
        b = random_batch(SMALL_SCHEMA, 1, seed=4)
        model = make_teacher(1)
        cfg = TrainConfig(lr=1e-2)
        opt = model.make_optimizer(cfg)
        losses = [model.train_step(b, cfg, opt)[0] for _ in range(50)]
        losses.append(model.loss(b, cfg)[0])
        assert all(b_ < a for a, b_ in zip(losses, losses[1:]))

    def test_backward_needs_forward(self, batch16):
        with pytest.raises(RuntimeError):
            make_teacher().backward(batch16, TrainConfig())

    def test_more_experts_still_check(self, batch16):
        cfg_m = ModelConfig(embedding_dim=4, num_experts=3, expert_sizes=(5,), head_sizes=(), tower_sizes=(4,))
        model = make_teacher(2, cfg_m)
        cfg = TrainConfig()
        model.loss_and_grad(batch16, cfg)
        grads = [g.copy() for g in model.grads()]
        assert grad_check(lambda: model.loss(batch16, cfg)[0], model.params(), grads, per_entry=True) < 1e-4


def test_checkpoint_round_trip(tmp_path, batch16):
    model = make_teacher(3)
    digest = model.save(tmp_path / "t.bin")
    back = TeacherModel.load(tmp_path / "t.bin")
    for (n1, a, _), (n2, b, _) in zip(model.named_params(), back.named_params()):
        assert n1 == n2
        assert a.tobytes() == b.tobytes()
    assert back.save(tmp_path / "t2.bin") == digest
    np.testing.assert_array_equal(model.predict(batch16).pctcvr, back.predict(batch16).pctcvr)
