import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from resboost.boosting import (
    InvalidLabelError,
    LinearLearner,
    LogisticLoss,
    MaxNormBound,
    OnlineGradientBoosting,
    RegretLedger,
    ShrinkageState,
    SoftmaxCrossEntropy,
    TreeLearner,
    bound_output,
    combine_partial,
    learner_descent_signal,
    loss_and_gradient,
    make_loss,
    record_regret,
    shrinkage_backward,
    update_shrinkage,
)
from resboost.core_math import DimensionError, finite_diff_grad, grad_check, softmax
from resboost.tree import NeuralDecisionTree, TreeTopology


class TestLosses:
    def test_logistic_symmetric_point(self):
        value, grad = loss_and_gradient(LogisticLoss(), np.zeros(1), 1)
        assert value == pytest.approx(np.log(2), abs=1e-15)
        np.testing.assert_allclose(grad, [-0.5])

    def test_logistic_zero_one_labels(self, rng):
        F = rng.normal(size=(5, 1))
        loss = LogisticLoss()
        np.testing.assert_array_equal(loss.value(F, np.zeros(5, int)), loss.value(F, -np.ones(5, int)))

    def test_softmax_confident_limit(self):
        value, _ = loss_and_gradient(SoftmaxCrossEntropy(3), np.array([0.0, 800.0, 0.0]), 1)
        assert value < 1e-300

    def test_softmax_grad_is_residual(self, rng):
        F = rng.normal(size=(4, 3))
        y = np.array([0, 2, 1, 1])
        _, grad = SoftmaxCrossEntropy(3).value_and_grad(F, y)
        np.testing.assert_allclose(grad, softmax(F) - np.eye(3)[y], rtol=1e-14, atol=1e-16)

    @pytest.mark.parametrize("loss, n", [(LogisticLoss(), 1), (SoftmaxCrossEntropy(2), 2),
                                         (SoftmaxCrossEntropy(5), 5)])
    def test_gradients_match_finite_differences(self, rng, loss, n):
        for _ in range(100):
            F = rng.normal(scale=3, size=n)
            y = int(rng.integers(2 if n == 1 else n))
            _, grad = loss_and_gradient(loss, F, y)
            numeric = finite_diff_grad(lambda f: loss_and_gradient(loss, f, y)[0], F, h=1e-3, order=4)
            assert grad_check(grad, numeric, tol=1e-6).passed

    def test_inverse_link_on_simplex(self, rng):
        p = SoftmaxCrossEntropy(4).inverse_link(rng.normal(scale=50, size=(100, 4)))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("loss, y", [(LogisticLoss(), 2), (SoftmaxCrossEntropy(3), 3),
                                         (SoftmaxCrossEntropy(3), -1), (SoftmaxCrossEntropy(3), 0.5)])
    def test_invalid_labels(self, loss, y):
        with pytest.raises(InvalidLabelError):
            loss_and_gradient(loss, np.zeros(loss.n_scores), y)

    def test_make_loss(self):
        assert make_loss("softmax", 4).n_scores == 4
        with pytest.raises(ValueError):
            make_loss("logistic", 3)
        with pytest.raises(ValueError):
            make_loss("hinge", 2)


class TestDescentSignal:
    def test_first_learner_raw_residual(self):
        signal = learner_descent_signal(SoftmaxCrossEntropy(4), np.zeros(4), 2)
        np.testing.assert_allclose(signal, np.full(4, 0.25) - np.eye(4)[2])

    def test_fitted_partial_sum_silences_learner(self):
        signal = learner_descent_signal(SoftmaxCrossEntropy(3), np.array([60.0, 0.0, 0.0]), 0)
        assert np.max(np.abs(signal)) < 1e-25

    def test_second_learner_signal_is_injection_gradient(self, rng):
        loss = LogisticLoss()
        eta = 0.7
        for _ in range(20):
            x = rng.normal()
            y = int(rng.choice([-1, 1]))
            a1 = np.array([np.tanh(x)])
            F1 = combine_partial(np.zeros(1), a1, 0.0, eta)

            def ensemble_loss(a2):
                return loss_and_gradient(loss, combine_partial(F1, a2, 0.0, eta), y)[0]

            numeric = finite_diff_grad(ensemble_loss, np.zeros(1), h=1e-3, order=4)
            signal = learner_descent_signal(loss, F1, y)
            np.testing.assert_allclose(eta * signal, numeric, rtol=1e-5)


class TestCombinePartial:
    def test_vanilla_sum(self):
        np.testing.assert_array_equal(combine_partial([1.0, 2.0], [3.0, 4.0], 0.0, 1.0), [4.0, 6.0])

    def test_shrunk(self):
        np.testing.assert_array_equal(combine_partial([2.0], [3.0], 0.5, 0.5), [2.5])

    def test_base_case(self):
        np.testing.assert_array_equal(combine_partial([0.0, 0.0], [3.0, -1.0], 0.2, 0.5), [1.5, -0.5])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            combine_partial(np.zeros(2), np.zeros(3), 0.0, 1.0)

    def test_reduction_bit_identical(self, rng):
        outs = [rng.normal(size=3) for _ in range(15)]
        F = np.zeros(3)
        plain = np.zeros(3)
        for out in outs:
            F = combine_partial(F, out, 0.0, 1.0)
            plain = plain + out
        np.testing.assert_array_equal(F, plain)


class TestMaxNorm:
    def test_inside_unchanged(self):
        np.testing.assert_array_equal(bound_output([1.0, 1.0], MaxNormBound(5.0)), [1.0, 1.0])

    def test_rescale(self):
        np.testing.assert_allclose(bound_output([3.0, 4.0], MaxNormBound(1.0)), [0.6, 0.8], rtol=1e-15)

    def test_zero(self):
        np.testing.assert_array_equal(bound_output(np.zeros((2, 3)), MaxNormBound(1.0)), np.zeros((2, 3)))

    def test_positive_bound(self):
        with pytest.raises(ValueError):
            MaxNormBound(0.0)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-1e6, 1e6)), st.floats(1e-3, 1e3))
    def test_norm_never_exceeds_bound(self, V, D):
        out = bound_output(V, MaxNormBound(D))
        assert np.all(np.linalg.norm(out, axis=1) <= D * (1 + 1e-12))

    def test_backward_matches_finite_differences(self, rng):
        bound = MaxNormBound(1.5)
        for _ in range(100):
            V = rng.normal(scale=1.2, size=(3, 4))
            R = rng.normal(size=(3, 4))
            analytic = bound.backward(V, R)
            numeric = finite_diff_grad(lambda v: float(np.sum(R * bound.apply(v))), V, h=1e-6)
            # rows sitting within a step of the kink are not differentiable there
            norms = np.linalg.norm(V, axis=1)
            ok = np.abs(norms - 1.5) > 1e-4
            assert grad_check(analytic[ok], numeric[ok]).passed


class TestShrinkage:
    def test_eta_range(self):
        with pytest.raises(ValueError):
            ShrinkageState.zeros(4, eta=0.2)
        with pytest.raises(ValueError):
            ShrinkageState.zeros(4, eta=1.5)
        ShrinkageState.zeros(4, eta=0.25)

    def test_clip_low(self):
        s = update_shrinkage(ShrinkageState.zeros(3, 0.5, lr=1.0), 1, 10.0)
        assert s.theta[1] == 0.0

    def test_clip_high(self):
        s = update_shrinkage(ShrinkageState.zeros(3, 0.5, lr=1.0), 1, -10.0)
        assert s.theta[1] == 0.5

    def test_interior_step(self):
        s = update_shrinkage(ShrinkageState(np.array([0.2, 0.2]), 0.5, lr=0.1), 0, 1.0)
        assert s.theta[0] == pytest.approx(0.1)
        assert s.theta[1] == 0.2

    def test_bad_index(self):
        with pytest.raises(IndexError):
            update_shrinkage(ShrinkageState.zeros(3), 3, 0.0)

    def test_adversarial_steps_stay_in_interval(self, rng):
        state = ShrinkageState.zeros(7, eta=0.6, lr=0.3)
        for _ in range(10_000):
            i = int(rng.integers(7))
            update_shrinkage(state, i, float(rng.standard_cauchy()) * 10)
            assert np.all((state.theta >= 0.0) & (state.theta <= 0.6))

    def _chain(self, theta, contribs, eta):
        F = [np.zeros_like(contribs[0])]
        for t, c in zip(theta, contribs):
            F.append(combine_partial(F[-1], c, t, eta))
        return F

    @pytest.mark.parametrize("trial", range(100))
    def test_theta_gradient_end_to_end(self, trial):
        rng = np.random.default_rng(trial)
        n, eta = int(rng.integers(1, 6)), 0.8
        loss = SoftmaxCrossEntropy(3)
        contribs = [rng.normal(size=(2, 3)) for _ in range(n)]
        y = rng.integers(3, size=2)
        theta = rng.uniform(0, eta, n)
        heads = bool(rng.integers(2))

        def objective(th):
            F = self._chain(th, contribs, eta)
            terms = F[1:] if heads else F[-1:]
            return float(sum(loss.value(f, y).sum() for f in terms))

        F = self._chain(theta, contribs, eta)
        if heads:
            d_heads = [loss.value_and_grad(f, y)[1] for f in F[1:]]
            _, g = shrinkage_backward(theta, F, d_heads=d_heads)
        else:
            _, g = shrinkage_backward(theta, F, d_final=loss.value_and_grad(F[-1], y)[1])
        numeric = finite_diff_grad(objective, theta, h=1e-3, order=4)
        # theta_1 multiplies F^0 = 0, so its gradient is exactly zero
        assert g[0] == 0.0
        assert grad_check(g[1:], numeric[1:]).passed


class TestRegretLedger:
    def test_empty(self):
        ledger = RegretLedger(3)
        assert (ledger.steps, ledger.ensemble_loss, ledger.zero_loss) == (0, 0.0, 0.0)
        np.testing.assert_array_equal(ledger.learner_loss, np.zeros(3))

    def test_self_comparator(self, rng):
        ledger = RegretLedger(2)
        record_regret(ledger, rng.uniform(size=4), rng.uniform(size=(4, 2)), rng.uniform(size=4))
        assert ledger.regret(ledger.ensemble_loss) == 0.0

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            RegretLedger(1).record([np.inf], [[0.0]], [0.0])

    def test_matches_replay_exactly(self, rng):
        X = rng.normal(size=(100, 2))
        y = (X[:, 0] + 0.3 * X[:, 1] > 0).astype(int)
        loss = SoftmaxCrossEntropy(2)
        learners = [LinearLearner(2, 2, lr=0.1, rng=rng, scale=0.1) for _ in range(3)]
        engine = OnlineGradientBoosting(learners, loss, eta=0.5, theta_lr=0.05)
        ens = zero = 0.0
        per = [0.0, 0.0, 0.0]
        history = []
        for t in range(100):
            x, label = X[t:t + 1], y[t:t + 1]
            F, outs, _ = engine.partial_sums(x)
            ens += float(loss.value(F[-1], label)[0])
            zero += float(loss.value(np.zeros_like(F[-1]), label)[0])
            for i, o in enumerate(outs):
                per[i] += float(loss.value(engine.eta * o, label)[0])
            engine.step(x, label)
            history.append(engine.ledger.ensemble_loss)
        led = engine.ledger
        assert led.steps == 100
        assert led.ensemble_loss == ens
        assert led.zero_loss == zero
        np.testing.assert_array_equal(led.learner_loss, per)
        assert all(b >= a for a, b in zip(history, history[1:]))
        i, best = led.best_learner()
        assert best == min(per) and per[i] == best


class TestOnlineEngine:
    def test_learns_and_respects_interval(self, rng):
        X = rng.normal(size=(400, 2))
        y = (X[:, 0] * X[:, 1] > 0).astype(int)
        topo = TreeTopology.complete(2)
        learners = [TreeLearner(NeuralDecisionTree.init(topo, 2, 2, rng), lr=0.5) for _ in range(4)]
        engine = OnlineGradientBoosting(learners, SoftmaxCrossEntropy(2), eta=0.5, theta_lr=0.05)
        losses = []
        for epoch in range(15):
            order = rng.permutation(400)
            batch_losses = [engine.step(X[order[s:s + 16]], y[order[s:s + 16]]) for s in range(0, 400, 16)]
            losses.append(np.mean(batch_losses))
            assert np.all((engine.shrinkage.theta >= 0) & (engine.shrinkage.theta <= 0.5))
        assert losses[-1] < losses[0] - 0.1
        assert np.mean(np.argmax(engine.predict(X), axis=1) == y) > 0.8

    def test_needs_learners(self):
        with pytest.raises(ValueError):
            OnlineGradientBoosting([], LogisticLoss())
