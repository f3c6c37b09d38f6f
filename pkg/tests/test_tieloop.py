import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from tie.data import synth_blobs, triangle_spec
from tie.models import ClassifierNet, init_weights
from tie.oodscores import ue_score
from tie.tieloop import (
    GarbageBuffer, Level, TieConfig, TrainingAborted, compute_class_weights, compute_threshold, decide,
    epoch_batches, exclude_uncertain, infer, init_garbage, make_rngs, run_tie, train_classifier_epoch,
)


@pytest.fixture(scope="module")
def blobs():
    id_set, _ = synth_blobs(triangle_spec(samples_per_class=60, ood_count=10), seed=0)
    return id_set.samples, id_set.labels


def small_config(**kw) -> TieConfig:
    base = dict(n=3, epochs=2, lr_clf=3e-3, batch_size=32, clf_hidden=(16, 8), gen_hidden=(16,), latent_dim=4,
                per_class_inversions=10, inversion_steps=3, inversion_batch=16, seed=0)
    return TieConfig(**(base | kw))


class TestGarbage:
    def test_range_and_determinism(self):
        a = init_garbage(50, 7, np.random.default_rng(1))
        b = init_garbage(50, 7, np.random.default_rng(1))
        assert np.array_equal(a.samples, b.samples)
        assert a.samples.min() >= 0 and a.samples.max() <= 1
        assert a.origins() == ["noise"] * 50

    def test_mean_near_half(self):
        g = init_garbage(1000, 100, np.random.default_rng(2))
        assert abs(g.samples.mean() - 0.5) < 0.02

    def test_count_must_be_positive(self):
        with pytest.raises(ValueError):
            init_garbage(0, 3, np.random.default_rng(0))

    def test_append_and_origins(self):
        g = GarbageBuffer(np.zeros((2, 3)))
        g.add(np.ones((3, 3)), epoch=4)
        assert len(g) == 5 and g.excluded_count == 3
        assert g.origins() == ["noise"] * 2 + ["excluded@4"] * 3

    def test_capacity_evicts_oldest_excluded_only(self):
        g = GarbageBuffer(np.zeros((3, 1)), capacity=6)
        g.add(np.full((2, 1), 1.0), epoch=1)
        g.add(np.full((3, 1), 2.0), epoch=2)
        assert len(g) == 6
        assert g.samples.ravel().tolist() == [0, 0, 0, 2, 2, 2]
        g.add(np.full((10, 1), 3.0), epoch=3)
        assert len(g) == 6 and g.samples[:3].ravel().tolist() == [0, 0, 0]
        assert g.origins()[3:] == ["excluded@3"] * 3


class TestClassWeights:
    def test_equal_counts(self):
        np.testing.assert_allclose(compute_class_weights([10, 10], 10), [1, 1, 1])

    def test_inverse_frequency(self):
        np.testing.assert_allclose(compute_class_weights([100, 100], 200), [4 / 3, 4 / 3, 2 / 3], rtol=1e-12)

    @given(st.lists(st.integers(1, 10_000), min_size=1, max_size=10), st.integers(1, 10_000))
    def test_positive_and_balanced_mean(self, counts, g):
        w = compute_class_weights(counts, g)
        assert np.all(w > 0) and np.all(np.isfinite(w))
        # weighted counts are equal across classes
        np.testing.assert_allclose(w * np.append(counts, g), np.sum(counts + [g]) / (len(counts) + 1))

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            compute_class_weights([0, 5], 5)


class TestClassifierEpoch:
    def test_loss_decreases_on_separable_blobs(self, blobs):
        X, y = blobs
        clf = ClassifierNet(2, 3, hidden=(16, 8))
        init_weights(clf, 0)
        rng = np.random.default_rng(0)
        w = compute_class_weights(np.bincount(y), 1)
        losses = [train_classifier_epoch(clf, X, y, w[:3].tolist() + [1.0], 1e-2, 16, rng) for _ in range(5)]
        assert losses[-1] < losses[0]

    def test_zero_lr_keeps_parameters(self, blobs):
        X, y = blobs
        clf = ClassifierNet(2, 3, hidden=(4,))
        init_weights(clf, 0)
        before = [p.data.copy() for p in clf.parameters()]
        train_classifier_epoch(clf, X, y, [1.0] * 4, 0.0, 32, np.random.default_rng(0))
        assert all(np.array_equal(a, p.data) for a, p in zip(before, clf.parameters()))

    def test_epoch_is_a_permutation(self):
        seen = np.concatenate(list(epoch_batches(103, 10, np.random.default_rng(0))))
        assert np.array_equal(np.sort(seen), np.arange(103))

    def test_non_finite_loss_aborts(self, blobs):
        X, y = blobs
        clf = ClassifierNet(2, 3, hidden=(4,))
        init_weights(clf, 0)
        X = X.copy()
        X[0, 0] = np.nan
        with pytest.raises(TrainingAborted):
            train_classifier_epoch(clf, X, y, [1.0] * 4, 1e-3, len(X), np.random.default_rng(0))


class FixedProbs:
    """Stand-in classifier whose softmax output is a given table."""


def _clf_with_probs(monkeypatch, probs):
    import tie.tieloop as tl

    monkeypatch.setattr(tl, "predict_proba", lambda clf, x: np.asarray(probs)[: len(x)])
    return FixedProbs()


class TestThreshold:
    def test_population_std(self, monkeypatch):
        clf = _clf_with_probs(monkeypatch, [[1.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3]])
        mu, sigma, tau = compute_threshold(clf, np.zeros((2, 1)), 0.5)
        assert (mu, sigma) == pytest.approx((0.5, 0.5), abs=1e-12)
        assert tau == pytest.approx(0.75, abs=1e-12)

    def test_constant_ue(self, monkeypatch):
        clf = _clf_with_probs(monkeypatch, [[0.6, 0.3, 0.1]] * 4)
        mu, sigma, tau = compute_threshold(clf, np.zeros((4, 1)), 0.5)
        assert sigma == pytest.approx(0.0, abs=1e-12) and tau == pytest.approx(mu, abs=1e-12)

    def test_lambda_zero(self, blobs):
        clf = ClassifierNet(2, 3, hidden=(4,))
        init_weights(clf, 0)
        mu, _, tau = compute_threshold(clf, blobs[0], 0.0)
        assert tau == mu

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compute_threshold(ClassifierNet(2, 3, hidden=(2,)), np.zeros((0, 2)), 0.5)


class TestExclusion:
    def test_partition_and_buffer(self, monkeypatch):
        probs = [[0.98, 0.01, 0.01], [0.4, 0.3, 0.3], [0.01, 0.98, 0.01], [0.34, 0.33, 0.33]]
        clf = _clf_with_probs(monkeypatch, probs)
        buf = GarbageBuffer(np.zeros((1, 2)))
        x = np.arange(8, dtype=float).reshape(4, 2) / 10
        ex = exclude_uncertain(clf, x, np.array([0, 0, 1, 1]), tau=0.5, buffer=buf, epoch=3)
        assert ex.mask.tolist() == [False, True, False, True]
        assert np.array_equal(ex.kept, x[[0, 2]]) and np.array_equal(ex.excluded, x[[1, 3]])
        assert ex.kept_targets.tolist() == [0, 1]
        assert buf.origins() == ["noise", "excluded@3", "excluded@3"]


class TestDecide:
    def test_uniform_is_level_two(self):
        v = decide([[0.25] * 4], tau_T=0.5)
        assert v.levels[0] == Level.OOD_L2_THRESHOLD

    def test_garbage_argmax_is_level_one(self):
        assert decide([[0.1, 0.2, 0.7]], 0.0).levels[0] == Level.OOD_L1_GARBAGE

    def test_confident_is_id(self):
        v = decide([[0.9, 0.05, 0.05]], 0.5)
        assert v.levels[0] == Level.ID and v[0].predicted_class == 0

    def test_uncertain_id_prediction_is_level_two(self):
        v = decide([[0.5, 0.4, 0.1]], 0.1)
        assert v.levels[0] == Level.OOD_L2_THRESHOLD

    @given(arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(2, 6)), elements=st.floats(0.001, 1)),
           st.floats(0, 1))
    def test_rules_exhaustive(self, raw, tau):
        p = raw / raw.sum(axis=1, keepdims=True)
        v = decide(p, tau)
        garbage = p.shape[1] - 1
        for row, level, ue in zip(p, v.levels, v.ue):
            assert ue == pytest.approx(oracles.ue(row), abs=1e-9)
            if row.argmax() == garbage:
                assert level == Level.OOD_L1_GARBAGE
            elif ue > tau:
                assert level == Level.OOD_L2_THRESHOLD
            else:
                assert level == Level.ID

    def test_infer_single_vector(self):
        clf = ClassifierNet(2, 3, hidden=(4,))
        init_weights(clf, 0)
        assert len(infer(clf, [0.5, 0.5], 0.5)) == 1


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(epochs=0), dict(lam=-1), dict(lr_clf=0), dict(sign_mode=0),
                                     dict(mode="other"), dict(n=0)])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            small_config(**bad)

    def test_gamma_schedule(self):
        cfg = small_config(epochs=10)
        assert cfg.gamma_at(1) == 10.0 and cfg.gamma_at(10) == 100.0
        assert cfg.gamma_at(5) == pytest.approx(50.0)
        assert small_config(epochs=1).gamma_at(1) == 10.0

    def test_named_streams_independent(self):
        r = make_rngs(0)
        draws = {k: g.integers(2**62) for k, g in r.items()}
        assert len(set(draws.values())) == len(draws)


class TestRun:
    def test_deterministic(self, blobs):
        a = run_tie(small_config(), *blobs)
        b = run_tie(small_config(), *blobs)
        assert [vars(s) for s in a.history] == [vars(s) for s in b.history]
        assert all(np.array_equal(p.data, q.data) for p, q in zip(a.classifier.parameters(),
                                                                   b.classifier.parameters()))

    def test_baseline_never_excludes(self, blobs):
        run = run_tie(small_config(mode="no_tie_baseline", epochs=3), *blobs)
        assert all(s.excluded_count == 0 for s in run.history)
        assert len({s.garbage_size for s in run.history}) == 1
        assert run.metric_rows == []

    def test_modes_share_first_epoch_loss(self, blobs):
        tie = run_tie(small_config(), *blobs)
        base = run_tie(small_config(mode="no_tie_baseline"), *blobs)
        assert tie.history[0].train_loss == base.history[0].train_loss

    def test_garbage_non_decreasing_and_exclusions_tracked(self, blobs):
        run = run_tie(small_config(epochs=4), *blobs)
        sizes = [s.garbage_size for s in run.history]
        assert sizes == sorted(sizes)
        assert sizes[-1] - sizes[0] == sum(s.excluded_count for s in run.history[1:])

    def test_single_epoch(self, blobs):
        run = run_tie(small_config(epochs=1), *blobs)
        assert len(run.history) == 1
        s = run.history[0]
        assert s.tau >= s.mu and np.isfinite(s.inv_kl)
        assert run.tau == s.tau

    def test_callback_sees_every_epoch(self, blobs):
        seen = []
        run_tie(small_config(epochs=3), *blobs, on_epoch=lambda e: seen.append((e.state.epoch, len(e.inverted))))
        assert seen == [(1, 40), (2, 40), (3, 40)]

    def test_bad_labels(self, blobs):
        with pytest.raises(ValueError):
            run_tie(small_config(), blobs[0], blobs[1] + 5)

    def test_abort_carries_partial_run(self, blobs, monkeypatch):
        import tie.tieloop as tl

        calls = {"n": 0}
        real = tl.train_classifier_epoch

        def flaky(*a, **kw):
            calls["n"] += 1
            if calls["n"] == 2:
                raise FloatingPointError("boom")
            return real(*a, **kw)

        monkeypatch.setattr(tl, "train_classifier_epoch", flaky)
        with pytest.raises(TrainingAborted) as info:
            run_tie(small_config(epochs=3), *blobs)
        assert len(info.value.partial.history) == 1


def test_ue_matches_oracle_in_threshold_path(blobs):
    clf = ClassifierNet(2, 3, hidden=(4,))
    init_weights(clf, 0)
    from tie.models import predict_proba

    p = predict_proba(clf, blobs[0][:20])
    np.testing.assert_allclose(ue_score(p), [oracles.ue(r) for r in p], atol=1e-12)
