import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anomaly_ident import crf
from anomaly_ident.crf import CrfFeatureIndex, CrfModel
from anomaly_ident.episode import AnomalyClass
from anomaly_ident.features import CHANNEL_CARDINALITY

from oracles import crf_brute_force, crf_score, finite_difference, random_codes, relative_error


def _random_model(rng, n_seqs=3, length=5, scale=1.0):
    codes = [random_codes(rng, length) for _ in range(n_seqs)]
    index = CrfFeatureIndex.build(codes)
    return CrfModel(index, rng.normal(scale=scale, size=len(index))), codes


def test_index_layout(rng):
    model, _ = _random_model(rng)
    keys = model.index.to_list()
    trans = [k for k in keys if k.startswith("TRANS|") and not k.startswith("TRANS|START")]
    start = [k for k in keys if k.startswith("TRANS|START")]
    emit = [k for k in keys if k.startswith("EMIT|")]
    assert len(trans) == 16 and len(start) == 4
    assert len(emit) <= 4 * sum(CHANNEL_CARDINALITY) and len(emit) % 4 == 0
    assert CrfFeatureIndex.from_list(keys) == model.index


def test_index_is_independent_of_data_order(rng):
    codes = [random_codes(rng, 4) for _ in range(4)]
    assert CrfFeatureIndex.build(codes) == CrfFeatureIndex.build(codes[::-1])


def test_unseen_codes_are_absent():
    codes = [np.zeros((2, 7), dtype=np.int64)]
    index = CrfFeatureIndex.build(codes)
    model = CrfModel(index, np.ones(len(index)))
    x_seen, x_unseen = [0] * 7, [3, 3, 3, 3, 2, 2, 32]
    assert crf.score_position(model, None, 0, x_seen) == 1.0 + 7.0
    assert crf.score_position(model, None, 0, x_unseen) == 1.0


def test_zero_model_scores_zero(rng):
    model, codes = _random_model(rng)
    zero = CrfModel(model.index, np.zeros(len(model.index)))
    for prev in (None, 0, 1, 2, 3):
        for y in range(4):
            assert crf.score_position(zero, prev, y, codes[0][0]) == 0.0


def test_single_transition_weight_isolated(rng):
    model, codes = _random_model(rng)
    w = np.zeros(len(model.index))
    w[model.index.position[("TRANS", "SAFE", "LOC")]] = 2.0
    m = CrfModel(model.index, w)
    assert crf.score_position(m, AnomalyClass.SAFE, AnomalyClass.LOC, codes[0][1]) == 2.0
    assert crf.score_position(m, AnomalyClass.SAFE, AnomalyClass.DIS, codes[0][1]) == 0.0


def test_score_position_matches_feature_scan(rng):
    model, codes = _random_model(rng)
    keys = model.index.to_list()
    names = [c.name for c in AnomalyClass]
    from anomaly_ident.features import CHANNEL_NAMES

    for _ in range(20):
        x = codes[rng.integers(3)][rng.integers(5)]
        prev = None if rng.random() < 0.3 else int(rng.integers(4))
        y = int(rng.integers(4))
        total = 0.0
        for k, key in enumerate(keys):
            parts = key.split("|")
            if parts[0] == "TRANS":
                active = parts[1] == ("START" if prev is None else names[prev]) and parts[2] == names[y]
            else:
                ch = CHANNEL_NAMES.index(parts[2])
                active = parts[1] == names[y] and int(parts[3]) == x[ch]
            if active:
                total += model.weights[k]
        assert crf.score_position(model, prev, y, x) == pytest.approx(total, abs=1e-12)


@given(st.integers(1, 5), st.integers(0, 2**32))
def test_log_partition_and_decode_match_enumeration(n, seed):
    rng = np.random.default_rng(seed)
    model, _ = _random_model(rng, length=n)
    codes = random_codes(rng, n)
    log_z, best, scores = crf_brute_force(model, codes)
    assert relative_error(crf.log_partition(model, codes), log_z) < 1e-9
    assert crf.decode(model, codes).tolist() == best
    assert math.fsum(np.exp(scores - crf.log_partition(model, codes))) == pytest.approx(1.0, abs=1e-9)


def test_zero_weights_log_partition_and_decode(rng):
    model, _ = _random_model(rng)
    zero = CrfModel(model.index, np.zeros(len(model.index)))
    for n in (1, 3, 6):
        codes = random_codes(rng, n)
        assert crf.log_partition(zero, codes) == pytest.approx(n * math.log(4), rel=1e-12)
        assert crf.decode(zero, codes).tolist() == [0] * n


def test_position_shift_moves_log_z_by_constant(rng):
    model, _ = _random_model(rng, length=4)
    codes = random_codes(rng, 4)
    start, trans, emit = crf.potentials(model.index, model.weights, model.index.compile(codes))
    c, i = 0.7, 2
    emit2 = emit.copy()
    emit2[i] += c
    _, best, scores = crf_brute_force(model, codes)
    assert crf._log_partition(start, trans, emit2) == pytest.approx(crf._log_partition(start, trans, emit) + c, rel=1e-12)
    # same oracle: shifting every sequence score by c changes the enumerated log Z by c and keeps the argmax
    m = (scores + c).max()
    assert m + math.log(np.exp(scores + c - m).sum()) == pytest.approx(crf.log_partition(model, codes) + c, rel=1e-12)
    assert crf._viterbi(start, trans, emit2).tolist() == best


def test_empty_sequence_rejected(rng):
    model, _ = _random_model(rng)
    with pytest.raises(ValueError):
        crf.log_partition(model, np.zeros((0, 7), dtype=np.int64))
    with pytest.raises(ValueError):
        crf.decode(model, np.zeros((0, 7), dtype=np.int64))


def test_uniform_single_step_nll_and_gradient(rng):
    model, codes = _random_model(rng)
    zero = CrfModel(model.index, np.zeros(len(model.index)))
    x = codes[0][:1]
    nll, grad = crf.nll_and_gradient(zero, [(x, [AnomalyClass.LOC])])
    assert nll == pytest.approx(math.log(4), rel=1e-12)
    from anomaly_ident.features import CHANNEL_NAMES

    for ch, code in enumerate(x[0]):
        k = zero.index.position[("EMIT", "LOC", CHANNEL_NAMES[ch], int(code))]
        assert grad[k] == pytest.approx(0.25 - 1.0, abs=1e-12)
        k = zero.index.position[("EMIT", "DIS", CHANNEL_NAMES[ch], int(code))]
        assert grad[k] == pytest.approx(0.25, abs=1e-12)


def test_gradient_matches_finite_differences(rng):
    model, codes = _random_model(rng, length=4, scale=0.5)
    labels = [rng.integers(0, 4, 4) for _ in codes]
    batch = list(zip(codes, labels))
    w = model.weights.copy()

    def f():
        return crf.nll_and_gradient(CrfModel(model.index, w), batch, 0.1)[0]

    _, grad = crf.nll_and_gradient(model, batch, 0.1)
    worst = 0.0
    for idx in rng.choice(len(w), 30, replace=False):
        worst = max(worst, relative_error(finite_difference(f, w, idx), grad[idx]))
    assert worst < 1e-6


def test_duplicate_episode_doubles_objective(rng):
    model, codes = _random_model(rng)
    ep = (codes[0], rng.integers(0, 4, 5))
    nll1, g1 = crf.nll_and_gradient(model, [ep])
    nll2, g2 = crf.nll_and_gradient(model, [ep, ep])
    assert nll1 >= 0
    assert nll2 == pytest.approx(2 * nll1, rel=1e-12)
    assert np.allclose(g2, 2 * g1, rtol=1e-12, atol=1e-12)


def test_feature_counts_match_definition(rng):
    model, codes = _random_model(rng)
    labels = rng.integers(0, 4, 5)
    counts = crf.feature_counts(model.index, model.index.compile(codes[0]), labels)
    # the score is linear in the counts
    assert counts @ model.weights == pytest.approx(crf_score(model, codes[0], labels), rel=1e-12)
    assert counts.sum() == 5 + 5 * 7


def _toy_episodes():
    from conftest import make_episode, make_obs
    from anomaly_ident.episode import Episode, ExistenceBelief, labels_for

    eps = []
    for k, (case, existence) in enumerate([(AnomalyClass.LOC, ExistenceBelief.Yes), (AnomalyClass.DIS, ExistenceBelief.No)] * 2):
        obs = [make_obs(t, existence=ExistenceBelief.Unknown) for t in range(2)] + [make_obs(t, existence=existence) for t in range(2, 4)]
        eps.append(Episode(f"t{k}", (), tuple(zip(obs, labels_for(4, case, 2))), case, 2, 3))
    return eps


def test_lbfgs_toy_training_decreases_nll():
    from anomaly_ident.features import fit_stats

    eps = _toy_episodes()[:2]
    stats = fit_stats(eps)
    model = crf.train_lbfgs(eps, stats, crf.LbfgsConfig(max_iters=50, grad_tol=1e-8))
    hist = model.info["objective_history"]
    assert all(b < a for a, b in zip(hist, hist[1:]))
    assert hist[-1] < hist[0]


def test_arow_separable_toy_reaches_full_accuracy():
    from anomaly_ident.features import fit_stats

    eps = _toy_episodes()
    stats = fit_stats(eps)
    model = crf.train_arow(eps, stats, crf.ArowConfig(epochs=5, shuffle_seed=3))
    assert model.info["epoch_sequence_accuracy"][-1] == 1.0
    for ep in eps:
        assert model.label_sequence(ep.observations) == ep.labels


def test_arow_update_properties(rng):
    w = rng.normal(size=10)
    var = rng.uniform(0.1, 1.0, size=10)
    delta = np.zeros(10)
    delta[[1, 4]] = [1.0, -1.0]
    # margin already >= 1: no change
    w_sat = w.copy()
    w_sat[1], w_sat[4] = 2.0, -2.0
    w2, v2 = crf.arow_update(w_sat, var, delta, 1.0)
    assert np.array_equal(w2, w_sat) and np.array_equal(v2, var)
    w3, v3 = crf.arow_update(w, var, delta, 1.0)
    assert np.all(v3 <= var) and np.all(v3 > 0)
    assert w3 @ delta > w @ delta


def test_arow_variances_never_increase(small_dataset, small_stats):
    model = crf.train_arow(small_dataset, small_stats, crf.ArowConfig(epochs=3))
    assert np.all(model.info["variance"] <= 1.0)
    with pytest.raises(ValueError):
        crf.train_arow(small_dataset, small_stats, crf.ArowConfig(r=0.0))


def test_arow_deterministic(small_dataset, small_stats):
    a = crf.train_arow(small_dataset, small_stats, crf.ArowConfig(epochs=2, shuffle_seed=5))
    b = crf.train_arow(small_dataset, small_stats, crf.ArowConfig(epochs=2, shuffle_seed=5))
    assert np.array_equal(a.weights, b.weights)


def test_model_rejects_bad_weights(rng):
    model, _ = _random_model(rng)
    with pytest.raises(ValueError):
        CrfModel(model.index, np.zeros(3))
    w = model.weights.copy()
    w[0] = np.nan
    with pytest.raises(ValueError):
        CrfModel(model.index, w)
