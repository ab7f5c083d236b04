from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lifelong_hanabi.engine import GameConfig
from lifelong_hanabi.errors import UsageError
from lifelong_hanabi.evaluation import (
    CrossPlay,
    FewShotConfig,
    MatchResult,
    average_score,
    cross_play_matrix,
    few_shot_eval,
    fine_tune,
    forgetting,
    future_score,
    gis,
    intra_inter_cp,
    match_schedule,
    normalize_score,
    play_match,
    random_policy_baseline,
    zero_shot_eval,
)
from lifelong_hanabi.learner import OptimizerState

from factories import make_agent
from oracles import brute_average, brute_forgetting, brute_future, brute_gis


def random_matrix(rng, T):
    return rng.random((T + 1, T))


# -- metrics ---------------------------------------------------------------------


def test_forgetting_hand_anchor():
    a = np.array([[0.5, 0.1], [0.8, 0.2], [0.6, 0.7]])
    f, F = forgetting(a, 2)
    assert f[0] == pytest.approx(0.2) and F == pytest.approx(0.2)


def test_gis_hand_anchor():
    assert gis([0.6, 0.8], [0.2, 0.4]) == pytest.approx(0.4)


def test_average_and_future_anchor():
    a = np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9], [0.3, 0.2, 0.1]])
    assert average_score(a, 3) == pytest.approx(0.2)
    assert average_score(a, 1) == pytest.approx(0.4)
    assert future_score(a, 1, 3) == pytest.approx(0.55)
    assert future_score(a, 0, 3) == pytest.approx(0.2)
    # forgetting over tasks 1 and 2 at t=3: best of rows 1..2 minus row 3
    f, F = forgetting(a, 3)
    assert np.allclose(f, [0.4, 0.6]) and F == pytest.approx(0.5)


@settings(max_examples=200)
@given(T=st.integers(2, 10), seed=st.integers(0, 2**31))
def test_metrics_match_brute_force(T, seed):
    rng = np.random.default_rng(seed)
    a = random_matrix(rng, T)
    for t in range(1, T + 1):
        assert abs(average_score(a, t) - brute_average(a, t)) <= 1e-12
        if t >= 2:
            f, F = forgetting(a, t)
            bf, bF = brute_forgetting(a, t)
            assert np.max(np.abs(f - bf)) <= 1e-12 and abs(F - bF) <= 1e-12
        if t < T:
            assert abs(future_score(a, t, T) - brute_future(a, t, T)) <= 1e-12
    k = int(rng.integers(1, 8))
    fin, base = rng.random(k), rng.random(k)
    assert abs(gis(fin, base) - brute_gis(fin, base)) <= 1e-12


@settings(max_examples=100)
@given(T=st.integers(2, 8), seed=st.integers(0, 2**31))
def test_metric_ranges(T, seed):
    a = random_matrix(np.random.default_rng(seed), T)
    assert 0 <= average_score(a, T) <= 1
    assert -1 <= forgetting(a, T)[1] <= 1
    # a learner that never changes forgets nothing
    flat = np.tile(a[1], (T + 1, 1))
    assert forgetting(flat, T)[1] == 0.0


def test_metric_argument_checks():
    a = np.zeros((3, 2))
    with pytest.raises(UsageError):
        average_score(a, 0)
    with pytest.raises(UsageError):
        forgetting(a, 1)
    with pytest.raises(UsageError):
        forgetting(a, 3)
    with pytest.raises(UsageError):
        future_score(a, 2, 2)
    with pytest.raises(UsageError):
        gis([0.1], [0.1, 0.2])
    with pytest.raises(ValueError):
        average_score(np.full((3, 2), 1.5), 2)


def test_normalize_score():
    cfg = GameConfig.small()
    assert normalize_score(5, cfg) == 0.5
    with pytest.raises(UsageError):
        normalize_score(11, cfg)
    with pytest.raises(UsageError):
        normalize_score(-1, cfg)


# -- matches ---------------------------------------------------------------------


def test_match_schedule_is_seat_swap_symmetric():
    sched = match_schedule(6, 3)
    assert [s for s, _ in sched[0::2]] == [s for s, _ in sched[1::2]]
    assert [w for _, w in sched] == [False, True] * 3
    assert match_schedule(6, 3) == sched and match_schedule(6, 4) != sched


def test_match_result_statistics():
    r = MatchResult.from_scores([1, 2, 3, 4], seed=0)
    assert r.mean == 2.5 and r.sem == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    assert MatchResult.from_scores([3], 0).sem == 0.0


def test_play_match_is_deterministic_and_symmetric():
    a, b = make_agent("iql-type1-s0", seed=1), make_agent("iql-type2-s0", seed=2)
    r1 = play_match(a, b, 20, 5)
    assert r1 == play_match(a, b, 20, 5)
    assert r1.mean == play_match(b, a, 20, 5).mean
    assert r1.n_games == 20 and all(0 <= s <= 10 for s in r1.scores)
    # lockstep batch size does not change the outcome
    assert play_match(a, b, 20, 5, n_parallel=3).scores == r1.scores
    with pytest.raises(UsageError):
        play_match(a, b, 0, 5)


def test_incompatible_agents_refused():
    a = make_agent("iql-type1-s0")
    b = make_agent("iql-type1-s0", config=GameConfig.standard())
    with pytest.raises(UsageError):
        play_match(a, b, 2, 0)


def test_random_policy_baseline():
    cfg = GameConfig.small()
    r = random_policy_baseline(cfg, 200, 0)
    assert r == random_policy_baseline(cfg, 200, 0)
    assert 0 <= r.mean < 2


def test_cross_play_matrix_and_csv(tmp_path):
    agents = [make_agent("iql-type1-s0", seed=s, name=f"a{s}") for s in range(3)]
    cp = cross_play_matrix(agents, 10, 1)
    M = cp.means
    assert M.shape == (3, 3) and np.allclose(M, M.T)
    assert M[0, 1] == play_match(agents[0], agents[1], 10, cp.results[0][1].seed).mean
    cp.write_csv(tmp_path / "m.csv")
    ids, back = CrossPlay.read_csv(tmp_path / "m.csv")
    assert ids == ["a0", "a1", "a2"] and np.allclose(back, M, atol=1e-6)
    with pytest.raises(UsageError):
        cross_play_matrix(agents, 9, 1)
    with pytest.raises(UsageError):
        cross_play_matrix([], 10, 1)


def test_zero_shot_eval_is_normalized():
    learner = make_agent(seed=0)
    partners = [make_agent(seed=s) for s in (1, 2)]
    z = zero_shot_eval(learner, partners, 10, 0)
    assert z.shape == (2,) and np.all((0 <= z) & (z <= 1))


def test_few_shot_leaves_learner_untouched():
    learner = make_agent(seed=0)
    partner = make_agent(seed=1)
    before = learner.params.copy()
    cfg = FewShotConfig(k_steps=5, burn_in=64, buffer_size=256, n_parallel=4, optimizer=OptimizerState(learning_rate=1e-3))
    tuned = fine_tune(learner, partner, cfg, 3)
    assert np.array_equal(learner.params, before)
    assert not np.array_equal(tuned.params, before)
    assert np.array_equal(fine_tune(learner, partner, cfg, 3).params, tuned.params)
    score = few_shot_eval(learner, partner, cfg, 3, 10, 0)
    assert 0 <= score <= 1
    with pytest.raises(UsageError):
        few_shot_eval(learner, partner, replace(cfg, k_steps=0), 3, 10, 0)


def test_intra_inter_cp_excludes_self():
    pool = [make_agent("iql-type1-s0", seed=0, name="x")]
    pool += [make_agent("iql-type1-s1", seed=1, name="y"), make_agent("iql-op-type1-s0", seed=2, name="z")]
    intra, inter = intra_inter_cp(pool[0], pool, 10, 0)
    assert intra.partners == ("y",) and set(inter.partners) == {"y", "z"}
    intra, inter = intra_inter_cp(pool[0], pool, 10, 0, inter_ids=["z", "x"])
    assert inter.partners == ("z",) and inter.n_partners == 1 and inter.sem == 0.0
    lonely, _ = intra_inter_cp(pool[2], pool, 10, 0, inter_ids=[])
    assert lonely.n_partners == 0 and np.isnan(lonely.mean)
