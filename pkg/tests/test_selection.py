"""Selection strategies against hand traces and brute-force re-evaluation."""

import json
import math
import pathlib

import numpy as np
import pytest

from gradprobe.selection import (
    DEFAULT_GRID,
    STRATEGY_EMA,
    STRATEGY_LAST,
    STRATEGY_LEAD_LAG,
    STRATEGY_LOSS_MIN,
    STRATEGY_ORACLE,
    STRATEGY_QUANTILE,
    STRATEGY_QUANTILE_PATIENCE,
    STRATEGY_RAW,
    UNIVERSAL_CELL,
    SelectionConfig,
    SelectionConfigError,
    TrajectoryError,
    TrajectoryRecord,
    TrajectorySeries,
    best_lag,
    ema_smooth,
    evaluate_strategies,
    median_aggregate,
    select_argmin,
    select_quantile_patience,
    sweep_configs,
    tail_window,
)

DATA = pathlib.Path(__file__).parent / "data"

HEAD_GRADIENT_STRATEGIES = (
    STRATEGY_RAW,
    STRATEGY_EMA,
    STRATEGY_QUANTILE,
    STRATEGY_QUANTILE_PATIENCE,
    STRATEGY_LEAD_LAG,
)


def _series(scores, metrics=None, aux=None, steps=None):
    steps = steps if steps is not None else list(range(len(scores)))
    return TrajectorySeries.from_columns(steps, scores, metrics, aux)


# ------------------------------------------------------------------- config


def test_config_span_beta_mapping():
    assert SelectionConfig(ema_span=1).beta == 0.0
    assert SelectionConfig(ema_span=3).beta == pytest.approx(0.5)
    assert SelectionConfig(ema_span=9).beta == pytest.approx(0.8)
    assert SelectionConfig(ema_beta=0.9).beta == 0.9


def test_config_defaults():
    cfg = SelectionConfig()
    assert cfg.ema_span == 3
    assert cfg.tail_size == 80
    assert cfg.quantile == 0.1
    assert cfg.patience == 3
    assert cfg.max_lag == 10


def test_config_rejects_conflicts_and_bad_values():
    with pytest.raises(SelectionConfigError):
        SelectionConfig(ema_span=3, ema_beta=0.5)
    with pytest.raises(SelectionConfigError):
        SelectionConfig(tail_size=10, tail_fraction=0.5)
    with pytest.raises(SelectionConfigError):
        SelectionConfig(ema_span=0)
    with pytest.raises(SelectionConfigError):
        SelectionConfig(ema_beta=1.0)
    with pytest.raises(SelectionConfigError):
        SelectionConfig(quantile=0.0)
    with pytest.raises(SelectionConfigError):
        SelectionConfig(patience=-1)
    with pytest.raises(SelectionConfigError):
        SelectionConfig(tail_fraction=1.5)


def test_config_replace_swaps_exclusive_pairs():
    cfg = SelectionConfig(ema_beta=0.9, tail_fraction=0.5)
    swapped = cfg.replace(ema_span=5, tail_size=40)
    assert swapped.ema_span == 5 and swapped.ema_beta is None
    assert swapped.tail_size == 40 and swapped.tail_fraction is None


# ---------------------------------------------------------------- smoothing


def test_ema_constant_series_identity():
    cfg = SelectionConfig(ema_span=5)
    assert ema_smooth([2.5, 2.5, 2.5], cfg) == [2.5, 2.5, 2.5]


def test_ema_hand_recurrence_beta_09():
    # s_0 = 1; s_1 = 0.9*1 + 0.1*0 = 0.9
    out = ema_smooth([1.0, 0.0], SelectionConfig(ema_beta=0.9))
    assert out == pytest.approx([1.0, 0.9])


def test_ema_hand_recurrence_span_3():
    # beta = 0.5: 4 -> 0.5*4 + 0.5*0 = 2 -> 0.5*2 + 0.5*0 = 1
    out = ema_smooth([4.0, 0.0, 0.0], SelectionConfig(ema_span=3))
    assert out == pytest.approx([4.0, 2.0, 1.0])


def test_ema_span_one_is_identity():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, 50)
    assert ema_smooth(x, SelectionConfig(ema_span=1)) == pytest.approx(list(x))


def test_ema_stays_within_running_envelope():
    rng = np.random.default_rng(1)
    x = rng.normal(0, 1, 100)
    out = ema_smooth(x, SelectionConfig(ema_span=9))
    for i, v in enumerate(out):
        assert x[: i + 1].min() - 1e-12 <= v <= x[: i + 1].max() + 1e-12


# ---------------------------------------------------------------- windowing


def test_tail_window_fraction():
    s = _series(list(range(10)))
    w = tail_window(s, SelectionConfig(tail_fraction=0.2))
    assert (w.start, w.stop) == (8, 10)


def test_tail_window_clamps_to_series():
    s = _series(list(range(50)))
    w = tail_window(s, SelectionConfig(tail_size=80))
    assert (w.start, w.stop) == (0, 50)


def test_tail_window_fixed_size():
    s = _series(list(range(500)))
    w = tail_window(s, SelectionConfig(tail_size=80))
    assert (w.start, w.stop) == (420, 500)


def test_tail_window_fraction_rounds_up():
    s = _series(list(range(7)))
    w = tail_window(s, SelectionConfig(tail_fraction=0.3))  # ceil(2.1) = 3
    assert (w.start, w.stop) == (4, 7)


# ------------------------------------------------------------------- argmin


def test_argmin_strictly_decreasing_picks_last():
    s = _series([5.0, 4.0, 3.0, 2.0, 1.0])
    res = select_argmin(s, SelectionConfig(ema_span=1, tail_size=5))
    assert res.chosen_step == 4
    assert res.strategy_name == STRATEGY_RAW


def test_argmin_earliest_tie():
    s = _series([3.0, 1.0, 1.0, 2.0])
    res = select_argmin(s, SelectionConfig(ema_span=1, tail_size=4))
    assert res.chosen_step == 1


def test_argmin_matches_brute_force_scan():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(5, 60))
        scores = rng.normal(0, 1, n)
        span = int(rng.choice([1, 3, 5, 9]))
        size = int(rng.integers(1, n + 5))
        cfg = SelectionConfig(ema_span=span, tail_size=size)
        res = select_argmin(_series(scores), cfg)

        # brute force: smooth by explicit loop, scan the window by loop
        beta = 1 - 2 / (span + 1)
        sm = [scores[0]]
        for v in scores[1:]:
            sm.append(beta * sm[-1] + (1 - beta) * v)
        start = max(0, n - size)
        best_i, best_v = start, sm[start]
        for i in range(start, n):
            if sm[i] < best_v:
                best_i, best_v = i, sm[i]
        assert res.chosen_index == best_i


def test_argmin_invariant_under_increasing_transform_when_unsmoothed():
    rng = np.random.default_rng(3)
    scores = rng.uniform(0.5, 3.0, 40)
    cfg = SelectionConfig(ema_span=1, tail_size=25)
    a = select_argmin(_series(scores), cfg)
    b = select_argmin(_series(np.exp(scores)), cfg)
    c = select_argmin(_series(scores**3), cfg)
    assert a.chosen_step == b.chosen_step == c.chosen_step


# -------------------------------------------------------- quantile/patience


def test_quantile_single_candidate_is_minimum():
    scores = [10.0, 9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]
    res = select_quantile_patience(
        _series(scores), SelectionConfig(ema_span=1, tail_size=10, quantile=0.1, patience=0)
    )
    assert res.candidate_set == [9]
    assert res.chosen_step == 9
    assert res.strategy_name == STRATEGY_QUANTILE


def test_quantile_all_equal_picks_earliest():
    res = select_quantile_patience(
        _series([2.0] * 6), SelectionConfig(ema_span=1, tail_size=6, quantile=0.5, patience=0)
    )
    assert res.chosen_step == 0
    assert res.candidate_set == [0, 1, 2, 3, 4, 5]


def test_quantile_patience_hand_trace_golden():
    golden = json.loads((DATA / "quantile_patience_trace.json").read_text())
    s = _series(golden["scores"], steps=golden["steps"])
    cfg = SelectionConfig(
        ema_span=golden["config"]["ema_span"],
        tail_size=golden["config"]["tail_size"],
        quantile=golden["config"]["quantile"],
        patience=golden["config"]["patience"],
    )
    res = select_quantile_patience(s, cfg)
    assert res.candidate_set == golden["expected_candidate_steps"]
    assert res.chosen_step == golden["expected_chosen_step"]
    assert res.strategy_name == STRATEGY_QUANTILE_PATIENCE

    # patience past the window end falls back to the window argmin
    res3 = select_quantile_patience(s, cfg.replace(patience=3))
    assert res3.chosen_step == golden["expected_chosen_step_patience_3"]

    res0 = select_quantile_patience(s, cfg.replace(patience=0))
    assert res0.chosen_step == golden["expected_chosen_step_patience_0"]


def test_quantile_patience_zero_equals_one():
    rng = np.random.default_rng(4)
    scores = rng.normal(0, 1, 30)
    s = _series(scores)
    cfg0 = SelectionConfig(ema_span=3, tail_size=30, quantile=0.2, patience=0)
    cfg1 = cfg0.replace(patience=1)
    assert (
        select_quantile_patience(s, cfg0).chosen_step
        == select_quantile_patience(s, cfg1).chosen_step
    )


def test_quantile_candidate_set_shrinks_with_q():
    rng = np.random.default_rng(5)
    s = _series(rng.normal(0, 1, 50))
    cfg = SelectionConfig(ema_span=1, tail_size=50, patience=0)
    small = select_quantile_patience(s, cfg.replace(quantile=0.1)).candidate_set
    large = select_quantile_patience(s, cfg.replace(quantile=0.5)).candidate_set
    assert set(small) <= set(large)
    assert len(small) < len(large)


# ---------------------------------------------------------------- lag search


def test_best_lag_identical_series_zero():
    rng = np.random.default_rng(6)
    x = rng.normal(0, 1, 40)
    res = best_lag(x, -x, 5)
    assert res.lag == 0
    assert res.correlation == pytest.approx(-1.0)
    assert not res.warning


def test_best_lag_recovers_known_shift():
    rng = np.random.default_rng(7)
    x = rng.normal(0, 1, 60)
    y = np.empty_like(x)
    # other[t] mirrors score[t-2]: the score leads by 2
    y[2:] = -x[:-2]
    y[:2] = rng.normal(0, 1, 2)
    res = best_lag(x, y, 5)
    assert res.lag == 2
    assert abs(res.correlation) > 0.9


def test_best_lag_short_overlap_warns():
    res = best_lag([1.0, 2.0], [2.0, 1.0], 5)
    assert res.lag == 0
    assert res.warning


def test_best_lag_constant_side_warns():
    res = best_lag([1.0, 1.0, 1.0, 1.0], [1.0, 2.0, 3.0, 4.0], 2)
    assert res.lag == 0
    assert res.warning


def test_best_lag_deterministic_on_noise():
    rng = np.random.default_rng(8)
    x = rng.normal(0, 1, 50)
    y = rng.normal(0, 1, 50)
    first = best_lag(x, y, 10)
    again = best_lag(x, y, 10)
    assert (first.lag, first.correlation) == (again.lag, again.correlation)
    assert -10 <= first.lag <= 10
    assert not first.warning


def test_best_lag_tie_prefers_zero():
    # exact linear series: every lag correlates perfectly; 0 must win
    x = np.arange(20.0)
    res = best_lag(x, 2 * x + 1, 5)
    assert res.lag == 0
    assert res.correlation == pytest.approx(1.0)


# ------------------------------------------------------------------- median


def test_median_single_series_identity():
    assert median_aggregate([[3.0, 1.0, 2.0]]) == [3.0, 1.0, 2.0]


def test_median_odd_and_even_conventions():
    assert median_aggregate([[1.0], [9.0], [2.0]]) == [2.0]
    assert median_aggregate([[1.0], [2.0], [3.0], [10.0]]) == [2.5]


def test_median_pointwise():
    out = median_aggregate([[1.0, 10.0], [2.0, 20.0], [3.0, 0.0]])
    assert out == [2.0, 10.0]


def test_median_length_mismatch_rejected():
    with pytest.raises(ValueError):
        median_aggregate([[1.0, 2.0], [3.0]])


# --------------------------------------------------------------- strategies


def _monotone_series(n=8):
    """Score strictly decreasing, metric strictly increasing, linear."""
    steps = list(range(n))
    scores = [float(n - i) for i in steps]
    metrics = [i / n for i in steps]
    aux = [float(n - i) / 2 for i in steps]
    return TrajectorySeries.from_columns(steps, scores, metrics, aux)


def test_monotone_fixture_every_strategy_picks_last_step():
    s = _monotone_series(8)
    cfg = SelectionConfig(ema_span=3, tail_size=8, quantile=0.1, patience=3)
    ev = evaluate_strategies(s, cfg, higher_is_better=True)
    for name in HEAD_GRADIENT_STRATEGIES + (STRATEGY_LAST, STRATEGY_ORACLE):
        assert ev[name].chosen_step == 7, name
        assert ev[name].gap == 0.0, name
    assert ev.oracle_step == 7


def test_oracle_gap_always_zero():
    rng = np.random.default_rng(9)
    s = _series(rng.normal(0, 1, 30), metrics=list(rng.uniform(0, 1, 30)))
    ev = evaluate_strategies(s, SelectionConfig(tail_size=20))
    assert ev[STRATEGY_ORACLE].gap == 0.0
    for name in ev:
        if ev[name].gap is not None:
            assert ev[name].gap >= 0.0


def test_gap_orientation_flag():
    # lower metric is better: oracle is the minimum
    scores = [3.0, 2.0, 1.0, 2.5]
    metrics = [0.9, 0.4, 0.1, 0.6]
    s = _series(scores, metrics=metrics)
    ev = evaluate_strategies(
        s, SelectionConfig(ema_span=1, tail_size=4), higher_is_better=False
    )
    assert ev.oracle_step == 2
    assert ev[STRATEGY_RAW].chosen_step == 2
    assert ev[STRATEGY_RAW].gap == 0.0
    assert ev[STRATEGY_LAST].gap == pytest.approx(0.5)  # 0.6 - 0.1


def test_missing_metric_leaves_selection_without_gaps():
    s = _series([3.0, 2.0, 1.0], aux=[3.0, 2.0, 1.0])
    ev = evaluate_strategies(s, SelectionConfig(ema_span=1, tail_size=3))
    assert STRATEGY_ORACLE not in ev
    assert ev.oracle_step is None
    assert ev[STRATEGY_EMA].chosen_step == 2
    assert ev[STRATEGY_EMA].gap is None


def test_loss_min_follows_aux_and_is_absent_without_it():
    scores = [5.0, 1.0, 4.0, 3.0]
    aux = [0.9, 0.8, 0.1, 0.7]
    s = _series(scores, metrics=[0.1, 0.2, 0.3, 0.4], aux=aux)
    ev = evaluate_strategies(s, SelectionConfig(ema_span=1, tail_size=4))
    assert ev[STRATEGY_LOSS_MIN].chosen_step == 2
    bare = _series(scores, metrics=[0.1, 0.2, 0.3, 0.4])
    ev2 = evaluate_strategies(bare, SelectionConfig(ema_span=1, tail_size=4))
    assert STRATEGY_LOSS_MIN not in ev2


def test_label_free_strategies_ignore_metric_column():
    rng = np.random.default_rng(10)
    for trial in range(5):
        n = 40
        scores = rng.normal(0, 1, n)
        aux = rng.normal(0, 1, n)
        metrics = list(rng.uniform(0, 1, n))
        cfg = SelectionConfig(tail_size=25)
        s = TrajectorySeries.from_columns(range(n), scores, metrics, aux)
        baseline = evaluate_strategies(s, cfg)

        permuted = TrajectorySeries.from_columns(
            range(n), scores, list(rng.permutation(metrics)), aux
        )
        zeroed = s.without_metric()
        for variant in (evaluate_strategies(permuted, cfg), evaluate_strategies(zeroed, cfg)):
            for name in HEAD_GRADIENT_STRATEGIES:
                assert variant[name].chosen_step == baseline[name].chosen_step


def test_strategy_mean_gaps_match_brute_force():
    # independent evaluation pass over a fixed multi-seed corpus
    cfg = SelectionConfig(ema_span=3, tail_size=30)
    gaps = {STRATEGY_RAW: [], STRATEGY_EMA: [], STRATEGY_LAST: []}
    brute = {STRATEGY_RAW: [], STRATEGY_EMA: [], STRATEGY_LAST: []}
    for seed in range(6):
        rng = np.random.default_rng(seed)
        n = 50
        scores = rng.normal(0, 1, n).cumsum() * 0.1 + 2.0
        metrics = list(0.9 - 0.05 * scores + 0.01 * rng.normal(0, 1, n))
        s = _series(list(scores), metrics=metrics)
        ev = evaluate_strategies(s, cfg)
        for k in gaps:
            gaps[k].append(ev[k].gap)

        # brute force re-derivation
        beta = 0.5
        sm = [scores[0]]
        for v in scores[1:]:
            sm.append(beta * sm[-1] + (1 - beta) * v)
        win = list(range(n - 30, n))
        best_metric = max(metrics[i] for i in win)
        raw_i = min(win, key=lambda i: (scores[i], i))
        ema_i = min(win, key=lambda i: (sm[i], i))
        brute[STRATEGY_RAW].append(best_metric - metrics[raw_i])
        brute[STRATEGY_EMA].append(best_metric - metrics[ema_i])
        brute[STRATEGY_LAST].append(best_metric - metrics[n - 1])
    for k in gaps:
        assert np.mean(gaps[k]) == pytest.approx(np.mean(brute[k]), abs=1e-12), k


# -------------------------------------------------------------------- sweep


def test_sweep_default_grid_shape():
    rng = np.random.default_rng(11)
    s = _series(rng.normal(0, 1, 120), metrics=list(rng.uniform(0, 1, 120)))
    table = sweep_configs(s)
    assert len(table.cells) == 12
    assert table.universal_cell == UNIVERSAL_CELL == (3, 80)
    assert {(c.ema_span, c.tail_size) for c in table.cells} == set(DEFAULT_GRID)


def test_sweep_single_record_series():
    s = _series([1.0], metrics=[0.5])
    table = sweep_configs(s)
    for c in table.cells:
        assert c.chosen_step == 0
        assert c.gap == 0.0


def test_sweep_monotone_all_cells_gap_zero():
    s = _monotone_series(12)
    table = sweep_configs(s)
    for c in table.cells:
        assert c.gap == 0.0, (c.ema_span, c.tail_size)


def test_sweep_best_cell_never_beaten_by_universal():
    rng = np.random.default_rng(12)
    for _ in range(10):
        n = 150
        scores = rng.normal(0, 1, n).cumsum() * 0.05 + 3.0
        metrics = list(0.8 - 0.04 * scores + 0.02 * rng.normal(0, 1, n))
        table = sweep_configs(_series(list(scores), metrics=metrics))
        best_gap = table.cell(*table.best_cell).gap
        uni_gap = table.cell(*UNIVERSAL_CELL).gap
        assert best_gap <= uni_gap + 1e-15


def test_sweep_without_metric_has_no_best_cell():
    s = _series([3.0, 2.0, 1.0])
    table = sweep_configs(s)
    assert table.best_cell is None
    assert all(c.gap is None for c in table.cells)


# --------------------------------------------------------------- trajectory


def test_trajectory_rejects_disorder_and_nonfinite():
    with pytest.raises(TrajectoryError):
        TrajectorySeries(
            records=[TrajectoryRecord(5, 1.0), TrajectoryRecord(5, 2.0)]
        )
    with pytest.raises(TrajectoryError):
        TrajectorySeries(records=[TrajectoryRecord(0, math.nan)])
    with pytest.raises(TrajectoryError):
        TrajectorySeries(records=[])
    with pytest.raises(TrajectoryError):
        TrajectorySeries(records=[TrajectoryRecord(0, 1.0, metric=math.inf)])


def test_trajectory_without_metric_preserves_rest():
    s = _series([1.0, 2.0], metrics=[0.3, 0.4], aux=[0.5, 0.6])
    bare = s.without_metric()
    assert bare.records[0].metric is None
    assert bare.records[0].aux_loss == 0.5
    assert list(bare.steps) == [0, 1]
