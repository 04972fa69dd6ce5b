#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
gflownet_policy の動作検証テスト
エッジフロー・流入流出・フローマッチング損失の勾配・比例サンプリングを確認
"""

import math
import os
import sys
import tempfile
from collections import Counter

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest

from gflownet_policy import (
    IncompatibleCheckpointError, PolicyError, TrainConfig, build_enumerable_instance,
    informativeness, loss_plateaued,
    create_flow_network, edge_flow, exact_terminal_distribution, flow_conservation_gaps,
    flow_matching_loss, forward_policy, inflow, load_policy, outflow, sample_trajectory,
    save_policy, total_variation, train_policy,
)
from nn_core import MlpSpec, Parameters, gradient_relative_error, numerical_gradient
from state_engine import SENTINEL, apply_action, enumerate_parents, init_state
from suite_runner import exit_with, run_suite

PROPORTIONALITY_TV = 0.05
CONSERVATION_GAP = 0.05


def _random_setup(n: int = 8, seed: int = 0):
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(n, 3))
    logits = rng.normal(size=(n, 3))
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    labels = rng.integers(0, 3, size=n)
    return init_state(features, probs), (lambda i: int(labels[i])), rng


def test_zero_network_flows():
    """全パラメータ0でエッジフロー1・一様方策"""
    print("=== ゼロネットワークテスト ===")
    init, oracle, rng = _random_setup()
    fn = create_flow_network(zero=True)
    assert edge_flow(fn, init, 3) == 1.0
    candidates, probs = forward_policy(fn, init)
    assert len(candidates) == 8
    assert np.allclose(probs, 1.0 / 8)
    ts = init
    for a in (1, 4, 6):
        ts = apply_action(ts, a, oracle)
    assert abs(inflow(fn, ts) - 3.0) < 1e-12
    assert abs(outflow(fn, ts) - 5.0) < 1e-12
    print("  ✅ 合格")


def test_flows_positive_and_row_determined():
    init, oracle, rng = _random_setup(seed=1)
    fn = create_flow_network(rng)
    ts = apply_action(init, 0, oracle)
    flows = [edge_flow(fn, ts, a) for a in range(1, 8)]
    assert all(f > 0 for f in flows)
    assert outflow(fn, ts) >= max(flows)
    assert abs(outflow(fn, ts) - sum(flows)) < 1e-9
    # 同一の状態行には同一のフロー
    duplicate = np.vstack([ts.state.rows[2], ts.state.rows[2]])
    logf = fn.log_flows(duplicate)
    assert logf[0] == logf[1]


def test_edge_flow_rejects_selected_action():
    init, oracle, rng = _random_setup()
    fn = create_flow_network(zero=True)
    ts = apply_action(init, 2, oracle)
    with pytest.raises(PolicyError):
        edge_flow(fn, ts, 2)


def test_forward_policy_shift_invariant():
    """log フローへの定数加算で方策不変"""
    init, oracle, rng = _random_setup(seed=2)
    fn = create_flow_network(rng)
    shifted_params = fn.params.copy()
    shifted_params["b2"] = shifted_params["b2"] + 3.7
    shifted = fn.with_params(shifted_params)
    ts = apply_action(init, 5, oracle)
    _, p1 = forward_policy(fn, ts)
    _, p2 = forward_policy(shifted, ts)
    assert abs(p1.sum() - 1.0) < 1e-9
    assert np.allclose(p1, p2, atol=1e-12)


def test_sample_trajectory_budgets():
    init, oracle, rng = _random_setup(seed=3)
    fn = create_flow_network(rng)
    assert len(sample_trajectory(fn, init, 0, rng, oracle)) == 1
    full = sample_trajectory(fn, init, 8, rng, oracle)
    assert full[-1].key == frozenset(range(8))
    traj = sample_trajectory(fn, init, 4, rng, oracle)
    assert len(set(traj[-1].selected_indices)) == 4
    assert traj[-1].state.rows[:, 3].sum() == 4
    with pytest.raises(PolicyError):
        sample_trajectory(fn, init, 9, rng, oracle)


def test_inflow_matches_explicit_parents_and_order():
    """流入は親の明示列挙の和に一致し、選択順序に依存しない"""
    init, oracle, rng = _random_setup(seed=4)
    fn = create_flow_network(rng)
    with pytest.raises(PolicyError):
        inflow(fn, init)
    a = init
    for x in (1, 5, 2):
        a = apply_action(a, x, oracle)
    b = init
    for x in (2, 1, 5):
        b = apply_action(b, x, oracle)
    explicit = sum(edge_flow(fn, parent, removed) for parent, removed in enumerate_parents(a))
    assert abs(inflow(fn, a) - explicit) < 1e-9
    assert abs(inflow(fn, a) - inflow(fn, b)) < 1e-9
    assert len(enumerate_parents(a)) == 3
    one = apply_action(init, 7, oracle)
    assert abs(inflow(fn, one) - edge_flow(fn, init, 7)) < 1e-12


def test_single_step_loss_closed_form():
    """n=1, b=1 で (log(ε+F) − log(ε+r))²"""
    features = np.array([[1.0, 0.5]])
    probs = np.array([[0.3, 0.7]])
    init = init_state(features, probs)
    fn = create_flow_network(np.random.default_rng(0))
    trajectory = [init, apply_action(init, 0, lambda i: 1)]
    flow = edge_flow(fn, init, 0)
    eps = 1e-8
    loss, _ = flow_matching_loss(fn, trajectory, 2.5, eps)
    expected = (math.log(eps + flow) - math.log(eps + 2.5)) ** 2
    assert abs(loss - expected) < 1e-12
    zero_loss, _ = flow_matching_loss(fn, trajectory, flow, 0.0 + eps)
    assert zero_loss < 1e-20
    with pytest.raises(PolicyError):
        flow_matching_loss(fn, trajectory, 0.0)


def test_flow_matching_gradient_check():
    """損失勾配が数値微分と一致（10インスタンス）"""
    print("=== フローマッチング勾配テスト ===")
    worst = 0.0
    for seed in range(10):
        n = 5 + seed % 3
        init, oracle, rng = _random_setup(n=n, seed=100 + seed)
        fn = create_flow_network(rng, hidden=5, activation="tanh")
        trajectory = sample_trajectory(fn, init, 1 + seed % 3, rng, oracle)
        reward = float(rng.uniform(0.5, 3.0))

        def loss_fn(params: Parameters) -> float:
            return flow_matching_loss(fn.with_params(params), trajectory, reward)[0]

        _, analytic = flow_matching_loss(fn, trajectory, reward)
        numeric = numerical_gradient(loss_fn, fn.params)
        error = gradient_relative_error(analytic, numeric)
        worst = max(worst, error)
        assert error <= 1e-4, f"seed {seed}: {error}"
    print(f"  最大相対誤差: {worst:.2e}")
    print("  ✅ 合格")


def test_feature_mask_ignores_columns():
    init, oracle, rng = _random_setup(seed=6)
    fn = create_flow_network(rng, feature_mask=(False, False, True, True))
    rows = init.state.rows[:2].copy()
    altered = rows.copy()
    altered[:, 0] = 0.9
    altered[:, 1] = -0.3
    assert np.allclose(fn.log_flows(rows), fn.log_flows(altered))


def test_policy_checkpoint_roundtrip():
    rng = np.random.default_rng(7)
    fn = create_flow_network(rng, feature_mask=(True, False, True, True))
    init, oracle, _ = _random_setup(seed=7)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "policy.json")
        save_policy(path, fn, {"episodes": 0})
        loaded = load_policy(path)
        assert loaded.feature_mask == fn.feature_mask
        assert np.array_equal(loaded.log_flows(init.state.rows), fn.log_flows(init.state.rows))
        with pytest.raises(IncompatibleCheckpointError):
            load_policy(path, expected=MlpSpec((4, 16, 1)))


def test_train_config_validation():
    with pytest.raises(PolicyError):
        TrainConfig(trajectory_buffer=0)
    with pytest.raises(PolicyError):
        TrainConfig(epsilon=0.0)


def test_loss_plateau_detection():
    """揺らぎだけでは停止せず、平坦化したら停止する"""
    rng = np.random.default_rng(11)
    t = np.arange(200, dtype=float)
    decreasing = list(np.exp(-t / 150.0) * (1.0 + 0.5 * rng.standard_normal(200)) + 1e-3)
    assert not loss_plateaued(decreasing, window=50, tolerance=1e-4)
    flat = list(1.0 + 0.3 * rng.standard_normal(200))
    assert loss_plateaued(flat, window=50, tolerance=0.5)
    assert loss_plateaued([0.2] * 100, window=50, tolerance=1e-4)
    assert loss_plateaued([0.0] * 100, window=50, tolerance=1e-4)
    assert not loss_plateaued([0.2] * 99, window=50, tolerance=1e-4)


def test_enumerable_instance_conditioning():
    """選択後の類似度は番兵と重ならず、報酬は情報量の和"""
    instance = build_enumerable_instance(n=6, budget=2)
    assert len(instance.rewards) == 15
    init = instance.init
    assert np.all(init.state.rows[:, 0] == SENTINEL)
    entropies = init.state.entropy
    assert len(set(np.round(entropies, 12))) == 6
    for i in range(6):
        ts = apply_action(init, i, instance.oracle)
        others = [j for j in range(6) if j != i]
        sims = ts.state.rows[others, 0]
        assert np.all(sims >= 0.5 - 1e-12)
        assert np.all(sims != SENTINEL)
    gains = informativeness(entropies, 3.0)
    assert abs(gains.max() - 3.0) < 1e-12 and abs(gains.min() - 1.0) < 1e-12
    # エントロピーが高いほど情報量も大きい
    order = np.argsort(entropies)
    assert np.all(np.diff(gains[order]) > 0)
    scale = np.mean([gains[sorted(k)].sum() for k in instance.rewards])
    for key, value in instance.rewards.items():
        assert abs(value * scale - gains[sorted(key)].sum()) < 1e-9
    assert abs(np.mean(list(instance.rewards.values())) - 1.0) < 1e-12
    # 一様方策のままでは比例サンプリングの閾値を満たさない
    uniform = {k: 1.0 / 15 for k in instance.rewards}
    assert total_variation(uniform, instance.target_distribution()) > PROPORTIONALITY_TV
    with pytest.raises(PolicyError):
        build_enumerable_instance(n=3, budget=4)


def test_blocked_rows_never_sampled():
    features = np.random.default_rng(12).normal(size=(7, 3))
    probs = np.full((7, 3), 1.0 / 3)
    init = init_state(features, probs, blocked=[1, 4])
    rng = np.random.default_rng(12)
    fn = create_flow_network(rng)
    candidates, _ = forward_policy(fn, init)
    assert 1 not in candidates and 4 not in candidates
    with pytest.raises(PolicyError):
        edge_flow(fn, init, 4)
    for _ in range(50):
        traj = sample_trajectory(fn, init, 5, rng, lambda i: 0)
        assert traj[-1].key == frozenset({0, 2, 3, 5, 6})
    with pytest.raises(PolicyError):
        sample_trajectory(fn, init, 6, rng, lambda i: 0)


def _train_enumerable(constant_reward=None, seed: int = 0):
    """既定設定（隠れ層8・ReLU・学習率0.001・バッファ5・早期停止あり）で学習"""
    instance = build_enumerable_instance(n=6, budget=2, constant_reward=constant_reward)
    rng = np.random.default_rng(seed)
    fn = create_flow_network(rng)
    config = TrainConfig(episodes_max=2000, budget=2, log_every=0)
    trained, log = train_policy(fn, instance.environment(), config, rng)
    return instance, trained, log, rng


@pytest.mark.slow
def test_proportional_sampling_enumerable():
    """n=6, b=2 の全15終端集合で π ∝ r（TV ≤ 0.05）とフロー保存"""
    print("=== 比例サンプリングテスト ===")
    instance, trained, log, rng = _train_enumerable()
    assert len(instance.rewards) == 15
    target = instance.target_distribution()
    exact = exact_terminal_distribution(trained, instance.init, 2, instance.oracle)
    tv_exact = total_variation(exact, target)

    counts = Counter()
    draws = 20000
    init = instance.init
    for _ in range(draws):
        counts[sample_trajectory(trained, init, 2, rng, instance.oracle)[-1].key] += 1
    empirical = {k: c / draws for k, c in counts.items()}
    tv_empirical = total_variation(empirical, target)
    print(f"  TV（厳密）: {tv_exact:.4f}  TV（サンプリング）: {tv_empirical:.4f}")
    assert tv_exact <= PROPORTIONALITY_TV
    assert tv_empirical <= PROPORTIONALITY_TV

    internal, _ = flow_conservation_gaps(trained, init, 2, instance.oracle, instance.rewards)
    worst = max(internal.values())
    print(f"  内部ノードのフロー保存誤差（最大）: {worst:.4f}")
    assert worst <= CONSERVATION_GAP

    first = np.median([r.loss for r in log[:100]])
    last = np.median([r.loss for r in log[-100:]])
    assert last < first
    print("  ✅ 合格")


@pytest.mark.slow
def test_constant_reward_gives_uniform_sets():
    instance, trained, _, _ = _train_enumerable(constant_reward=2.0, seed=1)
    exact = exact_terminal_distribution(trained, instance.init, 2, instance.oracle)
    uniform = {k: 1.0 / 15 for k in instance.rewards}
    assert total_variation(exact, uniform) <= PROPORTIONALITY_TV


def main():
    tests = [
        ("ゼロネットワーク", test_zero_network_flows),
        ("フローの正値性", test_flows_positive_and_row_determined),
        ("選択済みアクション", test_edge_flow_rejects_selected_action),
        ("方策のシフト不変性", test_forward_policy_shift_invariant),
        ("軌跡サンプリング", test_sample_trajectory_budgets),
        ("流入と順序", test_inflow_matches_explicit_parents_and_order),
        ("1ステップ損失", test_single_step_loss_closed_form),
        ("損失勾配", test_flow_matching_gradient_check),
        ("特徴マスク", test_feature_mask_ignores_columns),
        ("チェックポイント", test_policy_checkpoint_roundtrip),
        ("学習設定", test_train_config_validation),
        ("損失停滞判定", test_loss_plateau_detection),
        ("列挙インスタンス", test_enumerable_instance_conditioning),
        ("除外行", test_blocked_rows_never_sampled),
        ("比例サンプリング", test_proportional_sampling_enumerable),
        ("定数報酬", test_constant_reward_gives_uniform_sets),
    ]
    exit_with(run_suite("gflownet_policy テスト", tests))


if __name__ == "__main__":
    main()
