#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
state_engine の動作検証テスト
差分更新と全再計算オラクルの一致、親状態列挙、プロトタイプ更新を確認
"""

import json
import math
import os
import sys
import tempfile
import time

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest

from state_engine import (
    CLASS_SIM, ENTROPY, INST_SIM, LABELED, SENTINEL, PrototypeSet, SimilarityCache,
    StateError, apply_action, candidate_actions, compute_state_oracle,
    dump_trajectory_jsonl, enumerate_parents, init_state,
)
from suite_runner import exit_with, run_suite

ORACLE_TOLERANCE = 1e-6


def _instance(n: int, d: int, k: int, seed: int):
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(n, d))
    logits = rng.normal(size=(n, k))
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    labels = rng.integers(0, k, size=n)
    return features, probs, labels, rng


def test_init_state_entropy_and_sentinels():
    """初期状態のエントロピー列と番兵"""
    print("=== 初期状態テスト ===")
    features = np.eye(4)
    probs = np.array([[0.25] * 4, [1.0, 0, 0, 0], [0.5, 0.5, 0, 0], [0, 0, 0, 1.0]])
    ts = init_state(features, probs)
    rows = ts.state.rows
    assert abs(rows[0, ENTROPY] - math.log(4)) < 1e-12
    assert rows[1, ENTROPY] == 0.0
    assert np.all(rows[:, INST_SIM] == SENTINEL)
    assert np.all(rows[:, CLASS_SIM] == SENTINEL)
    assert rows[:, LABELED].sum() == 0
    assert ts.step == 0
    assert len(candidate_actions(ts)) == 4
    print(f"  一様予測のエントロピー: {rows[0, ENTROPY]:.4f}")
    print("  ✅ 合格")


def test_init_state_rejects_non_distribution():
    with pytest.raises(StateError):
        init_state(np.ones((2, 2)), np.array([[0.5, 0.6], [0.5, 0.5]]))


def test_first_selection_and_prototype():
    features = np.array([[1.0, 1.0], [2.0, 2.0], [1.0, -1.0]])
    probs = np.full((3, 2), 0.5)
    labels = {0: 0, 1: 0, 2: 1}
    ts = apply_action(init_state(features, probs), 0, labels.get)
    cache = ts.cache
    assert np.allclose(ts.state.rows[:, INST_SIM], cache.column(0))
    assert ts.prototypes.counts == {0: 1}
    ts = apply_action(ts, 1, labels.get)
    assert np.allclose(ts.prototypes.mean(0), [1.5, 1.5])
    assert ts.prototypes.counts[0] == 2


def test_prototype_add_remove_arithmetic():
    """プロトタイプ平均の追加・除去"""
    protos = PrototypeSet().add(3, np.array([1.0, 1.0])).add(3, np.array([2.0, 2.0]))
    assert np.allclose(protos.mean(3), [1.5, 1.5])
    back = protos.remove(3, np.array([2.0, 2.0]))
    assert np.allclose(back.mean(3), [1.0, 1.0])
    assert back.counts[3] == 1
    assert len(back.remove(3, np.array([1.0, 1.0]))) == 0


def test_duplicate_and_out_of_range_actions():
    features, probs, labels, _ = _instance(5, 3, 2, 0)
    ts = apply_action(init_state(features, probs), 2, lambda i: int(labels[i]))
    with pytest.raises(StateError):
        apply_action(ts, 2, lambda i: int(labels[i]))
    with pytest.raises(StateError):
        apply_action(ts, 5, lambda i: int(labels[i]))


def test_incremental_matches_oracle():
    """ランダム行動列で差分更新が全再計算と一致（50シード）"""
    print("=== オラクル一致テスト ===")
    worst = 0.0
    for seed in range(50):
        n = 20 + 3 * seed
        features, probs, labels, rng = _instance(n, 4, 5, seed)
        oracle = lambda i: int(labels[i])
        ts = init_state(features, probs)
        budget = min(20, n)
        for action in rng.permutation(n)[:budget]:
            ts = apply_action(ts, action, oracle)
            expected = compute_state_oracle(features, probs, ts.selected)
            diff = ts.state.max_abs_diff(expected)
            worst = max(worst, diff)
            assert diff <= ORACLE_TOLERANCE, f"seed={seed} step={ts.step} diff={diff}"
            assert ts.state.rows[:, LABELED].sum() == ts.step
    print(f"  最大誤差: {worst:.2e}")
    print("  ✅ 合格")


def test_parents_match_oracle_and_invert():
    """親状態が全再計算と一致し、除去アクションの再適用で子に戻る"""
    print("=== 親状態列挙テスト ===")
    for seed in range(20):
        features, probs, labels, rng = _instance(30, 3, 4, 100 + seed)
        oracle = lambda i: int(labels[i])
        ts = init_state(features, probs)
        for action in rng.permutation(30)[:6]:
            ts = apply_action(ts, action, oracle)
            parents = enumerate_parents(ts)
            assert len(parents) == int(ts.state.rows[:, LABELED].sum())
            for parent, removed in parents:
                remaining = [(i, y) for i, y in ts.selected if i != removed]
                expected = compute_state_oracle(features, probs, remaining)
                assert parent.state.max_abs_diff(expected) <= ORACLE_TOLERANCE
                child = apply_action(parent, removed, oracle)
                assert child.state.max_abs_diff(ts.state) <= ORACLE_TOLERANCE
                assert child.key == ts.key
    print("  ✅ 合格")


def test_parent_prototype_downdate():
    features = np.array([[1.0, 1.0], [2.0, 2.0], [0.0, 1.0]])
    probs = np.full((3, 2), 0.5)
    labels = {0: 0, 1: 0, 2: 1}
    ts = init_state(features, probs)
    for a in (0, 1):
        ts = apply_action(ts, a, labels.get)
    parents = dict((removed, parent) for parent, removed in enumerate_parents(ts))
    assert np.allclose(parents[1].prototypes.mean(0), [1.0, 1.0])
    assert parents[1].prototypes.counts[0] == 1


def test_initial_state_has_no_parents():
    features, probs, _, _ = _instance(5, 2, 2, 0)
    assert enumerate_parents(init_state(features, probs)) == []


def test_select_all_gives_self_similarity_one():
    features, probs, labels, _ = _instance(12, 3, 3, 4)
    selected = [(i, int(labels[i])) for i in range(12)]
    rows = compute_state_oracle(features, probs, selected).rows
    assert np.allclose(rows[:, INST_SIM], 1.0)


def test_zero_norm_feature_cosine_is_zero():
    features = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    cache = SimilarityCache(features)
    assert cache.matrix[0, 0] == 0.0
    assert np.all(cache.matrix[0] == 0.0)
    assert cache.matrix[1, 1] == 1.0
    assert np.allclose(cache.matrix, cache.matrix.T)


def test_candidate_actions_shrink():
    features, probs, labels, _ = _instance(10, 2, 2, 1)
    ts = init_state(features, probs)
    for a in (3, 7, 1):
        ts = apply_action(ts, a, lambda i: int(labels[i]))
    cands = candidate_actions(ts)
    assert len(cands) == 7
    assert not {1, 3, 7} & set(cands.tolist())


def test_blocked_rows_excluded_from_candidates():
    """除外行は候補にならず、選択もできない。状態行の計算には残る"""
    features, probs, labels, _ = _instance(10, 3, 3, seed=21)
    oracle = lambda i: int(labels[i])
    init = init_state(features, probs, blocked=[7, 2])
    assert candidate_actions(init).tolist() == [0, 1, 3, 4, 5, 6, 8, 9]
    with pytest.raises(StateError):
        apply_action(init, 2, oracle)
    ts = apply_action(apply_action(init, 5, oracle), 0, oracle)
    assert candidate_actions(ts).tolist() == [1, 3, 4, 6, 8, 9]
    assert np.array_equal(ts.blocked, init.blocked)
    for parent, _ in enumerate_parents(ts):
        assert np.array_equal(parent.blocked, init.blocked)
    # 除外行の類似度も通常どおり更新される
    assert ts.state.max_abs_diff(compute_state_oracle(features, probs, ts.selected)) <= ORACLE_TOLERANCE
    with pytest.raises(StateError):
        init_state(features, probs, blocked=[10])
    assert not init_state(features, probs, blocked=[]).blocked.any()


def test_apply_action_scales_linearly():
    """1ステップのコストがサンプル数にほぼ線形"""
    print("=== 計算量スケーリングテスト ===")
    timings = {}
    for n in (500, 2000):
        features, probs, labels, _ = _instance(n, 8, 5, 0)
        ts = init_state(features, probs)
        oracle = lambda i: int(labels[i])
        for a in range(5):
            ts = apply_action(ts, a, oracle)
        start = time.perf_counter()
        for a in range(5, 45):
            ts = apply_action(ts, a, oracle)
        timings[n] = time.perf_counter() - start
    ratio = timings[2000] / max(timings[500], 1e-9)
    print(f"  n=500: {timings[500]:.4f}s  n=2000: {timings[2000]:.4f}s  比: {ratio:.1f}")
    # 4倍のnで二乗オーダーなら16倍
    assert ratio < 12.0
    print("  ✅ 合格")


def test_dump_trajectory_jsonl():
    features, probs, labels, _ = _instance(8, 2, 2, 3)
    trajectory = [init_state(features, probs)]
    for a in (4, 0):
        trajectory.append(apply_action(trajectory[-1], a, lambda i: int(labels[i])))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "trajectory.jsonl")
        dump_trajectory_jsonl(trajectory, path)
        with open(path, "r", encoding="utf-8") as f:
            records = [json.loads(line) for line in f]
    assert [r["index"] for r in records] == [4, 0]
    assert records[0]["row"]["labeled"] == 1.0
    assert records[1]["label"] == int(labels[0])


def main():
    tests = [
        ("初期状態", test_init_state_entropy_and_sentinels),
        ("非分布予測", test_init_state_rejects_non_distribution),
        ("初回選択", test_first_selection_and_prototype),
        ("プロトタイプ算術", test_prototype_add_remove_arithmetic),
        ("重複・範囲外", test_duplicate_and_out_of_range_actions),
        ("オラクル一致", test_incremental_matches_oracle),
        ("親状態", test_parents_match_oracle_and_invert),
        ("プロトタイプ除去", test_parent_prototype_downdate),
        ("初期状態の親", test_initial_state_has_no_parents),
        ("全選択", test_select_all_gives_self_similarity_one),
        ("ノルム0", test_zero_norm_feature_cosine_is_zero),
        ("候補アクション", test_candidate_actions_shrink),
        ("除外行", test_blocked_rows_excluded_from_candidates),
        ("スケーリング", test_apply_action_scales_linearly),
        ("軌跡ダンプ", test_dump_trajectory_jsonl),
    ]
    exit_with(run_suite("state_engine テスト", tests))


if __name__ == "__main__":
    main()
