#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
reward の動作検証テスト
MMD の性質・平均クラス精度・報酬の正値性を確認
"""

import os
import sys

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest

from reward import (
    RewardConfig, RewardError, average_class_accuracy, mmd, reward_components,
    terminal_reward,
)
from suite_runner import exit_with, run_suite


def test_mmd_identical_is_zero():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 3))
    assert abs(mmd(x, x)) < 1e-9


def test_mmd_separated_clusters():
    """離れた2クラスタで MMD > 0.5"""
    print("=== MMD 分離クラスタテスト ===")
    rng = np.random.default_rng(1)
    a = rng.normal(loc=-10.0, size=(50, 2))
    b = rng.normal(loc=10.0, size=(50, 2))
    value = mmd(a, b)
    print(f"  MMD² = {value:.4f}")
    assert value > 0.5
    print("  ✅ 合格")


def test_mmd_properties_random():
    """非負性・対称性を100組のランダム行列で確認"""
    rng = np.random.default_rng(2)
    for _ in range(100):
        a = rng.normal(size=(rng.integers(1, 20), 4))
        b = rng.normal(loc=rng.normal(), size=(rng.integers(1, 20), 4))
        ab, ba = mmd(a, b), mmd(b, a)
        assert ab >= 0
        assert abs(ab - ba) < 1e-12
    config = RewardConfig(kernel_bandwidths=(0.5, 1.0))
    a = rng.normal(size=(10, 4))
    assert mmd(a, a, config) < 1e-12


def test_mmd_dimension_mismatch():
    with pytest.raises(RewardError):
        mmd(np.ones((3, 2)), np.ones((3, 3)))


def test_average_class_accuracy_values():
    """平均クラス精度の手計算値"""
    assert average_class_accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert average_class_accuracy([1, 2, 0], [0, 1, 2]) == 0.0
    assert abs(average_class_accuracy([0, 1, 1], [0, 0, 1]) - 0.75) < 1e-12
    with pytest.raises(RewardError):
        average_class_accuracy([0, 1], [0])


def test_average_class_accuracy_permutation_invariant():
    rng = np.random.default_rng(3)
    truth = rng.integers(0, 5, size=60)
    pred = np.where(rng.random(60) < 0.6, truth, rng.integers(0, 5, size=60))
    perm = rng.permutation(5)
    assert abs(average_class_accuracy(pred, truth)
               - average_class_accuracy(perm[pred], perm[truth])) < 1e-12


def test_average_class_accuracy_brute_force():
    """100組のランダム入力でクラス別精度の平均を直接計算と照合"""
    rng = np.random.default_rng(6)
    for _ in range(100):
        size = int(rng.integers(1, 40))
        truth = rng.integers(0, 6, size=size)
        pred = rng.integers(0, 7, size=size)
        per_class = [np.mean(pred[truth == c] == c) for c in sorted(set(truth.tolist()))]
        assert abs(average_class_accuracy(pred, truth) - float(np.mean(per_class))) < 1e-12


def test_terminal_reward_strictly_positive():
    """100組のランダム入力で報酬 > 0"""
    rng = np.random.default_rng(7)
    configs = [RewardConfig(), RewardConfig(mmd_weight=50.0, accuracy_weight=0.0),
               RewardConfig(kernel_bandwidths=(0.1,))]
    for trial in range(100):
        target = rng.normal(size=(int(rng.integers(2, 30)), 3))
        selected = rng.normal(loc=rng.normal(scale=5.0), size=(int(rng.integers(1, 10)), 3))
        truth = rng.integers(0, 4, size=12)
        pred = rng.integers(0, 4, size=12)
        assert terminal_reward(target, selected, pred, truth, configs[trial % 3]) > 0


def test_terminal_reward_extremes():
    """報酬の端点: 全選択+完全分類=2.0、精度0+同一集合=1.0"""
    print("=== 報酬端点テスト ===")
    rng = np.random.default_rng(4)
    x = rng.normal(size=(20, 3))
    truth = rng.integers(0, 3, size=20)
    perfect = terminal_reward(x, x, truth, truth)
    wrong = terminal_reward(x, x, (truth + 1) % 3, truth)
    print(f"  完全: {perfect:.4f}  全誤り: {wrong:.4f}")
    assert abs(perfect - 2.0) < 1e-9
    assert abs(wrong - 1.0) < 1e-9
    print("  ✅ 合格")


def test_reward_positive_and_monotone_in_mmd():
    rng = np.random.default_rng(5)
    target = rng.normal(size=(60, 2))
    close = target[rng.choice(60, 10, replace=False)]
    far = rng.normal(loc=6.0, size=(10, 2))
    truth = rng.integers(0, 2, size=10)
    config = RewardConfig(kernel_bandwidths=(1.0,))
    near_r = reward_components(target, close, truth, truth, config)
    far_r = reward_components(target, far, truth, truth, config)
    assert near_r.mmd < far_r.mmd
    assert near_r.reward >= far_r.reward
    heavy = RewardConfig(mmd_weight=100.0, accuracy_weight=0.0)
    assert terminal_reward(target, far, truth, truth, heavy) == heavy.reward_floor


def test_invalid_config():
    with pytest.raises(RewardError):
        RewardConfig(reward_floor=0.0)
    with pytest.raises(RewardError):
        RewardConfig(mmd_weight=-1.0)
    with pytest.raises(RewardError):
        RewardConfig(kernel_bandwidths=(1.0, -2.0))


def main():
    tests = [
        ("MMD 同一集合", test_mmd_identical_is_zero),
        ("MMD 分離クラスタ", test_mmd_separated_clusters),
        ("MMD 性質", test_mmd_properties_random),
        ("MMD 次元不一致", test_mmd_dimension_mismatch),
        ("平均クラス精度", test_average_class_accuracy_values),
        ("精度の置換不変性", test_average_class_accuracy_permutation_invariant),
        ("精度の総当たり照合", test_average_class_accuracy_brute_force),
        ("報酬の正値性", test_terminal_reward_strictly_positive),
        ("報酬端点", test_terminal_reward_extremes),
        ("報酬の単調性", test_reward_positive_and_monotone_in_mmd),
        ("設定検証", test_invalid_config),
    ]
    exit_with(run_suite("reward テスト", tests))


if __name__ == "__main__":
    main()
