#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
終端状態の報酬計算
分布の多様性（MMD）とモデルの情報量（平均クラス精度）を組み合わせる
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.metrics import recall_score

logger = logging.getLogger(__name__)

MEDIAN = "median"
FALLBACK_BANDWIDTHS = (1.0, 2.0, 4.0)
REWARD_OFFSET = 1.0


class RewardError(ValueError):
    """報酬計算の入力不整合"""


@dataclass(frozen=True)
class RewardConfig:
    """
    報酬設定

    r = max(floor, −mmd_weight·MMD + accuracy_weight·精度 + 1.0)
    フローの正値性のため +1.0 のオフセットと下限を入れている。
    """

    kernel_bandwidths: Union[str, Tuple[float, ...]] = MEDIAN
    accuracy_weight: float = 1.0
    mmd_weight: float = 1.0
    reward_floor: float = 1e-6

    def __post_init__(self):
        if self.accuracy_weight < 0 or self.mmd_weight < 0:
            raise RewardError("報酬の重みは0以上である必要があります")
        if not self.reward_floor > 0:
            raise RewardError("reward_floor は正である必要があります")
        if self.kernel_bandwidths != MEDIAN:
            bandwidths = tuple(float(b) for b in self.kernel_bandwidths)
            if not bandwidths or any(not b > 0 for b in bandwidths):
                raise RewardError(f"カーネル幅は正の実数列である必要があります: {bandwidths}")
            object.__setattr__(self, "kernel_bandwidths", bandwidths)


@dataclass(frozen=True)
class RewardBreakdown:
    mmd: float
    accuracy: float
    reward: float


def median_bandwidth(features_a: np.ndarray, features_b: np.ndarray) -> Tuple[float, ...]:
    """プールした点の距離中央値（0距離は除外）。全点一致なら既定値"""
    pooled = np.vstack([features_a, features_b])
    d2 = cdist(pooled, pooled, metric="sqeuclidean")
    positive = d2[d2 > 0]
    if positive.size == 0:
        return FALLBACK_BANDWIDTHS
    return (math.sqrt(float(np.median(positive))),)


def mmd(features_a: np.ndarray, features_b: np.ndarray,
        config: RewardConfig = RewardConfig()) -> float:
    """
    二乗MMDのV統計量推定（RBFカーネルの和）

    Args:
        features_a: (n_a, d)
        features_b: (n_b, d)
        config: カーネル幅設定

    Returns:
        0以上の実数
    """
    a = np.asarray(features_a, dtype=float)
    b = np.asarray(features_b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or len(a) == 0 or len(b) == 0:
        raise RewardError("MMD の入力は空でない2次元行列である必要があります")
    if a.shape[1] != b.shape[1]:
        raise RewardError(f"特徴量次元が一致しません: {a.shape[1]} != {b.shape[1]}")

    if config.kernel_bandwidths == MEDIAN:
        bandwidths = median_bandwidth(a, b)
    else:
        bandwidths = config.kernel_bandwidths

    d_aa = cdist(a, a, metric="sqeuclidean")
    d_bb = cdist(b, b, metric="sqeuclidean")
    d_ab = cdist(a, b, metric="sqeuclidean")
    value = 0.0
    for h in bandwidths:
        scale = 2.0 * h * h
        value += (np.exp(-d_aa / scale).mean() + np.exp(-d_bb / scale).mean()
                  - 2.0 * np.exp(-d_ab / scale).mean())
    return float(max(0.0, value))


def average_class_accuracy(predictions: Sequence[int], truth: Sequence[int]) -> float:
    """正解に現れるクラスごとの精度のマクロ平均"""
    pred = np.asarray(predictions, dtype=int)
    true = np.asarray(truth, dtype=int)
    if len(pred) != len(true):
        raise RewardError(f"予測と正解の長さが一致しません: {len(pred)} != {len(true)}")
    if len(true) == 0:
        raise RewardError("空の評価集合です")
    return float(recall_score(true, pred, labels=np.unique(true), average="macro", zero_division=0))


def reward_components(target_features: np.ndarray, selected_features: np.ndarray,
                      predictions: Sequence[int], truth: Sequence[int],
                      config: RewardConfig = RewardConfig()) -> RewardBreakdown:
    """MMD・精度・合成報酬をまとめて返す"""
    divergence = mmd(target_features, selected_features, config)
    accuracy = average_class_accuracy(predictions, truth)
    raw = -config.mmd_weight * divergence + config.accuracy_weight * accuracy + REWARD_OFFSET
    if raw < config.reward_floor:
        logger.debug("報酬を下限にクランプ: %.6f → %.6g", raw, config.reward_floor)
    return RewardBreakdown(divergence, accuracy, max(config.reward_floor, raw))


def terminal_reward(target_features: np.ndarray, selected_features: np.ndarray,
                    predictions: Sequence[int], truth: Sequence[int],
                    config: RewardConfig = RewardConfig()) -> float:
    return reward_components(target_features, selected_features, predictions, truth, config).reward
