#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
GFlowDA の DAG 状態エンジン
ターゲット全体を n×4 の状態行列で表し、サンプル追加（子状態）と
サンプル除去（親状態）を差分更新で計算する

列の意味:
    0 inst_sim  : 選択済みサンプルとの最大コサイン類似度
    1 class_sim : 選択済みクラスプロトタイプとの最大コサイン類似度
    2 entropy   : 予測エントロピー（自然対数）
    3 labeled   : ラベル付与済みフラグ
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import entropy as scipy_entropy
from sklearn.metrics.pairwise import cosine_similarity

logger = logging.getLogger(__name__)

INST_SIM, CLASS_SIM, ENTROPY, LABELED = 0, 1, 2, 3
STATE_COLUMNS = ("inst_sim", "class_sim", "entropy", "labeled")
SENTINEL = -1.0
DISTRIBUTION_TOLERANCE = 1e-6


class StateError(ValueError):
    """状態遷移の前提違反"""


def prediction_entropy(predictions: np.ndarray) -> np.ndarray:
    """各行の予測分布のシャノンエントロピー（自然対数）"""
    p = np.asarray(predictions, dtype=float)
    if p.ndim != 2 or p.shape[1] == 0:
        raise StateError("予測は (n, クラス数) の行列である必要があります")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise StateError("予測に負値または非有限値があります")
    sums = p.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > DISTRIBUTION_TOLERANCE)
    if bad.size:
        raise StateError(f"{bad[0]}行目の予測が確率分布ではありません（合計 {sums[bad[0]]:.6f}）")
    return scipy_entropy(p, axis=1)


class SimilarityCache:
    """
    ターゲット特徴量の全ペアコサイン類似度（エピソード開始時に1回だけ構築）

    ノルム0の特徴量との類似度は0とする。読み取り専用で複数の軌跡から共有できる。
    """

    def __init__(self, features: np.ndarray):
        f = np.array(features, dtype=float)
        if f.ndim != 2:
            raise StateError("特徴量は2次元行列である必要があります")
        self.norms = np.linalg.norm(f, axis=1)
        self.zero_mask = self.norms == 0
        if self.zero_mask.any():
            logger.warning("ノルム0の特徴量が%d件あります（類似度0として扱います）",
                           int(self.zero_mask.sum()))
        sim = np.clip(cosine_similarity(f), -1.0, 1.0)
        nonzero = np.flatnonzero(~self.zero_mask)
        sim[nonzero, nonzero] = 1.0
        sim.setflags(write=False)
        f.setflags(write=False)
        self.features = f
        self.matrix = sim

    @property
    def n(self) -> int:
        return len(self.features)

    def column(self, j: int) -> np.ndarray:
        return self.matrix[:, j]

    def cosine_to(self, vector: np.ndarray) -> np.ndarray:
        """全特徴量と任意ベクトルのコサイン類似度"""
        v = np.asarray(vector, dtype=float)
        v_norm = float(np.linalg.norm(v))
        if v_norm == 0:
            return np.zeros(self.n)
        denom = np.where(self.zero_mask, 1.0, self.norms) * v_norm
        cos = (self.features @ v) / denom
        cos[self.zero_mask] = 0.0
        return np.clip(cos, -1.0, 1.0)


@dataclass(frozen=True)
class StateMatrix:
    rows: np.ndarray

    @property
    def inst_sim(self) -> np.ndarray:
        return self.rows[:, INST_SIM]

    @property
    def class_sim(self) -> np.ndarray:
        return self.rows[:, CLASS_SIM]

    @property
    def entropy(self) -> np.ndarray:
        return self.rows[:, ENTROPY]

    @property
    def labeled(self) -> np.ndarray:
        return self.rows[:, LABELED]

    def __len__(self) -> int:
        return len(self.rows)

    def max_abs_diff(self, other: "StateMatrix") -> float:
        return float(np.max(np.abs(self.rows - other.rows))) if len(self.rows) else 0.0


@dataclass(frozen=True)
class PrototypeSet:
    """クラスID → (平均特徴ベクトル, 件数)"""

    means: Dict[int, np.ndarray] = field(default_factory=dict)
    counts: Dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.counts)

    @property
    def classes(self) -> Tuple[int, ...]:
        return tuple(sorted(self.counts))

    def mean(self, label: int) -> np.ndarray:
        return self.means[label]

    def add(self, label: int, vector: np.ndarray) -> "PrototypeSet":
        """μ' = (μ·count + g(x)) / (count + 1)"""
        means, counts = dict(self.means), dict(self.counts)
        count = counts.get(label, 0)
        if count == 0:
            means[label] = np.array(vector, dtype=float)
        else:
            means[label] = (self.means[label] * count + vector) / (count + 1)
        counts[label] = count + 1
        return PrototypeSet(means, counts)

    def remove(self, label: int, vector: np.ndarray) -> "PrototypeSet":
        """μ' = (μ·count − g(x)) / (count − 1)、件数0でクラス削除"""
        if label not in self.counts:
            raise StateError(f"プロトタイプにクラス{label}がありません")
        means, counts = dict(self.means), dict(self.counts)
        count = counts[label]
        if count == 1:
            del means[label]
            del counts[label]
        else:
            means[label] = (self.means[label] * count - vector) / (count - 1)
            counts[label] = count - 1
        return PrototypeSet(means, counts)


@dataclass(frozen=True)
class TrajectoryState:
    """
    軌跡中の1状態

    inst_argmax は各行の inst_sim を達成している選択サンプル、
    proto_cos はクラスごとのプロトタイプ類似度列を保持する。
    blocked は候補から外す行（評価用に取り置いたターゲットなど）。
    """

    state: StateMatrix
    selected: Tuple[Tuple[int, int], ...]
    prototypes: PrototypeSet
    cache: SimilarityCache
    inst_argmax: np.ndarray
    proto_cos: Dict[int, np.ndarray]
    blocked: np.ndarray

    @property
    def step(self) -> int:
        return len(self.selected)

    @property
    def n(self) -> int:
        return len(self.state)

    @property
    def selected_indices(self) -> Tuple[int, ...]:
        return tuple(i for i, _ in self.selected)

    @property
    def key(self) -> frozenset:
        """DAGノードの同一性（選択順序に依存しない）"""
        return frozenset(self.selected_indices)

    def labels(self) -> Dict[int, int]:
        return dict(self.selected)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _class_sim(proto_cos: Dict[int, np.ndarray], n: int) -> np.ndarray:
    if not proto_cos:
        return np.full(n, SENTINEL)
    return np.max(np.vstack(list(proto_cos.values())), axis=0)


def init_state(target_features: np.ndarray, predictions: np.ndarray,
               cache: Optional[SimilarityCache] = None,
               blocked: Optional[Sequence[int]] = None) -> TrajectoryState:
    """
    初期状態 s_0 を作成

    Args:
        target_features: 凍結済み特徴量 g(X_t) (n, d_z)
        predictions: 各ターゲットのクラス確率 (n, K)
        cache: 既存の類似度キャッシュ（省略時はここで構築）
        blocked: 選択候補にしない行のインデックス

    Returns:
        TrajectoryState（col 0,1 は番兵 −1、col 3 は 0）
    """
    ent = prediction_entropy(predictions)
    if cache is None:
        cache = SimilarityCache(target_features)
    if len(ent) != cache.n:
        raise StateError(f"予測行数 {len(ent)} と特徴量行数 {cache.n} が一致しません")
    mask = np.zeros(cache.n, dtype=bool)
    if blocked is not None and len(blocked):
        idx = np.asarray(blocked, dtype=int)
        if idx.min() < 0 or idx.max() >= cache.n:
            raise StateError(f"除外インデックスが範囲外です: {idx.min()}..{idx.max()}")
        mask[idx] = True
    rows = np.zeros((cache.n, 4))
    rows[:, INST_SIM] = SENTINEL
    rows[:, CLASS_SIM] = SENTINEL
    rows[:, ENTROPY] = ent
    return TrajectoryState(
        state=StateMatrix(_readonly(rows)),
        selected=(),
        prototypes=PrototypeSet(),
        cache=cache,
        inst_argmax=_readonly(np.full(cache.n, -1, dtype=int)),
        proto_cos={},
        blocked=_readonly(mask),
    )


def apply_action(ts: TrajectoryState, action: int,
                 oracle: Callable[[int], int]) -> TrajectoryState:
    """
    ターゲット action を選択した子状態を返す

    inst_sim は max 規則で更新する。プロトタイプが移動したクラスの類似度列のみ
    再計算し、class_sim はクラス列の最大値として求める。
    """
    action = int(action)
    if not 0 <= action < ts.n:
        raise StateError(f"アクションが範囲外です: {action}")
    if ts.state.rows[action, LABELED] == 1:
        raise StateError(f"アクション{action}は選択済みです")
    if ts.blocked[action]:
        raise StateError(f"アクション{action}は候補から除外されています")

    label = int(oracle(action))
    cache = ts.cache
    rows = ts.state.rows.copy()

    sim = cache.column(action)
    improves = (sim > rows[:, INST_SIM]) | (ts.inst_argmax < 0)
    rows[:, INST_SIM] = np.where(improves, sim, rows[:, INST_SIM])
    argmax = np.where(improves, action, ts.inst_argmax)

    prototypes = ts.prototypes.add(label, cache.features[action])
    proto_cos = dict(ts.proto_cos)
    proto_cos[label] = _readonly(cache.cosine_to(prototypes.mean(label)))
    rows[:, CLASS_SIM] = _class_sim(proto_cos, ts.n)
    rows[action, LABELED] = 1.0

    return TrajectoryState(
        state=StateMatrix(_readonly(rows)),
        selected=ts.selected + ((action, label),),
        prototypes=prototypes,
        cache=cache,
        inst_argmax=_readonly(argmax),
        proto_cos=proto_cos,
        blocked=ts.blocked,
    )


def remove_action(ts: TrajectoryState, index: int) -> TrajectoryState:
    """
    選択済みサンプル index を取り除いた親状態

    inst_sim は最大値を index で達成していた行だけ残りの選択サンプルから再走査する。
    """
    labels = ts.labels()
    if index not in labels:
        raise StateError(f"サンプル{index}は選択されていません")
    label = labels[index]
    cache = ts.cache
    remaining = [(i, y) for i, y in ts.selected if i != index]
    rows = ts.state.rows.copy()
    argmax = ts.inst_argmax.copy()

    affected = np.flatnonzero(argmax == index)
    if not remaining:
        rows[:, INST_SIM] = SENTINEL
        argmax[:] = -1
    elif affected.size:
        members = np.array([i for i, _ in remaining], dtype=int)
        block = cache.matrix[np.ix_(affected, members)]
        best = np.argmax(block, axis=1)
        rows[affected, INST_SIM] = block[np.arange(len(affected)), best]
        argmax[affected] = members[best]

    prototypes = ts.prototypes.remove(label, cache.features[index])
    proto_cos = dict(ts.proto_cos)
    if label in prototypes.counts:
        proto_cos[label] = _readonly(cache.cosine_to(prototypes.mean(label)))
    else:
        del proto_cos[label]
    rows[:, CLASS_SIM] = _class_sim(proto_cos, ts.n)
    rows[index, LABELED] = 0.0

    return TrajectoryState(
        state=StateMatrix(_readonly(rows)),
        selected=tuple(remaining),
        prototypes=prototypes,
        cache=cache,
        inst_argmax=_readonly(argmax),
        proto_cos=proto_cos,
        blocked=ts.blocked,
    )


def enumerate_parents(ts: TrajectoryState) -> List[Tuple[TrajectoryState, int]]:
    """全親状態 (親, 除去したインデックス)。親の数は選択済み件数に等しい"""
    return [(remove_action(ts, index), index) for index in ts.selected_indices]


def candidate_actions(ts: TrajectoryState) -> np.ndarray:
    """未選択かつ除外されていないインデックス（昇順）。終端判定は呼び出し側で行う"""
    return np.flatnonzero((ts.state.rows[:, LABELED] == 0) & ~ts.blocked)


def compute_state_oracle(target_features: np.ndarray, predictions: np.ndarray,
                         selected: Sequence[Tuple[int, int]]) -> StateMatrix:
    """
    選択集合から状態行列を一から再計算（差分更新の検証用）

    Args:
        target_features: g(X_t)
        predictions: クラス確率
        selected: (インデックス, ラベル) の列
    """
    f = np.asarray(target_features, dtype=float)
    n = len(f)
    rows = np.zeros((n, 4))
    rows[:, ENTROPY] = prediction_entropy(predictions)
    rows[:, INST_SIM] = SENTINEL
    rows[:, CLASS_SIM] = SENTINEL
    if selected:
        idx = np.array([i for i, _ in selected], dtype=int)
        ys = np.array([y for _, y in selected], dtype=int)
        rows[:, INST_SIM] = cosine_similarity(f, f[idx]).max(axis=1)
        classes = np.unique(ys)
        means = np.vstack([f[idx[ys == c]].mean(axis=0) for c in classes])
        rows[:, CLASS_SIM] = cosine_similarity(f, means).max(axis=1)
        rows[idx, LABELED] = 1.0
    return StateMatrix(rows)


def trajectory_records(trajectory: Sequence[TrajectoryState]) -> List[Dict]:
    """s_0 … s_f の列から1ステップ1レコードを作成"""
    records = []
    for ts in trajectory[1:]:
        index, label = ts.selected[-1]
        records.append({
            "step": ts.step,
            "index": index,
            "label": label,
            "row": {name: float(v) for name, v in zip(STATE_COLUMNS, ts.state.rows[index])},
        })
    return records


def dump_trajectory_jsonl(trajectory: Sequence[TrajectoryState], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in trajectory_records(trajectory):
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
