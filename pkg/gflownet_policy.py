#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
フローネットワークによる能動選択ポリシー
エッジフロー F(s→s') を状態行1行から推定し、フローマッチング損失で学習する
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax
from scipy.stats import linregress

from nn_core import (
    IncompatibleCheckpointError, MlpSpec, OptimizerConfig, Parameters, backward,
    forward, init_optimizer_state, init_parameters, load_checkpoint, optimizer_step,
    save_checkpoint,
)
from state_engine import (
    LABELED, TrajectoryState, apply_action, candidate_actions, enumerate_parents,
    init_state, prediction_entropy,
)

logger = logging.getLogger(__name__)

STATE_WIDTH = 4
FULL_MASK = (True, True, True, True)
POLICY_KIND = "flow_network"

__all__ = [
    "PolicyError", "IncompatibleCheckpointError", "FlowNetwork", "TrainConfig",
    "PolicyEnvironment", "EpisodeRecord", "EnumerableInstance", "create_flow_network",
    "edge_flow", "forward_policy", "sample_trajectory", "inflow", "outflow",
    "flow_matching_loss", "loss_plateaued", "train_policy", "exact_terminal_distribution",
    "flow_conservation_gaps", "informativeness", "build_enumerable_instance", "total_variation",
    "save_policy", "load_policy",
]


class PolicyError(ValueError):
    """ポリシー操作の前提違反"""


@dataclass(frozen=True)
class FlowNetwork:
    """
    状態行 (4列) → log エッジフロー のネットワーク

    feature_mask で無効化した列は入力時に0にする（状態特徴のアブレーション用）。
    """

    spec: MlpSpec
    params: Parameters
    feature_mask: Tuple[bool, ...] = FULL_MASK

    def masked(self, rows: np.ndarray) -> np.ndarray:
        return np.asarray(rows, dtype=float) * np.asarray(self.feature_mask, dtype=float)

    def log_flows(self, rows: np.ndarray) -> np.ndarray:
        out, _ = forward(self.spec, self.params, self.masked(np.atleast_2d(rows)))
        return out[:, 0]

    def with_params(self, params: Parameters) -> "FlowNetwork":
        return FlowNetwork(self.spec, params, self.feature_mask)


@dataclass(frozen=True)
class TrainConfig:
    episodes_max: int = 2000
    trajectory_buffer: int = 5
    epsilon: float = 1e-8
    learning_rate: float = 0.001
    budget: int = 5
    early_stop: bool = True
    plateau_window: int = 50
    plateau_tolerance: float = 1e-4
    exploration: float = 0.0
    log_every: int = 100

    def __post_init__(self):
        for name in ("episodes_max", "trajectory_buffer", "budget", "plateau_window"):
            if getattr(self, name) < 0 or (name != "budget" and getattr(self, name) == 0):
                raise PolicyError(f"{name} は正である必要があります: {getattr(self, name)}")
        if not self.epsilon > 0 or not self.learning_rate > 0:
            raise PolicyError("epsilon と learning_rate は正である必要があります")
        if not 0.0 <= self.exploration < 1.0:
            raise PolicyError(f"exploration は [0,1) である必要があります: {self.exploration}")


@dataclass
class PolicyEnvironment:
    """学習に必要な環境一式（初期状態・オラクル・予算・報酬関数）"""

    init: TrajectoryState
    oracle: Callable[[int], int]
    budget: int
    reward_fn: Callable[[TrajectoryState], float]


@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    loss: float
    mean_reward: float
    max_reward: float


def create_flow_network(rng: Optional[np.random.Generator] = None, hidden: int = 8,
                        activation: str = "relu",
                        feature_mask: Sequence[bool] = FULL_MASK,
                        zero: bool = False) -> FlowNetwork:
    """
    フローネットワークを作成

    Args:
        rng: 初期化用乱数（zero=True なら不要）
        hidden: 隠れ層サイズ
        activation: 隠れ層活性化
        feature_mask: 使用する状態列
        zero: 全パラメータ0で作成（全エッジフロー1）
    """
    spec = MlpSpec((STATE_WIDTH, hidden, 1), activation, "identity")
    if len(feature_mask) != STATE_WIDTH:
        raise PolicyError(f"feature_mask は長さ{STATE_WIDTH}である必要があります")
    if zero:
        params = Parameters({k: np.zeros(s) for k, s in spec.block_shapes().items()})
    else:
        if rng is None:
            raise PolicyError("乱数生成器が必要です")
        params = init_parameters(spec, rng)
    return FlowNetwork(spec, params, tuple(bool(m) for m in feature_mask))


def _check_candidate(ts: TrajectoryState, action: int) -> None:
    if not 0 <= action < ts.n or ts.state.rows[action, LABELED] != 0 or ts.blocked[action]:
        raise PolicyError(f"候補でないアクション: {action}")


def edge_flow(fn: FlowNetwork, ts: TrajectoryState, action: int) -> float:
    """F(s, a) = exp(ネットワーク出力)"""
    _check_candidate(ts, int(action))
    return float(np.exp(fn.log_flows(ts.state.rows[int(action)])[0]))


def forward_policy(fn: FlowNetwork, ts: TrajectoryState) -> Tuple[np.ndarray, np.ndarray]:
    """
    候補アクション上の前向き方策 P(a|s) = F(s,a) / Σ F(s,a')

    Returns:
        (候補インデックス, 確率)
    """
    candidates = candidate_actions(ts)
    if len(candidates) == 0:
        raise PolicyError("候補アクションがありません")
    probs = softmax(fn.log_flows(ts.state.rows[candidates]))
    return candidates, probs


def sample_trajectory(fn: FlowNetwork, init: TrajectoryState, budget: int,
                      rng: np.random.Generator, oracle: Callable[[int], int],
                      exploration: float = 0.0) -> List[TrajectoryState]:
    """
    予算を使い切るまで前向き方策で選択した軌跡 (s_0 … s_f)

    exploration > 0 のとき一様分布と混合して探索する（学習時のみ）。
    """
    available = len(candidate_actions(init))
    if budget > available:
        raise PolicyError(f"予算 {budget} が候補数 {available} を超えています")
    trajectory = [init]
    ts = init
    for _ in range(budget):
        candidates, probs = forward_policy(fn, ts)
        if exploration > 0:
            probs = (1 - exploration) * probs + exploration / len(probs)
        action = int(rng.choice(candidates, p=probs))
        ts = apply_action(ts, action, oracle)
        trajectory.append(ts)
    return trajectory


def inflow(fn: FlowNetwork, ts: TrajectoryState) -> float:
    """全親状態からのエッジフローの和"""
    if ts.step == 0:
        raise PolicyError("初期状態には流入がありません")
    parents = enumerate_parents(ts)
    rows = np.vstack([parent.state.rows[removed] for parent, removed in parents])
    return float(np.exp(fn.log_flows(rows)).sum())


def outflow(fn: FlowNetwork, ts: TrajectoryState, budget: Optional[int] = None) -> float:
    """全候補アクションのエッジフローの和（終端状態では呼び出し側が報酬で置き換える）"""
    if budget is not None and ts.step >= budget:
        raise PolicyError("終端状態の流出は報酬で置き換えてください")
    candidates = candidate_actions(ts)
    if len(candidates) == 0:
        raise PolicyError("候補アクションがありません")
    return float(np.exp(fn.log_flows(ts.state.rows[candidates])).sum())


def flow_matching_loss(fn: FlowNetwork, trajectory: Sequence[TrajectoryState],
                       reward: float, epsilon: float = 1e-8) -> Tuple[float, Parameters]:
    """
    フローマッチング損失と勾配

    Σ_{t≥1} (log[ε + inflow(s_t)] − log[ε + (s_t が終端なら r、そうでなければ outflow(s_t))])²

    全エッジ行を1回の順伝播・逆伝播でまとめて処理する。

    Returns:
        (損失, パラメータ勾配)
    """
    if not reward > 0:
        raise PolicyError(f"報酬は正である必要があります: {reward}")
    if len(trajectory) < 2:
        return 0.0, fn.params.zeros_like()

    rows: List[np.ndarray] = []
    groups: List[Tuple[int, int, int, int]] = []
    last = len(trajectory) - 1
    for t in range(1, len(trajectory)):
        ts = trajectory[t]
        in_start = len(rows)
        for parent, removed in enumerate_parents(ts):
            rows.append(parent.state.rows[removed])
        in_end = len(rows)
        if t < last:
            rows.extend(ts.state.rows[candidate_actions(ts)])
        groups.append((in_start, in_end, in_end, len(rows)))

    x = fn.masked(np.vstack(rows))
    out, tape = forward(fn.spec, fn.params, x)
    flows = np.exp(out[:, 0])
    grad_log = np.zeros(len(flows))
    loss = 0.0
    for t, (in_start, in_end, out_start, out_end) in enumerate(groups, start=1):
        in_sum = epsilon + flows[in_start:in_end].sum()
        terminal = t == last
        out_sum = epsilon + (reward if terminal else flows[out_start:out_end].sum())
        diff = math.log(in_sum) - math.log(out_sum)
        loss += diff * diff
        grad_log[in_start:in_end] += 2.0 * diff * flows[in_start:in_end] / in_sum
        if not terminal:
            grad_log[out_start:out_end] -= 2.0 * diff * flows[out_start:out_end] / out_sum

    grads, _ = backward(fn.spec, fn.params, tape, grad_log[:, np.newaxis])
    return float(loss), grads


def loss_plateaued(losses: Sequence[float], window: int, tolerance: float) -> bool:
    """
    損失の停滞判定

    直近 2·window エピソードの損失に回帰直線を当て、window エピソードあたりの
    相対改善を楽観側（傾き − 2·標準誤差）で見積もる。それでも tolerance 未満なら停滞。
    軌跡サンプリングによる損失の揺らぎだけでは停止しない。
    """
    if len(losses) < 2 * window:
        return False
    recent = np.asarray(losses[-2 * window:], dtype=float)
    level = float(np.mean(recent[-window:]))
    if level <= 0.0:
        return True
    fit = linregress(np.arange(len(recent), dtype=float), recent)
    improvement = -(fit.slope - 2.0 * fit.stderr) * window / level
    return improvement < tolerance


def train_policy(fn: FlowNetwork, env: PolicyEnvironment, config: TrainConfig,
                 rng: np.random.Generator) -> Tuple[FlowNetwork, List[EpisodeRecord]]:
    """
    フローマッチング学習

    各エピソードで trajectory_buffer 本の軌跡を生成し、損失をバッファ平均して
    Adam で1ステップ更新する。episodes_max または損失停滞（loss_plateaued）で終了。

    Returns:
        (学習済みネットワーク, エピソードログ)
    """
    optimizer = OptimizerConfig("adam", learning_rate=config.learning_rate)
    state = init_optimizer_state(optimizer, fn.params)
    log: List[EpisodeRecord] = []
    losses: List[float] = []

    for episode in range(config.episodes_max):
        total_loss = 0.0
        total_grads = fn.params.zeros_like()
        rewards = []
        for _ in range(config.trajectory_buffer):
            trajectory = sample_trajectory(fn, env.init, env.budget, rng, env.oracle,
                                           config.exploration)
            reward = float(env.reward_fn(trajectory[-1]))
            loss, grads = flow_matching_loss(fn, trajectory, reward, config.epsilon)
            total_loss += loss
            total_grads = total_grads + grads
            rewards.append(reward)
        scale = 1.0 / config.trajectory_buffer
        params, state = optimizer_step(optimizer, fn.params, total_grads * scale, state)
        fn = fn.with_params(params)

        mean_loss = total_loss * scale
        losses.append(mean_loss)
        log.append(EpisodeRecord(episode, mean_loss, float(np.mean(rewards)), float(np.max(rewards))))
        if config.log_every and (episode + 1) % config.log_every == 0:
            logger.info("エピソード %d: 損失 %.5f 平均報酬 %.4f", episode + 1, mean_loss, np.mean(rewards))
        if config.early_stop and loss_plateaued(losses, config.plateau_window, config.plateau_tolerance):
            logger.info("損失が停滞したため %d エピソードで終了", episode + 1)
            break

    return fn, log


def _enumerate_levels(fn: Optional[FlowNetwork], init: TrajectoryState, budget: int,
                      oracle: Callable[[int], int]) -> List[Dict[frozenset, Tuple[TrajectoryState, float]]]:
    levels = [{init.key: (init, 1.0)}]
    for _ in range(budget):
        nxt: Dict[frozenset, Tuple[TrajectoryState, float]] = {}
        for ts, prob in levels[-1].values():
            if fn is None:
                candidates = candidate_actions(ts)
                probs = np.full(len(candidates), 1.0 / len(candidates))
            else:
                candidates, probs = forward_policy(fn, ts)
            for action, p in zip(candidates, probs):
                key = ts.key | {int(action)}
                if key in nxt:
                    child, acc = nxt[key]
                    nxt[key] = (child, acc + prob * p)
                else:
                    nxt[key] = (apply_action(ts, int(action), oracle), prob * p)
        levels.append(nxt)
    return levels


def exact_terminal_distribution(fn: FlowNetwork, init: TrajectoryState, budget: int,
                                oracle: Callable[[int], int]) -> Dict[frozenset, float]:
    """DAG を全列挙して終端集合ごとの到達確率を正確に計算"""
    levels = _enumerate_levels(fn, init, budget, oracle)
    return {key: prob for key, (_, prob) in levels[-1].items()}


def flow_conservation_gaps(fn: FlowNetwork, init: TrajectoryState, budget: int,
                           oracle: Callable[[int], int], rewards: Dict[frozenset, float],
                           epsilon: float = 1e-8) -> Tuple[Dict[frozenset, float], Dict[frozenset, float]]:
    """
    全ノードのフロー保存誤差 |log(ε+inflow) − log(ε+outflow または報酬)|

    Returns:
        (内部ノードの誤差, 終端ノードの誤差)
    """
    levels = _enumerate_levels(None, init, budget, oracle)
    internal, terminal = {}, {}
    for depth in range(1, budget + 1):
        for key, (ts, _) in levels[depth].items():
            log_in = math.log(epsilon + inflow(fn, ts))
            if depth == budget:
                terminal[key] = abs(log_in - math.log(epsilon + rewards[key]))
            else:
                internal[key] = abs(log_in - math.log(epsilon + outflow(fn, ts)))
    return internal, terminal


def total_variation(p: Dict[frozenset, float], q: Dict[frozenset, float]) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


@dataclass
class EnumerableInstance:
    """全終端集合を列挙できる小規模インスタンス"""

    features: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    budget: int
    rewards: Dict[frozenset, float] = field(default_factory=dict)

    @property
    def init(self) -> TrajectoryState:
        return init_state(self.features, self.predictions)

    def oracle(self, index: int) -> int:
        return int(self.labels[index])

    def reward_fn(self, ts: TrajectoryState) -> float:
        return self.rewards[ts.key]

    def target_distribution(self) -> Dict[frozenset, float]:
        total = sum(self.rewards.values())
        return {k: v / total for k, v in self.rewards.items()}

    def environment(self) -> PolicyEnvironment:
        return PolicyEnvironment(self.init, self.oracle, self.budget, self.reward_fn)


# ゴロム定規 {0,1,4,10,12,17}: 全ペアの角度差が異なり、コサイン類似度も重複しない
_RULER = (0, 1, 4, 10, 12, 17)
# 弧の最大角。選択後の類似度は [0.5, 1] に収まり、番兵 −1 の s_0 行と重ならない
_MAX_ANGLE = math.pi / 3


def informativeness(entropies: np.ndarray, ratio: float) -> np.ndarray:
    """エントロピーを [1, ratio] の情報量 u = ratio^((H − H_min)/(H_max − H_min)) に変換"""
    h = np.asarray(entropies, dtype=float)
    span = float(h.max() - h.min()) if len(h) else 0.0
    scaled = (h - h.min()) / span if span > 0 else np.zeros_like(h)
    return np.power(ratio, scaled)


def build_enumerable_instance(n: int = 6, budget: int = 2, num_classes: int = 3,
                              constant_reward: Optional[float] = None,
                              reward_ratio: float = 3.0) -> EnumerableInstance:
    """
    比例サンプリング検証用の小規模インスタンス

    特徴量は単位円の 0〜60° の弧上、予測エントロピーは全サンプルで異なる。
    報酬表は終端集合に含まれるサンプルの情報量 u_i の和を平均1に正規化したもの
    （constant_reward 指定時は定数）。u_i はエントロピーの単調関数なので、
    候補自身の状態行だけを見るフローネットワークでフロー保存解を表現できる。

    Args:
        n: サンプル数
        budget: 予算（終端集合の大きさ）
        num_classes: 予測のクラス数
        constant_reward: 全終端集合に共通の報酬
        reward_ratio: 情報量の最大/最小比
    """
    if n < 1 or not 0 < budget <= n:
        raise PolicyError(f"n={n}, budget={budget} では終端集合を作れません")
    if not reward_ratio >= 1.0:
        raise PolicyError(f"reward_ratio は1以上である必要があります: {reward_ratio}")
    if n == 1:
        angles = np.zeros(1)
    elif n > len(_RULER):
        angles = np.linspace(0.0, _MAX_ANGLE, n) + np.arange(n) ** 2 * 1e-4
    else:
        angles = np.array(_RULER[:n], dtype=float) * _MAX_ANGLE / _RULER[n - 1]
    features = np.column_stack([np.cos(angles), np.sin(angles)])
    confidences = np.linspace(0.4, 0.95, n)
    predictions = np.zeros((n, num_classes))
    labels = np.arange(n) % num_classes
    for i in range(n):
        predictions[i] = (1.0 - confidences[i]) / (num_classes - 1)
        predictions[i, labels[i]] = confidences[i]
    gains = informativeness(prediction_entropy(predictions), reward_ratio)
    combos = [frozenset(c) for c in itertools.combinations(range(n), budget)]
    if constant_reward is not None:
        rewards = {key: float(constant_reward) for key in combos}
    else:
        sums = np.array([gains[sorted(key)].sum() for key in combos])
        rewards = {key: float(s) for key, s in zip(combos, sums / sums.mean())}
    return EnumerableInstance(features, predictions, labels, budget, rewards)


def save_policy(path: str, fn: FlowNetwork, extra: Optional[Dict] = None) -> None:
    meta = {"kind": POLICY_KIND, "feature_mask": list(fn.feature_mask)}
    meta.update(extra or {})
    save_checkpoint(path, fn.spec, fn.params, meta)


def load_policy(path: str, expected: Optional[MlpSpec] = None) -> FlowNetwork:
    """ポリシーチェックポイントを読込（構造不一致は IncompatibleCheckpointError）"""
    spec, params, extra = load_checkpoint(path, expected)
    if extra.get("kind") != POLICY_KIND:
        raise IncompatibleCheckpointError(f"フローネットワークのチェックポイントではありません: {extra.get('kind')}")
    if spec.input_dim != STATE_WIDTH or spec.output_dim != 1:
        raise IncompatibleCheckpointError(f"入出力次元が不正です: {spec.layer_sizes}")
    raw_mask = extra.get("feature_mask", FULL_MASK)
    if not isinstance(raw_mask, (list, tuple)) or len(raw_mask) != STATE_WIDTH:
        raise IncompatibleCheckpointError(f"feature_mask が不正です: {raw_mask!r}")
    mask = tuple(bool(m) for m in raw_mask)
    return FlowNetwork(spec, params, mask)
