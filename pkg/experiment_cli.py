#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
GFlowDA 実験ランナー
シナリオ生成・能動選択（GFlowDA / Random / Entropy）・最終GUAN学習・
上界検証・比例サンプリング検証をコマンドラインから実行する
"""

from __future__ import annotations

import argparse
import inspect
import json
import logging
import math
import os
import sys
import time
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.decomposition import PCA

from experiment_report import emit_report, load_results, summarize_results, write_summary_workbook
from gflownet_policy import (
    EpisodeRecord, FlowNetwork, PolicyEnvironment, PolicyError, TrainConfig,
    build_enumerable_instance, create_flow_network, exact_terminal_distribution,
    flow_conservation_gaps, load_policy, sample_trajectory, save_policy, total_variation,
    train_policy,
)
from guan import GuanConfig, GuanError, GuanModel, create_guan, extract_features, predict, train_guan
from guda_data import (
    Domain, GudaDataError, ScenarioSpec, apply_subsample_protocol, generate_scenario, jsd,
    label_distribution_from_labels, load_domain_csv, load_spec_json, make_guda_spec, prior_jsd,
    save_domain_csv, save_spec_json, shift_target_priors_to_jsd,
)
from nn_core import HIDDEN_ACTIVATIONS, NnError
from reward import RewardBreakdown, RewardConfig, RewardError, average_class_accuracy, reward_components
from state_engine import STATE_COLUMNS, TrajectoryState, candidate_actions, init_state
from theory import BoundReport, LabelSpaces, TheoryError, estimate_joint, target_risk_bound, verify_bound

logger = logging.getLogger(__name__)

STRATEGIES = ("gflowda", "random", "entropy")
PRESETS = ("guda",)
BUDGET_EPSILON = 1e-9
EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ASSERTION = 2

# 比例サンプリング検証の合格基準
PROPORTIONALITY_TV = 0.05
CONSERVATION_GAP = 0.05


class ExperimentError(ValueError):
    """実験実行時の不整合"""


class ConfigError(ExperimentError):
    """設定ファイル・引数の誤り"""


# ---------------------------------------------------------------------------
# 乱数
# ---------------------------------------------------------------------------

def substream(seed: int, name: str) -> np.random.Generator:
    """ルートシードから名前付きの独立な乱数列を作る"""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))]))


def _subseed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2 ** 31 - 1))


# ---------------------------------------------------------------------------
# 設定
# ---------------------------------------------------------------------------

_GUDA_PARAMS = frozenset(inspect.signature(make_guda_spec).parameters) - {"seed"}
_SCENARIO_KEYS = frozenset({"preset", "params", "spec_path", "source_csv", "target_csv",
                            "subsample", "prior_shift_jsd"})


@dataclass(frozen=True)
class ScenarioConfig:
    """
    シナリオの取得方法

    preset（合成シナリオ）/ spec_path（シナリオ定義JSON）/
    source_csv + target_csv（ドメインCSV）のいずれか1つを指定する。
    """

    preset: Optional[str] = "guda"
    params: Dict = field(default_factory=dict)
    spec_path: Optional[str] = None
    source_csv: Optional[str] = None
    target_csv: Optional[str] = None
    subsample: Dict[str, Dict[int, float]] = field(default_factory=dict)
    prior_shift_jsd: Optional[float] = None

    def __post_init__(self):
        mode = self.mode
        if mode == "csv" and not (self.source_csv and self.target_csv):
            raise ConfigError("source_csv と target_csv は両方指定してください")
        if mode == "preset":
            if self.preset not in PRESETS:
                raise ConfigError(f"不明なプリセット: {self.preset}")
            unknown = set(self.params) - _GUDA_PARAMS
            if unknown:
                raise ConfigError(f"シナリオパラメータが不正です: {sorted(unknown)}")
        elif self.params:
            raise ConfigError("params はプリセット指定時のみ使えます")
        if mode == "csv" and self.prior_shift_jsd is not None:
            raise ConfigError("prior_shift_jsd は CSV シナリオには適用できません")
        if self.prior_shift_jsd is not None and not 0 < self.prior_shift_jsd < 1:
            raise ConfigError(f"prior_shift_jsd は (0,1) である必要があります: {self.prior_shift_jsd}")
        unknown_roles = set(self.subsample) - {"source", "target"}
        if unknown_roles:
            raise ConfigError(f"subsample のキーは source / target のみです: {sorted(unknown_roles)}")

    @property
    def mode(self) -> str:
        if self.source_csv or self.target_csv:
            return "csv"
        if self.spec_path:
            return "spec"
        return "preset"


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    budget_fraction: float = 0.05
    budget_fractions: Tuple[float, ...] = ()
    strategy: str = "gflowda"
    seeds: Tuple[int, ...] = (0,)
    output_dir: str = "results"
    guan_epochs_per_reward: int = 50
    warmup_epochs: int = 100
    final_guan_epochs: int = 200
    terminal_samples: int = 32
    eval_split_fraction: float = 0.2
    fine_tune_episodes: int = 30
    state_features: Tuple[str, ...] = STATE_COLUMNS
    policy_hidden: int = 8
    policy_activation: str = "relu"
    train: TrainConfig = field(default_factory=TrainConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    guan: GuanConfig = field(default_factory=GuanConfig)

    def __post_init__(self):
        for fraction in (self.budget_fraction, *self.budget_fractions):
            if not 0 < fraction <= 1:
                raise ConfigError(f"budget_fraction は (0,1] である必要があります: {fraction}")
        if len(set(self.budget_fractions)) != len(self.budget_fractions):
            raise ConfigError(f"budget_fractions に重複があります: {list(self.budget_fractions)}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"不明な戦略: {self.strategy}（{', '.join(STRATEGIES)}）")
        if not self.seeds:
            raise ConfigError("seeds が空です")
        if any(int(s) != s or s < 0 for s in self.seeds):
            raise ConfigError(f"シードは0以上の整数である必要があります: {list(self.seeds)}")
        for name in ("guan_epochs_per_reward", "warmup_epochs", "final_guan_epochs", "fine_tune_episodes"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} は0以上である必要があります")
        if self.terminal_samples < 1 or self.policy_hidden < 1:
            raise ConfigError("terminal_samples と policy hidden は1以上である必要があります")
        if not 0 < self.eval_split_fraction < 1:
            raise ConfigError(f"eval_split_fraction は (0,1) である必要があります: {self.eval_split_fraction}")
        unknown = set(self.state_features) - set(STATE_COLUMNS)
        if unknown or not self.state_features:
            raise ConfigError(f"state_features は {list(STATE_COLUMNS)} の空でない部分集合です: {sorted(unknown)}")
        if self.policy_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigError(f"不明な活性化関数: {self.policy_activation}")

    @property
    def weights(self):
        return self.guan.weights

    @property
    def feature_mask(self) -> Tuple[bool, ...]:
        return tuple(column in self.state_features for column in STATE_COLUMNS)

    @property
    def budget_grid(self) -> Tuple[float, ...]:
        """予算スイープの比率（budget_fractions 未指定なら budget_fraction のみ）"""
        return self.budget_fractions or (self.budget_fraction,)

    def budget_for(self, n: int) -> int:
        return budget_for_fraction(self.budget_fraction, n)


def budget_for_fraction(fraction: float, n: int) -> int:
    """予算 b = ⌈fraction · n⌉"""
    budget = math.ceil(fraction * n - BUDGET_EPSILON)
    if budget < 1 or budget > n:
        raise ConfigError(f"予算 {budget} がターゲット件数 {n} に対して不正です")
    return budget


_TOP_KEYS = frozenset({
    "scenario", "budget_fraction", "budget_fractions", "strategy", "seeds", "output_dir",
    "guan_epochs_per_reward", "warmup_epochs", "final_guan_epochs", "terminal_samples", "eval_split_fraction",
    "fine_tune_episodes", "state_features", "policy", "train", "reward", "guan", "weights",
})
_SCALAR_KEYS = ("budget_fraction", "strategy", "output_dir", "guan_epochs_per_reward",
                "warmup_epochs", "final_guan_epochs", "terminal_samples", "eval_split_fraction",
                "fine_tune_episodes")


def _section(data: Mapping, name: str) -> Dict:
    value = data.get(name, {})
    if not isinstance(value, Mapping):
        raise ConfigError(f"{name} セクションはオブジェクトである必要があります")
    return dict(value)


def _scenario_from_dict(data: Mapping) -> ScenarioConfig:
    unknown = set(data) - _SCENARIO_KEYS
    if unknown:
        raise ConfigError(f"scenario の未知のキー: {sorted(unknown)}")
    data = dict(data)
    if "preset" not in data and any(data.get(k) for k in ("spec_path", "source_csv", "target_csv")):
        data["preset"] = None
    subsample = {}
    for role, retain in data.pop("subsample", {}).items():
        subsample[role] = {int(label): float(fraction) for label, fraction in retain.items()}
    return ScenarioConfig(subsample=subsample, **data)


def config_from_dict(data: Mapping) -> ExperimentConfig:
    """
    辞書から実験設定を作成

    欠けたセクションは既定値、未知のキーや不正な値は ConfigError。
    """
    if not isinstance(data, Mapping):
        raise ConfigError("設定はJSONオブジェクトである必要があります")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"未知の設定キー: {sorted(unknown)}")
    try:
        scenario = _scenario_from_dict(_section(data, "scenario"))
        policy = _section(data, "policy")
        if set(policy) - {"hidden", "activation"}:
            raise ConfigError(f"policy の未知のキー: {sorted(set(policy) - {'hidden', 'activation'})}")
        guan_data = _section(data, "guan")
        if "weights" in data:
            guan_data["weights"] = _section(data, "weights")
        reward_data = _section(data, "reward")
        if isinstance(reward_data.get("kernel_bandwidths"), list):
            reward_data["kernel_bandwidths"] = tuple(reward_data["kernel_bandwidths"])
        kwargs = {key: data[key] for key in _SCALAR_KEYS if key in data}
        if "seeds" in data:
            kwargs["seeds"] = tuple(data["seeds"])
        if "budget_fractions" in data:
            kwargs["budget_fractions"] = tuple(float(f) for f in data["budget_fractions"])
        if "state_features" in data:
            kwargs["state_features"] = tuple(data["state_features"])
        return ExperimentConfig(
            scenario=scenario,
            policy_hidden=int(policy.get("hidden", 8)),
            policy_activation=policy.get("activation", "relu"),
            train=TrainConfig(**_section(data, "train")),
            reward=RewardConfig(**reward_data),
            guan=GuanConfig.from_dict(guan_data),
            **kwargs,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"設定値が不正です: {exc}") from exc


def load_config(path: str) -> ExperimentConfig:
    """JSON設定ファイルを読込（存在しなければ FileNotFoundError）"""
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"設定ファイルのJSONが不正です: {path}: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(config: ExperimentConfig) -> Dict:
    data = asdict(config)
    data["policy"] = {"hidden": data.pop("policy_hidden"), "activation": data.pop("policy_activation")}
    data["weights"] = data["guan"].pop("weights")
    data["seeds"] = list(config.seeds)
    data["budget_fractions"] = list(config.budget_fractions)
    data["state_features"] = list(config.state_features)
    return data


# ---------------------------------------------------------------------------
# シナリオ
# ---------------------------------------------------------------------------

def build_domains(config: ExperimentConfig, seed: int) -> Tuple[Domain, Domain, Optional[ScenarioSpec]]:
    """
    設定とシードからソース・ターゲットドメインを用意

    Returns:
        (ソース, ターゲット, シナリオ定義（CSV 読込時は None）)
    """
    sc = config.scenario
    spec = None
    if sc.mode == "csv":
        source = load_domain_csv(sc.source_csv, "source")
        target = load_domain_csv(sc.target_csv, "target")
    else:
        if sc.mode == "spec":
            spec = load_spec_json(sc.spec_path)
        else:
            spec = make_guda_spec(**sc.params, seed=_subseed(seed, "scenario"))
        if sc.prior_shift_jsd is not None:
            spec = shift_target_priors_to_jsd(spec, sc.prior_shift_jsd)
        source, target = generate_scenario(spec)

    if sc.subsample.get("source"):
        source = apply_subsample_protocol(source, sc.subsample["source"], _subseed(seed, "subsample-source"))
    if sc.subsample.get("target"):
        target = apply_subsample_protocol(target, sc.subsample["target"], _subseed(seed, "subsample-target"))
    if target.oracle is None:
        raise ConfigError("ターゲットに正解ラベル（オラクル）がありません")
    return source, target, spec


# ---------------------------------------------------------------------------
# 実行
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    """1回の実行（戦略 × シード × 予算）の結果"""

    strategy: str
    seed: int
    budget: int
    avg_class_accuracy: float
    jsd_selected_vs_target: float
    reward: float
    mmd: float
    discovered_classes: int
    selected_indices: Tuple[int, ...]
    curves: List[EpisodeRecord]
    bound: BoundReport
    projection: pd.DataFrame
    runtime: float = 0.0
    budget_fraction: Optional[float] = None

    def __post_init__(self):
        metrics = (self.avg_class_accuracy, self.jsd_selected_vs_target, self.reward, self.mmd)
        if not all(math.isfinite(m) for m in metrics):
            raise ExperimentError(f"非有限の指標があります: {metrics}")
        if len(set(self.selected_indices)) != len(self.selected_indices):
            raise ExperimentError("選択インデックスに重複があります")
        if len(self.selected_indices) != self.budget:
            raise ExperimentError(f"選択数 {len(self.selected_indices)} が予算 {self.budget} と一致しません")


def held_out_split(n: int, budget: int, fraction: float,
                   rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    精度評価用に取り置くターゲット行

    取り置き件数は ⌈fraction·n⌉。ただし予算分の候補が残るよう n − budget で頭打ちにする。
    予算がターゲット全体に及ぶときは取り置けないため、全ターゲットで評価する。

    Returns:
        (評価インデックス, 選択候補から除外するインデックス)
    """
    n_eval = min(math.ceil(fraction * n - BUDGET_EPSILON), n - budget)
    if n_eval < 1:
        logger.warning("予算 %d がターゲット %d 件を使い切るため、精度は全ターゲットで評価します", budget, n)
        return np.arange(n), np.zeros(0, dtype=int)
    eval_indices = np.sort(rng.choice(n, size=n_eval, replace=False))
    return eval_indices, eval_indices


@dataclass
class RunContext:
    """
    1シード分の共有状態

    warm はソースのみで事前学習した GUAN、latent / probs はそのターゲット特徴と予測。
    予算ごとの初期状態 init と評価用の取り置き eval_indices は for_budget で作る。
    取り置いた行は init で選択候補から除外される。
    報酬は選択集合ごとにメモ化し、同じ予算の戦略間で共有する。
    """

    config: ExperimentConfig
    seed: int
    source: Domain
    target: Domain
    warm: GuanModel
    latent: np.ndarray
    probs: np.ndarray
    truth: np.ndarray
    budget_fraction: float = 0.0
    budget: int = 0
    init: Optional[TrajectoryState] = None
    eval_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    rewards: Dict[frozenset, RewardBreakdown] = field(default_factory=dict)

    def for_budget(self, fraction: float) -> "RunContext":
        """予算比率 fraction 用の初期状態と評価分割（報酬メモは新規）"""
        n = len(self.target)
        budget = budget_for_fraction(fraction, n)
        eval_indices, blocked = held_out_split(n, budget, self.config.eval_split_fraction,
                                               substream(self.seed, "eval-split"))
        init = init_state(self.latent, self.probs, blocked=blocked)
        logger.info("シード %d: 予算 %d（比率 %g）評価用 %d 件", self.seed, budget, fraction, len(eval_indices))
        return replace(self, budget_fraction=fraction, budget=budget, init=init,
                       eval_indices=eval_indices, rewards={})

    @property
    def candidates(self) -> np.ndarray:
        return candidate_actions(self.init)

    def oracle(self, index: int) -> int:
        return self.target.oracle(index)

    def selected_domain(self, indices: Sequence[int]) -> Domain:
        idx = np.asarray(sorted(int(i) for i in indices), dtype=int)
        labels = np.array([self.oracle(i) for i in idx], dtype=int)
        return Domain(self.target.features[idx], labels, "selected", self.target.label_space)

    def evaluate(self, indices: Sequence[int]) -> RewardBreakdown:
        """GUAN のクローンを短く学習して報酬を計算"""
        key = frozenset(int(i) for i in indices)
        if key in self.rewards:
            return self.rewards[key]
        ordered = sorted(key)
        selected = self.selected_domain(ordered)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, zlib.crc32(b"reward"), *ordered]))
        model, _ = train_guan(self.warm.clone(), self.source, selected, self.target,
                              self.config.guan_epochs_per_reward, rng)
        z_t = extract_features(model, self.target.features)
        predictions = predict(model, self.target.features[self.eval_indices])[0]
        breakdown = reward_components(z_t, z_t[ordered], predictions, self.truth[self.eval_indices],
                                      self.config.reward)
        self.rewards[key] = breakdown
        return breakdown

    def reward_fn(self, ts: TrajectoryState) -> float:
        return self.evaluate(ts.selected_indices).reward


def prepare_run(config: ExperimentConfig, seed: int,
                budget_fraction: Optional[float] = None) -> RunContext:
    """シナリオ生成・ソースのみの事前学習・初期状態の作成（予算比率の既定は config.budget_fraction）"""
    source, target, _ = build_domains(config, seed)
    warm = create_guan(source.dim, np.unique(source.labels), config.guan, substream(seed, "guan-init"))
    warm, _ = train_guan(warm, source, None, target, config.warmup_epochs, substream(seed, "warmup"))
    _, probs, _ = predict(warm, target.features)
    logger.info("シード %d: ソース %d 件 ターゲット %d 件", seed, len(source), len(target))
    shared = RunContext(config, seed, source, target, warm, extract_features(warm, target.features),
                        probs, target.ground_truth())
    return shared.for_budget(config.budget_fraction if budget_fraction is None else budget_fraction)


def estimated_bound(model: GuanModel, source: Domain, selected: Domain,
                    target: Domain, truth: np.ndarray) -> BoundReport:
    """経験同時分布から上界の各項を推定"""
    universe = model.slot_labels.tolist()
    joint_s = estimate_joint(source.labels, predict(model, source.features)[0], universe)
    joint_l = estimate_joint(selected.labels, predict(model, selected.features)[0], universe)
    joint_t = estimate_joint(truth, predict(model, target.features)[0], universe)
    spaces = LabelSpaces(set(source.labels.tolist()), set(selected.labels.tolist()), set(truth.tolist()))
    return target_risk_bound(joint_s, joint_l, joint_t, spaces)


def projection_frame(model: GuanModel, target: Domain, truth: np.ndarray,
                     selected: Sequence[int]) -> pd.DataFrame:
    """潜在特徴の2次元PCA射影（外部プロット用）"""
    z = extract_features(model, target.features)
    components = min(2, z.shape[1], len(z))
    coords = np.zeros((len(z), 2))
    coords[:, :components] = PCA(n_components=components, svd_solver="full").fit_transform(z)
    flags = np.zeros(len(z), dtype=int)
    flags[list(selected)] = 1
    return pd.DataFrame({"x": coords[:, 0], "y": coords[:, 1], "label": truth, "selected": flags})


def finalize_run(ctx: RunContext, strategy: str, order: Sequence[int],
                 curves: List[EpisodeRecord], started: float) -> RunResult:
    """選択集合で最終GUANを学習して評価指標をまとめる"""
    order = tuple(int(i) for i in order)
    selected = ctx.selected_domain(order)
    model, _ = train_guan(ctx.warm.clone(), ctx.source, selected, ctx.target,
                          ctx.config.final_guan_epochs, substream(ctx.seed, "final"))
    predictions = predict(model, ctx.target.features)[0]
    breakdown = ctx.evaluate(order)
    result = RunResult(
        strategy=strategy,
        seed=ctx.seed,
        budget=ctx.budget,
        avg_class_accuracy=average_class_accuracy(predictions, ctx.truth),
        jsd_selected_vs_target=jsd(label_distribution_from_labels(selected.labels),
                                   label_distribution_from_labels(ctx.truth)),
        reward=breakdown.reward,
        mmd=breakdown.mmd,
        discovered_classes=len(set(selected.labels.tolist())),
        selected_indices=order,
        curves=list(curves),
        bound=estimated_bound(model, ctx.source, selected, ctx.target, ctx.truth),
        projection=projection_frame(model, ctx.target, ctx.truth, order),
        runtime=time.perf_counter() - started,
        budget_fraction=ctx.budget_fraction,
    )
    logger.info("%s シード %d 予算 %d: 精度 %.4f JSD %.4f 発見クラス %d", strategy, ctx.seed, ctx.budget,
                result.avg_class_accuracy, result.jsd_selected_vs_target, result.discovered_classes)
    return result


def select_best_terminal(ctx: RunContext, fn: FlowNetwork, samples: int,
                         rng: np.random.Generator) -> Tuple[int, ...]:
    """学習済み方策から samples 本の終端集合を生成し、報酬最大のものを採用（同値なら先着）"""
    best_order: Tuple[int, ...] = ()
    best_reward = -math.inf
    for _ in range(samples):
        terminal = sample_trajectory(fn, ctx.init, ctx.budget, rng, ctx.oracle)[-1]
        value = ctx.reward_fn(terminal)
        if value > best_reward:
            best_reward, best_order = value, terminal.selected_indices
    return best_order


def run_gflowda(config: ExperimentConfig, seed: int, policy: Optional[FlowNetwork] = None,
                episodes: Optional[int] = None, strategy: str = "gflowda",
                policy_path: Optional[str] = None, ctx: Optional[RunContext] = None) -> RunResult:
    """
    GFlowDA の1回の実行

    各エピソードで軌跡をサンプルし、報酬（GUAN クローンの短期学習後の
    −MMD + 精度）でフローマッチング更新する。学習後に terminal_samples 本の
    終端集合から報酬最大のものを最終選択とする。最終サンプリングは学習とは別の
    乱数列（terminal-samples）を使う。

    Args:
        config: 実験設定
        seed: ルートシード
        policy: 既存の方策（転移時）。省略時は新規作成
        episodes: 学習エピソード数の上書き（0 なら学習しない）
        strategy: 結果に記録する戦略名
        policy_path: 学習済み方策の保存先
        ctx: 共有する実行コンテキスト（省略時は prepare_run で作成）

    Returns:
        RunResult
    """
    started = time.perf_counter()
    if ctx is None:
        ctx = prepare_run(config, seed)
    fn = policy
    if fn is None:
        fn = create_flow_network(substream(seed, "policy-init"), hidden=config.policy_hidden,
                                 activation=config.policy_activation, feature_mask=config.feature_mask)
    train_config = replace(config.train, budget=ctx.budget)
    if episodes is not None and episodes > 0:
        train_config = replace(train_config, episodes_max=episodes)
    rollout = substream(seed, "rollout")
    curves: List[EpisodeRecord] = []
    if episodes is None or episodes > 0:
        env = PolicyEnvironment(ctx.init, ctx.oracle, ctx.budget, ctx.reward_fn)
        fn, curves = train_policy(fn, env, train_config, rollout)
    if policy_path:
        save_policy(policy_path, fn, {"seed": seed, "budget": ctx.budget,
                                      "budget_fraction": ctx.budget_fraction})
    order = select_best_terminal(ctx, fn, config.terminal_samples, substream(seed, "terminal-samples"))
    return finalize_run(ctx, strategy, order, curves, started)


def entropy_selection(entropies: np.ndarray, budget: int,
                      candidates: Optional[Sequence[int]] = None) -> np.ndarray:
    """候補のうちエントロピー降順の上位 budget 件（同値はインデックス昇順）"""
    entropies = np.asarray(entropies, dtype=float)
    pool = np.arange(len(entropies)) if candidates is None else np.sort(np.asarray(candidates, dtype=int))
    if budget > len(pool):
        raise ExperimentError(f"予算 {budget} が候補数 {len(pool)} を超えています")
    return pool[np.argsort(-entropies[pool], kind="stable")[:budget]]


def run_baseline(config: ExperimentConfig, seed: int, strategy: Optional[str] = None,
                 ctx: Optional[RunContext] = None) -> RunResult:
    """Random / Entropy ベースライン。候補と最終GUAN学習は GFlowDA と同一"""
    strategy = strategy or config.strategy
    if strategy not in ("random", "entropy"):
        raise ConfigError(f"ベースライン戦略ではありません: {strategy}")
    started = time.perf_counter()
    if ctx is None:
        ctx = prepare_run(config, seed)
    if strategy == "random":
        order = substream(seed, "selection").choice(ctx.candidates, size=ctx.budget, replace=False)
    else:
        order = entropy_selection(ctx.init.state.entropy, ctx.budget, ctx.candidates)
    return finalize_run(ctx, strategy, order, [], started)


def transfer_policy(checkpoint_path: str, config: ExperimentConfig, seed: int,
                    fine_tune: bool = False, ctx: Optional[RunContext] = None) -> RunResult:
    """
    学習済み方策を新しい設定に転移

    fine_tune=False なら方策を固定、True なら fine_tune_episodes だけ追加学習する。
    """
    fn = load_policy(checkpoint_path)
    episodes = config.fine_tune_episodes if fine_tune else 0
    strategy = "transfer-finetuned" if fine_tune else "transfer-frozen"
    return run_gflowda(config, seed, policy=fn, episodes=episodes, strategy=strategy, ctx=ctx)


def run_experiment(config: ExperimentConfig, strategies: Sequence[str],
                   policy_dir: Optional[str] = None) -> List[RunResult]:
    """
    全シード × 予算比率 × 指定戦略を順に実行

    シナリオ生成とソースのみの事前学習はシードごとに1回だけ行い、
    同じ予算の戦略間で初期状態・評価分割・報酬メモを共有する。
    """
    results = []
    grid = config.budget_grid
    for seed in config.seeds:
        shared = prepare_run(config, seed, grid[0])
        for fraction in grid:
            ctx = shared if fraction == shared.budget_fraction else shared.for_budget(fraction)
            for strategy in strategies:
                if strategy == "gflowda":
                    path = None
                    if policy_dir:
                        os.makedirs(policy_dir, exist_ok=True)
                        suffix = f"_b{fraction:g}" if len(grid) > 1 else ""
                        path = os.path.join(policy_dir, f"policy_seed{seed}{suffix}.json")
                    results.append(run_gflowda(config, seed, policy_path=path, ctx=ctx))
                else:
                    results.append(run_baseline(config, seed, strategy, ctx=ctx))
    return results


def proportionality_check(seed: int = 0, episodes: int = 2000, samples: int = 20000) -> Dict[str, float]:
    """
    列挙可能インスタンス (n=6, b=2) で比例サンプリングとフロー保存を検証

    既定のフローネットワーク（隠れ層8・ReLU）と既定の学習設定
    （学習率0.001・バッファ5・早期停止あり）をそのまま使う。

    Returns:
        exact_tv / empirical_tv / max_internal_gap / episodes
    """
    instance = build_enumerable_instance(n=6, budget=2)
    rng = np.random.default_rng(seed)
    fn = create_flow_network(rng)
    config = TrainConfig(episodes_max=episodes, budget=instance.budget, log_every=0)
    trained, log = train_policy(fn, instance.environment(), config, rng)
    target = instance.target_distribution()
    init = instance.init
    exact = exact_terminal_distribution(trained, init, instance.budget, instance.oracle)
    counts = Counter(sample_trajectory(trained, init, instance.budget, rng, instance.oracle)[-1].key
                     for _ in range(samples))
    empirical = {key: c / samples for key, c in counts.items()}
    internal, _ = flow_conservation_gaps(trained, init, instance.budget, instance.oracle, instance.rewards)
    return {
        "exact_tv": total_variation(exact, target),
        "empirical_tv": total_variation(empirical, target),
        "max_internal_gap": max(internal.values()),
        "episodes": len(log),
    }


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = (args.seed,)
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    if getattr(args, "budgets", None):
        overrides["budget_fractions"] = tuple(args.budgets)
    strategy = getattr(args, "strategy", None)
    if strategy and strategy != "all":
        overrides["strategy"] = strategy
    return replace(config, **overrides) if overrides else config


def _print_results(results: Sequence[RunResult]) -> None:
    print("📊 実行結果:")
    for r in results:
        print(f"  {r.strategy:<20} seed={r.seed:<3} b={r.budget:<4} 精度={r.avg_class_accuracy:.4f} "
              f"JSD={r.jsd_selected_vs_target:.4f} 報酬={r.reward:.4f} "
              f"発見クラス={r.discovered_classes} ({r.runtime:.1f}秒)")


def _write_config(config: ExperimentConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        json.dump(config_to_dict(config), f, ensure_ascii=False, indent=2)


def cmd_generate(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    seed = config.seeds[0]
    source, target, spec = build_domains(config, seed)
    os.makedirs(config.output_dir, exist_ok=True)
    save_domain_csv(source, os.path.join(config.output_dir, "source.csv"))
    save_domain_csv(target, os.path.join(config.output_dir, "target.csv"))
    print(f"✅ シナリオを生成: {config.output_dir}（ソース {len(source)} 件 / ターゲット {len(target)} 件）")
    if spec is not None:
        save_spec_json(spec, os.path.join(config.output_dir, "spec.json"))
        print(f"  d_JS(P_s, P_t) = {prior_jsd(spec):.4f}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    strategies = STRATEGIES if args.strategy == "all" else (config.strategy,)
    print(f"🚀 実行開始: 戦略 {', '.join(strategies)} / シード {list(config.seeds)} "
          f"/ 予算比率 {list(config.budget_grid)}")
    results = run_experiment(config, strategies, os.path.join(config.output_dir, "policies"))
    emit_report(results, config.output_dir)
    _write_config(config, config.output_dir)
    _print_results(results)
    print(f"✅ 結果を保存: {config.output_dir}")
    return EXIT_OK


def cmd_transfer(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(args.checkpoint)
    modes = {"frozen": (False,), "finetune": (True,), "both": (False, True)}[args.mode]
    results = [transfer_policy(args.checkpoint, config, seed, fine_tune)
               for seed in config.seeds for fine_tune in modes]
    emit_report(results, config.output_dir)
    _write_config(config, config.output_dir)
    _print_results(results)
    return EXIT_OK


def cmd_bound_check(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    reports, violations = verify_bound(args.scenarios, seed=args.seed or 0)
    worst = min(r.slack for r in reports)
    print(f"📊 上界検証: {len(reports)} シナリオ 最小slack {worst:.3e} "
          f"({time.perf_counter() - started:.1f}秒)")
    if violations:
        print(f"❌ 上界違反: {len(violations)} 件（シナリオ {violations[:10]}）")
        return EXIT_ASSERTION
    print("✅ すべてのシナリオで ε_t ≤ 上界")
    return EXIT_OK


def cmd_proportionality(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    stats = proportionality_check(args.seed or 0, args.episodes, args.samples)
    print(f"📊 比例サンプリング: TV（厳密）{stats['exact_tv']:.4f} "
          f"TV（サンプリング）{stats['empirical_tv']:.4f} "
          f"最大フロー保存誤差 {stats['max_internal_gap']:.4f} "
          f"({time.perf_counter() - started:.1f}秒)")
    tv = max(stats["exact_tv"], stats["empirical_tv"])
    if tv > PROPORTIONALITY_TV or stats["max_internal_gap"] > CONSERVATION_GAP:
        print("❌ 比例サンプリング検証に失敗")
        return EXIT_ASSERTION
    print("✅ 終端集合の分布は報酬に比例")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    out_dir = args.out or _resolve_config(args).output_dir
    summary = summarize_results(load_results(out_dir))
    path = os.path.join(out_dir, "summary.xlsx")
    write_summary_workbook(summary, path)
    print("📊 戦略別サマリー:")
    print(summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print(f"✅ サマリーを保存: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="GFlowDA 能動ドメイン適応 実験ランナー")
    parser.add_argument("-v", "--verbose", action="store_true", help="DEBUG ログを出力")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="実験設定JSON")
        p.add_argument("--seed", type=int, help="シード（設定の seeds を上書き）")
        p.add_argument("--out", help="出力ディレクトリ")

    p = sub.add_parser("generate", help="シナリオを生成してCSVに保存")
    common(p)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("run", help="能動選択と最終学習を実行")
    common(p)
    p.add_argument("--strategy", choices=STRATEGIES + ("all",), help="戦略（all で3戦略）")
    p.add_argument("--budgets", type=float, nargs="+", help="予算比率のスイープ（budget_fractions を上書き）")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("transfer", help="学習済み方策を転移")
    common(p)
    p.add_argument("--checkpoint", required=True, help="方策チェックポイント")
    p.add_argument("--mode", choices=("frozen", "finetune", "both"), default="both")
    p.set_defaults(handler=cmd_transfer)

    p = sub.add_parser("bound-check", help="ターゲットリスク上界のランダム検証")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenarios", type=int, default=1000)
    p.set_defaults(handler=cmd_bound_check)

    p = sub.add_parser("proportionality-test", help="列挙可能インスタンスで比例サンプリングを検証")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--samples", type=int, default=20000)
    p.set_defaults(handler=cmd_proportionality)

    p = sub.add_parser("report", help="results.csv を集計して summary.xlsx を作成")
    common(p)
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except FileNotFoundError as exc:
        print(f"❌ ファイルが見つかりません: {exc.filename or exc}")
    except (ExperimentError, GudaDataError, NnError, PolicyError, GuanError, RewardError, TheoryError) as exc:
        print(f"❌ エラー: {exc}")
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
