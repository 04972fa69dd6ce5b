#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
GUAN（重み付き敵対的ドメイン適応ネットワーク）
特徴抽出器 g、拡張ラベル空間の分類器 h、ドメイン識別器 d を交互更新で学習する
"""

from __future__ import annotations

import copy
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import entropy as scipy_entropy

from guda_data import Domain, LabelDistribution, empirical_label_distribution
from nn_core import (
    MlpSpec, NnError, OptimizerConfig, OptimizerState, Parameters, backward,
    cross_entropy, extend_output_units, forward, init_optimizer_state, init_parameters,
    optimizer_step, resize_optimizer_state,
)

logger = logging.getLogger(__name__)

D_CLAMP = 1e-7
CHECKPOINT_FORMAT = "guan-checkpoint/1"
NETWORKS = ("g", "h", "d")


class GuanError(ValueError):
    """GUAN の入力不整合"""


@dataclass(frozen=True)
class WeightConfig:
    """
    ソース重み w_s の設定

    lambda_: 𝒴′ 外のソースラベルに与える定数 λ
    ratio_clip: P_l(y)/P_s(y) の上限
    """

    lambda_: float = 1.0
    ratio_clip: float = 10.0

    def __post_init__(self):
        if self.lambda_ < 0:
            raise GuanError(f"λ は0以上である必要があります: {self.lambda_}")
        if not self.ratio_clip > 0:
            raise GuanError(f"ratio_clip は正である必要があります: {self.ratio_clip}")


@dataclass(frozen=True)
class GuanConfig:
    hidden: int = 16
    latent_dim: int = 8
    activation: str = "relu"
    optimizer: str = "adam"
    learning_rate: float = 0.01
    batch_size: Optional[int] = None
    adversarial_weight: float = 1.0
    adapt: bool = True
    weights: WeightConfig = field(default_factory=WeightConfig)

    def __post_init__(self):
        if self.batch_size is not None and self.batch_size <= 0:
            raise GuanError(f"batch_size は正である必要があります: {self.batch_size}")
        if self.adversarial_weight < 0:
            raise GuanError("adversarial_weight は0以上である必要があります")

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(self.optimizer, learning_rate=self.learning_rate)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "GuanConfig":
        data = dict(data)
        weights = WeightConfig(**data.pop("weights", {}))
        return cls(weights=weights, **data)


@dataclass
class LossResult:
    value: float
    grads: Dict[str, Parameters]
    flags: List[str] = field(default_factory=list)


@dataclass
class GuanModel:
    """
    g: 生特徴 → 潜在特徴、h: 潜在特徴 → 拡張ラベル空間の確率、d: 潜在特徴 → (0,1)

    class_slots はラベルID → 出力スロットの安定な対応。新ラベルは末尾に追加する。
    """

    config: GuanConfig
    specs: Dict[str, MlpSpec]
    params: Dict[str, Parameters]
    class_slots: Dict[int, int]
    source_labels: FrozenSet[int]
    selected_labels: FrozenSet[int] = frozenset()
    optimizer_states: Dict[str, OptimizerState] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_slots)

    @property
    def slot_labels(self) -> np.ndarray:
        labels = np.zeros(len(self.class_slots), dtype=int)
        for label, slot in self.class_slots.items():
            labels[slot] = label
        return labels

    def slots_for(self, labels: Iterable[int]) -> List[int]:
        return sorted(self.class_slots[int(y)] for y in labels if int(y) in self.class_slots)

    def to_slots(self, labels: Sequence[int]) -> np.ndarray:
        try:
            return np.array([self.class_slots[int(y)] for y in labels], dtype=int)
        except KeyError as exc:
            raise GuanError(f"拡張ラベル空間にないラベル: {exc.args[0]}") from exc

    def clone(self) -> "GuanModel":
        return copy.deepcopy(self)

    def ensure_labels(self, labels: Iterable[int], rng: np.random.Generator) -> None:
        """未知のラベルに分類器ヘッドのスロットを追加"""
        new = sorted(set(int(y) for y in labels) - set(self.class_slots))
        if not new:
            return
        for label in new:
            self.class_slots[label] = len(self.class_slots)
        spec, params = extend_output_units(self.specs["h"], self.params["h"], len(self.class_slots), rng)
        self.specs["h"], self.params["h"] = spec, params
        if "h" in self.optimizer_states:
            self.optimizer_states["h"] = resize_optimizer_state(self.optimizer_states["h"], params)
        logger.debug("分類器ヘッドを拡張: 新ラベル %s（計 %d クラス）", new, len(self.class_slots))


def create_guan(raw_dim: int, source_labels: Iterable[int], config: GuanConfig,
                rng: np.random.Generator) -> GuanModel:
    """
    GUAN を初期化（ヘッドはソースラベル分のスロットで開始）

    Args:
        raw_dim: 生特徴量の次元
        source_labels: 𝒴_s
        config: 設定
        rng: 初期化乱数
    """
    labels = sorted(set(int(y) for y in source_labels))
    if not labels:
        raise GuanError("ソースラベルが空です")
    specs = {
        "g": MlpSpec((raw_dim, config.hidden, config.latent_dim), config.activation, "identity"),
        "h": MlpSpec((config.latent_dim, len(labels)), config.activation, "softmax"),
        "d": MlpSpec((config.latent_dim, 1), config.activation, "sigmoid"),
    }
    params = {name: init_parameters(specs[name], rng) for name in NETWORKS}
    opt = config.optimizer_config()
    states = {name: init_optimizer_state(opt, params[name]) for name in NETWORKS}
    return GuanModel(config, specs, params, {y: i for i, y in enumerate(labels)},
                     frozenset(labels), frozenset(), states)


def approximate_common_labels(selected_labels: Iterable[int], source_labels: Iterable[int]) -> FrozenSet[int]:
    """𝒴′ = 𝒴_l ∩ 𝒴_s"""
    return frozenset(selected_labels) & frozenset(source_labels)


def source_weight(label: int, p_l: Optional[LabelDistribution], p_s: LabelDistribution,
                  y_prime: Iterable[int], cfg: WeightConfig = WeightConfig()) -> float:
    """
    ソース重み w_s(y)

    y ∈ 𝒴′ なら P_l(y)/P_s(y)（ratio_clip で上限）、それ以外は λ。
    """
    label = int(label)
    if p_s[label] <= 0:
        raise GuanError(f"ラベル{label}はソースラベル空間にありません")
    if label not in set(y_prime) or p_l is None:
        return cfg.lambda_
    ratio = p_l[label] / p_s[label]
    if ratio > cfg.ratio_clip:
        logger.debug("w_s をクリップ: ラベル%d 比 %.3f → %.3f", label, ratio, cfg.ratio_clip)
        return cfg.ratio_clip
    return ratio


def target_weights(y_hat: np.ndarray, source_slots: Sequence[int],
                   selected_slots: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    ターゲット重み w_t = (1/u)Σ_{𝒴_s} ŷ、w′_t = (1/v)Σ_{𝒴_l} ŷ（u=|𝒴_s|, v=|𝒴_l|）

    𝒴_l が空なら w′_t = 0。1次元入力ならスカラー配列を返す。
    """
    probs = np.atleast_2d(np.asarray(y_hat, dtype=float))
    src = list(source_slots)
    sel = list(selected_slots)
    w_t = probs[:, src].sum(axis=1) / len(src) if src else np.zeros(len(probs))
    w_tp = probs[:, sel].sum(axis=1) / len(sel) if sel else np.zeros(len(probs))
    if np.ndim(y_hat) == 1:
        return w_t[0], w_tp[0]
    return w_t, w_tp


def _embed(model: GuanModel, x: np.ndarray):
    return forward(model.specs["g"], model.params["g"], np.asarray(x, dtype=float))


def _zero_grads(model: GuanModel) -> Dict[str, Parameters]:
    return {name: model.params[name].zeros_like() for name in NETWORKS}


def _binary_adversarial(model: GuanModel, x_pos: np.ndarray, w_pos: np.ndarray,
                        x_neg: np.ndarray, w_neg: np.ndarray) -> LossResult:
    """−mean(w_pos·log d(g(x_pos))) − mean(w_neg·log(1 − d(g(x_neg))))"""
    n_pos, n_neg = len(x_pos), len(x_neg)
    if n_pos == 0 or n_neg == 0:
        raise GuanError("敵対的損失のバッチが空です")
    x = np.vstack([x_pos, x_neg])
    z, tape_g = _embed(model, x)
    out, tape_d = forward(model.specs["d"], model.params["d"], z)
    d = out[:, 0]
    flags = []
    clamped = (d < D_CLAMP) | (d > 1.0 - D_CLAMP)
    if clamped.any():
        flags.append("discriminator_clamped")
    dc = np.clip(d, D_CLAMP, 1.0 - D_CLAMP)
    w_pos = np.asarray(w_pos, dtype=float)
    w_neg = np.asarray(w_neg, dtype=float)
    value = float(-np.sum(w_pos * np.log(dc[:n_pos])) / n_pos
                  - np.sum(w_neg * np.log(1.0 - dc[n_pos:])) / n_neg)
    grad_d = np.concatenate([-w_pos / (n_pos * dc[:n_pos]), w_neg / (n_neg * (1.0 - dc[n_pos:]))])
    grad_d[clamped] = 0.0
    grads_d, grad_z = backward(model.specs["d"], model.params["d"], tape_d, grad_d[:, np.newaxis])
    grads_g, _ = backward(model.specs["g"], model.params["g"], tape_g, grad_z)
    return LossResult(value, {"g": grads_g, "h": model.params["h"].zeros_like(), "d": grads_d}, flags)


def adversarial_loss_source(model: GuanModel, x_s: np.ndarray, x_t: np.ndarray,
                            w_s: np.ndarray, w_t: np.ndarray) -> LossResult:
    """𝓛^s_adv = −E_s[w_s log d(z)] − E_t[w_t log(1 − d(z))]（重みは定数扱い）"""
    return _binary_adversarial(model, x_s, w_s, x_t, w_t)


def adversarial_loss_selected(model: GuanModel, x_l: np.ndarray, x_t: np.ndarray,
                              w_t_prime: np.ndarray) -> LossResult:
    """𝓛^l_adv = −E_l[log d(z)] − E_t[w′_t log(1 − d(z))]。𝒟_l が空なら 0"""
    if len(x_l) == 0:
        return LossResult(0.0, _zero_grads(model), ["empty_selected"])
    return _binary_adversarial(model, x_l, np.ones(len(x_l)), x_t, w_t_prime)


def classification_loss(model: GuanModel, x_s: np.ndarray, y_s: Sequence[int],
                        x_l: Optional[np.ndarray] = None,
                        y_l: Optional[Sequence[int]] = None) -> LossResult:
    """𝒟_s の平均交差エントロピー + 𝒟_l の平均交差エントロピー（拡張ラベル空間）"""
    slots_s = model.to_slots(y_s)
    has_l = x_l is not None and len(x_l) > 0
    slots_l = model.to_slots(y_l) if has_l else np.zeros(0, dtype=int)
    x = np.vstack([x_s, x_l]) if has_l else np.asarray(x_s, dtype=float)
    z, tape_g = _embed(model, x)
    probs, tape_h = forward(model.specs["h"], model.params["h"], z)
    n_s = len(slots_s)
    value, grad_s, flags = cross_entropy(probs[:n_s], slots_s)
    grad = grad_s
    if has_l:
        value_l, grad_l, flags_l = cross_entropy(probs[n_s:], slots_l)
        value += value_l
        grad = np.vstack([grad_s, grad_l])
        flags = sorted(set(flags) | set(flags_l))
    grads_h, grad_z = backward(model.specs["h"], model.params["h"], tape_h, grad)
    grads_g, _ = backward(model.specs["g"], model.params["g"], tape_g, grad_z)
    return LossResult(value, {"g": grads_g, "h": grads_h, "d": model.params["d"].zeros_like()}, flags)


def predict(model: GuanModel, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    予測

    Returns:
        (予測ラベルID, 確率ベクトル, エントロピー)
    """
    z, _ = _embed(model, features)
    probs, _ = forward(model.specs["h"], model.params["h"], z)
    labels = model.slot_labels[np.argmax(probs, axis=1)]
    return labels, probs, scipy_entropy(probs, axis=1)


def extract_features(model: GuanModel, features: np.ndarray) -> np.ndarray:
    """潜在特徴 g(x)"""
    z, _ = _embed(model, features)
    return z


def source_sample_weights(model: GuanModel, y_s: Sequence[int],
                          p_s: LabelDistribution, p_l: Optional[LabelDistribution]) -> np.ndarray:
    y_prime = approximate_common_labels(model.selected_labels, model.source_labels)
    table = {y: source_weight(y, p_l, p_s, y_prime, model.config.weights) for y in p_s.support}
    return np.array([table[int(y)] for y in y_s])


def target_sample_weights(model: GuanModel, x_t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    _, probs, _ = predict(model, x_t)
    return target_weights(probs, model.slots_for(model.source_labels),
                          model.slots_for(model.selected_labels))


def _clipped_ratios(model: GuanModel, p_s: LabelDistribution,
                    p_l: Optional[LabelDistribution]) -> List[str]:
    if p_l is None:
        return []
    y_prime = approximate_common_labels(model.selected_labels, model.source_labels)
    clip = model.config.weights.ratio_clip
    return ["ratio_clipped" for y in sorted(y_prime) if p_s[y] > 0 and p_l[y] / p_s[y] > clip]


def _step(model: GuanModel, name: str, grads: Parameters) -> None:
    opt = model.config.optimizer_config()
    state = model.optimizer_states.get(name) or init_optimizer_state(opt, model.params[name])
    model.params[name], model.optimizer_states[name] = optimizer_step(opt, model.params[name], grads, state)


def _batches(n: int, batch_size: Optional[int], rng: np.random.Generator) -> List[np.ndarray]:
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _draw(n: int, size: int, rng: np.random.Generator, full: bool) -> np.ndarray:
    if full or size >= n:
        return np.arange(n)
    return rng.choice(n, size=size, replace=False)


def train_guan(model: GuanModel, source: Domain, selected: Optional[Domain], target: Domain,
               epochs: int, rng: np.random.Generator,
               evaluate_target: bool = False) -> Tuple[GuanModel, List[Dict[str, float]]]:
    """
    GUAN の交互更新学習

    各バッチで (i) d を 𝓛^s_adv + 𝓛^l_adv の最小化で更新、
    (ii) g, h を 𝓛_cls − adversarial_weight·(𝓛^s_adv + 𝓛^l_adv) の最小化で更新する。
    w_s はエポックごとに現在の P_l, P_s から再計算、w_t, w′_t は現在の h から計算。

    Args:
        model: 学習対象（その場で更新される）
        source: 𝒟_s
        selected: 𝒟_l（空または None 可）
        target: 𝒟_t
        epochs: エポック数
        rng: 乱数
        evaluate_target: オラクル正解でターゲット精度も記録（評価専用）

    Returns:
        (model, エポックごとの指標)
    """
    if len(source) == 0:
        raise GuanError("ソースドメインが空です")
    has_l = selected is not None and len(selected) > 0
    if has_l:
        model.ensure_labels(selected.labels, rng)
        model.selected_labels = frozenset(int(y) for y in selected.labels)
    cfg = model.config
    p_s = empirical_label_distribution(source)
    x_l_all = selected.features if has_l else np.zeros((0, source.dim))
    y_l_all = selected.labels if has_l else np.zeros(0, dtype=int)
    metrics: List[Dict[str, float]] = []
    flags: Counter = Counter()

    for epoch in range(epochs):
        p_l = empirical_label_distribution(selected) if has_l else None
        flags.update(_clipped_ratios(model, p_s, p_l))
        w_s_all = source_sample_weights(model, source.labels, p_s, p_l)
        full = cfg.batch_size is None
        totals = {"cls_loss": 0.0, "adv_source": 0.0, "adv_selected": 0.0}
        batches = _batches(len(source), cfg.batch_size, rng)
        for idx_s in batches:
            idx_t = _draw(len(target), len(idx_s), rng, full)
            idx_l = _draw(len(x_l_all), len(idx_s), rng, full) if has_l else np.zeros(0, dtype=int)
            x_s, y_s = source.features[idx_s], source.labels[idx_s]
            x_t = target.features[idx_t]
            x_l, y_l = x_l_all[idx_l], y_l_all[idx_l]

            adv_s = adv_l = None
            if cfg.adapt:
                w_t, w_tp = target_sample_weights(model, x_t)
                adv_s = adversarial_loss_source(model, x_s, x_t, w_s_all[idx_s], w_t)
                adv_l = adversarial_loss_selected(model, x_l, x_t, w_tp)
                _step(model, "d", adv_s.grads["d"] + adv_l.grads["d"])
                adv_s = adversarial_loss_source(model, x_s, x_t, w_s_all[idx_s], w_t)
                adv_l = adversarial_loss_selected(model, x_l, x_t, w_tp)

            cls = classification_loss(model, x_s, y_s, x_l, y_l)
            grads_g = cls.grads["g"]
            if cfg.adapt:
                adv_g = adv_s.grads["g"] + adv_l.grads["g"]
                grads_g = grads_g - cfg.adversarial_weight * adv_g
                totals["adv_source"] += adv_s.value
                totals["adv_selected"] += adv_l.value
                flags.update(adv_s.flags + adv_l.flags)
            _step(model, "g", grads_g)
            _step(model, "h", cls.grads["h"])
            totals["cls_loss"] += cls.value
            flags.update(cls.flags)

        record = {"epoch": epoch, **{k: v / len(batches) for k, v in totals.items()}}
        record["source_accuracy"] = float(np.mean(predict(model, source.features)[0] == source.labels))
        if evaluate_target and target.oracle is not None:
            truth = target.oracle.ground_truth()
            record["target_accuracy"] = float(np.mean(predict(model, target.features)[0] == truth))
        metrics.append(record)
    if selected is None:
        flags.pop("empty_selected", None)
    for flag, count in sorted(flags.items()):
        logger.warning("GUAN 学習でフラグ %s が %d 回発生", flag, count)
    return model, metrics


def save_guan(path: str, model: GuanModel) -> None:
    data = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "networks": {name: {"spec": model.specs[name].to_dict(), "params": model.params[name].to_lists()}
                     for name in NETWORKS},
        "class_slots": {str(k): v for k, v in model.class_slots.items()},
        "source_labels": sorted(model.source_labels),
        "selected_labels": sorted(model.selected_labels),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)


def load_guan(path: str) -> GuanModel:
    """チェックポイントから GUAN を復元（オプティマイザ状態は初期化）"""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if data.get("format") != CHECKPOINT_FORMAT:
        raise GuanError(f"未知のチェックポイント形式: {data.get('format')}")
    config = GuanConfig.from_dict(data["config"])
    specs = {name: MlpSpec.from_dict(data["networks"][name]["spec"]) for name in NETWORKS}
    params = {name: Parameters({k: np.asarray(v, dtype=float)
                                for k, v in data["networks"][name]["params"].items()})
              for name in NETWORKS}
    opt = config.optimizer_config()
    states = {name: init_optimizer_state(opt, params[name]) for name in NETWORKS}
    return GuanModel(config, specs, params, {int(k): v for k, v in data["class_slots"].items()},
                     frozenset(data["source_labels"]), frozenset(data["selected_labels"]), states)


def write_metrics_csv(metrics: List[Dict[str, float]], path: str) -> None:
    pd.DataFrame(metrics).to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
