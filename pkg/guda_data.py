#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
GUDAシナリオ生成・ラベル分布ユーティリティ
ラベル分布シフトと非共有ラベル空間を持つ合成ソース/ターゲット特徴量を扱う
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import rel_entr

logger = logging.getLogger(__name__)

PRIOR_TOLERANCE = 1e-9
ROLES = ("source", "target", "selected")
CSV_FLOAT_FORMAT = "%.9g"


class GudaDataError(ValueError):
    """GUDAデータ処理の基本例外"""


class ScenarioError(GudaDataError):
    """シナリオ定義の不整合"""


class DomainFormatError(GudaDataError):
    """ドメインCSVの形式エラー"""


@dataclass(frozen=True)
class LabelDistribution:
    """ラベルID → 確率 の正規化済み写像"""

    probs: Dict[int, float]

    def __post_init__(self):
        if not self.probs:
            raise GudaDataError("ラベル分布が空です")
        cleaned = {int(k): float(v) for k, v in sorted(self.probs.items())}
        for label, p in cleaned.items():
            if not math.isfinite(p) or p < 0:
                raise GudaDataError(f"ラベル{label}の確率が不正です: {p}")
        total = sum(cleaned.values())
        if abs(total - 1.0) > PRIOR_TOLERANCE:
            raise GudaDataError(f"確率の合計が1ではありません: {total}")
        object.__setattr__(self, "probs", cleaned)

    def __getitem__(self, label: int) -> float:
        return self.probs.get(int(label), 0.0)

    @property
    def labels(self) -> Tuple[int, ...]:
        return tuple(self.probs)

    @property
    def support(self) -> Tuple[int, ...]:
        return tuple(k for k, v in self.probs.items() if v > 0)

    def as_dict(self) -> Dict[str, float]:
        return {str(k): v for k, v in self.probs.items()}

    @classmethod
    def from_counts(cls, counts: Mapping[int, int]) -> "LabelDistribution":
        total = sum(counts.values())
        if total <= 0:
            raise GudaDataError("カウントの合計が0です")
        return cls({int(k): c / total for k, c in counts.items()})

    @classmethod
    def from_weights(cls, weights: Mapping[int, float]) -> "LabelDistribution":
        """正の重みを正規化して分布を作成"""
        total = float(sum(weights.values()))
        return cls({int(k): float(w) / total for k, w in weights.items()})


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: Optional[int] = None


class LabelOracle:
    """
    ターゲットの隠しラベルへのアクセサ

    選択（reveal）時のみ使用する。ground_truth() は評価用。
    """

    def __init__(self, labels: Iterable[int]):
        self._labels = np.asarray(list(labels), dtype=int)
        self.query_count = 0

    def __call__(self, index: int) -> int:
        if not 0 <= index < len(self._labels):
            raise IndexError(f"ターゲットインデックス範囲外: {index}")
        self.query_count += 1
        return int(self._labels[index])

    reveal = __call__

    def __len__(self) -> int:
        return len(self._labels)

    def ground_truth(self) -> np.ndarray:
        return self._labels.copy()

    def subset(self, indices: Sequence[int]) -> "LabelOracle":
        return LabelOracle(self._labels[np.asarray(indices, dtype=int)])


@dataclass
class Domain:
    """
    ドメイン（ソース / ターゲット / 選択済みラベル付きターゲット）

    特徴量は (件数, 次元) の行列で保持する。ターゲットのラベルは
    labels=None とし、oracle 経由でのみ参照する。
    """

    features: np.ndarray
    labels: Optional[np.ndarray]
    role: str
    label_space: frozenset
    oracle: Optional[LabelOracle] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise GudaDataError(f"不明なロール: {self.role}")
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2:
            raise GudaDataError("特徴量は2次元行列である必要があります")
        if not np.all(np.isfinite(self.features)):
            raise GudaDataError("特徴量に非有限値が含まれています")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
            if len(self.labels) != len(self.features):
                raise GudaDataError("ラベル数と特徴量行数が一致しません")
        elif self.role in ("source", "selected"):
            raise GudaDataError(f"{self.role}ドメインはラベル必須です")
        if self.oracle is not None and len(self.oracle) != len(self.features):
            raise GudaDataError("オラクルの件数が特徴量行数と一致しません")
        self.label_space = frozenset(int(y) for y in self.label_space)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def examples(self) -> List[Example]:
        labels = self.labels if self.labels is not None else [None] * len(self)
        return [Example(x, None if y is None else int(y)) for x, y in zip(self.features, labels)]

    def ground_truth(self) -> np.ndarray:
        """ラベル付きならそのラベル、ターゲットならオラクルの正解（評価専用）"""
        if self.labels is not None:
            return self.labels.copy()
        if self.oracle is not None:
            return self.oracle.ground_truth()
        raise GudaDataError("このドメインには正解ラベルがありません")

    def subset(self, indices: Sequence[int]) -> "Domain":
        idx = np.asarray(indices, dtype=int)
        return Domain(
            features=self.features[idx].copy(),
            labels=None if self.labels is None else self.labels[idx].copy(),
            role=self.role,
            label_space=self.label_space,
            oracle=None if self.oracle is None else self.oracle.subset(idx),
        )


@dataclass(frozen=True)
class ScenarioSpec:
    """合成GUDA問題の定義（条件①〜⑤を満たす最小モデル）"""

    feature_dim: int
    common_labels: Tuple[int, ...]
    source_private: Tuple[int, ...]
    target_private: Tuple[int, ...]
    source_priors: LabelDistribution
    target_priors: LabelDistribution
    class_means: Dict[Tuple[str, int], Tuple[float, ...]]
    class_scales: Dict[Tuple[str, int], float]
    source_count: int
    target_count: int
    seed: int = 0

    @property
    def source_labels(self) -> Tuple[int, ...]:
        return tuple(self.common_labels) + tuple(self.source_private)

    @property
    def target_labels(self) -> Tuple[int, ...]:
        return tuple(self.common_labels) + tuple(self.target_private)

    def validate(self) -> None:
        if self.feature_dim <= 0:
            raise ScenarioError("feature_dim は正の整数である必要があります")
        if self.source_count <= 0 or self.target_count <= 0:
            raise ScenarioError("サンプル数は正である必要があります")
        common, s_priv, t_priv = set(self.common_labels), set(self.source_private), set(self.target_private)
        if common & s_priv or common & t_priv or s_priv & t_priv:
            raise ScenarioError("共通/ソース固有/ターゲット固有ラベルが重複しています")
        for domain, labels, priors in (
            ("source", self.source_labels, self.source_priors),
            ("target", self.target_labels, self.target_priors),
        ):
            if set(priors.labels) != set(labels):
                raise ScenarioError(f"{domain}の事前分布のラベル集合がラベル空間と一致しません")
            if any(priors[y] <= 0 for y in labels):
                raise ScenarioError(f"{domain}の事前分布は台上で正である必要があります")
            for y in labels:
                mean = self.class_means.get((domain, y))
                if mean is None or len(mean) != self.feature_dim:
                    raise ScenarioError(f"クラス平均がありません/次元不一致: ({domain}, {y})")
                if not all(math.isfinite(v) for v in mean):
                    raise ScenarioError(f"クラス平均に非有限値: ({domain}, {y})")
                scale = self.class_scales.get((domain, y))
                if scale is None or not scale > 0:
                    raise ScenarioError(f"クラススケールが不正: ({domain}, {y})")


def _circle_mean(position: int, total: int, radius: float, dim: int) -> Tuple[float, ...]:
    angle = 2.0 * math.pi * position / total
    vec = [0.0] * dim
    vec[0] = radius * math.cos(angle)
    if dim > 1:
        vec[1] = radius * math.sin(angle)
    return tuple(vec)


def make_guda_spec(feature_dim: int = 2,
                   n_common: int = 4,
                   n_source_private: int = 2,
                   n_target_private: int = 2,
                   source_count: int = 400,
                   target_count: int = 400,
                   radius: float = 4.0,
                   scale: float = 0.6,
                   shift: Optional[Sequence[float]] = None,
                   imbalance: float = 3.0,
                   seed: int = 0) -> ScenarioSpec:
    """
    標準的な合成GUDAシナリオ定義を作成

    全ラベルの平均を円周上に配置し、共通ラベルのターゲット平均を
    shift だけ平行移動して条件②を実現する。共通ラベルの事前分布は
    ソースで降順、ターゲットで昇順に傾けて条件①を実現する。

    Args:
        feature_dim: 生特徴量の次元
        n_common: 共通ラベル数 k
        n_source_private: ソース固有ラベル数
        n_target_private: ターゲット固有ラベル数
        source_count: ソースサンプル数 m
        target_count: ターゲットサンプル数 n
        radius: クラス平均を置く円の半径
        scale: 等方ガウスの標準偏差
        shift: ターゲット共通クラス平均の平行移動ベクトル
        imbalance: 共通ラベル事前分布の最大/最小比
        seed: 乱数シード

    Returns:
        ScenarioSpec
    """
    common = tuple(range(n_common))
    s_priv = tuple(range(n_common, n_common + n_source_private))
    t_priv = tuple(range(n_common + n_source_private, n_common + n_source_private + n_target_private))
    total_labels = n_common + n_source_private + n_target_private
    if shift is None:
        shift = [0.5] + [0.0] * (feature_dim - 1)
    shift = tuple(float(v) for v in shift)
    if len(shift) != feature_dim:
        raise ScenarioError("shift の次元が feature_dim と一致しません")

    ramp = np.linspace(imbalance, 1.0, n_common) if n_common > 1 else np.ones(1)
    source_weights = {y: float(w) for y, w in zip(common, ramp)}
    source_weights.update({y: 1.0 for y in s_priv})
    target_weights = {y: float(w) for y, w in zip(common, ramp[::-1])}
    target_weights.update({y: 1.0 for y in t_priv})

    means: Dict[Tuple[str, int], Tuple[float, ...]] = {}
    scales: Dict[Tuple[str, int], float] = {}
    for y in common + s_priv + t_priv:
        base = _circle_mean(y, total_labels, radius, feature_dim)
        if y in common or y in s_priv:
            means[("source", y)] = base
            scales[("source", y)] = scale
        if y in common or y in t_priv:
            offset = shift if y in common else (0.0,) * feature_dim
            means[("target", y)] = tuple(b + o for b, o in zip(base, offset))
            scales[("target", y)] = scale

    spec = ScenarioSpec(
        feature_dim=feature_dim,
        common_labels=common,
        source_private=s_priv,
        target_private=t_priv,
        source_priors=LabelDistribution.from_weights(source_weights),
        target_priors=LabelDistribution.from_weights(target_weights),
        class_means=means,
        class_scales=scales,
        source_count=source_count,
        target_count=target_count,
        seed=seed,
    )
    spec.validate()
    return spec


def prior_jsd(spec: ScenarioSpec) -> float:
    """d_JS(P_s^Y, P_t^Y)"""
    return jsd(spec.source_priors, spec.target_priors)


def shift_target_priors(spec: ScenarioSpec, strength: float) -> ScenarioSpec:
    """
    ターゲット事前分布をソースから遠ざける方向に傾ける

    ソース確率の高いラベルほど重みを下げ、ターゲット固有ラベルの重みを上げる。
    strength=0 で元のシナリオ定義と同じ。
    """
    direction = {}
    for y in spec.target_labels:
        direction[y] = 1.0 if y in spec.target_private else -spec.source_priors[y] * len(spec.source_labels)
    weights = {y: spec.target_priors[y] * math.exp(strength * direction[y]) for y in spec.target_labels}
    return replace(spec, target_priors=LabelDistribution.from_weights(weights))


def shift_target_priors_to_jsd(spec: ScenarioSpec, target_jsd: float,
                               max_strength: float = 20.0, iterations: int = 60) -> ScenarioSpec:
    """二分法で d_JS(P_s^Y, P_t^Y) が target_jsd になる傾き強度を探す"""
    low, high = 0.0, max_strength
    if prior_jsd(spec) >= target_jsd:
        return spec
    if prior_jsd(shift_target_priors(spec, high)) < target_jsd:
        raise ScenarioError(f"目標JSD {target_jsd:.4f} に到達できません")
    for _ in range(iterations):
        mid = 0.5 * (low + high)
        if prior_jsd(shift_target_priors(spec, mid)) < target_jsd:
            low = mid
        else:
            high = mid
    return shift_target_priors(spec, high)


def _realize_domain(spec: ScenarioSpec, domain: str, labels: Tuple[int, ...],
                    priors: LabelDistribution, count: int,
                    rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    probs = np.array([priors[y] for y in labels])
    counts = rng.multinomial(count, probs / probs.sum())
    for y, c in zip(labels, counts):
        if c == 0:
            raise ScenarioError(f"{domain}のラベル{y}の実現サンプル数が0です（サンプル数を増やしてください）")
    blocks, label_blocks = [], []
    for y, c in zip(labels, counts):
        mean = np.asarray(spec.class_means[(domain, y)], dtype=float)
        scale = spec.class_scales[(domain, y)]
        blocks.append(rng.normal(loc=mean, scale=scale, size=(int(c), spec.feature_dim)))
        label_blocks.append(np.full(int(c), y, dtype=int))
    features = np.vstack(blocks)
    ys = np.concatenate(label_blocks)
    order = rng.permutation(len(ys))
    return features[order], ys[order]


def generate_scenario(spec: ScenarioSpec) -> Tuple[Domain, Domain]:
    """
    シナリオ定義からソース/ターゲットドメインを生成

    同じ spec に対しては常に同一の出力を返す。

    Returns:
        (source, target) ターゲットのラベルはオラクル経由
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    xs, ys = _realize_domain(spec, "source", spec.source_labels, spec.source_priors, spec.source_count, rng)
    xt, yt = _realize_domain(spec, "target", spec.target_labels, spec.target_priors, spec.target_count, rng)
    source = Domain(xs, ys, "source", frozenset(spec.source_labels))
    target = Domain(xt, None, "target", frozenset(spec.target_labels), oracle=LabelOracle(yt))
    logger.debug("シナリオ生成: m=%d n=%d seed=%d", len(source), len(target), spec.seed)
    return source, target


def apply_subsample_protocol(domain: Domain, retain: Mapping[int, float], seed: int) -> Domain:
    """
    指定ラベルのサンプルを一部だけ残すサブサンプリング

    Args:
        domain: 対象ドメイン
        retain: ラベル → 残す割合 (0, 1]
        seed: 乱数シード

    Returns:
        各指定ラベルについて ⌈割合·件数⌉ 件を一様に残したドメイン
    """
    labels = domain.ground_truth()
    present = set(int(y) for y in labels)
    for label, fraction in retain.items():
        if int(label) not in present:
            raise ScenarioError(f"ドメインに存在しないラベル: {label}")
        if not 0 < fraction <= 1:
            raise ScenarioError(f"保持割合は (0,1] である必要があります: {fraction}")
    rng = np.random.default_rng(seed)
    keep = np.ones(len(labels), dtype=bool)
    for label in sorted(int(k) for k in retain):
        idx = np.flatnonzero(labels == label)
        n_keep = min(len(idx), math.ceil(retain[label] * len(idx) - 1e-9))
        chosen = rng.choice(idx, size=n_keep, replace=False)
        keep[idx] = False
        keep[chosen] = True
    return domain.subset(np.flatnonzero(keep))


def label_distribution_from_labels(labels: Sequence[int]) -> LabelDistribution:
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise GudaDataError("空のラベル列からは分布を作れません")
    values, counts = np.unique(labels, return_counts=True)
    return LabelDistribution.from_counts({int(v): int(c) for v, c in zip(values, counts)})


def empirical_label_distribution(domain: Domain) -> LabelDistribution:
    """ラベル付きドメインの経験ラベル分布"""
    if len(domain) == 0:
        raise GudaDataError("空のドメインです")
    if domain.labels is None:
        raise GudaDataError("ラベルなしドメインの経験分布は計算できません")
    return label_distribution_from_labels(domain.labels)


def _aligned(p: LabelDistribution, q: LabelDistribution,
             labels: Optional[Iterable[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    keys = sorted(set(p.labels) | set(q.labels)) if labels is None else sorted(set(int(y) for y in labels))
    return np.array([p[y] for y in keys]), np.array([q[y] for y in keys])


def jsd(p: LabelDistribution, q: LabelDistribution) -> float:
    """
    Jensen-Shannon ダイバージェンス（底2、値域 [0,1]）

    台は和集合を取り、欠けているラベルは確率0として扱う。
    """
    pv, qv = _aligned(p, q)
    m = 0.5 * (pv + qv)
    value = 0.5 * (rel_entr(pv, m).sum() + rel_entr(qv, m).sum()) / math.log(2.0)
    return float(min(1.0, max(0.0, value)))


def l1_label_distance(p: LabelDistribution, q: LabelDistribution,
                      subset: Optional[Iterable[int]] = None) -> float:
    """ラベル部分集合上の L1 距離 Σ|p_i − q_i|（部分集合省略時は和集合）"""
    pv, qv = _aligned(p, q, subset)
    return float(np.abs(pv - qv).sum())


def save_domain_csv(domain: Domain, path: str, include_hidden: bool = True) -> None:
    """
    ドメインをCSVに保存

    ヘッダは label,f0,...,f{d-1}。ラベルなし行は空文字。
    include_hidden=True のときターゲットのオラクルラベルも書き出す
    （ベンチマークファイルとして再読込するため）。
    """
    if domain.labels is not None:
        labels = [str(int(y)) for y in domain.labels]
    elif include_hidden and domain.oracle is not None:
        labels = [str(int(y)) for y in domain.oracle.ground_truth()]
    else:
        labels = [""] * len(domain)
    frame = pd.DataFrame(domain.features, columns=[f"f{i}" for i in range(domain.dim)])
    frame.insert(0, "label", labels)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")


def load_domain_csv(path: str, role: str = "source",
                    label_space: Optional[Iterable[int]] = None) -> Domain:
    """
    CSVからドメインを読み込み

    Args:
        path: CSVパス
        role: "source" / "target" / "selected"
        label_space: ラベル空間（省略時はファイル内のラベル集合）

    Returns:
        Domain（target ロールではラベル列をオラクルに格納）
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise DomainFormatError(f"空のCSVファイルです: {path}") from exc
    except pd.errors.ParserError as exc:
        raise DomainFormatError(f"CSVの列数が行ごとに一致しません: {exc}") from exc

    columns = list(frame.columns)
    if not columns or columns[0] != "label":
        raise DomainFormatError("先頭列は label である必要があります")
    feature_cols = columns[1:]
    if not feature_cols or feature_cols != [f"f{i}" for i in range(len(feature_cols))]:
        raise DomainFormatError("特徴量列は f0,f1,... である必要があります")
    if len(frame) == 0:
        raise DomainFormatError(f"データ行がありません: {path}")

    cells = frame[feature_cols]
    missing = cells.isna() | (cells == "")
    if missing.to_numpy().any():
        row = int(np.flatnonzero(missing.to_numpy().any(axis=1))[0])
        raise DomainFormatError(f"{row + 1}行目の特徴量次元が {len(feature_cols)} と一致しません")
    try:
        features = cells.apply(pd.to_numeric, errors="raise").to_numpy(dtype=float)
    except (ValueError, TypeError) as exc:
        raise DomainFormatError(f"数値でないセルがあります: {exc}") from exc

    raw_labels = frame["label"].fillna("").astype(str).str.strip().tolist()
    has_label = [s != "" for s in raw_labels]
    try:
        parsed = [int(s) for s in raw_labels if s != ""]
    except ValueError as exc:
        raise DomainFormatError(f"ラベルは整数である必要があります: {exc}") from exc

    if role in ("source", "selected"):
        if not all(has_label):
            raise DomainFormatError(f"{role}ロールではすべての行にラベルが必要です")
        labels = np.asarray(parsed, dtype=int)
        space = set(labels.tolist()) if label_space is None else set(label_space)
        return Domain(features, labels, role, frozenset(space))

    if role != "target":
        raise DomainFormatError(f"不明なロール: {role}")
    if any(has_label) and not all(has_label):
        raise DomainFormatError("ターゲットのラベル列は全行あり、または全行空である必要があります")
    oracle = LabelOracle(parsed) if all(has_label) else None
    space = set(parsed) if label_space is None else set(label_space)
    return Domain(features, None, "target", frozenset(space), oracle=oracle)


def spec_to_dict(spec: ScenarioSpec) -> Dict:
    return {
        "feature_dim": spec.feature_dim,
        "common_labels": list(spec.common_labels),
        "source_private": list(spec.source_private),
        "target_private": list(spec.target_private),
        "source_priors": spec.source_priors.as_dict(),
        "target_priors": spec.target_priors.as_dict(),
        "class_means": {f"{d}:{y}": list(v) for (d, y), v in sorted(spec.class_means.items())},
        "class_scales": {f"{d}:{y}": v for (d, y), v in sorted(spec.class_scales.items())},
        "source_count": spec.source_count,
        "target_count": spec.target_count,
        "seed": spec.seed,
    }


def _split_key(key: str) -> Tuple[str, int]:
    domain, _, label = key.partition(":")
    if domain not in ("source", "target") or not label:
        raise ScenarioError(f"クラスキーの形式が不正です: {key}")
    return domain, int(label)


def spec_from_dict(data: Mapping) -> ScenarioSpec:
    """JSON辞書から ScenarioSpec を復元"""
    try:
        spec = ScenarioSpec(
            feature_dim=int(data["feature_dim"]),
            common_labels=tuple(int(y) for y in data["common_labels"]),
            source_private=tuple(int(y) for y in data["source_private"]),
            target_private=tuple(int(y) for y in data["target_private"]),
            source_priors=LabelDistribution({int(k): v for k, v in data["source_priors"].items()}),
            target_priors=LabelDistribution({int(k): v for k, v in data["target_priors"].items()}),
            class_means={_split_key(k): tuple(float(x) for x in v) for k, v in data["class_means"].items()},
            class_scales={_split_key(k): float(v) for k, v in data["class_scales"].items()},
            source_count=int(data["source_count"]),
            target_count=int(data["target_count"]),
            seed=int(data.get("seed", 0)),
        )
    except (KeyError, TypeError, GudaDataError) as exc:
        raise ScenarioError(f"シナリオJSONが不正です: {exc}") from exc
    spec.validate()
    return spec


def save_spec_json(spec: ScenarioSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec_to_dict(spec), f, ensure_ascii=False, indent=2)


def load_spec_json(path: str) -> ScenarioSpec:
    with open(path, "r", encoding="utf-8") as f:
        return spec_from_dict(json.load(f))
