#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
ターゲットリスク上界の計算と検証
有限の同時分布 P(Y, Ŷ) から BER・CEG・δ項・固有クラス誤差を正確に計算する
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-9
SLACK_TOLERANCE = 1e-9
FAMILIES = ("selected_from_target", "source_invariant")


class TheoryError(ValueError):
    """同時分布・ラベル空間の不整合"""


@dataclass(frozen=True)
class DiscreteJoint:
    """
    ドメインの同時分布 P(Y=y, Ŷ=ŷ)

    labels が行（真ラベル）、predicted が列（予測ラベル）。
    """

    labels: Tuple[int, ...]
    predicted: Tuple[int, ...]
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float)
        object.__setattr__(self, "labels", tuple(int(y) for y in self.labels))
        object.__setattr__(self, "predicted", tuple(int(y) for y in self.predicted))
        if table.shape != (len(self.labels), len(self.predicted)):
            raise TheoryError(f"表の形状 {table.shape} がラベル数と一致しません")
        if np.any(table < 0) or not np.all(np.isfinite(table)):
            raise TheoryError("確率に負値または非有限値があります")
        if abs(table.sum() - 1.0) > SUM_TOLERANCE:
            raise TheoryError(f"同時分布の合計が1ではありません: {table.sum()}")
        object.__setattr__(self, "table", table)

    def _row(self, label: int) -> Optional[int]:
        try:
            return self.labels.index(int(label))
        except ValueError:
            return None

    def marginal(self, label: int) -> float:
        """γ_j = P(Y=j)"""
        row = self._row(label)
        return 0.0 if row is None else float(self.table[row].sum())

    def conditional(self, predicted: int, label: int) -> float:
        """P(Ŷ=i | Y=j)。P(Y=j)=0 なら TheoryError"""
        gamma = self.marginal(label)
        if gamma <= 0:
            raise TheoryError(f"クラス{label}の確率が0のため条件付き確率が定義されません")
        if int(predicted) not in self.predicted:
            return 0.0
        return float(self.table[self._row(label), self.predicted.index(int(predicted))] / gamma)

    def class_error(self, label: int) -> float:
        """P(Ŷ ≠ j | Y = j)"""
        return 1.0 - self.conditional(label, label)


@dataclass(frozen=True)
class LabelSpaces:
    source: FrozenSet[int]
    selected: FrozenSet[int]
    target: FrozenSet[int]

    def __post_init__(self):
        for name in ("source", "selected", "target"):
            object.__setattr__(self, name, frozenset(int(y) for y in getattr(self, name)))
        if not self.selected <= self.target:
            raise TheoryError("𝒴_l ⊆ 𝒴_t である必要があります")

    @property
    def common(self) -> FrozenSet[int]:
        return self.source & self.target

    @property
    def target_private(self) -> FrozenSet[int]:
        return self.target - self.source


@dataclass
class BoundReport:
    """上界の各項と実際のターゲットリスク"""

    source_common_risk: float
    selected_risk: float
    delta_source_target: float
    delta_selected_target: float
    target_private_ber: float
    bound: float
    target_risk: float
    details: Dict[str, float] = field(default_factory=dict)

    @property
    def slack(self) -> float:
        return self.bound - self.target_risk

    @property
    def holds(self) -> bool:
        return self.slack >= -SLACK_TOLERANCE

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["slack"] = self.slack
        data["holds"] = self.holds
        return data


def ber(joint: DiscreteJoint, label_subset: Iterable[int]) -> float:
    """平衡誤差率 max_j P(Ŷ ≠ Y | Y = j)。空集合なら0"""
    errors = [joint.class_error(j) for j in sorted(set(label_subset))]
    return float(max(errors)) if errors else 0.0


def ceg(joint_a: DiscreteJoint, joint_b: DiscreteJoint, label_subset: Iterable[int]) -> float:
    """条件付き誤差ギャップ max_{j∈部分集合, i≠j} |P_a(Ŷ=i|Y=j) − P_b(Ŷ=i|Y=j)|"""
    predicted = sorted(set(joint_a.predicted) | set(joint_b.predicted))
    gap = 0.0
    for j in sorted(set(label_subset)):
        for i in predicted:
            if i == j:
                continue
            gap = max(gap, abs(joint_a.conditional(i, j) - joint_b.conditional(i, j)))
    return gap


def risk(joint: DiscreteJoint, label_subset: Optional[Iterable[int]] = None) -> float:
    """Σ_{j∈部分集合} Σ_{i≠j} P(Y=j, Ŷ=i)（省略時は全ラベル）"""
    subset = joint.labels if label_subset is None else sorted(set(label_subset))
    total = 0.0
    for j in subset:
        row = joint._row(j)
        if row is None:
            continue
        for col, i in enumerate(joint.predicted):
            if i != j:
                total += joint.table[row, col]
    return float(total)


def _masses(joint: DiscreteJoint, subset: Sequence[int]) -> np.ndarray:
    return np.array([joint.marginal(j) for j in subset])


def target_risk_bound(joint_s: DiscreteJoint, joint_l: Optional[DiscreteJoint],
                      joint_t: DiscreteJoint, spaces: LabelSpaces) -> BoundReport:
    """
    ターゲットリスク上界

    ε_t ≤ ε_s^c + ε_l + δ_{s,t} + δ_{l,t} + ε_t(Ŷ‖Ȳ_t)
      δ_{s,t} = ‖P_s(Y_c) − P_t(Y_c)‖₁·ε_s(Ŷ‖Y_c) + 2(k−1)·Δ_{s,t}(Ŷ‖Y_c)
      δ_{l,t} = ‖P_l(Y_l) − P_t(Y_l)‖₁·ε_l(Ŷ‖Y_l) + 2(v−1)·Δ_{l,t}(Ŷ‖Y_l)

    ε_s^c は共通ラベル空間上のソースリスク。𝒟_l が空（joint_l=None）なら 𝒟_l の項は0。
    """
    common = sorted(spaces.common)
    selected = sorted(spaces.selected)
    k, v = len(common), len(selected)

    eps_s = risk(joint_s, common)
    l1_st = float(np.abs(_masses(joint_s, common) - _masses(joint_t, common)).sum())
    ber_s = ber(joint_s, common)
    ceg_st = ceg(joint_s, joint_t, common)
    delta_st = l1_st * ber_s + 2 * max(k - 1, 0) * ceg_st

    if joint_l is None or not selected:
        eps_l = l1_lt = ber_l = ceg_lt = delta_lt = 0.0
    else:
        eps_l = risk(joint_l, selected)
        l1_lt = float(np.abs(_masses(joint_l, selected) - _masses(joint_t, selected)).sum())
        ber_l = ber(joint_l, selected)
        ceg_lt = ceg(joint_l, joint_t, selected)
        delta_lt = l1_lt * ber_l + 2 * max(v - 1, 0) * ceg_lt

    private = ber(joint_t, spaces.target_private)
    bound = eps_s + eps_l + delta_st + delta_lt + private
    details = {
        "l1_source_target": l1_st, "ber_source_common": ber_s, "ceg_source_target": ceg_st,
        "l1_selected_target": l1_lt, "ber_selected": ber_l, "ceg_selected_target": ceg_lt,
        "target_common_risk": risk(joint_t, common),
        "target_private_risk": risk(joint_t, spaces.target_private),
    }
    return BoundReport(eps_s, eps_l, delta_st, delta_lt, private, bound, risk(joint_t), details)


def estimate_joint(true_labels: Sequence[int], predicted_labels: Sequence[int],
                   universe: Optional[Iterable[int]] = None) -> DiscreteJoint:
    """予測結果からの経験同時分布（推定値）"""
    y = np.asarray(true_labels, dtype=int)
    p = np.asarray(predicted_labels, dtype=int)
    if len(y) == 0 or len(y) != len(p):
        raise TheoryError("真ラベルと予測ラベルは同じ長さの空でない列である必要があります")
    labels = sorted(set(y.tolist()))
    predicted = sorted(set(p.tolist()) | set(labels) | set(universe or []))
    table = np.zeros((len(labels), len(predicted)))
    rows = {lab: i for i, lab in enumerate(labels)}
    cols = {lab: i for i, lab in enumerate(predicted)}
    np.add.at(table, ([rows[v] for v in y], [cols[v] for v in p]), 1.0)
    return DiscreteJoint(tuple(labels), tuple(predicted), table / len(y))


def _joint(priors: Dict[int, float], conditionals: Dict[int, np.ndarray],
           predicted: Sequence[int]) -> DiscreteJoint:
    labels = sorted(priors)
    table = np.vstack([priors[j] * conditionals[j] for j in labels])
    return DiscreteJoint(tuple(labels), tuple(predicted), table / table.sum())


def random_bound_scenario(rng: np.random.Generator, family: str = FAMILIES[0]
                          ) -> Tuple[DiscreteJoint, DiscreteJoint, DiscreteJoint, LabelSpaces]:
    """
    上界検証用のランダムな離散シナリオ

    |𝒴_c| ∈ {1,2,3}、ソース・ターゲット固有ラベル各1、予測器は確率的。
    family:
        selected_from_target: 𝒟_l はターゲットと条件付き分布を共有し 𝒴_c ⊆ 𝒴_l ⊆ 𝒴_t
        source_invariant: 𝒴_c 上でソースとターゲットの条件付き分布が一致、𝒴_l は任意
    """
    if family not in FAMILIES:
        raise TheoryError(f"不明なシナリオ族: {family}")
    k = int(rng.integers(1, 4))
    common = list(range(k))
    source_private, target_private = k, k + 1
    predicted = list(range(k + 2))
    y_s = common + [source_private]
    y_t = common + [target_private]

    def conds(labels):
        return {j: rng.dirichlet(np.ones(len(predicted))) for j in labels}

    def priors(labels):
        return dict(zip(labels, rng.dirichlet(np.ones(len(labels)))))

    cond_t = conds(y_t)
    cond_s = conds(y_s)
    if family == "selected_from_target":
        y_l = common + ([target_private] if rng.random() < 0.5 else [])
        cond_l = {j: cond_t[j] for j in y_l}
    else:
        for j in common:
            cond_s[j] = cond_t[j]
        size = int(rng.integers(1, len(y_t) + 1))
        y_l = sorted(rng.choice(y_t, size=size, replace=False).tolist())
        cond_l = conds(y_l)

    spaces = LabelSpaces(frozenset(y_s), frozenset(y_l), frozenset(y_t))
    return (_joint(priors(y_s), cond_s, predicted),
            _joint(priors(y_l), cond_l, predicted),
            _joint(priors(y_t), cond_t, predicted),
            spaces)


def verify_bound(n_scenarios: int = 1000, seed: int = 0) -> Tuple[List[BoundReport], List[int]]:
    """
    ランダムシナリオで上界の成立を検証（2つの族を交互に使用）

    Returns:
        (全レポート, 上界を破ったシナリオ番号)
    """
    rng = np.random.default_rng(seed)
    reports, violations = [], []
    for index in range(n_scenarios):
        family = FAMILIES[index % len(FAMILIES)]
        report = target_risk_bound(*random_bound_scenario(rng, family))
        report.details["family"] = float(index % len(FAMILIES))
        reports.append(report)
        if not report.holds:
            violations.append(index)
            logger.warning("上界違反: シナリオ%d slack=%.3e", index, report.slack)
    return reports, violations


def counterexample_outside_premises(gamma_common: float = 0.5) -> Tuple[DiscreteJoint, DiscreteJoint, DiscreteJoint, LabelSpaces]:
    """
    前提外（k=1、𝒴_l に共通ラベルなし、共通クラスの条件付き分布が異なる）で上界が破れる例

    ソースは完全、ターゲットは共通クラスを常に誤分類、𝒟_l は固有クラスのみで完全。
    上界は0、実リスクは gamma_common。
    """
    predicted = (0, 1, 2)
    joint_s = DiscreteJoint((0, 1), predicted, np.array([[0.5, 0.0, 0.0], [0.0, 0.5, 0.0]]))
    joint_l = DiscreteJoint((2,), predicted, np.array([[0.0, 0.0, 1.0]]))
    joint_t = DiscreteJoint((0, 2), predicted,
                            np.array([[0.0, 0.0, gamma_common], [0.0, 0.0, 1.0 - gamma_common]]))
    spaces = LabelSpaces(frozenset({0, 1}), frozenset({2}), frozenset({0, 2}))
    return joint_s, joint_l, joint_t, spaces
