#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
小規模MLPの順伝播・逆伝播・最適化

行列演算は numpy のみ。順伝播でテープ（中間値）を記録し、
逆伝播はそのテープから全パラメータの勾配を計算する。
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

HIDDEN_ACTIVATIONS = ("relu", "tanh", "identity")
OUTPUT_ACTIVATIONS = ("identity", "softmax", "sigmoid")
OPTIMIZERS = ("adam", "sgd", "adadelta")
PROB_FLOOR = 1e-12
CHECKPOINT_FORMAT = "mlp-checkpoint/1"


class NnError(ValueError):
    """ネットワーク計算の基本例外"""


class TapeMismatchError(NnError):
    """テープ記録後にパラメータが変更された"""


class IncompatibleCheckpointError(NnError):
    """チェックポイントの構造が期待と一致しない"""


@dataclass(frozen=True)
class MlpSpec:
    """層サイズと活性化関数の指定"""

    layer_sizes: Tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise NnError(f"層サイズが不正です: {sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise NnError(f"不明な隠れ層活性化: {self.hidden_activation}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise NnError(f"不明な出力活性化: {self.output_activation}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def block_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for i in range(self.n_layers):
            shapes[f"W{i + 1}"] = (self.layer_sizes[i], self.layer_sizes[i + 1])
            shapes[f"b{i + 1}"] = (self.layer_sizes[i + 1],)
        return shapes

    def to_dict(self) -> Dict:
        return {"layer_sizes": list(self.layer_sizes),
                "hidden_activation": self.hidden_activation,
                "output_activation": self.output_activation}

    @classmethod
    def from_dict(cls, data: Dict) -> "MlpSpec":
        return cls(tuple(data["layer_sizes"]), data["hidden_activation"], data["output_activation"])


class Parameters:
    """名前付きパラメータブロック (W1, b1, ..., WL, bL)"""

    def __init__(self, blocks: Dict[str, np.ndarray]):
        self._blocks = {k: np.asarray(v, dtype=float) for k, v in blocks.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._blocks[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self._blocks[name] = np.asarray(value, dtype=float)

    def __contains__(self, name: str) -> bool:
        return name in self._blocks

    def __iter__(self) -> Iterator[str]:
        return iter(self._blocks)

    def keys(self):
        return self._blocks.keys()

    def items(self):
        return self._blocks.items()

    def copy(self) -> "Parameters":
        return Parameters({k: v.copy() for k, v in self._blocks.items()})

    def zeros_like(self) -> "Parameters":
        return Parameters({k: np.zeros_like(v) for k, v in self._blocks.items()})

    def _combine(self, other: "Parameters", op) -> "Parameters":
        if set(self.keys()) != set(other.keys()):
            raise NnError("パラメータブロック名が一致しません")
        return Parameters({k: op(v, other[k]) for k, v in self._blocks.items()})

    def __add__(self, other: "Parameters") -> "Parameters":
        return self._combine(other, np.add)

    def __sub__(self, other: "Parameters") -> "Parameters":
        return self._combine(other, np.subtract)

    def __mul__(self, scalar: float) -> "Parameters":
        return Parameters({k: v * float(scalar) for k, v in self._blocks.items()})

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(math.sqrt(sum(float(np.sum(v * v)) for v in self._blocks.values())))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self._blocks.values())

    def checksum(self) -> str:
        digest = hashlib.blake2b(digest_size=16)
        for name in sorted(self._blocks):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self._blocks[name]).tobytes())
        return digest.hexdigest()

    def to_lists(self) -> Dict[str, List]:
        return {k: v.tolist() for k, v in self._blocks.items()}


@dataclass
class Tape:
    """順伝播の中間値記録"""

    inputs: np.ndarray
    pre_activations: List[np.ndarray]
    activations: List[np.ndarray]
    params_checksum: str
    squeezed: bool = False

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


def init_parameters(spec: MlpSpec, rng: np.random.Generator) -> Parameters:
    """一様分布 U(-1/√fan_in, 1/√fan_in) で初期化"""
    blocks = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_sizes[i], spec.layer_sizes[i + 1]
        bound = 1.0 / math.sqrt(fan_in)
        blocks[f"W{i + 1}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        blocks[f"b{i + 1}"] = rng.uniform(-bound, bound, size=(fan_out,))
    return Parameters(blocks)


def _check_params(spec: MlpSpec, params: Parameters) -> None:
    for name, shape in spec.block_shapes().items():
        if name not in params or params[name].shape != shape:
            got = params[name].shape if name in params else None
            raise NnError(f"パラメータ {name} の形状が不正です: {got} != {shape}")


def _hidden(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _hidden_grad(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(float)
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


def _output(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "softmax":
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def forward(spec: MlpSpec, params: Parameters, x: np.ndarray) -> Tuple[np.ndarray, Tape]:
    """
    順伝播

    Args:
        spec: ネットワーク構成
        params: パラメータ
        x: 入力 (バッチ, 入力次元)。1次元なら1行として扱う

    Returns:
        (出力, テープ)
    """
    _check_params(spec, params)
    x = np.asarray(x, dtype=float)
    squeezed = x.ndim == 1
    if squeezed:
        x = x[np.newaxis, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise NnError(f"入力形状 {x.shape} が入力次元 {spec.input_dim} と一致しません")

    pre, acts = [], [x]
    a = x
    for i in range(spec.n_layers):
        z = a @ params[f"W{i + 1}"] + params[f"b{i + 1}"]
        pre.append(z)
        last = i == spec.n_layers - 1
        a = _output(spec.output_activation, z) if last else _hidden(spec.hidden_activation, z)
        acts.append(a)

    tape = Tape(x, pre, acts, params.checksum(), squeezed)
    out = a[0] if squeezed else a
    return out, tape


def backward(spec: MlpSpec, params: Parameters, tape: Tape,
             grad_output: np.ndarray) -> Tuple[Parameters, np.ndarray]:
    """
    逆伝播

    Args:
        spec: ネットワーク構成
        params: forward 時と同一のパラメータ
        tape: forward が返したテープ
        grad_output: 出力に対する損失勾配（出力と同形状）

    Returns:
        (パラメータ勾配, 入力勾配)
    """
    if params.checksum() != tape.params_checksum:
        raise TapeMismatchError("テープ記録後にパラメータが変更されています")
    g = np.asarray(grad_output, dtype=float)
    if tape.squeezed and g.ndim == 1:
        g = g[np.newaxis, :]
    if g.shape != tape.output.shape:
        raise NnError(f"出力勾配の形状 {g.shape} が出力 {tape.output.shape} と一致しません")

    y = tape.output
    if spec.output_activation == "softmax":
        delta = y * (g - np.sum(g * y, axis=1, keepdims=True))
    elif spec.output_activation == "sigmoid":
        delta = g * y * (1.0 - y)
    else:
        delta = g

    grads = {}
    for i in reversed(range(spec.n_layers)):
        a_prev = tape.activations[i]
        grads[f"W{i + 1}"] = a_prev.T @ delta
        grads[f"b{i + 1}"] = delta.sum(axis=0)
        delta = delta @ params[f"W{i + 1}"].T
        if i > 0:
            delta = delta * _hidden_grad(spec.hidden_activation, tape.pre_activations[i - 1])

    grad_input = delta[0] if tape.squeezed else delta
    return Parameters(grads), grad_input


def cross_entropy(probs: np.ndarray, labels: np.ndarray,
                  weights: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray, List[str]]:
    """
    平均交差エントロピー

    確率は PROB_FLOOR で下限クランプし、その場合は flags に記録する。

    Returns:
        (損失, 確率に対する勾配, フラグ)
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    if n == 0:
        return 0.0, np.zeros_like(probs), ["empty_batch"]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    rows = np.arange(n)
    picked = probs[rows, labels]
    flags = []
    if np.any(picked < PROB_FLOOR):
        flags.append("probability_clamped")
    clamped = np.maximum(picked, PROB_FLOOR)
    loss = float(np.sum(-w * np.log(clamped)) / n)
    grad = np.zeros_like(probs)
    grad[rows, labels] = -w / (n * clamped)
    return loss, grad, flags


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    rho: float = 0.9
    adadelta_epsilon: float = 1e-6

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise NnError(f"不明なオプティマイザ: {self.kind}")
        if not self.learning_rate > 0:
            raise NnError(f"学習率は正である必要があります: {self.learning_rate}")


@dataclass
class OptimizerState:
    step: int = 0
    slots: Dict[str, Parameters] = field(default_factory=dict)


def init_optimizer_state(config: OptimizerConfig, params: Parameters) -> OptimizerState:
    if config.kind == "adam":
        return OptimizerState(0, {"m": params.zeros_like(), "v": params.zeros_like()})
    if config.kind == "adadelta":
        return OptimizerState(0, {"sq_grad": params.zeros_like(), "sq_update": params.zeros_like()})
    return OptimizerState(0, {})


def resize_optimizer_state(state: OptimizerState, params: Parameters) -> OptimizerState:
    """パラメータ形状の拡張に合わせてスロットをゼロ埋めで拡張"""
    slots = {}
    for slot_name, slot in state.slots.items():
        blocks = {}
        for name, value in params.items():
            old = slot[name] if name in slot else np.zeros(0)
            padded = np.zeros_like(value)
            if old.size:
                region = tuple(slice(0, s) for s in old.shape)
                padded[region] = old
            blocks[name] = padded
        slots[slot_name] = Parameters(blocks)
    return OptimizerState(state.step, slots)


def optimizer_step(config: OptimizerConfig, params: Parameters, grads: Parameters,
                   state: OptimizerState) -> Tuple[Parameters, OptimizerState]:
    """
    1ステップ更新

    Returns:
        (新パラメータ, 新状態)。非有限勾配は NnError
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NnError(f"勾配ブロック {name} に非有限値があります")

    step = state.step + 1
    lr = config.learning_rate
    new_blocks, new_slots = {}, {k: v.copy() for k, v in state.slots.items()}

    for name, p in params.items():
        g = grads[name]
        if config.kind == "sgd":
            new_blocks[name] = p - lr * g
        elif config.kind == "adam":
            m = config.beta1 * state.slots["m"][name] + (1 - config.beta1) * g
            v = config.beta2 * state.slots["v"][name] + (1 - config.beta2) * g * g
            m_hat = m / (1 - config.beta1 ** step)
            v_hat = v / (1 - config.beta2 ** step)
            new_blocks[name] = p - lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
            new_slots["m"][name] = m
            new_slots["v"][name] = v
        else:
            eps = config.adadelta_epsilon
            sq_g = config.rho * state.slots["sq_grad"][name] + (1 - config.rho) * g * g
            delta = np.sqrt(state.slots["sq_update"][name] + eps) / np.sqrt(sq_g + eps) * g
            sq_u = config.rho * state.slots["sq_update"][name] + (1 - config.rho) * delta * delta
            new_blocks[name] = p - lr * delta
            new_slots["sq_grad"][name] = sq_g
            new_slots["sq_update"][name] = sq_u

    return Parameters(new_blocks), OptimizerState(step, new_slots)


def extend_output_units(spec: MlpSpec, params: Parameters, new_output_dim: int,
                        rng: np.random.Generator) -> Tuple[MlpSpec, Parameters]:
    """出力ユニットを追加（既存の列は保持、新規列は初期化）"""
    if new_output_dim < spec.output_dim:
        raise NnError("出力ユニット数は減らせません")
    if new_output_dim == spec.output_dim:
        return spec, params.copy()
    sizes = spec.layer_sizes[:-1] + (new_output_dim,)
    new_spec = MlpSpec(sizes, spec.hidden_activation, spec.output_activation)
    fresh = init_parameters(new_spec, rng)
    last = spec.n_layers
    out = params.copy()
    w, b = fresh[f"W{last}"], fresh[f"b{last}"]
    w[:, :spec.output_dim] = params[f"W{last}"]
    b[:spec.output_dim] = params[f"b{last}"]
    out[f"W{last}"] = w
    out[f"b{last}"] = b
    return new_spec, out


def numerical_gradient(loss_fn: Callable[[Parameters], float], params: Parameters,
                       step: float = 1e-4) -> Parameters:
    """中心差分による数値勾配"""
    grads = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        it = np.nditer(value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus, minus = params.copy(), params.copy()
            plus[name][idx] += step
            minus[name][idx] -= step
            g[idx] = (loss_fn(plus) - loss_fn(minus)) / (2 * step)
        grads[name] = g
    return Parameters(grads)


def gradient_relative_error(analytic: Parameters, numeric: Parameters) -> float:
    """‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)"""
    diff = (analytic - numeric).norm()
    return diff / max(analytic.norm() + numeric.norm(), 1e-12)


def save_checkpoint(path: str, spec: MlpSpec, params: Parameters,
                    extra: Optional[Dict] = None) -> None:
    data = {
        "format": CHECKPOINT_FORMAT,
        "spec": spec.to_dict(),
        "params": params.to_lists(),
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)
    logger.debug("チェックポイント保存: %s", path)


def load_checkpoint(path: str, expected: Optional[MlpSpec] = None) -> Tuple[MlpSpec, Parameters, Dict]:
    """
    チェックポイント読込

    JSON の破損や必須キーの欠落も IncompatibleCheckpointError として報告する。

    Args:
        path: JSONパス
        expected: 期待する構成（層サイズ・活性化が一致しなければエラー）
    """
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise IncompatibleCheckpointError(f"チェックポイントのJSONが不正です: {path}: {exc}") from exc
    if not isinstance(data, dict) or data.get("format") != CHECKPOINT_FORMAT:
        found = data.get("format") if isinstance(data, dict) else type(data).__name__
        raise IncompatibleCheckpointError(f"未知のチェックポイント形式: {found}")
    try:
        spec = MlpSpec.from_dict(data["spec"])
        params = Parameters({k: np.asarray(v, dtype=float) for k, v in data["params"].items()})
        extra = data.get("extra", {})
        if not isinstance(extra, dict):
            raise TypeError(f"extra はオブジェクトである必要があります: {type(extra).__name__}")
    except (KeyError, TypeError, AttributeError, ValueError) as exc:
        raise IncompatibleCheckpointError(f"チェックポイントの内容が不正です: {path}: {exc!r}") from exc
    if expected is not None and spec != expected:
        raise IncompatibleCheckpointError(f"ネットワーク構造が一致しません: {spec} != {expected}")
    try:
        _check_params(spec, params)
    except NnError as exc:
        raise IncompatibleCheckpointError(str(exc)) from exc
    return spec, params, extra
