#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
nn_core の動作検証テスト
勾配チェック・テープ整合性・オプティマイザ・チェックポイントを確認
"""

import os
import sys
import tempfile

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest

from nn_core import (
    IncompatibleCheckpointError, MlpSpec, NnError, OptimizerConfig, Parameters,
    TapeMismatchError, backward, cross_entropy, extend_output_units, forward,
    gradient_relative_error, init_optimizer_state, init_parameters, load_checkpoint,
    numerical_gradient, optimizer_step, resize_optimizer_state, save_checkpoint,
)
from suite_runner import exit_with, run_suite

GRAD_TOLERANCE = 1e-4


def _check_gradients(spec: MlpSpec, seed: int, batch: int = 5):
    rng = np.random.default_rng(seed)
    params = init_parameters(spec, rng)
    x = rng.normal(size=(batch, spec.input_dim))
    weights = rng.normal(size=(batch, spec.output_dim))

    def loss_fn(p: Parameters) -> float:
        y, _ = forward(spec, p, x)
        return float(np.sum(weights * y))

    _, tape = forward(spec, params, x)
    analytic, _ = backward(spec, params, tape, weights)
    numeric = numerical_gradient(loss_fn, params)
    return gradient_relative_error(analytic, numeric)


def test_gradient_check_all_activations():
    """全活性化の組合せで解析勾配と数値勾配が一致"""
    print("=== 勾配チェックテスト ===")
    for hidden in ("tanh", "identity", "relu"):
        for output in ("identity", "softmax", "sigmoid"):
            spec = MlpSpec((4, 6, 3), hidden, output)
            error = _check_gradients(spec, seed=7)
            print(f"  {hidden:8s}/{output:8s}: 相対誤差 {error:.2e}")
            assert error <= GRAD_TOLERANCE, f"{hidden}/{output} 相対誤差 {error}"
    print("  ✅ 合格")


def test_gradient_check_deep_network():
    """3層ネットワークでも勾配一致"""
    spec = MlpSpec((3, 5, 4, 2), "tanh", "softmax")
    assert _check_gradients(spec, seed=11, batch=4) <= GRAD_TOLERANCE


def test_input_gradient_matches_finite_difference():
    spec = MlpSpec((3, 4, 1), "tanh", "sigmoid")
    rng = np.random.default_rng(3)
    params = init_parameters(spec, rng)
    x = rng.normal(size=(1, 3))
    _, tape = forward(spec, params, x)
    _, grad_x = backward(spec, params, tape, np.ones((1, 1)))
    step = 1e-5
    for j in range(3):
        plus, minus = x.copy(), x.copy()
        plus[0, j] += step
        minus[0, j] -= step
        fd = (forward(spec, params, plus)[0][0, 0] - forward(spec, params, minus)[0][0, 0]) / (2 * step)
        assert abs(fd - grad_x[0, j]) < 1e-6


def test_tape_mismatch_detected():
    """テープ記録後のパラメータ変更を検出"""
    print("=== テープ不整合テスト ===")
    spec = MlpSpec((2, 3, 1))
    params = init_parameters(spec, np.random.default_rng(0))
    _, tape = forward(spec, params, np.ones((2, 2)))
    params["W1"] = params["W1"] + 0.1
    with pytest.raises(TapeMismatchError):
        backward(spec, params, tape, np.ones((2, 1)))
    print("  ✅ 合格")


def test_gradient_shape_mismatch_rejected():
    spec = MlpSpec((2, 3, 1))
    params = init_parameters(spec, np.random.default_rng(0))
    _, tape = forward(spec, params, np.ones((2, 2)))
    with pytest.raises(NnError):
        backward(spec, params, tape, np.ones((3, 1)))


def test_input_dimension_rejected():
    spec = MlpSpec((2, 3, 1))
    params = init_parameters(spec, np.random.default_rng(0))
    with pytest.raises(NnError):
        forward(spec, params, np.ones((2, 5)))


def test_single_row_input_is_squeezed():
    spec = MlpSpec((2, 3, 4), "relu", "softmax")
    params = init_parameters(spec, np.random.default_rng(1))
    y, tape = forward(spec, params, np.array([0.5, -0.2]))
    assert y.shape == (4,)
    assert abs(y.sum() - 1.0) < 1e-12
    grads, grad_x = backward(spec, params, tape, np.ones(4))
    assert grad_x.shape == (2,)
    assert grads["W1"].shape == (2, 3)


def test_cross_entropy_clamp_flag():
    """確率0のクラスでクランプフラグが立つ"""
    probs = np.array([[1.0, 0.0], [0.5, 0.5]])
    loss, grad, flags = cross_entropy(probs, np.array([1, 0]))
    assert "probability_clamped" in flags
    assert np.isfinite(loss)
    assert np.all(np.isfinite(grad))
    loss2, _, flags2 = cross_entropy(probs, np.array([0, 0]))
    assert flags2 == []
    assert abs(loss2 - (-np.log(0.5) / 2)) < 1e-12


def test_adam_minimizes_quadratic():
    """Adam で二次関数が減少"""
    print("=== Adam 最小化テスト ===")
    spec = MlpSpec((1, 1))
    params = Parameters({"W1": np.array([[3.0]]), "b1": np.array([-2.0])})
    config = OptimizerConfig("adam", learning_rate=0.05)
    state = init_optimizer_state(config, params)
    start = float(params["W1"][0, 0] ** 2 + params["b1"][0] ** 2)
    for _ in range(300):
        grads = Parameters({"W1": 2 * params["W1"], "b1": 2 * params["b1"]})
        params, state = optimizer_step(config, params, grads, state)
    end = float(params["W1"][0, 0] ** 2 + params["b1"][0] ** 2)
    print(f"  開始: {start:.4f} 終了: {end:.6f}")
    assert end < 0.01 * start
    assert state.step == 300
    print("  ✅ 合格")


def test_sgd_and_adadelta_descend():
    for kind, lr in (("sgd", 0.1), ("adadelta", 1.0)):
        config = OptimizerConfig(kind, learning_rate=lr)
        params = Parameters({"W1": np.array([[2.0]]), "b1": np.array([1.0])})
        state = init_optimizer_state(config, params)
        start = params.norm()
        for _ in range(200):
            grads = Parameters({"W1": 2 * params["W1"], "b1": 2 * params["b1"]})
            params, state = optimizer_step(config, params, grads, state)
        assert params.norm() < start, kind


def test_sgd_single_step_exact():
    """SGD 1ステップは p − lr·g に一致"""
    config = OptimizerConfig("sgd", learning_rate=0.1)
    params = Parameters({"W1": np.array([[0.5, -1.5]]), "b1": np.array([2.0, 0.25])})
    grads = Parameters({"W1": np.array([[0.3, -0.7]]), "b1": np.array([-4.0, 0.0])})
    state = init_optimizer_state(config, params)
    updated, state = optimizer_step(config, params, grads, state)
    assert np.array_equal(updated["W1"], params["W1"] - 0.1 * grads["W1"])
    assert np.array_equal(updated["b1"], params["b1"] - 0.1 * grads["b1"])
    assert state.step == 1


def test_adam_first_step_matches_hand_calculation():
    """ゼロ状態からの Adam 1ステップを手計算と照合"""
    config = OptimizerConfig("adam", learning_rate=0.01)
    params = Parameters({"W1": np.array([[1.0, -2.0]]), "b1": np.array([0.5, 0.0])})
    grads = Parameters({"W1": np.array([[0.4, -3.0]]), "b1": np.array([1e-3, 0.0])})
    state = init_optimizer_state(config, params)
    updated, state = optimizer_step(config, params, grads, state)
    for name in ("W1", "b1"):
        g = grads[name]
        m = (1 - 0.9) * g
        v = (1 - 0.999) * g * g
        m_hat = m / (1 - 0.9)
        v_hat = v / (1 - 0.999)
        expected = params[name] - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert np.allclose(updated[name], expected, rtol=0, atol=1e-15)
        assert np.allclose(state.slots["m"][name], m, rtol=0, atol=1e-18)
        assert np.allclose(state.slots["v"][name], v, rtol=0, atol=1e-18)
    # バイアス補正により初回の更新幅はほぼ lr·sign(g)、勾配0の要素は動かない
    assert abs(updated["W1"][0, 0] - (1.0 - 0.01)) < 1e-9
    assert abs(updated["W1"][0, 1] - (-2.0 + 0.01)) < 1e-9
    assert updated["b1"][1] == 0.0


def test_corrupted_checkpoint_reported_as_incompatible():
    """破損JSON・必須キー欠落・型違いは IncompatibleCheckpointError"""
    spec = MlpSpec((2, 3, 1), "relu", "identity")
    params = init_parameters(spec, np.random.default_rng(4))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "net.json")
        save_checkpoint(path, spec, params)
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
        cases = {
            "truncated": text[: len(text) // 2],
            "no_params": text.replace('"params"', '"weights"'),
            "list": "[1, 2, 3]",
            "bad_extra": text.replace('"extra": {}', '"extra": 5'),
        }
        for name, content in cases.items():
            broken = os.path.join(tmp, f"{name}.json")
            with open(broken, "w", encoding="utf-8") as f:
                f.write(content)
            with pytest.raises(IncompatibleCheckpointError):
                load_checkpoint(broken)


def test_non_finite_gradient_names_block():
    """非有限勾配でブロック名を含むエラー"""
    config = OptimizerConfig()
    params = Parameters({"W1": np.zeros((1, 1)), "b1": np.zeros(1)})
    state = init_optimizer_state(config, params)
    grads = Parameters({"W1": np.array([[np.nan]]), "b1": np.zeros(1)})
    with pytest.raises(NnError, match="W1"):
        optimizer_step(config, params, grads, state)


def test_invalid_learning_rate_rejected():
    with pytest.raises(NnError):
        OptimizerConfig("adam", learning_rate=0.0)


def test_extend_output_units_preserves_columns():
    spec = MlpSpec((2, 3, 2), "relu", "softmax")
    rng = np.random.default_rng(5)
    params = init_parameters(spec, rng)
    config = OptimizerConfig()
    state = init_optimizer_state(config, params)
    new_spec, new_params = extend_output_units(spec, params, 4, rng)
    assert new_spec.output_dim == 4
    assert np.array_equal(new_params["W2"][:, :2], params["W2"])
    assert np.array_equal(new_params["W1"], params["W1"])
    resized = resize_optimizer_state(state, new_params)
    assert resized.slots["m"]["W2"].shape == (3, 4)


def test_checkpoint_roundtrip_and_incompatible():
    """チェックポイントの保存・読込と構造不一致の検出"""
    print("=== チェックポイントテスト ===")
    spec = MlpSpec((4, 8, 1), "relu", "identity")
    params = init_parameters(spec, np.random.default_rng(9))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "net.json")
        save_checkpoint(path, spec, params, {"note": "テスト"})
        loaded_spec, loaded, extra = load_checkpoint(path, expected=spec)
        assert loaded_spec == spec
        assert extra["note"] == "テスト"
        x = np.random.default_rng(1).normal(size=(3, 4))
        assert np.array_equal(forward(spec, params, x)[0], forward(spec, loaded, x)[0])
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path, expected=MlpSpec((4, 16, 1)))
    print("  ✅ 合格")


def main():
    tests = [
        ("勾配チェック（全活性化）", test_gradient_check_all_activations),
        ("勾配チェック（3層）", test_gradient_check_deep_network),
        ("入力勾配", test_input_gradient_matches_finite_difference),
        ("テープ不整合", test_tape_mismatch_detected),
        ("出力勾配形状", test_gradient_shape_mismatch_rejected),
        ("入力次元", test_input_dimension_rejected),
        ("1行入力", test_single_row_input_is_squeezed),
        ("交差エントロピー", test_cross_entropy_clamp_flag),
        ("Adam", test_adam_minimizes_quadratic),
        ("SGD/Adadelta", test_sgd_and_adadelta_descend),
        ("SGD 1ステップ", test_sgd_single_step_exact),
        ("Adam 1ステップ", test_adam_first_step_matches_hand_calculation),
        ("破損チェックポイント", test_corrupted_checkpoint_reported_as_incompatible),
        ("非有限勾配", test_non_finite_gradient_names_block),
        ("学習率検証", test_invalid_learning_rate_rejected),
        ("出力ユニット拡張", test_extend_output_units_preserves_columns),
        ("チェックポイント", test_checkpoint_roundtrip_and_incompatible),
    ]
    exit_with(run_suite("nn_core テスト", tests))


if __name__ == "__main__":
    main()
