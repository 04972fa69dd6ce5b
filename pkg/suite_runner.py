#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
テストスクリプト共通の集計ランナー
pytest を使わずに `python test_xxx.py` で直接実行するときに使う
"""

import sys
import traceback
from typing import Callable, List, Tuple


def run_suite(title: str, tests: List[Tuple[str, Callable[[], None]]]) -> bool:
    """
    テスト関数を順に実行して結果サマリーを表示

    Args:
        title: 見出し
        tests: (テスト名, 引数なしテスト関数) のリスト

    Returns:
        全テスト合格なら True
    """
    print(f"🧪 {title}")
    print("=" * 60)

    results = []
    for name, func in tests:
        try:
            func()
            results.append((name, True))
        except AssertionError as exc:
            print(f"  ❌ {name}: {exc}")
            results.append((name, False))
        except Exception:
            print(f"  ❌ {name}: 例外発生")
            traceback.print_exc()
            results.append((name, False))
        print()

    print("=" * 60)
    print("📊 テスト結果サマリー")
    print("=" * 60)
    passed = 0
    for name, ok in results:
        status = "✅ 合格" if ok else "❌ 不合格"
        print(f"{name}: {status}")
        passed += int(ok)
    print(f"\n総合結果: {passed}/{len(results)} テスト合格")
    if passed == len(results):
        print("🎉 すべてのテストが合格しました！")
    else:
        print("⚠️ 一部のテストが不合格です。")
    return passed == len(results)


def exit_with(success: bool) -> None:
    sys.exit(0 if success else 1)
