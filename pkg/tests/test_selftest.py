from evcoord.selftest import SIZES, checks, run_selftest


def test_quick_selftest_passes():
    results = run_selftest("quick")
    failed = [f"{r.name}: {r.detail}" for r in results if not r.ok]
    assert not failed, failed
    assert [r.name for r in results] == [name for name, _ in checks("quick")]


def test_full_level_adds_benchmark():
    assert "ev-subproblem-benchmark" in [name for name, _ in checks("full")]
    assert SIZES["full"]["bench"] == 8192
