"""Smoke test for the pyedubal extension.

Build and install with `pip install ./crates/python` (or
`maturin develop -m crates/python/Cargo.toml`), then run this file.
"""

import json
import math
from pathlib import Path

import pyedubal as eb


def close(a, b, tol):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    p = eb.RobotParams()
    assert close(p.eta, 0.5398566585, 1e-9), p.eta
    a, b, c = eb.linearize(p)
    assert close(a[3][2], 36.32394584052353, 1e-12)
    assert close(b[1][0], 10.060362173038229, 1e-12)

    d4 = eb.lqr([1.0, 0.01, 1.0, 0.01], 100.0, states=4, params=p)
    assert all(close(x, y, 1e-6) for x, y in zip(d4["k"], [-0.1, -2.043125, -90.199655, -14.966085])), d4["k"]
    assert d4["care_residual"] < 1e-6
    assert all(re < 0 for re, _ in d4["closed_loop_poles"])

    t, u, y = eb.gen_step(gain=2.6, tau=0.038)
    k_m, tau, res = eb.identify(t, u, y)
    assert close(k_m, 2.6, 1e-6) and close(tau, 0.038, 1e-6) and res < 1e-9
    try:
        n = 50
        eb.identify([i * 1e-3 for i in range(n)], [1.0] * n, [2.6] * n)
    except ValueError as e:
        assert "unidentifiable" in str(e)
    else:
        raise AssertionError("constant input was accepted")

    kp, ki = eb.pi_design(2.6, 0.038)
    assert kp > 0 and ki > 0

    num, den = eb.position_tf()
    assert close(eb.critical_gain(num, den), 1.3251532512460709, 1e-6)
    assert all(re < 0 for re, _ in eb.closure_poles(num, den, 0.58))
    ts, ys = eb.step_response(num, den, 0.58)
    assert min(ys) < 0 and close(ys[-1], 0.99445, 1e-3)

    frames = eb.simulate("recovery")
    assert len(frames) == 1001 and math.isfinite(frames[-1]["theta"])
    fixture = Path(__file__).resolve().parents[1] / "crates" / "core" / "fixtures" / "recovery.json"
    assert eb.simulate_csv("recovery") == eb.simulate_csv(fixture.read_text())
    custom = eb.simulate(json.dumps({"schema_version": 1, "duration": 0.5, "initial": {"theta": 0.05}}))
    assert len(custom) == 101

    report = eb.paper_suite()
    failed = [c["name"] for c in report["checks"] if not c["passed"]]
    print(f"{len(report['checks'])} checks, {len(failed)} failed: {failed}")

    server = eb.Server(port=0)
    assert server.port > 0 and server.session_count == 0
    server.shutdown()
    print("pyedubal smoke test ok")


if __name__ == "__main__":
    main()
