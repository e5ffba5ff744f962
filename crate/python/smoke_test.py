#!/usr/bin/env python3
"""Smoke test for the utilmax_py extension module.

Build the module first, then run this script:

    cargo build -p utilmax-py --release
    python3 python/smoke_test.py
"""
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    for profile in ("release", "debug"):
        so = os.path.join(ROOT, "target", profile, "libutilmax_py.so")
        if os.path.exists(so):
            d = tempfile.mkdtemp(prefix="utilmax_py_")
            shutil.copy(so, os.path.join(d, "utilmax_py.so"))
            sys.path.insert(0, d)
            import utilmax_py

            return utilmax_py
    sys.exit("build the extension first: cargo build -p utilmax-py --release")


um = load_module()

BINOMIAL = """
{"d": 1, "T": 1, "nodes": [
  {"id": 0, "parent": null, "prob": 1.0, "prices": [0.0]},
  {"id": 1, "parent": 0, "prob": 0.75, "prices": [1.0]},
  {"id": 2, "parent": 0, "prob": 0.25, "prices": [-1.0]}
]}
"""

tree = um.Tree.from_json(BINOMIAL)
assert tree.d == 1 and tree.horizon == 1 and tree.n_nodes == 3

report = tree.validate()
assert report["verdict"] == "no_arbitrage", report
assert abs(report["certificates"][0]["kappa"] - 0.25) < 1e-12

u = um.Utility.exponential(1.0)
assert abs(u.eval(0.0)) < 1e-15
assert abs(u.left_derivative(0.0) - 1.0) < 1e-15

solver = um.Solver(tree, u, phi_max=8.0, grid=1025)
sol = solver.solve(0.0)

phi_star = math.log(3.0) / 2.0
value_star = 1.0 - math.sqrt(3.0) / 2.0
assert abs(sol.root_value - value_star) < 1e-9, sol.root_value
assert abs(sol.strategy()[0][0] - phi_star) < 1e-9, sol.strategy()
assert not sol.boundary_hit
assert abs(sol.wealth()[1] - phi_star) < 1e-12

xs, ys = sol.value_function(0)
assert len(xs) > 100 and len(xs) == len(ys)

m = sol.measure()
assert abs(m["leaf_q"]["1"] - 0.5) < 1e-8
assert abs(m["leaf_q"]["2"] - 0.5) < 1e-8
assert abs(m["martingale_residuals"]["0"][0]) < 1e-8

price = solver.price(0.0, {1: 1.0, 2: 0.0}, 1.0)
assert abs(price["price"] - 0.5) < 1e-6, price

# expected utility of an explicit strategy: the kinked demo utility gives
# partial sums of 1/j^2
u73 = um.Utility.example73(30)
for n in (1, 3, 10):
    eu = um.expected_utility(tree, u73, 0.0, {0: [float(n)]})
    partial = sum(1.0 / j**2 for j in range(1, n + 1))
    assert abs(eu - partial) <= 1e-12, (n, eu, partial)

# arbitrage is refused
ARB = """
{"d": 1, "T": 1, "nodes": [
  {"id": 0, "parent": null, "prob": 1.0, "prices": [0.0]},
  {"id": 1, "parent": 0, "prob": 0.5, "prices": [1.0]},
  {"id": 2, "parent": 0, "prob": 0.5, "prices": [2.0]}
]}
"""
bad = um.Tree.from_json(ARB)
assert bad.validate()["verdict"] == "arbitrage"
try:
    um.Solver(bad, u).solve(0.0)
    raise SystemExit("arbitrage tree must be refused")
except ValueError as e:
    assert "arbitrage" in str(e)

print("smoke test passed")
