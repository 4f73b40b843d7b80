#!/usr/bin/env python3
"""Recomputes every frozen value in derived_values.json from its inputs.

Each value is obtained a different way from the C++ library: characteristic
polynomials, brute-force searches and loop-by-loop hand execution of the
merge rules. Exit status is non-zero on any mismatch.
"""
import json
import math
import sys
from pathlib import Path

import numpy as np

TOL = 1e-12
failures = []


def check(name, got, want, tol=TOL):
    got, want = np.asarray(got, float), np.asarray(want, float)
    if got.shape != want.shape or not np.allclose(got, want, atol=tol, rtol=0):
        failures.append(f"{name}: oracle {got.tolist()} != frozen {want.tolist()}")


def sgn(v):
    return (v > 0) - (v < 0)


def ta(c):
    base = np.array(c["base"], float)
    out = base + c["lambda"] * sum(np.array(d, float) for d in c["deltas"])
    check("ta.merged", out, c["merged"])


def ties(c):
    taus = c["taus"]
    n = len(taus[0])
    keep = min(math.ceil(c["keep_fraction"] * n - 1e-9), n)
    trimmed = []
    for tau in taus:
        order = sorted(range(n), key=lambda i: (-abs(tau[i]), i))
        kept = set(order[:keep])
        trimmed.append([tau[i] if i in kept else 0.0 for i in range(n)])
    check("ties.trimmed", trimmed, c["trimmed"])
    elected = [sgn(sum(t[i] for t in trimmed)) for i in range(n)]
    check("ties.elected", elected, c["elected"])
    merged = []
    for i in range(n):
        agree = [t[i] for t in trimmed if elected[i] != 0 and sgn(t[i]) == elected[i]]
        merged.append(c["lambda"] * (sum(agree) / len(agree) if agree else 0.0))
    check("ties.merged", merged, c["merged"])


def fisher(c):
    m, f = np.array(c["models"], float), np.array(c["fishers"], float)
    check("fisher.merged", (m * f).sum(0) / f.sum(0), c["merged"])


def fisher_diag(c):
    # d/dw (w x - y)^2 = 2 x (w x - y); Fisher of one sample is its square.
    w, x, y = c["w"], c["x"], c["y"]
    g = 2 * x * (w * x - y)
    check("fisher_diag.fisher", g * g, c["fisher"])
    g2 = 2 * (2 * x) * (w * 2 * x - y)
    check("fisher_diag.fisher_doubled_x", g2 * g2, c["fisher_doubled_x"])


def regmean(c):
    num = sum(w * g for w, g in zip(c["models"], c["grams"]))
    check("regmean.merged", num / sum(c["grams"]), c["merged"])


def emr(c):
    taus = c["taus"]
    n = len(taus[0])
    tau_uni = []
    for i in range(n):
        s = sgn(sum(t[i] for t in taus))
        mags = [abs(t[i]) for t in taus if sgn(t[i]) == s]
        tau_uni.append(s * max(mags) if s != 0 else 0.0)
    check("emr.tau_uni", tau_uni, c["tau_uni"])
    masks = [[1.0 if t[i] * tau_uni[i] > 0 else 0.0 for i in range(n)] for t in taus]
    check("emr.masks", masks, c["masks"])
    rescalers = []
    for t, m in zip(taus, masks):
        den = sum(abs(mi * u) for mi, u in zip(m, tau_uni))
        rescalers.append(sum(abs(v) for v in t) / den if den > 0 else 1.0)
    check("emr.rescalers", rescalers, c["rescalers"])
    check("emr.task1_delta", [rescalers[0] * m * u for m, u in zip(masks[0], tau_uni)],
          c["task1_delta"])


def sym_eig(c):
    (a, b), (_, d) = c["s"]
    tr, det = a + d, a * d - b * b
    disc = math.sqrt(tr * tr - 4 * det)
    check("sym_eig.values", [(tr - disc) / 2, (tr + disc) / 2], c["values"])


def osrm_init(c):
    h = np.array(c["h"], float)
    s = h.T @ h
    (a, b), (_, d) = s
    lam = ((a + d) - math.sqrt((a - d) ** 2 + 4 * b * b)) / 2
    check("osrm_init.objective", lam, c["objective"])
    # Eigenvector of [[a,b],[b,d]] for lam is (b, lam - a); sign: largest entry positive.
    v = np.array([b, lam - a])
    v /= np.linalg.norm(v)
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    check("osrm_init.a_tilde", v, c["a_tilde"])
    rng = np.random.default_rng(0)
    u = rng.standard_normal((100000, 2))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    vals = ((u @ h.T) ** 2).sum(1)
    if vals.min() < c["objective"] - 1e-12:
        failures.append("osrm_init: a random unit vector beats the frozen objective")


def procrustes(c):
    ai, af = np.array(c["a_init"], float), np.array(c["a_ft"], float)

    def residual(theta, reflect):
        cs, sn = math.cos(theta), math.sin(theta)
        omega = np.array([[cs, sn], [sn, -cs]]) if reflect else np.array([[cs, -sn], [sn, cs]])
        return np.linalg.norm(omega @ af - ai)

    # Grid over rotations and reflections, then golden-section refinement
    # around the best grid point of each family.
    best = math.inf
    step = 2 * math.pi / 3600
    for reflect in (False, True):
        grid = [i * step for i in range(3600)]
        t0 = min(grid, key=lambda t: residual(t, reflect))
        lo, hi = t0 - step, t0 + step
        g = (math.sqrt(5) - 1) / 2
        for _ in range(100):
            m1, m2 = hi - g * (hi - lo), lo + g * (hi - lo)
            if residual(m1, reflect) < residual(m2, reflect):
                hi = m2
            else:
                lo = m1
        best = min(best, residual((lo + hi) / 2, reflect))
    check("procrustes.distance", best, c["distance"], tol=1e-9)
    check("procrustes.normalized", best / np.linalg.norm(ai), c["normalized"], tol=1e-9)


def interference(c):
    b, a, h = (np.array(c[k], float) for k in ("b", "a", "h"))
    out = 0.0
    prod = c["scale"] * b @ a @ h.T
    for row in prod:
        for v in row:
            out += v * v
    check("interference.norm", math.sqrt(out), c["norm"])


def lora_delta(c):
    b, a = np.array(c["b"], float), np.array(c["a"], float)
    check("lora_delta.delta", c["scale"] * np.outer(b[:, 0], a[0]), c["delta"])


def apply_adapter(c):
    w0, b, a, h = (np.array(c[k], float) for k in ("w0", "b", "a", "h"))
    check("apply_adapter.out", w0 @ h + c["scale"] * b @ (a @ h), c["out"])


def posthoc(c):
    dw, at = np.array(c["delta"], float), np.array(c["a_tilde"], float)
    bhat = dw @ at.T @ np.linalg.inv(at @ at.T)
    check("posthoc.b_hat", bhat, c["b_hat"])
    check("posthoc.delta_hat", bhat @ at, c["delta_hat"])


def main():
    path = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).with_name(
        "derived_values.json")
    cases = json.loads(path.read_text())
    for name, fn in [("ta", ta), ("ties", ties), ("fisher", fisher),
                     ("fisher_diag", fisher_diag), ("regmean", regmean), ("emr", emr),
                     ("sym_eig", sym_eig), ("osrm_init", osrm_init),
                     ("procrustes", procrustes), ("interference", interference),
                     ("lora_delta", lora_delta), ("apply_adapter", apply_adapter),
                     ("posthoc", posthoc)]:
        fn(cases[name])
    for f in failures:
        print("MISMATCH", f)
    print(f"{len(cases)} case groups checked, {len(failures)} mismatches")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
