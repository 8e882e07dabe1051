"""Exit criteria, one test per criterion; each prints a PASS/FAIL line."""

import json
import math
import os
import subprocess
import sys
import time
import tracemalloc

import numpy as np
import pytest
from scipy.integrate import quad

from geoagg.aggregation import (
    AggregatorKind,
    ExpertBundle,
    aggregate,
    collapse_ratio,
    linear_aggregate,
    norm_free_aggregate,
    sba_aggregate,
    unit_normalized_aggregate,
)
from geoagg.cli import main
from geoagg.geoa import DumpHeader, DumpRecord, read_dump, write_dump
from geoagg.sphere import AntipodalDirections, angle_between, karcher_mean, slerp

from conftest import ACCEPTANCE_LINES, random_bundle, random_rotation, unit_pair

L, S = AggregatorKind.LINEAR, AggregatorKind.SBA


def check(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_01_sba_radius_law():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    n = 0
    for i in range(10_000):
        dim = (2, 8, 768)[i % 3]
        k = (1, 2, 4, 8)[(i // 3) % 4]
        b = random_bundle(rng, dim, k)
        target = float(b.weights @ b.radii())
        worst = max(worst, abs(np.linalg.norm(sba_aggregate(b)) - target) / target)
        n += 1
    dt = time.perf_counter() - t0
    check(1, worst <= 1e-9 and dt < 30, f"{n} bundles, max rel err {worst:.2e} (<=1e-9), {dt:.1f}s (<30s)")


def test_02_inward_collapse():
    rng = np.random.default_rng(102)
    strict = True
    worst = 0.0
    done = 0
    while done < 10_000:
        k = int(rng.integers(2, 6))
        b = random_bundle(rng, int(rng.choice([3, 16, 128])), k, equal_norms=True)
        U = b.outputs / b.radii()[:, None]
        ang = [angle_between(U[i], U[j]) for i in range(k) for j in range(i + 1, k)]
        if min(ang) < math.radians(1):
            continue
        done += 1
        r = b.radii()[0]
        strict &= bool(np.linalg.norm(linear_aggregate(b)) < r)
        w = b.weights
        cos = np.array([[math.cos(angle_between(a, c)) for c in U] for a in U])
        worst = max(worst, abs(np.linalg.norm(w @ U) ** 2 - w @ cos @ w))
    check(2, strict and worst <= 1e-9, f"strict |y_lin| < r on {done} bundles: {strict}; closed form err {worst:.2e} (<=1e-9)")


def test_03_collapse_point_check():
    rng = np.random.default_rng(103)
    u1, u2 = unit_pair(rng, 768, math.radians(60))
    b = ExpertBundle([u1, u2], [0.5, 0.5])
    lin = collapse_ratio(b, linear_aggregate(b))
    sba = collapse_ratio(b, sba_aggregate(b))
    ok = abs(lin - math.cos(math.radians(30))) <= 1e-9 and abs(sba - 1) <= 1e-9
    check(3, ok, f"linear {lin:.10f} vs cos30 0.8660254038; sba {sba:.12f} (tol 1e-9)")


def test_04_fig5_simulation(tmp_path):
    out = tmp_path / "fig5"
    t0 = time.perf_counter()
    code = main(["simulate", "--angle-deg", "40:80", "--norm-sigma", "0", "--samples", "100000",
                 "--aggregators", "linear,sba", "--seed", "7", "--out-dir", str(out)])
    dt = time.perf_counter() - t0
    doc = json.loads((out / "summary.json").read_text())
    lin = doc["collapse_ratio"]["linear"]
    sba = doc["collapse_ratio"]["sba"]
    lo, hi = math.radians(40), math.radians(80)
    exact = quad(lambda p: math.cos(p / 2), lo, hi)[0] / (hi - lo)
    se = lin["summary"]["stddev"] / math.sqrt(lin["summary"]["count"])
    z = abs(lin["summary"]["mean"] - exact) / se
    edges = sba["histogram"]["bin_edges"]
    one = max(i for i, e in enumerate(edges[:-1]) if e <= 1.0)
    sba_ok = sba["histogram"]["counts"][one] == 100_000 == sba["summary"]["count"]
    lin_ok = lin["summary"]["max"] < 1.0 and lin["histogram"]["overflow"] == 0
    ok = code == 0 and lin_ok and z <= 3 and sba_ok and dt < 60
    check(4, ok, f"linear max {lin['summary']['max']:.6f} (<1), mean {lin['summary']['mean']:.6f} vs "
                 f"{exact:.6f} at {z:.2f} SE (<=3), sba mass in bin of 1.0: {sba_ok}, {dt:.1f}s (<60s)")


def test_05_fig1_fig2_simulation(tmp_path):
    out = tmp_path / "fig12"
    code = main(["simulate", "--samples", "20000", "--aggregators", "linear", "--seed", "5", "--out-dir", str(out)])
    doc = json.loads((out / "summary.json").read_text())
    median = doc["norm_ratio"]["summary"]["p50"]
    ang = doc["pairwise_angle_deg"]["histogram"]
    above = sum(c for c, lo in zip(ang["counts"], ang["bin_edges"]) if lo >= 40.0) + ang["overflow"]
    frac = above / doc["pairwise_angle_deg"]["summary"]["count"]
    ok = code == 0 and 0.99 <= median <= 1.01 and frac >= 0.99
    check(5, ok, f"norm-ratio median {median:.5f} in [0.99, 1.01]; angle mass >= 40deg {frac:.4f} (>=0.99)")


def test_06_karcher_slerp_equivalence():
    rng = np.random.default_rng(106)
    worst, max_iters = 0.0, 0
    for _ in range(1000):
        dim = int(rng.choice([2, 8, 768]))
        u1, u2 = unit_pair(rng, dim, rng.uniform(0, math.radians(170)))
        w1, w2 = rng.uniform(0.01, 1.0, size=2)
        m, iters, _ = karcher_mean([u1, u2], [w1, w2])
        max_iters = max(max_iters, iters)
        worst = max(worst, angle_between(m, slerp(u1, u2, w2 / (w1 + w2))))
    check(6, worst <= 1e-8 and max_iters <= 100, f"max angular gap {worst:.2e} (<=1e-8), max iterations {max_iters} (<=100)")


def test_07_ablation_identities():
    rng = np.random.default_rng(107)
    nf_err = unit_norm_err = dir_err = 0.0
    for i in range(10_000):
        dim = (2, 8, 64)[i % 3]
        k = (1, 2, 3, 5)[i % 4]
        eq = random_bundle(rng, dim, k, equal_norms=True)
        nf_err = max(nf_err, float(np.abs(norm_free_aggregate(eq) - sba_aggregate(eq)).max()))
        b = random_bundle(rng, dim, k)
        u = unit_normalized_aggregate(b)
        y = sba_aggregate(b)
        unit_norm_err = max(unit_norm_err, abs(np.linalg.norm(u) - 1))
        dir_err = max(dir_err, angle_between(u, y / np.linalg.norm(y)))
    ok = nf_err <= 1e-9 and unit_norm_err <= 1e-9 and dir_err <= 1e-8
    check(7, ok, f"norm-free vs sba {nf_err:.1e} (<=1e-9), unit norm err {unit_norm_err:.1e} (<=1e-9), "
                 f"direction gap {dir_err:.1e} (<=1e-8)")


def test_08_degenerate_and_consistency():
    rng = np.random.default_rng(108)
    notes = []
    ok = True
    # K = 1 pass-through
    for _ in range(200):
        e = rng.standard_normal(16)
        b = ExpertBundle([e], [1.0])
        for kind in (L, S, AggregatorKind.NORM_FREE):
            ok &= bool(np.allclose(aggregate(kind, b), e, rtol=1e-12, atol=0))
        ok &= bool(np.allclose(aggregate(AggregatorKind.UNIT, b), e / np.linalg.norm(e), atol=1e-15))
    notes.append(f"K=1 pass-through {ok}")
    # aligned experts
    aligned = 0.0
    for _ in range(200):
        u = rng.standard_normal(12)
        u /= np.linalg.norm(u)
        k = int(rng.integers(2, 6))
        w = rng.dirichlet(np.ones(k))
        b = ExpertBundle(np.exp(rng.standard_normal(k))[:, None] * u, w / w.sum())
        aligned = max(aligned, float(np.abs(sba_aggregate(b) - linear_aggregate(b)).max()))
    notes.append(f"aligned gap {aligned:.1e}")
    # rotation equivariance
    rot = 0.0
    for _ in range(60):
        dim = int(rng.choice([3, 8, 32]))
        Q = random_rotation(rng, dim)
        b = random_bundle(rng, dim, int(rng.integers(1, 6)))
        for kind in AggregatorKind:
            rot = max(rot, float(np.abs(aggregate(kind, b.rotated(Q)) - Q @ aggregate(kind, b)).max()))
    notes.append(f"rotation gap {rot:.1e}")
    # antipodal
    antipodal_ok = True
    for w in ([0.5, 0.5], [0.3, 0.7]):
        for closed in (True, False):
            u = rng.standard_normal(6)
            b = ExpertBundle([u, -2.0 * u], w)
            for kind in (S, AggregatorKind.NORM_FREE, AggregatorKind.UNIT):
                try:
                    aggregate(kind, b, closed_form=closed)
                    antipodal_ok = False
                except AntipodalDirections:
                    pass
                except Exception:
                    antipodal_ok = False
    notes.append(f"antipodal -> AntipodalDirections {antipodal_ok}")
    ok = ok and aligned <= 1e-9 and rot <= 1e-8 and antipodal_ok
    check(8, ok, "; ".join(notes))


def _run(args, threads):
    env = dict(os.environ, GEOAGG_THREADS=str(threads))
    return subprocess.run([sys.executable, "-m", "geoagg", *args], env=env, capture_output=True, check=True)


def test_09_determinism(tmp_path):
    sim = ["simulate", "--dim", "64", "--samples", "6000", "--weights", "dirichlet", "--seed", "9"]
    outputs = {}
    for tag, threads in (("a", 1), ("b", 1), ("c", 8)):
        d = tmp_path / tag
        p = _run(sim + ["--out-dir", str(d)], threads)
        outputs[tag] = (p.stdout, {f.name: f.read_bytes() for f in sorted(d.iterdir())})
    sim_ok = outputs["a"] == outputs["b"] == outputs["c"]
    demo = ["moe-demo", "--seed", "0", "--experts", "8", "--dim", "64", "--hidden", "128", "--topk", "2", "--samples", "500"]
    runs = []
    for tag, threads in (("d", 1), ("e", 1), ("f", 8)):
        d = tmp_path / tag
        p = _run(demo + ["--out-dir", str(d)], threads)
        runs.append((p.stdout, {f.name: f.read_bytes() for f in sorted(d.iterdir())}))
    demo_ok = runs[0] == runs[1] == runs[2]
    check(9, sim_ok and demo_ok, f"simulate identical across runs and GEOAGG_THREADS 1/8: {sim_ok}; moe-demo: {demo_ok}")


def _blocks(seed, n, k, d, block=10_000):
    rng = np.random.default_rng(seed)
    left = n
    while left:
        m = min(block, left)
        vec = rng.standard_normal((m, k, d)).astype(np.float32)
        w = rng.dirichlet(np.ones(k), size=m).astype(np.float32)
        for i in range(m):
            yield DumpRecord(vec[i], w[i])
        left -= m


def test_10_format_round_trip(tmp_path):
    n, k, d = 1_000_000, 2, 4
    path = tmp_path / "big.geoa"
    with open(path, "wb") as f:
        written = write_dump(DumpHeader(d, k, n), _blocks(1, n, k, d), f)
    size_ok = written == path.stat().st_size == 32 + n * (k * d + k) * 4
    ceiling = 16 * 2**20
    tracemalloc.start()
    same = True
    count = 0
    with open(path, "rb") as f:
        header, records = read_dump(f)
        for got, want in zip(records, _blocks(1, n, k, d)):
            same &= got.expert_vectors.tobytes() == want.expert_vectors.tobytes()
            same &= got.weights.tobytes() == want.weights.tobytes()
            count += 1
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    ok = size_ok and same and count == n and header == DumpHeader(d, k, n) and peak < ceiling
    check(10, ok, f"{count} records bit-exact: {same}; file {path.stat().st_size} B; "
                  f"peak traced memory {peak / 2**20:.1f} MiB (< {ceiling / 2**20:.0f} MiB, file {path.stat().st_size / 2**20:.0f} MiB)")


def test_11_bench_overhead(capsys):
    capsys.readouterr()
    assert main(["bench", "--dim", "768", "--topk", "2", "--samples", "5000", "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    ok = 0 < doc["ratio"] <= 10 and math.isfinite(doc["ratio"])
    check(11, ok, f"sba {doc['sba_ns_per_op']:.0f} ns/op, linear {doc['linear_ns_per_op']:.0f} ns/op, ratio {doc['ratio']:.2f} (<=10)")
