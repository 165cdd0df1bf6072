"""Acceptance suite: one test per primary criterion, each with its runtime budget.

Every test records a PASS/FAIL line; they are printed at the end of the pytest
run (see conftest.py) and also when this file is run directly.
"""

import json
import math
import time
from fractions import Fraction
from pathlib import Path

import mpmath
import numpy as np
import pytest

from dirichlet_fvi import dirichlet as D
from dirichlet_fvi.calibration import PredictionRecord, ece
from dirichlet_fvi.cli import main
from dirichlet_fvi.data import ClusterSpec, overlap_mask
from dirichlet_fvi.fsvi import felbo_loss
from dirichlet_fvi.net import Architecture, alpha_head, backward, forward, init_params
from dirichlet_fvi.numerics import Rng, digamma, ln_beta, ln_gamma, trigamma

RESULTS: list[str] = []


def record(name, ok, detail, elapsed=None, budget=None):
    timing = "" if elapsed is None else f" [{elapsed:.1f}s / {budget:.0f}s]"
    RESULTS.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}{timing}")
    return ok


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def fd4(f, x, h):
    """Fourth-order central differences of scalar ``f`` at every coordinate of ``x``."""
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (8 * (f(x + e) - f(x - e)) - (f(x + 2 * e) - f(x - 2 * e))) / (12 * h)
    return out


def log_uniform_alphas(n, k, seed, lo=0.05, hi=100.0):
    g = np.random.default_rng(seed)
    return np.exp(g.uniform(math.log(lo), math.log(hi), size=(n, k)))


# ----------------------------------------------------------------- 1


def test_special_function_accuracy():
    with Timer() as t:
        mpmath.mp.dps = 30
        checks = [
            ("digamma(1)", digamma(1.0), -0.5772156649, float(mpmath.digamma(1)), 1e-10, "rel"),
            ("trigamma(1)", trigamma(1.0), 1.6449340668, float(mpmath.psi(1, 1)), 1e-8, "rel"),
            ("ln_gamma(0.5)", ln_gamma(0.5), 0.5723649429, float(mpmath.loggamma(0.5)), 1e-12, "abs"),
        ]
        worst = {}
        ok = True
        for name, got, quoted, exact, tol, kind in checks:
            err = abs(got - exact) / (abs(exact) if kind == "rel" else max(1.0, abs(exact)))
            ok &= err <= tol and abs(got - quoted) < 5e-11
            worst[name] = err
        x = np.random.default_rng(0).uniform(0.0, 50.0, 10_000)
        x = x[x > 0]
        rec_psi = np.max(np.abs(digamma(x + 1) - digamma(x) - 1 / x))
        rec_tri = np.max(np.abs(trigamma(x + 1) - trigamma(x) + 1 / x**2))
        ok &= rec_psi <= 1e-9 and rec_tri <= 1e-8
    ok &= t.elapsed < 5
    detail = ", ".join(f"{k} err {v:.1e}" for k, v in worst.items())
    detail += f"; recurrences on 1e4 args: psi {rec_psi:.1e}, psi' {rec_tri:.1e}"
    assert record("special functions", ok, detail, t.elapsed, 5)


# ----------------------------------------------------------------- 2


def test_dirichlet_identity_suite():
    with Timer() as t:
        worst_id, ok = 0.0, True
        for k in (2, 3, 7):
            a = log_uniform_alphas(1000, k, k)
            resid = D.kl_to_uniform(a) + D.differential_entropy(a) + ln_gamma(float(k))
            worst_id = max(worst_id, float(np.max(np.abs(resid))))
            ok &= bool(np.all(D.differential_entropy(a) <= D.differential_entropy(np.ones(k)) + 1e-12))
            y = np.random.default_rng(100 + k).integers(0, k, 1000)
            mean = D.predictive_mean(a)[np.arange(1000), y]
            ok &= bool(np.all(D.expected_nll(a, y) >= -np.log(mean) - 1e-12))
        ok &= worst_id < 1e-9
    ok &= t.elapsed < 10
    assert record("Dirichlet identities", ok, f"max |KL + H + lnG(K)| = {worst_id:.1e}; max-entropy and Jensen hold", t.elapsed, 10)


# ----------------------------------------------------------------- 3


def mc_case(alpha, label, seed, n=1_000_000):
    alpha = np.asarray(alpha, dtype=np.float64)
    p = Rng(seed).dirichlet(alpha, size=n)
    logp = np.log(p)
    kl_t = -ln_beta(alpha) + logp @ (alpha - 1.0) - math.lgamma(alpha.size)
    nll_t = -logp[:, label]
    se = lambda v: v.std(ddof=1) / math.sqrt(n)
    return abs(kl_t.mean() - D.kl_to_uniform(alpha)) / se(kl_t), abs(nll_t.mean() - D.expected_nll(alpha, label)) / se(nll_t)


def test_monte_carlo_agreement():
    with Timer() as t:
        g = np.random.default_rng(2024)
        cases = [((2.0, 2.0), 0), ((3.0, 1.0), 0)]
        for _ in range(18):
            k = int(g.integers(2, 6))
            cases.append((np.exp(g.uniform(math.log(0.5), math.log(20.0), size=k)), int(g.integers(0, k))))
        z = np.array([mc_case(a, y, 500 + i) for i, (a, y) in enumerate(cases)])
        derived = abs(D.kl_to_uniform((2, 2)) - 0.1251) < 5e-5 and abs(D.kl_to_uniform((3, 1)) - 0.4319) < 5e-5
        ok = bool(np.all(z < 3.0)) and derived
    ok &= t.elapsed < 60
    detail = f"{len(cases)} cases, worst |z| KL {z[:, 0].max():.2f}, NLL {z[:, 1].max():.2f}; KL(2,2), KL(3,1) match 0.1251, 0.4319"
    assert record("Monte-Carlo agreement", ok, detail, t.elapsed, 60)


# ----------------------------------------------------------------- 4


def end_to_end_rel_err(seed, head):
    g = np.random.default_rng(seed)
    d, k = int(g.integers(2, 5)), int(g.integers(2, 4))
    hidden = tuple(int(h) for h in g.integers(2, 9, size=int(g.integers(1, 3))))
    params = init_params(Architecture(d, hidden, k), Rng(seed))
    # nonzero biases keep pre-activations off the ReLU kink at exactly 0
    params = params.with_flat(params.flat() + np.concatenate(
        [np.zeros(w.size) if i % 2 == 0 else g.normal(scale=0.3, size=w.size) for i, w in enumerate(params.arrays())]))
    x_in, y = g.normal(size=(5, d)), g.integers(0, k, 5)
    x_ood = g.normal(scale=2, size=(3, d))
    xs = np.concatenate([x_in, x_ood])

    def loss(flat):
        a = alpha_head(forward(params.with_flat(flat), xs)[0], head)
        return felbo_loss(a[:5], y, a[5:], 0.5).loss

    logits, trace = forward(params, xs, "train")
    res = felbo_loss(alpha_head(logits, head)[:5], y, alpha_head(logits, head)[5:], 0.5)
    grads = backward(params, trace, np.concatenate([res.grad_in, res.grad_ood]), head)
    analytic = np.concatenate([gr.ravel() for gr in grads])
    fd = fd4(loss, params.flat(), 1e-4)
    return float(np.max(np.abs(analytic - fd) / np.maximum(np.abs(analytic) + np.abs(fd), 1e-7)))


def test_gradient_correctness():
    with Timer() as t:
        net_err = max(end_to_end_rel_err(s, h) for s in range(5) for h in ("softplus", "exp"))
        alpha_err = 0.0
        g = np.random.default_rng(7)
        for _ in range(20):
            k = int(g.integers(2, 6))
            a = np.exp(g.uniform(math.log(0.2), math.log(30.0), size=k))
            c = int(g.integers(0, k))
            for analytic, f in (
                (D.expected_nll_grad(a, c), lambda v: D.expected_nll(v, c)),
                (D.kl_to_uniform_grad(a), D.kl_to_uniform),
            ):
                fd = fd4(f, a, 1e-3 * a.min())
                alpha_err = max(alpha_err, float(np.max(np.abs(analytic - fd) / np.abs(analytic))))
        ok = net_err < 1e-4 and alpha_err < 1e-6
    ok &= t.elapsed < 30
    detail = f"end-to-end fELBO max rel err {net_err:.1e} (5 nets x 2 heads); alpha grads {alpha_err:.1e}"
    assert record("gradients", ok, detail, t.elapsed, 30)


# ----------------------------------------------------------------- 5


def exact_ece(confs, corrects, M):
    """ECE over the exact rational values of the inputs, rounded once."""
    n, total = len(confs), Fraction(0)
    for m in range(1, M + 1):
        lo, hi = Fraction(m - 1, M), Fraction(m, M)
        idx = [i for i, p in enumerate(confs) if lo < Fraction(p) <= hi or (m == 1 and p == 0)]
        if idx:
            acc = Fraction(sum(corrects[i] for i in idx), len(idx))
            conf = sum(Fraction(confs[i]) for i in idx) / len(idx)
            total += len(idx) * abs(acc - conf)
    return float(total / n)


def rec(c, ok):
    return PredictionRecord([c, 1 - c], c, 0, 0 if ok else 1, ok)


def test_ece_correctness():
    with Timer() as t:
        hand = [(0.9, True), (0.8, False), (0.6, True), (0.55, True)]
        got = ece([rec(c, k) for c, k in hand], 2)
        # 0.9, 0.8, 0.6, 0.55 are not binary-exact; the result equals the
        # correctly rounded ECE of the stored doubles, which is within their
        # representation error of 0.0375
        ok = got == exact_ece(*zip(*hand), 2) and abs(got - 0.0375) < 1e-16
        g = np.random.default_rng(3)
        worst = worst_m1 = 0.0
        for _ in range(2000):
            n, M = int(g.integers(1, 13)), int(g.integers(1, 5))
            # python scalars keep Fraction arithmetic in arbitrary precision
            confs = [float(c) for c in np.round(g.uniform(0, 1, n), int(g.integers(1, 4)))]
            corrects = [bool(k) for k in g.integers(0, 2, n)]
            recs = [rec(c, k) for c, k in zip(confs, corrects)]
            worst = max(worst, abs(ece(recs, M) - exact_ece(confs, corrects, M)))
            acc, conf = np.mean(corrects), np.mean(confs)
            worst_m1 = max(worst_m1, abs(ece(recs, 1) - abs(acc - conf)))
        ok &= worst <= 1e-15 and worst_m1 <= 1e-15
    ok &= t.elapsed < 5
    detail = (f"hand case {got!r} (exact-rational value); over 2000 sets brute-force diff {worst:.1e}, "
              f"M=1 identity diff {worst_m1:.1e}")
    assert record("ECE", ok, detail, t.elapsed, 5)


# ------------------------------------------------------------ 6 to 9 (CLI runs)


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    data = root / "data"
    assert main(["gen-data", "--seed", "0", "--out", str(data)]) == 0
    with Timer() as t:
        code = main(["compare", "--data", str(data), "--seed", "0", "--out", str(root / "compare")])
    assert code == 0
    ev = root / "eval_fsvi"
    assert main(["eval", "--checkpoint", str(root / "compare" / "fsvi"), "--data", str(data), "--ood", str(data),
                 "--out", str(ev)]) == 0
    return {"root": root, "data": data, "compare_s": t.elapsed}


def _table(bench):
    rows = json.loads((bench["root"] / "compare" / "table.json").read_text())["rows"]
    return {r["method"]: r for r in rows}


def test_method_ordering(bench):
    rows = _table(bench)
    f, s, e = rows["fsvi"], rows["standard"], rows["ensemble"]
    ok = f["ece"] < s["ece"] and e["ece"] <= s["ece"] and abs(f["test_accuracy"] - s["test_accuracy"]) <= 0.03
    ok &= bench["compare_s"] < 300
    detail = "  ".join(f"{m} acc {r['test_accuracy']:.4f} ECE {r['ece']:.4f}" for m, r in rows.items())
    assert record("method ordering", ok, detail, bench["compare_s"], 300)


def _eval(bench):
    ev = bench["root"] / "eval_fsvi"
    preds = [json.loads(l) for l in (ev / "predictions.ndjson").read_text().splitlines()]
    unc = json.loads((ev / "uncertainty.json").read_text())
    return preds, unc


def test_ood_separation(bench):
    _, unc = _eval(bench)
    a = unc["separation"]["auroc_differential_entropy"]
    assert record("OOD separation", a >= 0.90, f"AUROC(differential entropy, uniform OOD vs test) = {a:.4f} (>= 0.90)")


def test_uncertainty_regimes(bench):
    preds, _ = _eval(bench)
    manifest = json.loads((bench["data"] / "manifest.json").read_text())
    spec = ClusterSpec.from_dict(manifest["spec"])
    std = manifest["standardization"]
    test = np.loadtxt(bench["data"] / "test.csv", delimiter=",", skiprows=1)
    raw = test[:, :-1] * np.asarray(std["scale"]) + np.asarray(std["mean"])
    mask = overlap_mask(spec, raw)
    ind = [p for p in preds if not p["is_ood"]]
    ood_h = np.median([p["differential_entropy"] for p in preds if p["is_ood"]])
    ov_out = np.median([p["output_entropy"] for p, m in zip(ind, mask) if m])
    ov_diff = np.median([p["differential_entropy"] for p, m in zip(ind, mask) if m])
    k = spec.n_classes
    ok = ov_out >= 0.5 * math.log(k) and ood_h - ov_diff >= 0.5
    detail = (f"{int(mask.sum())} overlap points: median output entropy {ov_out:.3f} (>= {0.5 * math.log(k):.3f}); "
              f"differential-entropy gap to OOD {ood_h - ov_diff:.2f} nats (>= 0.5)")
    assert record("uncertainty regimes", ok, detail)


def _same_files(a: Path, b: Path, names):
    return all((a / n).read_bytes() == (b / n).read_bytes() for n in names)


def test_determinism(bench, tmp_path):
    root, data = bench["root"], bench["data"]
    ok = True
    # gen-data
    assert main(["gen-data", "--seed", "0", "--out", str(tmp_path / "data")]) == 0
    ok &= _same_files(data, tmp_path / "data", ["train.csv", "test.csv", "ood_test.csv", "manifest.json"])
    # eval on the same checkpoint
    ev = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(root / "compare" / "fsvi"), "--data", str(data), "--ood", str(data),
                 "--out", str(ev)]) == 0
    reports = ["predictions.ndjson", "calibration.json", "calibration.csv", "uncertainty.json"]
    ok &= _same_files(root / "eval_fsvi", ev, reports)
    # train: same flags, same parameters (the log's wall-clock field is excluded)
    for rerun in ("t1", "t2"):
        assert main(["train", "--method", "fsvi", "--epochs", "5", "--data", str(data), "--out", str(tmp_path / rerun)]) == 0
    ok &= _same_files(tmp_path / "t1", tmp_path / "t2", ["checkpoint.json"])
    strip = lambda p: [{k: v for k, v in json.loads(l).items() if k != "wall_ms"} for l in p.read_text().splitlines()]
    ok &= strip(tmp_path / "t1" / "train_log.ndjson") == strip(tmp_path / "t2" / "train_log.ndjson")
    # compare: rerun with shortened training
    for rerun in ("c1", "c2"):
        assert main(["compare", "--methods", "standard,dropout,ensemble,fsvi", "--epochs", "5", "--data", str(data),
                     "--out", str(tmp_path / rerun)]) == 0
    ok &= _same_files(tmp_path / "c1", tmp_path / "c2", ["table.json", "table.txt"])
    assert record("determinism", ok, "gen-data, train, eval and compare reruns reproduce identical outputs")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
