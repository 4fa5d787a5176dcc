"""Acceptance criteria 1-11.  Each test records one PASS/FAIL line that is
printed in the terminal summary (and to stdout when run with ``-s``)."""

import itertools
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import ACCEPTANCE_LINES, spike_dataset, synthetic_records
from repstab import pipeline
from repstab.config import Config
from repstab.corpus import ingest, split_by_pair
from repstab.detector import (
    EXPECTED_PARAMETERS,
    BiLSTMDetector,
    DetectorConfig,
    NormalizationStats,
    TrainingConfig,
    augment,
    forward,
    train,
)
from repstab.evaluation import RankingRecord, bh_adjust, ndcg_at_k, spearman, spearman_bh
from repstab.importance import integrated_gradient_attributions, rollout_matrix
from repstab.sensitivity import FeatureTensor, SensitivityTrace, instability_ratio, sensitivity_score
from repstab.tokenization import MASK_TOKEN


def record(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def desk(desk_setup):
    model_dir, corpus = desk_setup
    records = ingest(corpus).records
    return model_dir, records


def _desk_cfg(model_dir, **extra):
    return Config({"encoder.name": f"tiny:{model_dir}", "importance.method": "grad", "importance.k": 20,
                   "run.deterministic": True, **extra})


# 1 -------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_01_instability_ratio(desk, tmp_path):
    t0 = time.perf_counter()
    model_dir, records = desk
    n_pairs = len({r.pair_id for r in records if r.label == "adversarial"})
    run = pipeline.run_trace(records, _desk_cfg(model_dir), tmp_path)

    def traces(label):
        out = []
        for r in records:
            if r.label == label:
                e = run.entries[r.id]
                out.append(SensitivityTrace(e["selected"], np.asarray(e["s"]), np.zeros(1)))
        return out

    ratio = instability_ratio(traces("benign"), traces("adversarial"))
    minutes = (time.perf_counter() - t0) / 60
    record(1, ratio > 1.0 and n_pairs >= 200 and minutes <= 30,
           f"gradient instability ratio at K=20 = {ratio:.3f} over {n_pairs} pairs "
           f"(need > 1.0; trace time {minutes:.1f} min, desk build excluded)")


# 2 -------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_02_detector_separability():
    t0 = time.perf_counter()
    tensors, labels = spike_dataset(400, seed=0)
    cfg = TrainingConfig(seed=0)
    a = train(tensors, labels, cfg)
    b = train(tensors, labels, cfg)
    acc = a.log[a.best_epoch - 1]["val_accuracy"]
    same = a.log == b.log and all(
        torch.equal(x, y) for x, y in zip(a.model.state_dict().values(), b.model.state_dict().values())
    )
    minutes = (time.perf_counter() - t0) / 60
    record(2, acc >= 0.95 and same and len(a.log) <= 40 and minutes <= 5,
           f"validation accuracy {acc:.3f} at epoch {a.best_epoch}/{len(a.log)}, "
           f"seeded rerun identical={same}, {minutes:.1f} min for two runs")


# 3 -------------------------------------------------------------------


def test_criterion_03_parameter_count():
    n = BiLSTMDetector().n_parameters
    record(3, n == EXPECTED_PARAMETERS, f"detector parameters = {n:,} (need {EXPECTED_PARAMETERS:,})")


# 4 -------------------------------------------------------------------


def test_criterion_04_detector_gradient_check():
    torch.manual_seed(0)
    cfg = DetectorConfig(proj_dim=8, hidden=8, head_hidden=8)
    model = BiLSTMDetector(cfg).double().eval()
    rng = np.random.default_rng(0)
    stats = NormalizationStats(np.array([0.05, 0.5]), np.array([0.05, 0.3]))
    batch = []
    for n in (9, 14, 6):
        Z = np.zeros((n, 2))
        sel = rng.choice(n, size=4, replace=False)
        Z[sel] = rng.uniform(0.01, 1.0, size=(4, 2))
        batch.append(augment(FeatureTensor(Z), stats))
    y = torch.tensor([0, 1, 1])

    def loss():
        return F.cross_entropy(forward(model, batch), y)

    model.zero_grad()
    loss().backward()
    params = [(name, p) for name, p in model.named_parameters()]
    flat = [(name, p, idx) for name, p in params for idx in itertools.product(*map(range, p.shape))]
    picks = rng.choice(len(flat), size=60, replace=False)
    # five-point central stencil: O(h^4) truncation, ~1e-13 round-off at h = 1e-3;
    # a two-point difference at small h drowns the ~1e-9 attention-projection grads in noise
    h, worst, checked = 1e-3, 0.0, 0
    for i in picks:
        name, p, idx = flat[i]
        analytic = float(p.grad[idx])
        with torch.no_grad():
            orig = float(p[idx])
            f = {}
            for step in (-2, -1, 1, 2):
                p[idx] = orig + step * h
                f[step] = float(loss())
            p[idx] = orig
        fd = (f[-2] - 8 * f[-1] + 8 * f[1] - f[2]) / (12 * h)
        err = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)
        worst = max(worst, err)
        checked += 1
    record(4, worst < 1e-4 and checked >= 50,
           f"max relative error {worst:.2e} over {checked} parameters (width 8, float64, eval mode)")


# 5 -------------------------------------------------------------------


def _brute_ndcg(ranked, relevant, k):
    dcg = sum(1 / math.log2(r + 2) for r, w in enumerate(ranked[:k]) if w in relevant)
    ideal = max(sum(1 / math.log2(r + 2) for r, w in enumerate(p[:k]) if w in relevant)
                for p in itertools.permutations(ranked))
    return dcg / ideal


def test_criterion_05_ndcg_oracle():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        ranked = [int(x) for x in rng.permutation(n)]
        rel = {int(x) for x in rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)}
        k = int(rng.integers(1, n + 2))
        worst = max(worst, abs(ndcg_at_k(RankingRecord(tuple(ranked), rel), k) - _brute_ndcg(ranked, rel, k)))
    hand = ndcg_at_k(RankingRecord((3, 0, 1, 2), {3, 1}), 4)
    record(5, worst <= 1e-9 and round(hand, 4) == 0.9197,
           f"max |ndcg - brute force| = {worst:.1e} over 1000 records; hand case = {hand:.4f}")


# 6 -------------------------------------------------------------------


def test_criterion_06_rollout_conservation():
    rng = np.random.default_rng(6)
    row_err = mass_err = 0.0
    for _ in range(100):
        L, H, T = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 17))
        att = rng.random((L, H, T, T)) ** 3
        att /= att.sum(-1, keepdims=True)
        R = rollout_matrix(att)
        row_err = max(row_err, float(np.max(np.abs(R.sum(1) - 1))))
        mass_err = max(mass_err, abs(float(R.sum(0).sum()) - T))
    record(6, row_err <= 1e-6 and mass_err <= 1e-5,
           f"max row-sum error {row_err:.1e}, max |sum a - T| {mass_err:.1e} over 100 stacks")


# 7 -------------------------------------------------------------------


def test_criterion_07_sensitivity_bounds(stub):
    rng = np.random.default_rng(7)
    vals = []
    for _ in range(10_000):
        d = int(rng.integers(1, 64))
        a = rng.normal(size=d) * 10 ** rng.uniform(-6, 6)
        b = -a * rng.uniform(0, 2) if rng.random() < 0.1 else rng.normal(size=d)
        vals.append(sensitivity_score(a, b))
    vals = np.array(vals)
    text = stub.tokenize(f"the film {MASK_TOKEN} truly awful")
    ref = stub.encode(text).sentence_embedding
    noop = sensitivity_score(ref, stub.encode_masked(text, 2))
    ok = bool(np.all((vals >= 0) & (vals <= 2))) and noop < 1e-6
    record(7, ok, f"10000 pairs in [{vals.min():.3g}, {vals.max():.3g}]; no-op mask s = {noop:.1e}")


# 8 -------------------------------------------------------------------


def _brute_ranks(x):
    x = list(x)
    return np.array([sum(v < xi for v in x) + (sum(v == xi for v in x) + 1) / 2 for xi in x], float)


def _brute_pearson(a, b):
    a, b = a - a.mean(), b - b.mean()
    return float(np.sum(a * b) / math.sqrt(np.sum(a * a) * np.sum(b * b)))


def _brute_bh(p):
    m = len(p)
    order = sorted(range(m), key=lambda i: p[i])
    rank = {i: r + 1 for r, i in enumerate(order)}
    return np.array([min(1.0, min(p[j] * m / rank[j] for j in range(m) if p[j] >= p[i])) for i in range(m)])


def test_criterion_08_statistics_oracles():
    rng = np.random.default_rng(8)
    rho_err = q_err = 0.0
    for fam in range(500):
        rows = []
        for g in range(int(rng.integers(1, 8))):
            n = int(rng.integers(3, 15))
            acc = rng.integers(0, 6, size=n) / 5
            nd = rng.integers(0, 6, size=n) / 5
            rows += [{"family": f"f{fam}", "group": f"g{g}", "accuracy": float(a), "ndcg": float(b)}
                     for a, b in zip(acc, nd)]
        reports = [r for r in spearman_bh(rows) if not r.degenerate]
        for r in reports:
            pairs = [(row["accuracy"], row["ndcg"]) for row in rows if row["group"] == r.group]
            x, y = map(np.array, zip(*pairs))
            rho_err = max(rho_err, abs(r.rho - _brute_pearson(_brute_ranks(x), _brute_ranks(y))))
        if reports:
            q = _brute_bh([r.p_value for r in reports])
            q_err = max(q_err, float(np.max(np.abs(np.array([r.q_value for r in reports]) - q))))
    hand = bh_adjust([0.001, 0.02, 0.04, 0.6])
    hand_ok = np.allclose(hand, [0.004, 0.04, 0.16 / 3, 0.6], atol=1e-12) and np.allclose(
        hand, _brute_bh([0.001, 0.02, 0.04, 0.6]), atol=1e-12)
    perfect = spearman([1, 2, 3], [3, 5, 9])[0] == 1.0
    record(8, rho_err <= 1e-9 and q_err <= 1e-9 and hand_ok and perfect,
           f"max rho error {rho_err:.1e}, max q error {q_err:.1e} over 500 families; "
           f"hand case q = {np.round(hand, 5).tolist()}")


# 9 -------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_09_k_sweep(desk, tmp_path):
    model_dir, records = desk
    cfg = _desk_cfg(model_dir)
    train_recs, test_recs = split_by_pair(records, 0.2, 0)
    rows = pipeline.run_sweep(train_recs, test_recs, cfg, tmp_path, ks=[5, 10, 20, 50])
    ks = np.array([r["k"] for r in rows], float)
    sec = np.array([r["seconds_per_sample"] for r in rows])
    f1 = {r["k"]: r["f1"] for r in rows}
    slope, icpt = np.polyfit(ks, sec, 1)
    r2 = 1 - np.sum((sec - (slope * ks + icpt)) ** 2) / np.sum((sec - sec.mean()) ** 2)
    monotone = bool(np.all(np.diff(sec) >= 0))
    ok = f1[5] >= 0.9 * f1[50] and monotone and r2 >= 0.95
    record(9, ok, f"F1 K=5 {f1[5]:.3f} vs 0.9 x F1 K=50 {0.9 * f1[50]:.3f}; s/sample "
                  f"{[round(float(s), 5) for s in sec]} non-decreasing={monotone}; linear R^2 {r2:.4f}")


# 10 ------------------------------------------------------------------


def _full_run(records, out):
    cfg = Config({"encoder.name": "stub:0", "importance.k": 5, "train.max_epochs": 6, "train.patience": 3,
                  "run.deterministic": True})
    pipeline.set_determinism(cfg["train.seed"])
    pipeline.run_trace(records, cfg, out)
    pipeline.run_train(records, cfg, out)
    pipeline.run_detect(records, cfg, out)
    pipeline.run_eval_ranking(records, cfg, out)
    pipeline.build_report(out)
    return {p.relative_to(out).as_posix(): p.read_bytes()
            for p in sorted(out.rglob("*")) if p.is_file() and p.suffix in {".json", ".jsonl", ".md"}}


def test_criterion_10_end_to_end_determinism(tmp_path):
    records = synthetic_records(20)
    a = _full_run(records, tmp_path / "run_a")
    b = _full_run(records, tmp_path / "run_b")
    diff = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    record(10, bool(a) and not diff and "report.md" in a,
           f"{len(a)} canonical report files compared, {len(diff)} differ {diff[:3]}")


# 11 ------------------------------------------------------------------


def test_criterion_11_integrated_gradients(stub):
    texts = [stub.tokenize(t) for t in (
        "The awful film was a dull mess", "a fine and lovely story with a great cast",
        "plot was quite bad but the actor was fine", "great scene")]
    worst = 0.0
    for t in texts:
        attr, lin, lref = integrated_gradient_attributions(stub, t, steps=100)
        gap = lin - lref
        worst = max(worst, abs(attr.sum() - gap) / max(abs(gap), 1e-12))

    def cost(steps):
        best = float("inf")
        for _ in range(5):
            t0 = time.perf_counter()
            for t in texts:
                integrated_gradient_attributions(stub, t, steps=steps)
            best = min(best, time.perf_counter() - t0)
        return best / len(texts)

    cost(10)  # warm-up
    ratio = cost(100) / cost(10)
    record(11, worst <= 0.02 and 5 <= ratio <= 20,
           f"max completeness error {100 * worst:.3f}% at 100 steps; cost ratio 100/10 steps = {ratio:.1f}x")
