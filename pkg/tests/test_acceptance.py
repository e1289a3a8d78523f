"""Acceptance criteria. Each test carries ``@pytest.mark.acceptance(n)``;
the terminal summary prints one PASS/FAIL line per criterion."""

import itertools
import math
import time
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from tunnelsim.agents import AgentConfig, make_agent
from tunnelsim.cli import EXIT_OK, main
from tunnelsim.core import GazeTrace, TrialRecord, VisualFieldProfile
from tunnelsim.metrics import (
    detect_saccades,
    dynamic_visual_field,
    exclusion_summary,
    inject_saccades,
    match_detections,
    metrics_row,
)
from tunnelsim.navigation import NavigationConfig, generate_layout, layout_count, run_navigation_trial
from tunnelsim.perimetry import ModelResponder, run_perimetry
from tunnelsim.search import SearchConfig, adjusted_score, run_search_trial
from tunnelsim.stats import tost
from tunnelsim.tracking import TrackingConfig, run_tracking_trial, score_trial

FRAME_STEP = 0.04  # target travel per 75 Hz frame at 3 deg/s


@pytest.mark.acceptance(1)
def test_layout_enumeration_and_uniformity():
    start = time.perf_counter()
    distinct = set(itertools.permutations("SSLLRR"))
    assert len(distinct) == 90 == layout_count()
    counts = Counter(generate_layout(seed) for seed in range(90_000))
    assert set(counts) == {tuple(p) for p in distinct}
    assert stats.chisquare(list(counts.values())).pvalue > 0.01
    assert time.perf_counter() - start < 10.0


@pytest.mark.acceptance(2)
def test_perimetry_recovery():
    start = time.perf_counter()
    for diameter in (7.62, 10.92, 18.54, 25.40):
        r = diameter / 2
        truth = VisualFieldProfile.circular(r)
        ideal = run_perimetry(truth, ModelResponder(truth))
        for eye in ("right", "left"):
            assert np.abs(np.array(ideal.crossings(eye)) - r).max() <= FRAME_STEP + 1e-9
        edge = run_perimetry(truth, ModelResponder(truth, mode="edge"))
        assert np.abs(np.array(edge.crossings("right")) - (r + 0.72)).max() <= FRAME_STEP + 1e-9
    truth = VisualFieldProfile.circular(12.7)
    for d in (0.1, 0.25, 0.5):
        res = run_perimetry(truth, ModelResponder(truth, reaction_delay=d))
        bias = 12.7 - np.array(res.crossings("right"))
        assert np.abs(bias - 3.0 * d).max() <= FRAME_STEP + 1e-9
    assert time.perf_counter() - start < 5.0


@pytest.mark.acceptance(3)
def test_saccade_detector_injection():
    tp = n_truth = n_det = 0
    for seed in range(20):
        amps = np.random.default_rng(seed).uniform(5, 40, 10)
        trace, truth = inject_saccades(amps, isi=0.6, velocity_noise=2.0, rate=90.0, seed=seed)
        det = detect_saccades(trace)
        hits, _, _ = match_detections(det.saccades, truth)
        tp, n_truth, n_det = tp + hits, n_truth + len(truth), n_det + len(det.saccades)
        assert det.v_max - det.v_onset == pytest.approx(3 * det.sigma, rel=1e-12, abs=1e-12)
    assert tp / n_truth >= 0.95
    assert tp / n_det >= 0.95


def _stationary(n=450):
    z = np.zeros(n)
    return GazeTrace(np.arange(n) / 90.0, z, z, z, z)


@pytest.mark.acceptance(4)
def test_dvf_oracles():
    for r in (5.0, 10.0):
        got = dynamic_visual_field(_stationary(), VisualFieldProfile.circular(r), cell=0.5).percent
        assert got == pytest.approx(math.pi * r * r / (180 * 135) * 100, rel=0.02)
    n = 901
    z = np.zeros(n)
    sweep = GazeTrace(np.arange(n) / 90.0, z, z, -50 + 10.0 * np.arange(n) / 90.0, z)
    got = dynamic_visual_field(sweep, VisualFieldProfile.circular(5.0), cell=0.5).percent
    assert got == pytest.approx((math.pi * 25 + 30 * 10) / (180 * 135) * 100, rel=0.03)
    assert dynamic_visual_field(_stationary(), VisualFieldProfile.circular(180.0)).percent == 100.0


@pytest.mark.acceptance(5)
def test_tost_numeric_oracle():
    pm = np.array([-1.0, 1.0])
    cases = [(np.tile(pm, 50), np.tile(pm, 50), 0.080),
             (np.tile(pm, 500), np.tile(pm, 500), 4e-6),
             (np.tile(pm, 50) + 1.0, np.tile(pm, 50), 1.0)]
    for a, b, expected in cases:
        r = tost(a, b)
        # independent oracle: Welch statistics and scipy's t tail
        sd = math.sqrt(((len(a) - 1) * a.var(ddof=1) + (len(b) - 1) * b.var(ddof=1)) / (len(a) + len(b) - 2))
        va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
        se = math.sqrt(va + vb)
        df = (va + vb) ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
        diff = a.mean() - b.mean()
        delta = 0.2 * sd
        oracle = max(stats.t.cdf((diff - delta) / se, df), stats.t.sf((diff + delta) / se, df))
        assert r.delta == 0.2 * r.sd_pooled
        assert r.delta == pytest.approx(delta, rel=1e-12)
        assert r.p == pytest.approx(oracle, abs=1e-3)
        assert r.p == pytest.approx(expected, abs=1e-3)
        assert tost(b, a).p == pytest.approx(r.p, abs=1e-12)


@pytest.mark.acceptance(6)
def test_exclusion_bookkeeping():
    rng = np.random.default_rng(6)
    vf = VisualFieldProfile.circular(8.0)
    base, _ = inject_saccades([12, 20, 8, 30, 15, 10, 25, 18], seed=6)
    n = len(base) // 100 * 100
    planted = Counter()
    rows = []
    for i in range(300):
        group, task = rng.choice(["A", "B"]), rng.choice(["tracking", "search", "navigation"])
        kind = rng.choice(["clean", "over", "at", "missing"], p=[0.55, 0.25, 0.1, 0.1])
        if kind == "missing":
            trace = GazeTrace.empty()
        else:
            ratio = {"clean": rng.uniform(0, 0.09), "over": rng.uniform(0.11, 0.6), "at": 0.10}[kind]
            valid = np.ones(n, bool)
            k = int(round(ratio * n))
            start = int(rng.integers(0, n - k + 1))
            valid[start:start + k] = False
            trace = GazeTrace(base.t[:n], base.hx[:n], base.hy[:n], base.ex[:n], base.ey[:n], valid)
        planted[(group, task, "missing" if kind == "missing" else "excluded" if kind == "over" else "analyzed")] += 1
        rec = TrialRecord(str(task), 1, i, 1, i, samples=trace, outcome={"duration": 10.0})
        rows.append(metrics_row(rec, vf, f"p{i % 7}", str(group)))
    summary = exclusion_summary(rows)
    for (group, task), s in summary.items():
        assert s.analyzed + s.missing + s.excluded == s.total
        assert s.excluded == planted[(group, task, "excluded")]
        assert s.missing == planted[(group, task, "missing")]
        assert s.analyzed == planted[(group, task, "analyzed")]
    assert sum(s.total for s in summary.values()) == 300


RADII = (2.5, 5.0, 10.0, 20.0)
SEEDS = range(100)


def _tracking(r, seed):
    vf = VisualFieldProfile.circular(r)
    agent = make_agent(AgentConfig(seed=seed), "tracking", vf)
    return run_tracking_trial(TrackingConfig.for_level(30, seed), agent, vf).outcome["score"]


def _search(r, seed):
    vf = VisualFieldProfile.circular(r)
    agent = make_agent(AgentConfig(seed=seed), "search", vf)
    return run_search_trial(SearchConfig.for_level(1, seed), agent, vf).outcome["found"]


def _navigation(r, seed):
    vf = VisualFieldProfile.circular(r)
    agent = make_agent(AgentConfig(seed=seed), "navigation", vf)
    return -run_navigation_trial(NavigationConfig.for_level(1, seed), agent, vf).outcome["collisions"]


@pytest.mark.acceptance(7)
@pytest.mark.parametrize("measure", [_tracking, _search, _navigation], ids=["tracking", "search", "navigation"])
def test_vf_radius_monotonicity(measure):
    results = {r: np.array([measure(r, s) for s in SEEDS]) for r in RADII}
    for small, large in zip(RADII, RADII[1:]):
        assert np.median(results[large]) >= np.median(results[small])
        d = results[large] - results[small]
        wins, losses = int((d > 0).sum()), int((d < 0).sum())
        assert wins + losses > 0
        assert stats.binomtest(wins, wins + losses, alternative="greater").pvalue < 0.05


SMALL_STUDY = """
seed: 11
sessions: 2
session_minutes: 2.0
groups:
  - label: A
    participants:
      - {id: "1", vf_truth: {diameters: [7.62, 8.26]}}
      - {id: "2", vf_truth: {diameters: [18.64, 18.18]}}
  - label: B
    latency: true
    vision: measured
    participants:
      - {id: 1b, vf_truth: {diameters: [7.62, 8.26]}}
      - {id: 2b, vf_truth: {diameters: [18.64, 18.18]}}
"""


def _pipeline(root, config=None, seed=None):
    study, csv, report = root / "study", root / "metrics.csv", root / "report.json"
    sim = ["simulate", "--out", str(study)]
    if config:
        sim += ["--config", str(config)]
    if seed is not None:
        sim += ["--seed", str(seed)]
    assert main(sim) == EXIT_OK
    assert main(["analyze", "--in", str(study), "--out", str(csv)]) == EXIT_OK
    assert main(["compare", "--in", str(csv), "--out", str(report)]) == EXIT_OK
    return study, csv, report


@pytest.mark.acceptance(8)
def test_end_to_end_determinism(tmp_path):
    config = tmp_path / "study.yaml"
    config.write_text(SMALL_STUDY)
    outputs = []
    for run in ("one", "two"):
        (tmp_path / run).mkdir()
        study, csv, report = _pipeline(tmp_path / run, config)
        files = sorted(p.relative_to(study) for p in study.rglob("*") if p.is_file())
        outputs.append(({f: (study / f).read_bytes() for f in files}, csv.read_bytes(), report.read_bytes()))
    assert outputs[0] == outputs[1]


@pytest.mark.slow
@pytest.mark.acceptance(8)
def test_full_study_runtime(tmp_path):
    start = time.perf_counter()
    study, csv, report = _pipeline(tmp_path, seed=7)
    elapsed = time.perf_counter() - start
    print(f"full 16-participant study: {elapsed:.0f} s")
    assert len(list((study / "logs").glob("*.jsonl"))) == 16
    assert elapsed < 600.0


@pytest.mark.acceptance(9)
def test_scoring_contracts():
    expected = {0: 2, 1: 1}
    for n in range(2, 9):
        for m in range(1, n):
            for marked in itertools.combinations(range(n), m):
                for k in range(0, n + 1):
                    for chosen in itertools.combinations(range(n), k):
                        wrong = len(set(chosen) - set(marked))
                        out = score_trial(list(chosen), set(marked))
                        assert out.incorrect_selections == wrong
                        assert out.score == expected.get(wrong, 0)
            if n > 5:
                break
    for t in range(0, 21):
        for w in range(1, 81, 3):
            for h in range(1, 61, 3):
                assert adjusted_score(t, w, h) == t * w * h
    assert adjusted_score(5, 52, 39) == 10140
    assert adjusted_score(3, 80, 60) == 14400
