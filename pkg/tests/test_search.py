import math

import numpy as np
import pytest
from scipy import stats

from tunnelsim.agents import AgentConfig, BoustrophedonAgent, FixationAgent
from tunnelsim.core import VisualFieldProfile, angular_distance, AngularPos
from tunnelsim.mask import in_field
from tunnelsim.search import SearchConfig, adjusted_score, respawn_target, run_search_trial


class TestAdjustedScore:
    def test_zero(self):
        assert adjusted_score(0, 52, 39) == 0

    def test_base_area(self):
        assert adjusted_score(5, 52, 39) == 10140

    def test_max_area(self):
        assert adjusted_score(3, 80, 60) == 14400

    def test_linear(self):
        assert adjusted_score(6, 52, 39) == 2 * adjusted_score(3, 52, 39)
        assert adjusted_score(3, 104, 39) == 2 * adjusted_score(3, 52, 39)

    @pytest.mark.parametrize("args", [(-1, 52, 39), (1, 0, 39), (1, 52, -2)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            adjusted_score(*args)


class TestRespawn:
    def test_outside_small_field(self):
        rng = np.random.default_rng(0)
        vf = VisualFieldProfile.circular(5.0)
        for _ in range(200):
            az, el, fb = respawn_target(rng, (0.0, 0.0), vf, 52, 39)
            assert not fb
            assert angular_distance(AngularPos(0, 0), AngularPos(az, el)) > 5.0
            assert abs(az) <= 26 and abs(el) <= 19.5

    def test_fallback_when_field_covers_area(self):
        az, el, fb = respawn_target(np.random.default_rng(1), (0.0, 0.0), VisualFieldProfile.circular(60.0), 52, 39)
        assert fb and abs(az) <= 26 and abs(el) <= 19.5

    def test_uniform_over_admissible_region(self):
        # Oracle: per-cell admissible area from a fine raster of the outside-disc predicate.
        rng = np.random.default_rng(2)
        vf = VisualFieldProfile.circular(10.0)
        pts = np.array([respawn_target(rng, (0.0, 0.0), vf, 52, 39)[:2] for _ in range(10_000)])
        nx, ny = 8, 6
        xe, ye = np.linspace(-26, 26, nx + 1), np.linspace(-19.5, 19.5, ny + 1)
        observed, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], [xe, ye])
        fine = 400
        fx = (np.arange(fine * nx) + 0.5) / (fine * nx) * 52 - 26
        fy = (np.arange(fine * ny) + 0.5) / (fine * ny) * 39 - 19.5
        xx, yy = np.meshgrid(fx, fy, indexing="ij")
        ok = (np.hypot(xx, yy) > 10.0).reshape(nx, fine, ny, fine).mean(axis=(1, 3))
        expected = ok / ok.sum() * len(pts)
        keep = expected > 5
        assert observed[~keep].sum() <= 0.01 * len(pts)
        chi2 = ((observed[keep] - expected[keep]) ** 2 / expected[keep]).sum()
        assert stats.chi2.sf(chi2, keep.sum() - 1) > 0.001


def _trial(agent, radius, seed=0, level=1):
    vf = VisualFieldProfile.circular(radius)
    return run_search_trial(SearchConfig.for_level(level, seed), agent, vf)


class TestTrial:
    def test_wide_field_scanner_lower_bound(self):
        # Whole area visible: each find costs reaction delay + saccade + dwell <= ~1 s.
        for seed in range(10):
            agent = BoustrophedonAgent(AgentConfig(seed=seed, fixation_dwell=0.5, selection_dwell=0.5), VisualFieldProfile.circular(45))
            assert _trial(agent, 45.0, seed).outcome["found"] >= 3

    def test_fixed_gaze_no_visible_target(self):
        for seed in range(30):
            rec = _trial(FixationAgent(AgentConfig(seed=seed)), 1.0, seed)
            spawns = [e.payload for e in rec.events if e.kind == "spawn" and e.payload["kind"] == "marked"]
            if all(math.hypot(s["az"], s["el"]) > 2.0 for s in spawns):
                assert rec.outcome["found"] == 0

    def test_three_marked_at_all_times(self):
        rec = _trial(BoustrophedonAgent(AgentConfig(seed=4), VisualFieldProfile.circular(12)), 12.0, 4)
        marked = {e.payload["target"] for e in rec.events if e.kind == "spawn" and e.payload["kind"] == "marked"}
        assert len(marked) == 3
        for e in rec.events:
            if e.kind == "respawn":
                marked.remove(e.payload["replaces"])
                marked.add(e.payload["target"])
            assert len(marked) == 3
        assert rec.outcome["found"] > 0

    def test_respawns_outside_field_at_spawn_time(self):
        vf = VisualFieldProfile.circular(8.0)
        n = 0
        for seed in range(5):
            rec = _trial(BoustrophedonAgent(AgentConfig(seed=seed), vf), 8.0, seed)
            for e in rec.events:
                if e.kind == "respawn":
                    p = e.payload
                    assert not in_field(vf, p["gaze_az"], p["gaze_el"], np.array([p["az"]]), np.array([p["el"]]))[0]
                    n += 1
        assert n > 0

    def test_selection_events_and_errors(self):
        rec = _trial(BoustrophedonAgent(AgentConfig(seed=2), VisualFieldProfile.circular(10)), 10.0, 2)
        sel = [e for e in rec.events if e.kind == "select"]
        assert rec.outcome["found"] == sum(e.payload["kind"] == "marked" for e in sel)
        assert rec.outcome["errors"] == sum(e.payload["kind"] == "distractor" for e in sel)
        assert rec.outcome["p_adj"] == adjusted_score(rec.outcome["found"], 52, 39)
        assert rec.outcome["duration"] == 20.0

    def test_deterministic(self):
        from tunnelsim.core import serialize_trial

        make = lambda: _trial(BoustrophedonAgent(AgentConfig(seed=9), VisualFieldProfile.circular(7)), 7.0, 9)
        assert serialize_trial(make()) == serialize_trial(make())

    def test_median_found_non_decreasing_in_radius(self):
        medians = []
        for radius in (5.0, 10.0, 20.0):
            vf = VisualFieldProfile.circular(radius)
            found = [_trial(BoustrophedonAgent(AgentConfig(seed=s), vf), radius, s).outcome["found"] for s in range(100)]
            medians.append(np.median(found))
        assert medians == sorted(medians)


class TestConfig:
    def test_marked_fixed(self):
        with pytest.raises(ValueError):
            SearchConfig(n_marked=4)

    def test_schedule(self):
        assert SearchConfig.for_level(1).distractor_count == 6
        assert SearchConfig.for_level(4).distractor_count == 7
        c = SearchConfig.for_level(100)
        assert (c.area_w, c.area_h) == (80.0, 60.0)
        assert c.duration == 20.0
