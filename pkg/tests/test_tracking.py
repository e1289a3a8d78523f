import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tunnelsim.agents import AgentConfig, OmniscientAgent, PursuitAgent, RandomSelectionAgent
from tunnelsim.core import VisualFieldProfile, serialize_trial
from tunnelsim.tracking import (
    MAX_AREA,
    TrackingConfig,
    TrackingState,
    run_tracking_trial,
    score_trial,
    spawn_targets,
    step_targets,
)


class TestScore:
    def test_none_incorrect(self):
        assert score_trial([0, 1], {0, 1}).score == 2

    def test_one_incorrect(self):
        assert score_trial([0, 4], {0, 1}).score == 1

    def test_three_incorrect(self):
        out = score_trial([2, 3, 4], {0, 1})
        assert (out.incorrect_selections, out.score) == (3, 0)


class TestStep:
    def test_straight_line(self):
        cfg = TrackingConfig(n_targets=2, n_marked=1)
        st_ = TrackingState(np.array([[0.0, 0.0], [-20.0, -15.0]]), np.array([0.3, math.pi]), 0.0, cfg)
        cfg_no_turn = TrackingConfig(n_targets=2, n_marked=1, turn_rate=0.0)
        st_.cfg = cfg_no_turn
        new, _ = step_targets(st_, 0.1, np.random.default_rng(0))
        d = new.pos[0] - st_.pos[0]
        assert np.hypot(*d) == pytest.approx(cfg.speed * 0.1)
        assert math.atan2(d[1], d[0]) == pytest.approx(0.3)

    def test_collision_course_keeps_separation(self):
        cfg = TrackingConfig(n_targets=2, n_marked=1, turn_rate=0.0)
        st_ = TrackingState(np.array([[-2.5, 0.0], [2.5, 0.0]]), np.array([0.0, math.pi]), 0.0, cfg)
        rng = np.random.default_rng(1)
        for _ in range(60):
            st_, _ = step_targets(st_, 1 / 30, rng)
            assert np.hypot(*(st_.pos[0] - st_.pos[1])) >= cfg.separation - 1e-9

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 100))
    def test_invariants_random(self, seed, level):
        cfg = TrackingConfig.for_level(level, seed)
        state = spawn_targets(cfg)
        rng = np.random.default_rng(seed)
        for _ in range(90):
            prev = state.pos.copy()
            state, _ = step_targets(state, 1 / 30, rng)
            moved = np.hypot(*(state.pos - prev).T)
            assert np.allclose(moved, cfg.speed / 30)
            assert (np.abs(state.pos[:, 0]) <= cfg.area_w / 2 + 1e-9).all()
            assert (np.abs(state.pos[:, 1]) <= cfg.area_h / 2 + 1e-9).all()
            d = np.hypot(*(state.pos[:, None] - state.pos[None]).transpose(2, 0, 1))
            np.fill_diagonal(d, np.inf)
            assert d.min() >= cfg.separation - 1e-9

    def test_boundary_turns_inward(self):
        cfg = TrackingConfig(n_targets=2, n_marked=1, turn_rate=0.0)
        x = cfg.area_w / 2 - 1.0
        st_ = TrackingState(np.array([[x, 0.0], [-20.0, 0.0]]), np.array([0.0, math.pi / 2]), 0.0, cfg)
        new, events = step_targets(st_, 1 / 30, np.random.default_rng(2))
        assert math.cos(new.heading[0]) < 0  # now heading back into the area
        assert any(e.payload.get("reason") == "boundary" for e in events)

    def test_dt_must_be_positive(self):
        with pytest.raises(ValueError):
            step_targets(spawn_targets(TrackingConfig()), 0.0, np.random.default_rng(0))


class TestSchedule:
    def test_level_one(self):
        cfg = TrackingConfig.for_level(1)
        assert (cfg.n_targets, cfg.n_marked, cfg.speed, cfg.area_w, cfg.area_h) == (5, 2, 3.0, 52.0, 39.0)
        assert 8.0 <= cfg.trial_duration <= 12.0

    @pytest.mark.parametrize("level", range(1, 101))
    def test_every_level(self, level):
        cfg = TrackingConfig.for_level(level)
        gain = 1 + 0.04 * (level - 1)
        extra = (level - 1) // 5
        assert cfg.n_targets == 5 + extra
        assert cfg.n_marked == 2 + extra // 2
        assert cfg.speed == pytest.approx(3.0 * gain)
        assert cfg.area_w == pytest.approx(min(52 * gain, MAX_AREA[0]))
        assert cfg.area_h == pytest.approx(min(39 * gain, MAX_AREA[1]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            TrackingConfig.for_level(0)

    def test_area_cap(self):
        with pytest.raises(ValueError):
            TrackingConfig(area_w=81.0)


def _run(agent_cls, seed, radius, **kw):
    vf = VisualFieldProfile.circular(radius)
    agent = agent_cls(AgentConfig(seed=seed, **kw), vf)
    return run_tracking_trial(TrackingConfig.for_level(1, seed), agent, vf)


class TestTrial:
    def test_omniscient_always_two(self):
        assert all(_run(OmniscientAgent, s, 3.0).outcome["score"] == 2 for s in range(20))

    def test_wide_field_perfect_memory(self):
        assert all(_run(PursuitAgent, s, 45.0, memory_decay=0.0).outcome["score"] == 2 for s in range(20))

    def test_random_selection_baseline(self):
        # 2 of 5 chosen uniformly: P(both marked) = 1 / C(5, 2) = 0.1
        n = 600
        p = np.mean([_run(RandomSelectionAgent, s, 10.0).outcome["score"] == 2 for s in range(n)])
        assert abs(p - 1 / math.comb(5, 2)) < 3 * math.sqrt(0.1 * 0.9 / n)

    def test_forgetful_agent_near_random(self):
        n = 300
        p = np.mean([_run(PursuitAgent, s, 1.0, memory_decay=1e6).outcome["score"] == 2 for s in range(n)])
        assert p < 0.25

    def test_events(self):
        rec = _run(PursuitAgent, 3, 9.0)
        kinds = [e.kind for e in rec.events]
        assert kinds.count("spawn") == 5 and kinds.count("mark") == 2
        stop = next(e for e in rec.events if e.kind == "stop")
        assert stop.payload["markers_visible"] is False
        assert all(e.t <= stop.t for e in rec.events if e.kind in ("mark", "heading-change"))
        sel = [e for e in rec.events if e.kind == "selection"]
        assert len(sel) == 2 and all(e.t > stop.t for e in sel)
        assert all(0 <= e.t <= rec.duration for e in rec.events)

    def test_deterministic(self):
        assert serialize_trial(_run(PursuitAgent, 11, 6.0)) == serialize_trial(_run(PursuitAgent, 11, 6.0))

    def test_selection_timeout_forced_failure(self):
        class Staller(PursuitAgent):
            def select(self, t, candidates, n_select):
                return None

        rec = _run(Staller, 2, 9.0)
        assert rec.outcome["timeout"] is True and rec.outcome["score"] == 0
        assert rec.events[-1].kind == "timeout"
