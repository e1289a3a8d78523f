import math
import subprocess
import sys

import numpy as np
import orjson
import pytest

from tunnelsim.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from tunnelsim.core import VisualFieldProfile
from tunnelsim.metrics import METRIC_COLUMNS, write_metrics_csv

SMALL = """
seed: 4
sessions: 2
session_minutes: 1.0
groups:
  - label: A
    participants:
      - {id: a1, vf_truth: {diameters: [7.62, 8.26]}}
      - {id: a2, vf_truth: {diameters: [18.64, 18.18]}}
  - label: B
    latency: true
    vision: measured
    participants:
      - {id: b1, vf_truth: {diameters: [7.62, 8.26]}}
      - {id: b2, vf_truth: {diameters: [18.64, 18.18]}}
"""


@pytest.fixture()
def small_config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(SMALL)
    return path


def _synthetic_rows(group, n_part, rng, shift=0.0):
    rows = []
    for i in range(n_part):
        pid = f"{group}{i}"
        for session in range(1, 6):
            for trial in range(1, 41):
                row = {c: math.nan for c in METRIC_COLUMNS}
                row.update(trial_id=f"{pid}:{session}:{trial}", participant=pid, group=group, task="search",
                           session=session, trial=trial, level=1, invalid_ratio=0.0, excluded=False, missing=False,
                           n_saccades=3, timeout=False, vf_radius=5.0, flags="")
                for j, p in enumerate(("dvf", "expl_ratio", "sacc_freq", "head_eye_ratio", "elev_azim_ratio")):
                    row[p] = 1.0 + j + shift + rng.normal(0, 0.3)
                row["found"] = float(rng.poisson(3))
                row["p_adj"] = row["found"] * 52 * 39
                rows.append(row)
    return rows


class TestPipeline:
    def test_end_to_end(self, tmp_path, small_config, capsys):
        study, csv, rep = tmp_path / "study", tmp_path / "m.csv", tmp_path / "r.json"
        assert main(["simulate", "--config", str(small_config), "--out", str(study)]) == EXIT_OK
        assert main(["analyze", "--in", str(study), "--out", str(csv)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "analyzed" in out
        assert main(["compare", "--in", str(csv), "--out", str(rep), "--params", "dvf,sacc_freq"]) == EXIT_OK
        doc = orjson.loads(rep.read_bytes())
        assert doc["schema"] == "tunnelsim.equivalence-report"
        assert set(doc["parameters"]) <= {f"{t}.{p}" for t in ("tracking", "search", "navigation") for p in ("dvf", "sacc_freq")}
        assert main(["report", "--in", str(rep), "--out", str(tmp_path / "r.txt")]) == EXIT_OK
        assert "Eq p" in (tmp_path / "r.txt").read_text()

    def test_single_log_needs_vf(self, tmp_path, small_config):
        study = tmp_path / "study"
        main(["simulate", "--config", str(small_config), "--out", str(study), "--sessions", "1"])
        log = study / "logs" / "a1.jsonl"
        assert main(["analyze", "--in", str(log), "--out", str(tmp_path / "x.csv")]) == EXIT_CONFIG
        assert main(["analyze", "--in", str(log), "--vf", str(study / "vf" / "a1.json"),
                     "--participant", "a1", "--group", "A", "--out", str(tmp_path / "x.csv")]) == EXIT_OK

    def test_perimetry(self, tmp_path):
        truth = tmp_path / "truth.json"
        truth.write_bytes(orjson.dumps(VisualFieldProfile.circular(9.27).to_json()))
        out = tmp_path / "measured.json"
        assert main(["perimetry", "--truth", str(truth), "--out", str(out)]) == EXIT_OK
        prof = VisualFieldProfile.from_json(orjson.loads(out.read_bytes()))
        assert np.allclose(prof.right, 9.27, atol=0.04)

    def test_console_script(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "tunnelsim.cli", "report", "--in", str(tmp_path / "none.json")],
                             capture_output=True, text=True)
        assert res.returncode == EXIT_DATA and "data error" in res.stderr


class TestExitCodes:
    def test_bad_config_yaml(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("groups: [{label: A, participants: [{id: x}]}]")
        assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "s")]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "s")]) == EXIT_CONFIG

    def test_corrupt_log(self, tmp_path):
        vf = tmp_path / "vf.json"
        vf.write_bytes(orjson.dumps(VisualFieldProfile.circular(5).to_json()))
        log = tmp_path / "t.jsonl"
        log.write_text('{"version": 1, "task": "search"}\n')
        assert main(["analyze", "--in", str(log), "--vf", str(vf), "--out", str(tmp_path / "m.csv")]) == EXIT_DATA

    def test_unreadable_profile(self, tmp_path):
        (tmp_path / "vf.json").write_text("[1, 2]")
        assert main(["perimetry", "--truth", str(tmp_path / "vf.json"), "--out", str(tmp_path / "o.json")]) == EXIT_DATA

    def test_missing_group(self, tmp_path):
        csv = tmp_path / "m.csv"
        write_metrics_csv(csv, _synthetic_rows("A", 2, np.random.default_rng(0)))
        assert main(["compare", "--in", str(csv), "--groups", "A,B", "--out", str(tmp_path / "r.json")]) == EXIT_DATA

    def test_unknown_param(self, tmp_path):
        csv = tmp_path / "m.csv"
        rng = np.random.default_rng(0)
        write_metrics_csv(csv, _synthetic_rows("A", 2, rng) + _synthetic_rows("B", 2, rng))
        assert main(["compare", "--in", str(csv), "--params", "iq", "--out", str(tmp_path / "r.json")]) == EXIT_DATA

    def test_half_pair_of_inputs(self, tmp_path):
        assert main(["compare", "--a", "x.csv", "--out", str(tmp_path / "r.json")]) == EXIT_CONFIG

    @pytest.mark.parametrize("mutate,code", [
        (lambda d: d.update(schema="other"), EXIT_DATA),
        (lambda d: d.update(version=99), EXIT_DATA),
    ])
    def test_report_validation(self, tmp_path, capsys, mutate, code):
        rng = np.random.default_rng(1)
        (a, b) = tmp_path / "a.csv", tmp_path / "b.csv"
        write_metrics_csv(a, _synthetic_rows("A", 2, rng))
        write_metrics_csv(b, _synthetic_rows("B", 2, rng))
        rep = tmp_path / "r.json"
        assert main(["compare", "--a", str(a), "--b", str(b), "--params", "dvf", "--out", str(rep)]) == EXIT_OK
        doc = orjson.loads(rep.read_bytes())
        mutate(doc)
        rep.write_bytes(orjson.dumps(doc))
        assert main(["report", "--in", str(rep)]) == code
        assert "version" in capsys.readouterr().err or doc["schema"] == "other"

    def test_bad_compare_config(self, tmp_path):
        conf = tmp_path / "c.yaml"
        conf.write_text("compare: {delta_factor: -1}")
        assert main(["compare", "--config", str(conf), "--a", "a.csv", "--b", "b.csv",
                     "--out", str(tmp_path / "r.json")]) == EXIT_CONFIG


class TestCompareOutcomes:
    def test_empty_params(self, tmp_path, capsys):
        rng = np.random.default_rng(2)
        csv = tmp_path / "m.csv"
        write_metrics_csv(csv, _synthetic_rows("A", 2, rng) + _synthetic_rows("B", 2, rng))
        rep = tmp_path / "r.json"
        assert main(["compare", "--in", str(csv), "--params", "", "--out", str(rep)]) == EXIT_OK
        assert orjson.loads(rep.read_bytes())["parameters"] == {}
        assert main(["report", "--in", str(rep)]) == EXIT_OK

    def test_identical_distributions_all_equivalent(self, tmp_path):
        rng = np.random.default_rng(3)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_metrics_csv(a, _synthetic_rows("A", 8, rng))
        write_metrics_csv(b, _synthetic_rows("B", 8, rng))
        rep = tmp_path / "r.json"
        params = "dvf,expl_ratio,sacc_freq,head_eye_ratio,elev_azim_ratio,p_adj"
        assert main(["compare", "--a", str(a), "--b", str(b), "--params", params, "--out", str(rep)]) == EXIT_OK
        doc = orjson.loads(rep.read_bytes())
        assert len(doc["parameters"]) == 6
        assert all(r["equivalent"] for r in doc["parameters"].values())

    def test_shifted_groups_not_equivalent(self, tmp_path):
        rng = np.random.default_rng(4)
        csv = tmp_path / "m.csv"
        write_metrics_csv(csv, _synthetic_rows("A", 8, rng) + _synthetic_rows("B", 8, rng, shift=1.0))
        rep = tmp_path / "r.json"
        assert main(["compare", "--in", str(csv), "--params", "dvf", "--out", str(rep)]) == EXIT_OK
        r = orjson.loads(rep.read_bytes())["parameters"]["search.dvf"]
        assert not r["equivalent"] and r["p_difference"] < 0.001
