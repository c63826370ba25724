import csv
import io
import math

import numpy as np
import pytest
import yaml

from offgrid_sbl import bench_cli
from offgrid_sbl.bench_cli import (
    CSV_FIELDS,
    PRESETS,
    BenchRecord,
    ScenarioError,
    draw_trial,
    load_scenario,
    main,
    preset,
    read_records,
    resolve_scenario,
    run_benchmark,
    run_leakage,
    run_points,
    run_single,
    summarize,
    trial_seed,
)

SMALL = {
    "name": "small",
    "array": {"kind": "ula", "n": 16},
    "spacing_mhz": 2000.0,
    "downlink_mhz": 2170.0,
    "uplink_mhz": 1980.0,
    "channel": {"n_clusters": 2, "n_subpaths": 2, "azimuth_range_deg": [-40, 40], "angular_spread_deg": 10},
    "grid": {"kind": "spatial_frequency", "size": 24},
    "pilots": 10,
    "snr_db": 10.0,
    "users": 3,
    "trials": 2,
    "refine": {"max_iters": 15},
}


@pytest.fixture
def small_file(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


class TestScenario:
    def test_presets_resolve(self):
        for name in PRESETS:
            points = preset(name)
            assert points and all(p.grid_size >= 1 for p in points)
        ula = preset("ula-pilots")[0]
        assert ula.n_antennas == 150 and ula.pilots == 100 and ula.grid_size == 200
        assert ula.channel.n_paths == 30 and ula.linear
        assert not preset("planar2d")[0].linear

    def test_sweep_expansion(self):
        points = preset("ula-grid")
        assert [p.grid_size for p in points] == [150, 200, 250, 300]
        assert all(p.pilots == 70 for p in points)

    def test_half_wavelength_spacing(self):
        sc = preset("ula-pilots")[0]
        assert math.isclose(sc.spacing, bench_cli.SPEED_OF_LIGHT / 4e9)

    def test_file_and_preset_name(self, small_file):
        raw, points = load_scenario(small_file)
        assert raw["name"] == "small" and points[0].n_antennas == 16
        _, points = load_scenario("ula-pilots")
        assert points[0].n_antennas == 150

    @pytest.mark.parametrize("mutate,match", [
        (lambda r: r.pop("grid"), "grid"),
        (lambda r: r.update(bogus=1), "unknown keys"),
        (lambda r: r["array"].update(kind="hex"), "array.kind"),
        (lambda r: r["channel"].update(n_clusters=1.5), "channel.n_clusters"),
        (lambda r: r.update(pilots="many"), "pilots"),
        (lambda r: r.update(sweep={"key": "users", "values": [1]}), "sweep.key"),
        (lambda r: r["refine"].update(rho=2.0), "refine"),
        (lambda r: r["grid"].update(kind="hex"), "grid.kind"),
    ])
    def test_malformed(self, mutate, match):
        raw = yaml.safe_load(yaml.safe_dump(SMALL))
        mutate(raw)
        with pytest.raises(ScenarioError, match=match):
            resolve_scenario(raw)

    def test_yaml_error_reports_line(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("name: x\narray: [1, 2\npilots: 3\n")
        with pytest.raises(ScenarioError, match="line"):
            load_scenario(p)

    def test_geometry_file(self, tmp_path):
        from offgrid_sbl.array_model import ArrayGeometry
        ArrayGeometry.planar(3, 2, 0.07).to_file(tmp_path / "arr.txt")
        raw = yaml.safe_load(yaml.safe_dump(SMALL))
        raw["array"] = {"kind": "file", "path": "arr.txt"}
        raw["grid"] = {"kind": "uniform", "size": 12, "domain_deg": [-180, 180]}
        points = resolve_scenario(raw, tmp_path)
        assert points[0].n_antennas == 6 and not points[0].linear


class TestTrials:
    def test_seed_derivation(self):
        assert trial_seed(1, 0) == trial_seed(1, 0)
        assert trial_seed(1, 0) != trial_seed(1, 1) != trial_seed(2, 1)

    def test_methods_share_inputs(self, monkeypatch):
        sc = resolve_scenario(SMALL)[0]
        seen = []
        real = bench_cli._estimate

        def spy(method, sc_, data, dic):
            seen.append((data.y.copy(), data.X.copy()))
            return real(method, sc_, data, dic)

        monkeypatch.setattr(bench_cli, "_estimate", spy)
        bench_cli.run_trial(sc, ["sbl", "offgrid"], 0, trial_seed(0, 0))
        assert np.array_equal(seen[0][0], seen[1][0]) and np.array_equal(seen[0][1], seen[1][1])

    def test_draw_is_deterministic(self):
        sc = resolve_scenario(SMALL)[0]
        a, b = draw_trial(sc, 5), draw_trial(sc, 5)
        assert np.array_equal(a.y, b.y) and np.array_equal(a.h_bar_ls, b.h_bar_ls)

    def test_records_sorted_and_complete(self):
        points = resolve_scenario({**SMALL, "sweep": {"key": "pilots", "values": [8, 12]}})
        tagged = run_points(points, ["dft", "sbl"], 2, 0, stable=True)
        keys = [(i, r.method, r.trial) for i, r in tagged]
        assert keys == [(0, "dft", 0), (0, "dft", 1), (0, "sbl", 0), (0, "sbl", 1),
                        (1, "dft", 0), (1, "dft", 1), (1, "sbl", 0), (1, "sbl", 1)]
        assert all(r.runtime_ms == 0.0 and r.nmse >= 0 for _, r in tagged)

    def test_unknown_method(self):
        with pytest.raises(ScenarioError, match="unknown method"):
            run_points(resolve_scenario(SMALL), ["offgrid", "magic"], 1, 0)

    def test_uplink_needs_linear_array(self):
        points = preset("planar2d")
        with pytest.raises(ScenarioError, match="linear"):
            run_points(points, ["uplink_aided"], 1, 0)

    def test_record_invariant(self):
        with pytest.raises(ValueError):
            BenchRecord("dft", "s", 4, 2, 10.0, 8, 0, 1, -0.1, 1, 0.0)


class TestOutput:
    def test_csv_round_trip_and_summary(self, small_file, tmp_path):
        out = tmp_path / "r.csv"
        buf = io.StringIO()
        recs = run_benchmark(small_file, ["offgrid", "dft"], None, 3, out, stable=True, stream=buf)
        rows = list(csv.reader(open(out, encoding="utf-8")))
        assert tuple(rows[0]) == CSV_FIELDS
        assert len(rows) == 1 + 2 * 2
        back = read_records(out)
        assert back == recs
        s = summarize(back)
        for m in ("offgrid", "dft"):
            vals = [float(r[CSV_FIELDS.index("nmse")]) for r in rows[1:] if r[0] == m]
            assert abs(s[(m, 10, 24, 10.0)] - sum(vals) / len(vals)) < 1e-12
        assert "offgrid" in buf.getvalue()

    def test_byte_stable_across_worker_counts(self, small_file, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run_benchmark(small_file, ["sbl", "odft"], 2, 7, a, threads=1, stable=True, stream=io.StringIO())
        run_benchmark(small_file, ["sbl", "odft"], 2, 7, b, threads=2, stable=True, stream=io.StringIO())
        assert a.read_bytes() == b.read_bytes()

    def test_single_writes_trace(self, small_file, tmp_path):
        buf = io.StringIO()
        err = run_single(small_file, "offgrid", 0, tmp_path / "t.csv", stream=buf)
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert err >= 0 and "nmse=" in buf.getvalue()
        assert rows[0][0] == "iteration" and len(rows) >= 2

    def test_single_matches_first_bench_trial(self, small_file, tmp_path):
        recs = run_benchmark(small_file, ["offgrid"], 1, 4, None, stable=True, stream=io.StringIO())
        assert run_single(small_file, "offgrid", 4, stream=io.StringIO()) == recs[0].nmse

    def test_leakage(self, tmp_path):
        buf = io.StringIO()
        mags = run_leakage(80, 0.5, [5.0198, 0.0], tmp_path / "l.csv", stream=buf)
        rows = list(csv.reader(open(tmp_path / "l.csv")))
        assert len(rows) == 1 + 80 * 2
        assert set(np.argsort(mags[0])[::-1][:2] + 1) == {44, 45}
        assert "strongest bins 44, 45" in buf.getvalue() or "strongest bins 45, 44" in buf.getvalue()
        # 0 degrees is the grid point of bin 41
        assert math.isclose(mags[1].max(), math.sqrt(80)) and np.sum(mags[1] >= math.sqrt(80) - 1e-9) == 1


class TestCli:
    def test_gen_scenario_round_trip(self, tmp_path):
        p = tmp_path / "f.yaml"
        assert main(["gen-scenario", "ula-grid", "--out", str(p)]) == 0
        _, points = load_scenario(p)
        assert [q.grid_size for q in points] == [150, 200, 250, 300]

    def test_bench_command(self, small_file, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("OFFGRID_SBL_THREADS", "1")
        out = tmp_path / "o.csv"
        assert main(["bench", "--scenario", str(small_file), "--methods", "dft,odft",
                     "--trials", "1", "--seed", "2", "--out", str(out), "--stable"]) == 0
        assert len(read_records(out)) == 2
        assert "dft" in capsys.readouterr().out

    def test_usage_errors_exit_2(self, small_file):
        with pytest.raises(SystemExit) as exc:
            main(["bench", "--scenario", str(small_file), "--methods", "nope"])
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            main(["bench", "--scenario", str(small_file), "--threads", "zero"])
        assert exc.value.code == 2

    def test_single_and_leakage_commands(self, small_file, tmp_path, capsys):
        assert main(["single", "--scenario", str(small_file), "--method", "sbl"]) == 0
        assert main(["leakage", "--out", str(tmp_path / "l.csv")]) == 0
        out = capsys.readouterr().out
        assert "method=sbl" in out and "strongest bins" in out
