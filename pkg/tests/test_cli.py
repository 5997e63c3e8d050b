import csv
import json

import pytest

from crossphase import data_path
from crossphase.cli import SIGN_NOTE, emit_reports, input_hash, main


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestExitCodes:
    def test_no_arguments(self, capsys):
        code, _, err = run([], capsys)
        assert code == 2 and "usage" in err

    def test_unknown_subcommand(self, capsys):
        assert run(["explode"], capsys)[0] == 2

    def test_bad_flag(self, capsys):
        assert run(["powerflow", "--feeder", "twobus", "--bogus"], capsys)[0] == 2

    @pytest.mark.parametrize("limits", ["1.05,0.95", "abc", "0.95"])
    def test_bad_limits(self, capsys, limits):
        assert run(["control", "--feeder", "hipv", "--limits", limits], capsys)[0] == 2

    def test_missing_feeder_is_domain_error(self, capsys, tmp_path):
        code, _, err = run(["powerflow", "--feeder", str(tmp_path / "nope.json")], capsys)
        assert code == 1
        doc = json.loads(err)
        assert set(doc) == {"error", "message"}

    def test_malformed_feeder(self, capsys, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"buses": 3}')
        code, _, err = run(["powerflow", "--feeder", str(p)], capsys)
        assert code == 1 and json.loads(err)["error"]

    def test_unknown_pv(self, capsys):
        code, _, err = run(["decompose", "--feeder", "twobus", "--perturb", "ghost:10"], capsys)
        assert code == 1 and json.loads(err)

    def test_decompose_needs_two_bus(self, capsys):
        assert run(["decompose", "--feeder", "hipv", "--perturb", "pv_T4b:10"], capsys)[0] in (1, 2)


class TestHelp:
    @pytest.mark.parametrize(
        "cmd", [[], ["powerflow"], ["control"], ["sensitivity"], ["compare"], ["decompose"]]
    )
    def test_sign_note(self, capsys, cmd):
        code, out, _ = run(cmd + ["--help"], capsys)
        assert code == 0
        assert " ".join(SIGN_NOTE.split()) in " ".join(out.split())

    def test_version(self, capsys):
        code, out, _ = run(["--version"], capsys)
        assert code == 0 and out.strip()


class TestCommands:
    def test_powerflow_base_voltages(self, capsys):
        code, out, _ = run(["powerflow", "--feeder", "twobus.json"], capsys)
        assert code == 0
        n4 = {line.split()[1]: float(line.split()[2]) for line in out.splitlines() if line.split()[0] == "N4"}
        for ph, ref in zip("ABC", (2103, 2206, 2150)):
            assert n4[ph] == pytest.approx(ref, rel=0.01)

    def test_decompose_json(self, capsys):
        code, out, _ = run(["decompose", "--feeder", "twobus.json", "--perturb", "pvA:+100", "--json"], capsys)
        assert code == 0
        doc = json.loads(out)
        earth = [doc["phases"][ph]["dv_earth"] for ph in "ABC"]
        assert len({round(e["magnitude"], 9) for e in earth}) == 1
        assert abs(abs(earth[0]["angle_deg"]) - 180) < 5

    def test_impedance(self, capsys):
        code, out, _ = run(["impedance", "--feeder", "twobus", "--json"], capsys)
        assert code == 0 and json.loads(out)

    def test_sensitivity_csv(self, capsys, tmp_path):
        code, _, _ = run(["sensitivity", "--feeder", "twobus", "--out", str(tmp_path)], capsys)
        assert code == 0
        rows = read_csv(next(tmp_path.glob("sensitivity*.csv")))
        assert rows[0][1:] == ["pv:pvA", "pv:pvB", "pv:pvC"]
        assert [r[0] for r in rows[1:]] == ["N4.A", "N4.B", "N4.C"]
        assert float(rows[1][1]) < 0 < float(rows[1][2])

    @pytest.mark.parametrize("strategy", ["greedy", "lp-full", "lp-perphase", "iterative"])
    def test_control_strategies(self, capsys, tmp_path, strategy):
        argv = ["control", "--feeder", "hipv", "--profile", "day", "--instance", "h12",
                "--strategy", strategy, "--out", str(tmp_path)]
        code, _, _ = run(argv, capsys)
        assert code == 0
        stem = "control_h12"
        doc = json.loads((tmp_path / f"{stem}.json").read_text())
        assert doc["manifest"]["command"] == "control"
        assert (tmp_path / f"{stem}_manifest.json").exists()

    def test_addition_study(self, capsys, tmp_path):
        code, _, _ = run(["addition-study", "--feeder", "coupled30", "--batch", "2",
                          "--out", str(tmp_path)], capsys)
        assert code == 0
        assert list(tmp_path.glob("addition-study*.csv"))


class TestReports:
    def compare(self, capsys, out, instances):
        return run(["compare", "--feeder", "hipv", "--profile", "day", "--instances",
                    instances, "--out", str(out)], capsys)[0]

    def test_file_count(self, capsys, tmp_path):
        assert self.compare(capsys, tmp_path, "h06,h12,h18") == 0
        csvs = sorted(p.name for p in tmp_path.glob("*.csv"))
        assert csvs == [
            "compare_instance_h06.csv", "compare_instance_h12.csv",
            "compare_instance_h18.csv", "compare_summary.csv",
        ]
        assert (tmp_path / "compare_manifest.json").exists()
        assert len(read_csv(tmp_path / "compare_summary.csv")) == 1 + 3 * 3

    def test_byte_identical(self, capsys, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert self.compare(capsys, d, "h12,h13") == 0
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        for n in names:
            assert (a / n).read_bytes() == (b / n).read_bytes()

    def test_empty_instances(self, capsys, tmp_path):
        assert self.compare(capsys, tmp_path, "") == 0
        rows = read_csv(tmp_path / "compare_summary.csv")
        assert len(rows) == 1 and rows[0][0] == "instance"

    def test_manifest_hash(self, capsys, tmp_path):
        assert self.compare(capsys, tmp_path, "h12") == 0
        man = json.loads((tmp_path / "compare_manifest.json").read_text())
        paths = [data_path("hipv.json"), data_path("day.csv")]
        assert man["input_hash"] == input_hash(paths, man["parameters"])
        assert man["instances"] == ["h12"]
        assert man["schema_version"]
        doc = json.loads((tmp_path / "compare.json").read_text())
        assert doc["manifest"] == man

    def test_six_significant_digits(self, capsys, tmp_path):
        assert run(["powerflow", "--feeder", "twobus", "--out", str(tmp_path)], capsys)[0] == 0
        rows = read_csv(next(tmp_path.glob("powerflow*.csv")))
        for r in rows[1:]:
            for cell in r:
                try:
                    float(cell)
                except ValueError:
                    continue
                assert len(cell.lstrip("-").replace(".", "").split("e")[0].lstrip("0")) <= 6

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError, match="file"):
            from crossphase.cli import Bundle, RunManifest

            man = RunManifest("x", "f", None, [], {}, "0", "h")
            emit_reports(Bundle("x", man, {}, {}, ""), blocker / "sub")


class TestConfig:
    def test_config_supplies_flags(self, capsys, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"feeder": "hipv", "profile": "day", "instances": ["h12"],
                                   "limits": [0.95, 1.05]}))
        out = tmp_path / "o"
        code, _, _ = run(["compare", "--config", str(cfg), "--out", str(out)], capsys)
        assert code == 0
        man = json.loads((out / "compare_manifest.json").read_text())
        assert man["instances"] == ["h12"]

    def test_argv_wins(self, capsys, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"feeder": "nope.json"}))
        code, out, _ = run(["powerflow", "--config", str(cfg), "--feeder", "twobus"], capsys)
        assert code == 0 and "N4" in out

    def test_unknown_key(self, capsys, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"feeder": "twobus", "colour": "red"}))
        assert run(["powerflow", "--config", str(cfg)], capsys)[0] == 2

    def test_unreadable(self, capsys, tmp_path):
        assert run(["powerflow", "--feeder", "twobus", "--config", str(tmp_path / "x")], capsys)[0] == 2
