import json

import yaml

from ccpsim.cli import main


def write_config(tmp_path, name="cfg.yaml", **over):
    base = dict(K=2, N=2, M=4, code="hamming", code_n=7, code_k=4,
                precoders=["zf", "mmse"], L_b=28, snr_db=[6.0, 12.0],
                trials=2, seed=5)
    base.update(over)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(base))
    return path


class TestRunCommand:
    def test_run_writes_outputs(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        out = tmp_path / "results"
        assert main(["run", str(cfg), "--out", str(out)]) == 0
        doc = json.loads((out / "result.json").read_text())
        assert doc["schema_version"] == 1
        assert set(doc["methods"]) == {"zf", "mmse"}
        assert (out / "zf.csv").exists()
        assert "zf" in capsys.readouterr().out

    def test_seed_override_changes_results(self, tmp_path):
        cfg = write_config(tmp_path)
        out_a, out_b, out_c = (tmp_path / d for d in ("a", "b", "c"))
        main(["run", str(cfg), "--out", str(out_a), "--seed", "1"])
        main(["run", str(cfg), "--out", str(out_b), "--seed", "1"])
        main(["run", str(cfg), "--out", str(out_c), "--seed", "2"])
        doc = lambda p: json.loads((p / "result.json").read_text())["methods"]
        assert doc(out_a) == doc(out_b)
        assert doc(out_a) != doc(out_c)

    def test_threads_flag(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "threaded"
        assert main(["run", str(cfg), "--out", str(out), "--threads", "2"]) == 0

    def test_missing_config_fails_nonzero(self, tmp_path, capsys):
        assert main(["run", str(tmp_path / "nope.yaml")]) == 1
        assert "error:" in capsys.readouterr().err

    def test_invalid_config_fails_nonzero(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump({"K": 2, "trials": 0}))
        assert main(["run", str(path)]) == 1
        assert "error:" in capsys.readouterr().err


class TestSweepCommand:
    def test_sweep_runs_all_matching(self, tmp_path, capsys):
        write_config(tmp_path, name="one.yaml", snr_db=[5.0])
        write_config(tmp_path, name="two.yaml", snr_db=[9.0])
        assert main(["sweep", str(tmp_path / "*.yaml")]) == 0
        out = capsys.readouterr().out
        assert "one.yaml" in out and "two.yaml" in out

    def test_sweep_empty_glob_fails(self, tmp_path, capsys):
        assert main(["sweep", str(tmp_path / "*.yaml")]) == 1
        assert "no config files" in capsys.readouterr().err


class TestExportScatter:
    def test_export_scatter_csv(self, tmp_path):
        cfg = write_config(tmp_path, precoders=["zf", "slp"], snr_db=[10.0])
        out = tmp_path / "scatter.csv"
        assert main(["export-scatter", str(cfg), "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "method,user,slot,re,im"
        # 2 methods x K=2 users x L_s=14 slots (56 info -> 98 coded -> 49? no:
        # L_b=28 -> 49 coded bits -> pad to 50 -> 25 slots)
        n_slots = (28 // 4 * 7 + 1) // 2
        assert len(lines) == 1 + 2 * 2 * n_slots
        method, user, slot, re, im = lines[1].split(",")
        float(re), float(im)
        assert method in ("zf", "slp")
