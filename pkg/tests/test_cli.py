import json

import numpy as np
import pytest

from mongerb.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main

TINY = ["--pde-cells", "12", "--ot-factor", "2", "--n-s", "20", "--tau", "1e-3"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "art"
    assert main(["train", "--problem", "poisson-u2", "--out", str(out), *TINY]) == EXIT_OK
    return out


def config_header(path):
    first = path.read_text().splitlines()[0]
    assert first.startswith("# ")
    return json.loads(first[2:])


class TestUsageErrors:
    def test_missing_parent(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "a" / "b"), *TINY]) == EXIT_USAGE

    def test_bad_option_value(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "a"), "--tau", "2"]) == EXIT_USAGE

    def test_unknown_problem(self, tmp_path):
        assert main(["train", "--problem", "heat", "--out", str(tmp_path / "a")]) == EXIT_USAGE

    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_missing_artifacts(self, tmp_path):
        assert main(["solve", "--artifacts", str(tmp_path), "--out", str(tmp_path / "r")]) == EXIT_USAGE

    def test_bad_1d_ratio(self, tmp_path):
        assert main(["reproduce", "1d", "--ratio", "1.5", "--no-maps", "--out", str(tmp_path / "o")]) == EXIT_USAGE

    def test_version_mismatch(self, trained, tmp_path):
        import shutil

        copy = tmp_path / "old"
        shutil.copytree(trained, copy)
        manifest = json.loads((copy / "manifest.json").read_text())
        manifest["version"] = 0
        (copy / "manifest.json").write_text(json.dumps(manifest))
        assert main(["solve", "--artifacts", str(copy), "--out", str(tmp_path / "r"), "--n-t", "1"]) == EXIT_USAGE


class TestTrainSolve:
    def test_train_outputs(self, trained):
        for name in ("manifest.json", "config.json", "spectrum_u.dat", "spectrum_psi.dat", "spectrum_mapped.dat"):
            assert (trained / name).exists()
        assert config_header(trained / "spectrum_u.dat")["n_s"] == 20

    def test_solve_compare(self, trained, tmp_path, capsys):
        out = tmp_path / "r"
        rc = main(["solve", "--artifacts", str(trained), "--out", str(out), "--n-t", "3", "--compare"])
        assert rc == EXIT_OK
        for name in ("errors_eim.csv", "errors_plain.csv", "eim_comparison.csv"):
            header = config_header(out / name)
            assert header["mode"] == "compare" and header["training"]["pde_cells"] == 12
        assert len((out / "eim_comparison.csv").read_text().splitlines()) == 2 + 3
        payload = json.loads((out / "errors_eim.json").read_text())
        assert payload["count"] == 3
        assert "relative L2" in capsys.readouterr().out

    def test_explicit_parameters_and_fields(self, trained, tmp_path):
        out = tmp_path / "r"
        rc = main(["solve", "--artifacts", str(trained), "--out", str(out), "--mu", "0.1", "0.0",
                   "--mu", "0", "-0.2", "--no-eim", "--dump-fields"])
        assert rc == EXIT_OK
        lines = (out / "errors_plain.csv").read_text().splitlines()
        assert lines[1].startswith("param0,param1,l2")
        assert len(lines) == 4
        assert (out / "field_plain_001.csv").exists()

    def test_empty_test_set(self, trained, tmp_path, capsys):
        rc = main(["solve", "--artifacts", str(trained), "--out", str(tmp_path / "r"), "--n-t", "0"])
        assert rc == EXIT_OK
        assert "empty test set" in capsys.readouterr().out
        payload = json.loads((tmp_path / "r" / "errors_eim.json").read_text())
        assert payload["aggregates"]["l2"]["avg"] is None

    def test_byte_identical_reruns(self, trained, tmp_path):
        runs = []
        for k in range(2):
            out = tmp_path / f"r{k}"
            assert main(["solve", "--artifacts", str(trained), "--out", str(out), "--n-t", "2"]) == EXIT_OK
            runs.append((out / "errors_eim.csv").read_bytes())
        assert runs[0] == runs[1]

    def test_training_is_deterministic(self, trained, tmp_path):
        again = tmp_path / "art"
        assert main(["train", "--problem", "poisson-u2", "--out", str(again), *TINY]) == EXIT_OK
        for name in ("basis.npy", "modes.npy", "eim_K_points.npy"):
            np.testing.assert_array_equal(np.load(again / name), np.load(trained / name))

    def test_shift_artifacts_have_no_solver(self, tmp_path):
        art = tmp_path / "shift"
        rc = main(["train", "--problem", "advection-analytic", "--out", str(art), "--pde-cells", "12",
                   "--ot-factor", "2", "--eps", "1e-3"])
        assert rc == EXIT_OK
        assert main(["solve", "--artifacts", str(art), "--out", str(tmp_path / "r")]) == EXIT_USAGE


def test_reproduce_1d_bounds(tmp_path):
    out = tmp_path / "o"
    rc = main(["reproduce", "1d", "--mu-min", "5", "--n-mu", "5", "--nodes", "2049", "--no-maps", "--out", str(out)])
    assert rc == EXIT_OK
    lines = (out / "bounds.csv").read_text().splitlines()
    assert config_header(out / "bounds.csv")["mu_min"] == 5.0
    assert lines[1] == "check,mu,error,sharp_bound,bound,passed"
    assert len(lines) == 2 + 10
    assert all(line.endswith(",1") for line in lines[2:])
