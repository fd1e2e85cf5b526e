import json

import numpy as np
import pytest

from gpcrhc.arrayio import read_array, write_array
from gpcrhc.cli import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, EXIT_VERDICT, main
from gpcrhc.config import ConfigError, load_config, parse_config, preset
from gpcrhc.galerkin import lift_system

CONSTANT_TOML = """
mode = "full"

[system]
n = 2
m = 1
distributions = [{kind = "uniform"}]
A = [{exponents = [0], matrix = [[0.9, 0.2], [-0.1, 0.7]]}]
B = [{exponents = [0], matrix = [[1.0], [0.5]]}]

[basis]
order = 3

[cost]
Q = [[1.0, 0.0], [0.0, 1.0]]
R = [[1.0]]
N = 5

[run]
steps = {steps}
x0 = [{x0}]
samples = 2000
"""

PAPER_TOML = """
mode = "variable-gain"

[system]
n = 2
m = 1
distributions = [{kind = "uniform"}]
A = [
  {exponents = [0], matrix = [[1.02, -0.1], [0.1, 0.98]]},
  {exponents = [1], matrix = [[0.04, 0.0], [0.0, 0.04]]},
]
B = [{exponents = [0], matrix = [[0.1], [0.05]]}]

[cost]
Q = [[2.0, 0.0], [0.0, 5.0]]
R = [[1.0]]

[[constraints]]
kind = "expectation-state"
G = [1.0, 0.0]
direction = ">="
bound = -1.0

[run]
x0 = [{x0}]
"""


def write_config(tmp_path, text, **fields):
    for k, v in fields.items():
        text = text.replace("{" + k + "}", str(v))
    path = tmp_path / "exp.toml"
    path.write_text(text)
    return str(path)


class TestArrayIO:
    @pytest.mark.parametrize("shape", [(3,), (2, 3), (2, 3, 4), (1, 1)])
    def test_roundtrip_bit_exact(self, tmp_path, shape):
        a = np.random.default_rng(0).standard_normal(shape) * 1e-7 + np.pi
        write_array(tmp_path / "a.txt", a)
        b = read_array(tmp_path / "a.txt")
        assert b.shape == a.shape and b.tobytes() == a.tobytes()

    def test_header(self, tmp_path):
        write_array(tmp_path / "a.txt", np.zeros((2, 3)))
        assert (tmp_path / "a.txt").read_text().splitlines()[0] == "2 3"

    def test_count_mismatch(self, tmp_path):
        (tmp_path / "a.txt").write_text("2 2\n1 2\n3\n")
        with pytest.raises(ValueError):
            read_array(tmp_path / "a.txt")


class TestConfig:
    def test_presets_parse(self):
        cfg = preset("paper")
        assert cfg.mode == "mean-plus-variable-gain"
        assert cfg.cost.N == 10 and cfg.run.steps == 100 and cfg.run.x0 == [-0.5, 1.0]
        assert preset("deterministic-smoke").mode == "full-chaos-control"

    def test_toml_matches_preset(self, tmp_path):
        cfg = load_config(write_config(tmp_path, PAPER_TOML, x0="-0.5, 1.0"))
        ref = preset("paper")
        assert cfg.system == ref.system and cfg.cost == ref.cost and cfg.constraints == ref.constraints

    def test_unknown_key(self):
        data = preset("paper").model_dump()
        data["run"]["stepz"] = 3
        with pytest.raises(ConfigError, match="run.stepz"):
            parse_config(data)

    def test_dimension_errors(self):
        data = preset("paper").model_dump()
        data["system"]["A"][1]["matrix"] = [[1.0]]
        with pytest.raises(ConfigError, match="A\\[1\\].matrix"):
            parse_config(data)
        data = preset("paper").model_dump()
        data["run"]["x0"] = [1.0]
        with pytest.raises(ConfigError, match="x0"):
            parse_config(data)

    def test_zero_steps(self):
        data = preset("paper").model_dump()
        data["run"]["steps"] = 0
        with pytest.raises(ConfigError, match="run.steps"):
            parse_config(data)

    def test_bad_mode(self):
        data = preset("paper").model_dump()
        data["mode"] = "robust"
        with pytest.raises(ConfigError, match="mode"):
            parse_config(data)

    def test_unreadable(self, tmp_path):
        (tmp_path / "bad.toml").write_text("mode = [")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.toml")


class TestProject:
    def test_paper_roundtrip(self, tmp_path):
        assert main(["project", "--example", "paper", "--out", str(tmp_path)]) == EXIT_OK
        cfg = preset("paper")
        chaos = lift_system(cfg.uncertain_system(), cfg.basis_set())
        A = read_array(tmp_path / "A_bold.txt")
        B = read_array(tmp_path / "B_bold.txt")
        assert A.shape == (10, 10) and B.shape == (10, 5)
        assert A.tobytes() == chaos.Abold.tobytes() and B.tobytes() == chaos.Bbold.tobytes()
        assert read_array(tmp_path / "E.txt").tobytes() == chaos.tensors.E.tobytes()
        assert read_array(tmp_path / "W.txt").tobytes() == chaos.tensors.W.tobytes()
        meta = json.loads((tmp_path / "projection.json").read_text())
        assert meta["p"] == 4 and meta["multi_indices"] == [[0], [1], [2], [3], [4]]

    def test_constant_block_diagonal(self, tmp_path):
        cfg = write_config(tmp_path, CONSTANT_TOML, steps=5, x0="1.0, -1.0")
        assert main(["project", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
        A = read_array(tmp_path / "o" / "A_bold.txt")
        np.testing.assert_array_equal(A, np.kron(np.eye(4), [[0.9, 0.2], [-0.1, 0.7]]))

    def test_order_zero(self, tmp_path):
        assert main(["project", "--example", "paper", "--order", "0", "--out", str(tmp_path)]) == EXIT_OK
        np.testing.assert_array_equal(read_array(tmp_path / "A_bold.txt"), [[1.02, -0.1], [0.1, 0.98]])
        np.testing.assert_array_equal(read_array(tmp_path / "B_bold.txt"), [[0.1], [0.05]])


class TestRun:
    def test_smoke_and_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["run", "--example", "deterministic-smoke", "--out", str(a)]) == EXIT_OK
        assert main(["run", "--example", "deterministic-smoke", "--out", str(b)]) == EXIT_OK
        assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()
        summary = json.loads((a / "summary.json").read_text())
        assert summary["moment_decay"]["passed"] and summary["degraded_steps"] == []
        assert summary["final_state_norm"] < 1e-2 * summary["initial_state_norm"]

    def test_zero_steps_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path, CONSTANT_TOML, steps=0, x0="1.0, -1.0")
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "run.steps" in capsys.readouterr().err

    def test_infeasible_initial(self, tmp_path, capsys):
        cfg = write_config(tmp_path, PAPER_TOML, x0="-1.5, 1.0")
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_SOLVER
        assert "constraint-infeasible-initial" in capsys.readouterr().err

    def test_short_run_fails_decay_verdict(self, tmp_path):
        cfg = write_config(tmp_path, CONSTANT_TOML, steps=3, x0="1.0, -1.0")
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_VERDICT
        assert (tmp_path / "o" / "trace.csv").exists()

    def test_truth_plant(self, tmp_path):
        cfg = write_config(tmp_path, CONSTANT_TOML.replace("samples = 2000", "samples = 2000\ntruth_delta = [0.5]"), steps=60, x0="1.0, -1.0")
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
        header = (tmp_path / "o" / "trace.csv").read_text().splitlines()[0].split(",")
        assert "x_0" in header and "u_0" in header


class TestSolveValidate:
    def test_solve(self, tmp_path):
        assert main(["solve", "--example", "paper", "--out", str(tmp_path)]) == EXIT_OK
        data = json.loads((tmp_path / "solution.json").read_text())
        assert data["status"] == "optimal" and data["mode"] == "mean-plus-variable-gain"
        assert np.shape(data["gains"]) == (10, 1, 2)

    def test_solve_full_mode(self, tmp_path):
        assert main(["solve", "--example", "paper", "--mode", "full", "--horizon", "4", "--out", str(tmp_path)]) == EXIT_OK
        data = json.loads((tmp_path / "solution.json").read_text())
        assert np.shape(data["controls"]) == (4, 5) and np.shape(data["states"]) == (5, 10)

    def test_validate_paper(self, tmp_path):
        assert main(["validate", "--example", "paper", "--out", str(tmp_path)]) == EXIT_OK
        data = json.loads((tmp_path / "moments.json").read_text())
        assert data["passed"] and data["M"] == 100_000

    def test_validate_order_zero_fails(self, tmp_path):
        assert main(["validate", "--example", "paper", "--order", "0", "--out", str(tmp_path)]) == EXIT_VERDICT

    def test_validate_deterministic(self, tmp_path):
        cfg = write_config(tmp_path, CONSTANT_TOML, steps=5, x0="1.0, -1.0")
        assert main(["validate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
        data = json.loads((tmp_path / "o" / "moments.json").read_text())
        assert data["max_disc_mean"] == 0.0 and data["max_disc_var"] == 0.0

    def test_seed_flag(self, tmp_path):
        main(["validate", "--example", "paper", "--seed", "3", "--out", str(tmp_path)])
        assert json.loads((tmp_path / "moments.json").read_text())["seed"] == 3


class TestFrontEnd:
    def test_schema(self, capsys):
        assert main(["--schema"]) == EXIT_OK
        schema = json.loads(capsys.readouterr().out)
        assert {"system", "cost", "run"} <= set(schema["properties"])

    def test_no_command(self):
        assert main([]) == EXIT_CONFIG

    def test_config_and_example(self, tmp_path):
        cfg = write_config(tmp_path, CONSTANT_TOML, steps=5, x0="1.0, -1.0")
        assert main(["project", "--config", cfg, "--example", "paper"]) == EXIT_CONFIG
        assert main(["project"]) == EXIT_CONFIG

    def test_missing_file(self, tmp_path):
        assert main(["project", "--config", str(tmp_path / "nope.toml")]) == EXIT_CONFIG
