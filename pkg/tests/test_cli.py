import json

import jsonschema
import numpy.testing as npt
import pytest

from msm_aipw.cli import load_schema, main
from msm_aipw.data import load_dataset
from msm_aipw.sim import generate_supp


def run(capsys, *argv):
    rc = main(list(argv))
    out, err = capsys.readouterr()
    return rc, out, err


def validate(payload, kind):
    schema = load_schema()
    jsonschema.validate(payload, {**schema, "$ref": f"#/$defs/{kind}"})


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    obs, pot = d / "obs.csv", d / "pot.csv"
    assert main(["generate", "--n", "300", "--seed", "1", "-o", str(obs), "--potential", str(pot)]) == 0
    return obs, pot


@pytest.mark.parametrize("cmd", [[], ["fit"], ["simulate"], ["oracle"], ["generate"]])
def test_help(capsys, cmd):
    rc, out, _ = run(capsys, *cmd, "--help")
    assert rc == 0 and "Usage:" in out


class TestFit:

    def test_aipw(self, capsys, exported):
        rc, out, _ = run(capsys, "fit", str(exported[0]), "--tau", "1")
        payload = json.loads(out)
        assert rc == 0 and payload["u_residual"] <= 1e-8
        assert payload["estimator"] == "aipw" and payload["folds"] == 5
        validate(payload, "fit")

    def test_identity_ipw_equals_naive(self, capsys, exported):
        _, naive, _ = run(capsys, "fit", str(exported[0]), "--tau", "1", "--estimator", "naive")
        _, ipw, _ = run(capsys, "fit", str(exported[0]), "--tau", "1", "--estimator", "ipw",
                        "--identity-weights")
        npt.assert_allclose(json.loads(ipw)["beta_hat"], json.loads(naive)["beta_hat"], atol=1e-6)

    def test_full_data(self, capsys, exported):
        rc, out, _ = run(capsys, "fit", str(exported[1]), "--tau", "1", "--estimator", "full")
        assert rc == 0
        validate(json.loads(out), "fit")

    def test_bootstrap_and_risk(self, capsys, exported):
        rc, out, _ = run(capsys, "fit", str(exported[0]), "--tau", "1", "--estimator", "naive",
                         "--bootstrap", "20", "--risk-times", "0.5,1")
        payload = json.loads(out)
        assert rc == 0 and payload["se_boot"] > 0 and len(payload["risk_contrasts"]) == 2
        validate(payload, "fit")

    def test_missing_column(self, capsys, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time,treatment\n0.5,1\n0.3,0\n")
        rc, _, err = run(capsys, "fit", str(path), "--tau", "1")
        assert rc == 3 and "'event'" in err

    def test_missing_file(self, capsys, tmp_path):
        assert run(capsys, "fit", str(tmp_path / "none.csv"), "--tau", "1")[0] == 3

    @pytest.mark.parametrize("extra", [
        ["--estimator", "naive", "--folds", "3"],
        ["--estimator", "full", "--identity-weights"],
        ["--identity-weights", "--clip-ps", "0.05,0.95"],
        ["--estimator", "naive", "--clip-surv", "0.1"],
        ["--bootstrap", "1"],
        ["--clip-ps", "0.9,0.1"],
        ["--risk-times", "2.0"],
    ])
    def test_conflicting_flags(self, capsys, exported, extra):
        assert run(capsys, "fit", str(exported[0]), "--tau", "1", *extra)[0] == 2


class TestSimulate:

    ARGS = ["simulate", "--n", "120", "--reps", "2", "--seed", "3", "--estimators", "naive,ipw"]

    def test_byte_identical(self, capsys):
        _, a, _ = run(capsys, *self.ARGS, "--threads", "1")
        _, b, _ = run(capsys, *self.ARGS, "--threads", "2")
        assert a == b
        validate(json.loads(a), "simulate")

    def test_zero_replications(self, capsys):
        assert run(capsys, "simulate", "--reps", "0")[0] == 2

    def test_dr_needs_supplementary(self, capsys):
        assert run(capsys, "simulate", "--n", "100", "--reps", "1", "--estimators", "aipw-dr")[0] == 2

    def test_output_files(self, capsys, tmp_path):
        out = tmp_path / "sim.json"
        rc, stdout, _ = run(capsys, *self.ARGS, "--output", str(out))
        assert rc == 0 and "Estimator" in stdout
        assert json.loads(out.read_text())["config"]["replications"] == 2
        assert out.with_suffix(".txt").exists()


class TestOracle:

    def test_proportional_law(self, capsys):
        law = '{"family": "ph_exponential", "rate": 1.0, "log_ratio": -1.0}'
        rc, out, _ = run(capsys, "oracle", "--law", law, "--tau", "1", "--points", "11")
        payload = json.loads(out)
        assert rc == 0
        npt.assert_allclose(payload["beta_star"], -1.0, atol=1e-10)
        assert len(payload["lambda_star"]) == 11
        validate(payload, "oracle")

    def test_law_file_and_csv(self, capsys, tmp_path):
        law = tmp_path / "law.json"
        law.write_text('{"family": "lognormal", "mu": [0.0, -0.5], "sigma": 1.0}')
        table = tmp_path / "curves.csv"
        rc, _, _ = run(capsys, "oracle", "--law", str(law), "--tau", "1", "--points", "5",
                       "--csv", str(table))
        assert rc == 0
        assert table.read_text().splitlines()[0] == "t,beta_t,lambda_star,omega"

    @pytest.mark.parametrize("law", ['{"family": "ph_exponential", "rate": -1.0, "log_ratio": 0}',
                                     '{"family": ',
                                     '{"family": "nonsense"}'])
    def test_invalid_law(self, capsys, law):
        assert run(capsys, "oracle", "--law", law, "--tau", "1")[0] == 2


class TestGenerate:

    def test_round_trip(self, capsys, tmp_path):
        path = tmp_path / "g.csv"
        assert run(capsys, "generate", "--family", "supplementary", "--scenario", "3", "--n", "80",
                   "--seed", "4", "-o", str(path))[0] == 0
        assert load_dataset(path, tau=1.0).equals(generate_supp(80, 3, seed=4).observed)
