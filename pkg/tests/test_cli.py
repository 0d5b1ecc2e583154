import json
import os
import re
from dataclasses import replace
from fractions import Fraction as F

import pytest

from widthlab import cli, reftable
from widthlab.cli import ConfigError, RunConfig, main, parse_config, serialize_config
from widthlab.constraints import AlignmentAssumption
from widthlab.optim import EpsilonMode, EpsilonPolicy, OptimizerConfig, OptimizerFamily
from widthlab.params import LayerTriple, Parameterization

HEADER = "[widthlab]\nschema = widthlab-run\nversion = 1\n"


def write(tmp_path, body, name="run.ini"):
    path = tmp_path / name
    path.write_text(HEADER + body)
    return str(path)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# -- config ----------------------------------------------------------------------

def test_default_round_trip():
    cfg = RunConfig()
    assert parse_config(serialize_config(cfg)) == cfg


def test_round_trip_explicit_everything():
    p = Parameterization(LayerTriple(F(0), F(0), F(1, 3)), LayerTriple(F(1, 4), F(1, 4), F(1)),
                         LayerTriple(F(1, 2), F(1, 2), F(-1, 2)), name=None)
    al = AlignmentAssumption(alpha_hidden=F(3, 4), alpha_readout=F(1), omega_hidden=F(1, 2),
                             omega_readout=F(2, 3), u_hidden=F(1, 2), u_readout=F(1))
    cfg = replace(RunConfig(), parameterization=p, preset_name=None, c_mode="explicit",
                  optimizer=OptimizerConfig(kind=OptimizerFamily.ADAM_PS, beta1=0.8, update_clip_rms=1.0,
                                            epsilon_policy=EpsilonPolicy(EpsilonMode.CONSTANT, 1e-12, 64)),
                  alignment=al, alignment_name=None, output_dir="elsewhere")
    cfg = replace(cfg, schedule=replace(cfg.schedule, c=p.c, gamma=(1.0, 0.5, 2.0), base_lr=0.003))
    text = serialize_config(cfg)
    back = parse_config(text)
    assert back == cfg
    assert serialize_config(back) == text


def test_parse_minimal_and_powers_of_two():
    cfg = parse_config(HEADER + "[parameterization]\npreset = MuP\n[schedule]\nbase_lr = 2^-5  # comment\n")
    assert cfg.preset_name == "mup" and cfg.schedule.base_lr == 2.0**-5


@pytest.mark.parametrize("body,line,needle", [
    ("[parameterization]\npreset = bogus\n", 5, "unknown preset"),
    ("[model]\nd = 8\nwidths = 4, 16, 32\n", 6, "widths"),
    ("[optimizer]\nkind = adam\nbeta9 = 0.1\n", 6, "beta9"),
    ("[schedule]\nbase_lr = fast\n", 5, "base_lr"),
    ("[alignment]\nalpha_hidden = 1\n", 4, "all six"),
    ("[mystery]\nx = 1\n", 4, "unknown section"),
    ("[parameterization]\nhidden = 1/2, 0\n", 5, "hidden"),
    ("[model]\nsteps = 5\nfit_steps = 0, 9\n", 6, "fit_steps"),
])
def test_config_errors_are_line_anchored(body, line, needle):
    with pytest.raises(ConfigError) as e:
        parse_config(HEADER + body)
    assert e.value.line == line
    assert needle in str(e.value) and f"line {line}" in str(e.value)


def test_schema_is_required():
    with pytest.raises(ConfigError, match="schema"):
        parse_config("[widthlab]\nversion = 1\n")
    with pytest.raises(ConfigError, match="version"):
        parse_config("[widthlab]\nschema = widthlab-run\nversion = 2\n")
    with pytest.raises(ConfigError):
        parse_config("preset = standard\n")


# -- solve / table ---------------------------------------------------------------

def test_solve_standard_adam_full(tmp_path, capsys):
    cfg = write(tmp_path, "[parameterization]\npreset = standard\n[optimizer]\nkind = adam\n"
                          "[alignment]\npreset = full\n")
    code, out, _ = run(capsys, "solve", "--config", cfg, "--out", tmp_path / "o")
    assert code == 0
    assert "hidden: c=1 (lr ~ 1/n)" in out
    assert "regime: feature_learning" in out
    doc = json.loads((tmp_path / "o" / "solve.json").read_text())
    assert doc["c"] == {"embedding": "0", "hidden": "1", "readout": "1"}


def test_solve_unstable_triple_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, "[parameterization]\nembedding = 0, 0, 0\nhidden = 0, 0, 0\nreadout = 0, 1/2, 0\n")
    code, _, err = run(capsys, "solve", "--config", cfg)
    assert code == 2
    assert "hidden" in err and "1/2" in err


def test_solve_bad_config_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "solve", "--config", write(tmp_path, "[model]\nd = x\n"))
    assert code == 2 and "line 5" in err


def test_solve_matrix_matches_reference(capsys):
    code, out, _ = run(capsys, "solve", "--matrix")
    assert code == 0
    rows = [r.split() for r in out.strip().splitlines()[1:]]
    assert len(rows) == 24
    # golden rows: init var, multiplier, gradient, then LR columns grouped by alignment
    col = {("sgd", "full"): 3, ("adam", "full"): 4, ("adafactor", "full"): 5,
           ("sgd", "no"): 6, ("adam", "no"): 7, ("adafactor", "no"): 8}
    for name, opt, align, *lrs, regime in rows:
        want = [reftable.GOLDEN[(name, role)][col[(opt, align)]] for role in ("embedding", "hidden", "readout")]
        assert lrs == want, (name, opt, align)


def test_table_check_passes(capsys):
    code, out, _ = run(capsys, "table", "--check")
    assert code == 0 and "all cells match" in out


def test_table_structure(capsys):
    code, out, _ = run(capsys, "table")
    assert code == 0
    body = [line for line in out.splitlines() if re.match(r"^(standard|ntk|mup|mfp)\b", line)]
    assert len(body) == 12
    assert all(len(line.split()) == 2 + 9 for line in body)


def test_table_corrupted_golden(capsys):
    import copy

    golden = copy.deepcopy(reftable.GOLDEN)
    row = list(golden[("mup", "readout")])
    row[4] = "n"
    golden[("mup", "readout")] = tuple(row)
    code = cli.cmd_table(cli.build_parser().parse_args(["table", "--check"]), golden=golden)
    out = capsys.readouterr().out
    assert code == 3
    assert "1 cell(s) differ" in out and "mup/readout" in out


# -- equiv -----------------------------------------------------------------------

def test_equiv_standard_to_ntk_sgd(tmp_path, capsys):
    cfg = write(tmp_path, "[parameterization]\npreset = standard\n[optimizer]\nkind = sgd\n"
                          "[schedule]\nbase_lr = 0.003\n")
    code, out, _ = run(capsys, "equiv", "--config", cfg, "--theta", "hidden=1/2,readout=1/2", "--empirical")
    assert code == 0
    assert "reports identical: yes" in out
    dev = float(re.search(r"empirical max rel\. dev: (\S+)", out).group(1))
    assert dev <= 1e-6


def test_equiv_theta_zero_is_identity(tmp_path, capsys):
    code, out, _ = run(capsys, "equiv", "--theta", "hidden=0")
    assert code == 0 and "reports identical: yes" in out
    line = next(line for line in out.splitlines() if line.startswith("hidden:"))
    before, after = line.split(": ", 1)[1].split(" -> ")
    assert before == after


def test_equiv_adafactor_keeps_c(tmp_path, capsys):
    cfg = write(tmp_path, "[parameterization]\npreset = mup\n[optimizer]\nkind = adam_ps\n")
    code, out, _ = run(capsys, "equiv", "--config", cfg, "--theta", "embedding=1/4,hidden=-1/2,readout=1/3")
    assert code == 0 and "reports identical: yes" in out
    for role in ("embedding", "hidden", "readout"):
        line = next(line for line in out.splitlines() if line.startswith(role + ":"))
        before, after = line.split(": ", 1)[1].split(" -> ")
        assert before.strip("()").split(", ")[2] == after.strip("()").split(", ")[2]


def test_equiv_bad_theta(capsys):
    code, _, err = run(capsys, "equiv", "--theta", "hidden")
    assert code == 2


# -- empirical commands ----------------------------------------------------------

def test_coordcheck_standard(tmp_path, capsys):
    cfg = write(tmp_path, "[parameterization]\npreset = standard\n[model]\nd = 8\nwidths = 128, 256, 512, 1024, 2048\n")
    code, out, _ = run(capsys, "coordcheck", "--config", cfg, "--out", tmp_path / "o")
    assert code == 0
    line = next(line for line in out.splitlines() if line.startswith("readout") and "grad exponent" in line)
    assert re.search(r"predicted 0, measured -?0\.0\d\d within ±0\.1: PASS", line)
    assert (tmp_path / "o" / "coordcheck.json").exists()
    assert (tmp_path / "o" / "standard_adam_full_n128_s0.csv").exists()


def test_sweep_records_alignment(tmp_path, capsys):
    cfg = write(tmp_path, "[parameterization]\npreset = mup\n[model]\nd = 8\nwidths = 256, 512, 1024\n"
                          "seeds = 0, 1\nsteps = 2\nfit_steps = 0, 2\n")
    code, out, _ = run(capsys, "sweep", "--config", cfg, "--out", tmp_path / "o")
    assert code in (0, 3)
    doc = json.loads((tmp_path / "o" / "sweep.json").read_text())
    for layer in (2, 3):
        means = next(m["values"] for m in doc["means"]
                     if (m["quantity"], m["layer"], m["step"]) == ("alignment", layer, 0))
        assert 0.45 <= sum(means) / len(means) <= 0.55
    assert re.search(r"alignment layer 2 \(hidden\) step 0: n=256: 0\.\d+", out)


def test_lrsweep_single_width(tmp_path, capsys):
    cfg = write(tmp_path, "[model]\nd = 8\nsteps = 2\n")
    code, _, err = run(capsys, "lrsweep", "--config", cfg, "--widths", "64", "--out", tmp_path / "o")
    assert code != 0 and "3 widths" in err


def test_lrsweep_all_diverged_names_width(tmp_path, capsys):
    cfg = write(tmp_path, "[optimizer]\nkind = sgd\n[parameterization]\nc = global\n"
                          "[model]\nd = 8\nwidths = 16, 32, 64\nseeds = 0\nsteps = 20\n"
                          "lr_grid_min = 1e8\nlr_grid_max = 1e12\nlr_grid_ratio = 10\n")
    code, _, err = run(capsys, "lrsweep", "--config", cfg, "--out", tmp_path / "o")
    assert code == 3 and "16" in err


def test_lrsweep_writes_summary(tmp_path, capsys):
    cfg = write(tmp_path, "[model]\nd = 8\nwidths = 32, 64, 128\nseeds = 0\nsteps = 5\n"
                          "lr_grid_min = 2^-9\nlr_grid_max = 2^-5\n")
    code, out, _ = run(capsys, "lrsweep", "--config", cfg, "--out", tmp_path / "o")
    assert code == 0 and "optimal base lr exponent" in out
    doc = json.loads((tmp_path / "o" / "lrsweep.json").read_text())
    assert doc["config"]["preset"] == "standard" and "timestamp" in doc


def test_rerun_is_byte_identical(tmp_path, capsys):
    cfg = write(tmp_path, "[parameterization]\npreset = ntk\n[model]\nd = 8\nwidths = 32, 64, 128\n"
                          "seeds = 0, 1\nsteps = 3\nfit_steps = 0, 3\n")
    outs = []
    for k in range(2):
        d = tmp_path / f"o{k}"
        assert run(capsys, "sweep", "--config", cfg, "--out", d)[0] in (0, 3)
        outs.append(d)
    csvs = sorted(f for f in os.listdir(outs[0]) if f.endswith(".csv"))
    assert len(csvs) == 6
    for f in csvs:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    docs = [json.loads((d / "sweep.json").read_text()) for d in outs]
    for doc in docs:
        doc.pop("timestamp")
    assert docs[0] == docs[1]


def test_overrides(tmp_path, capsys):
    cfg = write(tmp_path, "[model]\nd = 8\nsteps = 0\n")
    code, _, _ = run(capsys, "coordcheck", "--config", cfg, "--widths", "32,64,128", "--seeds", "2",
                     "--out", tmp_path / "o")
    assert code in (0, 3)
    names = sorted(os.listdir(tmp_path / "o"))
    assert "standard_adam_full_n64_s1.csv" in names and "standard_adam_full_n64_s2.csv" not in names
    assert run(capsys, "coordcheck", "--config", cfg, "--widths", "64,32,128")[0] == 2


def test_missing_config_file_is_io_error(tmp_path, capsys):
    code, _, err = run(capsys, "solve", "--config", tmp_path / "nope.ini")
    assert code == 1 and "io error" in err


def test_unwritable_output_is_io_error(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "solve", "--out", blocker / "sub")
    assert code == 1
