import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdelab import cli
from sdelab.artifacts import emit_svg, read_csv, write_csv
from sdelab.cli import TASKS, ConfigError, main, parse_config
from sdelab.samplers import PcConfig
from sdelab.sde import build_sde, kernel_match_report, variance_trajectory

SVG_NS = "{http://www.w3.org/2000/svg}"

# small configs that exercise every task in well under a second each
SMALL = {
    "sample": ["sampler.N=20", "sampler.n=300"],
    "train": ["data.name=gmm_2d", "train.iterations=40", "train.log_every=10", "train.hidden=16"],
    "likelihood": ["likelihood.n=5", "ode.rtol=1e-3", "ode.atol=1e-3"],
    "encode": ["data.name=gmm_2d", "encode.n=6", "ode.rtol=1e-3", "ode.atol=1e-3"],
    "decode": ["decode.n=50", "ode.rtol=1e-3", "ode.atol=1e-3"],
    "impute": ["data.name=correlated_gaussian", "sde.kind=VE", "sampler.N=20", "sampler.M=2", "sampler.n=200"],
    "condition": ["data.name=separated_2d", "sde.kind=VE", "sampler.N=30", "sampler.n=200", "condition.label=1"],
    "kernel-check": ["kernel.N=50"],
    "variance-check": [],
    "sampler-bench": ["sde.kind=VE", "bench.N=10", "sampler.n=300"],
    "identifiability": [
        "data.name=gmm_2d",
        "train.iterations=30",
        "train.hidden=8",
        "ident.hidden_b=16",
        "ident.n=6",
        "ode.rtol=1e-3",
        "ode.atol=1e-3",
    ],
}


def run_task(task, out, *extra, seed=None):
    argv = [f"task={task}", *SMALL[task], *extra, "--out", str(out)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    return main(argv)


def read_dir(path):
    return {name: (path / name).read_bytes() for name in sorted(os.listdir(path))}


# -- config parsing ----------------------------------------------------------------


def test_minimal_config_defaults():
    cfg = parse_config(assignments=["task=sample", "sde.kind=VP"])
    sde = cfg.sde()
    assert (sde.beta_min, sde.beta_max) == (0.1, 20.0)
    assert sde.eps_sample == 1e-3
    assert cfg["sampler.snr"] == 0.01
    assert cfg.pc_config().resolved(sde).snr == 0.01
    assert parse_config(assignments=["task=sample", "sde.kind=VE"])["sampler.snr"] == 0.16


def test_unknown_key_names_field(capsys):
    with pytest.raises(ConfigError) as err:
        parse_config(assignments=["task=sample", "sde.gamma=1"])
    assert err.value.field == "sde.gamma"
    assert main(["task=sample", "sde.gamma=1"]) == 2
    lines = capsys.readouterr().err.strip().split("\n")
    assert len(lines) == 1 and "field=sde.gamma" in lines[0] and lines[0].startswith("sdelab: error")


@pytest.mark.parametrize(
    "assignment, field",
    [
        ("sampler.N=0", "sampler.N"),
        ("sampler.snr=-1", "sampler.snr"),
        ("sde.sigma_max=abc", "sde.sigma_max"),
        ("sde.kind=XY", "sde.kind"),
        ("sde.t_max=-1", "sde.t_max"),
        ("sde.beta_min=30", "sde.beta_max"),
        ("data.name=mnist", "data.name"),
        ("ode.rtol=0", "ode.rtol"),
        ("sampler.predictor=ANCESTRAL", "sampler.predictor"),
    ],
)
def test_range_violations_name_the_field(assignment, field):
    base = ["task=sample", "sde.kind=SubVP"] if "ANCESTRAL" in assignment else ["task=sample"]
    with pytest.raises(ConfigError) as err:
        parse_config(assignments=base + [assignment, "task=likelihood" if "ode" in assignment else "task=sample"])
    assert err.value.field == field


def test_task_is_required_and_unique():
    with pytest.raises(ConfigError, match="task"):
        parse_config(assignments=["sde.kind=VP"])
    with pytest.raises(ConfigError) as err:
        parse_config(assignments=["task=sample,train"])
    assert err.value.field == "task"


def test_task_specific_validation(tmp_path):
    with pytest.raises(ConfigError) as err:
        parse_config(assignments=["task=sample", "score.source=checkpoint", f"score.path={tmp_path / 'nope.json'}"])
    assert err.value.field == "score.path"
    with pytest.raises(ConfigError) as err:
        parse_config(assignments=["task=impute", "data.name=correlated_gaussian", "impute.indices=0,1", "impute.values=1,2"])
    assert err.value.field == "impute.indices"
    with pytest.raises(ConfigError) as err:
        parse_config(assignments=["task=condition", "data.name=separated_2d", "condition.label=2"])
    assert err.value.field == "condition.label"
    with pytest.raises(ConfigError) as err:
        parse_config(assignments=["task=variance-check", "sde.kind=VE"])
    assert err.value.field == "sde.kind"
    with pytest.raises(ConfigError) as err:
        parse_config(assignments=["task=sample", "data.name=custom", "data.weights=0.5,0.5"])
    assert err.value.field == "data.means"


def test_custom_mixture_from_config():
    cfg = parse_config(
        assignments=["task=sample", "data.name=custom", "data.weights=0.25,0.75", "data.means=-1,0;2,1", "data.variances=0.5;0.1,0.2"]
    )
    g = cfg.data()
    np.testing.assert_array_equal(g.weights, [0.25, 0.75])
    np.testing.assert_array_equal(g.means, [[-1, 0], [2, 1]])
    np.testing.assert_array_equal(g.variances, [[0.5, 0.5], [0.1, 0.2]])


def test_config_file_and_override_order(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\ntask=sample\n\nsampler.N=50\nsde.kind=VE\n")
    cfg = parse_config(str(path), ["sampler.N=70"], seed=9, out="x")
    assert cfg["sampler.N"] == 70 and cfg["sde.kind"] == "VE" and cfg.seed == 9 and cfg["out"] == "x"
    with pytest.raises(ConfigError) as err:
        parse_config(str(tmp_path / "missing.cfg"))
    assert err.value.field == "config"
    path.write_text("task=sample\njunk line\n")
    with pytest.raises(ConfigError):
        parse_config(str(path))


def test_print_config_round_trip(tmp_path, capsys):
    assert main(["task=impute", "data.name=correlated_gaussian", "sampler.snr=0.3", "--print-config"]) == 0
    text = capsys.readouterr().out
    path = tmp_path / "echo.cfg"
    path.write_text(text)
    again = parse_config(str(path))
    assert again == parse_config(assignments=["task=impute", "data.name=correlated_gaussian", "sampler.snr=0.3"])
    assert again.to_text() == text


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(["VE", "VP", "SubVP"]),
    st.floats(1e-3, 10.0),
    st.integers(1, 5000),
    st.sampled_from(TASKS),
    st.lists(st.integers(1, 300), min_size=0, max_size=3),
)
def test_round_trip_property(kind, snr, N, task, hidden):
    if kind == "VE" and task == "variance-check":
        kind = "VP"
    cfg = parse_config(
        assignments=[f"task={task}", "data.name=gmm_2d", f"sde.kind={kind}", f"sampler.snr={snr!r}", f"sampler.N={N}", "train.hidden=" + ",".join(map(str, hidden))]
    )
    text = cfg.to_text()
    assert parse_config(assignments=text.splitlines()) == cfg


def test_config_hash_ignores_output_dir():
    a = parse_config(assignments=["task=sample"], out="a")
    b = parse_config(assignments=["task=sample"], out="b")
    c = parse_config(assignments=["task=sample"], seed=1)
    assert a.hash() == b.hash() != c.hash()


def test_help_lists_every_task(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for task, blocks in cli.REQUIRED_BLOCKS.items():
        assert any(line.split()[:1] == [task] and ", ".join(blocks) in line for line in text.splitlines())
    assert set(cli.REQUIRED_BLOCKS) == set(TASKS) == set(cli.TASK_FUNCTIONS)


# -- tasks ---------------------------------------------------------------------------


def test_kernel_check_artifacts(tmp_path):
    assert run_task("kernel-check", tmp_path, "sde.kind=VP") == 0
    header, rows = read_csv(tmp_path / "kernel.csv")
    assert header == ["t", "discrete_std", "continuous_std", "discrete_mean_coeff", "continuous_mean_coeff"]
    rep = kernel_match_report(build_sde("VP"), 50)
    np.testing.assert_array_equal(rows, np.array(rep.rows()))
    summary = json.loads((tmp_path / "metrics.json").read_text())
    assert summary["max_rel_std"] == rep.max_rel_std
    assert summary["max_rel_mean_coeff"] == rep.max_rel_mean_coeff
    assert 0.25 < summary["ratio_at_2N"]["max_rel_std"] < 0.75


def test_variance_check_artifacts(tmp_path):
    assert run_task("variance-check", tmp_path) == 0
    header, rows = read_csv(tmp_path / "variance.csv")
    assert header == ["t", "var_VP", "var_subVP"] and rows.shape == (101, 3)
    np.testing.assert_array_equal(rows[:, 1], variance_trajectory(build_sde("VP"), 1.0, rows[:, 0]))
    assert np.all(rows[:, 2] <= rows[:, 1] + 1e-12)
    assert np.max(np.abs(rows[:, 1] - 1)) <= 1e-12
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["subvp_le_vp"] is True


def test_sample_task_outputs(tmp_path):
    assert run_task("sample", tmp_path) == 0
    assert set(os.listdir(tmp_path)) == {"samples.csv", "metrics.json", "report.svg"}
    header, x = read_csv(tmp_path / "samples.csv")
    assert header == ["x_0"] and x.shape == (300, 1)
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    cfg = parse_config(assignments=["task=sample", *SMALL["sample"]])
    assert metrics["seed"] == 0 and metrics["config_hash"] == cfg.hash()
    assert metrics["nfe_per_sample"] == PcConfig(N=20, M=1).score_evals_per_sample()
    first = (tmp_path / "samples.csv").read_text().split("\n")[0]
    assert first == f"# seed=0 config_hash={cfg.hash()}"
    ET.parse(tmp_path / "report.svg")


def test_impute_csv_echoes_known_columns(tmp_path):
    assert run_task("impute", tmp_path, "impute.values=1.25") == 0
    text = (tmp_path / "samples.csv").read_text()
    assert "# mask=1,0" in text
    header, x = read_csv(tmp_path / "samples.csv")
    assert header == ["x_0", "x_1"]
    assert np.all(x[:, 0] == 1.25) and np.unique(x[:, 1]).size == x.shape[0]


def test_train_then_sample_from_checkpoint(tmp_path):
    assert run_task("train", tmp_path / "t") == 0
    ckpt = tmp_path / "t" / "checkpoint.json"
    assert json.loads(ckpt.read_text())["config_hash"]
    argv = ["data.name=gmm_2d", "score.source=checkpoint", f"score.path={ckpt}"]
    assert main(["task=sample", "sampler.N=10", "sampler.n=20", *argv, "--out", str(tmp_path / "s")]) == 0
    # a VE config cannot use a VP-trained net
    assert main(["task=sample", "sde.kind=VE", *argv, "--out", str(tmp_path / "e")]) == 2


def test_runtime_failure_is_one_line(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code = main(["task=sample", "score.source=checkpoint", f"score.path={bad}", "--out", str(tmp_path / "o")])
    assert code == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "kind=JSONDecodeError" in err and "field=sample" in err


@pytest.mark.parametrize("task", TASKS)
def test_every_task_is_byte_reproducible(task, tmp_path):
    assert run_task(task, tmp_path / "a") == 0
    assert run_task(task, tmp_path / "b") == 0
    a, b = read_dir(tmp_path / "a"), read_dir(tmp_path / "b")
    assert a and a == b
    for name, data in a.items():
        text = data.decode()
        assert "\r" not in text
        if name.endswith(".json"):
            d = json.loads(text)
            assert d["seed"] == 0 and len(d["config_hash"]) == 16
        elif name.endswith(".csv"):
            assert text.startswith("# seed=0 config_hash=")
        else:
            assert "seed=0 config_hash=" in text


@pytest.mark.parametrize("task", ["sample", "impute"])
def test_outputs_independent_of_thread_count(task, tmp_path, monkeypatch):
    extra = ["sampler.n=20000"]
    monkeypatch.setenv("SDELAB_THREADS", "1")
    assert run_task(task, tmp_path / "one", *extra) == 0
    monkeypatch.setenv("SDELAB_THREADS", "3")
    assert run_task(task, tmp_path / "three", *extra) == 0
    assert read_dir(tmp_path / "one") == read_dir(tmp_path / "three")


def test_seed_changes_samples(tmp_path):
    run_task("sample", tmp_path / "a", seed=1)
    run_task("sample", tmp_path / "b", seed=2)
    assert (tmp_path / "a" / "samples.csv").read_bytes() != (tmp_path / "b" / "samples.csv").read_bytes()


# -- artifact writers ------------------------------------------------------------------


def test_csv_full_precision_round_trip(tmp_path):
    vals = np.random.default_rng(0).normal(size=(50, 3)) * 10.0 ** np.arange(-8, 7, 5)
    write_csv(tmp_path / "v.csv", ["a", "b", "c"], vals, 3, "abc")
    header, back = read_csv(tmp_path / "v.csv")
    assert header == ["a", "b", "c"]
    np.testing.assert_array_equal(back, vals)
    raw = (tmp_path / "v.csv").read_bytes()
    assert raw.endswith(b"\n") and b"\r" not in raw


def svg_root(path):
    return ET.parse(path).getroot()


def test_svg_empty_series_has_axes_only(tmp_path):
    emit_svg(tmp_path / "e.svg", title="empty")
    root = svg_root(tmp_path / "e.svg")
    assert root.tag == SVG_NS + "svg"
    assert not root.findall(f".//{SVG_NS}polyline") and not root.findall(f".//{SVG_NS}circle")
    assert len(root.findall(f".//{SVG_NS}line")) >= 2


def test_svg_two_point_line(tmp_path):
    emit_svg(tmp_path / "l.svg", series=[("line", [0, 1], [0, 2])])
    assert len(svg_root(tmp_path / "l.svg").findall(f".//{SVG_NS}polyline")) == 1


def test_svg_large_scatter_is_well_formed(tmp_path):
    pts = np.random.default_rng(1).normal(size=(10_000, 2))
    emit_svg(tmp_path / "s.svg", scatter=pts, title="a < b & c")
    root = svg_root(tmp_path / "s.svg")
    assert len(root.findall(f".//{SVG_NS}circle")) == 10_000
    emit_svg(tmp_path / "s2.svg", scatter=pts, title="a < b & c")
    assert (tmp_path / "s.svg").read_bytes() == (tmp_path / "s2.svg").read_bytes()


def test_svg_errors(tmp_path):
    with pytest.raises(ValueError):
        emit_svg(tmp_path / "n.svg", series=[("bad", [0, 1], [0, np.nan])])
    with pytest.raises(ValueError):
        emit_svg(tmp_path / "n.svg", series=[("bad", [0, 1], [0])])
    with pytest.raises(OSError):
        emit_svg(tmp_path / "missing" / "dir" / "x.svg", series=[("a", [0, 1], [0, 1])])
