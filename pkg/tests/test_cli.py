import pytest

from shredkit.cli import build_parser, run
from shredkit.config import ConfigError, load_config

# a few-second experiment: tiny grid, short horizon, two members per strategy
TINY = [
    "surrogate.nx=16", "surrogate.ny=32", "surrogate.n_steps=40", "surrogate.substeps=2",
    "sensing.lag=5", "train.max_epochs=2", "train.patience=2", "train.batch_size=32",
    "ensemble.L=2", "ensemble.sweep_L=2", "report.contour_steps=0",
]


def tiny_args(cmd, root):
    args = [cmd, "--config", "ci", "--workspace", str(root)]
    for item in TINY:
        args += ["--set", item]
    return args


def test_subcommands_listed():
    parser = build_parser()
    for cmd in ("generate", "compress", "train", "reconstruct", "evaluate", "sweep", "all"):
        assert parser.parse_args([cmd]).command == cmd
    with pytest.raises(SystemExit):
        parser.parse_args(["simulate"])


def test_config_error_reports_line(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[surrogate]\nnx = 32\nny = many\n")
    assert run(["generate", "--config", str(cfg), "--workspace", str(tmp_path)]) == 2
    assert "line 3" in capsys.readouterr().err
    cfg.write_text("[surrogate]\nnx = 32\n\n[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError, match="line 4"):
        load_config(cfg)
    with pytest.raises(ConfigError, match="line 2"):
        load_config_text(tmp_path, "[train]\nlearning_rate = 1\n")


def load_config_text(tmp_path, text):
    p = tmp_path / "c.ini"
    p.write_text(text)
    return load_config(p)


def test_bad_override_and_values(tmp_path):
    with pytest.raises(ConfigError):
        load_config(None, ["nosection"])
    with pytest.raises(ConfigError):
        load_config(None, ["sensing.probe_input=acceleration"])
    assert load_config("ci", ["train.lr=0.01"], seed=5)["run"]["seed"] == 5


def test_evaluate_without_train_names_train(tmp_path, capsys):
    assert run(tiny_args("evaluate", tmp_path)) == 3
    assert "`generate`" in capsys.readouterr().err
    assert run(tiny_args("generate", tmp_path)) == 0
    assert run(tiny_args("compress", tmp_path)) == 0
    assert run(tiny_args("evaluate", tmp_path)) == 3
    assert "`train`" in capsys.readouterr().err


def test_all_is_reproducible_and_append_only(tmp_path, capsys):
    assert run(tiny_args("all", tmp_path / "a")) == 0
    first = sorted(p for p in (tmp_path / "a").rglob("*.csv"))
    names = {p.name for p in first}
    assert {"table2_field_errors.csv", "summary.csv"} <= names
    assert run(tiny_args("all", tmp_path / "b")) == 0
    second = sorted(p for p in (tmp_path / "b").rglob("*.csv"))
    assert [p.relative_to(tmp_path / "b") for p in second] == \
        [p.relative_to(tmp_path / "a") for p in first]
    for pa, pb in zip(first, second):
        assert pa.read_bytes() == pb.read_bytes(), pa.name
    # a changed setting goes to a fresh experiment directory
    before = {p.name for p in (tmp_path / "a").iterdir()}
    assert run(tiny_args("generate", tmp_path / "a") + ["--seed", "9"]) == 0
    after = {p.name for p in (tmp_path / "a").iterdir()}
    assert before < after
    for p in (tmp_path / "a").rglob("provenance.txt"):
        assert p.read_text().startswith("config_hash=")
