import csv
from dataclasses import replace
from pathlib import Path

import pytest

from hallucdet import cli, pipeline
from hallucdet.numerics import SgdConfig
from hallucdet.synthworld import WorldConfig, load_world

FAST_TEXT = """
[world]
feature_dim = 12
base_classes = 6
novel_classes = 2
num_modes = 3

[train]
m = 4
examples_per_class = 8
finetune.total_iterations = 60
finetune.decay_milestones = 40
halluc_ft_sgd.total_iterations = 60
halluc_ft_sgd.decay_milestones = 40
halluc_sgd.total_iterations = 30
rpn_sgd.total_iterations = 200
rpn_sgd.decay_milestones = 150
base_instances_per_class = 30
pools.test_per_class = 20
pools.test_background = 100
pools.train_background = 300

[run]
seeds = 0-1
"""


@pytest.fixture
def fast_config(tmp_path):
    path = tmp_path / "fast.ini"
    path.write_text(FAST_TEXT)
    return path


def read_rows(path: Path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_parse_seed_list():
    assert cli.parse_seed_list("0-3") == (0, 1, 2, 3)
    assert cli.parse_seed_list("1,4,9") == (1, 4, 9)
    assert cli.parse_seed_list("0-1, 5") == (0, 1, 5)
    for bad in ("", "a", "1,1", "0-2,2"):
        with pytest.raises(cli.ConfigError):
            cli.parse_seed_list(bad)


def test_load_config_nested_keys():
    exp = cli.load_config(FAST_TEXT)
    assert exp.world.feature_dim == 12
    assert exp.train.finetune == SgdConfig(0.1, 60, (40,), 0.1)
    assert exp.train.pools.test_per_class == 20
    assert exp.seeds == (0, 1)


@pytest.mark.parametrize("text", [
    "[world]\nfeature_dims = 3\n",
    "[train]\nfinetune.rate = 0.1\n",
    "[bogus]\nx = 1\n",
    "[run]\nseed = 1\n",
    "[train]\nm = many\n",
    "[train]\nfinetune.decay_milestones = 50,20\n",
    "[world]\nfeature_dim = 3\nfeature_dim = 4\n",
])
def test_load_config_rejects(text):
    with pytest.raises(cli.ConfigError):
        cli.load_config(text)


def test_dump_load_round_trip():
    exp = cli.load_config(FAST_TEXT)
    exp.train = replace(exp.train, variant=pipeline.AGGRESSIVE, alpha=12.5,
                        rpn_weights=replace(exp.train.rpn_weights, div=0.25))
    back = cli.load_config(cli.dump_config(exp, {"command": "x"}))
    assert back == exp


def test_manifest_reproduces_config(tmp_path):
    exp = cli.load_config(FAST_TEXT)
    path = cli.write_manifest(tmp_path, exp, "train")
    text = path.read_text()
    assert "[manifest]" in text and "code_version" in text
    assert cli.load_config(text) == exp


def test_gen_world_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert cli.main(["gen-world", "--seed-list", "7", "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "world_seed7.kv").read_bytes()
    assert a == (tmp_path / "b" / "world_seed7.kv").read_bytes()
    world = load_world(tmp_path / "a" / "world_seed7.kv")
    assert world.orthonormality_error() < 1e-9
    assert "ok" in capsys.readouterr().out


def test_gen_world_rejects_more_modes_than_dims(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[world]\nfeature_dim = 4\nnum_modes = 6\n")
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen-world", "--config", str(cfg), "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "num_modes" in capsys.readouterr().err


def test_train_writes_one_row_per_seed_plus_aggregate(tmp_path, fast_config):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(fast_config), "--out", str(out)]) == 0
    rows = read_rows(out / "results.csv")
    assert rows[0][:len(cli.FIXED_COLUMNS)] == list(cli.FIXED_COLUMNS)
    assert [r[0] for r in rows[1:]] == ["0", "1", cli.AGGREGATE]
    assert (out / "manifest.ini").exists()


def test_train_is_bit_identical_and_manifest_replays(tmp_path, fast_config):
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["train", "--config", str(fast_config), "--m", "0", "--out", str(a)])
    cli.main(["train", "--config", str(a / "manifest.ini"), "--out", str(b)])
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    assert read_rows(a / "results.csv")[1][4] == pipeline.NONE


def test_train_needs_two_seeds(tmp_path, fast_config):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--config", str(fast_config), "--seed-list", "3", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_ablation_cell_counts():
    base = pipeline.TrainConfig()
    assert [n for n, _ in cli.ablation_cells("em_vs_joint", base)] == ["joint", "em1", "em2"]
    assert [c.m for _, c in cli.ablation_cells("num_halluc", base)] == [0, 1, 2, 3, 5, 10, 20]
    assert len(cli.ablation_cells("head_kind", base)) == 4
    assert [c.variant for _, c in cli.ablation_cells("variant", base)][1:] == [pipeline.CONSERVATIVE,
                                                                               pipeline.AGGRESSIVE]
    shots = cli.ablation_cells("shots", base)
    assert len(shots) == 2 * len(cli.SHOT_GRID)
    assert sorted({c.shot for _, c in shots}) == list(cli.SHOT_GRID)
    assert len(cli.ablation_cells("shots", base, (1, 10))) == 4
    with pytest.raises(cli.ConfigError):
        cli.ablation_cells("nonsense", base)


def test_ablate_and_report(tmp_path, fast_config, capsys):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "em_vs_joint", "--config", str(fast_config), "--out", str(out)]) == 0
    names = sorted(p.name for p in (out / "em_vs_joint").glob("*.csv"))
    assert names == ["em1.csv", "em2.csv", "joint.csv", "sweep.csv"]
    capsys.readouterr()
    cells = [str(out / "em_vs_joint" / n) for n in ("joint.csv", "em1.csv", "em2.csv")]
    assert cli.main(["report", *cells, "--out", str(tmp_path / "rep")]) == 0
    text = capsys.readouterr().out
    assert "EM-2 >= joint" in text and "EM-2 >= EM-1" in text
    assert (tmp_path / "rep" / "summary.md").read_text() == text
    assert len(read_rows(tmp_path / "rep" / "plot.csv")) == 4


def write_cell(path, rows, header=None):
    header = header or list(cli.FIXED_COLUMNS) + ["ap_6", "procedure"]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows([header, *rows])
    return path


def row(seed, ap="0.5"):
    return [seed, 1, "corpns", "cosine", "conservative", 20, 2, ap, 10, 3, ap, "em"]


def test_report_reads_valid_cell(tmp_path):
    path = write_cell(tmp_path / "c.csv", [row(0), row(1, "0.7"), row(cli.AGGREGATE, "0.6")])
    cell = cli.read_cell_csv(path)
    assert list(cell.aps) == [0.5, 0.7] and cell.labels["m"] == "20"


@pytest.mark.parametrize("rows, message", [
    ([row(0), row(1)], "missing AGGREGATE"),
    ([row(0), row(1)[:-1], row(cli.AGGREGATE)], "row 3 has 11 fields"),
    ([row(0), row(1, "abc"), row(cli.AGGREGATE)], "row 3"),
    ([row(0), row(cli.AGGREGATE)], "at least two"),
])
def test_report_rejects_malformed_cells(tmp_path, capsys, rows, message):
    path = write_cell(tmp_path / "c.csv", rows)
    with pytest.raises(cli.ReportError, match=message):
        cli.read_cell_csv(path)
    assert cli.main(["report", str(path)]) == 1
    assert message.split()[0] in capsys.readouterr().err


def test_report_rejects_bad_header(tmp_path):
    path = write_cell(tmp_path / "c.csv", [row(0)], header=["seed", "ap"])
    with pytest.raises(cli.ReportError, match="header"):
        cli.read_cell_csv(path)


def test_report_missing_file_exits_one(tmp_path):
    assert cli.main(["report", str(tmp_path / "none.csv")]) == 1


def test_directional_checks_flag_gain_and_fp():
    def cell(m, aps, fp):
        import numpy as np
        labels = {"shot": "1", "proposal_mode": "corpns", "head_kind": "cosine",
                  "variant": "conservative" if m else "none", "m": str(m), "em_iters": "2", "procedure": "em"}
        return cli.CellSummary("x", labels, np.array(aps), np.ones(len(aps)), np.full(len(aps), fp))
    checks = cli.directional_checks([cell(0, [0.5, 0.5], 10.0), cell(20, [0.53, 0.53], 8.0)])
    assert [ok for _, ok in checks] == [True, True]
    checks = cli.directional_checks([cell(0, [0.5, 0.5], 10.0), cell(20, [0.51, 0.51], 12.0)])
    assert [ok for _, ok in checks] == [False, False]


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("HALLUC_THREADS", "3")
    assert cli.worker_count() == 3
    monkeypatch.setenv("HALLUC_THREADS", "zero")
    with pytest.raises(cli.ConfigError):
        cli.worker_count()


def test_world_config_default_is_valid():
    WorldConfig().validate()
