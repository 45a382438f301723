import json

import numpy as np
import pytest

from dmtl import cli
from dmtl.retrieval import RetrievalIndex

TINY_INI = """\
[run]
seed = 3
num_seeds = 2
[gen]
num_users = 60
num_items = 200
impressions_per_user = 40
test_impressions_per_user = 20
user_clusters = 4
item_clusters = 8
num_publishers = 10
[model]
embedding_dim = 4
expert_sizes = 8
head_sizes = 4
tower_sizes = 8
[train]
epochs = 1
[eval]
k = 10
num_cells = 8
nprobe = 2
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return p


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_gen_data_twice_is_byte_identical(tmp_path, tiny):
    assert cli.main(["gen-data", "--config", str(tiny), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["gen-data", "--config", str(tiny), "--out", str(tmp_path / "b")]) == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a == b
    assert {"train.jsonl", "test.jsonl", "train_truth.jsonl", "world.bin", "config.ini"} <= set(a)


def test_seed_flag_changes_data(tmp_path, tiny):
    cli.main(["gen-data", "--config", str(tiny), "--out", str(tmp_path / "a")])
    cli.main(["gen-data", "--config", str(tiny), "--seed", "4", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a/train.jsonl").read_bytes() != (tmp_path / "b/train.jsonl").read_bytes()
    assert "seed = 4" in (tmp_path / "b/config.ini").read_text()


def test_resolved_config_reproduces(tmp_path, tiny):
    cli.main(["gen-data", "--config", str(tiny), "--out", str(tmp_path / "a")])
    resolved = tmp_path / "a/config.ini"
    cli.main(["gen-data", "--config", str(resolved), "--out", str(tmp_path / "b")])
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_query_five_items(tmp_path, capsys):
    rng = np.random.default_rng(0)
    RetrievalIndex(np.arange(5), rng.normal(size=(5, 3))).save(tmp_path / "i.bin")
    code = cli.main(["query", "--index", str(tmp_path / "i.bin"), "--vector", "1,0,0", "--k", "5"])
    lines = capsys.readouterr().out.strip().splitlines()
    assert code == 0 and len(lines) == 5
    assert sorted(int(l.split("\t")[1]) for l in lines) == [0, 1, 2, 3, 4]


def test_full_workflow(tmp_path, tiny, capsys):
    d, m, e, ix = (str(tmp_path / n) for n in ("d", "m", "e", "ix"))
    base = ["--config", str(tiny)]
    assert cli.main(["gen-data", *base, "--out", d]) == 0
    assert cli.main(["train", *base, "--data", d, "--out", m, "--models", "dmtl,click"]) == 0
    assert sorted(p.name for p in (tmp_path / "m").glob("*.bin")) == ["click.bin", "dmtl.bin", "teacher.bin"]
    assert cli.main(["evaluate", *base, "--data", d, "--models", m, "--out", e]) == 0
    report = json.loads((tmp_path / "e/report.json").read_text())
    assert set(report["auc"]) >= {"dmtl", "click", "teacher", "oracle"}
    assert cli.main(["build-index", *base, "--data", d, "--checkpoint", m + "/dmtl.bin", "--out", ix]) == 0
    capsys.readouterr()
    assert cli.main(["query", "--index", ix + "/index.bin", "--checkpoint", m + "/dmtl.bin",
                     "--user-id", "2", "--data", d, "--k", "4", "--nprobe", "8"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 4


def test_bench_runs_and_reports(tmp_path, tiny):
    code = cli.main(["bench", "--config", str(tiny), "--out", str(tmp_path / "b")])
    assert code in (0, 3)
    summary = json.loads((tmp_path / "b/summary.json").read_text())
    assert summary["seeds"] == [3, 4]
    assert set(summary["checks"]) == {"auc_ordering", "serving", "recall"}
    assert (tmp_path / "b/seed_4/eval/report.txt").exists()


def test_env_var_sets_output_root(tmp_path, tiny, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "root"))
    assert cli.main(["gen-data", "--config", str(tiny)]) == 0
    assert (tmp_path / "root/data_seed3/train.jsonl").exists()


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == cli.EXIT_USAGE


def test_unknown_model_is_usage_error(tmp_path, tiny):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--config", str(tiny), "--data", str(tmp_path), "--models", "ranker"])
    assert exc.value.code == cli.EXIT_USAGE


def test_missing_input_removes_partial_output(tmp_path):
    out = tmp_path / "m"
    assert cli.main(["train", "--data", str(tmp_path / "missing"), "--out", str(out)]) == cli.EXIT_DATA
    assert not out.exists()
    assert not list(tmp_path.glob(".*partial*"))


def test_bad_config_is_data_error(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[gen]\nclickbait_fraction = 1.5\n")
    assert cli.main(["gen-data", "--config", str(p), "--out", str(tmp_path / "x")]) == cli.EXIT_DATA


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    out = capsys.readouterr().out
    assert "clickbait_fraction = 0.2" in out and "[train]" in out
