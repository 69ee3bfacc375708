import json
from pathlib import Path

import pytest

from kdcn.cli import load_config, main

TINY_CONFIG = """
# tiny world so the whole pipeline runs in seconds
n_users = 12
n_items = 20
n_categories = 3
n_sellers = 4
n_tags = 4
n_keywords = 18
n_sessions = 16
n_samples = 300
alpha = 1.0
noise_std = 1.5

dim = 8
layers = 1
pretrain_epochs = 2
pretrain_lr = 0.01

epochs = 2
lr = 0.003
batch_size = 64
cat_dim = 4
deep_width = 8
conv_filters = 2
attention_heads = 2
max_query_keywords = 3
max_title_keywords = 3
"""


@pytest.fixture()
def workdir(tmp_path):
    cfg = tmp_path / "config.txt"
    cfg.write_text(TINY_CONFIG)
    return tmp_path, cfg


def run_pipeline(out: Path, cfg: Path, seed: int = 0) -> None:
    base = ["--seed", str(seed), "--config", str(cfg), "--out", str(out)]
    for cmd in ("gen-data", "build-kg", "pretrain", "train"):
        assert main([cmd] + base) == 0, cmd
    assert main(["eval"] + base + ["--configs", "kdcn,dcn"]) == 0


class TestConfigFile:
    def test_parses_keys_and_comments(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("a = 1\n# comment\nb=two # trailing\n\n")
        assert load_config(path) == {"a": "1", "b": "two"}

    def test_bad_line_is_data_error(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("not a pair\n")
        assert main(["gen-data", "--config", str(path), "--out", str(tmp_path)]) == 2


class TestExitCodes:
    def test_missing_subcommand_is_usage_error(self):
        assert main([]) == 1

    def test_unknown_eval_config_is_usage_error(self, workdir):
        out, cfg = workdir
        assert main(["eval", "--out", str(out), "--configs", "bogus"]) == 1

    def test_missing_input_file_is_data_error(self, tmp_path):
        assert main(["pretrain", "--out", str(tmp_path)]) == 2

    def test_malformed_events_is_data_error(self, tmp_path):
        (tmp_path / "events.jsonl").write_text("{not json}\n")
        assert main(["build-kg", "--out", str(tmp_path)]) == 2


class TestPipeline:
    def test_full_pipeline_writes_artifacts(self, workdir):
        out, cfg = workdir
        run_pipeline(out, cfg)
        for name in (
            "events.jsonl",
            "triples.tsv",
            "samples.jsonl",
            "vocab.tsv",
            "ckge.bin",
            "ckge.vocab.tsv",
            "pretrain_loss.csv",
            "kdcn.bin",
            "kdcn.meta.json",
            "history.csv",
            "report.csv",
        ):
            assert (out / name).exists(), name

    def test_report_has_sorted_configs_and_auc(self, workdir):
        out, cfg = workdir
        run_pipeline(out, cfg)
        lines = (out / "report.csv").read_text().splitlines()
        assert lines[0] == "config,test_auc,final_train_loss,epochs_to_threshold,wall_time_s"
        names = [line.split(",")[0] for line in lines[1:]]
        assert names == sorted(names) and len(names) >= 2
        for line in lines[1:]:
            assert 0.0 <= float(line.split(",")[1]) <= 1.0

    def test_rank_prints_single_row(self, workdir, capsys):
        out, cfg = workdir
        run_pipeline(out, cfg)
        samples = (out / "samples.jsonl").read_text().splitlines()
        user = json.loads(samples[0])["user_id"]
        capsys.readouterr()  # drain pipeline status lines
        code = main(
            [
                "rank",
                "--out",
                str(out),
                "--config",
                str(cfg),
                "--user",
                user,
                "--query",
                "kw0 kw1",
                "--candidates",
                "item0",
            ]
        )
        assert code == 0
        printed = capsys.readouterr().out.splitlines()
        assert len(printed) == 2 and "item0" in printed[1]

    def test_rank_defaults_to_capped_item_list(self, workdir, capsys):
        out, cfg = workdir
        run_pipeline(out, cfg)
        capsys.readouterr()
        code = main(
            ["rank", "--out", str(out), "--config", str(cfg), "--user", "user0",
             "--query", "kw0 kw1"]
        )
        assert code == 0
        rows = capsys.readouterr().out.splitlines()
        assert len(rows) == 1 + 20  # header + all items (world has 20, under the cap)

    def test_rank_unknown_candidate_is_data_error(self, workdir):
        out, cfg = workdir
        run_pipeline(out, cfg)
        code = main(
            ["rank", "--out", str(out), "--user", "user0", "--query", "kw0",
             "--candidates", "missing-item"]
        )
        assert code == 2


def _masked_report(path: Path) -> str:
    # wall-clock time is the one legitimately non-reproducible column
    lines = path.read_text().splitlines()
    return "\n".join(",".join(line.split(",")[:-1]) for line in lines)


class TestDeterminism:
    def test_same_seed_byte_identical_artifacts(self, tmp_path):
        cfg = tmp_path / "config.txt"
        cfg.write_text(TINY_CONFIG)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run_pipeline(out_a, cfg, seed=5)
        run_pipeline(out_b, cfg, seed=5)
        for name in (
            "events.jsonl",
            "triples.tsv",
            "samples.jsonl",
            "vocab.tsv",
            "ckge.bin",
            "ckge.vocab.tsv",
            "pretrain_loss.csv",
            "kdcn.bin",
            "kdcn.meta.json",
            "history.csv",
        ):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name
        assert _masked_report(out_a / "report.csv") == _masked_report(out_b / "report.csv")

    def test_different_seed_changes_model(self, tmp_path):
        cfg = tmp_path / "config.txt"
        cfg.write_text(TINY_CONFIG)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run_pipeline(out_a, cfg, seed=1)
        run_pipeline(out_b, cfg, seed=2)
        assert (out_a / "kdcn.bin").read_bytes() != (out_b / "kdcn.bin").read_bytes()
