"""CLI subcommands end to end, via main() with captured output."""

import json

import pytest

from clonesearch.cli import load_config_file, main
from clonesearch.errors import UsageError

from conftest import FUNC_F


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestIndex:
    def test_tiny_corpus_stats(self, tmp_path, tiny_corpus, capsys):
        code, out, _ = run(
            capsys, "index", tiny_corpus, tmp_path / "ix", "--dim", "64", "--nlist", "4"
        )
        assert code == 0
        stats = dict(line.split("=", 1) for line in out.strip().splitlines())
        assert stats["functions_parsed"] == "5"
        assert stats["embeddings"] == "4"
        assert stats["files_cleaned"] == "3"
        assert {"parse_time", "embed_time", "index_time", "disk_bytes"} <= stats.keys()

    def test_empty_corpus_errors(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        code, _, err = run(capsys, "index", empty, tmp_path / "ix")
        assert code == 2
        assert "nothing to index" in err

    def test_rerun_refuses_without_force(self, tmp_path, tiny_corpus, capsys):
        ix = tmp_path / "ix"
        assert run(capsys, "index", tiny_corpus, ix, "--dim", "64", "--nlist", "4")[0] == 0
        code, _, err = run(capsys, "index", tiny_corpus, ix, "--dim", "64", "--nlist", "4")
        assert code == 2
        assert "--force" in err
        code, _, _ = run(
            capsys, "index", tiny_corpus, ix, "--dim", "64", "--nlist", "4", "--force"
        )
        assert code == 0


class TestQuery:
    def test_identical_function_scores_one(self, tmp_path, tiny_index, capsys):
        qdir = tmp_path / "q"
        qdir.mkdir()
        (qdir / "probe.c").write_text(FUNC_F)
        code, out, err = run(
            capsys, "query", qdir, tiny_index, "--k", "5", "--nprobe", "4",
            "--threshold", "0.5",
        )
        assert code == 0
        hits = [json.loads(line) for line in out.strip().splitlines()]
        assert hits[0]["score"] == 1.0
        assert hits[0]["rank"] == 1
        # the Type-1 class exposes both locations on one entry
        assert len(hits[0]["duplicate_locations"]) == 2
        assert "qps=" in err

    def test_threshold_above_one_empty_exit_zero(self, tmp_path, tiny_index, capsys):
        qdir = tmp_path / "q"
        qdir.mkdir()
        (qdir / "probe.c").write_text(FUNC_F)
        code, out, _ = run(
            capsys, "query", qdir, tiny_index, "--threshold", "1.01", "--nprobe", "4"
        )
        assert code == 0
        assert out.strip() == ""

    def test_global_topk_mode(self, tmp_path, tiny_index, capsys):
        qdir = tmp_path / "q"
        qdir.mkdir()
        (qdir / "probe.c").write_text(FUNC_F)
        code, out, _ = run(
            capsys, "query", qdir, tiny_index, "--global-topk", "3", "--nprobe", "4",
            "--threshold", "-1",
        )
        assert code == 0
        hits = [json.loads(line) for line in out.strip().splitlines()]
        assert len(hits) == 3
        scores = [h["score"] for h in hits]
        assert scores == sorted(scores, reverse=True)

    def test_missing_index_is_io_error(self, tmp_path, capsys):
        qdir = tmp_path / "q"
        qdir.mkdir()
        (qdir / "probe.c").write_text(FUNC_F)
        code, _, err = run(capsys, "query", qdir, tmp_path / "nope")
        assert code == 4


class TestVerifyStats:
    def test_verify_ok(self, tiny_index, capsys):
        code, out, _ = run(capsys, "verify", tiny_index)
        assert code == 0
        assert "ok" in out
        assert "vectors=4" in out

    def test_verify_detects_metadata_loss(self, tiny_index, capsys):
        import sqlite3

        conn = sqlite3.connect(tiny_index / "metadata.sqlite")
        conn.execute("DELETE FROM fragments WHERE fragment_id = 0")
        conn.commit()
        conn.close()
        code, _, err = run(capsys, "verify", tiny_index)
        assert code == 3

    def test_stats(self, tiny_index, capsys):
        code, out, _ = run(capsys, "stats", tiny_index)
        assert code == 0
        lines = dict(line.split("=", 1) for line in out.strip().splitlines())
        assert lines["index.functions_parsed"] == "5"
        assert lines["index.count"] == "4"
        assert lines["parse.cleaned_files"] == "3"


class TestEval:
    def test_recall_table(self, tiny_index, capsys):
        code, out, _ = run(
            capsys, "eval", tiny_index, "--k", "2", "--n-queries", "4",
            "--nprobe-sweep", "1,4",
        )
        assert code == 0
        lines = out.strip().splitlines()
        assert "recall@2" in lines[0]
        last = lines[-1].split()
        assert last[0] == "4"  # exhaustive row
        assert float(last[1]) == 1.0  # nprobe=nlist -> oracle equality

    def test_recall_non_decreasing(self, tiny_index, capsys):
        code, out, _ = run(
            capsys, "eval", tiny_index, "--k", "2", "--n-queries", "4",
            "--nprobe-sweep", "1,2,4",
        )
        recalls = [float(line.split()[1]) for line in out.strip().splitlines()[1:]]
        assert recalls == sorted(recalls)

    def test_labeled_curve_csv(self, tmp_path, tiny_index, capsys):
        from clonesearch.embedding import open_matrix, read_ids, write_matrix

        # queries = two corpus vectors; the true pair is each row's own id
        matrix = open_matrix(tiny_index / "embeddings.dbse")
        ids = read_ids(tiny_index / "embeddings.ids")
        queries = tmp_path / "queries.dbse"
        write_matrix(queries, matrix[:2])
        labels = tmp_path / "labels.csv"
        labels.write_text(
            "query_id,corpus_id\n" + "".join(f"{q},{ids[q]}\n" for q in range(2))
        )
        curve = tmp_path / "curve.csv"
        code, _, _ = run(
            capsys, "eval", tiny_index, "--k", "2", "--queries", queries,
            "--labels", labels, "--curve-out", curve,
        )
        assert code == 0
        lines = curve.read_text().strip().splitlines()
        assert lines[0] == "k_global,recall,precision"
        recalls = [float(l.split(",")[1]) for l in lines[1:]]
        assert recalls == sorted(recalls)
        assert recalls[-1] == 1.0  # every labeled pair is retrievable here


class TestConfigFile:
    def test_precedence_flags_over_config(self, tmp_path, tiny_corpus, capsys):
        conf = tmp_path / "cs.conf"
        conf.write_text("dim = 32\nnlist = 2\n# comment\nseed = 9\n")
        code, out, _ = run(
            capsys, "index", tiny_corpus, tmp_path / "ix", "--config", conf, "--dim", "64"
        )
        assert code == 0
        stats = dict(line.split("=", 1) for line in out.strip().splitlines())
        assert stats["dim"] == "64"  # flag wins
        assert stats["nlist"] == "2"  # config wins over heuristic default

    def test_unknown_key_rejected(self, tmp_path):
        conf = tmp_path / "cs.conf"
        conf.write_text("bogus = 1\n")
        with pytest.raises(UsageError):
            load_config_file(conf)

    def test_malformed_line_rejected(self, tmp_path):
        conf = tmp_path / "cs.conf"
        conf.write_text("dim 64\n")
        with pytest.raises(UsageError):
            load_config_file(conf)
