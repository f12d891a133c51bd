import subprocess
import sys

import numpy as np
import pytest

from ontolabel import cli
from ontolabel.dataset import load_labels


def run(argv, capsys):
    code = cli.main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestOntologyCommand:
    def test_validate_ok(self, fixtures_dir, capsys):
        code, out, _ = run(
            ["ontology", "validate", "--ontology", str(fixtures_dir / "sample_ontology.txt")],
            capsys,
        )
        assert code == 0
        assert "ok" in out

    def test_validate_cycle_nonzero_and_listed(self, tmp_path, capsys):
        path = tmp_path / "cyclic.txt"
        path.write_text(
            "[labels]\n0 | a | type |\n1 | b | type |\n[parents]\na -> b\nb -> a\n",
            encoding="utf-8",
        )
        code, out, _ = run(["ontology", "validate", "--ontology", str(path)], capsys)
        assert code == 1
        assert "cycle" in out and "a" in out and "b" in out

    def test_expand_fixture_chain(self, fixtures_dir, tmp_path, capsys):
        labels_in = tmp_path / "in.txt"
        labels_in.write_text("right mid lung\n", encoding="utf-8")
        out_path = tmp_path / "out.txt"
        code, _, _ = run(
            [
                "ontology", "expand",
                "--ontology", str(fixtures_dir / "sample_ontology.txt"),
                "--labels-in", str(labels_in),
                "--out", str(out_path),
            ],
            capsys,
        )
        assert code == 0
        names = {n.strip() for n in out_path.read_text().strip().split(",")}
        assert names == {"right mid lung", "right lung", "lung", "chest"}

    def test_closure_contains_inherited_pair(self, fixtures_dir, capsys):
        code, out, _ = run(
            ["ontology", "closure", "--ontology", str(fixtures_dir / "sample_ontology.txt")],
            capsys,
        )
        assert code == 0
        assert "left lower lobe ~ right mid lung" in out

    def test_unknown_name_diagnostic(self, fixtures_dir, tmp_path, capsys):
        labels_in = tmp_path / "in.txt"
        labels_in.write_text("no such label\n", encoding="utf-8")
        code, _, err = run(
            [
                "ontology", "expand",
                "--ontology", str(fixtures_dir / "sample_ontology.txt"),
                "--labels-in", str(labels_in),
            ],
            capsys,
        )
        assert code == 1
        assert "no such label" in err


class TestMineCommand:
    def test_fixture_rows(self, fixtures_dir, tmp_path, capsys, sample_ontology):
        out_path = tmp_path / "labels.tsv"
        code, _, _ = run(
            [
                "mine",
                "--ontology", str(fixtures_dir / "sample_ontology.txt"),
                "--sentences", str(fixtures_dir / "sample_sentences.txt"),
                "--out", str(out_path),
            ],
            capsys,
        )
        assert code == 0
        rows = load_labels(out_path)
        by_lesion = {}
        for lesion, label_id, relevance in rows:
            by_lesion.setdefault(lesion, {})[sample_ontology.name_of(label_id)] = relevance
        assert by_lesion["L0001"]["right lower lobe"] == "irrelevant"
        assert by_lesion["L0001"]["right mid lung"] == "relevant"
        assert by_lesion["L0002"]["adenopathy"] == "uncertain"
        assert by_lesion["L0002"]["mass"] == "uncertain"
        assert by_lesion["L0003"]["nodule"] == "relevant"

    def test_row_without_bookmark_skipped_with_warning(self, fixtures_dir, tmp_path, capsys):
        sentences = tmp_path / "s.tsv"
        sentences.write_text("L1\tnodule in the lung\nL2\tnodule BOOKMARK\n", encoding="utf-8")
        out_path = tmp_path / "labels.tsv"
        code, _, err = run(
            [
                "mine",
                "--ontology", str(fixtures_dir / "sample_ontology.txt"),
                "--sentences", str(sentences),
                "--out", str(out_path),
            ],
            capsys,
        )
        assert code == 0
        assert "skipped" in err
        assert {r[0] for r in load_labels(out_path)} == {"L2"}


def _gen_args(fixtures_dir, outdir, seed=21):
    return [
        "gen",
        "--ontology", str(fixtures_dir / "bench_ontology.txt"),
        "--outdir", str(outdir),
        "--seed", str(seed),
        "--n-patients", "120",
        "--lesions-per-patient", "2",
        "--dim", "24",
        "--p-drop-parent", "0.4",
        "--p-drop-leaf", "0.1",
        "--p-inject", "0.1",
    ]


def _train_args(fixtures_dir, gen_dir, outdir, seed=21, extra=()):
    return [
        "train",
        "--ontology", str(fixtures_dir / "bench_ontology.txt"),
        "--dataset", str(gen_dir / "dataset.tsv"),
        "--clean-labels", str(gen_dir / "clean_labels.tsv"),
        "--outdir", str(outdir),
        "--seed", str(seed),
        "--lr-schedule", "2:0.02",
        "--hidden", "24",
        "--embed-dim", "12",
        "--hard-pair-draws", "300",
        "--triplet-draws", "100",
        *extra,
    ]


class TestPipeline:
    def test_gen_train_eval_retrieve(self, fixtures_dir, tmp_path, capsys):
        gen_dir = tmp_path / "gen"
        code, out, _ = run(_gen_args(fixtures_dir, gen_dir), capsys)
        assert code == 0 and "generated" in out
        assert (gen_dir / "dataset.tsv").exists()
        assert (gen_dir / "clean_labels.tsv").exists()
        assert (gen_dir / "run_config.ini").exists()

        train_dir = tmp_path / "train"
        code, out, _ = run(_train_args(fixtures_dir, gen_dir, train_dir), capsys)
        assert code == 0 and "checkpoint" in out
        assert (train_dir / "checkpoint.bin").exists()
        assert (train_dir / "train_log.tsv").exists()

        eval_dir = tmp_path / "eval"
        code, out, _ = run(
            [
                "eval",
                "--ontology", str(fixtures_dir / "bench_ontology.txt"),
                "--dataset", str(gen_dir / "dataset.tsv"),
                "--clean-labels", str(gen_dir / "clean_labels.tsv"),
                "--checkpoint", str(train_dir / "checkpoint.bin"),
                "--outdir", str(eval_dir),
            ],
            capsys,
        )
        assert code == 0 and "macro AUC" in out
        report = (eval_dir / "report.kv").read_text()
        macro_auc = float(
            next(line.split()[1] for line in report.splitlines() if line.startswith("macro_auc"))
        )
        assert 0.0 <= macro_auc <= 1.0

        retr_dir = tmp_path / "retr"
        code, out, _ = run(
            [
                "retrieve",
                "--ontology", str(fixtures_dir / "bench_ontology.txt"),
                "--dataset", str(gen_dir / "dataset.tsv"),
                "--clean-labels", str(gen_dir / "clean_labels.tsv"),
                "--checkpoint", str(train_dir / "checkpoint.bin"),
                "--outdir", str(retr_dir),
                "--k", "5",
            ],
            capsys,
        )
        assert code == 0 and "ACG@5" in out
        assert (retr_dir / "retrieval.tsv").exists()

    def test_gen_twice_identical_files(self, fixtures_dir, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(_gen_args(fixtures_dir, a), capsys)[0] == 0
        assert run(_gen_args(fixtures_dir, b), capsys)[0] == 0
        assert (a / "dataset.tsv").read_bytes() == (b / "dataset.tsv").read_bytes()
        assert (a / "clean_labels.tsv").read_bytes() == (b / "clean_labels.tsv").read_bytes()

    def test_config_file_and_flag_override(self, fixtures_dir, tmp_path, capsys):
        config = tmp_path / "run.ini"
        config.write_text("[generate]\nseed = 5\nn_patients = 30\ndim = 12\n", encoding="utf-8")
        outdir = tmp_path / "gen"
        code, out, _ = run(
            [
                "gen",
                "--ontology", str(fixtures_dir / "bench_ontology.txt"),
                "--outdir", str(outdir),
                "--config", str(config),
                "--n-patients", "40",  # flag wins over config
                "--lesions-per-patient", "1",
            ],
            capsys,
        )
        assert code == 0
        echoed = (outdir / "run_config.ini").read_text()
        assert "n_patients = 40" in echoed
        assert "seed = 5" in echoed
        assert "generated 40 lesions" in out

    def test_missing_config_file_diagnostic(self, fixtures_dir, tmp_path, capsys):
        code, _, err = run(
            [
                "gen",
                "--ontology", str(fixtures_dir / "bench_ontology.txt"),
                "--outdir", str(tmp_path / "x"),
                "--config", str(tmp_path / "missing.ini"),
            ],
            capsys,
        )
        assert code == 1
        assert "config" in err

    def test_module_entry_point(self):
        result = subprocess.run(
            [sys.executable, "-m", "ontolabel", "--help"],
            capture_output=True, text=True, timeout=120,
        )
        assert result.returncode == 0
        assert "ontology" in result.stdout
