import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from cli import cli, run
from conftest import write_tsv
from corpus import concat_lines_to_page, load_corpus, write_page_xml
from data_processor import TranscriptionTable
from imgproc import save_raster
from models.checkpoint import load_checkpoint


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, args):
    result = runner.invoke(cli, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


class TestErrors:
    def test_version(self, capsys):
        assert run(["--version"]) == 0
        out = capsys.readouterr().out
        assert "histocr" in out and "LSHOCR1" in out

    def test_missing_file_is_status_1(self, tmp_path, capsys):
        gt = write_tsv(tmp_path / "gt.tsv", [("a", "x")])
        assert run(["eval", "--gt", gt, "--pred", str(tmp_path / "nope.tsv")]) == 1
        err = capsys.readouterr().err.strip().splitlines()
        assert err[-1].startswith("error: ")

    def test_bad_table_is_status_1(self, tmp_path, capsys):
        gt = write_tsv(tmp_path / "gt.tsv", [("a", "x"), ("a", "y")])
        assert run(["eval", "--gt", gt, "--pred", gt]) == 1
        assert "duplicate line_id" in capsys.readouterr().err

    def test_usage_errors_are_status_2(self):
        assert run(["eval"]) == 2
        assert run(["no-such-command"]) == 2
        assert run(["confusions", "--gt", "a", "--pred", "b", "--top-n", "0"]) == 2


class TestTextCommands:
    def test_eval_identical(self, runner, tmp_path):
        gt = write_tsv(tmp_path / "gt.tsv", [("w1/p/l1", "abc"), ("w2/p/l1", "de")])
        out = tmp_path / "cer.json"
        invoke(runner, ["eval", "--gt", gt, "--pred", gt, "--by-work", "--out", str(out)])
        result = json.loads(out.read_text(encoding="utf-8"))
        assert result["cer"] == 0.0 and result["total_gt_chars"] == 5
        assert set(result["by_work"]) == {"w1", "w2"}
        assert result["macro_cer"] == 0.0

    def test_eval_normalized(self, runner, tmp_path):
        gt = write_tsv(tmp_path / "gt.tsv", [("l1", "Iam ,x")])
        pred = write_tsv(tmp_path / "pred.tsv", [("l1", "Jam, x")])
        out = tmp_path / "cer.json"
        invoke(runner, ["eval", "--gt", gt, "--pred", pred, "--out", str(out)])
        assert json.loads(out.read_text(encoding="utf-8"))["cer"] > 0
        invoke(runner, ["eval", "--gt", gt, "--pred", pred, "--normalize", "--out", str(out)])
        assert json.loads(out.read_text(encoding="utf-8"))["cer"] == 0.0

    def test_confusions(self, runner, tmp_path):
        gt = write_tsv(tmp_path / "gt.tsv", [("1", "abc"), ("2", "b"), ("3", "a b")])
        pred = write_tsv(tmp_path / "pred.tsv", [("1", "axc"), ("2", "x"), ("3", "ab")])
        plot = tmp_path / "conf.html"
        out = tmp_path / "conf.json"
        invoke(runner, ["confusions", "--gt", gt, "--pred", pred, "--plot", str(plot), "--out", str(out)])
        report = json.loads(out.read_text(encoding="utf-8"))
        assert report["rows"][0] == {"gt": "b", "pred": "x", "cnt": 2, "perc": pytest.approx(66.666, abs=0.01)}
        assert report["rows"][1]["gt"] == "␣"
        assert plot.exists()

        tsv = tmp_path / "conf.tsv"
        invoke(runner, ["confusions", "--gt", gt, "--pred", pred, "--top-n", "1", "--format", "tsv", "--out", str(tsv)])
        assert tsv.read_text(encoding="utf-8").splitlines()[-1] == "Remaining\t\t1\t33.33"

    def test_normalize_and_dump_rules(self, runner, tmp_path):
        table = write_tsv(tmp_path / "in.tsv", [("l1", "Iam ,x"), ("l2", "a/b")])
        out = tmp_path / "out.tsv"
        invoke(runner, ["normalize", table, "--fold-virgula", "--out", str(out)])
        assert TranscriptionTable.load(str(out)).records() == [("l1", "Jam, x"), ("l2", "a, b")]

        rules = tmp_path / "rules.tsv"
        invoke(runner, ["dump-rules", "--out", str(rules)])
        assert "ﬀ\tff" in rules.read_text(encoding="utf-8")


class TestCorpusCommands:
    def test_ingest_page_xml(self, runner, tmp_path, small_corpus):
        lines = small_corpus.lines()[:4]
        page, regions = concat_lines_to_page(lines, gap=3)
        save_raster(page, str(tmp_path / "scan.png"))
        xml = tmp_path / "scan.xml"
        xml.write_text(write_page_xml(regions, "scan.png", page.shape[1], page.shape[0]), encoding="utf-8")

        out_dir = tmp_path / "corpus"
        result = invoke(runner, ["ingest", str(xml), "--work", "book", "--out", str(out_dir), "--balance-cap", "2"])
        summary = json.loads(result.stdout)
        assert summary["lines"] == 4 and summary["works"] == 1
        corpus = load_corpus(summary["manifest"])
        assert [l.transcription for l in corpus.lines()] == [l.transcription for l in lines]
        assert [l.line_id for l in corpus.lines()] == ["l0000", "l0001", "l0002", "l0003"]
        assert {l.page_id for l in corpus.lines()} == {"scan"}
        assert sum(l.selected for l in corpus.lines()) == 2
        assert corpus.lines()[0].image.shape == lines[0].image.shape

    def test_ingest_line_gt(self, runner, tmp_path, rng):
        paths = []
        for name, text in (("one", "Iam"), ("two", "ab")):
            image = tmp_path / f"{name}.png"
            save_raster(rng.random((10, 30)), str(image))
            (tmp_path / f"{name}.gt.txt").write_text(text + "\n", encoding="utf-8")
            paths.append(str(image))
        out_dir = tmp_path / "corpus"
        result = invoke(runner, ["ingest", *paths, "--line-gt", "--work", "w", "--out", str(out_dir)])
        corpus = load_corpus(json.loads(result.stdout)["manifest"])
        assert [l.transcription for l in corpus.lines()] == ["Jam", "ab"]
        assert [l.line_id for l in corpus.lines()] == ["one", "two"]
        assert (out_dir / "pages" / "page0000.png").exists()
        assert (out_dir / "pages" / "page0000.xml").exists()

    def test_preprocess(self, runner, tmp_path):
        synth_dir = tmp_path / "synth"
        result = invoke(runner, ["synth", "--out", str(synth_dir), "--seed", "2", "--lines", "4", "--styles", "blocky",
                                 "--alphabet", "ab ", "--min-length", "2", "--max-length", "3"])
        manifest = json.loads(result.stdout)["manifest"]
        result = invoke(runner, ["preprocess", manifest, "--variants", "bin,wolf", "--out", str(tmp_path / "pre")])
        corpus = load_corpus(json.loads(result.stdout)["manifest"])
        assert sorted({l.variant for l in corpus.lines()}) == ["bin", "raw", "wolf"]
        assert len(corpus.lines()) == 12


class TestTrainAndPredict:
    def synth(self, runner, out_dir):
        result = invoke(runner, ["synth", "--out", str(out_dir), "--seed", "1", "--lines", "8", "--styles", "blocky",
                                 "--alphabet", "ab ", "--min-length", "2", "--max-length", "3"])
        return json.loads(result.stdout)["manifest"]

    def train(self, runner, manifest, model_dir, out):
        invoke(runner, ["--threads", "2", "train", manifest, "--seed", "5", "--model-dir", str(model_dir),
                        "--arch", "desk", "--voters", "2", "--max-epochs", "1", "--augmentations", "0",
                        "--batch-size", "4", "--out", str(out), "--history-plot", str(out) + ".html"])
        return json.loads(out.read_text(encoding="utf-8"))

    def test_train_predict_eval(self, runner, tmp_path):
        manifest = self.synth(runner, tmp_path / "synth")
        first = self.train(runner, manifest, tmp_path / "m1", tmp_path / "r1.json")
        second = self.train(runner, manifest, tmp_path / "m2", tmp_path / "r2.json")
        assert len(first["checkpoints"]) == 2
        for a, b in zip(first["checkpoints"], second["checkpoints"]):
            with open(a, "rb") as fa, open(b, "rb") as fb:
                assert fa.read() == fb.read()
        assert first["arch"]["input_height"] == 32
        assert os.path.exists(str(tmp_path / "r1.json") + ".html")

        pred = tmp_path / "pred.tsv"
        result = invoke(runner, ["predict", manifest, "--model", str(tmp_path / "m1" / "voter*.ckpt"), "--out", str(pred)])
        summary = json.loads(result.stdout)
        assert summary["lines"] == 8
        assert all(0.0 <= c <= 1.0 for c in summary["sequence_confidences"].values())

        corpus = load_corpus(manifest)
        gt = write_tsv(tmp_path / "gt.tsv", [("/".join(l.key), l.transcription) for l in corpus.lines()])
        assert [i for i, _ in TranscriptionTable.load(str(pred)).records()] == [
            i for i, _ in TranscriptionTable.load(gt).records()
        ]
        out = tmp_path / "cer.json"
        invoke(runner, ["eval", "--gt", gt, "--pred", str(pred), "--out", str(out)])
        assert json.loads(out.read_text(encoding="utf-8"))["cer"] >= 0.0

    def test_predict_images_to_stdout(self, runner, tmp_path):
        manifest = self.synth(runner, tmp_path / "synth")
        self.train(runner, manifest, tmp_path / "m", tmp_path / "r.json")
        image = tmp_path / "line7.png"
        save_raster(load_corpus(manifest).lines()[0].image, str(image))
        result = invoke(runner, ["predict", str(image), "--model", str(tmp_path / "m" / "voter0.ckpt")])
        rows = result.stdout.splitlines()
        assert rows[0] == "line_id\ttext"
        assert rows[1].startswith("line7\t")

    def test_finetune_zero_lr(self, runner, tmp_path):
        manifest = self.synth(runner, tmp_path / "synth")
        self.train(runner, manifest, tmp_path / "m", tmp_path / "r.json")
        out = tmp_path / "ft.json"
        invoke(runner, ["finetune", manifest, "--model", str(tmp_path / "m" / "voter0.ckpt"), "--seed", "5",
                        "--model-dir", str(tmp_path / "ft"), "--voters", "2", "--max-epochs", "1", "--lr", "0",
                        "--augmentations", "0", "--heldout", manifest, "--out", str(out)])
        result = json.loads(out.read_text(encoding="utf-8"))
        assert len(result["checkpoints"]) == 1 and len(result["checkpoints"][0]) == 2
        assert result["heldout"]["cer"] >= 0.0
        start = load_checkpoint(str(tmp_path / "m" / "voter0.ckpt"))
        assert all(load_checkpoint(path).same_weights(start) for path in result["checkpoints"][0])

        before, after = tmp_path / "before.tsv", tmp_path / "after.tsv"
        invoke(runner, ["predict", manifest, "--model", str(tmp_path / "m" / "voter0.ckpt"), "--out", str(before)])
        invoke(runner, ["predict", manifest, "--model", str(tmp_path / "ft" / "voter*.ckpt"), "--out", str(after)])
        assert after.read_text(encoding="utf-8") == before.read_text(encoding="utf-8")
