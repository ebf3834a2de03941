import json

import pytest

from amdefect.cli import main
from amdefect.dataset import Manifest, class_stats


def _read_meta(path):
    return dict(line.split(" = ", 1) for line in path.read_text(encoding="utf-8").splitlines())


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "corpus"
    args = ["surrogate", "--out", str(out), "--seed", "3", "--tile-size", "32",
            "--count", "no-defect=40", "--count", "seeded_1=8", "--count", "seeded_2=6", "--count", "seeded_3=5"]
    assert main(args) == 0
    return out


class TestSurrogateAndStats:
    def test_counts_and_meta(self, corpus, capsys):
        m = Manifest.load(corpus / "manifest.tsv")
        assert class_stats(m).counts == {"no-defect": 40, "seeded_1": 8, "seeded_2": 6, "seeded_3": 5}
        meta = _read_meta(corpus / "run.meta")
        assert meta["verb"] == "surrogate" and meta["seed"] == "3" and meta["tiles"] == "59"

    def test_byte_identical_rerun(self, corpus, tmp_path):
        args = ["surrogate", "--out", str(tmp_path / "again"), "--seed", "3", "--tile-size", "32",
                "--count", "no-defect=40", "--count", "seeded_1=8", "--count", "seeded_2=6", "--count", "seeded_3=5"]
        assert main(args) == 0
        for f in sorted(corpus.rglob("*")):
            if f.is_file() and f.name != "run.meta":
                assert (tmp_path / "again" / f.relative_to(corpus)).read_bytes() == f.read_bytes(), f
        a, b = _read_meta(corpus / "run.meta"), _read_meta(tmp_path / "again" / "run.meta")
        assert {k: v for k, v in a.items() if k != "flag.out"} == {k: v for k, v in b.items() if k != "flag.out"}

    def test_stats_prints_percentages(self, corpus, capsys):
        assert main(["stats", "--manifest", str(corpus / "manifest.tsv")]) == 0
        text = capsys.readouterr().out
        assert "no-defect" in text and "67.8" in text


class TestSplitBalance:
    def test_split_files(self, corpus, tmp_path):
        assert main(["split", "--manifest", str(corpus / "manifest.tsv"), "--out", str(tmp_path), "--seed", "1"]) == 0
        train, test = Manifest.load(tmp_path / "train.tsv"), Manifest.load(tmp_path / "test.tsv")
        assert len(train) + len(test) == 59
        assert {e.path for e in train.entries}.isdisjoint({e.path for e in test.entries})

    def test_sam_to_500_then_stats(self, corpus, tmp_path, capsys):
        out = tmp_path / "bal"
        assert main(["balance", "--manifest", str(corpus / "manifest.tsv"), "--strategy", "sam",
                     "--class", "seeded_2", "--target", "500", "--out", str(out), "--seed", "0"]) == 0
        capsys.readouterr()
        assert main(["stats", "--manifest", str(out / "manifest.tsv")]) == 0
        text = capsys.readouterr().out
        row = next(line for line in text.splitlines() if line.split() and line.split()[0] == "seeded_2")
        assert "500" in row.split()
        assert class_stats(Manifest.load(out / "manifest.tsv")).counts["seeded_2"] == 500

    @pytest.mark.parametrize("strategy", ["cds", "rds"])
    def test_mask_strategies(self, corpus, tmp_path, strategy):
        assert main(["balance", "--manifest", str(corpus / "manifest.tsv"), "--strategy", strategy,
                     "--target", "12", "--out", str(tmp_path)]) == 0
        counts = class_stats(Manifest.load(tmp_path / "manifest.tsv")).counts
        assert counts == {"no-defect": 40, "seeded_1": 12, "seeded_2": 12, "seeded_3": 12}

    def test_bad_strategy_exits_2(self, corpus, tmp_path):
        assert main(["balance", "--manifest", str(corpus / "manifest.tsv"), "--strategy", "smote",
                     "--target", "5", "--out", str(tmp_path)]) == 2

    def test_unknown_class_exits_2(self, corpus, tmp_path):
        assert main(["balance", "--manifest", str(corpus / "manifest.tsv"), "--strategy", "sam",
                     "--class", "porosity", "--target", "5", "--out", str(tmp_path)]) == 2


class TestEval:
    def test_perfect_predictions(self, tmp_path, capsys):
        rows = ["# label_set\thr1"] + [f"{c}\t{c}" for c in ("no-defect", "seeded_1", "seeded_2", "seeded_3") * 3]
        (tmp_path / "p.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        assert main(["eval", "--predictions", str(tmp_path / "p.tsv"), "--out", str(tmp_path / "r")]) == 0
        assert "Testing accuracy (%): 100.0" in capsys.readouterr().out
        report = json.loads((tmp_path / "r" / "report.json").read_text())
        assert report["accuracy_percent"] == 100.0
        assert report["confusion"] == [[3 if i == j else 0 for j in range(4)] for i in range(4)]

    def test_unknown_label_exits_2(self, tmp_path):
        (tmp_path / "p.tsv").write_text("no-defect\tcrack\n", encoding="utf-8")
        assert main(["eval", "--predictions", str(tmp_path / "p.tsv"), "--label-set", "hr1",
                     "--out", str(tmp_path / "r")]) == 2

    def test_needs_inputs(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path)]) == 2


class TestTrainPredict:
    def test_zero_epochs_writes_untrained_checkpoint(self, corpus, tmp_path):
        from amdefect.models import load_checkpoint

        assert main(["train-cnn", "--manifest", str(corpus / "manifest.tsv"), "--max-epochs", "0",
                     "--filters", "4,4,4", "--out", str(tmp_path)]) == 0
        net = load_checkpoint(tmp_path / "cnn.fgs")
        assert net.metadata["epochs"] == 0
        assert not (tmp_path / "history.txt").exists()

    def test_train_eval_predict_deterministic(self, corpus, tmp_path):
        runs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["train-cnn", "--manifest", str(corpus / "manifest.tsv"), "--max-epochs", "1",
                         "--filters", "4,8,8", "--seed", "5", "--out", str(out / "cnn")]) == 0
            assert main(["predict", "--cnn", str(out / "cnn" / "cnn.fgs"), "--manifest",
                         str(corpus / "manifest.tsv"), "--out", str(out / "pred")]) == 0
            assert main(["eval", "--predictions", str(out / "pred" / "predictions.tsv"),
                         "--out", str(out / "eval")]) == 0
            runs.append(out)
        a, b = runs
        for rel in ("cnn/cnn.fgs", "cnn/history.txt", "pred/predictions.tsv", "eval/report.json"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
        lines = (a / "pred" / "predictions.tsv").read_text().splitlines()
        assert lines[0] == "# label_set\thr1" and len([r for r in lines if not r.startswith("#")]) == 59

    def test_eval_from_model(self, corpus, tmp_path):
        assert main(["train-cnn", "--manifest", str(corpus / "manifest.tsv"), "--max-epochs", "0",
                     "--filters", "4,4,4", "--out", str(tmp_path / "m")]) == 0
        assert main(["eval", "--cnn", str(tmp_path / "m" / "cnn.fgs"), "--manifest", str(corpus / "manifest.tsv"),
                     "--out", str(tmp_path / "r")]) == 0
        assert sum(map(sum, json.loads((tmp_path / "r" / "report.json").read_text())["confusion"])) == 59

    def test_denoise_verb(self, corpus, tmp_path):
        assert main(["train-dae", "--manifest", str(corpus / "manifest.tsv"), "--max-epochs", "1",
                     "--filters", "4", "--out", str(tmp_path / "dae")]) == 0
        assert main(["denoise", "--dae", str(tmp_path / "dae" / "dae.fgs"), "--manifest",
                     str(corpus / "manifest.tsv"), "--sigma", "0.3", "--out", str(tmp_path / "d")]) == 0
        assert len(Manifest.load(tmp_path / "d" / "manifest.tsv")) == 59
        assert "SSIM(clean, reconstructed)" in (tmp_path / "d" / "denoise.txt").read_text()


class TestErrors:
    def test_missing_manifest_exits_1(self, tmp_path, capsys):
        assert main(["stats", "--manifest", str(tmp_path / "nope.tsv")]) == 1
        assert "amdefect stats: error:" in capsys.readouterr().err

    def test_unknown_verb_exits_2(self):
        assert main(["frobnicate"]) == 2

    def test_missing_out_exits_2(self, corpus):
        assert main(["split", "--manifest", str(corpus / "manifest.tsv")]) == 2

    def test_unknown_protocol_strategy_exits_2(self, tmp_path):
        (tmp_path / "p.cfg").write_text("strategies = original, smote\n", encoding="utf-8")
        assert main(["experiment", "--protocol", str(tmp_path / "p.cfg"), "--out", str(tmp_path / "o")]) == 2
        assert not (tmp_path / "o").exists()

    def test_unknown_protocol_key_exits_2(self, tmp_path):
        (tmp_path / "p.cfg").write_text("epochz = 3\n", encoding="utf-8")
        assert main(["experiment", "--protocol", str(tmp_path / "p.cfg"), "--out", str(tmp_path / "o")]) == 2
