import csv
import json

import numpy as np
import pytest

from conftest import tiny_detector_config
from eldetect import imageio
from eldetect.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, load_config, main


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    train = {"max_iter": 3, "decay_steps": [2], "checkpoint_every": 0, "log_every": 1}
    path.write_text(json.dumps({"detector": tiny_detector_config().to_dict(), "train": train}))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_corpus, config_file):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--manifest", str(tiny_corpus[0]), "--out", str(out), "--config", str(config_file)]) == EXIT_OK
    return out / "model.bin"


class TestConfig:
    def test_overrides(self, config_file):
        det, tr = load_config(str(config_file), ["train.lr=0.05", "detector.variant=topdown+none"])
        assert tr.lr == 0.05 and det.variant.name == "topdown+none" and det.d == 8

    @pytest.mark.parametrize("override", ["lr=1", "train.lr", "model.lr=1", "train.nope=3", "train.momentum=2"])
    def test_bad_override(self, override):
        with pytest.raises(ValueError):
            load_config(None, [override])


class TestExitCodes:
    def test_help(self, capsys):
        assert main(["--help"]) == EXIT_OK

    def test_unknown_verb(self, capsys):
        assert main(["frobnicate"]) == EXIT_VALIDATION

    def test_missing_manifest(self, tmp_path, capsys):
        assert main(["train", "--manifest", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == EXIT_RUNTIME

    def test_bad_checkpoint(self, tmp_path, capsys):
        bogus = tmp_path / "x.bin"
        bogus.write_bytes(b"not a checkpoint")
        assert main(["detect", "--checkpoint", str(bogus), "--input", str(tmp_path), "--out", str(tmp_path / "d.csv")]) \
            == EXIT_VALIDATION


class TestVerbs:
    def test_synth(self, tmp_path, capsys):
        assert main(["synth", "--n", "3", "--out", str(tmp_path), "--seed", "2"]) == EXIT_OK
        assert len(list(tmp_path.glob("*.pgm"))) == 3
        assert "manifest_hash" in json.loads((tmp_path / "run_metadata.json").read_text())

    def test_train_outputs(self, trained):
        meta = json.loads((trained.parent / "run_metadata.json").read_text())
        assert meta["train"]["max_iter"] == 3 and len(meta["loss_log"]) == 3 and meta["manifest_hash"]

    def test_detect_deterministic(self, trained, tiny_corpus, tmp_path):
        images = tiny_corpus[1].parent
        args = ["detect", "--checkpoint", str(trained), "--input", str(images), "--score-threshold", "0.0"]
        assert main(args + ["--out", str(tmp_path / "a.csv"), "--overlay", str(tmp_path / "ov")]) == EXIT_OK
        assert main(args + ["--out", str(tmp_path / "b.csv")]) == EXIT_OK
        a = (tmp_path / "a.csv").read_bytes()
        assert a == (tmp_path / "b.csv").read_bytes()
        assert a.decode().splitlines()[0] == "image_id,class,score,x_min,y_min,x_max,y_max"
        assert len(list((tmp_path / "ov").glob("*.pgm"))) == 3

    def test_detect_continues_past_bad_file(self, trained, tiny_corpus, tmp_path, capsys):
        imgs = tmp_path / "imgs"
        imgs.mkdir()
        imageio.write_pgm(imgs / "good.pgm", np.full((64, 64), 128, dtype=np.uint8))
        (imgs / "bad.pgm").write_bytes(b"P5\n12")
        assert main(["detect", "--checkpoint", str(trained), "--input", str(imgs), "--out", str(tmp_path / "d.csv")]) \
            == EXIT_OK
        assert "bad.pgm" in capsys.readouterr().err
        assert json.loads((tmp_path / "d.meta.json").read_text())["failed"] == 1

    def test_eval(self, trained, tiny_corpus, tmp_path, capsys):
        test_dir = tiny_corpus[1].parent
        dets = tmp_path / "d.csv"
        main(["detect", "--checkpoint", str(trained), "--input", str(test_dir), "--out", str(dets)])
        assert main(["eval", "--detections", str(dets), "--annotations", str(test_dir), "--out", str(tmp_path / "ev")]) \
            == EXIT_OK
        report = json.loads((tmp_path / "ev" / "metrics.json").read_text())
        assert {"ap", "mAP", "MIoU", "P", "R", "F", "confusion", "per_class_prf"} <= set(report)
        with (tmp_path / "ev" / "pr_curves.csv").open() as fh:
            assert next(csv.reader(fh)) == ["class", "threshold", "recall", "precision"]

    def test_eval_perfect_detections(self, tiny_corpus, tmp_path, capsys):
        from eldetect.cli import load_ground_truth

        test_dir = tiny_corpus[1].parent
        gts = load_ground_truth(test_dir)
        rows = ["image_id,class,score,x_min,y_min,x_max,y_max"]
        rows += [f"{img},{a.name},0.9,{a.xmin},{a.ymin},{a.xmax},{a.ymax}" for img, anns in gts.items() for a in anns]
        (tmp_path / "p.csv").write_text("\n".join(rows) + "\n")
        main(["eval", "--detections", str(tmp_path / "p.csv"), "--annotations", str(test_dir), "--out", str(tmp_path)])
        report = json.loads((tmp_path / "metrics.json").read_text())
        assert report["mAP"] == 1.0 and report["MIoU"] == 1.0

    def test_viz_attn(self, trained, tiny_corpus, tmp_path):
        image = next(tiny_corpus[1].parent.glob("*.pgm"))
        assert main(["viz-attn", "--checkpoint", str(trained), "--image", str(image), "--out", str(tmp_path)]) == EXIT_OK
        assert (tmp_path / "B3_similarity.pgm").exists() and (tmp_path / "B4_similarity.csv").exists()
        assert set(json.loads((tmp_path / "map_statistics.json").read_text())) == {"B3", "B4"}

    def test_viz_attn_without_attention(self, tiny_corpus, config_file, tmp_path, capsys):
        out = tmp_path / "run"
        main(["train", "--manifest", str(tiny_corpus[0]), "--out", str(out), "--config", str(config_file),
              "--variant", "topdown+none", "--set", "train.max_iter=1"])
        image = next(tiny_corpus[1].parent.glob("*.pgm"))
        code = main(["viz-attn", "--checkpoint", str(out / "model.bin"), "--image", str(image), "--out", str(tmp_path)])
        assert code == EXIT_VALIDATION and "no attention in this variant" in capsys.readouterr().err

    def test_ablate_six_rows(self, tiny_corpus, config_file, tmp_path, capsys):
        code = main(["ablate", "--train", str(tiny_corpus[0]), "--test", str(tiny_corpus[1]), "--out", str(tmp_path),
                     "--config", str(config_file), "--set", "train.max_iter=1"])
        assert code == EXIT_OK
        with (tmp_path / "ablation.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6 and len({r["variant"] for r in rows}) == 6
        assert list(rows[0]) == ["variant", "seed", "parameters", "P", "R", "F", "mAP", "MIoU"]
