import json
import os
import shutil

import numpy as np
import numpy.testing as npt
import pytest

from drht import numerics as nx
from drht.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from drht.cli import main, reflect_pad
from drht.imageio import read_pfm, read_ppm, write_ppm
from drht.model import (
    DomainTransferParams,
    build_network,
    domain_transfer,
    encoder_decoder_spec,
    preset_spec,
)

TINY = ["--network", "compact", "--pretrain-steps", "2", "--joint-steps", "3", "--batch-size", "2"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    assert main(["gen-data", "--out-dir", str(out), "--scenes", "2"]) == 0
    return out


@pytest.fixture(scope="module")
def run(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "out"
    assert main(["train", "--data", str(dataset), "--out", str(out)] + TINY) == 0
    return out


def write_zero_checkpoint(path, spec_name="compact"):
    spec = preset_spec(spec_name)
    nets = {k: build_network(spec, 0, sigma=0.0).zero_() for k in ("f1", "f2")}
    save_checkpoint(path, Checkpoint(nets, DomainTransferParams()))


class TestGenData:
    def test_manifest_lists_tiled_patches(self, dataset):
        manifest = json.loads((dataset / "dataset.json").read_text())
        assert len(manifest["triplets"]) == 4  # 2 scenes x (64x128 / 64x64)
        for e in manifest["triplets"]:
            assert (dataset / e["input"]).exists() and (dataset / e["hdr"]).exists()
            assert -6 <= e["ev"] <= 3

    def test_rerun_byte_identical(self, dataset, tmp_path):
        assert main(["gen-data", "--out-dir", str(tmp_path / "again"), "--scenes", "2"]) == 0
        assert sorted(os.listdir(dataset)) == sorted(os.listdir(tmp_path / "again"))
        for f in os.listdir(dataset):
            assert (dataset / f).read_bytes() == (tmp_path / "again" / f).read_bytes(), f

    def test_zero_scenes(self, tmp_path, capsys):
        assert main(["gen-data", "--out-dir", str(tmp_path / "x"), "--scenes", "0"]) != 0
        assert "empty dataset requested" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"alpha": -1}))
        assert main(["gen-data", "--config", str(cfg), "--out-dir", str(tmp_path / "x"), "--scenes", "1"]) != 0
        assert "alpha" in capsys.readouterr().err

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["gen-data", "--out-dir", str(blocker / "sub"), "--scenes", "1"]) != 0

    def test_config_flag_overrides_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"patch_size": [64, 64]}))
        out = tmp_path / "d"
        assert main(["gen-data", "--config", str(cfg), "--patch-size", "[32, 32]",
                     "--out-dir", str(out), "--scenes", "1"]) == 0
        assert len(json.loads((out / "dataset.json").read_text())["triplets"]) == 8


class TestTrain:
    def test_outputs(self, run):
        assert (run / "checkpoint" / "manifest.json").exists()
        records = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
        assert [r["phase"] for r in records] == ["pretrain"] * 2 + ["joint"] * 3
        assert [r["step"] for r in records] == [0, 1, 0, 1, 2]
        assert all(r["wall_ms"] is None for r in records)
        ck = load_checkpoint(run / "checkpoint")
        assert set(ck.networks) == {"f1", "f2"}
        assert ck.progress == {"phase": "joint", "step": 3}

    def test_pretrain_only(self, dataset, tmp_path):
        out = tmp_path / "p"
        assert main(["train", "--data", str(dataset), "--out", str(out), "--pretrain-only"] + TINY) == 0
        ck = load_checkpoint(out / "checkpoint")
        assert set(ck.networks) == {"f1"}
        assert len((out / "train_log.jsonl").read_text().splitlines()) == 2

    def test_resume_zero_steps_identical(self, run, dataset, tmp_path):
        src = tmp_path / "src"
        shutil.copytree(run / "checkpoint", src)
        out = tmp_path / "resumed"
        assert main(["train", "--data", str(dataset), "--out", str(out), "--resume", str(src)] + TINY) == 0
        for f in ("manifest.json", "params.bin"):
            assert (out / "checkpoint" / f).read_bytes() == (src / f).read_bytes()

    def test_resume_from_pretrain_continues(self, dataset, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--data", str(dataset), "--out", str(a), "--pretrain-only"] + TINY) == 0
        assert main(["train", "--data", str(dataset), "--out", str(b), "--resume",
                     str(a / "checkpoint")] + TINY) == 0
        assert load_checkpoint(b / "checkpoint").progress["phase"] == "joint"
        assert len((b / "train_log.jsonl").read_text().splitlines()) == 3

    def test_corrupt_resume_refused(self, run, dataset, tmp_path, capsys):
        bad = tmp_path / "bad"
        shutil.copytree(run / "checkpoint", bad)
        raw = bytearray((bad / "params.bin").read_bytes())
        raw[-1] ^= 1
        (bad / "params.bin").write_bytes(bytes(raw))
        code = main(["train", "--data", str(dataset), "--out", str(tmp_path / "o"), "--resume", str(bad)] + TINY)
        assert code != 0
        assert "integrity" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")] + TINY) != 0


class TestInfer:
    def test_zero_checkpoint_golden(self, tmp_path):
        write_zero_checkpoint(tmp_path / "zero")
        rng = np.random.default_rng(0)
        img = rng.random((16, 24, 3))
        write_ppm(tmp_path / "in.ppm", img)
        assert main(["infer", "--ckpt", str(tmp_path / "zero"), "--in", str(tmp_path / "in.ppm"),
                     "--out", str(tmp_path / "out.ppm")]) == 0
        x = read_ppm(tmp_path / "in.ppm").transpose(2, 0, 1)[None]
        with nx.precision(32):
            expected = domain_transfer(nx.Tensor(x), DomainTransferParams()).data[0].transpose(1, 2, 0)
        write_ppm(tmp_path / "golden.ppm", expected)
        assert (tmp_path / "out.ppm").read_bytes() == (tmp_path / "golden.ppm").read_bytes()

    def test_pad_and_crop(self, run, tmp_path):
        img = np.random.default_rng(1).random((21, 30, 3))
        write_ppm(tmp_path / "odd.ppm", img)
        assert main(["infer", "--ckpt", str(run / "checkpoint"), "--in", str(tmp_path / "odd.ppm"),
                     "--out", str(tmp_path / "o.ppm"), "--dump-hdr", str(tmp_path / "s.pfm")]) == 0
        out = read_ppm(tmp_path / "o.ppm")
        assert out.shape == (21, 30, 3)
        hdr = read_pfm(tmp_path / "s.pfm")
        assert hdr.shape == (21, 30, 3) and hdr.min() >= 0

    def test_reflect_pad(self):
        img = np.arange(5 * 6 * 3, dtype=float).reshape(5, 6, 3)
        padded, (h, w) = reflect_pad(img, 4)
        assert padded.shape == (8, 8, 3) and (h, w) == (5, 6)
        npt.assert_array_equal(padded[:5, :6], img)
        npt.assert_array_equal(padded[5, :6], img[3])
        npt.assert_array_equal(padded[:5, 6], img[:, 4])

    def test_pretrain_only_checkpoint_rejected(self, dataset, tmp_path, capsys):
        out = tmp_path / "p"
        main(["train", "--data", str(dataset), "--out", str(out), "--pretrain-only"] + TINY)
        write_ppm(tmp_path / "i.ppm", np.zeros((8, 8, 3)))
        assert main(["infer", "--ckpt", str(out / "checkpoint"), "--in", str(tmp_path / "i.ppm"),
                     "--out", str(tmp_path / "o.ppm")]) != 0
        assert "f2" in capsys.readouterr().err

    def test_spec_mismatch_names_layer(self, tmp_path, capsys):
        write_zero_checkpoint(tmp_path / "ck")
        path = tmp_path / "ck" / "manifest.json"
        manifest = json.loads(path.read_text())
        manifest["networks"]["f2"] = encoder_decoder_spec((16, 8, 32, 32)).to_dict()
        path.write_text(json.dumps(manifest))
        write_ppm(tmp_path / "i.ppm", np.zeros((8, 8, 3)))
        assert main(["infer", "--ckpt", str(tmp_path / "ck"), "--in", str(tmp_path / "i.ppm"),
                     "--out", str(tmp_path / "o.ppm")]) != 0
        assert "layer enc1" in capsys.readouterr().err

    def test_unreadable_input(self, tmp_path):
        write_zero_checkpoint(tmp_path / "ck")
        assert main(["infer", "--ckpt", str(tmp_path / "ck"), "--in", str(tmp_path / "none.ppm"),
                     "--out", str(tmp_path / "o.ppm")]) != 0


class TestEval:
    def pairs(self, tmp_path, entries):
        path = tmp_path / "pairs.json"
        path.write_text(json.dumps({"pairs": entries}))
        return path

    def test_identical_pairs(self, tmp_path):
        img = np.random.default_rng(2).random((40, 40, 3))
        write_ppm(tmp_path / "a.ppm", img)
        manifest = self.pairs(tmp_path, [{"test": "a.ppm", "reference": "a.ppm"}])
        assert main(["eval", "--pairs", str(manifest), "--report", str(tmp_path / "r.json")]) == 0
        report = json.loads((tmp_path / "r.json").read_text())
        entry = report["per_image"][0]
        assert entry["psnr"] == 99.0
        assert entry["ssim"] == pytest.approx(1.0, abs=1e-12)
        assert entry["fsim"] == pytest.approx(1.0, abs=1e-9)

    def test_mean_and_partial_failure(self, tmp_path):
        rng = np.random.default_rng(3)
        ref = rng.random((40, 40, 3))
        write_ppm(tmp_path / "ref.ppm", ref)
        write_ppm(tmp_path / "b.ppm", np.clip(ref + 0.05, 0, 1))
        write_ppm(tmp_path / "c.ppm", np.clip(ref - 0.1, 0, 1))
        manifest = self.pairs(tmp_path, [
            {"test": "b.ppm", "reference": "ref.ppm"},
            {"test": "c.ppm", "reference": "ref.ppm"},
            {"test": "gone.ppm", "reference": "ref.ppm"},
        ])
        assert main(["eval", "--pairs", str(manifest), "--report", str(tmp_path / "r.json")]) == 0
        report = json.loads((tmp_path / "r.json").read_text())
        ok = [e for e in report["per_image"] if "error" not in e]
        assert len(ok) == 2 and "error" in report["per_image"][2]
        for k in ("psnr", "ssim", "fsim"):
            assert report["mean"][k] == pytest.approx(sum(e[k] for e in ok) / 2, abs=1e-12)

    def test_all_fail(self, tmp_path):
        manifest = self.pairs(tmp_path, [{"test": "x.ppm", "reference": "y.ppm"}])
        assert main(["eval", "--pairs", str(manifest), "--report", str(tmp_path / "r.json")]) != 0

    def test_dimension_mismatch_recorded(self, tmp_path):
        write_ppm(tmp_path / "a.ppm", np.zeros((40, 40, 3)))
        write_ppm(tmp_path / "b.ppm", np.zeros((40, 48, 3)))
        manifest = self.pairs(tmp_path, [{"test": "a.ppm", "reference": "b.ppm"}])
        assert main(["eval", "--pairs", str(manifest), "--report", str(tmp_path / "r.json")]) != 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert "dimensions" in report["per_image"][0]["error"]

    def test_empty_manifest(self, tmp_path, capsys):
        manifest = self.pairs(tmp_path, [])
        assert main(["eval", "--pairs", str(manifest), "--report", str(tmp_path / "r.json")]) != 0
        assert "empty" in capsys.readouterr().err
