import hashlib
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ptasyn import cli, data, nets

TINY = [
    "--set", "phantom.image_size=32",
    "--set", "phantom.num_volumes=2",
    "--set", "phantom.slices_per_volume=4",
    "--set", "network.base_channels=4",
    "--set", "network.embed_dim=8",
    "--set", "metrics.msssim_scales=2",
    "--set", "metrics.extractor_steps=8",
    "--set", "metrics.extractor_volumes_per_class=1",
    "--set", "metrics.extractor_slices_per_volume=2",
    "--set", "metrics.is_splits=2",
]


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom")
    code = run_cli("phantom", "--out", str(out), *TINY)
    assert code == 0
    return out


@pytest.fixture(scope="module")
def sgp_run(tmp_path_factory, phantom_dir):
    out = tmp_path_factory.mktemp("sgp")
    code = run_cli("train", "--stage", "sgp", "--lf", str(phantom_dir / "lf"),
                   "--hf", str(phantom_dir / "hf"), "--out", str(out),
                   "--set", "train.iterations=3", "--set", "train.batch_size=4", *TINY)
    assert code == 0
    return out


@pytest.fixture(scope="module")
def lsc_run(tmp_path_factory, phantom_dir):
    out = tmp_path_factory.mktemp("lsc")
    code = run_cli("train", "--stage", "lsc", "--hf", str(phantom_dir / "hf"),
                   "--out", str(out),
                   "--set", "train.iterations=3", "--set", "train.batch_size=4", *TINY)
    assert code == 0
    return out


@pytest.fixture(scope="module")
def pta_run(tmp_path_factory, phantom_dir, sgp_run, lsc_run):
    out = tmp_path_factory.mktemp("pta")
    code = run_cli("train", "--stage", "pta", "--lf", str(phantom_dir / "lf"),
                   "--hf", str(phantom_dir / "hf"),
                   "--encoder", str(sgp_run / "encoder.ckpt"),
                   "--pretext", str(lsc_run / "pretext.ckpt"),
                   "--out", str(out),
                   "--set", "train.iterations=3", "--set", "train.batch_size=2", *TINY)
    assert code == 0
    return out


class TestPhantomCommand:
    def test_writes_paired_datasets(self, phantom_dir):
        hf = data.load_dataset(phantom_dir / "hf")
        lf = data.load_dataset(phantom_dir / "lf")
        assert len(hf) == len(lf) == 8
        pairing = data.load_pairing_manifest(phantom_dir / "pairing.json")
        assert len(pairing) == 8
        assert (phantom_dir / "config.resolved.json").exists()

    def test_idempotent_manifests(self, phantom_dir, tmp_path):
        code = run_cli("phantom", "--out", str(tmp_path / "again"), *TINY)
        assert code == 0
        a = (phantom_dir / "hf" / "manifest.json").read_bytes()
        b = (tmp_path / "again" / "hf" / "manifest.json").read_bytes()
        assert hashlib.sha256(a).hexdigest() == hashlib.sha256(b).hexdigest()

    def test_invalid_divisibility_exits_2(self, tmp_path, capsys):
        code = run_cli("phantom", "--out", str(tmp_path / "bad"),
                       "--set", "phantom.image_size=30")
        assert code == 2
        assert "image_size" in capsys.readouterr().err

    def test_unknown_key_exits_2(self, tmp_path, capsys):
        code = run_cli("phantom", "--out", str(tmp_path / "bad"),
                       "--set", "phantom.bogus_knob=1")
        assert code == 2
        assert "bogus_knob" in capsys.readouterr().err

    def test_previews_flag(self, tmp_path):
        code = run_cli("phantom", "--out", str(tmp_path / "prev"), "--previews", *TINY)
        assert code == 0
        assert (tmp_path / "prev" / "hf_montage.png").exists()
        assert (tmp_path / "prev" / "lf_montage.png").exists()


class TestTrainCommand:
    def test_zero_iterations_checkpoint_equals_seeded_init(self, tmp_path, phantom_dir):
        out = tmp_path / "sgp0"
        code = run_cli("train", "--stage", "sgp", "--lf", str(phantom_dir / "lf"),
                       "--hf", str(phantom_dir / "hf"), "--out", str(out),
                       "--set", "train.iterations=0", "--set", "train.batch_size=4", *TINY)
        assert code == 0
        manifest, tensors = nets.load_checkpoint(out / "encoder.ckpt")
        fresh = nets.NetworkBundle(nets.network_config_from_manifest(manifest)).encoder
        for name, param in fresh.named_parameters():
            assert np.array_equal(tensors[f"encoder.{name}"].numpy(),
                                  param.detach().numpy())

    def test_outputs_present(self, sgp_run):
        assert (sgp_run / "encoder.ckpt").exists()
        assert (sgp_run / "log.csv").exists()
        assert (sgp_run / "loss_curves.png").exists()
        assert (sgp_run / "summary.json").exists()
        resolved = json.loads((sgp_run / "config.resolved.json").read_text())
        assert resolved["train"]["iterations"] == 3
        assert resolved["train"]["stage"] == "sgp"

    def test_pta_without_encoder_exits_2(self, tmp_path, phantom_dir, lsc_run, capsys):
        code = run_cli("train", "--stage", "pta", "--lf", str(phantom_dir / "lf"),
                       "--hf", str(phantom_dir / "hf"),
                       "--pretext", str(lsc_run / "pretext.ckpt"),
                       "--out", str(tmp_path / "x"),
                       "--set", "train.iterations=1", *TINY)
        assert code == 2
        assert "encoder" in capsys.readouterr().err

    def test_pta_outputs(self, pta_run):
        assert (pta_run / "pta.ckpt").exists()
        log = (pta_run / "log.csv").read_text().splitlines()
        assert log[0].split(",")[:4] == ["iteration", "sgp", "lsc", "syn"]
        assert len(log) == 4   # header + 3 iterations

    def test_wrong_stage_checkpoint_exits_2(self, tmp_path, phantom_dir, sgp_run, lsc_run, capsys):
        code = run_cli("train", "--stage", "pta", "--lf", str(phantom_dir / "lf"),
                       "--hf", str(phantom_dir / "hf"),
                       "--encoder", str(lsc_run / "pretext.ckpt"),
                       "--pretext", str(lsc_run / "pretext.ckpt"),
                       "--out", str(tmp_path / "x"),
                       "--set", "train.iterations=1", *TINY)
        assert code == 2
        assert "stage" in capsys.readouterr().err


class TestSynthCommand:
    def test_synthesis_outputs(self, tmp_path, phantom_dir, pta_run):
        out = tmp_path / "synth"
        code = run_cli("synth", "--checkpoint", str(pta_run / "pta.ckpt"),
                       "--lf", str(phantom_dir / "lf"), "--out", str(out))
        assert code == 0
        ds = data.load_dataset(out / "synth")
        lf = data.load_dataset(phantom_dir / "lf")
        assert len(ds) == len(lf)
        assert ds.normalization == data.RANGE_SIGNED
        assert ds.provenance is not None
        assert "generator_checkpoint_sha256" in ds.provenance
        assert not list(out.glob("*.png"))    # previews off by default

    def test_rerun_bit_identical(self, tmp_path, phantom_dir, pta_run):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run_cli("synth", "--checkpoint", str(pta_run / "pta.ckpt"),
                           "--lf", str(phantom_dir / "lf"), "--out", str(out)) == 0
            outs.append((out / "synth" / "manifest.json").read_bytes())
        assert outs[0] == outs[1]

    def test_previews_flag_emits_pngs(self, tmp_path, phantom_dir, pta_run):
        out = tmp_path / "withprev"
        assert run_cli("synth", "--checkpoint", str(pta_run / "pta.ckpt"),
                       "--lf", str(phantom_dir / "lf"), "--out", str(out),
                       "--previews") == 0
        assert (out / "synth_montage.png").exists()
        assert len(list((out / "previews").glob("*.png"))) == 8

    def test_dimension_mismatch_exits_2(self, tmp_path, pta_run, capsys):
        other = tmp_path / "otherphantom"
        assert run_cli("phantom", "--out", str(other), *TINY,
                       "--set", "phantom.image_size=64") == 0
        code = run_cli("synth", "--checkpoint", str(pta_run / "pta.ckpt"),
                       "--lf", str(other / "lf"), "--out", str(tmp_path / "x"))
        assert code == 2
        assert "image_size" in capsys.readouterr().err


class TestEvalCommand:
    def test_self_evaluation_fid_zero(self, tmp_path, phantom_dir, capsys):
        out = tmp_path / "eval"
        code = run_cli("eval", "--generated", str(phantom_dir / "hf"),
                       "--reference", str(phantom_dir / "hf"),
                       "--out", str(out), "--paired",
                       "--pairing", str(phantom_dir / "pairing.json"),
                       "--extractor-cache", str(tmp_path / "cache"), *TINY)
        assert code == 0
        printed = capsys.readouterr().out
        assert "0.000" in printed
        report = json.loads((out / "report.json").read_text())
        assert report["fid"] == pytest.approx(0.0, abs=1e-6)
        assert report["msssim_mean"] == pytest.approx(1.0, abs=1e-6)
        csv_lines = (out / "report.csv").read_text().splitlines()
        header = csv_lines[0].split(",")
        row = csv_lines[1].split(",")
        for key, value in zip(header, row):
            if key in ("extractor_id", "msssim_mode"):
                assert str(report[key]) == value
            elif key in ("n_generated", "n_reference"):
                assert report[key] == int(value)
            else:
                assert report[key] == pytest.approx(float(value), abs=1e-12)
        assert (out / "metrics.png").exists()

    def test_paired_without_manifest_exits_2(self, tmp_path, phantom_dir, capsys):
        code = run_cli("eval", "--generated", str(phantom_dir / "hf"),
                       "--reference", str(phantom_dir / "hf"),
                       "--out", str(tmp_path / "x"), "--paired", *TINY)
        assert code == 2
        assert "pairing" in capsys.readouterr().err

    def test_missing_dataset_exits_2(self, tmp_path, phantom_dir):
        code = run_cli("eval", "--generated", str(tmp_path / "nothing"),
                       "--reference", str(phantom_dir / "hf"),
                       "--out", str(tmp_path / "x"), *TINY)
        assert code == 2


class TestSelftestCommand:
    def test_clean_run_exits_0(self):
        assert run_cli("selftest") == 0

    def test_injected_fault_detected(self, capsys):
        assert run_cli("selftest", "--inject-fault", "rotation-convention") == 1
        assert "rotation-convention" in capsys.readouterr().out


class TestOutRootEnv:
    def test_relative_out_resolves_under_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PTASYN_OUT_ROOT", str(tmp_path))
        code = run_cli("phantom", "--out", "nested/run", *TINY)
        assert code == 0
        assert (tmp_path / "nested" / "run" / "hf" / "manifest.json").exists()


def test_module_invocation_smoke():
    proc = subprocess.run(
        [sys.executable, "-m", "ptasyn", "selftest"],
        capture_output=True, text=True, timeout=300,
    )
    assert proc.returncode == 0
    assert "[ok]" in proc.stdout
