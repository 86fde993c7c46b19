import numpy as np
import pytest

from sadnet.checkpoint import save_checkpoint
from sadnet.cli import main
from sadnet.data import load_image, read_manifest, save_image
from sadnet.model import SADNet
from sadnet.optim import AdamState

from conftest import synth_buffer
from test_model import micro_config


@pytest.fixture
def micro_ckpt(tmp_path):
    model = SADNet(micro_config(), rng=np.random.default_rng(0),
                   dtype=np.float32)
    path = tmp_path / "model.sadn"
    save_checkpoint(path, model, AdamState(), 0)
    return str(path)


@pytest.fixture
def corpus(rng, tmp_path):
    clean_dir = tmp_path / "clean"
    clean_dir.mkdir()
    for i in range(3):
        save_image(synth_buffer(rng, 32), clean_dir / f"img{i}.pgm")
    return clean_dir


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestInspect:
    def test_stock_model_constants(self, capsys):
        code, out, _ = run(capsys, "inspect")
        assert code == 0
        fields = dict(line.split("\t") for line in out.splitlines())
        assert fields["scales"] == "4"
        assert fields["channels_per_scale"] == "32,64,128,256"
        assert fields["rsabs_per_scale"] == "1"
        assert fields["context_dilations"] == "1,2,3,4"
        assert fields["context_compression"] == "4"
        assert fields["kernel_size"] == "3"
        assert fields["updown_kernel"] == "2"
        assert fields["head_tail_kernel"] == "1"
        params = int(fields["params"])
        flops = int(fields["flops"])
        assert abs(params - 4_321_000) / 4_321_000 < 0.25
        assert abs(flops - 50.1e9) / 50.1e9 < 0.30

    def test_custom_size_changes_flops_not_params(self, capsys):
        _, out1, _ = run(capsys, "inspect", "--height", "64", "--width", "64")
        _, out2, _ = run(capsys, "inspect")
        f1 = dict(l.split("\t") for l in out1.splitlines())
        f2 = dict(l.split("\t") for l in out2.splitlines())
        assert f1["params"] == f2["params"]
        assert int(f1["flops"]) < int(f2["flops"])


class TestPipeline:
    def test_make_noisy_then_eval_then_denoise(self, capsys, tmp_path,
                                               micro_ckpt, corpus):
        noisy_dir = tmp_path / "noisy"
        code, out, _ = run(capsys, "make-noisy", "--in-dir", str(corpus),
                           "--out-dir", str(noisy_dir), "--sigma", "25",
                           "--seed", "3")
        assert code == 0
        manifest = noisy_dir / "manifest.tsv"
        assert manifest.exists()
        assert len(read_manifest(manifest)) == 3

        code, out, _ = run(capsys, "eval", "--ckpt", micro_ckpt,
                           "--manifest", str(manifest), "--tsv")
        assert code == 0
        lines = out.splitlines()
        assert lines[0] == "name\tpsnr_db\tssim"
        assert lines[-1].startswith("mean\t")
        # identity-initialized model: PSNR of noisy vs clean at sigma 25
        mean_psnr = float(lines[-1].split("\t")[1])
        assert 18 < mean_psnr < 23

        out_img = tmp_path / "denoised.pgm"
        code, _, _ = run(capsys, "denoise", "--ckpt", micro_ckpt,
                         "--in", str(next(noisy_dir.glob("*.pgm"))),
                         "--out", str(out_img))
        assert code == 0
        assert load_image(out_img).width == 32

    def test_export_offsets(self, capsys, tmp_path, micro_ckpt, corpus):
        out_csv = tmp_path / "offsets.csv"
        code, out, _ = run(capsys, "export-offsets", "--ckpt", micro_ckpt,
                           "--in", str(next(corpus.glob("*.pgm"))),
                           "--out", str(out_csv), "--points", "2")
        assert code == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "scale,py,px,k,sample_y,sample_x,modulation"
        assert len(lines) == 1 + 2 * 4 * 9  # scales x grid x taps

    def test_train_command(self, capsys, tmp_path, corpus):
        noisy_dir = tmp_path / "noisy"
        run(capsys, "make-noisy", "--in-dir", str(corpus),
            "--out-dir", str(noisy_dir), "--sigma", "25")
        cfg = tmp_path / "train.cfg"
        cfg.write_text(
            "in_channels = 1\nscales = 2\nchannels_per_scale = 4,8\n"
            "context_compression = 4\npatch_size = 16\nbatch_size = 2\n"
            "max_iters = 4\ncheckpoint_interval = 2\nlog_interval = 2\n"
            f"manifest = {noisy_dir / 'manifest.tsv'}\n"
            f"checkpoint_dir = {tmp_path / 'ckpt'}\n")
        code, out, err = run(capsys, "train", "--config", str(cfg))
        assert code == 0
        assert "ckpt_final.sadn" in err
        assert (tmp_path / "ckpt" / "ckpt_final.sadn").exists()
        assert len(out.splitlines()) == 2  # iterations 2 and 4 logged


class TestExitCodes:
    def test_usage_error_is_1(self, capsys, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("bogus_key = 1\n")
        code, _, err = run(capsys, "train", "--config", str(cfg))
        assert code == 1
        assert "bogus_key" in err

    def test_missing_required_flag_is_1(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["denoise", "--ckpt", "x.sadn"])
        assert exc.value.code == 1
        capsys.readouterr()

    def test_data_error_is_2(self, capsys, tmp_path):
        code, _, err = run(capsys, "denoise", "--ckpt",
                           str(tmp_path / "missing.sadn"),
                           "--in", "a.pgm", "--out", "b.pgm")
        assert code == 2
        assert "missing.sadn" in err

    def test_corrupt_image_is_2(self, capsys, tmp_path, micro_ckpt):
        bad = tmp_path / "bad.pgm"
        bad.write_bytes(b"JUNK")
        code, _, err = run(capsys, "denoise", "--ckpt", micro_ckpt,
                           "--in", str(bad), "--out", str(tmp_path / "o.pgm"))
        assert code == 2


class TestGradcheckCommand:
    def test_ops_scope_passes(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--scope", "ops")
        assert code == 0
        lines = out.splitlines()
        assert lines[-1].startswith("PASS")
        assert all("ok" in l or l.startswith("PASS") for l in lines)
