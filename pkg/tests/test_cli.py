"""
End-to-end tests of the stoic command line through main(argv)
"""

import pytest

from stoic_diffusion import cli
from stoic_diffusion.__main__ import main
from stoic_diffusion.arch import ContextSpec, StoicConfig
from stoic_diffusion.checkpoint import load_checkpoint
from stoic_diffusion.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_GRADCHECK, EXIT_OK, reduced_config

CONDITIONAL_CONFIG_TEXT = """
[model]
image_dims = 1,8,8
embed_dim = 16
num_blocks = 1
conditional = true
context_tokens = 4
token_dim = 2

[diffusion]
num_steps = 10
beta_start = 1e-3
beta_end = 0.2

[train]
batch_size = 4
steps = 2
guidance_training = true

[data]
n = 8
conditional = true
"""


@pytest.fixture
def trained(tmp_path, write_config):
    """Run ``stoic train`` on the tiny config and return the output directory"""
    out = tmp_path / "run"
    assert main(["train", "--config", str(write_config()), "--out", str(out), "--no-progress"]) == EXIT_OK
    return out


def _sample(checkpoint, out, *extra):
    return main(["sample", "--checkpoint", str(checkpoint), "--out", str(out), "--no-progress", *extra])


# =============================================================================
# Global options
# =============================================================================


class TestGlobal:
    def test_help(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["--help"])
        assert info.value.code == 0
        out = capsys.readouterr().out
        assert "exit codes" in out
        assert "embed_dim" in out

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["--version"])
        assert info.value.code == 0
        assert "stoic" in capsys.readouterr().out

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit) as info:
            main([])
        assert info.value.code == 2


# =============================================================================
# train
# =============================================================================


class TestTrain:
    def test_outputs(self, trained):
        lines = (trained / "metrics.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == 5
        assert load_checkpoint(trained / "final.stoi").step == 4

    def test_zero_steps(self, tmp_path, write_config, tiny_config_text):
        config = write_config(tiny_config_text.replace("steps = 4", "steps = 0"))
        assert main(["train", "--config", str(config), "--out", str(tmp_path / "run"), "--no-progress"]) == EXIT_OK
        assert (tmp_path / "run" / "metrics.csv").read_text(encoding="utf-8") == "step,loss\n"

    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path / "run")]) == EXIT_CONFIG

    def test_invalid_config(self, tmp_path, write_config):
        config = write_config("[model]\nembed_dim = wide\n")
        assert main(["train", "--config", str(config), "--out", str(tmp_path / "run")]) == EXIT_CONFIG

    def test_resume(self, tmp_path, trained, write_config, tiny_config_text):
        longer = write_config(tiny_config_text.replace("steps = 4", "steps = 6"), name="longer.cfg")
        code = main(["train", "--config", str(longer), "--out", str(trained), "--no-progress",
                     "--resume", str(trained / "final.stoi")])
        assert code == EXIT_OK
        assert load_checkpoint(trained / "final.stoi").step == 6
        assert len((trained / "metrics.csv").read_text(encoding="utf-8").splitlines()) == 7


# =============================================================================
# sample
# =============================================================================


class TestSample:
    def test_reproducible(self, tmp_path, trained):
        for name in ("a", "b"):
            assert _sample(trained / "final.stoi", tmp_path / name, "--count", "3", "--steps", "5") == EXIT_OK
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == ["sample_00000.ppm", "sample_00001.ppm", "sample_00002.ppm"]
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            assert (tmp_path / "a" / name).read_bytes().startswith(b"P6\n8 8\n255\n")

    def test_euler_maruyama_png(self, tmp_path, trained):
        code = _sample(trained / "final.stoi", tmp_path / "out", "--count", "1", "--steps", "5",
                       "--sampler", "em", "--format", "png")
        assert code == EXIT_OK
        assert (tmp_path / "out" / "sample_00000.png").exists()

    def test_zero_count(self, tmp_path, trained):
        assert _sample(trained / "final.stoi", tmp_path / "out", "--count", "0") == EXIT_OK
        assert list((tmp_path / "out").iterdir()) == []

    def test_negative_count(self, tmp_path, trained):
        assert _sample(trained / "final.stoi", tmp_path / "out", "--count", "-1") == EXIT_CONFIG

    def test_mismatched_config(self, tmp_path, trained, write_config, tiny_config_text):
        wider = write_config(tiny_config_text.replace("embed_dim = 16", "embed_dim = 32"), name="wide.cfg")
        assert _sample(trained / "final.stoi", tmp_path / "out", "--config", str(wider)) == EXIT_CHECKPOINT

    def test_corrupt_checkpoint(self, tmp_path, trained):
        data = bytearray((trained / "final.stoi").read_bytes())
        data[-1] ^= 0xFF
        broken = tmp_path / "broken.stoi"
        broken.write_bytes(bytes(data))
        assert _sample(broken, tmp_path / "out") == EXIT_CHECKPOINT

    def test_mode_needs_conditional_model(self, tmp_path, trained):
        assert _sample(trained / "final.stoi", tmp_path / "out", "--mode", "1") == EXIT_CONFIG

    def test_sample_section_sets_defaults(self, tmp_path, trained, write_config, tiny_config_text, monkeypatch):
        seen = {}
        real_sample = cli.sample

        def recording_sample(net, sched, **kwargs):
            seen.update(kwargs)
            return real_sample(net, sched, **kwargs)

        monkeypatch.setattr(cli, "sample", recording_sample)
        config = write_config(
            tiny_config_text + "\n[sample]\nsampler = em\nsteps = 3\ncount = 2\nseed = 7\nformat = png\n",
            name="sampling.cfg",
        )
        assert _sample(trained / "final.stoi", tmp_path / "out", "--config", str(config)) == EXIT_OK
        assert (seen["sampler"], seen["steps"], seen["count"], seen["seed"]) == ("em", 3, 2, 7)
        assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["sample_00000.png", "sample_00001.png"]

    def test_flags_override_sample_section(self, tmp_path, trained, write_config, tiny_config_text):
        config = write_config(tiny_config_text + "\n[sample]\nsteps = 3\ncount = 5\n", name="sampling.cfg")
        code = _sample(trained / "final.stoi", tmp_path / "out", "--config", str(config), "--count", "1")
        assert code == EXIT_OK
        assert [p.name for p in (tmp_path / "out").iterdir()] == ["sample_00000.ppm"]

    def test_conditional_with_guidance(self, tmp_path, write_config):
        config = write_config(CONDITIONAL_CONFIG_TEXT, name="cond.cfg")
        out = tmp_path / "cond"
        assert main(["train", "--config", str(config), "--out", str(out), "--no-progress"]) == EXIT_OK
        code = _sample(out / "final.stoi", tmp_path / "images", "--count", "2", "--steps", "3",
                       "--mode", "1", "--guidance", "3.0")
        assert code == EXIT_OK
        assert len(list((tmp_path / "images").iterdir())) == 2


# =============================================================================
# analyze / inspect
# =============================================================================


class TestAnalyze:
    def test_single_configuration(self, tmp_path, capsys):
        out = tmp_path / "table.csv"
        assert main(["analyze", "--out", str(out)]) == EXIT_OK
        assert len(out.read_text(encoding="utf-8").splitlines()) == 2
        assert "gmacs" in capsys.readouterr().out

    def test_sweep(self, tmp_path):
        out = tmp_path / "sweep.csv"
        assert main(["analyze", "--preset", "cifar10_s2", "--sweep", "L=256,512;N=12,24,32", "--out", str(out)]) == 0
        assert len(out.read_text(encoding="utf-8").splitlines()) == 7

    def test_from_config(self, tmp_path, write_config):
        out = tmp_path / "table.csv"
        assert main(["analyze", "--config", str(write_config()), "--out", str(out)]) == EXIT_OK
        assert out.read_text(encoding="utf-8").splitlines()[1].startswith("S2,16,2,")

    def test_malformed_sweep(self, tmp_path):
        assert main(["analyze", "--sweep", "L=abc", "--out", str(tmp_path / "x.csv")]) == EXIT_CONFIG


class TestInspect:
    def test_config(self, write_config, capsys):
        assert main(["inspect", "--config", str(write_config())]) == EXIT_OK
        out = capsys.readouterr().out
        assert '"embed_dim": 16' in out
        assert "GMAC:" in out

    def test_checkpoint(self, trained, capsys):
        capsys.readouterr()
        assert main(["inspect", "--checkpoint", str(trained / "final.stoi")]) == EXIT_OK
        out = capsys.readouterr().out
        assert "step: 4" in out
        assert "block1/attn/qkv" in out


# =============================================================================
# gradcheck
# =============================================================================


class TestGradcheck:
    def test_default_passes(self, capsys):
        assert main(["gradcheck"]) == EXIT_OK
        assert "max_rel_error" in capsys.readouterr().out

    def test_corrupted_backward_fails(self):
        assert main(["gradcheck", "--corrupt-backward"]) == EXIT_GRADCHECK

    def test_non_square_image(self, write_config):
        config = write_config("[model]\nimage_dims = 1,4,6\nembed_dim = 16\nnum_blocks = 2\n", name="wide.cfg")
        assert main(["gradcheck", "--config", str(config)]) == EXIT_OK

    def test_conditional_model(self, write_config):
        config = write_config(CONDITIONAL_CONFIG_TEXT, name="cond.cfg")
        assert main(["gradcheck", "--config", str(config), "--max-coords", "4"]) == EXIT_OK

    def test_reduced_config(self):
        reduced = reduced_config(StoicConfig(context=ContextSpec(77, 768)))
        assert (reduced.embed_dim, reduced.num_blocks, reduced.image_dims) == (16, 2, (3, 4, 4))
        assert reduced.context == ContextSpec(4, 4)
        assert reduced.heads == 1
