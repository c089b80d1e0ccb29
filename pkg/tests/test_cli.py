import sys

import numpy as np
import pytest

from gridpure.cli import main
from gridpure.corpus import make_corpus, write_corpus
from gridpure.diffusion import AffineDenoiser
from gridpure.imagecore import load_image, save_image


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    corpus = make_corpus(n_images=2, size=16, seed=3)
    dataset, clean = write_corpus(corpus, root)
    return root, dataset, clean


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def _first(clean_dir):
    return sorted(clean_dir.glob("*.png"))[0]


def test_bad_flags_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["purify", "--bogus"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1


def test_missing_input_exit_3(capsys, tmp_path, desk):
    _, dataset, _ = desk
    code, _, err = run(capsys, "purify", "--input", tmp_path / "nope.png", "--output", tmp_path / "o.png",
                       "--denoiser", f"oracle:{dataset}")
    assert code == 3 and "nope.png" in err


def test_bad_denoiser_spec_exit_1(capsys, tmp_path, desk):
    _, _, clean = desk
    code, _, _ = run(capsys, "purify", "--input", _first(clean), "--output", tmp_path / "o.png", "--denoiser", "magic")
    assert code == 1


def test_backend_failure_exit_2(capsys, tmp_path, desk):
    _, _, clean = desk
    code, _, err = run(capsys, "purify", "--input", _first(clean), "--output", tmp_path / "o.png",
                       "--denoiser", "external:/nonexistent/denoiser", "--iters", 1)
    assert code == 2 and "cannot start" in err


def test_external_gradient_exit_4(capsys, tmp_path, desk):
    _, _, clean = desk
    code, _, err = run(capsys, "attack", "--input", _first(clean), "--output", tmp_path / "o.png",
                       "--denoiser", f"external:{sys.executable} -m gridpure.stub_denoiser --zero", "--steps", 1)
    assert code == 4 and "gradient unavailable" in err


def test_purify_gamma_one_keeps_bytes(capsys, tmp_path, desk):
    _, dataset, clean = desk
    src = _first(clean)
    out = tmp_path / "p.png"
    code, _, _ = run(capsys, "purify", "--input", src, "--output", out, "--denoiser", f"oracle:{dataset}",
                     "--gamma", 1.0, "--iters", 2)
    assert code == 0
    assert np.array_equal(load_image(out), load_image(src))
    assert out.read_bytes() == src.read_bytes()


def test_purify_defaults_reports_metrics_and_is_deterministic(capsys, tmp_path, desk):
    _, dataset, clean = desk
    src = _first(clean)
    outs = []
    for name in ("a.png", "b.png"):
        code, stdout, _ = run(capsys, "purify", "--method", "gridpure", "--iters", 10, "--steps", 10, "--gamma", 0.1,
                              "--input", src, "--output", tmp_path / name, "--denoiser", f"oracle:{dataset}",
                              "--reference", src, "--seed", 4)
        assert code == 0 and "ssim" in stdout and "psnr" in stdout
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]


def test_purify_diffpure(capsys, tmp_path, desk):
    _, dataset, clean = desk
    code, _, _ = run(capsys, "purify", "--method", "diffpure", "--steps", 50, "--substeps", 5,
                     "--input", _first(clean), "--output", tmp_path / "d.png", "--denoiser", f"oracle:{dataset}")
    assert code == 0 and (tmp_path / "d.png").is_file()


def _value(stdout, key):
    for line in stdout.splitlines():
        if line.startswith(key + " "):
            return line.split()[1]
    raise AssertionError(f"{key} missing from {stdout!r}")


def test_attack_advdm_reports_linf(capsys, tmp_path, desk):
    _, dataset, clean = desk
    code, stdout, _ = run(capsys, "attack", "--method", "advdm", "--budget", 0.0314, "--step", 0.0078, "--steps", 10,
                          "--input", _first(clean), "--output", tmp_path / "a.png", "--denoiser", f"oracle:{dataset}",
                          "--eval-samples", 64)
    assert code == 0
    # the stored 8-bit image may round half a level past the float budget
    assert float(_value(stdout, "linf")) <= 0.0314 + 0.5 / 255 + 1e-9
    assert float(_value(stdout, "loss_increase")) > 0


def test_attack_adaptive_reports_chained_steps(capsys, tmp_path, desk):
    _, dataset, clean = desk
    code, stdout, _ = run(capsys, "attack", "--method", "adaptive", "--p", 0.2, "--steps", 10, "--mc", 1,
                          "--input", _first(clean), "--output", tmp_path / "a.png", "--denoiser", f"oracle:{dataset}",
                          "--eval-samples", 16)
    assert code == 0
    k, n = _value(stdout, "chained_steps").split("/")
    assert n == "10" and 0 <= int(k) <= 10


def test_attack_zero_steps_is_identity(capsys, tmp_path, desk):
    _, dataset, clean = desk
    src = _first(clean)
    code, _, _ = run(capsys, "attack", "--steps", 0, "--input", src, "--output", tmp_path / "z.png",
                     "--denoiser", f"oracle:{dataset}", "--eval-samples", 8)
    assert code == 0
    assert (tmp_path / "z.png").read_bytes() == src.read_bytes()


def test_attack_eot_and_antidb(capsys, tmp_path, desk):
    _, dataset, clean = desk
    code, _, _ = run(capsys, "attack", "--method", "eot", "--steps", 2, "--mc", 2, "--input", _first(clean),
                     "--output", tmp_path / "e.png", "--denoiser", f"oracle:{dataset}", "--eval-samples", 8)
    assert code == 0
    inputs = sorted(clean.glob("*.png"))
    code, stdout, _ = run(capsys, "attack", "--method", "antidb", "--steps", 2, "--alternations", 2,
                          "--inner-steps", 3, "--t-range", 1, 10, "--input", *inputs, "--output", tmp_path / "adb",
                          "--surrogate-out", tmp_path / "s.npz", "--eval-samples", 8)
    assert code == 0
    assert sorted(p.name for p in (tmp_path / "adb").glob("*.png")) == [p.name for p in inputs]
    assert AffineDenoiser.load(tmp_path / "s.npz").timesteps == tuple(range(1, 11))
    assert "surrogate_loss_attacked" in stdout


def test_attack_rejects_bad_transform(capsys, tmp_path, desk):
    _, dataset, clean = desk
    code, _, err = run(capsys, "attack", "--method", "eot", "--transforms", "jpeg:40", "--steps", 1,
                       "--input", _first(clean), "--output", tmp_path / "e.png", "--denoiser", f"oracle:{dataset}")
    assert code == 1 and "not differentiable" in err


def test_transform_ops(capsys, tmp_path, desk):
    _, _, clean = desk
    src = _first(clean)
    assert run(capsys, "transform", "--op", "blur", "--kernel", 1, "--input", src, "--output", tmp_path / "k1.png")[0] == 0
    assert (tmp_path / "k1.png").read_bytes() == src.read_bytes()
    assert run(capsys, "transform", "--op", "blur", "--kernel", 7, "--sigma", 1.5, "--input", src,
               "--output", tmp_path / "b.png")[0] == 0
    assert run(capsys, "transform", "--op", "jpeg", "--quality", 40, "--input", src, "--output", tmp_path / "j.png")[0] == 0
    assert not np.array_equal(load_image(tmp_path / "j.png"), load_image(src))
    assert run(capsys, "transform", "--op", "blur", "--kernel", 4, "--input", src, "--output", tmp_path / "x.png")[0] == 1


def test_eval_identical_files(capsys, desk):
    _, _, clean = desk
    src = _first(clean)
    code, stdout, _ = run(capsys, "eval", "--input", src, "--reference", src)
    assert code == 0
    assert float(_value(stdout, "psnr")) == 99.0
    assert float(_value(stdout, "ssim")) == 1.0
    assert float(_value(stdout, "mse")) == 0.0


def test_eval_shape_mismatch_exit_1(capsys, tmp_path, desk):
    _, _, clean = desk
    other = tmp_path / "small.png"
    save_image(np.zeros((12, 12, 3)), other)
    assert run(capsys, "eval", "--input", _first(clean), "--reference", other)[0] == 1


def test_eval_eps_loss(capsys, desk):
    _, dataset, _ = desk
    member = sorted(dataset.glob("*.png"))[0]
    lines = []
    for _ in range(2):
        code, stdout, _ = run(capsys, "eval", "--metric", "eps-loss", "--input", member, "--denoiser",
                              f"oracle:{dataset}", "--samples", 64, "--seed", 9)
        assert code == 0
        lines.append(stdout)
    assert lines[0] == lines[1]
    fields = lines[0].split()
    assert fields[fields.index("samples") + 1] == "64" and fields[fields.index("seed") + 1] == "9"
    # a dataset member sits on the manifold; siblings only add a small mixture term
    assert float(_value(lines[0], "eps-loss")) < 0.05


def test_corpus_command(capsys, tmp_path):
    code, _, _ = run(capsys, "corpus", "--output", tmp_path / "c", "--n", 2, "--size", 12, "--siblings", 1)
    assert code == 0
    assert len(list((tmp_path / "c" / "dataset").glob("*.png"))) == 4
    assert len(list((tmp_path / "c" / "clean").glob("*.png"))) == 2
