import json

import numpy as np
import pytest
from PIL import Image

from deepcascade.cascade import build, save_model
from deepcascade.cli import main
from deepcascade.fileio import read_tensor, write_tensor
from deepcascade.kspace import dft2, idft2


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    summary = json.loads(out.out.strip().splitlines()[-1]) if out.out.strip() else None
    return code, summary, out.err


def test_mask_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.kt", tmp_path / "b.kt"
    for p in (a, b):
        code, s, _ = run(capsys, "mask", "--ny", 256, "--nt", 30, "--acc", 4, "--seed", 7, "--out", p)
        assert code == 0
    assert a.read_bytes() == b.read_bytes()
    m = read_tensor(a)
    assert m.shape == (256, 30) and set(np.unique(m)) == {0.0, 1.0}
    assert s["lines"] == 64 * 30


def test_missing_flag_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["mask", "--ny", "32", "--nt", "4", "--acc", "4", "--seed", "1"])
    assert exc.value.code == 2
    capsys.readouterr()


def test_infeasible_acceleration_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "mask", "--ny", 32, "--nt", 4, "--acc", 8, "--seed", 1, "--out", tmp_path / "m.kt")
    assert code == 2 and "infeasible" in err


def test_malformed_file_exit_3(tmp_path, capsys):
    bad = tmp_path / "bad.kt"
    bad.write_bytes(b"garbage")
    code, _, err = run(capsys, "render", "--in", bad, "--out", tmp_path / "x.png")
    assert code == 3 and "magic" in err
    code, _, _ = run(capsys, "render", "--in", tmp_path / "missing.kt", "--out", tmp_path / "x.png")
    assert code == 3


def test_undersample_parseval(tmp_path, capsys):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 16, 3)) + 1j * rng.standard_normal((8, 16, 3))
    write_tensor(tmp_path / "x.kt", x)
    run(capsys, "mask", "--ny", 16, "--nt", 3, "--acc", 2, "--seed", 0, "--out", tmp_path / "m.kt")
    code, _, _ = run(capsys, "undersample", "--in", tmp_path / "x.kt", "--mask", tmp_path / "m.kt", "--sigma2", 0, "--out", tmp_path / "s.kt")
    assert code == 0
    s0 = read_tensor(tmp_path / "s.kt")
    xu = idft2(s0)
    missing = dft2(x) - s0
    assert np.sum(np.abs(x - xu) ** 2) == pytest.approx(np.sum(np.abs(missing) ** 2), rel=1e-10)


def test_shape_mismatch_exit_4(tmp_path, capsys):
    write_tensor(tmp_path / "x.kt", np.zeros((8, 16, 3), complex))
    write_tensor(tmp_path / "m.kt", np.ones((12, 3), np.float32))
    code, _, err = run(capsys, "undersample", "--in", tmp_path / "x.kt", "--mask", tmp_path / "m.kt", "--out", tmp_path / "s.kt")
    assert code == 4 and "(12, 3)" in err
    write_tensor(tmp_path / "y.kt", np.zeros((8, 16, 2), complex))
    code, _, err = run(capsys, "eval", "--recon", tmp_path / "x.kt", "--gnd", tmp_path / "y.kt")
    assert code == 4 and "(8, 16, 3)" in err and "(8, 16, 2)" in err


def test_reconstruct_fully_sampled_hard_dc(tmp_path, capsys):
    model = build(n_d=2, n_c=2, n_f=4, data_sharing=True, dtype="float64")
    save_model(model, tmp_path / "m.kcsd")
    rng = np.random.default_rng(1)
    s = rng.standard_normal((8, 16, 4)) + 1j * rng.standard_normal((8, 16, 4))
    write_tensor(tmp_path / "s.kt", s)
    write_tensor(tmp_path / "mask.kt", np.ones((16, 4), np.float32))
    code, summary, _ = run(
        capsys, "reconstruct", "--model", tmp_path / "m.kcsd", "--kspace", tmp_path / "s.kt", "--mask", tmp_path / "mask.kt",
        "--out", tmp_path / "r.kt", "--stages-dir", tmp_path / "stages",
    )
    assert code == 0 and summary["stages"] == 2
    np.testing.assert_allclose(read_tensor(tmp_path / "r.kt"), idft2(s), atol=1e-10)
    assert (tmp_path / "stages" / "stage02.kt").exists()


def test_eval_identical_is_zero(tmp_path, capsys):
    write_tensor(tmp_path / "x.kt", np.ones((4, 4, 2), complex))
    code, summary, _ = run(capsys, "eval", "--recon", tmp_path / "x.kt", "--gnd", tmp_path / "x.kt", "--report", tmp_path / "r.csv")
    assert code == 0 and summary["mse_mean"] == 0.0
    assert (tmp_path / "r.csv").read_text().startswith("name,mse")


def test_gradcheck_command(capsys):
    code, s, err = run(capsys, "gradcheck", "--arch", "D2-C1", "--dims", "6x6x2", "--n-f", 2, "--batch", 1)
    assert code == 0 and s["passed"] and s["lambda"] == "n/a"
    assert "n/a" in err
    code, s, _ = run(capsys, "gradcheck", "--arch", "D2-C1", "--dims", "6x6x2", "--n-f", 2, "--batch", 1, "--tol", 0)
    assert code != 0 and not s["passed"]


def test_gradcheck_guard(capsys):
    code, _, err = run(capsys, "gradcheck", "--arch", "D5-C5", "--n-f", 64)
    assert code == 2 and "limited" in err
    code, _, _ = run(capsys, "gradcheck", "--dims", "8x8")
    assert code == 2


def test_render_constant_and_error(tmp_path, capsys):
    x = np.full((6, 5, 2), 0.3 + 0.4j)
    write_tensor(tmp_path / "x.kt", x)
    code, s, _ = run(capsys, "render", "--in", tmp_path / "x.kt", "--out", tmp_path / "c.png")
    img = np.asarray(Image.open(tmp_path / "c.png"))
    assert code == 0 and img.shape == (6, 5) and len(np.unique(img)) == 1
    assert s["min"] == pytest.approx(0.5) and s["max"] == pytest.approx(0.5)
    code, s, _ = run(capsys, "render", "--in", tmp_path / "x.kt", "--ref", tmp_path / "x.kt", "--out", tmp_path / "e.png")
    assert code == 0 and s["view"] == "error"
    assert np.all(np.asarray(Image.open(tmp_path / "e.png")) == 0)
    code, _, _ = run(capsys, "render", "--in", tmp_path / "x.kt", "--frame", 5, "--out", tmp_path / "e.png")
    assert code == 2


def test_render_profile_periodic(tmp_path, capsys):
    spec = tmp_path / "ph.cfg"
    spec.write_text("n_x = 32\nn_y = 32\nn_t = 16\nperiod = 8\npulsation = 0.2\n")
    run(capsys, "phantom", "--spec", spec, "--out", tmp_path / "p.kt")
    code, s, _ = run(capsys, "render", "--in", tmp_path / "p.kt", "--profile-y", 16, "--out", tmp_path / "p.png")
    img = np.asarray(Image.open(tmp_path / "p.png")).astype(int)
    assert code == 0 and img.shape == (32, 16)
    np.testing.assert_array_equal(img[:, :8], img[:, 8:])
    assert np.abs(img[:, 0] - img[:, 4]).max() > 10


def test_toy_pipeline(tmp_path, capsys):
    spec = tmp_path / "ph.cfg"
    spec.write_text("n_x = 16\nn_y = 32\nn_t = 4\ncount = 4\nseed = 2\n")
    code, s, _ = run(capsys, "phantom", "--spec", spec, "--out", tmp_path / "data")
    assert code == 0 and s["count"] == 4
    cfg = tmp_path / "train.cfg"
    cfg.write_text("arch = D2-C2\nn_f = 4\niters = 200\nlr = 1e-3\nacc = 4\nn_central = 4\nn_test = 1\neval_every = 100\nseed = 0\n")
    code, s, _ = run(capsys, "train", "--config", cfg, "--data-dir", tmp_path / "data", "--out-model", tmp_path / "m.kcsd", "--log", tmp_path / "curve.csv")
    assert code == 0 and s["steps"] == 200 and s["test_mse"] is not None
    assert len((tmp_path / "curve.csv").read_text().splitlines()) == 3

    gnd = tmp_path / "data" / "seq003.kt"
    run(capsys, "mask", "--ny", 32, "--nt", 4, "--acc", 4, "--seed", 9, "--n-central", 4, "--out", tmp_path / "mask.kt")
    run(capsys, "undersample", "--in", gnd, "--mask", tmp_path / "mask.kt", "--out", tmp_path / "s.kt")
    code, _, _ = run(capsys, "reconstruct", "--model", tmp_path / "m.kcsd", "--kspace", tmp_path / "s.kt", "--mask", tmp_path / "mask.kt", "--out", tmp_path / "r.kt")
    assert code == 0
    write_tensor(tmp_path / "zf.kt", idft2(read_tensor(tmp_path / "s.kt")))
    _, rec, _ = run(capsys, "eval", "--recon", tmp_path / "r.kt", "--gnd", gnd)
    _, zf, _ = run(capsys, "eval", "--recon", tmp_path / "zf.kt", "--gnd", gnd)
    assert rec["mse_mean"] < zf["mse_mean"]


def test_train_rejects_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 1\n")
    (tmp_path / "data").mkdir()
    code, _, err = run(capsys, "train", "--config", cfg, "--data-dir", tmp_path / "data", "--out-model", tmp_path / "m")
    assert code == 3 and "unknown key" in err
