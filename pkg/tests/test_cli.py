import numpy as np
import pytest

from smokeseg import dataio
from smokeseg.cli import load_pairs, main


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def synth_args(out_dir, count=6, seed=0):
    return (
        "synth",
        "--out", str(out_dir),
        "--count", str(count),
        "--height", "16",
        "--width", "16",
        "--bands", "4",
        "--informative", "1,3",
        "--radius", "3-5",
        "--seed", str(seed),
    )


def train_config(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("groups = 4\nD = 16\nK = 2\nbatch = 4\n", encoding="utf-8")
    return cfg


def test_synth_writes_pairs(tmp_path, capsys):
    out = tmp_path / "data"
    code, stdout, _ = run(capsys, *synth_args(out, count=3), "--preview")
    assert code == 0
    assert "wrote 3 cube/mask pairs" in stdout
    pairs = load_pairs(str(out))
    assert [name for name, _, _ in pairs] == ["sample_0000", "sample_0001", "sample_0002"]
    for _, cube, mask in pairs:
        assert cube.shape == (4, 16, 16)
        assert mask.shape == (16, 16)
    assert (out / "sample_0001_gray.pgm").exists()


def test_synth_train_eval_round_trip(tmp_path, capsys):
    data = tmp_path / "data"
    assert run(capsys, *synth_args(data))[0] == 0
    ckpt = tmp_path / "model.ckpt"
    log = tmp_path / "loss.log"
    code, stdout, _ = run(
        capsys,
        "train",
        "--config", str(train_config(tmp_path)),
        "--data", str(data),
        "--out", str(ckpt),
        "--log", str(log),
        "--iterations", "4",
        "--progress", "2",
    )
    assert code == 0, stdout
    assert ckpt.exists()
    lines = log.read_text().strip().split("\n")
    assert lines[0] == "step, ce, lp, total"
    assert len(lines) == 5
    assert "step 2:" in stdout

    code, stdout, _ = run(capsys, "eval", "--ckpt", str(ckpt), "--data", str(data), "--per-image")
    assert code == 0
    assert stdout.startswith("bucket\timages\tF1\tmIoU")
    assert "total\t6\t" in stdout
    assert "sample_0005\t" in stdout


def test_eval_dumps_band_weights(tmp_path, capsys):
    data = tmp_path / "data"
    run(capsys, *synth_args(data, count=4))
    ckpt = tmp_path / "model.ckpt"
    run(
        capsys,
        "train",
        "--config", str(train_config(tmp_path)),
        "--data", str(data),
        "--out", str(ckpt),
        "--iterations", "2",
    )
    dump = tmp_path / "beta.txt"
    code, stdout, _ = run(
        capsys,
        "eval", "--ckpt", str(ckpt), "--data", str(data),
        "--dump-band-weights", str(dump),
    )
    assert code == 0
    text = dump.read_text()
    blocks = [ln for ln in text.split("\n") if ln.startswith("# image ")]
    assert len(blocks) == 4
    rows = [ln for ln in text.split("\n") if ln and not ln.startswith("#")]
    assert len(rows) == 4 * 4  # d=4 weights per image
    band, wl, weight = rows[0].split(", ")
    assert band == "0" and wl == "-"  # wavelengths only known for 25-band cubes
    per_image = np.array([float(r.split(", ")[2]) for r in rows]).reshape(4, 4)
    np.testing.assert_allclose(per_image.sum(axis=1), 1.0, rtol=0, atol=1e-5)


def test_band_weight_dump_needs_router(tmp_path, capsys):
    data = tmp_path / "data"
    run(capsys, *synth_args(data, count=4))
    ckpt = tmp_path / "model.ckpt"
    run(
        capsys,
        "train",
        "--config", str(train_config(tmp_path)),
        "--data", str(data),
        "--out", str(ckpt),
        "--iterations", "1",
        "--mode", "common_only",
    )
    code, _, stderr = run(
        capsys,
        "eval", "--ckpt", str(ckpt), "--data", str(data),
        "--dump-band-weights", str(tmp_path / "beta.txt"),
    )
    assert code == 1
    assert "no band weights" in stderr


def test_train_determinism_bitwise(tmp_path, capsys):
    data = tmp_path / "data"
    run(capsys, *synth_args(data))
    blobs = []
    for name in ("a.ckpt", "b.ckpt"):
        path = tmp_path / name
        log = tmp_path / (name + ".log")
        code, _, _ = run(
            capsys,
            "train",
            "--config", str(train_config(tmp_path)),
            "--data", str(data),
            "--out", str(path),
            "--log", str(log),
            "--seed", "7",
            "--iterations", "3",
        )
        assert code == 0
        blobs.append((path.read_bytes(), log.read_bytes()))
    assert blobs[0][0] == blobs[1][0]
    assert blobs[0][1] == blobs[1][1]


def test_vote_command_matches_oracle(tmp_path, capsys):
    rng = np.random.default_rng(0)
    masks = [(rng.uniform(size=(9, 9)) < 0.5).astype(np.uint8) for _ in range(3)]
    paths = []
    for i, m in enumerate(masks):
        p = tmp_path / f"ann{i}.pgm"
        dataio.write_mask(p, m)
        paths.append(str(p))
    out = tmp_path / "gt.pgm"
    code, stdout, _ = run(capsys, "vote", *paths, "-o", str(out))
    assert code == 0
    a, b, c = (m.astype(bool) for m in masks)
    want = ((a & b) | (a & c) | (b & c)).astype(np.uint8)
    np.testing.assert_array_equal(dataio.read_mask(out), want)


def test_stats_command_prints_five_lines(tmp_path, capsys):
    rng = np.random.default_rng(1)
    paths = []
    for i in range(3):
        p = tmp_path / f"ann{i}.pgm"
        dataio.write_mask(p, (rng.uniform(size=(8, 8)) < 0.5).astype(np.uint8))
        paths.append(str(p))
    code, stdout, _ = run(capsys, "stats", *paths)
    assert code == 0
    lines = stdout.strip().split("\n")
    assert len(lines) == 5
    assert lines[0].startswith("unanimous (3/3):")
    assert all("%" in ln for ln in lines)

    code, _, stderr = run(capsys, "stats", *paths[:2])
    assert code == 1
    assert "triples" in stderr


def test_gradcheck_command_smoke(capsys):
    code, stdout, _ = run(capsys, "gradcheck", "--seeds", "1")
    assert code == 0
    assert "PASS" in stdout
    assert "FAIL" not in stdout
    assert "cases, 1 seeds each" in stdout


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["train"])  # missing required --out
    assert info.value.code == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    code, _, stderr = run(
        capsys, "eval", "--ckpt", str(tmp_path / "nope.ckpt"), "--data", str(tmp_path)
    )
    assert code == 1
    assert "error:" in stderr

    code, _, stderr = run(
        capsys, "train", "--out", str(tmp_path / "x.ckpt"), "--iterations", "1"
    )
    assert code == 1
    assert "data" in stderr


def test_load_pairs_requires_masks(tmp_path):
    dataio.write_cube(tmp_path / "a.hsc", np.zeros((1, 2, 2), dtype=np.float32))
    with pytest.raises(FileNotFoundError, match="no mask"):
        load_pairs(str(tmp_path))
