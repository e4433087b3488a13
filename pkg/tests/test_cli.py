import json

import numpy as np
import pytest

from bhdetect import cli, segnet
from bhdetect import scenegen as sg
from bhdetect.fileio import read_pgm, write_pgm


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen", "--preset", "train", "--n-samples", 6, "--seed", 2, "--out", root / "data") == 0
    assert run("train", "--data", root / "data", "--epochs", 1, "--layers", 2, "--filters", 4,
               "--out", root / "tr") == 0
    return root


def test_gen_headon_counts_and_determinism(tmp_path):
    assert run("gen", "--preset", "headon", "--seed", 7, "--n-frames", 3, "--out", tmp_path / "a") == 0
    assert run("gen", "--preset", "headon", "--seed", 7, "--n-frames", 3, "--out", tmp_path / "b") == 0
    dirs = sorted(p.name for p in (tmp_path / "a").iterdir() if p.is_dir())
    assert dirs == sorted(f"T{i}" for i in range(1, 11))
    for f in (tmp_path / "a").rglob("*"):
        if f.is_file() and f.name != "run.json":  # run.json echoes the differing --out
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    assert json.loads((tmp_path / "a" / "run.json").read_text())["args"]["seed"] == 7


def test_gen_stationary_has_zero_drift(tmp_path):
    assert run("gen", "--preset", "stationary", "--n-frames", 5, "--out", tmp_path) == 0
    cases = sorted(p for p in tmp_path.iterdir() if p.is_dir())
    assert [c.name for c in cases] == ["S1", "S2"]
    for c in cases:
        _, _, truth = sg.read_truth(c)
        assert len({(ft.targets[0].cx, ft.targets[0].cy) for ft in truth}) == 1


def test_train_zero_lr_keeps_weights(tmp_path, trained):
    assert run("train", "--data", trained / "data", "--epochs", 1, "--lr", 0, "--layers", 2, "--filters", 4,
               "--out", tmp_path) == 0
    init = segnet.load_checkpoint(tmp_path / "init.ck")
    final = segnet.load_checkpoint(tmp_path / "model.ck")
    for a, b in zip(init.parameters(), final.parameters()):
        assert a.tobytes() == b.tobytes()
    assert (tmp_path / "loss.csv").read_text().count("\n") == 2


def test_train_outputs_and_repeatability(tmp_path, trained):
    assert run("train", "--data", trained / "data", "--epochs", 1, "--layers", 2, "--filters", 4,
               "--out", tmp_path) == 0
    assert (tmp_path / "loss.csv").read_bytes() == (trained / "tr" / "loss.csv").read_bytes()
    assert (tmp_path / "model.ck").read_bytes() == (trained / "tr" / "model.ck").read_bytes()


def test_train_divergence_exit_code(tmp_path, trained, capsys):
    with np.errstate(all="ignore"):
        rc = run("train", "--data", trained / "data", "--epochs", 2, "--lr", 1e30, "--layers", 2, "--filters", 4,
                 "--out", tmp_path)
    assert rc == 1
    assert "epoch" in capsys.readouterr().err


def test_infer_masks_shape_and_repeatable(tmp_path, trained):
    assert run("gen", "--preset", "multi", "--n-frames", 3, "--out", tmp_path / "seq") == 0
    ck = trained / "tr" / "model.ck"
    assert run("infer", "--checkpoint", ck, "--input", tmp_path / "seq", "--out", tmp_path / "m1") == 0
    assert run("infer", "--checkpoint", ck, "--input", tmp_path / "seq" / "M1", "--out", tmp_path / "m2") == 0
    for k in range(3):
        a = (tmp_path / "m1" / "M1" / sg.mask_name(k)).read_bytes()
        assert a == (tmp_path / "m2" / sg.mask_name(k)).read_bytes()
        assert read_pgm(tmp_path / "m1" / "M1" / sg.mask_name(k)).shape == (128, 128)


def test_infer_threshold_validation(tmp_path, trained, capsys):
    with pytest.raises(SystemExit) as info:
        run("infer", "--checkpoint", trained / "tr" / "model.ck", "--input", tmp_path, "--out", tmp_path,
            "--threshold", 1.01)
    assert info.value.code == 2
    assert "threshold" in capsys.readouterr().err


def test_infer_rejects_indivisible_frames(tmp_path, trained, capsys):
    d = tmp_path / "odd"
    d.mkdir()
    write_pgm(d / sg.frame_name(0), np.zeros((30, 32), np.uint8))
    assert run("infer", "--checkpoint", trained / "tr" / "model.ck", "--input", d, "--out", tmp_path / "o") == 1
    assert "frame_00000.pgm" in capsys.readouterr().err


def _clean_fixture(root, n=6):
    """Sequences whose masks are exactly the truth masks."""
    spec = sg.EncounterSpec("head_on", n, [sg.TargetSpec(3000.0, 100.0, (60.0, 60.0))], clutter_seed=1)
    seq = sg.generate_encounter(spec, sg.CameraModel(), 0)
    sg.write_sequence(seq, root / "truth" / "C1")
    (root / "masks" / "C1").mkdir(parents=True)
    for k in range(n):
        write_pgm(root / "masks" / "C1" / sg.mask_name(k), seq.masks[k] * 255)


def test_eval_zfa_on_clean_fixture(tmp_path, capsys):
    _clean_fixture(tmp_path)
    assert run("eval", "--truth-root", tmp_path / "truth", "--masks-root", tmp_path / "masks", "--zfa",
               "--out", tmp_path / "ev") == 0
    rows = (tmp_path / "ev" / "zfa.csv").read_text().splitlines()
    assert rows[1].startswith("C1,1,1,3000.0,0")
    assert (tmp_path / "ev" / "zfa_scan.csv").read_text() == "W,false_alarms\n1,0\n"


def test_eval_w_range_rows_and_monotone(tmp_path):
    _clean_fixture(tmp_path, n=45)
    m = tmp_path / "masks" / "C1"
    for k in range(0, 45, 3):  # clutter lasting 1, 2 or 3 frames, away from the target
        img = read_pgm(m / sg.mask_name(k))
        img[40, 10 + k % 20] = 255
        write_pgm(m / sg.mask_name(k), img)
    assert run("eval", "--truth-root", tmp_path / "truth", "--masks-root", tmp_path / "masks",
               "--W-range", "1:40", "--svg", "--out", tmp_path / "ev") == 0
    rows = (tmp_path / "ev" / "soc.csv").read_text().splitlines()[1:]
    assert len(rows) == 40
    fa = [float(r.split(",")[3]) for r in rows]
    assert fa[0] > 0 and all(a >= b for a, b in zip(fa, fa[1:]))
    assert (tmp_path / "ev" / "soc.svg").exists()


def test_eval_missing_truth(tmp_path, capsys):
    (tmp_path / "seq").mkdir()
    write_pgm(tmp_path / "seq" / sg.frame_name(0), np.zeros((8, 8), np.uint8))
    rc = run("eval", "--truth-root", tmp_path / "seq", "--masks-root", tmp_path, "--W", 3, "--out", tmp_path / "o")
    assert rc == 1
    assert "truth.json" in capsys.readouterr().err


def test_eval_needs_one_mask_source(tmp_path):
    _clean_fixture(tmp_path)
    assert run("eval", "--truth-root", tmp_path / "truth", "--W", 3, "--out", tmp_path / "o") == 2


def test_eval_frame_rate_default():
    args = cli.build_parser().parse_args(["eval", "--truth-root", "x", "--masks-root", "y", "--W", "1", "--out", "o"])
    assert args.frame_rate == 15.0


def test_config_file(tmp_path):
    _clean_fixture(tmp_path)
    cfg = {"truth-root": str(tmp_path / "truth"), "masks_root": str(tmp_path / "masks"), "W-range": [1, 3],
           "out": str(tmp_path / "ev")}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("eval", "--config", tmp_path / "c.json") == 0
    assert (tmp_path / "ev" / "soc.csv").read_text().count("\n") == 4
    echoed = json.loads((tmp_path / "ev" / "run.json").read_text())["args"]
    assert echoed["W_range"] == [1, 3]


def test_config_unknown_key(tmp_path):
    (tmp_path / "c.json").write_text('{"warp": 9}')
    with pytest.raises(SystemExit) as info:
        run("gen", "--config", tmp_path / "c.json")
    assert info.value.code == 2


def test_unknown_flag_is_error():
    with pytest.raises(SystemExit) as info:
        run("gen", "--preset", "headon", "--out", "x", "--frobnicate")
    assert info.value.code == 2


def test_help_documents_csv_columns(capsys):
    with pytest.raises(SystemExit):
        run("eval", "--help")
    text = capsys.readouterr().out
    for col in ("mean_range_m", "seom_m", "fa_per_hour", "n_detected", "false_alarms"):
        assert col in text


def test_run_json_replays(tmp_path):
    _clean_fixture(tmp_path)
    assert run("eval", "--truth-root", tmp_path / "truth", "--masks-root", tmp_path / "masks", "--W-range", "1:4",
               "--out", tmp_path / "ev") == 0
    first = (tmp_path / "ev" / "soc.csv").read_bytes()
    (tmp_path / "ev" / "soc.csv").unlink()
    assert run("eval", "--config", tmp_path / "ev" / "run.json") == 0
    assert (tmp_path / "ev" / "soc.csv").read_bytes() == first
