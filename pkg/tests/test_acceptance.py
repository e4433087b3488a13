"""Acceptance suite: one PASS/FAIL line per criterion (see the terminal summary).

Criterion 6 trains the full-size network and runs every preset; it takes a
while on one CPU core.
"""

import math
import time

import numpy as np
import pytest

from bhdetect import cli, evalsuite, experiment, fileio, segnet, trainer, tracker
from bhdetect import scenegen as sg
from bhdetect import tensor_core as tc
from bhdetect.errors import ParseError

from .oracles import chain_events, flood_fill_components, naive_conv2d, naive_maxpool


# --------------------------------------------------------------- 1. kernels


def _naive_batchnorm(x, gamma, beta, eps=1e-5):
    n, c, h, w = x.shape
    out = np.empty_like(x, dtype=np.float64)
    for ch in range(c):
        vals = [float(v) for v in x[:, ch].ravel()]
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        out[:, ch] = gamma[ch] * (x[:, ch] - mean) / math.sqrt(var + eps) + beta[ch]
    return out


def test_c1_kernel_oracles(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    worst = {}
    for trial in range(5):
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = (rng.standard_normal((4, 3, 3, 3)) * 0.5).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        worst["conv"] = max(worst.get("conv", 0), np.abs(tc.conv2d_forward(x, w, b) - naive_conv2d(x, w, b)).max())

        st = tc.BatchNormState.fresh(3)
        st.gamma[:] = rng.uniform(0.5, 2, 3)
        st.beta[:] = rng.standard_normal(3)
        y, _ = tc.batchnorm_forward(x, st, True)
        worst["batchnorm"] = max(worst.get("batchnorm", 0), np.abs(y - _naive_batchnorm(x, st.gamma, st.beta)).max())

        worst["relu"] = max(worst.get("relu", 0), np.abs(tc.relu(x) - np.where(x > 0, x, 0)).max())

        xi = rng.integers(0, 4, (2, 3, 8, 8)).astype(np.float32)  # forces ties
        out, idx = tc.maxpool2x2(xi)
        o_ref, i_ref = naive_maxpool(xi)
        worst["pool"] = max(worst.get("pool", 0), float(np.abs(out - o_ref).max() + (idx != i_ref).sum()))
        up = tc.maxunpool2x2(out, idx, 8, 8)
        ref = np.zeros_like(xi)
        for n_, c_, r_, q_ in np.ndindex(*out.shape):
            off = idx[n_, c_, r_, q_]
            ref[n_, c_, off // 8, off % 8] = out[n_, c_, r_, q_]
        worst["unpool"] = max(worst.get("unpool", 0), float(np.abs(up - ref).max()))

        z = (rng.standard_normal((2, 2, 4, 4)) * 5).astype(np.float64)
        p = tc.softmax_pixelwise(z)
        sm = np.empty_like(z)
        for n_, r_, q_ in np.ndindex(2, 4, 4):
            e0, e1 = math.exp(z[n_, 0, r_, q_]), math.exp(z[n_, 1, r_, q_])
            sm[n_, 0, r_, q_], sm[n_, 1, r_, q_] = e0 / (e0 + e1), e1 / (e0 + e1)
        worst["softmax"] = max(worst.get("softmax", 0), np.abs(p - sm).max())

        labels = rng.integers(0, 2, (2, 4, 4))
        wts = (0.6, 3.0)
        loss, _ = tc.weighted_cross_entropy(p, labels, wts)
        ref_loss = -sum(wts[labels[i]] * math.log(sm[i[0], labels[i], i[1], i[2]]) for i in np.ndindex(2, 4, 4)) / 32
        worst["loss"] = max(worst.get("loss", 0), abs(loss - ref_loss))
    dt = time.perf_counter() - t0
    ok = (
        worst["conv"] <= 1e-5 and worst["pool"] == 0 and worst["unpool"] == 0
        and worst["batchnorm"] <= 1e-5 and worst["relu"] == 0
        and worst["softmax"] <= 1e-12 and worst["loss"] <= 1e-9 and dt < 60
    )
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {dt:.1f}s"
    assert criterion("1 kernel oracles", ok, detail)


# -------------------------------------------------------------- 2. gradients


def test_c2_gradient_integrity(criterion):
    t0 = time.perf_counter()
    net = segnet.build_network(rng=0)
    rng = np.random.default_rng(2)
    img = rng.integers(60, 200, (8, 8), dtype=np.uint8)
    mask = np.zeros((8, 8), np.uint8)
    mask[3:5, 2:6] = 1
    img[mask > 0] = 25
    err = trainer.gradient_check(net, trainer.LabeledSample(img, mask), n_params_per_layer=20, dtype=np.float64)
    dt = time.perf_counter() - t0
    assert criterion("2 gradient integrity (64-bit)", err < 1e-3 and dt < 120, f"max rel err {err:.2e}; {dt:.1f}s")


# ----------------------------------------------------------- 3. overfitting


def test_c3_single_sample_overfit(criterion):
    t0 = time.perf_counter()
    cam = sg.CameraModel()
    sample = experiment.training_crops(1, 11, cam, 64)[0]
    n_pix = sample.mask.size
    cfg = trainer.TrainConfig(learn_rate=0.001, momentum=0.9, l2=0.0005, max_epochs=500, batch_size=1,
                              crop_size=64, augment=False, seed=0)
    net = segnet.build_network(rng=0)
    first_below = []

    def watch(step, loss):
        # history is summed over pixels; report the per-pixel mean
        if loss / n_pix < 0.01 and not first_below:
            first_below.append(step)

    net, hist = trainer.train(net, [sample], cfg, on_epoch=watch)
    pred = segnet.predict_proba(net, sample.image)[0] >= 0.5
    iou = trainer.iou(pred, sample.mask)
    final = hist[-1] / n_pix
    dt = time.perf_counter() - t0
    ok = bool(first_below) and final < 0.01 and iou > 0.9 and dt < 600
    detail = (f"{int(sample.mask.sum())} aircraft px; loss<0.01 at step {first_below[0] if first_below else None}, "
              f"final {final:.2e}; IoU {iou:.3f}; {dt:.0f}s")
    assert criterion("3 single-sample overfit", ok, detail)


# ------------------------------------------------------ 4. tracker oracle


def _cell_masks(rng, n_frames, cells, p, h=64, w=64):
    """Blobs jittered inside 12 px cells: neighbouring cells never share a gate."""
    masks = np.zeros((n_frames, h, w), bool)
    for k in range(n_frames):
        for cr, cc in cells:
            if rng.random() < p:
                r = 12 * cr + 8 + rng.integers(-1, 2)
                c = 12 * cc + 8 + rng.integers(-1, 2)
                shape = rng.integers(0, 3)
                if shape == 0:
                    masks[k, r, c] = True
                elif shape == 1:
                    masks[k, r, c - 1 : c + 2] = True
                else:
                    masks[k, r - 1 : r + 1, c] = True
                    masks[k, r, c + 1] = True
    return masks


def _oracle_centroids(mask):
    comps = flood_fill_components(mask)
    return sorted(
        (float(np.mean([p[0] for p in cmp])), float(np.mean([p[1] for p in cmp]))) for cmp in comps
    )


def test_c4_tracker_equivalence(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    mismatches = 0
    for trial in range(100):
        n_frames = int(rng.integers(1, 51))
        n_cells = int(rng.integers(1, 5))
        flat = rng.choice(25, size=n_cells, replace=False)
        cells = [(int(f // 5), int(f % 5)) for f in flat]
        masks = _cell_masks(rng, n_frames, cells, float(rng.uniform(0.4, 1.0)))
        window = int(rng.integers(1, 11))
        got = {(e.frame_index, tuple(round(v, 9) for v in e.centroid)) for e in tracker.run_sequence(masks, window)}
        ref = chain_events([_oracle_centroids(m) for m in masks], window)
        ref = {(k, tuple(round(v, 9) for v in c)) for k, c in ref}
        mismatches += got != ref
    dt = time.perf_counter() - t0
    assert criterion("4 tracker equivalence", mismatches == 0 and dt < 60, f"{mismatches}/100 mismatched; {dt:.1f}s")


# ------------------------------------------------------- 5. persistence law


def test_c5_persistence_law(criterion):
    rng = np.random.default_rng(5)
    violations = 0
    for trial in range(60):
        n = int(rng.integers(10, 50))
        flat = rng.choice(25, size=int(rng.integers(2, 5)), replace=False)
        cells = [(int(f // 5), int(f % 5)) for f in flat]
        target, clutter = cells[0], cells[1:]
        masks = _cell_masks(rng, n, [target], 0.9) | _cell_masks(rng, n, clutter, float(rng.uniform(0.3, 0.9)))
        truth = [
            sg.FrameTruth(k, [sg.TargetTruth(12.0 * target[1] + 8, 12.0 * target[0] + 8, 3000.0 - k, True)], [])
            for k in range(n)
        ]
        case = evalsuite.EvalCase("r", masks, truth)
        fa_prev, ids_prev = math.inf, None
        for w in range(1, 16):
            ids = {e.track_id for e in tracker.run_candidates(case.candidates(), w)}
            fa = evalsuite.evaluate_case(case, w).false_alarm_count
            if fa > fa_prev or (ids_prev is not None and not ids <= ids_prev):
                violations += 1
            fa_prev, ids_prev = fa, ids

    trials = 10_000
    z_scores = []
    for p, w in [(0.7, 5), (0.9, 10), (0.5, 3)]:
        hits = 0
        for _ in range(trials):
            present = rng.random(w) < p
            lists = [[tracker.Candidate((20.0, 20.0), 1, k)] if present[k] else [] for k in range(w)]
            hits += bool(tracker.run_candidates(lists, w))
        expected = p**w
        se = math.sqrt(expected * (1 - expected) / trials)
        z_scores.append((hits / trials - expected) / se)
    ok = violations == 0 and all(abs(z) <= 3 for z in z_scores)
    detail = f"{violations} monotonicity violations over 60 sequences; p^W z-scores " + ", ".join(f"{z:+.2f}" for z in z_scores)
    assert criterion("5 persistence law", ok, detail)


# ------------------------------------------------ 6. desk-scale reproduction


@pytest.fixture(scope="module")
def desk():
    return experiment.run(experiment.DeskConfig())


def test_c6a_headon(desk, criterion):
    out = desk.presets["headon"]
    rep = out.zfa.report
    ok = out.zfa.found and rep.n_detected >= 9
    if out.zfa.found:
        print(evalsuite.format_report("headon", rep))
        seom = f"{rep.seom_m:.0f}" if rep.seom_m is not None else "n/a"
        mean = f"{rep.mean_range_m:.0f}" if rep.mean_range_m is not None else "n/a"
        detail = f"W*={out.zfa.window}, {rep.n_detected}/10 detected, mean {mean} m, SEOM {seom} m"
    else:
        detail = f"no ZFA window up to 40 (scan tail {out.zfa.scanned[-3:]})"
    detail += f"; run {desk.seconds / 60:.1f} min"
    assert criterion("6a head-on ZFA", ok, detail)


def test_c6b_stationary(desk, criterion):
    out = desk.presets["stationary"]
    ok = out.zfa.found and out.zfa.report.n_detected == 2
    detail = f"W*={out.zfa.window}, " + (f"{out.zfa.report.n_detected}/2 detected" if out.zfa.found else "no ZFA window")
    assert criterion("6b stationary targets", ok, detail)


def test_c6c_vehicles(desk, criterion):
    out = desk.presets["vehicles"]
    if out.zfa.found:
        veh = sum(c.vehicle_false_alarms for c in out.zfa.report.cases)
        det = out.zfa.report.n_detected
        ok = veh == 0 and det == 4
        detail = f"W*={out.zfa.window}, {veh} vehicle events, {det}/4 detected"
    else:
        ok, detail = False, "no ZFA window"
    assert criterion("6c ground vehicles", ok, detail)


def test_c6d_multi(desk, criterion):
    out = desk.presets["multi"]
    if out.zfa.found:
        first = out.zfa.report.cases[0].target_ranges_m
        ok = first[0] is not None and first[1] is None and out.zfa.window > 5
        detail = f"W*={out.zfa.window}, persistent {'hit' if first[0] is not None else 'missed'}, " \
                 f"intermittent {'missed' if first[1] is None else 'hit'}"
    else:
        ok, detail = False, "no ZFA window"
    assert criterion("6d intermittent target", ok, detail)


def test_c6e_soc_shape(desk, criterion):
    soc = desk.presets["headon"].soc
    fa = [p.false_alarms_per_hour for p in soc]
    rng = [p.mean_detection_range_m for p in soc]
    zero_at = next((p.window for p in soc if p.false_alarms_per_hour == 0), None)
    ranges_ok = all(r is not None for r in rng) and all(a >= b for a, b in zip(rng, rng[1:]))
    ok = len(soc) == 40 and fa[0] > 0 and zero_at is not None and ranges_ok
    detail = f"FA/h at W=1 {fa[0]:.0f}, first zero at W={zero_at}, range non-increasing {ranges_ok}"
    assert criterion("6e SOC shape", ok, detail)


# ---------------------------------------------------------- 7. determinism


def _pipeline(root):
    run = lambda *a: cli.main([str(x) for x in a])  # noqa: E731
    assert run("gen", "--preset", "train", "--n-samples", 16, "--seed", 3, "--out", root / "data") == 0
    assert run("train", "--data", root / "data", "--epochs", 2, "--out", root / "train") == 0
    assert run("gen", "--preset", "stationary", "--seed", 7, "--n-frames", 24, "--out", root / "seq") == 0
    assert run("infer", "--checkpoint", root / "train" / "model.ck", "--input", root / "seq", "--out", root / "masks") == 0
    assert run("eval", "--truth-root", root / "seq", "--masks-root", root / "masks", "--W-range", "1:10",
               "--out", root / "soc") == 0
    assert run("eval", "--truth-root", root / "seq", "--masks-root", root / "masks", "--zfa", "--W-max", 10,
               "--out", root / "zfa") == 0
    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "run.json":  # run.json echoes the differing --out paths
            files[p.relative_to(root).as_posix()] = p.read_bytes()
    return files


def test_c7_determinism(tmp_path, criterion):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    n_csv = sum(k.endswith(".csv") for k in a)
    n_ck = sum(k.endswith(".ck") for k in a)
    assert criterion("7 determinism", not differ and n_csv >= 3 and n_ck == 2,
                     f"{len(a)} files ({n_csv} CSV, {n_ck} checkpoints), {len(differ)} differ")


# ----------------------------------------------------------- 8. round trips


def _fuzz(reader, data, path, rng, n=150):
    """Feed truncated and byte-flipped variants to ``reader``; count non-ParseError crashes."""
    crashes = []
    for i in range(n):
        buf = bytearray(data)
        if i % 3 == 0:
            buf = buf[: int(rng.integers(0, len(buf)))]
        else:
            for _ in range(int(rng.integers(1, 4))):
                buf[int(rng.integers(0, len(buf)))] = int(rng.integers(0, 256))
        path.write_bytes(bytes(buf))
        try:
            reader(path)
        except ParseError:
            pass
        except Exception as exc:  # noqa: BLE001
            crashes.append(f"{type(exc).__name__}: {exc}")
    return crashes


def test_c8_round_trips(tmp_path, criterion):
    rng = np.random.default_rng(8)
    exact = []

    img = rng.integers(0, 256, (24, 40), dtype=np.uint8)
    fileio.write_pgm(tmp_path / "a.pgm", img)
    exact.append(np.array_equal(fileio.read_pgm(tmp_path / "a.pgm"), img))

    spec = sg.preset_suite("vehicles", 1, n_frames=6)[0][1]
    seq = sg.generate_encounter(spec, sg.CameraModel(), 1)
    sg.write_sequence(seq, tmp_path / "seq")
    exact.append(sg.read_sequence(tmp_path / "seq") == seq)

    samples = experiment.training_crops(3, 0, sg.CameraModel(), 64)
    trainer.write_dataset(samples, tmp_path / "ds")
    back = trainer.read_dataset(tmp_path / "ds")
    exact.append(all(np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask) for a, b in zip(samples, back)))

    net = segnet.build_network(rng=8)
    segnet.save_checkpoint(net, tmp_path / "n.ck")
    exact.append(segnet.checkpoint_bytes(segnet.load_checkpoint(tmp_path / "n.ck")) == segnet.checkpoint_bytes(net))

    crashes = []
    crashes += _fuzz(fileio.read_pgm, (tmp_path / "a.pgm").read_bytes(), tmp_path / "f.pgm", rng)
    truth_raw = (tmp_path / "seq" / "truth.json").read_bytes()
    fz = tmp_path / "fz"
    fz.mkdir()
    crashes += _fuzz(lambda p: sg.read_truth(p.parent), truth_raw, fz / "truth.json", rng)
    man = (tmp_path / "ds" / "manifest.json").read_bytes()
    crashes += _fuzz(lambda p: trainer.read_dataset(p.parent), man, tmp_path / "ds" / "manifest.json", rng)
    crashes += _fuzz(segnet.load_checkpoint, (tmp_path / "n.ck").read_bytes(), tmp_path / "f.ck", rng)
    ok = all(exact) and not crashes
    detail = f"{sum(exact)}/4 exact round trips; {len(crashes)} non-diagnostic failures in 600 corruptions"
    if crashes:
        detail += f" (e.g. {crashes[0]})"
    assert criterion("8 round trips", ok, detail)
