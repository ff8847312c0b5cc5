"""Acceptance criteria, each at its stated tolerance.

Every test logs one PASS/FAIL line (see ``acceptance_log``); the lines are
repeated in the pytest terminal summary. The desk-scale runs (segmenter,
end-to-end, label fractions) are marked slow and take roughly 90 minutes in
total on one CPU core.
"""
import json
import math
import shutil
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from shapely.geometry import Point, Polygon

from gazekit import augment
from gazekit.augment import AugmentSpec, apply_random
from gazekit.cli import main as cli_main
from gazekit.datapipe import load_arrays, load_manifest
from gazekit.gaze import GazeTrainConfig, MultistreamModel, train_gaze
from gazekit.geometry import (GazeAngles, angles_to_vector, angular_error, angular_error_deg, pitchyaw_to_vectors,
                              vector_to_angles, vectors_to_pitchyaw)
from gazekit.harness import ExperimentConfig, run_experiment, run_label_ablation, strip_runtime
from gazekit.segmenter import (SegmenterConfig, UNet, binarize_batch, mean_iou, save_segmenter, segment_batch,
                               train_segmenter)
from gazekit.ssl import EyeEncoder, nt_xent_loss
from gazekit.synth import eye_landmarks, generate_dataset, landmarks_to_masks, sample_scene

from .acceptance_log import criterion
from .oracles import central_difference, nt_xent_double_loop

# desk-scale presets: the library defaults (lr 1e-5 / 1e-4, batch 128) barely move in a CPU budget
SEG_DESK = {"epochs": 10, "lr": 1e-3, "batch_size": 32}
SSL_DESK = {"epochs": 10, "lr": 2e-3, "batch_size": 32}
GAZE_DESK = {"epochs_total": 25, "freeze_epochs": 5, "lr": 1e-3, "batch_size": 32}


# ---------------------------------------------------------------- NT-Xent


def test_nt_xent_matches_double_loop_oracle():
    with criterion("nt_xent_oracle") as info:
        rng = np.random.default_rng(0)
        t0 = time.perf_counter()
        worst = 0.0
        batches = 0
        for n in (1, 2, 4, 8):
            for _ in range(100):
                z = rng.normal(size=(2 * n, int(rng.integers(2, 33))))
                z /= np.linalg.norm(z, axis=1, keepdims=True)
                got = nt_xent_loss(torch.from_numpy(z)).item()
                worst = max(worst, abs(got - nt_xent_double_loop(z)))
                batches += 1
        worst_ident = 0.0
        for n in (1, 2, 4, 8):
            z = np.tile(rng.normal(size=(1, 16)), (2 * n, 1))
            z /= np.linalg.norm(z, axis=1, keepdims=True)
            worst_ident = max(worst_ident, abs(nt_xent_loss(torch.from_numpy(z)).item() - math.log(2 * n - 1)))
        elapsed = time.perf_counter() - t0
        info.update(batches=batches, max_abs_err=worst, identical_case_err=worst_ident, seconds=elapsed)
        assert worst <= 1e-6
        assert worst_ident <= 1e-9
        assert elapsed < 10.0


# ---------------------------------------------------------------- geometry


def test_geometry_round_trip_and_error_oracle():
    with criterion("geometry_oracle") as info:
        rng = np.random.default_rng(1)
        n = 100_000
        pitch = rng.uniform(-math.pi / 2 + 1e-3, math.pi / 2 - 1e-3, n)
        yaw = rng.uniform(-math.pi + 1e-9, math.pi, n)
        pf = np.stack([pitch, yaw], axis=1)
        back = vectors_to_pitchyaw(pitchyaw_to_vectors(pf))
        dyaw = np.abs(np.angle(np.exp(1j * (back[:, 1] - yaw))))
        worst_array = max(np.abs(back[:, 0] - pitch).max(), dyaw.max())

        worst_scalar = 0.0
        for p, y in pf[:: 10]:
            g = vector_to_angles(angles_to_vector(GazeAngles(float(p), float(y))))
            worst_scalar = max(worst_scalar, abs(g.pitch - p), abs(math.remainder(g.yaw - y, 2 * math.pi)))

        other = np.stack([rng.uniform(-1.5, 1.5, n), rng.uniform(-3.1, 3.1, n)], axis=1)

        def vec(p, y):
            return np.stack([-np.cos(p) * np.sin(y), -np.sin(p), -np.cos(p) * np.cos(y)], axis=-1)

        a, b = vec(pf[:, 0], pf[:, 1]), vec(other[:, 0], other[:, 1])
        oracle = np.degrees(np.arccos(np.clip(np.sum(a * b, axis=1) /
                                              (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)), -1, 1)))
        worst_err = np.abs(angular_error_deg(pf, other) - oracle).max()
        for i in range(0, n, 100):
            e = angular_error(GazeAngles(*pf[i]), GazeAngles(*other[i]))
            worst_err = max(worst_err, abs(e - oracle[i]))
        info.update(samples=n, round_trip_err=max(worst_array, worst_scalar), error_oracle_err=worst_err)
        assert worst_array <= 1e-6 and worst_scalar <= 1e-6
        assert worst_err <= 1e-9


# ---------------------------------------------------------------- rasterization


def test_rasterization_matches_brute_force():
    with criterion("rasterization_oracle") as info:
        t0 = time.perf_counter()
        mismatches = 0
        for s in range(50):
            lm = eye_landmarks(sample_scene(1000 + s, subject_seed=s % 5), 36, 60)
            m = landmarks_to_masks(lm, 36, 60)
            poly = Polygon(lm.eyelid_polygon)
            cx, cy = lm.iris_center
            for r in range(36):
                for c in range(60):
                    inside = poly.covers(Point(c, r))
                    in_iris = inside and (c - cx) ** 2 + (r - cy) ** 2 <= lm.iris_radius ** 2
                    mismatches += (bool(m.eyeball[r, c]) != inside) + (bool(m.iris[r, c]) != in_iris)
        oracle_seconds = time.perf_counter() - t0
        violations = 0
        for s in range(20_000):
            m = landmarks_to_masks(eye_landmarks(sample_scene(s, subject_seed=s % 7), 36, 60), 36, 60)
            violations += int(np.any(m.iris > m.eyeball))
        info.update(scenes=50, pixel_mismatches=mismatches, containment_checked=20_000,
                    containment_violations=violations, oracle_seconds=oracle_seconds)
        assert mismatches == 0
        assert violations == 0
        assert oracle_seconds < 30.0


# ---------------------------------------------------------------- gradients


def _rel_err(fd, an):
    scale = max(abs(fd), abs(an))
    return 0.0 if scale < 1e-12 else abs(fd - an) / scale


def _param_fd(loss_fn, p, idx):
    def f(v):
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = float(v[0])
            out = loss_fn().item()
            p[idx] = old
        return out
    return central_difference(f, np.array([p[idx].item()]), 0)


def test_gradients_match_finite_differences():
    with criterion("gradient_checks") as info:
        rng = np.random.default_rng(2)
        worst = {"nt_xent": 0.0, "segmenter_mse": 0.0, "gaze_head": 0.0}

        for n in (1, 2, 3, 4):
            z = rng.normal(size=(2 * n, 8))
            zt = torch.from_numpy(z).requires_grad_(True)
            # unnormalized rows: the loss normalizes internally, so every coordinate is free
            nt_xent_loss(zt, validate=False).backward()
            for i in range(2 * n):
                for j in range(8):
                    fd = central_difference(lambda x: nt_xent_loss(torch.from_numpy(x), validate=False).item(),
                                            z, (i, j))
                    worst["nt_xent"] = max(worst["nt_xent"], _rel_err(fd, zt.grad[i, j].item()))

        torch.manual_seed(0)
        unet = UNet(SegmenterConfig(input_hw=(4, 8))).double()
        x = torch.from_numpy(rng.random((2, 1, 4, 8)))
        y = torch.from_numpy((rng.random((2, 2, 4, 8)) > 0.5).astype(np.float64))
        seg_loss = lambda: F.mse_loss(unet(x), y)  # noqa: E731
        seg_loss().backward()
        for name, p in unet.named_parameters():
            flat = rng.choice(p.numel(), size=min(3, p.numel()), replace=False)
            for k in flat:
                idx = np.unravel_index(k, p.shape)
                worst["segmenter_mse"] = max(worst["segmenter_mse"],
                                             _rel_err(_param_fd(seg_loss, p, idx), p.grad[idx].item()))

        torch.manual_seed(1)
        model = MultistreamModel().double()
        imgs = torch.from_numpy(rng.random((3, 1, 36, 60)))
        eb = torch.from_numpy((rng.random((3, 1, 36, 60)) > 0.5).astype(np.float64))
        ir = torch.from_numpy((rng.random((3, 1, 36, 60)) > 0.7).astype(np.float64))
        target = torch.from_numpy(rng.normal(0, 0.3, (3, 2)))
        with torch.no_grad():
            feats = model.features(imgs, eb, ir)
        head_loss = lambda: F.mse_loss(model.head(feats), target)  # noqa: E731
        head_loss().backward()
        for name, p in model.head.named_parameters():
            for k in rng.choice(p.numel(), size=min(5, p.numel()), replace=False):
                idx = np.unravel_index(k, p.shape)
                worst["gaze_head"] = max(worst["gaze_head"],
                                         _rel_err(_param_fd(head_loss, p, idx), p.grad[idx].item()))
        info.update(worst)
        assert all(v <= 1e-3 for v in worst.values()), worst


# ---------------------------------------------------------------- desk-scale runs


@pytest.fixture(scope="module")
def seg_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("seg_desk")
    train = load_arrays(load_manifest(generate_dataset(2000, root / "train", seed=100)))
    val = load_arrays(load_manifest(generate_dataset(200, root / "val", seed=101)))
    test = load_arrays(load_manifest(generate_dataset(500, root / "test", seed=102)))
    t0 = time.perf_counter()
    result = train_segmenter(train, val, SegmenterConfig(**SEG_DESK, seed=0))
    seconds = time.perf_counter() - t0
    ckpt = save_segmenter(root / "segmenter.ckpt", result)
    return result, test, seconds, ckpt


@pytest.mark.slow
def test_segmenter_desk_scale(seg_run):
    with criterion("segmenter_desk_iou") as info:
        result, test, seconds, _ = seg_run
        pred = binarize_batch(segment_batch(test.images, result.model))
        eyeball, iris = mean_iou(pred, test.masks.astype(np.uint8))
        info.update(heldout_iou_eyeball=eyeball, heldout_iou_iris=iris, train_seconds=seconds)
        assert eyeball >= 0.80 and iris >= 0.80
        assert seconds <= 30 * 60


def _desk_experiment(manifest, out, seg_ckpt, **kw):
    return ExperimentConfig.from_dict({
        "manifest": str(manifest), "out_dir": str(out), "protocol": "LOSO", "use_ssl": True,
        "strict_ssl": True, "seg_ckpt": str(seg_ckpt), "use_gt_masks": False, "ssl": SSL_DESK,
        "gaze": GAZE_DESK, **kw})


@pytest.mark.slow
def test_end_to_end_desk_scale(seg_run, tmp_path):
    with criterion("end_to_end_loso") as info:
        manifest = generate_dataset(2000, tmp_path / "data", seed=200, n_subjects=5)
        t0 = time.perf_counter()
        report = run_experiment(_desk_experiment(manifest, tmp_path / "run", seg_run[3], seeds=[0]))
        seconds = time.perf_counter() - t0
        agg = report["aggregate"]
        info.update(folds=agg["n_folds"], failed=agg["n_failed"], mean_error_deg=agg.get("mean_error_deg"),
                    baseline_deg=agg.get("baseline_error_deg"),
                    ratio=agg.get("mean_error_deg", math.nan) / agg.get("baseline_error_deg", math.nan),
                    seconds=seconds)
        assert agg["n_folds"] == 5 and agg["n_failed"] == 0
        assert all(r["n_test"] == 400 for r in report["folds"])
        assert agg["mean_error_deg"] <= 0.5 * agg["baseline_error_deg"]
        assert seconds <= 2 * 3600


def test_freeze_contract():
    with criterion("freeze_contract") as info:
        import tempfile
        with tempfile.TemporaryDirectory() as d:
            data = load_arrays(load_manifest(generate_dataset(96, d, seed=7)))
        torch.manual_seed(0)
        encoder = EyeEncoder()
        initial = {k: v.numpy().tobytes() for k, v in encoder.state_dict().items()}
        snaps = {}

        def on_epoch(epoch, model):
            snaps[epoch] = {k: v.detach().numpy().tobytes() for k, v in model.encoder_eye.state_dict().items()}

        cfg = GazeTrainConfig(epochs_total=7, freeze_epochs=5, lr=1e-3, batch_size=16)
        train_gaze(data.subset(range(80)), data.subset(range(80, 96)), cfg, ssl_ckpt=encoder, on_epoch=on_epoch)
        frozen_ok = all(snaps[e] == initial for e in range(1, 6))
        changed = [k for k in initial if snaps[6][k] != initial[k]]
        info.update(identical_epochs_1_to_5=frozen_ok, tensors_changed_epoch_6=f"{len(changed)}/{len(initial)}")
        assert frozen_ok
        assert len(changed) == len(initial)


@pytest.mark.slow
def test_label_fraction_trend(seg_run, tmp_path):
    with criterion("label_fraction_trend") as info:
        manifest = generate_dataset(400, tmp_path / "data", seed=300, n_subjects=5)
        cfg = _desk_experiment(manifest, tmp_path / "run", seg_run[3], seeds=[0, 1, 2])
        report = run_label_ablation(cfg, fractions=(1.0, 0.75, 0.5, 0.25))
        by_frac = {r["label_fraction"]: r for r in report["ablation"]}
        errs = {f: by_frac[f]["mean_error_deg"] for f in (1.0, 0.75, 0.5, 0.25)}
        info.update(errors_100_75_50_25=[errs[f] for f in (1.0, 0.75, 0.5, 0.25)],
                    failed=report["aggregate"]["n_failed"])
        assert report["aggregate"]["n_failed"] == 0
        assert all(v is not None and math.isfinite(v) for v in errs.values())
        for f in errs:
            assert len(by_frac[f]["per_seed_mean_error_deg"]) == 3
        assert errs[1.0] <= errs[0.25]


# ---------------------------------------------------------------- determinism


def _cli_pipeline(root):
    d = root / "data"
    exp = root / "exp.json"
    root.mkdir(parents=True)
    exp.write_text(json.dumps({"manifest": str(d / "manifest.jsonl"), "seeds": [0],
                               "ssl": {"epochs": 1, "batch_size": 8},
                               "gaze": {"epochs_total": 2, "freeze_epochs": 1, "lr": 1e-3, "batch_size": 8}}))
    steps = [
        ["synth-gen", "--count", "30", "--subjects", "3", "--seed", "4", "--out", str(d)],
        ["train-seg", "--manifest", str(d / "manifest.jsonl"), "--epochs", "1", "--lr", "1e-3",
         "--seed", "1", "--out", str(root / "seg")],
        ["seg-infer", "--ckpt", str(root / "seg" / "segmenter.ckpt"), "--manifest", str(d / "manifest.jsonl"),
         "--out", str(root / "inf")],
        ["ssl-pretrain", "--manifest", str(d / "manifest.jsonl"), "--epochs", "1", "--batch-size", "8",
         "--seed", "2", "--out", str(root / "ssl")],
        ["train-gaze", "--manifest", str(root / "inf" / "manifest.jsonl"), "--ssl-ckpt",
         str(root / "ssl" / "encoder.ckpt"), "--epochs", "2", "--freeze-epochs", "1", "--lr", "1e-3",
         "--batch-size", "8", "--seed", "3", "--out", str(root / "gaze")],
        ["predict", "--ckpt", str(root / "gaze" / "gaze.ckpt"), "--manifest", str(d / "manifest.jsonl"),
         "--out", str(root / "pred")],
        ["eval", "--config", str(exp), "--out", str(root / "eval")],
        ["ablate", "--config", str(exp), "--fractions", "1.0", "0.5", "--out", str(root / "ablate")],
        ["report", "--report", str(root / "ablate"), "--out", str(root / "report")],
    ]
    for argv in steps:
        assert cli_main(argv) == 0, argv


def _snapshot(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        rel = p.relative_to(root).as_posix()
        if p.name == "report.json":
            out[rel] = json.dumps(strip_runtime(json.loads(p.read_text())), sort_keys=True).encode()
        else:
            out[rel] = p.read_bytes()
    return out


def test_cli_determinism(tmp_path):
    with criterion("cli_determinism") as info:
        root = tmp_path / "run"
        _cli_pipeline(root)
        first = _snapshot(root)
        # a true rerun: same paths, nothing cached from the first pass
        shutil.move(str(root), str(tmp_path / "first"))
        _cli_pipeline(root)
        second = _snapshot(root)
        differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
        kinds = {"manifests": sum(k.endswith(".jsonl") for k in first),
                 "checkpoints": sum(k.endswith(".ckpt") for k in first),
                 "reports": sum(k.endswith(("report.json", "report.md")) for k in first)}
        info.update(files_compared=len(first), **kinds, differing=differing or "none")
        assert kinds["manifests"] and kinds["checkpoints"] and kinds["reports"]
        assert not differing


# ---------------------------------------------------------------- augmentation


def test_augmentation_identities_and_ranges():
    with criterion("augmentation_identities") as info:
        rng = np.random.default_rng(3)
        identity = AugmentSpec.identity()
        full = AugmentSpec()
        noop_failures = 0
        bad = []
        for i in range(1000):
            h, w = int(rng.integers(4, 80)), int(rng.integers(4, 120))
            kind = i % 4
            if kind == 0:
                img = rng.random((h, w))
            elif kind == 1:
                img = np.full((h, w), float(rng.choice([0.0, 1.0, rng.random()])))
            elif kind == 2:
                img = (rng.random((h, w)) > 0.5).astype(np.float64)
            else:
                img = np.clip(rng.normal(0.5, 0.4, (h, w)), 0, 1).astype(rng.choice([np.float32, np.float64]))
            before = img.copy()
            out = apply_random(img, identity, rng)
            noop_failures += int(not (out.dtype == img.dtype and np.array_equal(out, img)))
            outs = {
                "noise": augment.gaussian_noise(img, float(rng.uniform(0, augment.NOISE_MAX)), rng),
                "blur": augment.gaussian_blur(img, float(rng.uniform(0, augment.BLUR_SIGMA_MAX))),
                "cutout": augment.cutout(img, int(rng.integers(0, augment.CUTOUT_MAX + 1)),
                                         int(rng.integers(0, augment.CUTOUT_MAX + 1)), rng),
                "downscale": augment.downscale(img, float(rng.uniform(1, augment.DOWNSCALE_MAX))),
                "lines": augment.random_lines(img, int(rng.integers(0, augment.LINES_MAX + 1)), rng),
                "contrast": augment.contrast(img, rng),
                "random": apply_random(img, full, rng),
            }
            for name, o in outs.items():
                if o.shape != img.shape or not np.all(np.isfinite(o)) or o.min() < 0 or o.max() > 1:
                    bad.append(name)
            if not np.array_equal(img, before):
                bad.append("input mutated")
        info.update(inputs=1000, identity_failures=noop_failures, contract_failures=len(bad))
        assert noop_failures == 0
        assert not bad, sorted(set(bad))
