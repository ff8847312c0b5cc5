"""Cross-validated experiments, label-fraction ablation, reports and plots."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import traceback
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import file_sha256
from .datapipe import ArraySet, load_arrays, load_manifest, make_splits, subsample_labels
from .errors import ConfigError
from .gaze import GazeTrainConfig, masks_for, predict_arrays, save_gaze, train_gaze
from .geometry import angular_error_deg
from .seeding import derive_seed
from .segmenter import load_segmenter
from .ssl import SSLConfig, load_encoder, pretrain, save_encoder

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
LABEL_FRACTIONS = (1.0, 0.75, 0.5, 0.25)


@dataclass
class ExperimentConfig:
    manifest: str
    out_dir: str
    protocol: str = "LOSO"
    k: int = 5
    label_fraction: float = 1.0
    use_ssl: bool = True
    strict_ssl: bool = True
    seeds: list = field(default_factory=lambda: [0])
    seg_ckpt: str | None = None
    use_gt_masks: bool = True
    val_fraction: float = 0.1
    save_models: bool = False
    ssl: dict = field(default_factory=dict)
    gaze: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate(check_paths=False)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self, check_paths: bool = True) -> None:
        if self.protocol.upper() not in ("LOSO", "KFOLD"):
            raise ConfigError(f"protocol must be LOSO or KFOLD, got {self.protocol!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError("label_fraction must be in (0, 1]")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        try:
            SSLConfig(**self.ssl)
            GazeTrainConfig(**self.gaze)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid module config: {exc}") from exc
        if check_paths:
            for p in (self.manifest, self.seg_ckpt):
                if p is not None and not Path(p).exists():
                    raise ConfigError(f"path does not exist: {p}")

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _fold_arrays(data: ArraySet, subjects) -> np.ndarray:
    keep = set(subjects)
    return np.array([i for i, s in enumerate(data.subjects) if s in keep], dtype=np.int64)


class _SSLCache:
    """Pretrained encoders keyed by (seed, training subjects), kept on disk."""

    def __init__(self, root: Path):
        self.root = root
        self.mem = {}

    def get(self, data: ArraySet, idx: np.ndarray, subjects, seed: int, ssl_cfg: dict):
        key = hashlib.sha256(json.dumps([seed, sorted(subjects), ssl_cfg], sort_keys=True).encode()).hexdigest()[:16]
        if key in self.mem:
            return self.mem[key]
        path = self.root / f"encoder_{key}.ckpt"
        if path.exists():
            enc = load_encoder(path)[0]
        else:
            cfg = SSLConfig(**{**ssl_cfg, "seed": derive_seed(seed, "ssl")})
            result = pretrain(data.subset(idx), cfg)
            save_encoder(path, result)
            enc = result.encoder
        self.mem[key] = enc.state_dict()
        return self.mem[key]


def run_experiment(cfg: ExperimentConfig, ssl_cache_dir=None) -> dict:
    """Train and evaluate one model per (seed, fold); returns the report dict.

    Failed folds are recorded with ``status: "failed"`` rather than raised.
    """
    cfg.validate()
    t0 = time.time()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = load_manifest(cfg.manifest)
    data = load_arrays(records, require_gaze=True)
    seg = load_segmenter(cfg.seg_ckpt)[0] if cfg.seg_ckpt else None
    data.masks = masks_for(data, seg, cfg.use_gt_masks)
    by_id = {r.sample_id: r for r in records}
    index = {sid: i for i, sid in enumerate(data.ids)}
    cache = _SSLCache(Path(ssl_cache_dir) if ssl_cache_dir else out / "ssl")
    cache.root.mkdir(parents=True, exist_ok=True)
    all_subjects = sorted(set(data.subjects))

    rows = []
    for seed in cfg.seeds:
        plan = make_splits(all_subjects, cfg.protocol, cfg.k, seed=derive_seed(seed, "split"))
        for fi, (train_subj, test_subj) in enumerate(plan.folds):
            row = {"seed": seed, "fold": fi, "test_subjects": sorted(test_subj)}
            try:
                row.update(_run_fold(cfg, data, by_id, index, cache, seed, fi, train_subj, test_subj, all_subjects))
                row["status"] = "ok"
            except Exception as exc:  # noqa: BLE001 - fold failures are reported, not raised
                log.error("fold %d (seed %d) failed: %s", fi, seed, exc)
                row.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                           traceback=traceback.format_exc(limit=5))
            rows.append(row)
    report = {
        "schema_version": REPORT_SCHEMA,
        "kind": "experiment",
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "folds": rows,
        "aggregate": _aggregate(rows),
        "runtime": {"seconds": round(time.time() - t0, 3), "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S")},
    }
    write_report(report, out)
    return report


def _run_fold(cfg, data, by_id, index, cache, seed, fi, train_subj, test_subj, all_subjects) -> dict:
    fold_dir = Path(cfg.out_dir) / f"seed_{seed}" / f"fold_{fi:02d}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    pool = _fold_arrays(data, train_subj)
    test = _fold_arrays(data, test_subj)
    labeled = subsample_labels([by_id[data.ids[i]] for i in pool], cfg.label_fraction,
                               seed=derive_seed(seed, "labels", fi))
    lab_idx = np.array([index[r.sample_id] for r in labeled], dtype=np.int64)
    perm = np.random.default_rng(derive_seed(seed, "val", fi)).permutation(len(lab_idx))
    n_val = int(round(cfg.val_fraction * len(lab_idx)))
    val_idx, train_idx = np.sort(lab_idx[perm[:n_val]]), np.sort(lab_idx[perm[n_val:]])
    ids = {"train": [data.ids[i] for i in train_idx], "val": [data.ids[i] for i in val_idx],
           "test": [data.ids[i] for i in test]}

    ssl_state = None
    if cfg.use_ssl:
        ssl_subjects = sorted(train_subj) if cfg.strict_ssl else all_subjects
        ssl_idx = pool if cfg.strict_ssl else np.arange(len(data))
        ids["ssl"] = [data.ids[i] for i in ssl_idx]
        ssl_state = cache.get(data, ssl_idx, ssl_subjects, seed, cfg.ssl)
    (fold_dir / "ids.json").write_text(json.dumps(ids, sort_keys=True))

    gcfg = GazeTrainConfig(**{**cfg.gaze, "seed": derive_seed(seed, "gaze", fi)})
    result = train_gaze(data.subset(train_idx), data.subset(val_idx), gcfg, ssl_ckpt=ssl_state)
    if cfg.save_models:
        save_gaze(fold_dir / "gaze.ckpt", result)
    te = data.subset(test)
    err = angular_error_deg(predict_arrays(result.model, te.images, te.masks), te.gaze)
    mean_gaze = data.gaze[train_idx].mean(axis=0, keepdims=True)
    base = angular_error_deg(np.repeat(mean_gaze, len(test), axis=0), te.gaze)
    return {"n_train": int(len(train_idx)), "n_val": int(len(val_idx)), "n_test": int(len(test)),
            "mean_error_deg": float(err.mean()), "baseline_error_deg": float(base.mean()),
            "best_epoch": result.best_epoch, "history": result.history}


def _aggregate(rows) -> dict:
    ok = [r for r in rows if r.get("status") == "ok"]
    agg = {"n_folds": len(rows), "n_failed": len(rows) - len(ok)}
    if ok:
        errs = np.array([r["mean_error_deg"] for r in ok])
        base = np.array([r["baseline_error_deg"] for r in ok])
        agg.update(mean_error_deg=float(errs.mean()), std_error_deg=float(errs.std()),
                   baseline_error_deg=float(base.mean()))
        per_seed = {}
        for r in ok:
            per_seed.setdefault(str(r["seed"]), []).append(r["mean_error_deg"])
        agg["per_seed_mean_error_deg"] = {s: float(np.mean(v)) for s, v in per_seed.items()}
    return agg


def run_label_ablation(cfg: ExperimentConfig, fractions=LABEL_FRACTIONS) -> dict:
    """One experiment per label fraction, all sharing the pretrained encoders."""
    if not cfg.use_ssl:
        raise ConfigError("the label ablation fine-tunes the self-supervised model; set use_ssl = true")
    t0 = time.time()
    out = Path(cfg.out_dir)
    runs = []
    rows = []
    for f in fractions:
        sub = ExperimentConfig(**{**cfg.to_dict(), "label_fraction": float(f),
                                  "out_dir": str(out / f"fraction_{int(round(f * 100)):03d}")})
        rep = run_experiment(sub, ssl_cache_dir=out / "ssl")
        runs.append(rep)
        agg = rep["aggregate"]
        rows.append({"label_fraction": float(f), "mean_error_deg": agg.get("mean_error_deg"),
                     "std_error_deg": agg.get("std_error_deg"), "n_failed": agg["n_failed"],
                     "per_seed_mean_error_deg": agg.get("per_seed_mean_error_deg", {})})
    report = {
        "schema_version": REPORT_SCHEMA,
        "kind": "ablation",
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "ablation": rows,
        "folds": [dict(r, label_fraction=rep["config"]["label_fraction"]) for rep in runs for r in rep["folds"]],
        "aggregate": {"n_folds": sum(rep["aggregate"]["n_folds"] for rep in runs),
                      "n_failed": sum(rep["aggregate"]["n_failed"] for rep in runs)},
        "runtime": {"seconds": round(time.time() - t0, 3), "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S")},
    }
    write_report(report, out)
    return report


def strip_runtime(report: dict) -> dict:
    """Report without wall-clock fields, for reproducibility comparisons."""
    return {k: v for k, v in report.items() if k != "runtime"}


def write_report(report: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    (out / "report.md").write_text(render_markdown(report))
    return path


def render_markdown(report: dict) -> str:
    lines = [f"# Gaze experiment report ({report.get('kind', 'experiment')})", "",
             f"config hash `{report.get('config_hash', '')}`", ""]
    if report.get("ablation"):
        lines += ["| Labeled data (%) | Angle error (deg) | std |", "|---|---|---|"]
        for r in report["ablation"]:
            lines.append(f"| {r['label_fraction'] * 100:.0f}% | {_fmt(r['mean_error_deg'])} | {_fmt(r['std_error_deg'])} |")
        lines.append("")
    folds = report.get("folds", [])
    with_frac = any("label_fraction" in r for r in folds)
    head = ["labels"] * with_frac + ["seed", "fold", "test subjects", "error (deg)", "mean-gaze baseline (deg)",
                                     "status"]
    lines += ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in folds:
        cells = [f"{r['label_fraction'] * 100:.0f}%"] if with_frac else []
        cells += [str(r["seed"]), str(r["fold"]), ", ".join(r["test_subjects"]), _fmt(r.get("mean_error_deg")),
                  _fmt(r.get("baseline_error_deg")), r["status"]]
        lines.append("| " + " | ".join(cells) + " |")
    agg = report.get("aggregate", {})
    if "mean_error_deg" in agg:
        lines += ["", f"Mean over folds: {agg['mean_error_deg']:.2f} +/- {agg['std_error_deg']:.2f} deg "
                      f"(mean-gaze baseline {agg['baseline_error_deg']:.2f} deg)"]
    return "\n".join(lines) + "\n"


def _fmt(x):
    return "-" if x is None else f"{x:.2f}"


def load_report(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    report = json.loads(path.read_text())
    if report.get("schema_version") != REPORT_SCHEMA:
        raise ConfigError(f"unsupported report schema {report.get('schema_version')}")
    return report


def emit_plots(report: dict, out_dir) -> list:
    """Per-fold bar chart and error-vs-label-fraction line chart, each with a CSV sidecar."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    folds = [r for r in report.get("folds", []) if r.get("status") == "ok"]
    if folds:
        labels = [_fold_label(r) for r in folds]
        values = [r["mean_error_deg"] for r in folds]
        _write_csv(out / "fold_errors.csv", ["label", "seed", "fold", "mean_error_deg"],
                   [[lab, r["seed"], r["fold"], repr(v)] for lab, r, v in zip(labels, folds, values)])
        fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(values)), 3))
        ax.bar(range(len(values)), values)
        ax.set_xticks(range(len(values)), labels, rotation=90, fontsize=7)
        ax.set_ylabel("mean angular error (deg)")
        fig.tight_layout()
        fig.savefig(out / "fold_errors.png", dpi=100, metadata={"Software": None})
        plt.close(fig)
        written += [out / "fold_errors.png", out / "fold_errors.csv"]
    rows = [r for r in report.get("ablation") or [] if r.get("mean_error_deg") is not None]
    if not rows:
        warnings.warn("report has no label-fraction rows; skipping ablation plot", RuntimeWarning, stacklevel=2)
    else:
        xs = [r["label_fraction"] * 100 for r in rows]
        ys = [r["mean_error_deg"] for r in rows]
        _write_csv(out / "label_fraction.csv", ["label_fraction_pct", "mean_error_deg"],
                   [[repr(x), repr(y)] for x, y in zip(xs, ys)])
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel("labeled data (%)")
        ax.set_ylabel("mean angular error (deg)")
        fig.tight_layout()
        fig.savefig(out / "label_fraction.png", dpi=100, metadata={"Software": None})
        plt.close(fig)
        written += [out / "label_fraction.png", out / "label_fraction.csv"]
    return written


def _fold_label(row) -> str:
    pct = f"{round(row['label_fraction'] * 100)}%/" if "label_fraction" in row else ""
    return f"{pct}s{row['seed']}/f{row['fold']}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def checkpoint_hashes(root) -> dict:
    """sha256 of every ``*.ckpt`` below ``root``, keyed by relative path."""
    root = Path(root)
    return {p.relative_to(root).as_posix(): file_sha256(p) for p in sorted(root.rglob("*.ckpt"))}
