"""Command-line pipeline: generate, train-estimator, attack-sweep, explain, train-detector,
simulate, ingest-lab and report.

Every command reads one YAML/JSON config (section per stage, ``--set a.b=v``
overrides), writes its artifacts under ``<output_root>/<stage>/`` together
with the resolved config and a run manifest listing input and output hashes.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from . import geometry as geo

log = logging.getLogger("advpose")

OUTPUT_ENV = "ADVPOSE_OUTPUT_ROOT"
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

DEFAULTS: dict = {
    "seed": 0,
    "output_root": "runs",
    "scene": {
        "sequences": "table1",
        "frame_count": 2500,
        "frame_stride": 25,
        "frame_offset": 0,
        "image_height": 90,
        "image_width": 120,
        "intrinsics": "desk",
        "light_dir": [0.3, -0.4, -1.0],
        "train_fraction": 0.8,
        "plan_only": False,
    },
    "estimator": {
        "stem_channels": 8,
        "stage_widths": [16, 32, 64, 128],
        "res_blocks": [1, 1, 1, 1],
        "gap_width": 256,
        "leaky_slope": 0.1,
        "dropout": 0.2,
        "dtype": "float32",
    },
    "train": {
        "epochs": 30,
        "batch_size": 16,
        "base_lr": 1e-3,
        "max_lr": None,
        "step_size_epochs": 4.0,
        "eval_every": 5,
        "recalibrate_batch": 128,
        "augment": False,
    },
    "attack": {
        "eps_list": [1.0, 0.5, 0.3, 0.1, 0.05, 0.01],
        "sweep_frames": 200,
    },
    "explain": {
        "background_size": 100,
        "samples": 3000,
        "eps_choices": [0.5, 0.3, 0.1, 0.05, 0.01],
        "frame_stride": 7,
        "frame_offset": 3,
    },
    "detector": {
        "hidden": 100,
        "fc_widths": [64],
        "threshold": 0.5,
        "dtype": "float32",
        "train_fraction": 0.8,
        "validation_fraction": 0.2,
        "max_epochs": 200,
        "batch_size": 64,
        "lr": 1.0,
        "patience": 20,
    },
    "rendezvous": {
        "eps_list": [0.5, 0.3, 0.1, 0.05, 0.01],
        "start_distances": [60, 50, 40, 30, 20, 10],
        "burst_lengths": [5, 10, 15, 20],
        "max_frames": 100,
        "tolerance": 1.0,
        "min_range": 4.0,
        "detection_eps": [0.5, 0.3, 0.1, 0.05, 0.01],
        "detection_frames": 201,
        "attack_probability": 0.2,
        "detection_burst": 5,
    },
    "lab": {
        "mocap_path": None,
        "frames_dir": None,
        "camera_id": "camera",
        "target_id": "target",
        "fps": 30.0,
        "start_time": 0.0,
        "calibration": "anchors",
        "detect": True,
        "eps_list": [0.5, 0.3, 0.1, 0.05, 0.01],
        "burst_length": 10,
        "attack_probability": 0.2,
    },
}


class ConfigError(ValueError):
    pass


class DependencyError(RuntimeError):
    pass


# ------------------------------------------------------------------ config

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key '{key}'")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key '{key}' must be a section")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def _set_path(tree: dict, dotted: str, value) -> dict:
    parts = dotted.split(".")
    over: dict = {}
    cur = over
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return _merge(tree, over)


def load_config(path: Optional[str], overrides=(), output_root: Optional[str] = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        cfg = _merge(cfg, data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, raw = item.split("=", 1)
        cfg = _set_path(cfg, key.strip(), yaml.safe_load(raw))
    if os.environ.get(OUTPUT_ENV):
        cfg["output_root"] = os.environ[OUTPUT_ENV]
    if output_root:
        cfg["output_root"] = output_root
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ------------------------------------------------------------------ manifests

def _sha(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects the inputs and outputs of one command and writes its manifest."""

    def __init__(self, command: str, cfg: dict, stage: str):
        self.command = command
        self.cfg = cfg
        self.root = Path(cfg["output_root"])
        self.dir = self.root / stage
        self.dir.mkdir(parents=True, exist_ok=True)
        self.inputs: dict = {}
        self.outputs: dict = {}
        self.external: dict = {}
        self.t0 = time.perf_counter()

    def rel(self, path: Path) -> str:
        return Path(path).resolve().relative_to(self.root.resolve()).as_posix()

    def need(self, path: Path, producer: str) -> Path:
        path = Path(path)
        if not path.exists():
            raise DependencyError(f"missing upstream artifact {path} (run '{producer}' first)")
        self.inputs[self.rel(path)] = _sha(path)
        return path

    def out(self, path: Path) -> Path:
        self.outputs[self.rel(path)] = _sha(path)
        return path

    def finish(self) -> dict:
        cpath = self.dir / "config.resolved.yaml"
        cpath.write_text(yaml.safe_dump(self.cfg, sort_keys=True))
        self.out(cpath)
        m = {
            "command": self.command,
            "config_hash": config_hash(self.cfg),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "external_inputs": dict(sorted(self.external.items())),
            "tool_version": __version__,
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
        }
        (self.dir / "run_manifest.json").write_text(json.dumps(m, indent=1, sort_keys=True) + "\n")
        return m


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


# ------------------------------------------------------------------ builders

def _intrinsics(cfg: dict) -> geo.CameraIntrinsics:
    name = cfg["scene"]["intrinsics"]
    table = {"desk": geo.K_DESK, "blender": geo.K_BLENDER, "zed": geo.K_ZED}
    if isinstance(name, dict):
        return geo.CameraIntrinsics(**name)
    if name not in table:
        raise ConfigError(f"scene.intrinsics must be one of {sorted(table)} or a mapping")
    return table[name]


def _specs(cfg: dict):
    from .scenegen import detection_specs, table1_specs
    sc = cfg["scene"]
    if sc["sequences"] == "table1":
        return table1_specs(frame_count=sc["frame_count"], seed=cfg["seed"])
    if sc["sequences"] == "detection":
        return detection_specs(frame_count=sc["frame_count"], seed=cfg["seed"])
    raise ConfigError("scene.sequences must be 'table1' or 'detection'")


def _estimator_config(cfg: dict):
    from .estimator import EstimatorConfig
    e = cfg["estimator"]
    return EstimatorConfig(input_height=cfg["scene"]["image_height"], input_width=cfg["scene"]["image_width"],
                           stem_channels=e["stem_channels"], stage_widths=tuple(e["stage_widths"]),
                           res_blocks=tuple(e["res_blocks"]), gap_width=e["gap_width"], leaky_slope=e["leaky_slope"],
                           dropout=e["dropout"], dtype=e["dtype"])


def _size(cfg: dict) -> tuple:
    return cfg["scene"]["image_height"], cfg["scene"]["image_width"]


def _load_weights(run: Run):
    from .estimator import ModelWeights
    return ModelWeights.load(run.need(run.root / "estimator" / "weights.npz", "train-estimator"))


def _load_frames(run: Run):
    from .scenegen import load_dataset
    run.need(run.root / "dataset" / "manifest.json", "generate")
    frames, manifest = load_dataset(run.root / "dataset")
    run.inputs[run.rel(run.root / "dataset" / "labels.csv")] = manifest.labels_sha256
    return frames, manifest


# ------------------------------------------------------------------ commands

def cmd_generate(cfg: dict) -> dict:
    from .scenegen import assign_split, plan_manifest, render_sequences, write_dataset
    run = Run("generate", cfg, "dataset")
    sc = cfg["scene"]
    specs = _specs(cfg)
    K = _intrinsics(cfg)
    if sc["plan_only"]:
        m = plan_manifest(specs, _size(cfg), cfg["seed"], sc["train_fraction"], K, sc["frame_stride"])
        path = run.dir / "manifest.json"
        path.write_text(json.dumps(m.to_dict(), indent=1, sort_keys=True) + "\n")
        run.out(path)
        log.info("planned %d frames over %d sequences", len(m.frames), len(specs))
        return run.finish()
    frames = render_sequences(specs, K, _size(cfg), light_dir=tuple(sc["light_dir"]),
                              frame_stride=sc["frame_stride"], frame_offset=sc["frame_offset"])
    frames.splits = assign_split(len(frames), sc["train_fraction"], cfg["seed"])
    from .scenegen import DatasetManifest
    m = DatasetManifest(image_size=_size(cfg), global_seed=cfg["seed"], trajectories=[s.to_dict() for s in specs],
                        split_fractions={"train": sc["train_fraction"], "test": round(1 - sc["train_fraction"], 12)},
                        intrinsics={"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy})
    write_dataset(frames, m, run.dir)
    run.out(run.dir / "manifest.json")
    run.out(run.dir / "labels.csv")
    log.info("rendered %d frames", len(frames))
    return run.finish()


def cmd_train_estimator(cfg: dict) -> dict:
    from .estimator import TrainConfig, evaluate, train
    from .scenegen import AugmentConfig
    run = Run("train-estimator", cfg, "estimator")
    frames, _ = _load_frames(run)
    t = cfg["train"]
    aug = AugmentConfig(blur_sigma=1.0, noise_sigma=0.02, jpeg_quality=50, brightness=1.3) if t["augment"] else None
    tc = TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], base_lr=t["base_lr"], max_lr=t["max_lr"],
                     step_size_epochs=t["step_size_epochs"], augmentation=aug, eval_every=t["eval_every"],
                     recalibrate_batch=t["recalibrate_batch"], seed=cfg["seed"])
    train_set, test_set = frames.split("train"), frames.split("test")
    weights, history = train(train_set, tc, _estimator_config(cfg))
    weights.save(run.dir / "weights.npz")
    run.out(run.dir / "weights.npz")
    rows = [[r.epoch, _fmt(r.lr), _fmt(r.loss), _fmt(r.position_error), _fmt(r.attitude_error),
             _fmt(r.sigma_p), _fmt(r.sigma_r)] for r in history]
    run.out(_write_csv(run.dir / "history.csv",
                       ["epoch", "lr", "loss", "position_error", "attitude_error", "sigma_p", "sigma_r"], rows))
    metrics = {"train": evaluate(weights, train_set)}
    if len(test_set):
        metrics["test"] = evaluate(weights, test_set)
    (run.dir / "metrics.json").write_text(json.dumps(_round(metrics), indent=1, sort_keys=True) + "\n")
    run.out(run.dir / "metrics.json")
    return run.finish()


def _round(obj):
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round(v) for v in obj]
    return obj


def cmd_attack_sweep(cfg: dict) -> dict:
    from .attacks import sweep_epsilon
    run = Run("attack-sweep", cfg, "attack")
    weights = _load_weights(run)
    frames, _ = _load_frames(run)
    test = frames.split("test")
    if len(test) == 0:
        test = frames
    n = min(len(test), cfg["attack"]["sweep_frames"])
    rows = sweep_epsilon(weights, test.subset(np.arange(n)), cfg["attack"]["eps_list"])
    run.out(_write_csv(run.dir / "sweep.csv", ["epsilon", "attacked", "position_error", "attitude_error"],
                       [[r["epsilon"], int(r["attacked"]), _fmt(r["position_error"]), _fmt(r["attitude_error"])]
                        for r in rows]))
    return run.finish()


def cmd_explain(cfg: dict) -> dict:
    from .attacks import fgsm_batch
    from .estimator import predict
    from .explain import collect_background, save_signatures, shap_batch
    from .scenegen import render_sequences, table1_specs
    run = Run("explain", cfg, "explain")
    weights = _load_weights(run)
    frames, manifest = _load_frames(run)
    ex = cfg["explain"]
    train_set = frames.split("train")
    bg_images = train_set.batch(np.arange(len(train_set)), dtype=weights.config.dtype)
    background = collect_background(weights, bg_images, min(ex["background_size"], len(train_set)), cfg["seed"],
                                    source_hash=manifest.digest)
    np.save(run.dir / "background.npy", background.activations)
    run.out(run.dir / "background.npy")

    # fresh frames, offset from the estimator's training stride
    specs = table1_specs(frame_count=cfg["scene"]["frame_count"], seed=cfg["seed"])
    pool = render_sequences(specs, _intrinsics(cfg), _size(cfg), light_dir=tuple(cfg["scene"]["light_dir"]),
                            frame_stride=ex["frame_stride"], frame_offset=ex["frame_offset"])
    seen = set(zip(frames.sequence_ids.tolist(), frames.frame_indices.tolist()))
    fresh = np.array([i for i, key in enumerate(zip(pool.sequence_ids.tolist(), pool.frame_indices.tolist()))
                      if key not in seen], dtype=np.intp)
    rng = np.random.default_rng([cfg["seed"], 3])
    n = min(ex["samples"], len(fresh))
    idx = np.sort(rng.choice(fresh, n, replace=False))
    x = pool.batch(idx, dtype=weights.config.dtype)
    eps = rng.choice(np.asarray(ex["eps_choices"], dtype=np.float64), n)
    adv = np.empty_like(x)
    for e in np.unique(eps):
        sel = eps == e
        adv[sel] = fgsm_batch(weights, x[sel], pool.positions[idx][sel], pool.quaternions[idx][sel], float(e))
    _, gap_clean = predict(weights, x)
    _, gap_adv = predict(weights, adv)
    sig = np.concatenate([shap_batch(weights, gap_clean, background), shap_batch(weights, gap_adv, background)])
    labels = np.concatenate([np.zeros(n, bool), np.ones(n, bool)])
    eps_col = np.concatenate([np.zeros(n), eps])
    names = [f"s{int(pool.sequence_ids[i]):03d}_{int(pool.frame_indices[i]):06d}" for i in idx]
    save_signatures(run.dir / "signatures.npz", sig, names + names, weights.fingerprint, background.hash,
                    len(background), labels, extra={"source_dataset": manifest.digest})
    np.save(run.dir / "epsilons.npy", eps_col)
    run.out(run.dir / "signatures.npz")
    run.out(run.dir / "epsilons.npy")
    return run.finish()


def _detector_configs(cfg: dict, width: int):
    from .detector import DetectorConfig, DetectorTrainConfig
    d = cfg["detector"]
    dc = DetectorConfig(feature_width=width, hidden=d["hidden"], fc_widths=tuple(d["fc_widths"]),
                        threshold=d["threshold"], dtype=d["dtype"], seed=cfg["seed"])
    tc = DetectorTrainConfig(max_epochs=d["max_epochs"], batch_size=d["batch_size"], lr=d["lr"],
                             patience=d["patience"], validation_fraction=d["validation_fraction"], seed=cfg["seed"])
    return dc, tc


def per_epsilon_accuracy(records, eps: np.ndarray) -> dict:
    """Accuracy on the attacked samples of each epsilon together with every clean sample."""
    from .detector import detection_accuracy
    clean = [r for r, e in zip(records, eps) if e == 0]
    out = {}
    for e in sorted(set(float(v) for v in eps if v > 0), reverse=True):
        out[e] = detection_accuracy(clean + [r for r, v in zip(records, eps) if v == e])
    return out


def cmd_train_detector(cfg: dict) -> dict:
    from .detector import detect_batch, detection_accuracy, split_indices, train_detector, write_detection_report
    from .explain import load_signatures
    run = Run("train-detector", cfg, "detector")
    weights = _load_weights(run)
    sig, header, other = load_signatures(run.need(run.root / "explain" / "signatures.npz", "explain"),
                                         expect_fingerprint=weights.fingerprint)
    eps = np.load(run.need(run.root / "explain" / "epsilons.npy", "explain"))
    labels = other["labels"].astype(bool)
    tr, te = split_indices(len(sig), cfg["detector"]["train_fraction"], cfg["seed"])
    dc, tc = _detector_configs(cfg, sig.shape[2])
    det, hist = train_detector(sig[tr], labels[tr], dc, tc, weights.fingerprint)
    det.save(run.dir / "detector.npz")
    run.out(run.dir / "detector.npz")
    run.out(_write_csv(run.dir / "history.csv", ["epoch", "train_loss", "val_loss"],
                       [[i + 1, _fmt(a), _fmt(b)] for i, (a, b) in enumerate(zip(hist.train_loss, hist.val_loss))]))
    recs = detect_batch(det, sig[te], labels[te], te)
    write_detection_report(run.dir / "test_records.csv", recs)
    run.out(run.dir / "test_records.csv")
    per_eps = per_epsilon_accuracy(recs, eps[te])
    rows = [["all", _fmt(detection_accuracy(recs)), len(recs)]]
    rows += [[e, _fmt(a), int(np.sum((eps[te] == e) | (eps[te] == 0)))] for e, a in per_eps.items()]
    run.out(_write_csv(run.dir / "evaluation.csv", ["epsilon", "accuracy", "samples"], rows))
    summary = {"best_epoch": hist.best_epoch, "stop_epoch": hist.stop_epoch, "stopped_early": hist.stopped_early,
               "train_samples": int(len(tr)), "test_samples": int(len(te))}
    (run.dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    run.out(run.dir / "summary.json")
    return run.finish()


def cmd_simulate(cfg: dict) -> dict:
    from .detector import DetectorWeights, write_detection_report
    from .explain import BackgroundSet
    from .rendezvous import (GuidanceState, Scene, attack_matrix, detection_run, run_episode, write_detection_table,
                             write_episode_trace, write_matrix_csv)
    from .scenegen import detection_specs
    run = Run("simulate", cfg, "simulate")
    weights = _load_weights(run)
    rz = cfg["rendezvous"]
    scene = Scene(intrinsics=_intrinsics(cfg), size=_size(cfg), light_dir=tuple(cfg["scene"]["light_dir"]))
    guidance = GuidanceState(tolerance=rz["tolerance"], min_range=rz["min_range"])
    base = run_episode(weights, scene, guidance=guidance, max_frames=rz["max_frames"])
    write_episode_trace(run.dir / "baseline_trace.csv", base)
    run.out(run.dir / "baseline_trace.csv")
    matrices = [attack_matrix(weights, e, rz["start_distances"], rz["burst_lengths"], scene=scene, guidance=guidance,
                              max_frames=rz["max_frames"]) for e in rz["eps_list"]]
    write_matrix_csv(run.dir / "matrix.csv", matrices)
    run.out(run.dir / "matrix.csv")
    doc = {"baseline": {"reached_target": base.reached_target, "frames": base.frames,
                        "final_position": [round(float(v), 6) for v in base.final_position],
                        "termination": base.termination},
           "matrices": [m.to_dict() for m in matrices]}
    det_path = run.root / "detector" / "detector.npz"
    if det_path.exists():
        det = DetectorWeights.load(run.need(det_path, "train-detector"), expect_fingerprint=weights.fingerprint)
        bg = BackgroundSet(np.load(run.need(run.root / "explain" / "background.npy", "explain")))
        rows, _ = detection_run(weights, det, bg, detection_specs(frame_count=rz["detection_frames"], seed=cfg["seed"]),
                                rz["detection_eps"], rz["attack_probability"], rz["detection_burst"], cfg["seed"], scene)
        write_detection_table(run.dir / "detection.csv", rows)
        run.out(run.dir / "detection.csv")
        doc["detection_average"] = round(float(np.mean([r.accuracy for r in rows])), 6)
    (run.dir / "simulate.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    run.out(run.dir / "simulate.json")
    return run.finish()


def cmd_ingest_lab(cfg: dict) -> dict:
    from PIL import Image

    from .scenegen import DatasetManifest, FrameSet, match_mocap, read_mocap_export, write_dataset
    run = Run("ingest-lab", cfg, "lab")
    lab = cfg["lab"]
    if not lab["mocap_path"] or not lab["frames_dir"]:
        raise ConfigError("lab.mocap_path and lab.frames_dir are required for ingest-lab")
    records = read_mocap_export(Path(lab["mocap_path"]), lab["camera_id"], lab["target_id"])
    files = sorted(Path(lab["frames_dir"]).glob("*.png"))
    if not files:
        raise DependencyError(f"no PNG frames in {lab['frames_dir']}")
    ts = lab["start_time"] + np.arange(len(files)) / lab["fps"]
    match = match_mocap(ts, records)
    calib = {"anchors": geo.LabCalibration(), "intrinsics": geo.LabCalibration.from_intrinsics(),
             "fit": geo.LabCalibration.fit_anchors()}.get(lab["calibration"])
    if calib is None:
        raise ConfigError("lab.calibration must be 'anchors', 'intrinsics' or 'fit'")
    h, w = _size(cfg)
    images = np.stack([np.asarray(Image.open(f).convert("RGB").resize((w, h), Image.BILINEAR)) for f in files])
    frames = FrameSet(images=images,
                      positions=np.stack([geo.lab_to_model_position(l.position, calib) for l in match.labels]),
                      quaternions=np.stack([l.quaternion for l in match.labels]),
                      sequence_ids=np.full(len(files), 900, dtype=np.int64),
                      frame_indices=np.arange(len(files), dtype=np.int64), timestamps=ts,
                      splits=np.array(["test"] * len(files)))
    m = DatasetManifest(image_size=(h, w), global_seed=cfg["seed"], split_fractions={"train": 0.0, "test": 1.0})
    write_dataset(frames, m, run.dir)
    run.external[str(lab["mocap_path"])] = _sha(Path(lab["mocap_path"]))
    for f in files:
        run.external[str(f)] = _sha(f)
    run.out(run.dir / "manifest.json")
    run.out(run.dir / "labels.csv")
    doc = {"frames": len(files), "max_sync_gap_s": round(match.max_gap, 6), "calibration_scalar": round(calib.c, 6)}
    wpath = run.root / "estimator" / "weights.npz"
    if wpath.exists():
        from .estimator import evaluate
        weights = _load_weights(run)
        doc["evaluation"] = _round(evaluate(weights, frames))
        dpath = run.root / "detector" / "detector.npz"
        if lab["detect"] and dpath.exists():
            doc["detection"] = _lab_detection(run, cfg, weights, frames)
    (run.dir / "lab.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    run.out(run.dir / "lab.json")
    return run.finish()


def _lab_detection(run: Run, cfg: dict, weights, frames) -> list:
    from .attacks import AttackConfig, fgsm_batch, schedule_attacks
    from .detector import DetectorWeights, detect_batch, detection_accuracy
    from .estimator import predict
    from .explain import BackgroundSet, shap_batch
    lab = cfg["lab"]
    det = DetectorWeights.load(run.need(run.root / "detector" / "detector.npz", "train-detector"), weights.fingerprint)
    bg = BackgroundSet(np.load(run.need(run.root / "explain" / "background.npy", "explain")))
    x = frames.batch(np.arange(len(frames)), dtype=weights.config.dtype)
    rows = []
    for e in lab["eps_list"]:
        mask = schedule_attacks(len(frames), AttackConfig(e, lab["attack_probability"], lab["burst_length"], cfg["seed"]))
        adv = x.copy()
        if mask.any():
            adv[mask] = fgsm_batch(weights, x[mask], frames.positions[mask], frames.quaternions[mask], e)
        _, gap = predict(weights, adv)
        recs = detect_batch(det, shap_batch(weights, gap, bg), mask)
        rows.append({"epsilon": e, "accuracy": round(detection_accuracy(recs), 6), "attacked_frames": int(mask.sum())})
    return rows


def _check_frames(manifest_path: Path) -> list:
    """Frame files listed (with hashes) inside a dataset manifest."""
    doc = json.loads(manifest_path.read_text())
    bad = []
    for fr in doc.get("frames", []):
        if not fr.get("sha256"):  # plan-only manifests carry no hashes
            continue
        f = manifest_path.parent / fr["file"]
        if not f.exists():
            bad.append(f"{manifest_path.parent.name}: {fr['file']} is missing")
        elif _sha(f) != fr["sha256"]:
            bad.append(f"{manifest_path.parent.name}: {fr['file']} changed since it was written")
    return bad


def cmd_report(cfg: dict) -> dict:
    root = Path(cfg["output_root"])
    manifests = sorted(root.glob("*/run_manifest.json"))
    manifests = [m for m in manifests if m.parent.name != "report"]
    if not manifests:
        raise DependencyError(f"no run manifests under {root}")
    dangling = []
    for mpath in manifests:
        m = json.loads(mpath.read_text())
        for rel, digest in {**m["inputs"], **m["outputs"]}.items():
            p = root / rel
            if not p.exists():
                dangling.append(f"{mpath.parent.name}: {rel} is missing")
            elif rel in m["outputs"] and _sha(p) != digest:
                dangling.append(f"{mpath.parent.name}: {rel} changed since it was written")
            elif rel.endswith("/manifest.json") and rel in m["outputs"]:
                dangling += _check_frames(p)
    if dangling:
        raise DependencyError("dangling artifact references:\n  " + "\n  ".join(dangling))
    run = Run("report", cfg, "report")
    index = {}
    sources = {
        "fig4_training.csv": root / "estimator" / "history.csv",
        "fig6_sweep.csv": root / "attack" / "sweep.csv",
        "tables3_7_matrix.csv": root / "simulate" / "matrix.csv",
        "table8_detection.csv": root / "simulate" / "detection.csv",
        "detector_evaluation.csv": root / "detector" / "evaluation.csv",
    }
    for name, src in sources.items():
        if src.exists():
            run.need(src, "")
            (run.dir / name).write_bytes(src.read_bytes())
            run.out(run.dir / name)
            index[name] = run.rel(src)
    lab_doc = root / "lab" / "lab.json"
    if lab_doc.exists():
        doc = json.loads(run.need(lab_doc, "ingest-lab").read_text())
        if "detection" in doc:
            rows = [[r["epsilon"], _fmt(r["accuracy"]), r["attacked_frames"]] for r in doc["detection"]]
            run.out(_write_csv(run.dir / "table10_lab_detection.csv", ["epsilon", "accuracy", "attacked_frames"], rows))
            index["table10_lab_detection.csv"] = run.rel(lab_doc)
    sim = root / "simulate" / "simulate.json"
    if sim.exists():
        doc = json.loads(sim.read_text())
        rows = []
        for m in doc["matrices"]:
            by_burst = {}
            for c in m["cells"]:
                if c["outcome"] != "untested":
                    by_burst.setdefault(c["burst"], []).append(c["outcome"] == "success")
            rows += [[m["epsilon"], b, _fmt(float(np.mean(v))), len(v)] for b, v in sorted(by_burst.items())]
        run.out(_write_csv(run.dir / "attack_success_by_burst.csv",
                           ["epsilon", "burst_length", "success_rate", "tested_cells"], rows))
        index["attack_success_by_burst.csv"] = run.rel(sim)
    (run.dir / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    run.out(run.dir / "index.json")
    return run.finish()


COMMANDS = {
    "generate": cmd_generate,
    "train-estimator": cmd_train_estimator,
    "attack-sweep": cmd_attack_sweep,
    "explain": cmd_explain,
    "train-detector": cmd_train_detector,
    "simulate": cmd_simulate,
    "ingest-lab": cmd_ingest_lab,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="advpose", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="YAML or JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. --set train.epochs=5")
        p.add_argument("-o", "--output-root", help=f"output directory (else ${OUTPUT_ENV}, else config)")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.output_root)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
