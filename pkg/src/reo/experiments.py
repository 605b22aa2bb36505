"""Experiment drivers: calibration-noise sweep, stage timing, BEV dumps, aux-task ablation."""
from __future__ import annotations

import csv
import io as _io
import os
import re
import time
from dataclasses import replace

import numpy as np

from .geometry import (CameraModel, normalize_to_centers, perturb_extrinsics, reference_pixel_displacement,
                       sample_voxels)
from .model import ForwardInputs, REOModel
from .scene import SceneConfig, default_rig, make_sample, scene_seed
from .tensor import ConfigError, no_grad
from .metrics import ConfusionMatrix, class_iou_and_miou, scene_completion_iou
from .train import Corpus, coarse_spec, evaluate_scenes, log_csv, prepare_scene, train

STAGES = ("encode", "tokenize", "cst_lidar", "cst_camera", "context_heads", "fine_sample")
CST_STAGES = ("tokenize", "cst_lidar", "cst_camera")
DEFAULT_SIGMAS = tuple(2.0 ** -e for e in range(15, 9, -1))


def scene_config_for(model_cfg):
    """Scene settings matching a model config (grid 0.8 m, BEV footprint shared)."""
    base = SceneConfig()
    h, w = model_cfg.bev_size
    foot = (h * model_cfg.bev_cell, w * model_cfg.bev_cell)
    vs = base.grid.voxel_size
    ext = (int(round(foot[0] / vs[0])), int(round(foot[1] / vs[1])), base.grid.extents[2])
    grid = replace(base.grid, origin=(-foot[0] / 2, -foot[1] / 2, 0.0), extents=ext)
    return replace(base, grid=grid, classes=model_cfg.classes, n_cameras=model_cfg.n_cameras,
                   image_size=tuple(model_cfg.image_size))


def _toy_inputs(model_cfg, seed):
    scfg = scene_config_for(model_cfg)
    arrays = make_sample(scene_seed(seed, 0), scfg)
    scene = prepare_scene("bench", arrays, model_cfg)
    queries = _queries(scfg.grid, model_cfg)
    vs = sample_voxels(scene.voxels, model_cfg.n_lidar, seed)
    inputs = ForwardInputs(scene.images, vs.rows, queries, model_cfg.mode)
    return inputs, arrays, scfg


def _queries(grid, model_cfg):
    return normalize_to_centers(grid.centers(), coarse_spec(grid, model_cfg))


# ------------------------------------------------------------- robustness

def _outputs(model, inputs):
    with no_grad():
        p = model.forward(inputs)
    return [p.fine_sem.data, p.fine_geo.data, p.fine_rgb.data, p.coarse_sem.data]


def robustness_sweep(model, inputs, rig, reference_points, sigmas=DEFAULT_SIGMAS, trials=100, seed=0):
    """Perturb the rig extrinsics and measure what changes.

    The network never sees the rig, so its outputs are recomputed from the
    same inputs and compared bitwise with the clean run. A projector that
    does use the rig reports the mean pixel shift of ``reference_points``.
    Returns rows (sigma, trial, reo_output_delta, baseline_pixel_displacement).
    """
    if any(s < 0 for s in sigmas):
        raise ConfigError("sigmas must be nonnegative")
    model.eval()
    ref = _outputs(model, inputs)
    rows = []
    for si, sigma in enumerate(sigmas):
        for trial in range(trials):
            ss = np.random.SeedSequence([seed, si, trial])
            noisy = [CameraModel(c.intrinsics, perturb_extrinsics(c.extrinsics, sigma, s), c.height, c.width)
                     for c, s in zip(rig.cameras, ss.spawn(len(rig.cameras)))]
            out = _outputs(model, inputs)
            same = all(np.array_equal(a, b) for a, b in zip(out, ref))
            delta = 0.0 if same else max(float(np.max(np.abs(a - b))) for a, b in zip(out, ref))
            disp = float(np.mean([reference_pixel_displacement(reference_points, c, n)
                                  for c, n in zip(rig.cameras, noisy)]))
            rows.append({"sigma": sigma, "trial": trial, "reo_output_delta": delta,
                         "baseline_pixel_displacement": disp})
    return rows


def robustness_summary(rows):
    out = {}
    for r in rows:
        d = out.setdefault(r["sigma"], {"max_delta": 0.0, "disp": []})
        d["max_delta"] = max(d["max_delta"], r["reo_output_delta"])
        d["disp"].append(r["baseline_pixel_displacement"])
    return [{"sigma": s, "reo_max_delta": v["max_delta"], "baseline_mean_displacement": float(np.mean(v["disp"]))}
            for s, v in sorted(out.items())]


def robustness_csv(rows):
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=("sigma", "trial", "reo_output_delta", "baseline_pixel_displacement"),
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def run_robustness(model, sigmas=DEFAULT_SIGMAS, trials=100, seed=0):
    """Sweep on one synthesized scene with the default rig."""
    inputs, _, scfg = _toy_inputs(model.cfg, seed)
    rig = default_rig(scfg)
    pts = coarse_spec(scfg.grid, model.cfg).centers()
    return robustness_sweep(model, inputs, rig, pts, sigmas, trials, seed)


# ------------------------------------------------------------------ bench

def bench(model_cfg, repeats=50, seed=0, model=None, warmup=3):
    """Median/MAD wall time per forward stage, in inference mode."""
    if repeats < 10:
        raise ConfigError(f"repeats must be >= 10, got {repeats}")
    model = model or REOModel(model_cfg, seed=seed)
    model.eval()
    inputs, _, _ = _toy_inputs(model.cfg, seed)
    runs = []
    with no_grad():
        for i in range(warmup + repeats):
            tm = {}
            t0 = time.perf_counter()
            model.forward(inputs, tm)
            tm["total"] = time.perf_counter() - t0
            if i >= warmup:
                runs.append(tm)
    rows = []
    med_total = float(np.median([r["total"] for r in runs]))
    for name in STAGES + ("total",):
        vals = np.array([r.get(name, 0.0) for r in runs])
        med = float(np.median(vals))
        rows.append({"component": name, "median_ms": med * 1e3,
                     "mad_ms": float(np.median(np.abs(vals - med))) * 1e3,
                     "percent": 100.0 * med / med_total})
    stage_sum = sum(r["median_ms"] for r in rows if r["component"] in STAGES)
    cst = sum(r["median_ms"] for r in rows if r["component"] in CST_STAGES)
    return {"rows": rows, "repeats": repeats, "total_ms": med_total * 1e3, "stage_sum_ms": stage_sum,
            "cst_ms": cst, "cst_percent": 100.0 * cst / (med_total * 1e3)}


def bench_table(report):
    lines = [f"{'component':<14}{'median ms':>11}{'MAD ms':>9}{'%':>8}"]
    for r in report["rows"]:
        lines.append(f"{r['component']:<14}{r['median_ms']:>11.3f}{r['mad_ms']:>9.3f}{r['percent']:>8.2f}")
    lines.append(f"{'cst (tok+attn)':<14}{report['cst_ms']:>11.3f}{'':>9}{report['cst_percent']:>8.2f}")
    lines.append(f"stage sum {report['stage_sum_ms']:.3f} ms vs total {report['total_ms']:.3f} ms "
                 f"over {report['repeats']} repeats")
    return "\n".join(lines)


# --------------------------------------------------------------- BEV dump

def to_gray(channel):
    """Min-max scale to 0..255; a constant channel becomes mid-gray (128)."""
    x = np.asarray(channel, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.full(x.shape, 128, dtype=np.uint8)
    return np.rint((x - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, img):
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)


def bev_maps(model, inputs):
    with no_grad():
        pred = model.forward(inputs)
    h, w = model.cfg.bev_size
    return pred.bev.data.T.reshape(-1, h, w)


def dump_bev(model, inputs, out, n=10):
    """Write the first min(n, C_t) BEV channels as PGM files; returns their paths."""
    os.makedirs(out, exist_ok=True)
    maps = bev_maps(model, inputs)
    paths = []
    for c in range(min(n, maps.shape[0])):
        p = os.path.join(out, f"bev_{c:02d}.pgm")
        write_pgm(p, to_gray(maps[c]))
        paths.append(p)
    return paths


def scene_inputs(corpus, name, model_cfg, seed=0):
    scene = corpus._load(name)
    vs = sample_voxels(scene.voxels, model_cfg.n_lidar, seed)
    return ForwardInputs(scene.images, vs.rows, corpus.queries, model_cfg.mode)


# --------------------------------------------------------------- ablation

def run_ablation(cfg, out=None, max_train=None, n_val=None):
    """Train with and without the 2-D auxiliary tasks; report loss curves and val mIoU.

    Returns (report csv text, {variant: train log rows}).
    """
    corpus = Corpus(cfg.corpus, cfg.model, cfg.workers)
    train_scenes = corpus.load("train", max_train)
    val_scenes = corpus.load("val", n_val)
    logs, lines = {}, []
    for variant, aux in (("with_aux", True), ("without_aux", False)):
        vcfg = replace(cfg, aux_tasks=aux)
        sub = None if out is None else os.path.join(out, variant)
        res = train(vcfg, out=sub, scenes=train_scenes, queries=corpus.queries)
        logs[variant] = res.log
        cms = evaluate_scenes(res.model, val_scenes, corpus.queries)
        pooled = sum(cms.values(), ConfusionMatrix(cfg.model.classes + 1))
        _, miou, _ = class_iou_and_miou(pooled)
        sc, _ = scene_completion_iou(pooled)
        lines.append((variant, res.log[0]["total"], res.log[-1]["total"], miou, sc))
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("variant", "first_total", "last_total", "val_miou", "val_sc_iou"))
    for row in lines:
        w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    delta = lines[0][3] - lines[1][3]
    w.writerow(("miou_delta_with_minus_without", repr(float(delta)),
                "higher_with_aux" if delta > 0 else "not_higher_with_aux", "", ""))
    text = buf.getvalue()
    if out is not None:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "ablation.csv"), "w") as fh:
            fh.write(text)
        for variant, log in logs.items():
            with open(os.path.join(out, f"loss_curve_{variant}.csv"), "w") as fh:
                fh.write(log_csv(log))
    return text, logs

