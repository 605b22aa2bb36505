"""Training loop, optimizer, checkpoints and evaluation."""
from __future__ import annotations

import csv
import io as _io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import io
from .config import from_dict, to_dict
from .geometry import GridSpec, normalize_to_centers, sample_voxels, voxelize
from .losses import TERM_NAMES, loss_2d, loss_3d, total_loss
from .metrics import ConfusionMatrix, report_rows, summary, uniform_chance_miou, write_csv
from .model import ForwardInputs, REOModel
from .scene import CLASS_NAMES, load_manifest, load_scene
from .tensor import ConfigError, DataError, NumericError, backward, no_grad

LOG_COLUMNS = ("step", "epoch", "lr") + TERM_NAMES + ("total",)


class TrainingAborted(NumericError):
    """Non-finite loss or gradient; a diagnostic dump was written."""

    def __init__(self, msg, dump_path=None):
        super().__init__(msg)
        self.dump_path = dump_path


# ------------------------------------------------------------------- data

@dataclass
class SceneData:
    name: str
    labels: np.ndarray       # (H, W, D) int
    images: np.ndarray       # (N, 3, H, W)
    voxels: object           # LidarVoxelSet, every occupied LiDAR voxel
    sem2d: np.ndarray        # (N, H, W) in 0..S-1 or -1
    depth2d: np.ndarray
    texture: np.ndarray
    texture_mask: np.ndarray
    visible: np.ndarray


def prepare_scene(name, arrays, model_cfg):
    labels = np.rint(arrays["labels"]).astype(np.int64)
    sem = np.rint(arrays["sem2d"]).astype(np.int64)
    return SceneData(
        name=name,
        labels=labels,
        images=arrays["images"].astype(np.float32),
        voxels=voxelize(arrays["cloud"], model_cfg.lidar_spec()),
        # stored 2-D labels use 1..S; the auxiliary head predicts S classes, free is never seen in pixels
        sem2d=np.where(sem > 0, sem - 1, -1),
        depth2d=arrays["depth2d"],
        texture=arrays["texture"],
        texture_mask=arrays["texture_mask"] > 0.5,
        visible=arrays["visible"] > 0.5 if "visible" in arrays else np.ones(labels.shape, dtype=bool),
    )


def coarse_spec(grid, model_cfg):
    """The model's coarse voxel grid laid over the scene grid."""
    lo = np.asarray(grid.origin, dtype=np.float64)
    size = np.asarray(grid.voxel_size) * np.asarray(grid.extents)
    h, w = model_cfg.bev_size
    d = model_cfg.d_coarse
    return GridSpec(tuple(lo), tuple(size / np.array([h, w, d])), (h, w, d))


def check_compatible(scene_cfg, model_cfg):
    """Raise ConfigError when a corpus cannot feed this model configuration."""
    problems = []
    if scene_cfg["classes"] != model_cfg.classes:
        problems.append(f"classes {scene_cfg['classes']} vs {model_cfg.classes}")
    if scene_cfg["n_cameras"] != model_cfg.n_cameras:
        problems.append(f"cameras {scene_cfg['n_cameras']} vs {model_cfg.n_cameras}")
    if tuple(scene_cfg["image_size"]) != tuple(model_cfg.image_size):
        problems.append(f"image size {scene_cfg['image_size']} vs {model_cfg.image_size}")
    size = np.asarray(scene_cfg["voxel_size"]) * np.asarray(scene_cfg["extents"])
    bev = np.asarray(model_cfg.bev_size) * model_cfg.bev_cell
    if not np.allclose(size[:2], bev):
        problems.append(f"scene footprint {size[:2]} m vs BEV {bev} m")
    if scene_cfg["extents"][2] % model_cfg.d_coarse:
        problems.append(f"{scene_cfg['extents'][2]} height cells not divisible by d_coarse={model_cfg.d_coarse}")
    if problems:
        raise ConfigError("corpus does not match model config: " + "; ".join(problems))


class Corpus:
    def __init__(self, root, model_cfg, workers=0):
        if not os.path.exists(os.path.join(root, "manifest.json")):
            raise DataError(f"no manifest.json under {root}")
        self.root = root
        self.manifest = load_manifest(root)
        self.model_cfg = model_cfg
        self.workers = workers
        cfg = self.manifest["config"]
        check_compatible(cfg, model_cfg)
        self.grid = GridSpec(tuple(cfg["origin"]), tuple(cfg["voxel_size"]), tuple(cfg["extents"]))
        self.coarse = coarse_spec(self.grid, model_cfg)
        self.queries = normalize_to_centers(self.grid.centers(), self.coarse)

    def names(self, split):
        if split not in ("train", "val"):
            raise ConfigError(f"unknown split {split!r}")
        return [s["name"] for s in self.manifest["scenes"] if s["split"] == split]

    def _load(self, name):
        try:
            arrays = load_scene(self.root, name)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read scene {name}: {exc}") from None
        return prepare_scene(name, arrays, self.model_cfg)

    def load(self, split, limit=None):
        names = self.names(split)[:limit]
        if self.workers:
            # map keeps submission order, so results do not depend on thread timing
            with ThreadPoolExecutor(self.workers) as pool:
                return list(pool.map(self._load, names))
        return [self._load(n) for n in names]


# -------------------------------------------------------------- optimizer

def cosine_lr(step, total_steps, base_lr):
    """Cosine decay from base_lr at step 0 to exactly 0 at the last step."""
    if total_steps <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


class AdamW:
    """Adam moments with decoupled weight decay on matrices and kernels (ndim >= 2)."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float32) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float32) for k, p in params.items()}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = np.asarray(p.grad, dtype=np.float32)
            m, v = self.m[k], self.v[k]
            m *= np.float32(b1)
            m += np.float32(1.0 - b1) * g
            v *= np.float32(b2)
            v += np.float32(1.0 - b2) * (g * g)
            upd = (m / np.float32(c1)) / (np.sqrt(v / np.float32(c2)) + np.float32(self.eps))
            data = p.data
            if self.weight_decay and data.ndim >= 2:
                data = data * np.float32(1.0 - lr * self.weight_decay)
            p.data = (data - np.float32(lr) * upd).astype(np.float32)


# ------------------------------------------------------------ checkpoints

def save_checkpoint(path, model, opt, step, cfg):
    arrays = {f"model.{k}": p.data for k, p in model.named_parameters().items()}
    if opt is not None:
        arrays.update({f"optim.m.{k}": a for k, a in opt.m.items()})
        arrays.update({f"optim.v.{k}": a for k, a in opt.v.items()})
    state = {"step": int(step), "optim_t": opt.t if opt is not None else 0,
             "rng": {"seed": cfg.seed, "step": int(step)}, "config": to_dict(cfg)}
    return io.save(path, arrays, state)


def load_checkpoint(path, strict=True):
    """Returns (cfg, model, optimizer, step)."""
    try:
        arrays, state = io.load(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if not state or "config" not in state:
        raise DataError("checkpoint has no training-state block")
    cfg = from_dict(state["config"])
    model = REOModel(cfg.model, seed=cfg.seed)
    params = model.named_parameters()
    opt = AdamW(params, cfg.betas, cfg.eps, cfg.weight_decay)
    expected = {f"model.{k}" for k in params}
    has_optim = any(k.startswith("optim.") for k in arrays)
    if has_optim:
        expected |= {f"optim.{s}.{k}" for s in ("m", "v") for k in params}
    if strict:
        unknown = sorted(set(arrays) - expected)
        missing = sorted(expected - set(arrays))
        if unknown or missing:
            raise DataError(f"checkpoint names do not match the model: unknown {unknown[:5]}, missing {missing[:5]}")
    for k, p in params.items():
        a = arrays.get(f"model.{k}")
        if a is None:
            continue
        if a.shape != p.shape:
            raise DataError(f"{k}: checkpoint shape {a.shape} vs model {p.shape}")
        p.data = a.copy()
    if has_optim:
        for k in params:
            if f"optim.m.{k}" in arrays:
                opt.m[k] = arrays[f"optim.m.{k}"].copy()
                opt.v[k] = arrays[f"optim.v.{k}"].copy()
        opt.t = int(state.get("optim_t", 0))
    return cfg, model, opt, int(state.get("step", 0))


# ---------------------------------------------------------------- training

def step_rng(seed, step, slot):
    return np.random.default_rng([seed, step, slot])


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, 1_000_003, epoch]).permutation(n)


def scene_loss(model, scene, queries, cfg, rng):
    """Forward one scene and build its total loss (Algorithm order: 2-D aux first)."""
    mcfg = cfg.model
    cam = int(rng.integers(mcfg.n_cameras))
    vs = sample_voxels(scene.voxels, mcfg.n_lidar, int(rng.integers(2**31)))
    inputs = ForwardInputs(scene.images if mcfg.mode != "lidar_only" else None,
                           vs.rows if mcfg.mode != "camera_only" else None, queries, mcfg.mode)
    pred = model.forward(inputs)
    terms, flags = loss_3d(pred, scene.labels.reshape(-1), cfg.loss, scene.texture, scene.texture_mask)
    if cfg.aux_tasks and pred.image_features is not None:
        aux = model.aux_heads_2d(pred.image_features[cam])
        t2d, f2d = loss_2d(aux, scene.sem2d[cam], scene.depth2d[cam], scene.images[cam], cfg.loss)
        terms.update(t2d)
        flags |= f2d
    return total_loss(terms, flags)


@dataclass
class TrainResult:
    model: REOModel
    optimizer: AdamW
    log: list = field(default_factory=list)
    step: int = 0
    total_steps: int = 0
    checkpoint: str | None = None


def _dump_failure(out, model, scene, step, err):
    if out is None:
        return None
    path = os.path.join(out, "nan_dump.reo")
    arrays = {f"model.{k}": p.data for k, p in model.named_parameters().items()}
    arrays.update({f"grad.{k}": p.grad for k, p in model.named_parameters().items() if p.grad is not None})
    arrays["input.images"] = scene.images
    io.save(path, arrays, {"step": step, "scene": scene.name, "error": str(err)})
    return path


def log_csv(rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["step"], r["epoch"], repr(r["lr"])] + [repr(r[k]) for k in TERM_NAMES] + [repr(r["total"])])
    return buf.getvalue()


def train(cfg, out=None, max_steps=None, resume=None, scenes=None, queries=None, progress=None):
    """Run the training loop. ``max_steps`` stops early (the schedule still spans all epochs).

    ``resume`` is a checkpoint path; training continues from its step with
    identical results to an uninterrupted run.
    """
    if resume is not None:
        ck_cfg, model, opt, start = load_checkpoint(resume)
        if to_dict(ck_cfg) != to_dict(cfg):
            raise ConfigError("resume config differs from the checkpoint's")
    else:
        model = REOModel(cfg.model, seed=cfg.seed)
        opt = AdamW(model.named_parameters(), cfg.betas, cfg.eps, cfg.weight_decay)
        start = 0
    if scenes is None:
        if cfg.corpus is None:
            raise ConfigError("no corpus given")
        corpus = Corpus(cfg.corpus, cfg.model, cfg.workers)
        scenes = corpus.load("train", cfg.max_train_scenes)
        queries = corpus.queries
    if not scenes:
        raise DataError("training split is empty")
    model.train()
    n = len(scenes)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    end = total if max_steps is None else min(total, start + max_steps)
    log = []
    order, order_epoch = None, -1
    for step in range(start, end):
        epoch, pos = divmod(step, per_epoch)
        if epoch != order_epoch:
            order, order_epoch = epoch_order(cfg.seed, epoch, n), epoch
        batch = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        model.zero_grad()
        sums = dict.fromkeys(TERM_NAMES, 0.0)
        tot = 0.0
        for slot, i in enumerate(batch):
            scene = scenes[i]
            try:
                rep = scene_loss(model, scene, queries, cfg, step_rng(cfg.seed, step, slot))
                if not np.isfinite(rep.total):
                    raise NumericError(f"loss is {rep.total}")
                backward(rep.tensor * (1.0 / len(batch)))
            except NumericError as err:
                path = _dump_failure(out, model, scene, step, err)
                raise TrainingAborted(f"step {step}, scene {scene.name}: {err}", path) from err
            for k in TERM_NAMES:
                sums[k] += rep.terms.get(k, 0.0) / len(batch)
            tot += rep.total / len(batch)
        lr = cosine_lr(step, total, cfg.lr)
        opt.step(lr)
        row = {"step": step, "epoch": epoch, "lr": lr, **sums, "total": tot}
        log.append(row)
        if progress is not None:
            progress(row)
    result = TrainResult(model, opt, log, end, total)
    if out is not None:
        os.makedirs(out, exist_ok=True)
        result.checkpoint = os.path.join(out, "checkpoint.reo")
        save_checkpoint(result.checkpoint, model, opt, end, cfg)
        with open(os.path.join(out, "train_log.csv"), "w") as fh:
            fh.write(log_csv(log))
        with open(os.path.join(out, "epoch_log.csv"), "w") as fh:
            fh.write(epoch_csv(log))
    return result


def epoch_csv(log):
    """Per-epoch means of the step log."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch",) + TERM_NAMES + ("total",))
    epochs = sorted({r["epoch"] for r in log})
    for e in epochs:
        rows = [r for r in log if r["epoch"] == e]
        w.writerow([e] + [repr(float(np.mean([r[k] for r in rows]))) for k in TERM_NAMES + ("total",)])
    return buf.getvalue()


# -------------------------------------------------------------- evaluation

def predict_labels(model, scene, queries, seed=0):
    mcfg = model.cfg
    vs = sample_voxels(scene.voxels, mcfg.n_lidar, seed)
    inputs = ForwardInputs(scene.images if mcfg.mode != "lidar_only" else None,
                           vs.rows if mcfg.mode != "camera_only" else None, queries, mcfg.mode)
    was = model.training
    model.eval()
    try:
        with no_grad():
            pred = model.forward(inputs)
    finally:
        model.train(was)
    return np.argmax(pred.fine_sem.data, axis=1).reshape(scene.labels.shape)


def evaluate_scenes(model, scenes, queries, mask="none", oracle=False):
    """Confusion matrices per scene. ``oracle`` feeds ground truth as the prediction."""
    if mask not in ("none", "visible"):
        raise ConfigError(f"mask must be 'none' or 'visible', got {mask!r}")
    n = model.cfg.classes + 1
    cms = {}
    for i, scene in enumerate(scenes):
        pred = scene.labels if oracle else predict_labels(model, scene, queries, seed=i)
        cm = ConfusionMatrix(n)
        cm.accumulate(pred, scene.labels, scene.visible if mask == "visible" else None)
        cms[scene.name] = cm
    return cms


def evaluate(ckpt, corpus_root, split="val", mask="none", out=None, oracle=False):
    """Evaluate a checkpoint on a corpus split; returns (summary dict, csv text)."""
    cfg, model, _, _ = load_checkpoint(ckpt)
    corpus = Corpus(corpus_root, cfg.model)
    scenes = corpus.load(split)
    if not scenes:
        raise DataError(f"split {split!r} is empty")
    cms = evaluate_scenes(model, scenes, corpus.queries, mask, oracle)
    rows = report_rows(cms, CLASS_NAMES)
    text = write_csv(rows, out)
    pooled = sum(cms.values(), ConfusionMatrix(cfg.model.classes + 1))
    summ = summary(rows)
    summ["chance_miou"] = uniform_chance_miou(pooled.counts.sum(axis=1))
    return summ, text


def save_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)

