"""Procedural desk-scale scenes: voxel worlds, rendered views, LiDAR sweeps and labels."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import io
from .geometry import CameraModel, GridSpec, look_at, pinhole, project_points

CLASS_NAMES = ("free", "ground", "vehicle", "vegetation", "building")
BASE_COLORS = {1: (0.42, 0.40, 0.36), 2: (0.80, 0.16, 0.12), 3: (0.18, 0.58, 0.22), 4: (0.30, 0.36, 0.78)}
INTENSITY = {1: 0.15, 2: 0.85, 3: 0.45, 4: 0.30}
SKY = np.array([0.62, 0.76, 0.95])


@dataclass
class SceneConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec((-12.8, -12.8, 0.0), (0.8, 0.8, 0.8), (32, 32, 8)))
    classes: int = 4
    n_objects: int = 12
    min_radius: float = 3.0
    n_cameras: int = 2
    image_size: tuple = (32, 64)
    focal: float = 32.0
    camera_height: float = 1.6
    lidar_height: float = 1.8
    beams: int = 16
    azimuth_steps: int = 256
    elevation_range: tuple = (-28.0, 4.0)


@dataclass
class SensorRig:
    cameras: list
    lidar_pose: np.ndarray  # 4x4 lidar -> world

    @property
    def lidar_origin(self):
        return self.lidar_pose[:3, 3]


def default_rig(cfg):
    h, w = cfg.image_size
    k = pinhole(cfg.focal, cfg.focal, w / 2.0, h / 2.0)
    cams = []
    for n in range(cfg.n_cameras):
        yaw = 2 * np.pi * n / cfg.n_cameras
        ext = look_at([0.0, 0.0, cfg.camera_height], [np.cos(yaw), np.sin(yaw), 0.0])
        cams.append(CameraModel(k, ext, h, w))
    pose = np.eye(4)
    pose[2, 3] = cfg.lidar_height
    return SensorRig(cams, pose)


@dataclass
class SceneTruth:
    labels: np.ndarray  # (H, W, D) int in {0..S}
    color: np.ndarray   # (H, W, D, 3), zero where free
    objects: list       # (class, lo xyz, hi xyz) in metres
    spec: GridSpec


def generate_scene(seed, cfg=None):
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    spec = cfg.grid
    h, w, d = spec.shape
    labels = np.zeros((h, w, d), dtype=np.int64)
    color = np.zeros((h, w, d, 3))
    labels[:, :, 0] = 1
    color[:, :, 0] = np.clip(np.array(BASE_COLORS[1]) + rng.normal(0, 0.03, (h, w, 3)), 0, 1)
    vs = np.asarray(spec.voxel_size)
    centers = spec.centers().reshape(h, w, d, 3)
    classes = [2 + (k % 3) for k in range(cfg.n_objects)]
    rng.shuffle(classes)
    objects = []
    for cls in classes:
        if cls == 2:
            fx, fy = rng.integers(3, 6), rng.integers(2, 4)
            if rng.random() < 0.5:
                fx, fy = fy, fx
            height = 2
        elif cls == 3:
            fx = fy = int(rng.integers(2, 4))
            height = int(rng.integers(3, 7))
        else:
            fx, fy = rng.integers(4, 8), rng.integers(4, 8)
            height = int(rng.integers(3, d))
        height = min(height, d - 1)
        for _ in range(50):
            ix, iy = rng.integers(0, h - fx + 1), rng.integers(0, w - fy + 1)
            lo = spec.lower[:2] + np.array([ix, iy]) * vs[:2]
            hi = lo + np.array([fx, fy]) * vs[:2]
            nearest = np.clip(0.0, lo, hi)
            if np.linalg.norm(nearest) > cfg.min_radius:
                break
        else:
            continue
        sl = (slice(ix, ix + fx), slice(iy, iy + fy), slice(1, 1 + height))
        mask = labels[sl] == 0
        if cls == 3:
            c = (lo + hi) / 2
            r = fx * vs[0] / 2
            dist = np.linalg.norm(centers[sl][..., :2] - c, axis=-1)
            mask &= dist <= r + 1e-9
        if not mask.any():
            continue
        base = np.clip(np.array(BASE_COLORS[cls]) + rng.normal(0, 0.06, 3), 0, 1)
        sub_l, sub_c = labels[sl], color[sl]
        sub_l[mask] = cls
        sub_c[mask] = np.clip(base + rng.normal(0, 0.02, (int(mask.sum()), 3)), 0, 1)
        z0 = spec.lower[2] + vs[2]
        objects.append((cls, np.array([lo[0], lo[1], z0]), np.array([hi[0], hi[1], z0 + height * vs[2]])))
    return SceneTruth(labels, color, objects, spec)


# ---------------------------------------------------------------- ray casting

def raycast(occupied, spec, origins, dirs):
    """Voxel DDA. Returns hit distance (NaN on miss) and hit cell (-1 on miss).

    ``dirs`` must be unit length; distances are metric.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.array(dirs, dtype=np.float64)
    dirs[np.abs(dirs) < 1e-12] = 1e-12
    shape = np.asarray(spec.shape)
    lo, hi, vs = spec.lower, spec.upper, np.asarray(spec.voxel_size)
    inv = 1.0 / dirs
    t1, t2 = (lo - origins) * inv, (hi - origins) * inv
    tnear = np.minimum(t1, t2).max(axis=1)
    tfar = np.maximum(t1, t2).min(axis=1)
    t = np.maximum(tnear, 0.0)
    active = tfar > t
    p = origins + dirs * (t + 1e-9)[:, None]
    cell = np.clip(np.floor((p - lo) / vs).astype(np.int64), 0, shape - 1)
    step = np.where(dirs > 0, 1, -1)
    tmax = (lo + (cell + (step > 0)) * vs - origins) * inv
    tdelta = vs * np.abs(inv)
    hit_t = np.full(len(origins), np.nan)
    hit_cell = np.full((len(origins), 3), -1, dtype=np.int64)
    rows = np.arange(len(origins))
    for _ in range(int(shape.sum()) + 3):
        ids = rows[active]
        if ids.size == 0:
            break
        c = cell[ids]
        occ = occupied[c[:, 0], c[:, 1], c[:, 2]]
        hit = ids[occ]
        hit_t[hit] = t[hit]
        hit_cell[hit] = cell[hit]
        active[hit] = False
        mv = ids[~occ]
        ax = np.argmin(tmax[mv], axis=1)
        t[mv] = tmax[mv, ax]
        cell[mv, ax] += step[mv, ax]
        tmax[mv, ax] += tdelta[mv, ax]
        out = (cell[mv, ax] < 0) | (cell[mv, ax] >= shape[ax])
        active[mv[out]] = False
    return hit_t, hit_cell


def _pixel_rays(cam):
    h, w = cam.height, cam.width
    v, u = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    pix = np.stack([u.ravel(), v.ravel(), np.ones(h * w)], axis=1)
    d_cam = np.linalg.solve(cam.intrinsics, pix.T).T
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    d_world = d_cam @ cam.extrinsics[:3, :3]
    return np.tile(cam.center, (h * w, 1)), d_world, d_cam[:, 2]


def render_view(scene, cam, max_shade_range=25.0):
    """Ray-march one camera. Returns (image 3xHxW, depth HxW, hit linear index HxW).

    Depth is camera z-depth in metres, -1 where the ray leaves the grid.
    """
    origins, dirs, cos_z = _pixel_rays(cam)
    t, cell = raycast(scene.labels > 0, scene.spec, origins, dirs)
    hit = ~np.isnan(t)
    img = np.tile(SKY, (len(t), 1))
    depth = np.full(len(t), -1.0)
    depth[hit] = t[hit] * cos_z[hit]
    c = cell[hit]
    shade = 1.0 - 0.5 * np.minimum(depth[hit] / max_shade_range, 1.0)
    img[hit] = scene.color[c[:, 0], c[:, 1], c[:, 2]] * shade[:, None]
    lin = np.full(len(t), -1, dtype=np.int64)
    lin[hit] = np.ravel_multi_index(c.T, scene.labels.shape)
    h, w = cam.height, cam.width
    return img.T.reshape(3, h, w), depth.reshape(h, w), lin.reshape(h, w)


def camera_visibility(scene, rig, step=0.1):
    """Voxels crossed by some pixel ray up to and including its first hit."""
    spec = scene.spec
    shape = scene.labels.shape
    vis = np.zeros(shape, dtype=bool)
    far = float(np.linalg.norm(np.asarray(spec.upper) - np.asarray(spec.lower)))
    for cam in rig.cameras:
        origins, dirs, _ = _pixel_rays(cam)
        t_hit, cell = raycast(scene.labels > 0, spec, origins, dirs)
        hit = ~np.isnan(t_hit)
        vis[tuple(cell[hit].T)] = True
        t_end = np.where(hit, t_hit, far)
        ts = np.arange(0.0, far + step, step)
        for i in range(0, len(origins), 256):
            o, d, te = origins[i:i + 256], dirs[i:i + 256], t_end[i:i + 256]
            keep = ts[None, :] <= te[:, None]
            pts = (o[:, None, :] + ts[None, :, None] * d[:, None, :])[keep]
            idx, ok = spec.cell_index(pts)
            vis[tuple(idx[ok].T)] = True
    return vis


def render_views(scene, rig):
    return np.stack([render_view(scene, cam)[0] for cam in rig.cameras])


def simulate_lidar(scene, rig, beams, azimuth_steps, seed, elevation_range=(-28.0, 4.0)):
    """Spinning LiDAR. Returns (N,4) points (x, y, z, intensity) in the sensor frame."""
    if beams <= 0 or azimuth_steps <= 0:
        raise ValueError("beams and azimuth steps must be positive")
    rng = np.random.default_rng(seed)
    elev = np.deg2rad(np.linspace(*elevation_range, beams)) if beams > 1 else np.deg2rad([elevation_range[0]])
    az = np.arange(azimuth_steps) * (2 * np.pi / azimuth_steps)
    e, a = np.meshgrid(elev, az, indexing="ij")
    dirs_local = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)
    rot, origin = rig.lidar_pose[:3, :3], rig.lidar_pose[:3, 3]
    dirs = dirs_local @ rot.T
    t, cell = raycast(scene.labels > 0, scene.spec, np.tile(origin, (len(dirs), 1)), dirs)
    hit = ~np.isnan(t)
    # nudge 1 mm past the entry face so the point sits inside the hit voxel
    pts_local = dirs_local[hit] * (t[hit] + 1e-3)[:, None]
    cls = scene.labels[cell[hit, 0], cell[hit, 1], cell[hit, 2]]
    inten = np.array([INTENSITY[int(c)] for c in cls]) + rng.normal(0, 0.03, len(cls))
    return np.column_stack([pts_local, np.clip(inten, 0.0, 1.0)])


def lidar_to_world(cloud, rig):
    pts = np.asarray(cloud)[:, :3]
    return pts @ rig.lidar_pose[:3, :3].T + rig.lidar_pose[:3, 3]


def build_labels_2d(scene, cloud, cam, rig, image=None):
    """Sparse semantic/depth maps from the nearest LiDAR return per pixel.

    Semantic map holds classes 1..S, -1 where unlabelled; depth -1 likewise.
    The RGB target is the rendered image itself.
    """
    h, w = cam.height, cam.width
    sem = np.full((h, w), -1, dtype=np.int64)
    depth = np.full((h, w), -1.0)
    if len(cloud):
        world = lidar_to_world(cloud, rig)
        uvd, valid = project_points(world, cam)
        u = np.floor(np.where(valid, uvd[:, 0], -1)).astype(np.int64)
        v = np.floor(np.where(valid, uvd[:, 1], -1)).astype(np.int64)
        ok = valid & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        idx, inside = scene.spec.cell_index(world)
        ok &= inside
        ids = np.flatnonzero(ok)
        order = ids[np.argsort(-uvd[ids, 2], kind="stable")]  # far first, nearest written last
        cls = scene.labels[idx[order, 0], idx[order, 1], idx[order, 2]]
        sem[v[order], u[order]] = cls
        depth[v[order], u[order]] = uvd[order, 2]
    rgb = image if image is not None else render_view(scene, cam)[0]
    return sem, depth, rgb


def build_texture_3d(scene, hit_maps, images):
    """Per fine voxel RGB from back-projected pixels, plus a visibility mask.

    A voxel's colour in one camera is the mean of the pixels whose first hit
    is that voxel; across cameras the per-camera colours are averaged.
    Free or unseen voxels are masked out.
    """
    n = scene.labels.size
    acc = np.zeros((n, 3))
    seen = np.zeros(n)
    for lin, img in zip(hit_maps, images):
        lin = lin.ravel()
        ok = lin >= 0
        cnt = np.bincount(lin[ok], minlength=n)
        cols = np.stack([np.bincount(lin[ok], weights=img[c].ravel()[ok], minlength=n) for c in range(3)], axis=1)
        vis = cnt > 0
        acc[vis] += cols[vis] / cnt[vis, None]
        seen[vis] += 1
    mask = (seen > 0) & (scene.labels.ravel() > 0)
    rgb = np.zeros((n, 3))
    rgb[mask] = acc[mask] / seen[mask, None]
    return rgb, mask


# --------------------------------------------------------------------- corpus

def scene_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_sample(seed, cfg=None):
    """Everything training and evaluation need for one scene, as named arrays."""
    cfg = cfg or SceneConfig()
    scene = generate_scene(seed, cfg)
    rig = default_rig(cfg)
    renders = [render_view(scene, cam) for cam in rig.cameras]
    images = np.stack([r[0] for r in renders])
    cloud = simulate_lidar(scene, rig, cfg.beams, cfg.azimuth_steps, seed + 1, cfg.elevation_range)
    sem2d, depth2d = [], []
    for cam, (img, _, _) in zip(rig.cameras, renders):
        s, dep, _ = build_labels_2d(scene, cloud, cam, rig, image=img)
        sem2d.append(s)
        depth2d.append(dep)
    texture, tmask = build_texture_3d(scene, [r[2] for r in renders], images)
    objects = np.array([[c, *lo, *hi] for c, lo, hi in scene.objects]).reshape(-1, 7)
    return {
        "labels": scene.labels,
        "color": scene.color,
        "images": images,
        "cloud": cloud,
        "sem2d": np.stack(sem2d),
        "depth2d": np.stack(depth2d),
        "texture": texture,
        "texture_mask": tmask,
        "visible": camera_visibility(scene, rig),
        "objects": objects,
        "intrinsics": np.stack([c.intrinsics for c in rig.cameras]),
        "extrinsics": np.stack([c.extrinsics for c in rig.cameras]),
        "lidar_pose": rig.lidar_pose,
    }


def config_dict(cfg):
    g = cfg.grid
    return {"origin": list(g.origin), "voxel_size": list(g.voxel_size), "extents": list(g.extents),
            "classes": cfg.classes, "n_cameras": cfg.n_cameras, "image_size": list(cfg.image_size)}


def synth_corpus(out, seed, n_train=64, n_val=16, cfg=None):
    """Write one directory per scene plus ``manifest.json`` with seeds and hashes."""
    cfg = cfg or SceneConfig()
    os.makedirs(out, exist_ok=True)
    entries = []
    for i in range(n_train + n_val):
        s = scene_seed(seed, i)
        name = f"scene_{i:04d}"
        os.makedirs(os.path.join(out, name), exist_ok=True)
        digest = io.save(os.path.join(out, name, "arrays.reo"), make_sample(s, cfg), {"seed": s})
        entries.append({"name": name, "seed": s, "sha256": digest, "split": "train" if i < n_train else "val"})
    manifest = {"seed": seed, "n_train": n_train, "n_val": n_val, "config": config_dict(cfg), "scenes": entries}
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_manifest(root):
    with open(os.path.join(root, "manifest.json")) as fh:
        return json.load(fh)


def load_scene(root, name):
    arrays, _ = io.load(os.path.join(root, name, "arrays.reo"))
    return arrays


def rig_from_arrays(arrays, image_size):
    h, w = image_size
    cams = [CameraModel(k, e, h, w) for k, e in zip(arrays["intrinsics"], arrays["extrinsics"])]
    return SensorRig(cams, np.asarray(arrays["lidar_pose"], dtype=np.float64))
