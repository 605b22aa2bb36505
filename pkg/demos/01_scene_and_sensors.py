"""
A synthetic desk-scale scene
============================

Build one scene, look at what each sensor sees, and check the labels.
"""

import numpy as np

from reo import scene as S
from reo.geometry import voxelize
from reo.model import ModelConfig

cfg = S.SceneConfig()
sample = S.make_sample(7, cfg)

# The scene lives on a 0.2 m grid; label 0 is free space.
labels = sample["labels"]
print("grid", labels.shape, "voxel", cfg.grid.voxel_size)
for cls, name in enumerate(S.CLASS_NAMES):
    print(f"  {name:<12}{(labels == cls).mean():8.3%}")

# Two cameras, each rendering a small RGB image.
print("images", sample["images"].shape, "value range", sample["images"].min(), sample["images"].max())

# The LiDAR returns (x, y, z, intensity) rows in its own frame.
cloud = sample["cloud"]
print("lidar points", len(cloud))

# Voxelizing the cloud (in the sensor frame, on the grid the model uses)
# keeps one row per occupied cell: mean xyz, mean intensity, point count
# and range.
vs = voxelize(cloud, ModelConfig().lidar_spec())
print("occupied cells", vs.count, "dropped outside the grid", vs.dropped)
print("busiest cell holds", int(vs.rows[:, 4].max()), "points")

# Per-pixel 2-D labels come from the same geometry: depth where a
# LiDAR point lands, semantics from the voxel it hits.
depth = sample["depth2d"][0]
print("camera 0 pixels with depth", int((depth > 0).sum()), "of", depth.size)

# Voxels that some camera ray reaches, for visible-only scoring.
print("visible voxels", int(sample["visible"].sum()), "of", labels.size)
