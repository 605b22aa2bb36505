"""
One forward pass, stage by stage
================================

The network never receives a camera matrix. Images and LiDAR rows go in,
and coarse plus fine occupancy come out.
"""

import numpy as np

from reo import geometry as G
from reo import scene as S
from reo.model import ForwardInputs, ModelConfig, REOModel
from reo.tensor import no_grad

cfg = ModelConfig()
model = REOModel(cfg, seed=0).eval()
print("parameters", model.parameter_report())

sample = S.make_sample(3)
vs = G.sample_voxels(G.voxelize(sample["cloud"], cfg.lidar_spec()), cfg.n_lidar, seed=0)
grid = S.SceneConfig().grid
coarse = G.GridSpec(grid.origin, (1.6, 1.6, 1.6), (16, 16, 4))
queries = G.normalize_to_centers(grid.centers(), coarse)

timings = {}
with no_grad():
    out = model.forward(ForwardInputs(sample["images"], vs.rows, queries, "fused"), timings)

for stage, sec in timings.items():
    print(f"{stage:<14}{sec * 1e3:7.2f} ms")

print("BEV features", out.bev.shape)
print("coarse semantics", out.coarse_sem.shape)
print("fine semantics", out.fine_sem.shape)

# Geometry is derived from semantics: occupied when the non-free classes
# together outweigh free space.
occ = out.fine_geo.data.argmax(1) == 1
print("predicted occupied fraction (untrained)", occ.mean())

# The modes share weights; camera-only simply skips the LiDAR branch.
with no_grad():
    cam = model.forward(ForwardInputs(sample["images"], None, queries, "camera_only"))
print("camera-only vs fused max diff", float(np.abs(cam.fine_sem.data - out.fine_sem.data).max()))
