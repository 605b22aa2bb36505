"""
Calibration noise does not reach the network
============================================

Jitter the camera extrinsics. A projection-based pipeline moves its
sampling points; this model's outputs stay bit-identical because the
rig never enters the forward pass.
"""

from reo import experiments as E
from reo.model import ModelConfig, REOModel

model = REOModel(ModelConfig(), seed=0)
rows = E.run_robustness(model, sigmas=E.DEFAULT_SIGMAS, trials=10)

print(f"{'sigma':>12}{'max output change':>20}{'projector shift px':>20}")
for r in E.robustness_summary(rows):
    print(f"{r['sigma']:>12.2e}{r['reo_max_delta']:>20.1f}{r['baseline_mean_displacement']:>20.5f}")

# Where does the time go?
print()
print(E.bench_table(E.bench(ModelConfig(), repeats=20)))
