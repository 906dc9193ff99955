"""
Monte Carlo noise sweep
=======================

Repeat simulation + estimation for several measurement-noise levels and
write the report files (the same thing ``feederid evaluate`` does).
"""

import sys
import tempfile

from feederid import ExperimentConfig, emit_outputs, run_experiment

config = ExperimentConfig(noise_levels=(1e-6, 1e-5, 1e-4, 1e-3), replicates=5, workers=2)
report = run_experiment(config)

for level in report.summary()["levels"]:
    s2 = level["stages"]["stage2"]["mape_B"]
    s1 = level["stages"]["stage1"]["mape_B"]
    print(f"noise {level['noise']:g}: stage-1 median MAPE(B) {s1['median']:8.2f}%   "
          f"stage-2 median {s2['median']:.3g}% [{s2['q1']:.3g}, {s2['q3']:.3g}]   failures {level['failures']}")

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="feederid-")
for path in emit_outputs(report, out, force=True):
    print("wrote", path)
