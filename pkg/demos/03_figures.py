"""
Needle, scatter and trajectory figures
======================================

Write the standard diagnostic SVGs for a Method 3 contamination
(100 added to the first period of subject 1).

Usage: ``python demos/03_figures.py [outdir]``
"""

import sys
from pathlib import Path

from pmelm import fit_ml
from pmelm.influence import diagnose, write_records
from pmelm.report import PlotSelection, figure_name, needle_plot, save_svg, scatter_plot, trajectory_plot
from pmelm.simulate import ContaminationSpec, GenSpec, contaminate, generate

outdir = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
outdir.mkdir(parents=True, exist_ok=True)

clean = generate(GenSpec(sigma1=1.0, seed=3))
dirty = contaminate(clean, ContaminationSpec(3))
records = diagnose(fit_ml(dirty))
write_records(records, outdir / "sim_diag.csv")

# Ten subjects per arm, subject 1 always kept and drawn in red.
sel = PlotSelection("balanced20", highlight=(1,), seed=clean.seed)
for stat in ("Ci", "Ci_b", "Ci_d", "rri"):
    save_svg(needle_plot(records, stat, sel), outdir / figure_name("sim", stat, 3))
save_svg(scatter_plot(records, sel), outdir / figure_name("sim", "scatter", 3))

# Trajectories under the clean and edited panels.
for label, panel in (("clean", clean), (3, dirty)):
    save_svg(trajectory_plot(panel, highlight=1), outdir / figure_name("sim", "trajectory", label))

for path in sorted(outdir.glob("sim_*")):
    print(path)
