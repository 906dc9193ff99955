"""
Feeder model and power flow
===========================

Load the bundled 4-bus feeder, look at its admittance matrix and solve for
the operating point that the load model fluctuates around.
"""

import numpy as np

from feederid import assemble_bus_admittance, default_dynamics, equilibrium, load_feeder
from feederid.network import PHASES

# The bundled feeder: one three-phase, one two-phase and one single-phase branch
net = load_feeder("feeder4")
for br in net.branches:
    print(f"branch {br.from_bus}-{br.to_bus}  phases {br.phases}")

# Ybus over (bus, phase) nodes; missing phases simply have no node
ybus = assemble_bus_admittance(net)
labels = [f"{b}{PHASES[p]}" for b, p in ybus.nodes]
print("nodes:", " ".join(labels))
np.set_printoptions(precision=2, suppress=True, linewidth=140)
print("|Ybus| (pu):")
print(np.abs(ybus.Y))

# Random loads (negative injections) on every non-slack node
dyn = default_dynamics(net, seed=1)
op = equilibrium(net, dyn)
for lab, V, d, P in zip(labels, op.V, op.delta, op.P):
    print(f"{lab:>4}  V = {V:.4f} pu  angle = {np.degrees(d):8.3f} deg  P = {P:+.4f} pu")
