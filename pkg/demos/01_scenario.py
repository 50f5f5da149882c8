"""
Simulating a cooperative localization scenario
==============================================

A realization holds ground-truth tracks, the per-step connectivity graph and
the noisy pairwise ranges that agents measure towards their neighbors.
"""

import numpy as np

from nebpcl.scenario import build_topology, generate_realization, list_presets, load_preset

# Two presets ship with the package: a 25-agent training network and a
# 100-agent evaluation network, both with five anchors.
print("presets:", list_presets())
cfg = load_preset("train-small")
print(cfg.num_agents, "agents,", len(cfg.anchors), "anchors,", cfg.num_steps, "steps")

# Generation is reproducible from the seed alone.
real = generate_realization(cfg, seed=3)
again = generate_realization(cfg, seed=3)
print("same seed, same realization:", real == again)

# Nodes are ordered mobile agents first, then anchors.
print("anchor indices:", np.flatnonzero(real.is_anchor))
print("truth array (steps, nodes, [px, py, vx, vy]):", real.truth.shape)

# Agents move slowly under the drag-damped constant-velocity model.
speed = np.linalg.norm(real.truth[:, real.mobile, 2:], axis=2)
print("mean speed %.3f m/s, max %.3f m/s" % (speed.mean(), speed.max()))

# Who hears whom changes as agents move; the 20 m radius is inclusive.
degrees = [len(n) for n in real.neighbors(0)]
print("node degrees at the first step:", degrees)
print(build_topology([(0, 0), (20, 0), (45, 0)], 20.0))

# Each undirected link is measured in both directions with independent noise.
z = real.measurements(0)
j, i = next(iter(z))
true = np.linalg.norm(real.truth[0, j, :2] - real.truth[0, i, :2])
print("link %d-%d: true %.2f m, measured %.2f m and %.2f m" % (j, i, true, z[(j, i)], z[(i, j)]))

# Range errors over the whole run should look like N(0, 1).
errors = []
for s in range(real.num_steps):
    for (j, i), zz in real.measurements(s).items():
        errors.append(zz - np.linalg.norm(real.truth[s, j, :2] - real.truth[s, i, :2]))
print("range error mean %.3f, std %.3f over %d measurements" % (np.mean(errors), np.std(errors), len(errors)))
