"""
Neural enhanced belief propagation
==================================

NEBP runs a graph neural network alongside particle BP. For each edge it
produces a scale and a per-particle shift that correct the BP message before
the weights are updated.
"""

import numpy as np

from nebpcl.gnn import NebpModel, init_embeddings, run_nebp
from nebpcl.particle_bp import init_network, run_bp
from nebpcl.scenario import generate_realization, load_preset

real = generate_realization(load_preset("train-small"), seed=9)
K = 200

# Node embeddings are the belief mean followed by the covariance, column by column.
h = init_embeddings(init_network(real, K, key=(9,)))
print("embedding matrix:", h.shape)

# Forcing the scale to one and the shift to zero gives back plain BP, bit for bit.
forced = NebpModel.init(K, seed=0).forced(1.0, 0.0)
same = all(
    np.array_equal(a.beliefs[i].weights, b.beliefs[i].weights)
    for a, b in zip(run_bp(real, K, key=(9,)), run_nebp(real, forced, key=(9,)))
    for i in range(real.num_nodes)
)
print("forced NEBP equals BP:", same)

# A freshly initialized model starts with a zero shift head, so it filters like BP.
model = NebpModel.init(K, seed=0)
print("networks:", {k: [w.shape for w in net.weights] for k, net in model.nets.items()})


def rmse(results):
    sq = [np.sum((r.summaries[i].position - real.truth[s, i, :2]) ** 2)
          for s, r in enumerate(results) for i in real.mobile]
    return np.sqrt(np.mean(sq))


print("BP RMSE %.3f m, untrained NEBP RMSE %.3f m" % (
    rmse(list(run_bp(real, K, key=(9,)))), rmse(list(run_nebp(real, model, key=(9,))))))

# A constant positive shift acts as a floor under every message. It keeps
# messages from wiping out particles and makes beliefs less overconfident.
floored = NebpModel.init(K, seed=0).forced(1.0, 0.2 / K)
print("NEBP with a constant floor: RMSE %.3f m" % rmse(list(run_nebp(real, floored, key=(9,)))))
