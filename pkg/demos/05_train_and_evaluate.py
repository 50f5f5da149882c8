"""
Training NEBP and comparing it with BP
======================================

A short training run on a handful of realizations, then outage probability
and NEES consistency on fresh ones.

At this scale training does not help: the gradient only looks one time step
ahead, and the shift head has one output per particle index although the
indices carry no meaning. Early Adam steps therefore add index-specific noise
to the messages, and the trained model usually ends up behind BP. The numbers
below show this; compare with the constant floor in the NEBP demo.
"""

import numpy as np

from nebpcl import evaluation as ev
from nebpcl.gnn import run_nebp
from nebpcl.particle_bp import run_bp
from nebpcl.scenario import generate_realization, load_preset
from nebpcl.training import TrainConfig, train

cfg = load_preset("train-small")
train_set = [generate_realization(cfg, seed=200 + i) for i in range(4)]
test_set = [generate_realization(cfg, seed=900 + i) for i in range(4)]
K = 200

result = train(TrainConfig(lr=1e-4, batch_size=2, epochs=2, K=K, seed=0), train_set)
for epoch, loss in enumerate(result.epoch_losses, 1):
    print("epoch %d mean loss %.1f" % (epoch, loss))


def records(run):
    out = []
    for rid, real in enumerate(test_set):
        for step, res in enumerate(run(real, (rid,))):
            out += ev.records_from_step(rid, step, res, real.truth[step], real.mobile)
    return out


bp = records(lambda r, key: run_bp(r, K, key=key))
nebp = records(lambda r, key: run_nebp(r, result.model, key=key))

thresholds = np.array([0.5, 1.0, 2.0, 3.0])
print("threshold   P_out BP   P_out NEBP")
for t, a, b in zip(thresholds, ev.outage_probability(bp, thresholds), ev.outage_probability(nebp, thresholds)):
    print("%6.1f m     %.3f      %.3f" % (t, a, b))

# A consistent estimator keeps about 95% of NEES values inside the 95% interval.
print("outside the 95%% interval: BP %.2f, NEBP %.2f" % (ev.outside_fraction(bp), ev.outside_fraction(nebp)))
r1, r2 = ev.chi_square_bounds(0.05)
print("two-sided 95%% interval for 2 degrees of freedom: [%.4f, %.4f]" % (r1, r2))
