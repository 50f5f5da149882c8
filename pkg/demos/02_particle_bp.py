"""
Particle belief propagation
===========================

Every agent keeps K weighted particles. At each time step the particles are
predicted with the motion model, messages are exchanged along measured links,
and the reweighted set is summarized and resampled.
"""

import numpy as np

from nebpcl.evaluation import outside_fraction, records_from_step
from nebpcl.particle_bp import run_bp
from nebpcl.scenario import generate_realization, load_preset

real = generate_realization(load_preset("train-small"), seed=5)

# Prior positions have a standard deviation of sqrt(10) m per axis.
prior_err = np.linalg.norm(real.prior_means[real.mobile, :2] - real.initial[real.mobile, :2], axis=1)
print("prior RMSE %.2f m" % np.sqrt(np.mean(prior_err**2)))

# Filtering is a generator over time steps.
records, rmse = [], []
for step, res in enumerate(run_bp(real, K=500, key=(5,))):
    est = np.array([res.summaries[i].position for i in real.mobile])
    err = np.linalg.norm(est - real.truth[step, real.mobile, :2], axis=1)
    rmse.append(np.sqrt(np.mean(err**2)))
    records += records_from_step(0, step, res, real.truth[step], real.mobile)

for step in (0, 4, 9, 24, 49):
    print("step %2d: RMSE %.2f m" % (step + 1, rmse[step]))

# Particle BP tends to be overconfident: its covariances are too small for
# the errors it actually makes.
print("fraction of NEES values outside the 95%% interval: %.2f" % outside_fraction(records))
