"""
Fitting trends and forecasting a sparse tensor process
=======================================================

Simulate a user x context x item process, fit the spline-trend CP model,
forecast the held-out time points and attach prediction intervals.
"""

import numpy as np

from dtrs import FitConfig, SimConfig, evaluate, fit_model, sandwich_covariance, simulate
from dtrs.solver import tune_lambda

########################################################################
# A smaller version of the default design: 40 users, 9 contexts and 40
# items observed at 20 random time points, 80% of the entries missing.
# The last 30% of the items only appear in the forecast period.
config = SimConfig(n=(40, 9, 40), m=(5, 3, 5, 4), seed=7)
data = simulate(config)
print("training observations:", data.train.n_obs)
print("test observations:    ", data.test.n_obs)
print("cold items:           ", data.truth["cold_items"][:5], "...")

########################################################################
# The ridge weight is picked on the last four training time points, then
# the model is refitted on all training data.
tuned = tune_lambda(data.train, data.scheme, FitConfig())
for lam, err in tuned.table:
    print(f"lambda={lam:>4g}  validation RMSE={err:.4f}")

model, report = fit_model(data.train, data.scheme, FitConfig(lam=tuned.best_lambda))
print(f"converged={report.converged} after {report.iterations} block updates")
print("blocks accepted first:", report.accepted_blocks[:8])

########################################################################
# The objective never goes up: each accepted block is an exact ridge
# minimizer.
trace = np.array(report.objective_trace)
print("objective: start %.1f, end %.1f" % (trace[0], trace[-1]))
assert np.all(np.diff(trace) <= 1e-10 * trace[:-1])

########################################################################
# Forecasts with 95% intervals.  The interval half-width combines the
# robust covariance of the spline coefficients with the training MSE.
sandwich = sandwich_covariance(model, data.train)
metrics = evaluate(model, data.test, sandwich)
print(f"RMSE={metrics.rmse:.3f}  MAE={metrics.mae:.3f}  PICP={metrics.picp:.3f}")
for row in metrics.per_period:
    print(f"  t={row['time']:.3f}  n={row['n']:>5}  rmse={row['rmse']:.3f}  "
          f"picp={row['picp']:.3f}")

########################################################################
# Cold items have zero factor rows, so their forecast is the subgroup
# trend alone.
cold = np.array(data.truth["cold_items"]) - 1
print("item factor rows of cold items all zero:",
      bool(np.all(model.params.P[2][cold] == 0.0)))
