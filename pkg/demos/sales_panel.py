"""
Monthly sales panel from a long CSV
===================================

A store x promotion x product panel with monthly observations is written
as a long CSV, ingested with a column-role schema (region and category
subgroups, calendar-month time subgroups), fitted, and used to forecast
the last six months.
"""

import csv
import json
import tempfile
from pathlib import Path

import numpy as np

from dtrs import FitConfig, evaluate, fit_model, ingest_long_csv

rng = np.random.default_rng(11)
workdir = Path(tempfile.mkdtemp())

########################################################################
# Units sold follow a product-specific growth curve, a store effect and a
# shared seasonal cycle; one month in three is missing for each series.
stores, promos, products, months = 12, 2, 8, 36
store_eff = rng.gamma(4.0, 0.5, stores)
prod_eff = rng.gamma(3.0, 0.5, products)
rows = []
for s in range(stores):
    for p in range(promos):
        for j in range(products):
            for m in range(1, months + 1):
                if rng.uniform() < 1 / 3:
                    continue
                season = 2.0 * np.sin(2 * np.pi * m / 12)
                level = store_eff[s] * prod_eff[j] * (1 + 0.3 * p) * (1 + m / 36)
                rows.append([s + 1, p + 1, j + 1, m, round(level + season + rng.normal(0, 0.5), 3),
                             "north" if s < 6 else "south", "food" if j < 4 else "home"])

header = ["store", "promo", "product", "month", "units", "region", "category"]
train_rows = [r for r in rows if r[3] <= 30]
test_rows = [r for r in rows if r[3] > 30]
for name, part in (("train.csv", train_rows), ("test.csv", test_rows)):
    with open(workdir / name, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(part)

schema = {
    "modes": ["store", "promo", "product"],
    "time": "month",
    "value": "units",
    "groups": ["region", None, "category"],
    "time_range": [1, months],
    "time_period": {"period": 1, "count": 12, "origin": 1},
}
(workdir / "schema.json").write_text(json.dumps(schema, indent=2))

########################################################################
# Ingest both files with the same fixed time range so they share one
# rescaled [0, 1] clock.
train, scheme = ingest_long_csv(workdir / "train.csv", schema)
test, _ = ingest_long_csv(workdir / "test.csv", schema, dims=train.dims)
print("dims:", train.dims, " training cells:", train.n_cells, " observations:", train.n_obs)
print("subgroups per mode:", scheme.n_mode_groups, " time subgroups:", scheme.n_time_groups)

model, report = fit_model(train, scheme, FitConfig(r=2, lam=1.0))
metrics = evaluate(model, test)
print(f"converged={report.converged}  iterations={report.iterations}  forecast RMSE={metrics.rmse:.3f}  MAE={metrics.mae:.3f}")
for row in metrics.per_period:
    month = schema["time_range"][0] + row["time"] * (months - 1)
    print(f"  month {month:4.0f}: rmse={row['rmse']:.3f}")
