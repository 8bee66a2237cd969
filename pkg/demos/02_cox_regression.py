"""Fitting a Cox model and checking it against the truth it was simulated from.

Run: python demos/02_cox_regression.py
"""
import math

import numpy as np

from hncrfs.coxph import FitOptions, fit_cox, predict_risk
from hncrfs.survstat import concordance_index
from hncrfs.synth import SynthSpec, generate_survival

# One binary covariate with a true hazard ratio of 2, no censoring.
table, records = generate_survival(SynthSpec(n=2000, betas=(math.log(2),), seed=1, binary=True))
model = fit_cox(table.values, records)
print(f"binary covariate: beta = {model.beta[0]:.4f} (truth {math.log(2):.4f}), "
      f"HR = {math.exp(model.beta[0]):.3f}, {model.iterations} Newton steps")

# Two continuous covariates plus two noise columns, 30% censoring.
table, records = generate_survival(SynthSpec(n=500, betas=(0.8, -0.5), censoring_rate=0.3, seed=4),
                                   n_noise_features=2)
print(f"events: {sum(r.event for r in records)} of {len(records)}")
for ties in ("efron", "breslow"):
    m = fit_cox(table.values, records, FitOptions(tie_method=ties))
    coefs = ", ".join(f"{n}={b:+.3f}" for n, b in zip(m.feature_names, m.beta))
    print(f"{ties:8s} {coefs}")

model = fit_cox(table.values, records)
risk = predict_risk(model, table.values)
print(f"in-sample C-index of the linear predictor: {concordance_index(records, risk):.3f}")
print(f"predictions are centered on the training means: mean risk = {np.mean(risk):+.1e}")
