# %% [markdown]
# Bias-probability curves from the stochastic model
#
# A DOPO pumped above threshold (lambda > 1) falls into one of two
# steady states.  A weak bias field tilts the odds.  Here we compare the
# Monte Carlo fraction of phase-0 outcomes with the closed-form erf curve.

# %%
import numpy as np

from dopo_tomography.model import bias_width, displacement, probability_curve
from dopo_tomography.protocol import SweepPlan, sweep_bias
from dopo_tomography.reconstruct import fit_erf

lam = 2.0
b = np.linspace(-1.5, 1.5, 11)

# %%
# closed form
p_ref = probability_curve(b, lam)
print("closed-form p(b):", np.round(p_ref, 4))
print("displacement of b=1:", displacement(1.0, lam))

# %%
# simulate 2000 shots per bias value, starting from the point vacuum
curve = sweep_bias(SweepPlan(b_grid=tuple(b), n_per_point=2000, lambda_meas=lam, seed=1))
lo, hi = curve.ci
for bi, p, r, l, h in zip(curve.b, curve.p_hat, p_ref, lo, hi):
    flag = "" if l <= r <= h else "  <- outside CI"
    print(f"b={bi:+.2f}  p_hat={p:.4f}  erf={r:.4f}  CI=[{l:.4f}, {h:.4f}]{flag}")

# %%
# erf fit recovers the transition width sqrt(lam (lam - 1)) / 2
fit = fit_erf(curve)
print(f"fitted width {fit.width:.4f} +- {fit.width_err:.4f}, expected {bias_width(lam):.4f}")
