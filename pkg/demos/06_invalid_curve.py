# %% [markdown]
# # Invalid-curve ECDH
#
# If the victim skips point validation, a public key of order two leaks the
# parity of its secret.  Success rates with and without validation:

# %%
import numpy as np

from bluepatch import security

rates = {}
for parity in ("random", "even"):
    for validates in (False, True):
        r = security.invalid_curve_experiment(10_000, parity, victim_validates=validates, seed=1)
        rates[parity, validates] = r.success_rate
        print(r.table().splitlines()[-1])

# %% [markdown]
# Spread of the unvalidated random-key rate over a handful of seeds.

# %%
spread = np.array([
    security.invalid_curve_experiment(2_000, "random", seed=k).success_rate for k in range(8)
])
print(f"mean {spread.mean():.4f}  std {spread.std():.4f}")
