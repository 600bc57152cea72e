# %% [markdown]
# # Lying about IO capabilities
#
# A single RAM write changes what the controller advertises during pairing,
# whatever the host asked for.

# %%
from bluepatch import security
from bluepatch.core import Session

s = Session.simulated("bcm4339")
print("before:", security.advertised_capability(s).label)
print(security.simulate_pairing(s))

security.nino_override(s)
print("after: ", security.advertised_capability(s).label)
print(security.simulate_pairing(s))

# %% [markdown]
# A peer that checks consistency notices.

# %%
print(security.simulate_pairing(s, peer_enforces_consistency=True))
s.close()
