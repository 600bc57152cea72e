# %% [markdown]
# # Watching the link manager
#
# Two simulated chips share one radio medium.  A small hook on the attacker
# side copies every LMP packet, in and out, to the host.

# %%
from collections import Counter

from bluepatch import lmp
from bluepatch.core import Session
from bluepatch.sim.controller import Air, Controller
from bluepatch.sim.profile import load_profile

air = Air()
Controller(load_profile("bcm4339"), "de:ad:be:ef:00:00", air)
s = Session.simulated("bcm4339", "00:1a:7d:da:71:0a", air)
handle = s.connect("de:ad:be:ef:00:00").handle

records = []
s.install_lmp_monitor(records)

# %%
s.send_lmp(handle, lmp.LMP_VERSION_REQ, bytes.fromhex("070f000961"))
s.send_lmp(handle, lmp.LMP_FEATURES_REQ, bytes(8))
s.flush()

for r in records:
    print(f"{r.direction.name:<4} {r.pdu_bytes.hex()}")

# %%
print(Counter(r.direction.name for r in records))
s.remove_lmp_monitor(records)
s.close()
