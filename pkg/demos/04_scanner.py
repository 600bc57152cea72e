# %% [markdown]
# # Scanning for the BPCS flaw
#
# The first out-of-range subcommand, 0x06, draws a rejection from a patched
# chip and silence (or worse) from an unpatched one.  That difference is
# enough to fingerprint a remote device.

# %%
from bluepatch.core import Session
from bluepatch.sim.controller import Air, Controller
from bluepatch.sim.profile import builtin_profiles, load_profile

rows = []
for name in sorted(n for n in builtin_profiles() if n != "broadcom_base"):
    air = Air()
    Controller(load_profile(name), "de:ad:be:ef:00:00", air)
    with Session.simulated("bcm4339", "00:1a:7d:da:71:0a", air) as s:
        result = s.scan_bpcs(s.connect("de:ad:be:ef:00:00").handle)
    rows.append((name, result.version_text, result.verdict.name))

for row in rows:
    print("{:<14} {:<28} {}".format(*row))
