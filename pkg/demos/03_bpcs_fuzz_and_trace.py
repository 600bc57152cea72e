# %% [markdown]
# # Fuzzing the BPCS handler
#
# Every subcommand byte is run from the same snapshot in a traced
# interpreter.  Handlers that crash, change memory, or branch differently
# on their arguments are separated out.

# %%
import numpy as np

from bluepatch import tracer
from bluepatch.sim.controller import Controller
from bluepatch.sim.profile import load_profile

snap = Controller(load_profile("bcm4339")).snapshot()
report = tracer.fuzz_bpcs(snap)
print(report.to_text().splitlines()[0])

# %%
verdicts = np.array([r.verdict.value for r in report.results])
names, counts = np.unique(verdicts, return_counts=True)
for n, c in zip(names, counts):
    print(f"{n:<14}{c:>4}")

# %% [markdown]
# One crashing subcommand, step by step.

# %%
crash = report.by_verdict(tracer.Verdict.CRASH)[0]
result = tracer.run_trace(snap, bytes([0, crash]))
print("\n".join(result.lines()[-4:]))
