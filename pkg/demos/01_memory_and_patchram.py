# %% [markdown]
# # Reading memory and patching ROM
#
# A simulated BCM4339 exposes its address space through three vendor
# commands.  Here we read it, search it, and overlay a ROM word through a
# Patchram slot without touching the ROM itself.

# %%
import numpy as np

from bluepatch.core import Session

s = Session.simulated("bcm4339")
print("version", s.read_local_version())

# %% [markdown]
# Memory comes back as plain bytes, so numpy views are free.

# %%
ram = np.frombuffer(s.read_memory(0x200000, 256), dtype="<u4")
print("first RAM words:", [hex(w) for w in ram[:8]])
rom = np.frombuffer(s.read_memory(0x1000, 64), dtype=np.uint8)
print("ROM byte histogram (nonzero bins):", np.count_nonzero(np.bincount(rom, minlength=256)))

# %% [markdown]
# Writing RAM goes out in 251-byte chunks.

# %%
blob = np.random.default_rng(0).integers(0, 256, 1000, dtype=np.uint8).tobytes()
res = s.write_memory(0x210000, blob, verify=True)
print("chunks:", res.chunks, "round trip ok:", s.read_memory(0x210000, len(blob)) == blob)
print("search hits:", [hex(a) for a in s.search_memory(blob[100:108])])

# %% [markdown]
# A Patchram slot replaces one aligned ROM word as seen by every reader.

# %%
before = s.read_memory(0x1000, 4)
slot = s.patch_rom(0x1000, 0x11223344)
print(f"slot {slot}: {before.hex()} -> {s.read_memory(0x1000, 4).hex()}")
s.release_slot(slot)
print("released:", s.read_memory(0x1000, 4).hex())
s.close()
