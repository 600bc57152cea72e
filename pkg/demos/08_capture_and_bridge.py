# %% [markdown]
# # Capturing HCI traffic
#
# Traffic goes to a btsnoop file and, at the same time, to a localhost
# socket that a live viewer can read.

# %%
import socket
import tempfile
from pathlib import Path

import numpy as np

from bluepatch import capture
from bluepatch.capture import Bridge
from bluepatch.core import HciCaptureSink, Session

tmp = Path(tempfile.mkdtemp())
s = Session.simulated("bcm4339")
bridge = Bridge(s, 0, 0)
viewer = socket.create_connection(("127.0.0.1", bridge.out_port))
sink = HciCaptureSink(tmp / "hci.log", s)

# %%
while bridge.client_count < 1:
    pass
for addr in range(0x200000, 0x200400, 0x40):
    s.read_memory(addr, 0x40)
s.flush()
sink.close()
bridge.close()

live = b""
while chunk := viewer.recv(65536):
    live += chunk
viewer.close()
print("socket stream matches file:", live == (tmp / "hci.log").read_bytes())

# %%
header, records = capture.read_capture(tmp / "hci.log")
sizes = np.array([len(r.data) for r in records])
print(header.dialect.name, len(records), "records, sizes", np.unique(sizes))
s.close()
