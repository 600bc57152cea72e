"""Simulated Broadcom-style Bluetooth controller."""

from .controller import (
    Air,
    ConnectionEntry,
    ConnState,
    Controller,
    ControllerSnapshot,
    DispatchResult,
    Mode,
    NoSuchConnection,
    Role,
    TraceEvent,
    TraceKind,
    TxResult,
)
from .firmware import Behavior, Firmware, HandlerEntry, build_rom
from .memory import Memory, MemoryRegion, Patchram, RegionKind, SlotOutOfRange, Unmapped
from .profile import ControllerProfile, builtin_profiles, load_profile
