"""Controller profiles: chip identity, memory map and synthetic firmware layout."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from ..hci import VendorOpcodeTable
from .memory import MemoryRegion, PatchramLayout, RegionKind


class ProfileError(Exception):
    pass


def num(value: Any) -> int:
    return int(value, 0) if isinstance(value, str) else int(value)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class Layout:
    patchram_value_table: int
    patchram_address_table: int
    patchram_enable_bitmap: int
    patchram_staging: int
    patchram_staging_size: int
    lm_cur_cmd: int
    lm_cur_cmd_size: int
    lmp_tx_buffer_size: int
    connection_table: int
    connection_slots: int
    io_capability: int
    test_config: int
    scratch_window: tuple[int, int]
    hook_area: tuple[int, int]
    trace_dump: tuple[int, int]
    initial_registers: dict[str, int]
    initial_ram: dict[int, bytes]

    @classmethod
    def from_dict(cls, d: dict) -> "Layout":
        def pair(v):
            return (num(v[0]), num(v[1]))

        return cls(
            patchram_value_table=num(d["patchram_value_table"]),
            patchram_address_table=num(d["patchram_address_table"]),
            patchram_enable_bitmap=num(d["patchram_enable_bitmap"]),
            patchram_staging=num(d["patchram_staging"]),
            patchram_staging_size=num(d["patchram_staging_size"]),
            lm_cur_cmd=num(d["lm_cur_cmd"]),
            lm_cur_cmd_size=num(d["lm_cur_cmd_size"]),
            lmp_tx_buffer_size=num(d["lmp_tx_buffer_size"]),
            connection_table=num(d["connection_table"]),
            connection_slots=num(d["connection_slots"]),
            io_capability=num(d["io_capability"]),
            test_config=num(d["test_config"]),
            scratch_window=pair(d["scratch_window"]),
            hook_area=pair(d["hook_area"]),
            trace_dump=pair(d["trace_dump"]),
            initial_registers={k: num(v) for k, v in d.get("initial_registers", {}).items()},
            initial_ram={num(k): bytes.fromhex(v) for k, v in d.get("initial_ram", {}).items()},
        )


@dataclass(frozen=True)
class ControllerProfile:
    name: str
    chip_name: str
    description: str
    company_id: int
    hci_version: int
    hci_revision: int
    lmp_version: int
    lmp_subversion: int
    patchram_slots: int
    vulnerable_bpcs: bool
    features: bytes
    vendor_opcodes: VendorOpcodeTable
    regions: tuple[MemoryRegion, ...]
    layout: Layout
    firmware: dict = field(repr=False, compare=False, hash=False)
    source: dict = field(repr=False, compare=False, hash=False)

    @property
    def patchram_layout(self) -> PatchramLayout:
        return PatchramLayout(
            self.layout.patchram_value_table,
            self.layout.patchram_address_table,
            self.layout.patchram_enable_bitmap,
            self.patchram_slots,
        )

    @property
    def dispatcher_address(self) -> int:
        return num(self.firmware["lmp_dispatcher"])

    @property
    def send_path_address(self) -> int:
        return num(self.firmware["send_lmp_packet"])

    @property
    def lmp_table_base(self) -> int:
        return num(self.firmware["lmp_table_base"])

    @property
    def bpcs_table_base(self) -> int:
        return num(self.firmware["bpcs_table_base"])

    def region(self, label: str) -> MemoryRegion:
        for r in self.regions:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.source)

    @classmethod
    def from_dict(cls, d: dict, name: str = "") -> "ControllerProfile":
        if d.get("format") != "bluepatch-profile":
            raise ProfileError("not a bluepatch profile (missing format tag)")
        if d.get("version") != 1:
            raise ProfileError(f"unsupported profile version {d.get('version')}")
        try:
            regions = tuple(
                MemoryRegion(num(r["start"]), num(r["size"]), RegionKind(r["kind"]), r["label"])
                for r in d["regions"]
            )
            layout = Layout.from_dict(d["layout"])
            slots = num(d["patchram_slots"])
            if 4 * slots > 0x300 or (slots + 7) // 8 > 0x20:
                # both slot tables must fit their windows in the IO region
                raise ProfileError(f"{slots} Patchram slots do not fit the table layout")
            return cls(
                name=name or d["chip_name"].lower(),
                chip_name=d["chip_name"],
                description=d.get("description", ""),
                company_id=num(d["company_id"]),
                hci_version=num(d["hci_version"]),
                hci_revision=num(d["hci_revision"]),
                lmp_version=num(d["lmp_version"]),
                lmp_subversion=num(d["lmp_subversion"]),
                patchram_slots=slots,
                vulnerable_bpcs=bool(d["vulnerable_bpcs"]),
                features=bytes.fromhex(d["features"]),
                vendor_opcodes=VendorOpcodeTable.from_dict(d["vendor_opcodes"]),
                regions=regions,
                layout=layout,
                firmware=d["firmware"],
                source=d,
            )
        except KeyError as exc:
            raise ProfileError(f"profile is missing field {exc}") from None


def _builtin_text(name: str) -> str | None:
    res = resources.files("bluepatch.data.profiles").joinpath(f"{name}.json")
    if res.is_file():
        return res.read_text()
    return None


def builtin_profiles() -> list[str]:
    names = []
    for res in resources.files("bluepatch.data.profiles").iterdir():
        if res.name.endswith(".json") and not res.name.startswith("broadcom_base"):
            names.append(res.name[:-5])
    return sorted(names)


def _load_raw(name_or_path: str, seen: tuple[str, ...] = ()) -> dict:
    if name_or_path in seen:
        raise ProfileError(f"profile inheritance loop through {name_or_path}")
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        text = path.read_text()
    else:
        text = _builtin_text(name_or_path)
        if text is None:
            raise ProfileError(
                f"unknown profile {name_or_path!r}; built-in: {', '.join(builtin_profiles())}"
            )
    data = json.loads(text)
    parent = data.pop("inherits", None)
    if parent:
        data = _merge(_load_raw(parent, seen + (name_or_path,)), data)
    return data


def load_profile(name_or_path: str = "bcm4339") -> ControllerProfile:
    """Load a built-in profile by name or a JSON file by path."""
    data = _load_raw(name_or_path)
    name = Path(name_or_path).stem if name_or_path.endswith(".json") else name_or_path
    return ControllerProfile.from_dict(data, name)
