"""Scenario files for the simulated target.

A scenario bundles an interface spec, a memory layout, micro-op scripts for
every endpoint, a scripted workload, and a manifest of the vulnerabilities
planted in the scripts.  The manifest is the ground truth the acceptance
suite checks the whole pipeline against.

Script micro-ops (each op is one dict; the op's index doubles as the frame
offset in synthetic stacks):

    {"op": "read",  "addr": E, "size": N, "dst": "name"?}
    {"op": "write", "addr": E, "value": E, "size": N}
    {"op": "copy",  "dst": E, "src": E, "len": E}
    {"op": "branch", "cond": {"eq"|"ne"|"lt"|"gt": [E, E]} | "always", "skip": N}
    {"op": "call_cb", "target": E, "args": [E...], "dst": "name"?}
    {"op": "invoke", "script": "name", "args": [E...]}
    {"op": "lock_acquire", "addr": E} / {"op": "lock_release", "addr": E}
    {"op": "alloc", "size": E, "dst": "name"} / {"op": "free", "addr": E}
    {"op": "exec", "addr": E}
    {"op": "ret", "value": E, "size": N}
    {"op": "nondet_branch", "skip": N}

Expressions E:

    {"const": N} | {"arg": "name"} | {"local": "name"} | {"ret": true}
    | {"add": [E, E]} | {"mask": [E, M]}

Programs are straight-line with forward skips only, so execution is bounded
by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

from ..errors import ScenarioError
from ..iface import InterfaceSpec, load_interface_spec
from ..wire import AccessKind

OPS = {
    "read",
    "write",
    "copy",
    "branch",
    "call_cb",
    "invoke",
    "lock_acquire",
    "lock_release",
    "alloc",
    "free",
    "exec",
    "ret",
    "nondet_branch",
}

SCRIPT_KINDS = {"body", "after_call", "callback", "internal", "setup"}


@dataclass(frozen=True)
class Script:
    name: str
    component: str
    label: str
    kind: str
    params: tuple[str, ...]
    ops: tuple[dict, ...]
    for_symbol: str = ""


@dataclass(frozen=True)
class WorkloadCall:
    symbol: str
    caller_frame: str
    args: tuple[dict, ...]
    # declared position in the workload script: the caller-side "call site",
    # stable under request reordering
    site: int = 0


@dataclass(frozen=True)
class PlantedVuln:
    """Ground-truth record for one seeded vulnerability.

    ``site`` is the (frame label, op offset) where the fault lands; together
    with ``kind`` it pins the dedup identity the pipeline must discover.
    """

    vuln_id: str
    classes: frozenset[str]
    kind: AccessKind
    site: tuple[str, int]
    arbitrary: Optional[str]  # "Arbitrary" | "Fixed" | "Inconclusive" | None
    min_size: int
    category: str  # dc1, dc2, dc3, tv1, tv2, error-path, forwarding, allocator
    disposition: str = "valid"  # valid | fp | unattributable


@dataclass(frozen=True)
class Scenario:
    name: str
    spec: InterfaceSpec
    page_size: int
    regions: tuple[dict, ...]
    alloc_region: str
    alloc_cap: int
    init_writes: tuple[tuple[int, bytes], ...]
    callback_table: dict[int, str]
    buffer_lengths: dict[int, int]
    scripts: dict[str, Script]
    workload_calls: tuple[WorkloadCall, ...]
    workload_jitter: bool
    setup_script: str
    planted: tuple[PlantedVuln, ...]
    nondeterminism: bool
    acceptance: bool
    callers: int

    def body_script(self, symbol: str) -> Optional[Script]:
        s = self.scripts.get(symbol)
        return s if s is not None and s.kind in ("body", "callback") else None

    def after_call_script(self, symbol: str) -> Optional[Script]:
        for s in self.scripts.values():
            if s.kind == "after_call" and s.for_symbol == symbol:
                return s
        return None

    def valid_planted(self) -> list[PlantedVuln]:
        return [p for p in self.planted if p.disposition == "valid"]


def _parse_value(entry: dict) -> tuple[int, bytes]:
    addr = entry["addr"]
    if "hex" in entry:
        return addr, bytes.fromhex(entry["hex"])
    if "str" in entry:
        return addr, entry["str"].encode() + b"\x00"
    if "u64" in entry:
        return addr, int(entry["u64"]).to_bytes(8, "little")
    if "u32" in entry:
        return addr, int(entry["u32"]).to_bytes(4, "little")
    raise ScenarioError(f"init entry at {addr:#x} needs one of hex/str/u64/u32")


def _check_ops(script: str, ops: tuple[dict, ...]) -> None:
    for i, op in enumerate(ops):
        name = op.get("op")
        if name not in OPS:
            raise ScenarioError(f"{script}[{i}]: unknown op {name!r}")
        if name in ("branch", "nondet_branch"):
            skip = op.get("skip", 0)
            if not isinstance(skip, int) or skip < 0 or i + 1 + skip > len(ops):
                raise ScenarioError(f"{script}[{i}]: skip {skip} escapes the script")


def load_scenario(source: str | Path | dict) -> Scenario:
    """Load and structurally validate one scenario document."""
    if isinstance(source, dict):
        doc = source
        name_hint = "<dict>"
    else:
        path = Path(source)
        name_hint = path.name
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ScenarioError(f"{name_hint}: not valid JSON: {e}")

    required = {"name", "interface", "memory", "scripts", "workload", "planted"}
    missing = required - set(doc)
    if missing:
        raise ScenarioError(f"{name_hint}: missing keys {sorted(missing)}")

    spec = load_interface_spec(doc["interface"])

    mem = doc["memory"]
    regions = tuple(mem.get("regions", []))
    init_writes = tuple(_parse_value(e) for e in mem.get("init", []))
    alloc = mem.get("alloc", {})

    callback_table = {int(k, 0) if isinstance(k, str) else int(k): v
                      for k, v in doc.get("callback_table", {}).items()}
    buffer_lengths = {int(k, 0) if isinstance(k, str) else int(k): v
                      for k, v in doc.get("buffer_lengths", {}).items()}

    scripts: dict[str, Script] = {}
    for sname, s in doc["scripts"].items():
        kind = s.get("kind", "body")
        if kind not in SCRIPT_KINDS:
            raise ScenarioError(f"script {sname!r}: unknown kind {kind!r}")
        ops = tuple(s.get("ops", []))
        _check_ops(sname, ops)
        scripts[sname] = Script(
            name=sname,
            component=s.get("component", ""),
            label=s.get("label", sname),
            kind=kind,
            params=tuple(s.get("params", [])),
            ops=ops,
            for_symbol=s.get("for", ""),
        )

    symbols = {f.symbol for f in spec.functions}
    for sname, script in scripts.items():
        if script.kind in ("body", "callback") and sname not in symbols:
            raise ScenarioError(f"script {sname!r} has kind {script.kind!r} but no declared function")
        if script.kind == "after_call" and script.for_symbol not in symbols:
            raise ScenarioError(f"after_call script {sname!r} references unknown symbol")
        for i, op in enumerate(script.ops):
            if op["op"] == "invoke" and op["script"] not in scripts:
                raise ScenarioError(f"{sname}[{i}]: invoke of undeclared script {op['script']!r}")
    for addr, cb in callback_table.items():
        if cb not in scripts:
            raise ScenarioError(f"callback table maps {addr:#x} to undeclared script {cb!r}")

    wl = doc["workload"]
    calls = tuple(
        WorkloadCall(c["symbol"], c.get("caller_frame", "main"), tuple(c.get("args", [])), site=i)
        for i, c in enumerate(wl.get("calls", []))
    )
    if not calls:
        raise ScenarioError(f"{name_hint}: workload has no calls")
    for c in calls:
        if c.symbol not in symbols:
            raise ScenarioError(f"workload calls undeclared symbol {c.symbol!r}")

    planted = []
    for p in doc.get("planted", []):
        planted.append(
            PlantedVuln(
                vuln_id=p["id"],
                classes=frozenset(p.get("classes", [])),
                kind=AccessKind[p["kind"]],
                site=(p["site"]["label"], p["site"]["offset"]),
                arbitrary=p.get("arbitrary"),
                min_size=p.get("min_size", 1),
                category=p.get("category", ""),
                disposition=p.get("disposition", "valid"),
            )
        )

    return Scenario(
        name=doc["name"],
        spec=spec,
        page_size=mem.get("page_size", 4096),
        regions=regions,
        alloc_region=alloc.get("region", ""),
        alloc_cap=alloc.get("cap", 4096),
        init_writes=init_writes,
        callback_table=callback_table,
        buffer_lengths=buffer_lengths,
        scripts=scripts,
        workload_calls=calls,
        workload_jitter=bool(wl.get("jitter", False)),
        setup_script=wl.get("setup", ""),
        planted=tuple(planted),
        nondeterminism=bool(doc.get("nondeterminism", False)),
        acceptance=bool(doc.get("acceptance", True)),
        callers=int(doc.get("callers", 1)),
    )


def corpus_dir() -> Path:
    """Directory holding the shipped scenario corpus."""
    return Path(str(resources.files("civfuzz").joinpath("scenarios")))


def load_corpus(directory: Optional[Path] = None) -> list[Scenario]:
    """All shipped scenarios, sorted by file name for stable ordering."""
    d = directory or corpus_dir()
    return [load_scenario(p) for p in sorted(d.glob("*.json"))]
