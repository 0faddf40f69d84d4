"""Semantic type system and interface specification.

An interface spec tells the fuzzer what crosses a boundary, in which trust
direction, and which values may legally be altered.  Specs are loaded from a
JSON document (produced offline by whatever extracts debug metadata from the
target); the loader validates every structural invariant up front so the rest
of the package can treat specs as trusted, immutable data.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator, Optional

from .errors import SchemaError, ValidationError

MAX_AGGREGATE_DEPTH = 4

_ROLE_HINT_RE = re.compile(r"len|size|count|idx", re.IGNORECASE)


class TypeKind(Enum):
    ADDRESS = "AddressValue"
    INTEGER = "Integer"
    FLOAT = "Float"
    AGGREGATE = "Aggregate"
    TEXT = "TextString"
    RAW = "RawBuffer"
    CALLABLE = "CallableRef"
    LOCK = "Lock"


class Direction(Enum):
    SANDBOX = "sandbox"
    SAFEBOX = "safebox"


class Role(Enum):
    VICTIM = "victim"
    MALICIOUS = "malicious"
    OTHER = "other"


class ParamRole(Enum):
    SIZE = "size"
    INDEX = "index"
    OTHER = "other"


@dataclass(frozen=True)
class FieldDesc:
    name: str
    byte_offset: int
    desc: "TypeDescriptor"
    role: ParamRole = ParamRole.OTHER


@dataclass(frozen=True)
class TypeDescriptor:
    """Description of one interface-crossing value."""

    kind: TypeKind
    size_bits: int
    type_name: str
    signed: bool = False
    pointee: Optional["TypeDescriptor"] = None
    fields: tuple[FieldDesc, ...] = ()
    # CallableRef only: declared callee parameter types, if known.
    sig_params: tuple["Param", ...] = ()
    sig_return: Optional["TypeDescriptor"] = None

    @property
    def size_bytes(self) -> int:
        return self.size_bits // 8


@dataclass(frozen=True)
class Param:
    name: str
    desc: TypeDescriptor
    role: ParamRole = ParamRole.OTHER


@dataclass(frozen=True)
class FunctionSig:
    symbol: str
    params: tuple[Param, ...]
    return_type: Optional[TypeDescriptor]
    is_callback: bool
    owning_component: str
    low_confidence: bool = False


@dataclass(frozen=True)
class ComponentId:
    name: str
    role: Role
    code_range_labels: frozenset[str]


@dataclass(frozen=True)
class MemoryHint:
    name: str
    base: int
    length: int


@dataclass(frozen=True)
class InterfaceSpec:
    word_size_bits: int
    direction: Direction
    components: tuple[ComponentId, ...]
    functions: tuple[FunctionSig, ...]
    memory_map_hints: tuple[MemoryHint, ...] = ()

    def function(self, symbol: str) -> FunctionSig:
        for f in self.functions:
            if f.symbol == symbol:
                return f
        raise KeyError(symbol)

    @property
    def malicious_component(self) -> ComponentId:
        return next(c for c in self.components if c.role is Role.MALICIOUS)

    def component_for_label(self, label: str) -> Optional[ComponentId]:
        """Attribute a stack frame label to a component.

        Labels match exactly, or by module prefix for native frames of the
        form "module:symbol"."""
        module = label.split(":", 1)[0]
        for c in self.components:
            if label in c.code_range_labels or module in c.code_range_labels:
                return c
        return None

    def hint(self, name: str) -> Optional[MemoryHint]:
        for h in self.memory_map_hints:
            if h.name == name:
                return h
        return None

    @property
    def api_functions(self) -> tuple[FunctionSig, ...]:
        """Declared entry points, callbacks excluded."""
        return tuple(f for f in self.functions if not f.is_callback)


@dataclass(frozen=True)
class SharedRegion:
    """A buffer referenced by a pointer crossing the interface.

    ``length`` is None when only the adapter can resolve it at runtime
    (text strings and untyped raw buffers).
    """

    base: int
    length: Optional[int]
    element: TypeDescriptor


def infer_param_role(name: str, explicit: Optional[str]) -> ParamRole:
    if explicit is not None:
        return ParamRole(explicit)
    if _ROLE_HINT_RE.search(name):
        # crude but effective: len/size/count/idx in the name marks
        # indexing information
        return ParamRole.INDEX if "idx" in name.lower() else ParamRole.SIZE
    return ParamRole.OTHER


# ---------------------------------------------------------------------------
# document loading


def _require_keys(obj: dict, allowed: set[str], required: set[str], path: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaError(f"{path}: expected object, got {type(obj).__name__}")
    unknown = set(obj) - allowed
    if unknown:
        raise SchemaError(f"{path}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise SchemaError(f"{path}: missing keys {sorted(missing)}")


def _load_type(obj: dict, path: str) -> TypeDescriptor:
    _require_keys(
        obj,
        {"kind", "size_bits", "type_name", "signed", "pointee", "fields", "signature"},
        {"kind", "size_bits"},
        path,
    )
    try:
        kind = TypeKind(obj["kind"])
    except ValueError:
        raise SchemaError(f"{path}.kind: unknown kind {obj['kind']!r}")
    size_bits = obj["size_bits"]
    if not isinstance(size_bits, int) or size_bits <= 0:
        raise ValidationError("size_bits must be a positive integer", f"{path}.size_bits")
    type_name = obj.get("type_name", obj["kind"])

    signed = bool(obj.get("signed", False))
    if "signed" in obj and kind is not TypeKind.INTEGER:
        raise ValidationError("signed is only valid on Integer", f"{path}.signed")

    pointee = None
    if "pointee" in obj:
        if kind is not TypeKind.ADDRESS:
            raise ValidationError("pointee is only valid on AddressValue", f"{path}.pointee")
        pointee = _load_type(obj["pointee"], f"{path}.pointee")

    fields: tuple[FieldDesc, ...] = ()
    if "fields" in obj:
        if kind is not TypeKind.AGGREGATE:
            raise ValidationError("fields are only valid on Aggregate", f"{path}.fields")
        out = []
        prev_off = -1
        for i, f in enumerate(obj["fields"]):
            fpath = f"{path}.fields[{i}]"
            _require_keys(f, {"name", "byte_offset", "type", "role"}, {"name", "byte_offset", "type"}, fpath)
            fdesc = _load_type(f["type"], f"{fpath}.type")
            off = f["byte_offset"]
            if not isinstance(off, int) or off <= prev_off:
                raise ValidationError("field offsets must be strictly increasing", f"{fpath}.byte_offset")
            if off + fdesc.size_bytes > size_bits // 8:
                raise ValidationError(
                    f"field {f['name']!r} ends at {off + fdesc.size_bytes}, "
                    f"outside the {size_bits // 8}-byte aggregate",
                    fpath,
                )
            out.append(FieldDesc(f["name"], off, fdesc, infer_param_role(f["name"], f.get("role"))))
            prev_off = off
        fields = tuple(out)
    elif kind is TypeKind.AGGREGATE:
        raise ValidationError("Aggregate requires fields", path)

    sig_params: tuple[Param, ...] = ()
    sig_return = None
    if "signature" in obj:
        if kind is not TypeKind.CALLABLE:
            raise ValidationError("signature is only valid on CallableRef", f"{path}.signature")
        sig = obj["signature"]
        _require_keys(sig, {"params", "return_type"}, set(), f"{path}.signature")
        sig_params = tuple(
            _load_param(p, f"{path}.signature.params[{i}]") for i, p in enumerate(sig.get("params", []))
        )
        if sig.get("return_type") is not None:
            sig_return = _load_type(sig["return_type"], f"{path}.signature.return_type")

    return TypeDescriptor(
        kind=kind,
        size_bits=size_bits,
        type_name=type_name,
        signed=signed,
        pointee=pointee,
        fields=fields,
        sig_params=sig_params,
        sig_return=sig_return,
    )


def _load_param(obj: dict, path: str) -> Param:
    _require_keys(obj, {"name", "type", "role"}, {"name", "type"}, path)
    desc = _load_type(obj["type"], f"{path}.type")
    return Param(obj["name"], desc, infer_param_role(obj["name"], obj.get("role")))


def _check_descriptor(desc: TypeDescriptor, word_bits: int, path: str, as_value: bool) -> None:
    """Walk a descriptor checking word-size and lock-placement rules.

    ``as_value`` is True when the descriptor types a bare value position
    (parameter or return): a Lock is only legal behind a pointer or inside
    an aggregate, never as a bare value.
    """
    if desc.kind is TypeKind.ADDRESS and desc.size_bits != word_bits:
        raise ValidationError(
            f"AddressValue is {desc.size_bits} bits, target word size is {word_bits}", path
        )
    if desc.kind is TypeKind.LOCK and as_value:
        raise ValidationError("Lock is only legal as an aggregate field or pointee", path)
    if desc.pointee is not None:
        _check_descriptor(desc.pointee, word_bits, f"{path}.pointee", as_value=False)
    for f in desc.fields:
        _check_descriptor(f.desc, word_bits, f"{path}.{f.name}", as_value=False)
    for p in desc.sig_params:
        _check_descriptor(p.desc, word_bits, f"{path}.sig.{p.name}", as_value=True)
    if desc.sig_return is not None:
        _check_descriptor(desc.sig_return, word_bits, f"{path}.sig.return", as_value=True)


def load_interface_spec(document: str | dict) -> InterfaceSpec:
    """Parse and validate an interface spec document (JSON text or dict)."""
    if isinstance(document, str):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as e:
            raise SchemaError(f"not valid JSON: {e}") from e
    else:
        doc = document

    _require_keys(
        doc,
        {"word_size_bits", "direction", "components", "functions", "memory_map_hints"},
        {"word_size_bits", "direction", "components", "functions"},
        "spec",
    )

    word_bits = doc["word_size_bits"]
    if not isinstance(word_bits, int) or word_bits <= 0 or word_bits % 8:
        raise ValidationError("word_size_bits must be a positive multiple of 8", "spec.word_size_bits")

    try:
        direction = Direction(doc["direction"])
    except ValueError:
        raise SchemaError(f"spec.direction: expected 'sandbox' or 'safebox', got {doc['direction']!r}")

    components = []
    seen_labels: dict[str, str] = {}
    for i, c in enumerate(doc["components"]):
        cpath = f"components[{i}]"
        _require_keys(c, {"name", "role", "labels"}, {"name", "role"}, cpath)
        try:
            role = Role(c["role"])
        except ValueError:
            raise SchemaError(f"{cpath}.role: unknown role {c['role']!r}")
        labels = frozenset(c.get("labels", []))
        for lab in labels:
            if lab in seen_labels:
                raise ValidationError(
                    f"label {lab!r} already claimed by component {seen_labels[lab]!r}",
                    f"{cpath}.labels",
                )
            seen_labels[lab] = c["name"]
        components.append(ComponentId(c["name"], role, labels))

    malicious = [c for c in components if c.role is Role.MALICIOUS]
    if len(malicious) != 1:
        raise ValidationError(
            f"exactly one component must be tagged malicious, found {len(malicious)}", "components"
        )
    if not any(c.role is Role.VICTIM for c in components):
        raise ValidationError("at least one component must be tagged victim", "components")
    names = {c.name for c in components}

    functions = []
    seen_symbols: set[str] = set()
    for i, f in enumerate(doc["functions"]):
        fpath = f"functions[{i}]"
        _require_keys(
            f,
            {"symbol", "params", "return_type", "is_callback", "owner", "variadic"},
            {"symbol", "params", "owner"},
            fpath,
        )
        sym = f["symbol"]
        if sym in seen_symbols:
            raise ValidationError(f"duplicate symbol {sym!r}", fpath)
        seen_symbols.add(sym)
        if f.get("variadic"):
            raise ValidationError(f"variadic function {sym!r} is not supported", fpath)
        if f["owner"] not in names:
            raise ValidationError(f"owner {f['owner']!r} is not a declared component", f"{fpath}.owner")
        params = tuple(_load_param(p, f"{fpath}.params[{j}]") for j, p in enumerate(f["params"]))
        ret = None
        if f.get("return_type") is not None:
            ret = _load_type(f["return_type"], f"{fpath}.return_type")
        functions.append(
            FunctionSig(sym, params, ret, bool(f.get("is_callback", False)), f["owner"])
        )

    if not any(not f.is_callback for f in functions):
        raise ValidationError("interface declares no fuzzable functions", "functions")

    hints = []
    for i, h in enumerate(doc.get("memory_map_hints", [])):
        hpath = f"memory_map_hints[{i}]"
        _require_keys(h, {"name", "base", "length"}, {"name", "base"}, hpath)
        hints.append(MemoryHint(h["name"], int(h["base"]), int(h.get("length", 4096))))

    spec = InterfaceSpec(word_bits, direction, tuple(components), tuple(functions), tuple(hints))

    for f in spec.functions:
        for p in f.params:
            _check_descriptor(p.desc, word_bits, f"{f.symbol}.{p.name}", as_value=True)
        if f.return_type is not None:
            _check_descriptor(f.return_type, word_bits, f"{f.symbol}.return", as_value=True)

    return spec


def _emit_type(desc: TypeDescriptor) -> dict:
    out: dict = {"kind": desc.kind.value, "size_bits": desc.size_bits, "type_name": desc.type_name}
    if desc.kind is TypeKind.INTEGER:
        out["signed"] = desc.signed
    if desc.pointee is not None:
        out["pointee"] = _emit_type(desc.pointee)
    if desc.kind is TypeKind.AGGREGATE:
        out["fields"] = [
            {
                "name": f.name,
                "byte_offset": f.byte_offset,
                "type": _emit_type(f.desc),
                "role": f.role.value,
            }
            for f in desc.fields
        ]
    if desc.sig_params or desc.sig_return is not None:
        out["signature"] = {
            "params": [_emit_param(p) for p in desc.sig_params],
            "return_type": _emit_type(desc.sig_return) if desc.sig_return else None,
        }
    return out


def _emit_param(p: Param) -> dict:
    return {"name": p.name, "type": _emit_type(p.desc), "role": p.role.value}


def emit_interface_spec(spec: InterfaceSpec) -> str:
    """Serialize a spec back to its document form; inverse of the loader."""
    doc = {
        "word_size_bits": spec.word_size_bits,
        "direction": spec.direction.value,
        "components": [
            {"name": c.name, "role": c.role.value, "labels": sorted(c.code_range_labels)}
            for c in spec.components
        ],
        "functions": [
            {
                "symbol": f.symbol,
                "params": [_emit_param(p) for p in f.params],
                "return_type": _emit_type(f.return_type) if f.return_type else None,
                "is_callback": f.is_callback,
                "owner": f.owning_component,
            }
            for f in spec.functions
        ],
        "memory_map_hints": [
            {"name": h.name, "base": h.base, "length": h.length} for h in spec.memory_map_hints
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# callback discovery and shared-buffer inference


def _int_of(raw: bytes) -> int:
    return int.from_bytes(raw, "little")


def _walk_value(
    desc: TypeDescriptor, raw: bytes, depth: int, stats: "TraversalStats"
) -> Iterator[tuple[TypeDescriptor, bytes]]:
    """Yield (descriptor, value) for the value itself and, for by-value
    aggregates, every transitively reachable field slice.  Depth-capped to
    stay out of self-referential structures."""
    yield desc, raw
    if desc.kind is TypeKind.AGGREGATE:
        if depth >= MAX_AGGREGATE_DEPTH:
            stats.truncated += 1
            return
        for f in desc.fields:
            lo = f.byte_offset
            hi = lo + f.desc.size_bytes
            if hi <= len(raw):
                yield from _walk_value(f.desc, raw[lo:hi], depth + 1, stats)


@dataclass
class TraversalStats:
    truncated: int = 0


class CallbackRegistry:
    """Tracks which callback targets have been discovered this campaign.

    Keyed by target address: the same function observed twice registers one
    signature.  Declared callbacks are matched by type name; anything else
    gets a synthesized low-confidence signature.
    """

    def __init__(self, spec: InterfaceSpec):
        self._spec = spec
        self._by_addr: dict[int, FunctionSig] = {}
        self._declared = {f.symbol: f for f in spec.functions if f.is_callback}
        self.stats = TraversalStats()

    def sig_for(self, symbol: str) -> Optional[FunctionSig]:
        for sig in self._by_addr.values():
            if sig.symbol == symbol:
                return sig
        return self._declared.get(symbol)

    def registered(self) -> list[FunctionSig]:
        return list(self._by_addr.values())

    def detect(self, call_args: list[tuple[TypeDescriptor, bytes]]) -> list[FunctionSig]:
        """Scan call argument values for function references.

        Returns the newly registered signatures; already-known targets
        contribute nothing (idempotent).
        """
        new: list[FunctionSig] = []
        for desc, raw in call_args:
            for d, val in _walk_value(desc, raw, 0, self.stats):
                if d.kind is not TypeKind.CALLABLE:
                    continue
                addr = _int_of(val)
                if addr == 0 or addr in self._by_addr:
                    continue
                declared = self._declared.get(d.type_name)
                if declared is not None:
                    sig = declared
                elif d.sig_params or d.sig_return is not None:
                    sig = FunctionSig(
                        symbol=f"{d.type_name}@{addr:#x}",
                        params=d.sig_params,
                        return_type=d.sig_return,
                        is_callback=True,
                        owning_component=self._callback_owner(),
                    )
                else:
                    sig = FunctionSig(
                        symbol=f"{d.type_name}@{addr:#x}",
                        params=(),
                        return_type=None,
                        is_callback=True,
                        owning_component=self._callback_owner(),
                        low_confidence=True,
                    )
                self._by_addr[addr] = sig
                new.append(sig)
        return new

    def _callback_owner(self) -> str:
        # callbacks are implemented by the caller-side component: the victim
        # when the callee is malicious, the malicious component otherwise
        if self._spec.direction is Direction.SANDBOX:
            return next(c.name for c in self._spec.components if c.role is Role.VICTIM)
        return self._spec.malicious_component.name


def detect_callbacks(
    call_args: list[tuple[TypeDescriptor, bytes]],
    spec: InterfaceSpec,
    registry: Optional[CallbackRegistry] = None,
) -> list[FunctionSig]:
    """Stateless entry point; pass a registry to get idempotence across calls."""
    reg = registry if registry is not None else CallbackRegistry(spec)
    return reg.detect(call_args)


def infer_shared_buffers(
    call_args: list[tuple[TypeDescriptor, bytes]], spec: InterfaceSpec
) -> list[SharedRegion]:
    """One region per pointer argument or reachable pointer field.

    Regions behind text strings and raw buffers carry no length; the adapter
    resolves those at runtime.
    """
    stats = TraversalStats()
    regions: list[SharedRegion] = []
    seen: set[int] = set()
    for desc, raw in call_args:
        for d, val in _walk_value(desc, raw, 0, stats):
            if d.kind is not TypeKind.ADDRESS or d.pointee is None:
                continue
            base = _int_of(val)
            if base == 0 or base in seen:
                continue
            seen.add(base)
            if d.pointee.kind in (TypeKind.TEXT, TypeKind.RAW):
                length = None
            else:
                length = d.pointee.size_bytes
            regions.append(SharedRegion(base, length, d.pointee))
    return regions


class RegionTracker:
    """Assigns run-global region ids in discovery order.

    Both endpoints of a session run the same discovery walk, so ids agree
    without appearing on the wire beyond the snapshot lists.  A region is
    live from the entry of the call that carried its pointer until that
    call's exit; nested callback crossings see the regions of every active
    window plus their own.
    """

    def __init__(self, word_bits: int):
        self._word = word_bits
        self._next_id = 0
        self._windows: list[dict[int, tuple[int, TypeDescriptor, Optional[int]]]] = []
        # id -> (base, element descriptor, declared length or None)
        self.by_id: dict[int, tuple[int, TypeDescriptor, Optional[int]]] = {}

    def push_window(
        self,
        params: tuple[Param, ...],
        values: list[bytes],
        read_mem: Callable[[int, int, int], Optional[bytes]],
    ) -> dict[int, tuple[int, TypeDescriptor, Optional[int]]]:
        """Open a call window, discovering regions from its entry values.

        ``read_mem(base, size, region_id)`` supplies pointee bytes for nested
        pointer discovery: the adapter reads target memory, the monitor reads
        the snapshot it just received for that region id.  Both sides run the
        identical walk, which is what keeps region ids in agreement.
        Returns the newly discovered regions.
        """
        window: dict[int, tuple[int, TypeDescriptor, Optional[int]]] = {}
        stats = TraversalStats()
        live = self._live_bases()

        def register(base: int, element: TypeDescriptor, length: Optional[int]) -> int:
            rid = self._next_id
            self._next_id += 1
            entry = (base, element, length)
            window[rid] = entry
            self.by_id[rid] = entry
            live.add(base)
            return rid

        def visit(desc: TypeDescriptor, raw: bytes, depth: int) -> None:
            for d, val in _walk_value(desc, raw, depth, stats):
                if d.kind is not TypeKind.ADDRESS or d.pointee is None:
                    continue
                base = _int_of(val)
                if base == 0 or base in live:
                    continue
                pointee = d.pointee
                length = (
                    None
                    if pointee.kind in (TypeKind.TEXT, TypeKind.RAW)
                    else pointee.size_bytes
                )
                rid = register(base, pointee, length)
                if pointee.kind is TypeKind.AGGREGATE and depth < MAX_AGGREGATE_DEPTH:
                    content = read_mem(base, pointee.size_bytes, rid)
                    if content is not None and len(content) >= pointee.size_bytes:
                        visit(pointee, content, depth + 1)

        for p, raw in zip(params, values):
            visit(p.desc, raw, 0)
        self._windows.append(window)
        return window

    def pop_window(self) -> None:
        gone = self._windows.pop()
        for rid in gone:
            del self.by_id[rid]

    def live_regions(self) -> list[tuple[int, int, TypeDescriptor, Optional[int]]]:
        """All currently live regions as (id, base, element, length), id-ordered."""
        out = []
        for window in self._windows:
            for rid, (base, element, length) in window.items():
                out.append((rid, base, element, length))
        return sorted(out)

    def _live_bases(self) -> set[int]:
        return {base for w in self._windows for (base, _, _) in w.values()}
