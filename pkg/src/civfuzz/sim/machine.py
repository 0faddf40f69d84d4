"""Deterministic two-compartment runtime driving the wire protocol in-process.

The session runs the scenario's micro-op scripts as a generator: every
crossing yields an encoded event frame and waits for the encoded command,
so the byte codec is exercised end to end even though no pipe is involved.
Faults from the memory model become crash reports with synthetic stacks
built from the live script nesting.
"""

from __future__ import annotations

import random
from typing import Generator, Optional

from ..errors import ProtocolError, ScenarioError
from ..iface import RegionTracker
from ..wire import (
    AccessKind,
    Command,
    CommandKind,
    CrashPayload,
    Event,
    EventKind,
    Locus,
    LocusKind,
    PROTOCOL_VERSION,
    StackFrame,
    arg,
    callback_arg,
    callback_return,
    decode,
    encode,
    return_value,
)
from .memory import MemoryFault, SimMemory
from .scenario import Scenario, Script, WorkloadCall

TEXT_SNAPSHOT_CAP = 256
DEFAULT_RAW_LEN = 64

# process-wide launch counter feeding scenarios that opt into nondeterminism
_LAUNCH_COUNTER = 0


def reset_launch_counter(value: int = 0) -> None:
    global _LAUNCH_COUNTER
    _LAUNCH_COUNTER = value


class _Aborted(Exception):
    pass


def workload_order(scenario: Scenario, n: int, seed: str) -> list[WorkloadCall]:
    """The scripted call sequence, repeated n times.

    Scenarios with jitter enabled shuffle each repetition from the run seed,
    standing in for external request interleaving.
    """
    if n < 1:
        raise ScenarioError(f"workload repetitions must be >= 1, got {n}")
    order: list[WorkloadCall] = []
    for i in range(n):
        chunk = list(scenario.workload_calls)
        if scenario.workload_jitter:
            random.Random(f"{seed}:wl:{i}").shuffle(chunk)
        order.extend(chunk)
    return order


def _le(value: int, size: int) -> bytes:
    return (value % (1 << (8 * size))).to_bytes(size, "little")


def _fit(raw: bytes, size: int) -> bytes:
    if len(raw) == size:
        return raw
    if len(raw) > size:
        return raw[:size]
    return raw + b"\x00" * (size - len(raw))


class SimSession:
    """One run of the simulated target; monitor-facing session interface."""

    def __init__(
        self,
        scenario: Scenario,
        run_id: int,
        run_seed: str,
        workload_n: int = 1,
        max_crossings: int = 10_000,
    ):
        global _LAUNCH_COUNTER
        self.scenario = scenario
        self.run_id = run_id
        self.run_seed = run_seed
        self.workload_n = workload_n
        self.max_crossings = max_crossings
        self._nonce = 0
        if scenario.nondeterminism:
            self._nonce = _LAUNCH_COUNTER
            _LAUNCH_COUNTER += 1

        self.memory = self._build_memory()
        self.tracker = RegionTracker(scenario.spec.word_size_bits)
        self._frames: list[list] = []  # [label, op_index]
        self._crossing = 0
        self._last_snaps: dict[int, int] = {}
        self._gen: Optional[Generator] = self._main()
        self._pending: Optional[bytes] = None
        self.closed = False

    # -- session interface --------------------------------------------------

    def recv_event(self) -> Event:
        if self._gen is None:
            raise ProtocolError("session is over")
        if self._pending is None:
            try:
                self._pending = next(self._gen)
            except StopIteration:
                self._gen = None
                raise ProtocolError("target finished without a terminal event")
        frame = self._pending
        self._pending = None
        msg = decode(frame)
        assert isinstance(msg, Event)
        return msg

    def send_command(self, cmd: Command) -> None:
        if self._gen is None:
            raise ProtocolError("session is over")
        try:
            self._pending = self._gen.send(encode(cmd))
        except StopIteration:
            self._gen = None
            self._pending = None

    def close(self) -> None:
        self.closed = True
        if self._gen is not None:
            self._gen.close()
            self._gen = None

    # -- target runtime -------------------------------------------------------

    def _build_memory(self) -> SimMemory:
        mem = SimMemory(self.scenario.spec.word_size_bits, self.scenario.page_size)
        for r in self.scenario.regions:
            mem.add_region(r["name"], r["base"], r["length"], r.get("perms", "rw"), r.get("tag", "heap"))
        if self.scenario.alloc_region:
            mem.set_alloc_region(self.scenario.alloc_region, self.scenario.alloc_cap)
        for addr, raw in self.scenario.init_writes:
            if not mem.write_nofault(addr, raw):
                raise ScenarioError(f"init write at {addr:#x} lands outside writable memory")
        return mem

    def _main(self) -> Generator[bytes, bytes, None]:
        spec = self.scenario.spec
        yield encode(
            Event(
                EventKind.READY,
                run_id=self.run_id,
                protocol_version=PROTOCOL_VERSION,
                word_size_bits=spec.word_size_bits,
            )
        )
        try:
            setup = self.scenario.scripts.get(self.scenario.setup_script)
            if setup is not None:
                yield from self._run_script(setup, {}, None)
            order = workload_order(self.scenario, self.workload_n, self.run_seed)
            for call in order:
                if self._crossing >= self.max_crossings:
                    break
                yield from self._do_call(call)
        except _Aborted:
            return
        except MemoryFault as fault:
            yield from self._report_crash(fault)
            return
        done = Event(EventKind.WORKLOAD_DONE, crossing_index=self._crossing)
        yield encode(done)  # answered by Terminate

    def _report_crash(self, fault: MemoryFault) -> Generator[bytes, bytes, None]:
        kind = fault.kind
        if (
            kind in (AccessKind.READ, AccessKind.WRITE, AccessKind.EXEC)
            and fault.address < self.memory.page_size
        ):
            kind = AccessKind.NULL_DEREF
        frames = tuple(StackFrame(label, idx) for label, idx in reversed(self._frames))
        payload = CrashPayload(kind, fault.address, frames)
        event = Event(EventKind.CRASH_REPORT, crossing_index=self._crossing, crash=payload)
        yield encode(event)  # answered by Terminate

    def _emit_crossing(
        self, kind: EventKind, symbol: str, values: list[tuple[Locus, bytes]]
    ) -> Generator[bytes, bytes, Command]:
        snaps = self._snapshots()
        self._last_snaps = {rid: len(raw) for rid, raw in snaps}
        event = Event(
            kind,
            crossing_index=self._crossing,
            symbol=symbol,
            values=tuple(values),
            snapshots=tuple(snaps),
        )
        self._crossing += 1
        raw_cmd = yield encode(event)
        cmd = decode(raw_cmd)
        if not isinstance(cmd, Command):
            raise ProtocolError("expected a command")
        if cmd.kind is CommandKind.TERMINATE:
            raise _Aborted()
        if cmd.kind is CommandKind.SKIP_CALL and kind is not EventKind.CALL_ENTRY:
            raise ProtocolError("SkipCall is only legal at CallEntry")
        return cmd

    def _snapshots(self) -> list[tuple[int, bytes]]:
        out = []
        for rid, base, element, length in self.tracker.live_regions():
            n = length if length is not None else self._resolve_len(base, element)
            raw = self.memory.read_nofault(base, n) if n > 0 else None
            out.append((rid, raw if raw is not None else b""))
        return out

    def _resolve_len(self, base: int, element) -> int:
        region = next(
            (r for r in self.memory.regions if r.contains(base) and r.tag != "unmapped-probe"),
            None,
        )
        if region is None:
            return 0
        room = region.end - base
        if element.kind.name == "TEXT":
            cap = min(TEXT_SNAPSHOT_CAP, room)
            raw = self.memory.read_nofault(base, cap) or b""
            nul = raw.find(0)
            return (nul + 1) if nul >= 0 else cap
        declared = self.scenario.buffer_lengths.get(base, DEFAULT_RAW_LEN)
        return min(declared, room)

    def _apply_directives(
        self,
        cmd: Command,
        values: list[bytes],
        value_kind: LocusKind,
        ret: Optional[bytes],
    ) -> Optional[bytes]:
        if cmd.kind is not CommandKind.ALTER:
            return ret
        for locus, data in cmd.directives:
            if locus.kind is value_kind and locus.kind in (LocusKind.ARG, LocusKind.CALLBACK_ARG):
                if locus.index >= len(values):
                    raise ProtocolError(f"directive for missing argument {locus.index}")
                values[locus.index] = _fit(data, len(values[locus.index]))
            elif locus.kind in (LocusKind.RETURN_VALUE, LocusKind.CALLBACK_RETURN):
                if ret is None:
                    raise ProtocolError("directive for a value-less return")
                ret = _fit(data, len(ret))
            elif locus.kind is LocusKind.SHARED_BYTE:
                if locus.region not in self._last_snaps:
                    raise ProtocolError(f"directive for region {locus.region} not in event")
                if locus.offset + len(data) > self._last_snaps[locus.region]:
                    raise ProtocolError("shared directive outside snapshot bounds")
                base, _, _ = self.tracker.by_id[locus.region]
                self.memory.write_nofault(base + locus.offset, data)
            else:
                raise ProtocolError(f"directive locus {locus} not present in event")
        return ret

    def _do_call(self, call: WorkloadCall) -> Generator[bytes, bytes, None]:
        spec = self.scenario.spec
        sig = spec.function(call.symbol)
        if len(call.args) != len(sig.params):
            raise ScenarioError(f"workload passes {len(call.args)} args to {call.symbol}")
        values = [
            _le(self._eval(expr, {}, {}, None), p.desc.size_bytes)
            for expr, p in zip(call.args, sig.params)
        ]

        self._frames.append([call.caller_frame, call.site])
        self.tracker.push_window(
            sig.params, values, lambda base, n, rid: self.memory.read_nofault(base, n)
        )
        entry_vals = [(arg(i), v) for i, v in enumerate(values)]
        cmd = yield from self._emit_crossing(EventKind.CALL_ENTRY, call.symbol, entry_vals)

        ret_width = sig.return_type.size_bytes if sig.return_type else 0
        ret: Optional[bytes] = b"\x00" * ret_width
        if cmd.kind is CommandKind.SKIP_CALL:
            # the call never happens: no body, no exit crossing; the caller
            # sees the synthetic return directly
            ret = _fit(cmd.synthetic_return, ret_width)
            self.tracker.pop_window()
        else:
            values = list(values)
            self._apply_directives(cmd, values, LocusKind.ARG, None)
            body = self.scenario.body_script(call.symbol)
            if body is not None:
                out = yield from self._run_script(
                    body, dict(zip(body.params, values)), None
                )
                if out is not None:
                    ret = _fit(out, ret_width)
            exit_vals = [(return_value(), ret)] if sig.return_type else []
            cmd = yield from self._emit_crossing(EventKind.CALL_EXIT, call.symbol, exit_vals)
            ret = self._apply_directives(
                cmd, [], LocusKind.RETURN_VALUE, ret if sig.return_type else None
            )
            self.tracker.pop_window()

        after = self.scenario.after_call_script(call.symbol)
        if after is not None:
            yield from self._run_script(after, {}, ret)
        self._frames.pop()

    def _do_callback(self, name: str, values: list[bytes]) -> Generator[bytes, bytes, bytes]:
        spec = self.scenario.spec
        sig = spec.function(name)
        self.tracker.push_window(
            sig.params, values, lambda base, n, rid: self.memory.read_nofault(base, n)
        )
        entry_vals = [(callback_arg(i), v) for i, v in enumerate(values)]
        cmd = yield from self._emit_crossing(EventKind.CALLBACK_ENTRY, name, entry_vals)
        values = list(values)
        self._apply_directives(cmd, values, LocusKind.CALLBACK_ARG, None)

        script = self.scenario.scripts[name]
        ret_width = sig.return_type.size_bytes if sig.return_type else 0
        out = yield from self._run_script(script, dict(zip(script.params, values)), None)
        ret = _fit(out or b"", ret_width)

        exit_vals = [(callback_return(), ret)] if sig.return_type else []
        cmd = yield from self._emit_crossing(EventKind.CALLBACK_EXIT, name, exit_vals)
        ret = self._apply_directives(
            cmd, [], LocusKind.CALLBACK_RETURN, ret if sig.return_type else None
        )
        self.tracker.pop_window()
        return ret or b""

    # -- interpreter -----------------------------------------------------------

    def _eval(self, expr, args: dict, locals_: dict, ret: Optional[bytes]) -> int:
        if "const" in expr:
            return int(expr["const"])
        if "arg" in expr:
            raw = args[expr["arg"]]
            return int.from_bytes(raw, "little")
        if "local" in expr:
            return locals_[expr["local"]]
        if "ret" in expr:
            return int.from_bytes(ret or b"", "little")
        if "add" in expr:
            a, b = expr["add"]
            word = 1 << self.scenario.spec.word_size_bits
            return (self._eval(a, args, locals_, ret) + self._eval(b, args, locals_, ret)) % word
        if "mask" in expr:
            e, m = expr["mask"]
            return self._eval(e, args, locals_, ret) & int(m)
        raise ScenarioError(f"bad expression {expr!r}")

    def _cond(self, cond, args, locals_, ret) -> bool:
        if cond == "always":
            return True
        ((op, operands),) = cond.items()
        a = self._eval(operands[0], args, locals_, ret)
        b = self._eval(operands[1], args, locals_, ret)
        return {"eq": a == b, "ne": a != b, "lt": a < b, "gt": a > b}[op]

    def _run_script(
        self, script: Script, args: dict, ret_in: Optional[bytes]
    ) -> Generator[bytes, bytes, Optional[bytes]]:
        frame = [script.label, 0]
        self._frames.append(frame)
        locals_: dict[str, int] = {}
        ret_out: Optional[bytes] = None
        pc = 0
        ops = script.ops
        while pc < len(ops):
            frame[1] = pc
            op = ops[pc]
            name = op["op"]
            skip = 0
            if name == "read":
                raw = self.memory.read(self._eval(op["addr"], args, locals_, ret_in), op["size"])
                if "dst" in op:
                    locals_[op["dst"]] = int.from_bytes(raw, "little")
            elif name == "write":
                self.memory.write(
                    self._eval(op["addr"], args, locals_, ret_in),
                    _le(self._eval(op["value"], args, locals_, ret_in), op["size"]),
                )
            elif name == "copy":
                self.memory.copy(
                    self._eval(op["dst"], args, locals_, ret_in),
                    self._eval(op["src"], args, locals_, ret_in),
                    self._eval(op["len"], args, locals_, ret_in),
                )
            elif name == "branch":
                if self._cond(op["cond"], args, locals_, ret_in):
                    skip = op["skip"]
            elif name == "nondet_branch":
                if self._nonce % 2 == 1:
                    skip = op["skip"]
            elif name == "call_cb":
                target = self._eval(op["target"], args, locals_, ret_in)
                cb_name = self.scenario.callback_table.get(target)
                if cb_name is None:
                    self.memory.check_exec(target)
                    if "dst" in op:
                        locals_[op["dst"]] = 0
                else:
                    sig = self.scenario.spec.function(cb_name)
                    cb_vals = [
                        _le(self._eval(e, args, locals_, ret_in), p.desc.size_bytes)
                        for e, p in zip(op.get("args", []), sig.params)
                    ]
                    out = yield from self._do_callback(cb_name, cb_vals)
                    if "dst" in op:
                        locals_[op["dst"]] = int.from_bytes(out, "little")
            elif name == "invoke":
                callee = self.scenario.scripts[op["script"]]
                vals = [
                    _le(self._eval(e, args, locals_, ret_in), 8) for e in op.get("args", [])
                ]
                yield from self._run_script(callee, dict(zip(callee.params, vals)), None)
            elif name == "lock_acquire":
                self.memory.lock_acquire(self._eval(op["addr"], args, locals_, ret_in))
            elif name == "lock_release":
                self.memory.lock_release(self._eval(op["addr"], args, locals_, ret_in))
            elif name == "alloc":
                addr = self.memory.alloc(self._eval(op["size"], args, locals_, ret_in))
                locals_[op["dst"]] = addr
            elif name == "free":
                self.memory.free(self._eval(op["addr"], args, locals_, ret_in))
            elif name == "exec":
                self.memory.check_exec(self._eval(op["addr"], args, locals_, ret_in))
            elif name == "ret":
                ret_out = _le(self._eval(op["value"], args, locals_, ret_in), op.get("size", 8))
            pc += 1 + skip
        self._frames.pop()
        return ret_out


class SimAdapter:
    """Launches fresh deterministic sessions over one scenario."""

    kind = "sim"

    def __init__(self, scenario: Scenario, workload_n: int = 1, max_crossings: int = 10_000):
        self.scenario = scenario
        self.workload_n = workload_n
        self.max_crossings = max_crossings

    @property
    def callers(self) -> int:
        return self.scenario.callers

    @property
    def spec(self):
        return self.scenario.spec

    def launch(self, run_id: int, run_seed: str) -> SimSession:
        return SimSession(
            self.scenario,
            run_id,
            run_seed,
            workload_n=self.workload_n,
            max_crossings=self.max_crossings,
        )
