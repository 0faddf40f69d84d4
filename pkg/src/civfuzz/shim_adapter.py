"""Native-target adapter: spawns the workload under a preloaded shim and
speaks the wire protocol over a pair of pipes.

The shim library is injected with the dynamic linker's preload mechanism;
the two pipe ends reach it through CIVFUZZ_IN_FD / CIVFUZZ_OUT_FD.  A target
that dies without sending a crash report gets a second chance via its
sanitizer output on stderr; failing that, a last-resort record with empty
frames (unattributable).  A clean exit without WorkloadDone is treated the
same as WorkloadDone.
"""

from __future__ import annotations

import os
import re
import select
import shlex
import struct
import subprocess
from typing import Optional

from .errors import AdapterLaunchError, FrameError, ProtocolError
from .iface import InterfaceSpec
from .wire import (
    AccessKind,
    Command,
    CrashPayload,
    Event,
    EventKind,
    PROTOCOL_VERSION,
    StackFrame,
    decode,
    encode,
)

_SAN_ERROR_RE = re.compile(
    r"==\d+==\s*ERROR: \w+Sanitizer:\s+(?P<what>[\w-]+)"
    r"(?: on (?:unknown )?address (?P<addr>0x[0-9a-f]+))?"
)
_SAN_ACCESS_RE = re.compile(r"\b(READ|WRITE)\b (?:of size \d+|memory access)")
# "#0 0x4f2a in func /src/f.c:18"  |  "#1 0x7f.. in func (/lib/libc.so.6+0x24083)"
_SAN_FRAME_RE = re.compile(
    r"^\s*#\d+\s+0x[0-9a-f]+\s+in\s+(?P<sym>[\w:~<>@.]+)\s+"
    r"(?:\((?P<module>[^)+]+)\+0x(?P<off>[0-9a-f]+)\)|(?P<src>\S+?):(?P<line>\d+))",
    re.MULTILINE,
)

_SAN_ALLOC_KINDS = ("free", "double-free", "bad-free", "allocation-size-too-big", "alloc-dealloc")


def parse_sanitizer_report(text: str) -> Optional[CrashPayload]:
    """Map a sanitizer failure log onto a crash payload: access kind, faulty
    address, best-effort frames."""
    match = _SAN_ERROR_RE.search(text)
    if match is None:
        return None
    line_end = text.find("\n", match.start())
    header = text[match.start() : line_end if line_end >= 0 else len(text)]
    addr = int(match.group("addr"), 16) if match.group("addr") else None
    if any(tag in header for tag in _SAN_ALLOC_KINDS):
        kind = AccessKind.ALLOC_MISUSE
    else:
        access = _SAN_ACCESS_RE.search(text)
        kind = AccessKind.WRITE if access and access.group(1) == "WRITE" else AccessKind.READ
        if addr is not None and addr < 4096:
            kind = AccessKind.NULL_DEREF
    frames = []
    for m in _SAN_FRAME_RE.finditer(text):
        if m.group("module"):
            label = f"{os.path.basename(m.group('module'))}:{m.group('sym')}"
            offset = int(m.group("off"), 16)
        else:
            label = m.group("sym")
            offset = int(m.group("line"))
        frames.append(StackFrame(label, offset))
    return CrashPayload(kind, addr, tuple(frames))

ENV_IN_FD = "CIVFUZZ_IN_FD"
ENV_OUT_FD = "CIVFUZZ_OUT_FD"
ENV_RUN_ID = "CIVFUZZ_RUN_ID"
ENV_PRELOAD = "LD_PRELOAD"


class ShimSession:
    def __init__(
        self,
        command: list[str],
        shim_path: Optional[str],
        run_id: int,
        timeout: float,
        extra_env: Optional[dict] = None,
    ):
        self._timeout = timeout
        self.run_id = run_id
        # monitor reads events from ev_r; shim writes to ev_w (its OUT fd)
        ev_r, ev_w = os.pipe()
        cmd_r, cmd_w = os.pipe()
        env = dict(os.environ)
        env[ENV_IN_FD] = str(cmd_r)
        env[ENV_OUT_FD] = str(ev_w)
        env[ENV_RUN_ID] = str(run_id)
        if shim_path:
            prior = env.get(ENV_PRELOAD)
            env[ENV_PRELOAD] = f"{shim_path}:{prior}" if prior else shim_path
        if extra_env:
            env.update(extra_env)
        try:
            self._proc = subprocess.Popen(
                command,
                env=env,
                pass_fds=(cmd_r, ev_w),
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
            )
        except OSError as e:
            os.close(ev_r)
            os.close(ev_w)
            os.close(cmd_r)
            os.close(cmd_w)
            raise AdapterLaunchError(f"cannot start {command[0]!r}: {e}") from e
        os.close(ev_w)
        os.close(cmd_r)
        self._ev_fd = ev_r
        self._cmd_fd = cmd_w
        self._buf = b""
        self._finished = False
        self.stdout: bytes = b""

    # -- framing ---------------------------------------------------------------

    def _read_exact(self, n: int) -> Optional[bytes]:
        while len(self._buf) < n:
            ready, _, _ = select.select([self._ev_fd], [], [], self._timeout)
            if not ready:
                raise TimeoutError(f"no frame within {self._timeout}s")
            chunk = os.read(self._ev_fd, 65536)
            if not chunk:
                return None  # EOF: target is gone
            self._buf += chunk
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def recv_event(self) -> Event:
        if self._finished:
            raise ProtocolError("session is over")
        header = self._read_exact(4)
        if header is None:
            return self._eof_event()
        (length,) = struct.unpack("<I", header)
        payload = self._read_exact(length)
        if payload is None:
            return self._eof_event()
        msg = decode(header + payload)
        if not isinstance(msg, Event):
            raise FrameError("adapter sent a command")
        return msg

    def _eof_event(self) -> Event:
        """Pipe closed: distinguish clean exit from an uncaught death."""
        self._finished = True
        self.stdout = self._drain_stdout()
        stderr = self._drain_stderr()
        code = self._proc.wait()
        if code == 0:
            return Event(EventKind.WORKLOAD_DONE)
        # a sanitizer abort never reaches the shim's signal path; its log is
        # the best remaining source of frames
        crash = parse_sanitizer_report(stderr.decode("utf-8", "replace"))
        if crash is None:
            crash = CrashPayload(
                AccessKind.NULL_DEREF if code in (-11, 139) else AccessKind.READ, None, ()
            )
        return Event(EventKind.CRASH_REPORT, crash=crash)

    def send_command(self, cmd: Command) -> None:
        if self._finished:
            return
        try:
            os.write(self._cmd_fd, encode(cmd))
        except (BrokenPipeError, OSError):
            pass

    def _drain_stdout(self) -> bytes:
        if self._proc.stdout is None:
            return b""
        try:
            return self._proc.stdout.read() or b""
        except Exception:
            return b""

    def _drain_stderr(self) -> bytes:
        if self._proc.stderr is None:
            return b""
        try:
            return self._proc.stderr.read() or b""
        except Exception:
            return b""

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.kill()
        self.stdout = self.stdout or self._drain_stdout()
        self._proc.wait()
        for fd in (self._ev_fd, self._cmd_fd):
            try:
                os.close(fd)
            except OSError:
                pass
        self._finished = True


class ShimAdapter:
    kind = "shim"
    callers = 1

    def __init__(
        self,
        spec: InterfaceSpec,
        workload: str,
        shim_path: Optional[str] = None,
        timeout: float = 10.0,
        extra_env: Optional[dict] = None,
    ):
        self.spec = spec
        self.command = shlex.split(workload)
        self.shim_path = shim_path or os.environ.get("CIVFUZZ_SHIM_LIB")
        self.timeout = timeout
        self.extra_env = extra_env

    def launch(self, run_id: int, run_seed: str) -> ShimSession:
        return ShimSession(self.command, self.shim_path, run_id, self.timeout, self.extra_env)
