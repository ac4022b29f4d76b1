"""Attacker scenario scripts.

A line-oriented step language for deterministic desk-scale attack replays.
One directive per line, `#` starts a comment, blank lines are skipped.
Payload tokens use the byte-literal syntax (quoted string with backslash
escapes, or hex:/b64: prefixed). Addresses accept decimal or 0x hex.

    send <bytes>                  attacker -> environment bytes
    expect <bytes>                environment -> attacker bytes
    write_file <path> <bytes>     create or overwrite a file in the env tree
    delete_file <path>
    exec <path> [arg ...]         spawn <path>; image bytes read from the tree
    connect_out <ip:port> <bytes> outbound connection from the environment
    trace                         begin an instrumentation event block
      insn <addr> <text>
      mem_read <addr> <size>
      mem_write <addr> <bytes>    mutates the traced process's memory
    end
    sleep <seconds>               advances the session clock

Steps run strictly in order and are deterministic given the same starting
environment state.
"""
from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from pathlib import Path

from .util import parse_bytes_literal


class ScriptError(Exception):
    pass


@dataclass(frozen=True)
class SendStep:
    data: bytes


@dataclass(frozen=True)
class ExpectStep:
    data: bytes


@dataclass(frozen=True)
class WriteFileStep:
    path: str
    data: bytes


@dataclass(frozen=True)
class DeleteFileStep:
    path: str


@dataclass(frozen=True)
class ExecStep:
    path: str
    args: tuple[str, ...] = ()

    @property
    def command_line(self) -> str:
        return " ".join((self.path,) + self.args)


@dataclass(frozen=True)
class ConnectOutStep:
    dest: str  # "ip:port"
    payload: bytes


@dataclass(frozen=True)
class TraceStepEvent:
    kind: str  # instruction | mem_read | mem_write
    address: int
    text: str = ""
    size: int = 0
    data: bytes = b""

    @property
    def detail(self) -> str:
        if self.kind == "instruction":
            return self.text
        if self.kind == "mem_read":
            return f"read {self.size} bytes @ {self.address:#x}"
        return f"write {len(self.data)} bytes @ {self.address:#x}"


@dataclass(frozen=True)
class TraceStep:
    events: tuple[TraceStepEvent, ...]

    @property
    def mem_write_count(self) -> int:
        return sum(1 for e in self.events if e.kind == "mem_write")


@dataclass(frozen=True)
class SleepStep:
    duration: float


Step = (SendStep | ExpectStep | WriteFileStep | DeleteFileStep | ExecStep
        | ConnectOutStep | TraceStep | SleepStep)


@dataclass(frozen=True)
class AttackScript:
    steps: tuple[Step, ...] = ()

    @property
    def exchange_size(self) -> int:
        """Total relayed bytes the script implies (send + expect lengths)."""
        return sum(len(s.data) for s in self.steps
                   if isinstance(s, (SendStep, ExpectStep)))


def _addr(token: str, lineno: int) -> int:
    try:
        return int(token, 0)
    except ValueError:
        raise ScriptError(f"line {lineno}: bad address {token!r}") from None


def _need(args: list[str], count: int, lineno: int, directive: str) -> None:
    if len(args) < count:
        raise ScriptError(f"line {lineno}: {directive} needs {count} argument(s)")


def parse_script(text: str) -> AttackScript:
    steps: list[Step] = []
    trace_events: list[TraceStepEvent] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        try:
            tokens = shlex.split(raw, comments=True, posix=True)
        except ValueError as exc:
            raise ScriptError(f"line {lineno}: {exc}") from None
        if not tokens:
            continue
        directive, args = tokens[0], tokens[1:]

        if trace_events is not None:
            if directive == "end":
                steps.append(TraceStep(tuple(trace_events)))
                trace_events = None
            elif directive == "insn":
                _need(args, 2, lineno, "insn")
                trace_events.append(TraceStepEvent(
                    "instruction", _addr(args[0], lineno),
                    text=" ".join(args[1:])))
            elif directive == "mem_read":
                _need(args, 2, lineno, "mem_read")
                trace_events.append(TraceStepEvent(
                    "mem_read", _addr(args[0], lineno), size=int(args[1])))
            elif directive == "mem_write":
                _need(args, 2, lineno, "mem_write")
                trace_events.append(TraceStepEvent(
                    "mem_write", _addr(args[0], lineno),
                    data=parse_bytes_literal(args[1])))
            else:
                raise ScriptError(
                    f"line {lineno}: {directive!r} not allowed inside trace block")
            continue

        if directive == "send":
            _need(args, 1, lineno, "send")
            steps.append(SendStep(parse_bytes_literal(args[0])))
        elif directive == "expect":
            _need(args, 1, lineno, "expect")
            steps.append(ExpectStep(parse_bytes_literal(args[0])))
        elif directive == "write_file":
            _need(args, 2, lineno, "write_file")
            steps.append(WriteFileStep(args[0], parse_bytes_literal(args[1])))
        elif directive == "delete_file":
            _need(args, 1, lineno, "delete_file")
            steps.append(DeleteFileStep(args[0]))
        elif directive == "exec":
            _need(args, 1, lineno, "exec")
            steps.append(ExecStep(args[0], tuple(args[1:])))
        elif directive == "connect_out":
            _need(args, 2, lineno, "connect_out")
            steps.append(ConnectOutStep(args[0], parse_bytes_literal(args[1])))
        elif directive == "trace":
            trace_events = []
        elif directive == "sleep":
            _need(args, 1, lineno, "sleep")
            steps.append(SleepStep(float(args[0])))
        else:
            raise ScriptError(f"line {lineno}: unknown directive {directive!r}")

    if trace_events is not None:
        raise ScriptError("unterminated trace block (missing 'end')")
    return AttackScript(tuple(steps))


def load_script(path: Path | str) -> AttackScript:
    return parse_script(Path(path).read_text(encoding="utf-8"))
