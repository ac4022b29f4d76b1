"""Session environments: templates, warm pool, and environment drivers.

An EnvironmentTemplate freezes a baseline filesystem tree plus the set of
paths whose binaries are trusted (their digests become the template's exec
whitelist).  A SandboxManager keeps a warm pool of provisioned environments
per template so an inbound connection can be assigned one immediately, and
replenishes the pool in the background after every assignment.

Environment runtimes are pluggable behind EnvironmentDriver.  The in-process
ScriptedDriver keeps each environment as an in-memory tree and models spawned
programs as SimProcess objects (registers, memory regions, descriptors) so
instrumentation and checkpointing have real state to capture.  Deployments
with an external runtime implement the same driver interface instead;
StubExternalDriver marks that seam.

Template directory layout::

    <dir>/manifest.txt     "id <template_id>" line + one "image <path>" line
                           per trusted baseline binary; '#' comments allowed
    <dir>/root/...         the baseline filesystem tree
"""
from __future__ import annotations

import itertools
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

from .checkpointd import Descriptor, MemoryRegion, ProcessState
from .fsvault import normalize_path
from .script import TraceStepEvent
from .tracer import WhitelistSet, build_whitelist
from .util import new_id

log = logging.getLogger("trapline.sandbox")

ENV_STATES = ("warm", "assigned", "destroyed")

CODE_BASE = 0x400000
STACK_BASE = 0x7FFE0000
STACK_SIZE = 4096


class SandboxError(Exception):
    pass


class PoolEmpty(SandboxError):
    """No warm environment is available for the requested template."""


@dataclass(frozen=True)
class EnvironmentTemplate:
    """Immutable recipe for session environments.

    baseline_tree maps normalized paths to file contents; baseline_images
    names the subset of those paths whose contents are trusted binaries.
    """
    template_id: str
    baseline_tree: Mapping[str, bytes]
    baseline_images: frozenset[str]

    def __post_init__(self) -> None:
        tree = {normalize_path(p): bytes(d) for p, d in self.baseline_tree.items()}
        images = frozenset(normalize_path(p) for p in self.baseline_images)
        missing = images - tree.keys()
        if missing:
            raise SandboxError(
                f"template {self.template_id!r}: baseline images not in tree: "
                f"{sorted(missing)}")
        object.__setattr__(self, "baseline_tree", tree)
        object.__setattr__(self, "baseline_images", images)

    def image_bytes(self) -> list[bytes]:
        return [self.baseline_tree[p] for p in sorted(self.baseline_images)]


def load_template_dir(path: Path | str) -> EnvironmentTemplate:
    """Read a template from disk (manifest.txt + root/ tree)."""
    base = Path(path)
    manifest = base / "manifest.txt"
    root = base / "root"
    if not manifest.is_file():
        raise SandboxError(f"no manifest.txt under {base}")
    template_id = ""
    images: set[str] = set()
    for lineno, raw in enumerate(manifest.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise SandboxError(f"{manifest}:{lineno}: expected 'key value'")
        key, value = parts
        if key == "id":
            template_id = value.strip()
        elif key == "image":
            images.add(value.strip())
        else:
            raise SandboxError(f"{manifest}:{lineno}: unknown key {key!r}")
    if not template_id:
        raise SandboxError(f"{manifest}: missing 'id' line")
    tree: dict[str, bytes] = {}
    if root.is_dir():
        for file in sorted(root.rglob("*")):
            if file.is_file():
                tree[file.relative_to(root).as_posix()] = file.read_bytes()
    return EnvironmentTemplate(template_id, tree, frozenset(images))


class Channel:
    """One service conversation inside an environment.

    deliver() feeds attacker bytes in and returns whatever the environment
    answers immediately: a queued scripted reply if one is pending, the echo
    of the input when echo mode is on, or nothing.
    """

    def __init__(self, env_id: str, service: str, banner: bytes = b"",
                 echo: bool = False):
        self.channel_id = new_id("chan")
        self.env_id = env_id
        self.service = service
        self.banner = bytes(banner)
        self.echo = echo
        self.closed = False
        self.inbound_bytes = 0
        self.outbound_bytes = 0
        self._banner_sent = False
        self._replies: deque[bytes] = deque()
        self._lock = threading.Lock()

    def open_banner(self) -> bytes:
        with self._lock:
            if self._banner_sent or not self.banner:
                return b""
            self._banner_sent = True
            self.outbound_bytes += len(self.banner)
            return self.banner

    def queue_reply(self, data: bytes) -> None:
        with self._lock:
            self._replies.append(bytes(data))

    def deliver(self, data: bytes) -> bytes:
        with self._lock:
            if self.closed:
                raise SandboxError(f"channel {self.channel_id} is closed")
            self.inbound_bytes += len(data)
            if self._replies:
                reply = self._replies.popleft()
            elif self.echo:
                reply = bytes(data)
            else:
                reply = b""
            self.outbound_bytes += len(reply)
            return reply

    def note_reply(self, data: bytes) -> None:
        """Record environment-initiated output that bypassed deliver()."""
        with self._lock:
            self.outbound_bytes += len(data)

    def close(self) -> None:
        with self._lock:
            self.closed = True
            self._replies.clear()


class _Region:
    __slots__ = ("base", "perms", "buf")

    def __init__(self, base: int, perms: str, buf: bytearray):
        self.base = base
        self.perms = perms
        self.buf = buf

    @property
    def size(self) -> int:
        return len(self.buf)

    def covers(self, address: int, length: int) -> bool:
        return self.base <= address and address + length <= self.base + self.size


class SimProcess:
    """In-memory model of a spawned program.

    Carries just enough machine state (registers, memory regions, open
    descriptors) for instrumentation to walk and for checkpoints to dump.
    Memory writes mutate the region buffers in place, so a snapshot taken
    after a write observes the written bytes.
    """

    def __init__(self, pid: int, env_id: str, path: str, image: bytes):
        self.pid = pid
        self.env_id = env_id
        self.path = path
        self.image = bytes(image)
        self.alive = True
        self._lock = threading.Lock()
        self.regions: list[_Region] = [
            _Region(CODE_BASE, "r-x", bytearray(self.image)),
            _Region(STACK_BASE, "rw-", bytearray(STACK_SIZE)),
        ]
        self.registers: dict[str, int] = {
            "rip": CODE_BASE,
            "rsp": STACK_BASE + STACK_SIZE - 16,
            "rbp": STACK_BASE + STACK_SIZE - 16,
            "rax": 0, "rbx": 0, "rcx": 0, "rdx": 0, "rsi": 0, "rdi": 0,
        }
        self.descriptors: list[Descriptor] = [
            Descriptor(0, "tty", "console"),
            Descriptor(1, "tty", "console"),
            Descriptor(2, "tty", "console"),
        ]

    def note_instruction(self, address: int) -> None:
        with self._lock:
            self.registers["rip"] = address

    def apply_mem_write(self, address: int, data: bytes) -> None:
        """Land a write in process memory, growing the map if needed.

        The write must fit entirely inside one existing region or touch none
        of them; straddling a region boundary is rejected.
        """
        with self._lock:
            if not self.alive:
                raise SandboxError(f"process {self.pid} is not running")
            for region in self.regions:
                if region.covers(address, len(data)):
                    offset = address - region.base
                    region.buf[offset:offset + len(data)] = data
                    return
            for region in self.regions:
                if (address < region.base + region.size
                        and region.base < address + len(data)):
                    raise SandboxError(
                        f"write {address:#x}+{len(data)} straddles region "
                        f"{region.base:#x}+{region.size}")
            self.regions.append(_Region(address, "rw-", bytearray(data)))

    def read_memory(self, address: int, length: int) -> bytes:
        with self._lock:
            for region in self.regions:
                if region.covers(address, length):
                    offset = address - region.base
                    return bytes(region.buf[offset:offset + length])
        raise SandboxError(f"no region maps {address:#x}+{length}")

    def add_descriptor(self, kind: str, target: str) -> Descriptor:
        with self._lock:
            number = max(d.number for d in self.descriptors) + 1
            desc = Descriptor(number, kind, target)
            self.descriptors.append(desc)
            return desc

    def state(self) -> ProcessState:
        with self._lock:
            return ProcessState(
                registers=dict(self.registers),
                regions=tuple(
                    MemoryRegion(r.base, r.size, r.perms, bytes(r.buf))
                    for r in self.regions),
                descriptors=tuple(self.descriptors),
            )

    def kill(self) -> None:
        with self._lock:
            self.alive = False


class Environment:
    """One isolated, disposable session environment."""

    def __init__(self, env_id: str, template_id: str, net_identity: str,
                 tree: dict[str, bytes]):
        self.env_id = env_id
        self.template_id = template_id
        self.net_identity = net_identity
        self.tree = tree
        self.state = "warm"
        self.processes: list[SimProcess] = []
        self.channels: list[Channel] = []

    def tree_snapshot(self) -> dict[str, bytes]:
        return dict(self.tree)


class EnvironmentDriver:
    """Seam between session orchestration and the environment runtime."""

    def build(self, template: EnvironmentTemplate, env_id: str,
              net_identity: str) -> Environment:
        raise NotImplementedError

    def destroy(self, env: Environment) -> None:
        raise NotImplementedError

    def open_channel(self, env: Environment, service: str,
                     banner: bytes = b"", echo: bool = False) -> Channel:
        raise NotImplementedError

    def write_file(self, env: Environment, path: str, data: bytes) -> str:
        """Returns the mutation kind: 'create' or 'modify'."""
        raise NotImplementedError

    def delete_file(self, env: Environment, path: str) -> bool:
        raise NotImplementedError

    def read_file(self, env: Environment, path: str) -> bytes | None:
        raise NotImplementedError

    def spawn_process(self, env: Environment, path: str,
                      image: bytes) -> SimProcess:
        raise NotImplementedError

    def process_state(self, pid: int) -> ProcessState | None:
        """Checkpoint bridge: dumpable state of a live process, else None."""
        raise NotImplementedError

    def trace_stream(self, proc: SimProcess,
                     events: Iterable[TraceStepEvent],
                     ) -> Iterator[tuple[str, int, str]]:
        """Instrumentation source: yield (kind, address, detail) tuples for a
        traced process, landing each event's effect before yielding it."""
        raise NotImplementedError


class ScriptedDriver(EnvironmentDriver):
    """In-memory environment runtime for deterministic desk-scale replays."""

    def __init__(self, build_delay: float = 0.0):
        self.build_delay = build_delay
        self._pids = itertools.count(1000)
        self._processes: dict[int, SimProcess] = {}
        self._lock = threading.Lock()

    def build(self, template: EnvironmentTemplate, env_id: str,
              net_identity: str) -> Environment:
        if self.build_delay:
            time.sleep(self.build_delay)
        return Environment(env_id, template.template_id, net_identity,
                           dict(template.baseline_tree))

    def destroy(self, env: Environment) -> None:
        for proc in env.processes:
            proc.kill()
        for chan in env.channels:
            chan.close()
        env.tree.clear()

    def open_channel(self, env: Environment, service: str,
                     banner: bytes = b"", echo: bool = False) -> Channel:
        chan = Channel(env.env_id, service, banner=banner, echo=echo)
        env.channels.append(chan)
        return chan

    def write_file(self, env: Environment, path: str, data: bytes) -> str:
        path = normalize_path(path)
        kind = "modify" if path in env.tree else "create"
        env.tree[path] = bytes(data)
        return kind

    def delete_file(self, env: Environment, path: str) -> bool:
        return env.tree.pop(normalize_path(path), None) is not None

    def read_file(self, env: Environment, path: str) -> bytes | None:
        return env.tree.get(normalize_path(path))

    def spawn_process(self, env: Environment, path: str,
                      image: bytes) -> SimProcess:
        with self._lock:
            pid = next(self._pids)
        proc = SimProcess(pid, env.env_id, normalize_path(path), image)
        env.processes.append(proc)
        with self._lock:
            self._processes[pid] = proc
        return proc

    def process_state(self, pid: int) -> ProcessState | None:
        with self._lock:
            proc = self._processes.get(pid)
        if proc is None or not proc.alive:
            return None
        return proc.state()

    def trace_stream(self, proc: SimProcess,
                     events: Iterable[TraceStepEvent],
                     ) -> Iterator[tuple[str, int, str]]:
        """Yield instrumentation tuples, landing each effect first.

        A mem_write mutates process memory before its event is yielded, so
        any snapshot the consumer triggers on that event sees the write.
        """
        for ev in events:
            if ev.kind == "mem_write":
                proc.apply_mem_write(ev.address, ev.data)
            elif ev.kind == "instruction":
                proc.note_instruction(ev.address)
            yield (ev.kind, ev.address, ev.detail)


class StubExternalDriver(EnvironmentDriver):
    """Placeholder for a real container/VM runtime behind the driver seam."""

    def _unwired(self) -> SandboxError:
        return SandboxError(
            "external environment runtime is not wired into this build; "
            "use ScriptedDriver or provide an EnvironmentDriver")

    def build(self, template, env_id, net_identity):  # pragma: no cover
        raise self._unwired()

    def destroy(self, env):  # pragma: no cover
        raise self._unwired()

    def open_channel(self, env, service, banner=b"", echo=False):  # pragma: no cover
        raise self._unwired()

    def write_file(self, env, path, data):  # pragma: no cover
        raise self._unwired()

    def delete_file(self, env, path):  # pragma: no cover
        raise self._unwired()

    def read_file(self, env, path):  # pragma: no cover
        raise self._unwired()

    def spawn_process(self, env, path, image):  # pragma: no cover
        raise self._unwired()

    def process_state(self, pid):  # pragma: no cover
        raise self._unwired()

    def trace_stream(self, proc, events):  # pragma: no cover
        raise self._unwired()


class NetIdentityAllocator:
    """Hands out unique private-range identities to live environments."""

    def __init__(self, prefix: str = "10.77"):
        self.prefix = prefix
        self._next = 0
        self._live: set[str] = set()
        self._lock = threading.Lock()

    def allocate(self) -> str:
        with self._lock:
            for _ in range(65536):
                index = self._next
                self._next = (self._next + 1) % 65536
                third, fourth = index // 250, 2 + index % 250
                identity = f"{self.prefix}.{third}.{fourth}"
                if identity not in self._live:
                    self._live.add(identity)
                    return identity
        raise SandboxError("network identity space exhausted")

    def release(self, identity: str) -> None:
        with self._lock:
            self._live.discard(identity)

    def live_count(self) -> int:
        with self._lock:
            return len(self._live)


class SandboxManager:
    """Owns templates, whitelists, the warm pool, and environment lifecycle.

    acquire() only ever hands out an already-warm environment; when the pool
    is empty it fails rather than making the caller wait out a build.
    acquire_wait() bounds that wait instead, covering the window where a
    background replenishment is already in flight.
    """

    def __init__(self, driver: EnvironmentDriver, pipeline=None,
                 pool_target: int = 2, max_live: int = 256,
                 identity_prefix: str = "10.77"):
        self.driver = driver
        self.pipeline = pipeline
        self.pool_target = pool_target
        self.max_live = max_live
        self.identities = NetIdentityAllocator(identity_prefix)
        self._templates: dict[str, EnvironmentTemplate] = {}
        self._whitelists: dict[str, WhitelistSet] = {}
        self._pools: dict[str, deque[Environment]] = {}
        self._live: dict[str, Environment] = {}
        self._replenishing: set[str] = set()
        self._shutdown = False
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)

    # -- templates ---------------------------------------------------------

    def register_template(self, template: EnvironmentTemplate) -> WhitelistSet:
        with self._lock:
            if template.template_id in self._templates:
                raise SandboxError(
                    f"template {template.template_id!r} already registered")
            whitelist = build_whitelist(template.template_id,
                                        template.image_bytes())
            self._templates[template.template_id] = template
            self._whitelists[template.template_id] = whitelist
            self._pools[template.template_id] = deque()
        self._emit_system("template_registered", template=template.template_id,
                          trusted_images=len(whitelist.digests))
        return whitelist

    def template(self, template_id: str) -> EnvironmentTemplate:
        try:
            return self._templates[template_id]
        except KeyError:
            raise SandboxError(f"unknown template {template_id!r}") from None

    def whitelist(self, template_id: str) -> WhitelistSet:
        try:
            return self._whitelists[template_id]
        except KeyError:
            raise SandboxError(f"unknown template {template_id!r}") from None

    def template_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._templates)

    # -- pool --------------------------------------------------------------

    def provision(self, template_id: str) -> Environment:
        template = self.template(template_id)
        with self._lock:
            if self._shutdown:
                raise SandboxError("manager is shut down")
            if len(self._live) >= self.max_live:
                raise SandboxError(f"live environment cap {self.max_live} reached")
            identity = self.identities.allocate()
        try:
            env = self.driver.build(template, new_id("env"), identity)
        except Exception:
            self.identities.release(identity)
            raise
        env.state = "warm"
        with self._cond:
            if self._shutdown:
                self.driver.destroy(env)
                self.identities.release(identity)
                raise SandboxError("manager is shut down")
            self._live[env.env_id] = env
            self._pools[template_id].append(env)
            self._cond.notify_all()
        self._emit_system("env_provisioned", template=template_id,
                          env=env.env_id, net_identity=env.net_identity)
        return env

    def warm(self, template_id: str, count: int | None = None) -> int:
        """Synchronously fill the template's pool up to count (default target)."""
        goal = self.pool_target if count is None else count
        built = 0
        while self.pool_size(template_id) < goal:
            self.provision(template_id)
            built += 1
        return built

    def pool_size(self, template_id: str) -> int:
        with self._lock:
            return len(self._pools.get(template_id, ()))

    def live_count(self) -> int:
        with self._lock:
            return len(self._live)

    def acquire(self, template_id: str) -> Environment:
        with self._lock:
            pool = self._pools.get(template_id)
            if pool is None:
                raise SandboxError(f"unknown template {template_id!r}")
            if not pool:
                raise PoolEmpty(f"no warm environment for {template_id!r}")
            env = pool.popleft()
            env.state = "assigned"
        self._kick_replenish(template_id)
        return env

    def acquire_wait(self, template_id: str, timeout: float = 2.0) -> Environment:
        deadline = time.monotonic() + timeout
        self._kick_replenish(template_id)
        with self._cond:
            pool = self._pools.get(template_id)
            if pool is None:
                raise SandboxError(f"unknown template {template_id!r}")
            while not pool:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or self._shutdown:
                    raise PoolEmpty(
                        f"no warm environment for {template_id!r} "
                        f"within {timeout:.1f}s")
                self._cond.wait(remaining)
            env = pool.popleft()
            env.state = "assigned"
        self._kick_replenish(template_id)
        return env

    def _kick_replenish(self, template_id: str) -> None:
        with self._lock:
            if (self._shutdown or template_id in self._replenishing
                    or len(self._pools[template_id]) >= self.pool_target):
                return
            self._replenishing.add(template_id)
        thread = threading.Thread(target=self._replenish, args=(template_id,),
                                  name=f"replenish-{template_id}", daemon=True)
        thread.start()

    def _replenish(self, template_id: str) -> None:
        try:
            while True:
                with self._lock:
                    if (self._shutdown
                            or len(self._pools[template_id]) >= self.pool_target
                            or len(self._live) >= self.max_live):
                        return
                try:
                    self.provision(template_id)
                except SandboxError as exc:
                    log.warning("replenish %s stopped: %s", template_id, exc)
                    return
        finally:
            with self._lock:
                self._replenishing.discard(template_id)

    # -- teardown ----------------------------------------------------------

    def destroy(self, env: Environment) -> None:
        """Total and idempotent: a destroyed environment stays destroyed."""
        with self._lock:
            if env.state == "destroyed":
                return
            env.state = "destroyed"
            self._live.pop(env.env_id, None)
            pool = self._pools.get(env.template_id)
            if pool and env in pool:
                pool.remove(env)
        try:
            self.driver.destroy(env)
        finally:
            self.identities.release(env.net_identity)
        self._emit_system("env_destroyed", template=env.template_id,
                          env=env.env_id)

    def shutdown(self) -> None:
        with self._cond:
            self._shutdown = True
            doomed = list(self._live.values())
            self._cond.notify_all()
        for env in doomed:
            self.destroy(env)

    def _emit_system(self, op: str, **fields) -> None:
        if self.pipeline is not None:
            self.pipeline.emit("system", dict(op=op, **fields))
