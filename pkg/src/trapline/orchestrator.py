"""Session orchestration: one place that wires every module together.

For each accepted connection (or scripted replay) the orchestrator acquires a
warm environment, arms the per-session hooks — packet capture, filesystem
watcher over a baseline commit, exec/trace verdicts — and only then lets
attacker bytes flow.  Teardown is the mirror image: flush the watcher, seal
trace logs, finalize the capture, destroy the environment, archive the
session, and emit a SessionRecord naming every artifact produced.

The attacker-script runner lives here too: each script step needs the armed
hooks (watcher, tracer, capture hub), which belong to the session, not to the
environment alone.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .checkpointd import (CheckpointClient, CheckpointCore, LocalTransport,
                          SnapshotStore, SocketTransport)
from .clock import WallClock
from .eventstore import EventPipeline, EventStore, Query
from .fsvault import Vault, Watcher
from .netcap import CaptureHub, open_capture, synthesize_packet
from .sandbox import (Channel, Environment, EnvironmentDriver,
                      EnvironmentTemplate, PoolEmpty, SandboxManager,
                      ScriptedDriver, SimProcess)
from .script import (AttackScript, ConnectOutStep, DeleteFileStep, ExecStep,
                     ExpectStep, SendStep, SleepStep, TraceStep, WriteFileStep)
from .tracer import Tracer
from .util import new_id

log = logging.getLogger("trapline.orchestrator")

SESSION_STATES = ("active", "closing", "archived")

DEFAULT_SERVICE_PORTS = {
    "ftp": 21, "ssh": 22, "telnet": 23, "http": 80, "smb": 445,
}

EPHEMERAL_PORT_BASE = 49152


def default_service_port(service: str) -> int:
    return DEFAULT_SERVICE_PORTS.get(service, 7)


class OrchestratorError(Exception):
    pass


@dataclass(frozen=True)
class Session:
    """One attacker connection bound to one isolated environment."""
    session_id: str
    source: str       # attacker "ip:port"
    service: str
    env_id: str
    state: str
    started_at: float
    ended_at: float | None = None

    def __post_init__(self) -> None:
        if self.state not in SESSION_STATES:
            raise OrchestratorError(f"bad session state {self.state!r}")
        if (self.ended_at is None) == (self.state == "archived"):
            raise OrchestratorError("ended_at must be set exactly when archived")

    def to_doc(self) -> dict:
        return {
            "session_id": self.session_id, "source": self.source,
            "service": self.service, "env_id": self.env_id,
            "state": self.state, "started_at": self.started_at,
            "ended_at": self.ended_at,
        }


@dataclass(frozen=True)
class SessionRecord:
    """Teardown summary: the archived session plus every artifact it made."""
    session: Session
    artifact_refs: dict

    def to_doc(self) -> dict:
        return {"session": self.session.to_doc(),
                "artifact_refs": self.artifact_refs}


@dataclass(frozen=True)
class OrchestratorConfig:
    data_dir: Path
    pool_target: int = 1
    max_live: int = 256
    acquire_timeout: float = 2.0
    debounce_window: float = 0.05
    checkpoint_timeout: float = 5.0
    checkpoint_endpoint: str | None = None  # None = in-process handling
    identity_prefix: str = "10.77"
    snapshot_coalesce: int = 1
    periodic_snapshot_interval: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "data_dir", Path(self.data_dir))


class DriverStateProvider:
    """Checkpoint-side view of driver-managed processes."""

    def __init__(self, driver: EnvironmentDriver) -> None:
        self.driver = driver

    def read_state(self, target: int):
        return self.driver.process_state(target)


class SessionContext:
    """Mutable per-session state plus the step operations a script (or the
    gateway relay) performs against the armed session."""

    def __init__(self, orch: "Orchestrator", session_id: str, source: str,
                 service: str, service_port: int, env: Environment,
                 channel: Channel, watcher: Watcher, capture,
                 started_at: float) -> None:
        self.orch = orch
        self.session_id = session_id
        self.source = source
        self.service = service
        self.env = env
        self.channel = channel
        self.watcher = watcher
        self.capture = capture
        self.state = "active"
        self.started_at = started_at
        self.ended_at: float | None = None
        self.env_endpoint = f"{env.net_identity}:{service_port}"
        self.bytes_in = 0
        self.bytes_out = 0
        self.last_process: SimProcess | None = None
        self._next_ephemeral = EPHEMERAL_PORT_BASE
        self.lock = threading.RLock()

    # -- views ---------------------------------------------------------------

    def snapshot(self) -> Session:
        return Session(self.session_id, self.source, self.service,
                       self.env.env_id, self.state, self.started_at,
                       self.ended_at)

    def events(self):
        return self.orch.session_events(self.session_id)

    # -- step operations ------------------------------------------------------

    def attacker_send(self, data: bytes) -> bytes:
        """Deliver attacker bytes to the environment; capture both directions.
        Returns whatever the environment answered immediately."""
        now = self.orch.clock.now()
        self.orch.hub.offer(synthesize_packet(now, self.source,
                                              self.env_endpoint, data,
                                              direction="inbound"))
        self.bytes_in += len(data)
        reply = self.channel.deliver(data)
        if reply:
            self.environment_reply(reply, _counted=True)
        return reply

    def environment_reply(self, data: bytes, _counted: bool = False) -> None:
        """Environment-to-attacker bytes (scripted `expect`, banners)."""
        now = self.orch.clock.now()
        self.orch.hub.offer(synthesize_packet(now, self.env_endpoint,
                                              self.source, data,
                                              direction="outbound"))
        self.bytes_out += len(data)
        if not _counted:
            self.channel.note_reply(data)

    def send_banner(self) -> bytes:
        banner = self.channel.open_banner()
        if banner:
            self.environment_reply(banner, _counted=True)
        return banner

    def write_file(self, path: str, data: bytes) -> None:
        kind = self.orch.driver.write_file(self.env, path, data)
        self.watcher.notify(kind, path, data)

    def delete_file(self, path: str) -> bool:
        existed = self.orch.driver.delete_file(self.env, path)
        if existed:
            self.watcher.notify("delete", path)
        else:
            self.orch.pipeline.emit("system", {
                "op": "script_step_failed", "step": "delete_file",
                "path": path, "reason": "no_such_path",
            }, session_id=self.session_id, ts=self.orch.clock.now())
        return existed

    def exec_command(self, path: str, args: tuple[str, ...] = ()):
        """Spawn a program: verdict, optional trace log, simulated process."""
        command_line = " ".join((path,) + tuple(args))
        image = self.orch.driver.read_file(self.env, path)
        event, trace_log = self.orch.tracer.on_exec(
            self.session_id, command_line, image, self.orch.clock.now(),
            path=path)
        if image is not None:
            proc = self.orch.driver.spawn_process(self.env, path, image)
            self.last_process = proc
            if trace_log is not None:
                self.orch.tracer.attach_process(trace_log, proc.pid)
        return event, trace_log

    def run_trace_events(self, events) -> None:
        """Feed a block of instrumentation events into the current trace."""
        tracing = self.orch.tracer.session(self.session_id)
        if tracing.current is None or self.last_process is None:
            self.orch.pipeline.emit("system", {
                "op": "script_step_failed", "step": "trace",
                "reason": "no_traced_process",
            }, session_id=self.session_id, ts=self.orch.clock.now())
            return
        stream = self.orch.driver.trace_stream(self.last_process, events)
        self.orch.tracer.trace(tracing.current, stream,
                               ts=self.orch.clock.now(), clock=self.orch.clock)

    def connect_out(self, dest: str, payload: bytes) -> str:
        """Outbound connection from the environment (e.g. malware calling
        home). Captured with the environment as source."""
        with self.lock:
            port = self._next_ephemeral
            self._next_ephemeral += 1
        src = f"{self.env.net_identity}:{port}"
        self.orch.hub.offer(synthesize_packet(self.orch.clock.now(), src,
                                              dest, payload,
                                              direction="outbound"))
        if self.last_process is not None and self.last_process.alive:
            self.last_process.add_descriptor("socket", dest)
        return src

    def sleep(self, duration: float) -> None:
        self.orch.clock.sleep(duration)


class Orchestrator:
    """Owns the stores, the pool, and every live session."""

    def __init__(self, config: OrchestratorConfig,
                 driver: EnvironmentDriver | None = None,
                 clock=None) -> None:
        self.config = config
        self.clock = clock if clock is not None else WallClock()
        self.driver = driver if driver is not None else ScriptedDriver()
        data = config.data_dir
        data.mkdir(parents=True, exist_ok=True)
        self.store = EventStore(data / "events")
        self.pipeline = EventPipeline(self.store)
        self.vault = Vault(data / "vault")
        self.hub = CaptureHub()
        self.capture_dir = data / "captures"
        self.capture_dir.mkdir(parents=True, exist_ok=True)
        self.snapshots = SnapshotStore(data / "snapshots")
        self.checkpoint_core = CheckpointCore(
            self.snapshots, DriverStateProvider(self.driver))
        if config.checkpoint_endpoint:
            transport = SocketTransport(config.checkpoint_endpoint)
        else:
            transport = LocalTransport(self.checkpoint_core)
        self._transport = transport
        self.tracer = Tracer(
            data / "traces",
            CheckpointClient(transport, timeout=config.checkpoint_timeout),
            pipeline=self.pipeline,
            coalesce_events=config.snapshot_coalesce,
            periodic_interval=config.periodic_snapshot_interval)
        self.sandbox = SandboxManager(
            self.driver, pipeline=self.pipeline,
            pool_target=config.pool_target, max_live=config.max_live,
            identity_prefix=config.identity_prefix)
        self._sessions: dict[str, SessionContext] = {}
        self._records: dict[str, SessionRecord] = {}
        self._lock = threading.RLock()

    # -- setup ----------------------------------------------------------------

    def register_template(self, template: EnvironmentTemplate) -> str:
        self.sandbox.register_template(template)
        return template.template_id

    def warm_all(self) -> None:
        for template_id in self.sandbox.template_ids():
            self.sandbox.warm(template_id)

    # -- session lifecycle ------------------------------------------------------

    def open_session(self, service: str, template_id: str, source: str,
                     service_port: int | None = None, banner: bytes = b"",
                     echo: bool = False) -> SessionContext:
        """Acquire an environment and arm every hook before any attacker byte
        can reach it. Raises PoolEmpty (after logging the refusal) when no
        environment arrives within the acquire timeout."""
        now = self.clock.now()
        try:
            env = self.sandbox.acquire_wait(template_id,
                                            self.config.acquire_timeout)
        except PoolEmpty:
            self.pipeline.emit("connection", {
                "outcome": "refused", "service": service, "source": source,
                "reason": "pool_exhausted", "template": template_id,
            }, ts=now)
            raise

        session_id = new_id("ses")
        port = (service_port if service_port is not None
                else default_service_port(service))

        # Arm order: capture first (no byte escapes the pcap), then the
        # filesystem baseline + watcher, then exec/trace hooks.
        capture = open_capture(
            session_id, env.net_identity, self.capture_dir,
            on_degraded=lambda reason: self.pipeline.emit("degradation", {
                "component": "capture", "reason": reason,
            }, session_id=session_id, ts=self.clock.now()))
        self.hub.register(capture)

        baseline = self.vault.record_baseline(session_id, env.tree_snapshot(),
                                              now)
        watcher = Watcher(
            session_id, self.vault, self.clock,
            window=self.config.debounce_window,
            on_commit=self._on_commit,
            on_suppressed=lambda event, status: self.pipeline.emit("system", {
                "op": "fs_suppressed", "status": status, "path": event.path,
                "kind": event.kind,
            }, session_id=event.session_id, ts=self.clock.now()))

        self.tracer.arm_session(session_id, self.sandbox.whitelist(template_id))

        channel = self.driver.open_channel(env, service, banner=banner,
                                           echo=echo)
        ctx = SessionContext(self, session_id, source, service, port, env,
                             channel, watcher, capture, started_at=now)
        with self._lock:
            self._sessions[session_id] = ctx

        self.pipeline.emit("connection", {
            "outcome": "accepted", "service": service, "source": source,
            "env_id": env.env_id, "net_identity": env.net_identity,
        }, session_id=session_id, ts=now)
        self.pipeline.emit("session_created", {
            "service": service, "source": source, "env_id": env.env_id,
            "template": template_id, "net_identity": env.net_identity,
        }, session_id=session_id, ts=now)
        self.pipeline.emit("capture", {
            "state": "armed", "path": str(capture.path),
            "net_identity": env.net_identity,
        }, session_id=session_id, ts=now)
        self.pipeline.emit("fs_commit", {
            "commit_id": baseline.commit_id, "parent_id": None,
            "message": "baseline", "paths": len(baseline.tree),
        }, session_id=session_id, ts=now)
        return ctx

    def _on_commit(self, commit, fs_event) -> None:
        self.pipeline.emit("fs_commit", {
            "commit_id": commit.commit_id, "parent_id": commit.parent_id,
            "message": commit.message, "kind": fs_event.kind,
            "path": fs_event.path, "content_digest": fs_event.content_digest,
            "paths": len(commit.tree),
        }, session_id=commit.session_id, ts=commit.ts)

    def session(self, session_id: str) -> SessionContext:
        with self._lock:
            ctx = self._sessions.get(session_id)
        if ctx is None:
            raise OrchestratorError(f"unknown session {session_id}")
        return ctx

    def active_sessions(self) -> list[SessionContext]:
        with self._lock:
            return [c for c in self._sessions.values() if c.state == "active"]

    def session_events(self, session_id: str):
        return self.store.query(Query(session_id=session_id))

    def teardown_session(self, ctx: SessionContext) -> SessionRecord:
        """Flush and seal every per-session artifact, destroy the environment,
        archive the session. Total (runs on every exit path) and idempotent
        (a second call returns the same record)."""
        with ctx.lock:
            existing = self._records.get(ctx.session_id)
            if existing is not None:
                return existing
            ctx.state = "closing"

            ctx.watcher.close()
            trace_ids = self.tracer.seal_session(ctx.session_id)
            snapshot_ids = []
            for trace_id in trace_ids:
                log = self.tracer.get_log(trace_id)
                snapshot_ids.extend(ref.snapshot_id for ref in log.snapshot_refs)

            self.hub.unregister(ctx.capture)
            summary = ctx.capture.finalize()
            now = self.clock.now()
            self.pipeline.emit("capture", {
                "state": "finalized", "path": str(summary.path),
                "packets": summary.packet_count, "bytes": summary.byte_count,
            }, session_id=ctx.session_id, ts=now)

            self.sandbox.destroy(ctx.env)

            history = self.vault.history(ctx.session_id)
            commit_ids = [c.commit_id for c in history]
            ctx.ended_at = now
            ctx.state = "archived"
            record = SessionRecord(
                session=ctx.snapshot(),
                artifact_refs={
                    "pcap": str(summary.path),
                    "pcap_packets": summary.packet_count,
                    "pcap_bytes": summary.byte_count,
                    "commit_range": [commit_ids[0], commit_ids[-1]],
                    "commits": commit_ids,
                    "traces": trace_ids,
                    "snapshots": snapshot_ids,
                    "bytes_in": ctx.bytes_in,
                    "bytes_out": ctx.bytes_out,
                })
            with self._lock:
                self._records[ctx.session_id] = record
            self.pipeline.emit("session_archived", record.to_doc(),
                               session_id=ctx.session_id, ts=now)
            return record

    def record_for(self, session_id: str) -> SessionRecord | None:
        with self._lock:
            return self._records.get(session_id)

    # -- scripted replay --------------------------------------------------------

    def replay(self, template_id: str, script: AttackScript,
               source: str = "203.0.113.9:51000", service: str = "ssh",
               service_port: int | None = None,
               banner: bytes = b"") -> tuple[SessionRecord, list]:
        """Run a scenario end-to-end without a network listener."""
        ctx = self.open_session(service, template_id, source,
                                service_port=service_port, banner=banner)
        try:
            if banner:
                ctx.send_banner()
            run_attacker_script(ctx, script)
        finally:
            record = self.teardown_session(ctx)
        return record, self.session_events(ctx.session_id)

    def shutdown(self) -> None:
        for ctx in self.active_sessions():
            try:
                self.teardown_session(ctx)
            except Exception:  # keep shutting down the rest
                log.exception("teardown of %s failed during shutdown",
                              ctx.session_id)
        self.sandbox.shutdown()
        self._transport.close()
        self.store.close()


def run_attacker_script(ctx: SessionContext, script: AttackScript) -> list:
    """Drive one scripted attacker against an armed session, step by step.

    A step that references a missing path is recorded as a failure event and
    execution continues — real attackers' commands fail too. Returns the
    session's events emitted so far, in store order.
    """
    for step in script.steps:
        if isinstance(step, SendStep):
            ctx.attacker_send(step.data)
        elif isinstance(step, ExpectStep):
            ctx.environment_reply(step.data)
        elif isinstance(step, WriteFileStep):
            ctx.write_file(step.path, step.data)
        elif isinstance(step, DeleteFileStep):
            ctx.delete_file(step.path)
        elif isinstance(step, ExecStep):
            ctx.exec_command(step.path, step.args)
        elif isinstance(step, ConnectOutStep):
            ctx.connect_out(step.dest, step.payload)
        elif isinstance(step, TraceStep):
            ctx.run_trace_events(step.events)
        elif isinstance(step, SleepStep):
            ctx.sleep(step.duration)
        else:  # pragma: no cover - parser emits only the kinds above
            raise OrchestratorError(f"unknown step {step!r}")
    return ctx.events()
