"""Inbound connection handling: service listeners and the per-session relay.

The gateway terminates the attacker's TCP connection, obtains a fresh armed
session from the orchestrator, and relays bytes between the attacker socket
and the session's environment channel until either side leaves or the idle
timeout fires. Teardown always runs, whatever ended the conversation.

Config file format (line-oriented, '#' comments, shell-style quoting)::

    listen 127.0.0.1                 # default listen address
    data_dir ./trapline-data
    pool_target 1
    idle_timeout 300
    monitor_port 8700                # 0 disables the monitor
    template ./scenarios/templates/linux-basic
    service ssh 2222 linux-basic banner:"SSH-2.0-OpenSSH_7.4\\r\\n" echo
    service ftp 2121 linux-basic

`service <name> <port> <template_id>` plus optional `banner:<byte-literal>`
and `echo` flags. Ports must be unique; every template_id must resolve to a
registered template. TRAPLINE_LISTEN overrides the listen address.
"""
from __future__ import annotations

import logging
import os
import shlex
import socket
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .orchestrator import Orchestrator, SessionContext
from .sandbox import PoolEmpty, SandboxError
from .util import parse_bytes_literal

log = logging.getLogger("trapline.gateway")

RECV_CHUNK = 65536


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ServiceConfig:
    name: str
    listen_port: int
    template_id: str
    banner: bytes = b""
    echo: bool = False

    def __post_init__(self) -> None:
        if not (0 <= self.listen_port <= 65535):
            raise ConfigError(f"service {self.name!r}: port {self.listen_port} "
                              f"out of range")


@dataclass(frozen=True)
class ServiceConfigSet:
    services: tuple[ServiceConfig, ...] = ()
    listen_host: str = "127.0.0.1"
    data_dir: str = "./trapline-data"
    template_dirs: tuple[str, ...] = ()
    pool_target: int = 1
    idle_timeout: float = 300.0
    monitor_port: int = 0

    def __post_init__(self) -> None:
        seen: dict[int, str] = {}
        for svc in self.services:
            if svc.listen_port in seen and svc.listen_port != 0:
                raise ConfigError(
                    f"port {svc.listen_port} assigned to both "
                    f"{seen[svc.listen_port]!r} and {svc.name!r}")
            seen[svc.listen_port] = svc.name

    def service(self, name: str) -> ServiceConfig:
        for svc in self.services:
            if svc.name == name:
                return svc
        raise ConfigError(f"no service named {name!r}")

    def validate_templates(self, known_ids) -> None:
        known = set(known_ids)
        for svc in self.services:
            if svc.template_id not in known:
                raise ConfigError(f"service {svc.name!r}: unknown template "
                                  f"{svc.template_id!r}")


def load_config(path: Path | str) -> ServiceConfigSet:
    """Parse and validate a gateway config file."""
    text = Path(path).read_text(encoding="utf-8")
    services: list[ServiceConfig] = []
    settings: dict = {}
    template_dirs: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        try:
            tokens = shlex.split(raw, comments=True, posix=True)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
        if not tokens:
            continue
        key, args = tokens[0], tokens[1:]
        try:
            if key == "service":
                if len(args) < 3:
                    raise ConfigError("service needs: name port template_id")
                banner = b""
                echo = False
                for extra in args[3:]:
                    if extra.startswith("banner:"):
                        banner = parse_bytes_literal(extra[len("banner:"):])
                    elif extra == "echo":
                        echo = True
                    else:
                        raise ConfigError(f"unknown service option {extra!r}")
                services.append(ServiceConfig(args[0], int(args[1]), args[2],
                                              banner=banner, echo=echo))
            elif key == "listen":
                settings["listen_host"] = args[0]
            elif key == "data_dir":
                settings["data_dir"] = args[0]
            elif key == "template":
                template_dirs.append(args[0])
            elif key == "pool_target":
                settings["pool_target"] = int(args[0])
            elif key == "idle_timeout":
                settings["idle_timeout"] = float(args[0])
            elif key == "monitor_port":
                settings["monitor_port"] = int(args[0])
            else:
                raise ConfigError(f"unknown directive {key!r}")
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    env_listen = os.environ.get("TRAPLINE_LISTEN")
    if env_listen:
        settings["listen_host"] = env_listen
    return ServiceConfigSet(services=tuple(services),
                            template_dirs=tuple(template_dirs), **settings)


class Gateway:
    """TCP front door: one listener per configured service, one relay thread
    per accepted connection."""

    def __init__(self, orch: Orchestrator, config: ServiceConfigSet) -> None:
        self.orch = orch
        self.config = config
        self.bound_ports: dict[str, int] = {}
        self._listeners: list[tuple[socket.socket, ServiceConfig]] = []
        self._threads: list[threading.Thread] = []
        self._conn_threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._lock = threading.Lock()

    def start(self) -> dict[str, int]:
        """Bind every service listener (port 0 = ephemeral) and start
        accepting. Returns service name -> bound port."""
        self.config.validate_templates(self.orch.sandbox.template_ids())
        for svc in self.config.services:
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.bind((self.config.listen_host, svc.listen_port))
            sock.listen(64)
            sock.settimeout(0.2)
            port = sock.getsockname()[1]
            self.bound_ports[svc.name] = port
            self._listeners.append((sock, svc))
            thread = threading.Thread(target=self._accept_loop,
                                      args=(sock, svc),
                                      name=f"accept-{svc.name}", daemon=True)
            thread.start()
            self._threads.append(thread)
            log.info("listening for %s on %s:%d", svc.name,
                     self.config.listen_host, port)
        return dict(self.bound_ports)

    def _accept_loop(self, sock: socket.socket, svc: ServiceConfig) -> None:
        while not self._stop.is_set():
            try:
                conn, addr = sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            thread = threading.Thread(
                target=self._serve_connection, args=(conn, addr, svc),
                name=f"relay-{svc.name}-{addr[1]}", daemon=True)
            thread.start()
            with self._lock:
                self._conn_threads.append(thread)

    def _serve_connection(self, conn: socket.socket, addr, svc: ServiceConfig) -> None:
        source = f"{addr[0]}:{addr[1]}"
        try:
            ctx = self.orch.open_session(svc.name, svc.template_id, source,
                                         service_port=svc.listen_port or
                                         self.bound_ports.get(svc.name, 0),
                                         banner=svc.banner, echo=svc.echo)
        except PoolEmpty:
            conn.close()
            return
        except Exception:
            log.exception("session setup failed for %s", source)
            conn.close()
            return
        try:
            banner = ctx.send_banner()
            if banner:
                conn.sendall(banner)
            self.relay(ctx, conn)
        finally:
            try:
                conn.close()
            except OSError:
                pass
            self.orch.teardown_session(ctx)

    def relay(self, ctx: SessionContext, conn: socket.socket) -> int:
        """Pump bytes between the attacker socket and the environment channel
        until disconnect, channel close, or idle timeout. Returns total bytes
        relayed in both directions."""
        conn.settimeout(self.config.idle_timeout)
        relayed = 0
        while not self._stop.is_set():
            try:
                chunk = conn.recv(RECV_CHUNK)
            except socket.timeout:
                log.info("session %s idle for %.0fs, closing",
                         ctx.session_id, self.config.idle_timeout)
                break
            except OSError:
                break
            if not chunk:
                break
            relayed += len(chunk)
            try:
                reply = ctx.attacker_send(chunk)
            except SandboxError:
                break  # environment side closed
            if reply:
                relayed += len(reply)
                try:
                    conn.sendall(reply)
                except OSError:
                    break
        return relayed

    def stop(self) -> None:
        self._stop.set()
        for sock, _svc in self._listeners:
            try:
                sock.close()
            except OSError:
                pass
        for thread in self._threads:
            thread.join(timeout=2.0)
        with self._lock:
            conn_threads = list(self._conn_threads)
        for thread in conn_threads:
            thread.join(timeout=2.0)
