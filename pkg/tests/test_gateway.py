"""Network front door: config parsing and real-socket relay behavior."""
from __future__ import annotations

import socket
import threading
import time

import pytest

from trapline.eventstore import Query
from trapline.gateway import (
    ConfigError, Gateway, ServiceConfig, ServiceConfigSet, load_config,
)

from conftest import make_orchestrator, parse_pcap_file, verify_ipv4_tcp_frame

# -- config -----------------------------------------------------------------


GOOD_CONFIG = r"""
# honeypot services
listen 127.0.0.1
data_dir /tmp/trapdata
pool_target 2
idle_timeout 120
monitor_port 8700
template ./scenarios/templates/linux-basic
service ssh 2222 linux-basic banner:"SSH-2.0-OpenSSH_7.4\r\n"
service telnet 2323 linux-basic echo
service ftp 0 linux-basic
"""


def write_config(tmp_path, text):
    p = tmp_path / "gateway.conf"
    p.write_text(text)
    return p


def test_load_config_full(tmp_path):
    cfg = load_config(write_config(tmp_path, GOOD_CONFIG))
    assert cfg.listen_host == "127.0.0.1"
    assert cfg.data_dir == "/tmp/trapdata"
    assert cfg.pool_target == 2
    assert cfg.idle_timeout == 120.0
    assert cfg.monitor_port == 8700
    assert cfg.template_dirs == ("./scenarios/templates/linux-basic",)
    assert len(cfg.services) == 3
    ssh = cfg.service("ssh")
    assert ssh.listen_port == 2222
    assert ssh.banner == b"SSH-2.0-OpenSSH_7.4\r\n"
    assert ssh.echo is False
    telnet = cfg.service("telnet")
    assert telnet.echo is True and telnet.banner == b""
    assert cfg.service("ftp").listen_port == 0
    with pytest.raises(ConfigError, match="no service named"):
        cfg.service("smb")


@pytest.mark.parametrize("line,fragment", [
    ("service ssh", "line 1"),
    ("service ssh 2222", "line 1"),
    ("service ssh 70000 t", "out of range"),
    ("service ssh 22 t frobnicate", "unknown service option"),
    ("nonsense directive", "unknown directive"),
    ("pool_target many", "line 1"),
])
def test_load_config_rejects_bad_lines(tmp_path, line, fragment):
    with pytest.raises(ConfigError, match=fragment):
        load_config(write_config(tmp_path, line))


def test_duplicate_ports_rejected(tmp_path):
    text = "service ssh 2222 t1\nservice ftp 2222 t2\n"
    with pytest.raises(ConfigError, match="port 2222 assigned to both"):
        load_config(write_config(tmp_path, text))
    # ...but multiple ephemeral (0) services are fine
    cfg = load_config(write_config(tmp_path, "service a 0 t\nservice b 0 t\n"))
    assert len(cfg.services) == 2


def test_listen_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("TRAPLINE_LISTEN", "0.0.0.0")
    cfg = load_config(write_config(tmp_path, "listen 127.0.0.1\n"))
    assert cfg.listen_host == "0.0.0.0"


def test_unknown_template_rejected_at_start(tmp_path, template):
    orch = make_orchestrator(tmp_path / "data")
    orch.register_template(template)
    cfg = ServiceConfigSet(services=(
        ServiceConfig("ssh", 0, "never-registered"),))
    gw = Gateway(orch, cfg)
    with pytest.raises(ConfigError, match="unknown template"):
        gw.start()
    orch.shutdown()


# -- live gateway fixtures ------------------------------------------------------


@pytest.fixture
def live_gateway(tmp_path, template):
    """A gateway bound to ephemeral ports with ssh (banner) and telnet (echo)
    services, plus its orchestrator."""
    orch = make_orchestrator(tmp_path / "data", pool_target=2)
    orch.register_template(template)
    orch.warm_all()
    cfg = ServiceConfigSet(services=(
        ServiceConfig("ssh", 0, "linux-basic", banner=b"SSH-2.0-Trap\r\n"),
        ServiceConfig("telnet", 0, "linux-basic", echo=True),
    ), idle_timeout=60.0)
    gw = Gateway(orch, cfg)
    ports = gw.start()
    yield orch, gw, ports
    gw.stop()
    orch.shutdown()


def connect(port) -> socket.socket:
    sock = socket.create_connection(("127.0.0.1", port), timeout=5.0)
    sock.settimeout(5.0)
    return sock


def wait_for_archive(orch, n=1, timeout=10.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        archived = orch.store.query(Query(kinds=frozenset({"session_archived"})))
        if len(archived) >= n:
            return archived
        time.sleep(0.02)
    raise AssertionError(f"never saw {n} archived sessions")


# -- relay behavior ----------------------------------------------------------------


def test_banner_and_echo_relay(live_gateway):
    orch, gw, ports = live_gateway
    sock = connect(ports["ssh"])
    assert sock.recv(64) == b"SSH-2.0-Trap\r\n"
    sock.close()

    sock = connect(ports["telnet"])
    sock.sendall(b"knock knock\r\n")
    assert sock.recv(64) == b"knock knock\r\n"
    sock.close()
    wait_for_archive(orch, n=2)


def test_relay_conserves_bytes_and_captures_them(live_gateway):
    orch, gw, ports = live_gateway
    payloads = [b"GET / HTTP/1.0\r\n", b"\x00\x01\x02binary\xff", b"x" * 2048]
    sock = connect(ports["telnet"])
    for p in payloads:
        sock.sendall(p)
        got = b""
        while len(got) < len(p):
            got += sock.recv(65536)
        assert got == p
    sock.close()
    wait_for_archive(orch)

    record = orch.record_for(
        orch.store.query(Query(kinds=frozenset({"session_archived"})))[0]
        .session_id)
    total = sum(len(p) for p in payloads)
    assert record.artifact_refs["bytes_in"] == total
    assert record.artifact_refs["bytes_out"] == total
    # every relayed byte is in the capture, both directions
    _, packets = parse_pcap_file(record.artifact_refs["pcap"])
    inbound = b"".join(
        verify_ipv4_tcp_frame(p["data"])[2] for p in packets
        if verify_ipv4_tcp_frame(p["data"])[1].startswith("10.77."))
    outbound = b"".join(
        verify_ipv4_tcp_frame(p["data"])[2] for p in packets
        if verify_ipv4_tcp_frame(p["data"])[0].startswith("10.77."))
    assert inbound == b"".join(payloads)
    assert outbound == b"".join(payloads)


def test_disconnect_archives_session(live_gateway):
    orch, gw, ports = live_gateway
    sock = connect(ports["ssh"])
    sock.recv(64)
    sock.close()
    archived = wait_for_archive(orch)
    record = orch.record_for(archived[0].session_id)
    assert record.session.state == "archived"
    assert record.artifact_refs["pcap"]


def test_concurrent_connections_get_distinct_sessions(live_gateway):
    orch, gw, ports = live_gateway
    socks = [connect(ports["telnet"]) for _ in range(4)]
    for i, sock in enumerate(socks):
        sock.sendall(f"conn-{i}".encode())
        assert sock.recv(64) == f"conn-{i}".encode()
    for sock in socks:
        sock.close()
    wait_for_archive(orch, n=4)

    created = orch.store.query(Query(kinds=frozenset({"session_created"})))
    session_ids = {e.session_id for e in created}
    env_ids = {e.body["env_id"] for e in created}
    identities = {e.body["net_identity"] for e in created}
    assert len(session_ids) == 4
    assert len(env_ids) == 4
    assert len(identities) == 4


def test_pool_exhaustion_refuses_connection(tmp_path, template):
    orch = make_orchestrator(tmp_path / "data", pool_target=0,
                             acquire_timeout=0.2)
    orch.register_template(template)
    cfg = ServiceConfigSet(services=(
        ServiceConfig("ssh", 0, "linux-basic", banner=b"hello\r\n"),))
    gw = Gateway(orch, cfg)
    ports = gw.start()
    try:
        sock = connect(ports["ssh"])
        # server closes without ever sending the banner
        assert sock.recv(64) == b""
        sock.close()
        deadline = time.monotonic() + 5.0
        while time.monotonic() < deadline:
            refused = orch.store.query(Query(kinds=frozenset({"connection"})))
            if refused and refused[0].body["outcome"] == "refused":
                break
            time.sleep(0.02)
        else:
            raise AssertionError("refusal event never recorded")
        assert orch.store.query(
            Query(kinds=frozenset({"session_created"}))) == []
    finally:
        gw.stop()
        orch.shutdown()


def test_idle_timeout_closes_session(tmp_path, template):
    orch = make_orchestrator(tmp_path / "data", pool_target=1)
    orch.register_template(template)
    orch.warm_all()
    cfg = ServiceConfigSet(services=(
        ServiceConfig("telnet", 0, "linux-basic", echo=True),),
        idle_timeout=0.3)
    gw = Gateway(orch, cfg)
    ports = gw.start()
    try:
        sock = connect(ports["telnet"])
        sock.sendall(b"ping")
        assert sock.recv(16) == b"ping"
        # now go quiet; the gateway should end the session on its own
        archived = wait_for_archive(orch, timeout=10.0)
        record = orch.record_for(archived[0].session_id)
        assert record.artifact_refs["bytes_in"] == 4
        sock.close()
    finally:
        gw.stop()
        orch.shutdown()
