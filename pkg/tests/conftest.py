"""Shared fixtures: a deterministic orchestrator, the stock template, and
independent file-format parsers used to check our writers from the outside."""
from __future__ import annotations

import struct
from pathlib import Path

import pytest

from trapline.clock import SimClock
from trapline.orchestrator import Orchestrator, OrchestratorConfig
from trapline.sandbox import ScriptedDriver, load_template_dir
from trapline.script import load_script

REPO_ROOT = Path(__file__).resolve().parent.parent
TEMPLATE_DIR = REPO_ROOT / "scenarios" / "templates" / "linux-basic"
LIFECYCLE_SCRIPT = REPO_ROOT / "scenarios" / "malware_lifecycle.attack"

# Verdict lines recorded by the acceptance suite. Stdout of passing tests is
# captured and discarded, so the lines are replayed in the terminal summary,
# where they survive into any tee'd log of the run.
ACCEPTANCE_VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_VERDICTS:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance verdicts", sep="-")
    for line in ACCEPTANCE_VERDICTS:
        terminalreporter.write_line(line)


@pytest.fixture
def sim_clock():
    return SimClock()


@pytest.fixture
def template():
    return load_template_dir(TEMPLATE_DIR)


@pytest.fixture
def lifecycle_script():
    return load_script(LIFECYCLE_SCRIPT)


def make_orchestrator(data_dir: Path, clock=None, **config_kwargs) -> Orchestrator:
    config = OrchestratorConfig(data_dir=data_dir, **config_kwargs)
    return Orchestrator(config, driver=ScriptedDriver(),
                        clock=clock if clock is not None else SimClock())


@pytest.fixture
def orch(tmp_path, template):
    o = make_orchestrator(tmp_path / "data")
    o.register_template(template)
    o.warm_all()
    yield o
    o.shutdown()


# -- independent pcap reader --------------------------------------------------
# Deliberately does NOT import trapline.netcap: a second, hand-written decoder
# for the classic capture-file layout so writer bugs can't hide behind a
# matching reader.

PCAP_GLOBAL = struct.Struct("<IHHiIII")
PCAP_RECORD = struct.Struct("<IIII")


def parse_pcap_bytes(blob: bytes) -> tuple[dict, list[dict]]:
    if len(blob) < PCAP_GLOBAL.size:
        raise ValueError("short capture file")
    magic, vmaj, vmin, thiszone, sigfigs, snaplen, linktype = \
        PCAP_GLOBAL.unpack_from(blob, 0)
    if magic != 0xA1B2C3D4:
        raise ValueError(f"bad magic {magic:#x}")
    header = {
        "version": (vmaj, vmin),
        "thiszone": thiszone,
        "sigfigs": sigfigs,
        "snaplen": snaplen,
        "linktype": linktype,
    }
    records = []
    off = PCAP_GLOBAL.size
    while off < len(blob):
        if off + PCAP_RECORD.size > len(blob):
            raise ValueError("truncated record header")
        ts_sec, ts_usec, incl_len, orig_len = PCAP_RECORD.unpack_from(blob, off)
        off += PCAP_RECORD.size
        if off + incl_len > len(blob):
            raise ValueError("truncated record body")
        data = blob[off:off + incl_len]
        off += incl_len
        records.append({
            "ts": ts_sec + ts_usec / 1_000_000,
            "incl_len": incl_len,
            "orig_len": orig_len,
            "data": data,
        })
    return header, records


def parse_pcap_file(path: Path) -> tuple[dict, list[dict]]:
    return parse_pcap_bytes(Path(path).read_bytes())


def ones_complement_sum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def verify_ipv4_tcp_frame(frame: bytes) -> tuple[str, str, bytes]:
    """Independent raw-IP frame decoder with checksum verification.

    Returns (src "ip:port", dst "ip:port", payload); raises on any
    malformed or mis-checksummed field.
    """
    assert len(frame) >= 40, "frame shorter than IP+TCP headers"
    vihl = frame[0]
    assert vihl >> 4 == 4, "not IPv4"
    ihl = (vihl & 0xF) * 4
    assert ihl == 20, "unexpected IP options"
    total_len = struct.unpack("!H", frame[2:4])[0]
    assert total_len == len(frame), "IP total length mismatch"
    assert frame[9] == 6, "not TCP"
    assert ones_complement_sum(frame[:20]) == 0xFFFF, "bad IP checksum"
    src_ip = ".".join(str(b) for b in frame[12:16])
    dst_ip = ".".join(str(b) for b in frame[16:20])

    tcp = frame[20:]
    src_port, dst_port = struct.unpack("!HH", tcp[:4])
    data_off = (tcp[12] >> 4) * 4
    assert data_off == 20, "unexpected TCP options"
    payload = tcp[20:]
    pseudo = (frame[12:20] + b"\x00\x06" + struct.pack("!H", len(tcp)))
    assert ones_complement_sum(pseudo + tcp) == 0xFFFF, "bad TCP checksum"
    return (f"{src_ip}:{src_port}", f"{dst_ip}:{dst_port}", payload)
