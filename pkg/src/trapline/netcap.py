"""Per-session traffic capture.

Every packet a session's environment sends or receives is offered to every
live capture; each capture's filter keeps only traffic whose source or
destination address is that environment's network identity, and the accepted
records are persisted as a classic pcap file any conformant reader opens.

File layout (bit-exact, all little-endian):

    global header, 24 bytes: magic 0xa1b2c3d4, version 2.4, thiszone 0,
        sigfigs 0, snaplen 65535, linktype 101 (raw IP)
    per record, 16 bytes: ts_sec, ts_usec, incl_len, orig_len; then payload

Payloads are raw IPv4 frames. In the scripted driver packets are synthesized
from the relay and outbound-connection paths (IPv4 + TCP headers with valid
checksums around the observed bytes); a real-interface capture hook would
produce the same file format.
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path

PCAP_MAGIC = 0xA1B2C3D4
PCAP_VERSION = (2, 4)
LINKTYPE_RAW = 101
SNAPLEN = 65535

_GLOBAL_HDR = struct.Struct("<IHHiIII")
_RECORD_HDR = struct.Struct("<IIII")


class CaptureError(Exception):
    pass


# -- frame synthesis ----------------------------------------------------

def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _pack_addr(endpoint: str) -> tuple[bytes, int]:
    ip, _, port = endpoint.rpartition(":")
    return bytes(int(o) for o in ip.split(".")), int(port)


def build_frame(src: str, dst: str, data: bytes) -> bytes:
    """Minimal IPv4+TCP frame (PSH|ACK) carrying `data` between the two
    "ip:port" endpoints, with valid header checksums."""
    src_ip, src_port = _pack_addr(src)
    dst_ip, dst_port = _pack_addr(dst)
    tcp_len = 20 + len(data)
    ip_hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + tcp_len, 0, 0, 64, 6, 0,
                         src_ip, dst_ip)
    ip_hdr = ip_hdr[:10] + struct.pack("!H", _checksum(ip_hdr)) + ip_hdr[12:]
    tcp_hdr = struct.pack("!HHIIBBHHH", src_port, dst_port, 0, 0, 0x50, 0x18,
                          65535, 0, 0)
    pseudo = src_ip + dst_ip + struct.pack("!BBH", 0, 6, tcp_len)
    tcp_sum = _checksum(pseudo + tcp_hdr + data)
    tcp_hdr = tcp_hdr[:16] + struct.pack("!H", tcp_sum) + tcp_hdr[18:]
    return ip_hdr + tcp_hdr + data


def parse_frame(frame: bytes) -> tuple[str, str, bytes]:
    """Recover (src "ip:port", dst "ip:port", payload) from an IPv4+TCP frame."""
    if len(frame) < 40 or frame[0] >> 4 != 4:
        raise CaptureError("not an IPv4+TCP frame")
    ihl = (frame[0] & 0x0F) * 4
    src_ip = ".".join(str(b) for b in frame[12:16])
    dst_ip = ".".join(str(b) for b in frame[16:20])
    sport, dport = struct.unpack("!HH", frame[ihl:ihl + 4])
    data_off = ihl + ((frame[ihl + 12] >> 4) * 4)
    return f"{src_ip}:{sport}", f"{dst_ip}:{dport}", frame[data_off:]


# -- records and filters -------------------------------------------------

@dataclass(frozen=True)
class PacketRecord:
    ts: float
    payload: bytes  # captured frame bytes (possibly snaplen-truncated)
    original_len: int
    direction: str  # inbound | outbound
    src: str  # "ip:port"
    dst: str

    @property
    def captured_len(self) -> int:
        return len(self.payload)

    def __post_init__(self) -> None:
        if self.captured_len > self.original_len:
            raise CaptureError("captured_len exceeds original_len")


def synthesize_packet(ts: float, src: str, dst: str, data: bytes,
                      direction: str, snaplen: int = SNAPLEN) -> PacketRecord:
    frame = build_frame(src, dst, data)
    return PacketRecord(ts=ts, payload=frame[:snaplen], original_len=len(frame),
                        direction=direction, src=src, dst=dst)


@dataclass(frozen=True)
class CaptureFilter:
    """Session-constant predicate: keep a packet iff either endpoint address
    is the environment's network identity."""

    net_identity: str

    def matches(self, record: PacketRecord) -> bool:
        return (record.src.rsplit(":", 1)[0] == self.net_identity
                or record.dst.rsplit(":", 1)[0] == self.net_identity)


def filter_packet(flt: CaptureFilter, record: PacketRecord) -> bool:
    return flt.matches(record)


# -- capture handles ------------------------------------------------------

@dataclass(frozen=True)
class CaptureSummary:
    path: str
    packet_count: int
    byte_count: int


class CaptureHandle:
    """One open pcap output per session. Appends are serialized per handle;
    a write failure marks the capture degraded (later records are counted as
    dropped) instead of killing the session."""

    def __init__(self, session_id: str, flt: CaptureFilter, path: Path,
                 on_degraded=None, snaplen: int = SNAPLEN) -> None:
        self.session_id = session_id
        self.filter = flt
        self.path = Path(path)
        self.snaplen = snaplen
        self.packet_count = 0
        self.byte_count = 0
        self.dropped = 0
        self.degraded = False
        self._on_degraded = on_degraded
        self._last_ts = 0.0
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "wb")
        self._fh.write(_GLOBAL_HDR.pack(PCAP_MAGIC, *PCAP_VERSION, 0, 0,
                                        self.snaplen, LINKTYPE_RAW))
        self._fh.flush()

    def append(self, record: PacketRecord) -> None:
        with self._lock:
            if self._fh is None:
                raise CaptureError("capture already finalized")
            if self.degraded:
                self.dropped += 1
                return
            ts = max(record.ts, self._last_ts)  # keep file timestamps monotone
            self._last_ts = ts
            ts_sec = int(ts)
            ts_usec = int(round((ts - ts_sec) * 1_000_000))
            if ts_usec >= 1_000_000:
                ts_sec, ts_usec = ts_sec + 1, ts_usec - 1_000_000
            payload = record.payload[: self.snaplen]
            try:
                self._fh.write(_RECORD_HDR.pack(ts_sec, ts_usec, len(payload),
                                                record.original_len))
                self._fh.write(payload)
                self._fh.flush()
            except OSError as exc:
                self.degraded = True
                self.dropped += 1
                if self._on_degraded is not None:
                    self._on_degraded(self, exc)
                return
            self.packet_count += 1
            self.byte_count += len(payload)

    def offer(self, record: PacketRecord) -> bool:
        if filter_packet(self.filter, record):
            self.append(record)
            return True
        return False

    def finalize(self) -> CaptureSummary:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None
            return CaptureSummary(str(self.path), self.packet_count, self.byte_count)


def open_capture(session_id: str, net_identity: str, artifact_dir: Path | str,
                 on_degraded=None) -> CaptureHandle:
    path = Path(artifact_dir) / f"{session_id}.pcap"
    return CaptureHandle(session_id, CaptureFilter(net_identity), path,
                         on_degraded=on_degraded)


class CaptureHub:
    """Shared medium: every generated packet is offered to every live
    capture, and each capture's filter selects its own session's traffic."""

    def __init__(self) -> None:
        self._handles: list[CaptureHandle] = []
        self._lock = threading.Lock()

    def register(self, handle: CaptureHandle) -> None:
        with self._lock:
            self._handles.append(handle)

    def unregister(self, handle: CaptureHandle) -> None:
        with self._lock:
            if handle in self._handles:
                self._handles.remove(handle)

    def offer(self, record: PacketRecord) -> int:
        with self._lock:
            handles = list(self._handles)
        return sum(1 for h in handles if h.offer(record))


# -- reading ---------------------------------------------------------------

@dataclass(frozen=True)
class PcapRecord:
    ts_sec: int
    ts_usec: int
    incl_len: int
    orig_len: int
    payload: bytes


def read_pcap(path: Path | str) -> tuple[dict, list[PcapRecord]]:
    """Parse a capture file; returns (global header fields, records)."""
    raw = Path(path).read_bytes()
    if len(raw) < _GLOBAL_HDR.size:
        raise CaptureError("truncated pcap: missing global header")
    magic, vmaj, vmin, zone, sigfigs, snaplen, network = _GLOBAL_HDR.unpack_from(raw)
    if magic != PCAP_MAGIC:
        raise CaptureError(f"bad pcap magic: {magic:#x}")
    header = {"version": (vmaj, vmin), "snaplen": snaplen, "linktype": network}
    records = []
    off = _GLOBAL_HDR.size
    while off < len(raw):
        if off + _RECORD_HDR.size > len(raw):
            raise CaptureError("truncated pcap record header")
        ts_sec, ts_usec, incl, orig = _RECORD_HDR.unpack_from(raw, off)
        off += _RECORD_HDR.size
        if off + incl > len(raw):
            raise CaptureError("truncated pcap record payload")
        records.append(PcapRecord(ts_sec, ts_usec, incl, orig, raw[off:off + incl]))
        off += incl
    return header, records
