"""Wire format, token-bucket pacing and the camera/processor sessions.

Every message on the stream is a 16-byte big-endian header followed by the
payload::

    offset  size  field
    0       4     magic b"PAVC"
    4       1     version (1)
    5       1     condition code 0-6
    6       1     CRF 0-51, or 255 for raw frames
    7       1     flags (FLAG_*)
    8       4     frame index, uint32
    12      4     payload length, uint32

A raw-frame payload is ``uint16 width, uint16 height, uint8 channels``
followed by row-major 8-bit RGB samples. An encoded-clip payload (FLAG_CLIP)
is the encoder's MP4 byte stream, and its frame index is that of the
clip's first frame.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import socket
import struct
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from .errors import (IncompleteMessage, InputError, PavcError, ProtocolError, SessionError,
                     TransportError, VersionError)

log = logging.getLogger(__name__)

MAGIC = b"PAVC"
VERSION = 1
HEADER = struct.Struct(">4sBBBBII")
HEADER_SIZE = HEADER.size
RAW_CRF = 255
MAX_CONDITION = 6

FLAG_CLIP = 0x01
FLAG_END = 0x02
FLAG_BASELINE = 0x04

RAW_HEADER = struct.Struct(">HHB")
DEFAULT_QUANTUM = 4096


@dataclass(frozen=True)
class FrameMessage:
    condition: int
    crf: int
    frame_index: int
    payload: bytes = b""
    flags: int = 0
    version: int = VERSION

    @property
    def is_raw(self) -> bool:
        return self.crf == RAW_CRF

    @property
    def is_end(self) -> bool:
        return bool(self.flags & FLAG_END)

    def validate(self):
        if not 0 <= self.condition <= MAX_CONDITION:
            raise InputError(f"condition must be 0-{MAX_CONDITION}, got {self.condition}")
        if not (0 <= self.crf <= 51 or self.crf == RAW_CRF):
            raise InputError(f"crf must be 0-51 or {RAW_CRF}, got {self.crf}")
        if not 0 <= self.flags <= 0xFF or not 0 <= self.version <= 0xFF:
            raise InputError("flags and version are single bytes")
        if not 0 <= self.frame_index < 2**32:
            raise InputError("frame_index must fit in 32 bits")
        if len(self.payload) >= 2**32:
            raise InputError("payload too large")


def encode_message(m: FrameMessage) -> bytes:
    m.validate()
    payload = bytes(m.payload)
    return HEADER.pack(MAGIC, m.version, m.condition, m.crf, m.flags, m.frame_index, len(payload)) + payload


def decode_message(buf, offset: int = 0) -> Tuple[FrameMessage, int]:
    """Decode one message from ``buf[offset:]``; returns it with the offset just
    past it. Raises IncompleteMessage when more bytes are needed."""
    avail = len(buf) - offset
    if avail < HEADER_SIZE:
        if avail >= 4 and bytes(buf[offset:offset + 4]) != MAGIC:
            raise ProtocolError("bad magic")
        raise IncompleteMessage(HEADER_SIZE - avail)
    magic, version, condition, crf, flags, index, length = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported protocol version {version}")
    if condition > MAX_CONDITION or (crf > 51 and crf != RAW_CRF):
        raise ProtocolError(f"invalid header fields: condition={condition} crf={crf}")
    end = HEADER_SIZE + length
    if avail < end:
        raise IncompleteMessage(end - avail)
    msg = FrameMessage(condition, crf, index, bytes(buf[offset + HEADER_SIZE:offset + end]), flags, version)
    return msg, offset + end


def pack_raw_frame(pixels: np.ndarray) -> bytes:
    h, w, c = pixels.shape
    return RAW_HEADER.pack(w, h, c) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def unpack_raw_frame(payload: bytes) -> np.ndarray:
    if len(payload) < RAW_HEADER.size:
        raise ProtocolError("raw frame payload shorter than its header")
    w, h, c = RAW_HEADER.unpack_from(payload)
    body = payload[RAW_HEADER.size:]
    if len(body) != w * h * c:
        raise ProtocolError(f"raw frame of {w}x{h}x{c} has {len(body)} sample bytes")
    return np.frombuffer(body, np.uint8).reshape(h, w, c)


# -- pacing -----------------------------------------------------------------------


class TokenBucket:
    """Byte-rate limiter. Starts empty so pacing begins at the first byte."""

    def __init__(self, rate_bytes: float, capacity: int, clock=time.monotonic, sleep=time.sleep):
        if rate_bytes <= 0:
            raise InputError("token bucket rate must be positive")
        self.rate = rate_bytes
        self.capacity = capacity
        self.tokens = 0.0
        self._clock = clock
        self._sleep = sleep
        self._stamp = clock()

    def _refill(self):
        now = self._clock()
        self.tokens = min(self.capacity, self.tokens + (now - self._stamp) * self.rate)
        self._stamp = now

    def consume(self, n: int):
        """Block until ``n`` tokens (n <= capacity) are available, then take them."""
        if n > self.capacity:
            raise InputError(f"request of {n} exceeds bucket capacity {self.capacity}")
        self._refill()
        # tolerance: float refills can stall a hair below n forever
        while self.tokens < n - 1e-9 * n:
            self._sleep((n - self.tokens) / self.rate)
            self._refill()
        self.tokens = max(0.0, self.tokens - n)


@dataclass
class TransmissionRecord:
    bytes_sent: int
    wall_seconds: float
    link_rate_config: float  # Mbit/s; inf means unthrottled
    messages: int = 0

    @property
    def effective_throughput(self) -> float:
        """Mbit/s."""
        return self.bytes_sent * 8 / 1e6 / self.wall_seconds if self.wall_seconds > 0 else math.inf

    def to_dict(self):
        rate = self.link_rate_config
        return {
            "bytes_sent": self.bytes_sent,
            "wall_seconds": self.wall_seconds,
            "effective_throughput_mbps": self.effective_throughput,
            "link_rate_mbps": None if math.isinf(rate) else rate,
            "messages": self.messages,
        }


def throttled_send(messages: Iterable[FrameMessage], link_rate: float, sock: socket.socket,
                   quantum: int = DEFAULT_QUANTUM, wait_for_close: bool = True) -> TransmissionRecord:
    """Send messages paced to ``link_rate`` Mbit/s (``math.inf`` disables pacing).

    With ``wait_for_close`` the clock stops when the receiver closes its end,
    so the time covers delivery, not just handing bytes to the kernel.
    """
    if not link_rate > 0:
        raise InputError("link rate must be positive")
    bucket = None if math.isinf(link_rate) else TokenBucket(link_rate * 1e6 / 8, quantum)
    record = TransmissionRecord(0, 0.0, link_rate)
    start = time.perf_counter()
    try:
        for m in messages:
            data = memoryview(encode_message(m))
            for pos in range(0, len(data), quantum):
                chunk = data[pos:pos + quantum]
                if bucket:
                    bucket.consume(len(chunk))
                sock.sendall(chunk)
                record.bytes_sent += len(chunk)
            record.messages += 1
    except OSError as exc:
        record.wall_seconds = time.perf_counter() - start
        raise TransportError(f"send failed after {record.bytes_sent} bytes: {exc}", record) from exc
    if wait_for_close:
        # the peer may already have closed after the end marker
        try:
            sock.shutdown(socket.SHUT_WR)
            while sock.recv(4096):
                pass
        except OSError:
            pass
    record.wall_seconds = time.perf_counter() - start
    return record


def read_messages(sock: socket.socket, bufsize: int = 65536) -> Iterator[FrameMessage]:
    """Yield messages from a stream until FLAG_END or EOF."""
    buf = bytearray()
    while True:
        try:
            msg, used = decode_message(buf)
        except IncompleteMessage:
            chunk = sock.recv(bufsize)
            if not chunk:
                if buf:
                    raise ProtocolError(f"stream closed inside a message ({len(buf)} bytes pending)")
                return
            buf += chunk
            continue
        del buf[:used]
        yield msg
        if msg.is_end:
            return


def parse_endpoint(text: str) -> Tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise InputError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


# -- sessions ----------------------------------------------------------------------


@dataclass
class SenderConfig:
    dest: str
    link_rate: float  # Mbit/s
    policy_path: Optional[str] = None
    classifier_path: Optional[str] = None
    clip_manifest: Optional[str] = None
    baseline: bool = False
    condition: Optional[int] = None  # skip classification when set
    quantum: int = DEFAULT_QUANTUM
    encoder: Optional[dict] = None
    connect_timeout: float = 10.0


def _raw_messages(seq, condition: int, flags: int) -> List[FrameMessage]:
    return [FrameMessage(condition, RAW_CRF, f.index, pack_raw_frame(f.pixels), flags) for f in seq]


def run_sender(config: SenderConfig, clip=None) -> dict:
    """classify -> decide -> encode or bypass -> paced send.

    ``clip`` (a VideoSequence) overrides ``config.clip_manifest``. Returns a
    session report; a failing stage raises SessionError carrying the partial
    report.
    """
    from .augment import ConditionLabel
    from .classifier import ClassifierModel, timed_classify
    from .codec import EncoderConfig, encode
    from .media import load_sequence
    from .perfmodel import PerfParams
    from .policy import Bypass, CrfPolicy, decide_compression, paper_default_policy
    from .scenes import synthetic_clip

    report = {"role": "sender", "mode": "baseline" if config.baseline else "pavc",
              "stages": {}, "completed": []}

    def stage(name, fn):
        start = time.perf_counter()
        try:
            out = fn()
        except PavcError as exc:
            report["failed_stage"] = name
            raise SessionError(f"sender stage {name!r} failed: {exc}", report) from exc
        except OSError as exc:
            report["failed_stage"] = name
            raise SessionError(f"sender stage {name!r} failed: {exc}", report) from exc
        report["stages"][f"{name}_s"] = time.perf_counter() - start
        report["completed"].append(name)
        return out

    if clip is None:
        clip = stage("load", lambda: load_sequence(config.clip_manifest) if config.clip_manifest else synthetic_clip())
    s_org = clip.raw_bytes
    report["frames"] = len(clip)
    report["s_org_bytes"] = s_org

    t_wd = 0.0
    if config.baseline:
        condition = int(config.condition or 0)
        messages = _raw_messages(clip, condition, FLAG_BASELINE)
        crf_byte = RAW_CRF
    else:
        if config.condition is not None:
            condition = int(config.condition)
        else:
            model = stage("load_classifier", lambda: ClassifierModel.load(config.classifier_path))
            label, _, t_wd = stage("classify", lambda: timed_classify(model, clip[0]))
            condition = int(label)
        policy = (CrfPolicy.load(config.policy_path) if config.policy_path else paper_default_policy())
        decision = decide_compression(policy, condition)
        if isinstance(decision, Bypass):
            messages = _raw_messages(clip, condition, 0)
            crf_byte = RAW_CRF
        else:
            enc_cfg = EncoderConfig.from_dict(config.encoder or {})
            enc_cfg.measure_psnr = False
            data, rec = stage("encode", lambda: encode(clip, decision.crf, enc_cfg))
            messages = [FrameMessage(condition, decision.crf, clip[0].index, data, FLAG_CLIP)]
            crf_byte = decision.crf
            report["encode_record"] = json.loads(rec.to_json())
            report["clip_sha256"] = hashlib.sha256(data).hexdigest()
    report["condition"] = condition
    report["condition_name"] = ConditionLabel(condition).slug
    report["crf"] = crf_byte
    report["s_comp_bytes"] = sum(len(m.payload) for m in messages)
    messages.append(FrameMessage(condition, crf_byte, len(clip), b"", FLAG_END | (FLAG_BASELINE if config.baseline else 0)))

    host, port = parse_endpoint(config.dest)
    sock = stage("connect", lambda: socket.create_connection((host, port), timeout=config.connect_timeout))
    sock.settimeout(None)
    try:
        record = stage("transmit", lambda: throttled_send(messages, config.link_rate, sock, config.quantum))
    finally:
        sock.close()
    report["transmission"] = record.to_dict()
    report["link_rate_mbps"] = config.link_rate
    st = report["stages"]
    report["total_s"] = st.get("classify_s", 0.0) + st.get("encode_s", 0.0) + st["transmit_s"]
    if not config.baseline and "encode_s" in st and math.isfinite(config.link_rate):
        report["perf_params"] = PerfParams(
            s_org, max(1, report["s_comp_bytes"]), config.link_rate,
            s_org / 1e6 / st["encode_s"], t_wd,
        ).to_dict()
    return report


class Receiver:
    """Accepts one session. Binding happens in the constructor so callers can
    read ``address`` (useful with port 0) before starting ``serve``."""

    def __init__(self, listen: str = "127.0.0.1:0", out_dir=None, detector=None, decode_clips: bool = True,
                 timeout: Optional[float] = None):
        host, port = parse_endpoint(listen)
        self._srv = socket.create_server((host, port))
        self._srv.settimeout(timeout)
        self.address = self._srv.getsockname()[:2]
        self.out_dir = Path(out_dir) if out_dir else None
        self.detector = detector
        self.decode_clips = decode_clips
        self.report: Optional[dict] = None

    def serve(self) -> dict:
        from .augment import ConditionLabel
        from .codec import decode
        from .media import VideoSequence, save_sequence

        report = {"role": "receiver", "completed": []}
        try:
            conn, peer = self._srv.accept()
        finally:
            self._srv.close()
        start = time.perf_counter()
        frames, clips, messages = [], [], []
        received = 0
        try:
            with conn:
                for m in read_messages(conn):
                    received += HEADER_SIZE + len(m.payload)
                    messages.append((m.condition, m.crf, m.frame_index, m.flags))
                    if m.is_end:
                        break
                    if m.flags & FLAG_CLIP:
                        clips.append(m.payload)
                    elif m.is_raw:
                        frames.append(unpack_raw_frame(m.payload))
                wall = time.perf_counter() - start
        except (OSError, ProtocolError) as exc:
            report["failed_stage"] = "receive"
            self.report = report
            raise SessionError(f"receive failed: {exc}", report) from exc
        report["completed"].append("receive")
        report["wall_seconds"] = wall
        report["bytes_received"] = received
        report["messages"] = len(messages)
        report["frame_indices"] = [idx for _, _, idx, flags in messages if not flags & FLAG_END]
        if messages:
            report["condition"] = messages[0][0]
            report["condition_name"] = ConditionLabel(messages[0][0]).slug
            report["crf"] = messages[0][1]
            report["baseline"] = bool(messages[0][3] & FLAG_BASELINE)
        report["clip_sha256"] = [hashlib.sha256(c).hexdigest() for c in clips]

        if clips and self.decode_clips:
            try:
                for c in clips:
                    frames.extend(f.pixels for f in decode(c))
            except PavcError as exc:
                report["failed_stage"] = "decode"
                self.report = report
                raise SessionError(f"decode failed: {exc}", report) from exc
            report["completed"].append("decode")
        report["frames"] = len(frames)

        if self.out_dir and frames:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            save_sequence(VideoSequence.from_arrays(frames), self.out_dir / "frames")
            report["completed"].append("store")
            if self.detector is not None:
                from .detection import run_detector_adapter

                try:
                    run_detector_adapter(self.detector, self.out_dir / "frames", self.out_dir / "detections")
                except PavcError as exc:
                    report["failed_stage"] = "detect"
                    self.report = report
                    raise SessionError(f"detector failed: {exc}", report) from exc
                report["completed"].append("detect")
        self.report = report
        if self.out_dir:
            (self.out_dir / "receiver_report.json").write_text(json.dumps(report, indent=2))
        return report

    def serve_in_thread(self) -> threading.Thread:
        def target():
            try:
                self.serve()
            except SessionError as exc:
                log.error("%s", exc)

        t = threading.Thread(target=target, daemon=True)
        t.start()
        return t


def run_receiver(listen: str, out_dir=None, detector=None, on_ready: Callable = None) -> dict:
    rx = Receiver(listen, out_dir, detector)
    if on_ready:
        on_ready(rx.address)
    return rx.serve()
