import hashlib
import math
import socket
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import requires_encoder
from pavc.errors import IncompleteMessage, InputError, ProtocolError, SessionError, VersionError
from pavc.transport import (FLAG_BASELINE, FLAG_CLIP, FLAG_END, HEADER_SIZE, RAW_CRF, FrameMessage, Receiver,
                            SenderConfig, TokenBucket, decode_message, encode_message, pack_raw_frame,
                            parse_endpoint, run_sender, throttled_send, unpack_raw_frame)


def test_header_layout():
    data = encode_message(FrameMessage(4, 21, 7, b"\xaa\xbb", FLAG_CLIP))
    assert len(data) == HEADER_SIZE + 2 == 18
    assert data[:4] == b"PAVC" and data[4] == 1 and data[5] == 0x04 and data[6] == 21
    assert data[7] == FLAG_CLIP and data[8:12] == b"\x00\x00\x00\x07" and data[12:16] == b"\x00\x00\x00\x02"


messages = st.builds(
    FrameMessage,
    condition=st.integers(0, 6),
    crf=st.one_of(st.integers(0, 51), st.just(RAW_CRF)),
    frame_index=st.integers(0, 2**32 - 1),
    payload=st.binary(max_size=300),
    flags=st.integers(0, 255),
)


@settings(max_examples=300)
@given(messages)
def test_round_trip(m):
    data = encode_message(m)
    back, end = decode_message(data)
    assert back == m and end == len(data)
    assert encode_message(back) == data


@given(st.lists(messages, min_size=1, max_size=6))
def test_concatenated_stream(ms):
    buf = b"".join(encode_message(m) for m in ms)
    off, out = 0, []
    while off < len(buf):
        m, off = decode_message(buf, off)
        out.append(m)
    assert out == ms


def test_malformed_headers():
    good = encode_message(FrameMessage(0, 40, 0, b"xyz"))
    with pytest.raises(ProtocolError):
        decode_message(b"XXXX" + good[4:])
    with pytest.raises(VersionError):
        decode_message(good[:4] + b"\x02" + good[5:])
    with pytest.raises(IncompleteMessage) as info:
        decode_message(good[:-1])
    assert info.value.needed == 1
    with pytest.raises(IncompleteMessage):
        decode_message(good[:10])
    with pytest.raises(ProtocolError):
        decode_message(good[:5] + b"\x09" + good[6:])


def test_validation():
    for bad in (FrameMessage(7, 0, 0), FrameMessage(0, 52, 0), FrameMessage(0, 0, -1), FrameMessage(0, 0, 2**32)):
        with pytest.raises(InputError):
            encode_message(bad)


def test_raw_frame_payload():
    px = np.arange(5 * 3 * 3, dtype=np.uint8).reshape(5, 3, 3)
    payload = pack_raw_frame(px)
    assert payload[:5] == b"\x00\x03\x00\x05\x03"
    assert np.array_equal(unpack_raw_frame(payload), px)
    with pytest.raises(ProtocolError):
        unpack_raw_frame(payload[:-1])


def test_parse_endpoint():
    assert parse_endpoint("10.0.0.2:9000") == ("10.0.0.2", 9000)
    assert parse_endpoint(":9000") == ("127.0.0.1", 9000)
    with pytest.raises(InputError):
        parse_endpoint("nohost")


class FakeClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t

    def sleep(self, dt):
        self.t += dt


def test_token_bucket_rate_with_fake_clock():
    clock = FakeClock()
    bucket = TokenBucket(1000.0, 100, clock, clock.sleep)
    for _ in range(50):
        bucket.consume(100)
    assert clock.t == pytest.approx(5.0, rel=1e-9)


def _sink():
    """Loopback listener that drains everything and closes at EOF."""
    srv = socket.create_server(("127.0.0.1", 0))
    got = {"bytes": 0}

    def run():
        conn, _ = srv.accept()
        with conn:
            while chunk := conn.recv(65536):
                got["bytes"] += len(chunk)
        srv.close()

    t = threading.Thread(target=run, daemon=True)
    t.start()
    return srv.getsockname(), t, got


def _send(payload_bytes, rate):
    addr, t, got = _sink()
    msgs = [FrameMessage(0, RAW_CRF, 0, b"\0" * (payload_bytes - HEADER_SIZE))]
    with socket.create_connection(addr) as s:
        rec = throttled_send(msgs, rate, s)
    t.join(5)
    assert got["bytes"] == rec.bytes_sent == payload_bytes
    return rec


@pytest.mark.slow
def test_paced_send_hits_rate():
    rec = _send(65_000, 0.52)
    assert rec.wall_seconds == pytest.approx(1.0, rel=0.10)
    assert rec.effective_throughput == pytest.approx(0.52, rel=0.10)


def test_unthrottled_send_is_fast():
    rec = _send(1_000_000, math.inf)
    assert rec.wall_seconds < 2.0


def test_rejects_bad_rate():
    with pytest.raises(InputError):
        throttled_send([], 0, None)


def _session(config, clip, **rx):
    rx = Receiver("127.0.0.1:0", **rx)
    t = rx.serve_in_thread()
    config.dest = "%s:%d" % rx.address
    report = run_sender(config, clip=clip)
    t.join(10)
    return report, rx.report


@requires_encoder
def test_sunny_session(clip, tmp_path):
    sent, got = _session(SenderConfig("", math.inf, condition=0), clip, out_dir=tmp_path)
    assert got["condition"] == 0 and got["crf"] == 40 and not got["baseline"]
    assert got["clip_sha256"] == [sent["clip_sha256"]]
    assert got["frames"] == len(clip)
    assert (tmp_path / "frames" / "manifest.json").exists()
    assert sent["s_comp_bytes"] < sent["s_org_bytes"]
    # no model parameters for an unpaced link
    assert "perf_params" not in sent


def test_bypass_session_sends_raw(clip):
    sent, got = _session(SenderConfig("", math.inf, condition=6), clip)
    assert got["crf"] == RAW_CRF == sent["crf"]
    assert got["frame_indices"] == list(range(len(clip)))
    assert got["frames"] == len(clip)
    assert sent["s_comp_bytes"] == clip.raw_bytes + 5 * len(clip)


def test_baseline_session_is_flagged(clip):
    sent, got = _session(SenderConfig("", math.inf, baseline=True), clip)
    assert got["baseline"] and got["frame_indices"] == list(range(len(clip)))


def test_classifier_driven_session(clip, small_model, tmp_path):
    path = small_model.save(tmp_path / "model.json")
    sent, got = _session(SenderConfig("", math.inf, classifier_path=str(path), encoder={}), clip,
                         decode_clips=False)
    assert sent["condition"] == 0 and "classify" in sent["completed"]


def test_connect_failure_reports_stage(clip):
    srv = socket.create_server(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    srv.close()
    with pytest.raises(SessionError) as info:
        run_sender(SenderConfig(f"127.0.0.1:{port}", 1.0, condition=6), clip=clip)
    assert info.value.report["failed_stage"] == "connect"


def test_receiver_rejects_garbage():
    rx = Receiver("127.0.0.1:0")
    t = threading.Thread(target=lambda: pytest.raises(SessionError, rx.serve), daemon=True)
    t.start()
    with socket.create_connection(rx.address) as s:
        s.sendall(b"GARBAGE-GARBAGE-GARBAGE")
    t.join(5)
    assert rx.report["failed_stage"] == "receive"
