"""H.264 encode/decode through an external ffmpeg process.

The adapter measures what the transmission model needs: raw and compressed
sizes, wall-clock encode time and the resulting compression bandwidth, plus
PSNR of the decoded output against the input.
"""
from __future__ import annotations

import json
import logging
import os
import re
import shlex
import shutil
import subprocess
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DecodeError, EmptyDatasetError, InputError, SubprocessError, ToolNotFoundError
from .media import VideoSequence, sequence_psnr

log = logging.getLogger(__name__)

CRF_MIN, CRF_MAX = 0, 51
ENCODER_ENV = "PAVC_FFMPEG"

DEFAULT_ENCODE_TEMPLATE = (
    "{ffmpeg} -hide_banner -loglevel error -nostdin -y -f rawvideo -pix_fmt rgb24 "
    "-s {width}x{height} -r {fps} -i {input} -c:v libx264 -preset {preset} -crf {crf} "
    "-pix_fmt {pix_fmt} -f mp4 {output}"
)
DEFAULT_DECODE_TEMPLATE = (
    "{ffmpeg} -hide_banner -nostdin -xerror -i {input} -f rawvideo -pix_fmt rgb24 -"
)


class Crf(int):
    """Constant rate factor, an integer in [0, 51]."""

    def __new__(cls, value):
        iv = int(value)
        if iv != value or not CRF_MIN <= iv <= CRF_MAX:
            raise InputError(f"CRF must be an integer in [{CRF_MIN}, {CRF_MAX}], got {value!r}")
        return super().__new__(cls, iv)


def find_encoder(explicit: Optional[str] = None) -> str:
    """Locate ffmpeg: explicit path, then $PAVC_FFMPEG, then PATH, then the
    binary bundled with the ``imageio-ffmpeg`` package."""
    for candidate in (explicit, os.environ.get(ENCODER_ENV)):
        if candidate:
            if shutil.which(candidate) or Path(candidate).is_file():
                return candidate
            raise ToolNotFoundError(f"encoder {candidate!r} does not exist")
    found = shutil.which("ffmpeg")
    if found:
        return found
    try:
        import imageio_ffmpeg

        return imageio_ffmpeg.get_ffmpeg_exe()
    except Exception:
        pass
    raise ToolNotFoundError(
        "no H.264 encoder found: install ffmpeg (with libx264), "
        f"`pip install imageio-ffmpeg`, or set ${ENCODER_ENV} to an ffmpeg binary"
    )


def encoder_available() -> bool:
    try:
        find_encoder()
        return True
    except ToolNotFoundError:
        return False


@dataclass
class EncoderConfig:
    executable: Optional[str] = None
    encode_template: str = DEFAULT_ENCODE_TEMPLATE
    decode_template: str = DEFAULT_DECODE_TEMPLATE
    preset: str = "medium"
    pix_fmt: str = "yuv444p"
    # "raw": S_org is the unencoded payload; "crf0": size of a CRF 0 encode
    s_org_mode: str = "raw"
    measure_psnr: bool = True

    def resolve(self) -> str:
        return find_encoder(self.executable)

    @classmethod
    def from_dict(cls, doc) -> "EncoderConfig":
        return cls(**{k: v for k, v in doc.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class EncodeRecord:
    crf: int
    original_bytes: int
    compressed_bytes: int
    encode_seconds: float
    compression_bandwidth: float  # MB/s, 1 MB = 1e6 bytes
    psnr_db: Optional[float]
    frame_count: int
    encoder: str = ""
    preset: str = ""

    def __post_init__(self):
        if self.compressed_bytes <= 0 or self.encode_seconds <= 0 or self.compression_bandwidth <= 0:
            raise InputError("encode record sizes, time and bandwidth must be positive")

    def to_json(self) -> str:
        doc = asdict(self)
        if doc["psnr_db"] is not None and doc["psnr_db"] == float("inf"):
            doc["psnr_db"] = "inf"
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EncodeRecord":
        doc = json.loads(line)
        if doc.get("psnr_db") == "inf":
            doc["psnr_db"] = float("inf")
        return cls(**doc)


def _render(template: str, **values) -> List[str]:
    return [tok.format(**values) for tok in shlex.split(template)]


def _run(cmd: List[str], what: str, error_cls=SubprocessError, stdin=None):
    try:
        proc = subprocess.run(cmd, input=stdin, capture_output=True)
    except FileNotFoundError as exc:
        raise ToolNotFoundError(f"{what}: cannot execute {cmd[0]!r}") from exc
    if proc.returncode != 0:
        tail = proc.stderr.decode(errors="replace").strip()[-2000:]
        raise error_cls(f"{what} failed with exit code {proc.returncode}: {tail}", proc.returncode, tail)
    return proc


def encode(seq: VideoSequence, crf, config: EncoderConfig = None) -> Tuple[bytes, EncodeRecord]:
    """Encode a sequence at ``crf``; returns the MP4 byte stream and its record.

    ``encode_seconds`` spans the encoder subprocess, spawn overhead included.
    """
    config = config or EncoderConfig()
    crf = Crf(crf)
    if len(seq) == 0:
        raise EmptyDatasetError("cannot encode an empty sequence")
    width, height, channels = seq.dims
    if channels != 3:
        raise InputError("the codec path needs 3-channel RGB frames")
    ffmpeg = config.resolve()
    with tempfile.TemporaryDirectory(prefix="pavc-enc-") as tmp:
        src = Path(tmp) / "input.rgb"
        dst = Path(tmp) / "output.mp4"
        src.write_bytes(seq.as_array().tobytes())
        cmd = _render(
            config.encode_template, ffmpeg=ffmpeg, input=str(src), output=str(dst), crf=int(crf),
            width=width, height=height, fps=seq.frame_rate, preset=config.preset, pix_fmt=config.pix_fmt,
        )
        start = time.perf_counter()
        _run(cmd, f"encode at CRF {int(crf)}")
        elapsed = time.perf_counter() - start
        data = dst.read_bytes()

    original = seq.raw_bytes
    if config.s_org_mode == "crf0":
        original = len(data) if int(crf) == 0 else len(encode(seq, 0, _without_psnr(config))[0])
    elif config.s_org_mode != "raw":
        raise InputError(f"unknown s_org_mode {config.s_org_mode!r}")

    quality = None
    if config.measure_psnr:
        quality = sequence_psnr(seq, decode(data, config, frame_rate=seq.frame_rate)).psnr_db
    record = EncodeRecord(
        crf=int(crf), original_bytes=original, compressed_bytes=len(data), encode_seconds=elapsed,
        compression_bandwidth=original / 1e6 / elapsed, psnr_db=quality, frame_count=len(seq),
        encoder=Path(ffmpeg).name + " libx264", preset=config.preset,
    )
    return data, record


def _without_psnr(config: EncoderConfig) -> EncoderConfig:
    return EncoderConfig(**{**asdict(config), "measure_psnr": False, "s_org_mode": "raw"})


_DIMS = re.compile(r"Video: .*?(\d{2,5})x(\d{2,5})")
_FPS = re.compile(r"(\d+(?:\.\d+)?) fps")


def decode(data: bytes, config: EncoderConfig = None, frame_rate: Optional[float] = None) -> VideoSequence:
    """Decode an encoded stream back to RGB frames; fails loudly on damage."""
    config = config or EncoderConfig()
    if not data:
        raise DecodeError("empty stream")
    ffmpeg = config.resolve()
    with tempfile.TemporaryDirectory(prefix="pavc-dec-") as tmp:
        src = Path(tmp) / "input.mp4"
        src.write_bytes(data)
        proc = _run(_render(config.decode_template, ffmpeg=ffmpeg, input=str(src)), "decode", DecodeError)
    info = proc.stderr.decode(errors="replace")
    m = _DIMS.search(info)
    if not m:
        raise DecodeError("decoder did not report frame dimensions")
    width, height = int(m.group(1)), int(m.group(2))
    frame_size = width * height * 3
    raw = proc.stdout
    if not raw or len(raw) % frame_size:
        raise DecodeError(f"decoder produced {len(raw)} bytes, not a whole number of {width}x{height} frames")
    if frame_rate is None:
        fm = _FPS.search(info)
        frame_rate = float(fm.group(1)) if fm else 30.0
    arr = np.frombuffer(raw, np.uint8).reshape(-1, height, width, 3)
    return VideoSequence.from_arrays(arr, frame_rate)


def crf_sweep(seq: VideoSequence, crfs: Sequence, config: EncoderConfig = None, out_path=None) -> List[EncodeRecord]:
    """One record per CRF in input order.

    With ``out_path`` every record is appended as a JSON line as soon as it
    exists, and CRFs already present in the file are reused, so an
    interrupted sweep resumes where it stopped.
    """
    if not crfs:
        raise InputError("empty CRF list")
    if len(seq) == 0:
        raise EmptyDatasetError("cannot sweep an empty sequence")
    done = {}
    if out_path is not None and Path(out_path).exists():
        for line in Path(out_path).read_text().splitlines():
            if line.strip():
                rec = EncodeRecord.from_json(line)
                done[rec.crf] = rec
    records = []
    fh = open(out_path, "a") if out_path is not None else None
    try:
        for crf in crfs:
            crf = Crf(crf)
            if int(crf) in done:
                records.append(done[int(crf)])
                continue
            try:
                _, rec = encode(seq, crf, config)
            except SubprocessError as exc:
                raise type(exc)(f"sweep failed at CRF {int(crf)}: {exc}", exc.returncode, exc.stderr) from exc
            records.append(rec)
            if fh:
                fh.write(rec.to_json() + "\n")
                fh.flush()
            log.info("crf %d: %d -> %d bytes", rec.crf, rec.original_bytes, rec.compressed_bytes)
    finally:
        if fh:
            fh.close()
    return records
