"""Black-box evaluator protocol over a child process.

Frames are length-prefixed binary: an 8-byte little-endian payload length,
then the payload. A request payload is (u32 magic, u32 batch count) followed
by one tensor record per input; a response mirrors it with, per input, a
tensor count and records named "seg_probs" and optionally "instance_map".
Tensor records reuse the container format, so a round trip is bit-exact.

The evaluator serializes concurrent callers through a lock, satisfying the
certification layer's concurrency contract with a single child.
"""

from __future__ import annotations

import struct
import subprocess
import threading
from typing import BinaryIO

import numpy as np

from .serialize import pack_tensor, unpack_tensor

REQUEST_MAGIC = 0x45515152   # "EQQR"
RESPONSE_MAGIC = 0x45515053  # "EQPS"

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class ProtocolError(RuntimeError):
    pass


class ChildFailedError(RuntimeError):
    """The child process crashed or broke the protocol."""


def write_frame(fh: BinaryIO, payload: bytes) -> None:
    fh.write(_U64.pack(len(payload)) + payload)
    fh.flush()


def read_frame(fh: BinaryIO) -> bytes:
    head = fh.read(8)
    if len(head) != 8:
        raise ChildFailedError("stream closed while reading frame header")
    (length,) = _U64.unpack(head)
    payload = fh.read(length)
    if len(payload) != length:
        raise ChildFailedError("stream closed mid-frame")
    return payload


def encode_request(batch: np.ndarray) -> bytes:
    import io
    buf = io.BytesIO()
    buf.write(_U32.pack(REQUEST_MAGIC))
    buf.write(_U32.pack(batch.shape[0]))
    for i in range(batch.shape[0]):
        pack_tensor(buf, "input", batch[i])
    return buf.getvalue()


def decode_request(payload: bytes) -> list[np.ndarray]:
    import io
    buf = io.BytesIO(payload)
    (magic,) = _U32.unpack(buf.read(4))
    if magic != REQUEST_MAGIC:
        raise ProtocolError(f"bad request magic 0x{magic:08x}")
    (count,) = _U32.unpack(buf.read(4))
    return [unpack_tensor(buf)[1] for _ in range(count)]


def encode_response(outputs: list[dict[str, np.ndarray]]) -> bytes:
    import io
    buf = io.BytesIO()
    buf.write(_U32.pack(RESPONSE_MAGIC))
    buf.write(_U32.pack(len(outputs)))
    for out in outputs:
        buf.write(_U32.pack(len(out)))
        for name, array in out.items():
            pack_tensor(buf, name, array)
    return buf.getvalue()


def decode_response(payload: bytes) -> list[dict[str, np.ndarray]]:
    import io
    buf = io.BytesIO(payload)
    (magic,) = _U32.unpack(buf.read(4))
    if magic != RESPONSE_MAGIC:
        raise ProtocolError(f"bad response magic 0x{magic:08x}")
    (count,) = _U32.unpack(buf.read(4))
    outputs = []
    for _ in range(count):
        (n_tensors,) = _U32.unpack(buf.read(4))
        record = {}
        for _ in range(n_tensors):
            name, array = unpack_tensor(buf)
            record[name] = array
        outputs.append(record)
    return outputs


class ExternalEvaluator:
    """Adapt a protocol-speaking child process to the evaluator interface.

    kind selects the metric-ready structure returned per input: "sbd" wants
    an instance map, "f_measure" a binary mask, "raw" the full record.
    """

    def __init__(self, argv: list[str], kind: str = "f_measure"):
        if kind not in ("sbd", "f_measure", "raw"):
            raise ValueError(f"unknown evaluator kind {kind!r}")
        self.kind = kind
        self.argv = list(argv)
        self._lock = threading.Lock()
        self._proc = subprocess.Popen(
            self.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)

    def __call__(self, batch: np.ndarray):
        batch = np.asarray(batch, dtype=np.float64)
        with self._lock:
            if self._proc.poll() is not None:
                raise ChildFailedError(
                    f"external evaluator exited with {self._proc.returncode}")
            try:
                write_frame(self._proc.stdin, encode_request(batch))
                payload = read_frame(self._proc.stdout)
            except (BrokenPipeError, OSError, ChildFailedError) as exc:
                raise ChildFailedError(f"external evaluator failed: {exc}") from exc
        records = decode_response(payload)
        if len(records) != batch.shape[0]:
            raise ProtocolError("response count does not match request")
        return [self._to_output(r) for r in records]

    def _to_output(self, record: dict[str, np.ndarray]):
        if self.kind == "raw":
            return record
        if self.kind == "sbd":
            if "instance_map" not in record:
                raise ProtocolError("evaluator response lacks instance_map")
            return record["instance_map"].astype(np.int64)
        if "seg_probs" not in record:
            raise ProtocolError("evaluator response lacks seg_probs")
        return record["seg_probs"] > 0.5

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False
