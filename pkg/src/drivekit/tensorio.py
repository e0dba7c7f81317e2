"""Binary tensor container, deterministic JSON emission, and sequence manifests.

Container layout (all integers little-endian):

    bytes 0..3    magic "LFGT"
    bytes 4..7    format version (uint32, currently 1)
    bytes 8..11   dtype code (uint32: 1=float32, 2=uint8, 3=int32)
    bytes 12..15  ndim (uint32)
    then          ndim shape entries (uint64 each)
    then          payload, row-major

Write -> read -> write round-trips are byte-identical. Invalid pixels in
point maps and depth maps are stored as NaN; validity grids are recovered
as the finite entries on load.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import PointMap, Pose
from .metrics import DepthMap, LabelMap

MAGIC = b"LFGT"
FORMAT_VERSION = 1

_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("|u1"), 3: np.dtype("<i4")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.uint8): 2, np.dtype(np.int32): 3}

FRAME_RATES_HZ = (2, 5, 10)
MODALITIES = ("point_map", "pose", "semantic", "confidence", "motion", "depth", "label")


def _atomic_write_bytes(path: str, data: bytes) -> None:
    # no partial files on failure: write to a sibling temp file, then rename
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(array: np.ndarray, path: str) -> None:
    """Serialize an array; dtype must be float32, uint8, or int32."""
    arr = np.ascontiguousarray(array)
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise ValidationError("bad_dtype", f"unsupported dtype {arr.dtype}; use float32, uint8, or int32")
    header = MAGIC + struct.pack("<III", FORMAT_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    _atomic_write_bytes(path, header + payload)


def read_tensor(path: str, dtype: np.dtype | None = None, ndim: int | None = None) -> np.ndarray:
    """Read a tensor file, optionally enforcing the caller's dtype/rank expectation."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise ValidationError("bad_magic", f"{path}: not a tensor container (bad magic)")
    if len(data) < 16:
        raise ValidationError("truncated_payload", f"{path}: header is truncated")
    version, code, rank = struct.unpack_from("<III", data, 4)
    if version != FORMAT_VERSION:
        raise ValidationError("bad_version", f"{path}: unsupported format version {version}")
    if code not in _CODE_TO_DTYPE:
        raise ValidationError("bad_dtype", f"{path}: unknown dtype code {code}")
    offset = 16
    if len(data) < offset + 8 * rank:
        raise ValidationError("truncated_payload", f"{path}: shape header is truncated")
    shape = struct.unpack_from(f"<{rank}Q", data, offset)
    offset += 8 * rank
    stored = _CODE_TO_DTYPE[code]
    expected = int(np.prod(shape, dtype=np.int64)) * stored.itemsize
    actual = len(data) - offset
    if actual < expected:
        raise ValidationError("truncated_payload", f"{path}: payload has {actual} bytes, expected {expected}")
    if actual > expected:
        raise ValidationError("trailing_bytes", f"{path}: {actual - expected} unexpected trailing bytes")
    if dtype is not None and stored != np.dtype(dtype).newbyteorder("<"):
        raise ValidationError("dtype_mismatch", f"{path}: stored dtype {stored} does not match expected {np.dtype(dtype)}")
    if ndim is not None and rank != ndim:
        raise ValidationError("ndim_mismatch", f"{path}: stored rank {rank} does not match expected {ndim}")
    return np.frombuffer(data, dtype=stored, count=int(np.prod(shape, dtype=np.int64)), offset=offset).reshape(shape).copy()


def _format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValidationError("nonfinite_json", f"cannot serialize non-finite value {x}")
    return format(x, ".17g")


def dumps_json(obj, indent: int | None = 2) -> str:
    """Deterministic JSON: sorted keys, floats at 17 significant digits."""
    pad = "" if indent is None else "\n"

    def emit(o, depth: int) -> str:
        if isinstance(o, (bool, np.bool_)):
            return "true" if o else "false"
        if o is None:
            return "null"
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            return _format_float(float(o))
        if isinstance(o, str):
            return json.dumps(o)
        inner = "" if indent is None else " " * (indent * (depth + 1))
        closer = "" if indent is None else " " * (indent * depth)
        if isinstance(o, dict):
            if not o:
                return "{}"
            keys = sorted(o)
            if any(not isinstance(k, str) for k in keys):
                raise ValidationError("bad_json", "JSON object keys must be strings")
            items = [f"{inner}{json.dumps(k)}: {emit(o[k], depth + 1)}" for k in keys]
            return "{" + pad + ("," + pad).join(items) + pad + closer + "}"
        if isinstance(o, (list, tuple, np.ndarray)):
            seq = o.tolist() if isinstance(o, np.ndarray) else list(o)
            if not seq:
                return "[]"
            items = [f"{inner}{emit(v, depth + 1)}" for v in seq]
            return "[" + pad + ("," + pad).join(items) + pad + closer + "]"
        raise ValidationError("bad_json", f"cannot serialize value of type {type(o).__name__}")

    return emit(obj, 0) + "\n"


def write_json(obj, path: str, indent: int | None = 2) -> None:
    _atomic_write_bytes(path, dumps_json(obj, indent=indent).encode("utf-8"))


def write_text(text: str, path: str) -> None:
    """Atomically write UTF-8 text (temp file plus rename)."""
    _atomic_write_bytes(path, text.encode("utf-8"))


@dataclass(frozen=True)
class SequenceManifest:
    """Frame-indexed file listing for one sequence.

    Each modality maps to N+M relative paths; ``tracks`` optionally points
    at an instance-track record for the motion pipeline.
    """

    sequence_id: str
    num_observed: int
    num_future: int
    frame_rate_hz: int
    paths: dict  # modality -> list of relative paths
    tracks: str | None
    root: str

    @property
    def num_frames(self) -> int:
        return self.num_observed + self.num_future

    def frame_path(self, modality: str, index: int) -> str:
        return os.path.join(self.root, self.paths[modality][index])

    def has(self, modality: str) -> bool:
        return modality in self.paths


def load_manifest(path: str) -> SequenceManifest:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ValidationError("missing_file", f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValidationError("bad_manifest", f"{path}: invalid JSON ({e})") from e
    for key in ("sequence_id", "num_observed", "num_future", "frame_rate_hz"):
        if key not in doc:
            raise ValidationError("bad_manifest", f"{path}: missing required key '{key}'")
    n, m = int(doc["num_observed"]), int(doc["num_future"])
    rate = int(doc["frame_rate_hz"])
    if rate not in FRAME_RATES_HZ:
        raise ValidationError("bad_manifest", f"{path}: frame_rate_hz must be one of {FRAME_RATES_HZ}")
    if n < 0 or m < 0 or n + m < 1:
        raise ValidationError("bad_manifest", f"{path}: bad frame counts N={n}, M={m}")
    root = os.path.dirname(os.path.abspath(path))
    paths = {}
    for modality in MODALITIES:
        if modality not in doc:
            continue
        entries = doc[modality]
        if not isinstance(entries, list) or len(entries) != n + m:
            raise ValidationError(
                "bad_manifest", f"{path}: modality '{modality}' must list N+M={n + m} paths"
            )
        for rel in entries:
            if not os.path.exists(os.path.join(root, rel)):
                raise ValidationError("missing_file", f"{path}: referenced file '{rel}' does not exist")
        paths[modality] = list(entries)
    tracks = doc.get("tracks")
    if tracks is not None and not os.path.exists(os.path.join(root, tracks)):
        raise ValidationError("missing_file", f"{path}: tracks file '{tracks}' does not exist")
    return SequenceManifest(
        sequence_id=str(doc["sequence_id"]),
        num_observed=n,
        num_future=m,
        frame_rate_hz=rate,
        paths=paths,
        tracks=tracks,
        root=root,
    )


# ---------------------------------------------------------------------------
# Modality serialization. Grids are float32; poses 4x4 float32 row-major;
# masks uint8 {0,1}; label maps int32.


def write_point_map(pm: PointMap, path: str) -> None:
    data = pm.points.astype(np.float32)
    data[~pm.validity] = np.nan
    write_tensor(data, path)


def read_point_map(path: str) -> PointMap:
    data = read_tensor(path, dtype=np.float32, ndim=3).astype(np.float64)
    validity = np.isfinite(data).all(axis=2)
    data[~validity] = 0.0
    return PointMap(data, validity)


def write_pose(pose: Pose, path: str) -> None:
    write_tensor(pose.as_matrix().astype(np.float32), path)


def read_pose(path: str) -> Pose:
    m = read_tensor(path, dtype=np.float32, ndim=2).astype(np.float64)
    if m.shape != (4, 4):
        raise ValidationError("shape_mismatch", f"{path}: pose tensor must be 4x4, got {m.shape}")
    # float32 storage costs ~1e-7 of orthonormality, well inside the 1e-6 tolerance
    return Pose.from_matrix(m)


def write_depth_map(dm: DepthMap, path: str) -> None:
    data = dm.depth.astype(np.float32)
    data[~dm.valid] = np.nan
    write_tensor(data, path)


def read_depth_map(path: str) -> DepthMap:
    data = read_tensor(path, dtype=np.float32, ndim=2).astype(np.float64)
    valid = np.isfinite(data)
    data[~valid] = 0.0
    return DepthMap(data, valid).require_positive()


def write_label_map(lm: LabelMap, path: str) -> None:
    write_tensor(lm.labels.astype(np.int32), path)


def read_label_map(path: str) -> LabelMap:
    return LabelMap(read_tensor(path, dtype=np.int32, ndim=2))


def write_mask(mask: np.ndarray, path: str) -> None:
    write_tensor(np.asarray(mask).astype(np.uint8), path)


def read_mask(path: str) -> np.ndarray:
    return read_tensor(path, dtype=np.uint8, ndim=2).astype(bool)


def write_grid(grid: np.ndarray, path: str) -> None:
    write_tensor(np.asarray(grid, dtype=np.float32), path)


def read_grid(path: str, ndim: int = 2) -> np.ndarray:
    return read_tensor(path, dtype=np.float32, ndim=ndim).astype(np.float64)
