"""Dataset ingestion, synthetic generators and the model file format.

Model file layout::

    OJANET-MODEL <version> <header bytes>\\n
    <JSON header, sorted keys>\\n
    <atoms: little-endian float64, layer-major, atom-major, coordinate-minor>
    <FNV-1a 64-bit checksum of the atom bytes, little-endian uint64>
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DeepModel, Dictionary, OjaNetError, TrainConfig

FORMAT_VERSION = 1
MAGIC = b"OJANET-MODEL"
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataError(OjaNetError):
    pass


class ParseError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class IdxFormatError(DataError):
    pass


class ModelFormatError(DataError):
    pass


class VersionError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


@dataclass
class DatasetMeta:
    n_samples: int
    dim: int
    source: str
    normalization: str = "none"


# ---------------------------------------------------------------------------
# CSV

def parse_csv(text: str, skip_header: bool = False, allow_empty: bool = False) -> np.ndarray:
    rows: list[list[float]] = []
    width = None
    lines = text.splitlines()
    start = 1 if skip_header else 0
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        fields = line.split(",")
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise ParseError(f"row {lineno}: {len(fields)} fields, expected {width}")
        row = []
        for col, tok in enumerate(fields, start=1):
            try:
                row.append(float(tok))
            except ValueError:
                raise ParseError(f"row {lineno}, column {col}: not a number: {tok.strip()!r}") from None
        rows.append(row)
    if not rows:
        if allow_empty:
            return np.zeros((0, 0))
        raise EmptyDatasetError("no data rows")
    return np.array(rows, dtype=np.float64)


def load_csv(path, skip_header: bool = False, allow_empty: bool = False) -> tuple[np.ndarray, DatasetMeta]:
    X = parse_csv(Path(path).read_text(), skip_header=skip_header, allow_empty=allow_empty)
    return X, DatasetMeta(X.shape[0], X.shape[1], "csv")


def format_number(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(path, X: np.ndarray, header: list[str] | None = None) -> None:
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w", newline="") as f:
        if header:
            f.write(",".join(header) + "\n")
        for row in X:
            f.write(",".join(format_number(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# IDX

def _read_bytes(path) -> bytes:
    p = Path(path)
    if p.suffix == ".gz":
        with gzip.open(p, "rb") as f:
            return f.read()
    return p.read_bytes()


def parse_idx(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise IdxFormatError("file too short for an IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic == IDX_LABELS:
        raise IdxFormatError("this is an IDX label file (magic 0x00000801); pass the image file instead")
    if magic != IDX_IMAGES:
        raise IdxFormatError(f"bad IDX magic 0x{magic:08x}; expected 0x{IDX_IMAGES:08x} (uint8 images)")
    if len(buf) < 16:
        raise IdxFormatError("truncated IDX header")
    n, rows, cols = struct.unpack(">III", buf[4:16])
    size = n * rows * cols
    if len(buf) - 16 < size:
        raise IdxFormatError(f"truncated payload: expected {size} bytes, found {len(buf) - 16}")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=size, offset=16)
    return pixels.reshape(n, rows * cols).astype(np.float64) / 255.0


def load_idx(path) -> tuple[np.ndarray, DatasetMeta]:
    X = parse_idx(_read_bytes(path))
    if X.shape[0] == 0:
        raise EmptyDatasetError("IDX file holds no images")
    return X, DatasetMeta(X.shape[0], X.shape[1], "idx")


def write_idx(path, images: np.ndarray) -> None:
    """Write uint8 images of shape (N, rows, cols)."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES, n, rows, cols) + images.tobytes())


def normalize(X: np.ndarray, mode: str) -> np.ndarray:
    if mode == "none":
        return X
    if mode == "center":
        return X - X.mean(axis=0)
    if mode == "unit_norm":
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)
    raise ValueError(f"unknown normalization {mode!r}")


# ---------------------------------------------------------------------------
# synthetic data

def gen_uniform_sphere(n: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, dim))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def gen_clustered_lines(n: int, dim: int, n_lines: int, noise: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Points along ``n_lines`` random directions through the origin, plus Gaussian noise.

    Lines receive (near-)equal shares of the samples in shuffled order.
    """
    if n_lines < 1 or n < 1 or dim < 1:
        raise ValueError("n, dim and n_lines must be positive")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((n_lines, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(n) % n_lines)
    scale = rng.standard_normal(n)
    X = scale[:, None] * directions[labels]
    if noise:
        X = X + noise * rng.standard_normal((n, dim))
    return X, labels


SYNTH_KEYS = {
    "lines": {"n": int, "dim": int, "lines": int, "noise": float, "seed": int},
    "sphere": {"n": int, "dim": int, "seed": int},
}


def parse_synth(spec: str) -> tuple[str, dict]:
    """Parse ``name:key=val,...``; unknown names or keys are errors."""
    name, _, rest = spec.partition(":")
    if name not in SYNTH_KEYS:
        raise ValueError(f"unknown synthetic dataset {name!r}; choose from {sorted(SYNTH_KEYS)}")
    allowed = SYNTH_KEYS[name]
    params: dict = {}
    for item in filter(None, rest.split(",")):
        key, eq, val = item.partition("=")
        key = key.strip()
        if not eq:
            raise ValueError(f"malformed item {item!r}; expected key=value")
        if key not in allowed:
            raise ValueError(f"unknown key {key!r} for {name}; allowed: {sorted(allowed)}")
        if key in params:
            raise ValueError(f"duplicate key {key!r}")
        try:
            params[key] = allowed[key](val)
        except ValueError:
            raise ValueError(f"bad value for {key}: {val!r}") from None
    required = {"n", "dim"} | ({"lines"} if name == "lines" else set())
    missing = required - params.keys()
    if missing:
        raise ValueError(f"{name} needs {sorted(missing)}")
    return name, params


def generate_synth(spec: str, seed: int) -> tuple[np.ndarray, DatasetMeta, np.ndarray | None]:
    name, p = parse_synth(spec)
    seed = p.get("seed", seed)
    if name == "lines":
        X, labels = gen_clustered_lines(p["n"], p["dim"], p["lines"], p.get("noise", 0.0), seed)
    else:
        X, labels = gen_uniform_sphere(p["n"], p["dim"], seed), None
    return X, DatasetMeta(X.shape[0], X.shape[1], f"synth:{name}"), labels


# ---------------------------------------------------------------------------
# model files

def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _payload(model: DeepModel) -> bytes:
    return b"".join(layer.atoms.astype("<f8").tobytes() for layer in model.layers)


def model_bytes(model: DeepModel, created: str | None = None) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "dim": model.dim,
        "depth": model.depth,
        "k_per_layer": model.k_per_layer,
        "config": model.config.to_dict(),
    }
    if created is not None:
        header["created"] = created
    head = json.dumps(header, sort_keys=True, indent=2).encode()
    payload = _payload(model)
    first = MAGIC + f" {FORMAT_VERSION} {len(head)}\n".encode()
    return first + head + b"\n" + payload + struct.pack("<Q", fnv1a64(payload))


def save_model(model: DeepModel, path, created: str | None = None) -> None:
    """Write ``model``; ``created`` is an optional timestamp kept out of the checksum."""
    Path(path).write_bytes(model_bytes(model, created))


def parse_model(buf: bytes) -> DeepModel:
    nl = buf.find(b"\n")
    if nl < 0 or not buf.startswith(MAGIC + b" "):
        raise ModelFormatError("not a model file (missing OJANET-MODEL magic line)")
    try:
        version, head_len = (int(t) for t in buf[len(MAGIC) + 1:nl].split())
    except ValueError:
        raise ModelFormatError("malformed magic line") from None
    if version != FORMAT_VERSION:
        raise VersionError(f"model format version {version} is not supported (expected {FORMAT_VERSION})")
    start = nl + 1
    end = start + head_len
    if len(buf) < end + 1:
        raise ModelFormatError("truncated header")
    try:
        header = json.loads(buf[start:end])
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"header is not valid JSON: {e}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"header format_version {header.get('format_version')} does not match")
    dim, depth, ks = header["dim"], header["depth"], header["k_per_layer"]
    if len(ks) != depth or dim < 1 or any(k < 1 for k in ks):
        raise ModelFormatError(f"inconsistent dimensions: depth={depth}, k_per_layer={ks}, dim={dim}")
    size = 8 * dim * sum(ks)
    payload = buf[end + 1:end + 1 + size]
    tail = buf[end + 1 + size:]
    if len(payload) != size or len(tail) < 8:
        raise ModelFormatError(f"truncated payload: expected {size + 8} bytes after the header")
    if len(tail) > 8:
        raise ModelFormatError("trailing bytes after checksum; header dimensions do not match the payload")
    (stored,) = struct.unpack("<Q", tail)
    if stored != fnv1a64(payload):
        raise ChecksumError("checksum mismatch; the atom payload is corrupt")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    layers = []
    offset = 0
    for k in ks:
        layers.append(Dictionary(flat[offset:offset + k * dim].reshape(k, dim)))
        offset += k * dim
    return DeepModel(layers, TrainConfig.from_dict(header["config"]))


def load_model(path) -> DeepModel:
    return parse_model(Path(path).read_bytes())
