# /backend/app/utils/storage.py
"""Binary file formats: dense maps (ILMP), features (ILMF), checkpoints (ILMW), PGM masks."""
import logging
import os
import re
import struct

import numpy as np
import yaml

from backend.app.utils.error_handlers import StorageError

logger = logging.getLogger(__name__)

PROB_MAGIC = b"ILMP"
FEATURE_MAGIC = b"ILMF"
WEIGHTS_MAGIC = b"ILMW"

_HEADER = struct.Struct("<4sIII")
_FLOAT = np.dtype("<f4")
_PGM_HEADER = re.compile(rb"^P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def _read_bytes(path):
    try:
        with open(path, "rb") as handle:
            return handle.read()
    except OSError as e:
        raise StorageError(f"cannot read '{path}': {e.strerror or e}") from e


def _write_bytes(path, payload, force=True):
    if not force and os.path.exists(path):
        raise StorageError(f"refusing to overwrite '{path}' (use --force)")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    try:
        with open(path, "wb") as handle:
            handle.write(payload)
    except OSError as e:
        raise StorageError(f"cannot write '{path}': {e.strerror or e}") from e


def encode_dense(magic, array):
    """Serialize an H x W x K array under a four-byte magic."""
    array = np.asarray(array)
    if array.ndim != 3:
        raise StorageError(f"dense map must be 3-D, got shape {array.shape}")
    height, width, depth = array.shape
    body = np.ascontiguousarray(array, dtype=_FLOAT).tobytes()
    return _HEADER.pack(magic, height, width, depth) + body


def decode_dense(magic, payload, source="<buffer>"):
    """Parse an ILMP/ILMF payload back into a float64 H x W x K array."""
    if len(payload) < _HEADER.size:
        raise StorageError(f"{source}: truncated header")
    found, height, width, depth = _HEADER.unpack_from(payload)
    if found != magic:
        raise StorageError(f"{source}: bad magic {found!r}, expected {magic!r}")
    expected = _HEADER.size + height * width * depth * _FLOAT.itemsize
    if len(payload) != expected:
        raise StorageError(
            f"{source}: length {len(payload)} does not match header {height}x{width}x{depth}"
        )
    values = np.frombuffer(payload, dtype=_FLOAT, offset=_HEADER.size)
    return values.reshape(height, width, depth).astype(np.float64)


def write_prob_map(path, values, force=True):
    _write_bytes(path, encode_dense(PROB_MAGIC, values), force=force)


def read_prob_map(path):
    return decode_dense(PROB_MAGIC, _read_bytes(path), source=path)


def write_features(path, values, force=True):
    _write_bytes(path, encode_dense(FEATURE_MAGIC, values), force=force)


def read_features(path):
    return decode_dense(FEATURE_MAGIC, _read_bytes(path), source=path)


def encode_weights(classifier_weights, classifier_bias, projection_weights):
    feature_dim, classes = classifier_weights.shape
    embed_dim = projection_weights.shape[1]
    header = _HEADER.pack(WEIGHTS_MAGIC, feature_dim, classes, embed_dim)
    body = b"".join(
        np.ascontiguousarray(block, dtype=_FLOAT).tobytes()
        for block in (classifier_weights, classifier_bias, projection_weights)
    )
    return header + body


def decode_weights(payload, source="<buffer>"):
    """Return (classifier weights F x C, bias C, projection F x E) as float64."""
    if len(payload) < _HEADER.size:
        raise StorageError(f"{source}: truncated header")
    found, feature_dim, classes, embed_dim = _HEADER.unpack_from(payload)
    if found != WEIGHTS_MAGIC:
        raise StorageError(f"{source}: bad magic {found!r}, expected {WEIGHTS_MAGIC!r}")
    sizes = (feature_dim * classes, classes, feature_dim * embed_dim)
    expected = _HEADER.size + sum(sizes) * _FLOAT.itemsize
    if len(payload) != expected:
        raise StorageError(f"{source}: length {len(payload)} does not match header")
    values = np.frombuffer(payload, dtype=_FLOAT, offset=_HEADER.size).astype(np.float64)
    weights, bias, projection = np.split(values, np.cumsum(sizes)[:-1])
    return (
        weights.reshape(feature_dim, classes),
        bias,
        projection.reshape(feature_dim, embed_dim),
    )


def write_weights(path, classifier_weights, classifier_bias, projection_weights, force=True):
    payload = encode_weights(classifier_weights, classifier_bias, projection_weights)
    _write_bytes(path, payload, force=force)


def read_weights(path):
    return decode_weights(_read_bytes(path), source=path)


def encode_pgm(values):
    values = np.asarray(values)
    if values.ndim != 2:
        raise StorageError(f"mask must be 2-D, got shape {values.shape}")
    height, width = values.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(values, dtype=np.uint8).tobytes()


def decode_pgm(payload, source="<buffer>"):
    """Parse a binary P5 PGM with maxval 255 into an H x W uint8 array."""
    match = _PGM_HEADER.match(payload)
    if match is None:
        raise StorageError(f"{source}: not a binary PGM (P5) file")
    width, height, maxval = (int(group) for group in match.groups())
    if maxval != 255:
        raise StorageError(f"{source}: unsupported maxval {maxval}")
    body = payload[match.end():]
    if len(body) != width * height:
        raise StorageError(f"{source}: pixel data length {len(body)} does not match {width}x{height}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, values, force=True):
    _write_bytes(path, encode_pgm(values), force=force)


def read_pgm(path):
    return decode_pgm(_read_bytes(path), source=path)


def ensure_new_path(path, force=False):
    """Fail if `path` exists and overwriting was not requested."""
    if os.path.exists(path) and not force:
        raise StorageError(f"output '{path}' already exists (use --force)")
    return path


def _plain(value):
    """numpy scalars and tuples become builtins so safe_dump accepts them."""
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_yaml(path, data, force=True):
    if not force and os.path.exists(path):
        raise StorageError(f"refusing to overwrite '{path}' (use --force)")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    try:
        with open(path, "w") as handle:
            yaml.safe_dump(_plain(data), handle, sort_keys=False)
    except OSError as e:
        raise StorageError(f"cannot write '{path}': {e.strerror or e}") from e
    return path


def read_yaml(path):
    try:
        with open(path) as handle:
            return yaml.safe_load(handle)
    except OSError as e:
        raise StorageError(f"cannot read '{path}': {e.strerror or e}") from e
    except yaml.YAMLError as e:
        raise StorageError(f"'{path}' is not valid YAML: {e}") from e
