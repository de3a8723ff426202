"""
Checkpoint codec.

Layout::

    b"FCNN" | version: u16 | header length: u32 | UTF-8 JSON header |
    little-endian float32 payload (per conv layer: weights then bias)
"""
import json
import os
import struct
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .log import get_logger
from ._exceptions import CheckpointError, FcnnError
from ._network import Network
from ._tensor import ConvParams
from .netspec import parse_spec


log = get_logger('network')

MAGIC = b'FCNN'
VERSION = 1
_prefix = struct.Struct('<4sHI')
_payload_dtype = np.dtype('<f4')


def _header(net: Network, extra: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    shapes = [list(p.weights.shape) for p in net.params]
    return {
        'format': 'fcnn-checkpoint',
        'version': VERSION,
        'spec': str(net.spec),
        'input_channels': net.input_channels,
        'seed': net.seed,
        'shapes': shapes,
        'frozen': net.frozen,
        'payload_floats': _float_count(shapes),
        'extra': extra or {},
    }


def _float_count(shapes) -> int:
    # weights plus one bias per output channel
    return sum(int(np.prod(s)) + s[0] for s in shapes)


def checkpoint_bytes(
    net: Network,
    extra: Optional[Dict[str, Any]] = None,
) -> bytes:
    header = json.dumps(
        _header(net, extra), sort_keys=True, separators=(',', ':')
    ).encode('utf-8')
    chunks = [_prefix.pack(MAGIC, VERSION, len(header)), header]
    for p in net.params:
        chunks.append(p.weights.astype(_payload_dtype).tobytes())
        chunks.append(p.bias.astype(_payload_dtype).tobytes())
    return b''.join(chunks)


def save_checkpoint(
    net: Network,
    path: str,
    extra: Optional[Dict[str, Any]] = None,
) -> int:
    """Write ``net`` to ``path`` and return the number of bytes written.
    """
    data = checkpoint_bytes(net, extra)
    tmp = f"{path}.tmp"
    with open(tmp, 'wb') as f:
        f.write(data)
    os.replace(tmp, path)
    log.debug(f"Saved {net} to {path} ({len(data)} bytes)")
    return len(data)


def read_header(data: bytes) -> Tuple[Dict[str, Any], int]:
    """Decode the header and return it with the payload offset.
    """
    if len(data) < _prefix.size:
        raise CheckpointError("Checkpoint is truncated before its header")
    magic, version, length = _prefix.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"Bad magic bytes {magic!r}")
    if version != VERSION:
        raise CheckpointError(
            f"Checkpoint version {version} is not supported (want {VERSION})")
    end = _prefix.size + length
    if len(data) < end:
        raise CheckpointError("Checkpoint is truncated inside its header")
    try:
        header = json.loads(data[_prefix.size:end].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"Corrupt checkpoint header: {err}")
    if not isinstance(header, dict):
        raise CheckpointError("Checkpoint header is not a JSON object")
    return header, end


def network_from_bytes(data: bytes) -> Network:
    header, offset = read_header(data)
    try:
        spec = parse_spec(header['spec'], int(header['input_channels']))
        shapes = [tuple(int(d) for d in s) for s in header['shapes']]
        frozen = [bool(f) for f in header['frozen']]
        seed = int(header['seed'])
        floats = int(header['payload_floats'])
    except (KeyError, TypeError, ValueError, FcnnError) as err:
        raise CheckpointError(f"Invalid checkpoint header: {err}")

    if floats != _float_count(shapes):
        raise CheckpointError(
            f"Header declares {floats} floats but its shapes need "
            f"{_float_count(shapes)}")
    payload = len(data) - offset
    if payload != floats * _payload_dtype.itemsize:
        raise CheckpointError(
            f"Payload has {payload} bytes, header predicts "
            f"{floats * _payload_dtype.itemsize}")

    values = np.frombuffer(
        data, dtype=_payload_dtype, offset=offset).astype(np.float64)
    params, pos = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        weights = values[pos:pos + n].reshape(shape)
        bias = values[pos + n:pos + n + shape[0]]
        pos += n + shape[0]
        params.append(ConvParams(
            weights.copy(), bias.copy(), stride=1, padding=shape[2] // 2))
    try:
        return Network(spec, params, frozen, seed)
    except FcnnError as err:
        raise CheckpointError(f"Checkpoint does not match its spec: {err}")


def load_checkpoint(path: str) -> Network:
    with open(path, 'rb') as f:
        data = f.read()
    net = network_from_bytes(data)
    log.debug(f"Loaded {net} from {path}")
    return net


def checkpoint_header(path: str) -> Dict[str, Any]:
    """Header of the checkpoint at ``path`` without decoding the weights.
    """
    with open(path, 'rb') as f:
        data = f.read()
    return read_header(data)[0]
