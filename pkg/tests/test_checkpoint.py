"""
Checkpoint codec
"""
import json
import struct

import numpy as np
import pytest

from fcnn import (
    CheckpointError, DEFAULT_SPEC, build_network, load_checkpoint,
    save_checkpoint,
)
from fcnn._checkpoint import (
    MAGIC, checkpoint_bytes, checkpoint_header, network_from_bytes,
    read_header,
)


@pytest.fixture
def net():
    return build_network(DEFAULT_SPEC, input_channels=2, seed=11).freeze([0])


def test_round_trip_preserves_forward(net, tmp_path, rng):
    path = str(tmp_path / 'net.ckpt')
    save_checkpoint(net, path, extra={'cues': ['appearance', 'motion']})
    loaded = load_checkpoint(path)
    x = rng.random((2, 16, 16))
    np.testing.assert_allclose(loaded.predict(x), net.predict(x), atol=1e-6)
    assert str(loaded.spec) == str(net.spec)
    assert loaded.frozen == net.frozen
    assert loaded.seed == 11
    assert checkpoint_header(path)['extra']['cues'] == [
        'appearance', 'motion']


def test_saving_twice_is_byte_identical(net, tmp_path):
    a, b = tmp_path / 'a.ckpt', tmp_path / 'b.ckpt'
    save_checkpoint(net, str(a))
    save_checkpoint(net, str(b))
    assert a.read_bytes() == b.read_bytes()


def test_length_matches_header(net):
    data = checkpoint_bytes(net)
    header, offset = read_header(data)
    params = sum(p.weights.size + p.bias.size for p in net.params)
    assert header['payload_floats'] == params
    assert len(data) == offset + 4 * params


def test_float32_storage(net):
    loaded = network_from_bytes(checkpoint_bytes(net))
    for p, q in zip(net.params, loaded.params):
        assert np.array_equal(q.weights, p.weights.astype(np.float32))


def _tamper(data, header=None, version=None, magic=None):
    old, offset = read_header(data)
    payload = data[offset:]
    if header is not None:
        old.update(header)
    raw = json.dumps(old).encode()
    prefix = struct.pack('<4sHI', magic or MAGIC, version or 1, len(raw))
    return prefix + raw + payload


@pytest.mark.parametrize(
    'mutate',
    [
        lambda d: _tamper(d, magic=b'NOPE'),
        lambda d: _tamper(d, version=2),
        lambda d: d[:-4],
        lambda d: d[:9],
        lambda d: _tamper(d, header={'payload_floats': 3}),
        lambda d: _tamper(d, header={'spec': 'Conv(32,7)'}),
        lambda d: _tamper(d, header={'shapes': [[1, 1, 1, 1]]}),
        lambda d: d[:10] + b'x' + d[11:],
    ],
    ids=['magic', 'version', 'truncated_payload', 'truncated_header',
         'float_count', 'bad_spec', 'shapes', 'corrupt_json'],
)
def test_corruption_is_rejected(net, mutate):
    with pytest.raises(CheckpointError):
        network_from_bytes(mutate(checkpoint_bytes(net)))
