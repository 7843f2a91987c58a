import struct
import zlib

import numpy as np
import pytest
import torch

from datasets.container import (ARRAY_MAGIC, BUNDLE_MAGIC, decode_bundle, decode_container, encode_bundle,
                                encode_container, read_bundle, read_container, write_bundle, write_container)
from utils.errors import FormatError


def _reframe(body):
    return body + struct.pack('<I', zlib.crc32(body) & 0xffffffff)


class TestArray:

    @pytest.mark.parametrize('shape', [(), (3,), (2, 3), (2, 1, 4), (1, 2, 3, 2)])
    def test_round_trip_is_bit_exact(self, shape):
        arr = np.random.default_rng(0).normal(size=shape)
        back = decode_container(encode_container(arr))
        assert back.shape == arr.shape
        assert back.tobytes() == np.asarray(arr, dtype=np.float64).tobytes()

    def test_layout(self):
        data = encode_container([1.0])
        assert data[:4] == ARRAY_MAGIC
        assert data[4] == 1
        assert data[5] == 1
        assert struct.unpack('<I', data[6:10]) == (1,)
        assert data[10:18] == struct.pack('<d', 1.0)
        assert len(data) == 22

    def test_torch_tensor_accepted(self):
        t = torch.arange(6, dtype=torch.float64).view(2, 3)
        assert np.array_equal(decode_container(encode_container(t)), t.numpy())

    def test_bad_magic(self):
        data = bytearray(encode_container([1.0, 2.0]))
        data[:4] = b'NOPE'
        with pytest.raises(FormatError) as err:
            decode_container(bytes(data))
        assert err.value.offset == 0

    def test_bad_version(self):
        data = bytearray(encode_container([1.0]))
        data[4] = 9
        with pytest.raises(FormatError) as err:
            decode_container(bytes(data))
        assert err.value.offset == 4

    def test_corrupted_payload_fails_crc(self):
        data = bytearray(encode_container(np.ones((3, 3))))
        data[20] ^= 0xff
        with pytest.raises(FormatError, match='CRC') as err:
            decode_container(bytes(data))
        assert err.value.offset == len(data) - 4

    def test_truncated_payload(self):
        body = encode_container(np.ones(4))[:-4]
        short = _reframe(body[:-8])
        with pytest.raises(FormatError, match='truncated'):
            decode_container(short)

    def test_too_short(self):
        with pytest.raises(FormatError) as err:
            decode_container(b'XMD')
        assert err.value.offset == 3

    def test_zero_length_dimension(self):
        with pytest.raises(FormatError):
            encode_container(np.zeros((2, 0)))
        body = ARRAY_MAGIC + struct.pack('<BB', 1, 2) + struct.pack('<2I', 3, 0)
        with pytest.raises(FormatError) as err:
            decode_container(_reframe(body))
        assert err.value.offset == 6

    def test_file_round_trip(self, tmp_path):
        path = str(tmp_path / 'a.xmdt')
        arr = np.linspace(0, 1, 12).reshape(3, 4)
        write_container(path, arr)
        assert np.array_equal(read_container(path), arr)
        assert not (tmp_path / 'a.xmdt.tmp').exists()


class TestBundle:

    def test_round_trip_keeps_order(self, tmp_path):
        entries = {'b': np.ones((2, 2)), 'a': 3.0, 'net/w': np.arange(5.0)}
        path = str(tmp_path / 'c.xmck')
        write_bundle(path, entries)
        back = read_bundle(path)
        assert list(back) == ['b', 'a', 'net/w']
        assert back['a'].shape == () and float(back['a']) == 3.0
        assert np.array_equal(back['net/w'], np.arange(5.0))

    def test_resave_is_byte_identical(self):
        data = encode_bundle({'x': np.random.default_rng(1).normal(size=(3, 2)), 'y': 1.0})
        assert encode_bundle(decode_bundle(data)) == data

    def test_array_magic_rejected(self):
        with pytest.raises(FormatError) as err:
            decode_bundle(encode_container([1.0]))
        assert err.value.offset == 0
        assert encode_bundle({'x': 1.0})[:4] == BUNDLE_MAGIC

    def test_duplicate_name(self):
        entry = struct.pack('<H', 1) + b'x' + struct.pack('<B', 0) + struct.pack('<d', 1.0)
        body = BUNDLE_MAGIC + struct.pack('<BI', 1, 2) + entry + entry
        with pytest.raises(FormatError, match='duplicate'):
            decode_bundle(_reframe(body))

    def test_trailing_bytes(self):
        body = encode_bundle({'x': 1.0})[:-4] + b'\x00'
        with pytest.raises(FormatError, match='trailing'):
            decode_bundle(_reframe(body))
