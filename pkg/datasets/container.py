"""
Binary array containers

Single array ("XMDT"):
    magic(4) | version u8 | rank u8 | dims u32[rank] | payload f64[prod(dims)] | crc32 u32

Named bundle ("XMCK", used for checkpoints):
    magic(4) | version u8 | count u32 |
    count x ( name_len u16 | name utf-8 | rank u8 | dims u32[rank] | payload f64 ) | crc32 u32

All integers and floats little-endian; the CRC covers every preceding byte.
"""
import collections
import os
import struct
import zlib

import numpy as np

from utils.errors import FormatError


ARRAY_MAGIC = b'XMDT'
BUNDLE_MAGIC = b'XMCK'
VERSION = 1
_F64 = np.dtype('<f8')


def _as_array(value):
    if hasattr(value, 'detach'):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value, dtype=np.float64)
    if any(d == 0 for d in arr.shape):
        raise FormatError('zero-length dimension in shape {}'.format(arr.shape))
    return arr


def _encode_array(arr):
    head = struct.pack('<B', arr.ndim) + struct.pack('<{}I'.format(arr.ndim), *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_F64).tobytes()


class _Reader(object):

    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError('truncated {}'.format(what), offset=len(self.data))
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, what):
        (rank,) = self.unpack('<B', '{} rank'.format(what))
        dims_at = self.pos
        dims = self.unpack('<{}I'.format(rank), '{} dims'.format(what))
        if any(d == 0 for d in dims):
            raise FormatError('zero-length dimension in {}'.format(what), offset=dims_at)
        count = int(np.prod(dims)) if rank else 1
        payload = self.take(8 * count, '{} payload'.format(what))
        return np.frombuffer(payload, dtype=_F64).astype(np.float64).reshape(dims)


def _check_frame(data, magic):
    if len(data) < len(magic) + 1 + 4:
        raise FormatError('file too short', offset=len(data))
    if data[:len(magic)] != magic:
        raise FormatError('bad magic {!r}, expected {!r}'.format(bytes(data[:len(magic)]), magic), offset=0)
    if data[len(magic)] != VERSION:
        raise FormatError('unsupported version {}'.format(data[len(magic)]), offset=len(magic))
    body, (crc,) = data[:-4], struct.unpack('<I', data[-4:])
    if zlib.crc32(body) & 0xffffffff != crc:
        raise FormatError('CRC mismatch', offset=len(data) - 4)
    return body


def _write_atomic(path, data):
    tmp = '{}.tmp'.format(path)
    with open(tmp, 'wb') as f:
        f.write(data)
    os.replace(tmp, path)


def _frame(body):
    return body + struct.pack('<I', zlib.crc32(body) & 0xffffffff)


def encode_container(value):
    return _frame(ARRAY_MAGIC + struct.pack('<B', VERSION) + _encode_array(_as_array(value)))


def decode_container(data):
    body = _check_frame(data, ARRAY_MAGIC)
    reader = _Reader(body)
    reader.pos = len(ARRAY_MAGIC) + 1
    arr = reader.array('array')
    if reader.pos != len(body):
        raise FormatError('trailing bytes after payload', offset=reader.pos)
    return arr


def write_container(path, value):
    _write_atomic(path, encode_container(value))


def read_container(path):
    with open(path, 'rb') as f:
        return decode_container(f.read())


def encode_bundle(entries):
    """
    entries: ordered mapping name -> array-like (scalars allowed)
    """
    parts = [BUNDLE_MAGIC, struct.pack('<BI', VERSION, len(entries))]
    for name, value in entries.items():
        raw = name.encode('utf-8')
        parts.append(struct.pack('<H', len(raw)) + raw + _encode_array(_as_array(value)))
    return _frame(b''.join(parts))


def decode_bundle(data):
    body = _check_frame(data, BUNDLE_MAGIC)
    reader = _Reader(body)
    reader.pos = len(BUNDLE_MAGIC) + 1
    (count,) = reader.unpack('<I', 'entry count')
    out = collections.OrderedDict()
    for i in range(count):
        (name_len,) = reader.unpack('<H', 'name length of entry {}'.format(i))
        name = reader.take(name_len, 'name of entry {}'.format(i)).decode('utf-8')
        if name in out:
            raise FormatError('duplicate entry {}'.format(name), offset=reader.pos)
        out[name] = reader.array('entry {}'.format(name))
    if reader.pos != len(body):
        raise FormatError('trailing bytes after last entry', offset=reader.pos)
    return out


def write_bundle(path, entries):
    _write_atomic(path, encode_bundle(entries))


def read_bundle(path):
    with open(path, 'rb') as f:
        return decode_bundle(f.read())
