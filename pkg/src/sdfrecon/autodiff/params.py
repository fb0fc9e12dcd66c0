"""Named parameter storage with Adam state and a binary checkpoint format.

Checkpoint layout (little-endian), documented here as the on-disk contract:

    magic   4 bytes  b"SRCK"
    version u32      currently 1
    nrec    u32      number of array records
    meta    u32 length + UTF-8 JSON blob (iteration counter, adam steps,
                     rng state, arbitrary extras)
    records nrec times:
        name  u16 length + UTF-8 (prefix "p/" parameter, "m/"/"v/" adam moments)
        ndim  u8
        dims  u32 each
        data  float64 raw values, C order

Round-trip is bit-exact: values are written as raw float64.
"""

import json
import struct

import numpy as np

from .tensor import Tensor, AutodiffError

_MAGIC = b"SRCK"
_VERSION = 1


class ParameterStore:
    """Uniquely named learnable tensors plus per-parameter Adam state."""

    def __init__(self):
        self.params = {}
        self.adam_m = {}
        self.adam_v = {}
        self.adam_step = 0

    def add(self, name, data):
        if name in self.params:
            raise AutodiffError("duplicate parameter name %r" % name)
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return sorted(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def n_values(self):
        return sum(t.size for t in self.params.values())


class Adam:
    """Standard Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, store, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self):
        s = self.store
        s.adam_step += 1
        t = s.adam_step
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** t
        corr2 = 1.0 - b2 ** t
        for name in s.names():
            p = s.params[name]
            g = p.grad
            if g is None:
                continue
            if name not in s.adam_m:
                s.adam_m[name] = np.zeros_like(p.data)
                s.adam_v[name] = np.zeros_like(p.data)
            m = s.adam_m[name]
            v = s.adam_v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / corr1
            vhat = v / corr2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _write_record(f, name, arr):
    nb = name.encode("utf-8")
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_record(f):
    (nlen,) = struct.unpack("<H", f.read(2))
    name = f.read(nlen).decode("utf-8")
    (ndim,) = struct.unpack("<B", f.read(1))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).copy()
    return name, data


def save_checkpoint(path, store, meta=None):
    meta = dict(meta or {})
    meta["adam_step"] = store.adam_step
    records = []
    for name in store.names():
        records.append(("p/" + name, store.params[name].data))
        if name in store.adam_m:
            records.append(("m/" + name, store.adam_m[name]))
            records.append(("v/" + name, store.adam_v[name]))
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(records)))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, arr in records:
            _write_record(f, name, arr)


def load_checkpoint(path):
    """Returns (ParameterStore, meta dict)."""
    store = ParameterStore()
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise AutodiffError("not a checkpoint file: %s" % path)
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise AutodiffError("unsupported checkpoint version %d" % version)
        (nrec,) = struct.unpack("<I", f.read(4))
        (blen,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(blen).decode("utf-8"))
        for _ in range(nrec):
            name, data = _read_record(f)
            kind, pname = name.split("/", 1)
            if kind == "p":
                store.add(pname, data)
            elif kind == "m":
                store.adam_m[pname] = data
            elif kind == "v":
                store.adam_v[pname] = data
    store.adam_step = int(meta.get("adam_step", 0))
    return store, meta
