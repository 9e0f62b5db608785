"""Shared builders and oracles for the test modules."""
import struct

import numpy as np

from hnpipe import seg_core as sc
from hnpipe.volume_io import CONTINUOUS, HEADER_FIELDS, LABEL, Volume, VolumeGeometry


def random_volume(rng, dtype, kind=CONTINUOUS, max_dim=6):
    dims = tuple(int(d) for d in rng.integers(1, max_dim + 1, size=3))
    spacing = tuple(float(np.float32(s)) for s in rng.uniform(0.5, 4.0, size=3))
    origin = tuple(float(np.float32(o)) for o in rng.uniform(-50, 50, size=3))
    g = VolumeGeometry(*dims, *spacing, *origin)
    if kind == LABEL:
        vox = rng.integers(0, 3, size=dims).astype(np.uint8)
    elif dtype == np.uint8:
        vox = rng.integers(0, 256, size=dims).astype(np.uint8)
    elif dtype == np.int16:
        vox = rng.integers(-32768, 32768, size=dims).astype(np.int16)
    else:
        vox = rng.normal(0, 100, size=dims).astype(np.float32)
    return Volume(g, vox, kind)


def byteswap_nifti(data):
    """Rewrite every header field this reader uses, and the payload, big-endian."""
    buf = bytearray(data)
    for name, (off, code, count) in HEADER_FIELDS.items():
        if code in ("u1", "S4"):
            continue
        dt = np.dtype(code)
        arr = np.frombuffer(bytes(buf[off:off + dt.itemsize * count]), dtype=dt.newbyteorder("<"))
        buf[off:off + dt.itemsize * count] = arr.astype(dt.newbyteorder(">")).tobytes()
    code = struct.unpack_from("<h", data, 70)[0]
    dt = {2: np.uint8, 4: np.int16, 16: np.float32}[code]
    payload = np.frombuffer(data, dtype=np.dtype(dt).newbyteorder("<"), offset=352)
    return bytes(buf[:352]) + payload.astype(np.dtype(dt).newbyteorder(">")).tobytes()


def random_params(arch, rng, scale=1.0):
    p = sc.SegModelParams.zeros(arch)
    return sc.SegModelParams(arch, {k: rng.normal(0, scale, a.shape) for k, a in p.arrays.items()})


def finite_difference(p, f, gt, h=1e-4):
    out = {}
    for k, a in p.arrays.items():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus, minus = p.copy(), p.copy()
            plus.arrays[k][idx] += h
            minus.arrays[k][idx] -= h
            g[idx] = (sc.dice_loss(sc.forward(plus, f), gt) - sc.dice_loss(sc.forward(minus, f), gt)) / (2 * h)
        out[k] = g
    return out


def max_rel_error(p, f, gt):
    _, grads = sc.loss_and_grad(p, f, gt)
    fd = finite_difference(p, f, gt)
    return max(float(np.max(np.abs(grads[k] - fd[k]) / np.maximum(1.0, np.abs(fd[k])))) for k in grads)
