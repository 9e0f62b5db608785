"""Volumes, a single-file NIfTI-1 subset, and binary PGM slice export."""
from dataclasses import dataclass

import numpy as np

CONTINUOUS = "continuous"
LABEL = "label"
LABEL_VALUES = (0, 1, 2)

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
INTENT_LABEL = 1002

# datatype code -> (numpy dtype, bitpix)
DATATYPES = {
    2: (np.dtype(np.uint8), 8),
    4: (np.dtype(np.int16), 16),
    16: (np.dtype(np.float32), 32),
}
_CODE_FOR_DTYPE = {dt: code for code, (dt, _) in DATATYPES.items()}

# (offset, numpy scalar type, count) for the header fields this module touches
HEADER_FIELDS = {
    "sizeof_hdr": (0, "i4", 1),
    "dim": (40, "i2", 8),
    "intent_code": (68, "i2", 1),
    "datatype": (70, "i2", 1),
    "bitpix": (72, "i2", 1),
    "pixdim": (76, "f4", 8),
    "vox_offset": (108, "f4", 1),
    "scl_slope": (112, "f4", 1),
    "scl_inter": (116, "f4", 1),
    "xyzt_units": (123, "u1", 1),
    "qform_code": (252, "i2", 1),
    "sform_code": (254, "i2", 1),
    "quatern": (256, "f4", 3),
    "qoffset": (268, "f4", 3),
    "magic": (344, "S4", 1),
}


class NiftiError(ValueError):
    """Raised for malformed or unsupported NIfTI input."""


@dataclass(frozen=True)
class VolumeGeometry:
    nx: int
    ny: int
    nz: int
    sx: float = 1.0
    sy: float = 1.0
    sz: float = 1.0
    ox: float = 0.0
    oy: float = 0.0
    oz: float = 0.0

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError(f"dims must be >= 1, got {self.shape}")
        if min(self.sx, self.sy, self.sz) <= 0:
            raise ValueError(f"spacing must be > 0, got {self.spacing}")

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def spacing(self):
        return (self.sx, self.sy, self.sz)

    @property
    def origin(self):
        return (self.ox, self.oy, self.oz)

    @property
    def n_voxels(self):
        return self.nx * self.ny * self.nz

    @property
    def voxel_volume(self):
        return self.sx * self.sy * self.sz


class Volume:
    """A 3-D scalar grid indexed ``[x, y, z]``.

    ``kind`` is ``"continuous"`` (CT, PET, probabilities) or ``"label"``
    (segmentation masks over {0, 1, 2}).  Serialised order is x-fastest.
    """

    def __init__(self, geometry, voxels, kind=CONTINUOUS):
        voxels = np.asarray(voxels)
        if voxels.ndim == 1:
            if voxels.size != geometry.n_voxels:
                raise ValueError(f"expected {geometry.n_voxels} voxels, got {voxels.size}")
            voxels = voxels.reshape(geometry.shape, order="F")
        if voxels.shape != geometry.shape:
            raise ValueError(f"voxel array shape {voxels.shape} != geometry {geometry.shape}")
        if kind not in (CONTINUOUS, LABEL):
            raise ValueError(f"unknown volume kind {kind!r}")
        if kind == LABEL:
            if not np.isin(voxels, LABEL_VALUES).all():
                raise ValueError("label volume contains values outside {0,1,2}")
            voxels = voxels.astype(np.uint8, copy=False)
        self.geometry = geometry
        self.voxels = voxels
        self.kind = kind

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.kind == other.kind
            and self.voxels.dtype == other.voxels.dtype
            and np.array_equal(self.voxels, other.voxels)
        )

    def __repr__(self):
        g = self.geometry
        return f"Volume({self.kind}, {g.shape}, spacing={g.spacing}, dtype={self.voxels.dtype})"

    @property
    def is_label(self):
        return self.kind == LABEL

    def flat(self):
        return self.voxels.ravel(order="F")

    def with_voxels(self, voxels, kind=None):
        return Volume(self.geometry, voxels, self.kind if kind is None else kind)


def _storage_dtype(v):
    if v.is_label:
        return np.dtype(np.uint8)
    dt = v.voxels.dtype
    if dt in (np.dtype(np.uint8), np.dtype(np.int16)):
        return dt
    return np.dtype(np.float32)


def _put(buf, name, value, bo="<"):
    off, code, count = HEADER_FIELDS[name]
    arr = np.asarray(value, dtype=np.dtype(code).newbyteorder(bo)).reshape(count)
    raw = arr.tobytes()
    buf[off:off + len(raw)] = raw


def _get(buf, name, bo="<"):
    off, code, count = HEADER_FIELDS[name]
    dt = np.dtype(code).newbyteorder(bo)
    arr = np.frombuffer(bytes(buf[off:off + dt.itemsize * count]), dtype=dt, count=count)
    return arr if count > 1 else arr[0]


def write_nifti(v):
    """Serialise ``v`` as little-endian single-file NIfTI-1 (data at byte 352).

    Label volumes are stored as uint8 with intent code NIFTI_INTENT_LABEL;
    continuous volumes keep uint8/int16 storage and go to float32 otherwise.
    """
    g = v.geometry
    dt = _storage_dtype(v)
    code = _CODE_FOR_DTYPE[dt]
    hdr = bytearray(VOX_OFFSET)
    _put(hdr, "sizeof_hdr", HEADER_SIZE)
    _put(hdr, "dim", [3, g.nx, g.ny, g.nz, 1, 1, 1, 1])
    _put(hdr, "intent_code", INTENT_LABEL if v.is_label else 0)
    _put(hdr, "datatype", code)
    _put(hdr, "bitpix", DATATYPES[code][1])
    _put(hdr, "pixdim", [1.0, g.sx, g.sy, g.sz, 0.0, 0.0, 0.0, 0.0])
    _put(hdr, "vox_offset", float(VOX_OFFSET))
    _put(hdr, "scl_slope", 1.0)
    _put(hdr, "scl_inter", 0.0)
    _put(hdr, "xyzt_units", 2)  # mm
    _put(hdr, "qform_code", 1)
    _put(hdr, "sform_code", 0)
    _put(hdr, "quatern", [0.0, 0.0, 0.0])
    _put(hdr, "qoffset", [g.ox, g.oy, g.oz])
    hdr[344:348] = MAGIC
    payload = v.flat().astype(dt.newbyteorder("<"), copy=False).tobytes()
    return bytes(hdr) + payload


def read_nifti(data):
    """Parse a single-file NIfTI-1 byte string into a :class:`Volume`."""
    data = bytes(data)
    if len(data) < VOX_OFFSET:
        raise NiftiError(f"truncated header: {len(data)} bytes, need {VOX_OFFSET}")
    if _get(data, "sizeof_hdr", "<") == HEADER_SIZE:
        bo = "<"
    elif _get(data, "sizeof_hdr", ">") == HEADER_SIZE:
        bo = ">"
    else:
        raise NiftiError("bad header size: sizeof_hdr is not 348 in either byte order")
    if data[344:348] != MAGIC:
        raise NiftiError(f"bad magic {data[344:348]!r}, expected single-file 'n+1'")
    dim = _get(data, "dim", bo)
    if dim[0] != 3:
        raise NiftiError(f"only 3-D volumes are supported, dim[0]={dim[0]}")
    code = int(_get(data, "datatype", bo))
    if code not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {code}")
    dt, _ = DATATYPES[code]
    nx, ny, nz = (int(d) for d in dim[1:4])
    if min(nx, ny, nz) < 1:
        raise NiftiError(f"non-positive dimensions {(nx, ny, nz)}")
    offset = int(_get(data, "vox_offset", bo))
    if offset < VOX_OFFSET:
        raise NiftiError(f"vox_offset {offset} < {VOX_OFFSET}")
    nbytes = nx * ny * nz * dt.itemsize
    if len(data) < offset + nbytes:
        raise NiftiError(f"truncated payload: need {offset + nbytes} bytes, have {len(data)}")
    raw = np.frombuffer(data, dtype=dt.newbyteorder(bo), count=nx * ny * nz, offset=offset)
    vox = raw.astype(dt)  # native byte order
    slope = float(_get(data, "scl_slope", bo))
    inter = float(_get(data, "scl_inter", bo))
    if slope == 0.0:
        slope = 1.0
    if slope != 1.0 or inter != 0.0:
        vox = vox.astype(np.float64) * slope + inter
    pix = _get(data, "pixdim", bo)
    q = _get(data, "qoffset", bo)
    geom = VolumeGeometry(nx, ny, nz, float(pix[1]), float(pix[2]), float(pix[3]), float(q[0]), float(q[1]), float(q[2]))
    kind = LABEL if int(_get(data, "intent_code", bo)) == INTENT_LABEL else CONTINUOUS
    return Volume(geom, vox, kind)


def save_nifti(path, v):
    with open(path, "wb") as fh:
        fh.write(write_nifti(v))


def load_nifti(path):
    with open(path, "rb") as fh:
        return read_nifti(fh.read())


def export_slice_pgm(v, z):
    """Binary PGM (P5) of axial slice ``z``; row 0 is y=0, values rounded half-up."""
    g = v.geometry
    if not 0 <= z < g.nz:
        raise IndexError(f"slice {z} out of range [0, {g.nz})")
    sl = np.asarray(v.voxels[:, :, z], dtype=np.float64).T  # rows = y
    px = np.clip(np.floor(sl + 0.5), 0, 255).astype(np.uint8)
    return f"P5\n{g.nx} {g.ny}\n255\n".encode("ascii") + px.tobytes()
