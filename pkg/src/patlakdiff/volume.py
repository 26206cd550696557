"""Dense 3D volumes, overlapping patch partition/merge, and file I/O.

Volumes are stored in memory as numpy arrays of shape (nx, ny, nz).  On disk
the format is "PVOL v1": magic ``PVOL``, u32 version, u32 dims, three f32
voxel sizes in mm, then little-endian f32 payload in x-fastest order.  A
dynamic series is a directory of one PVOL per frame plus a ``manifest.json``
with per-frame timing and the dose fraction.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

PVOL_MAGIC = b"PVOL"
PVOL_VERSION = 1
_HEADER = struct.Struct("<4sIIIIfff")


@dataclass
class Volume3D:
    """A scalar field on a regular grid with per-axis voxel size in mm."""

    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"expected 3-d array, got shape {self.data.shape}")
        self.voxel_size_mm = tuple(float(s) for s in self.voxel_size_mm)
        if any(s <= 0 for s in self.voxel_size_mm):
            raise ValueError("voxel sizes must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def copy(self) -> "Volume3D":
        return Volume3D(self.data.copy(), self.voxel_size_mm)


def write_volume(vol: Volume3D, path) -> None:
    """Write a volume as PVOL v1.  Data is cast to float32."""
    data = np.asarray(vol.data, dtype="<f4")
    if not np.isfinite(data).all():
        raise FormatError(f"refusing to write non-finite payload to {path}")
    nx, ny, nz = data.shape
    header = _HEADER.pack(PVOL_MAGIC, PVOL_VERSION, nx, ny, nz,
                          *vol.voxel_size_mm)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.ravel(order="F").tobytes())


def read_volume(path) -> Volume3D:
    """Read a PVOL v1 file.  Returns float32 data (round-trip is bit-exact)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != PVOL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != PVOL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = raw[_HEADER.size:]
    expected = 4 * nx * ny * nz
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape((nx, ny, nz), order="F")
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: non-finite values in payload")
    return Volume3D(data.copy(), (sx, sy, sz))


# ---------------------------------------------------------------------------
# Patch partition / merge

@dataclass
class PatchLayout:
    """Axis-aligned overlapping patches covering a parent volume.

    All patches share one shape (``patch_dims``); adjacent patches along an
    axis overlap by ``overlap`` voxels on that axis.
    """

    patch_dims: tuple[int, int, int]
    overlap: tuple[int, int, int]
    origins: list[tuple[int, int, int]]

    def __post_init__(self):
        self.patch_dims = tuple(int(d) for d in self.patch_dims)
        self.overlap = tuple(int(o) for o in self.overlap)
        self.origins = [tuple(int(c) for c in o) for o in self.origins]
        if any(d <= 0 for d in self.patch_dims):
            raise ConfigError("patch dims must be positive")
        if any(o < 0 for o in self.overlap):
            raise ConfigError("overlap must be nonnegative")
        if not self.origins:
            raise ConfigError("layout needs at least one patch")

    def validate_for(self, dims: tuple[int, int, int]) -> None:
        """Check bounds and full coverage for a parent volume of `dims`."""
        for org in self.origins:
            for a in range(3):
                if org[a] < 0 or org[a] + self.patch_dims[a] > dims[a]:
                    raise ConfigError(
                        f"patch at {org} exceeds volume bounds {dims}")
        covered = np.zeros(dims, dtype=bool)
        for org in self.origins:
            sl = tuple(slice(org[a], org[a] + self.patch_dims[a]) for a in range(3))
            covered[sl] = True
        if not covered.all():
            raise ConfigError("patches do not cover the volume")


def slab_layout(dims, n_patches: int, overlap: int, axis: int = 2) -> PatchLayout:
    """Split a volume into n equal slabs along one axis with fixed overlap.

    Requires (dims[axis] + (n-1)*overlap) divisible by n so that the slabs
    tile exactly.
    """
    ext = dims[axis]
    total = ext + (n_patches - 1) * overlap
    if n_patches < 1 or total % n_patches != 0:
        raise ConfigError(
            f"cannot split extent {ext} into {n_patches} slabs with overlap {overlap}")
    p = total // n_patches
    if p <= overlap and n_patches > 1:
        raise ConfigError("slab size must exceed the overlap")
    pdims = list(dims)
    pdims[axis] = p
    ov = [0, 0, 0]
    ov[axis] = overlap
    origins = []
    for i in range(n_patches):
        org = [0, 0, 0]
        org[axis] = i * (p - overlap)
        origins.append(tuple(org))
    return PatchLayout(tuple(pdims), tuple(ov), origins)


def eight_patch_layout(dims) -> PatchLayout:
    """The shipped preset: eight axial slabs with eight overlapping slices."""
    return slab_layout(dims, 8, 8, axis=2)


def partition(vol: Volume3D, layout: PatchLayout) -> list[Volume3D]:
    """Extract the patch sub-blocks (copies) defined by the layout."""
    layout.validate_for(vol.dims)
    out = []
    for org in layout.origins:
        sl = tuple(slice(org[a], org[a] + layout.patch_dims[a]) for a in range(3))
        out.append(Volume3D(vol.data[sl].copy(), vol.voxel_size_mm))
    return out


def _axis_profile(layout: PatchLayout, index: int, axis: int) -> np.ndarray:
    """Ramp weight profile of one patch along one axis.

    Weight is 1 in the interior and ramps linearly across the region shared
    with a neighbouring patch: over an overlap of o voxels the entering patch
    takes weights (1..o)/(o+1) and the leaving patch (o..1)/(o+1), so paired
    weights sum to 1 exactly.
    """
    p = layout.patch_dims[axis]
    org = layout.origins[index][axis]
    lead = 0
    trail = 0
    for j, other in enumerate(layout.origins):
        if j == index or other[axis] == org:
            continue
        if other[axis] < org:
            lead = max(lead, min(other[axis] + p - org, p))
        else:
            trail = max(trail, min(org + p - other[axis], p))
    w = np.ones(p)
    if lead:
        w[:lead] = np.arange(1, lead + 1) / (lead + 1)
    if trail:
        w[p - trail:] = np.arange(trail, 0, -1) / (trail + 1)
    return w


def patch_weight(layout: PatchLayout, index: int) -> np.ndarray:
    """Separable merge weight map for one patch (product of axis ramps)."""
    wx = _axis_profile(layout, index, 0)
    wy = _axis_profile(layout, index, 1)
    wz = _axis_profile(layout, index, 2)
    return wx[:, None, None] * wy[None, :, None] * wz[None, None, :]


def merge(patches: list[Volume3D], layout: PatchLayout,
          dims: tuple[int, int, int] | None = None) -> Volume3D:
    """Recombine patches with ramp-weighted averaging in overlap regions.

    Implemented so that merging unmodified patches reproduces the parent
    volume bitwise: each voxel starts from the last patch pasted over it and
    other patches contribute w_i * (v_i - pasted), which vanishes exactly
    when all patches agree.
    """
    if len(patches) != len(layout.origins):
        raise ConfigError(
            f"{len(patches)} patches for {len(layout.origins)} origins")
    for p in patches:
        if p.dims != layout.patch_dims:
            raise ConfigError(
                f"patch dims {p.dims} != layout dims {layout.patch_dims}")
    if dims is None:
        dims = tuple(
            max(org[a] + layout.patch_dims[a] for org in layout.origins)
            for a in range(3))
    layout.validate_for(dims)

    dtype = np.result_type(*(p.data.dtype for p in patches))
    pasted = np.zeros(dims, dtype=dtype)
    owner = np.full(dims, -1, dtype=np.int32)
    slices = [tuple(slice(org[a], org[a] + layout.patch_dims[a]) for a in range(3))
              for org in layout.origins]
    for i, (p, sl) in enumerate(zip(patches, slices)):
        pasted[sl] = p.data
        owner[sl] = i

    out = pasted.copy()
    for i, (p, sl) in enumerate(zip(patches, slices)):
        not_owner = owner[sl] != i
        if not not_owner.any():
            continue
        w = patch_weight(layout, i)
        out[sl] += np.where(not_owner, w * (p.data - pasted[sl]), 0.0)
    return Volume3D(out, patches[0].voxel_size_mm)


# ---------------------------------------------------------------------------
# Dynamic series

@dataclass
class DynamicSeries:
    """A time series of co-registered frames with acquisition windows.

    ``frames`` has shape (M, nx, ny, nz); ``windows_s`` holds the per-frame
    (t_start, t_end) in seconds.
    """

    frames: np.ndarray
    windows_s: list[tuple[float, float]]
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dose_fraction: float = 1.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4:
            raise ValueError("frames must be (M, nx, ny, nz)")
        self.windows_s = [(float(a), float(b)) for a, b in self.windows_s]
        if len(self.windows_s) != self.frames.shape[0]:
            raise ValueError("one (t_start, t_end) window per frame required")
        for a, b in self.windows_s:
            if b <= a:
                raise ValueError(f"bad frame window ({a}, {b})")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.frames.shape[1:]

    def frame(self, m: int) -> Volume3D:
        return Volume3D(self.frames[m], self.voxel_size_mm)


def write_series(series: DynamicSeries, dirpath) -> None:
    """Write one PVOL per frame plus manifest.json into a directory."""
    os.makedirs(dirpath, exist_ok=True)
    entries = []
    for m in range(series.n_frames):
        name = f"frame_{m:03d}.pvol"
        write_volume(series.frame(m), os.path.join(dirpath, name))
        t0, t1 = series.windows_s[m]
        entries.append({"index": m, "t_start_s": t0, "t_end_s": t1,
                        "file": name})
    manifest = {"dose_fraction": series.dose_fraction, "frames": entries}
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def read_series(dirpath) -> DynamicSeries:
    """Read a series directory written by :func:`write_series`."""
    mpath = os.path.join(dirpath, "manifest.json")
    if not os.path.exists(mpath):
        raise FormatError(f"{dirpath}: missing manifest.json")
    with open(mpath) as fh:
        manifest = json.load(fh)
    try:
        entries = sorted(manifest["frames"], key=lambda e: e["index"])
        dose = float(manifest.get("dose_fraction", 1.0))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{dirpath}: malformed manifest ({exc})") from exc
    if not entries:
        raise FormatError(f"{dirpath}: empty series")
    vols, windows = [], []
    for e in entries:
        vol = read_volume(os.path.join(dirpath, e["file"]))
        vols.append(vol)
        windows.append((float(e["t_start_s"]), float(e["t_end_s"])))
    dims = vols[0].dims
    for v in vols[1:]:
        if v.dims != dims:
            raise FormatError(f"{dirpath}: inconsistent frame dims")
    frames = np.stack([v.data for v in vols])
    return DynamicSeries(frames, windows, vols[0].voxel_size_mm, dose)
