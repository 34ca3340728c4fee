"""Band-stack I/O, normalization, grouped tiling, mask pyramids, augmentation
and a synthetic scene generator.

BSTK container (little-endian)::

    "BSTK" | u16 version | u16 channels | u32 width | u32 height
    | u8 resolution (metres) | u8 dtype (0 u16 raw TOA, 1 f32, 2 u8 mask)
    | s32 offset_x | s32 offset_y          (pixel origin on the 10 m grid)
    | row-major, channel-interleaved payload
    | u32 CRC-32 of everything before it
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

BSTK_MAGIC = b"BSTK"
BSTK_VERSION = 1
_HEADER = struct.Struct("<4sHHIIBBii")
_CODE_DTYPE = {0: np.dtype("<u2"), 1: np.dtype("<f4"), 2: np.dtype("u1")}

CLEAR, CLOUD, NODATA = 0, 1, 255
TOA_SCALE = 10000.0
RESOLUTIONS = (10, 20, 60)
GROUP_RES = {"vnir": 10, "vre_swir": 20, "ca_wv_cir": 60}
GROUP_FACTOR = {"vnir": 1, "vre_swir": 2, "ca_wv_cir": 6}
TRANSFORMS = ("hflip", "vflip", "rot90", "rot180", "rot270")


class BandStackError(ValueError):
    pass


@dataclass
class BandStack:
    data: np.ndarray          # (height, width, channels)
    resolution: int = 10
    offset: tuple[int, int] = (0, 0)
    nodata: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def nodata_mask(self) -> np.ndarray:
        """True where any band holds the no-data value (0 raw, NaN float)."""
        if self.nodata is not None:
            return self.nodata
        if self.data.dtype == np.uint16:
            return (self.data == 0).any(axis=-1)
        if self.data.dtype.kind == "f":
            return np.isnan(self.data).any(axis=-1)
        return np.zeros(self.data.shape[:2], dtype=bool)


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype == np.uint16:
        return 0
    if arr.dtype.kind == "f":
        return 1
    if arr.dtype == np.uint8:
        return 2
    raise BandStackError(f"unsupported band-stack dtype {arr.dtype}")


def write_bandstack(stack: BandStack, path) -> None:
    data = stack.data if stack.data.ndim == 3 else stack.data[..., None]
    code = _dtype_code(data)
    if stack.resolution not in RESOLUTIONS:
        raise BandStackError(f"resolution must be one of {RESOLUTIONS}")
    h, w, c = data.shape
    header = _HEADER.pack(BSTK_MAGIC, BSTK_VERSION, c, w, h, stack.resolution, code,
                          int(stack.offset[0]), int(stack.offset[1]))
    payload = np.ascontiguousarray(data, dtype=_CODE_DTYPE[code]).tobytes()
    blob = header + payload
    Path(path).write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))


def read_bandstack(path) -> BandStack:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size + 4:
        raise BandStackError(f"{path}: truncated header")
    magic, version, c, w, h, res, code, ox, oy = _HEADER.unpack_from(buf)
    if magic != BSTK_MAGIC:
        raise BandStackError(f"{path}: bad magic {magic!r}")
    if version != BSTK_VERSION:
        raise BandStackError(f"{path}: unsupported version {version}")
    if code not in _CODE_DTYPE:
        raise BandStackError(f"{path}: unknown dtype code {code}")
    dt = _CODE_DTYPE[code]
    need = _HEADER.size + h * w * c * dt.itemsize + 4
    if len(buf) < need:
        raise BandStackError(f"{path}: header claims {need} bytes, file has {len(buf)} (truncated)")
    if len(buf) > need:
        raise BandStackError(f"{path}: {len(buf) - need} unexpected trailing bytes")
    (crc,) = struct.unpack_from("<I", buf, need - 4)
    if zlib.crc32(buf[:need - 4]) != crc:
        raise BandStackError(f"{path}: CRC-32 mismatch")
    data = np.frombuffer(buf, dtype=dt, count=h * w * c, offset=_HEADER.size)
    data = data.astype(dt.newbyteorder("=")).reshape(h, w, c)
    return BandStack(data, res, (ox, oy))


def write_mask(mask: np.ndarray, path, resolution: int = 10, offset=(0, 0)) -> None:
    write_bandstack(BandStack(np.asarray(mask, dtype=np.uint8)[..., None], resolution, offset), path)


def read_mask(path) -> np.ndarray:
    stack = read_bandstack(path)
    if stack.channels != 1 or stack.data.dtype != np.uint8:
        raise BandStackError(f"{path}: not a single-channel u8 mask")
    mask = stack.data[..., 0]
    check_mask(mask)
    return mask


def check_mask(mask: np.ndarray) -> None:
    bad = ~np.isin(mask, (CLEAR, CLOUD, NODATA))
    if bad.any():
        raise ValueError(f"mask holds illegal label {mask[bad].flat[0]} (legal: 0, 1, 255)")


def import_legacy_mask(mask: np.ndarray) -> np.ndarray:
    """Map a 128 (clear) / 255 (cloud) labeling onto 0/1; other values become no-data."""
    mask = np.asarray(mask)
    out = np.full(mask.shape, NODATA, dtype=np.uint8)
    out[mask == 128] = CLEAR
    out[mask == 255] = CLOUD
    return out


def normalize(stack: BandStack) -> BandStack:
    """Raw integer TOA reflectance / 10000, unclipped."""
    raw = np.asarray(stack.data)
    if raw.dtype.kind == "f":
        raise ValueError("stack is already normalized")
    if (raw < 0).any():
        raise ValueError("raw TOA reflectance must be nonnegative")
    return BandStack(raw.astype(np.float64) / TOA_SCALE, stack.resolution, stack.offset,
                     stack.nodata_mask())


@dataclass
class Scene:
    vnir: BandStack
    vre_swir: BandStack
    ca_wv_cir: BandStack
    mask: np.ndarray
    scene_id: str = "scene"
    latent: np.ndarray | None = field(default=None, repr=False)

    def stacks(self) -> dict[str, BandStack]:
        return {"vnir": self.vnir, "vre_swir": self.vre_swir, "ca_wv_cir": self.ca_wv_cir}


@dataclass
class PatchGroup:
    vnir: np.ndarray
    vre_swir: np.ndarray
    ca_wv_cir: np.ndarray
    mask_t: np.ndarray
    mask_m: np.ndarray
    mask_b: np.ndarray
    provenance: dict = field(default_factory=dict)

    RASTERS = ("vnir", "vre_swir", "ca_wv_cir", "mask_t", "mask_m", "mask_b")

    def rasters(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.RASTERS}


def check_alignment(scene: Scene) -> None:
    h, w = scene.vnir.height, scene.vnir.width
    if scene.mask.shape != (h, w):
        raise ValueError(f"{scene.scene_id}: mask {scene.mask.shape} does not match 10 m grid {(h, w)}")
    for name, stack in scene.stacks().items():
        f = GROUP_FACTOR[name]
        if stack.resolution != GROUP_RES[name]:
            raise ValueError(f"{scene.scene_id}: {name} has resolution {stack.resolution} m, "
                             f"expected {GROUP_RES[name]} m")
        if (stack.height * f, stack.width * f) != (h, w):
            raise ValueError(f"{scene.scene_id}: {name} extent {stack.height}x{stack.width} "
                             f"does not cover the 10 m footprint {h}x{w}")
        if tuple(stack.offset) != tuple(scene.vnir.offset):
            raise ValueError(f"{scene.scene_id}: {name} origin {stack.offset} != vnir origin {scene.vnir.offset}")


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Majority vote over non-overlapping factor x factor windows.

    No-data pixels do not vote; ties go to cloud; windows with no valid
    pixel become no-data.
    """
    mask = np.asarray(mask)
    h, w = mask.shape
    if h % factor or w % factor:
        raise ValueError(f"mask extent {h}x{w} not divisible by {factor}")
    blocks = mask.reshape(h // factor, factor, w // factor, factor)
    cloud = (blocks == CLOUD).sum(axis=(1, 3))
    clear = (blocks == CLEAR).sum(axis=(1, 3))
    out = np.where(cloud >= clear, CLOUD, CLEAR).astype(np.uint8)
    out[(cloud + clear) == 0] = NODATA
    return out


def as_reflectance(stack: BandStack) -> np.ndarray:
    if stack.data.dtype.kind == "f":
        return stack.data.astype(np.float64)
    return normalize(stack).data


def tile(scene: Scene, window: int = 384) -> list[PatchGroup]:
    """Half-overlap grouped windows (window, window/2, window/6 across levels).

    Raw u16 stacks are normalized on the way out. Groups touching a no-data
    input pixel at any level are dropped. Order is row-major over window
    origins.
    """
    if window % 12:
        raise ValueError(f"window {window} must be a multiple of 12")
    check_alignment(scene)
    step = window // 2
    h, w = scene.vnir.height, scene.vnir.width
    stacks = scene.stacks()
    arrays = {k: as_reflectance(s) for k, s in stacks.items()}
    bad = {k: s.nodata_mask() for k, s in stacks.items()}
    pyramid = {1: scene.mask, 2: downsample_mask(scene.mask, 2), 6: downsample_mask(scene.mask, 6)}
    groups = []
    for r in range(0, h - window + 1, step):
        for c in range(0, w - window + 1, step):
            crops, skip = {}, False
            for name, f in GROUP_FACTOR.items():
                sl = (slice(r // f, (r + window) // f), slice(c // f, (c + window) // f))
                if bad[name][sl].any():
                    skip = True
                    break
                crops[name] = arrays[name][sl].copy()
            if skip:
                continue
            masks = {f: pyramid[f][r // f:(r + window) // f, c // f:(c + window) // f].copy()
                     for f in (1, 2, 6)}
            groups.append(PatchGroup(crops["vnir"], crops["vre_swir"], crops["ca_wv_cir"],
                                     masks[1], masks[2], masks[6],
                                     {"scene": scene.scene_id, "row": r, "col": c, "aug": "identity"}))
    return groups


def apply_transform(arr: np.ndarray, name: str) -> np.ndarray:
    if name == "identity":
        return arr.copy()
    if name == "hflip":
        return arr[:, ::-1].copy()
    if name == "vflip":
        return arr[::-1].copy()
    if name in ("rot90", "rot180", "rot270"):
        return np.rot90(arr, {"rot90": 1, "rot180": 2, "rot270": 3}[name], axes=(0, 1)).copy()
    raise ValueError(f"unknown transform {name!r}")


def transform_group(group: PatchGroup, name: str) -> PatchGroup:
    out = {k: apply_transform(v, name) for k, v in group.rasters().items()}
    prov = dict(group.provenance, aug=name)
    return PatchGroup(**out, provenance=prov)


def augment(group: PatchGroup, seed: int = 0, index: int = 0) -> list[PatchGroup]:
    """Identity plus four distinct transforms drawn by seeded choice."""
    for name, arr in group.rasters().items():
        if arr.shape[0] != arr.shape[1]:
            raise ValueError(f"augment: {name} patch {arr.shape[:2]} is not square")
    rng = np.random.default_rng([seed, index])
    picks = sorted(rng.choice(len(TRANSFORMS), size=4, replace=False))
    return [transform_group(group, "identity")] + [transform_group(group, TRANSFORMS[i]) for i in picks]


def augment_all(groups: list[PatchGroup], seed: int = 0) -> list[PatchGroup]:
    out = []
    for i, g in enumerate(groups):
        out.extend(augment(g, seed, i))
    return out


# ---------------------------------------------------------------------------
# synthetic scenes

# band order inside the 13-band latent field
_LATENT_BANDS = ("B2", "B3", "B4", "B8", "B5", "B6", "B7", "B8A", "B11", "B12", "B1", "B9", "B10")
_SLICES = {"vnir": slice(0, 4), "vre_swir": slice(4, 10), "ca_wv_cir": slice(10, 13)}
# (land mean, land spread, cloud peak) per band
_BAND_LOOK = np.array([
    (0.08, 0.04, 0.55), (0.09, 0.04, 0.55), (0.10, 0.05, 0.56), (0.25, 0.10, 0.60),
    (0.14, 0.05, 0.58), (0.20, 0.08, 0.59), (0.23, 0.09, 0.60), (0.26, 0.10, 0.60),
    (0.20, 0.07, 0.45), (0.13, 0.05, 0.35), (0.12, 0.02, 0.52), (0.05, 0.02, 0.30),
    (0.005, 0.003, 0.12),
])


def block_mean(field2d: np.ndarray, factor: int) -> np.ndarray:
    h, w = field2d.shape[:2]
    return field2d.reshape(h // factor, factor, w // factor, factor, *field2d.shape[2:]).mean(axis=(1, 3))


def _cloud_mask(rng: np.random.Generator, size: int, lo: float, hi: float):
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=bool)
    depth = np.zeros((size, size))
    target = rng.uniform(lo, hi)
    for _ in range(200):
        if mask.mean() >= target:
            break
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(0.05, 0.25, 2) * size
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(th) + dy * np.sin(th)) / rx
        v = (-dx * np.sin(th) + dy * np.cos(th)) / ry
        d2 = u * u + v * v
        blob = d2 <= 1.0
        trial = mask | blob
        if trial.mean() > hi:
            continue
        mask = trial
        depth = np.maximum(depth, np.where(blob, 1.0 - 0.5 * d2, 0.0))
    return mask, depth


def synth_scene(rng: np.random.Generator, size: int, scene_id: str,
                cloud_fraction=(0.15, 0.45)) -> Scene:
    if size % 12:
        raise ValueError(f"scene size {size} must be a multiple of 12")
    lo, hi = cloud_fraction
    base = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16, mode="wrap")
    base /= base.std() + 1e-12
    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=2, mode="wrap")
    texture /= texture.std() + 1e-12
    mask, depth = _cloud_mask(rng, size, lo, hi)
    latent = np.empty((size, size, len(_LATENT_BANDS)))
    for b, (mean, spread, peak) in enumerate(_BAND_LOOK):
        land = np.clip(mean + spread * (0.8 * base + 0.2 * texture), 0.001, None)
        cloud = peak * (0.75 + 0.25 * depth)
        latent[..., b] = np.where(mask, cloud, land)
    stacks = {
        name: BandStack(block_mean(latent[..., sl], GROUP_FACTOR[name]), GROUP_RES[name], (0, 0))
        for name, sl in _SLICES.items()
    }
    return Scene(stacks["vnir"], stacks["vre_swir"], stacks["ca_wv_cir"],
                 mask.astype(np.uint8), scene_id, latent)


def synth_dataset(seed: int, n_scenes: int, size: int, cloud_fraction=(0.15, 0.45)) -> list[Scene]:
    """Seeded synthetic scenes: smooth land, elliptical bright clouds, exact masks.

    The 20 m and 60 m stacks are 2x2 and 6x6 block means of one 13-band
    latent 10 m field, kept on ``Scene.latent``.
    """
    return [synth_scene(np.random.default_rng([seed, i]), size, f"scene_{i:03d}", cloud_fraction)
            for i in range(n_scenes)]


# ---------------------------------------------------------------------------
# on-disk layout

SCENE_FILES = {"vnir": "vnir.bstk", "vre_swir": "vre_swir.bstk", "ca_wv_cir": "ca_wv_cir.bstk"}


def write_scene(scene: Scene, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, stack in scene.stacks().items():
        data = stack.data if stack.data.dtype == np.uint16 else stack.data.astype(np.float32)
        write_bandstack(replace(stack, data=data), d / SCENE_FILES[name])
    write_mask(scene.mask, d / "mask.bstk", 10, scene.vnir.offset)


def read_scene(directory, with_mask: bool = True) -> Scene:
    d = Path(directory)
    stacks = {name: read_bandstack(d / fname) for name, fname in SCENE_FILES.items()
              if (d / fname).exists()}
    if "vnir" not in stacks:
        raise BandStackError(f"{d}: missing {SCENE_FILES['vnir']}")
    mask = read_mask(d / "mask.bstk") if with_mask and (d / "mask.bstk").exists() else None
    h, w = stacks["vnir"].height, stacks["vnir"].width
    if mask is None:
        mask = np.zeros((h, w), dtype=np.uint8)
    for name in SCENE_FILES:
        if name not in stacks:
            f = GROUP_FACTOR[name]
            stacks[name] = BandStack(np.zeros((h // f, w // f, 0), dtype=np.float32), GROUP_RES[name],
                                     stacks["vnir"].offset)
    return Scene(stacks["vnir"], stacks["vre_swir"], stacks["ca_wv_cir"], mask, d.name)


MANIFEST_COLUMNS = ("vnir", "vre_swir", "ca_wv_cir", "mask_t", "mask_m", "mask_b",
                    "scene", "row", "col", "aug")


def write_patches(groups: list[PatchGroup], directory) -> Path:
    """One sub-directory per group plus ``patches.tsv`` listing files and provenance."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(MANIFEST_COLUMNS)]
    res = {"vnir": 10, "vre_swir": 20, "ca_wv_cir": 60, "mask_t": 10, "mask_m": 20, "mask_b": 60}
    for i, g in enumerate(groups):
        sub = d / f"{i:06d}"
        sub.mkdir(exist_ok=True)
        paths = []
        for name, arr in g.rasters().items():
            p = sub / f"{name}.bstk"
            if name.startswith("mask"):
                write_mask(arr, p, res[name])
            else:
                write_bandstack(BandStack(arr.astype(np.float32), res[name]), p)
            paths.append(str(p.relative_to(d)))
        prov = g.provenance
        lines.append("\t".join(paths + [str(prov.get("scene", "")), str(prov.get("row", 0)),
                                        str(prov.get("col", 0)), str(prov.get("aug", "identity"))]))
    manifest = d / "patches.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_patches(manifest) -> list[PatchGroup]:
    manifest = Path(manifest)
    root = manifest.parent
    rows = manifest.read_text().splitlines()
    if not rows or tuple(rows[0].split("\t")) != MANIFEST_COLUMNS:
        raise BandStackError(f"{manifest}: unexpected header")
    groups = []
    for line in rows[1:]:
        f = line.split("\t")
        arrays = {}
        for name, rel in zip(PatchGroup.RASTERS, f[:6]):
            if name.startswith("mask"):
                arrays[name] = read_mask(root / rel)
            else:
                arrays[name] = read_bandstack(root / rel).data.astype(np.float64)
        prov = {"scene": f[6], "row": int(f[7]), "col": int(f[8]), "aug": f[9]}
        groups.append(PatchGroup(**arrays, provenance=prov))
    return groups
