"""Three-branch encoder / three-output decoder network, audit and checkpoints."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .layers import (CS, DSC, MDSC, SDRB, BatchNorm, Conv, Deconv, LayerSpec, MaxPool, Module,
                     conventional_count, param_count, receptive_extent, shared_kernel_size)
from .tensor import Tensor

VARIANTS = ("full13", "vnir_swir10", "vnir4")
BRANCHES = ("vnir", "vre_swir", "ca_wv_cir")
# Sentinel-2 band membership per branch (10 m, 20 m, 60 m)
BAND_GROUPS = {
    "vnir": ("B2", "B3", "B4", "B8"),
    "vre_swir": ("B5", "B6", "B7", "B8A", "B11", "B12"),
    "ca_wv_cir": ("B1", "B9", "B10"),
}


@dataclass
class ModelConfig:
    variant: str = "full13"
    width: int = 64
    up_width: int = 128
    conv_kernel: int = 3
    out_kernel: int = 3
    dsc_kernel: int = 3
    deconv_kernel: int = 4
    mdsc_kernels: tuple = (3, 5)
    pool_plan: tuple = ((2, 2), (3, 3), (2, 2))
    deconv_strides: tuple = (2, 3, 2)
    sdrb_kernel: int = 3
    sdrb_rates: tuple = (2, 2, 3, 3, 4, 4)
    sdrb_shared: tuple = (5, 5, 7, 7, 9, 9)
    band_counts: dict = field(default_factory=lambda: {k: len(v) for k, v in BAND_GROUPS.items()})
    seed: int = 0

    @property
    def branches(self) -> tuple[str, ...]:
        return {"full13": BRANCHES, "vnir_swir10": BRANCHES[:2], "vnir4": BRANCHES[:1]}[self.variant]

    @property
    def scale_factor(self) -> int:
        f = 1
        for _, s in self.pool_plan:
            f *= s
        return f

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.pool_plan) != 3 or len(self.deconv_strides) != 3:
            raise ValueError("pool plan and deconv plan must each have three stages")
        if tuple(self.deconv_strides) != tuple(s for _, s in reversed(self.pool_plan)):
            raise ValueError(f"deconv strides {self.deconv_strides} must mirror pool strides "
                             f"{[s for _, s in self.pool_plan]}")
        if len(self.sdrb_rates) != len(self.sdrb_shared):
            raise ValueError("sdrb_rates and sdrb_shared differ in length")
        for i, (r, K) in enumerate(zip(self.sdrb_rates, self.sdrb_shared), 1):
            if K != shared_kernel_size(self.sdrb_kernel, r):
                raise ValueError(f"stage sdrb{i}: shared kernel {K} violates K=(k-1)r+1 for k={self.sdrb_kernel}, r={r}")
        if self.width < 1 or self.up_width < 1:
            raise ValueError("stage widths must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mdsc_kernels"] = list(self.mdsc_kernels)
        d["pool_plan"] = [list(p) for p in self.pool_plan]
        d["deconv_strides"] = list(self.deconv_strides)
        d["sdrb_rates"] = list(self.sdrb_rates)
        d["sdrb_shared"] = list(self.sdrb_shared)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("mdsc_kernels", "deconv_strides", "sdrb_rates", "sdrb_shared"):
            if key in d:
                d[key] = tuple(d[key])
        if "pool_plan" in d:
            d["pool_plan"] = tuple(tuple(p) for p in d["pool_plan"])
        return cls(**d)


@dataclass
class MaskPyramid:
    top: Tensor
    middle: Tensor
    bottom: Tensor

    def levels(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.top, self.middle, self.bottom


class Model(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c, up = config.width, config.up_width
        rng = np.random.default_rng(config.seed)
        bands = config.band_counts
        ks = config.mdsc_kernels
        self.top_conv = self.add_child("top.conv", Conv(bands["vnir"], c, config.conv_kernel, rng=rng))
        self.top_mdsc = self.add_child("top.mdsc", MDSC(c, c, ks, rng=rng))
        self.has_mid = "vre_swir" in config.branches
        self.has_bot = "ca_wv_cir" in config.branches
        if self.has_mid:
            self.mid_conv = self.add_child("mid.conv", Conv(bands["vre_swir"], c, config.conv_kernel, rng=rng))
            self.mid_cs = self.add_child("mid.cs", CS(c, ks, rng=rng))
        if self.has_bot:
            self.bot_conv = self.add_child("bot.conv", Conv(bands["ca_wv_cir"], c, config.conv_kernel, rng=rng))
            self.bot_cs = self.add_child("bot.cs", CS(c, ks, rng=rng))
        self.pools = [MaxPool(w, s) for w, s in config.pool_plan]
        self.sdrbs = [self.add_child(f"sdrb{i}", SDRB(c, r, config.sdrb_kernel, rng=rng))
                      for i, r in enumerate(config.sdrb_rates, 1)]
        self.decoder = []
        for tag, stride in zip(("dec_b", "dec_m", "dec_t"), config.deconv_strides):
            deconv = self.add_child(f"{tag}.deconv", Deconv(c, up, config.deconv_kernel, stride, rng=rng))
            dsc = self.add_child(f"{tag}.dsc", DSC(up + c, c, config.dsc_kernel, rng=rng))
            out = self.add_child(f"{tag}.out", Conv(c, 1, config.out_kernel, kind="OutputConv", rng=rng))
            self.decoder.append((deconv, dsc, out))
        # (encoder tap, decoder level) pairs joined by channel concatenation
        self.skips = [("bot.cs" if self.has_bot else "pool2", "dec_b"),
                      ("mid.cs" if self.has_mid else "pool1", "dec_m"),
                      ("top.residual", "dec_t")]
        self.outputs = ["dec_b.out", "dec_m.out", "dec_t.out"]

    def check_inputs(self, inputs: dict) -> None:
        s = self.config.scale_factor
        missing = [b for b in self.config.branches if b not in inputs]
        if missing:
            raise ValueError(f"variant {self.config.variant} needs inputs {missing}")
        top = inputs["vnir"]
        if top.ndim != 4:
            raise ValueError(f"vnir input must be b,h,w,c, got shape {top.shape}")
        b, h, w, _ = top.shape
        if h % s or w % s:
            raise ValueError(f"10 m input extent {h}x{w} must be a multiple of {s}")
        p1 = self.config.pool_plan[0][1]
        p12 = p1 * self.config.pool_plan[1][1]
        expect = {"vnir": (h, w), "vre_swir": (h // p1, w // p1), "ca_wv_cir": (h // p12, w // p12)}
        for name in self.config.branches:
            x = inputs[name]
            want = (b,) + expect[name] + (self.config.band_counts[name],)
            if tuple(x.shape) != want:
                raise ValueError(f"{name} input has shape {tuple(x.shape)}, expected {want}")

    def __call__(self, inputs: dict, training: bool = False) -> MaskPyramid:
        return self.forward(inputs, training)

    def forward(self, inputs: dict, training: bool = False) -> MaskPyramid:
        self.check_inputs(inputs)
        x = {k: T.as_tensor(v) for k, v in inputs.items()}
        t0 = T.relu(self.top_conv(x["vnir"]))
        skip_t = T.add(t0, self.top_mdsc(t0, training))
        p = self.pools[0](skip_t)
        if self.has_mid:
            skip_m = self.mid_cs(p, T.relu(self.mid_conv(x["vre_swir"])), training)
        else:
            skip_m = p
        p = self.pools[1](skip_m)
        if self.has_bot:
            skip_b = self.bot_cs(p, T.relu(self.bot_conv(x["ca_wv_cir"])), training)
        else:
            skip_b = p
        z = self.pools[2](skip_b)
        for block in self.sdrbs:
            z = block(z, training)
        masks = []
        for (deconv, dsc, out), skip in zip(self.decoder, (skip_b, skip_m, skip_t)):
            u = T.relu(deconv(z))
            z = dsc(T.concat_channels([u, skip]), training)
            masks.append(T.sigmoid(out(z)))
        return MaskPyramid(top=masks[2], middle=masks[1], bottom=masks[0])

    def layer_rows(self) -> list[tuple[str, LayerSpec, int]]:
        rows = []
        rows += self.top_conv.spec_rows("top.conv.")
        rows += self.top_mdsc.spec_rows("top.mdsc.")
        rows.append(("pool1", self.pools[0].spec, 0))
        if self.has_mid:
            rows += self.mid_conv.spec_rows("mid.conv.")
            rows += self.mid_cs.spec_rows("mid.cs.")
        rows.append(("pool2", self.pools[1].spec, 0))
        if self.has_bot:
            rows += self.bot_conv.spec_rows("bot.conv.")
            rows += self.bot_cs.spec_rows("bot.cs.")
        rows.append(("pool3", self.pools[2].spec, 0))
        for i, blk in enumerate(self.sdrbs, 1):
            rows += blk.spec_rows(f"sdrb{i}.")
        for tag, (deconv, dsc, out) in zip(("dec_b", "dec_m", "dec_t"), self.decoder):
            rows += deconv.spec_rows(f"{tag}.deconv.")
            rows += dsc.spec_rows(f"{tag}.dsc.")
            rows += out.spec_rows(f"{tag}.out.")
        return rows


def build_model(config: ModelConfig | None = None) -> Model:
    return Model(config or ModelConfig())


def forward(model: Model, inputs: dict, training: bool = False) -> MaskPyramid:
    return model.forward(inputs, training)


# ---------------------------------------------------------------------------
# audit


def _rf_contribution(spec: LayerSpec) -> int:
    if spec.kind in ("Conv", "DilatedConv", "OutputConv"):
        return receptive_extent(spec.kernel_size, spec.dilation_rate)
    if spec.kind in ("Deconv", "DSC", "SharedConv"):
        return spec.kernel_size
    if spec.kind == "MDSC":
        return max(spec.kernel_size)
    if spec.kind == "SDRB":
        growth = (spec.shared_kernel - 1) + (spec.kernel_size - 1) * spec.dilation_rate
        return 2 * growth + 1
    if spec.kind == "MaxPool":
        return spec.pool
    return 1


@dataclass
class AuditReport:
    rows: list[dict]
    total: int
    conventional_total: int
    instantiated_total: int
    mismatches: list[str]

    @property
    def ok(self) -> bool:
        return not self.mismatches

    COLUMNS = ("layer", "kind", "m", "n", "k", "r", "formula_count", "conventional", "trainable",
               "rf", "running_total")

    def to_tsv(self) -> str:
        lines = ["\t".join(self.COLUMNS)]
        for r in self.rows:
            lines.append("\t".join(str(r[c]) for c in self.COLUMNS))
        lines.append(f"TOTAL\t\t\t\t\t\t{self.total}\t{self.conventional_total}\t{self.instantiated_total}\t\t{self.total}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        widths = {c: max(len(c), *(len(str(r[c])) for r in self.rows)) for c in self.COLUMNS}
        head = "  ".join(c.ljust(widths[c]) for c in self.COLUMNS)
        out = [head, "-" * len(head)]
        for r in self.rows:
            out.append("  ".join(str(r[c]).ljust(widths[c]) for c in self.COLUMNS))
        out.append("-" * len(head))
        out.append(f"total (per-layer formulas): {self.total:,}")
        out.append(f"total (one bias per output channel): {self.conventional_total:,}")
        out.append(f"instantiated trainable scalars: {self.instantiated_total:,}")
        out.append("status: " + ("OK" if self.ok else "MISMATCH " + ", ".join(self.mismatches)))
        return "\n".join(out) + "\n"

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "total": self.total,
                           "conventional_total": self.conventional_total,
                           "instantiated_total": self.instantiated_total,
                           "mismatches": self.mismatches}, indent=2)


def audit(model: Module) -> AuditReport:
    """Per-layer formula counts against instantiated counts.

    Works on a full :class:`Model` or on any single layer module.
    """
    layer_rows = model.layer_rows() if hasattr(model, "layer_rows") else model.spec_rows("")
    rows, running, conv_total, inst_total, bad = [], 0, 0, 0, []
    for name, spec, inst in layer_rows:
        eq = param_count(spec)
        conv = conventional_count(spec)
        running += eq
        conv_total += conv
        inst_total += inst
        if eq != inst:
            bad.append(name)
        rows.append({
            "layer": name or spec.kind.lower(), "kind": spec.kind, "m": spec.in_channels, "n": spec.out_channels,
            "k": "/".join(map(str, spec.kernel_size)) if isinstance(spec.kernel_size, tuple) else spec.kernel_size,
            "r": spec.dilation_rate, "formula_count": eq, "conventional": conv, "trainable": inst,
            "rf": _rf_contribution(spec), "running_total": running,
        })
    if inst_total != model.trainable_count():
        bad.append("unattributed-parameters")
    return AuditReport(rows, running, conv_total, inst_total, bad)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"CDFM3SF\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def _state(model: Model) -> list[tuple[str, np.ndarray]]:
    items = [(k, v.data) for k, v in model.named_parameters().items()]
    items += [(k, v) for k, v in model.named_buffers().items()]
    return items


def save_checkpoint(model: Model, path) -> None:
    """Write magic, version, config, tensor manifest, raw payload and CRC-32.

    Layout (little-endian): 8-byte magic, u32 version, u32 config length +
    UTF-8 JSON config, u32 entry count, then per entry u16 name length, name,
    u8 dtype code (0 f32, 1 f64), u8 ndim, ndim x u32 extents; then the
    concatenated payloads in manifest order and a u32 CRC-32 of the payload.
    """
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    head = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg]
    items = _state(model)
    head.append(struct.pack("<I", len(items)))
    payload = []
    for name, arr in items:
        code = _DTYPE_CODES[arr.dtype]
        raw = name.encode()
        head.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(payload)
    Path(path).write_bytes(b"".join(head) + body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> Model:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(8) != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} unsupported (expected {VERSION})")
    config = ModelConfig.from_dict(json.loads(take(cfg_len)))
    (count,) = struct.unpack("<I", take(4))
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"entry {name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        manifest.append((name, _DTYPES[code], shape))
    start = pos
    arrays = {}
    for name, dt, shape in manifest:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(take(nbytes), dtype=dt).reshape(shape)
    body = buf[start:pos]
    (crc,) = struct.unpack("<I", take(4))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after checksum")
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint payload CRC-32 mismatch")

    model = build_model(config)
    params, buffers = model.named_parameters(), model.named_buffers()
    expected = set(params) | set(buffers)
    if expected != set(arrays):
        raise CheckpointError(f"checkpoint entries do not match model: "
                              f"missing {sorted(expected - set(arrays))}, extra {sorted(set(arrays) - expected)}")
    for name, arr in arrays.items():
        native = arr.astype(arr.dtype.newbyteorder("="))
        if name in params:
            t = params[name]
            if t.data.shape != native.shape:
                raise CheckpointError(f"entry {name}: shape {native.shape} != model {t.data.shape}")
            t.data = native.copy()
        else:
            buffers[name][...] = native
    return model
