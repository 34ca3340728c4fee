"""Layer vocabulary of the network with exact parameter accounting.

Counting formulas (m inputs, n outputs, k kernel, r rate, K shared kernel):

    Conv / Deconv / DilatedConv / OutputConv   m*k*k*n + m*n
    DSC                                        m*k*k + m*n
    SharedConv                                 k*k
    MDSC                                       p*m*n + sum_i m*k_i*k_i
    SDRB                                       2 * sum_i (K_i*K_i + m*k_i*k_i*n + m*n),  K_i = (k_i - 1)*r_i + 1
    BatchNorm                                  2*n (gamma, beta)

The ``m*n`` bias term is instantiated literally: every one of the m*n 2-D
filters carries its own bias, and the column sums of that (m, n) array form
the effective per-output-channel bias. :func:`conventional_count` gives the
usual one-bias-per-output-channel count for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

KINDS = ("Conv", "Deconv", "MaxPool", "DSC", "SharedConv", "DilatedConv", "MDSC",
         "SDRB", "CS", "BatchNorm", "OutputConv")
CONV_LIKE = ("Conv", "Deconv", "DilatedConv", "OutputConv")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int | tuple[int, ...] = 1
    dilation_rate: int | tuple[int, ...] = 1
    shared_kernel: int | tuple[int, ...] = 0
    pool: int = 0
    stride: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "MDSC":
            ks = _as_tuple(self.kernel_size)
            if len(set(ks)) != len(ks) or any(k % 2 == 0 for k in ks):
                raise ValueError(f"MDSC kernel sizes must be distinct and odd, got {ks}")
        if self.kind == "SDRB":
            ks, rs, Ks = (_as_tuple(self.kernel_size), _as_tuple(self.dilation_rate),
                          _as_tuple(self.shared_kernel))
            if not len(ks) == len(rs) == len(Ks):
                raise ValueError("SDRB kernel, rate and shared-kernel lists must align")
            for k, r, K in zip(ks, rs, Ks):
                if K != (k - 1) * r + 1:
                    raise ValueError(f"SDRB shared kernel {K} != (k-1)*r+1 = {(k - 1) * r + 1}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
            "kernel_size": self.kernel_size, "dilation_rate": self.dilation_rate,
            "shared_kernel": self.shared_kernel, "pool": self.pool, "stride": self.stride,
            "has_bias": self.has_bias,
        }


def _as_tuple(v) -> tuple[int, ...]:
    return tuple(v) if isinstance(v, (tuple, list)) else (v,)


def shared_kernel_size(k: int, rate: int) -> int:
    return (k - 1) * rate + 1


def receptive_extent(k: int, rate: int = 1) -> int:
    """Side length of the input window seen by one dilated k x k tap grid."""
    return (k - 1) * rate + 1


def param_count(spec: LayerSpec) -> int:
    m, n = spec.in_channels, spec.out_channels
    kind = spec.kind
    if kind in CONV_LIKE:
        k = spec.kernel_size
        return m * k * k * n + (m * n if spec.has_bias else 0)
    if kind == "DSC":
        k = spec.kernel_size
        return m * k * k + m * n
    if kind == "SharedConv":
        return spec.kernel_size ** 2
    if kind == "MDSC":
        ks = _as_tuple(spec.kernel_size)
        return len(ks) * m * n + sum(m * k * k for k in ks)
    if kind == "SDRB":
        ks, Ks = _as_tuple(spec.kernel_size), _as_tuple(spec.shared_kernel)
        return 2 * sum(K * K + m * k * k * n + m * n for k, K in zip(ks, Ks))
    if kind == "BatchNorm":
        return 2 * n
    if kind in ("MaxPool", "CS"):
        return 0
    raise ValueError(f"unknown layer kind {kind!r}")


def conventional_count(spec: LayerSpec) -> int:
    """Count with one bias per output channel instead of one per filter."""
    m, n = spec.in_channels, spec.out_channels
    if spec.kind in CONV_LIKE:
        k = spec.kernel_size
        return m * k * k * n + (n if spec.has_bias else 0)
    if spec.kind == "SDRB":
        ks, Ks = _as_tuple(spec.kernel_size), _as_tuple(spec.shared_kernel)
        return 2 * sum(K * K + m * k * k * n + n for k, K in zip(ks, Ks))
    return param_count(spec)


# ---------------------------------------------------------------------------
# functional forms


def dsc_forward(x: Tensor, depth: Tensor, point: Tensor) -> Tensor:
    """Depth stage (one k x k filter per channel) then 1x1 channel mix."""
    return T.pointwise(T.depthwise_conv2d(x, depth), point)


def mdsc_forward(x: Tensor, depths: list[Tensor], point: Tensor) -> Tensor:
    """Parallel depth stages, concatenated in the order given, then one 1x1 mix."""
    maps = [T.depthwise_conv2d(x, d) for d in depths]
    return T.pointwise(T.concat_channels(maps), point)


def shared_conv_forward(x: Tensor, shared_kernel: Tensor) -> Tensor:
    if shared_kernel.ndim == 2:
        shared_kernel = _expand_shared(shared_kernel)
    return T.depthwise_conv2d(x, shared_kernel)


def _expand_shared(kernel: Tensor) -> Tensor:
    k = kernel.shape[0]
    return T.make_op(kernel.data.reshape(k, k, 1), (kernel,),
                     lambda g: (g.reshape(k, k),), "reshape")


def cs_fuse(a: Tensor, b: Tensor, mdsc: "MDSC", training: bool = False) -> Tensor:
    """a + b + MDSC(concat(a, b))."""
    if a.shape != b.shape:
        raise ValueError(f"cs_fuse: input shapes differ {a.shape} vs {b.shape}")
    c = a.shape[-1]
    if mdsc.in_channels != 2 * c or mdsc.out_channels != c:
        raise ValueError(f"cs_fuse: MDSC maps {mdsc.in_channels}->{mdsc.out_channels}, "
                         f"needs {2 * c}->{c}")
    fused = mdsc(T.concat_channels([a, b]), training)
    return T.add(T.add(a, b), fused)


# ---------------------------------------------------------------------------
# parameterized units


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Container of named parameters, buffers and child modules."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self.params.items()}
        for cname, child in self.children.items():
            out.update(child.named_parameters(f"{prefix}{cname}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self.buffers.items()}
        for cname, child in self.children.items():
            out.update(child.named_buffers(f"{prefix}{cname}."))
        return out

    def spec_rows(self, prefix: str) -> list[tuple[str, LayerSpec, int]]:
        """(name, spec, instantiated trainable count) for each countable layer."""
        return []

    def trainable_count(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())


class Conv(Module):
    """Normal, dilated or output convolution with per-filter biases."""

    def __init__(self, m: int, n: int, k: int = 3, rate: int = 1, kind: str = "Conv",
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.spec = LayerSpec(kind, m, n, k, rate)
        self.rate = rate
        self.kernel = self.add_param("kernel", he_uniform(rng, (k, k, m, n), k * k * m))
        self.bias = self.add_param("bias", np.zeros((m, n)))

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return T.conv2d(x, self.kernel, self.bias, dilation_rate=self.rate)

    def spec_rows(self, prefix):
        return [(prefix.rstrip("."), self.spec, self.trainable_count())]


class Deconv(Module):
    def __init__(self, m: int, n: int, k: int = 4, stride: int = 2,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if stride not in (2, 3):
            raise ValueError(f"deconv stride must be 2 or 3, got {stride}")
        rng = rng or np.random.default_rng(0)
        self.spec = LayerSpec("Deconv", m, n, k, stride=stride)
        self.stride = stride
        self.kernel = self.add_param("kernel", he_uniform(rng, (k, k, m, n), k * k * m))
        self.bias = self.add_param("bias", np.zeros((m, n)))

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return T.transposed_conv2d(x, self.kernel, self.bias, stride=self.stride)

    def spec_rows(self, prefix):
        return [(prefix.rstrip("."), self.spec, self.trainable_count())]


class BatchNorm(Module):
    momentum = 0.99
    eps = 1e-3

    def __init__(self, n: int):
        super().__init__()
        self.spec = LayerSpec("BatchNorm", n, n)
        self.gamma = self.add_param("gamma", np.ones(n))
        self.beta = self.add_param("beta", np.zeros(n))
        self.buffers["running_mean"] = np.zeros(n)
        self.buffers["running_var"] = np.ones(n)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.buffers["running_mean"],
                            self.buffers["running_var"], training, self.momentum, self.eps)

    def spec_rows(self, prefix):
        return [(prefix.rstrip("."), self.spec, self.trainable_count())]


class DSC(Module):
    """Depth-wise separable conv, optionally followed by batch norm + ReLU."""

    def __init__(self, m: int, n: int, k: int = 3, bn: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.spec = LayerSpec("DSC", m, n, k)
        self.depth = self.add_param("depth", he_uniform(rng, (k, k, m), k * k))
        self.point = self.add_param("point", he_uniform(rng, (1, 1, m, n), m))
        self.bn = self.add_child("bn", BatchNorm(n)) if bn else None

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        y = dsc_forward(x, self.depth, self.point)
        if self.bn is not None:
            y = T.relu(self.bn(y, training))
        return y

    def spec_rows(self, prefix):
        rows = [(prefix.rstrip("."), self.spec, self.depth.data.size + self.point.data.size)]
        if self.bn is not None:
            rows += self.bn.spec_rows(prefix + "bn")
        return rows


class MDSC(Module):
    """Mixed depth-wise separable conv: parallel k_i x k_i depth stages, one 1x1 mix.

    Depth-stage outputs are concatenated in ascending kernel-size order.
    """

    def __init__(self, m: int, n: int, kernel_sizes=(3, 5), bn: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        ks = tuple(sorted(kernel_sizes))
        self.spec = LayerSpec("MDSC", m, n, ks)
        self.in_channels, self.out_channels = m, n
        self.depths = [self.add_param(f"depth_k{k}", he_uniform(rng, (k, k, m), k * k)) for k in ks]
        self.point = self.add_param("point", he_uniform(rng, (1, 1, len(ks) * m, n), len(ks) * m))
        self.bn = self.add_child("bn", BatchNorm(n)) if bn else None

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        y = mdsc_forward(x, self.depths, self.point)
        if self.bn is not None:
            y = T.relu(self.bn(y, training))
        return y

    def spec_rows(self, prefix):
        own = sum(p.data.size for p in self.params.values())
        rows = [(prefix.rstrip("."), self.spec, own)]
        if self.bn is not None:
            rows += self.bn.spec_rows(prefix + "bn")
        return rows


class SharedConv(Module):
    def __init__(self, k: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.spec = LayerSpec("SharedConv", 0, 0, k, has_bias=False)
        self.kernel = self.add_param("kernel", he_uniform(rng, (k, k, 1), k * k))

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return shared_conv_forward(x, self.kernel)

    def spec_rows(self, prefix):
        return [(prefix.rstrip("."), self.spec, self.trainable_count())]


class SDRB(Module):
    """Shared-and-dilated residual block of two basic layers.

    Basic layer: shared conv -> BN -> ReLU -> dilated 3x3 conv -> BN -> ReLU.
    Output is ``x + basic2(basic1(x))`` with no activation after the sum.
    """

    def __init__(self, channels: int, rate: int, k: int = 3,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        K = shared_kernel_size(k, rate)
        self.rate, self.shared_k = rate, K
        self.spec = LayerSpec("SDRB", channels, channels, k, rate, K)
        self.basic = []
        for i in (1, 2):
            shared = self.add_child(f"shared{i}", SharedConv(K, rng))
            bn_a = self.add_child(f"bn{i}a", BatchNorm(channels))
            dil = self.add_child(f"dilated{i}", Conv(channels, channels, k, rate, "DilatedConv", rng))
            bn_b = self.add_child(f"bn{i}b", BatchNorm(channels))
            self.basic.append((shared, bn_a, dil, bn_b))

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[-1] != self.spec.in_channels:
            raise ValueError(f"SDRB: input has {x.shape[-1]} channels, block expects {self.spec.in_channels}")
        y = x
        for shared, bn_a, dil, bn_b in self.basic:
            y = T.relu(bn_a(shared(y), training))
            y = T.relu(bn_b(dil(y), training))
        return T.add(x, y)

    def spec_rows(self, prefix):
        own = sum(p.data.size for name, p in self.named_parameters().items()
                  if name.startswith(("shared", "dilated")))
        rows = [(prefix.rstrip("."), self.spec, own)]
        for i in (1, 2):
            rows += self.children[f"bn{i}a"].spec_rows(f"{prefix}bn{i}a")
            rows += self.children[f"bn{i}b"].spec_rows(f"{prefix}bn{i}b")
        return rows


def sdrb_forward(x: Tensor, block: SDRB, training: bool = False) -> Tensor:
    return block(x, training)


class CS(Module):
    """Concatenation-and-sum fusion of two equal-width feature maps."""

    def __init__(self, channels: int, kernel_sizes=(3, 5), rng: np.random.Generator | None = None):
        super().__init__()
        self.spec = LayerSpec("CS", 2 * channels, channels)
        self.mdsc = self.add_child("mdsc", MDSC(2 * channels, channels, kernel_sizes, True, rng))

    def __call__(self, a: Tensor, b: Tensor, training: bool = False) -> Tensor:
        return cs_fuse(a, b, self.mdsc, training)

    def spec_rows(self, prefix):
        return [(prefix.rstrip("."), self.spec, 0)] + self.mdsc.spec_rows(prefix + "mdsc.")


@dataclass
class MaxPool:
    window: int
    stride: int
    spec: LayerSpec = field(init=False)

    def __post_init__(self):
        self.spec = LayerSpec("MaxPool", kernel_size=self.window, pool=self.window, stride=self.stride)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return T.max_pool(x, self.window, self.stride)
