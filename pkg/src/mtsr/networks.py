"""Network architectures: the ZipNet generator, the VGG-style
discriminator, and the SRCNN baseline.

The generator upscales a coarse snapshot sequence [N,1,S,h,w] to a fine
frame [N,1,H,W] through 1-3 3D upscaling blocks (transposed conv + three
3x3x3 convs, each with BN and LReLU), folds the temporal axis into
channels, runs a zipper stack of K convolutional modules with staggered
and global skip additions, and finishes with a plain convolutional block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from . import tensor as T
from .tensor import RunningStats, Tensor

# spatial stride per upscaling stage; block count grows with the factor
UPSCALE_STRIDES = {2: (2,), 4: (2, 2), 10: (2, 5, 1)}


@dataclass
class InstanceConfig:
    """One measurement-granularity instance the models are built for."""

    upscaling_factor: int
    window_side: int = 80
    temporal_length: int = 6
    layout_kind: str = "uniform"

    def __post_init__(self):
        if self.temporal_length < 1:
            raise ConfigError(f"temporal_length must be >= 1, got {self.temporal_length}")
        if self.layout_kind not in ("uniform", "mixture"):
            raise ConfigError(f"layout_kind must be uniform or mixture, got {self.layout_kind!r}")
        if self.upscaling_factor not in UPSCALE_STRIDES:
            raise ConfigError(
                f"no upscaling-stage factorization for factor {self.upscaling_factor}; "
                f"supported: {sorted(UPSCALE_STRIDES)}"
            )
        if self.window_side % self.upscaling_factor != 0:
            raise ConfigError(
                f"window_side {self.window_side} not divisible by upscaling factor {self.upscaling_factor}"
            )

    @property
    def coverage(self) -> int:
        return self.upscaling_factor ** 2

    @property
    def coarse_side(self) -> int:
        return self.window_side // self.upscaling_factor

    def to_dict(self) -> dict:
        return {
            "upscaling_factor": self.upscaling_factor,
            "window_side": self.window_side,
            "temporal_length": self.temporal_length,
            "layout_kind": self.layout_kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceConfig":
        return cls(**d)


@dataclass
class ZipNetSpec:
    """Feature-map widths and depth of the generator."""

    upscaling_filters: int = 64
    zipper_modules: int = 24
    zipper_filters: int = 64
    final_block_filters: tuple = (128, 256, 1)
    lrelu_alpha: float = 0.1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        self.final_block_filters = tuple(self.final_block_filters)
        if self.zipper_modules % 2 != 0 or self.zipper_modules < 2:
            raise ConfigError(f"zipper_modules must be even and >= 2, got {self.zipper_modules}")
        if len(self.final_block_filters) != 3 or self.final_block_filters[-1] != 1:
            raise ConfigError(
                f"final_block_filters must be a triple ending in 1, got {self.final_block_filters}"
            )

    def to_dict(self) -> dict:
        return {
            "upscaling_filters": self.upscaling_filters,
            "zipper_modules": self.zipper_modules,
            "zipper_filters": self.zipper_filters,
            "final_block_filters": list(self.final_block_filters),
            "lrelu_alpha": self.lrelu_alpha,
            "bn_eps": self.bn_eps,
            "bn_momentum": self.bn_momentum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ZipNetSpec":
        d = dict(d)
        d["final_block_filters"] = tuple(d["final_block_filters"])
        return cls(**d)


def _he_kernel(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = math.prod(shape[1:])
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class _Net:
    """Common parameter bookkeeping for the three architectures."""

    def __init__(self, dtype):
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.bn_stats: dict[str, RunningStats] = {}

    def _weight(self, name, arr):
        self.params[name] = Tensor(arr, requires_grad=True, dtype=self.dtype)
        return self.params[name]

    def _conv_unit(self, name, rng, shape):
        self._weight(f"{name}.kernel", _he_kernel(rng, shape, self.dtype))
        self._weight(f"{name}.bias", np.zeros(shape[0], dtype=self.dtype))

    def _deconv_unit(self, name, rng, shape):
        # transposed-conv kernels: axis 0 is the input channel
        fan_in = shape[0] * math.prod(shape[2:])
        arr = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(self.dtype)
        self._weight(f"{name}.kernel", arr)
        self._weight(f"{name}.bias", np.zeros(shape[1], dtype=self.dtype))

    def _bn_unit(self, name, channels, momentum, dtype=None):
        self._weight(f"{name}.gamma", np.ones(channels, dtype=self.dtype))
        self._weight(f"{name}.beta", np.zeros(channels, dtype=self.dtype))
        self.bn_stats[name] = RunningStats(channels, momentum, dtype or self.dtype)

    def _bias_add(self, x, name, ndim):
        b = self.params[f"{name}.bias"]
        bshape = (1, b.data.shape[0]) + (1,) * (ndim - 2)
        return T.add(x, T.reshape(b, bshape))

    def _bn(self, x, name, mode, eps, update_stats=True):
        return T.batchnorm(
            x,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            mode=mode,
            stats=self.bn_stats[name],
            eps=eps,
            update_stats=update_stats,
        )

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def set_requires_grad(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag


class ZipNet(_Net):
    """Generator mapping coarse sequences to fine-grained frames."""

    def __init__(self, instance: InstanceConfig, spec: ZipNetSpec | None = None,
                 seed: int = 0, dtype=T.DEFAULT_DTYPE):
        super().__init__(dtype)
        self.instance = instance
        self.spec = spec or ZipNetSpec()
        self.strides = UPSCALE_STRIDES[instance.upscaling_factor]
        if math.prod(self.strides) != instance.upscaling_factor:
            raise ConfigError("upscaling stride product must equal the factor")
        rng = np.random.default_rng(seed)
        f = self.spec.upscaling_filters
        zf = self.spec.zipper_filters
        s_len = instance.temporal_length

        cin = 1
        for b, s in enumerate(self.strides):
            ks = 2 * s if s > 1 else 3
            self._deconv_unit(f"up{b}.deconv", rng, (cin, f, 3, ks, ks))
            self._bn_unit(f"up{b}.bn0", f, self.spec.bn_momentum)
            for j in range(3):
                self._conv_unit(f"up{b}.conv{j}", rng, (f, f, 3, 3, 3))
                self._bn_unit(f"up{b}.bn{j + 1}", f, self.spec.bn_momentum)
            cin = f

        self._conv_unit("entry.conv", rng, (zf, f * s_len, 3, 3))
        self._bn_unit("entry.bn", zf, self.spec.bn_momentum)

        for i in range(1, self.spec.zipper_modules + 1):
            self._conv_unit(f"zip{i}.conv", rng, (zf, zf, 3, 3))
            self._bn_unit(f"zip{i}.bn", zf, self.spec.bn_momentum)

        c = zf
        for j, fo in enumerate(self.spec.final_block_filters):
            self._conv_unit(f"final{j}.conv", rng, (fo, c, 3, 3))
            if j < 2:
                self._bn_unit(f"final{j}.bn", fo, self.spec.bn_momentum)
            c = fo

    def _zipper_module(self, x, i, mode, update_stats):
        a = self.spec.lrelu_alpha
        h = T.conv2d(x, self.params[f"zip{i}.conv.kernel"], stride=1, padding="same")
        h = self._bias_add(h, f"zip{i}.conv", 4)
        h = self._bn(h, f"zip{i}.bn", mode, self.spec.bn_eps, update_stats)
        return T.lrelu(h, a)

    def zipper_block(self, x: Tensor, mode: str = "train", update_stats: bool = True) -> Tensor:
        """Staggered-skip stack: a_i = B_i(a_{i-1}) + a_{i-2}, plus a global skip."""
        prev2, prev1 = x, x
        for i in range(1, self.spec.zipper_modules + 1):
            a_i = T.add(self._zipper_module(prev1, i, mode, update_stats), prev2)
            prev2, prev1 = prev1, a_i
        return T.add(prev1, x)

    def forward(self, x: Tensor, mode: str = "train", update_stats: bool = True) -> Tensor:
        inst, spec = self.instance, self.spec
        if x.data.ndim != 5 or x.data.shape[1] != 1:
            raise ShapeError(f"generator input must be [N,1,S,h,w], got {x.data.shape}")
        if x.data.shape[2] != inst.temporal_length:
            raise ShapeError(
                f"temporal length (axis 2) {x.data.shape[2]} != instance S {inst.temporal_length}"
            )
        if x.data.shape[3] != inst.coarse_side or x.data.shape[4] != inst.coarse_side:
            raise ShapeError(
                f"coarse extents (axes 3,4) {x.data.shape[3:]} != instance coarse side {inst.coarse_side}"
            )
        a = spec.lrelu_alpha
        h = x
        for b, s in enumerate(self.strides):
            hd = T.deconv3d(h, self.params[f"up{b}.deconv.kernel"], stride=(1, s, s), padding="same")
            hd = self._bias_add(hd, f"up{b}.deconv", 5)
            h = T.lrelu(self._bn(hd, f"up{b}.bn0", mode, spec.bn_eps, update_stats), a)
            for j in range(3):
                hc = T.conv3d(h, self.params[f"up{b}.conv{j}.kernel"], stride=1, padding="same")
                hc = self._bias_add(hc, f"up{b}.conv{j}", 5)
                h = T.lrelu(self._bn(hc, f"up{b}.bn{j + 1}", mode, spec.bn_eps, update_stats), a)

        n, c, s_len, hh, ww = h.data.shape
        h = T.reshape(h, (n, c * s_len, hh, ww))

        he = T.conv2d(h, self.params["entry.conv.kernel"], stride=1, padding="same")
        he = self._bias_add(he, "entry.conv", 4)
        h = T.lrelu(self._bn(he, "entry.bn", mode, spec.bn_eps, update_stats), a)

        h = self.zipper_block(h, mode, update_stats)

        for j in range(3):
            h = T.conv2d(h, self.params[f"final{j}.conv.kernel"], stride=1, padding="same")
            h = self._bias_add(h, f"final{j}.conv", 4)
            if j < 2:
                h = T.lrelu(self._bn(h, f"final{j}.bn", mode, spec.bn_eps, update_stats), a)
        return h

    def prepare_input(self, batch: np.ndarray) -> np.ndarray:
        """[N,S,h,w] coarse sequences -> [N,1,S,h,w] in the model dtype."""
        arr = np.asarray(batch, dtype=self.dtype)
        if arr.ndim != 4:
            raise ShapeError(f"expected [N,S,h,w] batch, got {arr.shape}")
        return arr[:, None]

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """Inference on [N,S,h,w]; returns [N,H,W] fine-frame predictions."""
        with T.no_grad():
            out = self.forward(Tensor(self.prepare_input(batch)), mode="infer")
        return out.data[:, 0]


def build_zipnet(instance: InstanceConfig, spec: ZipNetSpec | None = None,
                 seed: int = 0, dtype=T.DEFAULT_DTYPE) -> ZipNet:
    return ZipNet(instance, spec, seed=seed, dtype=dtype)


@dataclass
class DiscriminatorSpec:
    """Six convolutional blocks; feature maps double every other layer."""

    blocks: tuple = field(default_factory=lambda: ((64, 1), (64, 2), (128, 1), (128, 2), (256, 1), (256, 2)))
    lrelu_alpha: float = 0.1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        self.blocks = tuple((int(f), int(s)) for f, s in self.blocks)
        if len(self.blocks) != 6:
            raise ConfigError(f"discriminator needs 6 blocks, got {len(self.blocks)}")
        f = self.blocks[0][0]
        expected = (f, f, 2 * f, 2 * f, 4 * f, 4 * f)
        if tuple(b[0] for b in self.blocks) != expected:
            raise ConfigError(
                f"filters must double every other layer, expected {expected}, got {tuple(b[0] for b in self.blocks)}"
            )

    @classmethod
    def vgg(cls, base_filters: int = 64) -> "DiscriminatorSpec":
        f = base_filters
        return cls(blocks=((f, 1), (f, 2), (2 * f, 1), (2 * f, 2), (4 * f, 1), (4 * f, 2)))

    def to_dict(self) -> dict:
        return {
            "blocks": [list(b) for b in self.blocks],
            "lrelu_alpha": self.lrelu_alpha,
            "bn_eps": self.bn_eps,
            "bn_momentum": self.bn_momentum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorSpec":
        d = dict(d)
        d["blocks"] = tuple(tuple(b) for b in d["blocks"])
        return cls(**d)


class Discriminator(_Net):
    """Classifies frames as measured vs generated; output in (0,1)."""

    def __init__(self, input_side: int, spec: DiscriminatorSpec | None = None,
                 seed: int = 0, dtype=T.DEFAULT_DTYPE):
        super().__init__(dtype)
        self.input_side = input_side
        self.spec = spec or DiscriminatorSpec()
        rng = np.random.default_rng(seed)
        cin = 1
        for b, (filters, _stride) in enumerate(self.spec.blocks):
            self._conv_unit(f"blk{b}.conv", rng, (filters, cin, 3, 3))
            self._bn_unit(f"blk{b}.bn", filters, self.spec.bn_momentum)
            cin = filters
        self._weight("head.weight", _he_kernel(rng, (cin, 1), self.dtype))
        self._weight("head.bias", np.zeros(1, dtype=self.dtype))

    def forward(self, x: Tensor, mode: str = "train", update_stats: bool = True) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != 1:
            raise ShapeError(f"discriminator input must be [N,1,H,W], got {x.data.shape}")
        if x.data.shape[2] != self.input_side or x.data.shape[3] != self.input_side:
            raise ShapeError(
                f"frame extents (axes 2,3) {x.data.shape[2:]} != discriminator side {self.input_side}"
            )
        a = self.spec.lrelu_alpha
        h = x
        for b, (_filters, stride) in enumerate(self.spec.blocks):
            hc = T.conv2d(h, self.params[f"blk{b}.conv.kernel"], stride=stride, padding="same")
            hc = self._bias_add(hc, f"blk{b}.conv", 4)
            h = T.lrelu(self._bn(hc, f"blk{b}.bn", mode, self.spec.bn_eps, update_stats), a)
        pooled = T.mean(h, axes=(2, 3))
        logit = T.add(T.matmul(pooled, self.params["head.weight"]),
                      T.reshape(self.params["head.bias"], (1, 1)))
        return T.reshape(T.sigmoid(logit), (x.data.shape[0],))


def build_discriminator(input_side: int, spec: DiscriminatorSpec | None = None,
                        seed: int = 0, dtype=T.DEFAULT_DTYPE) -> Discriminator:
    return Discriminator(input_side, spec, seed=seed, dtype=dtype)


SRCNN_KERNELS = (9, 1, 5)
SRCNN_FILTERS = (64, 32, 1)


class Srcnn(_Net):
    """Three-layer super-resolution CNN over bicubic-upsampled input."""

    def __init__(self, upscaling_factor: int, filters=SRCNN_FILTERS, kernels=SRCNN_KERNELS,
                 seed: int = 0, dtype=T.DEFAULT_DTYPE):
        super().__init__(dtype)
        if len(filters) != 3 or len(kernels) != 3 or filters[-1] != 1:
            raise ConfigError("SRCNN takes three layers with one output map")
        self.upscaling_factor = upscaling_factor
        self.filters = tuple(filters)
        self.kernels = tuple(kernels)
        rng = np.random.default_rng(seed)
        cin = 1
        for j, (fo, k) in enumerate(zip(self.filters, self.kernels)):
            self._conv_unit(f"c{j}", rng, (fo, cin, k, k))
            cin = fo

    def forward(self, x: Tensor, mode: str = "train", update_stats: bool = True) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != 1:
            raise ShapeError(f"SRCNN input must be [N,1,H,W], got {x.data.shape}")
        h = x
        for j in range(3):
            h = T.conv2d(h, self.params[f"c{j}.kernel"], stride=1, padding="same")
            h = self._bias_add(h, f"c{j}", 4)
            if j < 2:
                h = T.relu(h)
        return h

    def prepare_input(self, batch: np.ndarray) -> np.ndarray:
        """[N,S,h,w] sequences -> bicubic upsampling of the current frame."""
        from .baselines import BicubicConfig, bicubic_upsample

        arr = np.asarray(batch, dtype=np.float64)
        cfg = BicubicConfig()
        ups = np.stack([bicubic_upsample(frame[-1], self.upscaling_factor, cfg) for frame in arr])
        return ups[:, None].astype(self.dtype)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        with T.no_grad():
            out = self.forward(Tensor(self.prepare_input(batch)), mode="infer")
        return out.data[:, 0]


def build_srcnn(upscaling_factor: int, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> Srcnn:
    return Srcnn(upscaling_factor, seed=seed, dtype=dtype)
