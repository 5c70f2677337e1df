"""Feature extractor, linear ranking layer and the two-part rank model."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

__all__ = [
    "Conv",
    "MaxPool",
    "Dense",
    "FeatureExtractorSpec",
    "RankingLayer",
    "RankModel",
    "DEFAULT_LAYERS",
    "default_spec",
    "parse_layers",
    "xavier_init",
    "extract_features",
    "rank_score",
]


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1

    def token(self) -> str:
        return f"conv{self.out_channels}-{self.kernel}-{self.stride}-{self.pad}"


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int = 2

    def token(self) -> str:
        return f"pool{self.window}-{self.stride}"


@dataclass(frozen=True)
class Dense:
    out_dim: int

    def token(self) -> str:
        return f"dense{self.out_dim}"


Layer = Conv | MaxPool | Dense

_TOKEN = re.compile(r"^(conv|pool|dense)(\d+(?:-\d+)*)$")


def parse_layers(text: str) -> tuple[Layer, ...]:
    """Parse a compact layer string such as ``conv8-3-1-1,pool2-2,dense64``.

    ``conv<out>[-<kernel>[-<stride>[-<pad>]]]``, ``pool<window>[-<stride>]``
    and ``dense<out>``. An empty string means no layers (features are the
    flattened pixels).
    """
    layers: list[Layer] = []
    for raw in filter(None, (t.strip() for t in text.split(","))):
        m = _TOKEN.match(raw)
        if not m:
            raise ValueError(f"bad layer token {raw!r}")
        kind, nums = m.group(1), [int(v) for v in m.group(2).split("-")]
        if kind == "conv" and len(nums) == 4:
            sizes = nums[:3]  # padding may be zero
        else:
            sizes = nums
        if min(sizes) < 1:
            raise ValueError(f"layer sizes must be >= 1 in {raw!r}")
        if kind == "conv" and len(nums) <= 4:
            layers.append(Conv(*nums))
        elif kind == "pool" and len(nums) <= 2:
            layers.append(MaxPool(nums[0], nums[1] if len(nums) > 1 else nums[0]))
        elif kind == "dense" and len(nums) == 1:
            layers.append(Dense(nums[0]))
        else:
            raise ValueError(f"bad layer token {raw!r}")
    return tuple(layers)


DEFAULT_LAYERS = "conv8-3-1-1,pool2-2,conv16-3-1-1,pool2-2,dense64"


@dataclass(frozen=True)
class FeatureExtractorSpec:
    """Input shape plus an ordered layer list; conv and dense layers carry a ReLU."""

    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise DimensionError(f"input shape must be (C,H,W) with positive extents, got {self.input_shape}")
        self.shapes()  # validates the chain

    @classmethod
    def parse(cls, input_shape, text: str) -> "FeatureExtractorSpec":
        return cls(tuple(input_shape), parse_layers(text))

    def layer_string(self) -> str:
        return ",".join(layer.token() for layer in self.layers)

    def shapes(self) -> list[tuple[int, ...]]:
        """Shape after every layer, starting with the input shape."""
        shape: tuple[int, ...] = self.input_shape
        out = [shape]
        for layer in self.layers:
            if isinstance(layer, Dense):
                if layer.out_dim < 1:
                    raise DimensionError(f"{layer.token()}: out_dim must be >= 1")
                shape = (layer.out_dim,)
            elif len(shape) != 3:
                raise DimensionError(f"{layer.token()} needs a spatial input, got {shape}")
            elif isinstance(layer, Conv):
                c, h, w = shape
                if min(layer.out_channels, layer.kernel, layer.stride) < 1 or layer.pad < 0:
                    raise DimensionError(f"{layer.token()}: invalid conv parameters")
                if h + 2 * layer.pad < layer.kernel or w + 2 * layer.pad < layer.kernel:
                    raise DimensionError(f"{layer.token()}: kernel larger than padded input {shape}")
                shape = (layer.out_channels,
                         (h + 2 * layer.pad - layer.kernel) // layer.stride + 1,
                         (w + 2 * layer.pad - layer.kernel) // layer.stride + 1)
            else:
                c, h, w = shape
                if min(layer.window, layer.stride) < 1 or h < layer.window or w < layer.window:
                    raise DimensionError(f"{layer.token()}: window exceeds input {shape}")
                shape = (c, (h - layer.window) // layer.stride + 1, (w - layer.window) // layer.stride + 1)
            out.append(shape)
        return out

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.shapes()[-1]))

    def parameter_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """(name, shape) for every extractor parameter in declaration order."""
        out = []
        shapes = self.shapes()
        for k, layer in enumerate(self.layers):
            prev = shapes[k]
            if isinstance(layer, Conv):
                out.append((f"layer{k}.weight", (layer.out_channels, prev[0], layer.kernel, layer.kernel)))
                out.append((f"layer{k}.bias", (layer.out_channels,)))
            elif isinstance(layer, Dense):
                out.append((f"layer{k}.weight", (layer.out_dim, int(np.prod(prev)))))
                out.append((f"layer{k}.bias", (layer.out_dim,)))
        return out

    def parameter_count(self) -> int:
        """Extractor parameters plus the ranking layer's d weights and bias."""
        n = sum(int(np.prod(s)) for _, s in self.parameter_shapes())
        return n + self.feature_dim + 1

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": self.layer_string()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureExtractorSpec":
        return cls.parse(d["input_shape"], d["layers"])


def default_spec(input_shape=(1, 32, 32)) -> FeatureExtractorSpec:
    return FeatureExtractorSpec.parse(input_shape, DEFAULT_LAYERS)


def xavier_init(shape, fan_in: int, fan_out: int, seed) -> Tensor:
    """Glorot-uniform draw from [-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True)


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:
        o, c, kh, kw = shape
        return c * kh * kw, o * kh * kw
    o, i = shape
    return i, o


@dataclass
class RankingLayer:
    """Single linear unit r = w . psi + b."""

    w: Tensor
    b: Tensor

    def __post_init__(self):
        if self.w.data.ndim != 1 or self.b.shape != (1,):
            raise DimensionError(f"ranking layer needs w of shape (d,) and b of shape (1,), got "
                                 f"{self.w.shape}, {self.b.shape}")


class RankModel:
    """Feature extractor followed by the ranking layer; parameters held as tensors."""

    def __init__(self, spec: FeatureExtractorSpec, params: dict[str, Tensor], ranker: RankingLayer):
        self.spec = spec
        self.params = params
        self.ranker = ranker
        expected = dict(spec.parameter_shapes())
        if list(params) != list(expected):
            raise DimensionError(f"parameter names {list(params)} do not match spec {list(expected)}")
        for name, p in params.items():
            if p.shape != expected[name]:
                raise DimensionError(f"{name}: shape {p.shape}, spec wants {expected[name]}")
        if ranker.w.shape != (spec.feature_dim,):
            raise DimensionError(f"ranking weights {ranker.w.shape} vs feature dim {spec.feature_dim}")

    @classmethod
    def initialize(cls, spec: FeatureExtractorSpec, seed: int) -> "RankModel":
        """Xavier weights, zero biases; one child generator per parameter tensor."""
        shapes = spec.parameter_shapes()
        children = np.random.SeedSequence(seed).spawn(len(shapes) + 1)
        params: dict[str, Tensor] = {}
        for (name, shape), child in zip(shapes, children):
            if name.endswith(".bias"):
                params[name] = Tensor(np.zeros(shape), requires_grad=True)
            else:
                params[name] = xavier_init(shape, *_fans(shape), np.random.default_rng(child))
        d = spec.feature_dim
        w = xavier_init((d,), d, 1, np.random.default_rng(children[-1]))
        return cls(spec, params, RankingLayer(w, Tensor(np.zeros(1), requires_grad=True)))

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()
        yield "ranker.w", self.ranker.w
        yield "ranker.b", self.ranker.b

    def extractor_parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def ranker_parameters(self) -> list[Tensor]:
        return [self.ranker.w, self.ranker.b]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def copy(self) -> "RankModel":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        ranker = RankingLayer(Tensor(self.ranker.w.data.copy(), requires_grad=True),
                              Tensor(self.ranker.b.data.copy(), requires_grad=True))
        return RankModel(self.spec, params, ranker)

    def features(self, images) -> Tensor:
        return extract_features(self, images)

    def score(self, images) -> Tensor:
        return rank_score(self, images)

    def scores(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        """Rank estimates for an (N, C, H, W) array without recording a graph."""
        out = []
        with ad.no_grad():
            for start in range(0, len(images), batch):
                out.append(rank_score(self, images[start:start + batch]).data)
        return np.concatenate(out) if out else np.zeros(0)


def extract_features(model: RankModel, image) -> Tensor:
    """psi for one image ``(C,H,W)`` -> ``(d,)`` or a batch ``(N,C,H,W)`` -> ``(N,d)``."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    spec = model.spec
    single = x.shape == spec.input_shape
    if not single and (x.data.ndim != 4 or x.shape[1:] != spec.input_shape):
        raise DimensionError(f"image shape {x.shape} does not match model input {spec.input_shape}")
    if single:
        x = ad.reshape(x, (1, *spec.input_shape))
    n = x.shape[0]
    for k, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            x = ad.conv2d(x, model.params[f"layer{k}.weight"], layer.stride, layer.pad)
            x = ad.relu(ad.add_bias(x, model.params[f"layer{k}.bias"]))
        elif isinstance(layer, MaxPool):
            x = ad.maxpool2d(x, layer.window, layer.stride)
        else:
            if x.data.ndim != 2:
                x = ad.reshape(x, (n, -1))
            weight = model.params[f"layer{k}.weight"]
            x = ad.matmul(x, ad.transpose(weight))
            x = ad.relu(ad.add_bias(x, model.params[f"layer{k}.bias"]))
    if x.data.ndim != 2:
        x = ad.reshape(x, (n, -1))
    return ad.reshape(x, (spec.feature_dim,)) if single else x


def rank_score(model: RankModel, image) -> Tensor:
    """r = w . psi + b; scalar for one image, ``(N,)`` for a batch."""
    psi = extract_features(model, image)
    w, b = model.ranker.w, model.ranker.b
    if psi.data.ndim == 1:
        r = ad.matmul(ad.reshape(psi, (1, -1)), ad.reshape(w, (-1, 1)))
        return ad.reshape(ad.add_bias(ad.reshape(r, (1,)), b), ())
    r = ad.matmul(psi, ad.reshape(w, (-1, 1)))
    r = ad.add_bias(r, b)
    return ad.reshape(r, (psi.shape[0],))
