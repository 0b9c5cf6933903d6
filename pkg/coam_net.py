"""
Conditioned descriptor network.

A shared four-block CNN encoder produces a larger (f_L) and a smaller (f_S)
feature map per image. The Co-Attention Module lets every location of one
image attend over all locations of the other image at each configured scale;
the attended features are concatenated with the image's own features and
decoded (with skip connections) into a per-pixel descriptor map that is L2
normalized over channels. A small MLP on the unnormalized descriptors regresses
a distinctiveness score in [0, 1] per pixel.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from diffcore import (
    Parameter, ShapeError, Tensor, add, bilinear_resize, concat, conv2d, feature_norm, l2_normalize, linear,
    load_tensors, matmul, max_pool2x2, mul, no_grad, relu, reshape, save_tensors, sigmoid, softmax, transpose,
)

logger = logging.getLogger(__name__)

# === Constants ===
DOWNSAMPLE_FACTOR = 16
ATTENTION_SCALES = ("coarse", "coarse+fine")
DTYPES = {"float64": np.float64, "float32": np.float32}
ROW_SUM_TOL = 1e-6
UNIT_NORM_TOL = 1e-5


@dataclass
class NetworkConfig:
    image_size: int = 64
    descriptor_dim: int = 64
    encoder_widths: Tuple[int, int, int, int] = (16, 32, 64, 128)
    projection_dims: Tuple[int, int] = (64, 128)  # (fine f_L, coarse f_S)
    attention_scales: str = "coarse+fine"
    coam_enabled: bool = True
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.projection_dims = tuple(int(p) for p in self.projection_dims)
        if self.image_size <= 0 or self.image_size % DOWNSAMPLE_FACTOR:
            raise ValueError(f"image_size must be a positive multiple of {DOWNSAMPLE_FACTOR}, got {self.image_size}")
        if self.descriptor_dim < 2:
            raise ValueError(f"descriptor_dim must be >= 2, got {self.descriptor_dim}")
        if len(self.encoder_widths) != 4 or min(self.encoder_widths) < 1:
            raise ValueError(f"encoder_widths needs 4 positive widths, got {self.encoder_widths}")
        if len(self.projection_dims) != 2 or min(self.projection_dims) < 1:
            raise ValueError(f"projection_dims needs 2 positive sizes, got {self.projection_dims}")
        if self.attention_scales not in ATTENTION_SCALES:
            raise ValueError(f"attention_scales must be one of {ATTENTION_SCALES}, got {self.attention_scales!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")

    @property
    def fine_attention(self) -> bool:
        return self.attention_scales == "coarse+fine"

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]


# === Value types ===
@dataclass
class FeaturePyramid:
    f_L: Tensor
    f_S: Tensor
    skips: List[Tensor] = field(default_factory=list)

    def __post_init__(self):
        large, small = self.f_L.shape[2:], self.f_S.shape[2:]
        if large != (2 * small[0], 2 * small[1]):
            raise ShapeError("encode", (2 * small[0], 2 * small[1]), large)


@dataclass
class AttentionMatrix:
    """Row-stochastic (locations in g) x (locations in h) weights."""

    A: np.ndarray

    def __post_init__(self):
        rows = self.A.sum(axis=1)
        if np.abs(rows - 1.0).max(initial=0.0) > ROW_SUM_TOL or self.A.min(initial=0.0) < 0:
            raise ValueError("attention rows must be nonnegative and sum to 1")


@dataclass
class DescriptorMap:
    D: np.ndarray  # (H, W, descriptor_dim)
    image_size: int

    def __post_init__(self):
        norms = np.linalg.norm(self.D, axis=-1)
        alive = norms > 0
        if np.abs(norms[alive] - 1.0).max(initial=0.0) > UNIT_NORM_TOL:
            raise ValueError("descriptor map is not unit-norm per location")


@dataclass
class DistinctivenessMap:
    r: np.ndarray  # (H, W)

    def __post_init__(self):
        if self.r.size and (self.r.min() < 0 or self.r.max() > 1):
            raise ValueError("distinctiveness scores must lie in [0, 1]")


@dataclass
class PairOutput:
    """Graph tensors for one ordered pair: descriptors as (H*W, D) rows, scores as (H*W,)."""

    D1: Tensor
    r1: Tensor
    D2: Tensor
    r2: Tensor
    height: int
    width: int
    attention1: Dict[str, AttentionMatrix] = field(default_factory=dict)
    attention2: Dict[str, AttentionMatrix] = field(default_factory=dict)


@dataclass
class PairDescription:
    D1: DescriptorMap
    r1: DistinctivenessMap
    D2: DescriptorMap
    r2: DistinctivenessMap
    attention1: Dict[str, AttentionMatrix] = field(default_factory=dict)
    attention2: Dict[str, AttentionMatrix] = field(default_factory=dict)


# === Functional pieces ===
def flatten_locations(feature: Tensor) -> Tensor:
    """(1, C, h, w) -> (h*w, C), row-major locations."""
    _, c, h, w = feature.shape
    return transpose(reshape(feature, (c, h * w)), (1, 0))


def unflatten_locations(rows: Tensor, height: int, width: int) -> Tensor:
    """(h*w, C) -> (1, C, h, w)."""
    return reshape(transpose(rows, (1, 0)), (1, rows.shape[1], height, width))


def coattend(g_raw: Tensor, h_raw: Tensor, project_g=None, project_h=None) -> Tuple[Tensor, AttentionMatrix]:
    """attended[i] = sum_j A[i, j] h_proj[j] with A = softmax_j(g_proj[i] . h_proj[j]).

    g_raw is (Ng, C) and h_raw is (Nh, C); the projections are callables on
    row matrices (None keeps the raw features).
    """
    if g_raw.ndim != 2 or h_raw.ndim != 2 or g_raw.shape[1] != h_raw.shape[1]:
        raise ShapeError("coattend", f"(Ng, C) and (Nh, C) with shared C", (g_raw.shape, h_raw.shape))
    g_proj = project_g(g_raw) if project_g is not None else g_raw
    h_proj = project_h(h_raw) if project_h is not None else h_raw
    if g_proj.shape[1] != h_proj.shape[1]:
        raise ShapeError("coattend", f"matching projection dims", (g_proj.shape, h_proj.shape))
    weights = softmax(matmul(g_proj, transpose(h_proj, (1, 0))))
    return matmul(weights, h_proj), AttentionMatrix(weights.data.astype(np.float64))


class CoAMNet:
    """Encoder, co-attention, decoder and distinctiveness MLP with named Parameters."""

    def __init__(self, config: Optional[NetworkConfig] = None):
        self.config = config or NetworkConfig()
        self.params: Dict[str, Parameter] = {}
        self._rng = np.random.default_rng(self.config.seed)
        self._build()
        logger.debug(f"CoAMNet with {self.parameter_count()} weights, config {self.config}")

    # --- construction ---
    def _uniform(self, name: str, shape: Tuple[int, ...], fan_in: int):
        bound = 1.0 / np.sqrt(fan_in)
        self.params[name] = Parameter(self._rng.uniform(-bound, bound, size=shape), name=name,
                                      dtype=self.config.np_dtype)

    def _constant(self, name: str, shape: Tuple[int, ...], value: float):
        self.params[name] = Parameter(np.full(shape, value), name=name, dtype=self.config.np_dtype)

    def _conv_block(self, prefix: str, c_in: int, c_out: int, normalized: bool = True):
        self._uniform(f"{prefix}.weight", (c_out, c_in, 3, 3), c_in * 9)
        self._uniform(f"{prefix}.bias", (c_out,), c_in * 9)
        if normalized:
            self._constant(f"{prefix}.gamma", (1, c_out, 1, 1), 1.0)
            self._constant(f"{prefix}.beta", (1, c_out, 1, 1), 0.0)

    def _projection(self, prefix: str, c_in: int, c_out: int):
        self._uniform(f"{prefix}.weight", (c_out, c_in), c_in)
        self._uniform(f"{prefix}.bias", (c_out,), c_in)

    def _build(self):
        cfg = self.config
        w0, w1, w2, w3 = cfg.encoder_widths
        p_fine, p_coarse = cfg.projection_dims

        c_in = 3
        for i, width in enumerate(cfg.encoder_widths):
            self._conv_block(f"enc.{i}", c_in, width)
            c_in = width

        for direction in ("query", "key"):
            self._projection(f"att.coarse.{direction}", w3, p_coarse)
            if cfg.fine_attention:
                self._projection(f"att.fine.{direction}", w2, p_fine)

        self._conv_block("dec.0", w3 + p_coarse, w2)
        self._conv_block("dec.1", w2 + w2 + (p_fine if cfg.fine_attention else 0), w1)
        self._conv_block("dec.2", w1 + w1, w0)
        self._conv_block("dec.3", w0 + w0, w0)
        self._conv_block("dec.out", w0, cfg.descriptor_dim, normalized=False)

        self._uniform("dist.0.weight", (1, cfg.descriptor_dim), cfg.descriptor_dim)
        for i in range(3):
            if i:
                # positive so the width-1 hidden ReLUs start alive
                self._constant(f"dist.{i}.weight", (1, 1), 1.0)
            self._constant(f"dist.{i}.gamma", (1, 1), 1.0)
            self._constant(f"dist.{i}.beta", (1, 1), 0.0)

    # --- parameters ---
    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, tensors: Dict[str, np.ndarray]):
        missing = [name for name in self.params if name not in tensors]
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for name, p in self.params.items():
            value = np.asarray(tensors[name])
            if value.shape != p.shape:
                raise ShapeError(f"load {name}", p.shape, value.shape)
            p.data = value.astype(self.config.np_dtype).copy()
            p.zero_grad()

    def save(self, path: str) -> str:
        return save_tensors(path, self.params)

    @classmethod
    def load(cls, path: str, config: Optional[NetworkConfig] = None) -> "CoAMNet":
        net = cls(config)
        net.load_state_dict(load_tensors(path))
        return net

    # --- forward pieces ---
    def _p(self, name: str) -> Parameter:
        return self.params[name]

    def _block(self, prefix: str, x: Tensor) -> Tensor:
        x = conv2d(x, self._p(f"{prefix}.weight"), self._p(f"{prefix}.bias"))
        return relu(feature_norm(x, self._p(f"{prefix}.gamma"), self._p(f"{prefix}.beta")))

    def to_input(self, image) -> Tensor:
        """(H, W, 3) array in [0, 1] -> (1, 3, H, W) tensor, checking the configured size."""
        if isinstance(image, Tensor):
            return image
        array = np.asarray(image, dtype=self.config.np_dtype)
        size = self.config.image_size
        if array.shape != (size, size, 3):
            raise ShapeError("encode", (size, size, 3), array.shape)
        return Tensor(np.ascontiguousarray(array.transpose(2, 0, 1)[None]))

    def encode(self, image) -> FeaturePyramid:
        x = self.to_input(image)
        outputs = []
        for i in range(4):
            x = max_pool2x2(self._block(f"enc.{i}", x))
            outputs.append(x)
        return FeaturePyramid(f_L=outputs[2], f_S=outputs[3], skips=outputs[:2])

    def _projector(self, prefix: str):
        weight, bias = self._p(f"{prefix}.weight"), self._p(f"{prefix}.bias")
        return lambda rows: linear(rows, weight, bias)

    def attend(self, own: FeaturePyramid, other: FeaturePyramid) -> Tuple[Optional[Tensor], Tensor, Dict[str, AttentionMatrix]]:
        """Attended features (at own's locations) for the fine and coarse scales."""
        cfg = self.config
        attention = {}
        scales = [("coarse", own.f_S, other.f_S, cfg.projection_dims[1])]
        if cfg.fine_attention:
            scales.append(("fine", own.f_L, other.f_L, cfg.projection_dims[0]))
        attended = {"coarse": None, "fine": None}
        for scale, g, h, dim in scales:
            _, _, height, width = g.shape
            if not cfg.coam_enabled:
                attended[scale] = Tensor(np.zeros((1, dim, height, width), dtype=cfg.np_dtype))
                continue
            rows, attention[scale] = coattend(
                flatten_locations(g), flatten_locations(h),
                self._projector(f"att.{scale}.query"), self._projector(f"att.{scale}.key"),
            )
            attended[scale] = unflatten_locations(rows, height, width)
        return attended["fine"], attended["coarse"], attention

    def decode(self, own: FeaturePyramid, attended_L: Optional[Tensor], attended_S: Tensor) -> Tuple[Tensor, Tensor]:
        """(D_unnormalized, D), both (1, descriptor_dim, H, W)."""
        x = self._block("dec.0", concat([own.f_S, attended_S], axis=1))
        x = bilinear_resize(x, own.f_L.shape[2:])
        parts = [x, own.f_L] + ([attended_L] if attended_L is not None else [])
        x = self._block("dec.1", concat(parts, axis=1))
        for i, skip in zip((2, 3), reversed(own.skips)):
            x = bilinear_resize(x, skip.shape[2:])
            x = self._block(f"dec.{i}", concat([x, skip], axis=1))
        size = self.config.image_size
        x = bilinear_resize(x, (size, size))
        d_unnormalized = conv2d(x, self._p("dec.out.weight"), self._p("dec.out.bias"))
        return d_unnormalized, l2_normalize(d_unnormalized, axis=1)

    def distinctiveness(self, d_unnormalized: Tensor) -> Tensor:
        """Per-location score in [0, 1], returned as (H*W,) rows in row-major order.

        Each block is a bias-free linear layer followed by a learned scale and
        shift with no statistics taken over the map, so a location's score
        depends on its own descriptor only.
        """
        x = flatten_locations(d_unnormalized)
        for i in range(3):
            x = linear(x, self._p(f"dist.{i}.weight"))
            x = add(mul(x, self._p(f"dist.{i}.gamma")), self._p(f"dist.{i}.beta"))
            x = relu(x) if i < 2 else sigmoid(x)
        return reshape(x, (x.shape[0],))

    # --- pair evaluation ---
    def _conditioned(self, own: FeaturePyramid, other: FeaturePyramid):
        attended_L, attended_S, attention = self.attend(own, other)
        d_unnormalized, d = self.decode(own, attended_L, attended_S)
        r = self.distinctiveness(d_unnormalized.detach())
        return flatten_locations(d), r, attention

    def forward_pair(self, image1, image2) -> PairOutput:
        """Both conditioned descriptor maps; each image is encoded once.

        The distinctiveness branch reads a detached copy of the unnormalized
        descriptors, so its loss never reaches the encoder or decoder.
        """
        pyramid1 = self.encode(image1)
        pyramid2 = self.encode(image2)
        D1, r1, attention1 = self._conditioned(pyramid1, pyramid2)
        D2, r2, attention2 = self._conditioned(pyramid2, pyramid1)
        size = self.config.image_size
        return PairOutput(D1=D1, r1=r1, D2=D2, r2=r2, height=size, width=size,
                          attention1=attention1, attention2=attention2)

    def describe_pair(self, image1, image2) -> PairDescription:
        """Inference: D1/r1 for image1 conditioned on image2, D2/r2 with the inputs swapped."""
        with no_grad():
            out = self.forward_pair(image1, image2)
        size = self.config.image_size
        dim = self.config.descriptor_dim

        def descriptors(rows: Tensor) -> DescriptorMap:
            return DescriptorMap(D=rows.data.astype(np.float64).reshape(size, size, dim), image_size=size)

        def scores(rows: Tensor) -> DistinctivenessMap:
            return DistinctivenessMap(r=rows.data.astype(np.float64).reshape(size, size))

        return PairDescription(D1=descriptors(out.D1), r1=scores(out.r1), D2=descriptors(out.D2), r2=scores(out.r2),
                               attention1=out.attention1, attention2=out.attention2)
