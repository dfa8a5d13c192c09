"""Point-cloud encoder, projection heads, and checkpoint IO.

The reference encoder is a shared per-point network (linear + rectifier),
a channel-wise max pool, and a head network whose final layer is linear.
All parameters live in one flat float64 vector with a named layout, which
keeps optimizer steps, checkpointing, and finite-difference checks simple.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (
    DegenerateInputError,
    DimensionMismatch,
    FormatError,
    ValidationError,
)

TAU_INIT = 0.07
TAU_MIN = 1e-3
TAU_MAX = 100.0

CHECKPOINT_MAGIC = b"TRLCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture description with a width/depth scale knob.

    scale_multiplier rescales every width except the final head width, which
    stays pinned to embed_dim (the aligned-space dimension is structural).
    """

    point_feature_dims: tuple[int, ...] = (32, 64)
    head_dims: tuple[int, ...] | None = None
    embed_dim: int = 64
    scale_multiplier: float = 1.0
    input_channels: int = 6
    text_dim: int = 32
    image_dim: int = 32

    def __post_init__(self):
        object.__setattr__(
            self, "point_feature_dims", tuple(int(w) for w in self.point_feature_dims)
        )
        head = self.head_dims if self.head_dims is not None else (self.embed_dim,)
        object.__setattr__(self, "head_dims", tuple(int(w) for w in head))
        if self.embed_dim < 1:
            raise ValidationError("embed_dim must be >= 1")
        if self.input_channels not in (3, 6):
            raise ValidationError("input_channels must be 3 (xyz) or 6 (xyz+rgb)")
        if not self.point_feature_dims:
            raise ValidationError("need at least one per-point layer width")
        if self.head_dims[-1] != self.embed_dim:
            raise ValidationError("last head width must equal embed_dim")
        if self.scale_multiplier <= 0:
            raise ValidationError("scale_multiplier must be positive")
        if self.text_dim < 1 or self.image_dim < 1:
            raise ValidationError("text_dim and image_dim must be >= 1")
        for width in self.scaled_point_dims() + self.scaled_head_dims():
            if width < 1:
                raise ValidationError(
                    f"scale_multiplier {self.scale_multiplier} shrinks a width below 1"
                )

    def _scale(self, width: int) -> int:
        return int(round(width * self.scale_multiplier))

    def scaled_point_dims(self) -> tuple[int, ...]:
        return tuple(self._scale(w) for w in self.point_feature_dims)

    def scaled_head_dims(self) -> tuple[int, ...]:
        inner = tuple(self._scale(w) for w in self.head_dims[:-1])
        return inner + (self.embed_dim,)

    def layer_dims(self) -> list[tuple[int, int]]:
        """(in, out) pairs: per-point layers first, then head layers."""
        widths = (self.input_channels,) + self.scaled_point_dims()
        pairs = list(zip(widths[:-1], widths[1:]))
        head_widths = (self.scaled_point_dims()[-1],) + self.scaled_head_dims()
        pairs.extend(zip(head_widths[:-1], head_widths[1:]))
        return pairs

    @property
    def n_point_layers(self) -> int:
        return len(self.point_feature_dims)

    def to_dict(self) -> dict:
        return {
            "point_feature_dims": list(self.point_feature_dims),
            "head_dims": list(self.head_dims),
            "embed_dim": self.embed_dim,
            "scale_multiplier": self.scale_multiplier,
            "input_channels": self.input_channels,
            "text_dim": self.text_dim,
            "image_dim": self.image_dim,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderConfig":
        return cls(
            point_feature_dims=tuple(obj["point_feature_dims"]),
            head_dims=tuple(obj["head_dims"]),
            embed_dim=int(obj["embed_dim"]),
            scale_multiplier=float(obj.get("scale_multiplier", 1.0)),
            input_channels=int(obj.get("input_channels", 6)),
            text_dim=int(obj["text_dim"]),
            image_dim=int(obj["image_dim"]),
        )


@lru_cache(maxsize=None)
def _layout(config: EncoderConfig) -> tuple[tuple[str, tuple[int, ...], slice], ...]:
    entries = []
    offset = 0

    def add(name, shape):
        nonlocal offset
        size = int(np.prod(shape))
        entries.append((name, shape, slice(offset, offset + size)))
        offset += size

    for i, (fan_in, fan_out) in enumerate(config.layer_dims()):
        kind = "pt" if i < config.n_point_layers else "head"
        idx = i if kind == "pt" else i - config.n_point_layers
        add(f"{kind}{idx}.W", (fan_in, fan_out))
        add(f"{kind}{idx}.b", (fan_out,))
    add("gT.W", (config.text_dim, config.embed_dim))
    add("gT.b", (config.embed_dim,))
    add("gI.W", (config.image_dim, config.embed_dim))
    add("gI.b", (config.embed_dim,))
    add("log_tau", (1,))
    return tuple(entries)


@lru_cache(maxsize=None)
def _layout_map(config: EncoderConfig) -> dict:
    return {name: (shape, sl) for name, shape, sl in _layout(config)}


def parameter_count(config: EncoderConfig) -> int:
    """Exact trainable-parameter count, projections and log-temperature included."""
    entries = _layout(config)
    last = entries[-1]
    return last[2].stop


class ModelState:
    """All trainable parameters as one flat float64 vector plus named views."""

    def __init__(self, config: EncoderConfig, params: np.ndarray):
        params = np.asarray(params, dtype=np.float64)
        expected = parameter_count(config)
        if params.shape != (expected,):
            raise DimensionMismatch(
                f"parameter vector has shape {params.shape}, layout needs ({expected},)"
            )
        if not np.all(np.isfinite(params)):
            raise ValidationError("parameters must be finite")
        self.config = config
        self.params = params
        self._views = {
            name: params[sl].reshape(shape) for name, shape, sl in _layout(config)
        }

    def view(self, name: str) -> np.ndarray:
        return self._views[name]

    @property
    def log_tau(self) -> float:
        return float(self._views["log_tau"][0])

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)

    def copy(self) -> "ModelState":
        return ModelState(self.config, self.params.copy())

    def zeros_like_params(self) -> np.ndarray:
        return np.zeros_like(self.params)


def init_model(
    config: EncoderConfig, rng: np.random.Generator, tau_init: float = TAU_INIT
) -> ModelState:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases, tau = tau_init."""
    params = np.zeros(parameter_count(config), dtype=np.float64)
    state = ModelState(config, params)
    for name, shape, sl in _layout(config):
        if name.endswith(".W"):
            fan_in, fan_out = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            params[sl] = rng.uniform(-bound, bound, size=sl.stop - sl.start)
    state.view("log_tau")[0] = math.log(tau_init)
    return state


# ---------------------------------------------------------------------------
# forward / backward


def model_inputs(points: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """Slice an (N, 6) xyzrgb array down to the configured input channels."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < config.input_channels:
        raise DimensionMismatch(
            f"points with {pts.shape} cannot feed {config.input_channels} channels"
        )
    return pts[:, : config.input_channels]


class EncodeCache:
    """Activations recorded during encode, consumed by encode_backward."""

    __slots__ = ("point_inputs", "point_zs", "pool_argmax", "head_inputs", "head_zs")

    def __init__(self, point_inputs, point_zs, pool_argmax, head_inputs, head_zs):
        self.point_inputs = point_inputs
        self.point_zs = point_zs
        self.pool_argmax = pool_argmax
        self.head_inputs = head_inputs
        self.head_zs = head_zs


def encode(
    points: np.ndarray, state: ModelState, want_cache: bool = False
) -> np.ndarray | tuple[np.ndarray, EncodeCache]:
    """Encode one point cloud to a raw (pre-normalization) feature of length d.

    Deterministic and permutation-invariant: per-point layers act row-wise and
    the pool is a channel-wise max over points.
    """
    config = state.config
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("points must be a non-empty 2-D array")
    if x.shape[1] != config.input_channels:
        raise DimensionMismatch(
            f"cloud has {x.shape[1]} channels, config wants {config.input_channels}"
        )
    point_inputs, point_zs = [], []
    for i in range(config.n_point_layers):
        w = state.view(f"pt{i}.W")
        b = state.view(f"pt{i}.b")
        z = x @ w + b
        if want_cache:
            point_inputs.append(x)
            point_zs.append(z)
        x = np.maximum(z, 0.0)
    pooled = x.max(axis=0)
    argmax = x.argmax(axis=0)

    h = pooled
    head_inputs, head_zs = [], []
    n_head = len(config.head_dims)
    for i in range(n_head):
        w = state.view(f"head{i}.W")
        b = state.view(f"head{i}.b")
        z = h @ w + b
        if want_cache:
            head_inputs.append(h)
            head_zs.append(z)
        h = z if i == n_head - 1 else np.maximum(z, 0.0)
    if want_cache:
        return h, EncodeCache(point_inputs, point_zs, argmax, head_inputs, head_zs)
    return h


def encode_backward(
    cache: EncodeCache, state: ModelState, dout: np.ndarray, grad: np.ndarray
) -> None:
    """Accumulate d(loss)/d(encoder params) into the flat grad buffer.

    dout is the gradient w.r.t. the raw encode output. The max pool routes
    gradient to the first-occurring argmax point per channel.
    """
    config = state.config
    g = np.asarray(dout, dtype=np.float64)
    layout = _layout_map(config)
    n_head = len(config.head_dims)
    for i in reversed(range(n_head)):
        z = cache.head_zs[i]
        if i != n_head - 1:
            g = g * (z > 0.0)
        grad[layout[f"head{i}.W"][1]] += np.outer(cache.head_inputs[i], g).ravel()
        grad[layout[f"head{i}.b"][1]] += g
        g = state.view(f"head{i}.W") @ g

    last_width = g.shape[0]
    n_points = cache.point_inputs[-1].shape[0] if cache.point_inputs else 1
    d_act = np.zeros((n_points, last_width))
    d_act[cache.pool_argmax, np.arange(last_width)] = g

    for i in reversed(range(config.n_point_layers)):
        z = cache.point_zs[i]
        dz = d_act * (z > 0.0)
        grad[layout[f"pt{i}.W"][1]] += (cache.point_inputs[i].T @ dz).ravel()
        grad[layout[f"pt{i}.b"][1]] += dz.sum(axis=0)
        if i > 0:
            d_act = dz @ state.view(f"pt{i}.W").T


def normalize(v: np.ndarray) -> tuple[np.ndarray, float]:
    """L2-normalize; exact zero norm is an error, never an epsilon fudge."""
    v = np.asarray(v, dtype=np.float64)
    nrm = float(np.linalg.norm(v))
    if nrm == 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    return v / nrm, nrm


def normalize_backward(h: np.ndarray, nrm: float, grad_h: np.ndarray) -> np.ndarray:
    """Jacobian of v -> v/|v| applied to grad_h, given h = v/|v| and |v|."""
    return (grad_h - h * np.dot(h, grad_h)) / nrm


def embed_shape(
    points: np.ndarray, state: ModelState, want_cache: bool = False
):
    """Unit-norm shape embedding h^P. With want_cache, also returns backprop state."""
    if want_cache:
        raw, cache = encode(points, state, want_cache=True)
        h, nrm = normalize(raw)
        return h, (cache, h, nrm)
    raw = encode(points, state)
    h, _ = normalize(raw)
    return h


def embed_shape_backward(ctx, state: ModelState, grad_h: np.ndarray, grad: np.ndarray):
    cache, h, nrm = ctx
    encode_backward(cache, state, normalize_backward(h, nrm, grad_h), grad)


def _project(vec: np.ndarray, state: ModelState, which: str) -> tuple:
    expected = state.config.text_dim if which == "gT" else state.config.image_dim
    v = np.asarray(vec, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != expected:
        raise DimensionMismatch(
            f"{which} input has shape {v.shape}, expected ({expected},)"
        )
    y = v @ state.view(f"{which}.W") + state.view(f"{which}.b")
    h, nrm = normalize(y)
    return h, (v, h, nrm)


def project_text(vec: np.ndarray, state: ModelState, want_cache: bool = False):
    """Unit-norm projected text embedding h^T = normalize(gT(raw))."""
    h, ctx = _project(vec, state, "gT")
    return (h, ctx) if want_cache else h


def project_image(vec: np.ndarray, state: ModelState, want_cache: bool = False):
    """Unit-norm projected image embedding h^I = normalize(gI(raw))."""
    h, ctx = _project(vec, state, "gI")
    return (h, ctx) if want_cache else h


def project_backward(
    ctx, state: ModelState, which: str, grad_h: np.ndarray, grad: np.ndarray
) -> None:
    """Accumulate projection gradients (weight and bias) into the flat buffer."""
    v, h, nrm = ctx
    gy = normalize_backward(h, nrm, grad_h)
    layout = _layout_map(state.config)
    grad[layout[f"{which}.W"][1]] += np.outer(v, gy).ravel()
    grad[layout[f"{which}.b"][1]] += gy


def log_tau_slice(config: EncoderConfig) -> slice:
    return _layout_map(config)["log_tau"][1]


# ---------------------------------------------------------------------------
# checkpoint file format

_CKPT_HEADER = struct.Struct("<8sII")


def save_checkpoint(state: ModelState, path: str) -> None:
    """Binary header (version, config echo) + little-endian float64 parameters."""
    config_json = json.dumps(
        state.config.to_dict(), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(config_json)))
        fh.write(config_json)
        fh.write(struct.pack("<Q", state.params.size))
        fh.write(state.params.astype("<f8").tobytes())


def load_checkpoint(path: str, expected_config: EncoderConfig | None = None) -> ModelState:
    """Load a checkpoint, validating the stored layout (and config, if given)."""
    try:
        with open(path, "rb") as fh:
            header = fh.read(_CKPT_HEADER.size)
            if len(header) != _CKPT_HEADER.size:
                raise FormatError(f"{path}: corrupt checkpoint (truncated header)")
            magic, version, config_len = _CKPT_HEADER.unpack(header)
            if magic != CHECKPOINT_MAGIC:
                raise FormatError(f"{path}: not a trialign checkpoint")
            if version != CHECKPOINT_VERSION:
                raise FormatError(f"{path}: unsupported checkpoint version {version}")
            config_raw = fh.read(config_len)
            if len(config_raw) != config_len:
                raise FormatError(f"{path}: corrupt checkpoint (truncated config)")
            config = EncoderConfig.from_dict(json.loads(config_raw.decode("utf-8")))
            count_raw = fh.read(8)
            if len(count_raw) != 8:
                raise FormatError(f"{path}: corrupt checkpoint (missing param count)")
            (count,) = struct.unpack("<Q", count_raw)
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise FormatError(f"{path}: corrupt checkpoint (truncated parameters)")
    except OSError as exc:
        raise FormatError(f"{path}: cannot read checkpoint: {exc}") from exc
    if count != parameter_count(config):
        raise FormatError(f"{path}: parameter count disagrees with stored config")
    if expected_config is not None and config != expected_config:
        raise ValidationError(
            f"{path}: checkpoint layout does not match the current encoder config"
        )
    params = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return ModelState(config, params)
