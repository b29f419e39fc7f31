"""Two-branch scene regressor: shared encoder, heatmap and coordinate decoders.

The network works on one image at a time, channels first. Encoder stages
are stride-2 convolutions; each decoder stage upsamples by two (nearest),
concatenates the encoder feature map of the same resolution (the input
image for the last stage) and applies a stride-1 convolution.
"""

from dataclasses import dataclass, field
import io
import json
from pathlib import Path
import struct
from typing import Mapping, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import InvalidConfig, ParseError, ShapeMismatch, StaleForward
from .keypoints import CoordMap
from .scene import Heatmap


MAGIC = b"RFMODEL1"
ADAM_TAG = b"ADAMSTAT"
ENCODER_STRIDE = 2
LOGIT_CLIP = 30.0
ACTIVATIONS = ("relu", "elu")


@dataclass(frozen=True)
class RegressorConfig:
    input_height: int = 64
    input_width: int = 64
    encoder_channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    encoder_activation: str = "relu"
    heatmap_hidden_activation: str = "relu"
    coord_hidden_activation: str = "elu"
    zero_init_heads: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if not self.encoder_channels or min(self.encoder_channels) < 1:
            raise InvalidConfig(f"encoder_channels must be non-empty and positive: {self.encoder_channels}")
        factor = ENCODER_STRIDE ** len(self.encoder_channels)
        if self.input_height % factor or self.input_width % factor or self.input_height < 1 or self.input_width < 1:
            raise InvalidConfig(
                f"Input {self.input_height}x{self.input_width} must be divisible by {factor}"
            )
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidConfig(f"Kernel size must be odd and positive, got {self.kernel}")
        for name in ("encoder_activation", "heatmap_hidden_activation", "coord_hidden_activation"):
            if getattr(self, name) not in ACTIVATIONS:
                raise InvalidConfig(f"{name} must be one of {ACTIVATIONS}")

    def to_dict(self) -> dict:
        return {
            "input_height": self.input_height,
            "input_width": self.input_width,
            "encoder_channels": list(self.encoder_channels),
            "kernel": self.kernel,
            "encoder_activation": self.encoder_activation,
            "heatmap_hidden_activation": self.heatmap_hidden_activation,
            "coord_hidden_activation": self.coord_hidden_activation,
            "zero_init_heads": self.zero_init_heads,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_channels: int
    out_channels: int
    stride: int


def layer_specs(config: RegressorConfig) -> list[LayerSpec]:
    """Convolution layers in checkpoint order."""
    ch = config.encoder_channels
    stages = len(ch)
    specs = []
    cin = 3
    for i, c in enumerate(ch):
        specs.append(LayerSpec(f"enc{i}", cin, c, ENCODER_STRIDE))
        cin = c
    for branch, out_channels in (("heat", 1), ("coord", 3)):
        prev = ch[-1]
        for j in range(stages):
            last = j == stages - 1
            skip = 3 if last else ch[stages - 2 - j]
            out = ch[0] if last else ch[stages - 2 - j]
            specs.append(LayerSpec(f"{branch}_dec{j}", prev + skip, out, 1))
            prev = out
        specs.append(LayerSpec(f"{branch}_out", prev, out_channels, 1))
    return specs


def parameter_shapes(config: RegressorConfig) -> dict[str, tuple[int, ...]]:
    k = config.kernel
    shapes = {}
    for spec in layer_specs(config):
        shapes[f"{spec.name}.weight"] = (spec.out_channels, spec.in_channels, k, k)
        shapes[f"{spec.name}.bias"] = (spec.out_channels,)
    return shapes


def init_parameters(config: RegressorConfig) -> dict[str, np.ndarray]:
    """Uniform in +/- 1/sqrt(fan_in); head output layers zero when configured."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for spec in layer_specs(config):
        bound = 1.0 / np.sqrt(spec.in_channels * config.kernel * config.kernel)
        w_shape = (spec.out_channels, spec.in_channels, config.kernel, config.kernel)
        weight = rng.uniform(-bound, bound, size=w_shape)
        bias = rng.uniform(-bound, bound, size=spec.out_channels)
        if config.zero_init_heads and spec.name.endswith("_out"):
            weight = np.zeros(w_shape)
            bias = np.zeros(spec.out_channels)
        params[f"{spec.name}.weight"] = weight
        params[f"{spec.name}.bias"] = bias
    return params


@dataclass(frozen=True)
class Normalization:
    """Input standardisation and coordinate-head de-normalisation."""
    input_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    input_std: tuple[float, float, float] = (1.0, 1.0, 1.0)
    coord_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    coord_scale: float = 1.0

    @classmethod
    def from_data(cls, images: list[np.ndarray], points: np.ndarray) -> "Normalization":
        pixels = np.concatenate([np.asarray(img, dtype=np.float64).reshape(-1, 3) for img in images])
        std = np.maximum(pixels.std(axis=0), 1e-3)
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        center = pts.mean(axis=0) if len(pts) else np.zeros(3)
        scale = float(np.sqrt(((pts - center) ** 2).sum(axis=1).mean())) if len(pts) else 1.0
        return cls(
            input_mean=tuple(float(v) for v in pixels.mean(axis=0)),
            input_std=tuple(float(v) for v in std),
            coord_center=tuple(float(v) for v in center),
            coord_scale=max(scale, 1e-6),
        )

    def to_dict(self) -> dict:
        return {
            "input_mean": list(self.input_mean),
            "input_std": list(self.input_std),
            "coord_center": list(self.coord_center),
            "coord_scale": self.coord_scale,
        }


@dataclass(frozen=True, eq=False)
class RegressorOutput:
    heatmap: Heatmap
    coords: CoordMap


# Layer primitives

def _im2col(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    c = x.shape[0]
    p = k // 2
    padded = np.pad(x, ((0, 0), (p, p), (p, p)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = windows.shape[1], windows.shape[2]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int], k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c, h, w = shape
    p = k // 2
    dpad = np.zeros((c, h + 2 * p, w + 2 * p))
    d = dcols.reshape(ho, wo, c, k, k).transpose(2, 3, 4, 0, 1)
    for i in range(k):
        for j in range(k):
            dpad[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, i, j]
    return dpad[:, p : p + h, p : p + w]


def _conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int):
    cout, _, k, _ = weight.shape
    cols, ho, wo = _im2col(x, k, stride)
    out = cols @ weight.reshape(cout, -1).T + bias
    return out.T.reshape(cout, ho, wo), cols


def _conv_backward(dout, cols, weight, in_shape, stride, need_dx=True):
    cout, _, k, _ = weight.shape
    ho, wo = dout.shape[1], dout.shape[2]
    dflat = dout.reshape(cout, -1).T
    dweight = (dflat.T @ cols).reshape(weight.shape)
    dbias = dflat.sum(axis=0)
    dx = None
    if need_dx:
        dx = _col2im(dflat @ weight.reshape(cout, -1), in_shape, k, stride, ho, wo)
    return dweight, dbias, dx


def _upsample(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample_backward(d: np.ndarray) -> np.ndarray:
    c, h, w = d.shape
    return d.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


def _activate(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(pre, 0.0)
    return np.where(pre > 0, pre, np.expm1(np.minimum(pre, 0.0)))


def _activate_backward(d: np.ndarray, pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return d * (pre > 0)
    return d * np.where(pre > 0, 1.0, np.exp(np.minimum(pre, 0.0)))


@dataclass
class _ForwardCache:
    image: np.ndarray
    version: int
    layers: dict = field(default_factory=dict)
    logits: Optional[np.ndarray] = None
    heatmap: Optional[np.ndarray] = None


class Regressor:
    """Scene regressor with explicit forward/backward passes."""

    def __init__(
        self,
        config: RegressorConfig,
        parameters: Optional[Mapping[str, np.ndarray]] = None,
        normalization: Optional[Normalization] = None,
    ):
        self.config = config
        self.normalization = normalization or Normalization()
        self._shapes = parameter_shapes(config)
        self._params: dict[str, np.ndarray] = {}
        self._version = 0
        self._cache: Optional[_ForwardCache] = None
        self.set_parameters(parameters if parameters is not None else init_parameters(config))

    # Parameters

    @property
    def parameter_names(self) -> list[str]:
        return list(self._shapes)

    @property
    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self._params)

    def names_for(self, *prefixes: str) -> list[str]:
        return [n for n in self._shapes if n.startswith(prefixes)]

    @property
    def encoder_names(self) -> list[str]:
        return self.names_for("enc")

    @property
    def heatmap_names(self) -> list[str]:
        return self.names_for("heat_")

    @property
    def coord_names(self) -> list[str]:
        return self.names_for("coord_")

    def set_parameters(self, updates: Mapping[str, np.ndarray]) -> None:
        """Replace some or all parameters; invalidates cached forward passes."""
        for name, value in updates.items():
            if name not in self._shapes:
                raise ShapeMismatch(f"Unknown parameter {name}")
            array = np.array(value, dtype=np.float64)
            if array.shape != self._shapes[name]:
                raise ShapeMismatch(f"{name}: expected {self._shapes[name]}, got {array.shape}")
            self._params[name] = array
        missing = set(self._shapes) - set(self._params)
        if missing:
            raise ShapeMismatch(f"Missing parameters: {sorted(missing)}")
        self._version += 1

    def with_normalization(self, normalization: Normalization) -> None:
        self.normalization = normalization
        self._version += 1

    # Passes

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        expected = (self.config.input_height, self.config.input_width, 3)
        if image.shape != expected:
            raise ShapeMismatch(f"Image shape {image.shape} does not match configured {expected}")
        return image

    def _conv(self, cache: _ForwardCache, name: str, x: np.ndarray, stride: int):
        out, cols = _conv_forward(x, self._params[f"{name}.weight"], self._params[f"{name}.bias"], stride)
        cache.layers[name] = {"cols": cols, "in_shape": x.shape}
        return out

    def forward(self, image: np.ndarray) -> RegressorOutput:
        image = self._check_image(image)
        cfg = self.config
        norm = self.normalization
        cache = _ForwardCache(image=image.copy(), version=self._version)

        x0 = ((image - np.array(norm.input_mean)) / np.array(norm.input_std)).transpose(2, 0, 1)
        stages = len(cfg.encoder_channels)
        feats = []
        h = x0
        for i in range(stages):
            pre = self._conv(cache, f"enc{i}", h, ENCODER_STRIDE)
            cache.layers[f"enc{i}"]["pre"] = pre
            h = _activate(pre, cfg.encoder_activation)
            feats.append(h)

        outputs = {}
        for branch, kind in (("heat", cfg.heatmap_hidden_activation), ("coord", cfg.coord_hidden_activation)):
            h = feats[-1]
            for j in range(stages):
                skip = x0 if j == stages - 1 else feats[stages - 2 - j]
                up = _upsample(h)
                name = f"{branch}_dec{j}"
                pre = self._conv(cache, name, np.concatenate([up, skip], axis=0), 1)
                cache.layers[name]["pre"] = pre
                cache.layers[name]["up_channels"] = up.shape[0]
                h = _activate(pre, kind)
            outputs[branch] = self._conv(cache, f"{branch}_out", h, 1)

        logits = outputs["heat"][0]
        heat = expit(np.clip(logits, -LOGIT_CLIP, LOGIT_CLIP))
        coords = np.array(norm.coord_center) + norm.coord_scale * outputs["coord"].transpose(1, 2, 0)
        cache.logits = logits
        cache.heatmap = heat
        self._cache = cache
        return RegressorOutput(heatmap=Heatmap(heat), coords=CoordMap(coords))

    def _branch_backward(self, branch, kind, d_out, grads, d_feats):
        cfg = self.config
        stages = len(cfg.encoder_channels)
        layers = self._cache.layers
        name = f"{branch}_out"
        dw, db, dh = _conv_backward(d_out, layers[name]["cols"], self._params[f"{name}.weight"], layers[name]["in_shape"], 1)
        grads[f"{name}.weight"], grads[f"{name}.bias"] = dw, db
        for j in reversed(range(stages)):
            name = f"{branch}_dec{j}"
            entry = layers[name]
            dpre = _activate_backward(dh, entry["pre"], kind)
            dw, db, dcat = _conv_backward(dpre, entry["cols"], self._params[f"{name}.weight"], entry["in_shape"], 1)
            grads[f"{name}.weight"], grads[f"{name}.bias"] = dw, db
            up_channels = entry["up_channels"]
            if j < stages - 1:
                d_feats[stages - 2 - j] += dcat[up_channels:]
            dh = _upsample_backward(dcat[:up_channels])
        d_feats[stages - 1] += dh

    def backward(self, image: np.ndarray, grad_heatmap: np.ndarray, grad_coords: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given upstream gradients on the outputs.

        grad_heatmap is (H, W) with respect to heatmap values, grad_coords is
        (H, W, 3) with respect to world coordinates.
        """
        cache = self._cache
        if cache is None or cache.version != self._version:
            raise StaleForward("backward() needs a forward() pass with the current parameters")
        image = np.asarray(image, dtype=np.float64)
        if image.shape != cache.image.shape or not np.array_equal(image, cache.image):
            raise StaleForward("backward() image differs from the last forward() input")

        cfg = self.config
        H, W = cfg.input_height, cfg.input_width
        grad_heatmap = np.asarray(grad_heatmap, dtype=np.float64)
        grad_coords = np.asarray(grad_coords, dtype=np.float64)
        if grad_heatmap.shape != (H, W) or grad_coords.shape != (H, W, 3):
            raise ShapeMismatch(
                f"Upstream gradients {grad_heatmap.shape}, {grad_coords.shape} do not match {H}x{W}"
            )

        grads = {name: np.zeros(shape) for name, shape in self._shapes.items()}
        d_feats = [np.zeros((c, H // 2 ** (i + 1), W // 2 ** (i + 1))) for i, c in enumerate(cfg.encoder_channels)]

        if np.any(grad_heatmap):
            heat = cache.heatmap
            live = np.abs(cache.logits) < LOGIT_CLIP
            d_logits = grad_heatmap * heat * (1.0 - heat) * live
            self._branch_backward("heat", cfg.heatmap_hidden_activation, d_logits[None], grads, d_feats)
        if np.any(grad_coords):
            d_out = (self.normalization.coord_scale * grad_coords).transpose(2, 0, 1)
            self._branch_backward("coord", cfg.coord_hidden_activation, d_out, grads, d_feats)

        layers = cache.layers
        for i in reversed(range(len(cfg.encoder_channels))):
            if not np.any(d_feats[i]):
                continue
            name = f"enc{i}"
            dpre = _activate_backward(d_feats[i], layers[name]["pre"], cfg.encoder_activation)
            dw, db, dx = _conv_backward(
                dpre, layers[name]["cols"], self._params[f"{name}.weight"], layers[name]["in_shape"],
                ENCODER_STRIDE, need_dx=i > 0,
            )
            grads[f"{name}.weight"], grads[f"{name}.bias"] = dw, db
            if i > 0:
                d_feats[i - 1] += dx
        return grads

    def relu_pattern(self) -> np.ndarray:
        """Signs of all ReLU pre-activations of the last forward pass."""
        if self._cache is None:
            raise StaleForward("No forward pass recorded")
        cfg = self.config
        kinds = {"enc": cfg.encoder_activation, "heat": cfg.heatmap_hidden_activation, "coord": cfg.coord_hidden_activation}
        parts = [
            (entry["pre"] > 0).ravel()
            for name, entry in self._cache.layers.items()
            if "pre" in entry and kinds[name.split("_")[0].rstrip("0123456789")] == "relu"
        ]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


def receptive_field_mask(config: RegressorConfig, row: int, col: int) -> np.ndarray:
    """Output cells that can depend on input pixel (row, col)."""
    H, W = config.input_height, config.input_width
    k = config.kernel
    ones = np.ones((1, 1, k, k))
    zero = np.zeros(1)

    def spread(mask: np.ndarray, stride: int) -> np.ndarray:
        out, _ = _conv_forward(mask, ones, zero, stride)
        return (out > 0).astype(np.float64)

    x0 = np.zeros((1, H, W))
    x0[0, row, col] = 1.0
    feats = []
    h = x0
    for _ in config.encoder_channels:
        h = spread(h, ENCODER_STRIDE)
        feats.append(h)
    stages = len(feats)
    for j in range(stages):
        skip = x0 if j == stages - 1 else feats[stages - 2 - j]
        h = spread(np.maximum(_upsample(h), skip), 1)
    return spread(h, 1)[0] > 0


# Optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    tc,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update with coupled L2 weight decay.

    tc supplies lr, beta1, beta2, epsilon and weight_decay.
    """
    t = state.step + 1
    bc1 = 1.0 - tc.beta1 ** t
    bc2 = 1.0 - tc.beta2 ** t
    new_params = {}
    m_all = dict(state.m)
    v_all = dict(state.v)
    for name, p in params.items():
        g = grads[name] + tc.weight_decay * p
        m = tc.beta1 * m_all.get(name, 0.0) + (1.0 - tc.beta1) * g
        v = tc.beta2 * v_all.get(name, 0.0) + (1.0 - tc.beta2) * (g * g)
        new_params[name] = p - tc.lr * (m / bc1) / (np.sqrt(v / bc2) + tc.epsilon)
        m_all[name] = m
        v_all[name] = v
    return new_params, AdamState(step=t, m=m_all, v=v_all)


# Checkpoint

@dataclass
class TrainingProgress:
    """Optimizer state stored alongside parameters for exact resumption."""
    adam: AdamState
    stage1_done: int = 0
    stage2_done: int = 0


def _le(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype="<f8").tobytes()


def encode_checkpoint(model: Regressor, progress: Optional[TrainingProgress] = None) -> bytes:
    """RFMODEL1 | u32 header length | JSON header | parameters (<f8, fixed order) | optional Adam trailer."""
    header = json.dumps(
        {"config": model.config.to_dict(), "normalization": model.normalization.to_dict()},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    params = model.parameters
    for name in model.parameter_names:
        buf.write(_le(params[name]))
    if progress is not None:
        buf.write(ADAM_TAG)
        buf.write(struct.pack("<QQQ", progress.adam.step, progress.stage1_done, progress.stage2_done))
        for moments in (progress.adam.m, progress.adam.v):
            for name in model.parameter_names:
                buf.write(_le(moments.get(name, np.zeros_like(params[name]))))
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> tuple[Regressor, Optional[TrainingProgress]]:
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise ParseError("Not an RFMODEL1 checkpoint")
    try:
        (header_len,) = struct.unpack_from("<I", data, 8)
        header = json.loads(bytes(view[12 : 12 + header_len]).decode("utf-8"))
        cfg = header["config"]
        cfg["encoder_channels"] = tuple(cfg["encoder_channels"])
        config = RegressorConfig(**cfg)
        norm = header["normalization"]
        normalization = Normalization(
            input_mean=tuple(norm["input_mean"]),
            input_std=tuple(norm["input_std"]),
            coord_center=tuple(norm["coord_center"]),
            coord_scale=float(norm["coord_scale"]),
        )
    except (struct.error, ValueError, KeyError, TypeError) as e:
        raise ParseError(f"Corrupt checkpoint header: {e}")

    shapes = parameter_shapes(config)
    offset = 12 + header_len

    def read_arrays() -> dict[str, np.ndarray]:
        nonlocal offset
        arrays = {}
        for name, shape in shapes.items():
            count = int(np.prod(shape))
            end = offset + 8 * count
            if end > len(data):
                raise ParseError("Checkpoint truncated")
            arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
            offset = end
        return arrays

    model = Regressor(config, read_arrays(), normalization)
    progress = None
    if offset < len(data):
        if bytes(view[offset : offset + 8]) != ADAM_TAG:
            raise ParseError("Unexpected bytes after parameters")
        try:
            step, stage1_done, stage2_done = struct.unpack_from("<QQQ", data, offset + 8)
        except struct.error:
            raise ParseError("Checkpoint truncated")
        offset += 8 + 24
        m = read_arrays()
        v = read_arrays()
        progress = TrainingProgress(AdamState(step=step, m=m, v=v), stage1_done, stage2_done)
    if offset != len(data):
        raise ParseError("Trailing bytes in checkpoint")
    return model, progress


def save_checkpoint(path: Union[str, Path], model: Regressor, progress: Optional[TrainingProgress] = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, progress))


def load_checkpoint(path: Union[str, Path]) -> tuple[Regressor, Optional[TrainingProgress]]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise ParseError(f"Cannot read checkpoint {path}: {e}")
    return decode_checkpoint(data)
