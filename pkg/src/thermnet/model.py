"""Network specifications, parameter initialisation, inference and model files.

A network is an ordered tuple of :class:`LayerSpec`. Parameters are named by
kind and ordinal (``conv1.weight``, ``fc2.bias``); layers inside a spatial
transformer get an ``st.`` prefix. Names therefore do not depend on layer
positions, which lets a spatial transformer be attached without renaming the
downstream parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CorruptFile, ShapeMismatch

KINDS = (
    "input",
    "avgpool",
    "conv",
    "relu",
    "maxpool",
    "flatten",
    "dense",
    "dropout",
    "softmax",
    "spatial_transformer",
)

IDENTITY_THETA = np.array([1, 0, 0, 0, 1, 0], dtype=np.float32)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int | None = None  # square kernel side (conv)
    count: int | None = None  # kernels (conv) or outputs (dense)
    rate: float | None = None  # dropout
    layers: tuple = ()  # localization network (spatial_transformer)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        need = {
            "conv": ("size", "count"),
            "dense": ("count",),
            "dropout": ("rate",),
        }.get(self.kind, ())
        for name in ("size", "count", "rate"):
            present = getattr(self, name) is not None
            if present != (name in need):
                verb = "requires" if name in need else "does not take"
                raise ValueError(f"{self.kind} layer {verb} {name!r}")
        if self.kind == "dropout" and not 0 <= self.rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if (self.kind == "spatial_transformer") != bool(self.layers):
            raise ValueError("only spatial_transformer layers carry a localization net")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for name in ("size", "count", "rate"):
            if getattr(self, name) is not None:
                d[name] = getattr(self, name)
        if self.layers:
            d["layers"] = [layer.to_dict() for layer in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            d["kind"],
            d.get("size"),
            d.get("count"),
            d.get("rate"),
            tuple(cls.from_dict(x) for x in d.get("layers", ())),
        )


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_side: int = 60
    classes: int = 17
    channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        trace_shapes(self)

    def to_text(self) -> str:
        """Canonical serialisation (sorted keys, no whitespace)."""
        d = {
            "channels": self.channels,
            "classes": self.classes,
            "input_side": self.input_side,
            "layers": [layer.to_dict() for layer in self.layers],
        }
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        d = json.loads(text)
        return cls(
            tuple(LayerSpec.from_dict(x) for x in d["layers"]),
            d["input_side"],
            d["classes"],
            d["channels"],
        )

    @property
    def has_transformer(self) -> bool:
        return any(layer.kind == "spatial_transformer" for layer in self.layers)


def _trace(layers, shape, prefix=""):
    """Walk ``layers`` from ``shape``; return (shapes, params) where params maps
    parameter name -> (shape, fan_in)."""
    shapes = [shape]
    params = {}
    counters = {"conv": 0, "dense": 0}
    for i, layer in enumerate(layers):
        k = layer.kind
        if k == "input":
            if i != 0:
                raise ShapeMismatch("input layer must come first")
        elif k in ("avgpool", "maxpool"):
            if len(shape) != 3:
                raise ShapeMismatch(f"{k} at layer {i} needs a feature map, got {shape}")
            c, h, w = shape
            if h % 2 or w % 2:
                raise ShapeMismatch(f"{k} at layer {i} needs even dims, got {h}x{w}")
            shape = (c, h // 2, w // 2)
        elif k == "conv":
            if len(shape) != 3:
                raise ShapeMismatch(f"conv at layer {i} needs a feature map, got {shape}")
            c, h, w = shape
            if layer.size > h or layer.size > w:
                raise ShapeMismatch(f"conv {layer.size}x{layer.size} at layer {i} exceeds {h}x{w}")
            counters["conv"] += 1
            name = f"{prefix}conv{counters['conv']}"
            fan_in = c * layer.size * layer.size
            params[name + ".weight"] = ((layer.count, c, layer.size, layer.size), fan_in)
            params[name + ".bias"] = ((layer.count,), fan_in)
            shape = (layer.count, h - layer.size + 1, w - layer.size + 1)
        elif k == "flatten":
            shape = (int(np.prod(shape)),)
        elif k == "dense":
            fan_in = int(np.prod(shape))
            counters["dense"] += 1
            name = f"{prefix}fc{counters['dense']}"
            params[name + ".weight"] = ((fan_in, layer.count), fan_in)
            params[name + ".bias"] = ((layer.count,), fan_in)
            shape = (layer.count,)
        elif k == "spatial_transformer":
            if prefix:
                raise ShapeMismatch("nested spatial transformers are not supported")
            if len(shape) != 3 or shape[0] != 1 or shape[1] != shape[2]:
                raise ShapeMismatch(f"spatial transformer needs a 1-channel square image, got {shape}")
            loc_shapes, loc_params = _trace(layer.layers, shape, "st.")
            if loc_shapes[-1] != (6,):
                raise ShapeMismatch(f"localization net must end in 6 outputs, got {loc_shapes[-1]}")
            params.update(loc_params)
        # relu, dropout and softmax keep the shape
        shapes.append(shape)
    return shapes, params


def trace_shapes(spec: NetworkSpec) -> list:
    """Per-layer output shapes; raises ShapeMismatch if the trace does not close."""
    if spec.input_side < 1 or spec.classes < 2:
        raise ShapeMismatch("need input_side >= 1 and classes >= 2")
    shapes, _ = _trace(spec.layers, (spec.channels, spec.input_side, spec.input_side))
    if shapes[-1] != (spec.classes,):
        raise ShapeMismatch(f"network ends in {shapes[-1]}, expected ({spec.classes},)")
    return shapes


def parameter_shapes(spec: NetworkSpec) -> dict:
    _, params = _trace(spec.layers, (spec.channels, spec.input_side, spec.input_side))
    return {name: shape for name, (shape, _) in params.items()}


def parameter_count(spec: NetworkSpec) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(spec).values())


def _base_layers(classes: int, dropout: bool) -> tuple:
    layers = [
        LayerSpec("input"),
        LayerSpec("avgpool"),
        LayerSpec("conv", size=7, count=12),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("conv", size=5, count=24),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("dense", count=48),
        LayerSpec("relu"),
        LayerSpec("dense", count=classes),
    ]
    if dropout:
        layers.append(LayerSpec("dropout", rate=0.3))
    layers.append(LayerSpec("softmax"))
    return tuple(layers)


def build_study2_spec(classes: int = 17, input_side: int = 60) -> NetworkSpec:
    """Outdoor-corpus network: the indoor stack with dropout (0.3) before softmax."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    return NetworkSpec(_base_layers(classes, dropout=True), input_side, classes)


def build_study1_spec(classes: int = 15, input_side: int = 60) -> NetworkSpec:
    if classes < 2:
        raise ValueError("need at least 2 classes")
    return NetworkSpec(_base_layers(classes, dropout=False), input_side, classes)


LOCALIZATION_LAYERS = (
    LayerSpec("avgpool"),
    LayerSpec("conv", size=5, count=8),
    LayerSpec("relu"),
    LayerSpec("maxpool"),
    LayerSpec("dense", count=32),
    LayerSpec("relu"),
    LayerSpec("dense", count=6),
)


def attach_spatial_transformer(spec: NetworkSpec, localization=LOCALIZATION_LAYERS) -> NetworkSpec:
    """Insert a spatial transformer right after the input layer."""
    if spec.has_transformer:
        raise ShapeMismatch("spec already has a spatial transformer")
    if spec.channels != 1:
        raise ShapeMismatch("spatial transformer needs a single-channel input")
    layers = list(spec.layers)
    at = 1 if layers and layers[0].kind == "input" else 0
    layers.insert(at, LayerSpec("spatial_transformer", layers=tuple(localization)))
    return replace(spec, layers=tuple(layers))


# --- models -----------------------------------------------------------------


@dataclass(eq=False)
class Model:
    spec: NetworkSpec
    params: dict
    class_labels: tuple
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.class_labels = tuple(self.class_labels)
        if len(self.class_labels) != self.spec.classes:
            raise ShapeMismatch(
                f"{len(self.class_labels)} labels for a {self.spec.classes}-class network"
            )
        expected = parameter_shapes(self.spec)
        if set(expected) != set(self.params):
            raise ShapeMismatch("parameter names do not match the network spec")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise ShapeMismatch(f"{name}: shape {self.params[name].shape} != {shape}")

    @property
    def input_side(self) -> int:
        return self.spec.input_side

    def copy(self) -> "Model":
        return Model(
            self.spec,
            {k: v.copy() for k, v in self.params.items()},
            self.class_labels,
            json.loads(json.dumps(self.training_meta)),
        )

    def logits(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        tensors = {k: ad.Tensor(v) for k, v in self.params.items()}
        return run_network(self.spec, tensors, ad.Tensor(x), train, rng).data

    def forward(self, x: np.ndarray, mode: str = "eval", rng=None) -> np.ndarray:
        """Class probabilities for a batch ``x`` of shape [B, 1, side, side]."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x, dtype=self.params_dtype)
        side = self.spec.input_side
        if x.ndim != 4 or x.shape[1:] != (self.spec.channels, side, side):
            raise ShapeMismatch(
                f"expected input [B,{self.spec.channels},{side},{side}], got {x.shape}"
            )
        return ad.softmax(self.logits(x, mode == "train", rng))

    @property
    def params_dtype(self):
        return next(iter(self.params.values())).dtype


def init_parameters(
    spec: NetworkSpec, seed: int = 0, class_labels=None, dtype=np.float32, output_gain: float = 0.1
) -> Model:
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases.

    The logit layer is scaled by ``output_gain`` so an untrained network is
    close to uniform on any input; the last localization layer starts at the
    identity transform.
    """
    rng = np.random.default_rng(seed)
    _, shapes = _trace(spec.layers, (spec.channels, spec.input_side, spec.input_side))
    last_loc = last_fc = None
    for name in shapes:
        if name.startswith("st.fc"):
            last_loc = name.rsplit(".", 1)[0]
        elif name.startswith("fc"):
            last_fc = name.rsplit(".", 1)[0]
    params = {}
    for name, (shape, fan_in) in shapes.items():
        if name.endswith(".bias"):
            arr = np.zeros(shape)
            if last_loc and name == last_loc + ".bias":
                arr = IDENTITY_THETA.astype(np.float64)
        elif last_loc and name == last_loc + ".weight":
            arr = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
            if name == f"{last_fc}.weight":
                arr *= output_gain
        params[name] = arr.astype(dtype)
    if class_labels is None:
        class_labels = tuple(f"class{i}" for i in range(spec.classes))
    return Model(spec, params, class_labels, {"init_seed": seed})


def _run_layers(layers, params, x, train, rng, prefix=""):
    counters = {"conv": 0, "dense": 0}
    for layer in layers:
        k = layer.kind
        if k == "avgpool":
            x = ad.avgpool2d(x)
        elif k == "maxpool":
            x = ad.maxpool2d(x)
        elif k == "relu":
            x = ad.relu(x)
        elif k == "flatten":
            x = ad.flatten(x)
        elif k == "conv":
            counters["conv"] += 1
            name = f"{prefix}conv{counters['conv']}"
            x = ad.conv2d(x, params[name + ".weight"], params[name + ".bias"])
        elif k == "dense":
            counters["dense"] += 1
            name = f"{prefix}fc{counters['dense']}"
            x = ad.dense(x, params[name + ".weight"], params[name + ".bias"])
        elif k == "dropout":
            x = ad.dropout(x, layer.rate, train, rng)
        elif k == "spatial_transformer":
            x = spatial_transformer(x, layer.layers, params, train, rng)
        elif k == "softmax":
            break  # probabilities are taken outside the graph (see softmax_xent)
    return x


def spatial_transformer(x, localization, params, train=False, rng=None):
    theta = _run_layers(localization, params, x, train, rng, prefix="st.")
    B, _, H, W = x.shape
    grid = ad.affine_grid(theta, H, W)
    return ad.grid_sample(x, grid)


def run_network(spec: NetworkSpec, params: dict, x, train=False, rng=None):
    """Logits graph (everything before the softmax) for tensor ``x``."""
    return _run_layers(spec.layers, params, x, train, rng)


# --- DTIM model files -------------------------------------------------------

DTIM_MAGIC = b"DTIM"
DTIM_VERSION = 1


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_model(model: Model) -> bytes:
    out = [DTIM_MAGIC, struct.pack("<H", DTIM_VERSION), _pack_str(model.spec.to_text())]
    out.append(struct.pack("<I", len(model.class_labels)))
    out.extend(_pack_str(label) for label in model.class_labels)
    out.append(_pack_str(json.dumps(model.training_meta, sort_keys=True, separators=(",", ":"))))
    names = sorted(model.params)
    out.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        out.append(_pack_str(name))
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptFile(f"{self.source}: truncated model file")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptFile(f"{self.source}: invalid UTF-8 in model file") from None


def decode_model(buf: bytes, source: str = "<bytes>") -> Model:
    r = _Reader(buf, source)
    if r.take(4) != DTIM_MAGIC:
        raise CorruptFile(f"{source}: bad model magic")
    (version,) = r.unpack("<H")
    if version != DTIM_VERSION:
        raise CorruptFile(f"{source}: unsupported model version {version}")
    try:
        spec = NetworkSpec.from_text(r.string())
        (nlabels,) = r.unpack("<I")
        labels = tuple(r.string() for _ in range(nlabels))
        meta = json.loads(r.string())
        (nparams,) = r.unpack("<I")
        params = {}
        for _ in range(nparams):
            name = r.string()
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            count = int(np.prod(shape))
            params[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        if r.pos != len(buf):
            raise CorruptFile(f"{source}: {len(buf) - r.pos} trailing bytes")
        return Model(spec, params, labels, meta)
    except CorruptFile:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFile(f"{source}: {exc}") from None


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(encode_model(model))


def load_model(path) -> Model:
    path = Path(path)
    return decode_model(path.read_bytes(), str(path))
