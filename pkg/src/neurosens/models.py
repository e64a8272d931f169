"""Named-layer feedforward classifiers, activation recording and checkpoints."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .reports import atomic_write_bytes

LAYER_KINDS = ("conv", "relu", "maxpool", "gap", "flatten", "dense")
PARAM_KINDS = ("conv", "dense")

CKPT_MAGIC = b"NSNSCKPT"
CKPT_VERSIONS = (1,)


class SpecError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str
    name: str = ""
    out_channels: int | None = None  # conv
    kernel: int | None = None  # conv
    stride: int = 1  # conv
    pad: int = 0  # conv
    k: int | None = None  # maxpool window
    out: int | None = None  # dense

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    class_count: int
    name_scheme: str = "vgg"
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))

    @property
    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"unknown layer {name!r}; layers are {self.layer_names}")

    def to_json(self) -> str:
        doc = {
            "name": self.name,
            "name_scheme": self.name_scheme,
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "layers": [layer.to_dict() for layer in self.layers],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        doc = json.loads(text)
        return cls(
            layers=tuple(Layer(**d) for d in doc["layers"]),
            input_shape=tuple(doc["input_shape"]),
            class_count=int(doc["class_count"]),
            name_scheme=doc.get("name_scheme", "vgg"),
            name=doc.get("name", "custom"),
        )


def _canonical_names(layers: list[Layer], scheme: str, convs_per_block: int = 2,
                     blocks_per_stage: int = 2) -> list[str]:
    counts = {kind: 0 for kind in LAYER_KINDS}
    names = []
    conv_seen = 0
    for layer in layers:
        counts[layer.kind] += 1
        n = counts[layer.kind]
        if layer.kind == "conv":
            conv_seen += 1
            if scheme == "block" and conv_seen > 1:
                i = conv_seen - 2
                z = i % convs_per_block + 1
                y = (i // convs_per_block) % blocks_per_stage + 1
                x = i // (convs_per_block * blocks_per_stage) + 1
                names.append(f"l{x}b{y}c{z}")
            else:
                names.append(f"conv{n}")
        elif layer.kind == "relu":
            names.append(f"ReLU{n}")
        elif layer.kind == "maxpool":
            names.append(f"pool{n}")
        elif layer.kind == "gap":
            names.append("gap" if n == 1 else f"gap{n}")
        elif layer.kind == "flatten":
            names.append("flatten" if n == 1 else f"flatten{n}")
        else:
            names.append(f"fc{n}")
    return names


def make_spec(layers: Iterable[Mapping | Layer], input_shape, class_count: int,
              name_scheme: str = "vgg", name: str = "custom") -> ModelSpec:
    """Build a spec from layer descriptors, assigning canonical names."""
    if name_scheme not in ("vgg", "block"):
        raise SpecError(f"unknown name scheme {name_scheme!r}")
    raw = []
    for d in layers:
        layer = d if isinstance(d, Layer) else Layer(**dict(d))
        if layer.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {layer.kind!r}")
        raw.append(layer)
    names = _canonical_names(raw, name_scheme)
    named = [Layer(**{**l.to_dict(), "name": n}) for l, n in zip(raw, names)]
    spec = ModelSpec(tuple(named), tuple(input_shape), int(class_count), name_scheme, name)
    shape_chain(spec)
    return spec


def shape_chain(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Per-layer output shapes (without batch dim); raises SpecError on the first bad layer."""
    names = [l.name for l in spec.layers]
    if len(set(names)) != len(names):
        raise SpecError(f"layer names are not unique: {names}")
    expected = _canonical_names(list(spec.layers), spec.name_scheme)
    for layer, exp in zip(spec.layers, expected):
        if layer.name != exp:
            raise SpecError(f"layer {layer.name!r}: expected canonical name {exp!r}")
    shape = tuple(spec.input_shape)
    out = []
    for layer in spec.layers:
        bad = f"layer {layer.name!r} ({layer.kind})"
        if layer.kind == "conv":
            if len(shape) != 3:
                raise SpecError(f"{bad}: needs [C,H,W] input, got {list(shape)}")
            if not layer.out_channels or not layer.kernel or layer.stride < 1 or layer.pad < 0:
                raise SpecError(f"{bad}: needs positive out_channels, kernel and stride")
            c, h, w = shape
            ho = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
            wo = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
            if ho < 1 or wo < 1:
                raise SpecError(f"{bad}: kernel larger than padded input {list(shape)}")
            shape = (layer.out_channels, ho, wo)
        elif layer.kind == "maxpool":
            if len(shape) != 3 or not layer.k or shape[1] % layer.k or shape[2] % layer.k:
                raise SpecError(f"{bad}: window {layer.k} does not tile input {list(shape)}")
            shape = (shape[0], shape[1] // layer.k, shape[2] // layer.k)
        elif layer.kind == "gap":
            if len(shape) != 3:
                raise SpecError(f"{bad}: needs [C,H,W] input, got {list(shape)}")
            shape = (shape[0],)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "dense":
            if len(shape) != 1:
                raise SpecError(f"{bad}: needs a flat input, got {list(shape)}")
            if not layer.out:
                raise SpecError(f"{bad}: needs positive out")
            shape = (layer.out,)
        out.append(shape)
    if not spec.layers or shape != (spec.class_count,):
        last = spec.layers[-1].name if spec.layers else "<empty>"
        raise SpecError(f"layer {last!r}: output {list(shape)} does not match class_count {spec.class_count}")
    return out


def vgg_mini(input_shape=(3, 16, 16), class_count: int = 10) -> ModelSpec:
    widths = [16, 16, 32, 32, 64, 64]
    layers: list[dict] = []
    for i, w in enumerate(widths, start=1):
        layers.append({"kind": "conv", "out_channels": w, "kernel": 3, "stride": 1, "pad": 1})
        layers.append({"kind": "relu"})
        if i % 2 == 0:
            layers.append({"kind": "maxpool", "k": 2})
    layers += [{"kind": "gap"}, {"kind": "dense", "out": class_count}]
    return make_spec(layers, input_shape, class_count, "vgg", "vgg-mini")


def mlp_small(input_shape=(1, 8, 8), class_count: int = 10, hidden: int = 32) -> ModelSpec:
    layers = [{"kind": "flatten"}, {"kind": "dense", "out": hidden}, {"kind": "relu"},
              {"kind": "dense", "out": class_count}]
    return make_spec(layers, input_shape, class_count, "vgg", "mlp-small")


REFERENCE_SPECS = {"vgg-mini": vgg_mini, "mlp-small": mlp_small}


def reference_spec(name: str, **kwargs) -> ModelSpec:
    try:
        return REFERENCE_SPECS[name](**kwargs)
    except KeyError:
        raise SpecError(f"unknown reference spec {name!r}; known: {sorted(REFERENCE_SPECS)}") from None


class NeuronRef(NamedTuple):
    layer: str
    channel: int


def param_names(spec: ModelSpec) -> list[str]:
    names = []
    for layer in spec.layers:
        if layer.kind in PARAM_KINDS:
            names += [f"{layer.name}.weight", f"{layer.name}.bias"]
    return names


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    chain = shape_chain(spec)
    prev = [tuple(spec.input_shape)] + chain[:-1]
    for layer, inp in zip(spec.layers, prev):
        if layer.kind == "conv":
            shapes[f"{layer.name}.weight"] = (layer.out_channels, inp[0], layer.kernel, layer.kernel)
            shapes[f"{layer.name}.bias"] = (layer.out_channels,)
        elif layer.kind == "dense":
            shapes[f"{layer.name}.weight"] = (inp[0], layer.out)
            shapes[f"{layer.name}.bias"] = (layer.out,)
    return shapes


class ActivationRecord(Mapping):
    """Outputs of every named layer for one forward pass, in spec order."""

    def __init__(self, spec: ModelSpec, outputs: "OrderedDict[str, Tensor]"):
        self.spec = spec
        self._outputs = outputs

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._outputs[name]
        except KeyError:
            raise KeyError(f"unknown layer {name!r}; recorded {list(self._outputs)}") from None

    def __iter__(self):
        return iter(self._outputs)

    def __len__(self):
        return len(self._outputs)

    @property
    def penultimate(self) -> str:
        return penultimate_layer(self.spec)


def penultimate_layer(spec: ModelSpec) -> str:
    """Name of the representation that feeds the final dense layer."""
    if spec.layers[-1].kind != "dense" or len(spec.layers) < 2:
        raise SpecError("model has no final dense layer")
    return spec.layers[-2].name


def channel_count(spec: ModelSpec, layer: str) -> int:
    names = spec.layer_names
    if layer not in names:
        raise KeyError(f"unknown layer {layer!r}; layers are {names}")
    return shape_chain(spec)[names.index(layer)][0]


def neuron_output(record: ActivationRecord, ref: NeuronRef, sample: int | None = None) -> np.ndarray:
    """Channel slice of a recorded layer, flattened per sample.

    Returns [B, dim] or, when ``sample`` is given, the [dim] vector of that sample.
    """
    layer, m = ref
    act = record[layer].data
    if not 0 <= m < act.shape[1]:
        raise IndexError(f"channel {m} out of range for layer {layer!r} with {act.shape[1]} channels")
    out = act[:, m].reshape(act.shape[0], -1)
    return out if sample is None else out[sample]


class Model:
    """Immutable parameters plus an optional channel suppression map."""

    def __init__(self, spec: ModelSpec, params: Mapping[str, np.ndarray],
                 suppression: Mapping[NeuronRef, float] | None = None):
        shapes = param_shapes(spec)
        if set(params) != set(shapes):
            missing = sorted(set(shapes) - set(params))
            extra = sorted(set(params) - set(shapes))
            raise SpecError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        for name in param_names(spec):
            arr = params[name]
            t = arr if isinstance(arr, Tensor) else Tensor(np.asarray(arr, dtype=np.float64))
            if t.shape != shapes[name]:
                raise SpecError(f"parameter {name}: shape {list(t.shape)} != {list(shapes[name])}")
            self.params[name] = t
        self.suppression: dict[NeuronRef, float] = dict(suppression or {})
        self._multipliers = self._resolve_suppression()

    def _resolve_suppression(self) -> dict[str, np.ndarray]:
        chain = shape_chain(self.spec)
        names = self.spec.layer_names
        mult: dict[str, np.ndarray] = {}
        for ref, beta in sorted(self.suppression.items()):
            if ref.layer not in names:
                raise KeyError(f"unknown layer {ref.layer!r}")
            idx = names.index(ref.layer)
            if not 0 <= ref.channel < chain[idx][0]:
                raise IndexError(f"channel {ref.channel} out of range for layer {ref.layer!r}")
            target = suppression_point(self.spec, ref.layer)
            vec = mult.setdefault(target, np.ones(chain[idx][0]))
            vec[ref.channel] = beta
        return mult

    def numpy_params(self) -> dict[str, np.ndarray]:
        return {k: v.numpy() for k, v in self.params.items()}

    def replace(self, params: Mapping[str, np.ndarray]) -> "Model":
        return Model(self.spec, params, self.suppression)

    def __call__(self, batch, record: bool = False):
        return forward(self, batch, record)


def suppression_point(spec: ModelSpec, layer: str) -> str:
    """Layer whose output carries the multiplier for neurons of ``layer``.

    conv/dense neurons are scaled after the activation that follows them.
    """
    names = spec.layer_names
    i = names.index(layer)
    if spec.layers[i].kind in PARAM_KINDS and i + 1 < len(names) and spec.layers[i + 1].kind == "relu":
        return names[i + 1]
    return layer


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases."""
    shape_chain(spec)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return Model(spec, params)


def forward(model: Model, batch, record: bool = False, params: Mapping[str, Tensor] | None = None):
    """Run the network; returns (logits [B, classes], ActivationRecord or None).

    ``params`` overrides the model's own parameter tensors (used by the trainer
    so that gradients flow to watched copies).
    """
    x = ad.as_tensor(batch)
    spec = model.spec
    if x.shape == spec.input_shape:
        x = ad.reshape(x, (1,) + spec.input_shape)
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(f"batch shape {list(x.shape)} does not match input shape {list(spec.input_shape)}")
    p = params or model.params
    outputs: OrderedDict[str, Tensor] = OrderedDict()
    for layer in spec.layers:
        if layer.kind == "conv":
            x = ad.conv2d(x, p[f"{layer.name}.weight"], p[f"{layer.name}.bias"], layer.stride, layer.pad)
        elif layer.kind == "relu":
            x = ad.relu(x)
        elif layer.kind == "maxpool":
            x = ad.maxpool2d(x, layer.k)
        elif layer.kind == "gap":
            x = ad.global_avg_pool(x)
        elif layer.kind == "flatten":
            x = ad.flatten(x)
        elif layer.kind == "dense":
            x = ad.bias_add(ad.matmul(x, p[f"{layer.name}.weight"]), p[f"{layer.name}.bias"])
        mult = model._multipliers.get(layer.name)
        if mult is not None:
            x = ad.channel_scale(x, mult)
        if record:
            outputs[layer.name] = x
    return x, (ActivationRecord(spec, outputs) if record else None)


def predict(model: Model, batch, chunk: int = 256) -> np.ndarray:
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    preds = [forward(model, data[i:i + chunk])[0].data.argmax(axis=1) for i in range(0, len(data), chunk)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.intp)


def apply_suppression(model: Model, neurons: Iterable[NeuronRef], beta: float) -> Model:
    """Copy of ``model`` whose listed channels are multiplied by ``beta`` after activation."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    sup = dict(model.suppression)
    for ref in neurons:
        ref = NeuronRef(*ref)
        sup[ref] = float(beta)
    return Model(model.spec, model.params, sup)


# ---------------------------------------------------------------------------
# checkpoint encoding
# ---------------------------------------------------------------------------

def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise ValueError("rank too large")
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated {self.what}: needed {n} bytes at offset {self.pos}, "
                                  f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> np.ndarray:
        (rank,) = self.unpack("<B")
        shape = self.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(self.take(4 * n), dtype="<f4")
        return data.astype(np.float64).reshape(shape)


def encode_checkpoint(model: Model) -> bytes:
    spec_text = model.spec.to_json().encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<H", 1), struct.pack("<I", len(spec_text)), spec_text]
    for name in param_names(model.spec):
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, encode_tensor(model.params[name].data)]
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Model:
    r = _Reader(buf, "checkpoint")
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version,) = r.unpack("<H")
    if version not in CKPT_VERSIONS:
        raise CheckpointError(f"unsupported checkpoint version {version}; supported versions: {list(CKPT_VERSIONS)}")
    (n,) = r.unpack("<I")
    spec = ModelSpec.from_json(r.take(n).decode("utf-8"))
    params = {}
    for expected in param_names(spec):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        if name != expected:
            raise CheckpointError(f"parameter {name!r} found where {expected!r} was expected")
        params[name] = r.tensor()
    if r.pos != len(buf):
        raise CheckpointError(f"trailing {len(buf) - r.pos} bytes after checkpoint payload")
    return Model(spec, params)


def save_checkpoint(model: Model, path) -> Path:
    return atomic_write_bytes(Path(path), encode_checkpoint(model))


def load_checkpoint(path) -> Model:
    return decode_checkpoint(Path(path).read_bytes())
