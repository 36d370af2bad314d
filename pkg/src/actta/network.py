"""Small feed-forward models with normalisation and adaptive activations."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Union

import numpy as np

from .activation import ActParams, BaseActivationKind, Granularity, actta_forward, make_act_params
from .errors import (
    ArchitectureMismatchError,
    ContractError,
    DegenerateVarianceError,
    DimensionError,
    FormatError,
    InconsistentDataError,
    TruncatedFileError,
    UnknownGroupError,
)
from .tensor import Tensor, add_rowvec, make_result, matmul

GROUPS = ("weights", "affine", "lambda_pos", "lambda_neg", "c")
ACTIVATION_GROUPS = frozenset({"lambda_pos", "lambda_neg", "c"})


class Dense:
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None):
        if in_features < 1 or out_features < 1:
            raise ContractError(f"dense widths must be positive, got {in_features}x{out_features}")
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.normal(0.0, math.sqrt(2.0 / in_features), size=(in_features, out_features))
        self.weight = Tensor(w, name="weight")
        self.bias = Tensor(np.zeros(out_features), name="bias")

    def forward(self, x: Tensor, train_mode: bool, update_stats: bool) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"dense layer expects width {self.in_features}, got input {x.shape}")
        return add_rowvec(matmul(x, self.weight), self.bias)

    def params(self) -> Dict[str, tuple]:
        return {"weight": ("weights", self.weight), "bias": ("weights", self.bias)}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def signature(self) -> tuple:
        return ("dense", self.in_features, self.out_features)


def _batch_norm_op(x: Tensor, gamma: Tensor, beta: Tensor, mu: np.ndarray, var: np.ndarray, eps: float, batch_stats: bool):
    xd = x.data
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[0]

    def backward_fn(g):
        dxhat = g * gamma.data
        if batch_stats:
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return make_result(out, (x, gamma, beta), backward_fn, "batch_norm")


class BatchNorm:
    """Batch normalisation over the batch axis of a ``[batch, width]`` input.

    In train mode the current batch statistics normalise the input; running
    statistics are only refreshed when ``update_stats`` is set. Eval mode
    uses the running statistics.
    """

    kind = "batchnorm"

    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5):
        if width < 1:
            raise ContractError("batchnorm width must be positive")
        if not 0.0 < momentum < 1.0:
            raise ContractError(f"momentum must lie in (0, 1), got {momentum}")
        if not eps > 0:
            raise ContractError(f"eps must be positive, got {eps}")
        self.width = width
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(width), name="gamma")
        self.beta = Tensor(np.zeros(width), name="beta")
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)

    def forward(self, x: Tensor, train_mode: bool, update_stats: bool) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.width:
            raise DimensionError(f"batchnorm expects width {self.width}, got input {x.shape}")
        if not train_mode:
            return _batch_norm_op(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps, False)
        n = x.shape[0]
        if n < 2:
            raise DegenerateVarianceError("batchnorm in train mode needs at least 2 samples per batch")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        if update_stats:
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu
            self.running_var = (1 - m) * self.running_var + m * var * n / (n - 1)
        return _batch_norm_op(x, self.gamma, self.beta, mu, var, self.eps, True)

    def params(self) -> Dict[str, tuple]:
        return {"gamma": ("affine", self.gamma), "beta": ("affine", self.beta)}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def signature(self) -> tuple:
        return ("batchnorm", self.width)


class LayerNorm:
    kind = "layernorm"

    def __init__(self, width: int, eps: float = 1e-5):
        if width < 1:
            raise ContractError("layernorm width must be positive")
        self.width = width
        self.eps = eps
        self.gamma = Tensor(np.ones(width), name="gamma")
        self.beta = Tensor(np.zeros(width), name="beta")

    def forward(self, x: Tensor, train_mode: bool, update_stats: bool) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.width:
            raise DimensionError(f"layernorm expects width {self.width}, got input {x.shape}")
        xd = x.data
        d = self.width
        mu = xd.mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(xd.var(axis=1, keepdims=True) + self.eps)
        xhat = (xd - mu) * inv
        gamma, beta = self.gamma, self.beta

        def backward_fn(g):
            dxhat = g * gamma.data
            dx = inv / d * (d * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

        return make_result(xhat * gamma.data + beta.data, (x, gamma, beta), backward_fn, "layer_norm")

    def params(self) -> Dict[str, tuple]:
        return {"gamma": ("affine", self.gamma), "beta": ("affine", self.beta)}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def signature(self) -> tuple:
        return ("layernorm", self.width)


class Activation:
    kind = "activation"

    def __init__(self, act: ActParams):
        self.act = act
        self.adaptable = True

    @property
    def width(self) -> int:
        return self.act.width

    def forward(self, x: Tensor, train_mode: bool, update_stats: bool) -> Tensor:
        return actta_forward(x, self.act)

    def params(self) -> Dict[str, tuple]:
        return {k: (k, t) for k, t in self.act.arrays().items()}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def signature(self) -> tuple:
        a = self.act
        return ("activation", a.width, a.granularity.value, a.rows, str(a.base))


Layer = Union[Dense, BatchNorm, LayerNorm, Activation]


@dataclass(frozen=True)
class ParamGroupSelection:
    """The set of parameter groups that adapt.

    Learning-rate multipliers per group live in the adaptation config.
    """

    groups: FrozenSet[str]

    def __post_init__(self):
        object.__setattr__(self, "groups", frozenset(self.groups))
        unknown = set(self.groups) - set(GROUPS)
        if unknown:
            raise UnknownGroupError(f"unknown parameter group(s): {sorted(unknown)}")

    @classmethod
    def preset(cls, name: str) -> "ParamGroupSelection":
        """Named trainable sets.

        ``affine`` is the normalisation-affine set; ``actta`` adds the
        activation parameters; ``actta_star`` freezes the affine parameters
        and adapts only the activation parameters; ``custom=a,b`` lists
        groups explicitly.
        """
        if name.startswith("custom="):
            return cls(frozenset(g.strip() for g in name[len("custom="):].split(",") if g.strip()))
        try:
            return cls(PRESETS[name])
        except KeyError:
            raise UnknownGroupError(f"unknown group preset {name!r}") from None


PRESETS = {
    "affine": frozenset({"affine"}),
    "actta": frozenset({"affine"}) | ACTIVATION_GROUPS,
    "actta_star": ACTIVATION_GROUPS,
}


class Model:
    """An ordered stack of layers with named parameter groups.

    Only the first ``ceil(depth_ratio * n_activation_layers)`` activation
    layers (counted from the input) may have their parameters trained.
    """

    def __init__(self, layers: List[Layer], depth_ratio: float = 1.0):
        if not 0.0 <= depth_ratio <= 1.0:
            raise ContractError(f"depth_ratio must lie in [0, 1], got {depth_ratio}")
        _check_widths(layers)
        self.layers = layers
        self.depth_ratio = float(depth_ratio)
        acts = self.activation_layers()
        n_adapt = math.ceil(depth_ratio * len(acts) - 1e-12)
        for i, a in enumerate(acts):
            a.adaptable = i < n_adapt

    @property
    def in_features(self) -> int:
        first = self.layers[0]
        return first.in_features if isinstance(first, Dense) else first.width

    @property
    def out_features(self) -> int:
        for layer in reversed(self.layers):
            if isinstance(layer, Dense):
                return layer.out_features
        return self.layers[-1].width

    def activation_layers(self) -> List[Activation]:
        return [l for l in self.layers if isinstance(l, Activation)]

    def named_parameters(self) -> Iterable[tuple]:
        """Yield ``(name, group, tensor)`` for every parameter."""
        for i, layer in enumerate(self.layers):
            for pname, (group, t) in layer.params().items():
                yield f"{i}.{layer.kind}.{pname}", group, t

    def parameters_in(self, group: str) -> List[Tensor]:
        if group not in GROUPS:
            raise UnknownGroupError(f"unknown parameter group {group!r}")
        return [t for _, g, t in self.named_parameters() if g == group]

    def trainable_parameters(self) -> List[tuple]:
        return [(n, g, t) for n, g, t in self.named_parameters() if t.requires_grad]

    def set_trainable(self, selection: ParamGroupSelection) -> None:
        """Enable gradients on exactly the selected groups.

        Activation groups are enabled only on depth-mask-adaptable layers.
        """
        if not selection.groups:
            raise ContractError("empty parameter group selection; nothing would adapt")
        for i, layer in enumerate(self.layers):
            allowed = not isinstance(layer, Activation) or layer.adaptable
            for _, (group, t) in layer.params().items():
                t.requires_grad = allowed and group in selection.groups
                t.grad = None

    def freeze(self) -> None:
        for _, _, t in self.named_parameters():
            t.requires_grad = False
            t.grad = None

    def zero_grad(self) -> None:
        for _, _, t in self.named_parameters():
            t.grad = None

    def forward(
        self, x, train_mode: bool = False, update_stats: bool = False, capture: Optional[list] = None
    ) -> Tensor:
        """Compute logits.

        ``train_mode`` switches batch norm to current-batch statistics;
        ``update_stats`` additionally refreshes its running statistics.
        When ``capture`` is a list, each activation layer's input array is
        appended to it.
        """
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.ndim != 2 or h.shape[1] != self.in_features:
            raise DimensionError(f"model expects [batch, {self.in_features}] input, got {h.shape}")
        for layer in self.layers:
            if capture is not None and isinstance(layer, Activation):
                capture.append(h.data)
            h = layer.forward(h, train_mode, update_stats)
        return h

    __call__ = forward

    def signature(self) -> tuple:
        return tuple(l.signature() for l in self.layers)

    def snapshot(self) -> "ModelState":
        params = {n: t.data.copy() for n, _, t in self.named_parameters()}
        buffers = {
            f"{i}.{l.kind}.{b}": arr.copy() for i, l in enumerate(self.layers) for b, arr in l.buffers().items()
        }
        return ModelState(self.signature(), self.depth_ratio, params, buffers)

    def restore(self, state: "ModelState") -> None:
        if state.signature != self.signature():
            raise ArchitectureMismatchError("state was taken from a model with a different architecture")
        for n, _, t in self.named_parameters():
            t.data = state.params[n].copy()
        for i, layer in enumerate(self.layers):
            for b in layer.buffers():
                setattr(layer, b, state.buffers[f"{i}.{layer.kind}.{b}"].copy())

    def param_counts(self) -> Dict[str, int]:
        counts = dict.fromkeys(GROUPS, 0)
        for _, g, t in self.named_parameters():
            counts[g] += t.size
        return counts


@dataclass
class ModelState:
    signature: tuple
    depth_ratio: float
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]

    def equals(self, other: "ModelState") -> bool:
        if self.signature != other.signature or self.params.keys() != other.params.keys():
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in self.params) and all(
            np.array_equal(self.buffers[k], other.buffers[k]) for k in self.buffers
        )


def _check_widths(layers: List[Layer]) -> None:
    if not layers:
        raise ContractError("model needs at least one layer")
    width = None
    for i, layer in enumerate(layers):
        if isinstance(layer, Dense):
            w_in, w_out = layer.in_features, layer.out_features
        else:
            w_in = w_out = layer.width
        if width is not None and w_in != width:
            raise DimensionError(f"layer {i} ({layer.kind}) expects width {w_in}, previous layer gives {width}")
        width = w_out


def build_mlp(
    in_features: int,
    n_classes: int,
    hidden: Iterable[int] = (64, 64, 64),
    norm: str = "batch",
    base: Optional[BaseActivationKind] = None,
    granularity: Union[Granularity, str] = Granularity.CHANNEL,
    depth_ratio: float = 1.0,
    rows: int = 1,
    seed: int = 0,
) -> Model:
    """Dense-Norm-Act blocks followed by a Dense classifier head.

    With the defaults this is the reference architecture
    ``Dense(D,64)-BN-Act-Dense(64,64)-BN-Act-Dense(64,64)-BN-Act-Dense(64,C)``.
    """
    rng = np.random.default_rng(seed)
    base = base or BaseActivationKind.relu()
    granularity = Granularity(granularity)
    layers: List[Layer] = []
    width = in_features
    for h in hidden:
        layers.append(Dense(width, h, rng))
        if norm == "batch":
            layers.append(BatchNorm(h))
        elif norm == "layer":
            layers.append(LayerNorm(h))
        elif norm != "none":
            raise ContractError(f"unknown norm kind {norm!r}")
        layers.append(Activation(make_act_params(h, granularity, base, rows=rows)))
        width = h
    layers.append(Dense(width, n_classes, rng))
    return Model(layers, depth_ratio)



def clone_model(model: Model) -> Model:
    return decode_checkpoint(encode_checkpoint(model))


def reconfigure_activations(
    model: Model,
    granularity: Union[Granularity, str, None] = None,
    depth_ratio: Optional[float] = None,
    rows: Optional[int] = None,
) -> Model:
    """Copy ``model`` with fresh identity-initialised activation parameters.

    Weights, normalisation parameters and running statistics are copied;
    only the activation parameter layout and the depth mask change.
    """
    src = clone_model(model)
    layers: List[Layer] = []
    for layer in src.layers:
        if isinstance(layer, Activation):
            a = layer.act
            g = Granularity(granularity) if granularity is not None else a.granularity
            r = rows if rows is not None else a.rows
            layer = Activation(make_act_params(a.width, g, a.base, rows=r))
        layers.append(layer)
    return Model(layers, model.depth_ratio if depth_ratio is None else depth_ratio)

# ---------------------------------------------------------------------------
# checkpoint file

CKPT_MAGIC = b"ACTA"
CKPT_VERSION = 1
_KIND_TAGS = {"dense": 1, "batchnorm": 2, "layernorm": 3, "activation": 4}
_BASE_TAGS = {"relu": 0, "swish": 1, "gelu_approx": 2, "sigmoid_gate": 3}
_GRAN_TAGS = {Granularity.LAYER: 0, Granularity.CHANNEL: 1, Granularity.ELEMENT: 2}


def _f64(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def encode_checkpoint(model: Model) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<IId", CKPT_VERSION, len(model.layers), model.depth_ratio)]
    for layer in model.layers:
        out.append(struct.pack("<I", _KIND_TAGS[layer.kind]))
        if isinstance(layer, Dense):
            out.append(struct.pack("<II", layer.in_features, layer.out_features))
            out += [_f64(layer.weight.data), _f64(layer.bias.data)]
        elif isinstance(layer, BatchNorm):
            out.append(struct.pack("<Idd", layer.width, layer.momentum, layer.eps))
            out += [_f64(a) for a in (layer.gamma.data, layer.beta.data, layer.running_mean, layer.running_var)]
        elif isinstance(layer, LayerNorm):
            out.append(struct.pack("<Id", layer.width, layer.eps))
            out += [_f64(layer.gamma.data), _f64(layer.beta.data)]
        else:
            a = layer.act
            out.append(
                struct.pack("<IIIId", a.width, _GRAN_TAGS[a.granularity], a.rows, _BASE_TAGS[a.base.name], a.base.beta)
            )
            out += [_f64(a.lambda_pos.data), _f64(a.lambda_neg.data), _f64(a.c.data)]
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file truncated: needed {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def decode_checkpoint(buf: bytes) -> Model:
    r = _Reader(buf)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, n_layers, depth_ratio = r.unpack("<IId")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    bases = {v: k for k, v in _BASE_TAGS.items()}
    grans = {v: k for k, v in _GRAN_TAGS.items()}
    layers: List[Layer] = []
    for _ in range(n_layers):
        (tag,) = r.unpack("<I")
        if tag == 1:
            i, o = r.unpack("<II")
            layer = Dense(i, o)
            layer.weight.data = r.f64(i * o).reshape(i, o)
            layer.bias.data = r.f64(o)
        elif tag == 2:
            w, mom, eps = r.unpack("<Idd")
            layer = BatchNorm(w, mom, eps)
            layer.gamma.data, layer.beta.data = r.f64(w), r.f64(w)
            layer.running_mean, layer.running_var = r.f64(w), r.f64(w)
        elif tag == 3:
            w, eps = r.unpack("<Id")
            layer = LayerNorm(w, eps)
            layer.gamma.data, layer.beta.data = r.f64(w), r.f64(w)
        elif tag == 4:
            w, g, rows, b, beta = r.unpack("<IIIId")
            if b not in bases or g not in grans:
                raise FormatError(f"unknown activation tags (base={b}, granularity={g})")
            act = make_act_params(w, grans[g], BaseActivationKind(bases[b], beta), rows=rows)
            n = act.expected_length()
            act.lambda_pos.data, act.lambda_neg.data, act.c.data = r.f64(n), r.f64(n), r.f64(n)
            layer = Activation(act)
        else:
            raise FormatError(f"unknown layer tag {tag}")
        layers.append(layer)
    if r.pos != len(buf):
        raise InconsistentDataError(f"{len(buf) - r.pos} trailing bytes after last layer")
    try:
        return Model(layers, depth_ratio)
    except (DimensionError, ContractError) as exc:
        raise InconsistentDataError(f"checkpoint layers are inconsistent: {exc}") from exc


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


def load_checkpoint(path) -> Model:
    return decode_checkpoint(Path(path).read_bytes())
