"""Self-gated base activations and the learnable shift/slope reparameterisation.

The adaptive activation wraps a base ``phi`` as::

    u = x - c
    lam(u) = lam_neg + (lam_pos - lam_neg) * sigmoid(beta * u)
    g(x) = phi(u) + lam(u) * u

With ``lam_pos = lam_neg = c = 0`` it is exactly ``phi``. Far into the
negative region its slope tends to ``lam_neg``; far into the positive region
to ``1 + lam_pos``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, make_result

# Gate sharpness used for the slope interpolation when the base is exact ReLU.
RELU_GATE_BETA = 10.0
GELU_BETA = 1.702


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function, accurate in both tails."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class BaseActivationKind:
    """A base nonlinearity ``x * sigmoid(beta * x)`` or exact ReLU."""

    name: str
    beta: float

    def __post_init__(self):
        if self.name not in ("relu", "swish", "gelu_approx", "sigmoid_gate"):
            raise ContractError(f"unknown base activation {self.name!r}")
        if not self.beta > 0:
            raise ContractError(f"gate sharpness must be positive, got {self.beta}")

    @property
    def is_relu(self) -> bool:
        return self.name == "relu"

    @classmethod
    def relu(cls) -> "BaseActivationKind":
        return cls("relu", RELU_GATE_BETA)

    @classmethod
    def swish(cls) -> "BaseActivationKind":
        return cls("swish", 1.0)

    @classmethod
    def gelu_approx(cls) -> "BaseActivationKind":
        return cls("gelu_approx", GELU_BETA)

    @classmethod
    def sigmoid_gate(cls, beta: float) -> "BaseActivationKind":
        return cls("sigmoid_gate", float(beta))

    @classmethod
    def parse(cls, text: str) -> "BaseActivationKind":
        """Parse ``relu``, ``swish``, ``gelu_approx`` or ``sigmoid_gate:<beta>``."""
        key = text.strip().lower()
        if key == "relu":
            return cls.relu()
        if key in ("swish", "silu"):
            return cls.swish()
        if key in ("gelu", "gelu_approx"):
            return cls.gelu_approx()
        if key.startswith("sigmoid_gate"):
            _, _, beta = key.partition(":")
            if not beta:
                raise ContractError("sigmoid_gate needs a beta, e.g. 'sigmoid_gate:4.0'")
            return cls.sigmoid_gate(float(beta))
        raise ContractError(f"unknown base activation {text!r}")

    def __str__(self) -> str:
        if self.name == "sigmoid_gate":
            return f"sigmoid_gate:{self.beta!r}"
        return self.name


class Granularity(enum.Enum):
    LAYER = "layer"
    CHANNEL = "channel"
    ELEMENT = "element"


def base_forward(x, kind: BaseActivationKind) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if kind.is_relu:
        return np.maximum(x, 0.0)
    return x * sigmoid(kind.beta * x)


def base_derivative(x, kind: BaseActivationKind) -> np.ndarray:
    """d phi / dx. ReLU uses the subgradient 0 at exactly 0."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if kind.is_relu:
        return (x > 0).astype(np.float64)
    b = kind.beta
    s = sigmoid(b * x)
    return s + b * x * s * (1.0 - s)


@dataclass
class ActParams:
    """Learnable parameters of one adaptive activation layer.

    Arrays are flat. Their length is 1 (layer), ``width`` (channel) or
    ``rows * width`` (element). Element parameters are laid out row-major
    as ``[rows, width]``; batch row ``i`` uses parameter row ``i % rows``.
    """

    lambda_pos: Tensor
    lambda_neg: Tensor
    c: Tensor
    base: BaseActivationKind
    granularity: Granularity
    width: int
    rows: int = 1

    def __post_init__(self):
        n = self.expected_length()
        for name in ("lambda_pos", "lambda_neg", "c"):
            t = getattr(self, name)
            if t.shape != (n,):
                raise DimensionError(
                    f"{name} has shape {t.shape}, expected ({n},) for {self.granularity.value} granularity"
                )

    @property
    def beta(self) -> float:
        return self.base.beta

    def expected_length(self) -> int:
        if self.granularity is Granularity.LAYER:
            return 1
        if self.granularity is Granularity.CHANNEL:
            return self.width
        return self.rows * self.width

    def arrays(self) -> dict:
        return {"lambda_pos": self.lambda_pos, "lambda_neg": self.lambda_neg, "c": self.c}

    @property
    def trainable(self) -> dict:
        return {k: t.requires_grad for k, t in self.arrays().items()}

    def count(self) -> int:
        return 3 * self.expected_length()

    def is_identity(self) -> bool:
        return all(not np.any(t.data) for t in self.arrays().values())

    def broadcast(self, arr: np.ndarray, batch: int) -> np.ndarray:
        """Expand a flat parameter array to ``[batch, width]`` (or a scalar)."""
        if self.granularity is Granularity.LAYER:
            return arr[0]
        if self.granularity is Granularity.CHANNEL:
            return arr
        grid = arr.reshape(self.rows, self.width)
        return grid[np.arange(batch) % self.rows]

    def reduce(self, g: np.ndarray) -> np.ndarray:
        """Sum a ``[batch, width]`` gradient into the parameter layout."""
        if self.granularity is Granularity.LAYER:
            return np.array([g.sum()])
        if self.granularity is Granularity.CHANNEL:
            return g.sum(axis=0)
        out = np.zeros((self.rows, self.width))
        np.add.at(out, np.arange(g.shape[0]) % self.rows, g)
        return out.reshape(-1)


def make_act_params(
    width: int,
    granularity: Granularity = Granularity.CHANNEL,
    base: Optional[BaseActivationKind] = None,
    rows: int = 1,
) -> ActParams:
    """Identity-initialised parameters for one activation layer.

    ``rows`` only matters for element granularity, where it is the number
    of batch rows the parameter grid covers.
    """
    if width < 1:
        raise ContractError(f"width must be >= 1, got {width}")
    if rows < 1:
        raise ContractError(f"rows must be >= 1, got {rows}")
    granularity = Granularity(granularity)
    base = base or BaseActivationKind.relu()
    if granularity is not Granularity.ELEMENT:
        rows = 1
    n = {Granularity.LAYER: 1, Granularity.CHANNEL: width, Granularity.ELEMENT: rows * width}[granularity]
    return ActParams(
        lambda_pos=Tensor(np.zeros(n), name="lambda_pos"),
        lambda_neg=Tensor(np.zeros(n), name="lambda_neg"),
        c=Tensor(np.zeros(n), name="c"),
        base=base,
        granularity=granularity,
        width=width,
        rows=rows,
    )


def _check_input(x: np.ndarray, params: ActParams) -> None:
    if x.ndim != 2 or x.shape[1] != params.width:
        raise DimensionError(f"activation input {x.shape} does not match layer width {params.width}")


def gate_beta(params: ActParams) -> float:
    return RELU_GATE_BETA if params.base.is_relu else params.base.beta


def slope_at(u, params: ActParams) -> np.ndarray:
    """``lam(u)`` for already-centred input ``u`` of shape ``[batch, width]``."""
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64)
    _check_input(u, params)
    b = u.shape[0]
    lp = params.broadcast(params.lambda_pos.data, b)
    ln = params.broadcast(params.lambda_neg.data, b)
    return ln + (lp - ln) * sigmoid(gate_beta(params) * u)


class Partials(NamedTuple):
    d_x: np.ndarray
    d_lambda_pos: np.ndarray
    d_lambda_neg: np.ndarray
    d_c: np.ndarray


def _forward_parts(x: np.ndarray, params: ActParams):
    b = x.shape[0]
    lp = params.broadcast(params.lambda_pos.data, b)
    ln = params.broadcast(params.lambda_neg.data, b)
    c = params.broadcast(params.c.data, b)
    u = x - c
    s = sigmoid(gate_beta(params) * u)
    lam = ln + (lp - ln) * s
    return u, s, lam, lp, ln


def _local_partials(x: np.ndarray, params: ActParams):
    """Elementwise partials, before reduction into the parameter layout."""
    u, s, lam, lp, ln = _forward_parts(x, params)
    dlam = (lp - ln) * gate_beta(params) * s * (1.0 - s)
    d_x = base_derivative(u, params.base) + lam + u * dlam
    return d_x, s * u, (1.0 - s) * u


def actta_backward_partials(x, params: ActParams) -> Partials:
    """Analytic partials of the activation output.

    ``d_x`` is elementwise. Parameter partials are summed over the entries
    that share one parameter; ``d_c`` is ``-d_x`` reduced the same way.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    _check_input(x, params)
    d_x, d_lp, d_ln = _local_partials(x, params)
    return Partials(d_x, params.reduce(d_lp), params.reduce(d_ln), params.reduce(-d_x))


def actta_value(x: np.ndarray, params: ActParams) -> np.ndarray:
    u, _, lam, _, _ = _forward_parts(x, params)
    return base_forward(u, params.base) + lam * u


def actta_forward(x, params: ActParams) -> Tensor:
    """Apply the adaptive activation, recording backward rules on the tape."""
    x = as_tensor(x)
    _check_input(x.data, params)
    xd = x.data
    out = actta_value(xd, params)

    def backward_fn(g):
        d_x, d_lp, d_ln = _local_partials(xd, params)
        gx = g * d_x
        return (
            gx,
            params.reduce(g * d_lp),
            params.reduce(g * d_ln),
            params.reduce(-gx),
        )

    return make_result(out, (x, params.lambda_pos, params.lambda_neg, params.c), backward_fn, "actta")


def param_count_ratio(width: int, rows: int) -> tuple:
    """Parameter counts for layer, channel and element granularity."""
    return tuple(
        make_act_params(width, g, rows=rows).count() // 3
        for g in (Granularity.LAYER, Granularity.CHANNEL, Granularity.ELEMENT)
    )


__all__ = [
    "ActParams",
    "BaseActivationKind",
    "Granularity",
    "Partials",
    "RELU_GATE_BETA",
    "actta_backward_partials",
    "actta_forward",
    "actta_value",
    "base_derivative",
    "base_forward",
    "make_act_params",
    "param_count_ratio",
    "sigmoid",
    "slope_at",
]
