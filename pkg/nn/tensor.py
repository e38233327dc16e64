"""
Tenseurs denses et différentiation automatique en mode inverse.

Chaque opération exécutée pendant qu'une bande (`Tape`) est active, et dont une
entrée demande un gradient, y est enregistrée avec sa règle de rétropropagation.
`backward` parcourt ensuite la bande à l'envers en accumulant les gradients (+=).
Hors bande, les opérations sont de simples passes avant (mode inférence).
"""
import contextvars
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np

from config import settings
from models import GradCheckReport

logger = logging.getLogger(__name__)

BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

# Une bande active par contexte (donc par thread)
_active_tape: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)

class Tensor:
    """Tableau numpy contigu avec participation optionnelle à la bande"""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            kind = np.asarray(data).dtype.kind
            dtype = np.asarray(data).dtype if kind == "f" else settings.DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @staticmethod
    def _wrap(data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = np.ascontiguousarray(data)
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, self), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

class Parameter(Tensor):
    """
    Tenseur entraînable (requires_grad=True).

    .grad reste None tant qu'aucun backward ne l'a rempli; backward(..., params)
    met à zéro ceux qui ne participent pas au calcul.
    """

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)

@dataclass
class Node:
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule

class Tape:
    """Liste ordonnée des opérations enregistrées (ordre topologique par construction)"""

    def __init__(self):
        self.nodes: list = []
        self._tokens: list = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc) -> bool:
        _active_tape.reset(self._tokens.pop())
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: Tuple[Tensor, ...], output: Tensor, rule: BackwardRule) -> None:
        self.nodes.append(Node(inputs, output, rule))

    def clear(self) -> None:
        self.nodes.clear()

@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend l'enregistrement sur la bande active"""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)

def apply_op(data: np.ndarray, inputs: Sequence[Tensor], rule: BackwardRule) -> Tensor:
    """Crée la sortie d'une opération et l'enregistre si nécessaire"""
    tape = _active_tape.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, track)
    if track:
        tape.record(tuple(inputs), out, rule)
    return out

def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)

def _pair(a, b) -> Tuple[Tensor, Tensor]:
    """Les scalaires prennent le dtype de l'autre opérande"""
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        return as_tensor(a, b), b
    a = as_tensor(a)
    return a, as_tensor(b, a)

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Somme les axes diffusés pour ramener grad à shape"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad

def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"Formes incompatibles pour {op}: {a.shape} et {b.shape}")

# ---------------------------------------------------------------------------
# Opérations élément par élément
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "add")
    return apply_op(a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "sub")
    return apply_op(a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "mul")
    return apply_op(a.data * b.data, (a, b),
                    lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))

def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "div")
    if np.any(b.data == 0):
        raise ValueError("Division par zéro refusée")

    def rule(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return apply_op(a.data / b.data, (a, b), rule)

def power(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "power")
    out = np.power(a.data, b.data)

    def rule(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = _unbroadcast(g * b.data * np.power(a.data, b.data - 1), a.shape)
            gb = None
            if b.requires_grad:
                safe = np.where(a.data > 0, a.data, 1)
                gb = _unbroadcast(g * out * np.log(safe), b.shape)
        return ga, gb

    return apply_op(out, (a, b), rule)

def neg(a) -> Tensor:
    a = as_tensor(a)
    return apply_op(-a.data, (a,), lambda g: (-g,))

def relu(a) -> Tensor:
    a = as_tensor(a)
    return apply_op(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),))

def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(-np.abs(a.data))
    s = np.where(a.data >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype, copy=False)
    return apply_op(s, (a,), lambda g: (g * s * (1 - s),))

def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log d'une valeur négative ou nulle refusé")
    return apply_op(np.log(a.data), (a,), lambda g: (g / a.data,))

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return apply_op(out, (a,), lambda g: (g * out,))

_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "power": power}
_UNARY = {"relu": relu, "sigmoid": sigmoid, "log": log, "exp": exp}

def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Point d'entrée générique des opérations élément par élément"""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"L'opération {op_kind} attend deux opérandes")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"L'opération {op_kind} n'attend qu'un opérande")
        return _UNARY[op_kind](a)
    raise ValueError(f"Opération inconnue: {op_kind}")

def clamp(a, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return apply_op(out, (a,), lambda g: (g * inside,))

# ---------------------------------------------------------------------------
# Réductions et forme
# ---------------------------------------------------------------------------

def _axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return apply_op(out, (a,), rule)

def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims))

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return apply_op(out, (a,), rule)

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return apply_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = tuple(np.argsort(axes))
    return apply_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return apply_op(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return apply_op(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if not (2 <= a.ndim <= 3 and 2 <= b.ndim <= 3):
        raise ValueError(f"matmul attend des tenseurs de rang 2 ou 3: {a.shape} et {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"Dimensions internes incompatibles: {a.shape} x {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0] and 1 not in (a.shape[0], b.shape[0]):
        raise ValueError(f"Dimension de lot incompatible: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return apply_op(out, (a, b), rule)

# ---------------------------------------------------------------------------
# Rétropropagation
# ---------------------------------------------------------------------------

def _deposit(t: Tensor, g: np.ndarray) -> None:
    g = np.array(g, dtype=t.dtype)
    t.grad = g if t.grad is None else t.grad + g

def backward(loss: Tensor, tape: Tape, params: Optional[Sequence[Tensor]] = None) -> None:
    """
    Remplit .grad de chaque tenseur de la bande qui demande un gradient.

    Les tenseurs de `params` absents de la bande reçoivent un gradient nul.
    """
    if loss.size != 1:
        raise ValueError(f"La perte doit être un scalaire, forme reçue {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("La perte n'est pas enregistrée sur la bande")

    grads = {id(loss): np.ones_like(loss.data)}
    tensors = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        _deposit(node.output, g)
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise RuntimeError(f"Règle de gradient invalide: {ig.shape} pour une entrée {inp.shape}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                tensors[key] = inp

    for key, g in grads.items():
        _deposit(tensors[key], g)

    # Tenseurs non atteints depuis la perte: gradient nul
    reached = [t for node in tape.nodes for t in (*node.inputs, node.output)]
    for t in (*reached, *(params or ())):
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros_like(t.data)

def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-3,
    tol: float = 1e-4,
    num_coords: int = 100,
    seed: int = 0,
    eps: float = 1e-5,
    richardson: bool = True,
) -> GradCheckReport:
    """
    Compare le gradient de la bande aux différences finies centrées.

    Les différences aux pas h et h/2 sont combinées par extrapolation de
    Richardson (erreur O(h^4)). L'erreur relative par coordonnée vaut
    |g_ad - g_fd| / (|g_ad| + |g_fd| + eps).
    """
    if h <= 0:
        raise ValueError(f"Le pas h doit être positif, reçu {h}")

    probe = Tensor(np.array(x.data, copy=True), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    if out.size != 1:
        raise ValueError(f"f doit produire un scalaire, forme reçue {out.shape}")
    backward(out, tape)
    g_ad = probe.grad.reshape(-1)

    flat = probe.data.reshape(-1)
    n = flat.size
    if n <= num_coords:
        coords = np.arange(n)
    else:
        coords = np.sort(np.random.default_rng(seed).choice(n, size=num_coords, replace=False))

    def value() -> float:
        with no_grad():
            return float(f(Tensor(probe.data)).data)

    def central(i: int, step: float) -> float:
        orig = flat[i]
        flat[i] = orig + step
        fp = value()
        flat[i] = orig - step
        fm = value()
        flat[i] = orig
        return (fp - fm) / (2 * step)

    worst, worst_index = 0.0, None
    for i in coords:
        g_fd = central(i, h)
        if richardson:
            g_fd = (4 * central(i, h / 2) - g_fd) / 3
        a = float(g_ad[i])
        if np.isnan(a) or np.isnan(g_fd):
            index = tuple(int(k) for k in np.unravel_index(i, probe.shape))
            logger.warning("❌ Gradient NaN à la coordonnée %s", index)
            return GradCheckReport(passed=False, max_rel_error=float("nan"), checked=len(coords),
                                   worst_index=index, nan_index=index)
        rel = abs(a - g_fd) / (abs(a) + abs(g_fd) + eps)
        if rel > worst or worst_index is None:
            worst = max(worst, rel)
            worst_index = tuple(int(k) for k in np.unravel_index(i, probe.shape))

    return GradCheckReport(passed=worst <= tol, max_rel_error=worst, checked=len(coords), worst_index=worst_index)
