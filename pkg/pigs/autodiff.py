"""
Reverse-over-forward differentiation.

Input derivatives (up to second order) are carried forward in ``Jet2``
values; every arithmetic step on a jet component is recorded on a ``Tape``
so that any scalar built from jets can be differentiated in reverse mode
with respect to the parameter blocks of a ``ParamVector``.

All arithmetic is float64. Values are numpy arrays, so one jet describes a
whole batch of collocation points at once.
"""
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from pigs.errors import ConfigurationError, ContractViolationError, NumericOverflowError


ArrayLike = Union[np.ndarray, float, int]


def _check_finite(op: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericOverflowError(op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Node(NamedTuple):
    """One recorded operation: tag, parent node indices and their VJPs."""
    tag: str
    parents: Tuple[int, ...]
    vjps: Tuple[Callable[[np.ndarray], np.ndarray], ...]
    shape: Tuple[int, ...]


class Tape:
    """Append-only record of operations on tracked values."""

    def __init__(self):
        self.nodes: List[Node] = []
        # parameter block name -> leaf node index
        self.params: Dict[str, int] = {}
        self.layout: Optional["Layout"] = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, tag: str, parents: Sequence["Var"], vjps: Sequence[Callable], value: np.ndarray) -> "Var":
        for parent in parents:
            if parent.tape is not self:
                raise ContractViolationError(f"operand of '{tag}' belongs to another tape")
        self.nodes.append(Node(tag, tuple(p.index for p in parents), tuple(vjps), value.shape))
        return Var(value, self, len(self.nodes) - 1)

    def watch(self, name: str, array: np.ndarray) -> "Var":
        """Register a parameter block as a leaf node."""
        if name in self.params:
            raise ContractViolationError(f"parameter block '{name}' watched twice")
        leaf = self.record("param", (), (), np.asarray(array, dtype=np.float64))
        self.params[name] = leaf.index
        return leaf

    def watch_vector(self, params: "ParamVector") -> Dict[str, "Var"]:
        """Watch every block of ``params``; backward() then returns flat gradients."""
        self.layout = params.layout
        return {block.name: self.watch(block.name, params.view(block.name)) for block in params.layout.blocks}

    def adjoints(self, root: "Var") -> List[Optional[np.ndarray]]:
        """Reverse accumulation from ``root``; entries are None for untouched nodes."""
        adjoint: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        if root.tape is not self:
            return adjoint
        adjoint[root.index] = np.ones(root.shape)
        for i in range(root.index, -1, -1):
            g = adjoint[i]
            if g is None:
                continue
            node = self.nodes[i]
            for parent, vjp in zip(node.parents, node.vjps):
                contribution = vjp(g)
                prev = adjoint[parent]
                adjoint[parent] = contribution if prev is None else prev + contribution
        return adjoint

    def param_grads(self, root: "Var") -> Dict[str, np.ndarray]:
        """Gradient of ``root`` with respect to each watched block."""
        adjoint = self.adjoints(root)
        grads = {}
        for name, index in self.params.items():
            g = adjoint[index]
            grads[name] = np.zeros(self.nodes[index].shape) if g is None else np.asarray(g)
        return grads


# ---------------------------------------------------------------------------
# Var: array value, optionally attached to a tape
# ---------------------------------------------------------------------------

def lift(x) -> "Var":
    return x if isinstance(x, Var) else Var(x)


def _make(tag: str, value: np.ndarray, operands: Sequence[Tuple["Var", Callable]]) -> "Var":
    _check_finite(tag, value)
    tracked = [(var, vjp) for var, vjp in operands if var.tape is not None]
    if not tracked:
        return Var(value)
    tape = tracked[0][0].tape
    return tape.record(tag, [var for var, _ in tracked], [vjp for _, vjp in tracked], value)


class Var:
    """A float64 array that records its history when attached to a tape."""

    __slots__ = ("value", "tape", "index")
    # let numpy defer mixed ndarray/Var arithmetic to the reflected Var methods
    __array_ufunc__ = None

    def __init__(self, value: ArrayLike, tape: Optional[Tape] = None, index: Optional[int] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.index = index

    def __repr__(self) -> str:
        kind = "const" if self.tape is None else f"node {self.index}"
        return f"Var({self.value!r}, {kind})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    # binary arithmetic

    def __add__(self, other) -> "Var":
        if isinstance(other, Jet2):
            return NotImplemented
        a, b = self, lift(other)
        return _make("add", a.value + b.value, (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ))

    __radd__ = __add__

    def __sub__(self, other) -> "Var":
        if isinstance(other, Jet2):
            return NotImplemented
        a, b = self, lift(other)
        return _make("sub", a.value - b.value, (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        ))

    def __rsub__(self, other) -> "Var":
        if isinstance(other, Jet2):
            return NotImplemented
        return lift(other) - self

    def __mul__(self, other) -> "Var":
        if isinstance(other, Jet2):
            return NotImplemented
        a, b = self, lift(other)
        return _make("mul", a.value * b.value, (
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Var":
        if isinstance(other, Jet2):
            return NotImplemented
        a, b = self, lift(other)
        with np.errstate(divide="ignore", invalid="ignore"):
            value = a.value / b.value
        return _make("div", value, (
            (a, lambda g: _unbroadcast(g / b.value, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.shape)),
        ))

    def __rtruediv__(self, other) -> "Var":
        if isinstance(other, Jet2):
            return NotImplemented
        return lift(other) / self

    def __neg__(self) -> "Var":
        a = self
        return _make("neg", -a.value, ((a, lambda g: -g),))

    def __pow__(self, power: float) -> "Var":
        if isinstance(power, (Var, Jet2)):
            return NotImplemented
        a, p = self, float(power)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            value = np.power(a.value, p)
        return _make("pow", value, ((a, lambda g: g * p * np.power(a.value, p - 1.0)),))

    def __matmul__(self, other) -> "Var":
        if isinstance(other, Jet2):
            return NotImplemented
        a, b = self, lift(other)
        if a.ndim != 2 or b.ndim != 2:
            raise ContractViolationError("matmul operands must be 2-D")
        return _make("matmul", a.value @ b.value, (
            (a, lambda g: g @ b.value.T),
            (b, lambda g: a.value.T @ g),
        ))

    def __rmatmul__(self, other) -> "Var":
        if isinstance(other, Jet2):
            return NotImplemented
        return lift(other) @ self

    def __getitem__(self, index) -> "Var":
        a = self

        def vjp(g):
            out = np.zeros(a.shape)
            if _is_basic_index(index):
                out[index] += g
            else:
                np.add.at(out, index, g)
            return out

        return _make("index", a.value[index], ((a, vjp),))

    # unary functions

    def exp(self) -> "Var":
        a = self
        with np.errstate(over="ignore"):
            out = np.exp(a.value)
        return _make("exp", out, ((a, lambda g: g * out),))

    def log(self) -> "Var":
        a = self
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a.value)
        return _make("log", out, ((a, lambda g: g / a.value),))

    def tanh(self) -> "Var":
        a = self
        out = np.tanh(a.value)
        return _make("tanh", out, ((a, lambda g: g * (1.0 - out * out)),))

    def sin(self) -> "Var":
        a = self
        return _make("sin", np.sin(a.value), ((a, lambda g: g * np.cos(a.value)),))

    def cos(self) -> "Var":
        a = self
        return _make("cos", np.cos(a.value), ((a, lambda g: -g * np.sin(a.value)),))

    def sqrt(self) -> "Var":
        a = self
        with np.errstate(invalid="ignore"):
            out = np.sqrt(a.value)
        return _make("sqrt", out, ((a, lambda g: 0.5 * g / out),))

    # reductions and shape

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Var":
        a = self

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, a.shape)

        return _make("sum", np.sum(a.value, axis=axis, keepdims=keepdims), ((a, vjp),))

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Var":
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Var":
        a = self
        return _make("reshape", a.value.reshape(*shape), ((a, lambda g: g.reshape(a.shape)),))

    @property
    def T(self) -> "Var":
        a = self
        return _make("transpose", a.value.T, ((a, lambda g: g.T),))


# ---------------------------------------------------------------------------
# Jet2: value + first + selected second input derivatives
# ---------------------------------------------------------------------------

Slot = Optional[Var]


@dataclass(frozen=True)
class JetContext:
    """Which input coordinates are tracked and which second derivatives are kept."""
    directions: Tuple[int, ...]
    second: Tuple[int, ...]
    pairs: Tuple[Tuple[int, int], ...]

    @property
    def n_dirs(self) -> int:
        return len(self.directions)

    def slot(self, coord: int) -> int:
        try:
            return self.directions.index(coord)
        except ValueError:
            raise ContractViolationError(f"input coordinate {coord} is not a tracked direction") from None

    def pair_slot(self, a: int, b: int) -> int:
        key = (self.slot(a), self.slot(b))
        for i, pair in enumerate(self.pairs):
            if pair == key or pair == key[::-1]:
                return i
        raise ContractViolationError(f"mixed derivative ({a}, {b}) was not requested")


def make_context(directions: Sequence[int], pairs: Iterable[Tuple[int, int]] = (),
                 second: Optional[Iterable[int]] = None) -> JetContext:
    """Build a context from input coordinates; ``second`` defaults to all directions."""
    directions = tuple(int(d) for d in directions)
    if len(set(directions)) != len(directions):
        raise ConfigurationError(f"duplicate jet directions: {list(directions)}")
    second = directions if second is None else tuple(int(s) for s in second)
    for coord in second:
        if coord not in directions:
            raise ConfigurationError(f"second-derivative direction {coord} is not tracked")
    slot_pairs = []
    for a, b in pairs:
        if a not in directions or b not in directions:
            raise ConfigurationError(f"pair ({a}, {b}) must be drawn from the tracked directions")
        slot_pairs.append((directions.index(a), directions.index(b)))
    return JetContext(directions, tuple(sorted(directions.index(s) for s in second)), tuple(slot_pairs))


def _sum(*terms: Slot) -> Slot:
    result = None
    for term in terms:
        if term is not None:
            result = term if result is None else result + term
    return result


def _prod(*factors) -> Slot:
    result = None
    for factor in factors:
        if factor is None:
            return None
        result = factor if result is None else result * factor
    return result


class Jet2:
    """Batched second-order jet.

    ``grad[s]`` is the derivative along tracked direction ``s``; ``hess[s]``
    the second derivative along it (only for slots in ``ctx.second``);
    ``cross[p]`` the mixed derivative of ``ctx.pairs[p]``. ``None`` marks a
    structurally zero slot.
    """

    __slots__ = ("ctx", "value", "grad", "hess", "cross")
    __array_ufunc__ = None

    def __init__(self, ctx: JetContext, value, grad: Sequence[Slot] = None,
                 hess: Sequence[Slot] = None, cross: Sequence[Slot] = None):
        self.ctx = ctx
        self.value = lift(value)
        self.grad = tuple(grad) if grad is not None else (None,) * ctx.n_dirs
        self.hess = tuple(hess) if hess is not None else (None,) * ctx.n_dirs
        self.cross = tuple(cross) if cross is not None else (None,) * len(ctx.pairs)

    @classmethod
    def constant(cls, ctx: JetContext, value) -> "Jet2":
        return cls(ctx, value)

    def __repr__(self) -> str:
        return f"Jet2(value={self.value.value!r}, dirs={self.ctx.directions})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def is_constant(self) -> bool:
        return all(s is None for s in self.grad + self.hess + self.cross)

    # materialized accessors

    def _zeros(self) -> Var:
        return Var(np.zeros(self.shape))

    def grad_slot(self, s: int) -> Var:
        return self.grad[s] if self.grad[s] is not None else self._zeros()

    def hess_slot(self, s: int) -> Var:
        return self.hess[s] if self.hess[s] is not None else self._zeros()

    def dx(self, coord: int) -> Var:
        """First derivative along input coordinate ``coord``."""
        return self.grad_slot(self.ctx.slot(coord))

    def dxx(self, coord: int) -> Var:
        """Second derivative along input coordinate ``coord``."""
        slot = self.ctx.slot(coord)
        if slot not in self.ctx.second:
            raise ContractViolationError(f"second derivative along {coord} was not requested")
        return self.hess_slot(slot)

    def dxy(self, a: int, b: int) -> Var:
        p = self.ctx.pair_slot(a, b)
        return self.cross[p] if self.cross[p] is not None else self._zeros()

    def grad_values(self) -> np.ndarray:
        """Stacked first derivatives, shape ``(D,) + value.shape``."""
        return np.stack([self.grad_slot(s).value for s in range(self.ctx.n_dirs)])

    def hess_values(self) -> np.ndarray:
        return np.stack([self.hess_slot(s).value for s in range(self.ctx.n_dirs)])

    # arithmetic

    def _coerce(self, other) -> "Jet2":
        if isinstance(other, Jet2):
            if other.ctx != self.ctx:
                raise ContractViolationError("jets from different contexts cannot be combined")
            return other
        return Jet2.constant(self.ctx, other)

    def __add__(self, other) -> "Jet2":
        return jet_add(self, self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other) -> "Jet2":
        return jet_sub(self, self._coerce(other))

    def __rsub__(self, other) -> "Jet2":
        return jet_sub(self._coerce(other), self)

    def __mul__(self, other) -> "Jet2":
        return jet_mul(self, self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Jet2":
        return jet_div(self, self._coerce(other))

    def __rtruediv__(self, other) -> "Jet2":
        return jet_div(self._coerce(other), self)

    def __neg__(self) -> "Jet2":
        return jet_neg(self)

    def __pow__(self, power) -> "Jet2":
        return jet_pow(self, power)

    def __matmul__(self, other) -> "Jet2":
        """Right-multiply every component by a parameter matrix (linear map)."""
        return self.map_linear(lambda c: c @ other)

    def __getitem__(self, index) -> "Jet2":
        return self.map_linear(lambda c: c[index])

    def sum(self, axis: Optional[int] = None) -> "Jet2":
        return self.map_linear(lambda c: c.sum(axis=axis))

    def reshape(self, *shape) -> "Jet2":
        return self.map_linear(lambda c: c.reshape(*shape))

    def map_linear(self, fn: Callable[[Var], Var], value_fn: Optional[Callable[[Var], Var]] = None) -> "Jet2":
        """Apply a map that is linear in the jet (sums, slices, parameter matmuls).

        ``value_fn`` handles the value when the map is affine rather than linear.
        """
        value_fn = value_fn or fn
        apply = lambda c: None if c is None else fn(c)
        return Jet2(self.ctx, value_fn(self.value),
                    [apply(c) for c in self.grad],
                    [apply(c) for c in self.hess],
                    [apply(c) for c in self.cross])

    def exp(self) -> "Jet2":
        return jet_exp(self)

    def tanh(self) -> "Jet2":
        return jet_tanh(self)

    def sin(self) -> "Jet2":
        return jet_sin(self)

    def cos(self) -> "Jet2":
        return jet_cos(self)

    def sqrt(self) -> "Jet2":
        return jet_sqrt(self)

    def log(self) -> "Jet2":
        return jet_log(self)


def seed_inputs(x: ArrayLike, directions: Sequence[int], pairs: Iterable[Tuple[int, int]] = (),
                second: Optional[Iterable[int]] = None) -> List[Jet2]:
    """One jet per input coordinate; coordinate ``directions[s]`` gets ``grad[s] = 1``.

    ``x`` is a single point ``(d,)`` or a batch ``(B, d)``.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    for coord in directions:
        if not 0 <= coord < d:
            raise ConfigurationError(f"direction {coord} out of range for {d}-dimensional input")
    ctx = make_context(directions, pairs, second)
    jets = []
    for j in range(d):
        value = np.ascontiguousarray(x[..., j])
        grad = [None] * ctx.n_dirs
        if j in ctx.directions:
            grad[ctx.directions.index(j)] = Var(np.ones_like(value))
        jets.append(Jet2(ctx, value, grad))
    return jets


# jet primitives -----------------------------------------------------------

def jet_add(a: Jet2, b: Jet2) -> Jet2:
    return Jet2(a.ctx, a.value + b.value,
                [_sum(x, y) for x, y in zip(a.grad, b.grad)],
                [_sum(x, y) for x, y in zip(a.hess, b.hess)],
                [_sum(x, y) for x, y in zip(a.cross, b.cross)])


def jet_neg(a: Jet2) -> Jet2:
    return a.map_linear(lambda c: -c)


def jet_sub(a: Jet2, b: Jet2) -> Jet2:
    return jet_add(a, jet_neg(b))


def jet_mul(a: Jet2, b: Jet2) -> Jet2:
    if b.is_constant:
        return a.map_linear(lambda c: c * b.value)
    if a.is_constant:
        return b.map_linear(lambda c: c * a.value)
    ctx = a.ctx
    u, v = a.value, b.value
    grad = [_sum(_prod(a.grad[s], v), _prod(u, b.grad[s])) for s in range(ctx.n_dirs)]
    hess = [None] * ctx.n_dirs
    for s in ctx.second:
        hess[s] = _sum(_prod(a.hess[s], v), _prod(a.grad[s], b.grad[s], 2.0), _prod(u, b.hess[s]))
    cross = []
    for p, (s, t) in enumerate(ctx.pairs):
        cross.append(_sum(_prod(a.cross[p], v), _prod(a.grad[s], b.grad[t]),
                          _prod(a.grad[t], b.grad[s]), _prod(u, b.cross[p])))
    return Jet2(ctx, u * v, grad, hess, cross)


def _chain(a: Jet2, f0: Var, f1: Var, f2: Callable[[], Var]) -> Jet2:
    """Second-order chain rule for a scalar function with derivatives f1, f2."""
    ctx = a.ctx
    grad = [_prod(f1, g) for g in a.grad]
    needs_f2 = any(a.grad[s] is not None for s in ctx.second) or any(
        a.grad[s] is not None and a.grad[t] is not None for s, t in ctx.pairs)
    second = f2() if needs_f2 else None
    hess = [None] * ctx.n_dirs
    for s in ctx.second:
        hess[s] = _sum(_prod(second, a.grad[s], a.grad[s]), _prod(f1, a.hess[s]))
    cross = [_sum(_prod(second, a.grad[s], a.grad[t]), _prod(f1, a.cross[p]))
             for p, (s, t) in enumerate(ctx.pairs)]
    return Jet2(ctx, f0, grad, hess, cross)


def jet_exp(a: Jet2) -> Jet2:
    e = a.value.exp()
    return _chain(a, e, e, lambda: e)


def jet_log(a: Jet2) -> Jet2:
    inv = 1.0 / a.value
    return _chain(a, a.value.log(), inv, lambda: -(inv * inv))


def jet_tanh(a: Jet2) -> Jet2:
    t = a.value.tanh()
    d1 = 1.0 - t * t
    return _chain(a, t, d1, lambda: -2.0 * t * d1)


def jet_sin(a: Jet2) -> Jet2:
    s, c = a.value.sin(), a.value.cos()
    return _chain(a, s, c, lambda: -s)


def jet_cos(a: Jet2) -> Jet2:
    s, c = a.value.sin(), a.value.cos()
    return _chain(a, c, -s, lambda: -c)


def jet_sqrt(a: Jet2) -> Jet2:
    r = a.value.sqrt()
    d1 = 0.5 / r
    return _chain(a, r, d1, lambda: -0.5 * d1 / a.value)


def jet_reciprocal(a: Jet2) -> Jet2:
    r = 1.0 / a.value
    r2 = r * r
    return _chain(a, r, -r2, lambda: 2.0 * r2 * r)


def jet_div(a: Jet2, b: Jet2) -> Jet2:
    if b.is_constant:
        return a.map_linear(lambda c: c / b.value)
    return jet_mul(a, jet_reciprocal(b))


def jet_pow(a: Jet2, power) -> Jet2:
    if isinstance(power, Jet2):
        return jet_exp(jet_mul(power, jet_log(a)))
    p = float(power)
    if p == 2.0:
        return jet_mul(a, a)
    return _chain(a, a.value ** p, p * a.value ** (p - 1.0),
                  lambda: p * (p - 1.0) * a.value ** (p - 2.0))


# type-dispatching elementary functions used by problem definitions

def _dispatch(name: str, np_fn: Callable):
    def fn(x):
        if isinstance(x, (Jet2, Var)):
            return getattr(x, name)()
        return np_fn(x)
    fn.__name__ = name
    return fn


exp = _dispatch("exp", np.exp)
log = _dispatch("log", np.log)
tanh = _dispatch("tanh", np.tanh)
sin = _dispatch("sin", np.sin)
cos = _dispatch("cos", np.cos)
sqrt = _dispatch("sqrt", np.sqrt)


def value_of(x) -> np.ndarray:
    """Plain array behind a Jet2, Var or array-like."""
    if isinstance(x, Jet2):
        return x.value.value
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# Parameter vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Block:
    name: str
    start: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self) -> int:
        return self.start + self.size


class Layout:
    """Named contiguous blocks covering a flat parameter array exactly."""

    def __init__(self, blocks: Sequence[Block]):
        self.blocks = tuple(blocks)
        position = 0
        names = set()
        for block in self.blocks:
            if block.start != position or block.name in names:
                raise ContractViolationError(f"layout block '{block.name}' overlaps or leaves a gap")
            names.add(block.name)
            position = block.stop
        self.size = position
        self._by_name = {block.name: block for block in self.blocks}

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __getitem__(self, name: str) -> Block:
        return self._by_name[name]

    def __eq__(self, other) -> bool:
        return isinstance(other, Layout) and self.blocks == other.blocks

    @property
    def names(self) -> List[str]:
        return [block.name for block in self.blocks]

    def to_descriptor(self) -> List[dict]:
        return [{"name": b.name, "start": b.start, "shape": list(b.shape)} for b in self.blocks]

    @classmethod
    def from_descriptor(cls, descriptor: Sequence[Mapping]) -> "Layout":
        return cls([Block(item["name"], int(item["start"]), tuple(int(n) for n in item["shape"]))
                    for item in descriptor])

    @classmethod
    def from_shapes(cls, shapes: Mapping[str, Tuple[int, ...]]) -> "Layout":
        blocks, start = [], 0
        for name, shape in shapes.items():
            block = Block(name, start, tuple(shape))
            blocks.append(block)
            start = block.stop
        return cls(blocks)


class ParamVector:
    """Flat float64 parameter array with a block layout."""

    def __init__(self, data: np.ndarray, layout: Layout):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 1 or data.size != layout.size:
            raise ContractViolationError(f"parameter array of size {data.size} does not match layout size {layout.size}")
        self.data = data
        self.layout = layout

    @classmethod
    def from_blocks(cls, blocks: Mapping[str, np.ndarray]) -> "ParamVector":
        layout = Layout.from_shapes({name: np.shape(array) for name, array in blocks.items()})
        data = np.concatenate([np.ravel(np.asarray(a, dtype=np.float64)) for a in blocks.values()]) \
            if blocks else np.zeros(0)
        return cls(data, layout)

    def __len__(self) -> int:
        return self.data.size

    def view(self, name: str) -> np.ndarray:
        block = self.layout[name]
        return self.data[block.start:block.stop].reshape(block.shape)

    def bind(self, tape: Optional[Tape] = None) -> Dict[str, Var]:
        """Blocks as Vars: tape leaves when ``tape`` is given, constants otherwise."""
        if tape is not None:
            return tape.watch_vector(self)
        return {block.name: Var(self.view(block.name)) for block in self.layout.blocks}

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout)

    def mask(self, names: Iterable[str]) -> np.ndarray:
        """Boolean array selecting the slots of the named blocks."""
        out = np.zeros(self.data.size, dtype=bool)
        for name in names:
            if name in self.layout:
                block = self.layout[name]
                out[block.start:block.stop] = True
        return out


def backward(tape: Tape, root: Var) -> np.ndarray:
    """Flat gradient of the scalar ``root`` over the watched ParamVector."""
    if root.size != 1:
        raise ContractViolationError(f"backward needs a scalar root, got shape {root.shape}")
    if tape.layout is None:
        raise ContractViolationError("tape has no watched ParamVector")
    grads = tape.param_grads(root)
    flat = np.zeros(tape.layout.size)
    for block in tape.layout.blocks:
        flat[block.start:block.stop] = np.ravel(grads[block.name])
    return flat


LossFn = Callable[[Mapping[str, Var]], Var]


def value_and_grad(loss_fn: LossFn, params: ParamVector) -> Tuple[float, np.ndarray]:
    tape = Tape()
    root = loss_fn(params.bind(tape))
    return float(root.value), backward(tape, lift(root))


def fd_check(loss_fn: LossFn, params: ParamVector, step: float = 1e-5) -> float:
    """Max over slots of |g_ad - g_fd| / max(1, |g_fd|), central differences."""
    if step <= 0:
        raise ConfigurationError("finite-difference step must be positive")
    _, g_ad = value_and_grad(loss_fn, params)
    work = params.copy()
    worst = 0.0
    for i in range(work.data.size):
        p = work.data[i]
        h = step * max(1.0, abs(p))
        work.data[i] = p + h
        f_plus = float(lift(loss_fn(work.bind())).value)
        work.data[i] = p - h
        f_minus = float(lift(loss_fn(work.bind())).value)
        work.data[i] = p
        g_fd = (f_plus - f_minus) / (2.0 * h)
        worst = max(worst, abs(g_ad[i] - g_fd) / max(1.0, abs(g_fd)))
    return worst
