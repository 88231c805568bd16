"""Tape-based reverse-mode automatic differentiation on dense float64 matrices.

Every value is a 2-D numpy array: scalars are 1x1, column vectors are n x 1.
The public operations are written once and dispatch on their argument types:
plain arrays go straight through numpy, while ``NodeRef`` handles are recorded
on a ``Tape``. Gradients of gradients work by recording the backward pass
itself (``create_graph=True``), so a second ``gradient`` call differentiates
through the first.

The operation set is deliberately small: dense adds, elementwise products,
matrix products, tanh, powers, reductions and row/column slicing. That is
enough for tanh-affine equilibrium functions, feedforward tanh networks and
iterative linear solvers unrolled on the tape.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "NodeRef",
    "GradientMap",
    "as_value",
    "value_of",
    "add",
    "sub",
    "scale",
    "mul",
    "smul",
    "matmul",
    "transpose",
    "tanh",
    "absolute",
    "power",
    "sum_all",
    "mean_all",
    "sq_norm",
    "l1_norm",
    "l2_norm",
    "fro_norm",
    "rows",
    "cols",
    "pad_rows",
    "pad_cols",
    "stack_rows",
    "record",
    "gradient",
    "second_gradient",
    "finite_difference_gradient",
]


def as_value(x) -> np.ndarray:
    """Coerce a scalar / 1-D / 2-D array-like into the canonical 2-D float64 form."""
    if isinstance(x, NodeRef):
        raise TypeError("expected a numeric value, got a NodeRef")
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ValueError(f"only scalars, vectors and matrices are supported, got ndim={arr.ndim}")
    return arr


def value_of(x) -> np.ndarray:
    """Numeric value of either a NodeRef or a raw array."""
    return x.value if isinstance(x, NodeRef) else as_value(x)


class Node:
    __slots__ = ("kind", "operands", "value", "alpha", "meta", "vjp")

    def __init__(self, kind, operands, value, alpha=None, meta=None, vjp=None):
        self.kind = kind
        self.operands = operands
        self.value = value
        self.alpha = alpha
        self.meta = meta
        self.vjp = vjp


class NodeRef:
    """Handle to a node of a Tape. Cheap, hashable, supports +,-,*,@ sugar."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, int]:
        return self.tape.nodes[self.index].value.shape

    def __eq__(self, other):
        return (
            isinstance(other, NodeRef)
            and other.tape is self.tape
            and other.index == self.index
        )

    def __hash__(self):
        return hash((id(self.tape), self.index))

    def __repr__(self):
        return f"NodeRef(#{self.index}, {self.tape.nodes[self.index].kind}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(-1.0, self)

    def __mul__(self, other):
        if isinstance(other, NodeRef):
            return mul(self, other)
        return scale(float(other), self)

    def __rmul__(self, other):
        return scale(float(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


#: Mapping from differentiation input to its gradient (same shape as the input).
#: Inputs that the output does not depend on map to structural zeros.
GradientMap = dict


class Tape:
    """Append-only record of operations, in topological order.

    ``guard=True`` raises ``FloatingPointError`` as soon as any recorded value
    contains a NaN/Inf, so blow-ups surface at the op that produced them.
    """

    def __init__(self, guard: bool = True):
        self.nodes: list[Node] = []
        self.guard = guard

    def __len__(self) -> int:
        return len(self.nodes)

    def input(self, value) -> NodeRef:
        """Record a differentiable leaf."""
        return self._emit("leaf", (), as_value(value))

    def const(self, value) -> NodeRef:
        """Record a leaf used as a constant (same node kind; intent marker)."""
        return self._emit("leaf", (), as_value(value))

    def _emit(self, kind, operands, value, alpha=None, meta=None, vjp=None) -> NodeRef:
        if self.guard and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value produced by op '{kind}'")
        self.nodes.append(Node(kind, operands, value, alpha, meta, vjp))
        return NodeRef(self, len(self.nodes) - 1)

    def custom(self, value, operands: tuple[NodeRef, ...], vjp) -> NodeRef:
        """Record a node with a caller-supplied VJP rule.

        ``vjp(ctx, grad)`` must return an iterable of ``(operand_index,
        contribution)`` pairs; contributions are built with the module's
        dispatch ops so the rule works in both raw and recording mode.
        """
        for op in operands:
            if op.tape is not self:
                raise ValueError("custom-node operands must live on the same tape")
        return self._emit("custom", tuple(op.index for op in operands), as_value(value), vjp=vjp)


def _tape_from(args):
    for a in args:
        if isinstance(a, NodeRef):
            return a.tape
    return None


def _lift(tape: Tape, x) -> NodeRef:
    return x if isinstance(x, NodeRef) else tape.const(x)


# ---------------------------------------------------------------------------
# primitive operations (dispatch: record on a tape iff any argument is a NodeRef)
# ---------------------------------------------------------------------------

def add(x, y):
    tape = _tape_from((x, y))
    if tape is None:
        return x + y
    x, y = _lift(tape, x), _lift(tape, y)
    if x.shape != y.shape:
        raise ValueError(f"add: shape mismatch {x.shape} vs {y.shape}")
    return tape._emit("add", (x.index, y.index), x.value + y.value)


def sub(x, y):
    tape = _tape_from((x, y))
    if tape is None:
        return x - y
    x, y = _lift(tape, x), _lift(tape, y)
    if x.shape != y.shape:
        raise ValueError(f"sub: shape mismatch {x.shape} vs {y.shape}")
    return tape._emit("sub", (x.index, y.index), x.value - y.value)


def scale(alpha: float, x):
    """Multiply by a plain (non-differentiated) float."""
    if not isinstance(x, NodeRef):
        return alpha * x
    return x.tape._emit("scale", (x.index,), alpha * x.value, alpha=float(alpha))


def mul(x, y):
    """Elementwise product of same-shape values."""
    tape = _tape_from((x, y))
    if tape is None:
        return x * y
    x, y = _lift(tape, x), _lift(tape, y)
    if x.shape != y.shape:
        raise ValueError(f"mul: shape mismatch {x.shape} vs {y.shape}")
    return tape._emit("mul", (x.index, y.index), x.value * y.value)


def smul(s, x):
    """Product of a 1x1 value with a matrix (broadcast scalar multiply)."""
    tape = _tape_from((s, x))
    if tape is None:
        return float(np.asarray(s).reshape(())) * x
    s, x = _lift(tape, s), _lift(tape, x)
    if s.shape != (1, 1):
        raise ValueError(f"smul: scalar operand must be 1x1, got {s.shape}")
    return tape._emit("smul", (s.index, x.index), s.value[0, 0] * x.value)


def matmul(x, y):
    tape = _tape_from((x, y))
    if tape is None:
        return x @ y
    x, y = _lift(tape, x), _lift(tape, y)
    if x.shape[1] != y.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {x.shape} @ {y.shape}")
    return tape._emit("matmul", (x.index, y.index), x.value @ y.value)


def transpose(x):
    if not isinstance(x, NodeRef):
        return x.T
    return x.tape._emit("transpose", (x.index,), x.value.T.copy())


def tanh(x):
    if not isinstance(x, NodeRef):
        return np.tanh(x)
    return x.tape._emit("tanh", (x.index,), np.tanh(x.value))


def absolute(x):
    if not isinstance(x, NodeRef):
        return np.abs(x)
    return x.tape._emit("abs", (x.index,), np.abs(x.value))


def power(x, p: float):
    """Elementwise power with a constant exponent."""
    if not isinstance(x, NodeRef):
        return x ** p
    return x.tape._emit("power", (x.index,), x.value ** p, alpha=float(p))


def sum_all(x):
    if not isinstance(x, NodeRef):
        return np.sum(x).reshape(1, 1)
    return x.tape._emit("sum", (x.index,), np.sum(x.value).reshape(1, 1))


def rows(x, lo: int, hi: int):
    """Row slice [lo, hi) of a matrix."""
    if not isinstance(x, NodeRef):
        return x[lo:hi, :]
    n = x.shape[0]
    if not (0 <= lo < hi <= n):
        raise ValueError(f"rows: bad slice [{lo},{hi}) for {x.shape}")
    return x.tape._emit("rows", (x.index,), x.value[lo:hi, :].copy(), meta=(lo, hi))


def cols(x, lo: int, hi: int):
    """Column slice [lo, hi) of a matrix."""
    if not isinstance(x, NodeRef):
        return x[:, lo:hi]
    n = x.shape[1]
    if not (0 <= lo < hi <= n):
        raise ValueError(f"cols: bad slice [{lo},{hi}) for {x.shape}")
    return x.tape._emit("cols", (x.index,), x.value[:, lo:hi].copy(), meta=(lo, hi))


def pad_rows(x, lo: int, total: int):
    """Embed x into a taller zero matrix, occupying rows [lo, lo+rows(x))."""
    if not isinstance(x, NodeRef):
        out = np.zeros((total, x.shape[1]))
        out[lo:lo + x.shape[0], :] = x
        return out
    r, c = x.shape
    if lo < 0 or lo + r > total:
        raise ValueError(f"pad_rows: block [{lo},{lo+r}) does not fit in {total} rows")
    out = np.zeros((total, c))
    out[lo:lo + r, :] = x.value
    return x.tape._emit("pad_rows", (x.index,), out, meta=(lo, total))


def pad_cols(x, lo: int, total: int):
    """Embed x into a wider zero matrix, occupying cols [lo, lo+cols(x))."""
    if not isinstance(x, NodeRef):
        out = np.zeros((x.shape[0], total))
        out[:, lo:lo + x.shape[1]] = x
        return out
    r, c = x.shape
    if lo < 0 or lo + c > total:
        raise ValueError(f"pad_cols: block [{lo},{lo+c}) does not fit in {total} cols")
    out = np.zeros((r, total))
    out[:, lo:lo + c] = x.value
    return x.tape._emit("pad_cols", (x.index,), out, meta=(lo, total))


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def mean_all(x):
    shape = x.shape
    return scale(1.0 / (shape[0] * shape[1]), sum_all(x))


def sq_norm(x):
    """Squared L2 norm of all entries (squared Frobenius norm for matrices)."""
    return sum_all(mul(x, x))


def l1_norm(x):
    return sum_all(absolute(x))


def l2_norm(x):
    return power(sq_norm(x), 0.5)


fro_norm = l2_norm


def stack_rows(x, y):
    """Vertical concatenation of two equal-width blocks."""
    rx = x.shape[0]
    total = rx + y.shape[0]
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"stack_rows: widths differ, {x.shape} vs {y.shape}")
    return add(pad_rows(x, 0, total), pad_rows(y, rx, total))


_RECORD_KINDS = {
    "add": lambda ops, alpha: add(*ops),
    "subtract": lambda ops, alpha: sub(*ops),
    "scalar-multiply": lambda ops, alpha: scale(alpha, *ops),
    "elementwise-multiply": lambda ops, alpha: mul(*ops),
    "matmul": lambda ops, alpha: matmul(*ops),
    "tanh": lambda ops, alpha: tanh(*ops),
    "squared-l2-norm": lambda ops, alpha: sq_norm(*ops),
    "l1-norm": lambda ops, alpha: l1_norm(*ops),
    "frobenius-norm": lambda ops, alpha: fro_norm(*ops),
    "sum": lambda ops, alpha: sum_all(*ops),
    "mean": lambda ops, alpha: mean_all(*ops),
    "concat-rows": lambda ops, alpha: stack_rows(*ops),
}


def record(tape: Tape, kind: str, operands, alpha: float | None = None) -> NodeRef:
    """Record an operation by name. Operands may be NodeRefs or raw values."""
    if kind not in _RECORD_KINDS:
        raise ValueError(f"unsupported op kind '{kind}' (known: {sorted(_RECORD_KINDS)})")
    ops = [_lift(tape, op) for op in operands]
    return _RECORD_KINDS[kind](ops, alpha)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

class _GraphCtx:
    """Backward context that records adjoint computations on the tape."""

    def __init__(self, tape: Tape):
        self.tape = tape

    def op(self, index: int) -> NodeRef:
        return NodeRef(self.tape, index)

    def out(self, index: int) -> NodeRef:
        return NodeRef(self.tape, index)

    def const(self, arr):
        return self.tape.const(arr)


class _RawCtx:
    """Backward context that computes adjoints as plain arrays."""

    def __init__(self, tape: Tape):
        self.tape = tape

    def op(self, index: int) -> np.ndarray:
        return self.tape.nodes[index].value

    def out(self, index: int) -> np.ndarray:
        return self.tape.nodes[index].value

    def const(self, arr):
        return arr


def _vjp_add(ctx, idx, node, g):
    return ((node.operands[0], g), (node.operands[1], g))


def _vjp_sub(ctx, idx, node, g):
    return ((node.operands[0], g), (node.operands[1], scale(-1.0, g)))


def _vjp_scale(ctx, idx, node, g):
    return ((node.operands[0], scale(node.alpha, g)),)


def _vjp_mul(ctx, idx, node, g):
    a, b = node.operands
    return ((a, mul(g, ctx.op(b))), (b, mul(g, ctx.op(a))))


def _vjp_smul(ctx, idx, node, g):
    s, x = node.operands
    return ((s, sum_all(mul(g, ctx.op(x)))), (x, smul(ctx.op(s), g)))


def _vjp_matmul(ctx, idx, node, g):
    a, b = node.operands
    return (
        (a, matmul(g, transpose(ctx.op(b)))),
        (b, matmul(transpose(ctx.op(a)), g)),
    )


def _vjp_transpose(ctx, idx, node, g):
    return ((node.operands[0], transpose(g)),)


def _vjp_tanh(ctx, idx, node, g):
    y = ctx.out(idx)
    ones = ctx.const(np.ones(node.value.shape))
    return ((node.operands[0], mul(g, sub(ones, mul(y, y)))),)


def _vjp_abs(ctx, idx, node, g):
    sgn = ctx.const(np.sign(ctx.tape.nodes[node.operands[0]].value))
    return ((node.operands[0], mul(g, sgn)),)


def _vjp_power(ctx, idx, node, g):
    x = ctx.op(node.operands[0])
    p = node.alpha
    return ((node.operands[0], mul(g, scale(p, power(x, p - 1.0)))),)


def _vjp_sum(ctx, idx, node, g):
    src = ctx.tape.nodes[node.operands[0]]
    ones = ctx.const(np.ones(src.value.shape))
    return ((node.operands[0], smul(g, ones)),)


def _vjp_rows(ctx, idx, node, g):
    lo, hi = node.meta
    total = ctx.tape.nodes[node.operands[0]].value.shape[0]
    return ((node.operands[0], pad_rows(g, lo, total)),)


def _vjp_pad_rows(ctx, idx, node, g):
    lo, total = node.meta
    r = ctx.tape.nodes[node.operands[0]].value.shape[0]
    return ((node.operands[0], rows(g, lo, lo + r)),)


def _vjp_cols(ctx, idx, node, g):
    lo, hi = node.meta
    total = ctx.tape.nodes[node.operands[0]].value.shape[1]
    return ((node.operands[0], pad_cols(g, lo, total)),)


def _vjp_pad_cols(ctx, idx, node, g):
    lo, total = node.meta
    c = ctx.tape.nodes[node.operands[0]].value.shape[1]
    return ((node.operands[0], cols(g, lo, lo + c)),)


_VJP_RULES = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "scale": _vjp_scale,
    "mul": _vjp_mul,
    "smul": _vjp_smul,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "tanh": _vjp_tanh,
    "abs": _vjp_abs,
    "power": _vjp_power,
    "sum": _vjp_sum,
    "rows": _vjp_rows,
    "pad_rows": _vjp_pad_rows,
    "cols": _vjp_cols,
    "pad_cols": _vjp_pad_cols,
}


def gradient(tape: Tape, output: NodeRef, inputs, create_graph: bool = False) -> GradientMap:
    """Reverse-mode gradient of a scalar output with respect to each input.

    With ``create_graph=True`` the adjoint computation is recorded on the tape
    and the returned gradients are NodeRefs that can be differentiated again;
    otherwise the gradients are plain arrays. Inputs the output does not
    depend on receive structural zeros.
    """
    if output.tape is not tape:
        raise ValueError("output does not belong to this tape")
    if output.shape != (1, 1):
        raise ValueError(f"gradient output must be scalar (1x1), got {output.shape}")
    inputs = list(inputs)
    for inp in inputs:
        if inp.tape is not tape:
            raise ValueError("all inputs must live on the same tape as the output")

    ctx = _GraphCtx(tape) if create_graph else _RawCtx(tape)
    wanted = {inp.index for inp in inputs}
    results: dict[int, object] = {}
    adjoint: dict[int, object] = {output.index: ctx.const(np.ones((1, 1)))}

    for idx in range(output.index, -1, -1):
        g = adjoint.pop(idx, None)
        if g is None:
            continue
        if idx in wanted:
            results[idx] = g
        node = tape.nodes[idx]
        if node.kind == "leaf":
            continue
        if node.kind == "custom":
            contributions = node.vjp(ctx, g)
        else:
            contributions = _VJP_RULES[node.kind](ctx, idx, node, g)
        for operand_index, contrib in contributions:
            if operand_index in adjoint:
                adjoint[operand_index] = add(adjoint[operand_index], contrib)
            else:
                adjoint[operand_index] = contrib

    out: GradientMap = {}
    for inp in inputs:
        if inp.index in results:
            out[inp] = results[inp.index]
        else:
            out[inp] = ctx.const(np.zeros(inp.shape))
    return out


def second_gradient(tape: Tape, output: NodeRef, input_: NodeRef, wrt: NodeRef | None = None) -> np.ndarray:
    """Second derivative d2(output)/d(input)d(wrt) as a dense array.

    ``wrt`` defaults to ``input_`` (a Hessian block). Realized as a recorded
    gradient followed by gradients of its components, so it exercises the
    same machinery training relies on. Returns an array of shape
    (input_.size, wrt.size); for 1x1 inputs that is a 1x1 array.
    """
    if wrt is None:
        wrt = input_
    first = gradient(tape, output, [input_], create_graph=True)[input_]
    n = first.shape[0] * first.shape[1]
    m = wrt.shape[0] * wrt.shape[1]
    hess = np.zeros((n, m))
    flat_first = first if first.shape[1] == 1 else None
    for k in range(n):
        if flat_first is not None:
            comp = rows(flat_first, k, k + 1)
        else:
            r, c = divmod(k, first.shape[1])
            comp = cols(rows(first, r, r + 1), c, c + 1)
        gk = gradient(tape, comp, [wrt], create_graph=False)[wrt]
        hess[k, :] = np.asarray(gk).reshape(-1)
    return hess


def finite_difference_gradient(f, x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Independent of the tape; used as the oracle for gradient checks.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        fp = float(np.asarray(f(xp)).reshape(()))
        fm = float(np.asarray(f(xm)).reshape(()))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("non-finite function value in finite differences")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad
