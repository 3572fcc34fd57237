"""Virtual sensors: arithmetic expressions over other sensors.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := number | '<' topic '>' | '(' expr ')' | '-' factor

A virtual sensor is evaluated lazily on an explicit grid
``t_zero + k * interval``.  Operands are scaled, converted to a common
unit and linearly interpolated onto the grid; grid points outside an
operand's data are skipped, never extrapolated.  Computed points are
written back to the store under the virtual sensor's own SID, so a
repeated query reads them instead of recomputing.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import CycleDetected, ExprSyntaxError, OutOfRange, UnknownOperand, UnknownSensor
from .model import SensorMetadata, Topic, Unit, base_unit, convert, get_unit, parse_topic

# -- AST -----------------------------------------------------------------------------


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Operand:
    topic: Topic


@dataclass(frozen=True)
class Neg:
    operand: object


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|<(?P<topic>[^<>]*)>|(?P<op>[-+*/()]))"
)


def _tokenize(text):
    tokens = []
    pos = 0
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        m = _TOKEN.match(text, pos)
        if not m:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos)
        start = m.start(m.lastgroup)
        if m.group("num") is not None:
            tokens.append(("num", float(m.group("num")), start))
        elif m.group("topic") is not None:
            raw = m.group("topic").replace("\\/", "/")
            try:
                tokens.append(("topic", parse_topic(raw.strip()), start - 1))
            except Exception as exc:
                raise ExprSyntaxError(f"bad operand topic {raw!r} ({exc})", start - 1) from None
        else:
            tokens.append((m.group("op"), None, start))
        pos = m.end()
    tokens.append(("end", None, len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expr(self):
        node = self.term()
        while self.peek()[0] in ("+", "-"):
            op = self.take()[0]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek()[0] in ("*", "/"):
            op = self.take()[0]
            node = BinOp(op, node, self.factor())
        return node

    def factor(self):
        kind, value, pos = self.take()
        if kind == "num":
            return Const(value)
        if kind == "topic":
            return Operand(value)
        if kind == "-":
            return Neg(self.factor())
        if kind == "(":
            node = self.expr()
            if self.peek()[0] != ")":
                raise ExprSyntaxError("expected ')'", self.peek()[2])
            self.take()
            return node
        if kind == "end":
            raise ExprSyntaxError("unexpected end of expression", pos)
        raise ExprSyntaxError(f"unexpected {kind!r}", pos)


def parse_expr(text: str):
    p = _Parser(text)
    node = p.expr()
    kind, _, pos = p.peek()
    if kind != "end":
        raise ExprSyntaxError(f"unexpected {kind!r}", pos)
    return node


def operands(expr) -> list:
    """Operand topics in order of first appearance."""
    out = []

    def walk(n):
        if isinstance(n, Operand):
            if n.topic not in out:
                out.append(n.topic)
        elif isinstance(n, Neg):
            walk(n.operand)
        elif isinstance(n, BinOp):
            walk(n.left)
            walk(n.right)

    walk(expr)
    return out


def format_expr(expr) -> str:
    if isinstance(expr, Const):
        return repr(expr.value)
    if isinstance(expr, Operand):
        return f"<{expr.topic}>"
    if isinstance(expr, Neg):
        return f"-({format_expr(expr.operand)})"
    return f"({format_expr(expr.left)} {expr.op} {format_expr(expr.right)})"


def evaluate_constant(expr) -> float:
    """Fold an operand-free expression."""
    values, div0 = _fold(expr, {}, np.zeros(1))
    if div0[0]:
        raise ZeroDivisionError("division by zero in constant expression")
    return float(values[0])


# -- definitions -----------------------------------------------------------------------


@dataclass(frozen=True)
class VSensorDef:
    topic: Topic
    expr: object
    unit: Unit = field(default_factory=lambda: get_unit(""))
    interval_ns: int = 1_000_000_000
    t_zero_ns: int = 0
    scale: float = 1.0
    expr_text: str = ""

    def __post_init__(self):
        object.__setattr__(self, "topic", parse_topic(self.topic))
        object.__setattr__(self, "unit", get_unit(self.unit))
        if isinstance(self.expr, str):
            object.__setattr__(self, "expr_text", self.expr)
            object.__setattr__(self, "expr", parse_expr(self.expr))
        elif not self.expr_text:
            object.__setattr__(self, "expr_text", format_expr(self.expr))
        if self.interval_ns <= 0:
            raise ValueError("interval must be positive")
        if self.scale == 0:
            raise ValueError("scale must be nonzero")

    @property
    def operands(self):
        return operands(self.expr)


def find_cycle(start: Topic, deps) -> list:
    """Return a dependency cycle reachable from ``start`` or ``None``.

    ``deps(topic)`` lists the virtual operands of a virtual sensor.
    """
    path, on_path, done = [], set(), set()

    def visit(t):
        if t in on_path:
            return [str(x) for x in path[path.index(t):]] + [str(t)]
        if t in done:
            return None
        path.append(t)
        on_path.add(t)
        for d in deps(t):
            cycle = visit(d)
            if cycle:
                return cycle
        path.pop()
        on_path.discard(t)
        done.add(t)
        return None

    return visit(start)


def define(vdef: VSensorDef, metadata, known=lambda topic: False):
    """Validate and persist a virtual sensor definition.

    Operands must be known to the metadata store (physical or virtual) or
    to ``known`` (e.g. the store's topic dictionary).
    """

    def deps(t):
        d = vdef if t == vdef.topic else metadata.get(t)
        if isinstance(d, VSensorDef):
            return d.operands
        return []

    cycle = find_cycle(vdef.topic, deps)
    if cycle:
        raise CycleDetected(cycle)
    for t in vdef.operands:
        if metadata.get(t) is None and not known(t):
            raise UnknownOperand(str(t))
    metadata.put(vdef)


# -- evaluation --------------------------------------------------------------------------


def interpolate(series, t) -> float:
    """Linear interpolation of ``(ts, value)`` points at ``t``; no extrapolation."""
    lo, hi = 0, len(series)
    while lo < hi:
        mid = (lo + hi) // 2
        if series[mid][0] < t:
            lo = mid + 1
        else:
            hi = mid
    if lo < len(series) and series[lo][0] == t:
        return float(series[lo][1])
    if lo == 0 or lo == len(series):
        raise OutOfRange(f"no samples bracket t={t}")
    (ta, va), (tb, vb) = series[lo - 1], series[lo]
    return va + (t - ta) * (vb - va) / (tb - ta)


def _interp_grid(ts, vals, grid):
    """Vectorised :func:`interpolate`; NaN where no bracketing pair exists."""
    out = np.full(len(grid), np.nan)
    if len(ts) == 0:
        return out
    idx = np.searchsorted(ts, grid, side="left")
    inside = idx < len(ts)
    exact = np.zeros(len(grid), dtype=bool)
    exact[inside] = ts[idx[inside]] == grid[inside]
    out[exact] = vals[idx[exact]]
    mid = ~exact & (idx > 0) & inside
    a, b = idx[mid] - 1, idx[mid]
    ta, tb = ts[a], ts[b]
    va, vb = vals[a], vals[b]
    # integer offsets are exact; only the ratio rounds
    out[mid] = va + (grid[mid] - ta).astype(np.float64) * (vb - va) / (tb - ta).astype(np.float64)
    return out


def _fold(expr, env, grid):
    """Evaluate ``expr`` over grid arrays; returns (values, div-by-zero mask)."""
    n = len(grid)
    if isinstance(expr, Const):
        return np.full(n, expr.value), np.zeros(n, dtype=bool)
    if isinstance(expr, Operand):
        return env[expr.topic], np.zeros(n, dtype=bool)
    if isinstance(expr, Neg):
        v, bad = _fold(expr.operand, env, grid)
        return -v, bad
    lv, lbad = _fold(expr.left, env, grid)
    rv, rbad = _fold(expr.right, env, grid)
    bad = lbad | rbad
    with np.errstate(all="ignore"):
        if expr.op == "+":
            return lv + rv, bad
        if expr.op == "-":
            return lv - rv, bad
        if expr.op == "*":
            return lv * rv, bad
        zero = rv == 0
        return lv / np.where(zero, 1.0, rv), bad | zero


class VSensorEngine:
    """Evaluates virtual sensors against a store.

    ``stats`` counts operand fetches, computed and cached points and the
    reasons grid points were skipped.
    """

    def __init__(self, store, metadata=None):
        self.store = store
        self.metadata = metadata if metadata is not None else store.metadata
        self.stats = Counter()

    def definition(self, topic) -> VSensorDef:
        d = self.metadata.get(parse_topic(topic))
        if not isinstance(d, VSensorDef):
            raise UnknownSensor(str(topic))
        return d

    def grid(self, vdef, t0, t1):
        i, z = vdef.interval_ns, vdef.t_zero_ns
        k0 = -((z - t0) // i)  # ceil((t0 - z) / i)
        first = z + k0 * i
        if first >= t1:
            return np.empty(0, dtype=np.int64)
        return np.arange(first, t1, i, dtype=np.int64)

    def _operand_series(self, topic, lo, hi, target: Unit, stack):
        """Scaled, unit-converted ``(ts, values)`` of one operand over ``[lo, hi]``."""
        self.stats["fetches"] += 1
        d = self.metadata.get(topic)
        if isinstance(d, VSensorDef):
            pts = self.evaluate(topic, lo, hi + 1, _stack=stack)
            unit = d.unit
            ts = np.array([p[0] for p in pts], dtype=np.int64)
            vals = np.array([p[1] for p in pts], dtype=np.float64)
        else:
            meta = d if isinstance(d, SensorMetadata) else SensorMetadata(topic)
            sid = self.store.sid_of(topic)
            raw = self.store.query(sid, max(lo, 0), hi + 1) if sid is not None else []
            ts = np.array([p[0] for p in raw], dtype=np.int64)
            vals = np.array([p[1] for p in raw], dtype=np.float64) * meta.scale
            unit = meta.unit
        dst = target if unit.dimension == target.dimension else base_unit(unit.dimension)
        factor = convert(1.0, unit, dst)
        if factor != 1.0:
            vals = vals * factor
        return ts, vals

    def _slack(self, topic):
        d = self.metadata.get(topic)
        if isinstance(d, VSensorDef):
            return d.interval_ns
        if isinstance(d, SensorMetadata):
            return d.interval_ns
        return SensorMetadata(topic).interval_ns

    def evaluate(self, topic, t0: int, t1: int, _stack=()) -> list:
        """Points of a virtual sensor in ``[t0, t1)`` as ``(ts, value)``."""
        vdef = self.definition(topic)
        if vdef.topic in _stack:
            raise CycleDetected([str(t) for t in _stack] + [str(vdef.topic)])
        stack = _stack + (vdef.topic,)
        grid = self.grid(vdef, t0, t1)
        if len(grid) == 0:
            return []
        vsid = self.store.sid_of(vdef.topic, register=True)
        cached = {ts: raw for ts, raw in self.store.query(vsid, int(grid[0]), int(grid[-1]) + 1)
                  if (ts - vdef.t_zero_ns) % vdef.interval_ns == 0}
        missing = np.array([g for g in grid.tolist() if g not in cached], dtype=np.int64)
        self.stats["cached"] += len(grid) - len(missing)
        if len(missing):
            env = {}
            valid = np.ones(len(missing), dtype=bool)
            for op in vdef.operands:
                slack = self._slack(op)
                ts, vals = self._operand_series(op, t0 - slack, t1 + slack, vdef.unit, stack)
                env[op] = _interp_grid(ts, vals, missing)
                valid &= ~np.isnan(env[op])
            values, div0 = _fold(vdef.expr, env, missing)
            self.stats["out_of_range"] += int((~valid).sum())
            self.stats["division_by_zero"] += int((valid & div0).sum())
            ok = valid & ~div0 & np.isfinite(values)
            raw = np.zeros(len(values))
            with np.errstate(all="ignore"):
                raw[ok] = np.rint(values[ok] / vdef.scale)
            fits = ok & (np.abs(raw) < 2.0 ** 63)
            self.stats["overflow"] += int((ok & ~fits).sum())
            new = [(int(t), int(r)) for t, r in zip(missing[fits].tolist(), raw[fits].tolist())]
            if new:
                self.store.insert_many(vsid, new)
            self.stats["computed"] += len(new)
            cached.update(new)
        return [(ts, cached[ts] * vdef.scale) for ts in sorted(cached)]
