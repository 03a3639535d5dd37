"""Dense float32 kernels with exact operation and memory-traffic accounting.

Every kernel takes a :class:`CounterSink` and reports two things about the
call: arithmetic operations ("flops") and memory traffic in bytes.  The
counts are closed-form functions of the operand shapes, so tests can assert
them exactly.

Counting conventions, fixed package-wide:

* One multiply-add counts as 2 flops.  A matrix product ``[m,k] @ [k,n]``
  therefore reports ``2*m*n*k``.
* Elementwise kernels report a small constant number of operations per
  element: add/scale/relu 1, softmax 4, layer norm 6 (backward variants are
  documented on each kernel).
* Every float32 operand is read from "global memory" once per kernel call
  (4 bytes per element) and every output written once.  Boolean masks count
  1 byte per element.  No cache hierarchy is modelled.
* Pure selection (row gather indices, argmax) is not arithmetic and
  reports zero flops.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import MaskError, ShapeError

F32 = np.float32

#: Closed set of component labels a kernel call can be attributed to.
COMPONENTS = (
    "encoder_self",
    "decoder_self",
    "decoder_cross",
    "feed_forward",
    "embedding",
    "other",
)


class CounterSink:
    """Accumulates flop and byte counts for one run.

    A sink is owned by exactly one logical run; concurrent runs must use
    separate sinks.  Counts are integers, monotone non-decreasing while the
    run executes, and may be reset to zero only between runs.

    Attribution: kernel calls are tagged with the component label of the
    innermost enclosing :meth:`scope` block (``"other"`` at top level).
    Per-kernel-kind subtotals are kept as well so the analytic cost model
    can be calibrated against matrix-multiply traffic alone.
    """

    def __init__(self) -> None:
        self._components: dict[str, list[int]] = {}
        self._kinds: dict[tuple[str, str], list[int]] = {}
        self._scope_stack: list[str] = []

    # -- totals ---------------------------------------------------------

    @property
    def flops(self) -> int:
        return sum(v[0] for v in self._components.values())

    @property
    def bytes_read(self) -> int:
        return sum(v[1] for v in self._components.values())

    @property
    def bytes_written(self) -> int:
        return sum(v[2] for v in self._components.values())

    def component_totals(self) -> dict[str, tuple[int, int, int]]:
        """(flops, bytes_read, bytes_written) per component label."""
        return {k: (v[0], v[1], v[2]) for k, v in self._components.items()}

    def kind_totals(self) -> dict[tuple[str, str], tuple[int, int, int]]:
        """Subtotals keyed by (component, kernel kind)."""
        return {k: (v[0], v[1], v[2]) for k, v in self._kinds.items()}

    # -- recording ------------------------------------------------------

    @property
    def current_component(self) -> str:
        return self._scope_stack[-1] if self._scope_stack else "other"

    @contextmanager
    def scope(self, component: str):
        """Attribute kernel calls inside the block to ``component``."""
        if component not in COMPONENTS:
            raise ValueError(f"unknown component label: {component!r}")
        self._scope_stack.append(component)
        try:
            yield self
        finally:
            self._scope_stack.pop()

    def add(self, kind: str, flops: int, bytes_read: int, bytes_written: int) -> None:
        label = self.current_component
        cell = self._components.setdefault(label, [0, 0, 0])
        cell[0] += flops
        cell[1] += bytes_read
        cell[2] += bytes_written
        kcell = self._kinds.setdefault((label, kind), [0, 0, 0])
        kcell[0] += flops
        kcell[1] += bytes_read
        kcell[2] += bytes_written

    def reset(self) -> None:
        """Zero all counters.  Only legal between runs."""
        self._components.clear()
        self._kinds.clear()


def _as_f32_matrix(a: np.ndarray, name: str, ndim: int) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {a.shape}")
    if a.dtype != F32:
        raise ShapeError(f"{name} must be float32, got {a.dtype}")
    return a


def _check_finite(out: np.ndarray, kind: str) -> np.ndarray:
    if out.size and not np.isfinite(out).all():
        raise FloatingPointError(f"{kind} produced non-finite values")
    return out


# -- matrix multiply ------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray, sink: CounterSink) -> np.ndarray:
    """Product of ``a [m,k]`` and ``b [k,n]``.

    Counts: flops ``2*m*n*k``, bytes read ``4*(m*k + k*n)``, bytes written
    ``4*m*n``.
    """
    a = _as_f32_matrix(a, "a", 2)
    b = _as_f32_matrix(b, "b", 2)
    m, k = a.shape
    kb, n = b.shape
    if k != kb:
        raise ShapeError(f"matmul: a is {m}x{k}, b is {kb}x{n} (inner dimensions {k} != {kb})")
    sink.add("matmul", 2 * m * n * k, 4 * (m * k + k * n), 4 * m * n)
    return _check_finite(a @ b, "matmul")


def bmm(a: np.ndarray, b: np.ndarray, sink: CounterSink) -> np.ndarray:
    """Batched product of ``a [B,m,k]`` and ``b [B,k,n]``.

    Equivalent to ``B`` independent :func:`matmul` calls and counted
    identically: each slice's operands are read once.  A shared operand
    must therefore be passed as a single slice (smaller ``B``) to be
    counted once; materializing copies costs the copies.
    """
    a = _as_f32_matrix(a, "a", 3)
    b = _as_f32_matrix(b, "b", 3)
    ba, m, k = a.shape
    bb, kb, n = b.shape
    if ba != bb or k != kb:
        raise ShapeError(f"bmm: a is {ba}x{m}x{k}, b is {bb}x{kb}x{n} (batch or inner mismatch)")
    sink.add("matmul", 2 * ba * m * n * k, 4 * ba * (m * k + k * n), 4 * ba * m * n)
    return _check_finite(a @ b, "bmm")


# -- softmax ---------------------------------------------------------------


def softmax_rows(a: np.ndarray, sink: CounterSink, mask: np.ndarray | None = None) -> np.ndarray:
    """Row softmax of ``a [n,m]``, numerically stabilized by row-max subtraction.

    ``mask`` is an optional boolean ``[n,m]`` array; masked-out (False)
    entries receive exactly zero weight.  A row with no visible entries
    raises :class:`MaskError`.  Empty input returns an empty matrix.

    Counts: flops ``4*n*m`` (subtract, exp, accumulate, divide), bytes read
    ``4*n*m`` plus ``n*m`` for the mask, bytes written ``4*n*m``.
    """
    a = _as_f32_matrix(a, "a", 2)
    n, m = a.shape
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != a.shape or mask.dtype != np.bool_:
            raise ShapeError(f"softmax mask must be bool {a.shape}, got {mask.dtype} {mask.shape}")
    sink.add("softmax", 4 * n * m, 4 * n * m + (n * m if mask is not None else 0), 4 * n * m)
    if a.size == 0:
        return a.copy()
    if mask is None:
        row_max = a.max(axis=1, keepdims=True)
        e = np.exp(a - row_max)
    else:
        if not mask.any(axis=1).all():
            bad = int(np.flatnonzero(~mask.any(axis=1))[0])
            raise MaskError(f"softmax row {bad} has no visible entries")
        neg = np.where(mask, a, -np.inf)
        row_max = neg.max(axis=1, keepdims=True)
        # exponentiate only visible lanes; hidden ones may exceed the
        # visible row max and would overflow
        e = np.exp(np.where(mask, a - row_max, -np.inf)).astype(F32)
    out = (e / e.sum(axis=1, keepdims=True)).astype(F32)
    return _check_finite(out, "softmax")


def softmax_rows_backward(
    probs: np.ndarray, d_probs: np.ndarray, sink: CounterSink
) -> np.ndarray:
    """Backward of :func:`softmax_rows` given its output ``probs``.

    ``dS = P * (dP - rowsum(dP * P))``.  Masked entries have ``P == 0`` and
    receive zero gradient automatically.

    Counts: flops ``4*n*m``, bytes read ``8*n*m``, bytes written ``4*n*m``.
    """
    probs = _as_f32_matrix(probs, "probs", 2)
    d_probs = _as_f32_matrix(d_probs, "d_probs", 2)
    if probs.shape != d_probs.shape:
        raise ShapeError(f"softmax backward: probs is {probs.shape}, d_probs is {d_probs.shape}")
    n, m = probs.shape
    sink.add("softmax_backward", 4 * n * m, 8 * n * m, 4 * n * m)
    inner = (d_probs * probs).sum(axis=1, keepdims=True)
    return _check_finite((probs * (d_probs - inner)).astype(F32), "softmax backward")


# -- layer norm ------------------------------------------------------------

LN_EPS = 1e-6  # added to the per-row variance; keeps zero-variance rows finite


def layer_norm(a: np.ndarray, gain: np.ndarray, sink: CounterSink) -> np.ndarray:
    """Row-wise layer normalization followed by an elementwise gain.

    Each row is shifted to zero mean and scaled to unit variance
    (``LN_EPS`` added to the variance), then multiplied by ``gain``.

    Counts: flops ``6*n*m``, bytes read ``4*(n*m + m)``, bytes written
    ``4*n*m``.
    """
    a = _as_f32_matrix(a, "a", 2)
    gain = np.asarray(gain)
    n, m = a.shape
    if gain.shape != (m,):
        raise ShapeError(f"layer_norm: a is {n}x{m}, gain has shape {gain.shape} (want ({m},))")
    if gain.dtype != F32:
        raise ShapeError(f"layer_norm gain must be float32, got {gain.dtype}")
    sink.add("layer_norm", 6 * n * m, 4 * (n * m + m), 4 * n * m)
    with np.errstate(over="ignore"):
        mu = a.mean(axis=1, keepdims=True)
        var = a.var(axis=1, keepdims=True)
    if var.size and not np.isfinite(var).all():
        raise FloatingPointError("layer_norm row variance overflowed float32")
    out = ((a - mu) / np.sqrt(var + LN_EPS)).astype(F32) * gain
    return _check_finite(out.astype(F32), "layer_norm")


def layer_norm_backward(
    a: np.ndarray, gain: np.ndarray, d_out: np.ndarray, sink: CounterSink
) -> tuple[np.ndarray, np.ndarray]:
    """Backward of :func:`layer_norm`; returns ``(d_a, d_gain)``.

    Statistics are recomputed from ``a`` rather than cached.

    Counts: flops ``12*n*m``, bytes read ``4*(2*n*m + m)``, bytes written
    ``4*(n*m + m)``.
    """
    a = _as_f32_matrix(a, "a", 2)
    d_out = _as_f32_matrix(d_out, "d_out", 2)
    if a.shape != d_out.shape:
        raise ShapeError(f"layer_norm backward: a is {a.shape}, d_out is {d_out.shape}")
    n, m = a.shape
    sink.add("layer_norm_backward", 12 * n * m, 4 * (2 * n * m + m), 4 * (n * m + m))
    mu = a.mean(axis=1, keepdims=True)
    var = a.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    x_hat = (a - mu) * inv_std
    d_gain = (d_out * x_hat).sum(axis=0).astype(F32)
    d_hat = d_out * gain
    d_a = inv_std * (
        d_hat - d_hat.mean(axis=1, keepdims=True) - x_hat * (d_hat * x_hat).mean(axis=1, keepdims=True)
    )
    return _check_finite(d_a.astype(F32), "layer_norm backward"), d_gain


# -- elementwise -----------------------------------------------------------


def add(a: np.ndarray, b: np.ndarray, sink: CounterSink) -> np.ndarray:
    """Elementwise sum.  Counts: flops ``n*m``, read ``8*n*m``, written ``4*n*m``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: a is {a.shape}, b is {b.shape}")
    if a.dtype != F32 or b.dtype != F32:
        raise ShapeError(f"add: operands must be float32, got {a.dtype} and {b.dtype}")
    size = a.size
    sink.add("add", size, 8 * size, 4 * size)
    return _check_finite(a + b, "add")


def scale(a: np.ndarray, factor: float, sink: CounterSink) -> np.ndarray:
    """Multiply by a scalar.  Counts: flops ``n*m``, read ``4*n*m``, written ``4*n*m``."""
    a = np.asarray(a)
    if a.dtype != F32:
        raise ShapeError(f"scale: a must be float32, got {a.dtype}")
    size = a.size
    sink.add("scale", size, 4 * size, 4 * size)
    return _check_finite((a * F32(factor)).astype(F32), "scale")


def relu(a: np.ndarray, sink: CounterSink) -> np.ndarray:
    """Elementwise max(x, 0).  Counts: flops ``n*m``, read ``4*n*m``, written ``4*n*m``."""
    a = np.asarray(a)
    if a.dtype != F32:
        raise ShapeError(f"relu: a must be float32, got {a.dtype}")
    size = a.size
    sink.add("relu", size, 4 * size, 4 * size)
    return np.maximum(a, F32(0.0))


def relu_backward(a: np.ndarray, d_out: np.ndarray, sink: CounterSink) -> np.ndarray:
    """Backward of :func:`relu`.  Counts: flops ``n*m``, read ``8*n*m``, written ``4*n*m``."""
    a = np.asarray(a)
    d_out = np.asarray(d_out)
    if a.shape != d_out.shape:
        raise ShapeError(f"relu backward: a is {a.shape}, d_out is {d_out.shape}")
    size = a.size
    sink.add("relu_backward", size, 8 * size, 4 * size)
    return np.where(a > 0, d_out, F32(0.0)).astype(F32)


# -- table lookups ---------------------------------------------------------


def gather_rows(table: np.ndarray, indices: np.ndarray, sink: CounterSink) -> np.ndarray:
    """Select rows of ``table [V,d]`` by integer index (embedding lookup).

    Pure data movement: zero flops; reads and writes ``4 * len(indices) * d``
    bytes (index bytes are not counted).
    """
    table = _as_f32_matrix(table, "table", 2)
    indices = np.asarray(indices)
    if indices.ndim != 1:
        raise ShapeError(f"gather indices must be 1-D, got shape {indices.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError(
            f"gather index out of range: table has {table.shape[0]} rows, "
            f"indices span [{indices.min()}, {indices.max()}]"
        )
    nbytes = 4 * indices.size * table.shape[1]
    sink.add("gather", 0, nbytes, nbytes)
    return table[indices]


def scatter_add_rows(
    acc: np.ndarray, indices: np.ndarray, rows: np.ndarray, sink: CounterSink
) -> None:
    """Accumulate ``rows`` into ``acc`` at ``indices`` in place (embedding grad).

    Counts: flops ``len(indices)*d``, bytes read ``8*len(indices)*d``,
    bytes written ``4*len(indices)*d``.
    """
    acc = _as_f32_matrix(acc, "acc", 2)
    rows = _as_f32_matrix(rows, "rows", 2)
    indices = np.asarray(indices)
    if rows.shape != (indices.size, acc.shape[1]):
        raise ShapeError(
            f"scatter_add: rows is {rows.shape}, want ({indices.size}, {acc.shape[1]})"
        )
    size = rows.size
    sink.add("scatter_add", size, 8 * size, 4 * size)
    np.add.at(acc, indices, rows)
