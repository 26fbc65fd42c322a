"""Dense numeric kernels used by the model, with multiply-add metering.

Matrices are plain numpy arrays. Every matmul goes through :func:`matmul` so
that an active :class:`FlopCounter` sees it; additions inside softmax and
normalisation are deliberately not counted.
"""

import contextlib
import threading
from collections import defaultdict

import numpy as np

RMS_EPS = 1e-6
PHASES = ("tokenizer", "attention", "ffn", "heads", "backward")

_default_dtype = np.float32
_local = threading.local()


class DimensionError(ValueError):
    def __init__(self, op, a_shape, b_shape):
        super().__init__(f"{op}: incompatible shapes {tuple(a_shape)} and {tuple(b_shape)}")
        self.a_shape = tuple(a_shape)
        self.b_shape = tuple(b_shape)


class NonFiniteError(ValueError):
    pass


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (float64 for gradient checks)."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class FlopCounter:
    """Monotone multiply-add counter with a per-phase breakdown.

    Safe to share between threads: every update takes a lock.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.per_phase = defaultdict(int)

    @property
    def multiply_adds(self):
        with self._lock:
            return sum(self.per_phase.values())

    def add(self, n, phase="other"):
        n = int(n)
        if n < 0:
            raise ValueError("flop increments must be non-negative")
        with self._lock:
            self.per_phase[phase] += n

    def reset(self):
        with self._lock:
            self.per_phase.clear()

    def snapshot(self):
        with self._lock:
            return dict(self.per_phase)

    def merge(self, other):
        for phase, n in other.snapshot().items():
            self.add(n, phase)

    def forward_total(self):
        snap = self.snapshot()
        return sum(v for k, v in snap.items() if k != "backward")

    @contextlib.contextmanager
    def activate(self):
        """Route metered ops on this thread into this counter."""
        stack = _counter_stack()
        stack.append(self)
        try:
            yield self
        finally:
            stack.pop()


def _counter_stack():
    if not hasattr(_local, "counters"):
        _local.counters = []
        _local.phase = ["other"]
    return _local.counters


def _phase_stack():
    _counter_stack()
    return _local.phase


@contextlib.contextmanager
def phase(name):
    stack = _phase_stack()
    stack.append(name)
    try:
        yield
    finally:
        stack.pop()


def current_phase():
    return _phase_stack()[-1]


def record_flops(n):
    stack = _counter_stack()
    if stack:
        stack[-1].add(n, current_phase())


def matmul(a, b):
    """``a @ b`` with numpy broadcasting; meters ``prod(out.shape) * k``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul", a.shape, b.shape)
    k_a = a.shape[-1]
    k_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if k_a != k_b:
        raise DimensionError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a, b)
    except ValueError as exc:
        raise DimensionError("matmul", a.shape, b.shape) from exc
    record_flops(int(np.size(out)) * k_a)
    return out


def check_finite(x, what="value"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite {what}")
    return x


def rms_norm(x, gain, eps=RMS_EPS):
    """Normalise the last axis by its root-mean-square and scale by ``gain``."""
    x = np.asarray(x)
    check_finite(x, "rms_norm input")
    if x.shape[-1] < 1:
        raise ValueError("rms_norm needs d >= 1")
    if eps <= 0:
        raise ValueError("eps must be positive")
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return gain * (x / r)


def rms_norm_backward(dy, x, gain, eps=RMS_EPS):
    """Returns ``(dx, dgain)``; ``dgain`` is summed over all leading axes."""
    d = x.shape[-1]
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xhat = x / r
    dgain = (dy * xhat).reshape(-1, d).sum(axis=0)
    g = dy * gain
    dx = g / r - xhat * (np.sum(g * xhat, axis=-1, keepdims=True) / (d * r))
    return dx, dgain


def softmax_masked(scores, mask):
    """Softmax over the last axis restricted to positions where ``mask`` is True.

    Masked positions come out exactly 0. Raises if any row has no pass position.
    """
    scores = np.asarray(scores)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("softmax_masked: row with every position masked")
    neg = np.array(-np.inf, dtype=scores.dtype)
    s = np.where(mask, scores, neg)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(s), 0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dp, p):
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1 + x * (1 - s))


def finite_diff_grad(f, theta, h=1e-4):
    """Central-difference gradient of scalar ``f`` at ``theta`` (float64)."""
    theta = np.array(theta, dtype=np.float64).ravel()
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        fp = float(f(theta.copy()))
        theta[i] = orig - h
        fm = float(f(theta.copy()))
        theta[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"objective is non-finite around coordinate {i}")
        grad[i] = (fp - fm) / (2 * h)
    return grad
