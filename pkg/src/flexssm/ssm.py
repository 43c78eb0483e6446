"""Diagonal state space machinery and the selective-scan (Mamba-style) block.

Plain-numpy helpers (``zoh_discretize``, ``ssm_recurrence``, ``ssm_conv_kernel``,
``ssm_conv_apply``) cover the input-invariant system and double as oracles for
the selective scan, which is a single fused tape primitive backed by compiled
sequential kernels.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import _scan_kernel
from .tensor import (
    ShapeError,
    NonFiniteError,
    Tensor,
    causal_dwconv1d,
    concat,
    exp,
    flip,
    make_op,
    matmul,
    mul,
    silu,
    softplus,
    tsum,
)

ZOH_EPS = _scan_kernel.ZOH_EPS


@dataclass
class LTISystem:
    """Input-invariant diagonal SSM: ``h' = diag(a) h + b x``, ``y = c . h``."""

    a_diag: np.ndarray
    b: np.ndarray
    c: np.ndarray
    delta: float

    def __post_init__(self):
        self.a_diag = np.atleast_1d(np.asarray(self.a_diag, dtype=np.float64))
        self.b = np.broadcast_to(np.asarray(self.b, dtype=np.float64), self.a_diag.shape).copy()
        self.c = np.broadcast_to(np.asarray(self.c, dtype=np.float64), self.a_diag.shape).copy()
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    @classmethod
    def from_log(cls, a_log, b, c, delta):
        return cls(-np.exp(np.asarray(a_log, dtype=np.float64)), b, c, delta)

    def discretize(self):
        a_bar, b_bar = zoh_discretize(self.a_diag, self.b, self.delta)
        return a_bar, b_bar, self.c


def zoh_discretize(a, b, delta):
    """Zero-order hold for a diagonal system; works elementwise on arrays.

    ``a_bar = exp(delta a)``, ``b_bar = (exp(delta a) - 1) / a * b`` with the
    ``a -> 0`` limit ``delta * b`` used when ``|a| < 1e-9``.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("zoh_discretize: delta must be > 0")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a_bar = np.exp(delta * a)
    small = np.abs(a) < ZOH_EPS
    safe_a = np.where(small, 1.0, a)
    b_bar = np.where(small, delta * b, (a_bar - 1.0) / safe_a * b)
    if a_bar.ndim == 0:
        return float(a_bar), float(b_bar)
    return a_bar, b_bar


def ssm_recurrence(a_bar, b_bar, c, x):
    """Run ``h_t = a_bar h_{t-1} + b_bar x_t``, ``y_t = c . h_t`` from ``h_0 = 0``."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("ssm_recurrence: empty sequence")
    a_bar, b_bar, c = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in (a_bar, b_bar, c))
    h = np.zeros_like(a_bar)
    y = np.empty(len(x))
    for t, xt in enumerate(x):
        h = a_bar * h + b_bar * xt
        y[t] = c @ h
    return y


def ssm_conv_kernel(a_bar, b_bar, c, L: int):
    """``K[t] = sum_n c_n a_bar_n^t b_bar_n`` for ``t = 0..L-1``."""
    if L < 1:
        raise ValueError("ssm_conv_kernel: L must be >= 1")
    a_bar, b_bar, c = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in (a_bar, b_bar, c))
    powers = a_bar[None, :] ** np.arange(L)[:, None]
    return powers @ (c * b_bar)


def ssm_conv_apply(kernel, x):
    """Causal convolution ``y_t = sum_{tau <= t} K[tau] x_{t - tau}``.

    A kernel longer than the sequence is truncated to the sequence length.
    """
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)[: len(x)]
    return np.convolve(x, k)[: len(x)]


# ---------------------------------------------------------------------------
# selective scan


def scan(u: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, D: Tensor) -> Tensor:
    """Fused selective scan primitive.

    Per batch row, channel ``d`` and state ``n``::

        h_t = exp(delta_t a) h_{t-1} + (exp(delta_t a) - 1) / a * B_t x_t
        y_t = <C_t, h_t> + D x_t

    ``u``, ``delta``: (B, L, Di); ``A``: (Di, N); ``Bm``, ``Cm``: (B, L, N); ``D``: (Di,).
    """
    nb, L, Di = u.shape
    N = A.shape[-1]
    if (delta.shape != u.shape or A.shape != (Di, N) or Bm.shape != (nb, L, N)
            or Cm.shape != (nb, L, N) or D.shape != (Di,)):
        raise ShapeError(
            f"scan: u {u.shape}, delta {delta.shape}, A {A.shape}, B {Bm.shape}, C {Cm.shape}, D {D.shape}")
    if not np.isfinite(delta.data).all():
        raise NonFiniteError("scan: non-finite delta")
    arrs = [np.ascontiguousarray(t.data) for t in (u, delta, A, Bm, Cm, D)]
    # kept for the backward pass; the compiled loops only do multiply-adds
    em1 = np.expm1(arrs[1][..., None] * arrs[2])
    y = _scan_kernel.scan_forward(arrs[0], arrs[1], em1, *arrs[2:])

    def backward(gy):
        return _scan_kernel.scan_backward(arrs[0], arrs[1], em1, *arrs[2:], np.ascontiguousarray(gy))

    return make_op("selective_scan", y, (u, delta, A, Bm, Cm, D), backward)


def scan_reference(u: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, D: Tensor) -> Tensor:
    """Same recurrence as :func:`scan`, unrolled step by step from tape primitives.

    Slow; used as a gradient oracle for the fused kernel and to count
    per-step primitive work.  Assumes ``|A| >= 1e-9`` everywhere.
    """
    nb, L, Di = u.shape
    N = A.shape[-1]
    dtype = u.data.dtype
    ones_n = Tensor(np.ones((1, N), dtype=dtype))
    ones_d = Tensor(np.ones((Di, 1), dtype=dtype))
    inv_a = Tensor(1.0 / A.data)
    h = None
    ys = []
    for t in range(L):
        dt = delta[:, t, :].reshape(nb, Di, 1) @ ones_n           # (B, Di, N)
        da = exp(mul(dt, A))
        g = mul(da - 1.0, inv_a) if not A.requires_grad else _div(da - 1.0, A)
        xt = u[:, t, :]
        bt = ones_d @ Bm[:, t, :].reshape(nb, 1, N)               # (B, Di, N)
        inp = mul(mul(g, bt), xt.reshape(nb, Di, 1) @ ones_n)
        h = inp if h is None else mul(da, h) + inp
        ct = ones_d @ Cm[:, t, :].reshape(nb, 1, N)
        yt = tsum(mul(ct, h), axis=2) + mul(xt, D)
        ys.append(yt.reshape(nb, 1, Di))
    return concat(ys, axis=1)


def _div(num: Tensor, den: Tensor) -> Tensor:
    nd, dd = num.data, den.data
    out = nd / dd

    def backward(g):
        gd = -(g * nd / (dd * dd))
        return g / dd, gd.reshape(-1, *dd.shape).sum(axis=0)

    return make_op("div", out, (num, den), backward)


@dataclass
class ScanParams:
    """One scan direction: depthwise conv, the input-dependent projections, A and D."""

    conv_w: Tensor   # (Di, k)
    conv_b: Tensor   # (Di,)
    delta_w: Tensor  # (Di, Di)
    delta_b: Tensor  # (Di,)
    b_w: Tensor      # (Di, N)
    c_w: Tensor      # (Di, N)
    a_log: Tensor    # (Di, N)
    d: Tensor        # (Di,)


@dataclass
class SSMBlockParams:
    norm_g: Tensor
    norm_b: Tensor
    in_w: Tensor     # (D, 2 Di)
    out_w: Tensor    # (Di, D)
    fwd: ScanParams
    bwd: ScanParams | None = None

    def named(self, prefix: str = ""):
        """Flat ``(name, tensor)`` pairs in a fixed order."""
        out = []
        for f in ("norm_g", "norm_b", "in_w", "out_w"):
            out.append((prefix + f, getattr(self, f)))
        for tag in ("fwd", "bwd"):
            sp = getattr(self, tag)
            if sp is None:
                continue
            for f in fields(ScanParams):
                out.append((f"{prefix}{tag}.{f.name}", getattr(sp, f.name)))
        return out


def _trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * std


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


DT_RANGE = (0.001, 0.1)
INIT_SCHEMES = ("fan-in", "std0.02")


def proj_std(fan_in: int, scheme: str = "fan-in") -> float:
    """Init std for a projection: ``1/sqrt(fan_in)``, or the flat 0.02 of wide models."""
    if scheme == "fan-in":
        return 1.0 / np.sqrt(fan_in)
    if scheme == "std0.02":
        return 0.02
    raise ValueError(f"unknown init scheme {scheme!r}; valid: {', '.join(INIT_SCHEMES)}")


def init_scan_params(rng, d_inner: int, n_state: int, k: int, dtype, scheme: str = "fan-in") -> ScanParams:
    dt = np.exp(rng.uniform(np.log(DT_RANGE[0]), np.log(DT_RANGE[1]), size=d_inner))

    def sd(fan_in):
        return proj_std(fan_in, scheme)
    a_log = np.tile(np.log(np.arange(1, n_state + 1, dtype=np.float64)), (d_inner, 1))

    def T(a):
        return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

    return ScanParams(
        conv_w=T(_trunc_normal(rng, (d_inner, k), sd(k))),
        conv_b=T(np.zeros(d_inner)),
        delta_w=T(_trunc_normal(rng, (d_inner, d_inner), sd(d_inner))),
        delta_b=T(inverse_softplus(dt)),
        b_w=T(_trunc_normal(rng, (d_inner, n_state), sd(d_inner))),
        c_w=T(_trunc_normal(rng, (d_inner, n_state), sd(d_inner))),
        a_log=T(a_log),
        d=T(np.ones(d_inner)),
    )


def init_block_params(rng, d_model: int, d_inner: int, n_state: int, k: int,
                      bidirectional: bool = True, dtype=np.float32, scheme: str = "fan-in") -> SSMBlockParams:
    def T(a):
        return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

    def sd(fan_in):
        return proj_std(fan_in, scheme)

    return SSMBlockParams(
        norm_g=T(np.ones(d_model)),
        norm_b=T(np.zeros(d_model)),
        in_w=T(_trunc_normal(rng, (d_model, 2 * d_inner), sd(d_model))),
        out_w=T(_trunc_normal(rng, (d_inner, d_model), sd(d_inner))),
        fwd=init_scan_params(rng, d_inner, n_state, k, dtype, scheme),
        bwd=init_scan_params(rng, d_inner, n_state, k, dtype, scheme) if bidirectional else None,
    )


def selective_scan(x: Tensor, p: ScanParams, reference: bool = False) -> Tensor:
    """Input-dependent scan over ``x`` of shape (L, Di) or (B, L, Di).

    ``delta_t = softplus(x_t W_delta + b_delta)``, ``B_t = x_t W_B``,
    ``C_t = x_t W_C``, ``A = -exp(a_log)``.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.shape[-1] != p.delta_w.shape[0]:
        raise ShapeError(f"selective_scan: input {x.shape} vs inner width {p.delta_w.shape[0]}")
    delta = softplus(matmul(x, p.delta_w) + p.delta_b)
    Bm = matmul(x, p.b_w)
    Cm = matmul(x, p.c_w)
    A = -exp(p.a_log)
    y = (scan_reference if reference else scan)(x, delta, A, Bm, Cm, p.d)
    return y.reshape(*y.shape[1:]) if squeeze else y


def _branch(u: Tensor, p: ScanParams, reference: bool) -> Tensor:
    c = silu(causal_dwconv1d(u, p.conv_w, p.conv_b))
    return selective_scan(c, p, reference)


def mamba_block(x: Tensor, p: SSMBlockParams, bidirectional: bool = True, reference: bool = False) -> Tensor:
    """Gated selective-scan mixer on (B, L, D); norm and residual are the caller's."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    D = x.shape[-1]
    if p.in_w.shape[0] != D:
        raise ShapeError(f"mamba_block: input {x.shape} vs in_proj {p.in_w.shape}")
    di = p.out_w.shape[0]
    xz = matmul(x, p.in_w)
    u = xz[..., :di]
    z = xz[..., di:]
    s = _branch(u, p.fwd, reference)
    if bidirectional:
        if p.bwd is None:
            raise ValueError("mamba_block: bidirectional requested but no backward-scan parameters")
        s = s + flip(_branch(flip(u, 1), p.bwd, reference), 1)
    out = matmul(mul(s, silu(z)), p.out_w)
    return out.reshape(*out.shape[1:]) if squeeze else out


def scan_inputs_constant(u: np.ndarray, a_log, b, c, delta, d=0.0):
    """Build ``scan`` arguments for an input-invariant system (LTI check helper).

    ``a_log``, ``b``, ``c``: (N,) shared by all channels; ``delta`` scalar.
    """
    u = np.asarray(u)
    nb, L, Di = u.shape
    N = len(a_log)
    dtype = u.dtype
    A = np.tile(-np.exp(np.asarray(a_log, dtype=np.float64)), (Di, 1))
    return (Tensor(u), Tensor(np.full(u.shape, delta, dtype=dtype)), Tensor(A.astype(dtype)),
            Tensor(np.broadcast_to(np.asarray(b, dtype=dtype), (nb, L, N)).copy()),
            Tensor(np.broadcast_to(np.asarray(c, dtype=dtype), (nb, L, N)).copy()),
            Tensor(np.full(Di, d, dtype=dtype)))


__all__ = [
    "LTISystem", "zoh_discretize", "ssm_recurrence", "ssm_conv_kernel", "ssm_conv_apply", "scan",
    "scan_reference", "ScanParams", "SSMBlockParams", "init_scan_params", "init_block_params",
    "selective_scan", "mamba_block", "scan_inputs_constant", "proj_std", "INIT_SCHEMES",
]
