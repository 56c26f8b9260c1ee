"""Fixed-architecture sigmoid MLPs with exact first and second input
derivatives, and exact parameter gradients of losses built from them.

The value and derivative channels (u, ∂u/∂x̂, ∂u/∂t̂, ∂²u/∂x̂²) are
propagated analytically layer by layer using the closed-form sigmoid
derivatives; parameter gradients come from hand-written reverse
accumulation over that extended computation, so losses that read the
derivative channels are differentiated exactly with respect to every
weight. All arithmetic is 64-bit and sequentially reduced, so results are
bitwise reproducible on one platform.

:class:`ChannelEngine` binds the propagation to one fixed point batch and
owns every layer intermediate, so the training loop never allocates large
arrays; :func:`forward_pass`/:func:`backward_pass` are one-shot wrappers.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

MAGIC = b"NANOFLW\x00"
LAYOUT_VERSION = 1

KIND_PARAMS = 0
KIND_VI_FORWARD = 1
KIND_VI_INVERSE = 2


@dataclass(frozen=True)
class MlpSpec:
    """Network shape: two inputs (x̂, t̂), six sigmoid hidden layers of
    width 50, one linear output."""

    input_dim: int = 2
    hidden_layers: int = 6
    hidden_width: int = 50
    output_dim: int = 1

    @property
    def layer_dims(self):
        dims = [self.input_dim] + [self.hidden_width] * self.hidden_layers
        dims.append(self.output_dim)
        return dims

    @property
    def param_count(self) -> int:
        dims = self.layer_dims
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


DEFAULT_SPEC = MlpSpec()


@dataclass
class DerivBundle:
    """Network output with its first/second input derivatives; fields are
    scalars for a single point or arrays over a batch."""

    u: np.ndarray
    du_dx: np.ndarray
    du_dt: np.ndarray
    d2u_dx2: np.ndarray


def init_params(spec: MlpSpec, init_std: float, seed: int) -> np.ndarray:
    """i.i.d. zero-mean Gaussian parameter vector, deterministic per seed."""
    if init_std < 0:
        raise ValueError("init_std must be >= 0")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, init_std, size=spec.param_count)


def unflatten(params: np.ndarray, spec: MlpSpec):
    """Split a flat vector into per-layer (W, b) views; layer-major,
    weights before biases, W row-major with shape (fan_in, fan_out)."""
    dims = spec.layer_dims
    layers = []
    pos = 0
    for i in range(len(dims) - 1):
        fi, fo = dims[i], dims[i + 1]
        w = params[pos : pos + fi * fo].reshape(fi, fo)
        pos += fi * fo
        b = params[pos : pos + fo]
        pos += fo
        layers.append((w, b))
    if pos != params.shape[0]:
        raise ValueError(f"parameter vector has length {params.shape[0]}, expected {pos}")
    return layers


# Fused per-layer kernels for the sigmoid chain rules. Each runs a single
# pass over the batch, which is what keeps the training loop fast on one
# core; fastmath stays off so the arithmetic order is fixed and results
# are bitwise reproducible. The z buffer is overwritten with s = σ(z).


@njit(cache=True)
def _fwd_full(z, zx, zt, zxx, s1, ax, at, axx):
    zf, zxf, ztf, zxxf = z.ravel(), zx.ravel(), zt.ravel(), zxx.ravel()
    s1f, axf, atf, axxf = s1.ravel(), ax.ravel(), at.ravel(), axx.ravel()
    for i in range(zf.size):
        v = zf[i]
        if v >= 0.0:
            e = math.exp(-v)
            s = 1.0 / (1.0 + e)
        else:
            e = math.exp(v)
            s = e / (1.0 + e)
        zf[i] = s
        s1v = s * (1.0 - s)
        s1f[i] = s1v
        s2v = s1v * (1.0 - 2.0 * s)
        axf[i] = s1v * zxf[i]
        atf[i] = s1v * ztf[i]
        axxf[i] = s2v * zxf[i] * zxf[i] + s1v * zxxf[i]


@njit(cache=True)
def _fwd_one(z, zd, s1, ad):
    """Value channel plus one first-derivative channel."""
    zf, zdf, s1f, adf = z.ravel(), zd.ravel(), s1.ravel(), ad.ravel()
    for i in range(zf.size):
        v = zf[i]
        if v >= 0.0:
            e = math.exp(-v)
            s = 1.0 / (1.0 + e)
        else:
            e = math.exp(v)
            s = e / (1.0 + e)
        zf[i] = s
        s1v = s * (1.0 - s)
        s1f[i] = s1v
        adf[i] = s1v * zdf[i]


@njit(cache=True)
def _fwd_val(z, s1):
    zf, s1f = z.ravel(), s1.ravel()
    for i in range(zf.size):
        v = zf[i]
        if v >= 0.0:
            e = math.exp(-v)
            s = 1.0 / (1.0 + e)
        else:
            e = math.exp(v)
            s = e / (1.0 + e)
        zf[i] = s
        s1f[i] = s * (1.0 - s)


@njit(cache=True)
def _bwd_full(g_a, g_ax, g_at, g_axx, s, s1, zx, zt, zxx, o_z, o_zx, o_zt, o_zxx):
    gaf, gaxf, gatf, gaxxf = g_a.ravel(), g_ax.ravel(), g_at.ravel(), g_axx.ravel()
    sf, s1f, zxf, ztf, zxxf = s.ravel(), s1.ravel(), zx.ravel(), zt.ravel(), zxx.ravel()
    ozf, ozxf, oztf, ozxxf = o_z.ravel(), o_zx.ravel(), o_zt.ravel(), o_zxx.ravel()
    for i in range(gaf.size):
        sv, s1v, zxv = sf[i], s1f[i], zxf[i]
        s2v = s1v * (1.0 - 2.0 * sv)
        s3v = s2v * (1.0 - 2.0 * sv) - 2.0 * s1v * s1v
        ozf[i] = (
            gaf[i] * s1v
            + gaxf[i] * s2v * zxv
            + gatf[i] * s2v * ztf[i]
            + gaxxf[i] * (s3v * zxv * zxv + s2v * zxxf[i])
        )
        ozxf[i] = gaxf[i] * s1v + 2.0 * gaxxf[i] * s2v * zxv
        oztf[i] = gatf[i] * s1v
        ozxxf[i] = gaxxf[i] * s1v


@njit(cache=True)
def _bwd_one(g_a, g_ad, s, s1, zd, o_z, o_zd):
    """Reverse chain for the value channel plus one first derivative."""
    gaf, gadf = g_a.ravel(), g_ad.ravel()
    sf, s1f, zdf = s.ravel(), s1.ravel(), zd.ravel()
    ozf, ozdf = o_z.ravel(), o_zd.ravel()
    for i in range(gaf.size):
        s1v = s1f[i]
        s2v = s1v * (1.0 - 2.0 * sf[i])
        ozf[i] = gaf[i] * s1v + gadf[i] * s2v * zdf[i]
        ozdf[i] = gadf[i] * s1v


@njit(cache=True)
def _bwd_val(g_a, s1, o_z):
    gaf, s1f, ozf = g_a.ravel(), s1.ravel(), o_z.ravel()
    for i in range(gaf.size):
        ozf[i] = gaf[i] * s1f[i]


class ChannelEngine:
    """Forward/backward propagation workspace bound to one point batch.

    All layer intermediates are allocated once, so repeated evaluations
    (as in training) run without large allocations. Channel selection is
    fixed at construction; the fused kernels cover the value-only,
    single-first-derivative, and full channel sets, so a request for
    second derivatives — whose propagation needs ∂z/∂x̂ at every layer —
    or for both first derivatives runs the full set internally.
    """

    def __init__(
        self,
        points: np.ndarray,
        spec: MlpSpec = DEFAULT_SPEC,
        need_x: bool = True,
        need_t: bool = True,
        need_xx: bool = True,
    ):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != spec.input_dim:
            raise ValueError(f"points must have shape (n, {spec.input_dim})")
        self.spec = spec
        self.need_x, self.need_t, self.need_xx = need_x, need_t, need_xx
        track_x = need_x or need_xx
        if need_xx or (track_x and need_t):
            mode = "full"
        elif track_x:
            mode = "x"
        elif need_t:
            mode = "t"
        else:
            mode = "val"
        self.mode = mode
        self.has_x = mode in ("full", "x")
        self.has_t = mode in ("full", "t")
        self.has_xx = mode == "full"
        self.points = pts
        n = pts.shape[0]
        d = spec.input_dim
        if self.has_x:
            self.in_x = np.zeros((n, d))
            self.in_x[:, 0] = 1.0
        if self.has_t:
            self.in_t = np.zeros((n, d))
            self.in_t[:, 1] = 1.0
        nl = spec.hidden_layers
        shape = (n, spec.hidden_width)

        def stack():
            return [np.empty(shape) for _ in range(nl)]

        self.s = stack()
        self.s1 = stack()
        if self.has_x:
            self.zx = stack()
            self.ax = stack()
        if self.has_t:
            self.zt = stack()
            self.at = stack()
        if self.has_xx:
            # second input derivatives are identically zero, so the first
            # layer's z_xx entry is pre-zeroed and never rewritten
            self.zxx = [np.zeros(shape) for _ in range(nl)]
            self.axx = stack()
        active = ["u"] + (["x"] if self.has_x else []) + (["t"] if self.has_t else [])
        active += ["xx"] if self.has_xx else []
        self._active = active
        self._ga = {k: np.empty(shape) for k in active}
        self._gz = {k: np.empty(shape) for k in active}
        self._layers = None

    def forward(self, params: np.ndarray) -> dict:
        """Propagate all selected channels; returns the fields dict with
        (n,) arrays for u and each requested derivative (None otherwise)."""
        spec = self.spec
        layers = unflatten(np.asarray(params, dtype=np.float64), spec)
        self._layers = layers
        a = self.points
        a_x = self.in_x if self.has_x else None
        a_t = self.in_t if self.has_t else None
        a_xx = None
        for i in range(spec.hidden_layers):
            w, b = layers[i]
            z = self.s[i]
            np.matmul(a, w, out=z)
            z += b
            if self.has_x:
                np.matmul(a_x, w, out=self.zx[i])
            if self.has_t:
                np.matmul(a_t, w, out=self.zt[i])
            if self.has_xx and i > 0:
                np.matmul(a_xx, w, out=self.zxx[i])
            if self.mode == "full":
                _fwd_full(z, self.zx[i], self.zt[i], self.zxx[i],
                          self.s1[i], self.ax[i], self.at[i], self.axx[i])
                a_xx = self.axx[i]
            elif self.mode == "x":
                _fwd_one(z, self.zx[i], self.s1[i], self.ax[i])
            elif self.mode == "t":
                _fwd_one(z, self.zt[i], self.s1[i], self.at[i])
            else:
                _fwd_val(z, self.s1[i])
            a = z
            if self.has_x:
                a_x = self.ax[i]
            if self.has_t:
                a_t = self.at[i]
        w, b = layers[-1]
        u = a @ w
        u += b
        return {
            "u": u[:, 0],
            "du_dx": (a_x @ w)[:, 0] if self.need_x else None,
            "du_dt": (a_t @ w)[:, 0] if self.need_t else None,
            "d2u_dx2": (a_xx @ w)[:, 0] if self.need_xx else None,
        }

    def _inputs(self, i):
        """Input channels of layer ``i`` (activations of layer i-1)."""
        if i == 0:
            return (
                self.points,
                self.in_x if self.has_x else None,
                self.in_t if self.has_t else None,
                None,
            )
        return (
            self.s[i - 1],
            self.ax[i - 1] if self.has_x else None,
            self.at[i - 1] if self.has_t else None,
            self.axx[i - 1] if self.has_xx else None,
        )

    def backward(self, cotangents: dict) -> np.ndarray:
        """Exact gradient with respect to the flat parameter vector of a
        scalar loss whose sensitivities to the output channels are given.

        ``cotangents`` maps channel names (u, du_dx, du_dt, d2u_dx2) to
        (n,) arrays dL/d(channel); missing or None entries mean zero.
        Must follow a :meth:`forward` call on the parameter vector being
        differentiated.
        """
        if self._layers is None:
            raise RuntimeError("backward() requires a prior forward() call")
        spec = self.spec
        layers = self._layers
        n = self.points.shape[0]
        tracked = {"u": True, "du_dx": self.has_x, "du_dt": self.has_t,
                   "d2u_dx2": self.has_xx}
        for name, v in cotangents.items():
            if v is not None and not tracked.get(name, False):
                raise ValueError(f"cotangent for untracked channel {name!r}")

        def col(name):
            v = cotangents.get(name)
            if v is None:
                return np.zeros((n, 1))
            return np.ascontiguousarray(v, dtype=np.float64).reshape(n, 1)

        # z-channel cotangents of the linear output layer
        g_z = col("u")
        g_zx = col("du_dx") if self.has_x else None
        g_zt = col("du_dt") if self.has_t else None
        g_zxx = col("d2u_dx2") if self.has_xx else None
        grad = np.zeros(spec.param_count)
        glayers = unflatten(grad, spec)
        for i in range(spec.hidden_layers, -1, -1):
            w, _ = layers[i]
            gw, gb = glayers[i]
            a, a_x, a_t, a_xx = self._inputs(i)
            gw += a.T @ g_z
            gb += g_z.sum(axis=0)
            if self.has_x:
                gw += a_x.T @ g_zx
            if self.has_t:
                gw += a_t.T @ g_zt
            if self.has_xx and a_xx is not None:
                gw += a_xx.T @ g_zxx
            if i == 0:
                break
            # cotangents w.r.t. this layer's input channels, then through
            # layer i-1's sigmoid
            wt = w.T
            ga, gz = self._ga, self._gz
            g_a = np.matmul(g_z, wt, out=ga["u"])
            p = i - 1
            if self.mode == "full":
                g_ax = np.matmul(g_zx, wt, out=ga["x"])
                g_at = np.matmul(g_zt, wt, out=ga["t"])
                g_axx = np.matmul(g_zxx, wt, out=ga["xx"])
                _bwd_full(g_a, g_ax, g_at, g_axx, self.s[p], self.s1[p],
                          self.zx[p], self.zt[p], self.zxx[p],
                          gz["u"], gz["x"], gz["t"], gz["xx"])
                g_z, g_zx, g_zt, g_zxx = gz["u"], gz["x"], gz["t"], gz["xx"]
            elif self.mode == "x":
                g_ax = np.matmul(g_zx, wt, out=ga["x"])
                _bwd_one(g_a, g_ax, self.s[p], self.s1[p], self.zx[p],
                         gz["u"], gz["x"])
                g_z, g_zx = gz["u"], gz["x"]
            elif self.mode == "t":
                g_at = np.matmul(g_zt, wt, out=ga["t"])
                _bwd_one(g_a, g_at, self.s[p], self.s1[p], self.zt[p],
                         gz["u"], gz["t"])
                g_z, g_zt = gz["u"], gz["t"]
            else:
                _bwd_val(g_a, self.s1[p], gz["u"])
                g_z = gz["u"]
        return grad


def forward_pass(
    params: np.ndarray,
    points: np.ndarray,
    spec: MlpSpec = DEFAULT_SPEC,
    need_x: bool = True,
    need_t: bool = True,
    need_xx: bool = True,
):
    """Propagate the value/derivative channels through the network.

    Returns (fields, engine): ``fields`` holds u and the requested
    derivative channels as (n,) arrays; the engine carries the
    intermediates :func:`backward_pass` needs.
    """
    engine = ChannelEngine(points, spec, need_x=need_x, need_t=need_t, need_xx=need_xx)
    fields = engine.forward(params)
    return fields, engine


def backward_pass(
    params: np.ndarray,
    cache: ChannelEngine,
    cotangents: dict,
    spec: MlpSpec = DEFAULT_SPEC,
) -> np.ndarray:
    """Gradient of a scalar loss with the given output-channel cotangents,
    for the parameter vector last run through ``cache``."""
    return cache.backward(cotangents)


def forward_with_derivatives(params, point, spec: MlpSpec = DEFAULT_SPEC) -> DerivBundle:
    """Evaluate u and its input derivatives at one point or a batch."""
    pts = np.atleast_2d(np.asarray(point, dtype=np.float64))
    fields, _ = forward_pass(params, pts, spec)
    vals = [fields[k] for k in ("u", "du_dx", "du_dt", "d2u_dx2")]
    for v in vals:
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("non-finite value in derivative propagation")
    if np.ndim(point) == 1 or (
        isinstance(point, tuple) and len(point) == 2 and np.isscalar(point[0])
    ):
        return DerivBundle(*(float(v[0]) for v in vals))
    return DerivBundle(*vals)


def loss_param_gradient(params, points, loss, spec: MlpSpec = DEFAULT_SPEC):
    """Exact parameter gradient of a scalar loss of the derivative bundle
    over a point batch.

    ``loss(bundle) -> (value, cotangents)`` where cotangents maps channel
    names to dL/d(channel) arrays. Returns (value, gradient).
    """
    params = np.asarray(params, dtype=np.float64)
    fields, engine = forward_pass(params, np.atleast_2d(points), spec)
    bundle = DerivBundle(
        fields["u"], fields["du_dx"], fields["du_dt"], fields["d2u_dx2"]
    )
    value, cot = loss(bundle)
    grad = engine.backward(cot)
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise FloatingPointError(f"non-finite gradient entry at parameter index {bad}")
    return float(value), grad


@dataclass
class GradientCheckReport:
    max_rel_error: float
    worst_coordinate: int
    n_probes: int


def gradient_check(
    f,
    grad: np.ndarray,
    params: np.ndarray,
    n_probes: int = 20,
    h: float = 1e-6,
    seed: int = 0,
) -> GradientCheckReport:
    """Compare an analytic gradient against central finite differences of
    the scalar ``f(params)`` on randomly probed coordinates."""
    if h <= 0:
        raise ValueError("h must be > 0")
    rng = np.random.default_rng(seed)
    coords = rng.choice(params.shape[0], size=min(n_probes, params.shape[0]), replace=False)
    worst, worst_i = 0.0, int(coords[0])
    for i in coords:
        e = np.zeros_like(params)
        e[i] = h
        fd = (f(params + e) - f(params - e)) / (2.0 * h)
        denom = max(abs(grad[i]), abs(fd), 1e-12)
        rel = abs(grad[i] - fd) / denom
        if rel > worst:
            worst, worst_i = rel, int(i)
    return GradientCheckReport(float(worst), worst_i, len(coords))


def save_vector(path, vec: np.ndarray, kind: int = KIND_PARAMS) -> None:
    """Binary layout: 8-byte magic, version byte, kind byte, uint64 length,
    little-endian float64 payload."""
    vec = np.asarray(vec, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBQ", LAYOUT_VERSION, kind, vec.size))
        fh.write(vec.tobytes())


def load_vector(path):
    """Read a vector written by :func:`save_vector`; returns (vec, kind)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a nanoflow parameter file")
        version, kind, size = struct.unpack("<BBQ", fh.read(10))
        if version != LAYOUT_VERSION:
            raise ValueError(f"{path}: unsupported layout version {version}")
        data = np.frombuffer(fh.read(8 * size), dtype="<f8").copy()
        if data.size != size:
            raise ValueError(f"{path}: truncated payload")
    return data, kind
