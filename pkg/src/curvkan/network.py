"""KAN structure, forward pass with trace caching, and hand-derived backprop.

Layers are indexed from 0: ``net.layers[l]`` maps ``z[l]`` (width
``widths[l]``) to ``z[l + 1]``.  Edge ``(l, c, b)`` connects input node ``b``
to output node ``c``.  Each edge computes

    phi(z) = w_b * SiLU(z) + w_s * sum_g c_g B_g(z)

with ``w_s`` fixed to 1 (and not trained) for the RBF basis.
"""

from dataclasses import dataclass, field
import json

import numpy as np

from .basis import (
    BasisKind,
    GridSpec,
    eval_basis,
    local_bspline,
    n_basis,
    silu,
    silu_d1,
    silu_d2,
)
from .errors import ConfigError, NumericalError, ShapeError

CHECKPOINT_FORMAT = "curvkan-network"


@dataclass
class EdgeActivation:
    w_b: float
    w_s: float
    coeffs: np.ndarray
    grid: GridSpec
    kind: BasisKind = BasisKind.BSPLINE

    def __post_init__(self):
        self.kind = BasisKind(self.kind)
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (n_basis(self.grid, self.kind),):
            raise ConfigError(
                f"expected {n_basis(self.grid, self.kind)} coefficients, got {self.coeffs.shape}"
            )
        if self.kind is BasisKind.RBF and self.w_s != 1.0:
            raise ConfigError("RBF edges have no separate spline scale (w_s must be 1)")
        if not (np.isfinite(self.coeffs).all() and np.isfinite(self.w_b) and np.isfinite(self.w_s)):
            raise NumericalError("non-finite edge parameter")

    def __call__(self, z, deriv=0):
        return edge_eval(self, z, deriv)


def edge_eval(edge, z, deriv=0):
    """phi, phi' or phi'' of a single edge at ``z`` (scalar or array)."""
    base = (silu, silu_d1, silu_d2)[deriv](np.asarray(z, dtype=float))
    spline = eval_basis(edge.grid, edge.kind, z, deriv) @ edge.coeffs
    return edge.w_b * base + edge.w_s * spline


@dataclass
class KanLayer:
    coeffs: np.ndarray  # (n_out, n_in, n_basis)
    w_b: np.ndarray     # (n_out, n_in)
    w_s: np.ndarray     # (n_out, n_in)
    lo: np.ndarray      # (n_out, n_in)
    hi: np.ndarray      # (n_out, n_in)
    intervals: int
    kind: BasisKind = BasisKind.BSPLINE

    def __post_init__(self):
        self.kind = BasisKind(self.kind)

    @property
    def n_out(self):
        return self.w_b.shape[0]

    @property
    def n_in(self):
        return self.w_b.shape[1]

    @property
    def n_basis(self):
        return self.coeffs.shape[-1]

    @property
    def spacing(self):
        """Knot spacing (B-spline) or center spacing (RBF) per edge."""
        if self.kind is BasisKind.RBF:
            return (self.hi - self.lo) / (self.intervals - 1)
        return (self.hi - self.lo) / self.intervals

    def grid(self, c, b):
        return GridSpec(float(self.lo[c, b]), float(self.hi[c, b]), self.intervals)

    def shared_columns(self):
        """True when every edge leaving an input node uses the same range."""
        return bool((self.lo == self.lo[:1]).all() and (self.hi == self.hi[:1]).all())

    def copy(self):
        return KanLayer(
            self.coeffs.copy(), self.w_b.copy(), self.w_s.copy(),
            self.lo.copy(), self.hi.copy(), self.intervals, self.kind,
        )


class KanNetwork:
    """Dense KAN with widths ``[n_0, ..., n_L]``."""

    def __init__(self, widths, layers):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ConfigError(f"invalid widths {widths}")
        if len(layers) != len(widths) - 1:
            raise ConfigError("need one layer per consecutive pair of widths")
        for l, layer in enumerate(layers):
            if layer.w_b.shape != (widths[l + 1], widths[l]):
                raise ConfigError(f"layer {l} has shape {layer.w_b.shape}, widths say {(widths[l + 1], widths[l])}")
        self.widths = widths
        self.layers = list(layers)

    @property
    def kind(self):
        return self.layers[0].kind

    @property
    def depth(self):
        return len(self.layers)

    @property
    def n_edges(self):
        return sum(a * b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def edges(self):
        for l, layer in enumerate(self.layers):
            for c in range(layer.n_out):
                for b in range(layer.n_in):
                    yield l, c, b

    def edge(self, l, c, b):
        layer = self.layers[l]
        return EdgeActivation(
            float(layer.w_b[c, b]), float(layer.w_s[c, b]),
            layer.coeffs[c, b].copy(), layer.grid(c, b), layer.kind,
        )

    def set_edge(self, l, c, b, edge):
        layer = self.layers[l]
        if edge.kind is not layer.kind or edge.grid.intervals != layer.intervals:
            raise ConfigError("edge basis does not match its layer")
        layer.w_b[c, b] = edge.w_b
        layer.w_s[c, b] = edge.w_s
        layer.coeffs[c, b] = edge.coeffs
        layer.lo[c, b] = edge.grid.lo
        layer.hi[c, b] = edge.grid.hi

    def copy(self):
        return KanNetwork(self.widths, [layer.copy() for layer in self.layers])

    # -- flat parameter vector ---------------------------------------------

    def _trainable(self, layer):
        yield "coeffs", layer.coeffs
        yield "w_b", layer.w_b
        if layer.kind is BasisKind.BSPLINE:
            yield "w_s", layer.w_s

    def param_names(self):
        """(layer, name, shape, start, stop) for each block of the flat vector."""
        out, pos = [], 0
        for l, layer in enumerate(self.layers):
            for name, arr in self._trainable(layer):
                out.append((l, name, arr.shape, pos, pos + arr.size))
                pos += arr.size
        return out

    @property
    def n_params(self):
        return self.param_names()[-1][-1]

    def get_params(self):
        return np.concatenate([arr.ravel() for layer in self.layers for _, arr in self._trainable(layer)])

    def set_params(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got {vec.shape}")
        for l, name, shape, start, stop in self.param_names():
            getattr(self.layers[l], name)[...] = vec[start:stop].reshape(shape)

    def flatten_grads(self, grads):
        parts = []
        for layer, g in zip(self.layers, grads):
            parts += [g.coeffs.ravel(), g.w_b.ravel()]
            if layer.kind is BasisKind.BSPLINE:
                parts.append(g.w_s.ravel())
        return np.concatenate(parts)

    def locate_param(self, index):
        for l, name, shape, start, stop in self.param_names():
            if start <= index < stop:
                return (l, name, np.unravel_index(index - start, shape))
        raise IndexError(index)

    # -- serialization -------------------------------------------------------

    def to_dict(self):
        layers = []
        for l, layer in enumerate(self.layers):
            edges = []
            for c in range(layer.n_out):
                for b in range(layer.n_in):
                    edges.append({
                        "out": c, "in": b,
                        "grid": {"lo": float(layer.lo[c, b]), "hi": float(layer.hi[c, b]),
                                 "intervals": layer.intervals, "order": 3},
                        "w_b": float(layer.w_b[c, b]),
                        "w_s": float(layer.w_s[c, b]),
                        "coeffs": [float(v) for v in layer.coeffs[c, b]],
                    })
            layers.append({"kind": layer.kind.value, "edges": edges})
        return {"format": CHECKPOINT_FORMAT, "version": 1, "widths": self.widths, "layers": layers}

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError("not a network checkpoint")
        widths = data["widths"]
        layers = []
        for l, ld in enumerate(data["layers"]):
            kind = BasisKind(ld["kind"])
            n_out, n_in = widths[l + 1], widths[l]
            intervals = ld["edges"][0]["grid"]["intervals"]
            nb = n_basis(GridSpec(0.0, 1.0, intervals), kind)
            layer = KanLayer(
                np.zeros((n_out, n_in, nb)), np.zeros((n_out, n_in)), np.ones((n_out, n_in)),
                np.zeros((n_out, n_in)), np.ones((n_out, n_in)), intervals, kind,
            )
            for e in ld["edges"]:
                c, b = e["out"], e["in"]
                layer.lo[c, b] = e["grid"]["lo"]
                layer.hi[c, b] = e["grid"]["hi"]
                layer.w_b[c, b] = e["w_b"]
                layer.w_s[c, b] = e["w_s"]
                layer.coeffs[c, b] = e["coeffs"]
            layers.append(layer)
        return cls(widths, layers)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def init_network(widths, grid_size, kind="bspline", input_domain=None,
                 hidden_range=(-3.0, 3.0), seed=0, coeff_std=0.1, grid_scaled=True):
    """Fresh network: w_b = w_s = 1, spline coefficients ~ N(0, s^2).

    ``s = coeff_std / grid_size`` when ``grid_scaled`` (so the spline starts
    near zero at any resolution), otherwise ``s = coeff_std``.

    ``input_domain`` is a list of per-coordinate ``(lo, hi)`` for the first
    layer; deeper layers use ``hidden_range``.
    """
    kind = BasisKind(kind)
    rng = np.random.default_rng(seed)
    widths = [int(w) for w in widths]
    nb = n_basis(GridSpec(0.0, 1.0, grid_size), kind)
    layers = []
    for l, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        if l == 0 and input_domain is not None:
            if len(input_domain) != n_in:
                raise ConfigError(f"input domain has {len(input_domain)} coordinates, widths[0]={n_in}")
            lo = np.tile([float(d[0]) for d in input_domain], (n_out, 1))
            hi = np.tile([float(d[1]) for d in input_domain], (n_out, 1))
        else:
            lo = np.full((n_out, n_in), float(hidden_range[0]))
            hi = np.full((n_out, n_in), float(hidden_range[1]))
        for a, b in zip(lo.ravel(), hi.ravel()):
            GridSpec(a, b, grid_size)
        coeffs = rng.normal(0.0, coeff_std / grid_size if grid_scaled else coeff_std, size=(n_out, n_in, nb))
        layers.append(KanLayer(coeffs, np.ones((n_out, n_in)), np.ones((n_out, n_in)),
                               lo, hi, grid_size, kind))
    return KanNetwork(widths, layers)


# -- forward ----------------------------------------------------------------

@dataclass
class LayerCache:
    z: np.ndarray            # (N, n_in) layer input
    silu: np.ndarray         # (N, n_in)
    spline: np.ndarray       # (N, n_out, n_in) c^T B(z), unscaled by w_s
    basis: np.ndarray        # (N, n_out|1, n_in, m) active basis values
    index: np.ndarray = None  # (N, n_out, n_in, m) flat coefficient index (B-spline)
    phi: np.ndarray = None
    dphi: np.ndarray = None
    d2phi: np.ndarray = None


@dataclass
class ForwardTrace:
    """Layer inputs ``z[0..L]`` and per-edge phi, phi', phi'' at those inputs."""

    z: list
    layers: list = field(default_factory=list)

    @property
    def output(self):
        return self.z[-1]

    @property
    def phi(self):
        return [lc.phi for lc in self.layers]

    @property
    def dphi(self):
        return [lc.dphi for lc in self.layers]

    @property
    def d2phi(self):
        return [lc.d2phi for lc in self.layers]


def _layer_forward(layer, z, derivs):
    lo, hi = layer.lo, layer.hi
    if layer.shared_columns():
        lo, hi = lo[:1], hi[:1]
    zz = z[:, None, :]
    su = silu(z)
    n_out, n_in, nb = layer.coeffs.shape

    if layer.kind is BasisKind.BSPLINE:
        h = (hi - lo) / layer.intervals
        span, vals, d1, d2 = local_bspline(zz, lo, h, layer.intervals)
        base = (np.arange(n_out)[:, None] * n_in + np.arange(n_in)[None, :]) * nb
        idx = np.clip(span[..., None] + np.arange(4), 0, nb - 1) + base[..., None]
        cg = layer.coeffs.ravel()[idx]
        spline = (cg * vals).sum(-1)
        cache = LayerCache(z, su, spline, vals, index=idx)
        if derivs:
            s1 = (cg * d1).sum(-1)
            s2 = (cg * d2).sum(-1)
    else:
        h = (hi - lo) / (layer.intervals - 1)
        u = (zz[..., None] - lo[..., None] - h[..., None] * np.arange(nb)) / h[..., None]
        B = np.exp(-u * u)
        spline = (B * layer.coeffs).sum(-1)
        cache = LayerCache(z, su, spline, B)
        if derivs:
            hh = h[..., None]
            s1 = ((-2.0 * u / hh) * B * layer.coeffs).sum(-1)
            s2 = (((4.0 * u * u - 2.0) / (hh * hh)) * B * layer.coeffs).sum(-1)

    cache.phi = layer.w_b * su[:, None, :] + layer.w_s * spline
    if derivs:
        cache.dphi = layer.w_b * silu_d1(z)[:, None, :] + layer.w_s * s1
        cache.d2phi = layer.w_b * silu_d2(z)[:, None, :] + layer.w_s * s2
    return cache


def _check_finite(arr, l, what):
    if not np.isfinite(arr).all():
        bad = np.argwhere(~np.isfinite(arr))[0]
        loc = f"layer {l}, edge (out={bad[1]}, in={bad[2]})" if arr.ndim == 3 else f"layer {l}"
        raise NumericalError(f"non-finite {what}", location=loc)


def forward(net, x, derivs=True):
    """Evaluate the network on a batch; returns ``(outputs, trace)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.widths[0]:
        raise ShapeError(f"expected inputs of shape (N, {net.widths[0]}), got {x.shape}")
    if not np.isfinite(x).all():
        raise NumericalError("non-finite input sample")
    trace = ForwardTrace([x])
    z = x
    for l, layer in enumerate(net.layers):
        cache = _layer_forward(layer, z, derivs)
        _check_finite(cache.phi, l, "activation")
        z = cache.phi.sum(axis=2)
        trace.layers.append(cache)
        trace.z.append(z)
    return z, trace


def predict(net, x):
    return forward(net, x, derivs=False)[0]


# -- backward ---------------------------------------------------------------

@dataclass
class LayerGrad:
    coeffs: np.ndarray
    w_b: np.ndarray
    w_s: np.ndarray

    @classmethod
    def zeros_like(cls, layer):
        return cls(np.zeros_like(layer.coeffs), np.zeros_like(layer.w_b), np.zeros_like(layer.w_s))

    def add(self, other, scale=1.0):
        self.coeffs += scale * other.coeffs
        self.w_b += scale * other.w_b
        self.w_s += scale * other.w_s


def backward(net, trace, out_grad, phi_grads=None):
    """Reverse-mode gradient given dLoss/d(output) and optional dLoss/d(phi_e).

    ``out_grad`` has the shape of the output batch; ``phi_grads`` is an
    optional per-layer list of (N, n_out, n_in) arrays for losses that read
    individual edge activations directly.  Returns one ``LayerGrad`` per layer.
    """
    grads = [None] * net.depth
    g = np.asarray(out_grad, dtype=float)
    for l in range(net.depth - 1, -1, -1):
        layer, cache = net.layers[l], trace.layers[l]
        ge = np.broadcast_to(g[:, :, None], cache.phi.shape)
        if phi_grads is not None and phi_grads[l] is not None:
            ge = ge + phi_grads[l]
        gw_b = np.einsum("ncb,nb->cb", ge, cache.silu)
        gw_s = np.einsum("ncb,ncb->cb", ge, cache.spline)
        scaled = ge * layer.w_s
        if layer.kind is BasisKind.BSPLINE:
            w = scaled[..., None] * cache.basis
            gc = np.bincount(cache.index.ravel(), weights=w.ravel(),
                             minlength=layer.coeffs.size).reshape(layer.coeffs.shape)
        else:
            gc = (scaled[..., None] * cache.basis).sum(axis=0)
        if layer.kind is BasisKind.RBF:
            gw_s = np.zeros_like(gw_s)
        grads[l] = LayerGrad(gc, gw_b, gw_s)
        if l > 0:
            if cache.dphi is None:
                raise ConfigError("trace was computed without derivatives")
            g = np.einsum("ncb,ncb->nb", ge, cache.dphi)
    return grads


def mse(pred, y):
    r = pred - y
    return float(np.mean(r * r))


def loss_gradient(net, x, y, penalty=None, weights=None, trace=None):
    """Objective MSE + lambda * penalty and its exact gradient (flat vector).

    Returns ``(objective, grad, parts)`` with ``parts`` holding ``mse`` and
    the raw (unscaled) ``penalty`` value.
    """
    from .penalty import penalty_terms

    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if trace is None:
        _, trace = forward(net, x)
    pred = trace.output
    if y.shape != pred.shape:
        raise ShapeError(f"targets {y.shape} do not match outputs {pred.shape}")
    if pred.shape[0] == 0:
        raise ShapeError("empty batch")
    resid = pred - y
    value = float(np.mean(resid * resid))
    out_grad = 2.0 * resid / resid.size

    pen_value = 0.0
    phi_grads = None
    direct = None
    lam = 0.0 if penalty is None else penalty.lam
    if penalty is not None and penalty.active:
        terms = penalty_terms(net, trace, penalty, weights)
        pen_value = terms.value
        if terms.phi_grads is not None:
            phi_grads = [None if p is None else lam * p for p in terms.phi_grads]
        direct = terms.grads

    grads = backward(net, trace, out_grad, phi_grads)
    if direct is not None:
        for g, d in zip(grads, direct):
            if d is not None:
                g.add(d, lam)
    flat = net.flatten_grads(grads)
    if not np.isfinite(flat).all():
        i = int(np.flatnonzero(~np.isfinite(flat))[0])
        raise NumericalError("non-finite gradient", location=net.locate_param(i))
    return value + lam * pen_value, flat, {"mse": value, "penalty": pen_value}


# -- per-layer derivative structure ----------------------------------------

def _layer_index(net, l):
    if not 0 <= l < net.depth:
        raise IndexError(f"layer index {l} out of range for depth {net.depth}")


def layer_jacobian(net, trace, l):
    """(N, n_out, n_in) Jacobian of layer ``l`` at the traced inputs."""
    _layer_index(net, l)
    return trace.layers[l].dphi


def layer_hessian_diag(net, trace, l):
    """(N, n_out, n_in) array of phi''_{cb}(z_b): the only nonzero layer-Hessian entries."""
    _layer_index(net, l)
    return trace.layers[l].d2phi


def jacobian_products(net, trace):
    """Downstream products D_l (N, n_l, n_0) and upstream products U_l (N, n_L, n_{l+1}).

    ``D[l]`` maps input perturbations to the input of layer ``l``;
    ``U[l]`` maps perturbations of layer ``l``'s output to the network output.
    """
    N = trace.z[0].shape[0]
    L = net.depth
    D = [np.broadcast_to(np.eye(net.widths[0]), (N, net.widths[0], net.widths[0]))]
    for l in range(L - 1):
        D.append(np.einsum("ncb,nbi->nci", trace.layers[l].dphi, D[l]))
    U = [None] * L
    U[L - 1] = np.broadcast_to(np.eye(net.widths[-1]), (N, net.widths[-1], net.widths[-1]))
    for l in range(L - 1, 0, -1):
        U[l - 1] = np.einsum("nac,ncb->nab", U[l], trace.layers[l].dphi)
    return U, D


# -- grid range calibration --------------------------------------------------

def calibrate_ranges(net, x, pad=0.1, n_fit=512, ridge=1e-10):
    """Reset each edge's grid range to its observed input range padded by ``pad``.

    Spline coefficients are re-projected by least squares so each edge keeps
    (approximately) its current shape on the new range.
    """
    _, trace = forward(net, x, derivs=False)
    for l, layer in enumerate(net.layers):
        z = trace.z[l]
        zmin, zmax = z.min(axis=0), z.max(axis=0)
        for b in range(layer.n_in):
            span = zmax[b] - zmin[b]
            if not span > 0:
                continue
            new_lo, new_hi = zmin[b] - pad * span, zmax[b] + pad * span
            new_grid = GridSpec(float(new_lo), float(new_hi), layer.intervals)
            pts = np.linspace(new_lo, new_hi, n_fit)
            A = eval_basis(new_grid, layer.kind, pts)
            AtA = A.T @ A + ridge * np.eye(A.shape[1])
            for c in range(layer.n_out):
                old = eval_basis(layer.grid(c, b), layer.kind, pts) @ layer.coeffs[c, b]
                layer.coeffs[c, b] = np.linalg.solve(AtA, A.T @ old)
                layer.lo[c, b], layer.hi[c, b] = new_lo, new_hi
    return net
