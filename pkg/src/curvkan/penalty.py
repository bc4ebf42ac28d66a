"""Regularization penalties and their analytic gradients.

Every penalty returns a :class:`PenaltyTerms` holding its value, the direct
gradient with respect to each layer's parameters, and (for penalties that
read activations on data) per-edge sensitivities dR/dphi_e(z_n) that
``network.backward`` pushes through the chain rule.
"""

from dataclasses import dataclass
from enum import Enum
import math
import warnings

import numpy as np

from .basis import K_SILU, BasisKind, GridSpec, diff_matrix, gram_matrix
from .errors import ConfigError
from .network import LayerGrad, jacobian_products


class PenaltyKind(str, Enum):
    NONE = "none"
    KAN = "kan"
    FIRST_DIFF = "first_diff"
    CURVATURE = "curvature"
    WEIGHTED_CURVATURE = "weighted_curvature"


@dataclass
class PenaltyConfig:
    kind: PenaltyKind = PenaltyKind.NONE
    lam: float = 0.0
    mu1: float = 1.0
    mu2: float = 2.0
    weight_refresh_epochs: int = 1
    weight_source: str = "epoch"  # "epoch": running mean over the epoch's batches; "full": whole training set

    def __post_init__(self):
        try:
            self.kind = PenaltyKind(self.kind)
        except ValueError:
            raise ConfigError(f"unknown penalty kind {self.kind!r}") from None
        if not self.lam >= 0 or not self.mu1 >= 0 or not self.mu2 >= 0:
            raise ConfigError("penalty strengths must be non-negative")
        if self.weight_refresh_epochs < 1:
            raise ConfigError("weight_refresh_epochs must be >= 1")
        if self.weight_source not in ("epoch", "full"):
            raise ConfigError(f"unknown weight_source {self.weight_source!r}")

    @property
    def active(self):
        return self.kind is not PenaltyKind.NONE and self.lam > 0


@dataclass
class PenaltyTerms:
    value: float
    grads: list              # LayerGrad per layer (direct parameter gradient)
    phi_grads: list = None   # per-layer (N, n_out, n_in) dR/dphi, or None


@dataclass
class EdgeMagnitudes:
    l1: list        # per layer (n_out, n_in): batch-mean |phi_e|
    rho: list       # per layer normalized magnitudes
    entropy: list   # per layer S(rho)


@dataclass
class PathWeights:
    mean: list       # per layer (n_out, n_in) batch-mean path weight
    epoch: int = 0


# -- KAN penalty ------------------------------------------------------------

def edge_magnitudes(trace):
    l1, rho, ent = [], [], []
    for lc in trace.layers:
        m = np.abs(lc.phi).mean(axis=0)
        total = m.sum()
        r = m / total if total > 0 else np.zeros_like(m)
        pos = r > 0
        ent.append(float(-(r[pos] * np.log(r[pos])).sum()))
        l1.append(m)
        rho.append(r)
    return EdgeMagnitudes(l1, rho, ent)


def kan_penalty(net, trace, mu1, mu2):
    """mu1 * sum_e |phi_e|_1 + mu2 * sum_l S(rho_l) on the traced batch."""
    mags = edge_magnitudes(trace)
    value = mu1 * sum(m.sum() for m in mags.l1) + mu2 * sum(mags.entropy)
    phi_grads = []
    for lc, m, r, S in zip(trace.layers, mags.l1, mags.rho, mags.entropy):
        total = m.sum()
        dm = np.full_like(m, mu1)
        if total > 0:
            with np.errstate(divide="ignore"):
                dS = np.where(r > 0, (-np.log(np.where(r > 0, r, 1.0)) - S) / total, 0.0)
            dm = dm + mu2 * dS
        n = lc.phi.shape[0]
        phi_grads.append(np.sign(lc.phi) * dm / n)
    grads = [LayerGrad.zeros_like(layer) for layer in net.layers]
    return PenaltyTerms(float(value), grads, phi_grads)


# -- coefficient-space penalties ---------------------------------------------

def _diff_penalty(net, order, edge_weights=None, with_silu=True):
    value = 0.0
    grads = []
    for l, layer in enumerate(net.layers):
        D = diff_matrix(order, layer.n_basis)
        c = layer.coeffs
        v = layer.w_s[..., None] * c                 # w_s folded inside the norm
        Dv = v @ D.T
        per_edge = np.einsum("cbi,cbi->cb", Dv, Dv)
        g_v = 2.0 * (Dv @ D)
        g_c = layer.w_s[..., None] * g_v
        g_ws = np.einsum("cbi,cbi->cb", c, g_v)
        g_wb = np.zeros_like(layer.w_b)
        if with_silu:
            per_edge = per_edge + K_SILU * layer.w_b ** 2
            g_wb = 2.0 * K_SILU * layer.w_b
        w = np.ones_like(layer.w_b) if edge_weights is None else edge_weights[l]
        value += float((w * per_edge).sum())
        grads.append(LayerGrad(w[..., None] * g_c, w * g_wb, w * g_ws))
    return value, grads


def _rbf_gram_unit(intervals):
    # Gram for unit spacing; scales as h^-3.
    return gram_matrix(GridSpec(0.0, float(intervals - 1), intervals), BasisKind.RBF)


def rbf_curvature_penalty(net, edge_weights=None):
    """sum_e c_e^T M_e c_e + K_silu * w_b^2 with the closed-form RBF Gram (cross term dropped)."""
    value = 0.0
    grads = []
    for l, layer in enumerate(net.layers):
        M1 = _rbf_gram_unit(layer.intervals)
        scale = layer.spacing ** -3.0
        c = layer.coeffs
        cMc = np.einsum("cbi,ij,cbj->cb", c, M1, c) * scale
        w = np.ones_like(layer.w_b) if edge_weights is None else edge_weights[l]
        value += float((w * (cMc + K_SILU * layer.w_b ** 2)).sum())
        g_c = 2.0 * (w * scale)[..., None] * (c @ M1)
        grads.append(LayerGrad(g_c, 2.0 * K_SILU * w * layer.w_b, np.zeros_like(layer.w_s)))
    return PenaltyTerms(value, grads)


def curvature_penalty(net):
    """sum_e ||D2 (w_s c_e)||^2 + K_silu w_b^2; data-free."""
    if net.kind is BasisKind.RBF:
        return rbf_curvature_penalty(net)
    value, grads = _diff_penalty(net, 2)
    return PenaltyTerms(value, grads)


def first_diff_penalty(net):
    """sum_e ||D1 (w_s c_e)||^2; null space is constants."""
    value, grads = _diff_penalty(net, 1, with_silu=False)
    return PenaltyTerms(value, grads)


# -- path weights and the weighted penalty -------------------------------------

def path_weights_per_sample(net, trace):
    """Per-layer (N, n_out, n_in) arrays of ||D_{l,b,:}||^4 ||U_{l,:,c}||^2."""
    U, D = jacobian_products(net, trace)
    out = []
    for l in range(net.depth):
        down = (D[l] ** 2).sum(axis=2)          # (N, n_in)
        up = (U[l] ** 2).sum(axis=1)            # (N, n_out)
        out.append(up[:, :, None] * (down ** 2)[:, None, :])
    return out


def compute_path_weights(net, trace, epoch=0):
    return PathWeights([w.mean(axis=0) for w in path_weights_per_sample(net, trace)], epoch)


def weighted_curvature_penalty(net, weights, epoch=None, refresh_epochs=None):
    """sum_e wbar_e (||D2(w_s c_e)||^2 + K_silu w_b^2); weights are held constant."""
    if epoch is not None and refresh_epochs is not None and epoch - weights.epoch > refresh_epochs:
        warnings.warn(
            f"path weights from epoch {weights.epoch} are stale at epoch {epoch}",
            RuntimeWarning, stacklevel=2,
        )
    if net.kind is BasisKind.RBF:
        return rbf_curvature_penalty(net, weights.mean)
    value, grads = _diff_penalty(net, 2, edge_weights=weights.mean)
    return PenaltyTerms(value, grads)


def penalty_terms(net, trace, cfg, weights=None, epoch=None):
    kind = cfg.kind
    if kind is PenaltyKind.NONE:
        return PenaltyTerms(0.0, [LayerGrad.zeros_like(layer) for layer in net.layers])
    if kind is PenaltyKind.KAN:
        return kan_penalty(net, trace, cfg.mu1, cfg.mu2)
    if kind is PenaltyKind.FIRST_DIFF:
        return first_diff_penalty(net)
    if kind is PenaltyKind.CURVATURE:
        return curvature_penalty(net)
    if weights is None:
        if trace is None:
            raise ConfigError("weighted curvature penalty needs path weights or a trace")
        weights = compute_path_weights(net, trace)
    return weighted_curvature_penalty(net, weights, epoch, cfg.weight_refresh_epochs)


def entropy_bound(n_out, n_in):
    return math.log(n_out * n_in)
