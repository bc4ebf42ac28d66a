import numpy as np
import pytest
from hypothesis import settings

from curvkan.basis import GridSpec
from curvkan.network import EdgeActivation, KanLayer, KanNetwork, forward, init_network

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def random_net(widths, grid_size=5, seed=0, kind="bspline", domain=(-1.0, 1.0), coeff_std=0.3):
    rng = np.random.default_rng(seed + 1000)
    net = init_network(widths, grid_size, kind, input_domain=[domain] * widths[0], seed=seed,
                       coeff_std=coeff_std, grid_scaled=False)
    for layer in net.layers:
        layer.w_b[:] = rng.uniform(0.5, 1.5, layer.w_b.shape)
        if kind == "bspline":
            layer.w_s[:] = rng.uniform(0.5, 1.5, layer.w_s.shape)
    return net


def single_edge_net(coeffs, w_b=1.0, w_s=1.0, lo=-1.0, hi=1.0, kind="bspline", intervals=None):
    coeffs = np.asarray(coeffs, dtype=float)
    if intervals is None:
        intervals = len(coeffs) - 3 if kind == "bspline" else len(coeffs)
    layer = KanLayer(coeffs.reshape(1, 1, -1), np.full((1, 1), w_b), np.full((1, 1), w_s),
                     np.full((1, 1), lo), np.full((1, 1), hi), intervals, kind)
    return KanNetwork([1, 1], [layer])


def fd_input_hessian(net, x, eps=1e-4):
    """(N, n_L, d, d) central-difference Hessian of the network output."""
    N, d = x.shape
    H = np.zeros((N, net.widths[-1], d, d))
    f = lambda z: forward(net, z, derivs=False)[0]
    for i in range(d):
        for j in range(d):
            ei = np.zeros(d); ei[i] = eps
            ej = np.zeros(d); ej[j] = eps
            H[:, :, i, j] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * eps * eps)
    return H


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number, title, passed, detail=""):
    ACCEPTANCE[number] = (title, bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
