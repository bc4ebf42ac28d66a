"""Adam and L-BFGS training loops.

Adam runs minibatch epochs with a penalty-free warmup; L-BFGS runs full-batch
outer steps, each made of up to ``max_inner_iter`` quasi-Newton iterations
with a strong-Wolfe line search.
"""

from dataclasses import dataclass, field, asdict
import csv
import logging
import math
import time

import numpy as np

from .errors import ConfigError, DivergenceError, NumericalError
from .network import calibrate_ranges, forward, loss_gradient
from .penalty import PenaltyKind, compute_path_weights, path_weights_per_sample, penalty_terms, PathWeights

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    epochs: int = 3000
    warmup_epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    history_size: int = 100
    max_inner_iter: int = 20
    tolerance_grad: float = 1e-9
    tolerance_change: float = 1e-12
    seed: int = 0
    calibrate: bool = True
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.optimizer not in ("adam", "lbfgs"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.epochs >= self.warmup_epochs >= 0:
            raise ConfigError("need epochs >= warmup_epochs >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")

    @classmethod
    def lbfgs(cls, **kw):
        base = dict(optimizer="lbfgs", epochs=500, warmup_epochs=0, learning_rate=1.0, calibrate=False)
        base.update(kw)
        return cls(**base)


@dataclass
class TrainLog:
    epoch: list = field(default_factory=list)
    train_rmse: list = field(default_factory=list)
    test_rmse: list = field(default_factory=list)
    penalty_value: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    aborted: bool = False
    abort_epoch: int = None
    events: list = field(default_factory=list)

    def __len__(self):
        return len(self.epoch)

    def append(self, epoch, train, test, pen, lam, wall):
        self.epoch.append(epoch)
        self.train_rmse.append(train)
        self.test_rmse.append(test)
        self.penalty_value.append(pen)
        self.lam.append(lam)
        self.wall_clock.append(wall)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_rmse", "test_rmse", "penalty_value", "lam"])
            for row in zip(self.epoch, self.train_rmse, self.test_rmse, self.penalty_value, self.lam):
                w.writerow([row[0]] + [f"{v:.17g}" for v in row[1:]])

    @classmethod
    def from_csv(cls, path):
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.append(int(row["epoch"]), float(row["train_rmse"]), float(row["test_rmse"]),
                           float(row["penalty_value"]), float(row["lam"]), 0.0)
        return out


def evaluate(net, x, y):
    """(rmse, r2); r2 is None when the targets are constant."""
    from .network import predict

    y = np.asarray(y, dtype=float).reshape(-1, 1)
    pred = predict(net, x).reshape(-1, 1)
    resid = pred - y
    rmse = math.sqrt(float(np.mean(resid ** 2)))
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        return rmse, None
    return rmse, 1.0 - float((resid ** 2).sum()) / ss_tot


# -- Adam -------------------------------------------------------------------

class Adam:
    def __init__(self, n, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.n = n
        self.reset()

    def reset(self):
        self.m = np.zeros(self.n)
        self.v = np.zeros(self.n)
        self.t = 0

    def step(self, params, grad):
        """Return updated parameters (the input array is not modified)."""
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- L-BFGS -----------------------------------------------------------------

@dataclass
class LineSearchResult:
    t: float
    f: float
    g: np.ndarray
    gtd: float
    evals: int
    ok: bool


def _cubic_min(x1, f1, g1, x2, f2, g2, lo, hi):
    d1 = g1 + g2 - 3 * (f1 - f2) / (x1 - x2)
    sq = d1 * d1 - g1 * g2
    if sq >= 0:
        d2 = math.sqrt(sq) * (1.0 if x2 >= x1 else -1.0)
        t = x2 - (x2 - x1) * (g2 + d2 - d1) / (g2 - g1 + 2 * d2)
        if math.isfinite(t):
            return min(max(t, lo), hi)
    return 0.5 * (lo + hi)


def strong_wolfe(fun, x, d, f0, g0, t, c1=1e-4, c2=0.9, max_evals=25, tolerance_change=1e-12):
    """Strong-Wolfe line search along ``d`` (bracketing + cubic zoom)."""
    gtd0 = float(g0 @ d)
    evals = 0

    def phi(a):
        nonlocal evals
        evals += 1
        f, g = fun(x + a * d)
        return float(f), g, float(g @ d)

    t_prev, f_prev, g_prev, gtd_prev = 0.0, f0, g0, gtd0
    f, g, gtd = phi(t)
    bracket = None
    while evals < max_evals:
        if not math.isfinite(f) or f > f0 + c1 * t * gtd0 or (evals > 1 and f >= f_prev):
            bracket = [(t_prev, f_prev, g_prev, gtd_prev), (t, f, g, gtd)]
            break
        if abs(gtd) <= -c2 * gtd0:
            return LineSearchResult(t, f, g, gtd, evals, True)
        if gtd >= 0:
            bracket = [(t, f, g, gtd), (t_prev, f_prev, g_prev, gtd_prev)]
            break
        lo_step, hi_step = t + 0.01 * (t - t_prev), t * 10
        t_new = _cubic_min(t_prev, f_prev, gtd_prev, t, f, gtd, lo_step, hi_step)
        t_prev, f_prev, g_prev, gtd_prev = t, f, g, gtd
        t = t_new
        f, g, gtd = phi(t)
    if bracket is None:
        return LineSearchResult(t, f, g, gtd, evals, False)

    # zoom: bracket[0] is the low end (satisfies sufficient decrease, lower f)
    lo, hi = bracket
    while evals < max_evals:
        if abs(hi[0] - lo[0]) * float(np.abs(d).max()) < tolerance_change:
            break
        a, b = sorted((lo[0], hi[0]))
        width = b - a
        if math.isfinite(hi[1]):
            t = _cubic_min(lo[0], lo[1], lo[3], hi[0], hi[1], hi[3], a + 0.1 * width, b - 0.1 * width)
        else:
            t = 0.5 * (a + b)
        f, g, gtd = phi(t)
        if not math.isfinite(f) or f > f0 + c1 * t * gtd0 or f >= lo[1]:
            hi = (t, f, g, gtd)
        else:
            if abs(gtd) <= -c2 * gtd0:
                return LineSearchResult(t, f, g, gtd, evals, True)
            if gtd * (hi[0] - lo[0]) >= 0:
                hi = lo
            lo = (t, f, g, gtd)
    return LineSearchResult(lo[0], lo[1], lo[2], lo[3], evals, False)


@dataclass
class StepRecord:
    t: float
    f0: float
    gtd0: float
    f: float
    gtd: float
    fallback: bool = False


class LBFGS:
    """Limited-memory BFGS over a flat parameter vector.

    ``fun(x)`` returns ``(f, grad)``.  Each call to :meth:`step` performs up to
    ``max_iter`` iterations; curvature pairs persist across calls.
    """

    def __init__(self, fun, x0, lr=1.0, max_iter=20, history_size=100,
                 tolerance_grad=1e-9, tolerance_change=1e-12, c1=1e-4, c2=0.9, max_ls=25):
        self.fun = fun
        self.x = np.array(x0, dtype=float)
        self.lr = lr
        self.max_iter = max_iter
        self.history_size = history_size
        self.tolerance_grad = tolerance_grad
        self.tolerance_change = tolerance_change
        self.c1, self.c2, self.max_ls = c1, c2, max_ls
        self.S, self.Y = [], []
        self.n_iter = 0
        self.records = []
        self.events = []
        self.f = self.g = None

    def reset_objective(self, fun):
        """Swap the objective (e.g. after refreshing data-dependent weights)."""
        self.fun = fun
        self.f = self.g = None

    def direction(self, g):
        q = -g.copy()
        alphas = []
        for s, y in zip(reversed(self.S), reversed(self.Y)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            q -= a * y
            alphas.append((a, rho))
        if self.S:
            s, y = self.S[-1], self.Y[-1]
            q *= (s @ y) / (y @ y)
        for (s, y), (a, rho) in zip(zip(self.S, self.Y), reversed(alphas)):
            beta = rho * (y @ q)
            q += s * (a - beta)
        return q

    def step(self):
        if self.f is None:
            self.f, self.g = self.fun(self.x)
        f, g = self.f, self.g
        if np.abs(g).max() <= self.tolerance_grad:
            return f
        for _ in range(self.max_iter):
            d = self.direction(g)
            gtd = float(g @ d)
            fallback = False
            if gtd >= 0:
                # history no longer yields a descent direction
                self.events.append(f"non-descent direction at iteration {self.n_iter}; history reset")
                d, gtd, fallback = -g, float(-(g @ g)), True
                self.S.clear(), self.Y.clear()
            elif gtd > -self.tolerance_change:
                break
            t = min(1.0, 1.0 / np.abs(g).sum()) * self.lr if self.n_iter == 0 or fallback else self.lr
            ls = strong_wolfe(self.fun, self.x, d, f, g, t, self.c1, self.c2, self.max_ls, self.tolerance_change)
            if not ls.ok and not fallback:
                self.events.append(f"line search failed at iteration {self.n_iter}; steepest descent fallback")
                log.info(self.events[-1])
                d, gtd, fallback = -g, float(-(g @ g)), True
                t = min(1.0, 1.0 / np.abs(g).sum()) * self.lr
                ls = strong_wolfe(self.fun, self.x, d, f, g, t, self.c1, self.c2, self.max_ls, self.tolerance_change)
            if not ls.ok:
                self.events.append(f"line search failed at iteration {self.n_iter}; no step taken")
                log.info(self.events[-1])
                break
            s = ls.t * d
            y = ls.g - g
            self.x = self.x + s
            self.n_iter += 1
            self.records.append(StepRecord(ls.t, f, gtd, ls.f, ls.gtd, fallback))
            if y @ s > 1e-10:
                self.S.append(s)
                self.Y.append(y)
                if len(self.S) > self.history_size:
                    self.S.pop(0), self.Y.pop(0)
            f_old = f
            f, g = ls.f, ls.g
            if np.abs(g).max() <= self.tolerance_grad:
                break
            if np.abs(s).max() <= self.tolerance_change:
                break
            if abs(f - f_old) < self.tolerance_change:
                break
        self.f, self.g = f, g
        return f


# -- training loops ---------------------------------------------------------------

def _rmse(pred, y):
    return math.sqrt(float(np.mean((pred - y) ** 2)))


def _epoch_metrics(net, train, test, penalty, active, weights):
    pred, trace = forward(net, train.inputs, derivs=False)
    tr = _rmse(pred, train.targets)
    te = _rmse(forward(net, test.inputs, derivs=False)[0], test.targets) if test is not None else float("nan")
    pen = 0.0
    if active:
        pen = penalty_terms(net, trace, penalty, weights).value
    return tr, te, pen


def _check(obj, epoch, threshold):
    if not math.isfinite(obj) or obj > threshold:
        raise DivergenceError(epoch, obj)


def train_adam(net, train, test, penalty, cfg):
    if cfg.optimizer != "adam":
        raise ConfigError("train_adam needs optimizer='adam'")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.n_params, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.eps)
    params = net.get_params()
    log_ = TrainLog()
    weighted = penalty.kind is PenaltyKind.WEIGHTED_CURVATURE
    weights, acc, acc_n = None, None, 0
    n = len(train)
    start = time.perf_counter()
    epoch = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            active = penalty.active and epoch > cfg.warmup_epochs
            if active and weighted:
                since = epoch - cfg.warmup_epochs - 1
                if weights is None or since % penalty.weight_refresh_epochs == 0:
                    if penalty.weight_source == "epoch" and acc is not None:
                        weights = PathWeights([a / acc_n for a in acc], epoch)
                    else:
                        _, tr_full = forward(net, train.inputs)
                        weights = compute_path_weights(net, tr_full, epoch)
                acc, acc_n = None, 0
            perm = rng.permutation(n)
            for i in range(0, n, cfg.batch_size):
                idx = perm[i:i + cfg.batch_size]
                xb, yb = train.inputs[idx], train.targets[idx]
                _, trace = forward(net, xb)
                if active and weighted and penalty.weight_source == "epoch":
                    pw = path_weights_per_sample(net, trace)
                    sums = [w.sum(axis=0) for w in pw]
                    acc = sums if acc is None else [a + s for a, s in zip(acc, sums)]
                    acc_n += len(idx)
                obj, grad, _ = loss_gradient(net, xb, yb, penalty if active else None, weights, trace=trace)
                _check(obj, epoch, cfg.divergence_threshold)
                params = opt.step(params, grad)
                net.set_params(params)
            if cfg.calibrate and epoch == cfg.warmup_epochs and cfg.warmup_epochs > 0:
                calibrate_ranges(net, train.inputs)
                params = net.get_params()
                opt.reset()
                log_.events.append(f"grid ranges calibrated after epoch {epoch}")
            tr, te, pen = _epoch_metrics(net, train, test, penalty, active, weights)
            _check(tr, epoch, cfg.divergence_threshold)
            log_.append(epoch, tr, te, pen, penalty.lam if active else 0.0, time.perf_counter() - start)
    except (DivergenceError, NumericalError) as exc:
        log_.aborted = True
        log_.abort_epoch = epoch
        log_.events.append(str(exc))
        log.warning("run aborted: %s", exc)
    return log_


def train_lbfgs(net, train, test, penalty, cfg):
    if cfg.optimizer != "lbfgs":
        raise ConfigError("train_lbfgs needs optimizer='lbfgs'")
    weighted = penalty.kind is PenaltyKind.WEIGHTED_CURVATURE and penalty.active
    state = {"weights": None}
    X, y = train.inputs, train.targets

    def fun(p):
        net.set_params(p)
        try:
            obj, grad, _ = loss_gradient(net, X, y, penalty if penalty.active else None, state["weights"])
        except NumericalError:
            return math.inf, np.zeros_like(p)
        return obj, grad

    opt = LBFGS(fun, net.get_params(), cfg.learning_rate, cfg.max_inner_iter, cfg.history_size,
                cfg.tolerance_grad, cfg.tolerance_change)
    log_ = TrainLog()
    start = time.perf_counter()
    step = 0
    try:
        for step in range(1, cfg.epochs + 1):
            if weighted and (step - 1) % penalty.weight_refresh_epochs == 0:
                net.set_params(opt.x)
                _, tr_full = forward(net, X)
                state["weights"] = compute_path_weights(net, tr_full, step)
                opt.reset_objective(fun)
            obj = opt.step()
            _check(obj, step, cfg.divergence_threshold)
            net.set_params(opt.x)
            tr, te, pen = _epoch_metrics(net, train, test, penalty, penalty.active, state["weights"])
            log_.append(step, tr, te, pen, penalty.lam, time.perf_counter() - start)
    except (DivergenceError, NumericalError) as exc:
        log_.aborted = True
        log_.abort_epoch = step
        log_.events.append(str(exc))
    net.set_params(opt.x)
    log_.events.extend(opt.events)
    return log_


def train(net, train_set, test_set, penalty, cfg):
    if cfg.optimizer == "adam":
        return train_adam(net, train_set, test_set, penalty, cfg)
    return train_lbfgs(net, train_set, test_set, penalty, cfg)


def config_dict(cfg):
    return asdict(cfg)
