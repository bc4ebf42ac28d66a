"""Experiment configs, λ×seed sweeps, Feynman tables and on-disk reports.

A preset file is JSON::

    {"name": "fig2", "mode": "sweep",
     "base": {"target": ..., "widths": [2, 5, 1], "grid_size": 10, ...},
     "conditions": [{"label": "none", "penalty": {"kind": "none"}, "lams": [0]},
                    {"label": "curvature", "penalty": {"kind": "curvature"}, "lams": [...]}]}

Each condition is merged over ``base`` into one :class:`ExperimentConfig`.
``mode`` is ``"sweep"`` or ``"feynman"``; Feynman presets list ``targets``
and may leave ``widths`` unset to get ``[d, d, 1]``.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, fields
import copy
import csv
import json
import math
import os
import time

import numpy as np

from .basis import BasisKind, eval_basis, silu, silu_d1, silu_d2
from .curvature import total_edge_curvature, verify_bound
from .errors import ConfigError
from .network import KanNetwork, forward, init_network
from .optim import TrainConfig, TrainLog, evaluate, train
from .penalty import PenaltyConfig, PenaltyKind
from .targets import get_target, train_test

OUTPUT_ROOT_ENV = "CURVKAN_OUTPUT_ROOT"
ACTIVATION_POINTS = 256


def lower_median(values):
    """Median; for even counts the lower of the two middle values."""
    v = sorted(values)
    if not v:
        return math.nan
    return v[(len(v) - 1) // 2]


def geometric_mean(values):
    v = np.asarray(values, dtype=float)
    if len(v) == 0 or not np.all(np.isfinite(v)) or np.any(v <= 0):
        return math.inf
    return float(np.exp(np.log(v).mean()))


# -- configuration -----------------------------------------------------------------

@dataclass
class ExperimentConfig:
    name: str
    target: str
    widths: list
    grid_size: int
    lams: list
    seeds: list
    basis: str = "bspline"
    label: str = ""
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = ""
    n_train: int = 1024
    n_test: int = 1024
    selection: str = "grid"      # "grid": every λ×seed; "scout": first seed over λ, fill the rest at the best λ
    bound_check: bool = False
    checkpoints: bool = True

    def __post_init__(self):
        if not self.lams:
            raise ConfigError(f"{self.name}: empty lambda list")
        if not self.seeds:
            raise ConfigError(f"{self.name}: empty seed list")
        spec = get_target(self.target)
        if self.widths is None:
            self.widths = [spec.arity, spec.arity, 1]
        self.widths = [int(w) for w in self.widths]
        if self.widths[0] != spec.arity:
            raise ConfigError(f"{self.name}: widths[0]={self.widths[0]} but {self.target} takes {spec.arity} inputs")
        if self.widths[-1] != 1:
            raise ConfigError(f"{self.name}: scalar targets need widths[-1] = 1")
        try:
            BasisKind(self.basis)
        except ValueError:
            raise ConfigError(f"unknown basis {self.basis!r}") from None
        if self.selection not in ("grid", "scout"):
            raise ConfigError(f"unknown selection {self.selection!r}")
        if any(lam < 0 for lam in self.lams):
            raise ConfigError("lambda values must be non-negative")
        if isinstance(self.penalty, dict):
            self.penalty = PenaltyConfig(**self.penalty)
        if isinstance(self.train, dict):
            self.train = _train_config(self.train)
        if not self.label:
            self.label = self.penalty.kind.value

    def penalty_at(self, lam):
        p = copy.copy(self.penalty)
        p.lam = float(lam)
        return p

    def to_dict(self):
        d = asdict(self)
        d["penalty"]["kind"] = self.penalty.kind.value
        return d


def _train_config(d):
    d = dict(d)
    if d.get("optimizer") == "lbfgs":
        return TrainConfig.lbfgs(**{k: v for k, v in d.items() if k != "optimizer"})
    return TrainConfig(**d)


_CONFIG_KEYS = {f.name for f in fields(ExperimentConfig)}


def config_from_dict(d):
    unknown = set(d) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return ExperimentConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class Preset:
    name: str
    mode: str
    conditions: list          # ExperimentConfig per condition (sweep) or per (condition, target) (feynman)
    baseline: str = ""        # label of the unpenalized reference condition, if any
    targets: list = field(default_factory=list)


def load_preset(source):
    """Parse a preset (path, JSON string or dict) into validated configs."""
    if isinstance(source, dict):
        raw = source
    else:
        text = source
        if os.path.exists(str(source)):
            with open(source) as fh:
                text = fh.read()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
    if "conditions" not in raw:
        cfg = config_from_dict(raw)
        return Preset(cfg.name, "sweep", [cfg])
    name = raw.get("name")
    mode = raw.get("mode", "sweep")
    if not name:
        raise ConfigError("preset needs a name")
    if mode not in ("sweep", "feynman"):
        raise ConfigError(f"unknown mode {mode!r}")
    base = dict(raw.get("base", {}))
    base.setdefault("name", name)
    targets = list(raw.get("targets", []))
    if mode == "feynman" and not targets:
        raise ConfigError("feynman preset needs a target list")
    out = []
    for cond in raw["conditions"]:
        merged = {**base, **cond}
        for key in ("penalty", "train"):
            if key in base and key in cond:
                merged[key] = {**base[key], **cond[key]}
        if mode == "feynman":
            for t in targets:
                out.append(config_from_dict({**merged, "target": t, "widths": merged.get("widths")}))
        else:
            out.append(config_from_dict(merged))
    return Preset(name, mode, out, raw.get("baseline", ""), targets)


def output_dir(cfg_or_name, override=None):
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    name = cfg_or_name if isinstance(cfg_or_name, str) else (cfg_or_name.output_dir or cfg_or_name.name)
    return override or os.path.join(root, name)


# -- records -------------------------------------------------------------------------

@dataclass
class RunRecord:
    experiment: str
    label: str
    target: str
    widths: list
    grid_size: int
    basis: str
    penalty: str
    lam: float
    seed: int
    optimizer: str
    train_rmse: float
    test_rmse: float
    r2: float
    total_curvature: float
    per_edge_curvature: list
    wall_clock: float
    aborted: bool
    abort_epoch: int = None
    bound: dict = None
    log: TrainLog = field(default=None, repr=False, compare=False)
    network: dict = field(default=None, repr=False, compare=False)
    operating_range: list = field(default=None, repr=False, compare=False)

    @property
    def run_id(self):
        return f"{self.label}_{self.target}_lam{self.lam:g}_seed{self.seed}"


CSV_FIELDS = ["experiment", "label", "target", "widths", "grid_size", "basis", "penalty", "lam", "seed",
              "optimizer", "train_rmse", "test_rmse", "r2", "total_curvature", "per_edge_curvature",
              "wall_clock", "aborted", "abort_epoch", "bound"]
_FLOATS = {"lam", "train_rmse", "test_rmse", "r2", "total_curvature", "wall_clock"}
_INTS = {"grid_size", "seed", "abort_epoch"}
_JSON = {"widths", "per_edge_curvature", "bound"}


def _fmt(v):
    return "" if v is None else f"{v:.17g}"


def record_row(rec):
    row = {}
    for k in CSV_FIELDS:
        v = getattr(rec, k)
        if k in _FLOATS:
            row[k] = _fmt(v)
        elif k in _JSON:
            row[k] = "" if v is None else json.dumps(v)
        elif k == "aborted":
            row[k] = "1" if v else "0"
        else:
            row[k] = "" if v is None else str(v)
    return row


def record_from_row(row):
    kw = {}
    for k in CSV_FIELDS:
        v = row[k]
        if k in _FLOATS:
            kw[k] = None if v == "" else float(v)
        elif k in _INTS:
            kw[k] = None if v == "" else int(v)
        elif k in _JSON:
            kw[k] = None if v == "" else json.loads(v)
        elif k == "aborted":
            kw[k] = v == "1"
        else:
            kw[k] = v
    return RunRecord(**kw)


def write_runs_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(record_row(r))


def read_runs_csv(path):
    with open(path, newline="") as fh:
        return [record_from_row(row) for row in csv.DictReader(fh)]


# -- running ---------------------------------------------------------------------------

def run_single(cfg, lam=None, seed=None):
    """Train one network for one (λ, seed) cell."""
    lam = cfg.lams[0] if lam is None else lam
    seed = cfg.seeds[0] if seed is None else seed
    spec = get_target(cfg.target)
    tr, te = train_test(spec, seed, cfg.n_train, cfg.n_test)
    net = init_network(cfg.widths, cfg.grid_size, cfg.basis, input_domain=spec.domain, seed=seed)
    tcfg = copy.copy(cfg.train)
    tcfg.seed = seed
    penalty = cfg.penalty_at(lam)
    start = time.perf_counter()
    log = train(net, tr, te, penalty, tcfg)
    wall = time.perf_counter() - start
    curv = total_edge_curvature(net)
    if log.aborted or not np.isfinite(net.get_params()).all():
        train_rmse = test_rmse = math.inf
        r2 = None
    else:
        train_rmse, _ = evaluate(net, tr.inputs, tr.targets)
        test_rmse, r2 = evaluate(net, te.inputs, te.targets)
    bound = None
    if cfg.bound_check and net.kind is BasisKind.BSPLINE and not log.aborted:
        bound = verify_bound(net, tr.inputs).to_dict()
        bound = {k: bound[k] for k in ("ratio", "k_lambda", "penalty", "composition", "kappa",
                                       "density_bound", "assumptions_hold", "chain_monotone")}
    _, trace = forward(net, tr.inputs, derivs=False)
    op_range = [[(float(lc.phi[:, c, b].min()), float(lc.phi[:, c, b].max()),
                  float(z[:, b].min()), float(z[:, b].max()))
                 for c in range(lc.phi.shape[1]) for b in range(lc.phi.shape[2])]
                for lc, z in zip(trace.layers, trace.z)]
    return RunRecord(
        experiment=cfg.name, label=cfg.label, target=cfg.target, widths=list(cfg.widths),
        grid_size=cfg.grid_size, basis=cfg.basis, penalty=penalty.kind.value, lam=float(lam),
        seed=int(seed), optimizer=tcfg.optimizer, train_rmse=train_rmse, test_rmse=test_rmse,
        r2=r2, total_curvature=curv.total, per_edge_curvature=[a.tolist() for a in curv.per_edge],
        wall_clock=wall, aborted=log.aborted, abort_epoch=log.abort_epoch, bound=bound,
        log=log, network=net.to_dict(), operating_range=op_range,
    )


def _run_cell(args):
    cfg, lam, seed = args
    return run_single(cfg, lam, seed)


def _map(tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, tasks))


def _score(rec):
    return math.inf if rec.aborted else rec.test_rmse


def run_sweep(cfg, jobs=1):
    """All records for one condition; "scout" selection sweeps λ on the first seed, then fills."""
    if cfg.selection == "grid":
        return _map([(cfg, lam, s) for lam in cfg.lams for s in cfg.seeds], jobs)
    scout = _map([(cfg, lam, cfg.seeds[0]) for lam in cfg.lams], jobs)
    best = min(scout, key=_score).lam
    fill = _map([(cfg, best, s) for s in cfg.seeds[1:]], jobs)
    return scout + fill


def summarize_condition(records):
    """Per-λ medians for one condition, sorted by λ."""
    by_lam = {}
    for r in records:
        by_lam.setdefault(r.lam, []).append(r)
    rows = []
    for lam in sorted(by_lam):
        rs = by_lam[lam]
        ok = [r for r in rs if not r.aborted]
        rows.append({
            "lam": lam,
            "n_seeds": len(rs),
            "n_aborted": len(rs) - len(ok),
            "median_test_rmse": lower_median([r.test_rmse for r in ok]) if ok else math.inf,
            "median_train_rmse": lower_median([r.train_rmse for r in ok]) if ok else math.inf,
            "median_curvature": lower_median([r.total_curvature for r in ok]) if ok else math.inf,
        })
    return rows


def best_lambda(rows, min_seeds=1):
    """λ with the lowest median test RMSE among rows with at least ``min_seeds`` runs."""
    cand = [r for r in rows if r["n_seeds"] >= min_seeds] or rows
    return min(cand, key=lambda r: (r["median_test_rmse"], r["lam"]))["lam"]


def green_window(rows, baseline_rmse, baseline_curvature=None, factor=2.0):
    """λ values whose median test RMSE is within ``factor`` of the baseline, with curvature ratios."""
    out = []
    for r in rows:
        if r["median_test_rmse"] <= factor * baseline_rmse:
            ratio = None
            if baseline_curvature:
                ratio = r["median_curvature"] / baseline_curvature
            out.append({"lam": r["lam"], "rmse_ratio": r["median_test_rmse"] / baseline_rmse,
                        "curvature_ratio": ratio})
    return out


def sweep_summary(preset, records):
    """Aggregate a sweep preset: per-condition λ tables, best λ, green window vs the baseline."""
    groups = {}
    for r in records:
        groups.setdefault(r.label, []).append(r)
    summary = {"name": preset.name, "mode": "sweep", "conditions": {}}
    for label, rs in groups.items():
        rows = summarize_condition(rs)
        summary["conditions"][label] = {"per_lambda": rows, "best_lambda": best_lambda(rows, max(r["n_seeds"] for r in rows))}
    if preset.baseline and preset.baseline in groups:
        base_rows = summary["conditions"][preset.baseline]["per_lambda"]
        b = base_rows[0]
        summary["baseline"] = {"label": preset.baseline, "median_test_rmse": b["median_test_rmse"],
                               "median_curvature": b["median_curvature"]}
        for label, cond in summary["conditions"].items():
            if label != preset.baseline:
                cond["green_window"] = green_window(cond["per_lambda"], b["median_test_rmse"], b["median_curvature"])
    return summary


def feynman_table(preset, records):
    """Table rows at each condition's λ*, the λ minimizing the geometric mean of median RMSE across equations."""
    labels = []
    for cfg in preset.conditions:
        if cfg.label not in labels:
            labels.append(cfg.label)
    medians = {}     # (label, lam, target) -> row
    for label in labels:
        for t in preset.targets:
            rs = [r for r in records if r.label == label and r.target == t]
            for row in summarize_condition(rs):
                medians[(label, row["lam"], t)] = row
    lam_star = {}
    geo = {}
    for label in labels:
        lams = sorted({k[1] for k in medians if k[0] == label})
        scores = {lam: geometric_mean([medians[(label, lam, t)]["median_test_rmse"]
                                       for t in preset.targets if (label, lam, t) in medians])
                  for lam in lams}
        geo[label] = scores
        lam_star[label] = min(lams, key=lambda lam: (scores[lam], lam))
    rows = []
    for t in preset.targets:
        spec = get_target(t)
        row = {"equation": t, "formula": spec.formula}
        rm = {lb: medians[(lb, lam_star[lb], t)]["median_test_rmse"] for lb in labels}
        cv = {lb: medians[(lb, lam_star[lb], t)]["median_curvature"] for lb in labels}
        best_r = min(rm.values())
        best_c = min(cv.values())
        for lb in labels:
            row[f"{lb}_rmse"] = rm[lb]
            row[f"{lb}_curvature"] = cv[lb]
            row[f"{lb}_rmse_winner"] = rm[lb] == best_r
            row[f"{lb}_rmse_within_2x"] = rm[lb] != best_r and rm[lb] <= 2 * best_r
            row[f"{lb}_curvature_winner"] = cv[lb] == best_c
        rows.append(row)
    return {"name": preset.name, "mode": "feynman", "lambda_star": lam_star,
            "geometric_mean_rmse": {lb: [{"lam": k, "value": v} for k, v in sorted(s.items())] for lb, s in geo.items()},
            "rows": rows}


def run_preset(preset, jobs=1):
    records = []
    for cfg in preset.conditions:
        records.extend(run_sweep(cfg, jobs))
    return records


def run_feynman(preset, jobs=1):
    records = run_preset(preset, jobs)
    return records, feynman_table(preset, records)


def summarize(preset, records):
    if preset.mode == "feynman":
        return feynman_table(preset, records)
    return sweep_summary(preset, records)


# -- reporting ---------------------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def activation_rows(net, op_range=None, n_points=ACTIVATION_POINTS):
    """Dense (z, phi, phi', phi'') tabulation per edge with its grid and operating ranges."""
    rows = []
    for l, layer in enumerate(net.layers):
        k = 0
        for c in range(layer.n_out):
            for b in range(layer.n_in):
                grid = layer.grid(c, b)
                z = np.linspace(grid.lo, grid.hi, n_points)
                vals = []
                for d, act in enumerate((silu, silu_d1, silu_d2)):
                    B = eval_basis(grid, layer.kind, z, d)
                    vals.append(layer.w_b[c, b] * act(z) + layer.w_s[c, b] * (B @ layer.coeffs[c, b]))
                rng_ = op_range[l][k] if op_range else (math.nan,) * 4
                k += 1
                for i in range(n_points):
                    rows.append([l, c, b, z[i], vals[0][i], vals[1][i], vals[2][i], grid.lo, grid.hi, *rng_])
    return rows


ACTIVATION_HEADER = ["layer", "out", "in", "z", "phi", "dphi", "d2phi", "grid_lo", "grid_hi",
                     "phi_min", "phi_max", "z_min", "z_max"]


def write_activations(net, path, op_range=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ACTIVATION_HEADER)
        for row in activation_rows(net, op_range):
            w.writerow(row[:3] + [f"{v:.17g}" for v in row[3:]])


def report(records, out_dir, summary=None):
    """Write runs.csv, summary.json, curves/ and activations/ (and checkpoints/) under ``out_dir``."""
    if not records:
        raise ConfigError("report needs at least one record")
    os.makedirs(out_dir, exist_ok=True)
    write_runs_csv(records, os.path.join(out_dir, "runs.csv"))
    for r in records:
        if r.log is not None and len(r.log):
            os.makedirs(os.path.join(out_dir, "curves"), exist_ok=True)
            r.log.to_csv(os.path.join(out_dir, "curves", f"{r.run_id}.csv"))
        if r.network is not None:
            net = KanNetwork.from_dict(r.network)
            os.makedirs(os.path.join(out_dir, "activations"), exist_ok=True)
            write_activations(net, os.path.join(out_dir, "activations", f"{r.run_id}.csv"), r.operating_range)
            os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
            net.save(os.path.join(out_dir, "checkpoints", f"{r.run_id}.json"))
    if summary is None:
        summary = {"n_records": len(records)}
    summary = dict(summary)
    summary["records"] = [{k: v for k, v in record_row(r).items() if k != "wall_clock"} for r in records]
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(_clean(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir
