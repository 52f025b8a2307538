"""Experiment configuration, the per-trial pipeline, and resumable sweeps."""
import copy
import csv
import hashlib
import itertools
import json
import logging
import math
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import BenignLeakyError, ConfigurationError, ScaleGuardError
from .limit import build_block_gram, min_norm_direction
from .mixture import MixtureSpec, NoiseLaw, SigmaSpec, generate
from .network import NeuronSplit, TrainConfig, forward, init_network, train
from .regime import check_assumptions
from .risk import error_report, kappa, mc_error_fn
from .rng import derive_seed

log = logging.getLogger(__name__)

MAX_N = 512
MAX_P = 65536

DEFAULTS = {
    "seed": 0,
    "mixture": {"p": 256, "n": 16, "mu_norm_sq": 0.0,
                "sigma_spec": {"kind": "identity"}, "noise_law": {"kind": "gaussian"}},
    "network": {"m": 4, "q_plus": 0.5, "gamma": 0.5},
    "train": {"alpha": "auto", "sigma_init": "auto", "T": 0, "init_scheme": "uniform_sphere_scaled"},
    "sweep": [],
    "trials": 1,
    "mc_samples": 0,
    "R": "trace",
    "outputs": {"csv": "sweep.csv", "json": "summary.json", "journal": "journal.jsonl"},
}

# leaves a sweep axis may address besides keys present in the config itself
OPTIONAL_LEAVES = {"mixture/mu_norm", "mixture/mu_norm_sq", "mixture/mu", "mixture/mu_direction",
                   "mixture/sigma_spec/base", "mixture/sigma_spec/magnitude",
                   "mixture/sigma_spec/direction", "mixture/sigma_spec/values",
                   "mixture/noise_law/r", "mixture/noise_law/base_df", "train/W0"}
MU_KEYS = ("mu", "mu_norm", "mu_norm_sq")

__all__ = [
    "ExperimentConfig",
    "CellResult",
    "load_config",
    "expand_cells",
    "resolve_cell",
    "run_trial",
    "run_cell",
    "run_sweep",
    "cell_row",
    "format_value",
]


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("sigma_spec", "noise_law"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _get(d, path):
    cur = d
    for part in path.split("/"):
        if not isinstance(cur, dict) or part not in cur:
            raise KeyError(path)
        cur = cur[part]
    return cur


def _set(d, path, value):
    parts = path.split("/")
    cur = d
    for part in parts[:-1]:
        cur = cur.setdefault(part, {})
    cur[parts[-1]] = value
    if len(parts) == 2 and parts[0] == "mixture" and parts[1] in MU_KEYS:
        for k in MU_KEYS:
            if k != parts[1]:
                cur.pop(k, None)


@dataclass
class ExperimentConfig:
    raw: dict

    def __post_init__(self):
        raw = self.raw
        if "mixture" in raw and any(k in raw["mixture"] for k in MU_KEYS):
            # an explicit mean replaces the default mu_norm_sq
            base = copy.deepcopy(DEFAULTS)
            for k in MU_KEYS:
                base["mixture"].pop(k, None)
        else:
            base = DEFAULTS
        self.raw = _merge(base, raw)
        if int(self.raw["trials"]) < 1:
            raise ConfigurationError("trials must be >= 1")
        for ax in self.raw["sweep"]:
            if "path" not in ax or "values" not in ax:
                raise ConfigurationError(f"sweep axis needs 'path' and 'values': {ax}")
            if not ax["values"]:
                raise ConfigurationError(f"sweep axis {ax['path']} has no values")
            try:
                _get(self.raw, ax["path"])
            except KeyError:
                if ax["path"] not in OPTIONAL_LEAVES:
                    raise ConfigurationError(f"sweep path {ax['path']!r} does not name a parameter") from None

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def trials(self):
        return int(self.raw["trials"])

    @property
    def sweep(self):
        return self.raw["sweep"]

    @property
    def mc_samples(self):
        return int(self.raw["mc_samples"])

    @property
    def outputs(self):
        return self.raw["outputs"]

    def with_seed(self, seed):
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        return ExperimentConfig(raw)

    def digest(self):
        body = json.dumps({k: v for k, v in self.raw.items() if k != "outputs"}, sort_keys=True)
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    def to_dict(self):
        return copy.deepcopy(self.raw)


def load_config(path):
    with open(path) as fh:
        return ExperimentConfig(json.load(fh))


def expand_cells(config):
    """(index, coords, resolved raw dict) for the Cartesian product of sweep axes."""
    axes = config.sweep
    if not axes:
        yield 0, {}, copy.deepcopy(config.raw)
        return
    for idx, combo in enumerate(itertools.product(*[ax["values"] for ax in axes])):
        raw = copy.deepcopy(config.raw)
        coords = {}
        for ax, v in zip(axes, combo):
            _set(raw, ax["path"], copy.deepcopy(v))
            coords[ax["path"]] = v
        yield idx, coords, raw


@dataclass
class ResolvedCell:
    index: int
    coords: dict
    raw: dict
    master_seed: int

    def mixture_spec(self, seed):
        mx = self.raw["mixture"]
        p, n = int(mx["p"]), int(mx["n"])
        if "mu" in mx:
            mu = np.asarray(mx["mu"], dtype=float)
        else:
            norm = math.sqrt(float(mx["mu_norm_sq"])) if "mu_norm_sq" in mx else float(mx.get("mu_norm", 0.0))
            direction = mx.get("mu_direction", "e1")
            if isinstance(direction, str):
                if direction != "e1":
                    raise ConfigurationError(f"unknown mu_direction {direction!r}")
                u = np.zeros(p)
                u[0] = 1.0
            else:
                u = np.asarray(direction, dtype=float)
                u = u / np.linalg.norm(u)
            mu = norm * u
        return MixtureSpec(p=p, n=n, mu=mu, sigma_spec=SigmaSpec.from_dict(mx["sigma_spec"]),
                           noise_law=NoiseLaw.from_dict(mx["noise_law"]), seed=seed)

    def split(self):
        nw = self.raw["network"]
        if "j_plus" in nw:
            return NeuronSplit(int(nw["j_plus"]), int(nw["m"]))
        q = nw["q_plus"]
        if isinstance(q, str):
            from fractions import Fraction
            q = Fraction(q)
        return NeuronSplit.from_q(q, int(nw["m"]))

    @property
    def gamma(self):
        return float(self.raw["network"]["gamma"])


def resolve_cell(index, coords, raw, master_seed, override_scale=False):
    mx = raw["mixture"]
    n, p = int(mx["n"]), int(mx["p"])
    if not override_scale and (n > MAX_N or p > MAX_P):
        raise ScaleGuardError(f"n={n}, p={p} exceeds desk scale (n <= {MAX_N}, p <= {MAX_P}); "
                              "pass --override-scale to run anyway")
    return ResolvedCell(index, coords, raw, master_seed)


def auto_step(n, norm_mu_sq, r_max):
    return 0.5 * min(1.0 / (n * norm_mu_sq + r_max**2), 1.0 / (6 * r_max**2))


def auto_sigma(alpha, gamma, m, norm_mu_sq, r_min, r_max):
    return 0.05 * alpha * gamma * r_min**2 / math.sqrt(2 * m * (norm_mu_sq + r_max**2))


def train_config_for(raw_train, data, gamma, m):
    radii = np.linalg.norm(data.Z, axis=1)
    r_min, r_max = float(radii.min()), float(radii.max())
    mu2 = float(data.mu @ data.mu)
    alpha = raw_train["alpha"]
    if alpha == "auto":
        alpha = auto_step(data.n, mu2, r_max)
    sigma = raw_train["sigma_init"]
    if sigma == "auto":
        sigma = auto_sigma(float(alpha), gamma, m, mu2, r_min, r_max)
    W0 = raw_train.get("W0")
    return TrainConfig(alpha=float(alpha), sigma_init=float(sigma), T=int(raw_train["T"]),
                       init_scheme=raw_train.get("init_scheme", "uniform_sphere_scaled"),
                       W0=None if W0 is None else np.asarray(W0, dtype=float))


REPORT_FIELDS = ("theta1", "theta2", "theta1_raw", "eps_tilde_1", "eps_tilde_2", "eps_tilde_3",
                 "eps_tilde", "R", "rho", "r_min", "r_max", "c_w", "q_plus", "q_minus", "q_gamma",
                 "n", "norm_mu_sq", "gamma", "alpha", "sigma", "m", "j_plus")


def _clean(v):
    if isinstance(v, (np.floating,)):
        v = float(v)
    if isinstance(v, (np.integer,)):
        v = int(v)
    if isinstance(v, np.bool_):
        v = bool(v)
    return v


def run_trial(cell, trial):
    """One pass of generate -> regime check -> limit -> train -> error.  Returns a flat dict."""
    seed = derive_seed(cell.master_seed, cell.index, trial)
    spec = cell.mixture_spec(seed)
    data = generate(spec)
    split = cell.split()
    gamma = cell.gamma
    cfg = train_config_for(cell.raw["train"], data, gamma, split.m)
    state0 = init_network(spec.p, split.signs(), gamma, cfg, seed=seed)
    R = cell.raw.get("R", "trace")
    R = spec.sigma_spec.trace(spec.p) if R == "trace" else (
        float(np.mean(np.sum(data.Z**2, axis=1))) if R == "empirical" else float(R))
    rep = check_assumptions(data, cfg, state0, R=R)
    rec = {"trial": trial, "seed": seed, "theorem1_condition": rep.theorem1_condition,
           "theorem2_condition": rep.theorem2_condition, "slack_params": rep.slack_params,
           "condition_i": rep.condition_i, "condition_ii": rep.condition_ii}
    for k in REPORT_FIELDS:
        rec[k] = _clean(getattr(rep, k))
    rec["n_plus"] = data.n_plus
    ld = None
    try:
        ld = min_norm_direction(data, build_block_gram(data, gamma, split), R=R)
        rec["sv_certificate_min"] = float(ld.sv_certificate.min())
        rec["all_support_vectors"] = ld.certificate_positive
        rec["k1"], rec["k2"] = ld.k1, ld.k2
    except BenignLeakyError as exc:
        rec["limit_error"] = f"{type(exc).__name__}: {exc}"
    mc = cell.raw.get("mc_samples", 0)
    mc = int(mc)
    if ld is not None:
        er = error_report(ld.w_bar, spec, data.n, R=R, mc_samples=mc, seed=seed)
        rec["limit_exact_error"] = er.exact_gaussian
        rec["limit_mc_error"] = er.mc_estimate
        rec["limit_mc_stderr"] = er.mc_stderr
        rec["limit_mc_ties"] = er.mc_ties if mc else None
        rec["kappa_lower"], rec["kappa_upper"] = er.kappa_lower, er.kappa_upper
        rec["bracket_holds"] = er.bracket_holds
        rec["margin_ratio"] = er.margin_ratio
        rec["sigma_margin_ratio"] = er.sigma_margin_ratio
        rec["bayes_error"] = er.bayes_error
        rec["bound_exponent"] = er.bound_exponent
        rec["kappa_sqrt_exponent"] = (None if er.bound_exponent is None
                                      else kappa(math.sqrt(er.bound_exponent)))
        rec["pm_bound_shape"] = er.pm_bound_shape
        rec["phase_regime"] = er.regime
    if cfg.T > 0:
        trace = train(data, cfg, state0, reference=ld)
        s = trace.summary()
        rec.update({
            "final_loss": s["final_loss"],
            "t_loss_final": s["t_loss_final"],
            "t_loss_ratio_second_half": s["t_loss_ratio_second_half"],
            "all_activated_every_step": s["all_activated_every_step"],
            "max_loss_ratio": s["max_loss_ratio"],
            "loss_ratio_within_cw": bool(s["max_loss_ratio"] <= rep.c_w),
            "final_cos_plus": s["final_cos_plus"],
            "final_cos_minus": s["final_cos_minus"],
            "steps_run": s["steps"],
            "stop_reason": s["stop_reason"],
        })
        st = trace.final_state
        sm = math.sqrt(split.m)
        sg = st.signs
        wt = np.zeros(spec.p)
        if split.j_plus:
            wt += (split.j_plus / sm) * st.W[:, sg > 0].mean(axis=1)
        if split.j_minus:
            wt -= (split.j_minus / sm) * st.W[:, sg < 0].mean(axis=1)
        ter = error_report(wt, spec, data.n, R=R, mc_samples=0)
        rec["trained_implied_exact_error"] = ter.exact_gaussian
        if mc:
            est = mc_error_fn(lambda x: forward(st, x), spec, mc, seed)
            rec["trained_mc_error"] = est.estimate
            rec["trained_mc_stderr"] = est.stderr
    return {k: _clean(v) for k, v in rec.items()}


@dataclass
class CellResult:
    index: int
    coords: dict
    trials: list
    errors: list = field(default_factory=list)

    @property
    def ok(self):
        return len(self.trials) > 0

    def to_dict(self):
        return {"index": self.index, "coords": self.coords, "trials": self.trials, "errors": self.errors}

    @classmethod
    def from_dict(cls, d):
        return cls(d["index"], d["coords"], d["trials"], d.get("errors", []))


def run_cell(cell, trials=None):
    trials = int(cell.raw.get("trials", 1)) if trials is None else trials
    recs, errs = [], []
    for t in range(trials):
        try:
            recs.append(run_trial(cell, t))
        except BenignLeakyError as exc:
            log.warning("cell %d trial %d failed: %s", cell.index, t, exc)
            errs.append({"trial": t, "error": f"{type(exc).__name__}: {exc}"})
    if not recs:
        raise BenignLeakyError(f"cell {cell.index}: all {trials} trials failed: {errs}")
    return CellResult(cell.index, cell.coords, recs, errs)


METRIC_KEYS = (
    "theta1", "theta2", "theta1_raw", "eps_tilde_1", "eps_tilde_2", "eps_tilde_3", "eps_tilde",
    "R", "rho", "r_min", "r_max", "c_w", "q_plus", "q_minus", "q_gamma", "n", "n_plus",
    "norm_mu_sq", "gamma", "alpha", "sigma", "m", "j_plus",
    "condition_i", "condition_ii", "sv_certificate_min", "all_support_vectors", "k1", "k2",
    "limit_exact_error", "limit_mc_error", "limit_mc_stderr", "limit_mc_ties",
    "kappa_lower", "kappa_upper", "bracket_holds", "margin_ratio", "sigma_margin_ratio",
    "bayes_error", "bound_exponent", "kappa_sqrt_exponent", "pm_bound_shape",
    "final_loss", "t_loss_final", "t_loss_ratio_second_half", "all_activated_every_step",
    "max_loss_ratio", "loss_ratio_within_cw", "final_cos_plus", "final_cos_minus", "steps_run",
    "trained_implied_exact_error", "trained_mc_error", "trained_mc_stderr",
)
LABEL_KEYS = ("theorem1_condition", "theorem2_condition", "phase_regime")


def row_columns(coord_paths, trials):
    cols = ["cell_index", *coord_paths, "trials_ok", "trials_failed", *LABEL_KEYS,
            "theorem1_i_frac", "theorem1_ii_frac"]
    for k in METRIC_KEYS:
        cols.append(k)
        if trials > 1:
            cols.append(k + "_std")
    return cols


def cell_row(res):
    """Flat row: coordinates, majority regime labels, and mean/std of each metric.

    Booleans average to the fraction of trials where they held; absent metrics
    are left out (empty in CSV).
    """
    row = {"cell_index": res.index}
    for k, v in res.coords.items():
        row[k] = v
    row["trials_ok"] = len(res.trials)
    row["trials_failed"] = len(res.errors)
    for key in LABEL_KEYS:
        vals = [r[key] for r in res.trials if key in r]
        if vals:
            row[key] = Counter(vals).most_common(1)[0][0]
    t1 = [r["theorem1_condition"] for r in res.trials]
    row["theorem1_i_frac"] = t1.count("i") / len(t1)
    row["theorem1_ii_frac"] = t1.count("ii") / len(t1)
    multi = len(res.trials) + len(res.errors) > 1
    for k in METRIC_KEYS:
        vals = [r[k] for r in res.trials if r.get(k) is not None]
        if not vals:
            continue
        arr = np.asarray(vals, dtype=float)
        fin = arr[np.isfinite(arr)]
        if fin.size == 0:
            continue
        row[k] = float(fin.mean())
        if multi:
            row[k + "_std"] = float(fin.std(ddof=1)) if fin.size > 1 else 0.0
    return row


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, (list, dict)):
        return json.dumps(v)
    return "" if v is None else str(v)


def _run_cell_job(args):
    cell, trials = args
    return run_cell(cell, trials)


class _OrderedWriter:
    """Writes rows to CSV in cell order as soon as the next expected cell is available."""

    def __init__(self, path, columns):
        self.path = path
        self.cols = columns
        self.pending = {}
        self.next = 0
        self.rows = []
        self.fh = None

    def add(self, res):
        self.pending[res.index] = res
        while self.next in self.pending:
            self._emit(self.pending.pop(self.next))
            self.next += 1

    def _emit(self, res):
        row = cell_row(res)
        self.rows.append(row)
        if self.fh is None:
            self.fh = open(self.path, "w", newline="")
            self.w = csv.writer(self.fh)
            self.w.writerow(self.cols)
        self.w.writerow([format_value(row.get(k)) for k in self.cols])
        self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _load_journal(path, digest):
    done = {}
    if not os.path.exists(path):
        return done
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError:
                # a torn final line from an interrupted write
                continue
            if entry.get("digest") == digest:
                done[entry["cell"]["index"]] = CellResult.from_dict(entry["cell"])
    return done


def run_sweep(config, out_dir, workers=1, override_scale=False, resume=True):
    """Run every cell; returns the list of rows in cell order.

    Completed cells are appended to a JSON-lines journal so an interrupted
    sweep picks up where it stopped, producing the same table.
    """
    os.makedirs(out_dir, exist_ok=True)
    outs = config.outputs
    csv_path = os.path.join(out_dir, outs.get("csv", "sweep.csv"))
    json_path = os.path.join(out_dir, outs.get("json", "summary.json"))
    journal_path = os.path.join(out_dir, outs.get("journal", "journal.jsonl"))
    digest = config.digest()
    cells = [resolve_cell(i, c, r, config.seed, override_scale) for i, c, r in expand_cells(config)]
    done = _load_journal(journal_path, digest) if resume else {}
    if not resume and os.path.exists(journal_path):
        os.remove(journal_path)
    writer = _OrderedWriter(csv_path, row_columns([ax["path"] for ax in config.sweep], config.trials))
    results = {}
    try:
        for i in sorted(done):
            results[i] = done[i]
            writer.add(done[i])
        todo = [c for c in cells if c.index not in done]
        with open(journal_path, "a") as jf:
            def record(res):
                jf.write(json.dumps({"digest": digest, "cell": res.to_dict()}) + "\n")
                jf.flush()
                results[res.index] = res
                writer.add(res)

            if workers > 1 and len(todo) > 1:
                with ProcessPoolExecutor(max_workers=workers) as ex:
                    futs = {ex.submit(_run_cell_job, (c, config.trials)): c for c in todo}
                    from concurrent.futures import as_completed
                    for f in as_completed(futs):
                        record(f.result())
            else:
                for c in todo:
                    record(run_cell(c, config.trials))
    finally:
        writer.close()
    summary = {"digest": digest, "config": config.to_dict(),
               "cells": [results[i].to_dict() for i in sorted(results)],
               "rows": writer.rows}
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=1, default=_json_default)
    return writer.rows


def _json_default(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o))
