"""Invariant suite run by ``benign-leaky verify`` on one configured instance."""
import math

import numpy as np
import scipy.linalg as sla

from .errors import BenignLeakyError
from .limit import (
    a_matrix,
    binv_y_ainv,
    block_vector,
    boundary_agreement,
    build_block_gram,
    constraint_values,
    d_bounds,
    direction_diagnostics,
    gram_lemma_checks,
    min_norm_direction,
    qp_oracle,
)
from .mixture import generate
from .network import (
    empirical_loss,
    init_network,
    loss_gradient,
    train,
    transformed_samples,
)
from .regime import check_assumptions, measure_event_E, measure_tilde_events, tilde_to_E_bridge
from .risk import exact_gaussian_error, gaussian_bracket
from .rng import derive_seed, stream

MATERIALIZE_LIMIT = 5_000_000


def _check(name, ok, detail=""):
    return {"name": name, "passed": bool(ok), "detail": detail}


def gradient_check(state, data, n_coords=24, seed=0):
    """Central differences on random coordinates of W away from kinks."""
    rng = stream(seed, "probes", 1)
    G = loss_gradient(state, data)
    W = np.array(state.W)
    scale = max(float(np.abs(W).max()), 1e-3)
    h = 1e-6 * scale
    S = data.X @ W
    worst = 0.0
    idx = rng.choice(W.size, size=min(n_coords, W.size), replace=False)
    for flat in idx:
        r, c = np.unravel_index(flat, W.shape)
        if np.min(np.abs(S[:, c])) <= max(1e-6, 10 * h * np.abs(data.X[:, r]).max()):
            continue
        Wp, Wm = W.copy(), W.copy()
        Wp[r, c] += h
        Wm[r, c] -= h
        fd = (empirical_loss(state.with_W(Wp), data) - empirical_loss(state.with_W(Wm), data)) / (2 * h)
        den = max(abs(G[r, c]), 1e-8 * max(1.0, empirical_loss(state, data)))
        worst = max(worst, abs(fd - G[r, c]) / den)
    return worst


def run_verify(cell, trial=0):
    """Returns (checks, regime_report).  Each check is ``{name, passed, detail}``."""
    checks = []
    seed = derive_seed(cell.master_seed, cell.index, trial)
    spec = cell.mixture_spec(seed)
    data = generate(spec)
    split = cell.split()
    gamma = cell.gamma
    from .harness import train_config_for
    cfg = train_config_for(cell.raw["train"], data, gamma, split.m)
    state0 = init_network(spec.p, split.signs(), gamma, cfg, seed=seed)
    R = spec.sigma_spec.trace(spec.p)
    rep = check_assumptions(data, cfg, state0, R=R)
    mu = data.mu
    mu2 = float(mu @ mu)
    y = data.y

    checks.append(_check("dataset_additive", np.array_equal(data.X - np.multiply.outer(y, mu), data.Z)))

    # event E brackets
    th = measure_event_E(data)
    P = (y[:, None] * data.X) @ (y[:, None] * data.X).T
    rmax = rep.r_max
    cross = 2 * th["theta2"] * math.sqrt(mu2) * rmax + th["theta1"] * rmax**2
    off = ~np.eye(data.n, dtype=bool)
    dev = np.abs(P[off] - mu2) if data.n > 1 else np.zeros(1)
    checks.append(_check("inner_product_bracket", np.all(dev <= cross * (1 + 1e-12) + 1e-9),
                         f"max dev {dev.max():.3g} vs {cross:.3g}"))
    te = measure_tilde_events(data, R)
    if te["eps1"] <= 0.5:
        br = tilde_to_E_bridge(te["eps1"], te["eps2"], R, math.sqrt(mu2))
        ok = th["theta1"] <= br["theta1"] + 1e-12 and (mu2 == 0 or th["theta2"] <= br["theta2"] + 1e-12)
        checks.append(_check("bridge_consistency", ok))

    # straight-line algebra
    Wt = 1e-2 * stream(seed, "probes", 2).standard_normal(state0.W.shape)
    st = state0.with_W(Wt)
    err = gradient_check(st, data, seed=seed)
    checks.append(_check("gradient_finite_difference", err <= 1e-5, f"worst rel {err:.3g}"))

    bg = build_block_gram(data, gamma, split)
    if data.n * split.m * data.p <= MATERIALIZE_LIMIT:
        Xt = transformed_samples(data.X, y, split.signs(), gamma)
        ref = Xt @ Xt.T
        rel = float(np.abs(bg.gram - ref).max() / max(np.abs(ref).max(), 1e-300))
        checks.append(_check("block_gram_materialized", rel <= 1e-12, f"rel {rel:.3g}"))

    closed = binv_y_ainv(y, mu2, R, gamma, split)
    A = a_matrix(y, mu2, R, gamma, split)
    dense = sla.solve(A, y / bg.b_diag, assume_a="sym")
    rel = float(np.linalg.norm(closed - dense) / np.linalg.norm(dense))
    checks.append(_check("a_inverse_closed_form", rel <= 1e-10, f"rel {rel:.3g}"))
    db = d_bounds(data.n, data.n_plus, mu2, R, gamma, split, eps3=te["eps3"])
    checks.append(_check("d_bounds", db["holds"]))

    gl = gram_lemma_checks(data, gamma, split, R=R)
    checks.append(_check("gram_approximation", gl["gram"]["holds"]))
    checks.append(_check("ext_gram_approximation", gl["ext_gram"]["holds"]))
    if gl["gram_inverse"]["applicable"]:
        checks.append(_check("gram_inverse_approximation", gl["gram_inverse"]["holds"]))

    ld = None
    try:
        ld = min_norm_direction(data, bg, R=R)
    except BenignLeakyError as exc:
        checks.append(_check("min_norm_solve", False, str(exc)))
    if ld is not None:
        diag = direction_diagnostics(ld, data, R)
        checks.append(_check("w_bar_norm_bracket", diag["brackets"]["norm"]["holds"]))
        if diag["brackets"]["dot_mu"]["applicable"]:
            checks.append(_check("w_bar_dot_mu_bracket", diag["brackets"]["dot_mu"]["holds"]))
        if ld.certificate_positive:
            cv = constraint_values(data.X, y, ld.w_plus, ld.w_minus, split, gamma)
            dev = float(np.abs(cv - 1).max())
            checks.append(_check("margins_active", dev <= 1e-8, f"max |c-1| {dev:.3g}"))
            if data.n <= 64 and data.n * split.m * data.p <= MATERIALIZE_LIMIT:
                qp = qp_oracle(data, gamma, split)
                a, b = block_vector(ld), block_vector(qp)
                rel = float(np.linalg.norm(a - b) / np.linalg.norm(a))
                checks.append(_check("oracle_equivalence", rel <= 1e-6, f"rel {rel:.3g}"))
        probes = stream(seed, "probes", 3).standard_normal((1000, data.p))
        ba = boundary_agreement(ld, probes)
        checks.append(_check("linear_decision_boundary", ba["all_agree"], f"{ba['agree']}/{ba['total']}"))
        if spec.noise_law.kind == "gaussian" and float(ld.w_bar @ mu) > 0:
            ex = exact_gaussian_error(ld.w_bar, mu, spec.sigma_spec)
            bk = gaussian_bracket(ld.w_bar, mu, spec.sigma_spec)
            checks.append(_check("gaussian_bracket", bk.lower <= ex + 1e-15 and ex <= bk.upper + 1e-15))

    regime_ok = rep.theorem1_condition != "none"
    checks.append(_check("theorem1_regime", regime_ok, rep.theorem1_condition))
    if regime_ok and cfg.T > 0:
        tr = train(data, cfg, state0, reference=ld)
        checks.append(_check("activation_every_step", bool(np.all(tr.all_activated)),
                             tr.summary().get("first_inactive_step")))
        if rep.theorem1_condition == "ii" or rep.condition_ii:
            mx = float(np.max(tr.loss_ratio_max))
            checks.append(_check("loss_ratio_within_cw", mx <= rep.c_w, f"{mx:.3g} vs {rep.c_w:.3g}"))
    return checks, rep
