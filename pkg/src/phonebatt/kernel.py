"""Trajectory integrator: the hot loop of every Monte Carlo study.

One call integrates one hybrid trajectory over a pre-sampled sequence of usage
segments.  State is kept in scalars so the jitted build never allocates inside
the step loop.  The same source runs as plain Python when numba is disabled.
"""
import math

import numpy as np

from ._jit import njit
from .battery import dudt_lookup
from .numerics import MAX_STEP_S, MIN_STEP_S, pchip_eval_poly

# parameter vector layout
Q_MAX, R_REF, R_P, C_P, TAU_P, E_A, R_GAS, T_REF, M_C_TH, H_A, ETA, V_CUT, DT_PERSIST = range(13)
N_PARAMS = 13

# status codes
OK, NEED_SEGMENTS, RECORD_FULL, STEP_UNDERFLOW, NEGATIVE_EMF = range(5)
# shutdown causes
CAUSE_VOLTAGE, CAUSE_INFEASIBLE, CAUSE_HORIZON = range(3)
CAUSE_NAMES = ("voltage_persist", "infeasible_power", "horizon")

REC_COLS = ("t", "z", "v_p", "t_core", "v_term", "current", "mode", "p_req")
N_REC = len(REC_COLS)

_SNAP = 1e-9


@njit(inline="always")
def detector_step(below_since, t, v_term, v_cut, feasible, dt_persist):
    """One debounce update.  ``below_since < 0`` means no open window.

    Returns ``(below_since, fired, t_star, cause)``.
    """
    if not feasible:
        return below_since, True, t, CAUSE_INFEASIBLE
    if v_term <= v_cut:
        if below_since < 0.0:
            below_since = t
        if t - below_since >= dt_persist:
            return below_since, True, below_since, CAUSE_VOLTAGE
        return below_since, False, 0.0, -1
    return -1.0, False, 0.0, -1


@njit(inline="always")
def capability(e, r0, v_cut, cutoff_aware):
    """Battery-side power limit: the collapse point ``E^2/(4 R0)``, or with
    ``cutoff_aware`` the largest power that keeps ``v_term >= v_cut``."""
    if not cutoff_aware:
        return e * e / (4.0 * r0)
    if e <= v_cut:
        return 0.0
    if v_cut <= 0.5 * e:
        return e * e / (4.0 * r0)
    return v_cut * (e - v_cut) / r0


@njit(inline="always")
def throttle_scalar(active, kappa, z_crit, t_crit, u_min, eta, p_max, z, t_core, p_req):
    """Resistance-aware cap.  Returns ``(p_req_after, u, gate_closed, floored)``."""
    if not active or (z >= z_crit and t_core >= t_crit):
        return p_req, 1.0, False, False
    if p_req <= 0.0:
        return p_req, 1.0, True, False
    cap = kappa * eta * p_max
    if p_req <= cap:
        return p_req, 1.0, True, False
    u = cap / p_req
    if u < u_min:
        return u_min * p_req, u_min, True, True
    return cap, u, True, False


# derived constants, computed once per call so the right-hand side never divides by a parameter
INV_Q, INV_TAU, INV_CP, INV_RP, INV_MCTH, EA_R, INV_TREF, KC_R_REF, KC_H_A = range(9)
N_KC = 9


@njit
def derived_constants(bp):
    kc = np.empty(N_KC)
    kc[INV_Q] = 1.0 / (3600.0 * bp[Q_MAX])
    kc[INV_TAU] = 1.0 / bp[TAU_P]
    kc[INV_CP] = 1.0 / bp[C_P]
    kc[INV_RP] = 1.0 / bp[R_P]
    kc[INV_MCTH] = 1.0 / bp[M_C_TH]
    kc[EA_R] = bp[E_A] / bp[R_GAS]
    kc[INV_TREF] = 1.0 / bp[T_REF]
    kc[KC_R_REF] = bp[R_REF]
    kc[KC_H_A] = bp[H_A]
    return kc


@njit(inline="always")
def _deriv(kc, ox, oc, db, dv, z, vp, tc, pb, t_env, ea, th_on, vp_on):
    """Right-hand side for (z, v_p, T, q_out) under held battery power ``pb``.

    Ablations enter as multipliers rather than branches: ``ea = 0`` pins R0
    at r_ref, ``th_on = 0`` freezes T and ``vp_on = 0`` freezes v_p (which
    starts at 0 in that variant).  Also returns the terminal solution so the
    caller can run the cutoff detector without a second evaluation.
    Returns ``(dz, dvp, dT, I, v_term, disc, E, R0)``.
    """
    e = pchip_eval_poly(ox, oc, z) - vp
    r0 = kc[KC_R_REF] * math.exp(ea * (1.0 / tc - kc[INV_TREF]))
    disc = e * e - 4.0 * r0 * pb
    if e <= 0.0:
        cur = 0.0
    elif disc < 0.0:
        # past the collapse point inside a stage: hold the max-power current
        cur = e / (2.0 * r0)
    else:
        # small root without cancellation
        cur = 2.0 * pb / (e + math.sqrt(disc))
    dz = -cur * kc[INV_Q]
    dvp = vp_on * (cur * kc[INV_CP] - vp * kc[INV_TAU])
    q_gen = cur * cur * r0 + vp * vp * kc[INV_RP] + cur * tc * dudt_lookup(db, dv, z)
    dtc = th_on * (q_gen - kc[KC_H_A] * (tc - t_env)) * kc[INV_MCTH]
    return dz, dvp, dtc, cur, e - cur * r0, disc, e, r0


@njit(inline="always")
def _step_pair(kc, ox, oc, db, dv, z, vp, tc, q, pb, t_env, ea, th, vo, dt, a1, b1, c1, d1):
    """Classical RK4 over ``dt`` in one step and in two half steps, from slope ``k1``.

    The full step and the first half step are independent chains written side
    by side so the CPU can overlap them.  Returns the full-step state and the
    two-half-step state (the one kept).
    """
    h = 0.5 * dt
    g = 0.5 * h
    fa2, fb2, fc2, _, _, _, _, _ = _deriv(kc, ox, oc, db, dv, z + h * a1, vp + h * b1, tc + h * c1, pb, t_env, ea, th, vo)
    ha2, hb2, hc2, hd2, _, _, _, _ = _deriv(kc, ox, oc, db, dv, z + g * a1, vp + g * b1, tc + g * c1, pb, t_env, ea, th, vo)
    fa3, fb3, fc3, _, _, _, _, _ = _deriv(kc, ox, oc, db, dv, z + h * fa2, vp + h * fb2, tc + h * fc2, pb, t_env, ea, th, vo)
    ha3, hb3, hc3, hd3, _, _, _, _ = _deriv(kc, ox, oc, db, dv, z + g * ha2, vp + g * hb2, tc + g * hc2, pb, t_env, ea, th, vo)
    fa4, fb4, fc4, _, _, _, _, _ = _deriv(kc, ox, oc, db, dv, z + dt * fa3, vp + dt * fb3, tc + dt * fc3, pb, t_env, ea, th, vo)
    ha4, hb4, hc4, hd4, _, _, _, _ = _deriv(kc, ox, oc, db, dv, z + h * ha3, vp + h * hb3, tc + h * hc3, pb, t_env, ea, th, vo)
    s = dt / 6.0
    r = h / 6.0
    fz = z + s * (a1 + 2.0 * fa2 + 2.0 * fa3 + fa4)
    fv = vp + s * (b1 + 2.0 * fb2 + 2.0 * fb3 + fb4)
    ft = tc + s * (c1 + 2.0 * fc2 + 2.0 * fc3 + fc4)
    mz = z + r * (a1 + 2.0 * ha2 + 2.0 * ha3 + ha4)
    mv = vp + r * (b1 + 2.0 * hb2 + 2.0 * hb3 + hb4)
    mt = tc + r * (c1 + 2.0 * hc2 + 2.0 * hc3 + hc4)
    mq = q + r * (d1 + 2.0 * hd2 + 2.0 * hd3 + hd4)
    a1, b1, c1, d1, _, _, _, _ = _deriv(kc, ox, oc, db, dv, mz, mv, mt, pb, t_env, ea, th, vo)
    a2, b2, c2, d2, _, _, _, _ = _deriv(kc, ox, oc, db, dv, mz + g * a1, mv + g * b1, mt + g * c1, pb, t_env, ea, th, vo)
    a3, b3, c3, d3, _, _, _, _ = _deriv(kc, ox, oc, db, dv, mz + g * a2, mv + g * b2, mt + g * c2, pb, t_env, ea, th, vo)
    a4, b4, c4, d4, _, _, _, _ = _deriv(kc, ox, oc, db, dv, mz + h * a3, mv + h * b3, mt + h * c3, pb, t_env, ea, th, vo)
    return (
        fz, fv, ft,
        mz + r * (a1 + 2.0 * a2 + 2.0 * a3 + a4),
        mv + r * (b1 + 2.0 * b2 + 2.0 * b3 + b4),
        mt + r * (c1 + 2.0 * c2 + 2.0 * c3 + c4),
        mq + r * (d1 + 2.0 * d2 + 2.0 * d3 + d4),
    )


@njit(inline="always")
def _rate_factor(lam_z, lam_f, mode, z):
    n = lam_z.shape[0]
    if z <= lam_z[0]:
        return lam_f[mode, 0]
    if z >= lam_z[n - 1]:
        return lam_f[mode, n - 1]
    k = 0
    while lam_z[k + 1] < z:
        k += 1
    w = (z - lam_z[k]) / (lam_z[k + 1] - lam_z[k])
    return lam_f[mode, k] * (1.0 - w) + lam_f[mode, k + 1] * w


@njit
def simulate(
    bp, ocv_x, ocv_c, dudt_b, dudt_v,
    seg_mode, seg_preq, seg_exp, seg_rate,
    use_lam, lam_z, lam_f,
    z0, vp0, tc0, t_env, horizon,
    isothermal, no_pol,
    thr_active, kappa, z_crit, t_crit, u_min, thr_cutoff,
    tol_z, tol_vp, tol_tc,
    grid_dt, grid_z,
    record, rec,
):
    """Integrate one trajectory.

    Segment ``k`` holds device request ``seg_preq[k]`` until its hazard
    ``seg_rate[k] * lambda(mode, z)`` integrates to ``seg_exp[k]`` (a rate of 0
    holds forever).  The cutoff detector runs at every segment start with the
    new load and at the end of every accepted substep with the held load.

    Returns ``(status, t_end, cause, seg_used, n_rec, z, v_p, t_core, q_out,
    j_int, floor_time, gate_time)``; ``q_out`` is the delivered charge in A*s
    and ``j_int`` the time integral of the throttle factor up to the
    reported shutdown time.
    """
    kc = derived_constants(bp)
    ea = 0.0 if isothermal else kc[EA_R]
    th = 0.0 if isothermal else 1.0
    vo = 0.0 if no_pol else 1.0
    nseg = seg_mode.shape[0]
    n_grid = grid_z.shape[0]
    cap = rec.shape[0]
    eta = bp[ETA]
    inv_eta = 1.0 / eta
    v_cut = bp[V_CUT]
    dt_persist = bp[DT_PERSIST]

    t = 0.0
    z = z0
    vp = 0.0 if no_pol else vp0
    tc = t_env if isothermal else tc0
    q = 0.0
    j_int = 0.0
    floor_time = 0.0
    gate_time = 0.0
    below = -1.0
    # throttle accounting frozen when a below-cutoff window opens, so a
    # debounced shutdown reports J over [0, t*] rather than up to detection
    j_w = 0.0
    fl_w = 0.0
    gt_w = 0.0
    n_rec = 0
    gi = 0
    if n_grid > 0:
        grid_z[0] = z
        gi = 1
    next_grid = gi * grid_dt if n_grid > 1 else np.inf

    # open-circuit quantities at the current state, for the throttle cap
    _, _, _, _, _, _, e, r0 = _deriv(kc, ocv_x, ocv_c, dudt_b, dudt_v, z, vp, tc, 0.0, t_env, ea, th, vo)

    k = 0
    while True:
        if k >= nseg:
            return NEED_SEGMENTS, t, -1, k, n_rec, z, vp, tc, q, j_int, floor_time, gate_time
        mode = seg_mode[k]
        p_seg = seg_preq[k]
        e_k = seg_exp[k]
        rate = seg_rate[k]
        hz = 0.0

        p_cap = capability(e, r0, v_cut, thr_cutoff)
        p_req, u, gate, fl = throttle_scalar(thr_active, kappa, z_crit, t_crit, u_min, eta, p_cap, z, tc, p_seg)
        pb = p_req * inv_eta
        a1, b1, c1, d1, v, disc, e, r0 = _deriv(kc, ocv_x, ocv_c, dudt_b, dudt_v, z, vp, tc, pb, t_env, ea, th, vo)
        if e <= 0.0 and pb > 0.0:
            return NEGATIVE_EMF, t, -1, k, n_rec, z, vp, tc, q, j_int, floor_time, gate_time
        if n_rec == 0 and record:
            rec[0, 0] = t
            rec[0, 1] = z
            rec[0, 2] = vp
            rec[0, 3] = tc
            rec[0, 4] = v
            rec[0, 5] = d1
            rec[0, 6] = mode
            rec[0, 7] = p_req
            n_rec = 1
        # right-limit check with the freshly applied load
        was_below = below >= 0.0
        below, fired, t_star, cause = detector_step(below, t, v, v_cut, disc >= 0.0, dt_persist)
        if below >= 0.0 and not was_below:
            j_w, fl_w, gt_w = j_int, floor_time, gate_time
        if fired:
            if cause == CAUSE_VOLTAGE:
                return OK, t_star, cause, k + 1, n_rec, z, vp, tc, q, j_w, fl_w, gt_w
            return OK, t_star, cause, k + 1, n_rec, z, vp, tc, q, j_int, floor_time, gate_time

        first = True
        while True:
            if thr_active and not first:
                # the cap follows the state; refresh the slope only if the request moved
                p_new, u, gate, fl = throttle_scalar(thr_active, kappa, z_crit, t_crit, u_min, eta,
                                                     capability(e, r0, v_cut, thr_cutoff), z, tc, p_seg)
                if p_new != p_req:
                    p_req = p_new
                    pb = p_req * inv_eta
                    a1, b1, c1, d1, v, disc, e, r0 = _deriv(kc, ocv_x, ocv_c, dudt_b, dudt_v, z, vp, tc, pb,
                                                            t_env, ea, th, vo)
            first = False

            # exit hazard, held over the substep
            if use_lam:
                h_rate = rate * _rate_factor(lam_z, lam_f, mode, z)
            else:
                h_rate = rate
            if h_rate > 0.0:
                to_jump = (e_k - hz) / h_rate
                if to_jump < 0.0:
                    to_jump = 0.0
            else:
                to_jump = np.inf
            dt_cap = MAX_STEP_S
            limit = 0
            if to_jump <= dt_cap:
                dt_cap = to_jump
                limit = 1
            if next_grid - t <= dt_cap:
                dt_cap = next_grid - t
                limit = 2
            if horizon - t <= dt_cap:
                dt_cap = horizon - t
                limit = 3

            # step halving: one full step against two half steps
            dt = dt_cap
            while True:
                fz, fv, ft, nz, nv, nt, nq = _step_pair(kc, ocv_x, ocv_c, dudt_b, dudt_v, z, vp, tc, q, pb,
                                                        t_env, ea, th, vo, dt, a1, b1, c1, d1)
                if abs(nz - fz) <= tol_z and abs(nv - fv) <= tol_vp and abs(nt - ft) <= tol_tc:
                    break
                dt *= 0.5
                limit = 0
                if dt < MIN_STEP_S:
                    return STEP_UNDERFLOW, t, -1, k, n_rec, z, vp, tc, q, j_int, floor_time, gate_time

            if limit == 2:
                t = next_grid
            elif limit == 3:
                t = horizon
            else:
                t = t + dt
            hz += h_rate * dt
            j_int += u * dt
            if fl:
                floor_time += dt
            if gate:
                gate_time += dt
            z = nz
            vp = nv
            tc = nt
            q = nq

            while gi < n_grid and t >= next_grid - _SNAP:
                grid_z[gi] = z
                gi += 1
                next_grid = gi * grid_dt if gi < n_grid else np.inf

            # left-limit check with the load held over the substep; this
            # evaluation is also the next substep's first slope
            a1, b1, c1, d1, v, disc, e, r0 = _deriv(kc, ocv_x, ocv_c, dudt_b, dudt_v, z, vp, tc, pb, t_env, ea, th, vo)
            if e <= 0.0 and pb > 0.0:
                return NEGATIVE_EMF, t, -1, k, n_rec, z, vp, tc, q, j_int, floor_time, gate_time
            if record:
                if n_rec >= cap:
                    return RECORD_FULL, t, -1, k, n_rec, z, vp, tc, q, j_int, floor_time, gate_time
                rec[n_rec, 0] = t
                rec[n_rec, 1] = z
                rec[n_rec, 2] = vp
                rec[n_rec, 3] = tc
                rec[n_rec, 4] = v
                rec[n_rec, 5] = d1
                rec[n_rec, 6] = mode
                rec[n_rec, 7] = p_req
                n_rec += 1
            was_below = below >= 0.0
            below, fired, t_star, cause = detector_step(below, t, v, v_cut, disc >= 0.0, dt_persist)
            if below >= 0.0 and not was_below:
                j_w, fl_w, gt_w = j_int, floor_time, gate_time
            if fired:
                if cause == CAUSE_VOLTAGE:
                    return OK, t_star, cause, k + 1, n_rec, z, vp, tc, q, j_w, fl_w, gt_w
                return OK, t_star, cause, k + 1, n_rec, z, vp, tc, q, j_int, floor_time, gate_time
            if t >= horizon - _SNAP:
                return OK, horizon, CAUSE_HORIZON, k + 1, n_rec, z, vp, tc, q, j_int, floor_time, gate_time
            if limit == 1:
                break
        k += 1
