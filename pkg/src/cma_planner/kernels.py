"""Hot loops, each in two flavours: ``*_nb`` (numba, scalar loops) and
``*_np`` (vectorised numpy). Both consume identical precomputed CDF tables and
uniform draws, so they make identical sampling decisions.

Policy codes and terminal codes are shared with :mod:`cma_planner.sim`.
"""
import numpy as np

from ._accel import njit, resolve_backend

POLICY_NOOP, POLICY_TRUE_MDP, POLICY_OBS_MDP, POLICY_MAP_MDP, POLICY_POMDP = range(5)
TERM_COMPLETED, TERM_TERMINATED, TERM_FAILED, TERM_HORIZON = range(4)
ERR_NONE, ERR_ZERO_NORMALIZER, ERR_ILLEGAL_ACTION = range(3)

# Absorbing state indices (see model.Absorbing).
_C, _T, _FL, _E = 108, 109, 110, 111
_N_LIVE = 108


def inverse_cdf_table(p):
    """Cumulative sums along the last axis with the tail pinned to 1.

    Entries from the last positive-probability index onward are set to 1.0,
    so a uniform draw in [0, 1) can never select a zero-probability outcome
    through rounding.
    """
    cdf = np.cumsum(p, axis=-1)
    pos = p > 0
    last = p.shape[-1] - 1 - np.argmax(pos[..., ::-1], axis=-1)
    idx = np.arange(p.shape[-1])
    cdf[idx >= last[..., None]] = 1.0
    return cdf


# ---------------------------------------------------------------------------
# Bellman backup


@njit(cache=True)
def bellman_backup_nb(p, r, legal, v, gamma):
    n_a, n_s, _ = p.shape
    q = np.empty((n_s, n_a))
    v_new = np.empty(n_s)
    for s in range(n_s):
        best = -np.inf
        for a in range(n_a):
            acc = 0.0
            for t in range(n_s):
                pt = p[a, s, t]
                if pt != 0.0:
                    acc += pt * v[t]
            q[s, a] = r[s, a] + gamma * acc
            if legal[s, a] and q[s, a] > best:
                best = q[s, a]
        v_new[s] = best
    return v_new, q


def bellman_backup_np(p, r, legal, v, gamma):
    q = r + gamma * np.einsum("ast,t->sa", p, v)
    v_new = np.where(legal, q, -np.inf).max(axis=1)
    return v_new, q


def bellman_backup(p, r, legal, v, gamma, backend=None):
    if resolve_backend(backend) == "numba":
        return bellman_backup_nb(p, r, legal, v, gamma)
    return bellman_backup_np(p, r, legal, v, gamma)


def padded_sparse(x):
    """Row-wise sparse view of ``x`` along its last axis.

    Returns ``(nnz, cols, vals)`` with ``cols``/``vals`` padded to the widest row.
    """
    nz = x != 0
    nnz = nz.sum(axis=-1).astype(np.int64)
    width = max(int(nnz.max()), 1)
    cols = np.zeros(x.shape[:-1] + (width,), dtype=np.int64)
    vals = np.zeros(x.shape[:-1] + (width,))
    for idx in np.ndindex(*x.shape[:-1]):
        c = np.flatnonzero(nz[idx])
        cols[idx][: c.size] = c
        vals[idx][: c.size] = x[idx][c]
    return nnz, cols, vals


# ---------------------------------------------------------------------------
# Point-based backup (see pbvi.point_backup for the numpy version)


@njit(cache=True)
def point_backup_nb(B, G, r, legal_rows, discount, p_nnz, p_cols, p_vals,
                    z_nnz, z_obs, z_vals, n_obs):
    n, n_s = B.shape
    n_k = G.shape[0]
    n_a = r.shape[1]
    out_alpha = np.zeros((n, n_s))
    out_act = np.zeros(n, dtype=np.int64)
    out_val = np.full(n, -np.inf)
    pred = np.zeros(n_s)
    w = np.zeros(n_s)
    alpha = np.zeros(n_s)
    o_cnt = np.zeros(n_obs, dtype=np.int64)
    o_idx = np.zeros((n_obs, n_s), dtype=np.int64)
    o_val = np.zeros((n_obs, n_s))
    kstar = np.zeros(n_obs, dtype=np.int64)
    for i in range(n):
        for a in range(n_a):
            if not legal_rows[i, a]:
                continue
            pred[:] = 0.0
            for s in range(n_s):
                bs = B[i, s]
                if bs != 0.0:
                    for j in range(p_nnz[a, s]):
                        pred[p_cols[a, s, j]] += bs * p_vals[a, s, j]
            o_cnt[:] = 0
            for t in range(n_s):
                if pred[t] != 0.0:
                    for j in range(z_nnz[a, t]):
                        o = z_obs[a, t, j]
                        o_idx[o, o_cnt[o]] = t
                        o_val[o, o_cnt[o]] = pred[t] * z_vals[a, t, j]
                        o_cnt[o] += 1
            for o in range(n_obs):
                kstar[o] = 0
                if o_cnt[o] > 0:
                    best = -np.inf
                    for k in range(n_k):
                        acc = 0.0
                        for j in range(o_cnt[o]):
                            acc += o_val[o, j] * G[k, o_idx[o, j]]
                        if acc > best:
                            best = acc
                            kstar[o] = k
            for t in range(n_s):
                acc = 0.0
                for j in range(z_nnz[a, t]):
                    acc += z_vals[a, t, j] * G[kstar[z_obs[a, t, j]], t]
                w[t] = acc
            val = 0.0
            for s in range(n_s):
                acc = 0.0
                for j in range(p_nnz[a, s]):
                    acc += p_vals[a, s, j] * w[p_cols[a, s, j]]
                alpha[s] = r[s, a] + discount * acc
                val += B[i, s] * alpha[s]
            if val > out_val[i]:
                out_val[i] = val
                out_act[i] = a
                out_alpha[i, :] = alpha
    return out_alpha, out_act, out_val


# ---------------------------------------------------------------------------
# Episode simulation, numba


@njit(cache=True)
def _sample(cdf_row, u):
    n = cdf_row.shape[0]
    for j in range(n):
        if u < cdf_row[j]:
            return j
    return n - 1


@njit(cache=True)
def _argmax_first(x):
    best = 0
    for i in range(1, x.shape[0]):
        if x[i] > x[best]:
            best = i
    return best


@njit(cache=True)
def _best_legal_q(q_row, legal_row):
    best_a = -1
    best = -np.inf
    for a in range(q_row.shape[0]):
        if legal_row[a] and (best_a < 0 or q_row[a] > best):
            best = q_row[a]
            best_a = a
    return best_a


@njit(cache=True)
def _alpha_action(alphas, alpha_actions, b, legal_row):
    # Beliefs are sparse here, so gather the support once for all alphas.
    support = np.flatnonzero(b)
    weights = b[support]
    k_best = -1
    v_best = -np.inf
    k_legal = -1
    v_legal = -np.inf
    for k in range(alphas.shape[0]):
        acc = 0.0
        for i in range(support.shape[0]):
            acc += alphas[k, support[i]] * weights[i]
        if k_best < 0 or acc > v_best:
            v_best = acc
            k_best = k
        if legal_row[alpha_actions[k]] and (k_legal < 0 or acc > v_legal):
            v_legal = acc
            k_legal = k
    if legal_row[alpha_actions[k_best]]:
        return alpha_actions[k_best]
    if k_legal >= 0:
        return alpha_actions[k_legal]
    return 0


@njit(cache=True)
def simulate_nb(policy, start_states, init_belief, uniforms, p, p_cdf, z, z_cdf, r,
                legal_fs, fs_of_state, mdp_policy, q, alphas, alpha_actions,
                obs_recon, gamma, horizon):
    n = start_states.shape[0]
    n_s = p.shape[1]
    terminal = np.full(n, TERM_HORIZON, dtype=np.int64)
    steps = np.zeros(n, dtype=np.int64)
    took = np.zeros(n, dtype=np.bool_)
    cum = np.zeros(n)
    disc = np.zeros(n)
    pmm = np.full(n, np.nan)
    err = np.zeros(n, dtype=np.int64)
    tracks_belief = policy == POLICY_MAP_MDP or policy == POLICY_POMDP
    b = np.empty(n_s)
    bp = np.empty(n_s)
    for e in range(n):
        s = start_states[e]
        b[:] = init_belief
        est = _argmax_first(init_belief)  # Obs-MDP presumed state
        minmax = b[_argmax_first(b)]
        discount = 1.0
        for t in range(horizon):
            fs = fs_of_state[s]
            if policy == POLICY_NOOP:
                a = 0
            elif policy == POLICY_TRUE_MDP:
                a = mdp_policy[s]
            elif policy == POLICY_OBS_MDP:
                a = mdp_policy[est]
                if not legal_fs[fs_of_state[est], a]:
                    a = _best_legal_q(q[est], legal_fs[fs_of_state[est]])
            elif policy == POLICY_MAP_MDP:
                m = _argmax_first(b)
                a = mdp_policy[m]
                if not legal_fs[fs_of_state[m], a]:
                    a = _best_legal_q(q[m], legal_fs[fs_of_state[m]])
            else:
                m = _argmax_first(b)
                a = _alpha_action(alphas, alpha_actions, b, legal_fs[fs_of_state[m]])
            if not legal_fs[fs, a]:
                err[e] = ERR_ILLEGAL_ACTION
                break
            if a != 0:
                took[e] = True
            rew = r[s, a]
            cum[e] += rew
            disc[e] += discount * rew
            discount *= gamma
            s_next = _sample(p_cdf[a, s], uniforms[e, t, 0])
            steps[e] = t + 1
            if s_next >= _N_LIVE:
                rew = r[s_next, 0]
                cum[e] += rew
                disc[e] += discount * rew
                if s_next == _C:
                    terminal[e] = TERM_COMPLETED
                elif s_next == _T:
                    terminal[e] = TERM_TERMINATED
                else:
                    terminal[e] = TERM_FAILED
                break
            o = _sample(z_cdf[a, s_next], uniforms[e, t, 1])
            if policy == POLICY_OBS_MDP:
                est = obs_recon[o]
            elif tracks_belief:
                bp[:] = 0.0
                for i in range(n_s):
                    bi = b[i]
                    if bi != 0.0:
                        for j in range(n_s):
                            bp[j] += bi * p[a, i, j]
                norm = 0.0
                for j in range(n_s):
                    bp[j] *= z[a, j, o]
                    norm += bp[j]
                if not norm > 0.0:
                    err[e] = ERR_ZERO_NORMALIZER
                    break
                for j in range(n_s):
                    b[j] = bp[j] / norm
                mx = b[_argmax_first(b)]
                if mx < minmax:
                    minmax = mx
            s = s_next
        if tracks_belief:
            pmm[e] = minmax
    return terminal, steps, took, cum, disc, pmm, err


# ---------------------------------------------------------------------------
# Episode simulation, numpy (vectorised across episodes)


def _sample_np(cdf_rows, u):
    idx = (cdf_rows <= u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def _best_legal_q_np(q_rows, legal_rows):
    return np.where(legal_rows, q_rows, -np.inf).argmax(axis=1)


def simulate_np(policy, start_states, init_belief, uniforms, p, p_cdf, z, z_cdf, r,
                legal_fs, fs_of_state, mdp_policy, q, alphas, alpha_actions,
                obs_recon, gamma, horizon):
    n = start_states.shape[0]
    n_s = p.shape[1]
    terminal = np.full(n, TERM_HORIZON, dtype=np.int64)
    steps = np.zeros(n, dtype=np.int64)
    took = np.zeros(n, dtype=bool)
    cum = np.zeros(n)
    disc = np.zeros(n)
    err = np.zeros(n, dtype=np.int64)
    tracks_belief = policy in (POLICY_MAP_MDP, POLICY_POMDP)

    s = start_states.astype(np.int64).copy()
    active = np.ones(n, dtype=bool)
    b = np.tile(init_belief, (n, 1)) if tracks_belief else None
    minmax = np.full(n, init_belief.max())
    est = np.full(n, int(np.argmax(init_belief)), dtype=np.int64)
    discount = 1.0
    for t in range(horizon):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        si = s[idx]
        if policy == POLICY_NOOP:
            a = np.zeros(idx.size, dtype=np.int64)
        elif policy == POLICY_TRUE_MDP:
            a = mdp_policy[si]
        elif policy in (POLICY_OBS_MDP, POLICY_MAP_MDP):
            ref = est[idx] if policy == POLICY_OBS_MDP else b[idx].argmax(axis=1)
            a = mdp_policy[ref]
            lr = legal_fs[fs_of_state[ref]]
            bad = ~lr[np.arange(idx.size), a]
            if bad.any():
                a[bad] = _best_legal_q_np(q[ref[bad]], lr[bad])
        else:
            m = b[idx].argmax(axis=1)
            vals = b[idx] @ alphas.T
            lr = legal_fs[fs_of_state[m]]
            a = alpha_actions[vals.argmax(axis=1)]
            bad = ~lr[np.arange(idx.size), a]
            if bad.any():
                ok = lr[bad][:, alpha_actions]
                k = np.where(ok, vals[bad], -np.inf).argmax(axis=1)
                a[bad] = alpha_actions[k]

        illegal = ~legal_fs[fs_of_state[si], a]
        if illegal.any():
            err[idx[illegal]] = ERR_ILLEGAL_ACTION
            active[idx[illegal]] = False
            keep = ~illegal
            idx, si, a = idx[keep], si[keep], a[keep]
        took[idx] |= a != 0
        rew = r[si, a]
        cum[idx] += rew
        disc[idx] += discount * rew
        discount *= gamma
        s_next = _sample_np(p_cdf[a, si], uniforms[idx, t, 0])
        steps[idx] = t + 1

        done = s_next >= _N_LIVE
        if done.any():
            di, sn = idx[done], s_next[done]
            rew = r[sn, 0]
            cum[di] += rew
            disc[di] += discount * rew
            terminal[di] = np.select(
                [sn == _C, sn == _T], [TERM_COMPLETED, TERM_TERMINATED], TERM_FAILED
            )
            active[di] = False
        live = ~done
        idx, a, s_next = idx[live], a[live], s_next[live]
        o = _sample_np(z_cdf[a, s_next], uniforms[idx, t, 1])
        if policy == POLICY_OBS_MDP:
            est[idx] = obs_recon[o]
        elif tracks_belief:
            bp = np.empty((idx.size, n_s))
            for act in np.unique(a):
                sel = a == act
                bp[sel] = b[idx[sel]] @ p[act]
            bp *= z[a, :, o]
            norm = bp.sum(axis=1)
            zero = ~(norm > 0.0)
            if zero.any():
                err[idx[zero]] = ERR_ZERO_NORMALIZER
                active[idx[zero]] = False
                idx, bp, norm, s_next = idx[~zero], bp[~zero], norm[~zero], s_next[~zero]
            b[idx] = bp / norm[:, None]
            minmax[idx] = np.minimum(minmax[idx], b[idx].max(axis=1))
        s[idx] = s_next
    pmm = minmax if tracks_belief else np.full(n, np.nan)
    return terminal, steps, took, cum, disc, pmm, err


def simulate(*args, backend=None):
    if resolve_backend(backend) == "numba":
        return simulate_nb(*args)
    return simulate_np(*args)
