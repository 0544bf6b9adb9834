"""Compiled per-environment dynamics kernels.

Tree-recursive counterparts of the vectorized reference in ``sim``: composite
rigid-body mass matrix, recursive Newton-Euler bias forces, penalty contact and
the sub-stepped integrator. All vectors are in the world frame.

3-vectors inside the kernels are plain tuples: numba keeps them on the stack,
whereas every small temporary array is a heap allocation that costs more than
the arithmetic around it.
"""

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _v(a):
    return (a[0], a[1], a[2])


@njit(cache=True, inline="always")
def _put(out, t):
    out[0] = t[0]
    out[1] = t[1]
    out[2] = t[2]


@njit(cache=True, inline="always")
def _add(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


@njit(cache=True, inline="always")
def _sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


@njit(cache=True, inline="always")
def _scale(a, s):
    return (a[0] * s, a[1] * s, a[2] * s)


@njit(cache=True, inline="always")
def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


@njit(cache=True, inline="always")
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit(cache=True, inline="always")
def _mv(A, x):
    return (
        A[0, 0] * x[0] + A[0, 1] * x[1] + A[0, 2] * x[2],
        A[1, 0] * x[0] + A[1, 1] * x[1] + A[1, 2] * x[2],
        A[2, 0] * x[0] + A[2, 1] * x[1] + A[2, 2] * x[2],
    )


@njit(cache=True)
def _quat_to_mat(q, m):
    w, x, y, z = q[0], q[1], q[2], q[3]
    m[0, 0] = 1 - 2 * (y * y + z * z)
    m[0, 1] = 2 * (x * y - w * z)
    m[0, 2] = 2 * (x * z + w * y)
    m[1, 0] = 2 * (x * y + w * z)
    m[1, 1] = 1 - 2 * (x * x + z * z)
    m[1, 2] = 2 * (y * z - w * x)
    m[2, 0] = 2 * (x * z - w * y)
    m[2, 1] = 2 * (y * z + w * x)
    m[2, 2] = 1 - 2 * (x * x + y * y)


@njit(cache=True)
def _quat_step(q, w, h, out):
    """out = exp(w h) * q, normalized."""
    ang = np.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    half = 0.5 * ang * h
    if ang * h < 1e-8:
        k = 0.5 * h - (ang * h) ** 2 * h / 48.0
    else:
        k = np.sin(half) / ang
    dw, dx, dy, dz = np.cos(half), k * w[0], k * w[1], k * w[2]
    o0 = dw * q[0] - dx * q[1] - dy * q[2] - dz * q[3]
    o1 = dw * q[1] + dx * q[0] + dy * q[3] - dz * q[2]
    o2 = dw * q[2] - dx * q[3] + dy * q[0] + dz * q[1]
    o3 = dw * q[3] + dx * q[2] - dy * q[1] + dz * q[0]
    nrm = np.sqrt(o0 * o0 + o1 * o1 + o2 * o2 + o3 * o3)
    out[0], out[1], out[2], out[3] = o0 / nrm, o1 / nrm, o2 / nrm, o3 / nrm


@njit(cache=True)
def _fk(base_pos, base_quat, q, parent, child, origins, axes, x, R, jaxis):
    _put(x[0], base_pos)
    _quat_to_mat(base_quat, R[0])
    for j in range(len(parent)):
        p, c = parent[j], child[j]
        u0, u1, u2 = axes[j, 0], axes[j, 1], axes[j, 2]
        s, co = np.sin(q[j]), np.cos(q[j])
        t = 1.0 - co
        # Rodrigues rotation about the unit joint axis
        r00 = co + t * u0 * u0
        r01 = t * u0 * u1 - s * u2
        r02 = t * u0 * u2 + s * u1
        r10 = t * u0 * u1 + s * u2
        r11 = co + t * u1 * u1
        r12 = t * u1 * u2 - s * u0
        r20 = t * u0 * u2 - s * u1
        r21 = t * u1 * u2 + s * u0
        r22 = co + t * u2 * u2
        Rp = R[p]
        Rc = R[c]
        for i in range(3):
            a0, a1, a2 = Rp[i, 0], Rp[i, 1], Rp[i, 2]
            Rc[i, 0] = a0 * r00 + a1 * r10 + a2 * r20
            Rc[i, 1] = a0 * r01 + a1 * r11 + a2 * r21
            Rc[i, 2] = a0 * r02 + a1 * r12 + a2 * r22
        _put(x[c], _add(x[p], _mv(Rp, origins[j])))
        _put(jaxis[j], _mv(Rp, axes[j]))


@njit(cache=True)
def _velocities(v, fixed, parent, child, x, jaxis, w, vo, alpha, ao):
    off = 0 if fixed else 6
    w[0] = 0.0
    vo[0] = 0.0
    alpha[0] = 0.0
    ao[0] = 0.0
    if not fixed:
        _put(vo[0], (v[0], v[1], v[2]))
        _put(w[0], (v[3], v[4], v[5]))
    for j in range(len(parent)):
        p, c = parent[j], child[j]
        s = _scale(jaxis[j], v[off + j])
        r = _sub(x[c], x[p])
        wp = _v(w[p])
        wr = _cross(wp, r)
        _put(w[c], _add(wp, s))
        _put(vo[c], _add(vo[p], wr))
        _put(alpha[c], _add(alpha[p], _cross(wp, s)))
        _put(ao[c], _add(_add(ao[p], _cross(alpha[p], r)), _cross(wp, wr)))


@njit(cache=True)
def _link_inertials(x, R, coms, inertias, com, Iw):
    for l in range(len(coms)):
        Rl = R[l]
        I = inertias[l]
        _put(com[l], _add(x[l], _mv(Rl, coms[l])))
        for i in range(3):
            # row i of R I
            t0 = Rl[i, 0] * I[0, 0] + Rl[i, 1] * I[1, 0] + Rl[i, 2] * I[2, 0]
            t1 = Rl[i, 0] * I[0, 1] + Rl[i, 1] * I[1, 1] + Rl[i, 2] * I[2, 1]
            t2 = Rl[i, 0] * I[0, 2] + Rl[i, 1] * I[1, 2] + Rl[i, 2] * I[2, 2]
            for j in range(3):
                Iw[l, i, j] = t0 * Rl[j, 0] + t1 * Rl[j, 1] + t2 * Rl[j, 2]


@njit(cache=True)
def _bias(fixed, parent, child, x, jaxis, masses, com, Iw, w, alpha, ao, gravity, F, N, out):
    off = 0 if fixed else 6
    for l in range(len(masses)):
        d = _sub(com[l], x[l])
        wl = _v(w[l])
        al = _v(alpha[l])
        acc = _add(_add(ao[l], _cross(al, d)), _cross(wl, _cross(wl, d)))
        f = _scale(acc, masses[l])
        f = (f[0], f[1], f[2] + masses[l] * gravity)
        nl = _add(_mv(Iw[l], al), _cross(wl, _mv(Iw[l], wl)))
        _put(F[l], f)
        _put(N[l], _add(nl, _cross(d, f)))
    for j in range(len(parent) - 1, -1, -1):
        p, c = parent[j], child[j]
        out[off + j] = _dot(jaxis[j], N[c])
        fc = _v(F[c])
        _put(N[p], _add(_add(N[p], N[c]), _cross(_sub(x[c], x[p]), fc)))
        _put(F[p], _add(F[p], fc))
    if not fixed:
        for i in range(3):
            out[i] = F[0, i]
            out[3 + i] = N[0, i]


@njit(cache=True)
def _mass_matrix(fixed, parent, child, joint_of_link, x, jaxis, masses, com, Iw, armature, Ms, Ss, Js, M):
    n = len(parent)
    off = 0 if fixed else 6
    # subtree mass, first moment and inertia about the world origin
    for l in range(len(masses)):
        c = _v(com[l])
        m = masses[l]
        cc = _dot(c, c)
        Ms[l] = m
        _put(Ss[l], _scale(c, m))
        for i in range(3):
            for k in range(3):
                Js[l, i, k] = Iw[l, i, k] - m * c[i] * c[k]
            Js[l, i, i] += m * cc
    for j in range(n - 1, -1, -1):
        p, c = parent[j], child[j]
        Ms[p] += Ms[c]
        for i in range(3):
            Ss[p, i] += Ss[c, i]
            for k in range(3):
                Js[p, i, k] += Js[c, i, k]
    M[:, :] = 0.0
    x0 = _v(x[0])
    for j in range(n):
        c = child[j]
        a = _v(jaxis[j])
        o = _v(x[c])
        S = _v(Ss[c])
        h = _cross(a, _sub(S, _scale(o, Ms[c])))
        HO = _sub(_mv(Js[c], a), _cross(S, _cross(a, o)))
        k = j
        while k >= 0:
            val = _dot(jaxis[k], _sub(HO, _cross(x[child[k]], h)))
            M[off + k, off + j] = val
            M[off + j, off + k] = val
            k = joint_of_link[parent[k]]
        if not fixed:
            Hb = _sub(HO, _cross(x0, h))
            for i in range(3):
                M[i, off + j] = h[i]
                M[off + j, i] = h[i]
                M[3 + i, off + j] = Hb[i]
                M[off + j, 3 + i] = Hb[i]
        M[off + j, off + j] += armature[j]
    if not fixed:
        mt = Ms[0]
        S0 = _v(Ss[0])
        sr = _sub(S0, _scale(x0, mt))
        for i in range(3):
            e = (1.0 if i == 0 else 0.0, 1.0 if i == 1 else 0.0, 1.0 if i == 2 else 0.0)
            M[i, i] = mt
            lin_ang = _cross(e, sr)  # linear momentum from unit angular velocity e
            ang_lin = _cross(sr, e)  # angular momentum about x0 from unit linear velocity e
            Hw = _sub(_sub(_mv(Js[0], e), _cross(S0, _cross(e, x0))), _cross(x0, lin_ang))
            for r in range(3):
                M[r, 3 + i] = lin_ang[r]
                M[3 + r, i] = ang_lin[r]
                M[3 + r, 3 + i] = Hw[r]
        for r in range(6):
            for cc in range(r + 1, 6):
                avg = 0.5 * (M[r, cc] + M[cc, r])
                M[r, cc] = avg
                M[cc, r] = avg


@njit(cache=True)
def _cholesky(A, Lm):
    n = A.shape[0]
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= Lm[i, k] * Lm[j, k]
            if i == j:
                Lm[i, i] = np.sqrt(s)
            else:
                Lm[i, j] = s / Lm[j, j]
        for j in range(i + 1, n):
            Lm[i, j] = 0.0


@njit(cache=True)
def _chol_solve(Lm, b, out):
    n = Lm.shape[0]
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= Lm[i, k] * out[k]
        out[i] = s / Lm[i, i]
    for i in range(n - 1, -1, -1):
        s = out[i]
        for k in range(i + 1, n):
            s -= Lm[k, i] * out[k]
        out[i] = s / Lm[i, i]


@njit(cache=True)
def _point_jacobian(fixed, parent, child, joint_of_link, x, jaxis, l, p, J):
    off = 0 if fixed else 6
    J[:, :] = 0.0
    if not fixed:
        r0, r1, r2 = p[0] - x[0, 0], p[1] - x[0, 1], p[2] - x[0, 2]
        J[0, 0] = 1.0
        J[1, 1] = 1.0
        J[2, 2] = 1.0
        # w x r = -[r]x w
        J[0, 4], J[0, 5] = r2, -r1
        J[1, 3], J[1, 5] = -r2, r0
        J[2, 3], J[2, 4] = r1, -r0
    k = joint_of_link[l]
    while k >= 0:
        col = _cross(jaxis[k], _sub(p, x[child[k]]))
        J[0, off + k], J[1, off + k], J[2, off + k] = col[0], col[1], col[2]
        k = joint_of_link[parent[k]]


@njit(cache=True)
def _add_outer(A, coef, u):
    n = len(u)
    for i in range(n):
        if u[i] == 0.0:
            continue
        ci = coef * u[i]
        for j in range(n):
            A[i, j] += ci * u[j]


@njit(cache=True)
def _contact(fixed, parent, child, joint_of_link, x, R, jaxis, w, vo, s_link, s_off, s_rad,
             k_n, c_n, k_t, mu, forces, Q, Dm, Km, linearize, J):
    """Penalty contact forces into ``Q``; optionally their damping/stiffness into ``Dm``/``Km``."""
    nv = len(Q)
    for s in range(len(s_link)):
        l = s_link[s]
        xl = _v(x[l])
        p = _add(xl, _mv(R[l], s_off[s]))
        vel = _add(vo[l], _cross(w[l], _sub(p, xl)))
        depth = s_rad[s] - p[2]
        forces[s] = 0.0
        if depth <= 0.0:
            continue
        fn = k_n * depth - c_n * vel[2]
        if fn <= 0.0:
            continue
        ft0 = -k_t * vel[0]
        ft1 = -k_t * vel[1]
        mag = np.sqrt(ft0 * ft0 + ft1 * ft1)
        lim = mu * fn
        sliding = mag > lim
        if sliding:
            sc = lim / mag
            ft0 *= sc
            ft1 *= sc
        forces[s, 0], forces[s, 1], forces[s, 2] = ft0, ft1, fn
        _point_jacobian(fixed, parent, child, joint_of_link, x, jaxis, l, p, J)
        for i in range(nv):
            Q[i] += J[0, i] * ft0 + J[1, i] * ft1 + J[2, i] * fn
        if linearize:
            _add_outer(Km, k_n, J[2])
            _add_outer(Dm, c_n, J[2])
            if not sliding:
                _add_outer(Dm, k_t, J[0])
                _add_outer(Dm, k_t, J[1])


@njit(cache=True)
def _momentum(masses, com, x, w, vo):
    P = (0.0, 0.0, 0.0)
    for l in range(len(masses)):
        vc = _add(vo[l], _cross(w[l], _sub(com[l], x[l])))
        P = _add(P, _scale(vc, masses[l]))
    return P


@njit(cache=True)
def step_batch(fixed, base_pos, quat, q, v, q_des, kp, kd, strength, tau_lim,
               masses, coms, inertias, friction,
               parent, child, joint_of_link, origins, axes, armature,
               s_link, s_off, s_rad, k_n, c_n, k_t, gravity, dt, nsub,
               link_pos, link_rot, link_w, link_vo, tau_out, fc_last, fc_mean):
    """Advance every environment by ``nsub`` midpoint substeps, in place."""
    Nenv = base_pos.shape[0]
    n = len(parent)
    L = masses.shape[1]
    S = len(s_link)
    off = 0 if fixed else 6
    nv = off + n
    x = np.empty((L, 3))
    R = np.empty((L, 3, 3))
    jaxis = np.empty((max(n, 1), 3))
    w = np.empty((L, 3))
    vo = np.empty((L, 3))
    alpha = np.empty((L, 3))
    ao = np.empty((L, 3))
    com = np.empty((L, 3))
    Iw = np.empty((L, 3, 3))
    F = np.empty((L, 3))
    Nt = np.empty((L, 3))
    Ms = np.empty(L)
    Ss = np.empty((L, 3))
    Js = np.empty((L, 3, 3))
    M = np.empty((nv, nv))
    A = np.empty((nv, nv))
    Lm = np.empty((nv, nv))
    Dm = np.empty((nv, nv))
    Km = np.empty((nv, nv))
    J = np.empty((3, nv))
    b = np.empty(nv)
    G = np.empty(nv)
    resid = np.empty(nv)
    step = np.empty(nv)
    dv = np.empty(nv)
    vel = np.empty(nv)
    vpass = np.empty(nv)
    qm = np.empty(max(n, 1))
    pm = np.empty(3)
    qm_quat = np.empty(4)
    forces = np.zeros((max(S, 1), 3))
    P0 = (0.0, 0.0, 0.0)
    for e in range(Nenv):
        fc_mean[e] = 0.0
        mt = 0.0
        for l in range(L):
            mt += masses[e, l]
        for sub in range(nsub):
            vel[:] = v[e]
            # momentum before the substep
            if not fixed:
                _fk(base_pos[e], quat[e], q[e], parent, child, origins, axes, x, R, jaxis)
                _link_inertials(x, R, coms[e], inertias[e], com, Iw)
                _velocities(vel, fixed, parent, child, x, jaxis, w, vo, alpha, ao)
                P0 = _momentum(masses[e], com, x, w, vo)
            # drift to the midpoint configuration
            for i in range(3):
                pm[i] = base_pos[e, i]
            qm_quat[:] = quat[e]
            if not fixed:
                for i in range(3):
                    pm[i] += 0.5 * dt * vel[i]
                _quat_step(quat[e], vel[3:6], 0.5 * dt, qm_quat)
            for j in range(n):
                qm[j] = q[e, j] + 0.5 * dt * vel[off + j]
            _fk(pm, qm_quat, qm, parent, child, origins, axes, x, R, jaxis)
            _link_inertials(x, R, coms[e], inertias[e], com, Iw)
            _mass_matrix(fixed, parent, child, joint_of_link, x, jaxis, masses[e], com, Iw, armature, Ms, Ss, Js, M)
            # Newton iterations on the implicit-midpoint residual
            #   M dv / h - G(q_m, v + dv / 2) + (h / 4) K dv = 0
            # with A = M + (h / 2) D + (h^2 / 4) K from the linear stiff forces.
            dv[:] = 0.0
            Dm[:, :] = 0.0
            Km[:, :] = 0.0
            for it in range(2):
                for i in range(nv):
                    vpass[i] = vel[i] + 0.5 * dv[i]
                _velocities(vpass, fixed, parent, child, x, jaxis, w, vo, alpha, ao)
                _bias(fixed, parent, child, x, jaxis, masses[e], com, Iw, w, alpha, ao, gravity, F, Nt, b)
                G[:] = 0.0
                _contact(fixed, parent, child, joint_of_link, x, R, jaxis, w, vo, s_link, s_off, s_rad,
                         k_n, c_n, k_t, friction[e], forces, G, Dm, Km, it == 0, J)
                for j in range(n):
                    t = strength[e, j] * (kp[e, j] * (q_des[e, j] - qm[j]) - kd[e, j] * vpass[off + j])
                    if t > tau_lim[j]:
                        t = tau_lim[j]
                    elif t < -tau_lim[j]:
                        t = -tau_lim[j]
                    elif it == 0:
                        Km[off + j, off + j] += strength[e, j] * kp[e, j]
                        Dm[off + j, off + j] += strength[e, j] * kd[e, j]
                    tau_out[e, j] = t
                    G[off + j] += t
                if it == 0:
                    for i in range(nv):
                        for k in range(nv):
                            A[i, k] = M[i, k] + 0.5 * dt * Dm[i, k] + 0.25 * dt * dt * Km[i, k]
                    _cholesky(A, Lm)
                    for i in range(nv):
                        resid[i] = b[i] - G[i]
                else:
                    for i in range(nv):
                        s = b[i] - G[i]
                        for k in range(nv):
                            s += (M[i, k] / dt + 0.25 * dt * Km[i, k]) * dv[k]
                        resid[i] = s
                _chol_solve(Lm, resid, step)
                for i in range(nv):
                    dv[i] -= dt * step[i]
            for i in range(nv):
                vel[i] += dv[i]
            # drift to the end of the substep
            if not fixed:
                for i in range(3):
                    base_pos[e, i] = pm[i] + 0.5 * dt * vel[i]
                _quat_step(qm_quat, vel[3:6], 0.5 * dt, quat[e])
            for j in range(n):
                q[e, j] = qm[j] + 0.5 * dt * vel[off + j]
            for s in range(S):
                for i in range(3):
                    fc_last[e, s, i] = forces[s, i]
                    fc_mean[e, s, i] += forces[s, i] / nsub
            if not fixed:
                t0, t1, t2 = P0[0], P0[1], P0[2] - dt * mt * gravity
                for s in range(S):
                    t0 += dt * forces[s, 0]
                    t1 += dt * forces[s, 1]
                    t2 += dt * forces[s, 2]
                _fk(base_pos[e], quat[e], q[e], parent, child, origins, axes, x, R, jaxis)
                _link_inertials(x, R, coms[e], inertias[e], com, Iw)
                _velocities(vel, fixed, parent, child, x, jaxis, w, vo, alpha, ao)
                P1 = _momentum(masses[e], com, x, w, vo)
                vel[0] += (t0 - P1[0]) / mt
                vel[1] += (t1 - P1[1]) / mt
                vel[2] += (t2 - P1[2]) / mt
            v[e] = vel
        _fk(base_pos[e], quat[e], q[e], parent, child, origins, axes, x, R, jaxis)
        _velocities(v[e], fixed, parent, child, x, jaxis, w, vo, alpha, ao)
        link_pos[e] = x
        link_rot[e] = R
        link_w[e] = w
        link_vo[e] = vo


@njit(cache=True)
def dynamics_terms(fixed, base_pos, quat, q, v, masses, coms, inertias, parent, child, joint_of_link,
                   origins, axes, armature, gravity):
    """Mass matrix and bias of one state (for cross-checking the reference)."""
    n = len(parent)
    L = len(masses)
    nv = (0 if fixed else 6) + n
    x = np.empty((L, 3))
    R = np.empty((L, 3, 3))
    jaxis = np.empty((max(n, 1), 3))
    w = np.empty((L, 3))
    vo = np.empty((L, 3))
    alpha = np.empty((L, 3))
    ao = np.empty((L, 3))
    com = np.empty((L, 3))
    Iw = np.empty((L, 3, 3))
    M = np.empty((nv, nv))
    b = np.zeros(nv)
    _fk(base_pos, quat, q, parent, child, origins, axes, x, R, jaxis)
    _link_inertials(x, R, coms, inertias, com, Iw)
    _mass_matrix(fixed, parent, child, joint_of_link, x, jaxis, masses, com, Iw, armature,
                 np.empty(L), np.empty((L, 3)), np.empty((L, 3, 3)), M)
    _velocities(v, fixed, parent, child, x, jaxis, w, vo, alpha, ao)
    _bias(fixed, parent, child, x, jaxis, masses, com, Iw, w, alpha, ao, gravity, np.empty((L, 3)), np.empty((L, 3)), b)
    return M, b
