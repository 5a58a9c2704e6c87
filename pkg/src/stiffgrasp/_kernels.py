"""Compiled inner loops for the planar co-rotational simulator.

All kernels are sequential and avoid fastmath so results are bit-reproducible.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def polar2(f00, f01, f10, f11):
    """Rotation factor of a 2x2 matrix; returns (c, s, ok)."""
    det = f00 * f11 - f01 * f10
    a = f00 + f11
    b = f10 - f01
    n = np.sqrt(a * a + b * b)
    if det <= 0.0 or n == 0.0:
        return 1.0, 0.0, False
    return a / n, b / n, True


@njit(cache=True)
def element_rotations(x, tris, Dm_inv, R):
    """Update per-element rotations in place; inverted elements keep their
    previous rotation. Returns the inversion flags."""
    m = tris.shape[0]
    inverted = np.zeros(m, np.bool_)
    for e in range(m):
        i0, i1, i2 = tris[e, 0], tris[e, 1], tris[e, 2]
        d00 = x[i1, 0] - x[i0, 0]
        d10 = x[i1, 1] - x[i0, 1]
        d01 = x[i2, 0] - x[i0, 0]
        d11 = x[i2, 1] - x[i0, 1]
        f00 = d00 * Dm_inv[e, 0, 0] + d01 * Dm_inv[e, 1, 0]
        f01 = d00 * Dm_inv[e, 0, 1] + d01 * Dm_inv[e, 1, 1]
        f10 = d10 * Dm_inv[e, 0, 0] + d11 * Dm_inv[e, 1, 0]
        f11 = d10 * Dm_inv[e, 0, 1] + d11 * Dm_inv[e, 1, 1]
        c, s, ok = polar2(f00, f01, f10, f11)
        if ok:
            R[e, 0, 0] = c
            R[e, 0, 1] = -s
            R[e, 1, 0] = s
            R[e, 1, 1] = c
        else:
            inverted[e] = True
    return inverted


@njit(cache=True)
def corotated_element(x, X, tris, R, Ke, e, u, f, Kr):
    """Local displacement u = R^T x - X, force f = -R K u and the rotated
    stiffness Kr = R K R^T for element ``e`` (all 6-vectors / 6x6)."""
    c = R[e, 0, 0]
    s = R[e, 1, 0]
    # relative to the first vertex: K kills translations, and small
    # coordinates keep the rigid-motion residual at roundoff level
    i0 = tris[e, 0]
    u[0] = 0.0
    u[1] = 0.0
    for a in range(1, 3):
        i = tris[e, a]
        dx = x[i, 0] - x[i0, 0]
        dy = x[i, 1] - x[i0, 1]
        u[2 * a] = c * dx + s * dy - (X[i, 0] - X[i0, 0])
        u[2 * a + 1] = -s * dx + c * dy - (X[i, 1] - X[i0, 1])
    for r in range(6):
        acc = 0.0
        for q in range(6):
            acc += Ke[e, r, q] * u[q]
        f[r] = acc
    for a in range(3):
        fx = f[2 * a]
        fy = f[2 * a + 1]
        f[2 * a] = -(c * fx - s * fy)
        f[2 * a + 1] = -(s * fx + c * fy)
    # Kr = Rh K Rh^T, block-wise
    for a in range(3):
        for b in range(3):
            k00 = Ke[e, 2 * a, 2 * b]
            k01 = Ke[e, 2 * a, 2 * b + 1]
            k10 = Ke[e, 2 * a + 1, 2 * b]
            k11 = Ke[e, 2 * a + 1, 2 * b + 1]
            # t = R k
            t00 = c * k00 - s * k10
            t01 = c * k01 - s * k11
            t10 = s * k00 + c * k10
            t11 = s * k01 + c * k11
            # t R^T
            Kr[2 * a, 2 * b] = t00 * c - t01 * s
            Kr[2 * a, 2 * b + 1] = t00 * s + t01 * c
            Kr[2 * a + 1, 2 * b] = t10 * c - t11 * s
            Kr[2 * a + 1, 2 * b + 1] = t10 * s + t11 * c


@njit(cache=True)
def elastic_forces_kernel(x, X, tris, R, Ke):
    n = x.shape[0]
    out = np.zeros((n, 2))
    u = np.zeros(6)
    f = np.zeros(6)
    Kr = np.zeros((6, 6))
    energy = 0.0
    for e in range(tris.shape[0]):
        corotated_element(x, X, tris, R, Ke, e, u, f, Kr)
        for a in range(3):
            i = tris[e, a]
            out[i, 0] += f[2 * a]
            out[i, 1] += f[2 * a + 1]
        # 1/2 u.K.u == -1/2 (R^T f).u ; recompute directly for clarity
        for r in range(6):
            for q in range(6):
                energy += 0.5 * u[r] * Ke[e, r, q] * u[q]
    return out, energy


@njit(cache=True)
def contact_kernel(x, v, caps, cap_vel, kc, cd, mu, vslip, force, jac_x, jac_v, active, per_cap):
    """Penalty contact of vertices against capsules.

    Writes per-vertex force, the 2x2 position/velocity Jacobians of the
    (negated) contact force, and per-capsule [normal sum, fx, fy].
    """
    n = x.shape[0]
    for i in range(n):
        active[i] = False
        for a in range(2):
            force[i, a] = 0.0
            for b in range(2):
                jac_x[i, a, b] = 0.0
                jac_v[i, a, b] = 0.0
    for k in range(caps.shape[0]):
        per_cap[k, 0] = 0.0
        per_cap[k, 1] = 0.0
        per_cap[k, 2] = 0.0
    for k in range(caps.shape[0]):
        ax, ay, bx, by, rad = caps[k, 0], caps[k, 1], caps[k, 2], caps[k, 3], caps[k, 4]
        ex = bx - ax
        ey = by - ay
        ee = ex * ex + ey * ey
        for i in range(n):
            px = x[i, 0] - ax
            py = x[i, 1] - ay
            t = 0.0
            if ee > 0.0:
                t = (px * ex + py * ey) / ee
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            dx = px - t * ex
            dy = py - t * ey
            dist = np.sqrt(dx * dx + dy * dy)
            depth = rad - dist
            if depth <= 0.0 or dist == 0.0:
                continue
            nx = dx / dist
            ny = dy / dist
            rvx = v[i, 0] - cap_vel[k, 0]
            rvy = v[i, 1] - cap_vel[k, 1]
            vn = rvx * nx + rvy * ny
            fn = kc * depth - cd * vn
            if fn <= 0.0:
                continue
            tx = rvx - vn * nx
            ty = rvy - vn * ny
            vt = np.sqrt(tx * tx + ty * ty)
            denom = vt if vt > vslip else vslip
            ct = mu * fn / denom
            fx = fn * nx - ct * tx
            fy = fn * ny - ct * ty
            force[i, 0] += fx
            force[i, 1] += fy
            active[i] = True
            per_cap[k, 0] += fn
            per_cap[k, 1] += fx
            per_cap[k, 2] += fy
            nn00 = nx * nx
            nn01 = nx * ny
            nn11 = ny * ny
            jac_x[i, 0, 0] += kc * nn00
            jac_x[i, 0, 1] += kc * nn01
            jac_x[i, 1, 0] += kc * nn01
            jac_x[i, 1, 1] += kc * nn11
            jac_v[i, 0, 0] += cd * nn00 + ct * (1.0 - nn00)
            jac_v[i, 0, 1] += cd * nn01 - ct * nn01
            jac_v[i, 1, 0] += cd * nn01 - ct * nn01
            jac_v[i, 1, 1] += cd * nn11 + ct * (1.0 - nn11)


@njit(cache=True)
def csr_matvec(indptr, indices, data, p, out):
    for r in range(out.shape[0]):
        acc = 0.0
        for k in range(indptr[r], indptr[r + 1]):
            acc += data[k] * p[indices[k]]
        out[r] = acc


@njit(cache=True)
def pcg(indptr, indices, data, diag, b, x, fixed, tol, maxit):
    """Jacobi-preconditioned CG; ``x`` holds the initial guess and the result.

    Returns (iterations, relative residual). Dofs flagged in ``fixed`` are
    held at zero.
    """
    n = b.shape[0]
    bnorm = 0.0
    for i in range(n):
        if fixed[i]:
            b[i] = 0.0
            x[i] = 0.0
        bnorm += b[i] * b[i]
    bnorm = np.sqrt(bnorm)
    if bnorm == 0.0:
        for i in range(n):
            x[i] = 0.0
        return 0, 0.0
    r = np.empty(n)
    z = np.empty(n)
    p = np.empty(n)
    q = np.empty(n)
    csr_matvec(indptr, indices, data, x, q)
    rz = 0.0
    rr = 0.0
    for i in range(n):
        r[i] = 0.0 if fixed[i] else b[i] - q[i]
        z[i] = r[i] / diag[i]
        p[i] = z[i]
        rz += r[i] * z[i]
        rr += r[i] * r[i]
    it = 0
    res = np.sqrt(rr) / bnorm
    while res > tol and it < maxit:
        csr_matvec(indptr, indices, data, p, q)
        pq = 0.0
        for i in range(n):
            if fixed[i]:
                q[i] = 0.0
            pq += p[i] * q[i]
        if pq <= 0.0:
            break
        alpha = rz / pq
        rr = 0.0
        for i in range(n):
            x[i] += alpha * p[i]
            r[i] -= alpha * q[i]
            rr += r[i] * r[i]
        res = np.sqrt(rr) / bnorm
        it += 1
        if res <= tol:
            break
        rz_new = 0.0
        for i in range(n):
            z[i] = r[i] / diag[i]
            rz_new += r[i] * z[i]
        beta = rz_new / rz
        rz = rz_new
        for i in range(n):
            p[i] = z[i] + beta * p[i]
    return it, res


@njit(cache=True)
def substep_kernel(x, v, X, tris, Ke, beta_e, mass, alpha_v, Dm_inv, R, fixed,
                   caps, cap_vel, kc, cd, mu, vslip, gx, gy, h,
                   indptr, indices, elem_map, diag_map, tol, maxit, per_cap):
    """One linearised implicit Euler substep, in place on x, v and R.

    Returns (cg iterations, relative residual, inverted element count).
    """
    n = x.shape[0]
    m = tris.shape[0]
    ndof = 2 * n
    inverted = element_rotations(x, tris, Dm_inv, R)
    n_inv = 0
    for e in range(m):
        if inverted[e]:
            n_inv += 1

    data = np.zeros(indices.shape[0])
    b = np.zeros(ndof)
    f = np.zeros(ndof)
    u = np.zeros(6)
    fe = np.zeros(6)
    Kr = np.zeros((6, 6))
    kv = np.zeros(ndof)  # K v
    for e in range(m):
        corotated_element(x, X, tris, R, Ke, e, u, fe, Kr)
        be = beta_e[e]
        ck = h * be + h * h
        for a in range(3):
            ia = tris[e, a]
            f[2 * ia] += fe[2 * a]
            f[2 * ia + 1] += fe[2 * a + 1]
            for r in range(2):
                acc = 0.0
                for bb in range(3):
                    ib = tris[e, bb]
                    for s in range(2):
                        kk = Kr[2 * a + r, 2 * bb + s]
                        data[elem_map[e, 2 * a + r, 2 * bb + s]] += ck * kk
                        acc += kk * v[ib, s]
                kv[2 * ia + r] += acc
                # stiffness-proportional damping force -beta K v
                f[2 * ia + r] -= be * acc
    # K v accumulates over elements; the B-W term is -h K v
    for i in range(n):
        ma = mass[i] * (1.0 + h * alpha_v[i])
        data[diag_map[2 * i]] += ma
        data[diag_map[2 * i + 1]] += ma
        f[2 * i] += mass[i] * (gx - alpha_v[i] * v[i, 0])
        f[2 * i + 1] += mass[i] * (gy - alpha_v[i] * v[i, 1])

    cforce = np.zeros((n, 2))
    jx = np.zeros((n, 2, 2))
    jv = np.zeros((n, 2, 2))
    active = np.zeros(n, np.bool_)
    contact_kernel(x, v, caps, cap_vel, kc, cd, mu, vslip, cforce, jx, jv, active, per_cap)

    # relative velocity of an active vertex to the obstacle it touches is
    # approximated with the mean obstacle velocity among touching capsules;
    # the per-vertex Jacobian already aggregates all of them.
    for i in range(n):
        f[2 * i] += cforce[i, 0]
        f[2 * i + 1] += cforce[i, 1]
        if active[i]:
            for r in range(2):
                for s in range(2):
                    data[elem_map_diag(diag_map, indptr, indices, i, r, s)] += h * jv[i, r, s] + h * h * jx[i, r, s]

    for dof in range(ndof):
        b[dof] = h * (f[dof] - h * kv[dof])
    if caps.shape[0] > 0:
        _contact_bw_term(x, v, caps, cap_vel, kc, active, jx, h, b)

    diag = np.empty(ndof)
    for dof in range(ndof):
        diag[dof] = data[diag_map[dof]]
    dv = np.zeros(ndof)
    it, res = pcg(indptr, indices, data, diag, b, dv, fixed, tol, maxit)

    any_fixed = False
    for dof in range(ndof):
        if fixed[dof]:
            any_fixed = True
            break
    if not any_fixed and res > 0.0:
        _translation_correction(indptr, indices, data, b, dv)

    for i in range(n):
        v[i, 0] += dv[2 * i]
        v[i, 1] += dv[2 * i + 1]
        x[i, 0] += h * v[i, 0]
        x[i, 1] += h * v[i, 1]
    return it, res, n_inv


@njit(cache=True)
def elem_map_diag(diag_map, indptr, indices, i, r, s):
    if r == s:
        return diag_map[2 * i + r]
    row = 2 * i + r
    col = 2 * i + s
    for k in range(indptr[row], indptr[row + 1]):
        if indices[k] == col:
            return k
    return -1


@njit(cache=True)
def _contact_bw_term(x, v, caps, cap_vel, kc, active, jx, h, b):
    """-h^2 Kc (v - v_obstacle) for vertices in contact."""
    n = x.shape[0]
    for i in range(n):
        if not active[i]:
            continue
        # obstacle velocity of the deepest capsule touching vertex i
        best = -1
        bestd = 0.0
        for k in range(caps.shape[0]):
            ax, ay, bx, by, rad = caps[k, 0], caps[k, 1], caps[k, 2], caps[k, 3], caps[k, 4]
            ex = bx - ax
            ey = by - ay
            ee = ex * ex + ey * ey
            px = x[i, 0] - ax
            py = x[i, 1] - ay
            t = 0.0
            if ee > 0.0:
                t = min(1.0, max(0.0, (px * ex + py * ey) / ee))
            dx = px - t * ex
            dy = py - t * ey
            d = rad - np.sqrt(dx * dx + dy * dy)
            if d > bestd:
                bestd = d
                best = k
        if best < 0:
            continue
        rvx = v[i, 0] - cap_vel[best, 0]
        rvy = v[i, 1] - cap_vel[best, 1]
        b[2 * i] -= h * h * (jx[i, 0, 0] * rvx + jx[i, 0, 1] * rvy)
        b[2 * i + 1] -= h * h * (jx[i, 1, 0] * rvx + jx[i, 1, 1] * rvy)


@njit(cache=True)
def _translation_correction(indptr, indices, data, b, dv):
    """Galerkin correction of dv on the two rigid-translation modes."""
    n = b.shape[0]
    q = np.empty(n)
    csr_matvec(indptr, indices, data, dv, q)
    s0 = 0.0
    s1 = 0.0
    a00 = 0.0
    a01 = 0.0
    a11 = 0.0
    for row in range(n):
        rres = b[row] - q[row]
        if row % 2 == 0:
            s0 += rres
        else:
            s1 += rres
        for k in range(indptr[row], indptr[row + 1]):
            col = indices[k]
            if row % 2 == 0 and col % 2 == 0:
                a00 += data[k]
            elif row % 2 == 0:
                a01 += data[k]
            elif col % 2 == 1:
                a11 += data[k]
    det = a00 * a11 - a01 * a01
    if det == 0.0:
        return
    d0 = (a11 * s0 - a01 * s1) / det
    d1 = (a00 * s1 - a01 * s0) / det
    for row in range(n):
        if row % 2 == 0:
            dv[row] += d0
        else:
            dv[row] += d1
