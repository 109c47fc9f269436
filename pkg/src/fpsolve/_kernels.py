"""Inner loops: Euler-Maruyama stepping, box counting, conditional Gaussian filtering.

Every kernel receives pre-drawn noise increments ``incs`` (already scaled by
``sqrt(dt)`` and the noise matrix), so both backends consume the random
stream identically and produce the same trajectory. Kernels return ``-1`` on
success or the index of the first step whose state is not finite.

With numba active the loop sources below are compiled as-is; the numpy
backend keeps the stepping loops interpreted and vectorises the counting.
"""
import numpy as np

from ._accel import USE_NUMBA, numba


def advance(x, drift, dt, incs):
    n = x.shape[1]
    for k in range(incs.shape[0]):
        f = drift(x)
        for i in range(n):
            x[0, i] = x[0, i] + f[0, i] * dt + incs[k, i]
        for i in range(n):
            if not np.isfinite(x[0, i]):
                return k
    return -1


def advance_record(x, drift, dt, incs, stride, out):
    """Advance through ``incs`` and store the state after every ``stride`` steps."""
    n = x.shape[1]
    row = 0
    for k in range(incs.shape[0]):
        f = drift(x)
        for i in range(n):
            x[0, i] = x[0, i] + f[0, i] * dt + incs[k, i]
        for i in range(n):
            if not np.isfinite(x[0, i]):
                return k
        if (k + 1) % stride == 0:
            for i in range(n):
                out[row, i] = x[0, i]
            row += 1
    return -1


_advance_record_py = advance_record


def _count_full_loop(x, drift, dt, incs, lower, spacing, npts, counts):
    n = x.shape[1]
    for k in range(incs.shape[0]):
        f = drift(x)
        for i in range(n):
            x[0, i] = x[0, i] + f[0, i] * dt + incs[k, i]
        flat = 0
        inside = True
        for i in range(n):
            if not np.isfinite(x[0, i]):
                return k
            j = int(np.floor((x[0, i] - lower[i]) / spacing[i] + 0.5))
            if j < 0 or j >= npts:
                inside = False
            flat = flat * npts + j
        if inside:
            counts[flat] += 1
    return -1


def _count_split_loop(x, drift, dt, incs, lower, spacing, npts, half, ptr, idx, eta):
    n = x.shape[1]
    nbuckets = npts**half
    for k in range(incs.shape[0]):
        f = drift(x)
        for i in range(n):
            x[0, i] = x[0, i] + f[0, i] * dt + incs[k, i]
        c1 = 0
        c2 = 0
        inside = True
        for i in range(n):
            if not np.isfinite(x[0, i]):
                return k
            j = int(np.floor((x[0, i] - lower[i]) / spacing[i] + 0.5))
            if j < 0 or j >= npts:
                inside = False
            if i < half:
                c1 = c1 * npts + j
            else:
                c2 = c2 * npts + j
        if not inside:
            continue
        # sorted-list intersection of the two half-bucket memberships
        a = ptr[c1]
        a_end = ptr[c1 + 1]
        b = ptr[nbuckets + c2]
        b_end = ptr[nbuckets + c2 + 1]
        hits = 0
        hit = -1
        while a < a_end and b < b_end:
            if idx[a] == idx[b]:
                hits += 1
                hit = idx[a]
                a += 1
                b += 1
            elif idx[a] < idx[b]:
                a += 1
            else:
                b += 1
        if hits == 1:
            eta[hit] += 1
    return -1


def cg_filter_run(x, drift, dt, incs, t0, n_first, coef_a0, coef_a1, coef_b0, coef_b1,
                  obs_inv, state_noise, mean, cov, record_every, step0,
                  ref_first, ref_second, order, key, half_width, sums, visits, n_records):
    """Co-integrate the trajectory and the conditional Gaussian filter.

    ``x = (x_I, x_II)`` with ``x_I`` the first ``n_first`` coordinates. The
    filter for ``x_II`` given the ``x_I`` path is advanced by explicit Euler.
    At recording times, every reference point whose ``x_I`` block lies in the
    box of half-width ``half_width`` around the current ``x_I`` receives the
    Gaussian density of its ``x_II`` block. References are pre-sorted by their
    first coordinate (``key``) so the candidate range is found by bisection.
    """
    n = x.shape[1]
    m = n - n_first
    t = t0
    xi_old = np.empty((1, n_first))
    for k in range(incs.shape[0]):
        for i in range(n_first):
            xi_old[0, i] = x[0, i]
        big_a0 = coef_a0(t, xi_old)
        big_a1 = coef_a1(t, xi_old)
        small_a0 = coef_b0(t, xi_old)
        small_a1 = coef_b1(t, xi_old)

        f = drift(x)
        for i in range(n):
            x[0, i] = x[0, i] + f[0, i] * dt + incs[k, i]
        for i in range(n):
            if not np.isfinite(x[0, i]):
                return k
        dxi = np.empty(n_first)
        for i in range(n_first):
            dxi[i] = x[0, i] - xi_old[0, i]

        innov = dxi - (big_a0 + big_a1 @ mean) * dt
        ra = cov @ big_a1.T
        gain = ra @ obs_inv
        mean_new = mean + (small_a0 + small_a1 @ mean) * dt + gain @ innov
        dcov = small_a1 @ cov + cov @ small_a1.T + state_noise - gain @ ra.T
        cov_new = cov + dcov * dt
        cov_new = 0.5 * (cov_new + cov_new.T)
        if m == 1:
            if cov_new[0, 0] < 0.0:
                cov_new[0, 0] = 0.0
        else:
            w, v = np.linalg.eigh(cov_new)
            if w[0] < 0.0:
                w = np.maximum(w, 0.0)
                cov_new = (v * w) @ v.T
                cov_new = 0.5 * (cov_new + cov_new.T)
        mean[:] = mean_new
        cov[:, :] = cov_new
        t += dt

        if (step0 + k + 1) % record_every != 0:
            continue
        n_records[0] += 1
        lo = np.searchsorted(key, x[0, 0] - half_width, side="right")
        hi = np.searchsorted(key, x[0, 0] + half_width, side="left")
        if lo >= hi:
            continue
        chol = np.eye(m)
        have_chol = False
        log_norm = 0.0
        for p in range(lo, hi):
            j = order[p]
            close = True
            for i in range(n_first):
                if abs(x[0, i] - ref_first[j, i]) >= half_width:
                    close = False
                    break
            if not close:
                continue
            if not have_chol:
                chol[:, :] = np.linalg.cholesky(cov)
                have_chol = True
                log_det = 0.0
                for i in range(m):
                    log_det += 2.0 * np.log(chol[i, i])
                log_norm = -0.5 * (m * np.log(2.0 * np.pi) + log_det)
            r = ref_second[j] - mean
            # forward substitution L z = r
            z = np.empty(m)
            for i in range(m):
                s = r[i]
                for q in range(i):
                    s -= chol[i, q] * z[q]
                z[i] = s / chol[i, i]
            sums[j] += np.exp(log_norm - 0.5 * np.dot(z, z))
            visits[j] += 1
    return -1


# -------------------------------------------------------------- numpy paths


def _record_numpy(x, drift, dt, incs):
    out = np.empty_like(incs)
    status = _advance_record_py(x, drift, dt, incs, 1, out)
    stop = incs.shape[0] if status < 0 else status
    return status, out[:stop]


def _count_full_numpy(x, drift, dt, incs, lower, spacing, npts, counts):
    status, states = _record_numpy(x, drift, dt, incs)
    idx = np.floor((states - lower) / spacing + 0.5).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < npts), axis=1)
    flat = np.ravel_multi_index(tuple(idx[ok].T), (npts,) * x.shape[1])
    counts += np.bincount(flat, minlength=counts.size).astype(counts.dtype)
    return status


def _count_split_numpy(x, drift, dt, incs, lower, spacing, npts, half, ptr, idx, eta):
    # membership lists intersect in exactly {j} iff the sample's (first-half,
    # second-half) bucket pair equals that of exactly one reference point
    status, states = _record_numpy(x, drift, dt, incs)
    n = x.shape[1]
    nbuckets = npts**half
    cells = np.floor((states - lower) / spacing + 0.5).astype(np.int64)
    ok = np.all((cells >= 0) & (cells < npts), axis=1)
    cells = cells[ok]
    shape = (npts,) * half
    keys = (np.ravel_multi_index(tuple(cells[:, :half].T), shape) * nbuckets
            + np.ravel_multi_index(tuple(cells[:, half:].T), shape))
    ref_c1 = np.repeat(np.arange(nbuckets), np.diff(ptr[: nbuckets + 1]))
    ref_j1 = idx[: ptr[nbuckets]]
    ref_c2 = np.repeat(np.arange(nbuckets), np.diff(ptr[nbuckets:]))
    ref_j2 = idx[ptr[nbuckets]:]
    first = np.empty(eta.size, dtype=np.int64)
    second = np.empty(eta.size, dtype=np.int64)
    first[ref_j1] = ref_c1
    second[ref_j2] = ref_c2
    ref_keys = first * nbuckets + second
    uniq, inverse, mult = np.unique(ref_keys, return_inverse=True, return_counts=True)
    pos = np.searchsorted(uniq, keys)
    pos = np.minimum(pos, uniq.size - 1)
    hit = (uniq[pos] == keys) & (mult[pos] == 1)
    owner = np.full(uniq.size, -1, dtype=np.int64)
    single = mult[inverse] == 1
    owner[inverse[single]] = np.arange(eta.size)[single]
    eta += np.bincount(owner[pos[hit]], minlength=eta.size).astype(eta.dtype)
    return status


PY_KERNELS = {
    "advance": advance,
    "advance_record": advance_record,
    "count_full": _count_full_numpy,
    "count_split": _count_split_numpy,
    "cg_filter_run": cg_filter_run,
}

if USE_NUMBA:
    _jit = numba.njit(cache=True)
    advance = _jit(advance)
    advance_record = _jit(advance_record)
    count_full = _jit(_count_full_loop)
    count_split = _jit(_count_split_loop)
    cg_filter_run = _jit(cg_filter_run)
else:
    count_full = _count_full_numpy
    count_split = _count_split_numpy
