"""Compiled event loops for the Harris construction.

Every site ``x`` owns a Poisson clock of rate ``alpha(x)``.  The ``k``-th ring
of that clock and its two auxiliary uniforms come from a counter-based hash
of ``(seed, x, k, lane)``, so the stream is replayable in any order and two
different loops that visit events differently still see identical events:

* lane 0: exponential increment ``-log(U) / alpha(x)``
* lane 1: ``u_dir``, read through the kernel CDF
* lane 2: ``u_acc``, the particle moves iff ``u_acc < g(eta(x))``

``run_heap`` processes events in global time order with a binary heap and
supports coupled replicas, any finite kernel and all boundary policies.
``run_sweep`` handles a single replica under a totally asymmetric kernel on a
non-periodic window: since information only flows rightwards, each site's
whole history can be computed once its upstream neighbours are done.  Both
loops produce bit-identical results.
"""
import numpy as np
from numba import njit

INF = np.iinfo(np.int64).max

RING, FROZEN, OPEN, STRICT = 0, 1, 2, 3

OK, OUT_OF_WINDOW, RECORD_FULL, BUFFER_FULL = 0, 1, 2, 3

CHECK_ORDER, CHECK_INTERFACE, CHECK_MASS = 1, 2, 4

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)
_C3 = np.uint64(0xD1B54A32D192ED03)
_SITE_SHIFT = 1 << 40
_TWO53 = 2.0 ** -53


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _C1
    z = (z ^ (z >> np.uint64(27))) * _C2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def seed_key(seed):
    return _mix(np.uint64(seed) ^ _GOLD)


@njit(cache=True, inline="always")
def site_key(key, site):
    return _mix(key + np.uint64(site + _SITE_SHIFT) * _C3)


@njit(cache=True, inline="always")
def site_uniform(skey, k, lane):
    h = _mix(skey + np.uint64(4 * k + lane) * _GOLD)
    return (float(h >> np.uint64(11)) + 0.5) * _TWO53


@njit(cache=True, inline="always")
def uniform(key, site, k, lane):
    return site_uniform(site_key(key, site), k, lane)


@njit(cache=True, inline="always")
def _g(gtab, n):
    if n >= gtab.shape[0]:
        return 1.0
    return gtab[n]


@njit(cache=True, inline="always")
def _pick(cdf, u):
    j = 0
    while j < cdf.shape[0] - 1 and u >= cdf[j]:
        j += 1
    return j


@njit(cache=True, inline="always")
def _before(ta, ia, tb, ib):
    return ta < tb or (ta == tb and ia < ib)


@njit(cache=True)
def _sift_down(heap, times, pos):
    n = heap.shape[0]
    item = heap[pos]
    t_item = times[item]
    while True:
        child = 2 * pos + 1
        if child >= n:
            break
        right = child + 1
        if right < n and _before(times[heap[right]], heap[right], times[heap[child]], heap[child]):
            child = right
        if _before(times[heap[child]], heap[child], t_item, item):
            heap[pos] = heap[child]
            pos = child
        else:
            break
    heap[pos] = item


@njit(cache=True)
def harris_events(key, alpha, lo, T, max_events):
    """Merged stream ``(t, site, u_dir, u_acc)`` up to time ``T``."""
    W = alpha.shape[0]
    times = np.empty(W)
    kk = np.zeros(W, dtype=np.int64)
    for i in range(W):
        times[i] = -np.log(uniform(key, lo + i, 0, 0)) / alpha[i]
    heap = np.arange(W)
    for p in range(W // 2 - 1, -1, -1):
        _sift_down(heap, times, p)
    out_t = np.empty(max_events)
    out_x = np.empty(max_events, dtype=np.int64)
    out_k = np.empty(max_events, dtype=np.int64)
    out_d = np.empty(max_events)
    out_a = np.empty(max_events)
    n = 0
    while W > 0:
        i = heap[0]
        t = times[i]
        if t > T or n >= max_events:
            break
        x = lo + i
        k = kk[i]
        out_t[n] = t
        out_x[n] = x
        out_k[n] = k
        out_d[n] = uniform(key, x, k, 1)
        out_a[n] = uniform(key, x, k, 2)
        n += 1
        kk[i] = k + 1
        times[i] = t + (-np.log(uniform(key, x, k + 1, 0)) / alpha[i])
        _sift_down(heap, times, 0)
    return out_t[:n], out_x[:n], out_k[:n], out_d[:n], out_a[:n]


@njit(cache=True)
def site_clock(key, x, a, T):
    """Ring times of the clock at site ``x`` (rate ``a``) up to ``T``."""
    out = np.empty(16)
    n = 0
    t = -np.log(uniform(key, x, 0, 0)) / a
    while t <= T:
        if n == out.shape[0]:
            bigger = np.empty(2 * n)
            bigger[:n] = out
            out = bigger
        out[n] = t
        n += 1
        t = t + (-np.log(uniform(key, x, n, 0)) / a)
    return out[:n]


@njit(cache=True, inline="always")
def _crosses(i, z, b, W, ring):
    """Sign of the crossing of bond (b, b+1) by a jump i -> i+z."""
    if ring:
        if z > 0:
            return 1 if (b - i) % W < z else 0
        return -1 if (i - 1 - b) % W < -z else 0
    if z > 0:
        return 1 if i <= b and b < i + z else 0
    return -1 if i + z <= b and b < i else 0


@njit(cache=True)
def _advance_observers(eta, pos, x0, vel, swept, t, W, ring):
    R = eta.shape[0]
    for j in range(pos.shape[0]):
        target = x0[j] + np.int64(np.floor(vel[j] * t))
        while pos[j] < target:
            nxt = pos[j] + 1
            nxt = nxt % W if ring else nxt
            if ring or (nxt >= 0 and nxt < W):
                for r in range(R):
                    if eta[r, nxt] != INF:
                        swept[j, r] += eta[r, nxt]
            pos[j] += 1
        while pos[j] > target:
            cur = pos[j] % W if ring else pos[j]
            if ring or (cur >= 0 and cur < W):
                for r in range(R):
                    if eta[r, cur] != INF:
                        swept[j, r] -= eta[r, cur]
            pos[j] -= 1


@njit(cache=True)
def _interface_ok(a, b):
    plus = False
    for y in range(a.shape[0]):
        if a[y] > b[y]:
            plus = True
        elif a[y] < b[y] and plus:
            return False
    return True


@njit(cache=True)
def run_heap(eta, alpha, lo, gtab, kz, kcdf, key, T, policy, pinned,
             x0, vel, snap_times, checks, record_cap):
    """Coupled evolution of all rows of ``eta`` (modified in place).

    Returns ``(status, snaps, counts, swept, disp, n_events, n_moves,
    violations, first_violation, rec_t, rec_x, rec_z, rec_acc)``; ``disp``
    is the summed signed displacement of all moves, per replica.
    ``counts``/``swept`` are sampled at every snapshot time; trackers are
    observers at index ``x0 + floor(vel * t)`` watching the bond to their right.
    """
    R, W = eta.shape
    ring = policy == RING
    S = snap_times.shape[0]
    ntr = x0.shape[0]
    snaps = np.empty((S, R, W), dtype=np.int64)
    counts = np.zeros((S, ntr, R), dtype=np.int64)
    swept_out = np.zeros((S, ntr, R), dtype=np.int64)
    count = np.zeros((ntr, R), dtype=np.int64)
    swept = np.zeros((ntr, R), dtype=np.int64)
    disp = np.zeros(R, dtype=np.int64)
    pos = x0.copy()
    rec_t = np.empty(record_cap)
    rec_x = np.empty(record_cap, dtype=np.int64)
    rec_z = np.empty(record_cap, dtype=np.int64)
    rec_acc = np.empty((record_cap, R), dtype=np.bool_)
    n_rec = 0
    status = OK
    violations = 0
    first_violation = -1
    mass0 = np.zeros(R, dtype=np.int64)
    if checks & CHECK_MASS:
        for r in range(R):
            for i in range(W):
                if eta[r, i] != INF:
                    mass0[r] += eta[r, i]

    times = np.empty(W)
    kk = np.zeros(W, dtype=np.int64)
    skeys = np.empty(W, dtype=np.uint64)
    for i in range(W):
        skeys[i] = site_key(key, lo + i)
        times[i] = -np.log(site_uniform(skeys[i], 0, 0)) / alpha[i]
    heap = np.arange(W)
    for p in range(W // 2 - 1, -1, -1):
        _sift_down(heap, times, p)

    s = 0
    n_events = 0
    n_moves = 0
    while True:
        i = heap[0] if W > 0 else 0
        t = times[i] if W > 0 else np.inf
        while s < S and snap_times[s] < t:
            _advance_observers(eta, pos, x0, vel, swept, snap_times[s], W, ring)
            snaps[s] = eta
            counts[s] = count
            swept_out[s] = swept
            s += 1
        if t > T or s >= S:
            break
        _advance_observers(eta, pos, x0, vel, swept, t, W, ring)
        x = lo + i
        k = kk[i]
        n_events += 1
        active = False
        for r in range(R):
            if eta[r, i] != 0:
                active = True
                break
        if active:
            u_dir = site_uniform(skeys[i], k, 1)
            u_acc = site_uniform(skeys[i], k, 2)
            z = kz[_pick(kcdf, u_dir)]
            dest = i + z
            outside = dest < 0 or dest >= W
            if ring:
                dest = dest % W
                outside = False
            if outside and policy == STRICT:
                status = OUT_OF_WINDOW
                break
            if n_rec < record_cap:
                rec_t[n_rec] = t
                rec_x[n_rec] = x
                rec_z[n_rec] = z
            elif record_cap > 0:
                status = RECORD_FULL
            for r in range(R):
                n = eta[r, i]
                moved = n != 0 and u_acc < _g(gtab, n)
                if n_rec < record_cap:
                    rec_acc[n_rec, r] = moved
                if not moved:
                    continue
                if outside:
                    # frozen ends never push mass out; open ends absorb on the right only
                    if policy == OPEN and dest >= W:
                        if n != INF:
                            eta[r, i] = n - 1
                        n_moves += 1
                        disp[r] += z
                        for j in range(ntr):
                            b = pos[j]
                            if b >= i and b < W:
                                count[j, r] += 1
                    continue
                if n != INF and not (policy == FROZEN and pinned[i]):
                    eta[r, i] = n - 1
                if eta[r, dest] != INF and not (policy == FROZEN and pinned[dest]):
                    eta[r, dest] += 1
                n_moves += 1
                disp[r] += z
                for j in range(ntr):
                    b = pos[j] % W if ring else pos[j]
                    count[j, r] += _crosses(i, z, b, W, ring)
            if n_rec < record_cap:
                n_rec += 1
            if checks != 0:
                bad = False
                if checks & CHECK_ORDER:
                    for r in range(R - 1):
                        if eta[r, i] > eta[r + 1, i]:
                            bad = True
                        if not outside and eta[r, dest] > eta[r + 1, dest]:
                            bad = True
                if checks & CHECK_INTERFACE and R >= 2:
                    if not _interface_ok(eta[0], eta[1]):
                        bad = True
                if checks & CHECK_MASS:
                    for r in range(R):
                        m = 0
                        for y in range(W):
                            if eta[r, y] != INF:
                                m += eta[r, y]
                        if m != mass0[r]:
                            bad = True
                if bad:
                    violations += 1
                    if first_violation < 0:
                        first_violation = n_events
        kk[i] = k + 1
        times[i] = t + (-np.log(site_uniform(skeys[i], k + 1, 0)) / alpha[i])
        _sift_down(heap, times, 0)
    return (status, snaps[:s], counts[:s], swept_out[:s], disp, n_events, n_moves,
            violations, first_violation, rec_t[:n_rec], rec_x[:n_rec], rec_z[:n_rec],
            rec_acc[:n_rec])


@njit(cache=True)
def run_sweep(eta0, alpha, lo, gtab, kz, kcdf, key, t_stop, policy, pinned, bonds,
              snap_times, cap):
    """Single-replica evolution for kernels with only positive jumps.

    Site ``i`` is evolved up to ``t_stop[i]``; stopping upstream sites early
    is how callers prune everything outside the causal cone of an
    observation region.  ``cap`` bounds the departures of any one site
    (``BUFFER_FULL`` is returned when exceeded, so the caller can retry).

    Returns ``(status, snaps, counts, disp, n_events, n_moves)`` with ``counts``
    cumulative at each snapshot for the fixed bonds (b, b+1) in ``bonds``.
    """
    W = eta0.shape[0]
    S = snap_times.shape[0]
    J = 0
    for z in kz:
        if z > J:
            J = z
    one_jump = kz.shape[0] == 1
    L = gtab.shape[0]
    nb = bonds.shape[0]
    snaps = np.empty((S, W), dtype=np.int64)
    bins = np.zeros((nb, S + 1), dtype=np.int64)
    nslot = J + 1
    buf = np.empty((nslot, J, cap))
    fill = np.zeros((nslot, J), dtype=np.int64)
    heads = np.zeros(J, dtype=np.int64)
    n_events = 0
    n_moves = 0
    disp = 0
    for i in range(W):
        slot = i % nslot
        a = alpha[i]
        n = eta0[i]
        frozen = policy == FROZEN and pinned[i]
        sk = site_key(key, lo + i)
        heads[:] = 0
        k = 0
        t_own = -np.log(site_uniform(sk, 0, 0)) / a
        s = 0
        T = t_stop[i]
        t_snap = snap_times[0] if S > 0 else np.inf
        # next arrival among upstream lists (lower source index wins ties)
        t_arr = np.inf
        d_arr = -1
        for d in range(J - 1, -1, -1):
            if fill[slot, d] > 0 and buf[slot, d, 0] < t_arr:
                t_arr = buf[slot, d, 0]
                d_arr = d
        while True:
            take_arr = t_arr <= t_own
            t = t_arr if take_arr else t_own
            while t_snap < t:
                snaps[s, i] = n
                s += 1
                t_snap = snap_times[s] if s < S else np.inf
            if t > T or s >= S:
                break
            if take_arr:
                if not frozen and n != INF:
                    n += 1
                heads[d_arr] += 1
                t_arr = np.inf
                d_arr = -1
                for d in range(J - 1, -1, -1):
                    h = heads[d]
                    if h < fill[slot, d] and buf[slot, d, h] < t_arr:
                        t_arr = buf[slot, d, h]
                        d_arr = d
                continue
            n_events += 1
            if n != 0:
                if n >= L or site_uniform(sk, k, 2) < gtab[n]:
                    if one_jump:
                        z = kz[0]
                    else:
                        z = kz[_pick(kcdf, site_uniform(sk, k, 1))]
                    dest = i + z
                    if dest >= W:
                        if policy == STRICT:
                            return OUT_OF_WINDOW, snaps, np.zeros((S, nb), dtype=np.int64), disp, n_events, n_moves
                        if policy == OPEN:
                            if n != INF:
                                n -= 1
                            n_moves += 1
                            disp += z
                            for j in range(nb):
                                if bonds[j] >= i:
                                    bins[j, s] += 1
                    else:
                        if not frozen and n != INF:
                            n -= 1
                        if not (policy == FROZEN and pinned[dest]):
                            ds = dest % nslot
                            dd = z - 1
                            f = fill[ds, dd]
                            if f == cap:
                                return BUFFER_FULL, snaps, np.zeros((S, nb), dtype=np.int64), disp, n_events, n_moves
                            buf[ds, dd, f] = t
                            fill[ds, dd] = f + 1
                        n_moves += 1
                        disp += z
                        for j in range(nb):
                            b = bonds[j]
                            if i <= b and b < dest:
                                bins[j, s] += 1
            k += 1
            t_own = t_own + (-np.log(site_uniform(sk, k, 0)) / a)
        while s < S:
            snaps[s, i] = n
            s += 1
        # this site's inbox is consumed; its slot now serves site i + nslot
        for d in range(J):
            fill[slot, d] = 0
    counts = np.zeros((S, nb), dtype=np.int64)
    for j in range(nb):
        acc = 0
        for q in range(S):
            acc += bins[j, q]
            counts[q, j] = acc
    return OK, snaps, counts, disp, n_events, n_moves
