"""Compiled inner loops.

Everything here works on plain arrays so it can run without the GIL.  The
public modules (``world``, ``models``, ``planner`` ...) convert their
dataclasses into the layouts below and call in.

Lane geometry is a tuple ``geo = (pts, lanef, lanei, wrap)``: ``pts`` stacks
every centerline as rows ``(x, y, arc_length)``, ``lanef``/``lanei`` hold the
per-lane float (``GL_*``) and int (``GI_*``) columns indexed by lane *index*
(not id).  Few large arrays keep call overhead low in the hot loops.

The corridor column groups lanes chained by successor links; the station
offset and scale map lane arc length onto a map-wide coordinate so gaps can
be measured across segment boundaries and neighbouring lanes; ``wrap`` is the
station period of ring maps (0 otherwise).

Vehicle state rows use the ``X .. CT`` column constants (``CL``/``CT`` cache
the corridors of the current and target lane), parameter rows the ``P_*``
constants.
"""

import math

import numpy as np
from numba import njit

X, Y, TH, V, A, ST, LANE, TGT, S, D, SEG, TS, TD, TSEG, VDES, STA, CL, CT = range(18)
NSTATE = 18

(P_LEN, P_WID, P_WB, P_V0, P_T, P_A, P_B, P_S0, P_DELTA,
 P_LDB, P_LDG, P_MAXST, P_HARD) = range(13)
NPARAM = 13

# rss parameter vector
R_RHO, R_ARESP, R_BMIN, R_BMAX = range(4)
# longitudinal action vector: accel offset, decel offset, cap factor, decel ramp
L_ACC, L_DEC, L_CAP, L_RAMP = range(4)

LK, LCL, LCR = 0, 1, 2
ACC, MAINTAIN, DEC = 0, 1, 2

INF = 1e9
# every builtin map uses 3.5 m lanes
LANE_HALF_WIDTH = 1.75

# small helpers are inlined at the numba IR level: calls between separately
# compiled functions pay reference counting on every array argument
hot = njit(cache=True, nogil=True, inline="always", error_model="numpy")

# geometry: per-lane float columns and int columns
GL_LEN, GL_SPEED, GL_OFF, GL_SCALE = range(4)
GI_START, GI_NPTS, GI_LEFT, GI_RIGHT, GI_SUCC, GI_DEAD, GI_CORR = range(7)


# --------------------------------------------------------------------------
# geometry


@hot
def wrapd(ds, wrap):
    if wrap > 0.0:
        ds = ds - wrap * math.floor(ds / wrap + 0.5)
    return ds


@hot
def project_lane(geo, l, x, y, hint):
    """Nearest-point projection onto lane ``l``.

    Returns ``(s, d, seg, dist)``.  ``s`` is extrapolated linearly past the
    lane ends, ``dist`` is the distance to the clamped foot point.
    """
    pts = geo[0]
    st = geo[2][l, GI_START]
    ns = geo[2][l, GI_NPTS] - 1
    if hint < 0 or hint >= ns:
        best = INF
        k = 0
        for kk in range(ns):
            ax = pts[st + kk, 0]
            ay = pts[st + kk, 1]
            ex = pts[st + kk + 1, 0] - ax
            ey = pts[st + kk + 1, 1] - ay
            t = ((x - ax) * ex + (y - ay) * ey) / (ex * ex + ey * ey)
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            fx = ax + t * ex - x
            fy = ay + t * ey - y
            d2 = fx * fx + fy * fy
            if d2 < best:
                best = d2
                k = kk
    else:
        k = hint
        moved = 0
        for _ in range(ns + 1):
            ax = pts[st + k, 0]
            ay = pts[st + k, 1]
            ex = pts[st + k + 1, 0] - ax
            ey = pts[st + k + 1, 1] - ay
            t = ((x - ax) * ex + (y - ay) * ey) / (ex * ex + ey * ey)
            if t > 1.0 and k < ns - 1 and moved >= 0:
                k += 1
                moved = 1
                continue
            if t < 0.0 and k > 0 and moved <= 0:
                k -= 1
                moved = -1
                continue
            break
    ax = pts[st + k, 0]
    ay = pts[st + k, 1]
    ex = pts[st + k + 1, 0] - ax
    ey = pts[st + k + 1, 1] - ay
    seglen = math.sqrt(ex * ex + ey * ey)
    t = ((x - ax) * ex + (y - ay) * ey) / (seglen * seglen)
    tc = min(max(t, 0.0), 1.0)
    fx = ax + tc * ex
    fy = ay + tc * ey
    dist = math.sqrt((x - fx) ** 2 + (y - fy) ** 2)
    te = tc
    if (k == 0 and t < 0.0) or (k == ns - 1 and t > 1.0):
        te = t
    s = pts[st + k, 2] + te * seglen
    d = (ex * (y - ay) - ey * (x - ax)) / seglen
    return s, d, k, dist


@hot
def lane_point(geo, l, s):
    """Point and unit tangent at arc length ``s``, following successors."""
    pts, lf, li = geo[0], geo[1], geo[2]
    for _ in range(16):
        if s > lf[l, GL_LEN] and li[l, GI_SUCC] >= 0:
            s -= lf[l, GL_LEN]
            l = li[l, GI_SUCC]
        else:
            break
    st = li[l, GI_START]
    last = li[l, GI_NPTS] - 2
    # interpolated first guess, exact for evenly resampled lanes, then walk
    lo = int(s / lf[l, GL_LEN] * (last + 1)) if lf[l, GL_LEN] > 0.0 else 0
    lo = min(max(lo, 0), last)
    while lo < last and pts[st + lo + 1, 2] <= s:
        lo += 1
    while lo > 0 and pts[st + lo, 2] > s:
        lo -= 1
    k = st + lo
    ax = pts[k, 0]
    ay = pts[k, 1]
    ex = pts[k + 1, 0] - ax
    ey = pts[k + 1, 1] - ay
    seglen = pts[k + 1, 2] - pts[k, 2]
    t = (s - pts[k, 2]) / seglen
    return ax + t * ex, ay + t * ey, ex / seglen, ey / seglen


@hot
def station(geo, l, s):
    return geo[1][l, GL_OFF] + s * geo[1][l, GL_SCALE]


@njit(cache=True, nogil=True, error_model="numpy")
def locate(geo, x, y):
    """Global lane attribution: nearest centerline over every lane."""
    nl = geo[1].shape[0]
    best = INF
    bl = 0
    bs = 0.0
    bd = 0.0
    bk = 0
    for l in range(nl):
        s, d, k, dist = project_lane(geo, l, x, y, -1)
        if dist < best - 1e-9:
            best = dist
            bl = l
            bs = s
            bd = d
            bk = k
    return bl, bs, bd, bk


@njit(cache=True, nogil=True, error_model="numpy")
def locate_all(geo, st, n):
    for i in range(n):
        l, s, d, k = locate(geo, st[i, X], st[i, Y])
        st[i, LANE] = l
        st[i, S] = s
        st[i, D] = d
        st[i, SEG] = k
        st[i, TGT] = l
        st[i, TS] = s
        st[i, TD] = d
        st[i, TSEG] = k
        st[i, STA] = station(geo, l, s)
        st[i, CL] = geo[2][l, GI_CORR]
        st[i, CT] = geo[2][l, GI_CORR]


@hot
def neighbor_lane(geo, l, lat):
    if lat == LCL:
        return geo[2][l, GI_LEFT]
    if lat == LCR:
        return geo[2][l, GI_RIGHT]
    return l


@hot
def reproject(geo, st, i):
    """Refresh lane-relative coordinates of vehicle ``i`` after it moved."""
    lf = geo[1]
    li = geo[2]
    wrap = geo[3]
    x = st[i, X]
    y = st[i, Y]
    lane = int(st[i, LANE])
    tgt = int(st[i, TGT])
    s, d, k, _ = project_lane(geo, lane, x, y, int(st[i, SEG]))
    for _ in range(4):
        if s > lf[lane, GL_LEN] and li[lane, GI_SUCC] >= 0:
            nxt = li[lane, GI_SUCC]
            if tgt == lane:
                tgt = nxt
            lane = nxt
            s, d, k, _ = project_lane(geo, lane, x, y, 0)
        else:
            break
    st[i, LANE] = lane
    st[i, S] = s
    st[i, D] = d
    st[i, SEG] = k
    if tgt != lane:
        hint = int(st[i, TSEG]) if int(st[i, TGT]) == tgt else -1
        ts, td, tk, _ = project_lane(geo, tgt, x, y, hint)
        for _ in range(4):
            if ts > lf[tgt, GL_LEN] and li[tgt, GI_SUCC] >= 0:
                tgt = li[tgt, GI_SUCC]
                ts, td, tk, _ = project_lane(geo, tgt, x, y, 0)
            else:
                break
        if ts > lf[tgt, GL_LEN] and li[tgt, GI_SUCC] < 0 and li[lane, GI_SUCC] >= 0:
            # target lane ran out underneath the manoeuvre
            tgt = lane
            ts, td, tk = s, d, k
        elif abs(td) < abs(d):
            lane = tgt
            st[i, LANE] = lane
            st[i, S] = ts
            st[i, D] = td
            st[i, SEG] = tk
        st[i, TGT] = tgt
        st[i, TS] = ts
        st[i, TD] = td
        st[i, TSEG] = tk
    else:
        st[i, TGT] = lane
        st[i, TS] = st[i, S]
        st[i, TD] = st[i, D]
        st[i, TSEG] = st[i, SEG]
    sta = station(geo, int(st[i, LANE]), st[i, S])
    if wrap > 0.0:
        sta = sta - wrap * math.floor(sta / wrap)
    st[i, STA] = sta
    st[i, CL] = li[int(st[i, LANE]), GI_CORR]
    st[i, CT] = li[int(st[i, TGT]), GI_CORR]


@hot
def set_target(geo, st, i, tgt):
    st[i, TGT] = tgt
    st[i, CT] = geo[2][tgt, GI_CORR]
    st[i, TSEG] = -1
    if tgt == int(st[i, LANE]):
        st[i, TS] = st[i, S]
        st[i, TD] = st[i, D]
        st[i, TSEG] = st[i, SEG]
    else:
        ts, td, tk, _ = project_lane(geo, tgt, st[i, X], st[i, Y], -1)
        st[i, TS] = ts
        st[i, TD] = td
        st[i, TSEG] = tk


# --------------------------------------------------------------------------
# models


@hot
def idm(v, v0, has_lead, gap, v_lead, T, a, b, s0, delta, hard):
    if v0 > 0.0:
        free = 1.0 - (v / v0) ** delta
    elif v > 0.0:
        free = -INF
    else:
        free = 0.0
    inter = 0.0
    if has_lead:
        if gap <= 0.0:
            return -hard
        # the dynamic part never shrinks the jam distance below s0
        dyn = v * T + v * (v - v_lead) / (2.0 * math.sqrt(a * b))
        s_star = s0 + (dyn if dyn > 0.0 else 0.0)
        inter = (s_star / gap) ** 2
    acc = a * (free - inter)
    if acc < -hard:
        acc = -hard
    elif acc > a:
        acc = a
    return acc


@hot
def rss_gap(v_rear, v_front, rho, a_resp, b_min, b_max):
    g = (v_rear * rho + 0.5 * a_resp * rho * rho
         + (v_rear + rho * a_resp) ** 2 / (2.0 * b_min)
         - v_front * v_front / (2.0 * b_max))
    return max(0.0, g)


@hot
def pure_pursuit(x, y, th, lx, ly, wb, maxst):
    dx = lx - x
    dy = ly - y
    dist = math.sqrt(dx * dx + dy * dy)
    if dist < 1e-9:
        return 0.0
    # lateral coordinate of the lookahead point in the body frame = dist * sin(alpha)
    local_y = -math.sin(th) * dx + math.cos(th) * dy
    delta = math.atan(2.0 * wb * local_y / (dist * dist))
    return min(max(delta, -maxst), maxst)


@hot
def pp_steer(geo, st, prm, i):
    tgt = int(st[i, TGT])
    ld = prm[i, P_LDB] + prm[i, P_LDG] * st[i, V]
    lx, ly, _, _ = lane_point(geo, tgt, st[i, TS] + ld)
    return pure_pursuit(st[i, X], st[i, Y], st[i, TH], lx, ly, prm[i, P_WB], prm[i, P_MAXST])


@hot
def occupies(geo, st, j, c):
    return st[j, CL] == c or st[j, CT] == c


@hot
def body_corridor(st, prm, j):
    """Target corridor of ``j`` once its body crosses into the target lane, else -1."""
    if st[j, CT] != st[j, CL] and abs(st[j, TD]) < LANE_HALF_WIDTH + 0.5 * prm[j, P_WID]:
        return st[j, CT]
    return -1.0


@hot
def leader_in(geo, st, prm, n, c, sta, half_len, scale, skip1, skip2, physical=False):
    """Closest vehicle ahead of station ``sta`` in corridor ``c``.

    Returns ``(j, bumper_gap)``; ``j = -1`` when the corridor is empty ahead.
    With ``physical`` a lane changer counts only once its body is in ``c``.
    """
    wrap = geo[3]
    best = INF
    bj = -1
    for j in range(n):
        if j == skip1 or j == skip2:
            continue
        if physical:
            if st[j, CL] != c and body_corridor(st, prm, j) != c:
                continue
        elif not occupies(geo, st, j, c):
            continue
        ds = wrapd(st[j, STA] - sta, wrap)
        if ds > 0.0 and ds < best:
            best = ds
            bj = j
    if bj < 0:
        return -1, INF
    return bj, best / scale - half_len - 0.5 * prm[bj, P_LEN]


@hot
def follower_in(geo, st, prm, n, c, sta, half_len, scale, skip1, skip2):
    wrap = geo[3]
    best = INF
    bj = -1
    for j in range(n):
        if j == skip1 or j == skip2:
            continue
        if not occupies(geo, st, j, c):
            continue
        ds = wrapd(sta - st[j, STA], wrap)
        if ds >= 0.0 and ds < best:
            best = ds
            bj = j
    if bj < 0:
        return -1, INF
    return bj, best / scale - half_len - 0.5 * prm[bj, P_LEN]


@hot
def lane_end_gap(geo, st, prm, i, l):
    """Bumper gap to the end of a dead-end lane (INF otherwise)."""
    if not geo[2][l, GI_DEAD]:
        return INF
    end = geo[1][l, GL_OFF] + geo[1][l, GL_LEN] * geo[1][l, GL_SCALE]
    sta = geo[1][int(st[i, LANE]), GL_OFF] + st[i, S] * geo[1][int(st[i, LANE]), GL_SCALE]
    return (end - sta) / geo[1][l, GL_SCALE] - 0.5 * prm[i, P_LEN]


@hot
def lead_constraint(geo, st, prm, n, i):
    """Most constraining leader over the lanes vehicle ``i`` occupies."""
    li = geo[2]
    lane = int(st[i, LANE])
    tgt = int(st[i, TGT])
    scale = geo[1][lane, GL_SCALE]
    half = 0.5 * prm[i, P_LEN]
    # the ego only reacts to what it can see; agents also yield to announced changes
    phys = i == 0
    j, gap = leader_in(geo, st, prm, n, li[lane, GI_CORR], st[i, STA], half, scale, i, -1, phys)
    vl = st[j, V] if j >= 0 else 0.0
    if li[tgt, GI_CORR] != li[lane, GI_CORR]:
        j2, gap2 = leader_in(geo, st, prm, n, li[tgt, GI_CORR], st[i, STA], half, scale, i, -1, phys)
        if j2 >= 0 and gap2 < gap:
            j, gap, vl = j2, gap2, st[j2, V]
    # a vehicle changing out of a dead-end lane only respects its target's end
    ge = lane_end_gap(geo, st, prm, i, tgt)
    if ge < gap:
        return True, ge, 0.0
    return j >= 0, gap, vl


@hot
def idm_for(prm, st, i, v0, has_lead, gap, vl):
    return idm(st[i, V], v0, has_lead, gap, vl, prm[i, P_T], prm[i, P_A],
               prm[i, P_B], prm[i, P_S0], prm[i, P_DELTA], prm[i, P_HARD])


@njit(cache=True, nogil=True, error_model="numpy")
def mobil(geo, st, prm, vdes, n, i, lat, politeness, b_safe):
    """Lane-change incentive of vehicle ``i`` towards ``lat`` (LCL/LCR).

    Returns ``(incentive, vetoed, feasible)``.  Accelerations come from IDM
    before and after the hypothetical change.
    """
    li = geo[2]
    lane = int(st[i, LANE])
    tl = neighbor_lane(geo, lane, lat)
    if tl < 0:
        return 0.0, False, False
    sta = st[i, STA]
    half = 0.5 * prm[i, P_LEN]
    scale = geo[1][lane, GL_SCALE]
    # changer, current lane
    jc, gc = leader_in(geo, st, prm, n, li[lane, GI_CORR], sta, half, scale, i, -1)
    ge = lane_end_gap(geo, st, prm, i, lane)
    vc = st[jc, V] if jc >= 0 else 0.0
    hc = jc >= 0
    if ge < gc:
        gc, vc, hc = ge, 0.0, True
    a_c = idm_for(prm, st, i, vdes[i], hc, gc, vc)
    # changer, target lane
    jt, gt = leader_in(geo, st, prm, n, li[tl, GI_CORR], sta, half, scale, i, -1)
    vt = st[jt, V] if jt >= 0 else 0.0
    ht = jt >= 0
    ge = lane_end_gap(geo, st, prm, i, tl)
    if ge < gt:
        gt, vt, ht = ge, 0.0, True
    a_c_new = idm_for(prm, st, i, vdes[i], ht, gt, vt)
    # new follower in the target lane
    dn = 0.0
    vetoed = False
    jn, gn = follower_in(geo, st, prm, n, li[tl, GI_CORR], sta, half, scale, i, -1)
    if jn >= 0:
        jnl, gnl = leader_in(geo, st, prm, n, li[tl, GI_CORR], st[jn, STA], 0.5 * prm[jn, P_LEN],
                             geo[1][int(st[jn, LANE]), GL_SCALE], jn, i)
        a_n = idm_for(prm, st, jn, vdes[jn], jnl >= 0, gnl, st[jnl, V] if jnl >= 0 else 0.0)
        if gn <= 0.0:
            a_n_new = -prm[jn, P_HARD]
        else:
            a_n_new = idm_for(prm, st, jn, vdes[jn], True, gn, st[i, V])
        dn = a_n_new - a_n
        if a_n_new < -b_safe:
            vetoed = True
    # old follower in the current lane
    do = 0.0
    jo, go = follower_in(geo, st, prm, n, li[lane, GI_CORR], sta, half, scale, i, -1)
    if jo >= 0:
        a_o = idm_for(prm, st, jo, vdes[jo], True, max(go, 1e-3), st[i, V])
        if jc >= 0:
            g_new = go + prm[i, P_LEN] + gc
            a_o_new = idm_for(prm, st, jo, vdes[jo], True, g_new, st[jc, V])
        else:
            a_o_new = idm_for(prm, st, jo, vdes[jo], False, INF, 0.0)
        do = a_o_new - a_o
    inc = (a_c_new - a_c) + politeness * (dn + do)
    return inc, vetoed, True


# --------------------------------------------------------------------------
# collision and safety


@hot
def boxes_overlap(x1, y1, t1, l1, w1, x2, y2, t2, l2, w2):
    dx = x2 - x1
    dy = y2 - y1
    r = 0.5 * (math.sqrt(l1 * l1 + w1 * w1) + math.sqrt(l2 * l2 + w2 * w2))
    if dx * dx + dy * dy > r * r:
        return False
    c1, s1 = math.cos(t1), math.sin(t1)
    c2, s2 = math.cos(t2), math.sin(t2)
    axes = ((c1, s1), (-s1, c1), (c2, s2), (-s2, c2))
    for ax, ay in axes:
        h1 = 0.5 * l1 * abs(ax * c1 + ay * s1) + 0.5 * w1 * abs(-ax * s1 + ay * c1)
        h2 = 0.5 * l2 * abs(ax * c2 + ay * s2) + 0.5 * w2 * abs(-ax * s2 + ay * c2)
        if abs(ax * dx + ay * dy) > h1 + h2:
            return False
    return True


@hot
def vehicles_overlap(st, prm, i, j):
    return boxes_overlap(st[i, X], st[i, Y], st[i, TH], prm[i, P_LEN], prm[i, P_WID],
                         st[j, X], st[j, Y], st[j, TH], prm[j, P_LEN], prm[j, P_WID])


@hot
def pair_safety(geo, st, prm, e, j, rss):
    """Gap and RSS shortfall between vehicle ``e`` and ``j``.

    Only pairs sharing a corridor count.  ``e`` is responsible when ``j`` is
    ahead of it, or when ``e`` is moving into ``j``'s lane in front of it.
    Returns ``(conflict, bumper_gap, shortfall)``.
    """
    ce1 = st[e, CL]
    ce2 = st[e, CT]
    cj1 = st[j, CL]
    # the other vehicle claims its target lane only once it is physically entering it
    cj2 = body_corridor(st, prm, j)
    if cj2 < 0.0:
        cj2 = cj1
    if not (ce1 == cj1 or ce1 == cj2 or ce2 == cj1 or ce2 == cj2):
        return False, INF, 0.0
    ds = wrapd(st[j, STA] - st[e, STA], geo[3]) / geo[1][int(st[e, LANE]), GL_SCALE]
    gap = abs(ds) - 0.5 * (prm[e, P_LEN] + prm[j, P_LEN])
    need = 0.0
    if ds >= 0.0:
        need = rss_gap(st[e, V], st[j, V], rss[R_RHO], rss[R_ARESP], rss[R_BMIN], rss[R_BMAX])
    elif ce2 != ce1 and (cj1 == ce2 or cj2 == ce2):
        need = rss_gap(st[j, V], st[e, V], rss[R_RHO], rss[R_ARESP], rss[R_BMIN], rss[R_BMAX])
    else:
        return True, gap, 0.0
    return True, gap, max(0.0, need - gap)


@njit(cache=True, nogil=True, error_model="numpy")
def ego_safety(geo, st, prm, n, rss):
    min_gap = INF
    short = 0.0
    for j in range(1, n):
        conflict, gap, sf = pair_safety(geo, st, prm, 0, j, rss)
        if conflict:
            if gap < min_gap:
                min_gap = gap
            short += sf
    return min_gap, short


# --------------------------------------------------------------------------
# stepping


@hot
def integrate(st, prm, i, acc, steer, dt):
    v = st[i, V]
    v_new = v + acc * dt
    if v_new < 0.0:
        v_new = 0.0
    vm = 0.5 * (v + v_new)
    yaw_rate = vm * math.tan(steer) / prm[i, P_WB]
    th = st[i, TH]
    mid = th + 0.5 * yaw_rate * dt
    st[i, X] += vm * math.cos(mid) * dt
    st[i, Y] += vm * math.sin(mid) * dt
    th += yaw_rate * dt
    if th > math.pi:
        th -= 2.0 * math.pi
    elif th <= -math.pi:
        th += 2.0 * math.pi
    st[i, TH] = th
    st[i, A] = (v_new - v) / dt
    st[i, V] = v_new
    st[i, ST] = steer


@njit(cache=True, nogil=True, error_model="numpy")
def step_world(geo, st, prm, n, dt, hold, free, skip, noise, cmd_a, cmd_s):
    """Advance every vehicle by one integration step.

    ``noise`` is an (n, 2) array of already-scaled accel/steer perturbations.
    Commands are computed from the pre-step snapshot before any vehicle moves,
    so the update is simultaneous.  Rows flagged in ``skip`` are moved by the
    caller and only serve as obstacles.
    """
    for i in range(n):
        if skip[i]:
            continue
        if hold[i]:
            acc = 0.0
        elif free[i]:
            acc = idm_for(prm, st, i, st[i, VDES], False, INF, 0.0)
        else:
            has, gap, vl = lead_constraint(geo, st, prm, n, i)
            acc = idm_for(prm, st, i, st[i, VDES], has, gap, vl)
        steer = pp_steer(geo, st, prm, i)
        if not hold[i]:
            acc += noise[i, 0]
            steer += noise[i, 1]
        mx = prm[i, P_MAXST]
        cmd_a[i] = min(max(acc, -prm[i, P_HARD]), prm[i, P_A])
        cmd_s[i] = min(max(steer, -mx), mx)
    for i in range(n):
        if not skip[i]:
            integrate(st, prm, i, cmd_a[i], cmd_s[i], dt)
            reproject(geo, st, i)


@njit(cache=True, nogil=True, error_model="numpy")
def advance(geo, st, prm, n, dt, substeps, hold, free, skip, noise_std, z):
    """``substeps`` integration steps; ``z`` holds (substeps, n, 2) unit normals.

    Returns ``(ego_collision, other_collision)`` over the substeps.
    """
    noise = np.zeros((n, 2))
    cmd_a = np.zeros(n)
    cmd_s = np.zeros(n)
    ego_hit = False
    other_hit = False
    for k in range(substeps):
        for i in range(n):
            noise[i, 0] = noise_std[0] * z[k, i, 0]
            noise[i, 1] = noise_std[1] * z[k, i, 1]
        step_world(geo, st, prm, n, dt, hold, free, skip, noise, cmd_a, cmd_s)
        e, o = any_overlap(st, prm, n, False)
        ego_hit = ego_hit or e
        other_hit = other_hit or o
    return ego_hit, other_hit


@njit(cache=True, nogil=True, error_model="numpy")
def any_overlap(st, prm, n, ego_only):
    ego_hit = False
    other_hit = False
    for i in range(n):
        for j in range(i + 1, n):
            if vehicles_overlap(st, prm, i, j):
                if i == 0:
                    ego_hit = True
                else:
                    other_hit = True
        if ego_only:
            break
    return ego_hit, other_hit


@hot
def ego_vdes(base_v, lon, t, speed_limit, lonp):
    if lon == ACC:
        return min(base_v + lonp[L_ACC], lonp[L_CAP] * speed_limit)
    if lon == DEC:
        target = max(base_v - lonp[L_DEC], 0.0)
        return max(target, base_v - lonp[L_RAMP] * t)
    return base_v


@njit(cache=True, nogil=True, error_model="numpy")
def rollout_one(geo, init, prm, n, ego_lat, ego_lon, tgt0, hold, free, z,
                noise_std, dt, rec_every, rss, lonp, out_st, out_ann):
    """Simulate one rollout; vehicle 0 follows the ego command schedule.

    ``out_st`` receives (n_rec + 1, n, NSTATE) snapshots, ``out_ann`` rows of
    ``(min_gap, rss_shortfall, collision_so_far, other_collision_so_far)``.
    ``z`` holds (steps, n, 2) unit normals scaled by ``noise_std``.
    Returns ``(ego_collision, other_collision)``.
    """
    st = init[:n].copy()
    for i in range(n):
        if int(tgt0[i]) != int(st[i, TGT]):
            set_target(geo, st, i, int(tgt0[i]))
    noise = np.zeros((n, 2))
    cmd_a = np.zeros(n)
    cmd_s = np.zeros(n)
    skip = np.zeros(n, dtype=np.bool_)
    K = ego_lat.shape[0]
    prev_lat = ego_lat[0]
    prev_lon = -1
    base_v = st[0, V]
    t_lon = 0.0
    ego_hit = False
    other_hit = False
    rec = 0
    out_st[0, :n, :] = st[:n, :]
    mg, sf = ego_safety(geo, st, prm, n, rss)
    out_ann[0, 0] = mg
    out_ann[0, 1] = sf
    out_ann[0, 2] = 0.0
    out_ann[0, 3] = 0.0
    lanef = geo[1]
    for k in range(K):
        lat = ego_lat[k]
        if lat != prev_lat:
            lane0 = int(st[0, LANE])
            tl = neighbor_lane(geo, lane0, lat)
            if tl < 0:
                tl = lane0
            set_target(geo, st, 0, tl)
            prev_lat = lat
        lon = ego_lon[k]
        if lon != prev_lon:
            base_v = st[0, V]
            t_lon = 0.0
            prev_lon = lon
        st[0, VDES] = ego_vdes(base_v, lon, t_lon, lanef[int(st[0, LANE]), GL_SPEED], lonp)
        t_lon += dt
        for i in range(n):
            noise[i, 0] = noise_std[0] * z[k, i, 0]
            noise[i, 1] = noise_std[1] * z[k, i, 1]
        step_world(geo, st, prm, n, dt, hold, free, skip, noise, cmd_a, cmd_s)
        e_hit, o_hit = any_overlap(st, prm, n, False)
        ego_hit = ego_hit or e_hit
        other_hit = other_hit or o_hit
        if (k + 1) % rec_every == 0:
            rec += 1
            out_st[rec, :n, :] = st[:n, :]
            mg, sf = ego_safety(geo, st, prm, n, rss)
            out_ann[rec, 0] = mg
            out_ann[rec, 1] = sf
            out_ann[rec, 2] = 1.0 if ego_hit else 0.0
            out_ann[rec, 3] = 1.0 if other_hit else 0.0
    return ego_hit, other_hit


@njit(cache=True, nogil=True, error_model="numpy")
def rollout_batch(geo, init, prm, n, ego_lat, ego_lon, tgt0, hold, free, z,
                  noise_std, dt, rec_every, rss, lonp, out_st, out_ann, out_coll):
    """Rollouts sharing one noise realization ``z`` (steps, n, 2)."""
    for r in range(ego_lat.shape[0]):
        eh, oh = rollout_one(geo, init, prm, n, ego_lat[r], ego_lon[r], tgt0[r], hold, free,
                             z, noise_std, dt, rec_every, rss, lonp,
                             out_st[r], out_ann[r])
        out_coll[r, 0] = eh
        out_coll[r, 1] = oh


@njit(cache=True, nogil=True, error_model="numpy")
def solo_batch(geo, init, prm, lat, lon, tgt, hold, dt, lonp, out):
    """Noise-free single-vehicle trajectories on an empty road.

    Row ``r`` starts from ``init[r]`` heading for lane ``tgt[r]``; ``hold[r]``
    keeps its speed, otherwise it tracks the ``lat``/``lon`` schedule.  ``out``
    is (R, steps + 1, NSTATE), one snapshot per integration step.
    """
    R = init.shape[0]
    K = lat.shape[1]
    z = np.zeros((K, 1, 2))
    nstd = np.zeros(2)
    rss = np.zeros(4)
    free = np.ones(1, dtype=np.bool_)
    hl = np.zeros(1, dtype=np.bool_)
    tg = np.zeros(1)
    ann = np.zeros((K + 1, 4))
    rec = np.zeros((K + 1, 1, NSTATE))
    for r in range(R):
        hl[0] = hold[r]
        tg[0] = tgt[r]
        rollout_one(geo, init[r:r + 1], prm[r:r + 1], 1, lat[r], lon[r], tg, hl, free, z,
                    nstd, dt, 1, rss, lonp, rec, ann)
        out[r] = rec[:, 0, :]


@njit(cache=True, nogil=True, error_model="numpy")
def pair_check(geo, ego_tr, ego_prm, ag_tr, ag_prm, pe, pa, rec_every, rss, out_fail, out_gap):
    """Fail flags for (ego trajectory, agent trajectory) pairs.

    A pair fails on any overlap or on an RSS shortfall at a recorded step
    (every ``rec_every`` integration steps).
    """
    two = np.zeros((2, NSTATE))
    p2 = np.zeros((2, NPARAM))
    K = ego_tr.shape[1] - 1
    for q in range(pe.shape[0]):
        e = pe[q]
        a = pa[q]
        p2[0] = ego_prm
        p2[1] = ag_prm[a]
        fail = False
        mg = INF
        for k in range(1, K + 1):
            two[0] = ego_tr[e, k]
            two[1] = ag_tr[a, k]
            if vehicles_overlap(two, p2, 0, 1):
                fail = True
                mg = min(mg, 0.0)
                break
            if k % rec_every == 0:
                conflict, gap, sf = pair_safety(geo, two, p2, 0, 1, rss)
                if conflict and gap < mg:
                    mg = gap
                if sf > 0.0:
                    fail = True
                    break
        out_fail[q] = fail
        out_gap[q] = mg


# --------------------------------------------------------------------------
# belief features


@njit(cache=True, nogil=True, error_model="numpy")
def features_all(geo, st, prm, vdes, n, rss, politeness, b_safe, out):
    """Per-vehicle belief features.

    ``out`` is (n, 3, 8) over lanes (current, left, right) with columns
    ``present, leader_gap, leader_dv, follower_gap, rss_ok, incentive,
    vetoed``.  Column 7 holds per-vehicle extras: lateral drift rate, lateral
    offset and heading error in rows 0, 1 and 2.
    """
    li = geo[2]
    for i in range(n):
        lane = int(st[i, LANE])
        sta = st[i, STA]
        half = 0.5 * prm[i, P_LEN]
        scale = geo[1][lane, GL_SCALE]
        for k in range(3):
            l = lane if k == 0 else neighbor_lane(geo, lane, k)
            if l < 0:
                out[i, k, 0] = 0.0
                for c in range(1, 8):
                    out[i, k, c] = 0.0
                continue
            out[i, k, 0] = 1.0
            jl, gl = leader_in(geo, st, prm, n, li[l, GI_CORR], sta, half, scale, i, -1)
            ge = lane_end_gap(geo, st, prm, i, l)
            vl = st[jl, V] if jl >= 0 else st[i, V]
            if ge < gl:
                gl = ge
                vl = 0.0
                jl = n
            jf, gf = follower_in(geo, st, prm, n, li[l, GI_CORR], sta, half, scale, i, -1)
            out[i, k, 1] = gl
            out[i, k, 2] = vl - st[i, V] if jl >= 0 else 0.0
            out[i, k, 3] = gf
            ok = True
            if jl >= 0:
                need = rss_gap(st[i, V], vl, rss[R_RHO], rss[R_ARESP], rss[R_BMIN], rss[R_BMAX])
                if gl < need:
                    ok = False
            if k > 0 and jf >= 0:
                need = rss_gap(st[jf, V], st[i, V], rss[R_RHO], rss[R_ARESP], rss[R_BMIN],
                               rss[R_BMAX])
                if gf < need:
                    ok = False
            out[i, k, 4] = 1.0 if ok else 0.0
            if k > 0:
                inc, vetoed, _ = mobil(geo, st, prm, vdes, n, i, k, politeness, b_safe)
                out[i, k, 5] = inc
                out[i, k, 6] = 1.0 if vetoed else 0.0
            else:
                out[i, k, 5] = 0.0
                out[i, k, 6] = 0.0
        # lateral drift and offset relative to the current lane
        _, _, tx, ty = lane_point(geo, lane, st[i, S])
        herr = st[i, TH] - math.atan2(ty, tx)
        herr = math.atan2(math.sin(herr), math.cos(herr))
        out[i, 0, 7] = st[i, V] * math.sin(herr)
        out[i, 1, 7] = st[i, D]
        out[i, 2, 7] = herr


# --------------------------------------------------------------------------
# environment agents and metrics


@hot
def gap_acceptable(geo, st, prm, n, i, tl):
    """Bumper gaps in lane ``tl`` leave room: 1 m ahead, 1 m plus 0.5 s of closing speed behind."""
    li = geo[2]
    lane = int(st[i, LANE])
    scale = geo[1][lane, GL_SCALE]
    half = 0.5 * prm[i, P_LEN]
    c = li[tl, GI_CORR]
    jl, gl = leader_in(geo, st, prm, n, c, st[i, STA], half, scale, i, -1)
    if jl >= 0 and gl < 1.0:
        return False
    jf, gf = follower_in(geo, st, prm, n, c, st[i, STA], half, scale, i, -1)
    if jf >= 0 and gf < 1.0 + 0.5 * max(st[jf, V] - st[i, V], 0.0):
        return False
    return True


@njit(cache=True, nogil=True, error_model="numpy")
def agent_lane_choice(geo, st, prm, n, active, politeness, threshold, b_safe, keep_right,
                      urgency_range, force_urgency, out):
    """MOBIL lane choice for every ``active`` row; writes LK/LCL/LCR to ``out``.

    Vehicles in a lane that ends get an urgency that grows towards the end:
    it adds to the incentive of leaving and relaxes the braking they are
    willing to impose on the new follower.  Lanes ending within
    ``urgency_range`` are never entered.  Past ``force_urgency`` a vehicle
    forces its way in: only the physical gap check can stop it.
    """
    vdes = st[:n, VDES].copy()
    li = geo[2]
    for i in range(n):
        out[i] = LK
        if not active[i]:
            continue
        lane = int(st[i, LANE])
        ge = lane_end_gap(geo, st, prm, i, lane)
        urgency = 0.0
        if ge < urgency_range:
            urgency = 1.0 - max(ge, 0.0) / urgency_range
        best = -INF
        for lat in range(1, 3):
            tl = neighbor_lane(geo, lane, lat)
            if tl < 0:
                continue
            if li[tl, GI_DEAD] and lane_end_gap(geo, st, prm, i, tl) < urgency_range:
                continue
            bs = min(b_safe[i] + 4.0 * urgency, 0.75 * prm[i, P_HARD])
            if urgency >= force_urgency and not li[tl, GI_DEAD]:
                bs = INF
            inc, vetoed, feasible = mobil(geo, st, prm, vdes, n, i, lat, politeness[i], bs)
            if not feasible or vetoed:
                continue
            if not gap_acceptable(geo, st, prm, n, i, tl):
                continue
            if lat == LCR:
                inc += keep_right[i]
            else:
                inc -= keep_right[i]
            if urgency > 0.0 and not li[tl, GI_DEAD]:
                inc += 2.0 * urgency
            if inc > threshold[i] and inc > best:
                best = inc
                out[i] = lat


@njit(cache=True, nogil=True, error_model="numpy")
def frame_safety(geo, st, prm, n, rss, min_gap, factor):
    """``(unsafe, collision)`` of row 0 against every other row.

    A vehicle whose body shares a lane with row 0 is too close when the
    bumper gap is below ``max(min_gap, factor * rss_gap)`` for the actual
    rear/front pair.
    """
    unsafe = False
    hit = False
    scale = geo[1][int(st[0, LANE]), GL_SCALE]
    for j in range(1, n):
        if vehicles_overlap(st, prm, 0, j):
            hit = True
            unsafe = True
            continue
        c0 = body_corridor(st, prm, 0)
        cj = body_corridor(st, prm, j)
        if not (st[j, CL] == st[0, CL] or st[j, CL] == c0 or cj == st[0, CL] or (cj >= 0.0 and cj == c0)):
            continue
        ds = wrapd(st[j, STA] - st[0, STA], geo[3]) / scale
        gap = abs(ds) - 0.5 * (prm[0, P_LEN] + prm[j, P_LEN])
        if ds >= 0.0:
            need = rss_gap(st[0, V], st[j, V], rss[R_RHO], rss[R_ARESP], rss[R_BMIN], rss[R_BMAX])
        else:
            need = rss_gap(st[j, V], st[0, V], rss[R_RHO], rss[R_ARESP], rss[R_BMIN], rss[R_BMAX])
        if gap < max(min_gap, factor * need):
            unsafe = True
    return unsafe, hit
