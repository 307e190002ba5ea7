"""
Compiled event loops for the zero range process and its basic coupling.

The loops consume pre-drawn uniforms (one row of three per event) so the
caller owns the random stream and results stay reproducible. Every loop
stops on the first of: horizon reached, rate zero, event cap, uniforms used up.
"""

import numpy as np
from numba import njit

from rate_index import fenwick_add, fenwick_build, fenwick_find

REACHED = 0
QUIESCENT = 1
EXHAUSTED = 2
NEED_UNIFORMS = 3
ORDER_BROKEN = 4


@njit(cache=True, nogil=True)
def _displacement(disp, disp_cdf, u):
    j = 0
    last = disp.size - 1
    while j < last and u >= disp_cdf[j]:
        j += 1
    return disp[j]


@njit(cache=True, nogil=True)
def _wrap(site, n):
    if site >= n:
        return site - n
    if site < 0:
        return site + n
    return site


@njit(cache=True, nogil=True)
def _set_rate(tree, weights, site, w):
    delta = w - weights[site]
    weights[site] = w
    fenwick_add(tree, site, delta)
    return delta


@njit(cache=True, nogil=True)
def advance(eta, weights, tree, total, speed, g, disp, disp_cdf, speedup,
            t, t_target, uniforms, start, max_events, rebuild_every, since_rebuild):
    n = eta.size
    k = start
    events = 0
    status = REACHED
    while True:
        if events >= max_events:
            status = EXHAUSTED
            break
        if k >= uniforms.shape[0]:
            status = NEED_UNIFORMS
            break
        if total < 1e-9:
            total = weights.sum()
            if total <= 0.0:
                status = QUIESCENT
                break
        u1 = uniforms[k, 0]
        u2 = uniforms[k, 1]
        u3 = uniforms[k, 2]
        k += 1
        dt = -np.log1p(-u1) / (speedup * total)
        if t + dt > t_target:
            # memoryless clock: the pending event lies beyond the horizon
            t = t_target
            status = REACHED
            break
        t += dt
        src = fenwick_find(tree, weights, u2 * total)
        dst = _wrap(src + _displacement(disp, disp_cdf, u3), n)
        eta[src] -= 1
        eta[dst] += 1
        total += _set_rate(tree, weights, src, speed[src] * g[eta[src]])
        total += _set_rate(tree, weights, dst, speed[dst] * g[eta[dst]])
        events += 1
        since_rebuild += 1
        if since_rebuild >= rebuild_every:
            tree[:] = fenwick_build(weights)
            total = weights.sum()
            since_rebuild = 0
    return t, total, k, events, status, since_rebuild


@njit(cache=True, nogil=True)
def _coupled_rates(speed, g, eta, xi, site):
    a = g[eta[site]]
    b = g[xi[site]]
    s = speed[site]
    return s * min(a, b), s * max(a - b, 0.0), s * max(b - a, 0.0)


@njit(cache=True, nogil=True)
def _refresh_site(trees, weights, totals, speed, g, eta, xi, site):
    rj, re, rx = _coupled_rates(speed, g, eta, xi, site)
    totals[0] += _set_rate(trees[0], weights[0], site, rj)
    totals[1] += _set_rate(trees[1], weights[1], site, re)
    totals[2] += _set_rate(trees[2], weights[2], site, rx)


@njit(cache=True, nogil=True)
def advance_coupled(eta, xi, weights, trees, totals, speed, g, disp, disp_cdf, speedup,
                    t, t_target, uniforms, start, max_events, rebuild_every, since_rebuild,
                    check_order):
    """
    Basic coupling. weights/trees rows: 0 joint (min rate), 1 eta excess, 2 xi excess.
    Returns (t, k, events, status, since_rebuild, violation_site).
    """
    n = eta.size
    k = start
    events = 0
    status = REACHED
    violation = -1
    while True:
        if events >= max_events:
            status = EXHAUSTED
            break
        if k >= uniforms.shape[0]:
            status = NEED_UNIFORMS
            break
        grand = totals[0] + totals[1] + totals[2]
        if grand < 1e-9:
            for c in range(3):
                totals[c] = weights[c].sum()
            grand = totals[0] + totals[1] + totals[2]
            if grand <= 0.0:
                status = QUIESCENT
                break
        u1 = uniforms[k, 0]
        u2 = uniforms[k, 1]
        u3 = uniforms[k, 2]
        k += 1
        dt = -np.log1p(-u1) / (speedup * grand)
        if t + dt > t_target:
            t = t_target
            status = REACHED
            break
        t += dt
        target = u2 * grand
        if target < totals[0]:
            channel = 0
        elif target < totals[0] + totals[1]:
            channel = 1
            target -= totals[0]
        else:
            channel = 2
            target -= totals[0] + totals[1]
        if totals[channel] <= 0.0:
            for c in range(3):
                if totals[c] > 0.0:
                    channel = c
                    break
            target = 0.0
        src = fenwick_find(trees[channel], weights[channel], target)
        dst = _wrap(src + _displacement(disp, disp_cdf, u3), n)
        if channel != 2:
            eta[src] -= 1
            eta[dst] += 1
        if channel != 1:
            xi[src] -= 1
            xi[dst] += 1
        _refresh_site(trees, weights, totals, speed, g, eta, xi, src)
        _refresh_site(trees, weights, totals, speed, g, eta, xi, dst)
        events += 1
        since_rebuild += 1
        if check_order:
            if eta[src] > xi[src]:
                violation = src
            elif eta[dst] > xi[dst]:
                violation = dst
            if violation >= 0:
                status = ORDER_BROKEN
                break
        if since_rebuild >= rebuild_every:
            for c in range(3):
                trees[c, :] = fenwick_build(weights[c])
                totals[c] = weights[c].sum()
            since_rebuild = 0
    return t, k, events, status, since_rebuild, violation
