"""Independent numpy reference for the frozen values in tests/oracles.rs.

Uses LAPACK's SVD directly (no Gram eigensolve, no shared code with the crate).
Run: python3 oracle.py
"""
import numpy as np

T, N, R = 12, 10, 2


def panel():
    t = np.arange(T)[:, None]
    i = np.arange(N)[None, :]
    f0 = np.array([[np.sin(0.7 * (a + 1) * (j + 1)) + (0.3 if j == 0 else 0.0) for j in range(R)] for a in range(T)])
    l0 = np.array([[np.cos(0.45 * (b + 1) * (j + 2)) + 0.5 for j in range(R)] for b in range(N)])
    noise = 0.2 * np.sin(1.3 * t * t + 0.7 * i + 0.1 * i * i)
    x = f0 @ l0.T + noise
    mask = np.ones((T, N), dtype=bool)
    for a in (2, 5, 9, 11):
        for b in (1, 4, 7, 9):
            mask[a, b] = False
    mask[5, 4] = True  # observed inside the missing rectangle
    return x, mask


def apc(x, r):
    t, n = x.shape
    u, s, vt = np.linalg.svd(x / np.sqrt(t * n), full_matrices=False)
    f = np.sqrt(t) * u[:, :r]
    lam = np.sqrt(n) * vt[:r].T * s[:r]
    return f, lam


def tall_wide(x, mask, r):
    t, n = x.shape
    cols = [b for b in range(n) if mask[:, b].all()]
    rows = [a for a in range(t) if mask[a, cols].all() and mask[a, :].all()]
    f_tall, l_tall = apc(x[:, cols], r)
    f_wide, l_wide = apc(x[rows, :], r)
    b, *_ = np.linalg.lstsq(l_wide[cols], l_tall, rcond=None)
    c_tall = f_tall @ l_tall.T
    c_wide = f_wide @ l_wide.T
    c_miss = f_tall @ b.T @ l_wide.T
    use_tall = min(len(cols), t) > min(n, len(rows))
    c = np.empty((t, n))
    for a in range(t):
        for k in range(n):
            in_c, in_r = k in cols, a in rows
            if in_c and in_r:
                c[a, k] = c_tall[a, cols.index(k)] if use_tall else c_wide[rows.index(a), k]
            elif in_c:
                c[a, k] = c_tall[a, cols.index(k)]
            elif in_r:
                c[a, k] = c_wide[rows.index(a), k]
            else:
                c[a, k] = c_miss[a, k]
    return c, cols, rows


def fill(x, mask, c):
    return np.where(mask, x, c)


def em(x, mask, r, cols, rows, tol=1e-13, max_iter=5000):
    t, n = x.shape
    f_b, _ = apc(x[np.ix_(rows, cols)], r)
    lam, *_ = np.linalg.lstsq(f_b, x[rows, :], rcond=None)
    lam = lam.T
    f, *_ = np.linalg.lstsq(lam[cols], x[:, cols].T, rcond=None)
    c = f.T @ lam.T
    for _ in range(max_iter):
        ff, ll = apc(fill(x, mask, c), r)
        new = ff @ ll.T
        change = np.abs((new - c)[~mask]).max()
        scale = 1 + np.abs(new).max()
        c = new
        if change / scale < tol:
            break
    return c


def cell_se(x, mask, f, lam, cols, rows, i, t, regime):
    T_, N_ = x.shape
    e = x - f @ lam.T
    g = lambda m: m.T @ m / m.shape[0]
    other_c = [k for k in range(N_) if k not in cols]
    other_r = [a for a in range(T_) if a not in rows]
    b_l = len(cols) / N_ * np.eye(R) + len(other_c) / N_ * g(lam[other_c]) @ np.linalg.inv(g(lam[cols]))
    b_f = len(rows) / T_ * np.eye(R) + len(other_r) / T_ * g(f[other_r]) @ np.linalg.inv(g(f[rows]))
    gam_o = sum(np.outer(lam[k], lam[k]) * e[t, k] ** 2 for k in sorted(cols)) / len(cols)
    phi_o = sum(np.outer(f[a], f[a]) * e[a, i] ** 2 for a in sorted(rows)) / len(rows)
    li, ft = lam[i], f[t]
    if regime == "refit":
        sl, sf = np.linalg.inv(g(lam)), np.linalg.inv(g(f))
        v = li @ sl @ b_l @ gam_o @ b_l.T @ sl @ li
        w = ft @ sf @ b_f @ phi_o @ b_f.T @ sf @ ft
    else:
        sl, sf = np.linalg.inv(g(lam[cols])), np.linalg.inv(g(f[rows]))
        v = li @ sl @ gam_o @ sl @ li
        w = ft @ sf @ phi_o @ sf @ ft
    return np.sqrt(v / len(cols) + w / len(rows))


def main():
    np.set_printoptions(precision=15)
    x, mask = panel()
    f, lam = apc(x, R)
    print("apc common (0,0), (11,9):", repr((f @ lam.T)[0, 0]), repr((f @ lam.T)[11, 9]))
    c, cols, rows = tall_wide(x, mask, R)
    print("cols", cols, "rows", rows)
    cells = [(1, 2), (4, 5), (7, 9), (9, 11), (0, 9), (1, 0), (0, 0)]
    print("tw:", [repr(c[t, i]) for i, t in cells])
    xt = fill(x, mask, c)
    f2, l2 = apc(xt, R)
    cp = f2 @ l2.T
    print("refit:", [repr(cp[t, i]) for i, t in cells])
    ce = em(x, mask, R, cols, rows)
    print("em:", [repr(ce[t, i]) for i, t in cells])
    print("se refit miss (7,9):", repr(cell_se(xt, mask, f2, l2, cols, rows, 7, 9, "refit")))
    print("se tallwide miss (7,9):", repr(cell_se(xt, mask, f2, l2, cols, rows, 7, 9, "tw")))


main()
