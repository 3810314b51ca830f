import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_sample(x, grid):
    """Loop-per-point trilinear sampler with zero padding (test oracle)."""
    N, C, T, H, W = x.shape
    g = grid if grid.ndim == 5 else np.broadcast_to(grid, (N,) + grid.shape)
    To, Ho, Wo = g.shape[1:4]
    out = np.zeros((N, C, To, Ho, Wo))

    def denorm(v, L):
        return 0.0 if L == 1 else (v + 1.0) * (L - 1) / 2.0

    for n in range(N):
        for i in np.ndindex(To, Ho, Wo):
            t, xx, yy = g[(n,) + i]
            ft, fy, fx = denorm(t, T), denorm(yy, H), denorm(xx, W)
            t0, y0, x0 = int(np.floor(ft)), int(np.floor(fy)), int(np.floor(fx))
            for dt in (0, 1):
                for dy in (0, 1):
                    for dx in (0, 1):
                        ti, yi, xi = t0 + dt, y0 + dy, x0 + dx
                        w = ((1 - abs(ft - ti)) if T > 1 else float(ti == 0)) \
                            * ((1 - abs(fy - yi)) if H > 1 else float(yi == 0)) \
                            * ((1 - abs(fx - xi)) if W > 1 else float(xi == 0))
                        if w <= 0 or not (0 <= ti < T and 0 <= yi < H and 0 <= xi < W):
                            continue
                        out[(n, slice(None)) + i] += w * x[n, :, ti, yi, xi]
    return out


def naive_conv3d(x, w, b):
    """Direct loops, stride 1, same padding with the extra pad on the high side."""
    N, C, T, H, W = x.shape
    O, _, k, _, _ = w.shape
    lo = (k - 1) // 2
    hi = k - 1 - lo
    xp = np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi), (lo, hi)))
    out = np.zeros((N, O, T, H, W))
    for n in range(N):
        for o in range(O):
            for t, i, j in np.ndindex(T, H, W):
                out[n, o, t, i, j] = np.sum(xp[n, :, t:t + k, i:i + k, j:j + k] * w[o]) + b[o]
    return out


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
