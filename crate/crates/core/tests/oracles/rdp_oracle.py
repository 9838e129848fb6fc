"""Extended-precision reference for the integer-order subsampled Gaussian RDP bound.

Evaluates the binomial series with mpmath at 60 significant digits, with no
log-space tricks, and prints the values that the Rust tests pin.
"""
from mpmath import mp, mpf, binomial, exp, log, findroot

mp.dps = 60


def rdp(q, sigma, alpha):
    q = mpf(q)
    sigma = mpf(sigma)
    total = mpf(0)
    for k in range(alpha + 1):
        total += binomial(alpha, k) * (1 - q) ** (alpha - k) * q ** k * exp(mpf(k * (k - 1)) / (2 * sigma ** 2))
    return log(total) / (alpha - 1)


def epsilon(q, sigma, steps, delta, orders=range(2, 65)):
    best = None
    for a in orders:
        e = steps * rdp(q, sigma, a) + log(1 / mpf(delta)) / (a - 1)
        if best is None or e < best[0]:
            best = (e, a)
    return best


if __name__ == "__main__":
    print("rdp(q=0.01, sigma=1.1, alpha=8) =", mp.nstr(rdp("0.01", "1.1", 8), 25))
    e, a = epsilon("0.02", "1.3", 500, "1e-5")
    print("eps(q=0.02, sigma=1.3, T=500, delta=1e-5) =", mp.nstr(e, 25), "alpha* =", a)
    lo, hi = mpf("0.3"), mpf("100")
    for _ in range(200):
        mid = (lo + hi) / 2
        if epsilon("0.05", mid, 400, "1e-5")[0] > 1:
            lo = mid
        else:
            hi = mid
    print("sigma(eps=1, delta=1e-5, q=0.05, T=400) =", mp.nstr(hi, 25))
