import numpy as np
import pytest

from spo.utility import UtilitySpec


def random_relatives(rng, n, d, vol=0.05):
    return np.exp(rng.normal(0.002, vol, size=(n, d)))


def grid_conjugate(u, theta, lo=None, hi=None, num=400_001):
    """Concave conjugate ``inf_z theta*z - u(z)`` by brute force on a grid, refined once."""
    z_star = 1.0 / theta - u.eta if u.family.value == "log" else (np.log(u.a / theta) - u.eta) / u.a
    lo = z_star - 5.0 if lo is None else lo
    if u.family.value == "log":
        lo = max(lo, -u.eta + 1e-9)
    hi = z_star + 5.0 if hi is None else hi
    for _ in range(2):
        z = np.linspace(lo, hi, num)
        vals = theta * z - u.value(z)
        k = int(np.argmin(vals))
        step = z[1] - z[0]
        lo, hi = z[max(k - 2, 0)], z[min(k + 2, num - 1)]
        if u.family.value == "log":
            lo = max(lo, -u.eta + 1e-12)
    return float(vals[k]), step


UTILITIES = [UtilitySpec.log(1.0), UtilitySpec.log(0.5), UtilitySpec.exp(1.0), UtilitySpec.exp(3.0, 0.2)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
