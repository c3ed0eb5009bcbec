import numpy as np
import pytest

from cvxint import flux, hull


@pytest.fixture(scope="session")
def profile_m2():
    """Case-(ii) profile for gradient bound M = 2, slack 0.5."""
    return flux.build_profile(2.0, 0.5)


@pytest.fixture(scope="session")
def sample_laminate_states():
    """Sampler: uniform-box states filtered by the lamination expression.

    Returns (P, B) arrays with expression <= -margin (inside) or
    >= +margin (outside).
    """

    def sample(count, seed, margin=0.01, inside=True, p_box=3.0, b_box=0.5):
        rng = np.random.default_rng(seed)
        P, B = [], []
        while len(P) < count:
            p = rng.uniform(-p_box, p_box, size=(4 * count, 2))
            b = rng.uniform(-b_box, b_box, size=(4 * count, 2))
            G = hull.lamination_expression(p, b)
            mask = (G <= -margin) if inside else (G >= margin)
            for pi, bi in zip(p[mask], b[mask]):
                P.append(pi)
                B.append(bi)
                if len(P) == count:
                    break
        return np.array(P), np.array(B)

    return sample
