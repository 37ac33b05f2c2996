import numpy as np

from netspc.policy import PolicyParams, lambda_mask, theta_mask


def random_params(N, m, d, rng, scale=1.0):
    """Random policy with the causal block structure enforced."""
    Theta = np.where(theta_mask(N, m, d), rng.standard_normal((m * N, d * (N - 1))), 0.0)
    Lam = np.where(lambda_mask(N, m), rng.standard_normal((m * N, N - 1)), 0.0)
    return PolicyParams(eta=scale * rng.standard_normal(m * N),
                        Theta=scale * Theta, Lambda=scale * Lam, N=N, m=m, d=d)
