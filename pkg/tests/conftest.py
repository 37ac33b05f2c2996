import numpy as np
import pytest


@pytest.fixture(scope="session")
def demo_system():
    """Three-state orthogonal plant with a single input (the desk example)."""
    A = np.array([[0.0, -0.80, -0.60],
                  [0.80, -0.36, 0.48],
                  [0.60, 0.48, -0.64]])
    B = np.array([[0.16], [0.14], [1.0]])
    return A, B


@pytest.fixture(scope="session")
def demo_weights():
    Q = np.eye(3)
    Q_f = np.array([[12.0, 1.0, 4.0], [1.0, 19.0, 2.0], [4.0, 2.0, 2.0]])
    R = np.array([[2.0]])
    return Q, Q_f, R
