import numpy as np
import pytest

from flexmodal.modal import ModalModel


def random_modal_model(rng, n_outputs=4, n_inputs=3, n_flex=3, n_rigid=0):
    """Random stable modal model with well-separated resonances."""
    omega = np.sort(rng.uniform(50.0, 900.0, n_flex)) * 2 * np.pi
    omega2 = np.concatenate([np.zeros(n_rigid), omega**2])
    zeta = np.concatenate([np.zeros(n_rigid), 2 * rng.uniform(0.005, 0.05, n_flex) * omega])
    n_m = n_rigid + n_flex
    shapes = rng.standard_normal((n_outputs, n_m))
    gains = rng.standard_normal((n_m, n_inputs))
    coords = rng.uniform(-0.1, 0.1, (n_outputs, 2))
    return ModalModel(
        omega2=omega2, zeta=zeta, mode_shapes=shapes, input_gains=gains,
        sensor_coords=coords, n_rigid=n_rigid,
    )


def state_space_of(model):
    """First-order realization: block of [eta_i, etadot_i] per mode."""
    n_m = model.n_modes
    A = np.zeros((2 * n_m, 2 * n_m))
    B = np.zeros((2 * n_m, model.n_inputs))
    C = np.zeros((model.n_outputs, 2 * n_m))
    for i in range(n_m):
        A[2 * i, 2 * i + 1] = 1.0
        A[2 * i + 1, 2 * i] = -model.omega2[i]
        A[2 * i + 1, 2 * i + 1] = -model.zeta[i]
        B[2 * i + 1, :] = model.input_gains[i, :]
        C[:, 2 * i] = model.mode_shapes[:, i]
    return A, B, C


def resolvent_frf(model, omega_grid):
    """Independent FRF oracle: C (sI - A)^{-1} B per frequency."""
    A, B, C = state_space_of(model)
    n = A.shape[0]
    out = np.empty((model.n_outputs, model.n_inputs, len(omega_grid)), dtype=complex)
    for l, w in enumerate(omega_grid):
        out[:, :, l] = C @ np.linalg.solve(1j * w * np.eye(n) - A, B)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
