"""Voigt notation helpers.

Component order is (11, 22, 33, 23, 13, 12). Strain vectors carry engineering
shear components (doubled), stress vectors carry tensor components. A 6x6
stiffness maps engineering strain to stress; a 6x6 compliance maps stress to
engineering strain.
"""
import numpy as np

VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))

_INDEX = np.empty((3, 3), dtype=int)
for _k, (_i, _j) in enumerate(VOIGT_PAIRS):
    _INDEX[_i, _j] = _k
    _INDEX[_j, _i] = _k

# engineering shear factor per component
_SHEAR = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])

IDENTITY6 = np.eye(6)


def stress_to_tensor(v):
    v = np.asarray(v, dtype=float)
    return v[..., _INDEX]


def strain_to_tensor(v):
    v = np.asarray(v, dtype=float) / _SHEAR
    return v[..., _INDEX]


def tensor_to_stress(t):
    t = np.asarray(t, dtype=float)
    sym = 0.5 * (t + np.swapaxes(t, -1, -2))
    return np.stack([sym[..., i, j] for i, j in VOIGT_PAIRS], axis=-1)


def tensor_to_strain(t):
    return tensor_to_stress(t) * _SHEAR


def schmid_vector(Z):
    """Voigt vector ``z`` of a (possibly nonsymmetric) Schmid tensor.

    With this vector the resolved shear is ``z @ sigma`` for a Voigt stress and
    the engineering plastic strain rate of one system is ``gamma_dot * z``.
    """
    Z = np.asarray(Z, dtype=float)
    sym = Z + np.swapaxes(Z, -1, -2)
    return np.stack([Z[..., 0, 0], Z[..., 1, 1], Z[..., 2, 2],
                     sym[..., 1, 2], sym[..., 0, 2], sym[..., 0, 1]], axis=-1)


def stiffness_to_tensor(C):
    C = np.asarray(C, dtype=float)
    return C[..., _INDEX[:, :, None, None], _INDEX[None, None, :, :]]


def tensor_to_stiffness(T):
    T = np.asarray(T, dtype=float)
    out = np.empty(T.shape[:-4] + (6, 6))
    for a, (i, j) in enumerate(VOIGT_PAIRS):
        for b, (k, l) in enumerate(VOIGT_PAIRS):
            out[..., a, b] = T[..., i, j, k, l]
    return out


def rotate_stiffness(C, R):
    """Rotate a Voigt stiffness from the crystal frame with ``R`` (crystal to sample)."""
    T = stiffness_to_tensor(C)
    Tr = np.einsum("...ia,...jb,...kc,...ld,...abcd->...ijkl", R, R, R, R, T)
    return tensor_to_stiffness(Tr)


def rotate_tensor2(t, R):
    return np.einsum("...ia,...jb,...ab->...ij", R, R, t)


def equivalent_strain(v):
    """sqrt(2/3 e_ij e_ij) of an engineering-Voigt strain."""
    v = np.asarray(v, dtype=float)
    sq = np.sum(v[..., :3] ** 2, axis=-1) + 0.5 * np.sum(v[..., 3:] ** 2, axis=-1)
    return np.sqrt(2.0 / 3.0 * sq)


def von_mises(s):
    s = np.asarray(s, dtype=float)
    d = s[..., :3] - np.mean(s[..., :3], axis=-1, keepdims=True)
    sq = np.sum(d ** 2, axis=-1) + 2.0 * np.sum(s[..., 3:] ** 2, axis=-1)
    return np.sqrt(1.5 * sq)
