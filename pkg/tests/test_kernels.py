"""The compiled kernels and the numpy fallback must agree."""

import math
import os
import subprocess
import sys

import numpy as np
import pytest

from qfilter import _kernels_py, kernels
from qfilter.filtering import HETERODYNE, HOMODYNE, FilterSystem, MeasurementChannel
from qfilter.filtering import _stepping_channels
from qfilter.kalman import PhaseChannel, PhaseSpaceModel, canonical_form
from qfilter.operators import dagger

compiled = pytest.importorskip("qfilter._kernels", reason="compiled extension not built")


def kernel_args(seed, d, kinds, scheme, n=6, n_steps=40, dt=1e-3):
    r = np.random.default_rng(seed)
    a = r.normal(size=(d, d)) + 1j * r.normal(size=(d, d))
    chans = [MeasurementChannel((r.normal(size=(d, d)) + 1j * r.normal(size=(d, d))) / d,
                                float(r.uniform(0.2, 1.0)), kind) for kind in kinds]
    chans.append(MeasurementChannel(np.diag(r.normal(size=d)), 0.3, observed=False))
    system = FilterSystem.build(0.5 * (a + dagger(a)), chans, scheme=scheme)
    b = r.normal(size=(d, d)) + 1j * r.normal(size=(d, d))
    rho0 = b @ dagger(b)
    rho0 /= np.trace(rho0).real
    chans_step = _stepping_channels(system)
    Ld = np.array([math.sqrt(w) * L for L, w in chans_step], dtype=complex).reshape(
        len(chans_step), d, d)
    noise = r.normal(size=(n, n_steps, system.n_columns)) * np.sqrt(dt * system.weights)
    obs = np.array([np.diag(np.arange(d)).astype(complex), b + dagger(b)])
    return (rho0, system.K, Ld, system.L_cols, system.weights, noise, dt), obs


class TestEquivalence:
    @pytest.mark.parametrize("d", [2, 3, 5, 10])
    @pytest.mark.parametrize("scheme", ["kraus", "euler"])
    @pytest.mark.parametrize("physical", [False, True])
    def test_sme_integrate(self, d, scheme, physical):
        args, obs = kernel_args(d * 7 + len(scheme), d, [HOMODYNE, HETERODYNE], scheme)
        kw = dict(physical=physical, record_every=4, observables=obs,
                  quadratic=scheme == "kraus")
        a = _kernels_py.sme_integrate(*args, **kw)
        b = compiled.sme_integrate(*args, **kw)
        np.testing.assert_array_equal(a["status"], b["status"])
        for key in ("rho", "loglik", "purity", "expect", "increments"):
            np.testing.assert_allclose(a[key], b[key], rtol=1e-11, atol=1e-13, err_msg=key)

    def test_failure_status_agrees(self):
        sx = np.array([[0, 1], [1, 0]], dtype=complex)
        args = (np.diag([1.0, 0.0]).astype(complex), 0.5 * sx @ sx, np.zeros((0, 2, 2)),
                sx[None], np.array([1.0]), np.array([[[0.0], [0.5]], [[0.0], [0.0]]]), 0.01)
        kw = dict(physical=False, record_every=1, observables=np.zeros((0, 2, 2)),
                  quadratic=False)
        a = _kernels_py.sme_integrate(*args, **kw)
        b = compiled.sme_integrate(*args, **kw)
        np.testing.assert_array_equal(a["status"], [1, -1])
        np.testing.assert_array_equal(b["status"], a["status"])

    @pytest.mark.parametrize("n_modes", [1, 2])
    def test_riccati(self, n_modes):
        r = np.random.default_rng(n_modes)
        d = 2 * n_modes
        om = r.normal(size=(d, d))
        m = PhaseSpaceModel(n_modes, canonical_form(n_modes), 0.5 * (om + om.T), np.zeros(d),
                            (PhaseChannel(r.normal(size=d) + 1j * r.normal(size=d), 0.7,
                                          HETERODYNE),
                             PhaseChannel(r.normal(size=d), 0.4, HOMODYNE)),
                            3 * np.eye(d), np.zeros(d))
        args = (m.P0, m.A, m.D, m.X2, m.SY, m.weights, 1e-3, 500, 50)
        np.testing.assert_allclose(_kernels_py.riccati_rk4(*args), compiled.riccati_rk4(*args),
                                   rtol=1e-12, atol=1e-13)


class TestSelection:
    def test_compiled_is_default(self):
        assert kernels.BACKEND == "compiled"

    def test_environment_forces_fallback(self):
        env = {**os.environ, "QFILTER_BACKEND": "python"}
        out = subprocess.run([sys.executable, "-c",
                              "from qfilter import kernels; print(kernels.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "python"
