import numpy as np
import pytest

from tgcimpute import kernels
from tgcimpute.emfit import e_step, fill_latent, observed_loglik
from tgcimpute.errors import ConfigError

from oracles import random_correlation

HAS_COMPILED = "compiled" in kernels.available_backends()


def test_python_backend_always_available():
    assert "python" in kernels.available_backends()
    assert kernels.get_backend("python").NAME == "python"


def test_unknown_backend_rejected():
    with pytest.raises(ConfigError):
        kernels.get_backend("fortran")


def test_env_override(monkeypatch):
    monkeypatch.setenv("TGCIMPUTE_BACKEND", "python")
    assert kernels.default_backend_name() == "python"
    assert kernels.get_backend().NAME == "python"


def test_module_passthrough():
    backend = kernels.get_backend("python")
    assert kernels.get_backend(backend) is backend


@pytest.mark.skipif(not HAS_COMPILED, reason="compiled core not built")
class TestCompiledAgainstPython:
    def test_cholesky_and_solve_agree(self):
        rng = np.random.default_rng(0)
        comp = kernels.get_backend("compiled")
        py = kernels.get_backend("python")
        for k in (1, 2, 5, 9):
            a = random_correlation(k, rng)
            lc, lp = comp.chol_lower(a), py.chol_lower(a)
            assert np.max(np.abs(lc - lp)) <= 1e-12
            assert np.max(np.abs(np.tril(lc) @ np.tril(lc).T - a)) <= 1e-12
            b = rng.standard_normal((k, 3))
            xc, xp = comp.solve_cholesky(lc, b), py.solve_cholesky(lp, b)
            assert np.max(np.abs(xc - xp)) <= 1e-10
            v = rng.standard_normal(k)
            assert np.max(np.abs(comp.solve_cholesky(lc, v) - py.solve_cholesky(lp, v))) <= 1e-10

    def test_cholesky_rejects_indefinite(self):
        comp = kernels.get_backend("compiled")
        assert comp.chol_lower(np.array([[1.0, 2.0], [2.0, 1.0]])) is None
        assert comp.chol_lower(np.empty((0, 0))).shape == (0, 0)

    def test_estep_pass_agrees(self):
        rng = np.random.default_rng(1)
        sigma = random_correlation(6, rng)
        z = rng.standard_normal((80, 6)) @ np.linalg.cholesky(sigma).T
        mask = rng.random((80, 6)) >= 0.45
        z = np.where(mask, z, np.nan)
        zf_c, m_c = e_step(z, mask, sigma, backend="compiled")
        zf_p, m_p = e_step(z, mask, sigma, backend="python")
        assert np.max(np.abs(zf_c - zf_p)) <= 1e-12
        assert np.max(np.abs(m_c.total - m_p.total)) <= 1e-10
        # symmetric by construction in both backends
        assert np.array_equal(m_c.total, m_c.total.T)
        assert np.array_equal(m_p.total, m_p.total.T)

    def test_fill_and_loglik_agree(self):
        rng = np.random.default_rng(2)
        sigma = random_correlation(5, rng)
        z = rng.standard_normal((40, 5))
        mask = rng.random((40, 5)) >= 0.5
        z = np.where(mask, z, np.nan)
        assert np.max(np.abs(
            fill_latent(z, mask, sigma, backend="compiled")
            - fill_latent(z, mask, sigma, backend="python")
        )) <= 1e-12
        ll_c = observed_loglik(z, mask, sigma, backend="compiled")
        ll_p = observed_loglik(z, mask, sigma, backend="python")
        assert ll_c == pytest.approx(ll_p, abs=1e-10)
