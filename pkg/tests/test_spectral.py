"""Spectral nonlinearity, full forward map, Jacobian, and preconditioner."""

import logging
import math

import numpy as np
import pytest

from splitct.core import ContractViolation, MaterialImage, RngStream, TensorFormatError
from splitct.radon import make_geometry
from splitct.spectral import (
    EXP_CLAMP,
    LOG_FLOOR,
    build_default_model,
    forward,
    load_model,
    log_forward_residual,
    make_spectral_model,
    phi,
    phi_jacobian,
    save_model,
)


@pytest.fixture(scope="module")
def model():
    return build_default_model()


class TestMakeSpectralModel:
    def test_rows_renormalized(self):
        mu = np.array([[1.0, 0.2], [0.3, 1.0]])
        m = make_spectral_model(np.array([[2.0, 2.0], [1.0, 3.0]]), mu)
        np.testing.assert_allclose(m.spectra.sum(axis=1), 1.0, atol=1e-15)

    def test_identity_tables_give_identity_response(self):
        m = make_spectral_model(np.eye(3), np.eye(3))
        np.testing.assert_allclose(m.u, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(m.u_dagger, np.eye(3), atol=1e-12)

    def test_rejects_fewer_bins_than_materials(self):
        with pytest.raises(ContractViolation, match="bins as materials"):
            make_spectral_model(np.ones((2, 4)), np.ones((4, 3)))

    def test_rejects_negative_spectra(self):
        s = np.ones((3, 4))
        s[1, 2] = -0.1
        with pytest.raises(ContractViolation, match="nonnegative"):
            make_spectral_model(s, np.ones((4, 3)))

    def test_rejects_negative_attenuation(self):
        mu = np.ones((4, 3))
        mu[0, 0] = -1.0
        with pytest.raises(ContractViolation, match="nonnegative"):
            make_spectral_model(np.ones((3, 4)), mu)

    def test_rejects_incompatible_shapes(self):
        with pytest.raises(ContractViolation, match="shapes"):
            make_spectral_model(np.ones((3, 4)), np.ones((5, 3)))

    def test_rejects_rank_deficiency(self):
        # two identical materials collapse the bin response to rank 1
        mu = np.ones((4, 2))
        with pytest.raises(ValueError, match="rank deficient"):
            make_spectral_model(np.ones((3, 4)), mu)


class TestBuildDefaultModel:
    def test_row_sums_exactly_normalized(self, model):
        np.testing.assert_allclose(model.spectra.sum(axis=1), 1.0, atol=1e-12)

    def test_shapes(self, model):
        assert model.spectra.shape == (5, 150)
        assert model.attenuation.shape == (150, 3)
        assert model.u.shape == (5, 3)
        assert model.u_dagger.shape == (3, 5)
        assert (model.n_energies, model.n_bins, model.n_materials) == (150, 5, 3)

    def test_pseudoinverse_identity(self, model):
        err = np.abs(model.u @ model.u_dagger @ model.u - model.u).max()
        assert err <= 1e-8

    def test_conditioning(self, model):
        sv = np.linalg.svd(model.u, compute_uv=False)
        assert sv[0] / sv[-1] < 1e6

    def test_energy_grid(self, model):
        e = model.energies
        assert e.min() > 0.0 and e.max() <= 150.0
        steps = np.diff(e)
        assert (steps > 0).all()
        np.testing.assert_allclose(steps, steps[0], atol=1e-12)

    def test_absorption_edges(self, model):
        spacing = model.energies[1] - model.energies[0]
        for column, edge_kev in ((1, 33.2), (2, 50.2)):
            jumps = np.diff(model.attenuation[:, column])
            at = int(np.argmax(jumps)) + 1
            assert jumps[at - 1] > 0.0
            assert abs(model.energies[at] - edge_kev) <= spacing

    def test_water_column_smoothly_decreasing(self, model):
        assert (np.diff(model.attenuation[:, 0]) < 0.0).all()

    @pytest.mark.parametrize(
        "kwargs", [dict(n_bins=2), dict(n_energies=3, n_bins=5), dict(n_materials=2)]
    )
    def test_rejects_bad_counts(self, kwargs):
        with pytest.raises(ContractViolation):
            build_default_model(**kwargs)

    def test_seeded_jitter_is_deterministic(self):
        a = build_default_model(seed=RngStream(1, "model"))
        b = build_default_model(seed=RngStream(1, "model"))
        c = build_default_model(seed=RngStream(2, "model"))
        np.testing.assert_array_equal(a.spectra, b.spectra)
        assert not np.array_equal(a.spectra, c.spectra)


class TestPhi:
    def test_two_node_hand_value(self):
        m = make_spectral_model(
            np.array([[0.5, 0.5]]), np.array([[1.0], [2.0]])
        )
        got = phi(m, np.array([1.0]))
        expected = 0.5 * math.exp(-1.0) + 0.5 * math.exp(-2.0)
        assert abs(got[0] - expected) < 1e-15

    def test_zero_integrals_give_unit_intensity(self, model):
        out = phi(model, np.zeros(3))
        np.testing.assert_allclose(out, 1.0, atol=1e-12)

    def test_single_energy_node_is_pure_exponential(self):
        m = make_spectral_model(np.array([[1.0]]), np.array([[0.7]]))
        expected = math.exp(-0.7 * 2.0)
        assert abs(phi(m, np.array([2.0]))[0] - expected) < 1e-15

    def test_batched_shapes(self, model):
        z = RngStream(3, "phi").generator().random((4, 6, 3))
        out = phi(model, z)
        assert out.shape == (4, 6, 5)
        # batched and single-row evaluations take different BLAS paths and may
        # differ in the last bit
        np.testing.assert_allclose(out[2, 3], phi(model, z[2, 3]), rtol=1e-12)

    def test_range_on_nonnegative_input(self, model):
        z = RngStream(4, "phi").generator().random((100, 3)) * 10.0
        out = phi(model, z)
        assert (out > 0.0).all()
        assert (out <= 1.0 + 1e-12).all()

    def test_rejects_wrong_material_count(self, model):
        with pytest.raises(ContractViolation, match="M=3"):
            phi(model, np.zeros(2))

    def test_rejects_non_finite(self, model):
        with pytest.raises(ContractViolation, match="finite"):
            phi(model, np.array([np.nan, 0.0, 0.0]))

    def test_clamps_and_warns_on_strongly_negative_input(self, model, caplog):
        z = np.full(3, -1e6)
        with caplog.at_level(logging.WARNING, logger="splitct.spectral"):
            out = phi(model, z)
        assert np.isfinite(out).all()
        assert out.max() <= math.exp(EXP_CLAMP) * (1.0 + 1e-12)
        assert any("clamped" in rec.message for rec in caplog.records)


class TestPhiJacobian:
    def test_at_zero_equals_negative_bin_response(self, model):
        np.testing.assert_allclose(phi_jacobian(model, np.zeros(3)), -model.u, atol=1e-12)

    def test_entries_nonpositive(self, model):
        z = RngStream(5, "jac").generator().random((50, 3))
        assert (phi_jacobian(model, z) <= 0.0).all()

    def test_matches_central_differences(self, model):
        rng = RngStream(6, "jac").generator()
        z = rng.random((100, 3)) * 2.0
        jac = phi_jacobian(model, z)
        h = 1e-5
        worst = 0.0
        for m in range(3):
            zp = z.copy()
            zm = z.copy()
            zp[:, m] += h
            zm[:, m] -= h
            fd = (phi(model, zp) - phi(model, zm)) / (2.0 * h)
            err = np.abs(fd - jac[:, :, m]) / np.maximum(np.abs(fd), 1e-12)
            worst = max(worst, err.max())
        assert worst < 1e-6


class TestForward:
    def test_zero_image_all_ones(self, model):
        geom = make_geometry(32, 8)
        y = forward(model, geom, MaterialImage(np.zeros((3, 32, 32))))
        assert np.abs(y.data - 1.0).max() <= 1e-12

    def test_equals_phi_of_projection(self, model):
        from splitct.radon import project_stack

        geom = make_geometry(32, 8)
        img = MaterialImage(RngStream(7, "fw").generator().random((3, 32, 32)) * 0.1)
        y = forward(model, geom, img)
        np.testing.assert_array_equal(y.data, phi(model, project_stack(geom, img)))

    def test_componentwise_antitone(self, model):
        geom = make_geometry(32, 8)
        rng = RngStream(8, "fw").generator()
        x1 = rng.random((3, 32, 32)) * 0.05
        x2 = x1 + rng.random((3, 32, 32)) * 0.05
        y1 = forward(model, geom, MaterialImage(x1))
        y2 = forward(model, geom, MaterialImage(x2))
        assert (y2.data <= y1.data + 1e-15).all()

    def test_range_for_nonnegative_image(self, model):
        geom = make_geometry(32, 8)
        img = MaterialImage(RngStream(9, "fw").generator().random((3, 32, 32)) * 0.1)
        y = forward(model, geom, img)
        assert (y.data > 0.0).all()
        assert (y.data <= 1.0 + 1e-12).all()


class TestLogForwardResidual:
    def test_consistent_data_zero_residual(self, model):
        geom = make_geometry(32, 8)
        img = MaterialImage(RngStream(10, "lr").generator().random((3, 32, 32)) * 0.1)
        y = forward(model, geom, img)
        res = log_forward_residual(model, geom, img, y)
        assert np.abs(res).max() == 0.0

    def test_constant_ratio_gives_constant_residual(self, model):
        from splitct.core import SpectralSinogram

        geom = make_geometry(32, 8)
        img = MaterialImage(RngStream(11, "lr").generator().random((3, 32, 32)) * 0.1)
        y = forward(model, geom, img)
        scaled = SpectralSinogram(y.data * math.e)
        res = log_forward_residual(model, geom, img, scaled)
        np.testing.assert_allclose(res, -1.0, atol=1e-12)

    def test_algebraic_round_trip(self, model):
        from splitct.core import SpectralSinogram

        geom = make_geometry(32, 8)
        rng = RngStream(12, "lr").generator()
        img = MaterialImage(rng.random((3, 32, 32)) * 0.1)
        y = SpectralSinogram(rng.random((8, geom.n_dets, 5)) * 0.9 + 0.05)
        res = log_forward_residual(model, geom, img, y)
        floored = np.maximum(y.data, LOG_FLOOR)
        back = np.exp(res + np.log(floored))
        target = forward(model, geom, img).data
        assert np.abs(back - target).max() <= 1e-12


class TestModelSerialization:
    def test_round_trip(self, model, tmp_path):
        save_model(tmp_path, model)
        back = load_model(tmp_path)
        np.testing.assert_array_equal(back.energies, model.energies)
        for name in ("spectra", "attenuation", "u", "u_dagger"):
            diff = np.abs(getattr(back, name) - getattr(model, name)).max()
            assert diff <= 1e-5, name
        np.testing.assert_allclose(back.spectra.sum(axis=1), 1.0, atol=1e-12)

    def test_detects_tampered_response_table(self, model, tmp_path):
        from splitct.core import read_tensor, write_tensor

        save_model(tmp_path, model)
        _, u = read_tensor(tmp_path / "u.tf")
        write_tensor(tmp_path / "u.tf", u * 1.5)
        with pytest.raises(TensorFormatError, match="disagrees"):
            load_model(tmp_path)

    def test_detects_metadata_mismatch(self, model, tmp_path):
        save_model(tmp_path, model)
        meta = (tmp_path / "meta.txt").read_text().splitlines()
        meta[-1] = "energies=1.0,2.0"
        (tmp_path / "meta.txt").write_text("\n".join(meta) + "\n")
        with pytest.raises(TensorFormatError, match="energies"):
            load_model(tmp_path)
