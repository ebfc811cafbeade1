"""Scan machinery: discretization, monoid algebra, sequential/parallel
equivalence, the fused op, and the full block."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrscan.ssm import (
    ScanElement,
    SERIES_EPS,
    SsmParams,
    _phi,
    _phi_prime,
    init_ssm_params,
    mamba_block_forward,
    scan_parallel,
    scan_sequential,
    selective_parameterize,
    selective_scan,
    zoh_discretize,
)
from corrscan.tensor import ShapeError, Tensor, no_grad


def random_scan_instance(rng, n, di, ds, dtype=np.float64):
    """Discretized per-step elements with decay factors inside (0, 1)."""
    a_bar = np.exp(-np.abs(rng.standard_normal((n, di, ds)))).astype(dtype)
    bx = rng.standard_normal((n, di, ds)).astype(dtype)
    c_seq = rng.standard_normal((n, ds)).astype(dtype)
    d_skip = rng.standard_normal(di).astype(dtype)
    x_seq = rng.standard_normal((n, di)).astype(dtype)
    return a_bar, bx, c_seq, d_skip, x_seq


class TestDiscretization:
    def test_zoh_scalar_known_value(self):
        # a = -1, delta = ln 2: a_bar = 1/2, b_bar = (a_bar - 1)/a * b
        a_bar, b_bar = zoh_discretize(np.array([-1.0]), np.array([3.0]), np.log(2.0))
        np.testing.assert_allclose(a_bar, 0.5, atol=1e-12)
        np.testing.assert_allclose(b_bar, 0.5 * 3.0, atol=1e-12)

    def test_zoh_delta_positive_required(self):
        with pytest.raises(ValueError):
            zoh_discretize(np.array([-1.0]), np.array([1.0]), 0.0)

    def test_zoh_nonfinite_a_rejected(self):
        with pytest.raises(ValueError):
            zoh_discretize(np.array([np.inf]), np.array([1.0]), 0.1)

    def test_phi_series_continuity(self):
        # series and exact branch agree where they hand over
        z = np.array([SERIES_EPS * 0.999, SERIES_EPS * 1.001, -SERIES_EPS * 0.999])
        exact = np.expm1(z) / z
        np.testing.assert_allclose(_phi(z), exact, rtol=1e-10)

    def test_phi_prime_series_continuity(self):
        # the exact branch cancels ~8 digits at the handover, hence the slack
        z = np.array([SERIES_EPS * 0.999, SERIES_EPS * 1.001])
        exact = (np.exp(z) * (z - 1) + 1) / z**2
        np.testing.assert_allclose(_phi_prime(z), exact, rtol=1e-6)

    def test_phi_at_zero(self):
        np.testing.assert_allclose(_phi(np.array([0.0])), 1.0, atol=1e-12)

    def test_zoh_small_delta_stays_finite(self):
        a_bar, b_bar = zoh_discretize(np.array([-1e-9]), np.array([1.0]), 1e-9)
        assert np.isfinite(a_bar).all() and np.isfinite(b_bar).all()


class TestScanAlgebra:
    @given(st.integers(0, 2**32 - 1))
    @settings(deadline=None, max_examples=50)
    def test_compose_associative(self, seed):
        rng = np.random.default_rng(seed)
        e = [
            ScanElement(rng.uniform(0, 1, (2, 3)), rng.standard_normal((2, 3)))
            for _ in range(3)
        ]
        left = ScanElement.compose(ScanElement.compose(e[0], e[1]), e[2])
        right = ScanElement.compose(e[0], ScanElement.compose(e[1], e[2]))
        np.testing.assert_allclose(left.a_bar, right.a_bar, rtol=1e-12)
        np.testing.assert_allclose(left.bx, right.bx, rtol=1e-10, atol=1e-12)

    def test_identity_element(self):
        e = ScanElement(np.full((2, 2), 0.7), np.ones((2, 2)))
        ident = ScanElement(np.ones((2, 2)), np.zeros((2, 2)))
        out = ScanElement.compose(ident, e)
        np.testing.assert_array_equal(out.a_bar, e.a_bar)
        np.testing.assert_array_equal(out.bx, e.bx)


class TestScanEquivalence:
    def test_matches_naive_recurrence(self):
        rng = np.random.default_rng(1)
        n, di, ds = 37, 3, 4
        a_bar, bx, c_seq, d_skip, x_seq = random_scan_instance(rng, n, di, ds)
        h = np.zeros((di, ds))
        want = np.empty((n, di))
        for t in range(n):
            h = a_bar[t] * h + bx[t]
            want[t] = h @ c_seq[t] + d_skip * x_seq[t]
        got = scan_sequential(a_bar, bx, c_seq, d_skip, x_seq)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    @given(
        st.integers(1, 512),
        st.integers(1, 64),
        st.integers(0, 2**32 - 1),
    )
    @settings(deadline=None, max_examples=60)
    def test_parallel_equals_sequential(self, n, chunk, seed):
        rng = np.random.default_rng(seed)
        a_bar, bx, c_seq, d_skip, x_seq = random_scan_instance(rng, n, 2, 3)
        ys = scan_sequential(a_bar, bx, c_seq, d_skip, x_seq)
        yp = scan_parallel(a_bar, bx, c_seq, d_skip, x_seq, chunk=chunk)
        scale = max(np.abs(ys).max(), 1e-12)
        assert np.abs(ys - yp).max() / scale <= 1e-5

    def test_float32_inputs_still_agree(self):
        rng = np.random.default_rng(2)
        a_bar, bx, c_seq, d_skip, x_seq = random_scan_instance(rng, 300, 4, 16, np.float32)
        ys = scan_sequential(a_bar, bx, c_seq, d_skip, x_seq)
        yp = scan_parallel(a_bar, bx, c_seq, d_skip, x_seq, chunk=64)
        scale = max(np.abs(ys).max(), 1e-12)
        assert np.abs(ys.astype(np.float64) - yp).max() / scale <= 1e-5

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        a_bar, bx, c_seq, d_skip, x_seq = random_scan_instance(rng, 8, 2, 3)
        with pytest.raises(ShapeError):
            scan_sequential(a_bar, bx, c_seq[:-1], d_skip, x_seq)


class TestFusedScan:
    def instance(self, n=50, di=6, ds=4, seed=0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        delta = Tensor(np.abs(rng.standard_normal((n, di))) * 0.3 + 0.01, dtype=dtype)
        a = Tensor(-np.abs(rng.standard_normal((di, ds))) - 0.1, dtype=dtype)
        b_seq = Tensor(rng.standard_normal((n, ds)), dtype=dtype)
        c_seq = Tensor(rng.standard_normal((n, ds)), dtype=dtype)
        x_seq = Tensor(rng.standard_normal((n, di)), dtype=dtype)
        d_skip = Tensor(rng.standard_normal(di), dtype=dtype)
        return delta, a, b_seq, c_seq, x_seq, d_skip

    def test_matches_explicit_composition(self):
        delta, a, b_seq, c_seq, x_seq, d_skip = self.instance()
        n, di = delta.shape
        ds = a.shape[1]
        a_bar = np.empty((n, di, ds))
        bx = np.empty((n, di, ds))
        for t in range(n):
            for i in range(di):
                ab, bb = zoh_discretize(a.data[i], b_seq.data[t], float(delta.data[t, i]))
                a_bar[t, i] = ab
                bx[t, i] = bb * x_seq.data[t, i]
        want = scan_sequential(a_bar, bx, c_seq.data, d_skip.data, x_seq.data)
        with no_grad():
            got = selective_scan(delta, a, b_seq, c_seq, x_seq, d_skip, chunk=16)
        np.testing.assert_allclose(got.data, want, rtol=1e-9, atol=1e-10)

    def test_sequential_and_parallel_impls_agree(self):
        args = self.instance(n=200, seed=4)
        with no_grad():
            ys = selective_scan(*args, impl="sequential", chunk=33)
            yp = selective_scan(*args, impl="parallel", chunk=33)
        np.testing.assert_allclose(ys.data, yp.data, rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("argi", range(6))
    def test_gradients_match_differences(self, argi):
        args = self.instance(n=20, di=3, ds=2, seed=argi)
        for i, t in enumerate(args):
            t.requires_grad = i == argi
        w = np.random.default_rng(99).standard_normal((20, 3))
        loss = (selective_scan(*args, chunk=7) * Tensor(w, dtype=np.float64)).sum()
        loss.backward()
        target = args[argi]
        step = 1e-6
        flat = target.data.reshape(-1)
        gf = target.grad.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = (selective_scan(*args, chunk=7).data * w).sum()
                flat[i] = orig - step
                fm = (selective_scan(*args, chunk=7).data * w).sum()
                flat[i] = orig
                fd = (fp - fm) / (2 * step)
                scale = max(abs(gf[i]), abs(fd), 1e-10)
                assert abs(gf[i] - fd) / scale < 1e-5


class TestBlock:
    def test_parameter_shapes_enforced(self):
        p = init_ssm_params(4, seed=0)
        with pytest.raises(ShapeError):
            SsmParams(
                d_model=4, a_log=p.a_log, w_in=p.w_in, conv1d_kernel=p.conv1d_kernel,
                w_x=p.w_x, delta_bias=p.delta_bias, d_skip=p.d_skip,
                w_out=Tensor(np.zeros((4, 13))),
            )

    def test_delta_positive(self):
        p = init_ssm_params(3, seed=1)
        x = Tensor(np.random.default_rng(0).standard_normal((40, 9)).astype(np.float32))
        _, _, delta = selective_parameterize(x, p)
        assert (delta.data > 0).all()

    def test_a_matrix_strictly_negative(self):
        p = init_ssm_params(5, seed=2)
        a = -np.exp(p.a_log.data)
        assert (a < 0).all()
        # -A spans 1..d_state per channel at init
        np.testing.assert_allclose(-a[0], np.arange(1, 17), rtol=1e-6)

    def test_block_impls_agree(self):
        p = init_ssm_params(4, seed=3, requires_grad=False)
        x = Tensor(np.random.default_rng(5).standard_normal((257, 4)).astype(np.float32))
        with no_grad():
            ys = mamba_block_forward(x, p, scan_impl="sequential", chunk=32)
            yp = mamba_block_forward(x, p, scan_impl="parallel", chunk=32)
        np.testing.assert_array_equal(ys.data, yp.data)

    def test_zero_out_projection_is_identity(self):
        p = init_ssm_params(4, seed=6, w_out_scale=0.0, requires_grad=False)
        x = Tensor(np.random.default_rng(7).standard_normal((64, 4)).astype(np.float32))
        with no_grad():
            y = mamba_block_forward(x, p)
        np.testing.assert_array_equal(y.data, x.data)

    def test_wrong_width_rejected(self):
        p = init_ssm_params(4, seed=8)
        with pytest.raises(ShapeError):
            mamba_block_forward(Tensor(np.zeros((10, 5), dtype=np.float32)), p)
