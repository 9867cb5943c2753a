import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vgamba.numerics import CERT_STEPS, CERT_ORDER, check_gradients, check_module_gradients, spread_parameters
from vgamba.ssm import (
    MambaBlock,
    MambaBlockConfig,
    SelectiveSSM,
    _prepare,
    _recurrence,
    dense_scan_oracle,
    discretize_zoh,
    selective_parameters,
    ssm_scan_causal,
    ssm_scan_noncausal,
)

from .conftest import seeded_ssm

D64 = torch.float64


def t64(*values):
    return torch.tensor(values, dtype=D64)


# --------------------------------------------------------------------------- discretize_zoh


def test_zoh_zero_state_matrix_limit():
    step = discretize_zoh(t64(0.0).view(1, 1), 2.0, t64(0.3).view(1))
    assert step.a_bar.item() == pytest.approx(1.0)
    assert step.b_bar.item() == pytest.approx(0.6, abs=1e-15)


def test_zoh_half_decay():
    # integral of e^{-t} over [0, ln 2] = 1 - 1/2
    step = discretize_zoh(t64(-1.0).view(1, 1), 1.0, t64(math.log(2)).view(1))
    assert step.a_bar.item() == pytest.approx(0.5, abs=1e-15)
    assert step.b_bar.item() == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("a", [-5.0, -1.0, 0.0, 3.0])
def test_zoh_tiny_step(a):
    step = discretize_zoh(t64(a).view(1, 1), 1.0, t64(1e-12).view(1))
    assert abs(step.a_bar.item() - 1) < 1e-9
    assert abs(step.b_bar.item()) < 1e-9


@pytest.mark.parametrize("a", [1e-8, -1e-8])
def test_zoh_limit_consistency(a):
    delta = t64(0.7).view(1)
    near = discretize_zoh(t64(a).view(1, 1), 1.3, delta).b_bar
    at_zero = discretize_zoh(t64(0.0).view(1, 1), 1.3, delta).b_bar
    assert torch.allclose(near, at_zero, atol=1e-12)
    assert torch.allclose(at_zero, 0.7 * 1.3 * torch.ones(1, 1, dtype=D64))


def test_zoh_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        discretize_zoh(t64(-1.0).view(1, 1), 1.0, t64(0.0).view(1))


@given(st.floats(-20, -1e-3), st.floats(1e-3, 5.0))
def test_zoh_stable_for_negative_a(a, dt):
    step = discretize_zoh(t64(a).view(1, 1), 1.0, t64(dt).view(1))
    assert 0 < step.a_bar.item() < 1
    # exact integral of e^{a t} over [0, dt]
    assert step.b_bar.item() == pytest.approx((math.exp(a * dt) - 1) / a, rel=1e-12)


def test_zoh_broadcast_shapes():
    A = -torch.rand(3, 4, dtype=D64) - 0.1
    step = discretize_zoh(A, torch.rand(2, 5, 4, dtype=D64), torch.rand(2, 5, 3, dtype=D64) + 0.1)
    assert step.a_bar.shape == (2, 5, 3, 4)
    assert step.b_bar.shape == (2, 5, 3, 4)


# --------------------------------------------------------------------------- selective_parameters


def test_selective_parameters_at_zero_input():
    params = SelectiveSSM(8, 4).double()
    with torch.no_grad():
        for p in (params.b_proj.bias, params.c_proj.bias, params.dt_bias):
            p.zero_()
    B_t, C_t, delta = selective_parameters(torch.zeros(1, 3, 8, dtype=D64), params)
    assert torch.all(B_t == 0) and torch.all(C_t == 0)
    assert torch.allclose(delta, torch.full_like(delta, math.log(2)))


def test_selective_parameters_shapes():
    B_t, C_t, delta = selective_parameters(torch.randn(2, 16, 8), SelectiveSSM(8, 4))
    assert B_t.shape == (2, 16, 4) and C_t.shape == (2, 16, 4) and delta.shape == (2, 16, 8)
    assert torch.all(delta > 0)


def test_selective_step_monotone_in_preactivation():
    params = SelectiveSSM(4, 2).double()
    with torch.no_grad():
        params.dt_weight.fill_(1.0)
        params.dt_bias.zero_()
    x = torch.rand(1, 5, 4, dtype=D64) + 0.1
    _, _, d1 = selective_parameters(x, params)
    _, _, d2 = selective_parameters(2 * x, params)
    assert torch.all(d2 > d1)


# --------------------------------------------------------------------------- causal scan


def _frozen_scalar_ssm():
    """E = N = 1 with a_bar = 0.5, b_bar = 1, C = 1, D = 0."""
    params = SelectiveSSM(1, 1).double()
    with torch.no_grad():
        params.a_log.zero_()  # A = -1
        params.dt_weight.zero_()
        params.dt_bias.zero_()  # dt = ln 2 -> a_bar = 0.5, (a_bar - 1) / A = 0.5
        params.b_proj.weight.zero_()
        params.b_proj.bias.fill_(2.0)
        params.c_proj.weight.zero_()
        params.c_proj.bias.fill_(1.0)
        params.d_skip.zero_()
    return params


def test_causal_scan_hand_unrolled():
    y = ssm_scan_causal(_frozen_scalar_ssm(), t64(1.0, 0.0, 0.0).view(1, 3, 1))
    assert torch.allclose(y.flatten(), t64(1.0, 0.5, 0.25), atol=1e-14)


def test_causal_scan_zero_input():
    params = seeded_ssm(3, 4, seed=0)
    assert torch.all(ssm_scan_causal(params, torch.zeros(2, 7, 3, dtype=D64)) == 0)


def _loop_oracle(params: SelectiveSSM, x: torch.Tensor) -> np.ndarray:
    """Scalar Python loop over (batch, channel, state) built from raw parameter arrays."""
    A = -np.exp(params.a_log.detach().numpy())
    Wb, bb = params.b_proj.weight.detach().numpy(), params.b_proj.bias.detach().numpy()
    Wc, bc = params.c_proj.weight.detach().numpy(), params.c_proj.bias.detach().numpy()
    wd, bd = params.dt_weight.detach().numpy(), params.dt_bias.detach().numpy()
    D = params.d_skip.detach().numpy()
    xs = x.detach().numpy()
    Bsz, M, E = xs.shape
    N = A.shape[1]
    y = np.zeros_like(xs)
    for b in range(Bsz):
        h = np.zeros((E, N))
        for k in range(M):
            xk = xs[b, k]
            Bk = Wb @ xk + bb
            Ck = Wc @ xk + bc
            dk = np.log1p(np.exp(xk * wd + bd))
            for e in range(E):
                acc = 0.0
                for n in range(N):
                    a_bar = math.exp(A[e, n] * dk[e])
                    b_bar = (a_bar - 1.0) / A[e, n] * Bk[n]
                    h[e, n] = a_bar * h[e, n] + b_bar * xk[e]
                    acc += Ck[n] * h[e, n]
                y[b, k, e] = acc + D[e] * xk[e]
    return y


@pytest.mark.parametrize("seed", range(5))
def test_causal_scan_matches_loop(seed):
    params = seeded_ssm(3, 4, seed)
    x = torch.randn(2, 9, 3, dtype=D64, generator=torch.Generator().manual_seed(seed))
    assert np.allclose(ssm_scan_causal(params, x).detach().numpy(), _loop_oracle(params, x), atol=1e-10, rtol=0)


def test_causal_scan_is_causal():
    params = seeded_ssm(3, 4, seed=3)
    x = torch.randn(1, 10, 3, dtype=D64)
    y = ssm_scan_causal(params, x)
    x2 = x.clone()
    x2[0, 6] += 1.0
    y2 = ssm_scan_causal(params, x2)
    assert torch.equal(y[0, :6], y2[0, :6])
    assert not torch.equal(y[0, 6:], y2[0, 6:])


def test_scan_stability_long_sequence():
    params = seeded_ssm(2, 3, seed=5)
    x = torch.rand(1, 10_000, 2, dtype=D64) * 2 - 1
    with torch.no_grad():
        a_bar, bx, _ = _prepare(params, x)
        states = _recurrence(a_bar, bx)
        y = ssm_scan_causal(params, x)
    bound = bx.abs().max() / (1 - a_bar.max())
    assert torch.isfinite(y).all()
    assert states.abs().max() <= bound


# --------------------------------------------------------------------------- non-causal scan


def test_noncausal_has_anticausal_flow():
    params = seeded_ssm(3, 4, seed=2)
    x = torch.zeros(1, 8, 3, dtype=D64)
    x[0, 6] = 1.0
    y = ssm_scan_noncausal(params, x)
    assert y[0, :6].abs().max() > 0
    assert torch.allclose(y, dense_scan_oracle(params, x), atol=1e-8)


def test_noncausal_single_token_equals_causal():
    params = seeded_ssm(3, 4, seed=4)
    x = torch.randn(2, 1, 3, dtype=D64)
    assert torch.allclose(ssm_scan_noncausal(params, x), ssm_scan_causal(params, x), atol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_noncausal_reversal_symmetry(seed):
    params = seeded_ssm(3, 4, seed)
    x = torch.randn(2, 11, 3, dtype=D64)
    assert torch.allclose(ssm_scan_noncausal(params, x.flip(1)), ssm_scan_noncausal(params, x).flip(1), atol=1e-12)


def test_noncausal_depends_on_future():
    params = seeded_ssm(3, 4, seed=6)
    x = torch.randn(1, 10, 3, dtype=D64)
    x2 = x.clone()
    x2[0, 7] += 1.0
    diff = (ssm_scan_noncausal(params, x) - ssm_scan_noncausal(params, x2))[0, :7]
    assert diff.abs().max() > 0


@pytest.mark.parametrize("M", [1, 2, 3, 4, 8, 16])
def test_noncausal_matches_dense_oracle(M):
    for seed in range(10):
        params = seeded_ssm(3, 4, seed)
        x = torch.randn(1, M, 3, dtype=D64, generator=torch.Generator().manual_seed(100 + seed))
        assert torch.allclose(ssm_scan_noncausal(params, x), dense_scan_oracle(params, x), atol=1e-8, rtol=0)


def test_dense_oracle_single_token_equals_causal():
    params = seeded_ssm(2, 3, seed=0)
    x = torch.randn(1, 1, 2, dtype=D64)
    assert torch.allclose(dense_scan_oracle(params, x), ssm_scan_causal(params, x), atol=1e-14)


def test_zero_decay_leaves_only_self_term():
    params = seeded_ssm(2, 3, seed=1)
    with torch.no_grad():
        params.a_log.fill_(800.0)  # exp(A dt) underflows to exactly 0
    x = torch.randn(1, 6, 2, dtype=D64)
    a_bar, bx, C_t = _prepare(params, x)
    assert torch.all(a_bar == 0)
    self_term = torch.einsum("bmen,bmn->bme", bx, C_t) + params.d_skip * x
    assert torch.allclose(dense_scan_oracle(params, x), self_term, atol=1e-12)
    assert torch.allclose(ssm_scan_noncausal(params, x), self_term, atol=1e-12)


def test_dense_oracle_guards_length():
    params = seeded_ssm(1, 1, seed=0)
    with pytest.raises(MemoryError):
        dense_scan_oracle(params, torch.zeros(1, 65, 1, dtype=D64))


@pytest.mark.parametrize("scan", [ssm_scan_causal, ssm_scan_noncausal])
def test_scan_gradients(scan):
    params = seeded_ssm(2, 3, seed=9)
    w = torch.randn(1, 5, 2, dtype=D64)

    def loss(mod, overrides):
        return (torch.func.functional_call(mod, overrides, (x,), {"causal": scan is ssm_scan_causal}) * w).sum()

    x = torch.randn(1, 5, 2, dtype=D64)
    assert check_gradients(lambda t: (scan(params, t) * w).sum(), x, steps=CERT_STEPS, order=CERT_ORDER).passed
    reports = check_module_gradients(params, loss, steps=CERT_STEPS, order=CERT_ORDER)
    assert all(r.passed for r in reports.values()), reports


# --------------------------------------------------------------------------- Mamba block


def test_mamba_block_shape():
    block = MambaBlock(MambaBlockConfig(8))
    assert block(torch.randn(2, 12, 8)).shape == (2, 12, 8)
    assert block.cfg.inner == 16


def test_mamba_block_zero_weights_is_identity():
    block = MambaBlock(MambaBlockConfig(4))
    with torch.no_grad():
        for p in block.parameters():
            p.zero_()
    x = torch.randn(2, 5, 4)
    assert torch.equal(block(x), x)


def test_mamba_block_conv_is_noncausal():
    torch.manual_seed(0)
    block = MambaBlock(MambaBlockConfig(4)).double()
    x = torch.randn(1, 6, 4, dtype=D64)
    x2 = x.clone()
    x2[0, 5] += 1
    assert (block(x) - block(x2))[0, :5].abs().max() > 0


def test_mamba_block_gradients():
    torch.manual_seed(1)
    block = spread_parameters(MambaBlock(MambaBlockConfig(4)).double(), seed=1)
    x = torch.randn(1, 6, 4, dtype=D64)

    def loss(mod, overrides):
        return torch.func.functional_call(mod, overrides, (x,)).pow(2).mean()

    reports = check_module_gradients(block, loss, steps=CERT_STEPS, tol=1e-4, order=CERT_ORDER)
    assert all(r.passed for r in reports.values()), {k: v for k, v in reports.items() if not v.passed}
    assert check_gradients(lambda t: block(t).pow(2).mean(), x, steps=CERT_STEPS, order=CERT_ORDER).passed


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 12), st.integers(1, 4), st.integers(1, 4))
def test_scan_output_shape_property(M, E, N):
    params = SelectiveSSM(E, N)
    x = torch.randn(2, M, E)
    assert ssm_scan_noncausal(params, x).shape == x.shape
    assert ssm_scan_causal(params, x).shape == x.shape
