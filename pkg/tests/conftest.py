import hypothesis
import pytest
import torch

hypothesis.settings.register_profile("default", max_examples=25, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def f64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield torch.float64
    torch.set_default_dtype(previous)


def seeded_ssm(inner, state, seed, dtype=torch.float64):
    from vgamba.ssm import SelectiveSSM

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        params = SelectiveSSM(inner, state).to(dtype)
        # spread out the parameters so decays and projections are not near-trivial
        with torch.no_grad():
            params.a_log.add_(0.3 * torch.randn_like(params.a_log))
            params.dt_bias.copy_(torch.randn_like(params.dt_bias))
            params.d_skip.copy_(torch.randn_like(params.d_skip))
    return params
