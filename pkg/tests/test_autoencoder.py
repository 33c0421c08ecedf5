import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import map_coordinates

from gmldm.autoencoder import (
    AEConfig,
    Autoencoder3D,
    GaussianLatent,
    InterpolationLayer,
    ae_objective,
    decode,
    encode,
    interp_resample,
    kl_loss,
    load_autoencoder,
    recon_loss,
    sample_latent,
    save_autoencoder,
    total_loss,
)
from gmldm.errors import NonFiniteError, ValidationError
from gmldm.volumes import Volume3D

from gradcheck import gradient_check

TINY = dict(base_channels=4, channel_mults=(1, 1, 2, 2))


def trilinear_oracle(vol, out_shape):
    coords = np.meshgrid(
        *[np.linspace(0, n_in - 1, n_out) for n_in, n_out in zip(vol.shape, out_shape)], indexing="ij"
    )
    return map_coordinates(vol.astype(np.float64), coords, order=1, mode="nearest")


def test_interp_identity_at_init():
    rng = np.random.default_rng(0)
    v = Volume3D(rng.random((9, 10, 11)).astype(np.float32))
    out = interp_resample(v, InterpolationLayer((9, 10, 11)))
    assert np.max(np.abs(out.data - v.data)) < 1e-6


def test_interp_preserves_constants():
    v = Volume3D(np.full((6, 7, 8), 0.5, np.float32))
    for target in [(12, 14, 16), (4, 5, 4), (32, 32, 32)]:
        out = interp_resample(v, InterpolationLayer(target))
        assert out.shape == target
        assert np.max(np.abs(out.data - 0.5)) < 1e-6


def test_interp_reproduces_linear_ramp():
    shape = (5, 6, 7)
    ramp = np.broadcast_to(np.linspace(0, 1, shape[0])[:, None, None], shape).astype(np.float32)
    target = (10, 12, 14)
    out = interp_resample(Volume3D(ramp), InterpolationLayer(target))
    expected = np.broadcast_to(np.linspace(0, 1, target[0])[:, None, None], target)
    assert np.max(np.abs(out.data - expected)) < 1e-5


@settings(max_examples=20, deadline=None)
@given(
    st.tuples(*[st.integers(4, 12)] * 3),
    st.tuples(*[st.integers(4, 16)] * 3),
    st.integers(0, 2**31 - 1),
)
def test_interp_matches_independent_trilinear(in_shape, out_shape, seed):
    vol = np.random.default_rng(seed).random(in_shape).astype(np.float32)
    out = interp_resample(Volume3D(vol), InterpolationLayer(out_shape))
    assert np.max(np.abs(out.data - trilinear_oracle(vol, out_shape))) < 1e-5


def test_interp_is_learnable():
    layer = InterpolationLayer((8, 8, 8))
    x = torch.rand(1, 1, 6, 6, 6, requires_grad=True)
    layer(x).pow(2).sum().backward()
    assert layer.blend_weights.grad is not None and layer.blend_weights.grad.abs().sum() > 0
    assert x.grad.abs().sum() > 0
    with torch.no_grad():
        layer.blend_weights[0, 1] = 0.3
    assert not torch.allclose(layer(x), InterpolationLayer((8, 8, 8))(x))


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return Autoencoder3D(AEConfig(**TINY)).eval()


@pytest.mark.parametrize(
    "std_shape,in_shape,expected",
    [
        ((32, 32, 32), (32, 32, 32), (256, 4, 4, 4)),
        ((32, 32, 32), (48, 56, 48), (256, 4, 4, 4)),
        ((16, 24, 40), (20, 30, 44), (256, 2, 3, 5)),
    ],
)
def test_encode_latent_shape(std_shape, in_shape, expected):
    torch.manual_seed(0)
    m = Autoencoder3D(AEConfig(standardized_shape=std_shape, **TINY)).eval()
    g = encode(Volume3D(np.random.default_rng(0).random(in_shape).astype(np.float32)), m)
    assert g.shape == (1,) + expected
    assert g.mu.shape == g.log_var.shape
    assert torch.isfinite(g.mu).all() and torch.isfinite(g.log_var).all()
    out = decode(sample_latent(g, torch.zeros_like(g.mu))[0], m, in_shape)
    assert out.shape == in_shape


def test_encode_deterministic(model):
    x = np.random.default_rng(1).random((32, 32, 32)).astype(np.float32)
    a, b = encode(x, model), encode(x, model)
    assert torch.equal(a.mu, b.mu) and torch.equal(a.log_var, b.log_var)


def test_encode_rejects_non_finite(model):
    x = torch.zeros(1, 1, 32, 32, 32)
    x[0, 0, 3, 3, 3] = float("inf")
    with pytest.raises(NonFiniteError):
        model.encode(x)


def test_decode_to_original_shape(model):
    z = torch.randn(256, 4, 4, 4)
    assert decode(z, model, (48, 56, 48)).shape == (48, 56, 48)
    with pytest.raises(ValidationError):
        decode(torch.randn(128, 4, 4, 4), model, (32, 32, 32))


def test_sample_latent_examples():
    g = GaussianLatent(torch.tensor([0.5, -1.0]), torch.tensor([0.3, 1.0]))
    assert torch.equal(sample_latent(g, torch.zeros(2)), g.mu)
    g0 = GaussianLatent(torch.tensor([0.5, -1.0]), torch.zeros(2))
    e = torch.tensor([0.2, 0.7])
    assert torch.allclose(sample_latent(g0, e), g0.mu + e)
    toy = GaussianLatent(torch.tensor([0.0], dtype=torch.float64), torch.tensor([2 * math.log(3)], dtype=torch.float64))
    assert sample_latent(toy, torch.tensor([1.0], dtype=torch.float64)).item() == pytest.approx(3.0, abs=1e-12)
    with pytest.raises(ValidationError):
        sample_latent(g, torch.zeros(3))


def _mc_kl(mu, var, n, rng):
    """Monte-Carlo E_q[log q(z) - log p(z)] and its standard error."""
    z = mu + math.sqrt(var) * rng.standard_normal(n)
    log_q = -0.5 * (math.log(2 * math.pi * var) + (z - mu) ** 2 / var)
    log_p = -0.5 * (math.log(2 * math.pi) + z ** 2)
    d = log_q - log_p
    return d.mean(), d.std(ddof=1) / math.sqrt(n)


def _kl(mu, var):
    g = GaussianLatent(torch.tensor([mu], dtype=torch.float64), torch.tensor([math.log(var)], dtype=torch.float64))
    return kl_loss(g).item()


def test_kl_zero_at_prior():
    g = GaussianLatent(torch.zeros(2, 8, 2, 2, 2), torch.zeros(2, 8, 2, 2, 2))
    assert kl_loss(g).item() == 0.0


@pytest.mark.parametrize("mu,var,expected", [(1.0, 1.0, 0.5), (0.0, math.e, (math.e - 2) / 2)])
def test_kl_examples_against_monte_carlo(mu, var, expected):
    est, se = _mc_kl(mu, var, 10**6, np.random.default_rng(0))
    assert abs(est - expected) < 3 * se
    assert _kl(mu, var) == pytest.approx(expected, abs=1e-12)


def test_kl_reductions():
    mu = torch.ones(3, 2, 1, 1, 1)
    g = GaussianLatent(mu, torch.zeros_like(mu))
    # 0.5 per element, 2 elements per sample
    assert kl_loss(g, "sum").item() == pytest.approx(1.0)
    assert kl_loss(g, "mean").item() == pytest.approx(0.5)
    with pytest.raises(ValidationError):
        kl_loss(g, "max")
    with pytest.raises(NonFiniteError):
        kl_loss(GaussianLatent(torch.tensor([float("nan")]), torch.zeros(1)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-6, 6)), min_size=1, max_size=10))
def test_kl_nonnegative(pairs):
    mu = torch.tensor([p[0] for p in pairs], dtype=torch.float64)
    lv = torch.tensor([p[1] for p in pairs], dtype=torch.float64)
    val = kl_loss(GaussianLatent(mu, lv)).item()
    assert val >= -1e-12
    if val < 1e-12:
        assert torch.allclose(mu, torch.zeros_like(mu), atol=1e-5) and torch.allclose(lv, torch.zeros_like(lv), atol=1e-5)


def test_recon_examples():
    x = torch.tensor([0.0, 2.0])
    assert recon_loss(x, x).item() == 0.0
    assert recon_loss(x, torch.zeros(2)).item() == pytest.approx(2.0)
    a, b = torch.rand(4, 4, 4), torch.rand(4, 4, 4)
    assert recon_loss(a, b).item() == recon_loss(b, a).item()
    with pytest.raises(ValidationError):
        recon_loss(torch.zeros(3), torch.zeros(4))


def test_total_loss_examples():
    assert total_loss(2.0, 4.0, 0.0) == 4.0
    assert total_loss(2.0, 4.0, 1.0) == 2.0
    assert total_loss(2.0, 4.0, 0.5) == pytest.approx(3.0)
    with pytest.raises(ValidationError):
        total_loss(2.0, 4.0, 1.5)
    with pytest.raises(ValidationError):
        AEConfig(alpha=-0.1)


def test_config_rejects_indivisible_shape():
    with pytest.raises(ValidationError):
        AEConfig(standardized_shape=(30, 32, 32))


def test_architecture_has_eight_convs_per_half():
    m = Autoencoder3D(AEConfig())
    convs = lambda mod: sum(
        1 for x in mod.modules() if isinstance(x, (torch.nn.Conv3d, torch.nn.ConvTranspose3d)) and x.kernel_size != (1, 1, 1)
    )
    assert convs(m.encoder) == 8
    assert convs(m.decoder) + convs(m.upsampler) == 8


def tiny_ae_gradcheck(seed=0, n_samples=24):
    torch.manual_seed(seed)
    cfg = AEConfig(standardized_shape=(8, 8, 8), latent_channels=8, base_channels=4, channel_mults=(1, 1, 1, 1))
    model = Autoencoder3D(cfg).double()
    with torch.no_grad():
        # break the zero init so interpolation weights get a meaningful gradient
        for layer in (model.interp_in, model.interp_out):
            layer.blend_weights.normal_(0, 0.05)
    x = torch.rand(2, 1, 8, 8, 8, dtype=torch.float64)
    eps = torch.randn(2, 8, 1, 1, 1, dtype=torch.float64)
    loss_fn = lambda: ae_objective(model, x, eps)[0]
    return gradient_check(loss_fn, list(model.parameters()), n_samples, np.random.default_rng(seed))


def test_autoencoder_gradient_check():
    assert tiny_ae_gradcheck() < 1e-2


def test_checkpoint_round_trip(tmp_path, model):
    save_autoencoder(model, tmp_path / "ae.pt")
    loaded = load_autoencoder(tmp_path / "ae.pt")
    assert loaded.cfg == model.cfg
    for (k, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert a.dtype == b.dtype and torch.equal(a, b), k
