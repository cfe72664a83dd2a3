import pytest
import torch
from torch import nn

from floodcast.errors import NonFiniteError, ValidationError
from floodcast.layers import EmbeddingMLP, ModelConfig, StreamflowLSTM, mlp_forward

atol = 1e-6

SMALL = dict(hidden_size=4, dropout_p=0.0, embed_layers=(5, 3), window=6, horizon=2, n_dynamic=9, n_static=3)


def small_model(dtype=torch.float32, seed=0, **overrides):
    config = ModelConfig(**{**SMALL, **overrides})
    return StreamflowLSTM(config, torch.Generator().manual_seed(seed)).to(dtype)


def inputs(model, batch=2, seed=1):
    cfg = model.config
    gen = torch.Generator().manual_seed(seed)
    dtype = model.bias.dtype
    dynamic = torch.randn(batch, cfg.window, cfg.n_dynamic, generator=gen, dtype=dtype)
    static = torch.randn(batch, cfg.n_static, generator=gen, dtype=dtype)
    return dynamic, static


def test_mlp_forward():
    x = torch.tensor([[1.0, -2.0]])
    w1, b1 = torch.tensor([[0.5, 0.0], [0.0, 0.25]]), torch.tensor([0.0, 1.0])
    w2, b2 = torch.tensor([[1.0, -1.0]]), torch.tensor([0.1])
    first = torch.tanh(torch.tensor([[0.5, 0.5]]))
    expected = torch.tanh(first[:, :1] - first[:, 1:] + 0.1)
    assert torch.allclose(mlp_forward(x, [w1, w2], [b1, b2]), expected, atol=atol)
    with pytest.raises(ValueError):
        mlp_forward(x, [w1, w2], [b1])
    with pytest.raises(ValueError):
        mlp_forward(torch.ones(1, 3), [w1], [b1])


def test_embedding_mlp():
    gen = torch.Generator()
    a = EmbeddingMLP(7, (30, 20, 64), gen.manual_seed(3))
    b = EmbeddingMLP(7, (30, 20, 64), gen.manual_seed(3))
    assert a.out_features == 64
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    out = a(torch.randn(2, 11, 7))
    assert out.shape == (2, 11, 64)
    assert out.abs().max() < 1.0
    with pytest.raises(ValueError):
        EmbeddingMLP(0)
    with pytest.raises(ValueError):
        EmbeddingMLP(3, ())


def test_output_shape():
    model = small_model(window=8)
    dynamic, static = inputs(model, batch=5)
    assert model(dynamic, static).shape == (5, 2)


def test_matches_composition_of_reference_modules():
    model = small_model().eval()
    dynamic, static = inputs(model)
    cfg = model.config

    def embed(mlp, x):
        for layer in mlp.layers:
            x = torch.tanh(layer(x))
        return x

    lstm = nn.LSTM(2 * cfg.embed_layers[-1], cfg.hidden_size, batch_first=True)
    with torch.no_grad():
        lstm.weight_ih_l0.copy_(model.weight_ih)
        lstm.weight_hh_l0.copy_(model.weight_hh)
        lstm.bias_ih_l0.copy_(model.bias)
        lstm.bias_hh_l0.zero_()
        x = torch.cat(
            (
                embed(model.dynamic_embedding, dynamic),
                embed(model.static_embedding, static).unsqueeze(1).expand(-1, cfg.window, -1),
            ),
            dim=-1,
        )
        out, _ = lstm(x)
        expected = model.head(out[:, -cfg.horizon :]).squeeze(-1)
        assert torch.allclose(model(dynamic, static), expected, atol=1e-5)


def test_gradients_match_finite_differences():
    model = small_model(dtype=torch.float64).eval()
    dynamic, static = inputs(model)
    dynamic.requires_grad_()
    static.requires_grad_()
    assert torch.autograd.gradcheck(lambda d, s: model(d, s), (dynamic, static))

    parameters = dict(model.named_parameters())
    names = tuple(parameters)
    assert {"head.bias", "weight_hh"} <= set(names)
    assert any(n.startswith("dynamic_embedding.") for n in names)
    values = tuple(parameters[n].detach().clone().requires_grad_() for n in names)

    def with_params(*params):
        return torch.func.functional_call(model, dict(zip(names, params)), (dynamic.detach(), static.detach()))

    assert torch.autograd.gradcheck(with_params, values)


def test_forget_gate_bias_starts_open():
    model = StreamflowLSTM(ModelConfig(**{**SMALL, "hidden_size": 16}), torch.Generator().manual_seed(0))
    forget = model.bias[16:32]
    assert (forget > 0.7).all()
    assert torch.equal(model.head.bias, torch.zeros(1))


def test_dropout_only_in_training():
    model = small_model(dropout_p=0.5)
    dynamic, static = inputs(model, batch=16)
    model.eval()
    reference = model(dynamic, static)
    assert torch.equal(reference, model(dynamic, static))

    model.train()
    first = model(dynamic, static, torch.Generator().manual_seed(7))
    second = model(dynamic, static, torch.Generator().manual_seed(7))
    assert torch.equal(first, second)
    assert not torch.allclose(first, reference)


def test_input_validation():
    model = small_model()
    dynamic, static = inputs(model)
    with pytest.raises(ValueError):
        model(dynamic[0], static)
    with pytest.raises(ValueError):
        model(dynamic[:, 1:], static)
    with pytest.raises(ValueError):
        model(dynamic, static[:, :2])
    dynamic[0, 3, 1] = float("nan")
    with pytest.raises(NonFiniteError):
        model(dynamic, static)


@pytest.mark.parametrize(
    "options",
    [{"horizon": 6}, {"horizon": 0}, {"dropout_p": 1.0}, {"hidden_size": 0}, {"embed_layers": ()}],
)
def test_config_validation(options):
    with pytest.raises(ValidationError):
        ModelConfig(**{**SMALL, **options})


def test_config_dict():
    config = ModelConfig(**SMALL)
    assert ModelConfig.from_dict(config.to_dict()) == config
    with pytest.raises(ValidationError, match="layers"):
        ModelConfig.from_dict({"layers": 2})
