import numpy as np
import pytest
import torch

from segpatch.errors import ChannelMismatch, LayerNotFound, ValidationError
from segpatch.losses import pixelwise_ce
from segpatch.model import (
    LinearSegModel,
    ToyNet,
    TorchSegAdapter,
    forward,
    input_gradient,
    load_model,
    predict_ss,
    to_batch,
)

from fd import check_gradient


def test_forward_shape_on_zero_image():
    logits, _ = forward(ToyNet(seed=0), np.zeros((8, 8, 3)))
    assert logits.shape == (64, 4)
    assert torch.all(torch.isfinite(logits))


def test_forward_is_deterministic(rng):
    img = rng.uniform(size=(16, 20, 3))
    a, _ = forward(ToyNet(seed=3), img)
    b, _ = forward(ToyNet(seed=3), img)
    assert torch.equal(a, b)
    c, _ = forward(ToyNet(seed=4), img)
    assert not torch.equal(a, c)


def test_linear_model_matches_closed_form(linear_model, rng):
    img = rng.uniform(size=(5, 6, 3))
    logits, _ = forward(linear_model, img)
    W = linear_model.conv.weight[:, :, 0, 0].numpy()
    b = linear_model.conv.bias.numpy()
    expected = img.reshape(-1, 3) @ W.T + b
    np.testing.assert_allclose(logits.numpy(), expected, rtol=0, atol=1e-12)


def test_forward_records_requested_layers():
    net = ToyNet(seed=0)
    _, acts = forward(net, np.zeros((8, 10, 3)), layers=("fuse", "lo1"))
    assert set(acts) == {"fuse", "lo1"}
    assert acts["fuse"].shape == (8, 8, 10)
    assert acts["lo1"].shape == (8, 4, 5)
    with pytest.raises(LayerNotFound):
        forward(net, np.zeros((8, 8, 3)), layers=("nope",))


def test_channel_mismatch():
    with pytest.raises(ChannelMismatch):
        forward(ToyNet(seed=0), np.zeros((8, 8, 1)))


def test_predict_ss_argmax_and_ties():
    z = np.array([[0.1, 0.9, 0.3], [0.5, 0.5, 0.5], [2.0, 1.0, 2.0]])
    assert predict_ss(z).tolist() == [1, 0, 0]
    soft = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    assert predict_ss(soft).tolist() == predict_ss(z).tolist()
    lm = predict_ss(z[:2], shape=(1, 2))
    assert lm.data.tolist() == [[1, 0]]


def test_input_gradient_of_constant_is_zero(rng):
    g = input_gradient(ToyNet(seed=0), rng.uniform(size=(8, 8, 3)), lambda z: torch.tensor(0.0))
    assert g.shape == (8, 8, 3)
    assert not g.any()


def test_input_gradient_linear_oracle(linear_model, rng):
    j = 2
    g = input_gradient(linear_model, rng.uniform(size=(4, 5, 3)), lambda z: z[:, j].sum())
    W = linear_model.conv.weight[:, :, 0, 0].numpy()
    np.testing.assert_allclose(g, np.broadcast_to(W[j], (4, 5, 3)), atol=1e-12)


def test_toynet_input_gradient_matches_finite_differences(toy64, rng):
    img = torch.as_tensor(rng.uniform(0.1, 0.9, size=(12, 16, 3)))
    labels = rng.integers(0, 4, size=(12, 16))

    def ce(z):
        return pixelwise_ce(z, labels)

    def f(x):
        return ce(forward(toy64, x)[0])

    g = input_gradient(toy64, img.numpy(), ce)
    xg = img.clone().requires_grad_(True)
    (ref,) = torch.autograd.grad(f(xg), xg)
    np.testing.assert_allclose(g, ref.numpy(), rtol=1e-12)
    check_gradient(f, img, n=10, rng=rng)


def test_toynet_plain_variant_has_no_normalization(rng):
    img = rng.uniform(size=(8, 8, 3))
    net = ToyNet(seed=0, normalize=False)
    _, acts = forward(net, img, layers=("fuse", "norm"))
    assert torch.equal(acts["fuse"], acts["norm"])


class _TinyBackbone(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.a = torch.nn.Conv2d(3, 4, 3, padding=1)
        self.b = torch.nn.Conv2d(4, 2, 1, stride=2)

    def forward(self, x):
        return {"out": self.b(torch.relu(self.a(x)))}


def test_torch_adapter_hooks_and_resizes(rng):
    torch.manual_seed(0)
    model = TorchSegAdapter(_TinyBackbone(), num_classes=2, fusion_layer_id="a", layers={"a": "a"})
    logits, acts = forward(model, rng.uniform(size=(8, 6, 3)), layers=("a",))
    assert logits.shape == (48, 2)
    assert acts["a"].shape == (4, 8, 6)


def test_load_model_specs():
    assert isinstance(load_model("toynet-raw:3"), ToyNet)
    with pytest.raises(ValidationError):
        load_model("nonsense")


def test_to_batch_layout():
    x = to_batch(np.arange(24, dtype=float).reshape(2, 4, 3) / 24)
    assert x.shape == (1, 3, 2, 4)


def test_pretrained_toynet_segments_clean_scenes(trained_toy):
    from segpatch.optimizer import evaluate_patches
    from segpatch.scenes import generate_synthetic_scene

    res = evaluate_patches(trained_toy, generate_synthetic_scene(5, 8))
    assert res["mIoU"] > 0.8
