import pytest
import torch
from torch import nn

from xaiens.classifier import (
    ClassifierTrainConfig,
    ToyClassifier,
    find_last_conv,
    load_classifier,
    model_digest,
    save_classifier,
    train_classifier,
)
from xaiens.data import generate_synthetic_shapes


@pytest.fixture(scope="module")
def shapes():
    ds, _ = generate_synthetic_shapes(20, 32, ("circle", "square"), seed=0)
    return ds


def test_training_is_seeded(shapes):
    cfg = ClassifierTrainConfig(epochs=2, width=4, seed=3)
    a, sa = train_classifier(shapes, cfg)
    b, sb = train_classifier(shapes, cfg)
    assert model_digest(a) == model_digest(b) and sa == sb
    assert set(sa) == {"train_accuracy", "test_accuracy"}
    c, _ = train_classifier(shapes, ClassifierTrainConfig(epochs=2, width=4, seed=4))
    assert model_digest(c) != model_digest(a)


def test_checkpoint_round_trip(shapes, tmp_path):
    model, stats = train_classifier(shapes, ClassifierTrainConfig(epochs=1, width=4))
    save_classifier(model, tmp_path / "c.pt", stats)
    back = load_classifier(tmp_path / "c.pt")
    assert model_digest(back) == model_digest(model)
    x = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(back(x), model.eval()(x))


def test_external_module_checkpoint(tmp_path):
    net = nn.Sequential(nn.Conv2d(3, 2, 3), nn.AdaptiveAvgPool2d(1), nn.Flatten())
    torch.save(net, tmp_path / "ext.pt")
    back = load_classifier(tmp_path / "ext.pt")
    assert not back.training and model_digest(back) == model_digest(net)
    assert find_last_conv(back) is back[0]
    torch.save({"kind": "other"}, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        load_classifier(tmp_path / "bad.pt")


def test_last_conv_and_digest_sensitivity():
    model = ToyClassifier(2, width=4)
    assert find_last_conv(model) is model.last_conv
    assert model.last_conv is [m for m in model.modules() if isinstance(m, nn.Conv2d)][-1]
    before = model_digest(model)
    with torch.no_grad():
        model.head.bias[0] += 1e-6
    assert model_digest(model) != before
    with pytest.raises(ValueError):
        find_last_conv(nn.Linear(2, 2))
