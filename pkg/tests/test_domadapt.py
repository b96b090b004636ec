import pytest
import torch

from bbb.domadapt import (
    DAConfig, DomainDiscriminator, ModelClassifier, da_total_loss,
    domain_loss, gradient_reversal, model_classification_loss,
    neutral_weights, pada_class_weights,
)


class TestConfig:
    def test_modes(self):
        assert DAConfig(mode="off").delta == 0.0
        assert DAConfig(mode="dann", delta=5.0).delta == 0.0  # pada-only knob
        assert DAConfig(mode="pada", delta=5.0).delta == 5.0
        with pytest.raises(ValueError):
            DAConfig(mode="adversarial")
        with pytest.raises(ValueError):
            DAConfig(theta=-1.0)
        with pytest.raises(ValueError):
            DAConfig(attach_point="last_layer")


class TestGradReverse:
    def test_forward_identity(self):
        x = torch.randn(4, 8)
        assert torch.equal(gradient_reversal(x, 2.0), x)

    def test_backward_scaling(self):
        for iota in (0.0, 0.5, 1.0, 10.0):
            x = torch.randn(6, 3, requires_grad=True)
            y = (gradient_reversal(x, iota) ** 2).sum()
            y.backward()
            expect = -iota * 2 * x.detach()
            assert torch.allclose(x.grad, expect, atol=1e-4)

    def test_negative_iota_rejected(self):
        with pytest.raises(ValueError):
            gradient_reversal(torch.randn(2, 2), -1.0)


class TestHeads:
    def test_discriminator_shape_and_depth(self):
        disc = DomainDiscriminator(16)
        out = disc(torch.randn(5, 16))
        assert out.shape == (5,)
        linears = [m for m in disc.net if isinstance(m, torch.nn.Linear)]
        assert len(linears) == 3  # two hidden layers + output

    def test_model_classifier(self):
        clf = ModelClassifier(16, 7)
        assert clf(torch.randn(4, 16)).shape == (4, 7)


class TestLosses:
    def test_domain_loss_unweighted(self):
        logits = torch.tensor([0.2, -1.0, 3.0])
        labels = torch.tensor([1.0, 0.0, 1.0])
        expect = torch.nn.functional.binary_cross_entropy_with_logits(
            logits, labels)
        assert torch.allclose(domain_loss(logits, labels), expect)

    def test_domain_loss_weighted_oracle(self):
        logits = torch.tensor([0.5, -0.5, 1.5, 0.0])
        labels = torch.tensor([0.0, 0.0, 1.0, 1.0])
        w = torch.tensor([1.0, 2.0, 0.0, 1.0])
        per = torch.nn.functional.binary_cross_entropy_with_logits(
            logits, labels, reduction="none")
        expect = (per * w).sum() / w.sum()
        assert torch.allclose(domain_loss(logits, labels, w), expect)

    def test_model_loss_rejects_real(self):
        with pytest.raises(ValueError):
            model_classification_loss(torch.randn(2, 3), torch.tensor([0, 1]),
                                      ["synthetic", "real"])

    def test_da_total_arithmetic(self):
        cfg = DAConfig(mode="pada", theta=0.7, delta=0.3)
        base = torch.tensor(1.0)
        dmn = torch.tensor(2.0)
        mdl = torch.tensor(4.0)
        assert torch.allclose(da_total_loss(base, dmn, mdl, cfg),
                              torch.tensor(1.0 + 0.7 * 2.0 + 0.3 * 4.0))
        cfg_d = DAConfig(mode="dann", theta=0.7)
        assert torch.allclose(da_total_loss(base, dmn, mdl, cfg_d),
                              torch.tensor(1.0 + 0.7 * 2.0))
        with pytest.raises(ValueError):
            da_total_loss(base, dmn, None, DAConfig(mode="off"))


class TestPadaWeights:
    def test_oracle(self):
        preds = torch.tensor([[0.7, 0.2, 0.1],
                              [0.5, 0.4, 0.1],
                              [0.6, 0.3, 0.1]])
        w = pada_class_weights(preds)
        mean = preds.mean(dim=0)
        expect = mean / mean.max()
        assert torch.allclose(w, expect, atol=1e-7)
        assert abs(w.max().item() - 1.0) < 1e-7

    def test_empty_neutral(self):
        w = pada_class_weights(torch.zeros(0, 6))
        assert torch.equal(w, torch.ones(6))
        assert torch.equal(neutral_weights(6), torch.ones(6))

    def test_bounds(self):
        torch.manual_seed(3)
        preds = torch.softmax(torch.randn(50, 9), dim=1)
        w = pada_class_weights(preds)
        assert w.min() >= 0.0 and w.max() <= 1.0
