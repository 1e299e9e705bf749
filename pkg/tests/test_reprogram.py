import numpy as np
import pytest
import torch
from torch import nn

from rdistill.errors import ConfigError, InvalidInput
from rdistill.losses import LossWeights, rd_loss
from rdistill.reprogram import (
    ConvResidualBlock,
    FrozenTeacher,
    RDPipeline,
    ResidualBlock,
    build_adapter,
    load_checkpoint,
    param_checksum,
    rd_forward,
    save_checkpoint,
    teacher_features,
)
from rdistill.zoo import ModelSpec, build_classifier, build_model, count_params

IMG = (3, 8, 8)


def _teacher(cache=False, d=16):
    return FrozenTeacher(build_model(ModelSpec("toy_cnn_large", IMG, d), 0), name="t", cache=cache)


def _pipeline(d_t=16, d_h=8, seed=0):
    teacher = _teacher(d=d_t)
    return RDPipeline(
        teacher,
        build_adapter(d_t, d_h, seed=seed + 1),
        build_model(ModelSpec("mlp_small", IMG, d_h), seed + 2),
        build_classifier(d_h, 3, seed + 3),
    )


def _x(n=6, seed=0):
    return torch.randn(n, *IMG, generator=torch.Generator().manual_seed(seed))


def test_teacher_features_deterministic_for_identical_rows():
    x = _x(4)
    x[1] = x[0]
    f = teacher_features(_teacher(), x)
    assert f.shape == (4, 16)
    assert torch.equal(f[0], f[1])
    assert not f.requires_grad


def test_teacher_linear_probe_matches_matmul():
    backbone = build_model(ModelSpec("linear_probe_teacher", (5,), 3), 7)
    t = FrozenTeacher(backbone)
    x = np.random.default_rng(0).standard_normal((4, 5)).astype(np.float32)
    W = backbone.body[1].weight.detach().numpy()
    np.testing.assert_allclose(t.features(torch.tensor(x)).numpy(), x @ W.T, atol=1e-6)


def test_teacher_rejects_wrong_shape():
    with pytest.raises(InvalidInput):
        _teacher().features(torch.zeros(2, 3, 4, 4))


def test_teacher_stays_frozen_and_in_eval():
    t = _teacher()
    before = param_checksum(t)
    t.train()
    assert not t.training and not t.backbone.training
    t.features(_x(8))
    assert param_checksum(t) == before and t.verify()
    assert all(not p.requires_grad for p in t.parameters())


def test_teacher_cache_consistent():
    t = _teacher(cache=True)
    x = _x(5)
    a = t.features(x)
    b = t.features(x[[4, 2, 0]])
    assert torch.equal(b, a[[4, 2, 0]])
    assert torch.allclose(a, _teacher().features(x))


def test_zero_classifier_gives_zero_logits():
    p = _pipeline()
    nn.init.zeros_(p.classifier.weight)
    nn.init.zeros_(p.classifier.bias)
    out = p(_x())
    assert torch.equal(out.z_t, torch.zeros_like(out.z_t))
    assert torch.equal(out.z_s, torch.zeros_like(out.z_s))


def test_identity_adapter_passes_teacher_features():
    t = _teacher()
    phi = build_adapter(16, 16, seed=0)
    x = _x()
    out = rd_forward(t, phi, build_model(ModelSpec("mlp_small", IMG, 16)), build_classifier(16, 3), x)
    assert torch.allclose(out.f_t, t.features(x), atol=1e-6)


def test_adapter_param_count_formula():
    d = 16
    phi = build_adapter(d, d, depth=2)
    assert count_params(phi).total == 2 * (2 * d * d + 4 * d) == 1152
    d_in, d_out = 24, 8
    proj = build_adapter(d_in, d_out, depth=1)
    assert count_params(proj).total == d_in * d_out + d_out + 2 * d_out + d_out * d_out + d_out + d_in * d_out


@pytest.mark.parametrize("n", [1, 2, 17])
def test_adapter_shape(n):
    assert build_adapter(10, 6, depth=3)(torch.randn(n, 10)).shape == (n, 6)


def test_adapter_near_identity_at_init():
    phi = build_adapter(12, 7, seed=0)
    f = torch.randn(20, 12)
    assert ((phi(f) - phi.projection(f)).norm() / f.norm()).item() < 0.1


def test_adapter_validation():
    with pytest.raises(ConfigError):
        build_adapter(4, 4, depth=0)
    with pytest.raises(ConfigError):
        build_adapter(0, 4)
    with pytest.raises(ConfigError):
        build_adapter(4, 4, kind="attention")


def test_conv_block_identity_at_init():
    blk = ConvResidualBlock(4, 4)
    x = torch.randn(2, 4, 5, 5)
    assert torch.equal(blk(x), x)
    assert ConvResidualBlock(4, 6)(x).shape == (2, 6, 5, 5)
    assert torch.equal(ResidualBlock(5, 5)(torch.ones(3, 5)), torch.ones(3, 5))


def test_pipeline_dimension_checks_fail_fast():
    t = _teacher(d=16)
    with pytest.raises(ConfigError) as exc:
        RDPipeline(t, build_adapter(10, 8), build_model(ModelSpec("mlp_small", IMG, 9)), build_classifier(7, 3))
    assert len(exc.value.violations) == 3


def test_gradients_reach_trainables_not_teacher():
    p = _pipeline()
    x, y = _x(8), torch.tensor([0, 1, 2, 0, 1, 2, 0, 1])
    out = p(x)
    total, _ = rd_loss(y, out.z_t, out.z_s, out.f_t, out.f_s, LossWeights(1, 1))
    total.backward()
    assert all(q.grad is None for q in p.teacher.parameters())
    for m in (p.adapter, p.student, p.classifier):
        assert any(q.grad is not None and q.grad.abs().sum() > 0 for q in m.parameters())


def test_trainable_count_excludes_teacher():
    p = _pipeline()
    expected = sum(count_params(m).total for m in (p.adapter, p.student, p.classifier))
    assert p.num_trainable() == expected
    assert len(p.trainable_parameters()) == sum(len(list(m.parameters())) for m in (p.adapter, p.student, p.classifier))


def test_shared_classifier_coupling_after_steps():
    p = _pipeline()
    opt = torch.optim.AdamW(p.trainable_parameters(), lr=1e-2)
    x, y = _x(8), torch.tensor([0, 1, 2, 0, 1, 2, 0, 1])
    for _ in range(3):
        out = p(x)
        loss, _ = rd_loss(y, out.z_t, out.z_s, out.f_t, out.f_s, LossWeights(1, 1))
        opt.zero_grad()
        loss.backward()
        opt.step()
    g_t = p.teacher_path().classifier
    g_s = p.student_path()[1]
    assert g_t is g_s
    assert g_t.weight.data_ptr() == g_s.weight.data_ptr()
    x2 = _x(3, seed=1)
    assert torch.equal(p.teacher_path()(x2), g_s(p.adapter(p.teacher(x2))))


def test_forward_purity():
    p = _pipeline().eval()
    x = _x()
    a, b = p(x), p(x)
    assert torch.equal(a.z_t, b.z_t) and torch.equal(a.f_s, b.f_s)


def test_checkpoint_excludes_teacher(tmp_path):
    p = _pipeline()
    path = save_checkpoint(
        tmp_path / "c.pt",
        {"adapter": p.adapter, "student": p.student, "classifier": p.classifier},
        {"method": "rd_full"},
        p.teacher,
    )
    ck = load_checkpoint(path)
    assert set(ck["state"]) == {"adapter", "student", "classifier"}
    assert ck["teacher"] == {"name": "t", "checksum": p.teacher.checksum}
    assert ck["config"] == {"method": "rd_full"}
    flat = str(ck)
    assert "backbone" not in flat
