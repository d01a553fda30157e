import numpy as np
import pytest
import torch

from dinomix.fkd import (
    FixtureTeacher,
    FoundationTeacher,
    Projector,
    distillation_loss,
    extract_teacher_features,
    module_digest,
    stack_slice_features,
)


def naive_adaptive_pool(grid, out_dims):
    # grid (C, D, H, W) with each dim divisible by its target: mean over blocks
    c = grid.shape[0]
    out = np.zeros((c,) + tuple(out_dims))
    steps = [n // o for n, o in zip(grid.shape[1:], out_dims)]
    for idx in np.ndindex(*out_dims):
        block = tuple(slice(i * s, (i + 1) * s) for i, s in zip(idx, steps))
        out[(slice(None),) + idx] = grid[(slice(None),) + block].reshape(c, -1).mean(axis=1)
    return out


def naive_distill(a, b, eps=1e-8):
    a, b = a.detach().double().numpy(), b.detach().double().numpy()
    total, n = 0.0, 0
    for bi in range(a.shape[0]):
        for loc in np.ndindex(*a.shape[2:]):
            u = a[(bi, slice(None)) + loc]
            v = b[(bi, slice(None)) + loc]
            u = u / max(np.linalg.norm(u), eps)
            v = v / max(np.linalg.norm(v), eps)
            total += float(((u - v) ** 2).sum())
            n += 1
    return total / n


@pytest.fixture
def teacher():
    return FixtureTeacher(out_channels=6, input_size=(16, 16), patch=4, seed=3)


def test_fixture_teacher_is_frozen_and_deterministic(teacher):
    assert not any(p.requires_grad for p in teacher.parameters())
    assert list(teacher.parameters()) == []
    img = torch.rand(3, 16, 16)
    a, b = teacher.featurize(img), teacher.featurize(img.clone())
    assert a.shape == (6, 4, 4)
    assert torch.equal(a, b)
    teacher.train()
    assert not teacher.training


def test_constant_volume_gives_identical_vectors(teacher):
    feats = extract_teacher_features(teacher, np.full((8, 20, 20), 0.3, np.float32), (2, 3, 5))
    assert feats.shape == (6, 2, 3, 5)
    flat = feats.reshape(6, -1)
    torch.testing.assert_close(flat, flat[:, :1].expand_as(flat), rtol=0, atol=1e-6)


@pytest.mark.parametrize("dims,target", [((8, 16, 16), (2, 4, 4)), ((5, 9, 31), (1, 2, 3)), ((4, 4, 4), (4, 4, 4))])
def test_output_shape(teacher, dims, target):
    vol = np.random.default_rng(0).random(dims).astype(np.float32)
    assert extract_teacher_features(teacher, vol, target).shape == (6,) + target


def test_pooling_is_block_mean(teacher):
    vol = np.random.default_rng(1).random((8, 16, 16)).astype(np.float32)
    stacked = stack_slice_features(teacher, vol)  # (6, 8, 4, 4)
    pooled = extract_teacher_features(teacher, vol, (2, 2, 2))
    np.testing.assert_allclose(pooled.numpy(), naive_adaptive_pool(stacked.numpy(), (2, 2, 2)), atol=1e-5)
    same = extract_teacher_features(teacher, vol, stacked.shape[1:])
    assert torch.equal(same, stacked)


def test_slices_follow_depth_order(teacher):
    vol = np.random.default_rng(2).random((5, 16, 16)).astype(np.float32)
    stacked = stack_slice_features(teacher, vol)
    for d in range(5):
        single = torch.as_tensor(vol[d])[None, None]
        expected = teacher.featurize(single[0].expand(3, -1, -1))
        torch.testing.assert_close(stacked[:, d], expected)


class _Broken(FoundationTeacher):
    out_channels = 2
    input_size = (4, 4)

    def featurize(self, image):
        if image.mean() > 0.5:
            raise ValueError("boom")
        return torch.zeros(2, 1, 1)


def test_featurize_failure_reports_slice():
    vol = np.zeros((4, 4, 4), np.float32)
    vol[2] = 1.0
    with pytest.raises(RuntimeError, match="slice 2"):
        extract_teacher_features(_Broken(), vol, (1, 1, 1))


# projector ----------------------------------------------------------------------


def test_identity_projector():
    proj = Projector(5, 5).identity_()
    x = torch.randn(2, 5, 3, 4, 2)
    torch.testing.assert_close(proj(x), x)


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_projector_shapes(kind):
    proj = Projector(8, 3, kind=kind)
    for shape in [(1, 8, 1, 1, 1), (2, 8, 3, 5, 7)]:
        out = proj(torch.randn(shape))
        assert out.shape == (shape[0], 3) + shape[2:]


def test_projector_channel_mismatch():
    with pytest.raises(ValueError, match="expects 8 channels"):
        Projector(8, 3)(torch.randn(1, 4, 2, 2, 2))


def test_projector_linearity_without_bias():
    torch.manual_seed(0)
    proj = Projector(4, 6, bias=False).double()
    x, y = torch.randn(2, 4, 2, 3, 2, dtype=torch.float64), torch.randn(2, 4, 2, 3, 2, dtype=torch.float64)
    torch.testing.assert_close(proj(2.5 * x - 0.5 * y), 2.5 * proj(x) - 0.5 * proj(y))


def test_projector_is_differentiable():
    proj = Projector(4, 2)
    x = torch.randn(1, 4, 2, 2, 2, requires_grad=True)
    proj(x).sum().backward()
    assert x.grad is not None and proj.net.weight.grad is not None


# distillation loss --------------------------------------------------------------


def test_loss_scale_invariance():
    t = torch.randn(2, 4, 3, 3, 3)
    for c in (0.01, 1.0, 7.0):
        assert distillation_loss(c * t, t).item() == pytest.approx(0.0, abs=1e-6)
    scale = torch.rand(2, 1, 3, 3, 3) + 0.1
    p = torch.randn(2, 4, 3, 3, 3)
    assert distillation_loss(p * scale, t / scale).item() == pytest.approx(distillation_loss(p, t).item(), abs=1e-6)


def test_loss_orthogonal_and_antipodal():
    a = torch.zeros(1, 2, 2, 2, 2)
    b = torch.zeros(1, 2, 2, 2, 2)
    a[:, 0] = 3.0
    b[:, 1] = 0.5
    assert distillation_loss(a, b).item() == pytest.approx(2.0, abs=1e-7)
    t = torch.randn(2, 5, 2, 3, 2)
    assert distillation_loss(-t, t).item() == pytest.approx(4.0, abs=1e-6)


def test_loss_matches_naive():
    rng = torch.Generator().manual_seed(5)
    a, b = torch.randn(2, 3, 2, 3, 4, generator=rng), torch.randn(2, 3, 2, 3, 4, generator=rng)
    assert distillation_loss(a, b).item() == pytest.approx(naive_distill(a, b), rel=1e-6)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        distillation_loss(torch.zeros(1, 2, 2, 2, 2), torch.zeros(1, 3, 2, 2, 2))


def central_difference_grad(f, x, h=1e-6):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = f(x).item()
        flat[i] = orig - h
        down = f(x).item()
        flat[i] = orig
        g.view(-1)[i] = (up - down) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient_matches_finite_differences(seed):
    g = torch.Generator().manual_seed(seed)
    p = torch.randn(1, 2, 2, 2, 2, dtype=torch.float64, generator=g)
    t = torch.randn(1, 2, 2, 2, 2, dtype=torch.float64, generator=g)
    numeric = central_difference_grad(lambda x: torch.tensor(naive_distill(x, t), dtype=torch.float64), p.clone())
    p.requires_grad_(True)
    distillation_loss(p, t).backward()
    rel = (p.grad - numeric).norm() / numeric.norm()
    assert rel <= 1e-4


def test_no_gradient_reaches_teacher_side():
    p = torch.randn(1, 3, 2, 2, 2, requires_grad=True)
    t = torch.randn(1, 3, 2, 2, 2, requires_grad=True)
    distillation_loss(p, t).backward()
    assert t.grad is None or torch.all(t.grad == 0)
    assert p.grad is not None


def test_digest_tracks_buffers(teacher):
    d = module_digest(teacher)
    assert d == module_digest(teacher)
    with torch.no_grad():
        teacher.weight.add_(1.0)
    assert module_digest(teacher) != d


def test_vit_adapter_on_tiny_random_checkpoint(tmp_path):
    transformers = pytest.importorskip("transformers")
    from dinomix.fkd import build_teacher

    cfg = transformers.Dinov2Config(hidden_size=8, num_hidden_layers=1, num_attention_heads=2,
                                    intermediate_size=16, patch_size=4, image_size=16)
    torch.manual_seed(0)
    transformers.Dinov2Model(cfg).save_pretrained(tmp_path / "vit")
    adapter = build_teacher("vit", str(tmp_path / "vit"), input_size=(16, 16))
    assert adapter.out_channels == 8
    assert not any(p.requires_grad for p in adapter.parameters())
    vol = np.random.default_rng(0).random((4, 20, 24)).astype(np.float32)
    digest = module_digest(adapter)
    feats = extract_teacher_features(adapter, vol, (2, 2, 2))
    assert feats.shape == (8, 2, 2, 2) and torch.isfinite(feats).all()
    assert module_digest(adapter) == digest
    with pytest.raises(ValueError, match="weights path"):
        build_teacher("vit", "")
