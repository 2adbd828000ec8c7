import numpy as np
import pytest
import torch

from adp_reid.backbone import (
    BackboneConfig,
    VisionTransformer,
    compute_patch_grid,
    load_checkpoint,
    load_pretrained,
    save_checkpoint,
)


def enumerate_windows(length: int, P: int, S: int) -> int:
    count, start = 0, 0
    while start + P <= length:
        count += 1
        start += S
    return count


TINY = BackboneConfig(image_height=16, image_width=16, patch_size=8, stride=8, depth=2, num_heads=2, embed_dim=16)
DESK = BackboneConfig(image_height=64, image_width=32, patch_size=8, stride=8, depth=4, num_heads=4, embed_dim=64)


@pytest.mark.parametrize(
    "args, expected",
    [((256, 128, 16, 16), (16, 8, 128)), ((256, 128, 16, 12), (21, 10, 210)), ((16, 16, 16, 16), (1, 1, 1))],
)
def test_patch_grid_examples(args, expected):
    grid = compute_patch_grid(*args)
    assert (grid.h, grid.w, grid.num_patches) == expected
    H, W, P, S = args
    assert grid.h == enumerate_windows(H, P, S) and grid.w == enumerate_windows(W, P, S)


def test_patch_grid_random_against_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(200):
        H, W = rng.integers(8, 300, size=2)
        P = int(rng.integers(1, min(H, W) + 1))
        S = int(rng.integers(1, 20))
        grid = compute_patch_grid(int(H), int(W), P, S)
        assert grid.h == enumerate_windows(H, P, S) and grid.w == enumerate_windows(W, P, S)


@pytest.mark.parametrize("args", [(16, 16, 17, 16), (16, 16, 8, 0)])
def test_patch_grid_preconditions(args):
    with pytest.raises(ValueError):
        compute_patch_grid(*args)


def test_overlapping_stride_changes_token_count():
    model = VisionTransformer(BackboneConfig(64, 32, 8, 6, depth=1, num_heads=2, embed_dim=16))
    assert model.embed(torch.rand(1, 3, 64, 32)).shape == (1, model.grid.num_patches + 1, 16)
    assert model.grid.num_patches == 10 * 5


def test_embed_shape_full_scale_config():
    model = VisionTransformer(BackboneConfig(depth=1))
    seq = model.embed(torch.zeros(1, 3, 256, 128))
    assert seq.shape == (1, 129, 768)


def test_embed_zero_image_zero_projection():
    model = VisionTransformer(DESK)
    with torch.no_grad():
        model.patch_embed.proj.weight.zero_()
        model.patch_embed.proj.bias.zero_()
        seq = model.embed(torch.zeros(2, 3, 64, 32)) - model.pos_embed
    assert torch.count_nonzero(seq[:, 1:]) == 0
    torch.testing.assert_close(seq[:, 0], model.cls_token[0].expand(2, -1))


def test_embed_locality():
    model = VisionTransformer(DESK)
    a = torch.rand(1, 3, 64, 32)
    b = a.clone()
    b[:, :, 8:16, 16:24] = torch.rand(1, 3, 8, 8)  # patch row 1, col 2
    with torch.no_grad():
        diff = (model.embed(a) - model.embed(b)).abs().sum(dim=-1)[0]
    changed = torch.nonzero(diff).flatten().tolist()
    assert changed == [1 + 1 * 4 + 2]


def test_embed_shape_mismatch():
    with pytest.raises(ValueError):
        VisionTransformer(DESK).embed(torch.rand(1, 3, 32, 32))


def test_trace_rows_sum_to_one():
    torch.manual_seed(0)
    model = VisionTransformer(DESK)
    with torch.no_grad():
        feat, trace = model(torch.randn(5, 3, 64, 32))
    assert feat.shape == (5, 64)
    assert trace.shape == (5, 4, 4, 33)
    assert (trace >= 0).all()
    torch.testing.assert_close(trace.sum(-1), torch.ones(5, 4, 4), atol=1e-5, rtol=0)


def test_identical_tokens_give_uniform_attention():
    model = VisionTransformer(DESK)
    seq = torch.randn(1, 1, 64).expand(2, 33, 64).contiguous()
    with torch.no_grad():
        _, trace = model.forward_sequence(seq)
    torch.testing.assert_close(trace, torch.full_like(trace, 1 / 33), atol=1e-6, rtol=0)


def test_feature_invariant_to_patch_token_permutation():
    torch.manual_seed(1)
    model = VisionTransformer(DESK)
    with torch.no_grad():
        seq = model.embed(torch.rand(2, 3, 64, 32))
        perm = torch.cat([torch.tensor([0]), 1 + torch.randperm(32)])
        feat, _ = model.forward_sequence(seq)
        feat_perm, _ = model.forward_sequence(seq[:, perm])
    torch.testing.assert_close(feat, feat_perm, atol=1e-5, rtol=0)


def central_difference_grad(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        plus = fn(x).item()
        flat[i] = orig - eps
        minus = fn(x).item()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * eps)
    return grad


def test_gradient_matches_finite_differences():
    torch.manual_seed(2)
    model = VisionTransformer(TINY).double()
    seq = torch.randn(1, 5, 16, dtype=torch.float64)
    # plain .sum() of a LayerNorm output is constant, so project first
    probe = torch.randn(16, dtype=torch.float64)

    def scalar(s):
        return (model.forward_sequence(s)[0] @ probe).sum()

    x = seq.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(scalar(x), x)
    with torch.no_grad():
        numeric = central_difference_grad(scalar, seq.clone())
    rel = (analytic - numeric).norm() / numeric.norm()
    assert rel < 1e-3


def test_checkpoint_roundtrip(tmp_path):
    model = VisionTransformer(TINY)
    path = tmp_path / "m.pt"
    save_checkpoint(path, {"depth": 2}, {"backbone": model.state_dict()})
    payload = load_checkpoint(path)
    assert payload["config"] == {"depth": 2}
    other = VisionTransformer(TINY)
    other.load_state_dict(payload["tensors"]["backbone"])
    for a, b in zip(model.parameters(), other.parameters()):
        assert torch.equal(a, b)


def test_corrupt_checkpoint_names_path(tmp_path):
    path = tmp_path / "broken.pt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="broken.pt"):
        load_checkpoint(path)


def test_pretrained_hook_skips_mismatched_shapes():
    src = VisionTransformer(BackboneConfig(32, 32, 8, 8, depth=2, num_heads=2, embed_dim=16))
    dst = VisionTransformer(TINY)
    missing = load_pretrained(dst, src.state_dict())
    assert missing == ["pos_embed"]
    assert torch.equal(dst.cls_token, src.cls_token)
