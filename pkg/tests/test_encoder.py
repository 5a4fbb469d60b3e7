import numpy as np
import pytest
import torch

from qbae.archive import save_archive
from qbae.encoder import (
    BackboneSpec,
    DINOV2_VITL14_REG,
    extract_hidden_states,
    load_backbone,
    make_projection,
    make_toy_backbone,
    project_concat,
    required_layout,
)
from qbae.errors import ManifestError, ValidationError
from qbae.imaging import ImageTensor, normalize


def toy_archive(tmp_path, spec, seed=1, drop=None, reshape=None):
    rng = np.random.default_rng(seed)
    tensors = {
        name: rng.standard_normal(shape).astype(np.float32) * 0.05
        for name, shape in required_layout(spec).items()
    }
    if drop:
        del tensors[drop]
    if reshape:
        name, shape = reshape
        tensors[name] = rng.standard_normal(shape).astype(np.float32)
    path = tmp_path / "toy.qfa"
    save_archive(path, tensors)
    return path


class TestSpec:
    def test_vitl14_projection_input(self):
        assert DINOV2_VITL14_REG.width == 1024
        assert DINOV2_VITL14_REG.depth == 24
        # 2nd and 4th to last blocks
        assert DINOV2_VITL14_REG.tap_layers == (DINOV2_VITL14_REG.depth - 4, DINOV2_VITL14_REG.depth - 2)

    def test_invalid_taps(self):
        with pytest.raises(ValidationError):
            BackboneSpec(depth=4, width=8, heads=2, patch_size=2, tap_layers=(4,))

    def test_heads_must_divide(self):
        with pytest.raises(ValidationError):
            BackboneSpec(depth=4, width=10, heads=3, patch_size=2)


class TestLoadBackbone:
    def test_loads_and_checksum_stable(self, tmp_path):
        spec = BackboneSpec(depth=2, width=16, heads=2, patch_size=4, special_tokens=1,
                            tap_layers=(0, 1), pos_grid=4)
        path = toy_archive(tmp_path, spec)
        a = load_backbone(path, spec)
        b = load_backbone(path, spec)
        assert a.checksum() == b.checksum()
        assert a.frozen

    def test_missing_tensor_named(self, tmp_path):
        spec = BackboneSpec(depth=2, width=16, heads=2, patch_size=4, special_tokens=1,
                            tap_layers=(0,), pos_grid=4)
        path = toy_archive(tmp_path, spec, drop="block.1.attn.qkv.bias")
        with pytest.raises(ManifestError, match="block.1.attn.qkv.bias"):
            load_backbone(path, spec)

    def test_bad_shape_named(self, tmp_path):
        spec = BackboneSpec(depth=2, width=16, heads=2, patch_size=4, special_tokens=1,
                            tap_layers=(0,), pos_grid=4)
        path = toy_archive(tmp_path, spec, reshape=("block.0.norm1.weight", (17,)))
        with pytest.raises(ManifestError, match="block.0.norm1.weight"):
            load_backbone(path, spec)


class TestHiddenStates:
    def test_grid_lengths_224_patch14(self):
        spec = BackboneSpec(depth=2, width=32, heads=2, patch_size=14, special_tokens=5,
                            tap_layers=(0, 1), pos_grid=16)
        bb = make_toy_backbone(0, spec)
        x = torch.randn(1, 3, 224, 224)
        feats = bb.hidden_states(x)
        # (224 / 14)**2 = 256 spatial tokens, specials stripped
        assert [tuple(f.shape) for f in feats] == [(1, 256, 32), (1, 256, 32)]

    def test_toy_two_taps(self, toy_backbone):
        x = torch.randn(2, 3, 64, 64)
        feats = toy_backbone.hidden_states(x)
        assert len(feats) == 2
        assert all(tuple(f.shape) == (2, 64, 64) for f in feats)

    def test_special_token_stripping(self):
        for specials in (0, 1, 5):
            spec = BackboneSpec(depth=1, width=16, heads=2, patch_size=8,
                                special_tokens=specials, tap_layers=(0,), pos_grid=4)
            bb = make_toy_backbone(3, spec)
            feats = bb.hidden_states(torch.randn(1, 3, 32, 32))
            assert feats[0].shape[1] == 16  # (32/8)**2 regardless of specials

    def test_deterministic(self, toy_backbone, rng):
        img = ImageTensor(rng.random((3, 64, 64), dtype=np.float32))
        img = normalize(img)
        a = extract_hidden_states(toy_backbone, img)
        b = extract_hidden_states(toy_backbone, img)
        assert all(torch.equal(x, y) for x, y in zip(a, b))

    def test_wrong_resolution(self, toy_backbone, rng):
        img = normalize(ImageTensor(rng.random((3, 60, 60), dtype=np.float32)))
        with pytest.raises(ValidationError):
            extract_hidden_states(toy_backbone, img)


class TestProjectConcat:
    def test_one_encoder_two_taps(self):
        proj = make_projection(1024, 768, seed=0)
        feats = [[torch.randn(256, 1024), torch.randn(256, 1024)]]
        ctx = project_concat(feats, [proj])
        assert tuple(ctx.tokens.shape) == (512, 768)

    def test_two_encoder_lengths(self):
        projs = [make_projection(1024, 768, seed=0), make_projection(768, 768, seed=1)]
        feats = [
            [torch.randn(256, 1024), torch.randn(256, 1024)],
            [torch.randn(784, 768), torch.randn(784, 768)],
        ]
        ctx = project_concat(feats, projs)
        assert tuple(ctx.tokens.shape) == (2080, 768)
        assert ctx.source_layout == [(0, 0, 0, 256), (0, 1, 256, 256), (1, 0, 512, 784), (1, 1, 1296, 784)]

    def test_identity_projection_passthrough(self):
        proj = torch.nn.Linear(8, 8)
        with torch.no_grad():
            proj.weight.copy_(torch.eye(8))
            proj.bias.zero_()
        feats = [[torch.randn(5, 8)]]
        ctx = project_concat(feats, [proj])
        assert torch.allclose(ctx.tokens, feats[0][0], atol=1e-6)

    def test_width_mismatch(self):
        proj = make_projection(16, 8, seed=0)
        with pytest.raises(ValidationError):
            project_concat([[torch.randn(4, 12)]], [proj])


class TestToyBackbone:
    def test_same_seed_same_checksum(self, toy_spec):
        assert make_toy_backbone(42, toy_spec).checksum() == make_toy_backbone(42, toy_spec).checksum()

    def test_seed_sensitivity(self, toy_spec):
        assert make_toy_backbone(42, toy_spec).checksum() != make_toy_backbone(7, toy_spec).checksum()

    def test_spatial_token_count(self, toy_backbone):
        feats = toy_backbone.hidden_states(torch.randn(1, 3, 64, 64))
        assert feats[0].shape[1] == (64 // 8) ** 2


class TestFrozenContract:
    def test_requires_grad_false(self, toy_backbone):
        assert all(not p.requires_grad for p in toy_backbone.parameters())

    def test_forward_does_not_change_weights(self, toy_backbone):
        before = toy_backbone.checksum()
        toy_backbone.hidden_states(torch.randn(2, 3, 64, 64))
        assert toy_backbone.checksum() == before
        assert toy_backbone.recorded_checksum == before
