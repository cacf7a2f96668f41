import numpy as np
import pytest

from idshield import geometry as G
from idshield.encoders import (
    GLOBAL, PATCH_GRID, CenterCropResize, EncoderBranch, SurrogateEncoder,
    branch_features, branch_vjp, default_branches, normalize_weights,
)
from idshield.errors import ShapeMismatch, ZeroFeature

from conftest import directional_fd, random_landmarks, rel_err


def small(kind, name="toy"):
    return SurrogateEncoder(name, 16, 4, feature_dim=8, output_kind=kind)


def test_zero_image_raises_zero_feature():
    with pytest.raises(ZeroFeature):
        small(GLOBAL).forward(np.zeros((16, 16, 3)))


def test_global_unit_norm():
    enc = small(GLOBAL)
    for seed in range(5):
        e = enc.forward(np.random.default_rng(seed).random((16, 16, 3)))
        assert abs(np.linalg.norm(e) - 1) < 1e-9


def test_patch_grid_shape():
    enc = SurrogateEncoder("clip_plus_tokens", 224, 32, 64, PATCH_GRID)
    assert enc.forward(np.random.default_rng(0).random((224, 224, 3))).shape == (49, 64)


def test_forward_pure_and_weights_frozen():
    enc = small(GLOBAL)
    img = np.random.default_rng(1).random((16, 16, 3))
    assert enc.forward(img).tobytes() == enc.forward(img).tobytes()
    with pytest.raises(ValueError):
        enc.proj[0, 0] = 1.0
    scaled = SurrogateEncoder("toy", 16, 4, 8, GLOBAL, weights=(2 * enc.proj, enc.mix))
    assert scaled.forward(img).tobytes() == scaled.forward(img).tobytes()
    assert not np.allclose(scaled.forward(img), enc.forward(img))


def test_same_name_same_weights():
    assert np.array_equal(small(GLOBAL, "a").proj, small(GLOBAL, "a").proj)
    assert not np.array_equal(small(GLOBAL, "a").proj, small(GLOBAL, "b").proj)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        small(GLOBAL).forward(np.zeros((15, 16, 3)))
    with pytest.raises(ShapeMismatch):
        small(GLOBAL).forward(np.zeros((16, 16)))
    enc = small(PATCH_GRID)
    with pytest.raises(ShapeMismatch):
        enc.vjp(np.random.default_rng(0).random((16, 16, 3)), np.zeros((3, 8)))


@pytest.mark.parametrize("kind", [GLOBAL, PATCH_GRID])
def test_vjp_zero_cotangent(kind):
    enc = small(kind)
    img = np.random.default_rng(0).random((16, 16, 3))
    assert np.all(enc.vjp(img, np.zeros(enc.output_shape)) == 0)


@pytest.mark.parametrize("kind", [GLOBAL, PATCH_GRID])
@pytest.mark.parametrize("seed", range(5))
def test_vjp_matches_fd(kind, seed):
    rng = np.random.default_rng(seed)
    enc = small(kind)
    img = rng.random((16, 16, 3))
    cot = rng.normal(size=enc.output_shape)
    cot /= np.linalg.norm(cot)
    v = rng.normal(size=img.shape)
    fd = directional_fd(lambda x: np.sum(enc.forward(x) * cot), img, v)
    assert rel_err(np.sum(enc.vjp(img, cot) * v), fd) < 1e-4


@pytest.mark.parametrize("kind", [GLOBAL, PATCH_GRID])
def test_vjp_linear_in_cotangent(kind):
    rng = np.random.default_rng(3)
    enc = small(kind)
    img = rng.random((16, 16, 3))
    c1, c2 = rng.normal(size=enc.output_shape), rng.normal(size=enc.output_shape)
    np.testing.assert_allclose(enc.vjp(img, c1 + c2), enc.vjp(img, c1) + enc.vjp(img, c2), atol=1e-10)


def test_serialization_round_trip():
    enc = SurrogateEncoder("arcface", 112, 16, 64, GLOBAL)
    blob = enc.to_bytes()
    assert blob[:8] == b"IDSENC01"
    back = SurrogateEncoder.from_bytes(blob, "arcface", 112, GLOBAL)
    assert back.proj.tobytes() == enc.proj.tobytes() and back.mix.tobytes() == enc.mix.tobytes()


def test_default_branch_layout():
    names = [b.name for b in default_branches()]
    assert names == ["ip_adapter", "ip_adapter_plus", "photomaker", "instantid"]
    assert abs(sum(b.weight for b in default_branches()) - 1) < 1e-12


def test_normalize_weights():
    brs = [EncoderBranch(b.name, b.preprocess, b.encoder, w)
           for b, w in zip(default_branches(), (1, 2, 3, 4))]
    assert abs(sum(b.weight for b in normalize_weights(brs)) - 1) < 1e-9
    with pytest.raises(ValueError):
        normalize_weights([EncoderBranch("x", (), small(GLOBAL), 0.0)])


def test_align_branch_equals_forward_on_warp(faces):
    img, lm = faces[0]
    b = default_branches()[3]
    feats, trace = branch_features(b, img, lm)
    a = G.fit_affine(lm, G.ARCFACE_112)
    crop = G.warp_image(img, a, 112, 112)
    np.testing.assert_allclose(feats, b.encoder.forward(crop), atol=1e-12)
    np.testing.assert_allclose(trace.affines[0], a)


def test_center_crop_affine_matches_resize_for_square():
    a = CenterCropResize(224).affine(None, (64, 64))
    np.testing.assert_allclose(a, G.resize_affine(64, 64, 224, 224), atol=1e-12)


def test_center_crop_keeps_middle():
    a = CenterCropResize(10).affine(None, (10, 20))
    np.testing.assert_allclose(G.apply_affine(a, [[5.0, 0.0], [14.0, 9.0]]), [[0.0, 0.0], [9.0, 9.0]])


def test_jitter_determinism(faces, branches):
    img, lm = faces[1]
    b = branches[3]
    f1 = branch_features(b, img, lm, 0.003, np.random.default_rng(5))[0]
    f2 = branch_features(b, img, lm, 0.003, np.random.default_rng(5))[0]
    f0 = branch_features(b, img, lm)[0]
    assert f1.tobytes() == f2.tobytes()
    assert not np.array_equal(f1, f0)


def test_jitter_ignored_on_crop_branch(faces, branches):
    img, lm = faces[1]
    f1 = branch_features(branches[0], img, lm, 0.01, np.random.default_rng(5))[0]
    assert f1.tobytes() == branch_features(branches[0], img, lm)[0].tobytes()


def test_align_without_landmarks(branches, faces):
    with pytest.raises(ValueError):
        branch_features(branches[3], faces[0][0], None)


@pytest.mark.parametrize("bi", range(4))
@pytest.mark.parametrize("seed", range(3))
def test_branch_chain_gradient(bi, seed):
    rng = np.random.default_rng(seed)
    b = default_branches()[bi]
    img = rng.uniform(0.1, 0.9, (48, 48, 3))
    lm = random_landmarks(rng, 48)
    jr = 0.003 if b.needs_landmarks else 0.0
    feats, trace = branch_features(b, img, lm, jr, np.random.default_rng(seed))
    cot = rng.normal(size=feats.shape)
    v = rng.normal(size=img.shape)

    def f(x):
        return np.sum(branch_features(b, x, lm, jr, np.random.default_rng(seed))[0] * cot)
    assert rel_err(np.sum(branch_vjp(b, trace, cot) * v), directional_fd(f, img, v)) < 1e-4
