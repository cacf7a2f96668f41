import numpy as np
import pytest

from idshield import geometry as G
from idshield.errors import EmptyDataset, NonFiniteLoss, ShapeMismatch
from idshield.predictor import (
    DEFAULT_STAGES, CurriculumStage, PredictorModel, TrainOptions, _Sample, allocate_steps,
    check_stages, compute_priors, predict, protect, sample_loss_grad, train, warmup_length,
)
from idshield.synth import synth_faces

from conftest import rel_err


@pytest.fixture(scope="module")
def tiny():
    """A 32x32 model (patch 8) keeps the manual-gradient checks fast."""
    return PredictorModel(image_size=32, patch_size=8, hidden_dim=6, seed=1)


def test_default_stages_exact():
    s1, s2, s3 = DEFAULT_STAGES
    assert (s1.epochs, s1.alphas, s1.beta1, s1.beta2, s1.epsilon, s1.lr) == \
        (120, (2 / 37, 14 / 37, 20 / 37, 1 / 37), 9e-3, 1e-3, 0.05, 1e-2)
    assert (s2.epochs, s2.alphas, s2.beta1, s2.beta2, s2.epsilon, s2.lr) == \
        (20, (4 / 16, 2 / 16, 9 / 16, 2 / 16), 1.8e-3, 2e-4, 0.04, 2e-5)
    assert (s3.epochs, s3.alphas, s3.beta1, s3.beta2, s3.epsilon, s3.lr) == \
        (20, (2 / 14, 2 / 14, 9 / 14, 1 / 14), 4.5e-4, 5e-5, 0.035, 2e-5)


def test_stage_validation():
    with pytest.raises(ValueError):
        CurriculumStage(1, (1.0,), 0.0, 1.0, 0.1, 0.1)
    with pytest.raises(ValueError):
        check_stages([])
    small = CurriculumStage(1, (1.0,), 1.0, 1.0, 0.01, 0.1)
    big = CurriculumStage(1, (1.0,), 1.0, 1.0, 0.05, 0.1)
    with pytest.raises(ValueError):
        check_stages([small, big])


def test_allocate_steps():
    assert allocate_steps(DEFAULT_STAGES, 500) == [375, 63, 62]
    assert sum(allocate_steps(DEFAULT_STAGES, 7)) == 7
    assert warmup_length(500) == 50 and warmup_length(10**6) == 2500 and warmup_length(3) == 1


def test_epsilon_zero_gives_zero(tiny):
    rng = np.random.default_rng(0)
    x5 = rng.random((32, 32, 5))
    delta, _ = tiny.forward(x5, 0.0)
    assert np.all(delta == 0)


def test_bound_over_random_states(tiny):
    rng = np.random.default_rng(1)
    x5 = rng.random((32, 32, 5))
    for _ in range(200):
        m = PredictorModel(32, 8, 6, params={k: rng.normal(0, 5, v.shape) for k, v in tiny.params.items()})
        assert np.max(np.abs(m.forward(x5, 0.03)[0])) <= 0.03


def test_predict_deterministic_and_resized():
    m = PredictorModel(seed=2)
    img, lm = synth_faces(1, seed=3, size=64)[0]
    face, ar = compute_priors(img.shape, lm)
    d1 = predict(m, img, face, ar, 0.035)
    d2 = predict(m, img, face, ar, 0.035)
    assert d1.shape == img.shape and d1.tobytes() == d2.tobytes()
    assert np.max(np.abs(d1)) <= 0.035
    with pytest.raises(ShapeMismatch):
        predict(m, img, face[:100], ar, 0.035)


def test_protect_epsilon_zero_is_identity():
    m = PredictorModel(seed=2)
    img, lm = synth_faces(1, seed=3, size=64)[0]
    np.testing.assert_array_equal(protect(m, img, lm, 0.0), img)


def test_priors_are_binary_and_plausible():
    img, lm = synth_faces(1, seed=4, size=64)[0]
    face, ar = compute_priors(img.shape, lm)
    assert set(np.unique(face)) <= {0.0, 1.0} and 0.05 < face.mean() < 0.9
    assert np.all(ar == 1)
    face_r = compute_priors((64, 128, 3), lm)[1]
    assert 0.4 < face_r.mean() < 0.6


def test_serialization_bit_exact(tiny):
    blob = tiny.to_bytes()
    assert blob[:8] == b"IDSPRD01"
    back = PredictorModel.from_bytes(blob)
    assert (back.image_size, back.patch_size, back.hidden_dim) == (32, 8, 6)
    for k in tiny.params:
        assert back.params[k].tobytes() == tiny.params[k].tobytes()
    with pytest.raises(ValueError):
        PredictorModel.from_bytes(b"IDSENC01" + blob[8:])


def test_backward_matches_fd_model_level(tiny):
    rng = np.random.default_rng(5)
    x5 = rng.random((32, 32, 5))
    cot = rng.normal(size=(32, 32, 3))
    _, cache = tiny.forward(x5, 0.05)
    grads = tiny.backward(cache, cot)
    for k, p in tiny.params.items():
        v = rng.normal(size=p.shape)
        h = 1e-6
        orig = p.copy()
        tiny.params[k] = orig + h * v
        up = np.sum(tiny.forward(x5, 0.05)[0] * cot)
        tiny.params[k] = orig - h * v
        dn = np.sum(tiny.forward(x5, 0.05)[0] * cot)
        tiny.params[k] = orig
        assert rel_err(np.sum(grads[k] * v), (up - dn) / (2 * h)) < 1e-5, k


def test_training_gradient_fd_two_images(branches):
    """Parameter gradients of the full loss (branches included) on a 2-image toy set."""
    model = PredictorModel(seed=6)
    data = synth_faces(2, seed=7, size=64)
    w = DEFAULT_STAGES[0].weights()
    samples = [_Sample(model, img, lm, branches, G.DEFAULT_TEMPLATE) for img, lm in data]
    rng = np.random.default_rng(8)

    def total(m):
        return sum(sample_loss_grad(m, s, branches, w, None, 0.0)[0] for s in samples)

    grads = {k: 0.0 for k in model.params}
    for s in samples:
        g = sample_loss_grad(model, s, branches, w, None, 0.0)[3]
        for k in grads:
            grads[k] = grads[k] + g[k]
    for k, p in model.params.items():
        v = rng.normal(size=p.shape)
        h = 1e-6
        orig = p.copy()
        model.params[k] = orig + h * v
        up = total(model)
        model.params[k] = orig - h * v
        dn = total(model)
        model.params[k] = orig
        assert rel_err(np.sum(grads[k] * v), (up - dn) / (2 * h)) < 1e-3, k


def test_zero_lr_leaves_params(branches):
    model = PredictorModel(seed=9)
    data = synth_faces(2, seed=1, size=64)
    stage = CurriculumStage(1, (0.25,) * 4, 1e-3, 1e-4, 0.035, 1e-2)
    out, log = train(model, data, branches, [stage],
                     TrainOptions(batch_size=2, total_steps=4, lr_scale=0.0, jitter_sigma=0.0))
    for k in model.params:
        assert out.params[k].tobytes() == model.params[k].tobytes()
    losses = log.column("loss")
    assert np.all(losses == losses[0])
    assert log.warmup_steps == 1 and log.grad_clip == 10.0


def test_train_does_not_mutate_input(branches):
    model = PredictorModel(seed=9)
    before = {k: v.copy() for k, v in model.params.items()}
    data = synth_faces(2, seed=1, size=64)
    train(model, data, branches, DEFAULT_STAGES, TrainOptions(batch_size=2, total_steps=3))
    for k in before:
        np.testing.assert_array_equal(model.params[k], before[k])


def test_train_log_and_clip(branches):
    model = PredictorModel(seed=9)
    data = synth_faces(3, seed=1, size=64)
    out, log = train(model, data, branches, DEFAULT_STAGES,
                     TrainOptions(batch_size=2, total_steps=20, lr_scale=10.0, grad_clip=1e-3))
    assert log.stage_steps == [15, 3, 2] and log.warmup_steps == 2
    assert list(log.column("stage")) == [1] * 15 + [2] * 3 + [3] * 2
    lr = log.column("lr")
    assert lr[0] == 0.0 and lr[1] == pytest.approx(0.5 * 1e-2 * 10) and lr[2] == pytest.approx(1e-2 * 10)
    text = log.to_csv()
    assert text.startswith("step,stage,loss,adv,reg,lr,grad_norm\n") and "\r" not in text


def test_global_clip_bounds_update(branches):
    model = PredictorModel(seed=9)
    data = synth_faces(2, seed=1, size=64)
    stage = CurriculumStage(1, (0.25,) * 4, 9e-3, 1e-3, 0.05, 1e-2)
    out, log = train(model, data, branches, [stage],
                     TrainOptions(batch_size=2, total_steps=2, lr_scale=100.0, grad_clip=0.5))
    assert log.column("grad_norm")[1] > 0.5
    moved = np.sqrt(sum(np.sum((out.params[k] - model.params[k]) ** 2) for k in model.params))
    assert moved == pytest.approx(1e-2 * 100.0 * 0.5, rel=1e-9)


def test_train_errors(branches):
    with pytest.raises(EmptyDataset):
        train(PredictorModel(), [], branches)
    data = synth_faces(1, seed=0, size=64)
    bad = PredictorModel(seed=0)
    bad.params["b_out"][:] = np.nan
    with pytest.raises(NonFiniteLoss) as exc:
        train(bad, data, branches, DEFAULT_STAGES, TrainOptions(total_steps=2))
    assert exc.value.step == 0 and exc.value.stage == 1
    with pytest.raises(ValueError):
        train(PredictorModel(), data, branches[:2], DEFAULT_STAGES, TrainOptions(total_steps=2))


def test_train_deterministic(branches):
    data = synth_faces(2, seed=5, size=64)
    opts = TrainOptions(batch_size=1, total_steps=4, seed=3)
    a, la = train(PredictorModel(seed=1), data, branches, DEFAULT_STAGES, opts)
    b, lb = train(PredictorModel(seed=1), data, branches, DEFAULT_STAGES, opts)
    assert a.to_bytes() == b.to_bytes() and la.to_csv() == lb.to_csv()


def test_stage_lr_scale(branches):
    data = synth_faces(2, seed=1, size=64)
    _, log = train(PredictorModel(seed=9), data, branches, DEFAULT_STAGES,
                   TrainOptions(batch_size=2, total_steps=20, lr_scale=10.0, stage_lr_scale=(1, 50, 4)))
    lr = log.column("lr")
    assert lr[14] == pytest.approx(1e-2 * 10)
    assert lr[15] == pytest.approx(2e-5 * 10 * 50) and lr[19] == pytest.approx(2e-5 * 10 * 4)
    for bad in [(1, 2), (1, 0, 1), (1, float("nan"), 1)]:
        with pytest.raises(ValueError):
            train(PredictorModel(), data, branches, DEFAULT_STAGES,
                  TrainOptions(total_steps=3, stage_lr_scale=bad))
