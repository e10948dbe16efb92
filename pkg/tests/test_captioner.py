import numpy as np
import pytest

from unirecon.captioner import SUMMARY_WIDTH, Captioner, Projector, patchify, summary_targets
from unirecon.errors import InputError
from unirecon.numerics import ParameterStore, SeededRng, grad_check
from unirecon.scene import BOS, EOS, VOCAB_SIZE, Scene, SceneObject, build_dataset, canonical_caption, render


@pytest.fixture(scope="module")
def model():
    return Captioner(random_state=1).initialize()


@pytest.fixture(scope="module")
def data():
    ds = build_dataset(64, seed=11, n_eval=8)
    return ds.images("train"), ds.captions("train")


def test_patchify_layout():
    img = np.zeros((1, 32, 32, 3), np.float32)
    img[0, 8:16, 24:32] = 1.0  # row 1, col 3
    p = patchify(img)
    assert p.shape == (1, 16, 192)
    assert p[0, 7].min() == 1.0 and p[0].sum() == 192


def test_logits_shape_and_finite(model, data):
    imgs, caps = data
    logits = model.forward_logits(imgs[0], caps[0])
    assert logits.shape == (len(caps[0]), VOCAB_SIZE)
    assert np.all(np.isfinite(logits))
    assert model.forward_logits(None, caps[0]).shape == logits.shape


def test_causality(model, data):
    imgs, caps = data
    short = model.forward_logits(imgs[0], caps[0][:3])
    long = model.forward_logits(imgs[0], caps[0][:3] + [5, 7])
    np.testing.assert_array_equal(short, long[:3])


def test_out_of_vocabulary_rejected(model, data):
    with pytest.raises(InputError):
        model.forward_logits(data[0][0], [BOS, VOCAB_SIZE])
    with pytest.raises(InputError):
        model.forward_logits(data[0][0], [3, 4])


def test_sampled_logps_match_teacher_forcing(model, data):
    imgs = data[0][:3]
    trajs = model.sample_captions(imgs, 1.0, [SeededRng(5, (i,)) for i in range(3)])
    for img, tr in zip(imgs, trajs):
        assert len(tr.logps) == len(tr.tokens) - 1
        assert np.all(tr.logps <= 0)
        np.testing.assert_allclose(model.caption_logprob(img, tr.tokens), tr.logps, atol=1e-5)


def test_next_token_distribution_sums_to_one(model, data):
    img, cap = data[0][0], data[1][0][:4]
    total = sum(np.exp(model.caption_logprob(img, cap + [v])[-1]) for v in range(VOCAB_SIZE))
    assert abs(total - 1.0) < 1e-5


def test_masked_vocabulary_gives_zero_logp(data):
    m = Captioner(random_state=2).initialize()
    bias = np.full(VOCAB_SIZE, -1e9, np.float32)
    bias[EOS] = 0.0
    m.params_["head.b"].data[...] = bias
    assert m.caption_logprob(data[0][0], [BOS, EOS])[0] == 0.0


def test_low_temperature_matches_greedy(model, data):
    imgs = data[0][:4]
    greedy = model.predict(imgs)
    cold = model.sample_captions(imgs, 1e-4, [SeededRng(0, (i,)) for i in range(4)])
    assert [t.tokens for t in cold] == greedy


def test_sampling_deterministic_and_truncation(model, data):
    a = model.sample_caption(data[0][1], 1.0, 32, SeededRng(9))
    b = model.sample_caption(data[0][1], 1.0, 32, SeededRng(9))
    assert a.tokens == b.tokens and np.array_equal(a.logps, b.logps)
    t = model.sample_caption(data[0][1], 1.0, 2, SeededRng(9))
    assert len(t.tokens) == 2
    assert t.truncated == (t.tokens[-1] != EOS)
    with pytest.raises(InputError):
        model.sample_caption(data[0][1], 0.0, 32, SeededRng(9))


def test_condition_matches_recorded_hidden_state(model, data):
    proj = Projector()
    store = ParameterStore()
    proj.init_params(store, SeededRng(3))
    tr = model.sample_caption(data[0][2], 1.0, 32, SeededRng(4))
    np.testing.assert_array_equal(model.hidden_states([tr.tokens])[0], tr.hidden)
    c = model.condition_from_text(tr.tokens, proj, store)
    assert c.shape == (64,)
    np.testing.assert_array_equal(c, model.condition_from_text(tr.tokens, proj, store))
    with pytest.raises(InputError):
        model.condition_from_text([], proj, store)


def test_ratio_identity(model, data):
    imgs, caps = data
    lp1, mask = model.token_logprobs(imgs[:4], caps[:4])
    lp2, _ = model.token_logprobs(imgs[:4], caps[:4])
    assert np.all(np.exp(lp2.data[mask] - lp1.data[mask]) == 1.0)


def test_initial_loss_near_uniform(data):
    m = Captioner(random_state=3).initialize()
    loss = m.cross_entropy(*data).item()
    assert abs(loss - np.log(VOCAB_SIZE)) < 0.1 * np.log(VOCAB_SIZE)


def test_frozen_visual_keys_get_no_gradient(data):
    m = Captioner(random_state=4).initialize()
    m.freeze_visual()
    before = m.params_.digest(["patch."])
    m.params_.zero_grad()
    m.cross_entropy(data[0][:8], data[1][:8]).backward()
    assert all(m.params_[k].grad is None for k in m.params_.keys() if k.startswith("patch."))
    assert m.params_["head.w"].grad is not None
    m.optimizer_.step()
    assert m.params_.digest(["patch."]) == before


def test_memorization(data):
    imgs, caps = data
    m = Captioner(random_state=0, batch_size=32).fit(imgs, caps, n_steps=500)
    curve = np.asarray(m.loss_curve_)
    assert curve[:50].mean() > curve[-50:].mean()
    assert m.cross_entropy(imgs, caps).item() < 0.1
    # trained model separates images that differ in one object
    a = Scene((SceneObject((0, 0), "circle", "red", "small"),))
    b = Scene((SceneObject((0, 0), "square", "blue", "large"),))
    la = m.forward_logits(render(a), [BOS])
    lb = m.forward_logits(render(b), [BOS])
    assert not np.allclose(la, lb)
    assert m.predict(imgs[:8]) == [list(c) for c in caps[:8]]


def test_state_round_trip(model):
    arrays = model.state_arrays()
    other = Captioner(random_state=1).load_state_arrays(arrays)
    assert other.params_.digest() == model.params_.digest()
    cap = canonical_caption(Scene((SceneObject((2, 2), "cross", "green", "large"),)))
    np.testing.assert_array_equal(other.forward_logits(None, cap), model.forward_logits(None, cap))


def test_summary_targets():
    cap = canonical_caption(Scene((SceneObject((1, 2), "triangle", "blue", "large"),)))
    t = summary_targets([cap])
    assert t.shape == (1, 16, 3)
    assert t[0, 6].tolist() == [3, 3, 2]  # 1 + index in SHAPES, COLORS, SIZES
    assert t[0].sum() == 8


def test_summary_loss_gradient(data):
    m = Captioner(d_model=16, n_layers=1, random_state=5, summary_weight=1.0).initialize()
    caps = data[1][:3]
    assert m.params_["sum.w"].shape[1] == 16 * SUMMARY_WIDTH
    err = grad_check(lambda: m.summary_loss(caps), m.params_, max_per_key=6)
    assert err < 1e-4


def test_summary_head_trains_on_fresh_scenes(data):
    imgs, caps = data
    runs = []
    for _ in range(2):
        m = Captioner(d_model=16, n_layers=1, random_state=2, summary_weight=1.0, text_only_fraction=0.5)
        m.fit(imgs, caps, n_steps=3)
        runs.append(m.params_.digest())
    assert runs[0] == runs[1]
    off = Captioner(d_model=16, n_layers=1, random_state=2, text_only_fraction=0.5).fit(imgs, caps, n_steps=3)
    assert off.params_.digest(["sum."]) == Captioner(d_model=16, n_layers=1, random_state=2).initialize().params_.digest(["sum."])
