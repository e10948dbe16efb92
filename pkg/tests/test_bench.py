import numpy as np
import pytest
from scipy.stats import spearmanr

from unirecon.bench import (
    BACKBONES,
    CaptionQualityReport,
    embed,
    get_backbone,
    judge_caption,
    pairwise_win_rate,
    protocol1_eval,
    reward,
    unified_score,
)
from unirecon.errors import DimensionError, InputError
from unirecon.numerics import SeededRng
from unirecon.scene import (
    BOS,
    COLORS,
    EOS,
    Scene,
    SceneObject,
    build_dataset,
    canonical_caption,
    parse_caption,
    render,
)


@pytest.fixture(scope="module")
def ds():
    return build_dataset(10, seed=21, n_eval=100)


def test_backbone_dimensions_and_norm(ds):
    X = ds.images("eval")
    for name, dim in (("pix-down", 192), ("cell-hist", 112), ("edge-orient", 64), ("patch-moments", 96)):
        E = get_backbone(name).fit(X).transform(X)
        assert E.shape == (100, dim)
        np.testing.assert_allclose(np.linalg.norm(E, axis=1), 1.0, atol=1e-6)
    with pytest.raises(InputError):
        get_backbone("clip")


def test_blank_images_embed_to_unit_vectors():
    for fill in (0.0, 0.1, 1.0):
        img = np.full((32, 32, 3), fill, np.float32)
        for name in BACKBONES:
            assert abs(np.linalg.norm(embed(img, name)) - 1) < 1e-6


def test_uniform_background_pix_down_is_flat():
    e = embed(np.full((32, 32, 3), 0.1, np.float32), "pix-down")
    np.testing.assert_allclose(e, np.full(192, 1 / np.sqrt(192)), rtol=1e-12)


def test_embedding_deterministic(ds):
    s = ds.scenes("eval")[0]
    for name in BACKBONES:
        assert np.array_equal(embed(render(s), name), embed(render(s), name))


def test_self_similarity_and_symmetry(ds):
    X = ds.images("eval")
    for a, b in zip(X[:-1], X[1:]):
        rep = unified_score(a, a)
        assert all(abs(v - 100) <= 1e-6 for v in rep.scores.values()) and abs(rep.overall - 100) <= 1e-6
        assert unified_score(a, b).scores == unified_score(b, a).scores
    with pytest.raises(DimensionError):
        unified_score(X[0], X[:2])


def test_overall_is_mean(ds):
    X = ds.images("eval")
    rep = unified_score(X[0], X[1])
    assert rep.overall == pytest.approx(np.mean(list(rep.scores.values())))
    assert set(rep.scores) == set(BACKBONES)


def test_channel_permutation_hurts_color_histogram():
    img = render(Scene((SceneObject((1, 1), "square", "yellow", "large"),
                        SceneObject((2, 3), "circle", "magenta", "small"))))
    perm = img[..., [2, 0, 1]]
    rep = unified_score(img, perm)
    assert rep.scores["cell-hist"] < 100
    assert rep.scores["cell-hist"] < rep.scores["pix-down"]


def test_score_decreases_with_noise(ds):
    src = ds.images("eval")[3]
    levels = [0.05, 0.1, 0.2, 0.35, 0.5]
    means = []
    for j, lvl in enumerate(levels):
        rng = SeededRng(0, (j,))
        noisy = [np.clip(src + rng.uniform(src.shape) * 2 * lvl - lvl, 0, 1).astype(np.float32) for _ in range(100)]
        means.append(np.mean(reward(np.repeat(src[None], 100, 0), np.stack(noisy))))
    assert spearmanr(levels, means).correlation < -0.9


def test_reward_scale(ds):
    X = ds.images("eval")[:4]
    np.testing.assert_allclose(reward(X, X), 1.0, atol=1e-8)
    r = reward(X, X[::-1], backbone="cell-hist")
    assert r.shape == (4,) and np.all(r <= 1)


def test_judge_examples():
    a = SceneObject((0, 0), "circle", "red", "small")
    b = SceneObject((2, 1), "square", "blue", "large")
    s = Scene((a, b))
    rep = judge_caption(canonical_caption(s), s)
    assert (rep.precision, rep.recall, rep.f1) == (1.0, 1.0, 1.0)
    assert judge_caption([BOS, EOS], s).f1 == 0.0
    wrong = Scene((a, SceneObject((2, 1), "square", "green", "large")))
    rep = judge_caption(canonical_caption(wrong), s)
    assert isinstance(rep, CaptionQualityReport)
    assert (rep.truth, rep.asserted, rep.correct) == (8, 8, 7)
    assert rep.precision == rep.recall == 7 / 8


def test_judge_f1_one_iff_exact(ds):
    for s in ds.scenes("eval"):
        cap = canonical_caption(s)
        assert judge_caption(cap, s).f1 == 1.0
        for i in range(1, len(cap) - 1):
            bad = cap[:i] + cap[i + 1:]
            assert (judge_caption(bad, s).f1 == 1.0) == (parse_caption(bad).scene == s)


def test_single_token_corruption_never_helps():
    s = Scene((SceneObject((3, 2), "triangle", "yellow", "small"),))
    cap = canonical_caption(s)
    base = judge_caption(cap, s).f1
    for i in range(len(cap)):
        for v in range(34):
            bad = list(cap)
            bad[i] = v
            assert judge_caption(bad, s).f1 <= base


class _Fixed:
    def __init__(self, caps):
        self.caps = caps

    def predict(self, images):
        return self.caps


def test_win_rates(ds):
    scenes = ds.scenes("eval")
    oracle = [canonical_caption(s) for s in scenes]
    empty = [[BOS, EOS] for _ in scenes]
    noisy = [c[:-2] + [EOS] for c in oracle]
    assert pairwise_win_rate(oracle, oracle, scenes) == 50.0
    assert pairwise_win_rate(_Fixed(oracle), _Fixed(empty), scenes) == 100.0
    ab, ba = pairwise_win_rate(oracle, noisy, scenes), pairwise_win_rate(noisy, oracle, scenes)
    assert abs(ab + ba - 100) < 1e-9
    with pytest.raises(InputError):
        pairwise_win_rate(oracle[:3], oracle, scenes)


def test_protocol1_oracle_and_baseline(ds):
    X, scenes = ds.images("eval"), ds.scenes("eval")
    lookup = {x.tobytes(): s for x, s in zip(X, scenes)}
    caption = lambda ims: [canonical_caption(lookup[x.tobytes()]) for x in ims]
    reconstruct = lambda caps: np.stack([render(parse_caption(c).scene) for c in caps])
    rep = protocol1_eval(caption, reconstruct, X, scenes)
    assert abs(rep.overall - 100) < 1e-6
    assert all(r["caption_f1"] == 1.0 for r in rep.per_scene)
    blank = protocol1_eval(lambda ims: [[BOS, EOS]] * len(ims), reconstruct, X)
    assert np.isfinite(blank.overall) and blank.overall < rep.overall - 5
    again = protocol1_eval(lambda ims: [[BOS, EOS]] * len(ims), reconstruct, X)
    assert again.scores == blank.scores
    assert "overall" in rep.table()
