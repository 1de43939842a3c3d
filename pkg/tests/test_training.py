"""Training objectives: DSM analytics, augmentation behavior, classifier
training properties, and the entropy sweep."""

import numpy as np
import pytest

from diffuselab import gmm, training
from diffuselab.classifiers import PlainClassifier, default_classifier_spec
from diffuselab.errors import ConfigurationError, TrainingDiverged
from diffuselab.gmm import LabeledExample, bayes_classify, sample_dataset_stratified
from diffuselab.nnet import MLP, init_params
from diffuselab.training import DiffAugConfig, make_diffaug, make_diffaug_batch


def test_diffaug_config_validation():
    with pytest.raises(ConfigurationError):
        DiffAugConfig(t_range=(0.5, 0.5))
    with pytest.raises(ConfigurationError):
        DiffAugConfig(combine_weight=1.5)
    assert DiffAugConfig().combine_weight == 0.5


def test_zero_network_dsm_loss_is_dimension(canonical, ve):
    """A zero-output score head leaves the pure-noise term: E||eps||^2 = d."""
    from diffuselab.scores import default_score_spec

    spec = default_score_spec(dim=2)
    net = MLP(spec, np.zeros(spec.n_params()))
    rng = np.random.default_rng(0)
    x0 = gmm.sample_dataset(canonical, 20_000, rng).x
    t = rng.uniform(0, 1, 20_000)
    eps = rng.standard_normal((20_000, 2))
    from diffuselab.nnet import time_embedding

    x = np.asarray(ve.mean_coeff(t))[:, None] * x0 + np.asarray(ve.sigma(t))[:, None] * eps
    r = net.forward((x, time_embedding(t, 32)))
    loss = np.mean(np.sum((r + eps) ** 2, axis=1))
    assert loss == pytest.approx(2.0, abs=0.05)


def test_train_score_deterministic(canonical, ve):
    a, _ = training.train_score(canonical, ve, steps=60, rng=np.random.default_rng(5))
    b, _ = training.train_score(canonical, ve, steps=60, rng=np.random.default_rng(5))
    assert np.array_equal(a.net.params, b.net.params)


def test_make_diffaug_near_identity_at_tiny_times(canonical, ve, analytic_score):
    cfg = DiffAugConfig(t_range=(0.0, 1e-3))
    rng = np.random.default_rng(1)
    x0 = gmm.sample_dataset(canonical, 2000, rng).x
    aug = make_diffaug_batch(x0, ve, analytic_score, cfg, rng)
    dist = np.linalg.norm(aug - x0, axis=1)
    assert np.mean(dist < 0.05) >= 0.99


def test_make_diffaug_label_noise_at_late_times(canonical, ve, analytic_score):
    """Late-time augmentations stop preserving the class label."""
    cfg = DiffAugConfig(t_range=(0.9, 1.0))
    rng = np.random.default_rng(2)
    ds = gmm.sample_dataset(canonical, 2000, rng)
    aug = make_diffaug_batch(ds.x, ve, analytic_score, cfg, rng)
    lab, _ = bayes_classify(canonical, aug)
    assert np.mean(lab != ds.y) >= 0.20


def test_make_diffaug_deterministic(canonical, ve, analytic_score):
    ex = LabeledExample(np.array([1.0, 0.5]), 1)
    cfg = DiffAugConfig()
    a = make_diffaug(ex, ve, analytic_score, cfg, np.random.default_rng(3))
    b = make_diffaug(ex, ve, analytic_score, cfg, np.random.default_rng(3))
    assert np.array_equal(a.x0, b.x0)
    assert a.y == ex.y


def test_label_noise_fraction_monotone_in_time(canonical, ve, analytic_score):
    """Bayes-referee label-flip rate never decreases along the time axis."""
    rng = np.random.default_rng(4)
    ds = gmm.sample_dataset(canonical, 4000, rng)
    cfg = DiffAugConfig()
    flips = []
    for t in (0.05, 0.25, 0.45, 0.65, 0.85):
        aug = make_diffaug_batch(ds.x, ve, analytic_score, cfg, rng, t_fixed=t)
        lab, _ = bayes_classify(canonical, aug)
        flips.append(np.mean(lab != ds.y))
    assert all(b >= a - 0.01 for a, b in zip(flips, flips[1:]))  # small MC slack
    assert flips[-1] > flips[0]


def test_baseline_classifier_near_bayes(canonical, ve, baseline_classifier, test_data):
    bayes_acc = np.mean(bayes_classify(canonical, test_data.x)[0] == test_data.y)
    clf_acc = np.mean(baseline_classifier.predict(test_data.x) == test_data.y)
    assert clf_acc >= bayes_acc - 0.02


def test_bayes_referee_is_best(canonical, test_data, baseline_classifier, diffaug_classifier):
    """No trained classifier beats the exact posterior rule on clean fixture data."""
    bayes_acc = np.mean(bayes_classify(canonical, test_data.x)[0] == test_data.y)
    for clf in (baseline_classifier, diffaug_classifier):
        assert np.mean(clf.predict(test_data.x) == test_data.y) <= bayes_acc + 1e-9


def test_combine_weight_one_matches_baseline(train_data, ve, analytic_score):
    base, trace_base = training.train_classifier(
        train_data, ve, steps=300, rng=np.random.default_rng(9)
    )
    combo, trace_combo = training.train_classifier(
        train_data, ve, score=analytic_score, config=DiffAugConfig(combine_weight=1.0),
        steps=300, rng=np.random.default_rng(9),
    )
    assert np.array_equal(base.net.params, combo.net.params)
    assert [r["loss"] for r in trace_base] == [r["loss"] for r in trace_combo]


def test_loss_decomposition_identity(train_data, ve, analytic_score):
    """Logged total loss is exactly the configured convex combination."""
    cfg = DiffAugConfig(combine_weight=0.5)
    _, trace = training.train_classifier(
        train_data, ve, score=analytic_score, config=cfg, steps=120,
        rng=np.random.default_rng(10), trace_every=10,
    )
    for row in trace:
        combo = cfg.combine_weight * row["loss_orig"] + (1 - cfg.combine_weight) * row["loss_aug"]
        assert abs(row["loss"] - combo) < 1e-12


def test_diffaug_training_requires_score(train_data, ve):
    with pytest.raises(ConfigurationError):
        training.train_classifier(train_data, ve, config=DiffAugConfig(), steps=10)


def test_classifier_training_deterministic(train_data, ve, analytic_score):
    kw = dict(score=analytic_score, config=DiffAugConfig(), steps=200)
    a, _ = training.train_classifier(train_data, ve, rng=np.random.default_rng(11), **kw)
    b, _ = training.train_classifier(train_data, ve, rng=np.random.default_rng(11), **kw)
    assert np.array_equal(a.net.params, b.net.params)


def test_divergence_guard_aborts(canonical, ve):
    with pytest.raises(TrainingDiverged):
        training.train_score(canonical, ve, steps=1200, lr=1e5, rng=np.random.default_rng(12))


def test_divergence_guard_streak_semantics():
    guard = training._DivergenceGuard()
    guard.check(1.0, [])
    for _ in range(training.DIVERGENCE_PATIENCE - 1):
        guard.check(100.0, [])
    guard.check(1.0, [])  # a single good step resets the streak
    for _ in range(training.DIVERGENCE_PATIENCE - 1):
        guard.check(100.0, [])
    with pytest.raises(TrainingDiverged):
        guard.check(100.0, [])
    with pytest.raises(TrainingDiverged):
        training._DivergenceGuard().check(float("nan"), [])


@pytest.fixture(scope="module")
def guidance_models(train_data, ve, analytic_score):
    noisy, _ = training.train_noisy_guidance(train_data, ve, steps=4000, rng=np.random.default_rng(31))
    da, _ = training.train_da_guidance(
        train_data, ve, analytic_score, steps=4000, rng=np.random.default_rng(31)
    )
    return noisy, da


def test_noisy_guidance_accuracy_profile(canonical, ve, guidance_models, baseline_classifier, test_data):
    noisy, _ = guidance_models
    # near t=0 the classifier sees effectively clean data
    p = noisy.predict_proba(test_data.x, np.full(len(test_data), 1e-3))
    acc0 = np.mean(np.argmax(p, axis=1) == test_data.y)
    base = np.mean(baseline_classifier.predict(test_data.x) == test_data.y)
    assert acc0 >= base - 0.03

    # at t=1 the input carries no class signal: balanced accuracy is capped at chance
    bal = sample_dataset_stratified(canonical, 1500, np.random.default_rng(32))
    rng = np.random.default_rng(33)
    x1 = np.asarray(ve.mean_coeff(1.0)) * bal.x + float(ve.sigma(1.0)) * rng.standard_normal(bal.x.shape)
    p1 = noisy.predict_proba(x1, np.ones(len(bal)))
    acc1 = np.mean(np.argmax(p1, axis=1) == bal.y)
    assert acc1 <= 1 / 3 + 0.05

    # averaged over uniformly drawn times the classifier clearly beats chance
    tt = np.random.default_rng(34).uniform(0, 1, len(bal))
    from diffuselab.sde import forward_diffuse_batch

    xt = forward_diffuse_batch(ve, bal.x, tt, np.random.default_rng(35))
    pt = noisy.predict_proba(xt, tt)
    assert np.mean(np.argmax(pt, axis=1) == bal.y) > 1 / 3 + 0.05


def test_da_guidance_small_noise_limit(ve, guidance_models, baseline_classifier, test_data, analytic_score):
    _, da = guidance_models
    tcol = np.full(len(test_data), 1e-3)
    from diffuselab.sde import denoise_onestep_batch

    _, x0s = denoise_onestep_batch(ve, analytic_score, test_data.x, tcol)
    p = da.predict_proba(test_data.x, x0s, tcol)
    acc = np.mean(np.argmax(p, axis=1) == test_data.y)
    base = np.mean(baseline_classifier.predict(test_data.x) == test_data.y)
    assert acc >= base - 0.03


def test_entropy_curve_uniform_classifier(canonical, ve, analytic_score, test_data):
    spec = default_classifier_spec("plain", 2, 3)
    params = init_params(spec)
    n_out = spec.hidden[-1] * spec.output_dim + spec.output_dim
    params[-n_out:] = 0.0
    uniform_clf = PlainClassifier(MLP(spec, params))
    curve = training.entropy_curve(
        uniform_clf, test_data[:200], ve, analytic_score, [0.0, 0.5, 0.9],
        np.random.default_rng(40),
    )
    for _, h in curve:
        assert h == pytest.approx(np.log(3), abs=1e-12)


def test_entropy_curve_grid_must_be_sorted(ve, analytic_score, test_data, baseline_classifier):
    with pytest.raises(ConfigurationError):
        training.entropy_curve(
            baseline_classifier, test_data[:10], ve, analytic_score, [0.5, 0.1],
            np.random.default_rng(0),
        )


def test_trainers_emit_wall_time(train_data, ve):
    _, trace = training.train_classifier(train_data, ve, steps=60, rng=np.random.default_rng(50))
    assert all("wall_s" in row for row in trace)
    assert trace[-1]["wall_s"] >= trace[0]["wall_s"]
