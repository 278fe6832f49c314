import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from scclab import datasets, graph, net, train
from scclab.estimators import GraphLabelSmoother, SccClassifier, SigmoidMlpClassifier


def toy_problem(seed=0, noise=0.3):
    clean, test = datasets.generate_train_test(3, 50, 30, 8, 0.35, seed)
    noisy = datasets.inject_noise(clean, "uniform", noise, seed=seed + 1)
    return noisy.features, noisy.web_labels, test.features, test.true_labels


FAST = dict(epochs=8, warmup_epochs=2, hidden_units=24, random_state=1)
FAST_TWO_STAGE = dict(pretrain_epochs=8, finetune_epochs=8, warmup_epochs=2,
                      hidden_units=24, random_state=1)


def test_mlp_classifier_fit_predict_shapes():
    x, y, xt, yt = toy_problem()
    clf = SigmoidMlpClassifier(**FAST).fit(x, y)
    probs = clf.predict_proba(xt)
    assert probs.shape == (len(xt), 3)
    assert np.all((probs > 0) & (probs < 1))
    preds = clf.predict(xt)
    assert set(np.unique(preds)) <= {0, 1, 2}
    assert clf.score(xt, yt) > 0.5


def test_mlp_classifier_respects_label_values():
    x, y, xt, _ = toy_problem()
    shifted = y * 10 + 5  # labels 5, 15, 25
    clf = SigmoidMlpClassifier(**FAST).fit(x, shifted)
    assert clf.classes_.tolist() == [5, 15, 25]
    assert set(np.unique(clf.predict(xt))) <= {5, 15, 25}


def test_mlp_classifier_unfitted_raises():
    with pytest.raises(NotFittedError):
        SigmoidMlpClassifier().predict(np.zeros((2, 3)))


def test_mlp_classifier_clone_and_params_roundtrip():
    clf = SigmoidMlpClassifier(regularizer="mixup", mixup_alpha=0.4, random_state=7)
    params = clf.get_params()
    assert params["regularizer"] == "mixup"
    cloned = clone(clf)
    assert cloned.get_params() == params
    cloned.set_params(epochs=3)
    assert cloned.epochs == 3 and clf.epochs != 3


def test_mlp_classifier_matches_functional_pretrain():
    x, y, _, _ = toy_problem(seed=3)
    clf = SigmoidMlpClassifier(**FAST).fit(x, y)
    ds = datasets.SyntheticDataset(
        features=x, web_labels=y, true_labels=y.copy(),
        ids=np.arange(len(y)), num_classes=3,
    )
    config = train.TrainConfig(epochs=8, warmup_epochs=2, hidden_units=24, seed=1)
    direct = train.pretrain(ds, config)
    assert clf.models_[0] == direct.model
    assert np.array_equal(clf.predict_proba(x), net.forward(direct.model, x))


def test_mlp_classifier_determinism_and_ensemble():
    x, y, _, _ = toy_problem(seed=4)
    a = SigmoidMlpClassifier(regularizer="ensemble", ensemble_size=3, epochs=4,
                             warmup_epochs=1, hidden_units=16, random_state=2).fit(x, y)
    b = SigmoidMlpClassifier(regularizer="ensemble", ensemble_size=3, epochs=4,
                             warmup_epochs=1, hidden_units=16, random_state=2).fit(x, y)
    assert len(a.models_) == 3
    assert all(m1 == m2 for m1, m2 in zip(a.models_, b.models_))
    assert a.hidden_features(x).shape == (len(x), 16)


def test_scc_classifier_end_to_end():
    x, y, xt, yt = toy_problem(seed=5)
    clf = SccClassifier(**FAST_TWO_STAGE).fit(x, y)
    assert clf.confidence_.shape == (len(x),)
    assert np.all((clf.confidence_ >= 0) & (clf.confidence_ <= 1))
    assert clf.self_labels_.shape == (len(x), 3)
    assert clf.predict(xt).shape == (len(xt),)
    assert np.mean(clf.predict(xt) == yt) > 0.5


def test_scc_classifier_matches_manual_pipeline():
    x, y, _, _ = toy_problem(seed=6)
    clf = SccClassifier(**FAST_TWO_STAGE).fit(x, y)
    ds = datasets.SyntheticDataset(
        features=x, web_labels=y, true_labels=y.copy(),
        ids=np.arange(len(y)), num_classes=3,
    )
    pre_cfg = train.TrainConfig(epochs=8, warmup_epochs=2, hidden_units=24, seed=1)
    ft_cfg = train.TrainConfig(epochs=8, warmup_epochs=2, hidden_units=24,
                               initial_lr=0.05, seed=1)
    pre = train.pretrain(ds, pre_cfg)
    art = train.extract(ds, pre.models, pre_cfg)
    ft = train.finetune(ds, art, ft_cfg)
    assert clf.model_ == ft.model


def test_scc_classifier_constant_confidence():
    x, y, _, _ = toy_problem(seed=7)
    clf = SccClassifier(constant_confidence=1.0, **FAST_TWO_STAGE).fit(x, y)
    assert clf.model_ is not None
    with pytest.raises(ValueError):
        SccClassifier(constant_confidence=1.5, **FAST_TWO_STAGE).fit(x, y)


def test_scc_classifier_graph_smoothing_path():
    x, y, xt, _ = toy_problem(seed=8)
    clf = SccClassifier(graph_smoothing=True, n_neighbors=5, **FAST_TWO_STAGE).fit(x, y)
    plain = SccClassifier(**FAST_TWO_STAGE).fit(x, y)
    assert not np.array_equal(clf.confidence_, plain.confidence_)
    assert clf.predict(xt).shape == (len(xt),)


def test_graph_label_smoother_matches_functional_core():
    rng = np.random.default_rng(9)
    feats = rng.standard_normal((20, 6))
    labels = rng.uniform(0, 1, (20, 4))
    sm = GraphLabelSmoother(n_neighbors=4, self_loop_weight=0.5).fit(feats)
    out = sm.transform(labels)
    g = graph.build_knn(feats, k=4, lam=0.5)
    assert np.array_equal(out, graph.gba_smooth(g, labels))


def test_graph_label_smoother_unfitted_and_clone():
    sm = GraphLabelSmoother(n_neighbors=3)
    with pytest.raises(NotFittedError):
        sm.transform(np.zeros((4, 2)))
    assert clone(sm).get_params()["n_neighbors"] == 3
