import numpy as np
import pytest
from oracles import composite_gradcheck, confusion_oracle

from hfmf import tensor as T
from hfmf.calibration import PlattParams
from hfmf.config import ModelConfig
from hfmf.dataset import Corpus, CorpusManifest, Split, synth_generate
from hfmf.errors import ConfigurationError, ContractError, DegenerateInputError
from hfmf.fusion import M1Model
from hfmf.pipeline import (EnsembleModel, TrainConfig, accuracy_row, compute_metrics, decide, ensemble_forward,
                           evaluate, format_table, metrics_from_counts, predict_logits, train_ensemble,
                           train_module)
from hfmf.streams import M2Model


@pytest.fixture(scope="module")
def tiny():
    return synth_generate(0, 20)


def blob_corpus(n_per_class=40, seed=0, size=32):
    """Flat-colour images whose colours come from two well-separated Gaussian blobs."""
    rng = np.random.default_rng(seed)
    means = np.array([[0.25, 0.3, 0.7], [0.75, 0.6, 0.3]])
    splits = {}
    for name, n in (("train", n_per_class), ("val", n_per_class // 2), ("test", n_per_class // 2)):
        labels = np.repeat([0, 1], n)
        cols = np.clip(means[labels] + rng.normal(0, 0.04, size=(2 * n, 3)), 0, 1)
        imgs = np.broadcast_to(cols[:, :, None, None], (2 * n, 3, size, size)).copy()
        splits[name] = Split(imgs, labels, [f"{name}{i}" for i in range(2 * n)], [None] * (2 * n))
    return Corpus([], CorpusManifest(seed, size, {}, {}), splits)


# ---------------------------------------------------------------- metrics
def test_all_correct_metrics():
    m = compute_metrics([0, 1, 1, 0], [0, 1, 1, 0])
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)


def test_hand_confusion_case():
    m = metrics_from_counts(3, 1, 4, 2)
    assert m.precision == 0.75 and m.recall == 0.6
    assert m.f1 == pytest.approx(2 / 3, abs=1e-4)
    assert m.accuracy == 0.7


def test_metrics_match_oracle():
    rng = np.random.default_rng(0)
    p, y = rng.integers(0, 2, 1000), rng.integers(0, 2, 1000)
    m = compute_metrics(p, y)
    assert (m.accuracy, m.precision, m.recall, m.f1) == confusion_oracle(p.tolist(), y.tolist())


def test_no_positive_predictions_gives_zero_f1():
    m = compute_metrics([0, 0, 0], [1, 0, 1])
    assert m.precision == 0.0 and m.f1 == 0.0


def test_empty_metrics_rejected():
    with pytest.raises(ContractError):
        metrics_from_counts(0, 0, 0, 0)


def test_decide_ties_go_to_real():
    assert decide(np.array([[1.0, 1.0], [0.0, 2.0], [3.0, -1.0]])).tolist() == [0, 1, 0]


# ---------------------------------------------------------------- config
@pytest.mark.parametrize("kw", [{"max_epochs": 0}, {"early_stop_patience": 0},
                                {"split_fractions": (0.5, 0.3, 0.3)}, {"learning_rate": 0.0}])
def test_train_config_validation(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


# ---------------------------------------------------------------- training loop
def test_patience_contract():
    corpus = blob_corpus()
    val = corpus["val"]
    # validation labels flipped: fitting the training set makes validation loss worse every epoch
    corpus.splits["val"] = Split(val.images, 1 - val.labels, val.ids, val.bboxes)
    cfg = TrainConfig(seed=1, max_epochs=20, early_stop_patience=1, learning_rate=1e-2)
    res = train_module(M1Model(seed=1, variant="cnn_only"), corpus, cfg)
    assert res.epochs_run == 2 and res.best_epoch == 1 and res.stopped_early
    assert res.history[1]["val_loss"] > res.history[0]["val_loss"]
    one = train_module(M1Model(seed=1, variant="cnn_only"), corpus, TrainConfig(seed=1, max_epochs=1,
                                                                                  learning_rate=1e-2))
    for (k, a), (_, b) in zip(res.model.named_parameters(), one.model.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=k)


def test_separable_blobs_learned_within_five_epochs():
    corpus = blob_corpus()
    res = train_module(M1Model(seed=0), corpus, TrainConfig(seed=0, max_epochs=5, batch_size=16))
    assert max(h["val_acc"] for h in res.history) == 1.0


def test_training_is_deterministic(tiny):
    cfg = TrainConfig(seed=3, max_epochs=3)
    a = train_module(M2Model(seed=3), tiny, cfg)
    b = train_module(M2Model(seed=3), tiny, cfg)
    assert a.history == b.history


def test_best_weights_never_worse_than_best_epoch(tiny):
    res = train_module(M1Model(seed=2), tiny, TrainConfig(seed=2, max_epochs=6, early_stop_patience=2))
    best = min(h["val_loss"] for h in res.history)
    assert res.best_val_loss == best
    from hfmf.pipeline import _loss_acc
    loss, _ = _loss_acc(predict_logits(res.model, res.model.prepare(tiny["val"].images)), tiny["val"].labels)
    assert loss == pytest.approx(best, abs=1e-12)


def test_single_class_training_split_rejected(tiny):
    tr = tiny["train"]
    only_real = tr.subset(np.nonzero(tr.labels == 0)[0])
    corpus = Corpus([], tiny.manifest, {**tiny.splits, "train": only_real})
    with pytest.raises(DegenerateInputError):
        train_module(M1Model(seed=0), corpus, TrainConfig(max_epochs=1))


def test_sharded_evaluation_matches_serial(tiny, monkeypatch):
    m = M2Model(seed=0)
    serial = evaluate(m, tiny["train"], workers=1)
    monkeypatch.setenv("HFMF_THREADS", "3")
    assert evaluate(m, tiny["train"]) == serial


# ---------------------------------------------------------------- ensemble
def _passthrough(ens):
    fc1, fc2 = ens.mlp.fc1, ens.mlp.fc2
    W1 = np.zeros((3, fc1.weight.shape[1]))
    W1[1, 0], W1[1, 1], W1[2, 2], W1[2, 3] = 1.0, -1.0, 1.0, -1.0
    W2 = np.zeros((fc1.weight.shape[1], 2))
    W2[0, 0], W2[1, 0], W2[2, 1], W2[3, 1] = 1.0, -1.0, 1.0, -1.0
    fc1.weight.data, fc1.bias.data = W1, np.zeros_like(fc1.bias.data)
    fc2.weight.data, fc2.bias.data = W2, np.zeros_like(fc2.bias.data)


def test_passthrough_ensemble_matches_m2(tiny):
    m1, m2 = M1Model(seed=0), M2Model(seed=1)
    ens = EnsembleModel(m1, m2, PlattParams(1.0, 0.0), seed=2)
    _passthrough(ens)
    imgs = tiny["val"].images
    inputs = ens.prepare(imgs)
    out = predict_logits(ens, inputs)
    assert out.shape == (len(imgs), 2)
    np.testing.assert_array_equal(decide(out), decide(predict_logits(m2, m2.prepare(imgs))))
    assert ensemble_forward(ens, inputs[0][0]).shape == (2,)


def test_gradient_reaches_every_ensemble_parameter():
    ens = EnsembleModel(M1Model(seed=0), M2Model(seed=1), PlattParams(1.0, 0.0), seed=2)
    x = np.random.default_rng(0).normal(size=(8, 3))
    T.cross_entropy(ens(x), np.array([0, 1] * 4)).backward()
    for name, p in ens.named_parameters():
        assert np.linalg.norm(p.grad) > 0, name
    names = [n for n, _ in ens.named_parameters()]
    assert names == ["mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias"]


def test_ensemble_gradients_one_seed():
    ens = EnsembleModel(M1Model(seed=0), M2Model(seed=1), PlattParams(1.3, -0.2), seed=5)
    x = np.random.default_rng(5).normal(size=3)
    rep, expected = composite_gradcheck(lambda t: ensemble_forward(ens, t), x, ens.parameters(), 5, entries=8)
    assert rep.max_rel_error < 1e-4


def test_submodels_frozen_during_ensemble_training(tiny):
    m1, m2 = M1Model(seed=0), M2Model(seed=1)
    before = {k: v.copy() for k, v in {**{f"m1.{k}": v for k, v in m1.state_dict().items()},
                                        **{f"m2.{k}": v for k, v in m2.state_dict().items()}}.items()}
    res = train_ensemble(m1, m2, PlattParams(1.0, 0.0), tiny, TrainConfig(seed=0, max_epochs=3))
    after = {**{f"m1.{k}": v for k, v in m1.state_dict().items()}, **{f"m2.{k}": v for k, v in m2.state_dict().items()}}
    for k in before:
        np.testing.assert_array_equal(before[k], after[k], err_msg=k)
    assert res.epochs_run >= 1


def test_ensemble_training_deterministic(tiny):
    m1, m2 = M1Model(seed=0), M2Model(seed=1)
    cfg = TrainConfig(seed=4, max_epochs=3)
    a = train_ensemble(m1, m2, PlattParams(0.8, 0.1), tiny, cfg)
    b = train_ensemble(m1, m2, PlattParams(0.8, 0.1), tiny, cfg)
    assert a.history == b.history


# ---------------------------------------------------------------- tables
def test_accuracy_row_and_table(tiny):
    row = accuracy_row(M2Model(seed=0), tiny)
    assert set(row) == {"val", "test", "mean"}
    assert row["mean"] == pytest.approx((row["val"] + row["test"]) / 2, abs=1e-15)
    assert all(0.0 <= v <= 1.0 for v in row.values())
    text = format_table("T", {"M2": row}, ["val", "test", "mean"])
    assert text.splitlines()[2].split()[1:] == [f"{100 * row[c]:.2f}%" for c in ("val", "test", "mean")]
