import numpy as np
import pytest

from stutterlab.corpus import CorpusSpec, generate_corpus
from stutterlab.errors import ValidationError
from stutterlab.evaluate import (EvalOptions, Report, cer, evaluate, f1_per_class, levenshtein,
                                 pooled_features, sed_variant_f1, train_sed_variant)
from stutterlab.model import System
from stutterlab.sed import FocalParams
from stutterlab.train import TrainConfig, train
from tests.test_train import tiny_model_config


@pytest.fixture(scope="module")
def tiny_system():
    spec = CorpusSpec(n_utterances=40, alphabet_size=6, seed=31)
    corpus = generate_corpus(spec)
    system = System(tiny_model_config(spec.alphabet), seed=13)
    state = train(system, corpus[:30], TrainConfig(max_steps=6, batch_size=3, seed=13,
                                                   phase_a_frac=0.5))
    return spec, corpus, state


# --- CER ---------------------------------------------------------------------


def test_cer_examples():
    assert cer("abc", "abc") == 0.0
    assert abs(cer("abc", "abd") - 1 / 3) < 1e-12
    assert cer("ab", "") == 1.0
    assert cer("", "") == 0.0
    assert cer("", "xy") == 1.0  # empty-reference convention


def test_levenshtein_metric_properties():
    rng = np.random.default_rng(0)
    words = ["".join(rng.choice(list("abc"), size=rng.integers(0, 8))) for _ in range(12)]
    for a in words:
        assert levenshtein(a, a) == 0
        for b in words:
            assert levenshtein(a, b) == levenshtein(b, a)
            assert levenshtein(a, b) <= max(len(a), len(b))


# --- F1 ----------------------------------------------------------------------


def test_f1_perfect_prediction():
    y = np.array([[1, 0, 1, 0, 0], [0, 1, 0, 0, 1]])
    scores, flags = f1_per_class(y, y)
    for k in ("/p", "/b", "/r", "/i"):
        assert scores[k] == 1.0
    assert scores["[]"] == 0.0 and flags["[]"]  # never predicted, never true


def test_f1_formula_case():
    # class 0: TP=1, FP=1, FN=1 -> F1 = 0.5
    preds = np.array([[1, 0, 0, 0, 0], [1, 0, 0, 0, 0], [0, 0, 0, 0, 0]])
    trues = np.array([[1, 0, 0, 0, 0], [0, 0, 0, 0, 0], [1, 0, 0, 0, 0]])
    scores, flags = f1_per_class(preds, trues)
    assert scores["/p"] == 0.5
    assert not flags["/p"]


def test_f1_macro_is_unweighted_mean_and_reorder_invariant():
    rng = np.random.default_rng(1)
    preds = (rng.random((20, 5)) < 0.4).astype(int)
    trues = (rng.random((20, 5)) < 0.4).astype(int)
    scores, _ = f1_per_class(preds, trues)
    assert scores["avg"] == pytest.approx(
        np.mean([scores[k] for k in ("/p", "/b", "/r", "[]", "/i")]))
    perm = rng.permutation(20)
    scores2, _ = f1_per_class(preds[perm], trues[perm])
    assert scores == scores2


# --- evaluate ------------------------------------------------------------------


def test_oracle_decode_gives_zero_cer_everywhere(tiny_system):
    spec, corpus, state = tiny_system
    report = evaluate(state, corpus[30:], EvalOptions(),
                      decode_fn=lambda utt, hyp: utt.fluent_text)
    for cell, value in report.cer.items():
        if report.cer_counts[cell]:
            assert value == 0.0


def test_report_cells_partition(tiny_system):
    spec, corpus, state = tiny_system
    report = evaluate(state, corpus[30:], EvalOptions(),
                      decode_fn=lambda utt, hyp: hyp)
    c = report.cer_counts
    assert c["mild"] + c["moderate"] + c["severe"] == c["all"]
    assert c["conversation"] + c["command"] == c["all"]
    assert report.n_utterances == c["all"] == 10


def test_micro_cer_is_distance_sum_over_length_sum(tiny_system):
    spec, corpus, state = tiny_system
    subset = corpus[30:34]
    fixed = {u.id: (u.fluent_text[:-1] if len(u.fluent_text) > 4 else u.fluent_text)
             for u in subset}
    report = evaluate(state, subset, EvalOptions(), decode_fn=lambda u, h: fixed[u.id])
    dist = sum(levenshtein(u.fluent_text, fixed[u.id]) for u in subset)
    total = sum(len(u.fluent_text) for u in subset)
    assert report.cer["all"] == pytest.approx(100.0 * dist / total)
    # micro-average differs from the mean of per-utterance rates in general
    per_utt = [levenshtein(u.fluent_text, fixed[u.id]) / len(u.fluent_text) for u in subset]
    if len({len(u.fluent_text) for u in subset}) > 1:
        assert report.cer["all"] != pytest.approx(100.0 * np.mean(per_utt))


def test_vocabulary_mismatch_rejected(tiny_system):
    spec, corpus, state = tiny_system
    big_spec = CorpusSpec(n_utterances=3, alphabet_size=16, seed=1)
    foreign = generate_corpus(big_spec)
    with pytest.raises(ValidationError) as err:
        evaluate(state, foreign, EvalOptions(), decode_fn=lambda u, h: h)
    assert "vocabulary" in str(err.value)


def test_report_json_and_text_rendering(tiny_system):
    spec, corpus, state = tiny_system
    report = evaluate(state, corpus[30:], EvalOptions(), decode_fn=lambda u, h: u.fluent_text)
    doc = report.to_json_dict()
    assert set(doc) == {"cer_percent", "cer_counts", "f1_percent",
                        "f1_zero_division_flags", "n_utterances", "options",
                        "paper_reference"}
    assert doc["paper_reference"] == {"cer_all_percent": 5.45, "f1_avg_percent": 73.63}
    text = report.render_text()
    assert "CER (%)" in text and "F1 (%)" in text and "5.45" in text


def test_empty_corpus_rejected(tiny_system):
    spec, corpus, state = tiny_system
    with pytest.raises(ValidationError):
        evaluate(state, [], EvalOptions())


# --- SED variant harness ---------------------------------------------------------


def test_sed_variant_harness_runs_and_scores(tiny_system):
    spec, corpus, state = tiny_system
    system = state.system
    feats = pooled_features(system, corpus[:8])
    assert feats.shape == (8, system.cfg.encoder.dim)
    head = train_sed_variant(system, corpus[:20], FocalParams(), delta=0.3, tau=0.1,
                             steps=5, batch_size=8, seed=3)
    scores, flags = sed_variant_f1(system, head, corpus[20:30])
    assert set(scores) == {"/p", "/b", "/r", "[]", "/i", "avg"}
    assert all(0.0 <= v <= 1.0 for v in scores.values())
