import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npalert.backends import StubBackend, load_prompt
from npalert.filtering import (
    DescriptorNotFound,
    EvalMetrics,
    ExampleOrigin,
    FilterError,
    Label,
    LabeledExample,
    MeshTree,
    SingleClassCorpus,
    build_mesh_activity_corpus,
    build_pseudo_label_corpus,
    classify,
    evaluate,
    load_model,
    save_model,
    stratified_split,
    tokenize,
    train,
)
from npalert.literature import Document, DocumentRef

from conftest import write_stub_script


def ex(text, label):
    return LabeledExample(text=text, label=label)


# Two six-token documents with disjoint vocabularies and alpha = 0.5. With
# counts normalised to the vocabulary size V=12, a token seen only in its own
# class has likelihood ratio (12 * (1/6) + 0.5) / 0.5 = 5, so the posterior
# for a training document is 5^6 / (5^6 + 1) = 15625/15626.
SEPARABLE = [
    ex("aaa bbb ccc ddd eee fff", Label.POSITIVE),
    ex("ggg hhh iii jjj kkk lll", Label.NEGATIVE),
]


class TestTokenize:
    def test_hyphenated(self):
        assert tokenize("Anti-Bacterial Agents") == ["anti", "bacterial", "agents"]

    def test_empty(self):
        assert tokenize("") == []

    def test_alphanumeric_kept(self):
        assert tokenize("IC50 values") == ["ic50", "values"]

    def test_short_tokens_dropped(self):
        assert tokenize("a an and") == ["an", "and"]


class TestTrain:
    def test_separable_two_doc_corpus(self):
        model = train(SEPARABLE, alpha=0.5)
        for example in SEPARABLE:
            label, _ = classify(model, example.text)
            assert label is example.label

    def test_balanced_priors(self):
        model = train(SEPARABLE, alpha=1.0)
        priors = list(model.class_log_priors.values())
        assert priors[0] == pytest.approx(priors[1])
        assert math.exp(priors[0]) == pytest.approx(0.5)

    def test_alpha_zero_rejected(self):
        with pytest.raises(ValueError):
            train(SEPARABLE, alpha=0.0)

    def test_single_class_rejected(self):
        with pytest.raises(SingleClassCorpus):
            train([ex("aaa", Label.POSITIVE)], alpha=1.0)


class TestClassify:
    def test_training_doc_posterior(self):
        model = train(SEPARABLE, alpha=0.5)
        _, posterior = classify(model, SEPARABLE[0].text)
        assert posterior == pytest.approx(15625 / 15626, abs=1e-12)
        assert posterior > 0.99

    def test_empty_text_prior_only(self):
        model = train(SEPARABLE + [ex("mmm nnn ooo ppp qqq rrr", Label.POSITIVE)], alpha=1.0)
        _, posterior = classify(model, "")
        assert posterior == pytest.approx(2 / 3)

    def test_unseen_tokens_ignored(self):
        model = train(SEPARABLE, alpha=0.5)
        _, posterior = classify(model, "zzz yyy xxx")
        assert posterior == pytest.approx(0.5)

    def test_duplication_invariance(self):
        model_once = train(SEPARABLE, alpha=0.5)
        model_twice = train(SEPARABLE + SEPARABLE, alpha=0.5)
        for text in ("aaa bbb", "ggg", "aaa ggg hhh", ""):
            _, p1 = classify(model_once, text)
            _, p2 = classify(model_twice, text)
            assert p1 == pytest.approx(p2, abs=1e-12)

    def test_threshold_monotonicity(self):
        model = train(SEPARABLE, alpha=0.5)
        texts = ["aaa bbb", "ggg hhh", "aaa ggg", ""]
        previous = None
        for threshold in (0.1, 0.3, 0.5, 0.7, 0.9):
            model.threshold = threshold
            positives = {t for t in texts if classify(model, t)[0] is Label.POSITIVE}
            if previous is not None:
                assert positives <= previous
            previous = positives


class TestEvaluate:
    def test_perfect_classifier(self):
        model = train(SEPARABLE, alpha=0.5)
        metrics = evaluate(model, SEPARABLE)
        assert (metrics.recall, metrics.precision, metrics.f1, metrics.f2) == (1, 1, 1, 1)

    def test_all_positive_predictor(self):
        # Force every prediction positive via a zero threshold.
        model = train(SEPARABLE, alpha=0.5, threshold=0.0)
        heldout = [ex("aaa bbb", Label.POSITIVE), ex("zzz unseen", Label.NEGATIVE)]
        metrics = evaluate(model, heldout)
        assert metrics.recall == 1.0
        assert metrics.precision == 0.5
        assert metrics.f1 == pytest.approx(2 / 3)

    def test_empty_heldout_rejected(self):
        model = train(SEPARABLE, alpha=0.5)
        with pytest.raises(ValueError):
            evaluate(model, [])

    @given(st.tuples(st.integers(0, 500), st.integers(0, 500),
                     st.integers(0, 500), st.integers(0, 500)))
    @settings(max_examples=100)
    def test_f_scores_match_brute_force(self, counts):
        tp, fp, tn, fn = counts
        metrics = EvalMetrics(tp, fp, tn, fn)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        beta2 = 4.0
        f2 = ((1 + beta2) * precision * recall / (beta2 * precision + recall)
              if beta2 * precision + recall else 0.0)
        assert abs(metrics.f1 - f1) < 1e-12
        assert abs(metrics.f2 - f2) < 1e-12


def make_noisy_corpus(n=1000, noise=0.1, seed=13):
    """Separable corpus with a planted keyword per class and noisy labels."""
    rng = random.Random(seed)
    filler = [f"word{i}" for i in range(50)]
    corpus = []
    for i in range(n):
        true_positive = i % 2 == 0
        keyword = "inhibition" if true_positive else "ecology"
        words = [keyword] + rng.sample(filler, 8)
        rng.shuffle(words)
        label = Label.POSITIVE if true_positive else Label.NEGATIVE
        if rng.random() < noise:
            label = Label.NEGATIVE if label is Label.POSITIVE else Label.POSITIVE
        corpus.append(ex(" ".join(words), label))
    return corpus


def test_noisy_separable_corpus_f1():
    corpus = make_noisy_corpus()
    train_set, heldout = stratified_split(corpus, heldout_fraction=0.2, seed=13)
    model = train(train_set, alpha=1.0, split_seed=13)
    metrics = evaluate(model, heldout)
    assert metrics.f1 >= 0.9


MESH_TREE_LINES = "\n".join([
    "D000900\tD27.505.954.122.085",          # the anti-bacterial agents concept
    "D047090\tD27.505.954.122.085.200",      # a narrower descriptor
    "D000890\tD27.505.954.122",              # a broader one
    "D005839\tN06.230",                      # unrelated
])


def doc(pmid, title, mesh):
    return Document(ref=DocumentRef(pmid=pmid), title=title, abstract="some text",
                    mesh_terms=mesh)


class TestMeshCorpus:
    @pytest.fixture
    def tree(self, tmp_path):
        path = tmp_path / "mesh.tsv"
        path.write_text(MESH_TREE_LINES + "\n", encoding="utf-8")
        return MeshTree.load(path)

    def test_descendant_is_positive(self, tree):
        docs = [doc(1, "narrower", ["D047090"]), doc(2, "unrelated", ["D005839"])]
        corpus = build_mesh_activity_corpus(docs, tree, "D000900")
        labels = {e.text.split()[0]: e.label for e in corpus}
        assert labels["narrower"] is Label.POSITIVE
        assert labels["unrelated"] is Label.NEGATIVE

    def test_exact_match_is_positive(self, tree):
        corpus = build_mesh_activity_corpus([doc(1, "exact", ["D000900"])], tree, "D000900")
        assert corpus[0].label is Label.POSITIVE

    def test_broader_is_negative(self, tree):
        corpus = build_mesh_activity_corpus([doc(1, "broader", ["D000890"])], tree, "D000900")
        assert corpus[0].label is Label.NEGATIVE

    def test_no_mesh_terms_negative(self, tree):
        corpus = build_mesh_activity_corpus([doc(1, "bare", [])], tree, "D000900")
        assert corpus[0].label is Label.NEGATIVE

    def test_unknown_descriptor(self, tree):
        with pytest.raises(DescriptorNotFound):
            build_mesh_activity_corpus([doc(1, "x", [])], tree, "D999999")

    def test_resample_larger_than_available(self, tree):
        docs = [doc(1, "pos", ["D000900"]), doc(2, "neg", [])]
        with pytest.raises(FilterError, match="1 positives"):
            build_mesh_activity_corpus(docs, tree, "D000900", per_class=5)

    def test_resample_counts(self, tree):
        docs = [doc(i + 1, f"pos{i}", ["D000900"]) for i in range(5)]
        docs += [doc(i + 11, f"neg{i}", []) for i in range(5)]
        corpus = build_mesh_activity_corpus(docs, tree, "D000900", per_class=3, seed=1)
        assert sum(e.label is Label.POSITIVE for e in corpus) == 3
        assert sum(e.label is Label.NEGATIVE for e in corpus) == 3
        assert all(e.origin is ExampleOrigin.MESH_DERIVED for e in corpus)


class TestPseudoLabels:
    def test_scripted_yes_no(self, tmp_path):
        script = write_stub_script(tmp_path / "s.json", [
            {"pattern": "isolated compound", "response": "yes"},
            {"pattern": "ecology survey", "response": "No."},
        ])
        backend = StubBackend(script)
        docs = [
            Document(ref=DocumentRef(pmid=1), title="isolated compound report"),
            Document(ref=DocumentRef(pmid=2), title="ecology survey notes"),
        ]
        result = build_pseudo_label_corpus(docs, backend, load_prompt("pseudo_label"))
        assert [e.label for e in result.examples] == [Label.POSITIVE, Label.NEGATIVE]
        assert result.skipped == 0
        assert all(e.origin is ExampleOrigin.PSEUDO_LABEL for e in result.examples)

    def test_garbage_answer_skipped(self, tmp_path):
        script = write_stub_script(tmp_path / "s.json", [], default="perhaps, who knows")
        backend = StubBackend(script)
        docs = [Document(ref=DocumentRef(pmid=1), title="anything")]
        result = build_pseudo_label_corpus(docs, backend, load_prompt("pseudo_label"))
        assert result.examples == []
        assert result.skipped == 1

    def test_alternating(self, tmp_path):
        script = write_stub_script(tmp_path / "s.json", [
            {"pattern": "even", "response": "yes"},
            {"pattern": "odd", "response": "no"},
        ])
        backend = StubBackend(script)
        docs = [Document(ref=DocumentRef(pmid=i + 1),
                         title=f"abstract {'even' if i % 2 == 0 else 'odd'} {i}")
                for i in range(10)]
        result = build_pseudo_label_corpus(docs, backend, load_prompt("pseudo_label"))
        assert sum(e.label is Label.POSITIVE for e in result.examples) == 5
        assert sum(e.label is Label.NEGATIVE for e in result.examples) == 5


class TestModelArtifact:
    def test_round_trip(self, tmp_path):
        model = train(SEPARABLE, alpha=0.5, threshold=0.3, split_seed=42)
        path = tmp_path / "model.nb"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.smoothing_alpha == 0.5
        assert loaded.threshold == 0.3
        assert loaded.split_seed == 42
        for text in ("aaa bbb", "ggg", "aaa ggg zzz"):
            assert classify(loaded, text) == classify(model, text)

    def test_version_check(self, tmp_path):
        path = tmp_path / "model.nb"
        path.write_text("format\tsomething-else/9\n", encoding="utf-8")
        with pytest.raises(FilterError, match="format"):
            load_model(path)
