"""Lexical gate classifiers for the two literature filters.

Two multinomial Naive Bayes models gate documents before the expensive
extraction stages: one keeps texts likely to report antibiotic activity,
the other texts likely to report natural-product isolations. Both are
plain bag-of-words models; corpus builders derive labels either from the
MeSH descriptor hierarchy or from LLM pseudo-labels.
"""

from __future__ import annotations

import logging
import math
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Optional, Sequence

if TYPE_CHECKING:
    from .backends import LlmBackend, PromptTemplate
    from .literature import Document

logger = logging.getLogger(__name__)

MODEL_FORMAT = "npalert-nb/1"

_TOKEN_RE = re.compile(r"[^0-9a-z]+")


class FilterError(Exception):
    pass


class SingleClassCorpus(FilterError):
    pass


class DescriptorNotFound(FilterError):
    pass


class Label(str, Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"


class ExampleOrigin(str, Enum):
    MESH_DERIVED = "MeshDerived"
    PSEUDO_LABEL = "PseudoLabel"
    MANUAL = "Manual"


@dataclass(frozen=True)
class LabeledExample:
    text: str
    label: Label
    origin: ExampleOrigin = ExampleOrigin.MANUAL

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("example text must be non-empty")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumeric runs, drop tokens shorter than 2."""
    return [t for t in _TOKEN_RE.split(text.lower()) if len(t) >= 2]


@dataclass
class LexicalModel:
    """Multinomial Naive Bayes over bag-of-words counts.

    ``token_log_likelihoods[label][index]`` is log p(token | label) with
    add-alpha smoothing over the training vocabulary only. ``threshold``
    is the positive-posterior cut for :func:`classify`.
    """

    vocabulary: dict[str, int]
    class_log_priors: dict[Label, float]
    token_log_likelihoods: dict[Label, list[float]]
    smoothing_alpha: float
    threshold: float = 0.5
    split_seed: Optional[int] = None

    def check_invariants(self) -> None:
        prior_mass = sum(math.exp(p) for p in self.class_log_priors.values())
        if abs(prior_mass - 1.0) > 1e-9:
            raise FilterError(f"class priors sum to {prior_mass}, expected 1")
        for label, row in self.token_log_likelihoods.items():
            mass = sum(math.exp(v) for v in row)
            if abs(mass - 1.0) > 1e-6:
                raise FilterError(f"{label.value} token likelihoods sum to {mass}")


def train(
    corpus: Sequence[LabeledExample],
    alpha: float = 1.0,
    threshold: float = 0.5,
    split_seed: Optional[int] = None,
) -> LexicalModel:
    """Fit the Naive Bayes model. Requires both labels and ``alpha > 0``.

    Counts are length-normalised per class (rescaled to the vocabulary size)
    before add-alpha smoothing, so duplicating every training document leaves
    the classifier's posteriors exactly unchanged.
    """
    if alpha <= 0:
        raise ValueError("smoothing alpha must be > 0")
    labels = {example.label for example in corpus}
    if labels != {Label.POSITIVE, Label.NEGATIVE}:
        raise SingleClassCorpus(f"corpus labels {sorted(l.value for l in labels)}; need both classes")

    vocabulary: dict[str, int] = {}
    counts = {Label.POSITIVE: [], Label.NEGATIVE: []}  # type: dict[Label, list[float]]
    doc_counts = {Label.POSITIVE: 0, Label.NEGATIVE: 0}
    for example in corpus:
        doc_counts[example.label] += 1
        row = counts[example.label]
        for token in tokenize(example.text):
            index = vocabulary.setdefault(token, len(vocabulary))
            for other in counts.values():
                while len(other) <= index:
                    other.append(0.0)
            row[index] += 1.0

    size = len(vocabulary)
    for row in counts.values():
        while len(row) < size:
            row.append(0.0)

    total_docs = len(corpus)
    log_priors = {label: math.log(n / total_docs) for label, n in doc_counts.items()}
    likelihoods: dict[Label, list[float]] = {}
    for label, row in counts.items():
        class_total = sum(row)
        scale = size / class_total if class_total else 0.0
        denominator = (size if class_total else 0.0) + alpha * size
        likelihoods[label] = [
            math.log((c * scale + alpha) / denominator) for c in row
        ]

    model = LexicalModel(
        vocabulary=vocabulary,
        class_log_priors=log_priors,
        token_log_likelihoods=likelihoods,
        smoothing_alpha=alpha,
        threshold=threshold,
        split_seed=split_seed,
    )
    model.check_invariants()
    return model


def classify(model: LexicalModel, text: str) -> tuple[Label, float]:
    """Return (label, positive posterior). Unseen tokens are ignored."""
    scores = dict(model.class_log_priors)
    for token in tokenize(text):
        index = model.vocabulary.get(token)
        if index is None:
            continue
        for label in scores:
            scores[label] += model.token_log_likelihoods[label][index]
    # log-sum-exp for a numerically stable posterior
    peak = max(scores.values())
    total = sum(math.exp(s - peak) for s in scores.values())
    posterior = math.exp(scores[Label.POSITIVE] - peak) / total
    label = Label.POSITIVE if posterior >= model.threshold else Label.NEGATIVE
    return label, posterior


@dataclass(frozen=True)
class EvalMetrics:
    true_positive: int
    false_positive: int
    true_negative: int
    false_negative: int

    @property
    def recall(self) -> float:
        denom = self.true_positive + self.false_negative
        return self.true_positive / denom if denom else 0.0

    @property
    def precision(self) -> float:
        denom = self.true_positive + self.false_positive
        return self.true_positive / denom if denom else 0.0

    @property
    def f1(self) -> float:
        return self.f_beta(1.0)

    @property
    def f2(self) -> float:
        return self.f_beta(2.0)

    def f_beta(self, beta: float) -> float:
        p, r = self.precision, self.recall
        denom = beta * beta * p + r
        return (1 + beta * beta) * p * r / denom if denom else 0.0


def evaluate(model: LexicalModel, heldout: Sequence[LabeledExample]) -> EvalMetrics:
    if not heldout:
        raise ValueError("heldout set must be non-empty")
    tp = fp = tn = fn = 0
    for example in heldout:
        predicted, _ = classify(model, example.text)
        if predicted is Label.POSITIVE:
            if example.label is Label.POSITIVE:
                tp += 1
            else:
                fp += 1
        else:
            if example.label is Label.NEGATIVE:
                tn += 1
            else:
                fn += 1
    return EvalMetrics(tp, fp, tn, fn)


def stratified_split(
    corpus: Sequence[LabeledExample],
    heldout_fraction: float = 0.2,
    seed: int = 0,
) -> tuple[list[LabeledExample], list[LabeledExample]]:
    """Deterministic stratified train/heldout split; the seed is recorded in
    the trained model artifact for reproducibility."""
    rng = random.Random(seed)
    train_set: list[LabeledExample] = []
    heldout: list[LabeledExample] = []
    for label in (Label.POSITIVE, Label.NEGATIVE):
        group = [e for e in corpus if e.label is label]
        rng.shuffle(group)
        cut = int(round(len(group) * heldout_fraction))
        heldout.extend(group[:cut])
        train_set.extend(group[cut:])
    rng.shuffle(train_set)
    rng.shuffle(heldout)
    return train_set, heldout


class MeshTree:
    """MeSH descriptor hierarchy; descendant tests via tree-number prefixes."""

    def __init__(self, tree_numbers: dict[str, set[str]]):
        self._tree_numbers = tree_numbers

    @classmethod
    def load(cls, path: str | Path) -> "MeshTree":
        """Read a two-column file: descriptor id <TAB> tree number."""
        numbers: dict[str, set[str]] = {}
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                descriptor, _, tree_number = line.partition("\t")
                if tree_number:
                    numbers.setdefault(descriptor.strip(), set()).add(tree_number.strip())
        return cls(numbers)

    def __contains__(self, descriptor: str) -> bool:
        return descriptor in self._tree_numbers

    def is_or_descends_from(self, descriptor: str, ancestor: str) -> bool:
        if descriptor == ancestor:
            return True
        own = self._tree_numbers.get(descriptor, set())
        roots = self._tree_numbers.get(ancestor, set())
        return any(tn == root or tn.startswith(root + ".") for tn in own for root in roots)


def build_mesh_activity_corpus(
    documents: Sequence["Document"],
    mesh_tree: MeshTree,
    target_descriptor: str,
    per_class: Optional[int] = None,
    seed: int = 0,
) -> list[LabeledExample]:
    """Label documents Positive when indexed with the target descriptor or a
    narrower one, then optionally re-sample each class to ``per_class``."""
    if target_descriptor not in mesh_tree:
        raise DescriptorNotFound(f"descriptor {target_descriptor!r} is not in the tree")
    positives: list[LabeledExample] = []
    negatives: list[LabeledExample] = []
    for doc in documents:
        text = doc.classification_text()
        if not text:
            continue
        hit = any(
            mesh_tree.is_or_descends_from(term, target_descriptor)
            for term in doc.mesh_terms
        )
        bucket = positives if hit else negatives
        bucket.append(LabeledExample(
            text=text,
            label=Label.POSITIVE if hit else Label.NEGATIVE,
            origin=ExampleOrigin.MESH_DERIVED,
        ))
    if per_class is not None:
        if per_class > len(positives) or per_class > len(negatives):
            raise FilterError(
                f"re-sample of {per_class} per class requested but only "
                f"{len(positives)} positives / {len(negatives)} negatives available"
            )
        rng = random.Random(seed)
        positives = rng.sample(positives, per_class)
        negatives = rng.sample(negatives, per_class)
    return positives + negatives


@dataclass
class PseudoLabelCorpus:
    examples: list[LabeledExample] = field(default_factory=list)
    skipped: int = 0


_YES_NO_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


def build_pseudo_label_corpus(
    documents: Sequence["Document"],
    backend: "LlmBackend",
    prompt_template: "PromptTemplate",
) -> PseudoLabelCorpus:
    """Label abstracts with an LLM: does the text mention a natural-product
    isolation relation? Unparseable answers are skipped and counted."""
    corpus = PseudoLabelCorpus()
    for doc in documents:
        text = doc.classification_text()
        if not text:
            corpus.skipped += 1
            continue
        response = backend.complete(prompt_template.render(text=text), max_output=8)
        match = _YES_NO_RE.search(response.splitlines()[0] if response else "")
        if not match:
            logger.warning("pseudo-label answer unparseable for %s", doc.ref)
            corpus.skipped += 1
            continue
        label = Label.POSITIVE if match.group(1).lower() == "yes" else Label.NEGATIVE
        corpus.examples.append(LabeledExample(
            text=text, label=label, origin=ExampleOrigin.PSEUDO_LABEL,
        ))
    return corpus


def save_model(model: LexicalModel, path: str | Path) -> None:
    """Write the versioned flat-file model artifact (one token per line)."""
    tokens = sorted(model.vocabulary, key=model.vocabulary.__getitem__)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"format\t{MODEL_FORMAT}\n")
        handle.write(f"alpha\t{model.smoothing_alpha!r}\n")
        handle.write(f"threshold\t{model.threshold!r}\n")
        handle.write(f"seed\t{'' if model.split_seed is None else model.split_seed}\n")
        for label in (Label.NEGATIVE, Label.POSITIVE):
            handle.write(f"prior\t{label.value}\t{model.class_log_priors[label]!r}\n")
        for index, token in enumerate(tokens):
            neg = model.token_log_likelihoods[Label.NEGATIVE][index]
            pos = model.token_log_likelihoods[Label.POSITIVE][index]
            handle.write(f"token\t{token}\t{neg!r}\t{pos!r}\n")


def load_model(path: str | Path) -> LexicalModel:
    vocabulary: dict[str, int] = {}
    likelihoods: dict[Label, list[float]] = {Label.NEGATIVE: [], Label.POSITIVE: []}
    priors: dict[Label, float] = {}
    alpha = 1.0
    threshold = 0.5
    seed: Optional[int] = None
    with open(path, encoding="utf-8") as handle:
        first = handle.readline().rstrip("\n").split("\t")
        if first != ["format", MODEL_FORMAT]:
            raise FilterError(f"unsupported model artifact format: {first!r}")
        for line in handle:
            parts = line.rstrip("\n").split("\t")
            if parts[0] == "alpha":
                alpha = float(parts[1])
            elif parts[0] == "threshold":
                threshold = float(parts[1])
            elif parts[0] == "seed":
                seed = int(parts[1]) if parts[1] else None
            elif parts[0] == "prior":
                priors[Label(parts[1])] = float(parts[2])
            elif parts[0] == "token":
                vocabulary[parts[1]] = len(vocabulary)
                likelihoods[Label.NEGATIVE].append(float(parts[2]))
                likelihoods[Label.POSITIVE].append(float(parts[3]))
            else:
                raise FilterError(f"unknown model artifact line: {line!r}")
    model = LexicalModel(
        vocabulary=vocabulary,
        class_log_priors=priors,
        token_log_likelihoods=likelihoods,
        smoothing_alpha=alpha,
        threshold=threshold,
        split_seed=seed,
    )
    model.check_invariants()
    return model
