#!/usr/bin/env python3
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.
#

"""
The synth module generates desk-scale experiment data: sentences from a small template grammar rich
in homophones, and N-best lists whose first-pass scores only loosely track their errors, so that a
second-pass model has something to fix.
"""

from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
import dataclasses
import logging
import os

import numpy as np

from nbest import Hypothesis
from nbest import NBestList
from perturb import HomophoneLexicon
import errors
import minimlm
import nbest
import numcore

logger = logging.getLogger(__name__)

SLOTS: Dict[str, List[str]] = {
    "pron": ["i", "you", "we", "they", "she", "he"],
    "poss": ["your", "their", "our", "my", "his", "her"],
    "contr": ["you're", "they're", "we're"],
    "noun": ["cat", "dog", "car", "house", "letter", "phone", "book", "road", "meal", "plan"],
    "plural": ["cats", "dogs", "cars", "books", "letters", "phones"],
    "adj": ["red", "big", "new", "old", "quiet", "bright"],
    "verb": ["see", "buy", "find", "fix", "read", "send"],
    "past": ["saw", "bought", "found", "fixed", "sent"],
    "num": ["two", "four", "eight"],
    "time": ["today", "tonight", "tomorrow"],
}

TEMPLATES = [
    "{pron} think {poss} {noun} is {adj}",
    "i think {contr} right about the {noun}",
    "put the {noun} over there",
    "{pron} want to {verb} the {noun} too",
    "maybe we can {verb} the {adj} {noun} {time}",
    "do you know where {poss} {noun} is",
    "{pron} will write to {poss} friend {time}",
    "we need {num} more {plural}",
    "the {noun} is {adj} right now",
    "{pron} {past} the {adj} {noun} last night",
    "there is no {noun} in {poss} house",
    "{contr} going to {verb} {num} {plural}",
]

# Share of noisy tokens that are substituted, deleted and inserted.
EDIT_MIX = (0.6, 0.2, 0.2)


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    """Size and noise of a synthetic data set."""
    utts: int = 2000
    n_best: int = 5
    noise_rate: float = 0.3
    seed: int = 0
    corpus_lines: int = 2000
    am_noise: float = 1.0
    dev_fraction: float = 0.2
    test_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.utts < 1 or self.n_best < 1 or self.corpus_lines < 1:
            raise errors.ConfigError("gen-data", "utts, n_best and corpus_lines must be at least 1")
        if not 0 <= self.noise_rate <= 1:
            raise errors.ConfigError("gen-data.noise_rate", "must be in [0, 1]")
        if self.dev_fraction < 0 or self.test_fraction < 0 or self.dev_fraction + self.test_fraction >= 1:
            raise errors.ConfigError("gen-data", "dev and test fractions must leave a training share")


def generate_sentence(rng: np.random.Generator) -> str:
    """Fills a random template."""
    template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
    fillers = {slot: words[int(rng.integers(len(words)))] for slot, words in SLOTS.items()}
    return template.format(**fillers)


def generate_corpus(lines: int, seed: int) -> List[str]:
    """Generates language-model training sentences."""
    rng = numcore.rng_stream(seed, "synth", "corpus")
    return [generate_sentence(rng) for _ in range(lines)]


def grammar_words() -> List[str]:
    """Gets every word the grammar can produce, sorted."""
    words = set()
    for template in TEMPLATES:
        words.update(token for token in minimlm.tokenize(template) if not token.startswith("{"))
    for slot_words in SLOTS.values():
        words.update(slot_words)
    return sorted(words)


def noisy_tokens(reference: Sequence[str], noise_rate: float, lexicon: Optional[HomophoneLexicon],
                 words: Sequence[str], rng: np.random.Generator) -> List[str]:
    """Corrupts tokens with probability noise_rate; substitutions prefer lexicon neighbours."""
    ret: List[str] = []
    for token in reference:
        if rng.random() >= noise_rate:
            ret.append(token)
            continue
        roll = rng.random()
        if roll < EDIT_MIX[0]:
            similar = lexicon.replacements(token) if lexicon is not None else []
            if similar and rng.random() < 0.8:
                ret += minimlm.tokenize(similar[int(rng.integers(len(similar)))])
            else:
                ret.append(words[int(rng.integers(len(words)))])
        elif roll < EDIT_MIX[0] + EDIT_MIX[1]:
            continue
        else:
            ret += [token, words[int(rng.integers(len(words)))]]
    if not ret:
        ret.append(reference[0])
    return ret


def generate_nbest(utt_id: str, reference: str, cfg: SynthConfig, lexicon: Optional[HomophoneLexicon],
                   rng: np.random.Generator) -> NBestList:
    """
    Draws cfg.n_best distinct hypotheses where possible. Each acoustic score is minus the
    hypothesis' error count plus Gaussian noise, rounded to 4 decimals.
    """
    ref_tokens = minimlm.tokenize(reference)
    words = grammar_words()
    texts: List[str] = []
    for _ in range(cfg.n_best):
        text = " ".join(noisy_tokens(ref_tokens, cfg.noise_rate, lexicon, words, rng))
        for _retry in range(10):
            if text not in texts:
                break
            text = " ".join(noisy_tokens(ref_tokens, cfg.noise_rate, lexicon, words, rng))
        texts.append(text)
    hyps = []
    for text in texts:
        utt_errors = nbest.wer(ref_tokens, minimlm.tokenize(text)).errors
        hyps.append(Hypothesis(text, round(-float(utt_errors) + float(rng.normal(0.0, cfg.am_noise)), 4)))
    return NBestList(utt_id, reference, tuple(hyps))


class SyntheticData(NamedTuple):
    """A language-model corpus and three N-best splits."""
    corpus: List[str]
    train: List[NBestList]
    dev: List[NBestList]
    test: List[NBestList]


def generate_dataset(cfg: SynthConfig, lexicon: Optional[HomophoneLexicon] = None) -> SyntheticData:
    """Generates the corpus and the N-best splits."""
    corpus = generate_corpus(cfg.corpus_lines, cfg.seed)
    ref_rng = numcore.rng_stream(cfg.seed, "synth", "references")
    lists = []
    for index in range(cfg.utts):
        utt_id = "utt%05d" % index
        reference = generate_sentence(ref_rng)
        lists.append(generate_nbest(utt_id, reference, cfg, lexicon, numcore.rng_stream(cfg.seed, "synth", utt_id)))
    n_dev = int(round(cfg.utts * cfg.dev_fraction))
    n_test = int(round(cfg.utts * cfg.test_fraction))
    n_train = cfg.utts - n_dev - n_test
    return SyntheticData(corpus, lists[:n_train], lists[n_train:n_train + n_dev], lists[n_train + n_dev:])


DATA_FILES = {
    "corpus": "corpus.txt",
    "train": "nbest_train.jsonl",
    "dev": "nbest_dev.jsonl",
    "test": "nbest_test.jsonl",
}


def write_dataset(data: SyntheticData, out_dir: str) -> Dict[str, str]:
    """Writes the data set into out_dir; returns the path of each part."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {part: os.path.join(out_dir, name) for part, name in DATA_FILES.items()}
    with open(paths["corpus"], "w", encoding="utf-8", newline="") as stream:
        for line in data.corpus:
            stream.write(line + "\n")
    nbest.write_nbest(data.train, paths["train"])
    nbest.write_nbest(data.dev, paths["dev"])
    nbest.write_nbest(data.test, paths["test"])
    logger.info("wrote %d corpus lines and %d/%d/%d utterances to %s", len(data.corpus), len(data.train),
                len(data.dev), len(data.test), out_dir)
    return paths

# vim:set shiftwidth=4 softtabstop=4 expandtab:
