#!/usr/bin/env python3
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.
#

"""
The perturb module replaces words of N-best hypotheses with phonetically similar words or phrases:
homophones ("you're" / "your"), whitespace insertions ("maybe" / "may be") and near-homophone
token replacements. Candidates come from a homophone lexicon plus vocabulary words sharing a
phonetic key.
"""

from typing import Dict
from typing import Iterable
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
import dataclasses
import enum
import logging

import numpy as np

from minimlm import Vocab
from nbest import Hypothesis
from nbest import NBestList
import errors
import minimlm
import numcore

logger = logging.getLogger(__name__)

VOWELS = "AEIOU"
# Letters after which an H is silent or already consumed.
H_MODIFIERS = "CGPST"
SIMPLE_CODES = {
    "B": "B",
    "F": "F",
    "J": "J",
    "L": "L",
    "M": "M",
    "N": "N",
    "R": "R",
    "Q": "K",
    "V": "F",
    "Z": "S",
}


def _normalize(word: str) -> str:
    return "".join(char for char in word.upper() if "A" <= char <= "Z")


def _code_at(text: str, i: int, first: int) -> str:
    # pylint: disable=too-many-return-statements
    # pylint: disable=too-many-branches
    char = text[i]
    prev = text[i - 1] if i > 0 else ""
    nxt = text[i + 1] if i + 1 < len(text) else ""
    after = text[i + 2] if i + 2 < len(text) else ""
    if char in VOWELS:
        return "A" if i == first else ""
    if char in SIMPLE_CODES:
        if char == "B" and prev == "M" and not nxt:
            return ""
        return SIMPLE_CODES[char]
    if char == "C":
        if nxt == "H":
            return "X"
        if nxt == "I" and after == "A":
            return "X"
        return "S" if nxt and nxt in "IEY" else "K"
    if char == "D":
        return "J" if nxt == "G" and after and after in "EIY" else "T"
    if char == "G":
        if nxt == "H" and (not after or after not in VOWELS):
            return ""
        if nxt == "N" and (not after or text[i + 2:] == "ED"):
            return ""
        if prev == "D" and nxt and nxt in "EIY":
            return ""
        return "J" if nxt and nxt in "EIY" and prev != "G" else "K"
    if char == "H":
        if prev and prev in H_MODIFIERS:
            return ""
        return "H" if nxt and nxt in VOWELS else ""
    if char == "K":
        return "" if prev == "C" else "K"
    if char == "P":
        return "F" if nxt == "H" else "P"
    if char == "S":
        if nxt == "H":
            return "X"
        if nxt == "I" and after and after in "OA":
            return "X"
        return "S"
    if char == "T":
        if nxt == "H":
            return "0"
        if nxt == "I" and after and after in "OA":
            return "X"
        return "" if nxt == "C" and after == "H" else "T"
    if char in "WY":
        return char if nxt and nxt in VOWELS else ""
    if char == "X":
        return "S" if i == first else "KS"
    return ""


def phonetic_key(word: str) -> str:
    """
    Gets a Metaphone-style key of word: letters that sound alike share a code, silent letters and
    non-initial vowels drop out. Non-letters are stripped first; "" means nothing was left to encode.
    """
    text = _normalize(word)
    if not text:
        return ""
    start = 0
    codes: List[str] = []
    if text[:2] in ("KN", "GN", "PN", "AE", "WR"):
        start = 1
    elif text[:2] == "WH":
        codes.append("W")
        start = 2
    for i in range(start, len(text)):
        if i > start and text[i] == text[i - 1] and text[i] != "C":
            continue
        codes.append(_code_at(text, i, start if not codes else -1))
    return "".join(codes)


class HomophoneLexicon:
    """Word to phonetically similar replacements (words or multi-word phrases), in file order."""
    def __init__(self) -> None:
        self.__entries: Dict[str, List[str]] = {}

    def __len__(self) -> int:
        return sum(len(replacements) for replacements in self.__entries.values())

    def __contains__(self, word: object) -> bool:
        return word in self.__entries

    def add(self, word: str, replacement: str) -> None:
        """Adds one word / replacement pair; duplicates are ignored."""
        word = word.strip().lower()
        replacement = " ".join(minimlm.tokenize(replacement.lower()))
        if not word or not replacement:
            raise errors.InputError("lexicon entries must be non-empty")
        if word == replacement:
            raise errors.InputError("lexicon maps %r to itself" % word)
        replacements = self.__entries.setdefault(word, [])
        if replacement not in replacements:
            replacements.append(replacement)

    def replacements(self, word: str) -> List[str]:
        """Gets the replacements of word."""
        return list(self.__entries.get(word.lower(), []))

    def words(self) -> List[str]:
        """Gets the words that have replacements."""
        return list(self.__entries)


def read_lexicon(path: str) -> HomophoneLexicon:
    """Reads a word<TAB>replacement file; '#' starts a comment line."""
    lexicon = HomophoneLexicon()
    with open(path, "r", encoding="utf-8") as stream:
        for number, line in enumerate(stream, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise errors.InputError("%s:%d: expected word<TAB>replacement" % (path, number))
            try:
                lexicon.add(fields[0], fields[1])
            except errors.InputError as error:
                raise errors.InputError("%s:%d: %s" % (path, number, error)) from error
    logger.info("read %d lexicon entries from %s", len(lexicon), path)
    return lexicon


class CandidateSource:
    """Base class for something that proposes phonetically similar replacements of a word."""
    def candidates(self, word: str) -> List[str]:  # pragma: no cover
        """Gets the replacements of word in a deterministic order, never word itself."""
        # pylint: disable=no-self-use
        # pylint: disable=unused-argument
        ...


class PhoneticCandidates(CandidateSource):
    """Lexicon entries first, then vocabulary words with the same phonetic key in id order."""
    def __init__(self, lexicon: HomophoneLexicon, vocab: Optional[Vocab] = None) -> None:
        self.lexicon = lexicon
        self.__by_key: Dict[str, List[str]] = {}
        if vocab is not None:
            for token in vocab.words():
                key = phonetic_key(token)
                if key:
                    self.__by_key.setdefault(key, []).append(token)
        self.__cache: Dict[str, List[str]] = {}

    def candidates(self, word: str) -> List[str]:
        if word not in self.__cache:
            ret: List[str] = []
            key = phonetic_key(word)
            pool = self.lexicon.replacements(word)
            if key:
                pool += self.__by_key.get(key, [])
            for replacement in pool:
                if replacement != word and replacement not in ret:
                    ret.append(replacement)
            self.__cache[word] = ret
        return list(self.__cache[word])


def candidates(word: str, lexicon: HomophoneLexicon, vocab: Vocab) -> List[str]:
    """Gets the lexicon and same-key vocabulary replacements of word."""
    return PhoneticCandidates(lexicon, vocab).candidates(word)


class PerturbStrategy(enum.Enum):
    """Which hypotheses of a list get perturbed."""
    ONE = "perturb-1"
    ALL = "perturb-N"


@dataclasses.dataclass(frozen=True)
class PerturbPlan:
    """Perturbation strategy, per-token replacement probability and root seed."""
    strategy: PerturbStrategy = PerturbStrategy.ALL
    replace_prob: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.replace_prob <= 1:
            raise errors.RangeError("replace probability %g outside [0, 1]" % self.replace_prob)


class TokenPerturbation(NamedTuple):
    """Perturbed tokens plus how many tokens had candidates and how many were replaced."""
    tokens: List[str]
    candidate_bearing: int
    replaced: int


def perturb_tokens(tokens: Sequence[str], replace_prob: float, source: CandidateSource,
                   rng: np.random.Generator) -> TokenPerturbation:
    """Replaces each candidate-bearing token with probability replace_prob by a uniform candidate."""
    ret: List[str] = []
    bearing = 0
    replaced = 0
    for token in tokens:
        options = source.candidates(token)
        if not options:
            ret.append(token)
            continue
        bearing += 1
        if rng.random() < replace_prob:
            ret += minimlm.tokenize(options[int(rng.integers(len(options)))])
            replaced += 1
        else:
            ret.append(token)
    return TokenPerturbation(ret, bearing, replaced)


def hypothesis_stream(plan: PerturbPlan, utt_id: str, hyp_index: int) -> np.random.Generator:
    """Gets the random stream of one hypothesis."""
    return numcore.rng_stream(plan.seed, "perturb", utt_id, hyp_index)


def perturb_hypothesis(hyp: Hypothesis, plan: PerturbPlan, source: CandidateSource,
                       rng: np.random.Generator) -> Hypothesis:
    """Perturbs the text of hyp; the acoustic score is kept."""
    result = perturb_tokens(hyp.tokens(), plan.replace_prob, source, rng)
    if not result.replaced:
        return hyp
    return Hypothesis(" ".join(result.tokens), hyp.am_score)


def lowest_am_index(nbest: NBestList) -> int:
    """Gets the hypothesis with the lowest acoustic score, highest index on ties."""
    return min(range(len(nbest.hyps)), key=lambda index: (nbest.hyps[index].am_score, -index))


def perturb_one(nbest: NBestList, plan: PerturbPlan, source: CandidateSource) -> NBestList:
    """Perturbs only the lowest-scoring hypothesis."""
    target = lowest_am_index(nbest)
    hyps = list(nbest.hyps)
    hyps[target] = perturb_hypothesis(hyps[target], plan, source, hypothesis_stream(plan, nbest.utt_id, target))
    return nbest.replace_hyps(hyps, PerturbStrategy.ONE.value)


def perturb_n(nbest: NBestList, plan: PerturbPlan, source: CandidateSource) -> NBestList:
    """Perturbs every hypothesis with its own random stream."""
    hyps = [perturb_hypothesis(hyp, plan, source, hypothesis_stream(plan, nbest.utt_id, index))
            for index, hyp in enumerate(nbest.hyps)]
    return nbest.replace_hyps(hyps, PerturbStrategy.ALL.value)


def perturb_lists(lists: Iterable[NBestList], plan: PerturbPlan, source: CandidateSource) -> List[NBestList]:
    """Applies the plan's strategy to every list."""
    apply = perturb_one if plan.strategy == PerturbStrategy.ONE else perturb_n
    return [apply(nbest, plan, source) for nbest in lists]

# vim:set shiftwidth=4 softtabstop=4 expandtab:
