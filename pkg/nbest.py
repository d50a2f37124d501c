#!/usr/bin/env python3
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.
#

"""
The nbest module provides the N-best data model, second-pass rescoring with coefficient tuning, and
the metric suite: WER, oracle WER, delta WER and N-best perturbation rescoring robustness (NPRR).
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable
from typing import Dict
from typing import Iterable
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union
import csv
import dataclasses
import json
import logging
import math

from minimlm import TransformerModel
import errors
import minimlm

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class Hypothesis:
    """One first-pass transcription with its acoustic log-score (higher is better)."""
    text: str
    am_score: float

    def __post_init__(self) -> None:
        if not minimlm.tokenize(self.text):
            raise errors.InputError("hypothesis text is empty")
        if not math.isfinite(self.am_score):
            raise errors.InputError("hypothesis am_score is not finite")

    def tokens(self) -> List[str]:
        """Gets the word tokens."""
        return minimlm.tokenize(self.text)


@dataclasses.dataclass(frozen=True)
class NBestList:
    """The hypotheses of one utterance, in first-pass order, plus the reference transcript."""
    utt_id: str
    reference: str
    hyps: Tuple[Hypothesis, ...]
    perturbation: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.hyps:
            raise errors.InputError("utterance %s has no hypotheses" % self.utt_id)

    def reference_tokens(self) -> List[str]:
        """Gets the reference word tokens."""
        return minimlm.tokenize(self.reference)

    def replace_hyps(self, hyps: Sequence[Hypothesis], perturbation: Optional[str] = None) -> "NBestList":
        """Gets a copy with other hypotheses; the reference is kept."""
        return dataclasses.replace(self, hyps=tuple(hyps), perturbation=perturbation)


class WerCount(NamedTuple):
    """Edit errors of one hypothesis against its reference."""
    errors: int
    ref_len: int

    @property
    def rate(self) -> float:
        """Gets errors / ref_len."""
        return self.errors / self.ref_len


def wer(ref: Sequence[str], hyp: Sequence[str]) -> WerCount:
    """Counts the minimal substitutions, insertions and deletions turning ref into hyp (unit costs)."""
    if not ref:
        raise errors.InputError("empty reference")
    previous = list(range(len(hyp) + 1))
    for i, ref_token in enumerate(ref, start=1):
        current = [i] + [0] * len(hyp)
        for j, hyp_token in enumerate(hyp, start=1):
            substitution = previous[j - 1] + (ref_token != hyp_token)
            deletion = previous[j] + 1
            insertion = current[j - 1] + 1
            current[j] = min(substitution, deletion, insertion)
        previous = current
    return WerCount(previous[-1], len(ref))


def corpus_wer(results: Iterable[Tuple[int, int]]) -> float:
    """Pools per-utterance (errors, ref_len) pairs: sum of errors / sum of reference lengths."""
    total_errors = 0
    total_len = 0
    for utt_errors, ref_len in results:
        total_errors += utt_errors
        total_len += ref_len
    if total_len == 0:
        raise errors.InputError("total reference length is zero")
    return total_errors / total_len


def hyp_errors(nbest: NBestList) -> List[WerCount]:
    """Gets the error count of every hypothesis."""
    ref = nbest.reference_tokens()
    return [wer(ref, hyp.tokens()) for hyp in nbest.hyps]


def oracle_index(nbest: NBestList) -> int:
    """Gets the hypothesis with the fewest errors, lowest index on ties."""
    counts = hyp_errors(nbest)
    return min(range(len(counts)), key=lambda index: (counts[index].errors, index))


def selection_wer(lists: Sequence[NBestList], chosen: Sequence[int]) -> float:
    """Gets the corpus WER of picking hypothesis chosen[u] in utterance u."""
    if len(lists) != len(chosen):
        raise errors.InputError("%d selections for %d utterances" % (len(chosen), len(lists)))
    if not lists:
        raise errors.InputError("no utterances")
    return corpus_wer(wer(nbest.reference_tokens(), nbest.hyps[index].tokens()) for nbest, index in zip(lists, chosen))


def oracle_wer(lists: Sequence[NBestList]) -> float:
    """Gets the WER of always picking the best hypothesis: a lower bound of any rescorer."""
    return selection_wer(lists, [oracle_index(nbest) for nbest in lists])


def first_pass_choice(lists: Sequence[NBestList]) -> List[int]:
    """Gets the argmax-am_score hypothesis per utterance, lowest index on ties."""
    return choose(lists, [[0.0] * len(nbest.hyps) for nbest in lists], 0.0)


Scorer = Callable[[str], float]


class LmScoreCache:
    """Second-pass scores computed once per distinct hypothesis text."""
    def __init__(self, scorer: Scorer, workers: int = 1) -> None:
        self.scorer = scorer
        self.workers = workers
        self.__scores: Dict[str, float] = {}

    def __len__(self) -> int:
        return len(self.__scores)

    def score_lists(self, lists: Sequence[NBestList]) -> List[List[float]]:
        """Gets the score of every hypothesis of every list."""
        pending: List[Tuple[str, str]] = []
        seen = set(self.__scores)
        for nbest in lists:
            for hyp in nbest.hyps:
                if hyp.text not in seen:
                    seen.add(hyp.text)
                    pending.append((nbest.utt_id, hyp.text))
        if self.workers > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as executor:
                values = list(executor.map(lambda item: self.__score_one(*item), pending))
        else:
            values = [self.__score_one(utt_id, text) for utt_id, text in pending]
        for (_utt_id, text), value in zip(pending, values):
            self.__scores[text] = value
        return [[self.__scores[hyp.text] for hyp in nbest.hyps] for nbest in lists]

    def __score_one(self, utt_id: str, text: str) -> float:
        try:
            return self.scorer(text)
        except errors.WorkbenchError as error:
            raise errors.InputError("utterance %s: cannot score %r: %s" % (utt_id, text, error)) from error


def model_scorer(model: TransformerModel) -> Scorer:
    """Scores hypotheses by their pseudo-log-likelihood under model."""
    return lambda text: minimlm.pseudo_log_likelihood(model, text)


def choose(lists: Sequence[NBestList], lm_scores: Sequence[Sequence[float]], lam: float) -> List[int]:
    """Picks argmax(am_score + lam * lm_score) per utterance; ties go to the higher am_score, then lower index."""
    if not math.isfinite(lam):
        raise errors.RangeError("rescoring coefficient %r is not finite" % lam)
    ret: List[int] = []
    for nbest, scores in zip(lists, lm_scores):
        if len(scores) != len(nbest.hyps):
            raise errors.InputError("utterance %s: %d scores for %d hypotheses"
                                    % (nbest.utt_id, len(scores), len(nbest.hyps)))
        keys = [(hyp.am_score + lam * score, hyp.am_score, -index)
                for index, (hyp, score) in enumerate(zip(nbest.hyps, scores))]
        ret.append(-max(keys)[2])
    return ret


@dataclasses.dataclass(frozen=True)
class RescoreResult:
    """Outcome of rescoring a test set with one coefficient."""
    chosen: Tuple[int, ...]
    lam: float
    wer: float
    oracle_wer: float


def rescore_with_scores(lists: Sequence[NBestList], lm_scores: Sequence[Sequence[float]],
                        lam: float) -> RescoreResult:
    """Rescores from precomputed second-pass scores."""
    chosen = choose(lists, lm_scores, lam)
    return RescoreResult(tuple(chosen), lam, selection_wer(lists, chosen), oracle_wer(lists))


def rescore(lists: Sequence[NBestList], model: TransformerModel, lam: float,
            cache: Optional[LmScoreCache] = None) -> RescoreResult:
    """Rescores every list with am_score + lam * PLL under model."""
    if cache is None:
        cache = LmScoreCache(model_scorer(model))
    return rescore_with_scores(lists, cache.score_lists(lists), lam)


def tune_coefficient_with_scores(dev_lists: Sequence[NBestList], lm_scores: Sequence[Sequence[float]],
                                 grid: Sequence[float]) -> float:
    """Gets the grid value with the lowest dev WER; the smaller value wins ties."""
    if not grid:
        raise errors.InputError("empty coefficient grid")
    best_lam = 0.0
    best_wer = math.inf
    for lam in sorted(grid):
        rate = selection_wer(dev_lists, choose(dev_lists, lm_scores, lam))
        logger.debug("lambda %g: dev WER %.4f", lam, rate)
        if rate < best_wer:
            best_lam, best_wer = lam, rate
    return best_lam


def tune_coefficient(dev_lists: Sequence[NBestList], model: TransformerModel, grid: Sequence[float],
                     cache: Optional[LmScoreCache] = None) -> float:
    """Tunes the second-pass coefficient on a dev set."""
    if cache is None:
        cache = LmScoreCache(model_scorer(model))
    return tune_coefficient_with_scores(dev_lists, cache.score_lists(dev_lists), grid)


def linear_grid(start: float, stop: float, points: int) -> List[float]:
    """Gets points evenly spaced values from start to stop inclusive."""
    if points < 1:
        raise errors.RangeError("grid needs at least one point")
    if points == 1:
        return [start]
    return [start + (stop - start) * index / (points - 1) for index in range(points)]


def delta_wer(wer_value: float, oracle: float) -> float:
    """Gets the rescorer's gap to the oracle; a negative gap is returned but logged."""
    ret = wer_value - oracle
    if ret < 0:
        logger.warning("WER %g is below oracle WER %g", wer_value, oracle)
    return ret


def nprr(dwer_clean: float, dwer_perturbed: float) -> float:
    """Gets the relative growth of delta WER under perturbation, in percent."""
    if dwer_clean <= 0:
        raise errors.UndefinedMetricError("NPRR is undefined for a clean delta WER of %g" % dwer_clean)
    return 100.0 * (dwer_perturbed - dwer_clean) / dwer_clean


def read_nbest(path: str) -> List[NBestList]:
    """Reads N-best JSONL: one {"id", "ref", "hyps": [{"text", "am_score"}]} object per line."""
    ret: List[NBestList] = []
    seen = set()
    with open(path, "r", encoding="utf-8") as stream:
        for number, line in enumerate(stream, start=1):
            if not line.strip():
                continue
            try:
                blob = json.loads(line)
                hyps = tuple(Hypothesis(hyp["text"], float(hyp["am_score"])) for hyp in blob["hyps"])
                nbest = NBestList(str(blob["id"]), blob["ref"], hyps, blob.get("perturbation"))
            except (ValueError, KeyError, TypeError) as error:
                raise errors.InputError("%s:%d: %s" % (path, number, error)) from error
            if nbest.utt_id in seen:
                raise errors.InputError("%s:%d: duplicate utterance id %s" % (path, number, nbest.utt_id))
            seen.add(nbest.utt_id)
            ret.append(nbest)
    return ret


def nbest_to_json(nbest: NBestList) -> str:
    """Serializes one list as a JSONL line (without the newline)."""
    blob: Dict[str, object] = {
        "id": nbest.utt_id,
        "ref": nbest.reference,
        "hyps": [{"text": hyp.text, "am_score": hyp.am_score} for hyp in nbest.hyps],
    }
    if nbest.perturbation is not None:
        blob["perturbation"] = nbest.perturbation
    return json.dumps(blob, ensure_ascii=False)


def write_nbest(lists: Iterable[NBestList], path: str) -> None:
    """Writes N-best JSONL."""
    with open(path, "w", encoding="utf-8", newline="") as stream:
        for nbest in lists:
            stream.write(nbest_to_json(nbest) + "\n")


NprrCell = Union[float, str]
NO_NPRR = "-"
UNDEFINED = "undefined"


class RobustnessRow(NamedTuple):
    """One (model, test set, perturbation) row; WER values are percentages."""
    model: str
    test_set: str
    perturbation: str
    wer: float
    oracle_wer: float
    delta_wer: float
    nprr_pct: NprrCell


REPORT_FIELDS = ["model", "test_set", "perturbation", "wer", "oracle_wer", "delta_wer", "nprr_pct"]


def robustness_rows(model: str, test_set: str, conditions: Sequence[Tuple[str, float, float]]) -> List[RobustnessRow]:
    """
    Builds report rows from (perturbation, WER %, oracle WER %) triples.

    The first triple is the clean condition; every later row gets its NPRR against it.
    """
    if not conditions:
        raise errors.InputError("no conditions to report")
    ret: List[RobustnessRow] = []
    clean = 0.0
    for index, (perturbation, wer_value, oracle) in enumerate(conditions):
        gap = delta_wer(wer_value, oracle)
        cell: NprrCell = NO_NPRR
        if index == 0:
            clean = gap
        else:
            try:
                cell = nprr(clean, gap)
            except errors.UndefinedMetricError as error:
                logger.warning("%s/%s/%s: %s", model, test_set, perturbation, error)
                cell = UNDEFINED
        ret.append(RobustnessRow(model, test_set, perturbation, wer_value, oracle, gap, cell))
    return ret


def format_cell(value: NprrCell) -> str:
    """Formats a percentage with 2 decimals; markers pass through."""
    if isinstance(value, str):
        return value
    return "%.2f" % value


def row_cells(row: RobustnessRow) -> List[str]:
    """Gets the CSV cells of a row."""
    return [row.model, row.test_set, row.perturbation] + [format_cell(value) for value in row[3:]]


def write_report(rows: Iterable[RobustnessRow], path: str) -> None:
    """Writes report rows as CSV."""
    with open(path, "w", encoding="utf-8", newline="") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for row in rows:
            writer.writerow(row_cells(row))


def read_report(path: str) -> List[Dict[str, str]]:
    """Reads a report CSV as string cells keyed by column."""
    with open(path, "r", encoding="utf-8", newline="") as stream:
        reader = csv.DictReader(stream)
        if reader.fieldnames is None or not set(REPORT_FIELDS) <= set(reader.fieldnames):
            raise errors.InputError("%s: not a robustness report" % path)
        return list(reader)

# vim:set shiftwidth=4 softtabstop=4 expandtab:
