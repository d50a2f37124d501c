#!/usr/bin/env python3
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

"""The test_synth module covers the synth module."""

import os
import tempfile
import unittest

from synth import SynthConfig
import errors
import minimlm
import nbest
import numcore
import perturb
import synth


class TestSynthConfig(unittest.TestCase):
    """Tests SynthConfig."""
    def test_invalid(self) -> None:
        """Tests that sizes, rates and fractions are checked."""
        with self.assertRaises(errors.ConfigError):
            SynthConfig(utts=0)
        with self.assertRaises(errors.ConfigError):
            SynthConfig(noise_rate=1.5)
        with self.assertRaises(errors.ConfigError):
            SynthConfig(dev_fraction=0.5, test_fraction=0.5)


class TestGrammar(unittest.TestCase):
    """Tests the sentence grammar."""
    def test_words(self) -> None:
        """Tests the sorted word list."""
        words = synth.grammar_words()
        self.assertEqual(words, sorted(set(words)))
        self.assertIn("there", words)
        self.assertIn("they're", words)
        self.assertNotIn("{noun}", words)

    def test_sentences(self) -> None:
        """Tests that sentences only use grammar words."""
        words = set(synth.grammar_words())
        for sentence in synth.generate_corpus(50, 3):
            self.assertNotIn("{", sentence)
            self.assertTrue(set(minimlm.tokenize(sentence)) <= words, sentence)

    def test_deterministic(self) -> None:
        """Tests that the seed fixes the corpus."""
        self.assertEqual(synth.generate_corpus(20, 1), synth.generate_corpus(20, 1))
        self.assertNotEqual(synth.generate_corpus(20, 1), synth.generate_corpus(20, 2))


class TestNoise(unittest.TestCase):
    """Tests noisy_tokens() and generate_nbest()."""
    def test_clean(self) -> None:
        """Tests that a zero noise rate keeps the reference."""
        reference = "put the car over there".split()
        tokens = synth.noisy_tokens(reference, 0.0, None, synth.grammar_words(), numcore.rng_stream(0))
        self.assertEqual(tokens, reference)

    def test_never_empty(self) -> None:
        """Tests that deleting every token still leaves a hypothesis."""
        for seed in range(20):
            tokens = synth.noisy_tokens(["car"], 1.0, None, ["dog"], numcore.rng_stream(seed))
            self.assertTrue(tokens)

    def test_nbest(self) -> None:
        """Tests the list size and the rounded acoustic scores."""
        lexicon = perturb.read_lexicon("data/homophones.tsv")
        cfg = SynthConfig(n_best=4, noise_rate=0.4)
        item = synth.generate_nbest("utt00000", "put the car over there", cfg, lexicon, numcore.rng_stream(0))
        self.assertEqual(len(item.hyps), 4)
        self.assertEqual(item.reference, "put the car over there")
        for hyp in item.hyps:
            self.assertEqual(hyp.am_score, round(hyp.am_score, 4))

    def test_noise_free_scores(self) -> None:
        """Tests that error-free hypotheses only carry the score noise."""
        cfg = SynthConfig(n_best=3, noise_rate=0.0, am_noise=0.0)
        item = synth.generate_nbest("u", "we need two more cars", cfg, None, numcore.rng_stream(0))
        self.assertEqual([hyp.text for hyp in item.hyps], ["we need two more cars"] * 3)
        self.assertEqual([hyp.am_score for hyp in item.hyps], [0.0] * 3)


class TestDataset(unittest.TestCase):
    """Tests generate_dataset() and write_dataset()."""
    def test_splits(self) -> None:
        """Tests split sizes and utterance ids."""
        data = synth.generate_dataset(SynthConfig(utts=20, n_best=3, corpus_lines=10))
        self.assertEqual((len(data.train), len(data.dev), len(data.test)), (12, 4, 4))
        self.assertEqual(len(data.corpus), 10)
        ids = [item.utt_id for item in data.train + data.dev + data.test]
        self.assertEqual(ids, ["utt%05d" % index for index in range(20)])

    def test_deterministic(self) -> None:
        """Tests that the seed fixes every split."""
        cfg = SynthConfig(utts=10, n_best=2, corpus_lines=5, seed=4)
        self.assertEqual(synth.generate_dataset(cfg), synth.generate_dataset(cfg))

    def test_write(self) -> None:
        """Tests that the written files read back."""
        data = synth.generate_dataset(SynthConfig(utts=10, n_best=2, corpus_lines=5))
        with tempfile.TemporaryDirectory() as tmp:
            paths = synth.write_dataset(data, tmp)
            self.assertEqual(sorted(os.listdir(tmp)), sorted(synth.DATA_FILES.values()))
            self.assertEqual(nbest.read_nbest(paths["test"]), data.test)
            with open(paths["corpus"], "r", encoding="utf-8") as stream:
                self.assertEqual(stream.read().splitlines(), data.corpus)


if __name__ == '__main__':
    unittest.main()
