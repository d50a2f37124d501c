#!/usr/bin/env python3
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.
#

"""
The workbench module is the command-line entry point: it trains the rescoring model under one of
the adaptation strategies, perturbs and evaluates N-best lists, sweeps single-layer adapters and
merges run reports.
"""

from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
import argparse
import configparser
import copy
import csv
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import sys

from minimlm import MATRIX_NAMES
from minimlm import ModelConfig
from minimlm import TransformerModel
from nbest import NBestList
from perturb import PerturbPlan
from perturb import PerturbStrategy
from rankschedule import RankSchedule
from rankschedule import ScheduleVariant
from trainer import Strategy
from trainer import TrainConfig
import errors
import lora
import minimlm
import nbest
import perturb
import rankschedule
import synth
import trainer

logger = logging.getLogger(__name__)

ConfigDict = Dict[str, Dict[str, str]]

DEFAULTS: ConfigDict = {
    "paths": {
        "corpus": "",
        "nbest_train": "",
        "nbest_dev": "",
        "nbest_test": "",
        "lexicon": "data/homophones.tsv",
        "output_dir": "runs/default",
        "base_checkpoint": "",
    },
    "model": {
        "d_model": "32",
        "d_ff": "64",
        "n_layers": "2",
        "n_heads": "2",
        "max_len": "32",
        "min_count": "1",
    },
    "train": {
        "strategy": "LoRA",
        "seed": "0",
        "lr": "0.01",
        "lora_lr": "0.001",
        "batch_size": "8",
        "total_steps": "300",
        "mask_prob": "0.15",
        "warmup_steps": "50",
        "lora_rank": "8",
        "lora_alpha": "32",
        "lora_dropout": "0.1",
        "target_layers": "all",
        "target_matrices": ",".join(MATRIX_NAMES),
        "sensitivity_ema": "0",
        "orth_reg": "0",
        "lr_warmup_steps": "0",
        "checkpoint_every": "0",
    },
    "schedule": {
        "r_target": "8",
        "r_init": "",
        "r_full": "",
        "t_init": "100",
        "t_final": "50",
        "variant": "continuous",
    },
    "perturb": {
        "strategy": "none",
        "replace_prob": "0.5",
        "seed": "",
    },
    "eval": {
        "lambda_grid": "0:1:11",
        "lambda": "",
        "workers": "1",
        "model_name": "",
    },
}

RUN_FILES = {
    "model": "model.json",
    "adapters": "adapters.json",
    "train_log": "train_log.csv",
    "prune_log": "prune_log.csv",
    "manifest": "manifest.json",
    "config": "config.ini",
    "report": "report.csv",
    "sweep": "sweep.csv",
}

# Perturbation label of the unperturbed test set.
CLEAN = "clean"

# Perturbation conditions evaluated besides the clean one.
PERTURB_MODES = {
    "none": [],
    "one": [PerturbStrategy.ONE],
    "n": [PerturbStrategy.ALL],
    "all": [PerturbStrategy.ONE, PerturbStrategy.ALL],
}


class Config:
    """Stores options from a config file or from cmdline args."""
    def __init__(self) -> None:
        self.values: ConfigDict = copy.deepcopy(DEFAULTS)

    def set(self, field: str, value: str) -> None:
        """Sets one value addressed as section.option."""
        section, _, option = field.partition(".")
        if section not in self.values or option not in self.values[section]:
            raise errors.ConfigError(field, "unknown option")
        self.values[section][option] = value

    def read_config(self, config_file: Optional[str]) -> None:
        """Reads config from a provided file."""
        if not config_file:
            return
        config_parser = configparser.ConfigParser(interpolation=None)
        if not config_parser.read(config_file, encoding="utf-8"):
            raise errors.InputError("cannot read config file %s" % config_file)
        for section in config_parser.sections():
            if section not in self.values:
                raise errors.ConfigError(section, "unknown section")
            for option in config_parser.options(section):
                self.set(section + "." + option, config_parser.get(section, option))

    def read_args(self, args: argparse.Namespace) -> None:
        """Reads config from cmdline args."""
        if getattr(args, "strategy", None):
            self.set("train.strategy", args.strategy)
        if getattr(args, "seed", None) is not None:
            self.set("train.seed", str(args.seed))
        if getattr(args, "steps", None) is not None:
            self.set("train.total_steps", str(args.steps))
        if getattr(args, "output_dir", None):
            self.set("paths.output_dir", args.output_dir)
        for assignment in getattr(args, "set", None) or []:
            field, sep, value = assignment.partition("=")
            if not sep:
                raise errors.ConfigError(assignment, "expected section.option=value")
            self.set(field.strip(), value.strip())

    def get_dict(self) -> ConfigDict:
        """Gets the config as a dict."""
        return copy.deepcopy(self.values)

    def write_config(self, path: str) -> None:
        """Writes the config so that read_config() restores it exactly."""
        config_parser = configparser.ConfigParser(interpolation=None)
        config_parser.read_dict(self.values)
        with open(path, "w", encoding="utf-8", newline="") as stream:
            config_parser.write(stream)


def config_hash(values: ConfigDict) -> str:
    """Hashes the canonical JSON form of a config."""
    payload = json.dumps(values, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _get(values: ConfigDict, field: str) -> str:
    section, _, option = field.partition(".")
    return values[section][option].strip()


def _typed(values: ConfigDict, field: str, kind: Callable[[str], Any]) -> Any:
    raw = _get(values, field)
    try:
        return kind(raw)
    except ValueError as error:
        raise errors.ConfigError(field, "cannot parse %r" % raw) from error


def _get_int(values: ConfigDict, field: str) -> int:
    return int(_typed(values, field, int))


def _get_float(values: ConfigDict, field: str) -> float:
    return float(_typed(values, field, float))


def _get_optional_int(values: ConfigDict, field: str) -> Optional[int]:
    if not _get(values, field):
        return None
    return _get_int(values, field)


def _get_optional_float(values: ConfigDict, field: str) -> Optional[float]:
    if not _get(values, field):
        return None
    return _get_float(values, field)


def parse_grid(values: ConfigDict, field: str) -> List[float]:
    """Parses 'start:stop:points' or a comma-separated list of coefficients."""
    raw = _get(values, field)
    try:
        if ":" in raw:
            start, stop, points = raw.split(":")
            return nbest.linear_grid(float(start), float(stop), int(points))
        grid = [float(item) for item in raw.split(",") if item.strip()]
    except (ValueError, errors.RangeError) as error:
        raise errors.ConfigError(field, "cannot parse grid %r" % raw) from error
    if not grid:
        raise errors.ConfigError(field, "empty grid")
    return grid


@dataclasses.dataclass
class ExperimentConfig:
    """Typed view of a config dict."""
    # pylint: disable=too-many-instance-attributes
    values: ConfigDict
    paths: Dict[str, str]
    model: Dict[str, int]
    train: TrainConfig
    perturb_mode: str
    perturb_plan_args: Tuple[float, int]
    lambda_grid: List[float]
    lam: Optional[float]
    workers: int
    model_name: str

    def plan(self, strategy: PerturbStrategy) -> PerturbPlan:
        """Gets the perturbation plan of one strategy."""
        replace_prob, seed = self.perturb_plan_args
        return PerturbPlan(strategy, replace_prob, seed)


def _parse_train(values: ConfigDict) -> TrainConfig:
    raw_strategy = _get(values, "train.strategy")
    by_name = {strategy.value.lower(): strategy for strategy in Strategy}
    if raw_strategy.lower() not in by_name:
        raise errors.ConfigError("train.strategy", "unknown strategy %r" % raw_strategy)
    strategy = by_name[raw_strategy.lower()]
    total_steps = _get_int(values, "train.total_steps")

    layers_raw = _get(values, "train.target_layers")
    target_layers: Optional[Tuple[int, ...]] = None
    if layers_raw.lower() != "all":
        target_layers = tuple(_typed(values, "train.target_layers",
                                     lambda raw: [int(item) for item in raw.split(",")]))
    matrices = tuple(item.strip() for item in _get(values, "train.target_matrices").split(",") if item.strip())
    for name in matrices:
        if name not in MATRIX_NAMES:
            raise errors.ConfigError("train.target_matrices", "unknown matrix %r" % name)

    try:
        variant = ScheduleVariant(_get(values, "schedule.variant"))
    except ValueError as error:
        raise errors.ConfigError("schedule.variant", "expected as-printed or continuous") from error
    schedule: Optional[RankSchedule] = None
    if strategy in trainer.DYNAMIC_RANK:
        t_final = _get_int(values, "schedule.t_final")
        schedule = RankSchedule.create(r_target=_get_int(values, "schedule.r_target"),
                                       t_init=_get_int(values, "schedule.t_init"),
                                       t_final=t_final,
                                       total_steps=total_steps,
                                       r_init=_get_optional_int(values, "schedule.r_init"),
                                       r_full=_get_optional_int(values, "schedule.r_full"))

    cfg = TrainConfig(strategy=strategy,
                      schedule=schedule,
                      lr=_get_float(values, "train.lr"),
                      lora_lr=_get_optional_float(values, "train.lora_lr"),
                      batch_size=_get_int(values, "train.batch_size"),
                      total_steps=total_steps,
                      mask_prob=_get_float(values, "train.mask_prob"),
                      seed=_get_int(values, "train.seed"),
                      warmup_steps=_get_int(values, "train.warmup_steps"),
                      lora_rank=_get_int(values, "train.lora_rank"),
                      lora_alpha=_get_float(values, "train.lora_alpha"),
                      lora_dropout=_get_float(values, "train.lora_dropout"),
                      target_layers=target_layers,
                      target_matrices=matrices,
                      schedule_variant=variant,
                      sensitivity_ema=_get_float(values, "train.sensitivity_ema"),
                      orth_reg=_get_float(values, "train.orth_reg"),
                      lr_warmup_steps=_get_int(values, "train.lr_warmup_steps"),
                      checkpoint_every=_get_int(values, "train.checkpoint_every"))
    cfg.validate()
    return cfg


def parse_experiment(values: ConfigDict) -> ExperimentConfig:
    """Converts and validates every value; errors name the offending field."""
    model = {name: _get_int(values, "model." + name) for name in DEFAULTS["model"]}
    train_cfg = _parse_train(values)
    perturb_mode = _get(values, "perturb.strategy")
    if perturb_mode not in PERTURB_MODES:
        raise errors.ConfigError("perturb.strategy", "expected one of %s" % ", ".join(PERTURB_MODES))
    replace_prob = _get_float(values, "perturb.replace_prob")
    if not 0 <= replace_prob <= 1:
        raise errors.ConfigError("perturb.replace_prob", "must be in [0, 1]")
    perturb_seed = _get_optional_int(values, "perturb.seed")
    lam: Optional[float] = None
    if _get(values, "eval.lambda"):
        lam = _get_float(values, "eval.lambda")
    return ExperimentConfig(values=values,
                            paths={name: _get(values, "paths." + name) for name in DEFAULTS["paths"]},
                            model=model,
                            train=train_cfg,
                            perturb_mode=perturb_mode,
                            perturb_plan_args=(replace_prob, train_cfg.seed if perturb_seed is None else perturb_seed),
                            lambda_grid=parse_grid(values, "eval.lambda_grid"),
                            lam=lam,
                            workers=max(1, _get_int(values, "eval.workers")),
                            model_name=_get(values, "eval.model_name"))


def require_path(experiment: ExperimentConfig, name: str) -> str:
    """Gets a configured input path that must exist."""
    path = experiment.paths[name]
    if not path:
        raise errors.ConfigError("paths." + name, "not set")
    if not os.path.exists(path):
        raise errors.ConfigError("paths." + name, "%s does not exist" % path)
    return path


def read_lines(path: str) -> List[str]:
    """Reads the non-empty lines of a text file."""
    with open(path, "r", encoding="utf-8") as stream:
        return [line.strip() for line in stream if line.strip()]


def git_describe() -> str:
    """Gets the git-describe string of the code, 'unknown' outside a checkout."""
    try:
        result = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                                cwd=os.path.dirname(os.path.abspath(__file__)), stdout=subprocess.PIPE,
                                stderr=subprocess.DEVNULL, universal_newlines=True, check=True)
    except (OSError, subprocess.CalledProcessError):
        return "unknown"
    return result.stdout.strip() or "unknown"


def write_json(blob: Dict[str, Any], path: str) -> None:
    """Writes indented, key-sorted JSON."""
    with open(path, "w", encoding="utf-8", newline="") as stream:
        json.dump(blob, stream, indent=2, sort_keys=True)
        stream.write("\n")


def build_model(experiment: ExperimentConfig, corpus: Sequence[str]) -> TransformerModel:
    """Loads the base checkpoint, or initializes a fresh model over the corpus vocabulary."""
    if experiment.paths["base_checkpoint"]:
        model = minimlm.load_model(require_path(experiment, "base_checkpoint"))
        logger.info("starting from %s", experiment.paths["base_checkpoint"])
        return model
    vocab = minimlm.build_vocab(corpus, experiment.model["min_count"])
    model_config = ModelConfig(vocab_size=len(vocab),
                               d_model=experiment.model["d_model"],
                               d_ff=experiment.model["d_ff"],
                               n_layers=experiment.model["n_layers"],
                               n_heads=experiment.model["n_heads"],
                               max_len=experiment.model["max_len"],
                               seed=experiment.train.seed)
    return TransformerModel(model_config, vocab)


def train_into(experiment: ExperimentConfig, out_dir: str) -> Dict[str, Any]:
    """Runs one training and writes its artifacts into out_dir; returns the manifest."""
    corpus = read_lines(require_path(experiment, "corpus"))
    model = build_model(experiment, corpus)
    os.makedirs(out_dir, exist_ok=True)
    checkpoint_dir = os.path.join(out_dir, "checkpoints")

    def checkpoint(step: int, current: TransformerModel) -> None:
        os.makedirs(checkpoint_dir, exist_ok=True)
        minimlm.save_model(current, os.path.join(checkpoint_dir, "step%06d.model.json" % step))
        lora.save_adapters(current, os.path.join(checkpoint_dir, "step%06d.adapters.json" % step))

    model, log = trainer.run_strategy(experiment.train, corpus, model, checkpoint)
    paths = {name: os.path.join(out_dir, RUN_FILES[name])
             for name in ("model", "adapters", "train_log", "manifest", "config")}
    minimlm.save_model(model, paths["model"])
    lora.save_adapters(model, paths["adapters"])
    log.write_csv(paths["train_log"])
    if experiment.train.strategy in trainer.DYNAMIC_RANK:
        paths["prune_log"] = os.path.join(out_dir, RUN_FILES["prune_log"])
        rankschedule.write_prune_log(log.prune_events, paths["prune_log"])
    config = Config()
    config.values = copy.deepcopy(experiment.values)
    config.write_config(paths["config"])
    trainable, total = lora.parameter_counts(model)
    manifest = {
        "command": "train",
        "config_hash": config_hash(experiment.values),
        "seed": experiment.train.seed,
        "git_describe": git_describe(),
        "strategy": experiment.train.strategy.value,
        "stage_boundaries": trainer.stage_boundaries(experiment.train),
        "trainable": trainable,
        "total": total,
        "final_loss": log.losses()[-1],
        "files": sorted(os.path.basename(path) for path in paths.values()),
    }
    write_json(manifest, paths["manifest"])
    return manifest


def cmd_train(experiment: ExperimentConfig) -> int:
    """Trains and writes checkpoint, adapters, train log and manifest."""
    manifest = train_into(experiment, experiment.paths["output_dir"])
    logger.info("%s run written to %s (%d of %d parameters trainable)", manifest["strategy"],
                experiment.paths["output_dir"], manifest["trainable"], manifest["total"])
    return errors.EXIT_OK


def load_run(run_dir: str) -> TransformerModel:
    """Loads the base model and adapters of a training run."""
    model = minimlm.load_model(os.path.join(run_dir, RUN_FILES["model"]))
    adapters = os.path.join(run_dir, RUN_FILES["adapters"])
    if os.path.exists(adapters):
        lora.load_adapters(model, adapters)
    return model


def tuning_pool(experiment: ExperimentConfig) -> str:
    """Gets the path name lambda is tuned on: the dev lists, else the training lists."""
    if not experiment.paths["nbest_dev"] and experiment.paths["nbest_train"]:
        return "nbest_train"
    return "nbest_dev"


def pick_lambda(experiment: ExperimentConfig, cache: nbest.LmScoreCache, tune: Optional[bool]) -> float:
    """Gets the rescoring coefficient: explicit, tuned on the dev (or training) lists, or 0."""
    if not tune and experiment.lam is not None:
        return experiment.lam
    pool = tuning_pool(experiment)
    if tune or (tune is None and experiment.paths[pool]):
        dev_lists = nbest.read_nbest(require_path(experiment, pool))
        lam = nbest.tune_coefficient_with_scores(dev_lists, cache.score_lists(dev_lists), experiment.lambda_grid)
        logger.info("tuned lambda %g on %d %s utterances", lam, len(dev_lists), pool)
        return lam
    return 0.0


def evaluate_conditions(experiment: ExperimentConfig, model: TransformerModel, test_lists: List[NBestList],
                        modes: Sequence[PerturbStrategy], lam: float,
                        cache: nbest.LmScoreCache) -> List[Tuple[str, float, float]]:
    """Gets (perturbation, WER %, oracle WER %) for the clean set and each perturbed variant."""
    conditions: List[Tuple[str, List[NBestList]]] = [(CLEAN, test_lists)]
    if modes:
        source = perturb.PhoneticCandidates(perturb.read_lexicon(require_path(experiment, "lexicon")), model.vocab)
        for strategy in modes:
            conditions.append((strategy.value, perturb.perturb_lists(test_lists, experiment.plan(strategy), source)))
    ret = []
    for label, lists in conditions:
        result = nbest.rescore_with_scores(lists, cache.score_lists(lists), lam)
        logger.info("%s: WER %.2f%%, oracle %.2f%% (lambda %g)", label, 100 * result.wer, 100 * result.oracle_wer, lam)
        ret.append((label, 100.0 * result.wer, 100.0 * result.oracle_wer))
    return ret


def _run_name(experiment: ExperimentConfig, run_dir: str) -> str:
    if experiment.model_name:
        return experiment.model_name
    manifest = os.path.join(run_dir, RUN_FILES["manifest"])
    if os.path.exists(manifest):
        with open(manifest, "r", encoding="utf-8") as stream:
            return str(json.load(stream).get("strategy", os.path.basename(os.path.normpath(run_dir))))
    return os.path.basename(os.path.normpath(run_dir))


def cmd_evaluate(experiment: ExperimentConfig, run_dir: str, modes: Sequence[PerturbStrategy],
                 tune: Optional[bool], output: Optional[str]) -> int:
    """Rescores the clean and perturbed test sets; writes a robustness report."""
    model = lora.merge_into_model(load_run(run_dir))
    cache = nbest.LmScoreCache(nbest.model_scorer(model), experiment.workers)
    lam = pick_lambda(experiment, cache, tune)
    test_path = require_path(experiment, "nbest_test")
    conditions = evaluate_conditions(experiment, model, nbest.read_nbest(test_path), modes, lam, cache)
    test_set = os.path.splitext(os.path.basename(test_path))[0]
    rows = nbest.robustness_rows(_run_name(experiment, run_dir), test_set, conditions)
    if output is None:
        output = os.path.join(run_dir, RUN_FILES["report"])
    nbest.write_report(rows, output)
    logger.info("wrote %d report rows to %s", len(rows), output)
    return errors.EXIT_OK


def cmd_perturb(experiment: ExperimentConfig, input_path: str, output_path: str, strategy: PerturbStrategy) -> int:
    """Writes the perturbed copy of an N-best file."""
    vocab = None
    if experiment.paths["corpus"]:
        vocab = minimlm.build_vocab(read_lines(require_path(experiment, "corpus")), experiment.model["min_count"])
    source = perturb.PhoneticCandidates(perturb.read_lexicon(require_path(experiment, "lexicon")), vocab)
    lists = perturb.perturb_lists(nbest.read_nbest(input_path), experiment.plan(strategy), source)
    nbest.write_nbest(lists, output_path)
    logger.info("wrote %d %s lists to %s", len(lists), strategy.value, output_path)
    return errors.EXIT_OK


SWEEP_FIELDS = ["layers", "trainable", "total", "trainable_fraction", "lambda", "wer", "oracle_wer", "delta_wer"]


def cmd_sweep_layers(experiment: ExperimentConfig) -> int:
    """Trains vanilla LoRA on each single layer and on all layers; evaluates each on the clean test set."""
    out_dir = experiment.paths["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    test_lists = nbest.read_nbest(require_path(experiment, "nbest_test"))
    n_layers = experiment.model["n_layers"]
    if experiment.paths["base_checkpoint"]:
        n_layers = minimlm.load_model(require_path(experiment, "base_checkpoint")).config.n_layers
    labels = [str(layer) for layer in range(n_layers)] + ["all"]
    rows: List[List[str]] = []
    failed = 0
    for label in labels:
        run_dir = os.path.join(out_dir, "layer-" + label)
        config = Config()
        config.values = copy.deepcopy(experiment.values)
        config.set("train.strategy", Strategy.LORA.value)
        config.set("train.target_layers", label)
        try:
            manifest = train_into(parse_experiment(config.get_dict()), run_dir)
            model = lora.merge_into_model(load_run(run_dir))
            cache = nbest.LmScoreCache(nbest.model_scorer(model), experiment.workers)
            lam = pick_lambda(experiment, cache, None)
            result = nbest.rescore_with_scores(test_lists, cache.score_lists(test_lists), lam)
        except (errors.WorkbenchError, OSError) as error:
            logger.error("layer %s failed: %s", label, error)
            failed += 1
            continue
        rows.append([label, str(manifest["trainable"]), str(manifest["total"]),
                     "%.6f" % (manifest["trainable"] / manifest["total"]), "%g" % lam,
                     "%.2f" % (100 * result.wer), "%.2f" % (100 * result.oracle_wer),
                     "%.2f" % (100 * (result.wer - result.oracle_wer))])
    path = os.path.join(out_dir, RUN_FILES["sweep"])
    with open(path, "w", encoding="utf-8", newline="") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(SWEEP_FIELDS)
        writer.writerows(rows)
    logger.info("wrote %d sweep rows to %s", len(rows), path)
    return 1 if failed else errors.EXIT_OK


REPORT_MERGED_FIELDS = nbest.REPORT_FIELDS + ["wer_rel_pct"]


def merge_reports(run_dirs: Sequence[str], baseline: Optional[str]) -> List[Dict[str, str]]:
    """Merges the report rows of run directories; runs without manifest or report are skipped."""
    merged: Dict[Tuple[str, str, str], Dict[str, str]] = {}
    for run_dir in run_dirs:
        manifest = os.path.join(run_dir, RUN_FILES["manifest"])
        report = os.path.join(run_dir, RUN_FILES["report"])
        if not os.path.exists(manifest) or not os.path.exists(report):
            logger.warning("skipping %s: no manifest or report", run_dir)
            continue
        for row in nbest.read_report(report):
            merged[(row["test_set"], row["perturbation"], row["model"])] = {
                field: row[field] for field in nbest.REPORT_FIELDS}
    rows = [merged[key] for key in sorted(merged)]
    base_wer = {(row["test_set"], row["perturbation"]): float(row["wer"])
                for row in rows if baseline is not None and row["model"] == baseline}
    for row in rows:
        reference = base_wer.get((row["test_set"], row["perturbation"]))
        if reference:
            row["wer_rel_pct"] = "%.2f" % (100.0 * (reference - float(row["wer"])) / reference)
        else:
            row["wer_rel_pct"] = "-"
    return rows


def format_table(rows: Sequence[Dict[str, str]]) -> str:
    """Renders rows as an aligned text table."""
    widths = {field: max([len(field)] + [len(row[field]) for row in rows]) for field in REPORT_MERGED_FIELDS}
    lines = ["  ".join(field.ljust(widths[field]) for field in REPORT_MERGED_FIELDS)]
    for row in rows:
        lines.append("  ".join(row[field].ljust(widths[field]) for field in REPORT_MERGED_FIELDS))
    return "\n".join(line.rstrip() for line in lines) + "\n"


def cmd_report(run_dirs: Sequence[str], baseline: Optional[str], output: Optional[str]) -> int:
    """Writes the merged table of several runs as CSV and prints it."""
    usable = [run_dir for run_dir in run_dirs
              if os.path.exists(os.path.join(run_dir, RUN_FILES["manifest"]))
              and os.path.exists(os.path.join(run_dir, RUN_FILES["report"]))]
    rows = merge_reports(run_dirs, baseline)
    if not usable:
        logger.error("no usable run directories")
        return 1
    if output:
        with open(output, "w", encoding="utf-8", newline="") as stream:
            writer = csv.DictWriter(stream, fieldnames=REPORT_MERGED_FIELDS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    sys.stdout.write(format_table(rows))
    return errors.EXIT_OK


def cmd_gen_data(args: argparse.Namespace) -> int:
    """Writes a synthetic corpus and N-best splits."""
    synth_config = synth.SynthConfig(utts=args.utts, n_best=args.n_best, noise_rate=args.noise_rate, seed=args.seed,
                                     corpus_lines=args.corpus_lines)
    lexicon = perturb.read_lexicon(args.lexicon) if args.lexicon else None
    synth.write_dataset(synth.generate_dataset(synth_config, lexicon), args.out_dir)
    return errors.EXIT_OK


def add_config_args(parser: argparse.ArgumentParser) -> None:
    """Adds the options every config-driven subcommand shares."""
    parser.add_argument("--config", type=str,
                        help="configuration file")
    parser.add_argument("--set", action="append", metavar="SECTION.OPTION=VALUE",
                        help="override one config value")
    parser.add_argument("--seed", type=int,
                        help="root random seed")


def make_parser() -> argparse.ArgumentParser:
    """Builds the command-line parser."""
    parser = argparse.ArgumentParser(description="LoRA rescoring and N-best robustness workbench")
    parser.add_argument("--verbose", action="store_true",
                        help="log debug messages")
    commands = parser.add_subparsers(dest="command")

    train = commands.add_parser("train", help="train a rescoring model")
    add_config_args(train)
    train.add_argument("--strategy", choices=[strategy.value for strategy in Strategy],
                       help="training strategy")
    train.add_argument("--steps", type=int,
                       help="total training steps")
    train.add_argument("--output-dir", type=str,
                       help="run directory")

    evaluate = commands.add_parser("evaluate", help="rescore clean and perturbed N-best lists")
    add_config_args(evaluate)
    evaluate.add_argument("run_dir", type=str,
                          help="training run directory")
    evaluate.add_argument("--nbest", type=str,
                          help="test N-best JSONL")
    evaluate.add_argument("--perturb", choices=sorted(PERTURB_MODES),
                          help="perturbation conditions besides the clean one")
    coefficient = evaluate.add_mutually_exclusive_group()
    coefficient.add_argument("--lambda", dest="lam", type=float,
                             help="rescoring coefficient")
    coefficient.add_argument("--tune", action="store_true",
                             help="tune the coefficient on the dev set")
    evaluate.add_argument("--output", type=str,
                          help="report CSV (default: report.csv in the run directory)")

    perturb_cmd = commands.add_parser("perturb", help="perturb an N-best file")
    add_config_args(perturb_cmd)
    perturb_cmd.add_argument("input", type=str,
                             help="input N-best JSONL")
    perturb_cmd.add_argument("output", type=str,
                             help="output N-best JSONL")
    perturb_cmd.add_argument("--mode", choices=["one", "n"], default="n",
                             help="perturb the lowest-scoring hypothesis or all of them")
    perturb_cmd.add_argument("--replace-prob", type=float,
                             help="per-token replacement probability")

    sweep = commands.add_parser("sweep-layers", help="train and evaluate single-layer LoRA")
    add_config_args(sweep)
    sweep.add_argument("--output-dir", type=str,
                       help="sweep directory")

    report = commands.add_parser("report", help="merge run reports")
    report.add_argument("run_dirs", nargs="+",
                        help="run directories")
    report.add_argument("--baseline", type=str,
                        help="model name the relative improvement is measured against")
    report.add_argument("--output", type=str,
                        help="merged CSV")

    gen_data = commands.add_parser("gen-data", help="generate a synthetic corpus and N-best lists")
    gen_data.add_argument("--utts", type=int, default=2000,
                          help="number of utterances")
    gen_data.add_argument("--n-best", type=int, default=5,
                          help="hypotheses per utterance")
    gen_data.add_argument("--noise-rate", type=float, default=0.3,
                          help="per-token corruption probability")
    gen_data.add_argument("--seed", type=int, default=0,
                          help="random seed")
    gen_data.add_argument("--corpus-lines", type=int, default=2000,
                          help="language-model corpus lines")
    gen_data.add_argument("--lexicon", type=str, default="data/homophones.tsv",
                          help="homophone lexicon biasing substitutions ('' for none)")
    gen_data.add_argument("--out-dir", type=str, default="data/synth",
                          help="output directory")
    return parser


def load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    """Builds the experiment config: defaults, then the config file, then flags."""
    config = Config()
    config.read_config(args.config)
    config.read_args(args)
    return parse_experiment(config.get_dict())


def run_command(args: argparse.Namespace) -> int:
    """Dispatches a parsed command line."""
    # pylint: disable=too-many-return-statements
    if args.command == "gen-data":
        return cmd_gen_data(args)
    if args.command == "report":
        return cmd_report(args.run_dirs, args.baseline, args.output)
    if args.command == "evaluate" and not args.config:
        saved = os.path.join(args.run_dir, RUN_FILES["config"])
        if os.path.exists(saved):
            args.config = saved
    if args.command == "evaluate" and args.nbest:
        args.set = (args.set or []) + ["paths.nbest_test=" + args.nbest]
    if args.command == "perturb" and args.replace_prob is not None:
        args.set = (args.set or []) + ["perturb.replace_prob=%r" % args.replace_prob]
    experiment = load_experiment(args)
    if args.command == "train":
        return cmd_train(experiment)
    if args.command == "evaluate":
        if args.lam is not None:
            experiment.lam = args.lam
        modes = PERTURB_MODES[args.perturb or experiment.perturb_mode]
        return cmd_evaluate(experiment, args.run_dir, modes, True if args.tune else None, args.output)
    if args.command == "perturb":
        strategy = PerturbStrategy.ONE if args.mode == "one" else PerturbStrategy.ALL
        return cmd_perturb(experiment, args.input, args.output, strategy)
    assert args.command == "sweep-layers"
    return cmd_sweep_layers(experiment)


def main() -> int:
    """Commandline interface."""
    parser = make_parser()
    args = parser.parse_args()
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.command:
        parser.print_usage(sys.stderr)
        return errors.EXIT_CONFIG
    try:
        return run_command(args)
    except errors.ConfigError as error:
        logger.error("invalid config: %s", error)
        return errors.exit_code_for(error)
    except (errors.WorkbenchError, OSError) as error:
        logger.error("%s", error)
        return errors.exit_code_for(error)


if __name__ == '__main__':
    sys.exit(main())

# vim:set shiftwidth=4 softtabstop=4 expandtab:
