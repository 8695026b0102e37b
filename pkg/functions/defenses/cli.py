import logging

from functions.attack.cli import ATTACKER, NON_STEALTH, runnable_tasks
from functions.attack.helpers import PerturbationSource, build_ensemble
from functions.harness.artifacts import (
    DEFENSE_COLUMNS,
    DETECTION_COLUMNS,
    RunPaths,
    codec_keys,
    load_classifier,
    load_codecs,
    load_datasets,
    load_generator,
    pgm_training_config,
    save_codec,
    save_generator,
    scenario_setup,
    training_settings,
    write_rows,
)
from shared.config import ExperimentConfig
from shared.error_reporting import ensure_success
from shared.utils import run_job

from .helpers import DefenderPgm, DetectionBudget, adversarial_train, build_defender_pgm, eval_defenses, eval_detection


logger = logging.getLogger(__name__)

DEFENDER = "defender"


def stage_defend(config: ExperimentConfig) -> dict:
    """
    Train the defender's generator against the receiver's own codecs, harden every
    target codec with it, then evaluate all defenses against the attacker's generator.
    """
    paths = RunPaths(config.output_path)
    cfg = config.ofdm.build()
    settings = training_settings(config)
    training = config.training
    modalities = list(config.codecs.modalities)
    tasks = runnable_tasks(config)
    targets = load_codecs(paths, "target", codec_keys(config))
    datasets = load_datasets(paths, [*modalities, *tasks], "victim")
    classifiers = {task: load_classifier(paths, "target", task) for task in tasks}
    attacker, mu = load_generator(paths, ATTACKER)

    own = build_ensemble(targets, datasets, settings, config.seed, classifiers, config.channel.attacker_channels, cfg.n_fft)
    defender = build_defender_pgm(own, attacker, pgm_training_config(config), config.seed, cfg)
    outputs = [str(save_generator(paths, DEFENDER, defender.pgm, defender.mu))]

    results, hardened = [], {}
    for codec in targets:

        def job(codec=codec) -> dict:
            trained = adversarial_train(
                codec,
                datasets[codec.modality],
                defender,
                own.attacker_channels,
                settings,
                training.adversarial_epochs,
                config.seed,
                tuple(config.pgm.psr_range),
                training.batch_size,
                training.lr,
                cfg,
            )
            hardened[codec.key.slug] = trained.codec
            return {"outputs": [str(save_codec(paths, trained.codec))], "clean_val_loss": trained.clean_val_loss}

        results.append(run_job(f"hardened/{codec.key.slug}", job))
    ensure_success(results, "defend")
    outputs += [p for r in results for p in r["outputs"]]

    source = PerturbationSource("magmaw", mu, attacker.n_rows, pgm=attacker, cfg=cfg)
    rows = []
    for scenario in config.scenarios:
        setup = scenario_setup(config, scenario, trials=config.evaluation.defense_trials)
        for psr_db in config.evaluation.psr_sweep:
            rows.extend(eval_defenses(source, targets, {m: datasets[m] for m in modalities}, psr_db, setup, defender, hardened))

    outputs.append(str(write_rows(rows, paths.result("defenses"), DEFENSE_COLUMNS, config.config_hash)))
    return {"outputs": outputs, "rows": len(rows), "hardened_codecs": len(hardened)}


def stage_detect(config: ExperimentConfig) -> dict:
    """Detector AUC against the stealthy and non-stealth generators, before and after fine-tuning."""
    paths = RunPaths(config.output_path)
    cfg = config.ofdm.build()
    modalities = list(config.codecs.modalities)
    targets = load_codecs(paths, "target", codec_keys(config))
    datasets = load_datasets(paths, modalities, "victim")
    defender_pgm, defender_mu = load_generator(paths, DEFENDER)
    defender = DefenderPgm(defender_pgm, defender_mu)
    attackers = {}
    for name in (ATTACKER, NON_STEALTH):
        pgm, mu = load_generator(paths, name)
        attackers[name] = PerturbationSource("magmaw", mu, pgm.n_rows, pgm=pgm, cfg=cfg)

    items = config.evaluation.detection_items
    budget = DetectionBudget(offline_items=items, online_items=max(1, items // 2), test_items=items)
    rows = []
    for scenario in config.scenarios:
        setup = scenario_setup(config, scenario)
        for psr_db in config.evaluation.psr_sweep:
            for modality in modalities:
                codec = next(c for c in targets if c.modality == modality)
                rows.extend(eval_detection(codec, datasets[modality], defender, attackers, psr_db, setup, budget))

    path = write_rows(rows, paths.result("detection"), DETECTION_COLUMNS, config.config_hash)
    return {"outputs": [str(path)], "rows": len(rows)}
