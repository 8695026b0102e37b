from dataclasses import replace
import logging

from functions.downstream.helpers import TASK_CODECS
from functions.harness.artifacts import (
    ATTACK_COLUMNS,
    RunPaths,
    codec_keys,
    load_classifier,
    load_codecs,
    load_datasets,
    load_generator,
    load_uap,
    pgm_training_config,
    save_generator,
    save_uap,
    scenario_setup,
    training_settings,
    write_rows,
)
from functions.phy.helpers import OfdmConfig
from shared.config import ExperimentConfig
from shared.error_reporting import ensure_success
from shared.utils import run_job

from .helpers import (
    UAP_MODES,
    PerturbationSource,
    SurrogateEnsemble,
    UniversalPerturbation,
    build_ensemble,
    eval_attack,
    eval_downstream,
    eval_targeted,
    train_pgm,
    train_uap,
)
from .models import Pgm


logger = logging.getLogger(__name__)

ATTACKER = "magmaw"
NON_STEALTH = "magmaw-nonstealth"
TARGETED = "magmaw-targeted"
ABLATION = "magmaw-ablation"


def runnable_tasks(config: ExperimentConfig) -> list[str]:
    """Configured downstream tasks whose codecs are all in the codec grid."""
    tasks = []
    for task in config.evaluation.tasks:
        if all(m in config.codecs.modalities for m in TASK_CODECS[task]):
            tasks.append(task)
        else:
            logger.warning(f"Skipping task '{task}': needs codecs for {TASK_CODECS[task]}")
    return tasks


def has_ablation(config: ExperimentConfig) -> bool:
    return config.pgm.ablation_modalities is not None or config.pgm.ablation_constellations is not None


def attacker_ensemble(config: ExperimentConfig, paths: RunPaths) -> SurrogateEnsemble:
    """Surrogate codecs and classifiers with the attacker's data and channel set."""
    tasks = runnable_tasks(config)
    surrogates = load_codecs(paths, "surrogate", codec_keys(config))
    datasets = load_datasets(paths, [*config.codecs.modalities, *tasks], "attacker")
    downstream = {task: load_classifier(paths, "surrogate", task) for task in tasks}
    cfg = config.ofdm.build()
    return build_ensemble(surrogates, datasets, training_settings(config), config.seed, downstream, config.channel.attacker_channels, cfg.n_fft)


def attack_sources(
    pgm: Pgm,
    mu: int,
    uaps: dict[str, UniversalPerturbation],
    cfg: OfdmConfig,
) -> dict[str, PerturbationSource]:
    """Every baseline for one modality; ``uaps`` maps "vanilla" / "sync-free" to that modality's grid."""
    sources = {
        "none": PerturbationSource("none", mu, pgm.n_rows, cfg=cfg),
        "random": PerturbationSource("random", mu, pgm.n_rows, cfg=cfg),
    }
    for mode, uap in uaps.items():
        sources[f"{mode}-uap"] = PerturbationSource(f"{mode}-uap", mu, pgm.n_rows, uap=uap, cfg=cfg)
    sources["magmaw"] = PerturbationSource("magmaw", mu, pgm.n_rows, pgm=pgm, cfg=cfg)
    return sources


def stage_train_pgm(config: ExperimentConfig) -> dict:
    """
    Train the stealthy generator, a non-stealth variant for detection comparisons, the
    optional targeted and ablation generators, and both UAP baselines per modality.
    """
    paths = RunPaths(config.output_path)
    cfg = config.ofdm.build()
    ensemble = attacker_ensemble(config, paths)
    section = config.pgm

    generators = {ATTACKER: pgm_training_config(config), NON_STEALTH: pgm_training_config(config, stealth=False)}
    if section.target_class is not None:
        generators[TARGETED] = pgm_training_config(config, target_class=section.target_class)
    if has_ablation(config):
        generators[ABLATION] = pgm_training_config(
            config,
            modalities=tuple(section.ablation_modalities) if section.ablation_modalities is not None else None,
            constellations=tuple(section.ablation_constellations) if section.ablation_constellations is not None else None,
            tasks=(),
        )

    results = []
    for name, training in generators.items():

        def job(name=name, training=training) -> dict:
            trained = train_pgm(ensemble, training, config.seed, cfg, name=name)
            final = trained.history[-1]["objective"] if trained.history else None
            return {"outputs": [str(save_generator(paths, name, trained.pgm, training.mu))], "final_objective": final}

        results.append(run_job(f"generator/{name}", job))

    uap_training = pgm_training_config(config, epochs=config.training.uap_epochs)
    constellation = config.codecs.constellations[0]
    for mode in UAP_MODES:
        for modality in config.codecs.modalities:

            def job(mode=mode, modality=modality) -> dict:
                uap = train_uap(ensemble, mode, modality, constellation, uap_training, config.seed, cfg)
                return {"outputs": [str(save_uap(paths, uap))]}

            results.append(run_job(f"uap/{mode}-{modality}", job))

    ensure_success(results, "train-pgm")
    return {"outputs": [p for r in results for p in r["outputs"]], "generators": list(generators), "uaps": len(results) - len(generators)}


def stage_attack_sweep(config: ExperimentConfig) -> dict:
    """One row per (scenario, modality or task, PSR, baseline); targeted and ablation rows when configured."""
    paths = RunPaths(config.output_path)
    cfg = config.ofdm.build()
    modalities = list(config.codecs.modalities)
    tasks = runnable_tasks(config)
    targets = load_codecs(paths, "target", codec_keys(config))
    datasets = load_datasets(paths, [*modalities, *tasks], "victim")
    classifiers = {task: load_classifier(paths, "target", task) for task in tasks}
    pgm, mu = load_generator(paths, ATTACKER)
    uaps = {modality: {mode: load_uap(paths, mode, modality) for mode in UAP_MODES} for modality in modalities}
    targeted = load_generator(paths, TARGETED)[0] if config.pgm.target_class is not None else None
    ablation = load_generator(paths, ABLATION)[0] if has_ablation(config) else None

    rows = []
    for scenario in config.scenarios:
        setup = scenario_setup(config, scenario)
        for psr_db in config.evaluation.psr_sweep:
            for modality in modalities:
                codecs = [c for c in targets if c.modality == modality]
                rows.extend(eval_attack(attack_sources(pgm, mu, uaps[modality], cfg), codecs, {modality: datasets[modality]}, psr_db, setup))
            for task in tasks:
                sources = attack_sources(pgm, mu, uaps[TASK_CODECS[task][0]], cfg)
                rows.extend(eval_downstream(sources, targets, classifiers[task], datasets[task], psr_db, setup))
                if targeted is not None:
                    sources = {**sources, "magmaw": PerturbationSource("magmaw", mu, targeted.n_rows, pgm=targeted, cfg=cfg)}
                    rows.extend(eval_targeted(sources, targets, classifiers[task], datasets[task], psr_db, setup, config.pgm.target_class))
        if ablation is not None:
            ablation_setup = replace(setup, scenario=f"{scenario.name}-ablation")
            for psr_db in config.evaluation.psr_sweep:
                for modality in modalities:
                    sources = attack_sources(ablation, mu, {}, cfg)
                    codecs = [c for c in targets if c.modality == modality]
                    rows.extend(eval_attack(sources, codecs, {modality: datasets[modality]}, psr_db, ablation_setup))

    path = write_rows(rows, paths.result("attack_sweep"), ATTACK_COLUMNS, config.config_hash)
    return {"outputs": [str(path)], "rows": len(rows)}
