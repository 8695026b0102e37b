import logging

from functions.harness.artifacts import RunPaths, codec_keys, load_datasets, save_codec, training_settings
from shared.config import ExperimentConfig
from shared.error_reporting import ensure_success
from shared.utils import run_job

from .helpers import build_codec, train_jscc


logger = logging.getLogger(__name__)


def stage_train_jscc(config: ExperimentConfig) -> dict:
    """
    Train every codec in the (modality, constellation, rate) grid twice: a target on
    victim data with the template architecture and a surrogate on attacker data with the
    configured width/depth/hidden deltas.
    """
    paths = RunPaths(config.output_path)
    grid = config.codecs
    settings = training_settings(config)
    cfg = config.ofdm.build()
    training = config.training
    datasets = {owner: load_datasets(paths, grid.modalities, owner) for owner in ("victim", "attacker")}
    roles = {
        "target": ("victim", (0, 0, 0)),
        "surrogate": ("attacker", (grid.surrogate_width_delta, grid.surrogate_depth_delta, grid.surrogate_hidden_delta)),
    }

    results = []
    for key in codec_keys(config):
        for role, (owner, deltas) in roles.items():

            def job(key=key, role=role, owner=owner, deltas=deltas) -> dict:
                codec = build_codec(key, config.seed, role, *deltas)
                dataset = datasets[owner][key.modality]
                trained = train_jscc(codec, dataset, settings, training.jscc_epochs, config.seed, training.batch_size, training.lr, cfg=cfg)
                return {"outputs": [str(save_codec(paths, trained.codec))], "final_val_loss": trained.final_val_loss}

            results.append(run_job(f"{role}/{key.slug}", job))

    ensure_success(results, "train-jscc")
    logger.info(f"Trained {len(results)} codecs")
    return {"outputs": [p for r in results for p in r["outputs"]], "codecs_trained": len(results)}
