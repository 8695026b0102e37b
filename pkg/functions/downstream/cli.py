import logging

from functions.harness.artifacts import RunPaths, load_datasets, save_classifier
from shared.config import ExperimentConfig
from shared.error_reporting import ensure_success
from shared.rng import stream
from shared.utils import run_job

from .helpers import train_classifier
from .models import Classifier


logger = logging.getLogger(__name__)


def stage_train_downstream(config: ExperimentConfig) -> dict:
    """Target classifiers on victim data, surrogates (wider hidden layer) on attacker data."""
    paths = RunPaths(config.output_path)
    tasks = list(config.evaluation.tasks)
    training = config.training
    datasets = {owner: load_datasets(paths, tasks, owner) for owner in ("victim", "attacker")}
    roles = {"target": ("victim", 0), "surrogate": ("attacker", config.codecs.surrogate_hidden_delta)}

    results = []
    for task in tasks:
        for role, (owner, hidden_delta) in roles.items():

            def job(task=task, role=role, owner=owner, hidden_delta=hidden_delta) -> dict:
                classifier = Classifier(task, stream(config.seed, "init", role, task), role, hidden_delta=hidden_delta)
                dataset = datasets[owner][task]
                trained = train_classifier(classifier, dataset, training.downstream_epochs, config.seed, training.batch_size, training.lr)
                return {"outputs": [str(save_classifier(paths, trained.classifier))], "val_accuracy": trained.val_accuracy}

            results.append(run_job(f"{role}/{task}", job))

    ensure_success(results, "train-downstream")
    return {"outputs": [p for r in results for p in r["outputs"]], "classifiers_trained": len(results)}
