import json

import pytest

from subchal.simulate import (
    CovariateGenerator,
    GeneratorConfig,
    OutcomeModel,
    StudyPlan,
    generate_trial,
    schema_from_config,
)
from subchal.trial_data import save_dataset, save_schema


ROUND_CONFIG = GeneratorConfig(
    studies=(StudyPlan("TRAIN", 150, 150),),
    holdout=StudyPlan("HOLDOUT", 190, 190),
    covariates=(
        CovariateGenerator("CRPSI", "numeric", "lognormal", {"mu": 1.7, "sigma": 0.9}, 0.02),
        CovariateGenerator("AGE", "numeric", "normal", {"mean": 48, "sd": 12}),
        CovariateGenerator("WEIGHT", "numeric", "normal", {"mean": 85, "sd": 16}),
        CovariateGenerator("NAVTNF", "boolean", "bernoulli", {"p": 0.7}),
        CovariateGenerator("MTXUSE", "boolean", "bernoulli", {"p": 0.5}),
    ),
    outcome=OutcomeModel(
        intercept=-1.2,
        treatment=1.0,
        covariate_effects={"CRPSI": 0.02, "AGE": -0.01},
    ),
    discontinuation_rate=0.05,
    adjustment_covariates=("WEIGHT", "NAVTNF"),
)

SUBMISSIONS = [
    {"team_id": "ares", "subgroup": "CRPSI > 6", "delta_pred": 0.30, "sigma_pred": 0.10,
     "methods": "threshold screening on inflammation"},
    {"team_id": "briseis", "subgroup": "AGE < 45 & CRPSI > 3", "delta_pred": 0.28, "sigma_pred": 0.08,
     "methods": "clinical priors plus cutpoint scan"},
    {"team_id": "castor", "subgroup": "MTXUSE == 1", "delta_pred": 0.22, "sigma_pred": 0.12,
     "methods": "single-flag subgroup"},
    {"team_id": "danae", "subgroup": "AGE > 70", "delta_pred": 0.4, "sigma_pred": 0.05,
     "methods": "tail bet, probably too small"},
]


@pytest.fixture(scope="session")
def round_dir(tmp_path_factory):
    """A complete synthetic round on disk: holdout, schema, submissions."""
    root = tmp_path_factory.mktemp("round")
    holdout = generate_trial(ROUND_CONFIG, 1, seed=42)
    save_dataset(holdout, root / "holdout.csv")
    save_schema(schema_from_config(ROUND_CONFIG), root / "schema.json")
    subs = root / "submissions"
    subs.mkdir()
    for doc in SUBMISSIONS:
        (subs / f"{doc['team_id']}.json").write_text(json.dumps(doc, indent=2))
    (root / "model_config.json").write_text(
        json.dumps({"adjustment_covariates": ["WEIGHT", "NAVTNF"]})
    )
    return root
