"""JSON schemas for every document the command-line tools emit."""
import json
from importlib import resources

NAMES = ("coefficients", "fit_trace", "manifest", "aggregate_report", "conf_train", "predictor",
         "skin_gmm", "eval_report")


def load_schema(name: str) -> dict:
    if name not in NAMES:
        raise KeyError(f"unknown schema {name!r}")
    return json.loads(resources.files(__package__).joinpath(f"{name}.schema.json").read_text())
