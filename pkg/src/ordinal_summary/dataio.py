"""CSV ingestion and export of trial datasets."""

import csv
from dataclasses import dataclass

import numpy as np

from .ppo import TrialDataset


class SchemaError(ValueError):
    """A referenced column is missing or a value cannot be parsed."""


class LabelError(ValueError):
    """An outcome or arm label has no mapping."""


@dataclass
class CsvSchema:
    outcome: str = "y"
    arm: str = "arm"
    control_label: str = "control"
    covariates: tuple = ()
    levels: tuple = None


def _level_map(values, levels):
    """Map raw outcome strings to levels 1..K; returns (mapping, level names)."""
    if levels:
        mapping = {str(lab): i + 1 for i, lab in enumerate(levels)}
        missing = sorted({v for v in values if v not in mapping})
        if missing:
            raise LabelError(f"outcome labels {missing[:5]} are not among --levels {list(levels)}")
        return mapping, [str(lab) for lab in levels]
    try:
        nums = {v: float(v) for v in set(values)}
    except ValueError:
        raise LabelError("outcome labels are not integers; pass the ordered labels with --levels") from None
    if any(x != int(x) or x < 1 for x in nums.values()):
        raise LabelError("integer outcomes must be whole numbers starting at 1")
    K = int(max(nums.values()))
    mapping = {v: int(x) for v, x in nums.items()}
    return mapping, [str(i) for i in range(1, K + 1)]


def read_trial_csv(path, schema):
    """Load a trial dataset; returns ``(dataset, labels)``.

    ``labels`` records the outcome level names and the arm labels so that
    :func:`write_trial_csv` can reproduce the input.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    needed = [schema.outcome, schema.arm, *schema.covariates]
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError(f"columns {missing} not found in {path} (header: {header})")
    if not rows:
        raise SchemaError(f"{path} has no data rows")

    arms = [r[schema.arm].strip() for r in rows]
    arm_labels = sorted(set(arms))
    if schema.control_label not in arm_labels:
        raise LabelError(f"control label {schema.control_label!r} not found in column {schema.arm!r}")
    others = [a for a in arm_labels if a != schema.control_label]
    if len(others) != 1:
        raise LabelError(f"expected exactly one treatment label besides the control, found {others}")
    treatment_label = others[0]

    values = [r[schema.outcome].strip() for r in rows]
    mapping, level_names = _level_map(values, schema.levels)
    y = np.array([mapping[v] for v in values])
    X = np.zeros((len(rows), len(schema.covariates)))
    for j, col in enumerate(schema.covariates):
        try:
            X[:, j] = [float(r[col]) for r in rows]
        except ValueError:
            raise SchemaError(f"covariate column {col!r} has non-numeric values") from None
    if not np.all(np.isfinite(X)):
        raise SchemaError("covariates must be finite")
    dataset = TrialDataset(np.array(arms) == treatment_label, y, len(level_names), X)
    labels = {"levels": level_names, "control": schema.control_label, "treatment": treatment_label}
    return dataset, labels


def write_trial_csv(dataset, path, schema, labels):
    """Inverse of :func:`read_trial_csv`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([schema.outcome, schema.arm, *schema.covariates])
        for i in range(dataset.n):
            arm = labels["treatment"] if dataset.treated[i] else labels["control"]
            writer.writerow([labels["levels"][dataset.y[i] - 1], arm, *(repr(float(v)) for v in dataset.X[i])])
