"""Delimited-text readers and writers.

All files are UTF-8, comma separated, with a header row and LF line endings.
Floats are written with 17 significant digits so that files round-trip and
identical runs give identical bytes.
"""
import os

import numpy as np
import pandas as pd

from .errors import InputError

SCHEMAS = {
    "groups": ["obs", "unit", "slope", "outcome"],
    "spells": ["worker", "firm", "period"],
    "akm_outcomes": ["worker", "period", "outcome"],
    "exposures": ["child", "neighborhood", "exposure", "od_cell"],
    "exposure_outcomes": ["child", "outcome"],
    "truth": ["param", "value"],
    "estimates": ["effect", "kind", "unit", "eta_hat", "post_mean", "post_sd"],
    "quantities": ["quantity", "strategy", "value", "mc_draws", "seed"],
    "mc_report": ["quantity", "strategy", "mean", "truth", "bias", "mc_se", "bias_se", "mse", "replications"],
}

# columns that must parse as numbers (empty allowed where noted)
_NUMERIC = {
    "groups": {"outcome": False, "slope": True},
    "akm_outcomes": {"outcome": False},
    "exposures": {"exposure": False},
    "exposure_outcomes": {"outcome": False},
}


def write_csv(df, path, schema=None):
    if schema is not None:
        df = df.loc[:, SCHEMAS[schema]]
    try:
        df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_csv(path, schema):
    """Read and validate a file against one of the known layouts.

    Raises ``InputError`` naming the file, row (1-based, header excluded)
    and column of the first violation.
    """
    if not os.path.exists(path):
        raise InputError(f"{path}: file not found")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, UnicodeDecodeError, pd.errors.EmptyDataError) as exc:
        raise InputError(f"{path}: cannot parse ({exc})") from exc
    expected = SCHEMAS[schema]
    if list(df.columns) != expected:
        raise InputError(f"{path}: header {','.join(map(str, df.columns))!r} does not match "
                         f"expected {','.join(expected)!r}")
    if df.empty:
        raise InputError(f"{path}: no data rows")
    out = pd.DataFrame(index=df.index)
    for col in expected:
        raw = df[col].str.strip()
        if col in _NUMERIC.get(schema, {}):
            allow_empty = _NUMERIC[schema][col]
            vals = pd.to_numeric(raw.where(raw != "", None), errors="coerce")
            bad = vals.isna() & ~((raw == "") & allow_empty) | np.isinf(vals.fillna(0))
            if bad.any():
                i = int(np.flatnonzero(bad.to_numpy())[0])
                raise InputError(f"{path}: row {i + 1}, column {col}: {df[col].iloc[i]!r} is not a finite number")
            out[col] = vals.astype(float)
        else:
            if (raw == "").any():
                i = int(np.flatnonzero((raw == "").to_numpy())[0])
                raise InputError(f"{path}: row {i + 1}, column {col}: empty value")
            out[col] = _ids(raw)
    return out


def _ids(raw):
    """Identifiers as integers when they all are, strings otherwise."""
    as_int = pd.to_numeric(raw, errors="coerce")
    if as_int.notna().all() and (as_int == np.round(as_int)).all():
        return as_int.astype(np.int64)
    return raw


def truth_frame(ds):
    """``param,value`` rows for a synthetic dataset."""
    t = ds.truth
    rows = []
    if ds.config.archetype == "simple_means":
        rows += [(f"eta:{j}", v) for j, v in enumerate(t["eta"])]
        rows += [("mu_eta", t["mu_eta"]), ("sigma_eta2", t["sigma_eta2"]), ("sigma_v2", t["sigma_v2"])]
    else:
        if ds.design is not None:
            rows += [(f"{lab.unit_kind}:{lab.unit_id}", v) for lab, v in zip(ds.design.col_labels, t["eta"])]
        if ds.config.archetype == "akm":
            rows += [("var_alpha", t["var_alpha"]), ("var_psi", t["var_psi"]), ("sigma2", t["sigma2"])]
        else:
            rows += [("var_eta", t["var_eta"]), ("sigma2", t["sigma2"])]
    return pd.DataFrame(rows, columns=["param", "value"])


def write_dataset(ds, out_dir):
    """Write the input tables and ``truth.csv``; returns the written paths."""
    paths = []
    names = {"groups": ("groups.csv", "groups"), "spells": ("spells.csv", "spells"),
             "exposures": ("exposures.csv", "exposures")}
    outcome_schema = {"akm": "akm_outcomes", "exposure": "exposure_outcomes"}
    for key, df in ds.inputs.items():
        if key == "outcomes":
            fname, schema = "outcomes.csv", outcome_schema[ds.config.archetype]
        else:
            fname, schema = names[key]
        path = os.path.join(out_dir, fname)
        write_csv(df, path, schema)
        paths.append(path)
    path = os.path.join(out_dir, "truth.csv")
    write_csv(truth_frame(ds), path, "truth")
    paths.append(path)
    return paths
