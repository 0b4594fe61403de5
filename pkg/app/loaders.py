"""
CSV ingestion and serialization of unit samples and auxiliary counts.

Unit file header: ``domain_id``, then ``x1_*`` columns, ``x2_*`` columns and
either ``z1, z2`` (original scale, transformed on load) or ``y1, y2``
(model scale). Line numbers in diagnostics count the header as line 1.
"""

import logging
from typing import Optional

import numpy as np
import pandas as pd

from app.errors import DataError
from app.models import AuxCounts, SampleData
from app.transforms import IDENTITY, Transform
from app.utils import write_csv


logger = logging.getLogger(__name__)

MAX_DIAGNOSTICS = 20


def _read_table(path: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except FileNotFoundError as exc:
        raise DataError(f"file not found: {path}") from exc
    except pd.errors.EmptyDataError as exc:
        raise DataError(f"{path}: file is empty") from exc
    except pd.errors.ParserError as exc:
        raise DataError(f"{path}: ragged row ({exc})") from exc


def _raise(path: str, problems: list[str]) -> None:
    if not problems:
        return
    shown = problems[:MAX_DIAGNOSTICS]
    more = len(problems) - len(shown)
    detail = "; ".join(shown) + (f"; ... {more} more" if more else "")
    raise DataError(f"{path}: {detail}")


def _numeric(frame: pd.DataFrame, columns: list[str], problems: list[str]) -> np.ndarray:
    """Parse columns as finite floats, recording one diagnostic per bad cell."""
    out = np.empty((len(frame), len(columns)))
    for k, column in enumerate(columns):
        raw = frame[column]
        values = pd.to_numeric(raw.str.strip(), errors="coerce").to_numpy(dtype=np.float64)
        for i in np.flatnonzero(~np.isfinite(values)):
            text = raw.iloc[i]
            if pd.isna(text) or str(text).strip() == "":
                problems.append(f"line {i + 2}: missing value in column '{column}' (ragged row?)")
            else:
                problems.append(f"line {i + 2}: non-numeric value '{text}' in column '{column}'")
        out[:, k] = values
    return out


def _covariate_columns(path: str, columns: list[str], prefix: str) -> list[str]:
    found = [c for c in columns if c.startswith(prefix)]
    if not found:
        raise DataError(f"{path}: header has no '{prefix}*' columns")
    return found


def _domain_ids(frame: pd.DataFrame, problems: list[str]) -> list[str]:
    ids = frame["domain_id"].fillna("").astype(str).str.strip()
    for i in np.flatnonzero((ids == "").to_numpy()):
        problems.append(f"line {i + 2}: missing domain_id")
    return ids.tolist()


def load_unit_csv(path: str, transform: Transform = IDENTITY) -> SampleData:
    """
    Load a unit-level sample.

    With ``z1, z2`` columns the transform is applied to obtain the model-scale
    responses; with ``y1, y2`` they are used as given.

    Raises:
        DataError: with one diagnostic per offending row (line numbers included).
    """
    frame = _read_table(path)
    columns = [c.strip() for c in frame.columns]
    frame.columns = columns
    if not columns or columns[0] != "domain_id":
        raise DataError(f"{path}: first column must be 'domain_id'")
    x1_cols = _covariate_columns(path, columns, "x1_")
    x2_cols = _covariate_columns(path, columns, "x2_")
    if {"z1", "z2"} <= set(columns):
        response_cols, original_scale = ["z1", "z2"], True
    elif {"y1", "y2"} <= set(columns):
        response_cols, original_scale = ["y1", "y2"], False
    else:
        raise DataError(f"{path}: header needs response columns 'z1, z2' or 'y1, y2'")
    unknown = set(columns) - {"domain_id", *x1_cols, *x2_cols, *response_cols}
    if unknown:
        raise DataError(f"{path}: unexpected columns {sorted(unknown)}")

    problems: list[str] = []
    domain_ids = _domain_ids(frame, problems)
    x1 = _numeric(frame, x1_cols, problems)
    x2 = _numeric(frame, x2_cols, problems)
    resp = _numeric(frame, response_cols, problems)
    if original_scale and transform.positive:
        for i, k in np.argwhere(resp <= 0):
            problems.append(
                f"line {i + 2}: non-positive {response_cols[k]} = {frame[response_cols[k]].iloc[i]} "
                f"under the {transform.name} transform"
            )
    _raise(path, problems)

    y = transform.forward(resp) if original_scale else resp
    registry = list(dict.fromkeys(domain_ids))
    position = {d: i for i, d in enumerate(registry)}
    sample = SampleData(
        domain_ids=registry,
        domain_index=[position[d] for d in domain_ids],
        x1=x1,
        x2=x2,
        y=y,
    )
    logger.info("[LOAD] %d units in %d domains from %s", sample.n, sample.D, path)
    return sample


def write_unit_csv(sample: SampleData, path: str, transform: Optional[Transform] = None) -> str:
    """
    Write a sample in the unit-file schema: ``y1, y2`` by default, or
    ``z1, z2`` = g^{-1}(y) when a transform is given.
    """
    frame = pd.DataFrame({"domain_id": [sample.domain_ids[d] for d in sample.domain_index]})
    for k in range(sample.p1):
        frame[f"x1_{k + 1}"] = sample.x1[:, k]
    for k in range(sample.p2):
        frame[f"x2_{k + 1}"] = sample.x2[:, k]
    if transform is None:
        frame["y1"], frame["y2"] = sample.y[:, 0], sample.y[:, 1]
    else:
        z = transform.inverse(sample.y)
        frame["z1"], frame["z2"] = z[:, 0], z[:, 1]
    return write_csv(frame, path)


def load_patterns_csv(path: str) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Pattern dictionary: ``pattern_id`` then ``x1_*`` and ``x2_*`` columns."""
    frame = _read_table(path)
    columns = [c.strip() for c in frame.columns]
    frame.columns = columns
    if not columns or columns[0] != "pattern_id":
        raise DataError(f"{path}: first column must be 'pattern_id'")
    x1_cols = _covariate_columns(path, columns, "x1_")
    x2_cols = _covariate_columns(path, columns, "x2_")
    problems: list[str] = []
    ids = frame["pattern_id"].fillna("").astype(str).str.strip().tolist()
    seen = set()
    for i, pid in enumerate(ids):
        if pid == "":
            problems.append(f"line {i + 2}: missing pattern_id")
        elif pid in seen:
            problems.append(f"line {i + 2}: duplicate pattern_id '{pid}'")
        seen.add(pid)
    x1 = _numeric(frame, x1_cols, problems)
    x2 = _numeric(frame, x2_cols, problems)
    _raise(path, problems)
    return ids, x1, x2


def load_aux_csv(path: str, patterns_path: str, sample: Optional[SampleData] = None) -> AuxCounts:
    """
    Aggregated counts (``domain_id, pattern_id, N_dt``) joined with the pattern
    dictionary. Pairs not listed count as N_dt = 0. Domains listed here but
    absent from the sample are kept as unsampled domains.

    Raises:
        DataError: unknown pattern, duplicate or invalid counts, or, when a
            sample is given, a sampled domain missing from the counts or
            N_dt < n_dt.
    """
    pattern_ids, x1, x2 = load_patterns_csv(patterns_path)
    frame = _read_table(path)
    frame.columns = [c.strip() for c in frame.columns]
    missing = {"domain_id", "pattern_id", "N_dt"} - set(frame.columns)
    if missing:
        raise DataError(f"{path}: header is missing columns {sorted(missing)}")

    problems: list[str] = []
    domain_ids = _domain_ids(frame, problems)
    pids = frame["pattern_id"].fillna("").astype(str).str.strip().tolist()
    counts_raw = _numeric(frame, ["N_dt"], problems)[:, 0]
    t_index = {p: t for t, p in enumerate(pattern_ids)}
    registry = list(dict.fromkeys(domain_ids))
    d_index = {d: i for i, d in enumerate(registry)}
    counts = np.zeros((len(registry), len(pattern_ids)), dtype=np.int64)
    seen = set()
    for i, (d, p, n) in enumerate(zip(domain_ids, pids, counts_raw)):
        if p not in t_index:
            problems.append(f"line {i + 2}: unknown pattern_id '{p}'")
            continue
        if (d, p) in seen:
            problems.append(f"line {i + 2}: duplicate count for domain '{d}', pattern '{p}'")
            continue
        seen.add((d, p))
        if np.isfinite(n) and (n < 0 or n != np.round(n)):
            problems.append(f"line {i + 2}: N_dt must be a non-negative integer, got {n}")
            continue
        if np.isfinite(n):
            counts[d_index[d], t_index[p]] = int(n)
    _raise(path, problems)

    aux = AuxCounts(
        domain_ids=registry,
        pattern_ids=pattern_ids,
        pattern_x1=x1,
        pattern_x2=x2,
        counts=counts,
    )
    if sample is not None:
        absent = [d for d, n in zip(sample.domain_ids, sample.n_d) if n > 0 and d not in d_index]
        if absent:
            raise DataError(f"{path}: sampled domains missing from the counts: {absent}")
        aux.match_sample(sample)
    logger.info("[LOAD] counts for %d domains x %d patterns from %s", aux.D, aux.T, path)
    return aux


def load_population_csv(path: str) -> AuxCounts:
    """
    Full population covariate file (``domain_id, x1_*, x2_*``); every distinct
    covariate pair becomes a pattern.
    """
    frame = _read_table(path)
    columns = [c.strip() for c in frame.columns]
    frame.columns = columns
    if not columns or columns[0] != "domain_id":
        raise DataError(f"{path}: first column must be 'domain_id'")
    x1_cols = _covariate_columns(path, columns, "x1_")
    x2_cols = _covariate_columns(path, columns, "x2_")
    problems: list[str] = []
    domain_ids = _domain_ids(frame, problems)
    x1 = _numeric(frame, x1_cols, problems)
    x2 = _numeric(frame, x2_cols, problems)
    _raise(path, problems)
    aux = AuxCounts.from_population(domain_ids, x1, x2)
    logger.info("[LOAD] population of %d units, %d patterns from %s", len(domain_ids), aux.T, path)
    return aux
