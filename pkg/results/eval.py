"""
Evaluation metrics: micro-average precision, precision/recall at a
threshold, threshold calibration and facial-recognition metrics.

Pair scores are carried in a pandas DataFrame with the columns
query_id, ref_id, distance, is_true_match. A list of PairScore tuples is
accepted anywhere a frame is.
"""
import json
import os
from collections import namedtuple

import numpy as np
import pandas as pd

from utils.errors import ShapeError, UnachievablePrecisionError

PairScore = namedtuple("PairScore", ["query_id", "ref_id", "distance", "is_true_match"])

C_PAIR_COLUMNS = list(PairScore._fields)
C_FR_COLUMNS = ["is_target", "flagged"]
# precision targets for the T@90 / T@95 / T@99 thresholds
C_THRESHOLD_SPECS = {"p90": 0.90, "p95": 0.95, "p99": 0.99}


class FrReport(namedtuple("FrReport", ["recall", "fp_per_million", "precision", "f1"])):
    __slots__ = ()

    def as_dict(self):
        return dict(self._asdict())


def as_pair_frame(pairs):
    """ Normalise pair scores to a DataFrame, rejecting duplicate pairs
    """
    if isinstance(pairs, pd.DataFrame):
        df = pairs.loc[:, C_PAIR_COLUMNS].copy()
    else:
        df = pd.DataFrame(list(pairs), columns=C_PAIR_COLUMNS)
    df["distance"] = df["distance"].astype(np.float64)
    df["is_true_match"] = df["is_true_match"].astype(bool)
    if df.duplicated(subset=["query_id", "ref_id"]).any():
        raise ShapeError("each (query_id, ref_id) pair may appear only once")
    return df


def pair_frame(query_ids, ref_ids, distances, true_matches):
    """ Build the all-pairs score frame from a distance matrix

    @param query_ids Sequence of n query identifiers
    @param ref_ids Sequence of m reference identifiers
    @param distances Array-like of shape (n, m)
    @param true_matches Mapping query_id -> ref_id for queries with a copy
        in the references
    """
    distances = np.asarray(distances, dtype=np.float64)
    n, m = len(query_ids), len(ref_ids)
    if distances.shape != (n, m):
        raise ShapeError("distance matrix has shape {}, expected {}".format(distances.shape, (n, m)))
    ref_index = {ref_id: j for j, ref_id in enumerate(ref_ids)}
    is_match = np.zeros((n, m), dtype=bool)
    for i, query_id in enumerate(query_ids):
        j = ref_index.get(true_matches.get(query_id))
        if j is not None:
            is_match[i, j] = True
    return pd.DataFrame({"query_id": np.repeat(np.asarray(query_ids), m),
                         "ref_id": np.tile(np.asarray(ref_ids), n),
                         "distance": distances.ravel(),
                         "is_true_match": is_match.ravel()})


def _sorted_pairs(df):
    # ties are broken by (query_id, ref_id) so the result does not depend on input order
    return df.sort_values(["distance", "query_id", "ref_id"], kind="mergesort")


def micro_average_precision(pairs):
    """ Area under the pairwise precision-recall curve

    Walks the pairs by ascending distance and sums precision at every rank
    holding a true match, weighted by the recall increment 1 / n_true.
    """
    df = as_pair_frame(pairs)
    n_true = int(df["is_true_match"].sum())
    if n_true == 0:
        raise ValueError("micro-average precision needs at least one true match")
    hits = _sorted_pairs(df)["is_true_match"].to_numpy()
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / n_true)


def precision_recall_at(pairs, threshold):
    """ Precision and recall when flagging every pair with distance < threshold
    """
    df = as_pair_frame(pairs)
    if len(df) == 0:
        raise ValueError("no pairs to evaluate")
    flagged = df["distance"].to_numpy() < threshold
    truth = df["is_true_match"].to_numpy()
    n_flagged = int(flagged.sum())
    n_true = int(truth.sum())
    tp = int((flagged & truth).sum())
    precision = tp / n_flagged if n_flagged else 0.0
    recall = tp / n_true if n_true else 0.0
    return precision, recall


def threshold_candidates(distances):
    """ Midpoints between consecutive distinct distances plus one point above the maximum
    """
    unique = np.unique(np.asarray(distances, dtype=np.float64))
    if len(unique) == 0:
        return unique
    mids = (unique[:-1] + unique[1:]) / 2.0
    return np.append(mids, unique[-1] + 1.0)


def calibrate_threshold(pairs, target_precision):
    """ Largest candidate threshold whose precision reaches target_precision

    @param pairs Pair scores (validation ICD pairs)
    @param target_precision Fraction in (0, 1], e.g. 0.9 for T@90
    @return Threshold T; pairs with distance < T are flagged
    """
    df = as_pair_frame(pairs)
    if len(df) == 0:
        raise ValueError("no pairs to calibrate on")
    order = np.argsort(df["distance"].to_numpy(), kind="mergesort")
    dist = df["distance"].to_numpy()[order]
    truth = df["is_true_match"].to_numpy()[order]

    # candidate k flags every pair with distance <= unique[k]
    unique = np.unique(dist)
    n_flagged = np.searchsorted(dist, unique, side="right")
    tp = np.cumsum(truth)[n_flagged - 1]
    precision = tp / n_flagged

    ok = np.nonzero(precision >= target_precision)[0]
    if len(ok) == 0:
        raise UnachievablePrecisionError(target_precision, float(precision.max()))
    return float(threshold_candidates(dist)[ok[-1]])


def threshold_for_spec(pairs, spec="p90"):
    """ Calibrated threshold for one of the named specs p90 / p95 / p99
    """
    if spec not in C_THRESHOLD_SPECS:
        raise ValueError("unknown threshold spec {}, expected one of {}".format(spec, sorted(C_THRESHOLD_SPECS)))
    return calibrate_threshold(pairs, C_THRESHOLD_SPECS[spec])


def fr_metrics(query_flags):
    """ Recall, false positives per million, precision and F1 for one individual

    @param query_flags Iterable of (is_target_image, flagged) or a DataFrame
        with columns is_target, flagged. A query counts once however many
        references it matched.
    """
    if isinstance(query_flags, pd.DataFrame):
        df = query_flags.loc[:, C_FR_COLUMNS]
    else:
        df = pd.DataFrame(list(query_flags), columns=C_FR_COLUMNS)
    is_target = df["is_target"].to_numpy(dtype=bool)
    flagged = df["flagged"].to_numpy(dtype=bool)
    n_target = int(is_target.sum())
    n_other = int((~is_target).sum())
    if n_target == 0 or n_other == 0:
        raise ValueError("facial recognition metrics need both target and non-target images")

    tp = int((is_target & flagged).sum())
    fp = int((~is_target & flagged).sum())
    recall = tp / n_target
    fp_per_million = fp / n_other * 1e6
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return FrReport(recall, fp_per_million, precision, f1)


def summarize(values):
    """ Median and interquartile range, the way results are aggregated across models
    """
    s = pd.Series(list(values), dtype=np.float64)
    if s.empty:
        return {"median": float("nan"), "iqr": float("nan"), "n": 0}
    return {"median": float(s.median()),
            "iqr": float(s.quantile(0.75) - s.quantile(0.25)),
            "n": int(len(s))}


def write_report(report, path_stem):
    """ Write a flat metric dictionary as CSV (metric, value) and as JSON

    @param report Dictionary metric -> value; nested dictionaries are
        flattened with '/' separators in the CSV
    @param path_stem Output path without extension
    @return Tuple (csv_path, json_path)
    """
    os.makedirs(os.path.dirname(os.path.abspath(path_stem)), exist_ok=True)
    rows = []

    def _flatten(prefix, value):
        if isinstance(value, dict):
            for k in sorted(value):
                _flatten("{}/{}".format(prefix, k) if prefix else str(k), value[k])
        else:
            rows.append((prefix, value))

    _flatten("", report)
    csv_path, json_path = path_stem + ".csv", path_stem + ".json"
    pd.DataFrame(rows, columns=["metric", "value"]).to_csv(csv_path, index=False)
    with open(json_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return csv_path, json_path
