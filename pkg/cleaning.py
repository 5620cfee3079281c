"""
Dataset cleaning for identity corpora: mislabeled-item detection and
duplicate detection on top of pluggable embedding oracles.

A face oracle maps item id -> list of face embeddings (zero or more per
item); a copy oracle maps item id -> exactly one embedding.
"""
import json
import os
from collections import namedtuple

import pandas as pd
import torch
from tqdm import tqdm

from utils.errors import ConfigError, ShapeError
from utils.hashing import as_vector, cosine_distance, l2_normalize, pairwise_distances

C_T_MIS = 0.6
C_T_DUP = 1.0
C_ITEM_COLUMNS = ["item_id", "individual"]

PlantedCorpus = namedtuple("PlantedCorpus", ["item_ids", "faces", "copies", "mislabeled", "faceless", "duplicates"])


def _faces_of(faces, item_id):
    if item_id not in faces:
        raise ValueError("face oracle has no entry for item {}".format(item_id))
    return [as_vector(f) for f in faces[item_id]]


def _copy_of(copies, item_id):
    if item_id not in copies:
        raise ValueError("copy oracle has no embedding for item {}".format(item_id))
    e = as_vector(copies[item_id])
    if e.dim() == 2 and e.shape[0] == 1:
        e = e[0]
    if e.dim() != 1:
        raise ShapeError("copy oracle must give exactly one embedding for item {}".format(item_id))
    return e


def base_embedding(item_ids, faces):
    """ Mean of the L2-normalized faces of single-face items, not renormalized
    """
    singles = [l2_normalize(f[0]) for f in (_faces_of(faces, i) for i in sorted(item_ids)) if len(f) == 1]
    if not singles:
        raise ValueError("no single-face item, the base embedding is undefined")
    return torch.stack(singles).mean(dim=0)


def detect_mislabeled(item_ids, faces, t_mis=C_T_MIS):
    """ Items of one individual that do not show that individual

    Items without a face are excluded. Any other item is excluded when
    its closest face is further than t_mis (cosine distance) from the
    base embedding.

    @param item_ids Items labelled with the individual
    @param faces Face oracle, item id -> list of embeddings
    @param t_mis Threshold in (0, 2)
    @return Sorted list of excluded item ids
    """
    if not 0.0 < t_mis < 2.0:
        raise ValueError("t_mis must be in (0, 2), got {}".format(t_mis))
    ids = sorted(item_ids)
    if not ids:
        return []
    base = base_embedding(ids, faces)
    excluded = []
    for item_id in ids:
        item_faces = _faces_of(faces, item_id)
        if not item_faces:
            excluded.append(item_id)
        elif float(cosine_distance(torch.stack(item_faces), base).min()) > t_mis:
            excluded.append(item_id)
    return excluded


def detect_duplicates(item_ids, copies, t_dup=C_T_DUP):
    """ Greedy duplicate removal in sorted id order

    Walks the items in lexicographic order; every item still kept excludes
    all later items closer than t_dup (Euclidean).

    @param item_ids Items of one individual, after mislabel filtering
    @param copies Copy oracle, item id -> one embedding
    @return Sorted list of excluded item ids
    """
    if t_dup <= 0:
        raise ValueError("t_dup must be positive, got {}".format(t_dup))
    ids = sorted(item_ids)
    if not ids:
        return []
    distances = pairwise_distances(torch.stack([_copy_of(copies, i) for i in ids]),
                                   torch.stack([_copy_of(copies, i) for i in ids]))
    excluded = set()
    for a in range(len(ids)):
        if a in excluded:
            continue
        later = torch.nonzero(distances[a, a + 1:] < t_dup).flatten() + a + 1
        excluded.update(int(b) for b in later)
    return [ids[i] for i in sorted(excluded)]


def clean_items(items, faces, copies, t_mis=C_T_MIS, t_dup=C_T_DUP):
    """ Mislabel filtering then deduplication, per individual

    @param items DataFrame with columns item_id, individual
    @return Tuple (mislabeled ids, duplicate ids), each sorted
    """
    mislabeled, duplicates = [], []
    for individual, group in tqdm(items.groupby("individual", sort=True), disable=len(items) == 0):
        ids = group["item_id"].tolist()
        removed = detect_mislabeled(ids, faces, t_mis)
        kept = sorted(set(ids) - set(removed))
        mislabeled += removed
        duplicates += detect_duplicates(kept, copies, t_dup)
    return sorted(mislabeled), sorted(duplicates)


def load_items(path):
    """ Read an items CSV with columns item_id, individual """
    try:
        items = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=C_ITEM_COLUMNS)
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise ConfigError("cannot parse items file {}: {}".format(path, e))
    missing = [c for c in C_ITEM_COLUMNS if c not in items.columns]
    if missing:
        raise ConfigError("items file {} lacks columns {}".format(path, missing))
    return items.loc[:, C_ITEM_COLUMNS]


def load_oracle(path):
    """ Read an oracle JSON {"faces": {id: [[...], ...]}, "copy": {id: [...]}} """
    try:
        with open(path) as f:
            oracle = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigError("cannot parse oracle file {}: {}".format(path, e))
    if not isinstance(oracle, dict) or not isinstance(oracle.get("faces", {}), dict) \
            or not isinstance(oracle.get("copy", {}), dict):
        raise ConfigError("oracle file {} must hold 'faces' and 'copy' objects".format(path))
    return oracle.get("faces", {}), oracle.get("copy", {})


def write_id_list(path, item_ids):
    """ One item id per line """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        for item_id in item_ids:
            f.write("{}\n".format(item_id))


def make_planted_corpus(n_genuine=40, n_mislabeled=4, n_faceless=2, n_multi=3, n_duplicates=5,
                        dim=16, seed=0, t_mis=C_T_MIS, t_dup=C_T_DUP):
    """ One individual's items with known mislabels, faceless items and duplicates

    Genuine faces sit within cosine distance t_mis / 2 of a shared direction,
    mislabeled faces point the opposite way, distinct copy embeddings are
    more than 2 * t_dup apart and duplicates lie within t_dup / 2 of their
    original (a genuine item sorting before them).
    """
    if n_duplicates > n_genuine:
        raise ValueError("each duplicate needs its own genuine original")
    generator = torch.Generator().manual_seed(seed)
    direction = l2_normalize(torch.randn(dim, generator=generator, dtype=torch.float64))

    def _face(sign):
        noise = torch.randn(dim, generator=generator, dtype=torch.float64)
        return l2_normalize(sign * direction + 0.02 * noise)

    n_items = n_genuine + n_multi + n_mislabeled + n_faceless + n_duplicates
    item_ids = ["item{:04d}".format(i) for i in range(n_items)]
    faces, copies = {}, {}
    cursor = 0
    genuine = item_ids[:n_genuine]
    for item_id in genuine:
        faces[item_id] = [_face(1.0).tolist()]
    cursor += n_genuine
    for item_id in item_ids[cursor:cursor + n_multi]:
        faces[item_id] = [_face(-1.0).tolist(), _face(1.0).tolist()]
    cursor += n_multi
    mislabeled = item_ids[cursor:cursor + n_mislabeled]
    for item_id in mislabeled:
        faces[item_id] = [_face(-1.0).tolist()]
    cursor += n_mislabeled
    faceless = item_ids[cursor:cursor + n_faceless]
    for item_id in faceless:
        faces[item_id] = []
    cursor += n_faceless

    scale = 4.0 * t_dup
    for item_id in item_ids[:cursor]:
        copies[item_id] = (scale * torch.randn(dim, generator=generator, dtype=torch.float64)).tolist()
    originals = torch.randperm(n_genuine, generator=generator)[:n_duplicates].tolist()
    duplicates = item_ids[cursor:]
    for item_id, original in zip(duplicates, originals):
        source = genuine[original]
        offset = l2_normalize(torch.randn(dim, generator=generator, dtype=torch.float64)) * (t_dup / 4.0)
        copies[item_id] = (torch.tensor(copies[source], dtype=torch.float64) + offset).tolist()
        faces[item_id] = [list(faces[source][0])]

    return PlantedCorpus(item_ids, faces, copies, set(mislabeled), set(faceless), set(duplicates))
