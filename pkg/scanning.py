"""
Client-side scanning simulation: hash databases, threshold matching,
k-means template hashes, collision forging and false-positive studies.
"""
from collections import namedtuple
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.cluster import KMeans
from tqdm import tqdm

from model.model import backward, embed, forward
from utils.errors import NumericalError, ShapeError
from utils.hashing import as_vector, bits_to_hex, lsh_binarize, pairwise_distances

C_DB_VERSION = 1
C_KMEANS_MAX_ITER = 100
C_KMEANS_N_INIT = 10
# collision defaults
C_FORGE_ITERATIONS = 5000
C_FORGE_LAMBDA = 1.0
C_FORGE_STEP = 0.05

ScanResult = namedtuple("ScanResult", ["flagged", "matches"])
FpReport = namedtuple("FpReport", ["fp_per_million", "flags"])
CollisionResult = namedtuple("CollisionResult", ["forged", "distance", "ratio", "losses", "best_iteration"])


@dataclass
class HashDatabase:
    """ Hashes with a source tag per entry ('reference' or 'template')

    kind is 'euclidean' for continuous hashes and 'hamming' for binary ones.
    """
    hashes: torch.Tensor
    tags: list
    kind: str = "euclidean"

    def __post_init__(self):
        if self.kind not in ("euclidean", "hamming"):
            raise ValueError("unknown hash kind {}".format(self.kind))
        if len(self.tags) != self.hashes.shape[0]:
            raise ShapeError("{} tags for {} hashes".format(len(self.tags), self.hashes.shape[0]))

    def __len__(self):
        return self.hashes.shape[0]

    def extend(self, other):
        """ Union of two databases of the same hash kind
        """
        if other.kind != self.kind:
            raise ShapeError("cannot mix {} and {} hashes".format(self.kind, other.kind))
        return HashDatabase(torch.cat([self.hashes, other.hashes]), self.tags + other.tags, self.kind)

    def save(self, path):
        torch.save({"version": C_DB_VERSION, "kind": self.kind,
                    "hashes": self.hashes, "tags": list(self.tags)}, path)

    @classmethod
    def load(cls, path):
        state = torch.load(path)
        if state.get("version") != C_DB_VERSION:
            raise ValueError("unsupported database version {}".format(state.get("version")))
        return cls(state["hashes"], state["tags"], state["kind"])


@dataclass
class TemplateSet:
    k: int
    centroids: torch.Tensor
    inertia: float


def compute_hashes(model, items, projector=None):
    """ Hash items with the model, optionally binarized by LSH

    @return Tuple (hashes, kind)
    """
    embeddings = embed(model, items)
    if projector is None:
        return embeddings, "euclidean"
    return lsh_binarize(projector, embeddings), "hamming"


def build_database(model, items, use_lsh=False, projector=None, tag="reference"):
    """ One database entry per item, hashed in eval mode

    @param model EmbeddingNet
    @param items Tensor (n, d_in); may be empty
    @param use_lsh Binarize the embeddings with `projector`
    @param projector LshProjector, required when use_lsh is set
    @param tag Source tag recorded for every entry
    """
    if use_lsh and projector is None:
        raise ValueError("use_lsh requires an LSH projector")
    hashes, kind = compute_hashes(model, items, projector if use_lsh else None)
    return HashDatabase(hashes, [tag] * hashes.shape[0], kind)


def template_database(templates, projector=None):
    """ Database holding the template hashes, binarized when a projector is given
    """
    if projector is None:
        return HashDatabase(templates.centroids.clone(), ["template"] * templates.k, "euclidean")
    return HashDatabase(lsh_binarize(projector, templates.centroids), ["template"] * templates.k, "hamming")


def _check_kind(db, projector):
    expected = "euclidean" if projector is None else "hamming"
    if len(db) and db.kind != expected:
        raise ShapeError("database holds {} hashes but queries are hashed as {}".format(db.kind, expected))


def match_hashes(query_hashes, db, threshold):
    """ Flag per query hash: some entry lies at distance < threshold
    """
    n = query_hashes.shape[0]
    if len(db) == 0 or n == 0:
        return torch.zeros(n, dtype=torch.bool)
    return (pairwise_distances(query_hashes, db.hashes, db.kind) < threshold).any(dim=1)


def scan(model, query, db, threshold, projector=None):
    """ Match one query item against the database

    @return ScanResult(flagged, matches) where matches lists
        (entry index, distance) for every entry closer than threshold,
        sorted by ascending distance
    """
    _check_kind(db, projector)
    if len(db) == 0:
        return ScanResult(False, [])
    hashed, _ = compute_hashes(model, as_vector(query).reshape(1, -1), projector)
    distances = pairwise_distances(hashed, db.hashes, db.kind)[0]
    hits = torch.nonzero(distances < threshold).flatten()
    order = torch.argsort(distances[hits], stable=True)
    matches = [(int(hits[i]), distances[hits[i]].item()) for i in order]
    return ScanResult(len(matches) > 0, matches)


def scan_many(model, queries, db, threshold, projector=None):
    """ Flag decisions for a batch of query items, in query order
    """
    _check_kind(db, projector)
    hashed, _ = compute_hashes(model, queries, projector)
    return match_hashes(hashed, db, threshold)


def reduce_templates(embeddings, k, seed=0, renormalize=False):
    """ Cluster target embeddings into k template hashes

    k=1 is the plain average. Larger k runs k-means with k-means++ seeding.
    Centroids are left unnormalized unless `renormalize` is set.

    @param embeddings Tensor (n, l) of the target's training embeddings
    @param k Number of templates, 1 <= k <= n
    @param seed Seed of the k-means initialization
    @return TemplateSet
    """
    embeddings = as_vector(embeddings)
    n = embeddings.shape[0]
    if not 1 <= k <= n:
        raise ValueError("k must be in [1, {}], got {}".format(n, k))
    if k == 1:
        centroids = embeddings.mean(dim=0, keepdim=True)
        inertia = float(((embeddings - centroids) ** 2).sum())
    else:
        km = KMeans(n_clusters=k, init="k-means++", n_init=C_KMEANS_N_INIT,
                    max_iter=C_KMEANS_MAX_ITER, random_state=seed)
        km.fit(embeddings.numpy())
        centroids = torch.as_tensor(km.cluster_centers_, dtype=embeddings.dtype)
        inertia = float(km.inertia_)
    if renormalize:
        centroids = centroids / torch.linalg.vector_norm(centroids, dim=1, keepdim=True)
    return TemplateSet(k, centroids, inertia)


def export_templates(templates, path, projector=None):
    """ Write one template per line: lowercase hex when binarized, decimals otherwise
    """
    with open(path, "w") as f:
        if projector is not None:
            for bits in lsh_binarize(projector, templates.centroids):
                f.write(bits_to_hex(bits) + "\n")
        else:
            for row in templates.centroids.tolist():
                f.write(" ".join("{:.17g}".format(v) for v in row) + "\n")


def select_cover(model, pool, h_t):
    """ Index of the pool item whose hash is closest to the template hash

    @return Tuple (index, distance)
    """
    hashes = embed(model, pool)
    if hashes.shape[0] == 0:
        raise ValueError("cover pool is empty")
    distances = pairwise_distances(as_vector(h_t).reshape(1, -1), hashes)[0]
    index = int(torch.argmin(distances))
    return index, float(distances[index])


def forge_collision(model, x, h_t, iterations=C_FORGE_ITERATIONS, lam_vis=C_FORGE_LAMBDA,
                    step_size=C_FORGE_STEP, show_progress=False):
    """ Perturb a cover item so that its hash approaches h_t

    Minimizes L(d) = |H(x + d) - h_t|^2 + lam_vis * |d|^2 / |x|^2 by fixed-step
    gradient descent from d = 0. The penalty term is applied through its
    exact proximal step, so large lam_vis shrinks d instead of overshooting.

    @param model EmbeddingNet, used in eval mode
    @param x Cover item, length d_in
    @param h_t Template hash, length l
    @param iterations Number of descent steps
    @param lam_vis Weight of the relative perturbation penalty
    @param step_size Gradient step
    @return CollisionResult(forged, distance, ratio, losses, best_iteration)
        for the iterate with the lowest recorded loss; ratio is |d| / |x|
    """
    x = as_vector(x)
    h_t = as_vector(h_t)
    x_sq = float((x ** 2).sum())
    if x_sq == 0:
        raise ValueError("cover item must be nonzero")
    shrink = 1.0 + 2.0 * step_size * lam_vis / x_sq

    delta = torch.zeros_like(x)
    losses = []
    best_loss, best_delta, best_iteration = None, delta, 0
    for it in tqdm(range(iterations + 1), disable=not show_progress):
        h, cache = forward(model, x + delta, mode="eval")
        residual = h - h_t
        loss = float((residual ** 2).sum()) + lam_vis * float((delta ** 2).sum()) / x_sq
        if not np.isfinite(loss):
            raise NumericalError("collision loss is not finite", {"iteration": it, "loss": loss})
        losses.append(loss)
        if best_loss is None or loss < best_loss:
            best_loss, best_delta, best_iteration = loss, delta.clone(), it
        if it == iterations:
            break
        _, grad_x = backward(cache, 2.0 * residual)
        delta = (delta - step_size * grad_x) / shrink

    forged = x + best_delta
    h_forged = embed(model, forged.reshape(1, -1))[0]
    distance = float(torch.linalg.vector_norm(h_forged - h_t))
    ratio = float(torch.linalg.vector_norm(best_delta)) / x_sq ** 0.5
    return CollisionResult(forged, distance, ratio, losses, best_iteration)


def fp_study(model, corpus, db, threshold, projector=None):
    """ False positives per million benign queries

    @param corpus Benign query items, none of which should have a copy in db
    @return FpReport(fp_per_million, flags)
    """
    corpus = as_vector(corpus)
    if corpus.shape[0] == 0:
        raise ValueError("false-positive study needs a nonempty corpus")
    flags = scan_many(model, corpus, db, threshold, projector)
    return FpReport(float(flags.sum()) / len(flags) * 1e6, flags)


def reference_split_fp(model, references, threshold, fraction=0.1, seed=0, projector=None):
    """ Match a random fraction of the references against the rest

    @return FpReport over the held-out fraction
    """
    references = as_vector(references)
    n = references.shape[0]
    n_query = int(round(fraction * n))
    if not 0 < n_query < n:
        raise ValueError("fraction {} leaves no queries or no references out of {}".format(fraction, n))
    order = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    db = build_database(model, references[order[n_query:]], use_lsh=projector is not None, projector=projector)
    return fp_study(model, references[order[:n_query]], db, threshold, projector)
