"""
Seeded synthetic world: primary (copy-detection) items, identities with
per-identity images, their train/val/test partitions, augmentations and
the primary/secondary batch samplers.

Every item is a vector concat(identity block, content block). Images of
one identity share a centroid in the identity block; primary items draw
that block fresh, so only the identity block carries "who is pictured".
"""
import dataclasses
from collections import namedtuple
from dataclasses import dataclass

import torch
from sklearn.model_selection import train_test_split

from utils.errors import ConfigError, EpochExhausted
from utils.hashing import C_DTYPE

# label namespaces; a label is (namespace << 40) + index
C_LABEL_SHIFT = 40
C_NS_PRIMARY = 1
C_NS_NONTARGET = 2
C_NS_TARGET = 3

Augmentation = namedtuple("Augmentation", ["nu", "rho"])
PrimaryBatch = namedtuple("PrimaryBatch", ["views", "labels", "item_index"])
SecondaryBatch = namedtuple("SecondaryBatch", ["views", "labels", "slot_target", "image_ids"])


def primary_label(index):
    return (C_NS_PRIMARY << C_LABEL_SHIFT) + index


def nontarget_label(image_id):
    return (C_NS_NONTARGET << C_LABEL_SHIFT) + image_id


def target_label(k):
    return (C_NS_TARGET << C_LABEL_SHIFT) + k


def label_namespace(label):
    return int(label) >> C_LABEL_SHIFT


@dataclass
class WorldConfig:
    d_id: int = 16
    d_content: int = 48
    n_primary: int = 2000
    n_reference: int = 1000
    n_reference_val: int = 500
    n_queries_val: int = 500
    n_queries_test: int = 500
    query_match_fraction: float = 0.2
    n_identities: int = 1301
    n_targets: int = 1
    images_per_identity: int = 160
    N_T_train: int = 100
    N_T_val: int = 20
    N_Tprime_train: int = 1000
    N_Tprime_val: int = 200
    sigma_id: float = 0.3
    sigma_content: float = 1.0
    nu_m: float = 0.1
    rho_m: float = 0.05
    nu_h: float = 0.3
    rho_h: float = 0.2
    seed: int = 0

    @property
    def d_in(self):
        return self.d_id + self.d_content

    @property
    def N_Tprime_test(self):
        return self.n_identities - self.n_targets - self.N_Tprime_train - self.N_Tprime_val

    def augmentation(self, strength):
        if strength == "moderate":
            return Augmentation(self.nu_m, self.rho_m)
        if strength == "heavy":
            return Augmentation(self.nu_h, self.rho_h)
        raise ValueError("augmentation strength must be 'moderate' or 'heavy', got {}".format(strength))

    def validate(self):
        counts = ["d_id", "d_content", "n_primary", "n_reference", "n_reference_val",
                  "n_queries_val", "n_queries_test", "n_identities", "n_targets",
                  "images_per_identity", "N_T_train", "N_T_val", "N_Tprime_train", "N_Tprime_val"]
        for name in counts:
            if getattr(self, name) <= 0:
                raise ConfigError("world.{} must be positive, got {}".format(name, getattr(self, name)))
        if self.n_reference_val > self.n_reference:
            raise ConfigError("n_reference_val ({}) exceeds n_reference ({})".format(self.n_reference_val, self.n_reference))
        if self.N_T_train + self.N_T_val >= self.images_per_identity:
            raise ConfigError("N_T_train + N_T_val ({}) must leave test images out of {} per identity"
                              .format(self.N_T_train + self.N_T_val, self.images_per_identity))
        if self.N_Tprime_test <= 0:
            raise ConfigError("{} identities cannot hold {} targets and {} + {} non-target train/val identities"
                              .format(self.n_identities, self.n_targets, self.N_Tprime_train, self.N_Tprime_val))
        if not 0.0 <= self.query_match_fraction <= 1.0:
            raise ConfigError("query_match_fraction must be in [0, 1], got {}".format(self.query_match_fraction))
        if self.sigma_id < 0 or self.sigma_content < 0:
            raise ConfigError("world spreads must be nonnegative")
        if not (0 <= self.nu_m < self.nu_h and 0 <= self.rho_m < self.rho_h <= 1):
            raise ConfigError("heavy augmentation must be strictly stronger than moderate: "
                              "nu_m={} nu_h={} rho_m={} rho_h={}".format(self.nu_m, self.nu_h, self.rho_m, self.rho_h))

    def as_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class World:
    """ Immutable synthetic corpora

    Images of identity i are faces[i]; their global image id is
    i * images_per_identity + j. Target identities are 0..n_targets-1.
    Per-target partitions hold image indices within that identity.
    """
    config: WorldConfig
    primary_train: torch.Tensor
    references: torch.Tensor
    ref_val_index: torch.Tensor
    queries_val: torch.Tensor
    queries_test: torch.Tensor
    matches_val: dict
    matches_test: dict
    faces: torch.Tensor
    targets: tuple
    target_train: tuple
    target_val: tuple
    target_test: tuple
    nontarget_train: tuple
    nontarget_val: tuple
    nontarget_test: tuple

    @property
    def d_in(self):
        return self.config.d_in

    def image_ids(self, identity, index):
        return identity * self.config.images_per_identity + torch.as_tensor(index, dtype=torch.int64)

    def images(self, image_ids):
        return self.faces.reshape(-1, self.d_in)[torch.as_tensor(image_ids, dtype=torch.int64)]

    def identity_of(self, image_ids):
        return torch.as_tensor(image_ids, dtype=torch.int64) // self.config.images_per_identity

    def target_images(self, split, k=0):
        index = {"train": self.target_train, "val": self.target_val, "test": self.target_test}[split][k]
        return self.faces[self.targets[k]][index]

    def nontarget_train_ids(self):
        return torch.cat([self.image_ids(i, torch.arange(self.config.images_per_identity))
                          for i in self.nontarget_train])


def get_splits(identities, n_train, n_val, seed):
    """
    Split non-target identities into train, validation and test groups.
    Sorts the identities and uses a fixed seed so that it is reproducible.

    @param identities List of identity ids
    @return (train_ids, val_ids, test_ids)
    """
    identities = sorted(identities)
    train_ids, rest = train_test_split(identities, train_size=n_train, random_state=seed)
    val_ids, test_ids = train_test_split(rest, train_size=n_val, random_state=seed)
    return tuple(sorted(train_ids)), tuple(sorted(val_ids)), tuple(sorted(test_ids))


def _fresh_items(n, config, generator):
    return torch.cat([torch.randn((n, config.d_id), generator=generator, dtype=C_DTYPE),
                      config.sigma_content * torch.randn((n, config.d_content), generator=generator, dtype=C_DTYPE)],
                     dim=1)


def _query_split(references, pool_index, n_queries, config, generator):
    """ Queries whose first share are heavy copies of references in pool_index, the rest distractors
    """
    n_matched = min(int(round(config.query_match_fraction * n_queries)), len(pool_index))
    chosen = pool_index[torch.randperm(len(pool_index), generator=generator)[:n_matched]]
    copies = augment(references[chosen], config.augmentation("heavy"), generator)
    distractors = _fresh_items(n_queries - n_matched, config, generator)
    matches = {i: int(ref) for i, ref in enumerate(chosen.tolist())}
    return torch.cat([copies, distractors]), matches


def generate_world(config):
    """ Build the full synthetic world, a pure function of config

    @param config WorldConfig
    @return World
    """
    config.validate()
    generator = torch.Generator().manual_seed(config.seed)

    primary_train = _fresh_items(config.n_primary, config, generator)
    references = _fresh_items(config.n_reference, config, generator)
    ref_val_index = torch.randperm(config.n_reference, generator=generator)[:config.n_reference_val].sort().values
    queries_val, matches_val = _query_split(references, ref_val_index, config.n_queries_val, config, generator)
    queries_test, matches_test = _query_split(references, torch.arange(config.n_reference),
                                              config.n_queries_test, config, generator)

    shape = (config.n_identities, config.images_per_identity)
    centroids = torch.randn((config.n_identities, 1, config.d_id), generator=generator, dtype=C_DTYPE)
    identity_block = centroids + config.sigma_id * torch.randn(shape + (config.d_id,), generator=generator, dtype=C_DTYPE)
    content_block = config.sigma_content * torch.randn(shape + (config.d_content,), generator=generator, dtype=C_DTYPE)
    faces = torch.cat([identity_block, content_block], dim=2)

    targets = tuple(range(config.n_targets))
    target_train, target_val, target_test = [], [], []
    for _ in targets:
        order = torch.randperm(config.images_per_identity, generator=generator)
        target_train.append(order[:config.N_T_train].sort().values)
        target_val.append(order[config.N_T_train:config.N_T_train + config.N_T_val].sort().values)
        target_test.append(order[config.N_T_train + config.N_T_val:].sort().values)

    nontarget = range(config.n_targets, config.n_identities)
    nt_train, nt_val, nt_test = get_splits(nontarget, config.N_Tprime_train, config.N_Tprime_val, config.seed)

    return World(config=config, primary_train=primary_train, references=references,
                 ref_val_index=ref_val_index, queries_val=queries_val, queries_test=queries_test,
                 matches_val=matches_val, matches_test=matches_test, faces=faces, targets=targets,
                 target_train=tuple(target_train), target_val=tuple(target_val), target_test=tuple(target_test),
                 nontarget_train=nt_train, nontarget_val=nt_val, nontarget_test=nt_test)


def subsample_target_train(world, n_train):
    """ Copy of the world keeping only the first n_train training images of each target
    """
    if not 0 < n_train <= len(world.target_train[0]):
        raise ConfigError("cannot keep {} of {} target training images".format(n_train, len(world.target_train[0])))
    kept = tuple(index[:n_train] for index in world.target_train)
    return dataclasses.replace(world, target_train=kept)


def augment(x, strength, generator=None):
    """ Zero a random fraction rho of coordinates, then add Gaussian noise of scale nu

    @param x Vector of length d_in or matrix of row vectors
    @param strength Augmentation(nu, rho)
    @param generator torch.Generator owning the randomness
    """
    nu, rho = strength
    x = torch.as_tensor(x, dtype=C_DTYPE)
    keep = torch.rand(x.shape, generator=generator, dtype=C_DTYPE) >= rho
    noise = torch.randn(x.shape, generator=generator, dtype=C_DTYPE)
    return x * keep + nu * noise


def _pair_views(first, second):
    # views of one item are adjacent: (a_1, b_1, a_2, b_2, ...)
    return torch.stack([first, second], dim=1).reshape(-1, first.shape[-1])


class PrimaryBatchSampler(object):
    """ Uniform sampling without replacement over one epoch of primary items
    """
    def __init__(self, n_items, generator):
        self.n_items = n_items
        self.generator = generator
        self.order = torch.empty(0, dtype=torch.int64)
        self.position = 0

    def start_epoch(self):
        self.order = torch.randperm(self.n_items, generator=self.generator)
        self.position = 0

    @property
    def remaining(self):
        return len(self.order) - self.position

    def next_indices(self, b):
        if b <= 0:
            raise ValueError("batch size must be positive, got {}".format(b))
        if self.remaining <= 0:
            raise EpochExhausted("primary pool exhausted after {} items".format(self.position))
        index = self.order[self.position:self.position + b]
        self.position += len(index)
        return index


def sample_primary_batch(world, sampler, b_primary, generator):
    """ Draw the next primary batch: each item yields (A_m(X), A_h(X)) under a shared label

    @return PrimaryBatch with 2 * b views (the last batch of an epoch may be smaller)
    """
    index = sampler.next_indices(b_primary)
    items = world.primary_train[index]
    config = world.config
    views = _pair_views(augment(items, config.augmentation("moderate"), generator),
                        augment(items, config.augmentation("heavy"), generator))
    labels = primary_label(index).repeat_interleave(2)
    return PrimaryBatch(views, labels, index)


class _RefillingPool(object):
    # draws without replacement, reshuffling once the pool runs dry
    def __init__(self, ids, generator):
        self.ids = torch.as_tensor(ids, dtype=torch.int64)
        self.generator = generator
        self.order = torch.empty(0, dtype=torch.int64)
        self.position = 0

    def reset(self):
        self.order = self.ids[torch.randperm(len(self.ids), generator=self.generator)]
        self.position = 0

    def draw(self):
        if self.position >= len(self.order):
            self.reset()
        value = int(self.order[self.position])
        self.position += 1
        return value


class SecondaryBatchSampler(object):
    """ Per slot: target k with probability p_T each, non-target otherwise

    @param world World
    @param p_T Per-target sampling probability; n_targets * p_T must not exceed 1
    @param generator torch.Generator used for slot choices, pool shuffles
        and augmentations of secondary batches
    """
    def __init__(self, world, p_T, generator):
        n_targets = len(world.targets)
        if not 0.0 <= p_T or n_targets * p_T > 1.0:
            raise ConfigError("need 0 <= n_targets * p_T <= 1, got {} * {}".format(n_targets, p_T))
        self.world = world
        self.p_T = p_T
        self.generator = generator
        self.target_pools = [_RefillingPool(world.image_ids(world.targets[k], world.target_train[k]), generator)
                             for k in range(n_targets)]
        self.nontarget_pool = _RefillingPool(world.nontarget_train_ids(), generator)

    def start_epoch(self):
        for pool in self.target_pools:
            pool.reset()
        self.nontarget_pool.reset()

    def draw(self, b):
        """ Slot assignments (target index or -1) and global image ids for one batch
        """
        u = torch.rand(b, generator=self.generator, dtype=C_DTYPE)
        slots = torch.full((b,), -1, dtype=torch.int64)
        ids = torch.empty(b, dtype=torch.int64)
        for i in range(b):
            k = int(u[i] // self.p_T) if self.p_T > 0 else len(self.target_pools)
            if k < len(self.target_pools):
                slots[i] = k
                ids[i] = self.target_pools[k].draw()
            else:
                ids[i] = self.nontarget_pool.draw()
        return slots, ids


def sample_secondary_batch(world, sampler, b_secondary):
    """ Draw a secondary batch

    A target image W pairs with a random W' of the same target's training
    images (W' = W allowed), both under A_m, labelled with the target's
    label. A non-target image yields (A_m(W), A_h(W)) with its own label.
    """
    if b_secondary <= 0:
        raise ValueError("batch size must be positive, got {}".format(b_secondary))
    generator = sampler.generator
    config = world.config
    slots, ids = sampler.draw(b_secondary)
    images = world.images(ids)

    second = augment(images, config.augmentation("heavy"), generator)
    first = augment(images, config.augmentation("moderate"), generator)
    labels = nontarget_label(ids)
    for i in torch.nonzero(slots >= 0).flatten().tolist():
        k = int(slots[i])
        train_ids = sampler.target_pools[k].ids
        partner = train_ids[torch.randint(len(train_ids), (1,), generator=generator)]
        second[i] = augment(world.images(partner)[0], config.augmentation("moderate"), generator)
        labels[i] = target_label(k)
    return SecondaryBatch(_pair_views(first, second), labels.repeat_interleave(2), slots, ids)
