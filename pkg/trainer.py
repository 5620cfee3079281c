"""
Single- and dual-purpose training with a shared cross-batch memory,
validation, test evaluation and model selection.
"""
import collections
import copy
import math
from collections import namedtuple
from dataclasses import dataclass, asdict, field

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from dataset import (PrimaryBatchSampler, SecondaryBatchSampler, sample_primary_batch,
                     sample_secondary_batch)
from model.model import (ModelConfig, backward, forward, get_optimizer, init_params, lr_at_epoch,
                         sgd_step)
from model.xbm import CrossBatchMemory, contrastive_loss_xbm, xbm_update
from results.eval import (C_THRESHOLD_SPECS, calibrate_threshold, fr_metrics,
                          micro_average_precision, pair_frame, precision_recall_at)
from scanning import compute_hashes
from utils.errors import ConfigError, NumericalError, UnachievablePrecisionError
from utils.hashing import pairwise_distances

C_MODES = ("single", "dual", "multi")
C_MEMORY_SINGLE = 20000
C_MEMORY_DUAL = 22500
C_SCORE_WEIGHT = 0.1
# the secondary sampler owns a generator seeded apart from the primary one
C_SECONDARY_SEED_OFFSET = 7919

ValidationResult = namedtuple("ValidationResult", ["mu_ap", "threshold", "f1", "fr"])


@dataclass
class TrainingConfig:
    epochs: int = 10
    b_primary: int = 96
    b_secondary: int = 12
    p_T: float = 0.025
    w: float = 0.03
    M: int = 0
    m_p: float = 0.0
    m_n: float = 1.0
    eta: float = 0.1
    gamma: float = 0.9
    eta_min: float = 0.05
    weight_decay: float = 1e-6
    momentum: float = 0.9
    accumulation: int = 2
    mode: str = "dual"
    threshold_target: float = 0.90

    @property
    def memory_size(self):
        """ M, or the per-mode default when M is 0

        A dual run with w = 0 trains exactly like a single run, so it also
        gets the single-mode default.
        """
        if self.M:
            return self.M
        return C_MEMORY_SINGLE if self.secondary_weight == 0 else C_MEMORY_DUAL

    @property
    def secondary_weight(self):
        return 0.0 if self.mode == "single" else self.w

    def validate(self):
        if self.mode not in C_MODES:
            raise ConfigError("training.mode must be one of {}, got {}".format(C_MODES, self.mode))
        for name in ("epochs", "b_primary", "b_secondary", "accumulation"):
            if getattr(self, name) <= 0:
                raise ConfigError("training.{} must be positive, got {}".format(name, getattr(self, name)))
        if self.M < 0:
            raise ConfigError("training.M must be nonnegative (0 picks the per-mode default)")
        if not 0.0 <= self.w <= 1.0:
            raise ConfigError("training.w must be in [0, 1], got {}".format(self.w))
        if not 0.0 <= self.p_T <= 1.0:
            raise ConfigError("training.p_T must be in [0, 1], got {}".format(self.p_T))
        if not self.m_n > self.m_p >= 0:
            raise ConfigError("training margins must satisfy m_n > m_p >= 0")
        if not 0.0 < self.threshold_target <= 1.0:
            raise ConfigError("training.threshold_target must be in (0, 1]")

    def as_dict(self):
        return asdict(self)


@dataclass
class EpochCheckpoint:
    epoch: int
    state: dict
    mu_ap_val: float
    threshold: float
    f1_target: float = None
    f1_val: dict = field(default_factory=dict)
    score: float = 0.0
    train_loss: float = 0.0
    digest: str = ""

    def metrics(self):
        return {"epoch": self.epoch, "mu_ap_val": self.mu_ap_val, "threshold": self.threshold,
                "f1_target": self.f1_target, "score": self.score, "train_loss": self.train_loss}


def selection_score(mu_ap, f1_target=None, weight=C_SCORE_WEIGHT):
    """ mu_ap + weight * F1 of the target(s); just mu_ap when there is no target """
    if f1_target is None:
        return mu_ap
    return mu_ap + weight * f1_target


class GradientAccumulator(object):
    """ Averages parameter gradients over `span` consecutive iterations
    """
    def __init__(self, span):
        if span <= 0:
            raise ValueError("accumulation span must be positive, got {}".format(span))
        self.span = span
        self.total = None
        self.count = 0

    def add(self, grads):
        """ Add one iteration's gradients; returns the averaged gradients once the span is full """
        if self.total is None:
            self.total = collections.OrderedDict((k, g.clone()) for k, g in grads.items())
        else:
            for k, g in grads.items():
                self.total[k] += g
        self.count += 1
        if self.count == self.span:
            return self.flush()
        return None

    def flush(self):
        """ Averaged gradients of a partial span, or None when empty """
        if self.count == 0:
            return None
        averaged = collections.OrderedDict((k, g / self.count) for k, g in self.total.items())
        self.total, self.count = None, 0
        return averaged


def mix_grads(primary, secondary, w):
    """ Gradients of (1 - w) * L_primary + w * L_secondary """
    if secondary is None:
        return collections.OrderedDict((k, (1.0 - w) * g) for k, g in primary.items())
    return collections.OrderedDict((k, (1.0 - w) * g + w * secondary[k]) for k, g in primary.items())


def _loss_and_grads(model, views, labels, mem, mode, m_p, m_n):
    if views.shape[0] == 0:
        raise ValueError("cannot compute the loss of an empty batch")
    embeddings, cache = forward(model, views, mode=mode)
    xbm_update(mem, embeddings, labels)
    result = contrastive_loss_xbm(embeddings, labels, mem, m_p, m_n)
    param_grads, _ = backward(cache, result.grads)
    return result.loss, param_grads


def loss_primary(model, batch, mem, m_p=0.0, m_n=1.0):
    """ Primary (copy detection) loss on the collated views of a batch

    Embeds both views of every item in train mode, pushes them to the
    memory and computes the contrastive loss against it.

    @param batch PrimaryBatch
    @return Tuple (loss, parameter gradients)
    """
    return _loss_and_grads(model, batch.views, batch.labels, mem, "train", m_p, m_n)


def loss_secondary(model, batch, mem, m_p=0.0, m_n=1.0):
    """ Secondary (target recognition) loss

    Embeds with frozen running statistics (eval mode); gradients still
    reach every trainable weight.

    @param batch SecondaryBatch
    @return Tuple (loss, parameter gradients)
    """
    return _loss_and_grads(model, batch.views, batch.labels, mem, "eval", m_p, m_n)


def icd_pairs(model, world, split="val", projector=None):
    """ Pair scores of the copy-detection queries against the references

    val matches Q_val against the R_val subset, test matches Q_test against all of R.
    """
    if split == "val":
        queries, matches = world.queries_val, world.matches_val
        ref_ids = world.ref_val_index.tolist()
    elif split == "test":
        queries, matches = world.queries_test, world.matches_test
        ref_ids = list(range(world.references.shape[0]))
    else:
        raise ValueError("split must be 'val' or 'test', got {}".format(split))
    q_hashes, kind = compute_hashes(model, queries, projector)
    r_hashes, _ = compute_hashes(model, world.references[ref_ids], projector)
    distances = pairwise_distances(q_hashes, r_hashes, kind).numpy()
    return pair_frame(list(range(len(queries))), ref_ids, distances, matches)


def fr_individuals(world, split="val"):
    """ Query set and per-individual reference sets for facial recognition

    Each target's references are its training images and its queries the
    images of `split`. Every non-target identity of `split` keeps its first
    N_T_train images as references and queries with the rest.

    @return Tuple (query_ids, references) where query_ids are global image
        ids and references maps identity -> global image ids
    """
    if split not in ("val", "test"):
        raise ValueError("split must be 'val' or 'test', got {}".format(split))
    target_queries = world.target_val if split == "val" else world.target_test
    nontargets = world.nontarget_val if split == "val" else world.nontarget_test
    n_ref = world.config.N_T_train
    everything = torch.arange(world.config.images_per_identity)

    query_ids, references = [], collections.OrderedDict()
    for k, identity in enumerate(world.targets):
        references[identity] = world.image_ids(identity, world.target_train[k])
        query_ids.append(world.image_ids(identity, target_queries[k]))
    for identity in nontargets:
        references[identity] = world.image_ids(identity, everything[:n_ref])
        query_ids.append(world.image_ids(identity, everything[n_ref:]))
    return torch.cat(query_ids), references


def fr_study(model, world, threshold, split="val", projector=None):
    """ Recall, FP per million, precision and F1 per individual at threshold

    @return DataFrame with one row per individual: identity, role
        ('target' / 'non-target') and the FrReport fields
    """
    query_ids, references = fr_individuals(world, split)
    q_hashes, kind = compute_hashes(model, world.images(query_ids), projector)
    owners = world.identity_of(query_ids).numpy()
    targets = set(world.targets)

    rows = []
    for identity, ref_ids in references.items():
        r_hashes, _ = compute_hashes(model, world.images(ref_ids), projector)
        flagged = (pairwise_distances(q_hashes, r_hashes, kind) < threshold).any(dim=1).numpy()
        report = fr_metrics(pd.DataFrame({"is_target": owners == identity, "flagged": flagged}))
        row = {"identity": identity, "role": "target" if identity in targets else "non-target"}
        row.update(report.as_dict())
        rows.append(row)
    return pd.DataFrame(rows)


def validate(model, world, threshold_target=0.90, projector=None, strict=True):
    """ Validation protocol: ICD mu_ap and calibrated T, then FR F1 per individual at T

    @param strict When False an unachievable calibration yields T = 0
        (nothing flagged) instead of raising
    @return ValidationResult(mu_ap, threshold, f1 dict identity -> F1, fr DataFrame)
    """
    pairs = icd_pairs(model, world, "val", projector)
    mu_ap = micro_average_precision(pairs)
    try:
        threshold = calibrate_threshold(pairs, threshold_target)
    except UnachievablePrecisionError as e:
        if strict:
            raise
        print("Calibration failed ({}), flagging nothing this epoch".format(e))
        threshold = 0.0
    fr = fr_study(model, world, threshold, "val", projector)
    f1 = dict(zip(fr["identity"].tolist(), fr["f1"].tolist()))
    return ValidationResult(mu_ap, threshold, f1, fr)


def calibrate_thresholds(model, world, projector=None):
    """ T@90 / T@95 / T@99 on the validation copy-detection pairs, None when unachievable
    """
    pairs = icd_pairs(model, world, "val", projector)
    thresholds = {}
    for spec, target in C_THRESHOLD_SPECS.items():
        try:
            thresholds[spec] = calibrate_threshold(pairs, target)
        except UnachievablePrecisionError as e:
            print("{}: {}".format(spec, e))
            thresholds[spec] = None
    return thresholds


def evaluate_test(model, world, threshold, projector=None):
    """ Test protocol at a threshold calibrated on validation

    @return Tuple (icd dict with mu_ap / precision / recall, FR DataFrame)
    """
    pairs = icd_pairs(model, world, "test", projector)
    precision, recall = precision_recall_at(pairs, threshold)
    icd = {"mu_ap": micro_average_precision(pairs), "precision": precision,
           "recall": recall, "threshold": threshold}
    return icd, fr_study(model, world, threshold, "test", projector)


def select_best(checkpoints):
    """ Highest selection score, earliest epoch on ties """
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    best = checkpoints[0]
    for ckpt in checkpoints[1:]:
        if ckpt.score > best.score:
            best = ckpt
    return best


def _snapshot(model, optimizer, model_config, epoch, generators):
    return {"epoch": epoch,
            "model_config": model_config.as_dict(),
            "model_state_dict": copy.deepcopy(model.state_dict()),
            "optimizer_state_dict": copy.deepcopy(optimizer.state_dict()),
            "n_updates": model.n_updates,
            "rng_state": {name: g.get_state() for name, g in generators.items()}}


def train(config, world, seed, model_config=None, logger=None, on_checkpoint=None):
    """ Train an embedding model, validating and checkpointing every epoch

    Each iteration computes L_primary on a primary batch and, in dual and
    multi mode with w > 0, L_secondary on a secondary batch sharing the same
    memory. Gradients of (1 - w) * L_primary + w * L_secondary are averaged
    over `accumulation` iterations before each optimizer step. One epoch is
    one pass over the primary training items.

    @param config TrainingConfig
    @param world World
    @param seed Training seed (initialization, sampling, augmentation)
    @param model_config ModelConfig; defaults to one sized for the world
    @param logger Optional utils.logger.Logger for per-epoch scalars
    @param on_checkpoint Optional callable(EpochCheckpoint), e.g. to save it
    @return List of EpochCheckpoint, one per epoch
    """
    config.validate()
    if model_config is None:
        model_config = ModelConfig(d_in=world.d_in)
    if model_config.d_in != world.d_in:
        raise ConfigError("model d_in {} does not match world d_in {}".format(model_config.d_in, world.d_in))

    w = config.secondary_weight
    dual = config.mode != "single"
    model = init_params(model_config, seed)
    optimizer = get_optimizer(model, config.eta, config.weight_decay, config.momentum)
    mem = CrossBatchMemory(config.memory_size, model_config.l)
    accumulator = GradientAccumulator(config.accumulation)

    generators = {"primary": torch.Generator().manual_seed(seed)}
    sampler = PrimaryBatchSampler(world.primary_train.shape[0], generators["primary"])
    secondary = None
    if dual and w > 0:
        generators["secondary"] = torch.Generator().manual_seed(seed + C_SECONDARY_SEED_OFFSET)
        secondary = SecondaryBatchSampler(world, config.p_T, generators["secondary"])

    n_iterations = math.ceil(world.primary_train.shape[0] / config.b_primary)
    checkpoints = []
    for epoch in range(1, config.epochs + 1):
        lr = lr_at_epoch(config.eta, config.gamma, config.eta_min, epoch)
        sampler.start_epoch()
        if secondary is not None:
            secondary.start_epoch()
        epoch_loss, epoch_primary, epoch_secondary = [], [], []

        for it in tqdm(range(1, n_iterations + 1), desc="epoch {}".format(epoch)):
            batch = sample_primary_batch(world, sampler, config.b_primary, generators["primary"])
            l_primary, g_primary = loss_primary(model, batch, mem, config.m_p, config.m_n)
            l_secondary, g_secondary = torch.zeros((), dtype=l_primary.dtype), None
            if secondary is not None:
                s_batch = sample_secondary_batch(world, secondary, config.b_secondary)
                l_secondary, g_secondary = loss_secondary(model, s_batch, mem, config.m_p, config.m_n)

            loss = (1.0 - w) * l_primary + w * l_secondary
            if not torch.isfinite(loss):
                raise NumericalError("training loss is not finite; restart with another seed",
                                     {"epoch": epoch, "iteration": it,
                                      "loss_primary": float(l_primary), "loss_secondary": float(l_secondary)})
            epoch_loss.append(float(loss))
            epoch_primary.append(float(l_primary))
            epoch_secondary.append(float(l_secondary))

            step = accumulator.add(mix_grads(g_primary, g_secondary, w))
            if step is not None:
                sgd_step(model, step, optimizer, lr)

        step = accumulator.flush()
        if step is not None:
            sgd_step(model, step, optimizer, lr)

        result = validate(model, world, config.threshold_target, strict=False)
        f1_target = None
        if dual:
            f1_target = float(np.mean([result.f1[t] for t in world.targets]))
        ckpt = EpochCheckpoint(epoch=epoch,
                               state=_snapshot(model, optimizer, model_config, epoch, generators),
                               mu_ap_val=result.mu_ap, threshold=result.threshold,
                               f1_target=f1_target, f1_val=result.f1,
                               score=selection_score(result.mu_ap, f1_target),
                               train_loss=float(np.mean(epoch_loss)))
        checkpoints.append(ckpt)
        if on_checkpoint is not None:
            on_checkpoint(ckpt)

        if logger is not None:
            logger.scalar_summary("epoch_train_loss", ckpt.train_loss, epoch)
            logger.scalar_summary("epoch_primary_loss", np.mean(epoch_primary), epoch)
            logger.scalar_summary("epoch_secondary_loss", np.mean(epoch_secondary), epoch)
            logger.scalar_summary("epoch_val_mu_ap", ckpt.mu_ap_val, epoch)
            logger.scalar_summary("epoch_score", ckpt.score, epoch)
            logger.scalar_summary("learning_rate", lr, epoch)
            if f1_target is not None:
                logger.scalar_summary("epoch_val_f1_target", f1_target, epoch)
            logger.histo_summary("final_layer_weights", model.fcfinal.weight.detach().numpy(), epoch)

        print('Epoch {} | train loss: {:.4f} | val muAP: {:.4f} | T: {:.4f} | F1 target: {} | score: {:.4f}'
              .format(epoch, ckpt.train_loss, ckpt.mu_ap_val, ckpt.threshold,
                      "n/a" if f1_target is None else "{:.3f}".format(f1_target), ckpt.score))
    return checkpoints
