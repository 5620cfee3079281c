"""
Contrastive loss with cross-batch memory (XBM).

The memory is a FIFO of the latest M embeddings and their integer labels.
The current batch is pushed before the loss is computed, so positives and
negatives are searched over a memory that contains the batch itself; the
self pair is excluded by index. Memory entries are constants: gradients
only flow into the batch embeddings.
"""
from collections import namedtuple

import torch

from utils.errors import ShapeError
from utils.hashing import C_DTYPE

C_MARGIN_POS = 0.0
C_MARGIN_NEG = 1.0

LossResult = namedtuple("LossResult", ["loss", "grads"])


class CrossBatchMemory(object):
    """ FIFO ring of the most recent `capacity` embeddings with labels
    """
    def __init__(self, capacity, dim, dtype=C_DTYPE):
        if capacity <= 0:
            raise ValueError("memory capacity must be positive, got {}".format(capacity))
        self.capacity = int(capacity)
        self.embeddings = torch.empty((0, dim), dtype=dtype)
        self.labels = torch.empty((0,), dtype=torch.int64)

    def __len__(self):
        return self.embeddings.shape[0]

    def state_dict(self):
        return {"capacity": self.capacity, "embeddings": self.embeddings.clone(),
                "labels": self.labels.clone()}

    def load_state_dict(self, state):
        self.capacity = int(state["capacity"])
        self.embeddings = state["embeddings"].clone()
        self.labels = state["labels"].clone()


def xbm_update(mem, embeddings, labels):
    """ Append a batch to the memory, evicting the oldest entries beyond capacity

    @param mem CrossBatchMemory, updated in place and returned
    @param embeddings Tensor (b, l); stored detached
    @param labels Integer labels, length b
    """
    embeddings = torch.as_tensor(embeddings, dtype=mem.embeddings.dtype)
    labels = torch.as_tensor(labels, dtype=torch.int64)
    if embeddings.dim() != 2 or embeddings.shape[0] != labels.shape[0]:
        raise ShapeError("got {} embeddings for {} labels".format(embeddings.shape[0], labels.shape[0]))
    if embeddings.shape[1] != mem.embeddings.shape[1]:
        raise ShapeError("memory holds length {}, got {}".format(mem.embeddings.shape[1], embeddings.shape[1]))
    mem.embeddings = torch.cat([mem.embeddings, embeddings.detach()])[-mem.capacity:]
    mem.labels = torch.cat([mem.labels, labels])[-mem.capacity:]
    return mem


def contrastive_loss_xbm(embeddings, labels, mem, m_p=C_MARGIN_POS, m_n=C_MARGIN_NEG):
    """ Contrastive loss of a batch against the memory, with gradients

    For batch embedding E_i, positives are memory entries with the same
    label, other than E_i itself, further than m_p; negatives are entries
    with another label closer than m_n. Per-embedding terms average
    (d - m_p) over positives and (m_n - d) over negatives, an empty set
    contributing 0, and the loss averages over the batch.

    @param embeddings Tensor (b, l), the batch as already pushed to `mem`
    @param labels Integer labels of the batch
    @param mem CrossBatchMemory containing the batch as its newest entries
    @param m_p Positive margin
    @param m_n Negative margin, larger than m_p
    @return LossResult(loss, grads) with a scalar loss tensor and the
        gradient of the loss w.r.t. each batch embedding, shape (b, l)
    """
    batch = torch.as_tensor(embeddings, dtype=mem.embeddings.dtype).detach().requires_grad_(True)
    labels = torch.as_tensor(labels, dtype=torch.int64)
    b = batch.shape[0]
    if b == 0:
        raise ValueError("cannot compute the loss of an empty batch")
    if labels.shape[0] != b:
        raise ShapeError("got {} embeddings for {} labels".format(b, labels.shape[0]))
    if not m_n > m_p >= 0:
        raise ValueError("margins must satisfy m_n > m_p >= 0, got m_p={} m_n={}".format(m_p, m_n))

    dist = torch.cdist(batch, mem.embeddings, compute_mode="donot_use_mm_for_euclid_dist")
    same = labels[:, None] == mem.labels[None, :]

    # the batch sits at the tail of the memory; rows pushed out by a tiny
    # capacity have no self entry
    not_self = torch.ones_like(same)
    rows = torch.arange(b)
    cols = len(mem) - b + rows
    kept = cols >= 0
    not_self[rows[kept], cols[kept]] = False

    with torch.no_grad():
        pos = same & not_self & (dist > m_p)
        neg = ~same & (dist < m_n)
    zero = torch.zeros((), dtype=dist.dtype)
    pos_term = torch.where(pos, dist - m_p, zero).sum(dim=1) / pos.sum(dim=1).clamp(min=1)
    neg_term = torch.where(neg, m_n - dist, zero).sum(dim=1) / neg.sum(dim=1).clamp(min=1)
    loss = (pos_term + neg_term).sum() / b

    grads, = torch.autograd.grad(loss, batch)
    return LossResult(loss.detach(), grads)
