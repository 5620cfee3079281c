"""
Hash types, distances and LSH binarization.

Continuous hashes (embeddings) are float64 torch tensors of length l.
Binary hashes are bool tensors of length l_b. Every function accepts
either a single vector or a batch of row vectors.
"""
import torch

from utils.errors import DegenerateEmbeddingError, ShapeError

C_DTYPE = torch.float64
C_LSH_BITS = 256


def as_vector(v, dtype=C_DTYPE):
    """ Convert any array-like to a float tensor of the working precision
    """
    if isinstance(v, torch.Tensor):
        return v.to(dtype=dtype)
    return torch.as_tensor(v, dtype=dtype)


def as_bits(b):
    """ Convert an array-like of 0/1 or booleans to a bool tensor
    """
    if isinstance(b, str):
        b = [int(c) for c in b]
    return torch.as_tensor(b).to(dtype=torch.bool)


def _check_same_length(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError("length mismatch: {} vs {}".format(a.shape[-1], b.shape[-1]))


def l2_normalize(v):
    """ Scale v (or every row of v) to unit L2 norm

    @param v Vector of length l, or matrix of shape (n, l)
    @return Unit-norm embedding(s) with the same direction
    """
    v = as_vector(v)
    norm = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    if torch.any(norm == 0):
        raise DegenerateEmbeddingError("cannot normalize a zero-norm vector")
    return v / norm


def euclidean(a, b):
    """ Euclidean distance between two embeddings (row-wise for batches)
    """
    a, b = as_vector(a), as_vector(b)
    _check_same_length(a, b)
    return torch.linalg.vector_norm(a - b, dim=-1)


def hamming(a, b):
    """ Number of differing bits between two binary hashes
    """
    a, b = as_bits(a), as_bits(b)
    _check_same_length(a, b)
    return torch.count_nonzero(a != b, dim=-1)


def cosine_distance(a, b):
    """ 1 - cosine similarity, in [0, 2]
    """
    a, b = as_vector(a), as_vector(b)
    _check_same_length(a, b)
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if torch.any(na == 0) or torch.any(nb == 0):
        raise DegenerateEmbeddingError("cosine distance is undefined for zero vectors")
    cos = (a * b).sum(dim=-1) / (na * nb)
    return 1.0 - cos.clamp(-1.0, 1.0)


def pairwise_distances(queries, references, kind="euclidean"):
    """ Distance matrix between two sets of hashes

    @param queries Tensor of shape (n, l)
    @param references Tensor of shape (m, l)
    @param kind 'euclidean' for continuous hashes, 'hamming' for binary ones
    @return Tensor of shape (n, m); float64 for euclidean, int64 for hamming
    """
    if kind == "hamming":
        q, r = as_bits(queries), as_bits(references)
        _check_same_length(q, r)
        if q.shape[0] == 0 or r.shape[0] == 0:
            return torch.zeros((q.shape[0], r.shape[0]), dtype=torch.int64)
        # p=0 counts nonzero coordinate differences
        return torch.cdist(q.to(C_DTYPE), r.to(C_DTYPE), p=0).round().to(torch.int64)
    q, r = as_vector(queries), as_vector(references)
    _check_same_length(q, r)
    if q.shape[0] == 0 or r.shape[0] == 0:
        return torch.zeros((q.shape[0], r.shape[0]), dtype=C_DTYPE)
    return torch.cdist(q, r, compute_mode="donot_use_mm_for_euclid_dist")


class LshProjector(object):
    """ Gaussian random projection followed by the Heaviside step

    The projection matrix has shape (l_b, l) and is drawn i.i.d. standard
    normal from a generator seeded with `seed`, so the same seed always
    rebuilds the same matrix.
    """
    def __init__(self, l, l_b=C_LSH_BITS, seed=0, matrix=None):
        self.seed = seed
        if matrix is None:
            generator = torch.Generator().manual_seed(seed)
            matrix = torch.randn((l_b, l), generator=generator, dtype=C_DTYPE)
        self.matrix = as_vector(matrix)

    @property
    def n_bits(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]

    def __call__(self, e):
        return lsh_binarize(self, e)


def lsh_binarize(projector, e):
    """ Bit j is 1 iff row_j . e >= 0

    @param projector LshProjector with `dim` equal to the embedding length
    @param e Embedding of length l or matrix (n, l)
    @return Bool tensor of length l_b (or shape (n, l_b))
    """
    e = as_vector(e)
    if e.shape[-1] != projector.dim:
        raise ShapeError("projector expects length {}, got {}".format(projector.dim, e.shape[-1]))
    return (e @ projector.matrix.T) >= 0


def bits_to_hex(bits):
    """ Lowercase hex, most-significant bit first
    """
    bits = as_bits(bits).tolist()
    n_digits = (len(bits) + 3) // 4
    value = 0
    for bit in bits:
        value = (value << 1) | int(bit)
    return format(value, "0{}x".format(n_digits))


def hex_to_bits(hex_string, n_bits):
    """ Inverse of bits_to_hex for a hash of n_bits bits
    """
    value = int(hex_string, 16)
    if value >> n_bits:
        raise ShapeError("hex value {} does not fit in {} bits".format(hex_string, n_bits))
    return torch.tensor([(value >> (n_bits - 1 - i)) & 1 for i in range(n_bits)], dtype=torch.bool)
