import collections
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
from torch.optim import SGD

from utils.errors import ShapeError, StaleCacheError
from utils.hashing import as_vector, l2_normalize

# Constants
C_BN_MOMENTUM = 0.1
# SGD defaults (initial lr, decay, floor, weight decay, momentum)
C_ETA = 0.1
C_GAMMA = 0.9
C_ETA_MIN = 0.05
C_WEIGHT_DECAY = 1e-6
C_MOMENTUM = 0.9

C_DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass
class ModelConfig:
    d_in: int = 64
    l: int = 32
    hidden_sizes: list = field(default_factory=lambda: [128])
    bn_momentum: float = C_BN_MOMENTUM
    dtype: str = "float64"

    def validate(self):
        if self.d_in <= 0 or self.l <= 0 or any(h <= 0 for h in self.hidden_sizes):
            raise ShapeError("model dimensions must be positive: d_in={} l={} hidden={}"
                             .format(self.d_in, self.l, self.hidden_sizes))
        if self.dtype not in C_DTYPES:
            raise ShapeError("unsupported dtype {}".format(self.dtype))

    def as_dict(self):
        return asdict(self)


class EmbeddingNet(nn.Module):
    """ Embedding network: (affine -> relu -> running-stats standardization)
    per hidden layer, then a final affine layer and L2 normalization.

    With no hidden layers the model is a single affine map followed by
    the normalization. A row whose pre-normalization output is exactly
    zero (every hidden unit dead and a zero final bias) embeds as the
    first basis vector and passes no gradient back.
    """
    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        layers = collections.OrderedDict()
        prev = config.d_in
        for i, size in enumerate(config.hidden_sizes, start=1):
            layers['fc{}'.format(i)] = nn.Linear(prev, size)
            layers['relu{}'.format(i)] = nn.ReLU()
            layers['bn{}'.format(i)] = nn.BatchNorm1d(size, momentum=config.bn_momentum)
            prev = size
        self.features = nn.Sequential(layers)
        self.fcfinal = nn.Linear(prev, config.l)
        # number of optimizer steps applied, used to detect stale caches
        self.n_updates = 0

    def penultimate(self, x):
        return self.features(x)

    def forward(self, x):
        z = self.fcfinal(self.features(x))
        # rows with every unit dead embed as the first basis vector, with zero gradient
        dead = torch.linalg.vector_norm(z.detach(), dim=-1, keepdim=True) == 0
        if dead.any():
            basis = torch.zeros_like(z)
            basis[..., 0] = 1.0
            z = torch.where(dead, basis, z)
        return l2_normalize(z)


def init_params(config, seed):
    """ Build a model with Xavier-normal weights and zero biases

    Running statistics start at mean 0 / variance 1. Initialization only
    touches a forked RNG, so the global torch seed is left alone.
    """
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = EmbeddingNet(config).to(C_DTYPES[config.dtype])
        for module in model.modules():
            if isinstance(module, nn.Linear):
                nn.init.xavier_normal_(module.weight)
                nn.init.zeros_(module.bias)
    return model


class ForwardCache(object):
    """ Intermediates of one forward call, consumed by `backward`
    """
    def __init__(self, model, inputs, outputs, single):
        self.model = model
        self.inputs = inputs
        self.outputs = outputs
        self.single = single
        self.version = model.n_updates
        self.consumed = False


def forward(model, x, mode="eval"):
    """ Embed one vector or a batch of row vectors

    @param model EmbeddingNet
    @param x Vector of length d_in or matrix (n, d_in)
    @param mode 'train' (batch statistics, running stats updated) or
        'eval' (running stats read only)
    @return Tuple (embedding(s), cache)
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval', got {}".format(mode))
    x = as_vector(x, dtype=model.fcfinal.weight.dtype)
    single = x.dim() == 1
    if single:
        x = x.unsqueeze(0)
    if x.shape[-1] != model.config.d_in:
        raise ShapeError("model expects inputs of length {}, got {}".format(model.config.d_in, x.shape[-1]))
    if mode == "train" and model.config.hidden_sizes and x.shape[0] < 2:
        raise ShapeError("train-mode standardization needs a batch of at least 2 inputs")

    model.train(mode == "train")
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        out = model(x)
    cache = ForwardCache(model, x, out, single)
    emb = out.detach()
    return (emb[0] if single else emb), cache


def embed(model, x, batch_size=1024):
    """ Eval-mode embeddings of many inputs, without building a graph
    """
    x = as_vector(x, dtype=model.fcfinal.weight.dtype)
    if x.shape[0] == 0:
        return torch.empty((0, model.config.l), dtype=x.dtype)
    model.eval()
    with torch.no_grad():
        return torch.cat([model(chunk) for chunk in x.split(batch_size)])


def backward(cache, grad_out):
    """ Chain grad_out (d loss / d embedding) through the model

    @param cache ForwardCache from a forward call on the current parameters
    @param grad_out Tensor shaped like the forward output
    @return Tuple (OrderedDict name -> parameter gradient, input gradient)
    """
    model = cache.model
    if cache.consumed:
        raise StaleCacheError("forward cache was already used by a backward pass")
    if cache.version != model.n_updates:
        raise StaleCacheError("parameters changed since the forward pass ({} -> {} updates)"
                              .format(cache.version, model.n_updates))
    grad_out = torch.as_tensor(grad_out, dtype=cache.outputs.dtype)
    if cache.single:
        grad_out = grad_out.unsqueeze(0)
    if grad_out.shape != cache.outputs.shape:
        raise ShapeError("grad_out has shape {}, expected {}".format(tuple(grad_out.shape), tuple(cache.outputs.shape)))

    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    params = [p for _, p in named]
    grads = torch.autograd.grad(cache.outputs, params + [cache.inputs],
                                grad_outputs=grad_out, allow_unused=True)
    cache.consumed = True
    param_grads = collections.OrderedDict()
    for (name, p), g in zip(named, grads[:-1]):
        param_grads[name] = torch.zeros_like(p) if g is None else g
    input_grad = torch.zeros_like(cache.inputs) if grads[-1] is None else grads[-1]
    return param_grads, (input_grad[0] if cache.single else input_grad)


def lr_at_epoch(eta, gamma, eta_min, epoch):
    """ Learning rate for a 1-based epoch: eta * gamma^(epoch-1), floored at eta_min
    """
    if epoch < 1:
        raise ValueError("epochs are 1-based, got {}".format(epoch))
    return max(eta * gamma ** (epoch - 1), eta_min)


def get_optimizer(model, eta=C_ETA, weight_decay=C_WEIGHT_DECAY, momentum=C_MOMENTUM):
    """ SGD with coupled weight decay and heavy-ball momentum
    """
    return SGD(model.parameters(), lr=eta, momentum=momentum, weight_decay=weight_decay)


def sgd_step(model, grads, optimizer, lr):
    """ Apply one optimizer step with explicit gradients

    Implements g' = g + wd * theta; v <- mu * v + g'; theta <- theta - lr * v.

    @param model EmbeddingNet
    @param grads Mapping parameter name -> gradient tensor
    @param optimizer Optimizer from get_optimizer
    @param lr Learning rate for this step
    """
    params = dict(model.named_parameters())
    if set(grads) != set(params):
        raise ShapeError("gradients given for {}, model has {}".format(sorted(grads), sorted(params)))
    for name, p in params.items():
        g = torch.as_tensor(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ShapeError("gradient for {} has shape {}, expected {}".format(name, tuple(g.shape), tuple(p.shape)))
        p.grad = g.clone()
    for group in optimizer.param_groups:
        group['lr'] = lr
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    model.n_updates += 1
    return model
