import hashlib
import json
import os

import torch

from model.model import C_DTYPES, EmbeddingNet, ModelConfig

C_TOOL_VERSION = "0.1.0"
C_CHECKPOINT_VERSION = 1


def create_run_dir(out, run):
    """
    Creates the run directory <out>/<run> with its checkpoints, reports and
    tb sub-directories. Names are given explicitly so that reruns land in
    the same place.

    Example:
        > create_run_dir("runs", "dual_seed1")
        "runs/dual_seed1"
    """
    run_dir = os.path.join(out, run)
    for sub in ("checkpoints", "reports", "tb"):
        os.makedirs(os.path.join(run_dir, sub), exist_ok=True)
    return run_dir


def save_params(run_dir, params):
    """
    Save the parameters used for a run, only save non-function ones
    """
    saveable_params = {i: params[i] for i in params if not callable(params[i])}
    with open(os.path.join(run_dir, "params.json"), 'w') as f:
        json.dump(saveable_params, f, indent=2, sort_keys=True)
    return saveable_params


def state_digest(state):
    """
    sha256 over the tensors and values of a checkpoint state, visited in
    sorted key order so the digest only depends on content
    """
    h = hashlib.sha256()

    def _visit(prefix, value):
        if isinstance(value, dict):
            for k in sorted(value, key=str):
                _visit("{}/{}".format(prefix, k), value[k])
        elif isinstance(value, (list, tuple)):
            for i, v in enumerate(value):
                _visit("{}/{}".format(prefix, i), v)
        elif isinstance(value, torch.Tensor):
            h.update(prefix.encode())
            h.update(str(value.dtype).encode())
            h.update(str(tuple(value.shape)).encode())
            h.update(value.detach().contiguous().numpy().tobytes())
        else:
            h.update("{}={!r}".format(prefix, value).encode())

    _visit("", state)
    return h.hexdigest()


def save_checkpoint(run_dir, state):
    """
    Saves the model checkpoint of one epoch to checkpoints/epoch{i}.pth

    @param run_dir Run directory
    @param state Dictionary with epoch, model_config, model_state_dict,
        optimizer_state_dict, n_updates and rng_state
    @return Tuple (path relative to run_dir, sha256 state digest)
    """
    checkpoint_dir = os.path.join(run_dir, "checkpoints")
    os.makedirs(checkpoint_dir, exist_ok=True)
    relative = os.path.join("checkpoints", "epoch{}.pth".format(state["epoch"]))
    payload = dict(state, version=C_CHECKPOINT_VERSION)
    torch.save(payload, os.path.join(run_dir, relative))
    print("Saving checkpoint to {}".format(relative))
    return relative, state_digest(state)


def load_checkpoint(model_checkpoint, expected_digest=None):
    """
    Loads a checkpoint and rebuilds its model
    model_checkpoint: Path of the model_checkpoint that ends with .pth

    @param expected_digest When given, the state digest must match it
    @return Tuple (model, state)
    """
    if not os.path.exists(model_checkpoint):
        raise FileNotFoundError("checkpoint {} does not exist".format(model_checkpoint))
    state = torch.load(model_checkpoint, map_location="cpu")
    if state.pop("version", None) != C_CHECKPOINT_VERSION:
        raise ValueError("unsupported checkpoint version in {}".format(model_checkpoint))
    if expected_digest is not None and state_digest(state) != expected_digest:
        raise ValueError("checkpoint {} does not match its recorded digest".format(model_checkpoint))
    config = ModelConfig(**state["model_config"])
    model = EmbeddingNet(config).to(C_DTYPES[config.dtype])
    model.load_state_dict(state["model_state_dict"])
    model.n_updates = state["n_updates"]
    model.eval()
    return model, state


def write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
    return path


def read_json(path):
    if not os.path.exists(path):
        raise FileNotFoundError("{} does not exist".format(path))
    with open(path) as f:
        return json.load(f)


def make_manifest(config, seeds, checkpoints, best):
    """
    Run manifest: everything needed to re-execute the run, without
    timestamps or absolute paths

    @param config Config snapshot dictionary
    @param seeds Dictionary of seeds (world, train)
    @param checkpoints List of per-epoch dictionaries (metrics, path, digest)
    @param best Epoch number of the selected checkpoint
    """
    return {"tool_version": C_TOOL_VERSION,
            "config": config,
            "seeds": seeds,
            "epochs": checkpoints,
            "best_epoch": best}


def manifest_hash(manifest):
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()
