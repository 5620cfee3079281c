"""
Mean activations of the penultimate layer, exported as heatmap grids
"""
import math
import os

import numpy as np
import pandas as pd
import torch

from utils.hashing import as_vector, cosine_distance

C_HEATMAP_CLIP = 5.0


class ActivationRecorder():
    """
       Records the output of the model's penultimate block on every forward pass
    """
    def __init__(self, model):
        self.model = model
        self.outputs = []
        # Put model in evaluation mode
        self.model.eval()
        self.handle = self.model.features.register_forward_hook(self.hook_function)

    def hook_function(self, module, ten_in, ten_out):
        self.outputs.append(ten_out.detach())

    def remove(self):
        self.handle.remove()

    def record(self, items, batch_size=1024):
        """
            Runs the items through the model and returns the stacked activations

        Args:
            items (tensor): Inputs with shape (n, d_in)

        returns:
            activations (tensor): Penultimate outputs with shape (n, width)
        """
        self.outputs = []
        with torch.no_grad():
            for chunk in as_vector(items, dtype=self.model.fcfinal.weight.dtype).split(batch_size):
                self.model(chunk)
        return torch.cat(self.outputs)


def activation_stats(model, items):
    """
        Per-unit mean activation of the penultimate layer over items

    Args:
        model (EmbeddingNet): Trained model
        items (tensor): Nonempty inputs with shape (n, d_in)

    returns:
        means (tensor): Vector with one mean per penultimate unit
    """
    items = as_vector(items, dtype=model.fcfinal.weight.dtype)
    if items.dim() == 1:
        items = items.unsqueeze(0)
    if items.shape[0] == 0:
        raise ValueError("activation statistics need at least one item")
    recorder = ActivationRecorder(model)
    try:
        activations = recorder.record(items)
    finally:
        recorder.remove()
    return activations.mean(dim=0)


def heatmap_grid(means, clip=C_HEATMAP_CLIP):
    """
        Lays a mean-activation vector out on a near-square grid, clipped at clip

    Args:
        means (tensor): Vector of mean activations

    returns:
        grid (np arr): Array with ceil(sqrt(n)) columns, padded with NaN
    """
    values = np.minimum(as_vector(means).numpy(), clip)
    cols = max(1, math.ceil(math.sqrt(len(values))))
    rows = max(1, math.ceil(len(values) / cols))
    grid = np.full(rows * cols, np.nan)
    grid[:len(values)] = values
    return grid.reshape(rows, cols)


def export_heatmap(means, file_name, clip=C_HEATMAP_CLIP):
    """
        Exports the clipped activation grid as CSV for external plotting

    Args:
        means (tensor): Vector of mean activations
        file_name (str): CSV path to write
    """
    os.makedirs(os.path.dirname(os.path.abspath(file_name)), exist_ok=True)
    pd.DataFrame(heatmap_grid(means, clip)).to_csv(file_name, index=False, header=False)
    return file_name


def compare_activations(model, items_a, items_b):
    """ Cosine distance between the mean activations of two item sets """
    return float(cosine_distance(activation_stats(model, items_a), activation_stats(model, items_b)))
