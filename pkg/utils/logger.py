"""
Helper class that manages tensorboard in pytorch

Example usage:
info = { 'loss': loss.item(), 'mu_ap': mu_ap }
for tag, value in info.items():
    logger.scalar_summary(tag, value, step+1)
"""
import numpy as np
from torch.utils.tensorboard import SummaryWriter


class Logger(object):

    def __init__(self, log_dir):
        """Create a summary writer logging to log_dir."""
        self.logdir = log_dir
        self.writer = SummaryWriter(log_dir=log_dir)

    def get_logdir(self):
        return self.logdir

    def scalar_summary(self, tag, value, step):
        """Log a scalar variable."""
        self.writer.add_scalar(tag, float(value), global_step=step)
        self.writer.flush()

    def histo_summary(self, tag, values, step, bins=1000):
        """Log a histogram of the tensor of values."""
        values = np.asarray(values)
        self.writer.add_histogram(tag, values, global_step=step, bins=min(bins, max(values.size, 1)))
        self.writer.flush()

    def close(self):
        self.writer.close()
